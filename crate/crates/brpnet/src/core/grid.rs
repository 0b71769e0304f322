//! Dense row-major 2-D grid, the storage behind every map type.

/// Row-major H×W grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w, "grid data length {} != {}x{}", data.len(), h, w);
        Grid { h, w, data }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.w + c] = value;
    }

    /// Value at (r, c) for possibly out-of-bounds signed coordinates.
    #[inline]
    pub fn get_signed(&self, r: i64, c: i64) -> Option<T> {
        if r < 0 || c < 0 || r as usize >= self.h || c as usize >= self.w {
            None
        } else {
            Some(self.get(r as usize, c as usize))
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.w..(r + 1) * self.w]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn iter_pixels(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.w;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i / w, i % w, v))
    }
}

/// Axis-aligned box in (row, col, height, width) form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

impl BBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r0 + self.h && c >= self.c0 && c < self.c0 + self.w
    }

    /// Tight box around the foreground of `mask`, if any.
    pub fn of_mask(mask: &Grid<u8>) -> Option<BBox> {
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for (r, c, v) in mask.iter_pixels() {
            if v != 0 {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
        if rmin == usize::MAX {
            None
        } else {
            Some(BBox {
                r0: rmin,
                c0: cmin,
                h: rmax - rmin + 1,
                w: cmax - cmin + 1,
            })
        }
    }
}

/// Bilinear resize with the half-pixel-center convention; exact identity when
/// the shapes already match.
pub fn resize_bilinear(src: &Grid<f32>, out_h: usize, out_w: usize) -> Grid<f32> {
    if src.h() == out_h && src.w() == out_w {
        return src.clone();
    }
    let sr = src.h() as f64 / out_h as f64;
    let sc = src.w() as f64 / out_w as f64;
    let mut out = Grid::filled(out_h, out_w, 0.0f32);
    for r in 0..out_h {
        let fr = ((r as f64 + 0.5) * sr - 0.5).clamp(0.0, (src.h() - 1) as f64);
        let r0 = fr.floor() as usize;
        let r1 = (r0 + 1).min(src.h() - 1);
        let ar = (fr - r0 as f64) as f32;
        for c in 0..out_w {
            let fc = ((c as f64 + 0.5) * sc - 0.5).clamp(0.0, (src.w() - 1) as f64);
            let c0 = fc.floor() as usize;
            let c1 = (c0 + 1).min(src.w() - 1);
            let ac = (fc - c0 as f64) as f32;
            let top = src.get(r0, c0) * (1.0 - ac) + src.get(r0, c1) * ac;
            let bot = src.get(r1, c0) * (1.0 - ac) + src.get(r1, c1) * ac;
            out.set(r, c, top * (1.0 - ar) + bot * ar);
        }
    }
    out
}

/// Nearest-neighbor resize, used for label-valued grids.
pub fn resize_nearest<T: Copy>(src: &Grid<T>, out_h: usize, out_w: usize) -> Grid<T> {
    let sr = src.h() as f64 / out_h as f64;
    let sc = src.w() as f64 / out_w as f64;
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let fr = (((r as f64 + 0.5) * sr - 0.5).round()).clamp(0.0, (src.h() - 1) as f64) as usize;
        for c in 0..out_w {
            let fc =
                (((c as f64 + 0.5) * sc - 0.5).round()).clamp(0.0, (src.w() - 1) as f64) as usize;
            data.push(src.get(fr, fc));
        }
    }
    Grid::from_vec(out_h, out_w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_exact() {
        let g = Grid::from_vec(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let r = resize_bilinear(&g, 2, 3);
        assert_eq!(g, r);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let g = Grid::filled(4, 4, 0.7f32);
        let r = resize_bilinear(&g, 11, 7);
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn bbox_of_mask() {
        let mut m = Grid::filled(5, 5, 0u8);
        m.set(1, 2, 1);
        m.set(3, 4, 1);
        assert_eq!(
            BBox::of_mask(&m),
            Some(BBox {
                r0: 1,
                c0: 2,
                h: 3,
                w: 3
            })
        );
        let empty = Grid::filled(3, 3, 0u8);
        assert_eq!(BBox::of_mask(&empty), None);
    }
}
