//! Stride-1 2-D convolution via per-chunk im2col + GEMM, with the matching
//! backward passes. Chunking is derived from the output shape alone so
//! results are bitwise identical regardless of thread count.

use rayon::prelude::*;

use super::tensor::{Elem, Tensor};

/// Number of row chunks for an output of `rows` rows.
fn n_chunks(rows: usize) -> usize {
    rows.min(4)
}

fn chunk_ranges(rows: usize) -> Vec<(usize, usize)> {
    let n = n_chunks(rows);
    let per = rows.div_ceil(n);
    (0..n)
        .map(|i| (i * per, ((i + 1) * per).min(rows)))
        .filter(|(a, b)| a < b)
        .collect()
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Fills `cols` ([c_in*k*k, (y1-y0)*w_out] row-major) with the im2col
/// expansion of rows y0..y1 of the output grid.
#[allow(clippy::too_many_arguments)]
fn im2col_chunk<T: Elem>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    y0: usize,
    y1: usize,
    w_out: usize,
    cols: &mut [T],
) {
    let npx = (y1 - y0) * w_out;
    for ci in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst_row = &mut cols[row * npx..(row + 1) * npx];
                for y in y0..y1 {
                    let sy = y as i64 + kh as i64 - pad as i64;
                    let dst = &mut dst_row[(y - y0) * w_out..(y - y0 + 1) * w_out];
                    if sy < 0 || sy as usize >= h {
                        dst.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let sy = sy as usize;
                    // x range with in-bounds source column sx = xo + kw - pad.
                    let lo = pad.saturating_sub(kw).min(w_out);
                    let hi = (w + pad - kw).min(w_out).max(lo);
                    dst[..lo].iter_mut().for_each(|v| *v = T::ZERO);
                    dst[hi..].iter_mut().for_each(|v| *v = T::ZERO);
                    if hi > lo {
                        let src0 = sy * w + (lo + kw - pad);
                        dst[lo..hi].copy_from_slice(&x[ci * h * w + src0..ci * h * w + src0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is [c_in, h, w], `w_t` is [c_out, c_in, k, k];
/// output is [c_out, h+2p-k+1, w+2p-k+1].
pub fn conv2d_fwd<T: Elem>(x: &Tensor<T>, w_t: &Tensor<T>, bias: Option<&[T]>, pad: usize) -> Tensor<T> {
    let (c_in, h, w) = x.dims3();
    let ws = w_t.shape();
    assert_eq!(ws.len(), 4, "weight must be [c_out, c_in, k, k]");
    assert_eq!(ws[1], c_in, "weight c_in mismatch");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let (c_out, k) = (ws[0], ws[2]);
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    let h_out = h + 2 * pad - k + 1;
    let w_out = w + 2 * pad - k + 1;
    let mut out = Tensor::zeros(&[c_out, h_out, w_out]);

    if k == 1 && pad == 0 {
        // Plain channel mixing: out[c_out, hw] = W[c_out, c_in] x x[c_in, hw].
        let hw = h * w;
        unsafe {
            T::gemm(
                c_out,
                c_in,
                hw,
                T::ONE,
                w_t.data().as_ptr(),
                c_in as isize,
                1,
                x.data().as_ptr(),
                hw as isize,
                1,
                T::ZERO,
                out.data_mut().as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    } else {
        let ckk = c_in * k * k;
        let plane = h_out * w_out;
        let out_ptr = SendPtr(out.data_mut().as_mut_ptr());
        let xs = x.data();
        let wd = w_t.data();
        chunk_ranges(h_out).into_par_iter().for_each(|(y0, y1)| {
            let _ = &out_ptr;
            let npx = (y1 - y0) * w_out;
            let mut cols = vec![T::ZERO; ckk * npx];
            im2col_chunk(xs, c_in, h, w, k, pad, y0, y1, w_out, &mut cols);
            // SAFETY: chunks write disjoint column ranges of each output row.
            unsafe {
                T::gemm(
                    c_out,
                    ckk,
                    npx,
                    T::ONE,
                    wd.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    npx as isize,
                    1,
                    T::ZERO,
                    out_ptr.0.add(y0 * w_out),
                    plane as isize,
                    1,
                );
            }
        });
    }

    if let Some(b) = bias {
        assert_eq!(b.len(), c_out);
        let plane = h_out * w_out;
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out.data_mut()[co * plane..(co + 1) * plane] {
                *v += bv;
            }
        }
    }
    out
}

/// Weight gradient: dW = g · im2col(x)ᵀ, accumulated over fixed-order chunks.
pub fn conv2d_grad_w<T: Elem>(x: &Tensor<T>, g: &Tensor<T>, c_out: usize, k: usize, pad: usize) -> Tensor<T> {
    let (c_in, h, w) = x.dims3();
    let (gc, h_out, w_out) = g.dims3();
    assert_eq!(gc, c_out);
    let ckk = c_in * k * k;
    let plane = h_out * w_out;
    let gd = g.data();
    let xs = x.data();

    let partials: Vec<Vec<T>> = chunk_ranges(h_out)
        .into_par_iter()
        .map(|(y0, y1)| {
            let npx = (y1 - y0) * w_out;
            let mut cols = vec![T::ZERO; ckk * npx];
            im2col_chunk(xs, c_in, h, w, k, pad, y0, y1, w_out, &mut cols);
            let mut partial = vec![T::ZERO; c_out * ckk];
            // dW_chunk = g[:, y0..y1] (c_out x npx) · colsᵀ (npx x ckk)
            unsafe {
                T::gemm(
                    c_out,
                    npx,
                    ckk,
                    T::ONE,
                    gd.as_ptr().add(y0 * w_out),
                    plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    npx as isize,
                    T::ZERO,
                    partial.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
            partial
        })
        .collect();

    let mut dw = Tensor::zeros(&[c_out, c_in, k, k]);
    for partial in partials {
        for (d, s) in dw.data_mut().iter_mut().zip(&partial) {
            *d += *s;
        }
    }
    dw
}

/// Bias gradient: per-output-channel sum of g.
pub fn conv2d_grad_b<T: Elem>(g: &Tensor<T>) -> Vec<T> {
    let (c_out, h, w) = g.dims3();
    let plane = h * w;
    (0..c_out)
        .map(|co| {
            let mut acc = T::ZERO;
            for &v in &g.data()[co * plane..(co + 1) * plane] {
                acc += v;
            }
            acc
        })
        .collect()
}

/// Input gradient: convolution of g with the flipped, channel-transposed
/// kernel (full correlation), pad' = k - 1 - pad.
pub fn conv2d_grad_x<T: Elem>(w_t: &Tensor<T>, g: &Tensor<T>, pad: usize) -> Tensor<T> {
    let ws = w_t.shape();
    let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
    let mut flipped = Tensor::zeros(&[c_in, c_out, k, k]);
    {
        let src = w_t.data();
        let dst = flipped.data_mut();
        for co in 0..c_out {
            for ci in 0..c_in {
                for kh in 0..k {
                    for kw in 0..k {
                        dst[((ci * c_out + co) * k + (k - 1 - kh)) * k + (k - 1 - kw)] =
                            src[((co * c_in + ci) * k + kh) * k + kw];
                    }
                }
            }
        }
    }
    conv2d_fwd(g, &flipped, None, k - 1 - pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal nested-loop convolution for checking the GEMM path.
    fn conv_naive(x: &Tensor<f64>, w_t: &Tensor<f64>, bias: Option<&[f64]>, pad: usize) -> Tensor<f64> {
        let (c_in, h, w) = x.dims3();
        let ws = w_t.shape();
        let (c_out, k) = (ws[0], ws[2]);
        let h_out = h + 2 * pad - k + 1;
        let w_out = w + 2 * pad - k + 1;
        let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                let sy = oy as i64 + kh as i64 - pad as i64;
                                let sx = ox as i64 + kw as i64 - pad as i64;
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                acc += x.data()[(ci * h + sy as usize) * w + sx as usize]
                                    * w_t.data()[((co * c_in + ci) * k + kh) * k + kw];
                            }
                        }
                    }
                    out.data_mut()[(co * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
        out
    }

    fn arb_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn gemm_conv_matches_naive() {
        for (c_in, c_out, k, pad, h, w) in [
            (1usize, 1usize, 3usize, 1usize, 5usize, 7usize),
            (3, 4, 3, 1, 9, 9),
            (2, 3, 7, 3, 11, 13),
            (4, 2, 1, 0, 6, 6),
        ] {
            let x = arb_tensor(&[c_in, h, w], 1 + k as u64);
            let wt = arb_tensor(&[c_out, c_in, k, k], 99 + k as u64);
            let b: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1 - 0.2).collect();
            let got = conv2d_fwd(&x, &wt, Some(&b), pad);
            let want = conv_naive(&x, &wt, Some(&b), pad);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-9, "conv mismatch {a} vs {e}");
            }
        }
    }

    #[test]
    fn grad_w_matches_finite_difference_of_forward() {
        let (c_in, c_out, k, pad, h, w) = (2usize, 2usize, 3usize, 1usize, 6usize, 5usize);
        let x = arb_tensor(&[c_in, h, w], 3);
        let mut wt = arb_tensor(&[c_out, c_in, k, k], 17);
        // Scalar loss = sum(conv(x, w)); dL/dw via conv2d_grad_w with g = ones.
        let ones = Tensor::from_vec(&[c_out, h, w], vec![1.0; c_out * h * w]);
        let dw = conv2d_grad_w(&x, &ones, c_out, k, pad);
        let hstep = 1e-6;
        for i in [0usize, 5, 12, 35] {
            let orig = wt.data()[i];
            wt.data_mut()[i] = orig + hstep;
            let fp: f64 = conv2d_fwd(&x, &wt, None, pad).data().iter().sum();
            wt.data_mut()[i] = orig - hstep;
            let fm: f64 = conv2d_fwd(&x, &wt, None, pad).data().iter().sum();
            wt.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * hstep);
            assert!((fd - dw.data()[i]).abs() < 1e-6, "dw[{i}]: {fd} vs {}", dw.data()[i]);
        }
    }

    #[test]
    fn grad_x_matches_finite_difference_of_forward() {
        let (c_in, c_out, k, pad, h, w) = (2usize, 3usize, 3usize, 1usize, 5usize, 6usize);
        let mut x = arb_tensor(&[c_in, h, w], 23);
        let wt = arb_tensor(&[c_out, c_in, k, k], 61);
        let ones = Tensor::from_vec(&[c_out, h, w], vec![1.0; c_out * h * w]);
        let dx = conv2d_grad_x(&wt, &ones, pad);
        let hstep = 1e-6;
        for i in [0usize, 7, 29, 44] {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + hstep;
            let fp: f64 = conv2d_fwd(&x, &wt, None, pad).data().iter().sum();
            x.data_mut()[i] = orig - hstep;
            let fm: f64 = conv2d_fwd(&x, &wt, None, pad).data().iter().sum();
            x.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * hstep);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}]: {fd} vs {}", dx.data()[i]);
        }
    }
}
