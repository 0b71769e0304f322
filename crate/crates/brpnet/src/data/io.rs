//! Dataset directory layout: `images/<stem>.png` (8-bit RGB) paired with
//! `labels/<stem>.png` (16-bit single-channel instance maps, 0 = background).

use std::collections::BTreeMap;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::core::{Grid, InstanceMap, RgbImage};
use crate::{Error, Result};

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.w() as u32, img.h() as u32, raw)
            .expect("image buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_instance_map(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = match img {
        DynamicImage::ImageLuma16(g) => g,
        other => other.to_luma16(),
    };
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v as u32).collect();
    Ok(InstanceMap(Grid::from_vec(h as usize, w as usize, data)))
}

pub fn save_instance_map(path: &Path, m: &InstanceMap) -> Result<()> {
    if m.max_label() > u16::MAX as u32 {
        return Err(Error::InvalidArgument(format!(
            "instance map has {} labels; 16-bit PNG caps at 65535",
            m.max_label()
        )));
    }
    let raw: Vec<u16> = m.grid().data().iter().map(|&v| v as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(m.w() as u32, m.h() as u32, raw).expect("label buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn stems_of(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("unreadable file name in {}", dir.display())))?
                .to_string();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Loads image/label pairs by filename stem, sorted by stem. Orphans on
/// either side are an error naming the stem.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, RgbImage, InstanceMap)>> {
    let images = stems_of(&dir.join("images"))?;
    let labels = stems_of(&dir.join("labels"))?;
    for stem in images.keys() {
        if !labels.contains_key(stem) {
            return Err(Error::Dataset(format!("image {stem} has no label file")));
        }
    }
    for stem in labels.keys() {
        if !images.contains_key(stem) {
            return Err(Error::Dataset(format!("label {stem} has no image file")));
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, img_path) in images {
        let image = load_image(&img_path)?;
        let map = load_instance_map(&labels[&stem])?;
        if (image.h(), image.w()) != (map.h(), map.w()) {
            return Err(Error::Dataset(format!(
                "{stem}: image {}x{} vs label {}x{}",
                image.h(),
                image.w(),
                map.h(),
                map.w()
            )));
        }
        out.push((stem, image, map));
    }
    Ok(out)
}

/// Writes predicted instance maps in the dataset label format.
pub fn save_predictions(dir: &Path, preds: &[(String, InstanceMap)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (stem, m) in preds {
        save_instance_map(&dir.join(format!("{stem}.png")), m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("brp_io_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("labels")).unwrap();
        dir
    }

    fn checker_image(h: usize, w: usize) -> RgbImage {
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                let v = ((r + c) % 2) as f32;
                img.set_pixel(r, c, [v, 1.0 - v, 0.5]);
            }
        }
        img
    }

    #[test]
    fn sixteen_bit_mask_round_trips() {
        let dir = tmp("roundtrip");
        let mut g = Grid::filled(9, 11, 0u32);
        g.set(0, 0, 1);
        g.set(5, 5, 40000);
        let m = InstanceMap(g);
        let path = dir.join("labels/a.png");
        save_instance_map(&path, &m).unwrap();
        let back = load_instance_map(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn well_formed_dir_loads_pairs() {
        let dir = tmp("pairs");
        for stem in ["a", "b"] {
            save_image(&dir.join(format!("images/{stem}.png")), &checker_image(16, 16)).unwrap();
            save_instance_map(
                &dir.join(format!("labels/{stem}.png")),
                &InstanceMap::zeros(16, 16),
            )
            .unwrap();
        }
        let ds = load_dataset(&dir).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].0, "a");
        assert_eq!(ds[1].0, "b");
    }

    #[test]
    fn orphan_image_is_named_in_error() {
        let dir = tmp("orphan");
        save_image(&dir.join("images/lonely.png"), &checker_image(8, 8)).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(err.to_string().contains("lonely"), "{err}");
    }

    #[test]
    fn oversized_labels_rejected() {
        let dir = tmp("oversize");
        let mut g = Grid::filled(4, 4, 0u32);
        g.set(0, 0, 70000);
        assert!(save_instance_map(&dir.join("labels/x.png"), &InstanceMap(g)).is_err());
    }
}
