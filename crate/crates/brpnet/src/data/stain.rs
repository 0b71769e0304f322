//! Reinhard-style stain normalization: per-channel mean/std transfer in the
//! decorrelated lαβ color space.

use crate::core::RgbImage;

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

/// Exact inverse of RGB_TO_LMS (the published 4-digit inverse leaves ~5e-4
/// round-trip error, which breaks the fixed-point tolerance).
fn lms_to_rgb_matrix() -> [[f64; 3]; 3] {
    let m = &RGB_TO_LMS;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = |a: f64, b: f64, c: f64, d: f64| (a * d - b * c) / det;
    [
        [
            inv(m[1][1], m[1][2], m[2][1], m[2][2]),
            -inv(m[0][1], m[0][2], m[2][1], m[2][2]),
            inv(m[0][1], m[0][2], m[1][1], m[1][2]),
        ],
        [
            -inv(m[1][0], m[1][2], m[2][0], m[2][2]),
            inv(m[0][0], m[0][2], m[2][0], m[2][2]),
            -inv(m[0][0], m[0][2], m[1][0], m[1][2]),
        ],
        [
            inv(m[1][0], m[1][1], m[2][0], m[2][1]),
            -inv(m[0][0], m[0][1], m[2][0], m[2][1]),
            inv(m[0][0], m[0][1], m[1][0], m[1][1]),
        ],
    ]
}

const LMS_FLOOR: f64 = 1e-6;

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn rgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lms = mat_mul(&RGB_TO_LMS, [rgb[0] as f64, rgb[1] as f64, rgb[2] as f64]);
    let log = [
        lms[0].max(LMS_FLOOR).log10(),
        lms[1].max(LMS_FLOOR).log10(),
        lms[2].max(LMS_FLOOR).log10(),
    ];
    let s3 = 1.0 / 3f64.sqrt();
    let s6 = 1.0 / 6f64.sqrt();
    let s2 = 1.0 / 2f64.sqrt();
    [
        s3 * (log[0] + log[1] + log[2]),
        s6 * (log[0] + log[1] - 2.0 * log[2]),
        s2 * (log[0] - log[1]),
    ]
}

fn lab_to_rgb(lab: [f64; 3], lms_to_rgb: &[[f64; 3]; 3]) -> [f32; 3] {
    let s3 = 3f64.sqrt() / 3.0;
    let s6 = 6f64.sqrt() / 6.0;
    let s2 = 2f64.sqrt() / 2.0;
    let (l, a, b) = (lab[0] * s3, lab[1] * s6, lab[2] * s2);
    let log = [l + a + b, l + a - b, l - 2.0 * a];
    let lms = [
        10f64.powf(log[0]),
        10f64.powf(log[1]),
        10f64.powf(log[2]),
    ];
    let rgb = mat_mul(lms_to_rgb, lms);
    [
        rgb[0].clamp(0.0, 1.0) as f32,
        rgb[1].clamp(0.0, 1.0) as f32,
        rgb[2].clamp(0.0, 1.0) as f32,
    ]
}

/// Per-channel mean and standard deviation in lαβ space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn stain_stats(img: &RgbImage) -> StainStats {
    let n = (img.h() * img.w()) as f64;
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    for r in 0..img.h() {
        for c in 0..img.w() {
            let lab = rgb_to_lab(img.pixel(r, c));
            for ch in 0..3 {
                sum[ch] += lab[ch];
                sumsq[ch] += lab[ch] * lab[ch];
            }
        }
    }
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
    let std = [
        (sumsq[0] / n - mean[0] * mean[0]).max(0.0).sqrt(),
        (sumsq[1] / n - mean[1] * mean[1]).max(0.0).sqrt(),
        (sumsq[2] / n - mean[2] * mean[2]).max(0.0).sqrt(),
    ];
    StainStats { mean, std }
}

/// Shifts and scales each lαβ channel from the source statistics to the
/// reference statistics. A degenerate (zero-variance) source channel keeps
/// scale 1, so only the mean is transferred.
pub fn apply_stain_stats(img: &RgbImage, src: &StainStats, reference: &StainStats) -> RgbImage {
    let mut out = img.clone();
    let inv = lms_to_rgb_matrix();
    let scale: Vec<f64> = (0..3)
        .map(|ch| {
            if src.std[ch] < 1e-8 {
                1.0
            } else {
                reference.std[ch] / src.std[ch]
            }
        })
        .collect();
    for r in 0..img.h() {
        for c in 0..img.w() {
            let lab = rgb_to_lab(img.pixel(r, c));
            let mapped = [
                (lab[0] - src.mean[0]) * scale[0] + reference.mean[0],
                (lab[1] - src.mean[1]) * scale[1] + reference.mean[1],
                (lab[2] - src.mean[2]) * scale[2] + reference.mean[2],
            ];
            out.set_pixel(r, c, lab_to_rgb(mapped, &inv));
        }
    }
    out
}

/// Full transfer: match `img`'s lαβ statistics to those of `reference_img`.
pub fn stain_normalize(img: &RgbImage, reference_img: &RgbImage) -> RgbImage {
    let src = stain_stats(img);
    let reference = stain_stats(reference_img);
    apply_stain_stats(img, &src, &reference)
}

/// Per-channel (x - mean) / std intensity normalization.
pub fn zscore_normalize(img: &RgbImage, mean: [f64; 3], std: [f64; 3]) -> crate::Result<RgbImage> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(crate::Error::InvalidArgument(format!(
            "zscore std must be positive, got {std:?}"
        )));
    }
    let mut out = img.clone();
    for r in 0..img.h() {
        for c in 0..img.w() {
            let px = img.pixel(r, c);
            out.set_pixel(
                r,
                c,
                [
                    ((px[0] as f64 - mean[0]) / std[0]) as f32,
                    ((px[1] as f64 - mean[1]) / std[1]) as f32,
                    ((px[2] as f64 - mean[2]) / std[2]) as f32,
                ],
            );
        }
    }
    Ok(out)
}

/// Per-channel mean and std over a set of images.
pub fn channel_stats(images: &[&RgbImage]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut n = 0.0f64;
    for img in images {
        for px in img.data().chunks_exact(3) {
            for ch in 0..3 {
                sum[ch] += px[ch] as f64;
                sumsq[ch] += (px[ch] as f64) * (px[ch] as f64);
            }
        }
        n += (img.h() * img.w()) as f64;
    }
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
    let std = [
        (sumsq[0] / n - mean[0] * mean[0]).max(1e-12).sqrt(),
        (sumsq[1] / n - mean[1] * mean[1]).max(1e-12).sqrt(),
        (sumsq[2] / n - mean[2] * mean[2]).max(1e-12).sqrt(),
    ];
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(
                    r,
                    c,
                    [
                        rng.random_range(0.2..0.9f32),
                        rng.random_range(0.2..0.9f32),
                        rng.random_range(0.2..0.9f32),
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn self_reference_is_fixed_point() {
        let img = random_image(1, 16, 16);
        let out = stain_normalize(&img, &img);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn output_statistics_match_reference_in_transfer_space() {
        let img = random_image(2, 24, 24);
        let reference = random_image(3, 24, 24);
        let out = stain_normalize(&img, &reference);
        let got = stain_stats(&out);
        let want = stain_stats(&reference);
        for ch in 0..3 {
            assert!((got.mean[ch] - want.mean[ch]).abs() < 1e-3, "mean ch{ch}");
            assert!((got.std[ch] - want.std[ch]).abs() < 1e-3, "std ch{ch}");
        }
    }

    #[test]
    fn constant_input_lands_on_reference_mean() {
        let img = RgbImage::filled(12, 12, [0.4, 0.5, 0.6]);
        let reference = random_image(4, 12, 12);
        let out = stain_normalize(&img, &reference);
        // All output pixels identical (constant in, constant out).
        let first = out.pixel(0, 0);
        for r in 0..12 {
            for c in 0..12 {
                assert_eq!(out.pixel(r, c), first);
            }
        }
        // And the constant sits at the reference mean in transfer space.
        let got = stain_stats(&out);
        let want = stain_stats(&reference);
        for ch in 0..3 {
            assert!((got.mean[ch] - want.mean[ch]).abs() < 1e-3);
        }
    }

    #[test]
    fn zscore_values() {
        let img = RgbImage::filled(8, 8, [0.4, 0.6, 0.8]);
        // x = mean -> 0.
        let z = zscore_normalize(&img, [0.4, 0.6, 0.8], [1.0, 1.0, 1.0]).unwrap();
        assert!(z.data().iter().all(|&v| v.abs() < 1e-7));
        // mean 0, std 1 -> identity.
        let id = zscore_normalize(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(id, img);
        // Hand-computed fixture.
        let fx = zscore_normalize(&img, [0.2, 0.2, 0.2], [0.5, 0.5, 0.5]).unwrap();
        let px = fx.pixel(0, 0);
        assert!((px[0] - 0.4).abs() < 1e-6);
        assert!((px[1] - 0.8).abs() < 1e-6);
        assert!((px[2] - 1.2).abs() < 1e-6);
        // Zero std rejected.
        assert!(zscore_normalize(&img, [0.0; 3], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn idempotent_against_same_reference() {
        let img = random_image(5, 16, 16);
        let reference = random_image(6, 16, 16);
        let once = stain_normalize(&img, &reference);
        let twice = stain_normalize(&once, &reference);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
