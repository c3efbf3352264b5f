//! Bright-channel illumination estimate and external pseudo-depth ingestion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{read_gray, Image};
use crate::scene::Spectrum;

pub const DEFAULT_BCP_PATCH: usize = 15;

/// Per-pixel illumination estimate in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub patch_size: usize,
    pub ambient: Spectrum,
}

/// Relative depth in [0, 1] for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrior {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthPrior {
    /// Normalises arbitrary relative depths.
    pub fn from_raw(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::Input("depth prior size does not match its shape".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("depth prior contains non-finite values".into()));
        }
        Ok(DepthPrior {
            height,
            width,
            values: normalize_min_max(raw),
        })
    }
}

/// Min-max normalisation to [0, 1]; a constant input maps to 0.5 everywhere.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Mean colour of the darkest 0.1% of pixels ranked by their brightest channel.
pub fn estimate_ambient(img: &Image) -> Result<Spectrum> {
    let n = img.pixel_count();
    if n == 0 {
        return Err(Error::Input("ambient estimation needs a non-empty image".into()));
    }
    let bright = |k: usize| {
        (0..img.channels)
            .map(|c| img.data[k * img.channels + c])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| bright(*a).total_cmp(&bright(*b)).then(a.cmp(b)));
    let take = ((n as f64 * 0.001).ceil() as usize).max(1);
    let mut acc = Spectrum::ZERO;
    for &k in &order[..take] {
        acc = acc + img.spectrum(k / img.width, k % img.width);
    }
    Ok(acc / take as f64)
}

/// Separable sliding-window minimum with edge replication.
fn window_min(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[r * w + c] = plane[r * w + lo..=r * w + hi]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for c in 0..w {
        for r in 0..h {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius).min(h - 1);
            out[r * w + c] = (lo..=hi).map(|q| rows[q * w + c]).fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Illumination map `T = 1 − min_{q∈patch} min_c (1 − I_q^c) / (1 − B^c)`,
/// clamped to [0, 1]. A patch with any saturated channel is fully lit.
pub fn bcp_map(img: &Image, patch_size: usize, ambient: Spectrum) -> Result<IlluminationMap> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd and >= 1, got {patch_size}")));
    }
    if (0..3).any(|c| !(ambient[c] < 1.0) || !ambient[c].is_finite()) {
        return Err(Error::Config(format!("ambient colour must be < 1 per channel, got {ambient:?}")));
    }
    let (h, w) = (img.height, img.width);
    if h == 0 || w == 0 {
        return Err(Error::Input("illumination map needs a non-empty image".into()));
    }
    let ratio: Vec<f64> = (0..h * w)
        .map(|k| {
            (0..img.channels)
                .map(|c| (1.0 - img.data[k * img.channels + c]) / (1.0 - ambient[c.min(2)]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let values = window_min(&ratio, h, w, patch_size / 2)
        .into_iter()
        .map(|m| (1.0 - m).clamp(0.0, 1.0))
        .collect();
    Ok(IlluminationMap {
        height: h,
        width: w,
        values,
        patch_size,
        ambient,
    })
}

/// Reads a float (PFM) or integer image and normalises it to [0, 1].
pub fn load_depth_prior(path: &Path) -> Result<DepthPrior> {
    let img = read_gray(path)?;
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "depth prior contains non-finite values".into(),
        });
    }
    DepthPrior::from_raw(img.height, img.width, &img.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::write_pfm;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(h, w, 3);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        img
    }

    #[test]
    fn ambient_of_constant_image() {
        let mut img = Image::new(10, 10, 3);
        img.data.iter_mut().for_each(|v| *v = 0.37);
        assert_eq!(estimate_ambient(&img).unwrap(), Spectrum::splat(0.37));
    }

    #[test]
    fn ambient_picks_the_black_pixel() {
        let mut img = Image::new(20, 20, 3);
        img.data.iter_mut().for_each(|v| *v = 0.9);
        for c in 0..3 {
            img.set(7, 3, c, [0.01, 0.02, 0.0][c]);
        }
        assert_eq!(estimate_ambient(&img).unwrap(), Spectrum::new(0.01, 0.02, 0.0));
    }

    #[test]
    fn ambient_matches_full_sort_reference() {
        let img = random_image(60, 50, 3);
        // reference: collect (bright, rgb) tuples, sort, average the darkest ceil(0.1%)
        let mut px: Vec<(f64, [f64; 3])> = (0..3000)
            .map(|k| {
                let rgb = [img.data[3 * k], img.data[3 * k + 1], img.data[3 * k + 2]];
                (rgb[0].max(rgb[1]).max(rgb[2]), rgb)
            })
            .collect();
        px.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let take = 3;
        let mut want = [0.0; 3];
        for p in &px[..take] {
            for c in 0..3 {
                want[c] += p.1[c] / take as f64;
            }
        }
        let got = estimate_ambient(&img).unwrap();
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn bcp_trivial_cases() {
        let mut img = Image::new(9, 9, 3);
        img.set(4, 4, 1, 1.0);
        let m = bcp_map(&img, 3, Spectrum::ZERO).unwrap();
        assert_eq!(m.values[4 * 9 + 4], 1.0);
        assert_eq!(m.values[3 * 9 + 5], 1.0);
        assert_eq!(m.values[0], 0.0);
        let dark = bcp_map(&Image::new(5, 5, 3), 15, Spectrum::ZERO).unwrap();
        assert!(dark.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bcp_rejects_bad_arguments() {
        let img = Image::new(4, 4, 3);
        assert!(matches!(bcp_map(&img, 3, Spectrum::new(0.2, 1.0, 0.1)), Err(Error::Config(_))));
        assert!(bcp_map(&img, 4, Spectrum::ZERO).is_err());
    }

    #[test]
    fn bcp_single_pixel_patch_is_brightest_channel() {
        let img = random_image(6, 7, 4);
        let m = bcp_map(&img, 1, Spectrum::ZERO).unwrap();
        for k in 0..42 {
            let want = img.data[3 * k].max(img.data[3 * k + 1]).max(img.data[3 * k + 2]);
            assert!((m.values[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bcp_recovers_piecewise_illumination() {
        // I = T·J with T in {0.2, 0.6} split at column 20 and a white pixel in every 5x5 block.
        let (h, w) = (40, 40);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut img = Image::new(h, w, 3);
        let t_true = |c: usize| if c < 20 { 0.2 } else { 0.6 };
        for r in 0..h {
            for c in 0..w {
                let white = r % 5 == 2 && c % 5 == 2;
                for ch in 0..3 {
                    let j = if white { 1.0 } else { rng.gen_range(0.0..0.9) };
                    img.set(r, c, ch, t_true(c) * j);
                }
            }
        }
        let m = bcp_map(&img, 7, Spectrum::ZERO).unwrap();
        for r in 0..h {
            for c in 0..w {
                if (c as i64 - 20).abs() > 4 {
                    assert!((m.values[r * w + c] - t_true(c)).abs() < 0.05, "pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn depth_prior_normalisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        write_pfm(&path, &Image::from_gray(1, 3, &[4.0, 4.0, 4.0])).unwrap();
        assert_eq!(load_depth_prior(&path).unwrap().values, vec![0.5; 3]);
        let ramp: Vec<f64> = (0..=10).map(|v| v as f64).collect();
        write_pfm(&path, &Image::from_gray(1, 11, &ramp)).unwrap();
        let d = load_depth_prior(&path).unwrap();
        for (k, v) in d.values.iter().enumerate() {
            assert!((v - k as f64 / 10.0).abs() < 1e-7);
        }
        assert!(load_depth_prior(&dir.path().join("missing.pfm")).is_err());
        write_pfm(&path, &Image::from_gray(1, 2, &[f64::NAN, 1.0])).unwrap();
        assert!(load_depth_prior(&path).is_err());
    }

    #[test]
    fn depth_prior_normalisation_is_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let raw: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..20.0)).collect();
        let once = DepthPrior::from_raw(8, 8, &raw).unwrap();
        let twice = DepthPrior::from_raw(8, 8, &once.values).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn brightening_never_darkens_the_map(seed in 0u64..500, r in 0usize..8, c in 0usize..8, ch in 0usize..3, bump in 0.0f64..0.5) {
            let img = random_image(8, 8, seed);
            let mut brighter = img.clone();
            let v = (img.get(r, c, ch) + bump).min(1.0);
            brighter.set(r, c, ch, v);
            let a = bcp_map(&img, 3, Spectrum::ZERO).unwrap();
            let b = bcp_map(&brighter, 3, Spectrum::ZERO).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!(y >= x);
            }
        }
    }
}
