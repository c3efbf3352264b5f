//! Objective terms and their gradients.
//!
//! Every function returns the loss value together with the gradient with
//! respect to its tensor inputs, so the fit loop can chain them into the
//! renderer's reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{filter_valid, gaussian_kernel, ssim_window, Image, SSIM_C1, SSIM_C2, SSIM_SIGMA};
use crate::radiative::Condition;
use crate::scene::Spectrum;

/// Offset in the tone-mapped reconstruction denominator.
pub const RECON_EPS: f64 = 1e-3;
/// Object-density level above which co-located media density is penalised.
pub const MUTEX_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_comp: f64,
    pub lambda_geo: f64,
    pub lambda_mutex: f64,
    pub lambda_trans: f64,
}

impl LossWeights {
    pub fn preset(condition: Condition) -> Self {
        match condition {
            Condition::Haze | Condition::Underwater => LossWeights {
                lambda_comp: 0.0,
                lambda_geo: 1e-2,
                lambda_mutex: 1e-4,
                lambda_trans: 0.0,
            },
            Condition::Lowlight => LossWeights {
                lambda_comp: 1.0,
                lambda_geo: 1e-2,
                lambda_mutex: 1e-4,
                lambda_trans: 1e-3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_comp, self.lambda_geo, self.lambda_mutex, self.lambda_trans];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Individual loss values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub comp: f64,
    pub geo: f64,
    pub mutex: f64,
    pub media: f64,
    pub mono: f64,
}

impl LossParts {
    /// Media transmittance regulariser: surface transmittance plus monotonic decay.
    pub fn trans(&self) -> f64 {
        self.media + self.mono
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("recon", self.recon),
            ("comp", self.comp),
            ("geo", self.geo),
            ("mutex", self.mutex),
            ("media", self.media),
            ("mono", self.mono),
        ]
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.recon
        + w.lambda_comp * parts.comp
        + w.lambda_geo * parts.geo
        + w.lambda_mutex * parts.mutex
        + w.lambda_trans * parts.trans()
}

/// Tone-mapped squared error with fixed denominators `denom` (per pixel).
pub fn recon_loss_with_denominator(i_hat: &[Spectrum], i: &[Spectrum], denom: &[Spectrum]) -> (f64, Vec<Spectrum>) {
    let n = (i_hat.len() * 3).max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![Spectrum::ZERO; i_hat.len()];
    for k in 0..i_hat.len() {
        for c in 0..3 {
            let d = denom[k][c];
            let r = (i_hat[k][c] - i[k][c]) / d;
            value += r * r;
            grad[k][c] = 2.0 * r / d / n;
        }
    }
    (value / n, grad)
}

/// Denominators `sg(Î) + ε` used by [`recon_loss`].
pub fn recon_denominator(i_hat: &[Spectrum]) -> Vec<Spectrum> {
    i_hat.iter().map(|s| s.map(|v| v + RECON_EPS)).collect()
}

/// Mean of `((Î − I) / (sg(Î) + ε))²`; the denominator carries no gradient.
pub fn recon_loss(i_hat: &[Spectrum], i: &[Spectrum]) -> (f64, Vec<Spectrum>) {
    recon_loss_with_denominator(i_hat, i, &recon_denominator(i_hat))
}

/// Mean squared error between two depth maps already in [0, 1].
pub fn geo_loss(d_hat: &[f64], d_tilde: &[f64]) -> (f64, Vec<f64>) {
    let n = d_hat.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; d_hat.len()];
    for k in 0..d_hat.len() {
        let r = d_hat[k] - d_tilde[k];
        value += r * r;
        grad[k] = 2.0 * r / n;
    }
    (value / n, grad)
}

/// Min-max normalised depth and the reverse map for its gradient.
#[derive(Debug, Clone)]
pub struct NormalizedDepth {
    pub values: Vec<f64>,
    lo_idx: usize,
    hi_idx: usize,
    range: f64,
}

impl NormalizedDepth {
    pub fn new(raw: &[f64]) -> Self {
        let mut lo_idx = 0;
        let mut hi_idx = 0;
        for (k, v) in raw.iter().enumerate() {
            if *v < raw[lo_idx] {
                lo_idx = k;
            }
            if *v > raw[hi_idx] {
                hi_idx = k;
            }
        }
        let range = if raw.is_empty() { 0.0 } else { raw[hi_idx] - raw[lo_idx] };
        let values = if range > 0.0 {
            raw.iter().map(|v| (v - raw[lo_idx]) / range).collect()
        } else {
            vec![0.5; raw.len()]
        };
        NormalizedDepth {
            values,
            lo_idx,
            hi_idx,
            range,
        }
    }

    /// Pulls a gradient on the normalised values back to the raw depths.
    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        if !(self.range > 0.0) {
            return out;
        }
        let mut g_lo = 0.0;
        let mut g_hi = 0.0;
        for k in 0..g.len() {
            let n = self.values[k];
            out[k] += g[k] / self.range;
            g_lo += g[k] * (n - 1.0) / self.range;
            g_hi += -g[k] * n / self.range;
        }
        out[self.lo_idx] += g_lo;
        out[self.hi_idx] += g_hi;
        out
    }
}

/// Luminance/contrast compensation applied to the observation before SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimCompensation {
    /// Target mean intensity per channel.
    pub nu_tilde: Spectrum,
    /// Contrast gain.
    pub kappa_tilde: f64,
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// Patches per step.
    pub patches: usize,
    pub patch_size: usize,
}

impl Default for SsimCompensation {
    fn default() -> Self {
        SsimCompensation {
            nu_tilde: Spectrum::splat(0.5),
            kappa_tilde: 1.0,
            window: 11,
            sigma: SSIM_SIGMA,
            c1: SSIM_C1,
            c2: SSIM_C2,
            patches: 4,
            patch_size: 16,
        }
    }
}

impl SsimCompensation {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_tilde > 0.0 && self.c1 > 0.0 && self.c2 > 0.0 && self.patches >= 1 && self.sigma > 0.0) {
            return Err(Error::Config(format!("invalid SSIM compensation settings {self:?}")));
        }
        if self.window == 0 || self.window % 2 == 0 || self.patch_size == 0 {
            return Err(Error::Config("SSIM window must be odd and patches non-empty".into()));
        }
        Ok(())
    }
}

/// Adjoint of [`filter_valid`]: spreads window values back onto the plane.
fn filter_valid_adjoint(g: &[f64], oh: usize, ow: usize, height: usize, width: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let mut tmp = vec![0.0; height * ow];
    for r in 0..oh {
        for c in 0..ow {
            let v = g[r * ow + c];
            if v == 0.0 {
                continue;
            }
            for (t, kv) in k.iter().enumerate() {
                tmp[(r + t) * ow + c] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..ow {
            let v = tmp[r * ow + c];
            for t in 0..n {
                out[r * width + c + t] += k[t] * v;
            }
        }
    }
    out
}

/// Mean compensated SSIM of one channel plane and its gradient w.r.t. `j`.
fn comp_ssim_plane(j: &[f64], i: &[f64], h: usize, w: usize, nu: f64, comp: &SsimCompensation) -> (f64, Vec<f64>) {
    let win = ssim_window(h, w).min(comp.window);
    let k = gaussian_kernel(win, comp.sigma);
    let m_i = i.iter().sum::<f64>() / i.len() as f64;
    let kap = comp.kappa_tilde;
    let sq = |x: &[f64]| x.iter().map(|v| v * v).collect::<Vec<_>>();
    let ji: Vec<f64> = j.iter().zip(i).map(|(a, b)| a * b).collect();
    let (mu_j, oh, ow) = filter_valid(j, h, w, &k);
    let (nu_i, _, _) = filter_valid(i, h, w, &k);
    let (e_jj, _, _) = filter_valid(&sq(j), h, w, &k);
    let (e_ii, _, _) = filter_valid(&sq(i), h, w, &k);
    let (e_ji, _, _) = filter_valid(&ji, h, w, &k);
    let count = (oh * ow) as f64;
    let mut total = 0.0;
    let mut d_mu = vec![0.0; oh * ow];
    let mut d_ejj = vec![0.0; oh * ow];
    let mut d_eji = vec![0.0; oh * ow];
    for q in 0..oh * ow {
        let nu_c = (nu_i[q] - m_i) * kap + nu;
        let var_ic = kap * kap * (e_ii[q] - nu_i[q] * nu_i[q]);
        let var_j = e_jj[q] - mu_j[q] * mu_j[q];
        let cov = kap * (e_ji[q] - mu_j[q] * nu_i[q]);
        let a1 = 2.0 * mu_j[q] * nu_c + comp.c1;
        let a2 = 2.0 * cov + comp.c2;
        let b1 = mu_j[q] * mu_j[q] + nu_c * nu_c + comp.c1;
        let b2 = var_j + var_ic + comp.c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        let ds_dvar = -s / b2;
        let ds_dcov = 2.0 * a1 / (b1 * b2);
        let ds_dmu = 2.0 * nu_c * a2 / (b1 * b2) - s * 2.0 * mu_j[q] / b1
            + ds_dvar * (-2.0 * mu_j[q])
            + ds_dcov * (-kap * nu_i[q]);
        // loss = 1 − mean(s)
        d_mu[q] = -ds_dmu / count;
        d_ejj[q] = -ds_dvar / count;
        d_eji[q] = -ds_dcov * kap / count;
    }
    let g_mu = filter_valid_adjoint(&d_mu, oh, ow, h, w, &k);
    let g_jj = filter_valid_adjoint(&d_ejj, oh, ow, h, w, &k);
    let g_ji = filter_valid_adjoint(&d_eji, oh, ow, h, w, &k);
    let grad = (0..h * w).map(|p| g_mu[p] + 2.0 * j[p] * g_jj[p] + i[p] * g_ji[p]).collect();
    (total / count, grad)
}

/// `1 − mean` compensated SSIM over the given patch pairs (all 3-channel,
/// pairwise equal shapes). Returns the gradient for each `j` patch.
pub fn comp_ssim_loss(j_patches: &[Image], i_patches: &[Image], comp: &SsimCompensation) -> Result<(f64, Vec<Image>)> {
    if j_patches.is_empty() || j_patches.len() != i_patches.len() {
        return Err(Error::Input("compensated SSIM needs matching non-empty patch lists".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(j_patches.len());
    let scale = 1.0 / (j_patches.len() * 3) as f64;
    for (jp, ip) in j_patches.iter().zip(i_patches) {
        if !jp.same_shape(ip) || jp.channels != 3 {
            return Err(Error::Input("patch shapes differ".into()));
        }
        let mut g = Image::new(jp.height, jp.width, 3);
        for ch in 0..3 {
            let (s, gp) = comp_ssim_plane(
                &jp.channel(ch).data,
                &ip.channel(ch).data,
                jp.height,
                jp.width,
                comp.nu_tilde[ch],
                comp,
            );
            total += s * scale;
            for (k, v) in gp.iter().enumerate() {
                // gp is the gradient of (1 − mean s) for this plane
                g.data[k * 3 + ch] = v * scale;
            }
        }
        grads.push(g);
    }
    Ok((1.0 - total, grads))
}

/// Top-left corners of `count` random `size`x`size` patches inside an image.
pub fn random_patches(height: usize, width: usize, size: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if size > height || size > width {
        return Err(Error::Config(format!("patch size {size} exceeds image {height}x{width}")));
    }
    Ok((0..count)
        .map(|_| (rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)))
        .collect())
}

pub fn crop(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let mut out = Image::new(h, w, img.channels);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..img.channels {
                out.set(r, c, ch, img.get(top + r, left + c, ch));
            }
        }
    }
    out
}

/// Compensated SSIM on `comp.patches` random patches of two full images.
pub fn comp_ssim_loss_random(j: &Image, i: &Image, comp: &SsimCompensation, rng: &mut impl Rng) -> Result<f64> {
    let corners = random_patches(j.height, j.width, comp.patch_size, comp.patches, rng)?;
    let jp: Vec<Image> = corners.iter().map(|(r, c)| crop(j, *r, *c, comp.patch_size, comp.patch_size)).collect();
    let ip: Vec<Image> = corners.iter().map(|(r, c)| crop(i, *r, *c, comp.patch_size, comp.patch_size)).collect();
    Ok(comp_ssim_loss(&jp, &ip, comp)?.0)
}

/// Mean of `max(0, σ_obj − η)·σ_med`; returns gradients for both inputs.
pub fn mutex_loss(sigma_obj: &[f64], sigma_med: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    mutex_loss_with_count(sigma_obj, sigma_med, sigma_obj.len())
}

/// As [`mutex_loss`] but normalised by an external sample count (batch-wide means).
pub fn mutex_loss_with_count(sigma_obj: &[f64], sigma_med: &[f64], count: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let n = count.max(1) as f64;
    let mut value = 0.0;
    let mut g_o = vec![0.0; sigma_obj.len()];
    let mut g_m = vec![0.0; sigma_obj.len()];
    for k in 0..sigma_obj.len() {
        let excess = sigma_obj[k] - MUTEX_THRESHOLD;
        if excess > 0.0 {
            value += excess * sigma_med[k];
            g_o[k] = sigma_med[k] / n;
            g_m[k] = excess / n;
        }
    }
    (value / n, g_o, g_m)
}

/// Mean `|T_k − T̃_k|²` over rays.
pub fn media_trans_loss(t_at_surface: &[f64], t_tilde: &[f64]) -> (f64, Vec<f64>) {
    geo_loss(t_at_surface, t_tilde)
}

/// Transmittance from the ray start to `depth` through object and media
/// density: intervals whose midpoint lies before `depth` are included.
/// Returns `T` and `dT/dσ` (identical for both densities) per interval.
pub fn surface_transmittance(sigma_obj: &[f64], media: &[f64], deltas: &[f64], midpoints: &[f64], depth: f64) -> (f64, Vec<f64>) {
    let mut tau = 0.0;
    let mut included = vec![false; deltas.len()];
    for k in 0..deltas.len() {
        if midpoints[k] < depth {
            tau += (sigma_obj[k] + media[k]) * deltas[k];
            included[k] = true;
        }
    }
    let t = (-tau).exp();
    let grad = (0..deltas.len()).map(|k| if included[k] { -t * deltas[k] } else { 0.0 }).collect();
    (t, grad)
}

/// `Σ ReLU(σ_i − σ_{i−1}) / N` along one ray, with gradient.
pub fn mono_loss(sigma_med: &[f64]) -> (f64, Vec<f64>) {
    mono_loss_with_count(sigma_med, sigma_med.len())
}

pub fn mono_loss_with_count(sigma_med: &[f64], count: usize) -> (f64, Vec<f64>) {
    let n = count.max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; sigma_med.len()];
    for k in 1..sigma_med.len() {
        let d = sigma_med[k] - sigma_med[k - 1];
        if d > 0.0 {
            value += d;
            grad[k] += 1.0 / n;
            grad[k - 1] -= 1.0 / n;
        }
    }
    (value / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| r.gen_range(lo..hi)).collect()
    }

    fn rand_spectra(n: usize, seed: u64) -> Vec<Spectrum> {
        let v = rand_vec(3 * n, 0.05, 1.0, seed);
        v.chunks(3).map(|c| Spectrum::new(c[0], c[1], c[2])).collect()
    }

    fn check_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], tol: f64) {
        let h = 1e-4;
        for k in 0..x.len() {
            let mut p = x.to_vec();
            p[k] += h;
            let mut m = x.to_vec();
            m[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(err < tol, "entry {k}: fd {fd} vs analytic {}", grad[k]);
        }
    }

    #[test]
    fn recon_examples() {
        let a = rand_spectra(5, 1);
        assert_eq!(recon_loss(&a, &a).0, 0.0);
        let (v, _) = recon_loss(&[Spectrum::splat(0.001)], &[Spectrum::splat(0.002)]);
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn recon_gradient_with_frozen_denominator() {
        let i_hat = rand_spectra(6, 2);
        let i = rand_spectra(6, 3);
        let denom = recon_denominator(&i_hat);
        let (_, g) = recon_loss(&i_hat, &i);
        let flat: Vec<f64> = i_hat.iter().flat_map(|s| s.0).collect();
        let gflat: Vec<f64> = g.iter().flat_map(|s| s.0).collect();
        let f = |x: &[f64]| {
            let xs: Vec<Spectrum> = x.chunks(3).map(|c| Spectrum::new(c[0], c[1], c[2])).collect();
            recon_loss_with_denominator(&xs, &i, &denom).0
        };
        check_fd(f, &flat, &gflat, 1e-6);
        // closed form 2(Î − I)/c² / N
        for k in 0..6 {
            for c in 0..3 {
                let want = 2.0 * (i_hat[k][c] - i[k][c]) / denom[k][c].powi(2) / 18.0;
                assert!((g[k][c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn geo_examples_and_gradient() {
        let a = rand_vec(10, 0.0, 1.0, 4);
        assert_eq!(geo_loss(&a, &a).0, 0.0);
        assert_eq!(geo_loss(&[0.0; 4], &[1.0; 4]).0, 1.0);
        let b = rand_vec(10, 0.0, 1.0, 5);
        let want: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 10.0;
        let (v, g) = geo_loss(&a, &b);
        assert!((v - want).abs() < 1e-15);
        check_fd(|x| geo_loss(x, &b).0, &a, &g, 1e-6);
    }

    #[test]
    fn normalised_depth_gradient() {
        let raw = rand_vec(12, 0.2, 1.4, 6);
        let prior = rand_vec(12, 0.0, 1.0, 7);
        let f = |x: &[f64]| geo_loss(&NormalizedDepth::new(x).values, &prior).0;
        let nd = NormalizedDepth::new(&raw);
        let (_, g) = geo_loss(&nd.values, &prior);
        check_fd(f, &raw, &nd.backward(&g), 1e-5);
        let flat = NormalizedDepth::new(&[0.3; 5]);
        assert_eq!(flat.values, vec![0.5; 5]);
        assert_eq!(flat.backward(&[1.0; 5]), vec![0.0; 5]);
    }

    fn random_patch(h: usize, w: usize, seed: u64) -> Image {
        let mut img = Image::new(h, w, 3);
        img.data = rand_vec(h * w * 3, 0.0, 1.0, seed);
        img
    }

    fn plain_ssim_loss(j: &Image, i: &Image) -> f64 {
        1.0 - crate::imaging::ssim(j, i).unwrap()
    }

    #[test]
    fn comp_ssim_self_similarity_is_zero() {
        let i = random_patch(16, 16, 8);
        let means = Spectrum::new(i.channel(0).mean(), i.channel(1).mean(), i.channel(2).mean());
        let comp = SsimCompensation {
            nu_tilde: means,
            ..Default::default()
        };
        let (v, _) = comp_ssim_loss(&[i.clone()], &[i.clone()], &comp).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn comp_ssim_reduces_to_standard_ssim() {
        let j = random_patch(16, 16, 9);
        let i = random_patch(16, 16, 10);
        let means = Spectrum::new(i.channel(0).mean(), i.channel(1).mean(), i.channel(2).mean());
        let comp = SsimCompensation {
            nu_tilde: means,
            ..Default::default()
        };
        let (v, _) = comp_ssim_loss(&[j.clone()], &[i.clone()], &comp).unwrap();
        assert!((v - plain_ssim_loss(&j, &i)).abs() < 1e-12);
    }

    #[test]
    fn constant_guess_against_structure_scores_poorly() {
        // Direct evaluation on 8x8 patches: a flat dark guess against a bright textured target.
        let i = random_patch(8, 8, 11);
        let mut j = Image::new(8, 8, 3);
        j.data.iter_mut().for_each(|v| *v = 0.0);
        let comp = SsimCompensation {
            nu_tilde: Spectrum::splat(0.9),
            ..Default::default()
        };
        let (v, _) = comp_ssim_loss(&[j], &[i], &comp).unwrap();
        assert!(v > 0.95, "loss {v}");
    }

    #[test]
    fn comp_ssim_gradient_matches_finite_differences() {
        let j = random_patch(12, 12, 12);
        let i = random_patch(12, 12, 13);
        let comp = SsimCompensation {
            nu_tilde: Spectrum::new(0.3, 0.5, 0.7),
            kappa_tilde: 0.8,
            ..Default::default()
        };
        let (_, g) = comp_ssim_loss(&[j.clone()], &[i.clone()], &comp).unwrap();
        let f = |x: &[f64]| {
            let mut jj = j.clone();
            jj.data = x.to_vec();
            comp_ssim_loss(&[jj], &[i.clone()], &comp).unwrap().0
        };
        check_fd(f, &j.data, &g[0].data, 1e-4);
    }

    #[test]
    fn mutex_examples() {
        assert_eq!(mutex_loss(&[0.05, 0.1], &[3.0, 4.0]).0, 0.0);
        assert!((mutex_loss(&[1.1], &[2.0]).0 - 2.0).abs() < 1e-12);
        let so = rand_vec(20, 0.0, 1.0, 14);
        let sm = rand_vec(20, 0.0, 2.0, 15);
        let want: f64 = so.iter().zip(&sm).map(|(o, m)| (o - 0.1).max(0.0) * m).sum::<f64>() / 20.0;
        let (v, go, gm) = mutex_loss(&so, &sm);
        assert!((v - want).abs() < 1e-15);
        check_fd(|x| mutex_loss(x, &sm).0, &so, &go, 1e-5);
        check_fd(|x| mutex_loss(&so, x).0, &sm, &gm, 1e-5);
    }

    #[test]
    fn media_trans_examples() {
        assert_eq!(media_trans_loss(&[0.3, 0.7], &[0.3, 0.7]).0, 0.0);
        assert_eq!(media_trans_loss(&[1.0], &[0.0]).0, 1.0);
        let t = rand_vec(9, 0.0, 1.0, 16);
        let tt = rand_vec(9, 0.0, 1.0, 17);
        let want: f64 = t.iter().zip(&tt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 9.0;
        assert!((media_trans_loss(&t, &tt).0 - want).abs() < 1e-15);
    }

    #[test]
    fn surface_transmittance_gradient() {
        let so = rand_vec(10, 0.0, 2.0, 18);
        let m = rand_vec(10, 0.0, 2.0, 19);
        let d = vec![0.1; 10];
        let mids: Vec<f64> = (0..10).map(|k| 0.05 + 0.1 * k as f64).collect();
        let (t, g) = surface_transmittance(&so, &m, &d, &mids, 0.62);
        let want: f64 = (0..6).map(|k| (so[k] + m[k]) * 0.1).sum();
        assert!((t - (-want).exp()).abs() < 1e-15);
        check_fd(|x| surface_transmittance(x, &m, &d, &mids, 0.62).0, &so, &g, 1e-6);
    }

    #[test]
    fn mono_examples() {
        assert_eq!(mono_loss(&[3.0, 2.0, 2.0, 0.5]).0, 0.0);
        assert_eq!(mono_loss(&[0.0, 1.0]).0, 0.5);
        let s = rand_vec(30, 0.0, 1.0, 20);
        let want: f64 = s.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum::<f64>() / 30.0;
        let (v, g) = mono_loss(&s);
        assert!((v - want).abs() < 1e-15);
        check_fd(|x| mono_loss(x).0, &s, &g, 1e-5);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::preset(Condition::Lowlight);
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let unit = LossParts {
            recon: 1.0,
            comp: 1.0,
            geo: 1.0,
            mutex: 1.0,
            media: 1.0,
            mono: 0.0,
        };
        assert!((total_loss(&unit, &w) - (1.0 + 1.0 + 1e-2 + 1e-4 + 1e-3)).abs() < 1e-15);
        let uw = LossWeights::preset(Condition::Underwater);
        assert_eq!((uw.lambda_comp, uw.lambda_geo, uw.lambda_mutex, uw.lambda_trans), (0.0, 1e-2, 1e-4, 0.0));
        let v = rand_vec(6, 0.0, 3.0, 21);
        let p = LossParts {
            recon: v[0],
            comp: v[1],
            geo: v[2],
            mutex: v[3],
            media: v[4],
            mono: v[5],
        };
        let want = v[0] + w.lambda_comp * v[1] + w.lambda_geo * v[2] + w.lambda_mutex * v[3] + w.lambda_trans * (v[4] + v[5]);
        assert!((total_loss(&p, &w) - want).abs() < 1e-14);
    }
}
