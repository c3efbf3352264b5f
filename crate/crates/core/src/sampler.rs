//! Ray sampling: object-centric hierarchical samples followed by
//! reverse-stratified media samples placed where object density is low.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PreparedFields;
use crate::scene::{sort_merge, Phase, Ray, SampleSet};

/// Floor added to every reverse weight so no interval is unreachable.
pub const REVERSE_EPSILON: f64 = 1e-5;

/// Share of uniform probability mixed into the importance refinement, so
/// surfaces missed by the coarse pass keep some samples.
const UNIFORM_MIX: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_obj: usize,
    pub n_add: usize,
    pub epsilon: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_obj: 64,
            n_add: 32,
            epsilon: REVERSE_EPSILON,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_obj < 2 {
            return Err(Error::Config(format!("n_obj must be >= 2, got {}", self.n_obj)));
        }
        if self.n_add < 1 {
            return Err(Error::Config("n_add must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("reverse-weight epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Generator for one ray at one iteration; streams never overlap across rays.
pub fn ray_rng(seed: u64, iteration: u64, ray_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(ray_id);
    rng
}

/// Draw in `(0, 1]`.
fn open_unit(rng: &mut impl Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Inverse-CDF draws from a piecewise-constant density over `edges`, one per
/// stratum `((j-1)/n, j/n]`. Weights must have a positive finite sum.
fn invert_stratified(edges: &[f64], weights: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Internal(format!("degenerate sampling CDF (sum {total})")));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    cdf[last] = 1.0;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let u = (j as f64 + open_unit(rng)) / n as f64;
        let i = cdf.partition_point(|f| *f < u).min(last);
        let lo = if i == 0 { 0.0 } else { cdf[i - 1] };
        let span = cdf[i] - lo;
        let v = if span > 0.0 { ((u - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
        let t = edges[i] + v * (edges[i + 1] - edges[i]);
        out.push(t.clamp(edges[i], edges[i + 1]));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Hierarchical object samples: jittered coarse edges, then one importance
/// refinement driven by the coarse compositing weights. Endpoints are pinned
/// to the ray bounds. `density(t)` is the object density at ray parameter `t`.
pub fn object_samples(ray: &Ray, density: impl Fn(f64) -> f64, n_obj: usize, rng: &mut impl Rng) -> Result<SampleSet> {
    if n_obj < 2 {
        return Err(Error::Config(format!("n_obj must be >= 2, got {n_obj}")));
    }
    let (t0, t1) = (ray.t_near, ray.t_far);
    let step = (t1 - t0) / (n_obj - 1) as f64;
    let mut coarse = Vec::with_capacity(n_obj);
    coarse.push(t0);
    for k in 1..n_obj - 1 {
        coarse.push(t0 + (k as f64 - 0.5 + rng.gen::<f64>()) * step);
    }
    coarse.push(t1);

    let mut weights = Vec::with_capacity(n_obj - 1);
    let mut optical = 0.0f64;
    for w in coarse.windows(2) {
        let delta = w[1] - w[0];
        let tau = (density(0.5 * (w[0] + w[1])).max(0.0) * delta).min(80.0);
        weights.push((-optical).exp() * -(-tau).exp_m1());
        optical += tau;
    }
    let total: f64 = weights.iter().sum();
    if total < 1e-8 || n_obj == 2 {
        let phases = vec![Phase::Object; coarse.len()];
        return SampleSet::from_sorted(coarse, phases);
    }
    let mixed: Vec<f64> = coarse
        .windows(2)
        .zip(&weights)
        .map(|(e, w)| (1.0 - UNIFORM_MIX) * w / total + UNIFORM_MIX * (e[1] - e[0]) / (t1 - t0))
        .collect();
    let mut refined = Vec::with_capacity(n_obj);
    refined.push(t0);
    refined.extend(invert_stratified(&coarse, &mixed, n_obj - 2, rng)?);
    refined.push(t1);
    let phases = vec![Phase::Object; refined.len()];
    SampleSet::from_sorted(refined, phases)
}

/// Per-interval sampling weights that favour regions of low object density.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseWeights {
    pub w_med: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub epsilon: f64,
    /// Interval edges the weights refer to (`w_med.len() + 1` entries).
    pub edges: Vec<f64>,
}

/// Interval means of densities given at the interval edges.
pub fn interval_means(edge_values: &[f64]) -> Vec<f64> {
    edge_values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// `w_i = Δ_i (max_j σ̂_j − σ̂_i) + ε`.
pub fn reverse_weights(samples: &SampleSet, sigma_hat: &[f64], epsilon: f64) -> Result<ReverseWeights> {
    let deltas = samples.deltas();
    if deltas.is_empty() {
        return Err(Error::Input("reverse weights need at least one interval".into()));
    }
    if sigma_hat.len() != deltas.len() {
        return Err(Error::Input(format!(
            "expected {} interval densities, got {}",
            deltas.len(),
            sigma_hat.len()
        )));
    }
    let peak = sigma_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w_med = deltas
        .iter()
        .zip(sigma_hat)
        .map(|(d, s)| d * (peak - s) + epsilon)
        .collect();
    Ok(ReverseWeights {
        w_med,
        sigma_hat: sigma_hat.to_vec(),
        epsilon,
        edges: samples.positions().to_vec(),
    })
}

/// `n_add` media-phase samples by stratified inversion of the reverse weights.
pub fn stratified_invert(weights: &ReverseWeights, n_add: usize, rng: &mut impl Rng) -> Result<SampleSet> {
    if n_add < 1 {
        return Err(Error::Config("n_add must be >= 1".into()));
    }
    let positions = invert_stratified(&weights.edges, &weights.w_med, n_add, rng)?;
    let phases = vec![Phase::Media; positions.len()];
    SampleSet::from_sorted(positions, phases)
}

/// Full sample set for one ray: object samples merged with media samples.
pub fn sample_ray(ray: &Ray, fields: &PreparedFields<'_>, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<SampleSet> {
    let density = |t: f64| fields.object_density_at(&ray.at(t));
    let objects = object_samples(ray, density, cfg.n_obj, rng)?;
    let at_edges: Vec<f64> = objects.positions().iter().map(|t| density(*t)).collect();
    let weights = reverse_weights(&objects, &interval_means(&at_edges), cfg.epsilon)?;
    let media = stratified_invert(&weights, cfg.n_add, rng)?;
    Ok(sort_merge(&objects, &media))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Vec3;
    use proptest::prelude::*;
    use rand::Rng;

    fn ray() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 0.0, 1.0).unwrap()
    }

    #[test]
    fn zero_density_keeps_stratified_coarse_samples() {
        let mut rng = ray_rng(1, 0, 0);
        let s = object_samples(&ray(), |_| 0.0, 16, &mut rng).unwrap();
        assert_eq!(s.len(), 16);
        let step = 1.0 / 15.0;
        for (k, t) in s.positions().iter().enumerate() {
            let centre = k as f64 * step;
            assert!((t - centre).abs() <= 0.5 * step + 1e-12, "sample {k} at {t}");
        }
        assert_eq!(s.positions()[0], 0.0);
        assert_eq!(s.positions()[15], 1.0);
    }

    #[test]
    fn two_samples_are_the_endpoints() {
        let mut rng = ray_rng(1, 0, 0);
        let s = object_samples(&ray(), |_| 5.0, 2, &mut rng).unwrap();
        assert_eq!(s.positions(), &[0.0, 1.0]);
        assert!(object_samples(&ray(), |_| 0.0, 1, &mut rng).is_err());
    }

    #[test]
    fn refinement_concentrates_in_a_dense_slab() {
        let slab = |t: f64| if (0.55..0.6).contains(&t) { 200.0 } else { 0.0 };
        let mut inside = 0usize;
        let mut total = 0usize;
        for id in 0..10_000u64 {
            let mut rng = ray_rng(3, 0, id);
            let s = object_samples(&ray(), slab, 64, &mut rng).unwrap();
            // interior samples are the refined ones
            let interior = &s.positions()[1..s.len() - 1];
            total += interior.len();
            inside += interior.iter().filter(|t| (0.55..=0.6).contains(*t)).count();
        }
        let frac = inside as f64 / total as f64;
        assert!(frac >= 0.6, "only {frac} of refined samples in the slab");
    }

    #[test]
    fn reverse_weight_examples() {
        let s = SampleSet::from_sorted(vec![0.0, 1.0, 2.0], vec![Phase::Object; 3]).unwrap();
        let w = reverse_weights(&s, &[0.0, 10.0], 1e-5).unwrap();
        assert_eq!(w.w_med, vec![10.0 + 1e-5, 1e-5]);
        let w = reverse_weights(&s, &[3.0, 3.0], 1e-5).unwrap();
        assert_eq!(w.w_med[0], w.w_med[1]);
        assert_eq!(w.w_med[0], 1e-5);
    }

    #[test]
    fn reverse_weights_match_direct_formula() {
        let mut rng = ray_rng(9, 0, 0);
        let mut pos: Vec<f64> = (0..40).map(|_| rng.gen::<f64>()).collect();
        pos.sort_by(f64::total_cmp);
        let s = SampleSet::from_sorted(pos.clone(), vec![Phase::Object; 40]).unwrap();
        let sig: Vec<f64> = (0..s.interval_count()).map(|_| rng.gen_range(0.0..50.0)).collect();
        let w = reverse_weights(&s, &sig, 1e-5).unwrap();
        let p = s.positions();
        let mut max = 0.0f64;
        for v in &sig {
            if *v > max {
                max = *v;
            }
        }
        for i in 0..sig.len() {
            let expect = (p[i + 1] - p[i]) * (max - sig[i]) + 1e-5;
            assert!((w.w_med[i] - expect).abs() <= 1e-15 * expect.abs().max(1.0));
            assert!(w.w_med[i] >= 1e-5);
        }
    }

    #[test]
    fn single_interval_forces_placement() {
        let s = SampleSet::from_sorted(vec![0.3, 0.4], vec![Phase::Object; 2]).unwrap();
        let w = reverse_weights(&s, &[1.0], 1e-5).unwrap();
        let mut rng = ray_rng(2, 0, 0);
        let m = stratified_invert(&w, 1, &mut rng).unwrap();
        assert_eq!(m.len(), 1);
        assert!((0.3..=0.4).contains(&m.positions()[0]));
        assert_eq!(m.phases()[0], Phase::Media);
    }

    #[test]
    fn heavy_interval_receives_most_samples() {
        let s = SampleSet::uniform(0.0, 1.0, 11, Phase::Object);
        let mut sig = vec![1.0; 10];
        sig[4] = 0.0;
        let mut w = reverse_weights(&s, &sig, 1e-5).unwrap();
        // force exactly 99% of the mass onto interval 4
        let rest = 0.01 / 9.0;
        for (i, v) in w.w_med.iter_mut().enumerate() {
            *v = if i == 4 { 0.99 } else { rest };
        }
        let mut hits = 0;
        let mut rng = ray_rng(4, 0, 0);
        let m = stratified_invert(&w, 10_000, &mut rng).unwrap();
        for t in m.positions() {
            if (0.4..=0.5).contains(t) {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * m.len() as f64);
    }

    #[test]
    fn sampling_is_reproducible() {
        let a: Vec<f64> = {
            let mut r = ray_rng(5, 7, 11);
            (0..8).map(|_| r.gen()).collect()
        };
        let b: Vec<f64> = {
            let mut r = ray_rng(5, 7, 11);
            (0..8).map(|_| r.gen()).collect()
        };
        let c: Vec<f64> = {
            let mut r = ray_rng(5, 7, 12);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn media_samples_stay_in_bounds(seed in 0u64..1000, peak in 0usize..20) {
            let s = SampleSet::uniform(0.2, 0.9, 21, Phase::Object);
            let mut sig = vec![0.5; 20];
            sig[peak] = 30.0;
            let w = reverse_weights(&s, &sig, REVERSE_EPSILON).unwrap();
            let min = w.w_med.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(w.w_med[peak], min);
            prop_assert!((min - REVERSE_EPSILON).abs() < 1e-18);
            let mut rng = ray_rng(seed, 0, 0);
            let m = stratified_invert(&w, 32, &mut rng).unwrap();
            prop_assert!(m.positions().iter().all(|t| (0.2..=0.9).contains(t)));
            let merged = sort_merge(&s, &m);
            prop_assert!(merged.positions().windows(2).all(|p| p[0] < p[1]));
        }
    }
}
