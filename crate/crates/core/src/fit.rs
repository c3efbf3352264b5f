//! Inverse-rendering loop: patch batches, rendering, losses, reverse pass and
//! Adam updates.
//!
//! Determinism: rays are processed in fixed chunks of [`CHUNK_RAYS`], each
//! chunk accumulates its gradient serially and chunk gradients are summed in
//! chunk order. Results are therefore bit-identical for a given seed and
//! config regardless of the thread count.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldGrad, FieldSet, PreparedFields};
use crate::imaging::Image;
use crate::io::View;
use crate::loss::{
    comp_ssim_loss, geo_loss, mono_loss_with_count, mutex_loss_with_count, recon_denominator,
    recon_loss_with_denominator, surface_transmittance, LossParts, LossWeights, NormalizedDepth, SsimCompensation,
};
use crate::priors::{normalize_min_max, DepthPrior, IlluminationMap};
use crate::radiative::Condition;
use crate::render::{backward_ray, render_ray, RayCotangent, RenderOptions, RenderOutput};
use crate::sampler::{ray_rng, sample_ray, SamplerConfig};
use crate::scene::{generate_rays, Ray, RayBatch, SampleSet, Spectrum};

/// Rays per gradient-accumulation chunk.
pub const CHUNK_RAYS: usize = 128;
/// Total loss above which a fit is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Rays per step; must be a whole number of `comp.patch_size²` patches.
    pub batch_rays: usize,
    pub condition: Condition,
    pub seed: u64,
    /// Optimise the sunlight colour Φ (otherwise it stays at its initial value).
    pub learn_phi: bool,
    /// Learning-rate multiplier for the voxel grids; the global medium
    /// coefficients, Φ and the surface height use the base rate.
    pub grid_lr_scale: f64,
    pub weights: LossWeights,
    pub comp: SsimCompensation,
    pub sampler: SamplerConfig,
}

impl FitConfig {
    /// Desk-scale defaults for a condition.
    pub fn preset(condition: Condition) -> Self {
        FitConfig {
            steps: 2000,
            lr_init: 1e-2,
            lr_final: 1e-4,
            batch_rays: 1024,
            condition,
            seed: 0,
            learn_phi: true,
            grid_lr_scale: 10.0,
            weights: LossWeights::preset(condition),
            comp: SsimCompensation::default(),
            sampler: SamplerConfig::default(),
        }
    }

    /// Dataset-scale schedule: 25k steps with 4096-ray batches.
    pub fn full_scale(condition: Condition) -> Self {
        FitConfig {
            steps: 25_000,
            batch_rays: 4096,
            ..FitConfig::preset(condition)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_lr_scale > 0.0 && self.grid_lr_scale.is_finite()) {
            return Err(Error::Config(format!("grid_lr_scale must be > 0, got {}", self.grid_lr_scale)));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_final <= lr_init, got {} and {}",
                self.lr_init, self.lr_final
            )));
        }
        let per_patch = self.comp.patch_size * self.comp.patch_size;
        if self.batch_rays == 0 || self.batch_rays % per_patch != 0 {
            return Err(Error::Config(format!(
                "batch_rays ({}) must be a positive multiple of patch_size² ({per_patch})",
                self.batch_rays
            )));
        }
        self.weights.validate()?;
        self.comp.validate()?;
        self.sampler.validate()
    }

    pub fn patches_per_step(&self) -> usize {
        self.batch_rays / (self.comp.patch_size * self.comp.patch_size)
    }

    /// Log-linear decay from `lr_init` at step 0 to `lr_final` at the last step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_init;
        }
        let f = step as f64 / (self.steps - 1) as f64;
        self.lr_init * (self.lr_final / self.lr_init).powf(f)
    }
}

/// Observations and optional priors, all aligned with `views`.
#[derive(Debug, Clone)]
pub struct FitData {
    pub views: Vec<View>,
    /// Relative depth per view, larger meaning farther.
    pub depth_priors: Option<Vec<DepthPrior>>,
    /// Transmittance prior per view.
    pub illumination: Option<Vec<IlluminationMap>>,
}

impl FitData {
    pub fn new(views: Vec<View>) -> Self {
        FitData {
            views,
            depth_priors: None,
            illumination: None,
        }
    }

    pub fn validate(&self, cfg: &FitConfig) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::Input(format!("fitting needs at least 2 views, got {}", self.views.len())));
        }
        let p = cfg.comp.patch_size;
        for v in &self.views {
            if v.image.channels != 3 {
                return Err(Error::Input(format!("view {} is not an RGB image", v.name)));
            }
            if v.image.height < p || v.image.width < p {
                return Err(Error::Config(format!("view {} is smaller than the {p}px patch", v.name)));
            }
            if v.image.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("view {} contains non-finite pixels", v.name)));
            }
        }
        let shape_ok = |k: usize, h: usize, w: usize| h == self.views[k].image.height && w == self.views[k].image.width;
        if let Some(d) = &self.depth_priors {
            if d.len() != self.views.len() || d.iter().enumerate().any(|(k, p)| !shape_ok(k, p.height, p.width)) {
                return Err(Error::Input("depth priors must match the views one to one".into()));
            }
        } else if cfg.weights.lambda_geo > 0.0 {
            return Err(Error::Config("lambda_geo > 0 requires depth priors".into()));
        }
        if let Some(t) = &self.illumination {
            if t.len() != self.views.len() || t.iter().enumerate().any(|(k, p)| !shape_ok(k, p.height, p.width)) {
                return Err(Error::Input("illumination maps must match the views one to one".into()));
            }
        } else if cfg.weights.lambda_trans > 0.0 {
            return Err(Error::Config("lambda_trans > 0 requires illumination maps".into()));
        }
        Ok(())
    }
}

/// One step's loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub parts: LossParts,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitHistory {
    pub records: Vec<FitRecord>,
}

impl FitHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step", "lr", "total"];
        header.extend(LossParts::default().named().iter().map(|(n, _)| *n));
        w.write_record(&header).map_err(|e| Error::Internal(e.to_string()))?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), format!("{:e}", r.lr), format!("{:e}", r.total)];
            row.extend(r.parts.named().iter().map(|(_, v)| format!("{v:e}")));
            w.write_record(&row).map_err(|e| Error::Internal(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv()?.as_bytes())
    }
}

/// A square patch of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub view: usize,
    pub top: usize,
    pub left: usize,
}

/// Rays and frozen sample positions of one step, patch-major and row-major
/// inside each patch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub patch_size: usize,
    pub patches: Vec<PatchRef>,
    pub rays: Vec<Ray>,
    pub samples: Vec<SampleSet>,
    /// Reconstruction denominators to use instead of the current render.
    pub fixed_denominator: Option<Vec<Spectrum>>,
}

impl Batch {
    fn pixel(&self, k: usize) -> (usize, usize, usize) {
        let pp = self.patch_size * self.patch_size;
        let p = &self.patches[k / pp];
        let local = k % pp;
        (p.view, p.top + local / self.patch_size, p.left + local % self.patch_size)
    }
}

/// Rays of every view, generated once per fit.
pub struct ViewRays {
    batches: Vec<RayBatch>,
}

impl ViewRays {
    pub fn new(data: &FitData) -> Result<Self> {
        let batches = data
            .views
            .iter()
            .map(|v| generate_rays(&v.camera, (v.image.height, v.image.width)))
            .collect::<Result<_>>()?;
        Ok(ViewRays { batches })
    }
}

/// Draws the patches of `step` and samples each ray against the current fields.
pub fn draw_batch(
    fields: &PreparedFields<'_>,
    data: &FitData,
    rays: &ViewRays,
    cfg: &FitConfig,
    step: usize,
) -> Result<Batch> {
    let size = cfg.comp.patch_size;
    let mut rng = ray_rng(cfg.seed, step as u64, u64::MAX);
    let patches: Vec<PatchRef> = (0..cfg.patches_per_step())
        .map(|_| {
            let view = rng.gen_range(0..data.views.len());
            let img = &data.views[view].image;
            PatchRef {
                view,
                top: rng.gen_range(0..=img.height - size),
                left: rng.gen_range(0..=img.width - size),
            }
        })
        .collect();
    let mut batch = Batch {
        patch_size: size,
        patches,
        rays: Vec::new(),
        samples: Vec::new(),
        fixed_denominator: None,
    };
    batch.rays = (0..cfg.batch_rays)
        .map(|k| {
            let (v, r, c) = batch.pixel(k);
            rays.batches[v].get(r, c).clone()
        })
        .collect();
    batch.samples = batch
        .rays
        .par_iter()
        .enumerate()
        .map(|(k, ray)| {
            let mut rng = ray_rng(cfg.seed, step as u64, k as u64);
            sample_ray(ray, fields, &cfg.sampler, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(batch)
}

/// Loss values and, on request, the gradient for one batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub total: f64,
    pub parts: LossParts,
    pub grad: Option<FieldGrad>,
}

fn check_finite(parts: &LossParts) -> Result<()> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: format!("{name} loss") });
        }
    }
    Ok(())
}

/// Renders the batch, evaluates every loss with a non-zero weight and, when
/// `with_grad`, runs the reverse pass through renderer and losses.
pub fn evaluate(fields: &FieldSet, data: &FitData, batch: &Batch, cfg: &FitConfig, with_grad: bool) -> Result<Evaluation> {
    let prepared = fields.prepare();
    let opts = RenderOptions::new(cfg.condition);
    let outs: Vec<RenderOutput> = batch
        .rays
        .par_iter()
        .zip(&batch.samples)
        .map(|(ray, s)| render_ray(ray, &prepared, s, &opts))
        .collect::<Result<_>>()?;
    let n = outs.len();
    let w = &cfg.weights;
    let mut parts = LossParts::default();
    let mut cots = vec![RayCotangent::default(); n];

    // reconstruction
    let i_hat: Vec<Spectrum> = outs.iter().map(|o| o.i_hat).collect();
    let target: Vec<Spectrum> = (0..n)
        .map(|k| {
            let (v, r, c) = batch.pixel(k);
            data.views[v].image.spectrum(r, c)
        })
        .collect();
    let denom = match &batch.fixed_denominator {
        Some(d) => d.clone(),
        None => recon_denominator(&i_hat),
    };
    let (recon, g_recon) = recon_loss_with_denominator(&i_hat, &target, &denom);
    parts.recon = recon;
    for (c, g) in cots.iter_mut().zip(g_recon) {
        c.i_hat = g;
    }

    let pp = batch.patch_size * batch.patch_size;
    let n_patches = batch.patches.len() as f64;

    if w.lambda_geo > 0.0 {
        let priors = data.depth_priors.as_ref().ok_or_else(|| Error::Config("missing depth priors".into()))?;
        for (pi, p) in batch.patches.iter().enumerate() {
            let range = pi * pp..(pi + 1) * pp;
            let raw: Vec<f64> = outs[range.clone()].iter().map(|o| o.depth_los).collect();
            let norm = NormalizedDepth::new(&raw);
            let prior: Vec<f64> = range
                .clone()
                .map(|k| {
                    let (_, r, c) = batch.pixel(k);
                    priors[p.view].values[r * priors[p.view].width + c]
                })
                .collect();
            let (v, g) = geo_loss(&norm.values, &normalize_min_max(&prior));
            parts.geo += v / n_patches;
            let g_raw = norm.backward(&g);
            for (k, gk) in range.zip(g_raw) {
                cots[k].depth += w.lambda_geo * gk / n_patches;
            }
        }
    }

    if w.lambda_comp > 0.0 {
        let mut j_patches = Vec::with_capacity(batch.patches.len());
        let mut i_patches = Vec::with_capacity(batch.patches.len());
        for pi in 0..batch.patches.len() {
            let range = pi * pp..(pi + 1) * pp;
            let s = batch.patch_size;
            j_patches.push(Image::from_spectra(s, s, &outs[range.clone()].iter().map(|o| o.j_hat).collect::<Vec<_>>()));
            i_patches.push(Image::from_spectra(s, s, &target[range]));
        }
        let (v, grads) = comp_ssim_loss(&j_patches, &i_patches, &cfg.comp)?;
        parts.comp = v;
        for (pi, g) in grads.iter().enumerate() {
            for local in 0..pp {
                let c = &mut cots[pi * pp + local].j_hat;
                for ch in 0..3 {
                    c[ch] += w.lambda_comp * g.data[local * 3 + ch];
                }
            }
        }
    }

    let total_intervals: usize = outs.iter().map(|o| o.deltas.len()).sum();
    if w.lambda_mutex > 0.0 || w.lambda_trans > 0.0 {
        for c in cots.iter_mut().zip(&outs) {
            c.0.sigma_obj = vec![0.0; c.1.deltas.len()];
            c.0.media = vec![0.0; c.1.deltas.len()];
        }
    }
    if w.lambda_mutex > 0.0 {
        for (c, o) in cots.iter_mut().zip(&outs) {
            let (v, go, gm) = mutex_loss_with_count(&o.sigma_obj, &o.media, total_intervals);
            parts.mutex += v;
            for i in 0..go.len() {
                c.sigma_obj[i] += w.lambda_mutex * go[i];
                c.media[i] += w.lambda_mutex * gm[i];
            }
        }
    }
    if w.lambda_trans > 0.0 {
        let illum = data.illumination.as_ref().ok_or_else(|| Error::Config("missing illumination maps".into()))?;
        for (k, (c, o)) in cots.iter_mut().zip(&outs).enumerate() {
            let (v, r, col) = batch.pixel(k);
            let t_tilde = illum[v].values[r * illum[v].width + col];
            let (t, dt) = surface_transmittance(&o.sigma_obj, &o.media, &o.deltas, &o.midpoints, o.depth_los);
            let res = t - t_tilde;
            parts.media += res * res / n as f64;
            let g = 2.0 * res / n as f64 * w.lambda_trans;
            for i in 0..dt.len() {
                c.sigma_obj[i] += g * dt[i];
                c.media[i] += g * dt[i];
            }
            let (mv, mg) = mono_loss_with_count(&o.media, total_intervals);
            parts.mono += mv;
            for i in 0..mg.len() {
                c.media[i] += w.lambda_trans * mg[i];
            }
        }
    }

    check_finite(&parts)?;
    let total = crate::loss::total_loss(&parts, w);
    if !with_grad {
        return Ok(Evaluation { total, parts, grad: None });
    }

    let idx: Vec<usize> = (0..n).collect();
    let chunk_grads: Vec<FieldGrad> = idx
        .par_chunks(CHUNK_RAYS)
        .map(|chunk| {
            let mut g = FieldGrad::zeros_like(fields);
            for &k in chunk {
                backward_ray(&batch.rays[k], &prepared, &batch.samples[k], &opts, &cots[k], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grad = FieldGrad::zeros_like(fields);
    for g in &chunk_grads {
        grad.add_assign(g);
    }
    if let Some(block) = grad.first_non_finite() {
        return Err(Error::NonFinite {
            term: format!("gradient of {block}"),
        });
    }
    Ok(Evaluation {
        total,
        parts,
        grad: Some(grad),
    })
}

/// First and second moment estimates for every parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(fields: &mut FieldSet) -> Self {
        let sizes: Vec<usize> = fields.param_blocks_mut().iter().map(|b| b.len()).collect();
        Adam {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    /// One update with a learning rate per block; a zero rate freezes the block.
    pub fn step(&mut self, fields: &mut FieldSet, grad: &FieldGrad, lr: &[f64; 7]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (b, (params, g)) in fields.param_blocks_mut().into_iter().zip(grad.blocks()).enumerate() {
            let lr = lr[b];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..params.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        fields.medium.project();
    }
}

/// Result of a completed fit.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub fields: FieldSet,
    pub history: FitHistory,
}

/// Index of the Φ block in [`FieldSet::param_blocks_mut`].
const PHI_BLOCK: usize = 5;

/// Per-block learning rates for one step.
fn block_rates(fields: &FieldSet, cfg: &FitConfig, lr: f64) -> [f64; 7] {
    let grid = lr * cfg.grid_lr_scale;
    let down = match fields.downwelling {
        crate::field::DownwellingField::Grid { .. } => grid,
        crate::field::DownwellingField::Plane { .. } => lr,
    };
    let mut rates = [grid, grid, grid, lr, lr, lr, down];
    if !cfg.learn_phi {
        rates[PHI_BLOCK] = 0.0;
    }
    rates
}

pub fn fit(fields: FieldSet, data: &FitData, cfg: &FitConfig) -> Result<FitOutcome> {
    fit_with_observer(fields, data, cfg, |_| {})
}

/// Runs the optimisation, calling `observe` after every step.
pub fn fit_with_observer(
    mut fields: FieldSet,
    data: &FitData,
    cfg: &FitConfig,
    mut observe: impl FnMut(&FitRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    fields.validate()?;
    data.validate(cfg)?;
    let rays = ViewRays::new(data)?;
    let mut adam = Adam::new(&mut fields);
    let mut history = FitHistory::default();
    for step in 0..cfg.steps {
        let batch = draw_batch(&fields.prepare(), data, &rays, cfg, step)?;
        let eval = evaluate(&fields, data, &batch, cfg, true)?;
        let lr = cfg.learning_rate(step);
        let record = FitRecord {
            step,
            lr,
            total: eval.total,
            parts: eval.parts,
        };
        history.records.push(record);
        observe(&record);
        if eval.total > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                loss: eval.total,
                history: Box::new(history),
            });
        }
        let grad = eval.grad.ok_or_else(|| Error::Internal("gradient missing".into()))?;
        let rates = block_rates(&fields, cfg, lr);
        adam.step(&mut fields, &grad, &rates);
    }
    Ok(FitOutcome { fields, history })
}
