//! Dense voxel-grid fields for object density/colour and medium density, the
//! global medium coefficients, and the downwelling-depth field.
//!
//! Grid nodes sit at `i / (n - 1)` along each axis of the unit scene cube and
//! queries interpolate *activated* node values trilinearly, so every query is
//! a linear combination of eight activated parameters and its gradient with
//! respect to the raw parameters is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Spectrum, Vec3};

pub const CHECKPOINT_FORMAT: &str = "volmedia-fields";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `scale * softplus(raw)`; used for densities.
    Softplus { scale: f64 },
    /// Logistic squashing into (0, 1); used for colours.
    Sigmoid,
    Identity,
}

impl Activation {
    /// Activated value and its derivative with respect to the raw value.
    #[inline]
    pub fn apply(self, raw: f64) -> (f64, f64) {
        match self {
            Activation::Softplus { scale } => (scale * softplus(raw), scale * sigmoid(raw)),
            Activation::Sigmoid => {
                let s = sigmoid(raw);
                (s, s * (1.0 - s))
            }
            Activation::Identity => (raw, 1.0),
        }
    }

    /// Raw value whose activation equals `value` (clamped into the activation's range).
    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Activation::Softplus { scale } => softplus_inverse((value / scale).max(1e-12)),
            Activation::Sigmoid => logit(value.clamp(1e-9, 1.0 - 1e-9)),
            Activation::Identity => value,
        }
    }
}

/// The eight grid nodes surrounding a point and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

fn trilinear_corners(resolution: [usize; 3], p: &Vec3) -> Corners {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for axis in 0..3 {
        let n = resolution[axis];
        let s = p[axis].clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (s.floor() as usize).min(n - 2);
        base[axis] = i;
        frac[axis] = s - i as f64;
    }
    let [nx, ny, _] = resolution;
    let mut nodes = [0usize; 8];
    let mut weights = [0.0f64; 8];
    for k in 0..8 {
        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        nodes[k] = ((base[2] + dz) * ny + (base[1] + dy)) * nx + base[0] + dx;
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        weights[k] = wx * wy * wz;
    }
    Corners { nodes, weights }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelField {
    resolution: [usize; 3],
    channels: usize,
    activation: Activation,
    /// Raw parameters, node-major: `((z * ny + y) * nx + x) * channels + c`.
    raw: Vec<f64>,
}

impl VoxelField {
    pub fn new(resolution: [usize; 3], channels: usize, activation: Activation, fill: f64) -> Result<Self> {
        if resolution.iter().any(|n| *n < 2) {
            return Err(Error::Config(format!(
                "voxel resolution must be at least 2 per axis, got {resolution:?}"
            )));
        }
        if channels == 0 {
            return Err(Error::Config("voxel field needs at least one channel".into()));
        }
        let n = resolution.iter().product::<usize>() * channels;
        Ok(VoxelField {
            resolution,
            channels,
            activation,
            raw: vec![fill; n],
        })
    }

    /// Field whose activated value is `value` everywhere.
    pub fn constant(resolution: [usize; 3], activation: Activation, value: &[f64]) -> Result<Self> {
        let mut f = VoxelField::new(resolution, value.len(), activation, 0.0)?;
        let ch = value.len();
        for (k, r) in f.raw.iter_mut().enumerate() {
            *r = activation.inverse(value[k % ch]);
        }
        Ok(f)
    }

    pub fn from_raw(resolution: [usize; 3], channels: usize, activation: Activation, raw: Vec<f64>) -> Result<Self> {
        let mut f = VoxelField::new(resolution, channels, activation, 0.0)?;
        if raw.len() != f.raw.len() {
            return Err(Error::Config(format!(
                "expected {} raw parameters, got {}",
                f.raw.len(),
                raw.len()
            )));
        }
        f.raw = raw;
        Ok(f)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.resolution;
        (z * ny + y) * nx + x
    }

    pub fn node_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let [nx, ny, nz] = self.resolution;
        Vec3::new(
            x as f64 / (nx - 1) as f64,
            y as f64 / (ny - 1) as f64,
            z as f64 / (nz - 1) as f64,
        )
    }

    /// Sets a node's activated value (inverting the activation).
    pub fn set_node(&mut self, node: usize, value: &[f64]) {
        for (c, v) in value.iter().enumerate().take(self.channels) {
            self.raw[node * self.channels + c] = self.activation.inverse(*v);
        }
    }

    /// Trilinear corners of `p`; coordinates outside the unit cube are clamped.
    pub fn corners(&self, p: &Vec3) -> Corners {
        trilinear_corners(self.resolution, p)
    }

    /// Activated, interpolated value at `p`.
    pub fn query(&self, p: &Vec3) -> Result<Vec<f64>> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("non-finite query point {p:?}")));
        }
        let c = self.corners(p);
        let mut out = vec![0.0; self.channels];
        for k in 0..8 {
            for (ch, o) in out.iter_mut().enumerate() {
                let (v, _) = self.activation.apply(self.raw[c.nodes[k] * self.channels + ch]);
                *o += c.weights[k] * v;
            }
        }
        Ok(out)
    }

    /// Activated values and slopes for every raw parameter.
    pub fn prepare(&self) -> ActiveGrid {
        let (values, slopes) = self.raw.iter().map(|r| self.activation.apply(*r)).unzip();
        ActiveGrid {
            field: self.clone_shape(),
            values,
            slopes,
        }
    }

    fn clone_shape(&self) -> GridShape {
        GridShape {
            resolution: self.resolution,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GridShape {
    resolution: [usize; 3],
    channels: usize,
}

/// A voxel field with activations evaluated once, for repeated queries.
#[derive(Debug, Clone)]
pub struct ActiveGrid {
    field: GridShape,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl ActiveGrid {
    pub fn channels(&self) -> usize {
        self.field.channels
    }

    pub fn corners(&self, p: &Vec3) -> Corners {
        trilinear_corners(self.field.resolution, p)
    }

    #[inline]
    pub fn sample(&self, c: &Corners, channel: usize) -> f64 {
        let ch = self.field.channels;
        let mut v = 0.0;
        for k in 0..8 {
            v += c.weights[k] * self.values[c.nodes[k] * ch + channel];
        }
        v
    }

    /// Adds `g * d(value)/d(raw)` for every raw parameter touched by the query.
    #[inline]
    pub fn scatter(&self, c: &Corners, channel: usize, g: f64, grad: &mut [f64]) {
        if g == 0.0 {
            return;
        }
        let ch = self.field.channels;
        for k in 0..8 {
            let idx = c.nodes[k] * ch + channel;
            grad[idx] += g * c.weights[k] * self.slopes[idx];
        }
    }
}

/// How the medium coefficients vary in space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediumMode {
    /// `sigma_attn`, `sigma_scat` are used as-is for every sample.
    GlobalConstant,
    /// Per-sample coefficients `sigma * m(x)` are pooled into one value per ray.
    PerRayPooled,
    /// Per-sample media density is kept for every sample.
    PerSample,
}

/// Global medium coefficients. All stored values are constrained to be non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediumParams {
    pub sigma_attn: Spectrum,
    pub sigma_scat: Spectrum,
    /// Sunlight constant at the medium surface.
    pub phi: Spectrum,
    pub mode: MediumMode,
}

impl MediumParams {
    pub fn new(sigma_attn: Spectrum, sigma_scat: Spectrum, phi: Spectrum, mode: MediumMode) -> Result<Self> {
        let m = MediumParams {
            sigma_attn,
            sigma_scat,
            phi,
            mode,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_attn", self.sigma_attn),
            ("sigma_scat", self.sigma_scat),
            ("phi", self.phi),
        ] {
            if !s.is_valid_radiance() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {s:?}")));
            }
        }
        Ok(())
    }

    /// Projects coefficients back onto the feasible set after an update.
    pub fn project(&mut self) {
        for s in [&mut self.sigma_attn, &mut self.sigma_scat, &mut self.phi] {
            *s = s.map(|v| v.max(0.0));
        }
    }
}

/// Vertical distance from a point to the medium surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DownwellingField {
    /// Horizontal surface at world height `surface_height`: `z = max(0, h - y)`.
    Plane { surface_height: f64 },
    /// Free-form non-negative field (softplus-activated grid).
    Grid { grid: VoxelField },
}

impl DownwellingField {
    pub fn plane(surface_height: f64) -> Self {
        DownwellingField::Plane { surface_height }
    }

    pub fn at(&self, p: &Vec3) -> Result<f64> {
        match self {
            DownwellingField::Plane { surface_height } => Ok((surface_height - p.y).max(0.0)),
            DownwellingField::Grid { grid } => Ok(grid.query(p)?[0]),
        }
    }

    fn param_len(&self) -> usize {
        match self {
            DownwellingField::Plane { .. } => 1,
            DownwellingField::Grid { grid } => grid.raw().len(),
        }
    }
}

/// Every learnable quantity of the scene model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSet {
    pub object_density: VoxelField,
    pub object_color: VoxelField,
    pub media_density: VoxelField,
    pub medium: MediumParams,
    pub downwelling: DownwellingField,
}

/// Initial values for a fresh [`FieldSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldInit {
    pub object_resolution: usize,
    pub media_resolution: usize,
    /// Multiplier applied after the softplus of object density.
    pub object_density_scale: f64,
    pub object_density: f64,
    pub object_color: f64,
    pub media_density: f64,
    pub sigma_attn: Spectrum,
    pub sigma_scat: Spectrum,
    /// White point of the working linear RGB space (D65 maps to 1,1,1).
    pub phi: Spectrum,
    pub mode: MediumMode,
    pub surface_height: f64,
    /// Use a voxel grid instead of the analytic plane for downwelling depth.
    pub downwelling_grid: bool,
}

impl Default for FieldInit {
    fn default() -> Self {
        FieldInit {
            object_resolution: 32,
            media_resolution: 16,
            object_density_scale: 50.0,
            object_density: 0.5,
            object_color: 0.5,
            media_density: 1.0,
            sigma_attn: Spectrum::splat(0.5),
            sigma_scat: Spectrum::splat(0.5),
            phi: Spectrum::ONE,
            mode: MediumMode::PerRayPooled,
            surface_height: 1.0,
            downwelling_grid: false,
        }
    }
}

impl FieldSet {
    pub fn from_init(init: &FieldInit) -> Result<Self> {
        let no = [init.object_resolution; 3];
        let nm = [init.media_resolution; 3];
        let density_act = Activation::Softplus {
            scale: init.object_density_scale,
        };
        let downwelling = if init.downwelling_grid {
            DownwellingField::Grid {
                grid: VoxelField::constant(
                    nm,
                    Activation::Softplus { scale: 1.0 },
                    &[init.surface_height.max(1e-3)],
                )?,
            }
        } else {
            DownwellingField::plane(init.surface_height)
        };
        Ok(FieldSet {
            object_density: VoxelField::constant(no, density_act, &[init.object_density])?,
            object_color: VoxelField::constant(no, Activation::Sigmoid, &[init.object_color; 3])?,
            media_density: VoxelField::constant(
                nm,
                Activation::Softplus { scale: 1.0 },
                &[init.media_density],
            )?,
            medium: MediumParams::new(init.sigma_attn, init.sigma_scat, init.phi, init.mode)?,
            downwelling,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_density.channels() != 1
            || self.object_color.channels() != 3
            || self.media_density.channels() != 1
        {
            return Err(Error::Config("field channel counts must be 1/3/1".into()));
        }
        self.medium.validate()
    }

    pub fn prepare(&self) -> PreparedFields<'_> {
        PreparedFields {
            fields: self,
            object_density: self.object_density.prepare(),
            object_color: self.object_color.prepare(),
            media_density: self.media_density.prepare(),
            downwelling: match &self.downwelling {
                DownwellingField::Grid { grid } => Some(grid.prepare()),
                DownwellingField::Plane { .. } => None,
            },
        }
    }

    /// Mutable views of all learnable parameters in [`FieldGrad`] block order.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let down: &mut [f64] = match &mut self.downwelling {
            DownwellingField::Plane { surface_height } => std::slice::from_mut(surface_height),
            DownwellingField::Grid { grid } => grid.raw_mut(),
        };
        vec![
            self.object_density.raw_mut(),
            self.object_color.raw_mut(),
            self.media_density.raw_mut(),
            &mut self.medium.sigma_attn.0,
            &mut self.medium.sigma_scat.0,
            &mut self.medium.phi.0,
            down,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.object_density.raw().len()
            + self.object_color.raw().len()
            + self.media_density.raw().len()
            + 9
            + self.downwelling.param_len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            fields: self.clone(),
        };
        let text = serde_json::to_string(&doc).map_err(|e| Error::Internal(e.to_string()))?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "unsupported checkpoint header {}/{}",
                    doc.format, doc.version
                ),
            });
        }
        doc.fields.validate()?;
        Ok(doc.fields)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    fields: FieldSet,
}

/// Read-only view of a [`FieldSet`] with activations evaluated.
pub struct PreparedFields<'a> {
    pub fields: &'a FieldSet,
    pub object_density: ActiveGrid,
    pub object_color: ActiveGrid,
    pub media_density: ActiveGrid,
    pub downwelling: Option<ActiveGrid>,
}

impl PreparedFields<'_> {
    pub fn object_density_at(&self, p: &Vec3) -> f64 {
        let c = self.object_density.corners(p);
        self.object_density.sample(&c, 0)
    }
}

/// Gradient buffers laid out like [`FieldSet::param_blocks_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub object_density: Vec<f64>,
    pub object_color: Vec<f64>,
    pub media_density: Vec<f64>,
    pub sigma_attn: [f64; 3],
    pub sigma_scat: [f64; 3],
    pub phi: [f64; 3],
    pub downwelling: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros_like(fields: &FieldSet) -> Self {
        FieldGrad {
            object_density: vec![0.0; fields.object_density.raw().len()],
            object_color: vec![0.0; fields.object_color.raw().len()],
            media_density: vec![0.0; fields.media_density.raw().len()],
            sigma_attn: [0.0; 3],
            sigma_scat: [0.0; 3],
            phi: [0.0; 3],
            downwelling: vec![0.0; fields.downwelling.param_len()],
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.object_density,
            &self.object_color,
            &self.media_density,
            &self.sigma_attn,
            &self.sigma_scat,
            &self.phi,
            &self.downwelling,
        ]
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        fn add(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add(&mut self.object_density, &other.object_density);
        add(&mut self.object_color, &other.object_color);
        add(&mut self.media_density, &other.media_density);
        add(&mut self.sigma_attn, &other.sigma_attn);
        add(&mut self.sigma_scat, &other.sigma_scat);
        add(&mut self.phi, &other.phi);
        add(&mut self.downwelling, &other.downwelling);
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .object_density
            .iter_mut()
            .chain(self.object_color.iter_mut())
            .chain(self.media_density.iter_mut())
            .chain(self.sigma_attn.iter_mut())
            .chain(self.sigma_scat.iter_mut())
            .chain(self.phi.iter_mut())
            .chain(self.downwelling.iter_mut())
        {
            *v *= s;
        }
    }

    /// Name of the first block containing a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        const NAMES: [&str; 7] = [
            "object_density",
            "object_color",
            "media_density",
            "sigma_attn",
            "sigma_scat",
            "phi",
            "downwelling",
        ];
        self.blocks()
            .iter()
            .zip(NAMES)
            .find(|(b, _)| b.iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Normalised pooling weights; falls back to uniform when all weights vanish.
pub fn pooling_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if total > 1e-300 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// Weighted mean of per-sample values along one ray.
pub fn pool_per_ray(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::Input(format!(
            "pooling needs matching non-empty inputs ({} values, {} weights)",
            values.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Input("pooling weights must be finite and >= 0".into()));
    }
    Ok(pooling_weights(weights)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_field(res: [usize; 3], ch: usize, act: Activation, seed: u64) -> VoxelField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = res.iter().product::<usize>() * ch;
        let raw = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        VoxelField::from_raw(res, ch, act, raw).unwrap()
    }

    /// Independent trilinear reference: explicit corner loops over activated values.
    fn naive_trilinear(f: &VoxelField, p: [f64; 3]) -> Vec<f64> {
        let [nx, ny, nz] = f.resolution();
        let dims = [nx, ny, nz];
        let mut lo = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let g = p[a] * (dims[a] - 1) as f64;
            let mut i = g.floor() as usize;
            if i >= dims[a] - 1 {
                i = dims[a] - 2;
            }
            lo[a] = i;
            t[a] = g - i as f64;
        }
        let act = |x: usize, y: usize, z: usize, c: usize| {
            let idx = ((z * ny + y) * nx + x) * f.channels() + c;
            f.activation().apply(f.raw()[idx]).0
        };
        (0..f.channels())
            .map(|c| {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let w = (if dx == 0 { 1.0 - t[0] } else { t[0] })
                                * (if dy == 0 { 1.0 - t[1] } else { t[1] })
                                * (if dz == 0 { 1.0 - t[2] } else { t[2] });
                            acc += w * act(lo[0] + dx, lo[1] + dy, lo[2] + dz, c);
                        }
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn constant_grid_returns_constant() {
        let f = VoxelField::constant([4, 5, 6], Activation::Sigmoid, &[0.25, 0.5, 0.75]).unwrap();
        let v = f.query(&Vec3::new(0.31, 0.77, 0.05)).unwrap();
        for (a, b) in v.iter().zip([0.25, 0.5, 0.75]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn node_query_returns_node_value() {
        let f = random_field([5, 5, 5], 1, Activation::Softplus { scale: 2.0 }, 1);
        let node = f.node_index(2, 3, 1);
        let p = f.node_position(2, 3, 1);
        let expect = f.activation().apply(f.raw()[node]).0;
        assert!((f.query(&p).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn query_matches_naive_trilinear() {
        let f = random_field([6, 7, 8], 3, Activation::Sigmoid, 2);
        let got = f.query(&Vec3::new(0.3, 0.7, 0.1)).unwrap();
        let want = naive_trilinear(&f, [0.3, 0.7, 0.1]);
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_query_is_an_input_error() {
        let f = VoxelField::new([2, 2, 2], 1, Activation::Identity, 0.0).unwrap();
        assert!(matches!(
            f.query(&Vec3::new(f64::NAN, 0.0, 0.0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn resolution_below_two_is_rejected() {
        assert!(VoxelField::new([1, 4, 4], 1, Activation::Identity, 0.0).is_err());
    }

    #[test]
    fn outside_points_are_clamped() {
        let f = random_field([4, 4, 4], 1, Activation::Identity, 3);
        let a = f.query(&Vec3::new(-0.5, 1.7, 0.5)).unwrap();
        let b = f.query(&Vec3::new(0.0, 1.0, 0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_gradient_matches_central_differences() {
        let f = random_field([4, 4, 4], 3, Activation::Sigmoid, 4);
        let p = Vec3::new(0.41, 0.13, 0.88);
        let active = f.prepare();
        let c = active.corners(&p);
        let mut grad = vec![0.0; f.raw().len()];
        for ch in 0..3 {
            active.scatter(&c, ch, 1.0, &mut grad);
        }
        let h = 1e-4;
        for &node in &c.nodes {
            for ch in 0..3 {
                let idx = node * 3 + ch;
                let mut plus = f.clone();
                plus.raw_mut()[idx] += h;
                let mut minus = f.clone();
                minus.raw_mut()[idx] -= h;
                let fp: f64 = plus.query(&p).unwrap().iter().sum();
                let fm: f64 = minus.query(&p).unwrap().iter().sum();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - grad[idx]).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "node {node} ch {ch}: fd {fd} vs {}", grad[idx]);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(pool_per_ray(&[5.0; 4], &[0.3, 0.1, 0.0, 2.0]).unwrap(), 5.0);
        assert_eq!(pool_per_ray(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), 2.0);
        // zero weights fall back to the plain mean
        assert_eq!(pool_per_ray(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(pool_per_ray(&[], &[]).is_err());
    }

    #[test]
    fn pooling_matches_direct_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..2.0)).collect();
        let num: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let den: f64 = w.iter().sum();
        assert!((pool_per_ray(&v, &w).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fields.json");
        let mut init = FieldInit::default();
        init.object_resolution = 3;
        init.media_resolution = 2;
        let mut f = FieldSet::from_init(&init).unwrap();
        f.object_density.raw_mut()[5] = 1.234567891234;
        f.save(&path).unwrap();
        let g = FieldSet::load(&path).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn checkpoint_with_wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format":"other","version":1,"fields":null}"#).unwrap();
        assert!(FieldSet::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn softplus_density_is_non_negative(raw in -800.0f64..800.0, scale in 0.01f64..100.0) {
            let (v, d) = Activation::Softplus { scale }.apply(raw);
            prop_assert!(v >= 0.0 && d >= 0.0);
            prop_assert!(v.is_finite());
        }

        #[test]
        fn sigmoid_colour_stays_in_unit_interval(raw in -800.0f64..800.0) {
            let (v, _) = Activation::Sigmoid.apply(raw);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
