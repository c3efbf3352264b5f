//! Ground-truth scenes rendered in closed form, plus the downstream
//! applications built on fitted models (volume estimation and re-rendering
//! with a rescaled downwelling depth).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PreparedFields;
use crate::imaging::{write_pfm, write_png_srgb, Image};
use crate::io::{write_intrinsics, write_poses, ViewIntrinsics, IMAGE_DIR};
use crate::radiative::{compose, downwelling_color, Condition, DegradationSpec, DownwellingParams};
use crate::render::{render_view, RenderOptions, RenderedView};
use crate::sampler::SamplerConfig;
use crate::scene::{generate_rays, CameraKind, CameraModel, Ray, Spectrum, Vec3};

pub use crate::imaging::{psnr, ssim};

/// Axis-aligned opaque box. The clean colour is `color`, optionally modulated
/// by a smooth sinusoidal pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: Spectrum,
    #[serde(default)]
    pub pattern: Option<Pattern>,
}

/// `amplitude · (sin 2πx/P + sin 2πy/P + sin 2πz/P) / 3` added to the base colour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub amplitude: Spectrum,
    pub period: f64,
}

impl OracleBox {
    pub fn color_at(&self, p: &Vec3) -> Spectrum {
        match &self.pattern {
            None => self.color,
            Some(pat) => {
                let k = 2.0 * std::f64::consts::PI / pat.period;
                let wave = ((k * p.x).sin() + (k * p.y).sin() + (k * p.z).sin()) / 3.0;
                (self.color + pat.amplitude * wave).map(|v| v.clamp(0.0, 1.0))
            }
        }
    }
}

/// Axis-aligned region of extra grey absorption (low-light illumination falloff).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Absorber {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub density: f64,
}

/// Source of the backscatter colour `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmbientModel {
    /// Same colour for every ray.
    Constant { color: Spectrum },
    /// Sunlight attenuated down to the ray's mean depth below `surface_height`.
    Downwelling { surface_height: f64, phi: Spectrum },
}

/// A view placed with a look-at rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleView {
    pub name: String,
    pub kind: CameraKind,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default)]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_far() -> f64 {
    3.0_f64.sqrt()
}

impl OracleView {
    pub fn camera(&self) -> CameraModel {
        let mut cam = CameraModel::look_at(self.kind, Vec3::from(self.eye), Vec3::from(self.target));
        cam.near = self.near;
        cam.far = self.far;
        cam
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub condition: Condition,
    #[serde(default)]
    pub boxes: Vec<OracleBox>,
    #[serde(default)]
    pub absorbers: Vec<Absorber>,
    pub sigma_attn: Spectrum,
    pub sigma_scat: Spectrum,
    pub ambient: AmbientModel,
    pub views: Vec<OracleView>,
    pub height: usize,
    pub width: usize,
}

impl OracleScene {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: &[f64; 3]| p.iter().all(|v| (0.0..=1.0).contains(v));
        for b in &self.boxes {
            if !inside(&b.min) || !inside(&b.max) || (0..3).any(|a| b.min[a] >= b.max[a]) {
                return Err(Error::Config(format!("box {b:?} must be a non-empty region of the unit cube")));
            }
            if b.pattern.is_some_and(|p| !(p.period > 0.0)) {
                return Err(Error::Config("pattern period must be > 0".into()));
            }
        }
        if self.condition == Condition::Underwater {
            if let AmbientModel::Downwelling { surface_height, .. } = self.ambient {
                if self.boxes.iter().any(|b| b.max[1] > surface_height) {
                    return Err(Error::Config("the water surface must lie above all geometry".into()));
                }
            }
        }
        if self.views.is_empty() || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene needs at least one view and a non-empty image size".into()));
        }
        let probe = DegradationSpec {
            j: Spectrum::ZERO,
            b: Spectrum::ZERO,
            sigma_attn: self.sigma_attn,
            sigma_scat: self.sigma_scat,
            z: 0.0,
            condition: self.condition,
        };
        probe.validate()
    }
}

/// Ground-truth layers of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub name: String,
    pub camera: CameraModel,
    /// Degraded observation.
    pub observed: Image,
    /// Clean radiance.
    pub clean: Image,
    /// Line-of-sight distance through the medium.
    pub depth: Vec<f64>,
    /// Downwelling depth assigned to each ray.
    pub z_phi: Vec<f64>,
    /// Per-channel direct transmittance.
    pub transmission: Image,
    pub backscatter: Image,
    pub hit: Vec<bool>,
}

/// Entry/exit parameters of a ray against a box, if it intersects.
fn box_span(ray: &Ray, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o < min[a] || o > max[a] {
                return None;
            }
            continue;
        }
        let t0 = (min[a] - o) / d;
        let t1 = (max[a] - o) / d;
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (hi >= lo).then_some((lo, hi))
}

/// Nearest box surface along the ray within its bounds.
fn first_hit<'a>(ray: &Ray, boxes: &'a [OracleBox]) -> Option<(f64, &'a OracleBox)> {
    boxes
        .iter()
        .filter_map(|b| {
            let (lo, hi) = box_span(ray, &b.min, &b.max)?;
            let t = lo.max(ray.t_near);
            (t <= hi && t <= ray.t_far).then_some((t, b))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Per-pixel closed-form synthesis of every view.
pub fn generate(scene: &OracleScene) -> Result<Vec<SynthView>> {
    scene.validate()?;
    let size = (scene.height, scene.width);
    scene
        .views
        .iter()
        .map(|view| {
            let camera = view.camera();
            let rays = generate_rays(&camera, size)?;
            let n = rays.rays.len();
            let mut observed = Image::new(size.0, size.1, 3);
            let mut clean = Image::new(size.0, size.1, 3);
            let mut transmission = Image::new(size.0, size.1, 3);
            let mut backscatter = Image::new(size.0, size.1, 3);
            let mut depth = vec![0.0; n];
            let mut z_phi = vec![0.0; n];
            let mut hit = vec![false; n];
            for (k, ray) in rays.rays.iter().enumerate() {
                let (t_end, j) = match first_hit(ray, &scene.boxes) {
                    Some((t, b)) => {
                        hit[k] = true;
                        (t, b.color_at(&ray.at(t)))
                    }
                    None => (ray.t_far, Spectrum::ZERO),
                };
                let z = t_end - ray.t_near;
                depth[k] = z;
                let mid = ray.at(0.5 * (ray.t_near + t_end));
                let (b, zp) = match &scene.ambient {
                    AmbientModel::Constant { color } => (*color, 0.0),
                    AmbientModel::Downwelling { surface_height, phi } => {
                        let zp = (surface_height - mid.y).max(0.0);
                        let c = downwelling_color(&DownwellingParams { phi: *phi, z_phi: zp }, scene.sigma_attn, scene.sigma_scat);
                        (c, zp)
                    }
                };
                z_phi[k] = zp;
                let (i, t, bs) = if scene.condition == Condition::Lowlight {
                    let extra: f64 = scene
                        .absorbers
                        .iter()
                        .filter_map(|a| {
                            let (lo, hi) = box_span(ray, &a.min, &a.max)?;
                            let len = (hi.min(t_end) - lo.max(ray.t_near)).max(0.0);
                            Some(a.density * len)
                        })
                        .sum();
                    let t = scene.sigma_attn.map(|s| (-(s * z) - extra).exp());
                    (j * t, t, Spectrum::ZERO)
                } else {
                    let spec = DegradationSpec {
                        j,
                        b,
                        sigma_attn: scene.sigma_attn,
                        sigma_scat: scene.sigma_scat,
                        z,
                        condition: scene.condition,
                    };
                    let t = scene.sigma_attn.map(|s| (-s * z).exp());
                    (compose(&spec), t, b * scene.sigma_scat.map(|s| -(-s * z).exp_m1()))
                };
                let (r, c) = (k / size.1, k % size.1);
                for ch in 0..3 {
                    observed.set(r, c, ch, i[ch]);
                    clean.set(r, c, ch, j[ch]);
                    transmission.set(r, c, ch, t[ch]);
                    backscatter.set(r, c, ch, bs[ch]);
                }
            }
            Ok(SynthView {
                name: view.name.clone(),
                camera,
                observed,
                clean,
                depth,
                z_phi,
                transmission,
                backscatter,
                hit,
            })
        })
        .collect()
}

/// Writes a generated dataset: observations under `images/`, ground-truth
/// layers under their own folders, the pose sidecar and intrinsics.
pub fn write_dataset(dir: &Path, scene: &OracleScene, views: &[SynthView]) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    let mut poses = Vec::new();
    let mut intr = Vec::new();
    let (h, w) = (scene.height, scene.width);
    for v in views {
        let layers: [(&str, Image); 5] = [
            (IMAGE_DIR, v.observed.clone()),
            ("clean", v.clean.clone()),
            ("depth", Image::from_gray(h, w, &v.depth)),
            ("zphi", Image::from_gray(h, w, &v.z_phi)),
            ("transmission", v.transmission.clone()),
        ];
        for (sub, img) in layers {
            let p = dir.join(sub).join(format!("{}.pfm", v.name));
            write_pfm(&p, &img)?;
            written.push(p);
        }
        let preview = dir.join("preview").join(format!("{}.png", v.name));
        write_png_srgb(&preview, &v.observed)?;
        written.push(preview);
        poses.push((v.name.clone(), v.camera.pose));
        intr.push(ViewIntrinsics {
            name: v.name.clone(),
            kind: v.camera.kind,
            near: v.camera.near,
            far: v.camera.far,
            height: h,
            width: w,
        });
    }
    write_poses(&dir.join(crate::io::POSES_FILE), &poses)?;
    write_intrinsics(dir, &intr)?;
    let truth = serde_json::to_string_pretty(scene).map_err(|e| Error::Internal(e.to_string()))?;
    crate::io::write_atomic(&dir.join("scene.json"), truth.as_bytes())?;
    written.push(dir.join(crate::io::POSES_FILE));
    written.push(dir.join(crate::io::INTRINSICS_FILE));
    written.push(dir.join("scene.json"));
    Ok(written)
}

/// Volume of medium seen by an orthographic view: `Σ z · Δz^Φ · Δw`, where
/// `Δz^Φ` is the positive increase of downwelling depth from the row above
/// (the top row counts from zero) and `Δw = width_real / W`.
/// Both maps must already be in the target length unit.
pub fn estimate_volume(
    depth_los: &[f64],
    z_phi: &[f64],
    height: usize,
    width: usize,
    width_real: f64,
    camera: &CameraModel,
) -> Result<f64> {
    if !camera.is_orthographic() {
        return Err(Error::Contract("volume estimation requires an orthographic camera".into()));
    }
    if !(width_real > 0.0) {
        return Err(Error::Config(format!("real width must be > 0, got {width_real}")));
    }
    if depth_los.len() != height * width || z_phi.len() != height * width || height == 0 || width == 0 {
        return Err(Error::Input("depth maps do not match the image shape".into()));
    }
    let dw = width_real / width as f64;
    let mut total = 0.0;
    for r in 0..height {
        for c in 0..width {
            let above = if r == 0 { 0.0 } else { z_phi[(r - 1) * width + c] };
            let dz = (z_phi[r * width + c] - above).max(0.0);
            total += depth_los[r * width + c] * dz * dw;
        }
    }
    Ok(total)
}

/// Re-renders views with every downwelling depth multiplied by `scale`.
pub fn resynthesize_depth_scaled(
    fields: &PreparedFields<'_>,
    cameras: &[CameraModel],
    size: (usize, usize),
    sampler: &SamplerConfig,
    condition: Condition,
    scale: f64,
    seed: u64,
) -> Result<Vec<RenderedView>> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("depth scale must be finite and >= 0, got {scale}")));
    }
    let opts = RenderOptions {
        condition,
        z_phi_scale: scale,
    };
    cameras
        .par_iter()
        .map(|cam| render_view(fields, cam, size, sampler, &opts, seed))
        .collect()
}
