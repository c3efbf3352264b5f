//! Geometric and radiometric value types: rays, spectra, sample sets and cameras.

use std::ops::{Add, Div, Index, IndexMut, Mul, Sub};

use nalgebra::{Isometry3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Linear RGB radiance triple; the channel index stands in for wavelength.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Spectrum(pub [f64; 3]);

impl Spectrum {
    pub const ZERO: Spectrum = Spectrum([0.0; 3]);
    pub const ONE: Spectrum = Spectrum([1.0; 3]);

    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Spectrum([r, g, b])
    }

    pub fn splat(v: f64) -> Self {
        Spectrum([v; 3])
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Spectrum(self.0.map(f))
    }

    pub fn zip(self, other: Spectrum, f: impl Fn(f64, f64) -> f64) -> Self {
        Spectrum([
            f(self.0[0], other.0[0]),
            f(self.0[1], other.0[1]),
            f(self.0[2], other.0[2]),
        ])
    }

    pub fn exp(self) -> Self {
        self.map(f64::exp)
    }

    pub fn max_component(self) -> f64 {
        self.0[0].max(self.0[1]).max(self.0[2])
    }

    pub fn mean(self) -> f64 {
        (self.0[0] + self.0[1] + self.0[2]) / 3.0
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// True when every channel is finite and non-negative.
    pub fn is_valid_radiance(self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

impl Index<usize> for Spectrum {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Spectrum {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for Spectrum {
    type Output = Spectrum;
    fn add(self, rhs: Spectrum) -> Spectrum {
        self.zip(rhs, |a, b| a + b)
    }
}

impl Sub for Spectrum {
    type Output = Spectrum;
    fn sub(self, rhs: Spectrum) -> Spectrum {
        self.zip(rhs, |a, b| a - b)
    }
}

impl Mul for Spectrum {
    type Output = Spectrum;
    fn mul(self, rhs: Spectrum) -> Spectrum {
        self.zip(rhs, |a, b| a * b)
    }
}

impl Mul<f64> for Spectrum {
    type Output = Spectrum;
    fn mul(self, rhs: f64) -> Spectrum {
        self.map(|a| a * rhs)
    }
}

impl Div<f64> for Spectrum {
    type Output = Spectrum;
    fn div(self, rhs: f64) -> Spectrum {
        self.map(|a| a / rhs)
    }
}

/// A ray `r(t) = origin + t * direction` restricted to `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if !(origin.iter().all(|v| v.is_finite()) && direction.iter().all(|v| v.is_finite())) {
            return Err(Error::Input("ray origin/direction must be finite".into()));
        }
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "ray direction must be unit length, got |d| = {}",
                direction.norm()
            )));
        }
        if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(Error::Input(format!(
                "ray bounds must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Parametric entry/exit distances of the ray line through the unit cube.
    pub fn unit_cube_span(&self) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for axis in 0..3 {
            let o = self.origin[axis];
            let d = self.direction[axis];
            if d.abs() < 1e-15 {
                if !(0.0..=1.0).contains(&o) {
                    return None;
                }
                continue;
            }
            let a = (0.0 - o) / d;
            let b = (1.0 - o) / d;
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (hi > lo).then_some((lo, hi))
    }
}

/// Rays for one image in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub height: usize,
    pub width: usize,
    pub rays: Vec<Ray>,
}

impl RayBatch {
    pub fn get(&self, row: usize, col: usize) -> &Ray {
        &self.rays[row * self.width + col]
    }
}

/// Which sampling phase produced a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Object,
    Media,
}

/// Ascending ray-marching positions with their phase tags.
///
/// Consecutive positions bound the quadrature intervals, so `n` positions
/// yield `n - 1` intervals of length `deltas()[k] = t[k+1] - t[k]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    positions: Vec<f64>,
    phases: Vec<Phase>,
}

impl SampleSet {
    /// Builds a set from already-ascending positions. Equal neighbours are coalesced.
    pub fn from_sorted(positions: Vec<f64>, phases: Vec<Phase>) -> Result<Self> {
        if positions.len() != phases.len() {
            return Err(Error::Input("positions and phases differ in length".into()));
        }
        if positions.iter().any(|t| !t.is_finite()) {
            return Err(Error::Input("sample positions must be finite".into()));
        }
        if positions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("sample positions must be ascending".into()));
        }
        let mut out = SampleSet::default();
        for (t, p) in positions.into_iter().zip(phases) {
            out.push_coalescing(t, p);
        }
        Ok(out)
    }

    pub fn uniform(t_near: f64, t_far: f64, count: usize, phase: Phase) -> Self {
        let positions = (0..count)
            .map(|k| {
                if count == 1 {
                    t_near
                } else {
                    t_near + (t_far - t_near) * k as f64 / (count - 1) as f64
                }
            })
            .collect::<Vec<_>>();
        let phases = vec![phase; positions.len()];
        SampleSet::from_sorted(positions, phases).expect("uniform positions are ascending")
    }

    fn push_coalescing(&mut self, t: f64, phase: Phase) {
        if self.positions.last() == Some(&t) {
            return;
        }
        self.positions.push(t);
        self.phases.push(phase);
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn interval_count(&self) -> usize {
        self.positions.len().saturating_sub(1)
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn count_phase(&self, phase: Phase) -> usize {
        self.phases.iter().filter(|p| **p == phase).count()
    }
}

/// Union of two sample sets: ascending, tags preserved, coincident positions coalesced.
///
/// When both inputs hold the same position the tag from `a` wins.
pub fn sort_merge(a: &SampleSet, b: &SampleSet) -> SampleSet {
    let (pa, pb) = (a.positions(), b.positions());
    let mut out = SampleSet {
        positions: Vec::with_capacity(pa.len() + pb.len()),
        phases: Vec::with_capacity(pa.len() + pb.len()),
    };
    let (mut i, mut j) = (0, 0);
    while i < pa.len() || j < pb.len() {
        let take_a = j >= pb.len() || (i < pa.len() && pa[i] <= pb[j]);
        if take_a {
            out.push_coalescing(pa[i], a.phases[i]);
            i += 1;
        } else {
            out.push_coalescing(pb[j], b.phases[j]);
            j += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraKind {
    /// Focal lengths and principal point in pixels.
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
    /// Image-plane extent in scene units.
    Orthographic { width: f64, height: f64 },
}

/// Camera intrinsics plus a world-from-camera rigid pose.
///
/// The camera looks down its local `-z` axis with `+y` up and `+x` right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub pose: Isometry3<f64>,
    #[serde(default)]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_far() -> f64 {
    3.0_f64.sqrt()
}

impl CameraModel {
    pub fn new(kind: CameraKind, pose: Isometry3<f64>) -> Self {
        CameraModel {
            kind,
            pose,
            near: 0.0,
            far: default_far(),
        }
    }

    /// Camera at `eye` looking at `target` with world `+y` as up.
    pub fn look_at(kind: CameraKind, eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut up = Vec3::y();
        if forward.cross(&up).norm() < 1e-9 {
            up = Vec3::z();
        }
        // isometry whose local -z axis points at the target
        let view = Isometry3::look_at_rh(&Point3::from(eye), &Point3::from(target), &up);
        CameraModel::new(kind, view.inverse())
    }

    pub fn is_orthographic(&self) -> bool {
        matches!(self.kind, CameraKind::Orthographic { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            CameraKind::Pinhole { fx, fy, cx, cy } => {
                fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()
            }
            CameraKind::Orthographic { width, height } => {
                width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()
            }
        };
        if !ok {
            return Err(Error::Config(format!("invalid camera intrinsics {:?}", self.kind)));
        }
        let r = self.pose.rotation.to_rotation_matrix();
        let m = r.matrix();
        let err = (m.transpose() * m - nalgebra::Matrix3::identity()).abs().max();
        if err > 1e-8 {
            return Err(Error::Config(format!(
                "camera rotation is not orthonormal (error {err:e})"
            )));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::Config(format!(
                "camera clip range [{}, {}] is invalid",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// Origin and direction in the camera frame for the centre of pixel (row, col).
    pub fn local_ray(&self, row: usize, col: usize, height: usize, width: usize) -> (Vec3, Vec3) {
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        match self.kind {
            CameraKind::Pinhole { fx, fy, cx, cy } => {
                let d = Vec3::new((u - cx) / fx, -(v - cy) / fy, -1.0);
                (Vec3::zeros(), d.normalize())
            }
            CameraKind::Orthographic {
                width: ew,
                height: eh,
            } => {
                let x = (u / width as f64 - 0.5) * ew;
                let y = -(v / height as f64 - 0.5) * eh;
                (Vec3::new(x, y, 0.0), -Vec3::z())
            }
        }
    }
}

/// One ray per pixel in row-major order.
///
/// Bounds are the camera clip range intersected with the unit scene cube; rays
/// that never enter the cube keep the unclipped range.
pub fn generate_rays(camera: &CameraModel, image_size: (usize, usize)) -> Result<RayBatch> {
    let (height, width) = image_size;
    if height == 0 || width == 0 {
        return Err(Error::Config("image size must be at least 1x1".into()));
    }
    camera.validate()?;
    let mut rays = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let (o, d) = camera.local_ray(row, col, height, width);
            let origin = camera.pose.transform_point(&Point3::from(o)).coords;
            let direction = camera.pose.transform_vector(&d).normalize();
            let mut ray = Ray {
                origin,
                direction,
                t_near: camera.near,
                t_far: camera.far,
            };
            if let Some((lo, hi)) = ray.unit_cube_span() {
                let (n, f) = (lo.max(camera.near), hi.min(camera.far));
                if f > n {
                    ray.t_near = n;
                    ray.t_far = f;
                }
            }
            rays.push(Ray::new(ray.origin, ray.direction, ray.t_near, ray.t_far)?);
        }
    }
    Ok(RayBatch {
        height,
        width,
        rays,
    })
}
