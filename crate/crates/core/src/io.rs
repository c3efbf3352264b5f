//! On-disk formats: atomic writes, pose sidecars, dataset layout and run
//! manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Matrix3, Matrix4, Rotation3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{read_pfm, Image};
use crate::scene::{CameraKind, CameraModel};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn pose_to_matrix(pose: &Isometry3<f64>) -> Matrix4<f64> {
    pose.to_homogeneous()
}

/// Rigid pose from a 4x4 world-from-camera matrix; rejects non-orthonormal rotations.
pub fn matrix_to_pose(m: &Matrix4<f64>) -> Result<Isometry3<f64>> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-8 || r.determinant() < 0.0 {
        return Err(Error::Config(format!("pose rotation is not a proper rotation (error {err:e})")));
    }
    if (m.fixed_view::<1, 4>(3, 0) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > 1e-12 {
        return Err(Error::Config("pose matrix bottom row must be 0 0 0 1".into()));
    }
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Isometry3::from_parts(Translation3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]), rot))
}

/// One `name m00 m01 ... m33` line per image.
pub fn write_poses(path: &Path, poses: &[(String, Isometry3<f64>)]) -> Result<()> {
    let mut text = String::from("# image world_from_camera (4x4, row-major)\n");
    for (name, pose) in poses {
        let m = pose_to_matrix(pose);
        text.push_str(name);
        for r in 0..4 {
            for c in 0..4 {
                text.push_str(&format!(" {:.17e}", m[(r, c)]));
            }
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<(String, Isometry3<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = parts
            .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_>>()?;
        if vals.len() != 16 {
            return Err(bad(format!("expected 16 matrix entries, got {}", vals.len())));
        }
        let m = Matrix4::from_row_slice(&vals);
        out.push((name, matrix_to_pose(&m)?));
    }
    Ok(out)
}

/// Intrinsics of one view; the pose lives in the pose sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewIntrinsics {
    pub name: String,
    pub kind: CameraKind,
    pub near: f64,
    pub far: f64,
    pub height: usize,
    pub width: usize,
}

/// A multi-view dataset as stored on disk.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub camera: CameraModel,
    pub image: Image,
}

pub const IMAGE_DIR: &str = "images";
pub const POSES_FILE: &str = "poses.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_intrinsics(dir: &Path, views: &[ViewIntrinsics]) -> Result<()> {
    let text = serde_json::to_string_pretty(views).map_err(|e| Error::Internal(e.to_string()))?;
    write_atomic(&dir.join(INTRINSICS_FILE), text.as_bytes())
}

/// Loads `images/<name>.pfm`, the pose sidecar and the intrinsics list.
pub fn load_dataset(dir: &Path) -> Result<Vec<View>> {
    let ipath = dir.join(INTRINSICS_FILE);
    let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let intrinsics: Vec<ViewIntrinsics> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: ipath.clone(),
        reason: e.to_string(),
    })?;
    let poses: BTreeMap<String, Isometry3<f64>> = read_poses(&dir.join(POSES_FILE))?.into_iter().collect();
    let mut views = Vec::with_capacity(intrinsics.len());
    for vi in intrinsics {
        let pose = *poses.get(&vi.name).ok_or_else(|| Error::Format {
            path: dir.join(POSES_FILE),
            reason: format!("no pose for image '{}'", vi.name),
        })?;
        let image = read_pfm(&dir.join(IMAGE_DIR).join(format!("{}.pfm", vi.name)))?;
        if image.height != vi.height || image.width != vi.width || image.channels != 3 {
            return Err(Error::Format {
                path: dir.join(IMAGE_DIR),
                reason: format!("image '{}' does not match its declared size", vi.name),
            });
        }
        let mut camera = CameraModel::new(vi.kind, pose);
        camera.near = vi.near;
        camera.far = vi.far;
        camera.validate()?;
        views.push(View {
            name: vi.name,
            camera,
            image,
        });
    }
    Ok(views)
}

/// Traceability record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        Manifest {
            tool: "volmedia".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: sha256_hex(config_text.as_bytes()),
            seed,
            artifacts: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            reason: e.to_string(),
        })
    }
}
