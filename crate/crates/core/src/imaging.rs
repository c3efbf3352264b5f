//! Linear float images, PFM read/write, 8-bit sRGB export and the image
//! quality metrics (PSNR, Gaussian-window SSIM).

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::Spectrum;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Row-major image with interleaved channels (1 or 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_spectra(height: usize, width: usize, px: &[Spectrum]) -> Self {
        Image {
            height,
            width,
            channels: 3,
            data: px.iter().flat_map(|s| s.0).collect(),
        }
    }

    pub fn from_gray(height: usize, width: usize, values: &[f64]) -> Self {
        Image {
            height,
            width,
            channels: 1,
            data: values.to_vec(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Spectrum {
        if self.channels == 1 {
            Spectrum::splat(self.get(row, col, 0))
        } else {
            Spectrum::new(self.get(row, col, 0), self.get(row, col, 1), self.get(row, col, 2))
        }
    }

    /// Single channel as a grey image.
    pub fn channel(&self, ch: usize) -> Image {
        let values: Vec<f64> = (0..self.pixel_count()).map(|k| self.data[k * self.channels + ch]).collect();
        Image::from_gray(self.height, self.width, &values)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Writes a little-endian PFM (bottom row first, as the format requires).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Input(format!("PFM supports 1 or 3 channels, not {c}"))),
    };
    let mut buf = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for row in (0..img.height).rev() {
        for col in 0..img.width {
            for ch in 0..img.channels {
                buf.extend_from_slice(&(img.get(row, col, ch) as f32).to_le_bytes());
            }
        }
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    while header.len() < 3 {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let line = line.trim();
        if !line.is_empty() {
            header.push(line.to_string());
        }
    }
    let channels = match header[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("bad dimensions")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad("bad dimensions"));
    }
    let (width, height) = (dims[0], dims[1]);
    let scale: f64 = header[2].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    reader.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
    let mut img = Image::new(height, width, channels);
    let mut k = 0;
    for row in (0..height).rev() {
        for col in 0..width {
            for ch in 0..channels {
                let b = [raw[k], raw[k + 1], raw[k + 2], raw[k + 3]];
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.set(row, col, ch, v as f64);
                k += 4;
            }
        }
    }
    Ok(img)
}

fn srgb_encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// View-only 8-bit sRGB export.
pub fn write_png_srgb(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.pixel_count() * 3);
    for k in 0..img.pixel_count() {
        for ch in 0..3 {
            let v = img.data[k * img.channels + ch.min(img.channels - 1)];
            bytes.push((srgb_encode(v) * 255.0).round() as u8);
        }
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Internal("png buffer size mismatch".into()))?;
    let mut encoded = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut encoded), image::ImageFormat::Png)
        .map_err(|e| Error::Internal(e.to_string()))?;
    crate::io::write_atomic(path, &encoded)
}

/// Loads a single-channel map from PFM or an 8/16-bit image; integer formats
/// are scaled to [0, 1].
pub fn read_gray(path: &Path) -> Result<Image> {
    let is_pfm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pfm"))
        .unwrap_or(false);
    if is_pfm {
        let img = read_pfm(path)?;
        return Ok(if img.channels == 1 { img } else { img.channel(0) });
    }
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let luma = dynimg.to_luma16();
    let (w, h) = luma.dimensions();
    let values: Vec<f64> = luma.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Ok(Image::from_gray(h as usize, w as usize, &values))
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Input("psnr needs images of equal shape".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|k| (-(k as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Window size used for an image of the given shape (shrinks for tiny images).
pub fn ssim_window(height: usize, width: usize) -> usize {
    let mut w = SSIM_WINDOW.min(height).min(width);
    if w % 2 == 0 {
        w -= 1;
    }
    w.max(1)
}

/// "Valid" separable correlation of a single-channel plane with `k ⊗ k`.
pub fn filter_valid(plane: &[f64], height: usize, width: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let oh = height + 1 - n;
    let ow = width + 1 - n;
    let mut tmp = vec![0.0; height * ow];
    for r in 0..height {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * plane[r * width + c + t];
            }
            tmp[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp[(r + t) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Input("ssim needs images of equal shape".into()));
    }
    let win = ssim_window(a.height, a.width);
    let k = gaussian_kernel(win, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..a.channels {
        let x = a.channel(ch).data;
        let y = b.channel(ch).data;
        total += ssim_plane(&x, &y, a.height, a.width, &k);
    }
    Ok(total / a.channels as f64)
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, oh, ow) = filter_valid(x, h, w, k);
    let (my, _, _) = filter_valid(y, h, w, k);
    let (sxx, _, _) = filter_valid(&xx, h, w, k);
    let (syy, _, _) = filter_valid(&yy, h, w, k);
    let (sxy, _, _) = filter_valid(&xy, h, w, k);
    let mut acc = 0.0;
    for q in 0..oh * ow {
        let vx = sxx[q] - mx[q] * mx[q];
        let vy = syy[q] - my[q] * my[q];
        let cxy = sxy[q] - mx[q] * my[q];
        acc += ((2.0 * mx[q] * my[q] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx[q] * mx[q] + my[q] * my[q] + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    acc / (oh * ow) as f64
}
