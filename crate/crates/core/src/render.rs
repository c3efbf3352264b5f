//! Discrete volume rendering of the object/medium particle model and its
//! exact reverse pass.
//!
//! Intervals between consecutive sample positions are the quadrature cells;
//! every field is evaluated once at each interval midpoint. Transmittances are
//! exclusive prefix products, so the first interval always sees `T = 1`.

use crate::error::{Error, Result};
use crate::field::{pooling_weights, Corners, DownwellingField, FieldGrad, MediumMode, PreparedFields};
use crate::radiative::Condition;
use crate::sampler::{ray_rng, sample_ray, SamplerConfig};
use crate::scene::{generate_rays, CameraModel, Ray, SampleSet, Spectrum};

/// Largest optical-depth increment fed to `exp`; larger values are clamped
/// (and carry no gradient) so transmittances never underflow to exactly zero.
pub const MAX_OPTICAL_INCREMENT: f64 = 80.0;

/// Weight sum below which a ray counts as empty for depth purposes.
pub const EMPTY_WEIGHT: f64 = 1e-8;

#[inline]
fn clamp_tau(x: f64, delta: f64) -> (f64, f64) {
    let t = x * delta;
    if t < MAX_OPTICAL_INCREMENT {
        (t, delta)
    } else {
        (MAX_OPTICAL_INCREMENT, 0.0)
    }
}

#[inline]
fn opacity(tau: f64) -> f64 {
    -(-tau).exp_m1()
}

/// Exclusive prefix transmittances `T_i = exp(-Σ_{j<i} τ_j)`.
fn transmittance(tau: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    tau.iter()
        .map(|t| {
            let v = (-acc).exp();
            acc += t;
            v
        })
        .collect()
}

/// Reverse pass of `Σ_i T_i a_i q_i`, returning `(∂/∂τ_j, ∂/∂a_i)` where `q`
/// is the cotangent of each compositing weight `T_i a_i`.
fn composite_backward(t: &[f64], a: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = t.len();
    let mut d_tau = vec![0.0; n];
    let mut d_a = vec![0.0; n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        d_tau[i] = -suffix;
        d_a[i] = q[i] * t[i];
        suffix += q[i] * t[i] * a[i];
    }
    (d_tau, d_a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionResult {
    pub j: Spectrum,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Emission-absorption compositing of the object field alone.
pub fn render_emission(deltas: &[f64], sigma_obj: &[f64], c_obj: &[Spectrum]) -> EmissionResult {
    let (tau, alpha): (Vec<f64>, Vec<f64>) = deltas
        .iter()
        .zip(sigma_obj)
        .map(|(d, s)| {
            let t = clamp_tau(*s, *d).0;
            (t, opacity(t))
        })
        .unzip();
    let t = transmittance(&tau);
    let weights: Vec<f64> = t.iter().zip(&alpha).map(|(t, a)| t * a).collect();
    let mut j = Spectrum::ZERO;
    for (w, c) in weights.iter().zip(c_obj) {
        j = j + *c * *w;
    }
    EmissionResult {
        j,
        transmittance: t,
        weights,
    }
}

/// Object radiance attenuated by an additional absorbing medium.
pub fn render_absorbed(deltas: &[f64], sigma_obj: &[f64], c_obj: &[Spectrum], sigma_attn: &[Spectrum]) -> Spectrum {
    let mut out = Spectrum::ZERO;
    for ch in 0..3 {
        let tau: Vec<f64> = (0..deltas.len())
            .map(|i| clamp_tau(sigma_obj[i] + sigma_attn[i][ch], deltas[i]).0)
            .collect();
        let t = transmittance(&tau);
        for i in 0..deltas.len() {
            out[ch] += t[i] * opacity(clamp_tau(sigma_obj[i], deltas[i]).0) * c_obj[i][ch];
        }
    }
    out
}

/// Light scattered into the ray by the medium.
pub fn render_inscatter(
    deltas: &[f64],
    sigma_obj: &[f64],
    sigma_scat: &[Spectrum],
    c_med: &[Spectrum],
) -> Spectrum {
    let mut out = Spectrum::ZERO;
    for ch in 0..3 {
        let tau: Vec<f64> = (0..deltas.len())
            .map(|i| clamp_tau(sigma_obj[i] + sigma_scat[i][ch], deltas[i]).0)
            .collect();
        let t = transmittance(&tau);
        for i in 0..deltas.len() {
            out[ch] += t[i] * opacity(clamp_tau(sigma_scat[i][ch], deltas[i]).0) * c_med[i][ch];
        }
    }
    out
}

/// Expected termination distance; `t_far` when the ray hits nothing.
pub fn render_depth(weights: &[f64], positions: &[f64], t_far: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    if total < EMPTY_WEIGHT {
        return t_far;
    }
    weights.iter().zip(positions).map(|(w, t)| w * t).sum::<f64>() / total
}

/// Per-render switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub condition: Condition,
    /// Multiplier on the downwelling depth (1 for ordinary rendering).
    pub z_phi_scale: f64,
}

impl RenderOptions {
    pub fn new(condition: Condition) -> Self {
        RenderOptions {
            condition,
            z_phi_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Composed observation: direct plus in-scattered light.
    pub i_hat: Spectrum,
    /// Clean radiance from the object field alone.
    pub j_hat: Spectrum,
    pub c_obj: Spectrum,
    pub c_med: Spectrum,
    pub depth_los: f64,
    pub z_phi_ray: f64,
    /// Effective per-ray coefficients (pooled over samples).
    pub sigma_attn_ray: Spectrum,
    pub sigma_scat_ray: Spectrum,
    pub weight_sum: f64,
    pub t_obj: Vec<f64>,
    pub t_d: Vec<Spectrum>,
    pub t_b: Vec<Spectrum>,
    /// Per-interval object and media densities, used by the regularisers.
    pub sigma_obj: Vec<f64>,
    pub media: Vec<f64>,
    pub deltas: Vec<f64>,
    pub midpoints: Vec<f64>,
}

/// Cotangents of a ray's outputs with respect to the objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayCotangent {
    pub i_hat: Spectrum,
    pub j_hat: Spectrum,
    pub depth: f64,
    /// Direct per-interval terms from the regularisers (empty = none).
    pub sigma_obj: Vec<f64>,
    pub media: Vec<f64>,
}

/// Everything the reverse pass needs from one forward evaluation.
struct Tape {
    out: RenderOutput,
    corners_obj: Vec<Corners>,
    corners_color: Vec<Corners>,
    corners_med: Vec<Corners>,
    corners_down: Vec<Corners>,
    z_active: Vec<bool>,
    color: Vec<Spectrum>,
    alpha_obj: Vec<f64>,
    zphi: Vec<f64>,
    pool: Vec<f64>,
    pool_raw: Vec<f64>,
    pool_total: f64,
    m_bar: f64,
    sa: Vec<Spectrum>,
    ss: Vec<Spectrum>,
    zc: Vec<f64>,
    cmed: Vec<Spectrum>,
    alpha_scat: Vec<Spectrum>,
}

fn forward(ray: &Ray, fields: &PreparedFields<'_>, samples: &SampleSet, opts: &RenderOptions) -> Result<Tape> {
    let n = samples.interval_count();
    if n == 0 {
        return Err(Error::Input("rendering needs at least two sample positions".into()));
    }
    let deltas = samples.deltas();
    let mids = samples.midpoints();
    let medium = &fields.fields.medium;

    let mut corners_obj = Vec::with_capacity(n);
    let mut corners_color = Vec::with_capacity(n);
    let mut corners_med = Vec::with_capacity(n);
    let mut corners_down = Vec::new();
    let mut sigma_obj = Vec::with_capacity(n);
    let mut color = Vec::with_capacity(n);
    let mut media = Vec::with_capacity(n);
    let mut zphi = Vec::with_capacity(n);
    let mut z_active = Vec::with_capacity(n);
    for &t in &mids {
        let p = ray.at(t);
        let co = fields.object_density.corners(&p);
        sigma_obj.push(fields.object_density.sample(&co, 0));
        corners_obj.push(co);
        let cc = fields.object_color.corners(&p);
        color.push(Spectrum::new(
            fields.object_color.sample(&cc, 0),
            fields.object_color.sample(&cc, 1),
            fields.object_color.sample(&cc, 2),
        ));
        corners_color.push(cc);
        let cm = fields.media_density.corners(&p);
        media.push(fields.media_density.sample(&cm, 0));
        corners_med.push(cm);
        match (&fields.fields.downwelling, &fields.downwelling) {
            (DownwellingField::Grid { .. }, Some(grid)) => {
                let cd = grid.corners(&p);
                zphi.push(grid.sample(&cd, 0) * opts.z_phi_scale);
                corners_down.push(cd);
                z_active.push(true);
            }
            (DownwellingField::Plane { surface_height }, _) => {
                let z = surface_height - p.y;
                z_active.push(z > 0.0);
                zphi.push(z.max(0.0) * opts.z_phi_scale);
            }
            _ => return Err(Error::Internal("downwelling grid was not prepared".into())),
        }
    }

    let tau_obj: Vec<f64> = (0..n).map(|i| clamp_tau(sigma_obj[i], deltas[i]).0).collect();
    let alpha_obj: Vec<f64> = tau_obj.iter().map(|t| opacity(*t)).collect();
    let t_obj = transmittance(&tau_obj);
    let weights: Vec<f64> = (0..n).map(|i| t_obj[i] * alpha_obj[i]).collect();
    let weight_sum: f64 = weights.iter().sum();
    let depth_los = render_depth(&weights, &mids, ray.t_far);
    let mut j_hat = Spectrum::ZERO;
    for i in 0..n {
        j_hat = j_hat + color[i] * weights[i];
    }

    let raw_pool: Vec<f64> = (0..n).map(|i| deltas[i] * t_obj[i]).collect();
    let pool = pooling_weights(&raw_pool);
    let pool_total: f64 = raw_pool.iter().sum();
    let m_bar: f64 = pool.iter().zip(&media).map(|(w, m)| w * m).sum();
    let z_bar: f64 = pool.iter().zip(&zphi).map(|(w, z)| w * z).sum();

    let scattering = opts.condition.has_scattering();
    let a_coef = medium.sigma_attn;
    let s_coef = if opts.condition == Condition::Haze {
        medium.sigma_attn
    } else {
        medium.sigma_scat
    };
    let mut sa = Vec::with_capacity(n);
    let mut ss = Vec::with_capacity(n);
    let mut zc = Vec::with_capacity(n);
    for i in 0..n {
        if !scattering {
            sa.push(Spectrum::splat(media[i]));
            ss.push(Spectrum::ZERO);
            zc.push(0.0);
            continue;
        }
        match medium.mode {
            MediumMode::GlobalConstant => {
                sa.push(a_coef);
                ss.push(s_coef);
                zc.push(z_bar);
            }
            MediumMode::PerRayPooled => {
                sa.push(a_coef * m_bar);
                ss.push(s_coef * m_bar);
                zc.push(z_bar);
            }
            MediumMode::PerSample => {
                sa.push(a_coef * media[i]);
                ss.push(s_coef * media[i]);
                zc.push(zphi[i]);
            }
        }
    }
    let cmed: Vec<Spectrum> = (0..n)
        .map(|i| {
            if scattering {
                Spectrum::new(
                    medium.phi[0] * (-(sa[i][0] + ss[i][0]) * zc[i]).exp(),
                    medium.phi[1] * (-(sa[i][1] + ss[i][1]) * zc[i]).exp(),
                    medium.phi[2] * (-(sa[i][2] + ss[i][2]) * zc[i]).exp(),
                )
            } else {
                Spectrum::ZERO
            }
        })
        .collect();

    let mut alpha_scat = vec![Spectrum::ZERO; n];
    let mut t_d = vec![Spectrum::ZERO; n];
    let mut t_b = vec![Spectrum::ZERO; n];
    let mut c_obj = Spectrum::ZERO;
    let mut c_med = Spectrum::ZERO;
    for ch in 0..3 {
        let tau_d: Vec<f64> = (0..n).map(|i| clamp_tau(sigma_obj[i] + sa[i][ch], deltas[i]).0).collect();
        let td = transmittance(&tau_d);
        let tau_b: Vec<f64> = (0..n).map(|i| clamp_tau(sigma_obj[i] + ss[i][ch], deltas[i]).0).collect();
        let tb = transmittance(&tau_b);
        for i in 0..n {
            t_d[i][ch] = td[i];
            t_b[i][ch] = tb[i];
            c_obj[ch] += td[i] * alpha_obj[i] * color[i][ch];
            let a = opacity(clamp_tau(ss[i][ch], deltas[i]).0);
            alpha_scat[i][ch] = a;
            c_med[ch] += tb[i] * a * cmed[i][ch];
        }
    }

    let (sigma_attn_ray, sigma_scat_ray) = {
        let mut a = Spectrum::ZERO;
        let mut s = Spectrum::ZERO;
        for i in 0..n {
            a = a + sa[i] * pool[i];
            s = s + ss[i] * pool[i];
        }
        (a, s)
    };

    Ok(Tape {
        out: RenderOutput {
            i_hat: c_obj + c_med,
            j_hat,
            c_obj,
            c_med,
            depth_los,
            z_phi_ray: z_bar,
            sigma_attn_ray,
            sigma_scat_ray,
            weight_sum,
            t_obj,
            t_d,
            t_b,
            sigma_obj,
            media,
            deltas,
            midpoints: mids,
        },
        corners_obj,
        corners_color,
        corners_med,
        corners_down,
        z_active,
        color,
        alpha_obj,
        zphi,
        pool,
        pool_raw: raw_pool,
        pool_total,
        m_bar,
        sa,
        ss,
        zc,
        cmed,
        alpha_scat,
    })
}

/// Renders one ray through the given samples.
pub fn render_ray(ray: &Ray, fields: &PreparedFields<'_>, samples: &SampleSet, opts: &RenderOptions) -> Result<RenderOutput> {
    Ok(forward(ray, fields, samples, opts)?.out)
}

/// Accumulates into `grad` the gradient of an objective whose cotangents at
/// this ray's outputs are `cot`. Sample positions are constants. Returns the
/// forward output as a by-product.
pub fn backward_ray(
    ray: &Ray,
    fields: &PreparedFields<'_>,
    samples: &SampleSet,
    opts: &RenderOptions,
    cot: &RayCotangent,
    grad: &mut FieldGrad,
) -> Result<RenderOutput> {
    let tape = forward(ray, fields, samples, opts)?;
    let out = &tape.out;
    let n = out.deltas.len();
    let deltas = &out.deltas;
    let medium = &fields.fields.medium;
    let scattering = opts.condition.has_scattering();

    // Gradients with respect to the object optical-depth increments, the
    // per-interval densities, colours, effective coefficients and z.
    let mut g_tau_obj = vec![0.0; n];
    let mut g_so = vec![0.0; n];
    let mut g_color = vec![Spectrum::ZERO; n];
    let mut g_m = vec![0.0; n];
    let mut g_z = vec![0.0; n];
    let mut g_sa = vec![Spectrum::ZERO; n];
    let mut g_ss = vec![Spectrum::ZERO; n];

    // Clean render and depth share the object-only transmittance.
    {
        let use_depth = out.weight_sum >= EMPTY_WEIGHT && cot.depth != 0.0;
        let q: Vec<f64> = (0..n)
            .map(|i| {
                let mut q = 0.0;
                for ch in 0..3 {
                    q += cot.j_hat[ch] * tape.color[i][ch];
                }
                if use_depth {
                    q += cot.depth * (out.midpoints[i] - out.depth_los) / out.weight_sum;
                }
                q
            })
            .collect();
        let (d_tau, d_a) = composite_backward(&out.t_obj, &tape.alpha_obj, &q);
        for i in 0..n {
            g_tau_obj[i] += d_tau[i] + d_a[i] * (1.0 - tape.alpha_obj[i]);
            let w = out.t_obj[i] * tape.alpha_obj[i];
            for ch in 0..3 {
                g_color[i][ch] += cot.j_hat[ch] * w;
            }
        }
    }

    for ch in 0..3 {
        let g = cot.i_hat[ch];
        if g == 0.0 {
            continue;
        }
        let td: Vec<f64> = out.t_d.iter().map(|s| s[ch]).collect();
        let q: Vec<f64> = (0..n).map(|i| g * tape.color[i][ch]).collect();
        let (d_tau_d, d_a) = composite_backward(&td, &tape.alpha_obj, &q);
        for i in 0..n {
            g_tau_obj[i] += d_a[i] * (1.0 - tape.alpha_obj[i]);
            g_color[i][ch] += g * td[i] * tape.alpha_obj[i];
            let gate = clamp_tau(out.sigma_obj[i] + tape.sa[i][ch], deltas[i]).1;
            g_so[i] += d_tau_d[i] * gate;
            g_sa[i][ch] += d_tau_d[i] * gate;
        }
        if !scattering {
            continue;
        }
        let tb: Vec<f64> = out.t_b.iter().map(|s| s[ch]).collect();
        let a_s: Vec<f64> = tape.alpha_scat.iter().map(|s| s[ch]).collect();
        let q: Vec<f64> = (0..n).map(|i| g * tape.cmed[i][ch]).collect();
        let (d_tau_b, d_as) = composite_backward(&tb, &a_s, &q);
        for i in 0..n {
            let gate_b = clamp_tau(out.sigma_obj[i] + tape.ss[i][ch], deltas[i]).1;
            g_so[i] += d_tau_b[i] * gate_b;
            g_ss[i][ch] += d_tau_b[i] * gate_b;
            let gate_s = clamp_tau(tape.ss[i][ch], deltas[i]).1;
            g_ss[i][ch] += d_as[i] * (1.0 - a_s[i]) * gate_s;
            // c_med = Φ exp(-(σa + σs) z)
            let g_cmed = g * tb[i] * a_s[i];
            let decay = (-(tape.sa[i][ch] + tape.ss[i][ch]) * tape.zc[i]).exp();
            grad.phi[ch] += g_cmed * decay;
            let back = -g_cmed * tape.cmed[i][ch];
            g_sa[i][ch] += back * tape.zc[i];
            g_ss[i][ch] += back * tape.zc[i];
            g_z[i] += back * (tape.sa[i][ch] + tape.ss[i][ch]);
        }
    }

    if let Some(extra) = (!cot.sigma_obj.is_empty()).then_some(&cot.sigma_obj) {
        g_so.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
    }
    if !cot.media.is_empty() {
        g_m.iter_mut().zip(&cot.media).for_each(|(a, b)| *a += b);
    }

    // Map effective coefficients back to parameters.
    let haze = opts.condition == Condition::Haze;
    let s_coef = if haze { medium.sigma_attn } else { medium.sigma_scat };
    let mut g_a = [0.0; 3];
    let mut g_s = [0.0; 3];
    if scattering {
        let mut g_zbar = 0.0;
        let mut g_mbar = 0.0;
        for i in 0..n {
            match medium.mode {
                MediumMode::GlobalConstant => {
                    for ch in 0..3 {
                        g_a[ch] += g_sa[i][ch];
                        g_s[ch] += g_ss[i][ch];
                    }
                    g_zbar += g_z[i];
                }
                MediumMode::PerRayPooled => {
                    for ch in 0..3 {
                        g_a[ch] += tape.m_bar * g_sa[i][ch];
                        g_s[ch] += tape.m_bar * g_ss[i][ch];
                        g_mbar += medium.sigma_attn[ch] * g_sa[i][ch] + s_coef[ch] * g_ss[i][ch];
                    }
                    g_zbar += g_z[i];
                }
                MediumMode::PerSample => {
                    for ch in 0..3 {
                        g_a[ch] += out.media[i] * g_sa[i][ch];
                        g_s[ch] += out.media[i] * g_ss[i][ch];
                        g_m[i] += medium.sigma_attn[ch] * g_sa[i][ch] + s_coef[ch] * g_ss[i][ch];
                    }
                }
            }
        }
        if medium.mode != MediumMode::PerSample {
            // Pooled means depend on the object transmittance through the
            // pooling weights w_i = δ_i T_i.
            let mut q = vec![0.0; n];
            for i in 0..n {
                g_m[i] += g_mbar * tape.pool[i];
                g_z[i] = g_zbar * tape.pool[i];
                q[i] = (g_mbar * (out.media[i] - tape.m_bar) + g_zbar * (tape.zphi[i] - out.z_phi_ray)) / tape.pool_total;
            }
            let mut suffix = 0.0;
            for i in (0..n).rev() {
                g_tau_obj[i] -= suffix;
                suffix += q[i] * tape.pool_raw[i];
            }
        }
    } else {
        // Low light: the media density is a grey absorption coefficient.
        for i in 0..n {
            g_m[i] += g_sa[i][0] + g_sa[i][1] + g_sa[i][2];
        }
    }
    for i in 0..n {
        g_so[i] += g_tau_obj[i] * clamp_tau(out.sigma_obj[i], deltas[i]).1;
    }
    for ch in 0..3 {
        grad.sigma_attn[ch] += g_a[ch];
        if haze {
            grad.sigma_attn[ch] += g_s[ch];
        } else {
            grad.sigma_scat[ch] += g_s[ch];
        }
    }

    for i in 0..n {
        fields
            .object_density
            .scatter(&tape.corners_obj[i], 0, g_so[i], &mut grad.object_density);
        for ch in 0..3 {
            fields
                .object_color
                .scatter(&tape.corners_color[i], ch, g_color[i][ch], &mut grad.object_color);
        }
        fields
            .media_density
            .scatter(&tape.corners_med[i], 0, g_m[i], &mut grad.media_density);
        if scattering && g_z[i] != 0.0 {
            let gz = g_z[i] * opts.z_phi_scale;
            match &fields.downwelling {
                Some(grid) => grid.scatter(&tape.corners_down[i], 0, gz, &mut grad.downwelling),
                None => {
                    if tape.z_active[i] {
                        grad.downwelling[0] += gz;
                    }
                }
            }
        }
    }
    Ok(tape.out)
}

/// Float images produced by rendering every pixel of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub height: usize,
    pub width: usize,
    pub i_hat: Vec<Spectrum>,
    pub j_hat: Vec<Spectrum>,
    pub c_med: Vec<Spectrum>,
    pub depth: Vec<f64>,
    pub z_phi: Vec<f64>,
    pub sigma_attn: Vec<Spectrum>,
    pub sigma_scat: Vec<Spectrum>,
}

/// Renders a full view. Sampling uses a fixed evaluation stream so repeated
/// renders are identical.
pub fn render_view(
    fields: &PreparedFields<'_>,
    camera: &CameraModel,
    size: (usize, usize),
    sampler: &SamplerConfig,
    opts: &RenderOptions,
    seed: u64,
) -> Result<RenderedView> {
    use rayon::prelude::*;
    let rays = generate_rays(camera, size)?;
    let outs: Vec<RenderOutput> = rays
        .rays
        .par_iter()
        .enumerate()
        .map(|(k, ray)| {
            let mut rng = ray_rng(seed, u64::MAX, k as u64);
            let samples = sample_ray(ray, fields, sampler, &mut rng)?;
            render_ray(ray, fields, &samples, opts)
        })
        .collect::<Result<_>>()?;
    Ok(RenderedView {
        height: size.0,
        width: size.1,
        i_hat: outs.iter().map(|o| o.i_hat).collect(),
        j_hat: outs.iter().map(|o| o.j_hat).collect(),
        c_med: outs.iter().map(|o| o.c_med).collect(),
        depth: outs.iter().map(|o| o.depth_los).collect(),
        z_phi: outs.iter().map(|o| o.z_phi_ray).collect(),
        sigma_attn: outs.iter().map(|o| o.sigma_attn_ray).collect(),
        sigma_scat: outs.iter().map(|o| o.sigma_scat_ray).collect(),
    })
}
