use std::path::{Path, PathBuf};

use volmedia::config::ProjectConfig;
use volmedia::field::{FieldSet, PreparedFields};
use volmedia::fit::{fit_with_observer, FitData};
use volmedia::imaging::{psnr, read_pfm, ssim, write_pfm, write_png_srgb, Image};
use volmedia::io::{load_dataset, write_atomic, Manifest, View};
use volmedia::priors::{bcp_map, estimate_ambient, load_depth_prior, DepthPrior};
use volmedia::render::{render_view, RenderOptions, RenderedView};
use volmedia::synth::{estimate_volume, generate, resynthesize_depth_scaled, write_dataset};
use volmedia::{Error, Result};

use crate::{App, Common};

fn load_config(common: &Common) -> Result<(ProjectConfig, String)> {
    let (mut cfg, text) = ProjectConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok((cfg, text))
}

fn out_dir(common: &Common, cfg: &ProjectConfig, sub: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.paths.output.join(sub))
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))
}

pub fn synth(common: &Common) -> Result<()> {
    let (cfg, text) = load_config(common)?;
    let scene = cfg
        .scene
        .as_ref()
        .ok_or_else(|| Error::Config("synth needs a [scene] section".into()))?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let views = generate(scene)?;
    let mut manifest = Manifest::new("synth", &text, cfg.seed);
    manifest.artifacts = write_dataset(&out, scene, &views)?;
    manifest.details = serde_json::json!({
        "views": views.len(),
        "height": scene.height,
        "width": scene.width,
        "condition": scene.condition,
    });
    manifest.write(&out)?;
    println!("wrote {} views to {}", views.len(), out.display());
    Ok(())
}

fn load_priors(dir: &Path, views: &[View]) -> Result<Vec<DepthPrior>> {
    views
        .iter()
        .map(|v| {
            let pfm = dir.join(format!("{}.pfm", v.name));
            let path = if pfm.exists() { pfm } else { dir.join(format!("{}.png", v.name)) };
            load_depth_prior(&path)
        })
        .collect()
}

pub fn fit(common: &Common, steps_override: Option<usize>) -> Result<()> {
    let (cfg, text) = load_config(common)?;
    let mut fit_cfg = cfg.fit_config();
    if let Some(s) = steps_override {
        fit_cfg.steps = s;
    }
    let views = load_dataset(&cfg.paths.data)?;
    let mut data = FitData::new(views);
    if let Some(dir) = &cfg.paths.depth_priors {
        data.depth_priors = Some(load_priors(dir, &data.views)?);
    }
    if fit_cfg.weights.lambda_trans > 0.0 {
        let maps = data
            .views
            .iter()
            .map(|v| bcp_map(&v.image, cfg.bcp.patch_size, estimate_ambient(&v.image)?))
            .collect::<Result<_>>()?;
        data.illumination = Some(maps);
    }
    let out = common.out.clone().unwrap_or_else(|| {
        cfg.checkpoint_path()
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.paths.output.clone())
    });
    let init = FieldSet::from_init(&cfg.fields)?;
    let every = (fit_cfg.steps / 20).max(1);
    let result = fit_with_observer(init, &data, &fit_cfg, |r| {
        if r.step % every == 0 || r.step + 1 == fit_cfg.steps {
            eprintln!("step {:>6}  lr {:.2e}  loss {:.6e}", r.step, r.lr, r.total);
        }
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Divergence { step, loss, history }) => {
            history.write_csv(&out.join("history.csv"))?;
            return Err(Error::Divergence { step, loss, history });
        }
        Err(e) => return Err(e),
    };
    let ckpt = out.join("checkpoint.json");
    outcome.fields.save(&ckpt)?;
    let hist = out.join("history.csv");
    outcome.history.write_csv(&hist)?;
    let mut manifest = Manifest::new("fit", &text, fit_cfg.seed);
    manifest.artifacts = vec![ckpt.clone(), hist];
    manifest.details = serde_json::json!({
        "steps": fit_cfg.steps,
        "final_loss": outcome.history.records.last().map(|r| r.total),
        "sigma_attn": outcome.fields.medium.sigma_attn,
        "sigma_scat": outcome.fields.medium.sigma_scat,
    });
    manifest.write(&out)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn load_fields(cfg: &ProjectConfig, checkpoint: Option<PathBuf>) -> Result<FieldSet> {
    FieldSet::load(&checkpoint.unwrap_or_else(|| cfg.checkpoint_path()))
}

fn render_all(cfg: &ProjectConfig, fields: &PreparedFields<'_>, views: &[View], opts: &RenderOptions) -> Result<Vec<RenderedView>> {
    views
        .iter()
        .map(|v| render_view(fields, &v.camera, (v.image.height, v.image.width), &cfg.sampler, opts, cfg.seed))
        .collect()
}

fn write_layers(dir: &Path, name: &str, r: &RenderedView, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let (h, w) = (r.height, r.width);
    let layers = [
        ("i_hat", Image::from_spectra(h, w, &r.i_hat)),
        ("j_hat", Image::from_spectra(h, w, &r.j_hat)),
        ("c_med", Image::from_spectra(h, w, &r.c_med)),
        ("depth", Image::from_gray(h, w, &r.depth)),
        ("zphi", Image::from_gray(h, w, &r.z_phi)),
    ];
    for (sub, img) in &layers {
        let p = dir.join(sub).join(format!("{name}.pfm"));
        write_pfm(&p, img)?;
        artifacts.push(p);
    }
    for (sub, img) in &layers[..2] {
        let p = dir.join("preview").join(format!("{name}_{sub}.png"));
        write_png_srgb(&p, img)?;
        artifacts.push(p);
    }
    Ok(())
}

pub fn render(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(common)?;
    let fields = load_fields(&cfg, checkpoint)?;
    let views = load_dataset(&cfg.paths.data)?;
    let out = out_dir(common, &cfg, "render");
    let rendered = render_all(&cfg, &fields.prepare(), &views, &RenderOptions::new(cfg.condition))?;
    let mut manifest = Manifest::new("render", &text, cfg.seed);
    for (v, r) in views.iter().zip(&rendered) {
        write_layers(&out, &v.name, r, &mut manifest.artifacts)?;
    }
    manifest.write(&out)?;
    println!("rendered {} views to {}", views.len(), out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct MetricRow {
    name: String,
    psnr: f64,
    ssim: f64,
}

fn pfm_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
            if let Some(n) = path.file_name() {
                names.push(n.to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn metrics(a: &Path, b: &Path, out: Option<PathBuf>) -> Result<()> {
    let names: Vec<String> = pfm_names(a)?.into_iter().filter(|n| b.join(n).exists()).collect();
    if names.is_empty() {
        return Err(Error::Input(format!(
            "no PFM images shared by {} and {}",
            a.display(),
            b.display()
        )));
    }
    let mut rows = Vec::with_capacity(names.len());
    for n in &names {
        let x = read_pfm(&a.join(n))?;
        let y = read_pfm(&b.join(n))?;
        rows.push(MetricRow {
            name: n.clone(),
            psnr: psnr(&x, &y)?,
            ssim: ssim(&x, &y)?,
        });
    }
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    println!("{:<32} {:>10} {:>8}", "image", "psnr_db", "ssim");
    for r in &rows {
        println!("{:<32} {:>10.4} {:>8.5}", r.name, r.psnr, r.ssim);
    }
    println!("{:<32} {:>10.4} {:>8.5}", "mean", mean_psnr, mean_ssim);
    if let Some(path) = out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Internal(e.to_string()))?;
        }
        w.serialize(MetricRow {
            name: "mean".into(),
            psnr: mean_psnr,
            ssim: mean_ssim,
        })
        .map_err(|e| Error::Internal(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

pub fn apps(common: &Common, app: App, checkpoint: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(common)?;
    let fields = load_fields(&cfg, checkpoint)?;
    let prepared = fields.prepare();
    let views = load_dataset(&cfg.paths.data)?;
    let out = out_dir(common, &cfg, "apps");
    let mut manifest = Manifest::new(
        match app {
            App::Volume => "apps volume",
            App::DepthScale => "apps depth-scale",
        },
        &text,
        cfg.seed,
    );
    let report = match app {
        App::Volume => {
            let ortho: Vec<&View> = views.iter().filter(|v| v.camera.is_orthographic()).collect();
            if ortho.is_empty() {
                return Err(Error::Contract("volume estimation needs at least one orthographic view".into()));
            }
            let s = cfg.apps.metres_per_unit;
            let mut per_view = Vec::new();
            for v in ortho {
                let (h, w) = (v.image.height, v.image.width);
                let r = render_view(&prepared, &v.camera, (h, w), &cfg.sampler, &RenderOptions::new(cfg.condition), cfg.seed)?;
                // distances count from where each ray enters the scene volume
                let rays = volmedia::scene::generate_rays(&v.camera, (h, w))?;
                let depth: Vec<f64> = r.depth.iter().zip(&rays.rays).map(|(d, ray)| (d - ray.t_near) * s).collect();
                let zphi: Vec<f64> = r.z_phi.iter().map(|z| z * s).collect();
                let volume = estimate_volume(&depth, &zphi, h, w, cfg.apps.width_real, &v.camera)?;
                println!("{}: {:.6} m^3", v.name, volume);
                per_view.push(serde_json::json!({ "view": v.name, "volume_m3": volume }));
            }
            serde_json::json!({ "volumes": per_view })
        }
        App::DepthScale => {
            let cameras: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
            let size = (views[0].image.height, views[0].image.width);
            if views.iter().any(|v| (v.image.height, v.image.width) != size) {
                return Err(Error::Input("depth-scale synthesis needs views of one size".into()));
            }
            let mut per_scale = Vec::new();
            for &scale in &cfg.apps.depth_scales {
                let rendered = resynthesize_depth_scaled(&prepared, &cameras, size, &cfg.sampler, cfg.condition, scale, cfg.seed)?;
                let dir = out.join(format!("scale_{scale:.4}"));
                let mut mean = [0.0; 3];
                for (v, r) in views.iter().zip(&rendered) {
                    write_layers(&dir, &v.name, r, &mut manifest.artifacts)?;
                    for c in &r.c_med {
                        for ch in 0..3 {
                            mean[ch] += c[ch] / (r.c_med.len() * rendered.len()) as f64;
                        }
                    }
                }
                println!("scale {scale:.4}: mean backscatter {:.5} {:.5} {:.5}", mean[0], mean[1], mean[2]);
                per_scale.push(serde_json::json!({ "scale": scale, "mean_c_med": mean }));
            }
            serde_json::json!({ "scales": per_scale })
        }
    };
    let path = out.join("report.json");
    write_atomic(&path, to_json(&report)?.as_bytes())?;
    manifest.artifacts.push(path);
    manifest.details = report;
    manifest.write(&out)
}
