use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use imageflow_core::config::RunConfig;
use imageflow_core::datasets::{
    generate_synthetic, load_dataset, load_series, save_dataset, split_series_level, Dataset, Split,
};
use imageflow_core::evaluation::{
    assemble_report, eval_pairs, psnr, score_method, train_segmenter, Extrapolation, Forecaster, MetricConfig,
    ModelForecaster, Segmenter,
};
use imageflow_core::experiments::{
    export_latents, run_ablation, write_latents_csv, write_scatter_png, AblationAxis,
};
use imageflow_core::model::{pixel_std, ModelState, Variant};
use imageflow_core::raster::Image;
use imageflow_core::registration::register_series;
use imageflow_core::training::{
    forecast_last, history_loss, test_time_optimize, train_with_progress, truncate_series, TtoConfig,
};

use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolved()?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn synthesize(cfg: &RunConfig) -> Result<Dataset> {
    let raw = generate_synthetic(&cfg.dataset.synth, cfg.seed)?;
    let mut data = split_series_level(&raw, cfg.dataset.split_ratios, cfg.seed)?;
    if cfg.dataset.register {
        for s in data.series.iter_mut() {
            *s = register_series(s, &cfg.dataset.registration)?.series;
        }
    }
    Ok(data)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("cannot load dataset {}", dir.display()))
}

/// Loads a model checkpoint with the dataset time scale it was trained on.
fn load_model(path: &Path) -> Result<(ModelState, f64, serde_json::Value)> {
    let (state, extra) = ModelState::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let time_scale = extra.get("time_scale").and_then(|v| v.as_f64()).unwrap_or(1.0);
    Ok((state, time_scale, extra))
}

/// Echoes the configuration a checkpoint was trained with.
fn echo_checkpoint_config(extra: &serde_json::Value, state: &ModelState, out: &Path) -> Result<()> {
    let value = match extra.get("run") {
        Some(run) => run.clone(),
        None => serde_json::to_value(&state.model.config)?,
    };
    write_json(&out.join("config.json"), &value)
}

fn load_image(path: &Path) -> Result<Image> {
    Image::load_png(path).with_context(|| format!("cannot read image {}", path.display()))
}

fn segmenter_for(path: Option<&Path>, data: &Dataset, cfg: &RunConfig, out: &Path) -> Result<Segmenter> {
    let seg = match path {
        Some(p) => Segmenter::load(p).with_context(|| format!("cannot load segmenter {}", p.display()))?,
        None => {
            log::info!("training segmenter");
            train_segmenter(data, &cfg.evaluation.segmenter)?
        }
    };
    seg.save(&out.join("segmenter.ckpt"))?;
    Ok(seg)
}

pub fn synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let data = synthesize(&cfg)?;
    save_dataset(&data, out)?;
    cfg.echo(out)?;
    log::info!("wrote {} series to {}", data.series.len(), out.display());
    Ok(())
}

pub fn register(args: &ConfigArgs, input: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let mut data = load_data(input)?;
    let mut transforms = Vec::new();
    for s in data.series.iter_mut() {
        let reg = register_series(s, &cfg.dataset.registration)?;
        for (k, w) in &reg.warnings {
            log::warn!("series {} visit {k}: {w}", s.series_id);
        }
        transforms.push((s.series_id.clone(), json!({ "anchor_visit": 0, "transforms": reg.transforms, "warnings": reg.warnings })));
        *s = reg.series;
    }
    save_dataset(&data, out)?;
    for (id, t) in transforms {
        write_json(&out.join(&id).join("transforms.json"), &t)?;
    }
    cfg.echo(out)?;
    log::info!("registered {} series into {}", data.series.len(), out.display());
    Ok(())
}

pub fn train(args: &ConfigArgs, data_dir: Option<&Path>, variant: Option<&str>, out: &Path) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(v) = variant {
        cfg.training.variant = serde_json::from_value::<Variant>(json!(v)).map_err(|_| anyhow!("unknown variant {v:?}; expected ode, sde or t_unet"))?;
    }
    let data = match data_dir {
        Some(dir) => load_data(dir)?,
        None => synthesize(&cfg)?,
    };
    cfg.echo(out)?;
    let outcome = train_with_progress(&data, &cfg.model_config(), &cfg.training, |e| {
        log::info!(
            "epoch {}: train loss {:.6}, val loss {}, val psnr {}",
            e.epoch,
            e.train_loss,
            e.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            e.val_psnr.map_or("-".into(), |v| format!("{v:.3}"))
        );
    })?;
    outcome.write_history_csv(&out.join("history.csv"))?;
    let mut w = csv::Writer::from_path(out.join("epochs.csv"))?;
    for e in &outcome.epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    let extra = json!({ "time_scale": data.time_scale, "run": cfg });
    outcome.best.save(&out.join("best.ckpt"), extra.clone())?;
    outcome.last.save(&out.join("last.ckpt"), extra)?;
    write_json(
        &out.join("train.json"),
        &json!({
            "variant": cfg.training.variant,
            "epochs": outcome.epochs.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_psnr": outcome.epochs.get(outcome.best_epoch).and_then(|e| e.val_psnr),
            "optimizer_steps": outcome.steps.len(),
        }),
    )?;
    log::info!("best epoch {}; checkpoints in {}", outcome.best_epoch, out.display());
    Ok(())
}

pub fn predict(ckpt: &Path, image: &Path, t_i: f64, t_j: f64, seed: u64, allow_backward: bool, out: &Path) -> Result<()> {
    let (state, scale, extra) = load_model(ckpt)?;
    let x = load_image(image)?;
    let y = state.predict(&x, t_i / scale, t_j / scale, allow_backward, seed)?;
    y.save_png(&out.join("prediction.png"))?;
    echo_checkpoint_config(&extra, &state, out)?;
    write_json(
        &out.join("predict.json"),
        &json!({ "ckpt": ckpt, "image": image, "t_i": t_i, "t_j": t_j, "time_scale": scale, "seed": seed }),
    )?;
    log::info!("wrote {}", out.join("prediction.png").display());
    Ok(())
}

fn ckpt_method(spec: &str) -> Result<(String, String)> {
    let (name, path) = spec.split_once('=').ok_or_else(|| anyhow!("--ckpt expects NAME=PATH, got {spec:?}"))?;
    if name.is_empty() || path.is_empty() {
        bail!("--ckpt expects NAME=PATH, got {spec:?}");
    }
    Ok((name.to_string(), path.to_string()))
}

fn extrapolation(name: &str) -> Result<Extrapolation> {
    match name {
        "linear" => Ok(Extrapolation::Linear),
        "cubic" => Ok(Extrapolation::CubicSpline),
        other => bail!("unknown method {other:?}; baselines are linear and cubic, models are given with --ckpt"),
    }
}

pub fn evaluate(
    args: &ConfigArgs,
    data_dir: &Path,
    methods: &[String],
    ckpts: &[String],
    seeds: Option<usize>,
    segmenter: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(n) = seeds {
        cfg.evaluation.seeds = n;
    }
    if !methods.is_empty() || !ckpts.is_empty() {
        cfg.evaluation.methods = methods.to_vec();
    }
    let cfg = cfg.resolved()?;
    let baselines = cfg.evaluation.methods.iter().map(|m| extrapolation(m)).collect::<Result<Vec<_>>>()?;
    let models = ckpts.iter().map(|s| ckpt_method(s)).collect::<Result<Vec<_>>>()?;
    if baselines.is_empty() && models.is_empty() {
        bail!("nothing to evaluate: give --method and/or --ckpt");
    }
    let data = load_data(data_dir)?;
    cfg.echo(out)?;
    let seg = segmenter_for(segmenter, &data, &cfg, out)?;
    let pairs = eval_pairs(&data, Split::Test);
    if pairs.is_empty() {
        bail!("the test split of {} has no pairs", data_dir.display());
    }
    let mut runs = Vec::new();
    let run_seeds: Vec<u64> = (0..cfg.evaluation.seeds as u64).map(|k| cfg.seed + k).collect();
    for &seed in &run_seeds {
        for b in &baselines {
            log::info!("scoring {} (seed {seed})", b.name());
            runs.push(score_method(b, &pairs, &seg, &cfg.evaluation.metrics, seed)?);
        }
        for (name, path) in &models {
            let path = PathBuf::from(path.replace("{seed}", &seed.to_string()));
            let (state, _, _) = load_model(&path)?;
            log::info!("scoring {name} from {} (seed {seed})", path.display());
            let f = ModelForecaster { name: name.clone(), state: &state, seed };
            runs.push(score_method(&f, &pairs, &seg, &cfg.evaluation.metrics, seed)?);
        }
    }
    let mut report = assemble_report(&pairs, &runs, &seg)?;
    report.seeds = run_seeds;
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    log::info!("{} pairs, pair list {}", pairs.len(), report.pair_list_hash);
    for (method, rank) in &report.ranks {
        log::info!("rank {method}: {rank:.2}");
    }
    Ok(())
}

pub fn tto(ckpt: &Path, data_dir: &Path, series_id: &str, iters: usize, lr: f64, full_model: bool, out: &Path) -> Result<()> {
    let (state, scale, extra) = load_model(ckpt)?;
    let series = load_series(data_dir, series_id).with_context(|| format!("cannot load series {series_id}"))?;
    if series.len() < 3 {
        bail!("series {series_id} has {} visits; test-time optimization needs at least 3 (2 observed + 1 target)", series.len());
    }
    let history = truncate_series(&series, series.len() - 1)?;
    let cfg = TtoConfig { iterations: iters, learning_rate: lr, full_model };
    let metric = MetricConfig::default();
    let target = series.images.last().expect("non-empty");
    let before = forecast_last(&state, &series, scale)?;
    let loss_before = history_loss(&state, &history, scale)?;
    let tuned = test_time_optimize(&state, &history, scale, &cfg)?;
    let after = forecast_last(&tuned, &series, scale)?;
    let loss_after = history_loss(&tuned, &history, scale)?;
    before.save_png(&out.join("forecast_before.png"))?;
    after.save_png(&out.join("forecast_after.png"))?;
    tuned.save(&out.join("adapted.ckpt"), extra.clone())?;
    echo_checkpoint_config(&extra, &state, out)?;
    let summary = json!({
        "series": series_id,
        "tto": cfg,
        "history_loss_before": loss_before,
        "history_loss_after": loss_after,
        "psnr_before": psnr(&before, target, &metric)?,
        "psnr_after": psnr(&after, target, &metric)?,
    });
    write_json(&out.join("tto.json"), &summary)?;
    log::info!("history loss {loss_before:.6} -> {loss_after:.6}");
    Ok(())
}

pub fn sample(ckpt: &Path, image: &Path, t_i: f64, t_j: f64, n: usize, seed: u64, out: &Path) -> Result<()> {
    let (state, scale, extra) = load_model(ckpt)?;
    let x = load_image(image)?;
    let vars = state.ema_vars();
    let (samples, _) = state.model.sample_trajectories(&vars, &x, t_i / scale, t_j / scale, n, seed)?;
    for (k, s) in samples.iter().enumerate() {
        s.save_png(&out.join(format!("sample_{k}.png")))?;
    }
    let std = pixel_std(&samples);
    let max = std.data.iter().copied().fold(0.0, f64::max);
    // Full 16-bit range for the largest deviation; 65535 when all are 0.
    let dispersion_scale = if max > 0.0 { 65535.0 / max } else { 65535.0 };
    std.save_png16(&out.join("dispersion.png"), dispersion_scale)?;
    echo_checkpoint_config(&extra, &state, out)?;
    write_json(
        &out.join("sample.json"),
        &json!({
            "ckpt": ckpt, "image": image, "t_i": t_i, "t_j": t_j, "n": n, "seed": seed,
            "dispersion_png_scale": dispersion_scale, "max_std": max,
        }),
    )?;
    log::info!("wrote {n} samples and dispersion map (max std {max:.4})");
    Ok(())
}

fn dir_name(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect()
}

pub fn ablate(args: &ConfigArgs, data_dir: Option<&Path>, axis: &str, segmenter: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let axis = AblationAxis::parse(axis)?;
    let data = match data_dir {
        Some(dir) => load_data(dir)?,
        None => synthesize(&cfg)?,
    };
    cfg.echo(out)?;
    let seg = segmenter_for(segmenter, &data, &cfg, out)?;
    let table = run_ablation(&cfg, &data, axis, &seg, |row, outcome| {
        let dir = out.join("rows").join(dir_name(&row.setting));
        std::fs::create_dir_all(&dir)?;
        outcome.write_history_csv(&dir.join("history.csv"))?;
        log::info!("{}: psnr {:.3}, pair list {}", row.setting, row.desk[0], row.pair_list_hash);
        Ok(())
    })?;
    let name = format!("ablation_{}", axis.name());
    table.write_csv(&out.join(format!("{name}.csv")))?;
    let mut text = Vec::new();
    table.write_text(&mut text)?;
    std::fs::write(out.join(format!("{name}.txt")), &text)?;
    print!("{}", String::from_utf8_lossy(&text));
    Ok(())
}

pub fn latents(ckpt: &Path, data_dir: &Path, plot: bool, out: &Path) -> Result<()> {
    let (state, _, extra) = load_model(ckpt)?;
    let data = load_data(data_dir)?;
    let rows = export_latents(&state, &data)?;
    write_latents_csv(&rows, &out.join("latents.csv"))?;
    if plot {
        write_scatter_png(&rows, &out.join("latents.png"), 512)?;
    }
    echo_checkpoint_config(&extra, &state, out)?;
    log::info!("exported {} latent vectors", rows.len());
    Ok(())
}
