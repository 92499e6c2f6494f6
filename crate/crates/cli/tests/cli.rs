use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imageflow_core::config::RunConfig;
use imageflow_core::datasets::{generate_synthetic, load_dataset};
use imageflow_core::model::{Model, ModelState};
use imageflow_core::raster::Image;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.json")
}

fn imageflow(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imageflow"))
        .args(args)
        .env("IMAGEFLOW_RUNS_DIR", runs)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], runs: &Path) -> Output {
    let out = imageflow(args, runs);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes the tiny dataset into `dir/data` and trains the SDE variant
/// into `dir/train`.
fn data_and_model(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = tiny_config();
    let data = dir.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)], dir);
    let run = dir.join("train");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)], dir);
    (data, run.join("best.ckpt"))
}

#[test]
fn synth_layout_determinism_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    ok(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("a"))], dir.path());
    ok(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("b"))], dir.path());
    let a = load_dataset(&dir.path().join("a")).unwrap();
    assert_eq!(a.series.len(), 8);
    for series in &a.series {
        let sdir = dir.path().join("a").join(&series.series_id);
        assert!(sdir.join("times.csv").exists());
        for k in 0..series.len() {
            let name = format!("img_{k}.png");
            assert_eq!(fs::read(sdir.join(&name)).unwrap(), fs::read(dir.path().join("b").join(&series.series_id).join(&name)).unwrap());
        }
    }
    assert!(dir.path().join("a/config.json").exists() && dir.path().join("a/run.log").exists());

    // Default output root comes from the environment.
    ok(&["synth", "--config", s(&cfg)], dir.path());
    assert!(dir.path().join("synth/manifest.json").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"dataset": {"split_ratios": [0.9, 0.3, 0.1]}}"#).unwrap();
    let out = imageflow(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("c"))], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("split_ratios"));

    fs::write(&bad, r#"{"trainig": {}}"#).unwrap();
    let out = imageflow(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("c"))], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = imageflow(&["synth", "--config", s(&dir.path().join("missing.json"))], dir.path());
    assert!(!out.status.success());
}

#[test]
fn predict_zero_span_matches_golden_autoencoding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&tiny_config()).unwrap();
    let state = ModelState::new(Model::new(&cfg.model_config()).unwrap(), cfg.training.optimizer.clone());
    let ckpt = dir.path().join("init.ckpt");
    state.save(&ckpt, serde_json::json!({ "time_scale": 24.0 })).unwrap();
    let input = &generate_synthetic(&cfg.dataset.synth, cfg.seed).unwrap().series[0].images[1];
    let image = dir.path().join("x.png");
    input.save_png(&image).unwrap();
    let x = Image::load_png(&image).unwrap();

    let run = dir.path().join("predict");
    ok(&["predict", "--ckpt", s(&ckpt), "--image", s(&image), "--t-i", "6", "--t-j", "6", "--out", s(&run)], dir.path());
    let produced = Image::load_png(&run.join("prediction.png")).unwrap();
    let expected_path = dir.path().join("ae.png");
    state.autoencode(&x).unwrap().save_png(&expected_path).unwrap();
    assert_eq!(fs::read(run.join("prediction.png")).unwrap(), fs::read(&expected_path).unwrap());

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/predict_dt0.png");
    if std::env::var_os("IMAGEFLOW_BLESS").is_some() {
        fs::copy(run.join("prediction.png"), &golden).unwrap();
    }
    // One 8-bit level of slack for platform-dependent rounding in matrix kernels.
    let golden = Image::load_png(&golden).unwrap();
    let worst = golden.data.iter().zip(&produced.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0 + 1e-12, "prediction drifted from golden file by {worst}");

    assert!(run.join("config.json").exists() && run.join("predict.json").exists());
    let back = imageflow(&["predict", "--ckpt", s(&ckpt), "--image", s(&image), "--t-i", "6", "--t-j", "3"], dir.path());
    assert!(!back.status.success());
}

#[test]
fn train_sample_evaluate_tto_latents() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = data_and_model(dir.path());
    let train_dir = ckpt.parent().unwrap();
    for f in ["config.json", "run.log", "history.csv", "epochs.csv", "last.ckpt", "train.json"] {
        assert!(train_dir.join(f).exists(), "{f}");
    }
    // The echoed config relaunches the identical run.
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&train_dir.join("config.json")), "--data", s(&data), "--out", s(&again)], dir.path());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("best.ckpt")).unwrap());
    assert_eq!(fs::read(train_dir.join("history.csv")).unwrap(), fs::read(again.join("history.csv")).unwrap());

    let dataset = load_dataset(&data).unwrap();
    let series = &dataset.series[0];
    let sdir = data.join(&series.series_id);
    let image = sdir.join("img_0.png");
    let t_j = series.times[1].to_string();

    let sample = dir.path().join("sample");
    ok(&["sample", "--ckpt", s(&ckpt), "--image", s(&image), "--t-i", "0", "--t-j", &t_j, "--n", "4", "--out", s(&sample)], dir.path());
    let pngs: Vec<String> = fs::read_dir(&sample)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    assert_eq!(pngs.len(), 5);
    assert!((0..4).all(|k| pngs.contains(&format!("sample_{k}.png"))) && pngs.contains(&"dispersion.png".to_string()));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(sample.join("sample.json")).unwrap()).unwrap();
    assert!(meta["dispersion_png_scale"].as_f64().unwrap() > 0.0);

    let eval = dir.path().join("eval");
    let spec = format!("ode={}", s(&ckpt));
    ok(&["evaluate", "--config", s(&tiny_config()), "--data", s(&data), "--method", "linear", "--ckpt", &spec, "--out", s(&eval)], dir.path());
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 3 * 6);
    assert!(eval.join("report.json").exists() && eval.join("segmenter.ckpt").exists());
    let eval2 = dir.path().join("eval2");
    let seg = eval.join("segmenter.ckpt");
    ok(&["evaluate", "--config", s(&tiny_config()), "--data", s(&data), "--method", "linear", "--ckpt", &spec,
         "--segmenter", s(&seg), "--out", s(&eval2)], dir.path());
    assert_eq!(report, fs::read_to_string(eval2.join("report.csv")).unwrap());
    let eval3 = dir.path().join("eval3");
    ok(&["evaluate", "--config", s(&tiny_config()), "--data", s(&data), "--method", "cubic", "--seeds", "3",
         "--segmenter", s(&seg), "--out", s(&eval3)], dir.path());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval3.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["seeds"].as_array().unwrap().len(), 3);
    assert!(!imageflow(&["evaluate", "--data", s(&data), "--method", "quadratic", "--out", s(&eval3)], dir.path()).status.success());

    let long = dataset.series.iter().find(|s| s.len() >= 3).unwrap();
    let tto = dir.path().join("tto");
    ok(&["tto", "--ckpt", s(&ckpt), "--data", s(&data), "--series", &long.series_id, "--iters", "1", "--lr", "1e-4", "--out", s(&tto)], dir.path());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tto.join("tto.json")).unwrap()).unwrap();
    assert!(summary["psnr_after"].as_f64().unwrap().is_finite());
    assert!(tto.join("adapted.ckpt").exists() && tto.join("forecast_after.png").exists());

    let lat = dir.path().join("latents");
    ok(&["latents", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&lat)], dir.path());
    let rows = fs::read_to_string(lat.join("latents.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, dataset.series.iter().map(|s| s.len()).sum::<usize>());
    assert!(lat.join("latents.png").exists());
}

#[test]
fn ablate_row_structure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)], dir.path());
    let out = dir.path().join("ablate");
    let stdout = ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--axis", "field_param", "--out", s(&out)], dir.path()).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("22.63"));
    let mut rdr = csv::Reader::from_path(out.join("ablation_field_param.csv")).unwrap();
    let records: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 2 * 2);
    let hashes: std::collections::BTreeSet<&str> = records.iter().map(|r| &r[9]).collect();
    assert_eq!(hashes.len(), 1);
    let bad = imageflow(&["ablate", "--config", s(&cfg), "--data", s(&data), "--axis", "depth", "--out", s(&out)], dir.path());
    assert!(!bad.status.success());
}
