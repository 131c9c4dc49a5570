use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sugar_cli::{cmd_ablate, cmd_data, cmd_eval, cmd_sample, cmd_train, DropAxis, GuidancePoint, RunConfig};
use sugar_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
use sugar_core::model::SugarModel;
use sugar_core::numerics::load_tensors;
use tempfile::TempDir;

fn tiny_config() -> String {
    r#"{
        "seed": 5,
        "model": {
            "layout": {"n_fine": 4, "n_coarse": 1, "n_text": 6, "frames": 2, "tokens_per_frame": 16, "d_model": 16},
            "layers": 2, "heads": 2, "d_fine": 8, "d_coarse": 8, "d_text": 8, "mlp_ratio": 2
        },
        "strategy": {"kind": "tsf", "stage1_steps": 3, "stage2_steps": 2, "batch_size": 2, "lr": 0.001},
        "pipeline": {"n_subjects": 24, "frames": 2, "n_real": 8},
        "sampling": {"seed": 3, "n_samples": 2, "steps": 3}
    }"#
    .to_string()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn sugar(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sugar"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn full_run_is_reproducible_from_the_echoed_config() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), "run.json", &tiny_config());
    let out_a = tmp.path().join("a");
    let mut echoed = None;
    for cmd in ["data", "train", "sample", "eval"] {
        let o = sugar(&[cmd], &cfg_path, &out_a);
        ok(&o);
        let stdout = String::from_utf8(o.stdout).unwrap();
        let cfg = RunConfig::from_json(&stdout).unwrap();
        assert_eq!(stdout.trim_end(), cfg.to_json(), "echo is the full resolved config");
        echoed.get_or_insert(stdout);
    }
    for f in ["dataset/manifest.jsonl", "dataset/report.json", "train/train_log.jsonl", "train/final.sgt"] {
        assert!(out_a.join(f).exists(), "{f}");
    }
    assert!(out_a.join("train/stage1.sgt").exists() && out_a.join("train/stage2.sgt").exists());
    for i in 0..2 {
        assert!(out_a.join(format!("samples/sample_{i:03}.png")).exists());
        let ts = load_tensors(out_a.join(format!("samples/sample_{i:03}.sgt"))).unwrap();
        assert_eq!(ts["video"].shape(), &[2, 16, 16, 3]);
        assert_eq!(ts["subject"].shape(), &[16, 16, 3]);
    }
    let metrics: serde_json::Value = serde_json::from_slice(&bytes(out_a.join("eval/metrics.json"))).unwrap();
    assert_eq!(metrics["count"], 2);
    assert!(metrics["table"]["dino_score"].is_number());
    assert_eq!(fs::read_to_string(out_a.join("eval/metrics.jsonl")).unwrap().lines().count(), 2);

    let echo_path = write_config(tmp.path(), "echo.json", &echoed.unwrap());
    let out_b = tmp.path().join("b");
    for cmd in ["data", "train", "sample", "eval"] {
        ok(&sugar(&[cmd], &echo_path, &out_b));
    }
    for f in [
        "dataset/manifest.jsonl",
        "dataset/report.json",
        "train/train_log.jsonl",
        "train/final.sgt",
        "samples/sample_000.sgt",
        "samples/sample_001.png",
        "samples/samples.jsonl",
        "eval/metrics.json",
        "eval/metrics.jsonl",
    ] {
        assert_eq!(bytes(out_a.join(f)), bytes(out_b.join(f)), "{f} differs on rerun");
    }
}

#[test]
fn frame_grid_png_has_the_contact_sheet_layout() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig::from_json(&tiny_config()).unwrap();
    let mut rng = sugar_core::numerics::Rng::new(0);
    let model = SugarModel::new(cfg.model, &mut rng).unwrap();
    let ckpt = tmp.path().join("m.sgt");
    model.save(&ckpt).unwrap();
    let mut run = cfg.clone();
    run.paths.checkpoint = Some(ckpt);
    cmd_sample(&run, tmp.path()).unwrap();
    let png = image_dims(&tmp.path().join("samples/sample_000.png"));
    assert_eq!(png, (2 * 128 + 2, 128));
}

fn image_dims(p: &Path) -> (u32, u32) {
    let b = bytes(p);
    assert_eq!(&b[..8], b"\x89PNG\r\n\x1a\n");
    let w = u32::from_be_bytes(b[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(b[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn exit_codes_distinguish_failure_categories() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");

    let bad_json = write_config(tmp.path(), "bad.json", "{ not json");
    assert_eq!(sugar(&["data"], &bad_json, &out).status.code(), Some(EXIT_CONFIG as i32));
    let bad_value = write_config(tmp.path(), "bad_value.json", r#"{"strategy": {"p": 2.0}}"#);
    assert_eq!(sugar(&["train"], &bad_value, &out).status.code(), Some(EXIT_CONFIG as i32));
    let missing = tmp.path().join("nope.json");
    assert_eq!(sugar(&["data"], &missing, &out).status.code(), Some(EXIT_CONFIG as i32));

    let cfg_path = write_config(tmp.path(), "run.json", &tiny_config());
    let o = sugar(&["train"], &cfg_path, &out);
    assert_eq!(o.status.code(), Some(EXIT_DATA as i32), "no dataset yet");
    assert_eq!(sugar(&["eval"], &cfg_path, &out).status.code(), Some(EXIT_DATA as i32), "no samples yet");

    let cfg = RunConfig::from_json(&tiny_config()).unwrap();
    let mut model = SugarModel::new(cfg.model, &mut sugar_core::numerics::Rng::new(0)).unwrap();
    let name = model.params().names().next().unwrap().to_string();
    model.params_mut().get_mut(&name).unwrap().data_mut().fill(f64::NAN);
    let ckpt = tmp.path().join("nan.sgt");
    model.save(&ckpt).unwrap();
    let mut text: serde_json::Value = serde_json::from_str(&tiny_config()).unwrap();
    text["paths"] = serde_json::json!({ "checkpoint": ckpt });
    let nan_cfg = write_config(tmp.path(), "nan.json", &text.to_string());
    assert_eq!(sugar(&["sample"], &nan_cfg, &out).status.code(), Some(EXIT_NUMERIC as i32));
}

#[test]
fn sample_rejects_a_checkpoint_with_a_different_model_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig::from_json(&tiny_config()).unwrap();
    let mut other = cfg.model;
    other.layers = 1;
    let ckpt = tmp.path().join("m.sgt");
    SugarModel::new(other, &mut sugar_core::numerics::Rng::new(0)).unwrap().save(&ckpt).unwrap();
    let mut run = cfg;
    run.paths.checkpoint = Some(ckpt);
    assert_eq!(cmd_sample(&run, tmp.path()).unwrap_err().exit_code(), EXIT_CONFIG);
}

#[test]
fn empty_sweep_matches_sample_then_eval() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::from_json(&tiny_config()).unwrap();
    cmd_data(&cfg, tmp.path()).unwrap();
    cmd_train(&cfg, tmp.path()).unwrap();
    cfg.paths.checkpoint = Some(tmp.path().join("train/final.sgt"));

    cmd_sample(&cfg, tmp.path()).unwrap();
    let direct = cmd_eval(&cfg, tmp.path()).unwrap();
    let rows = cmd_ablate(&cfg, tmp.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(!rows[0].trained);
    assert_eq!(rows[0].metrics, direct.mean);
    for f in ["sample_000.sgt", "sample_001.sgt", "samples.jsonl"] {
        assert_eq!(
            bytes(tmp.path().join("samples").join(f)),
            bytes(tmp.path().join("ablate/cells/000/samples").join(f))
        );
    }

    let cell_cfg = RunConfig::load(&tmp.path().join("ablate/cells/000/config.json")).unwrap();
    let again = tmp.path().join("again");
    cmd_sample(&cell_cfg, &again).unwrap();
    let rerun = cmd_eval(&RunConfig { paths: Default::default(), ..cell_cfg }, &again).unwrap();
    assert_eq!(rerun.mean, direct.mean);
}

#[test]
fn sweep_trains_each_setting_once_and_is_worker_count_invariant() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::from_json(&tiny_config()).unwrap();
    cfg.guidance.t_bar = 900;
    cmd_data(&cfg, tmp.path()).unwrap();
    cmd_train(&cfg, tmp.path()).unwrap();
    cfg.paths.checkpoint = Some(tmp.path().join("train/final.sgt"));
    cfg.paths.dataset = Some(tmp.path().join("dataset"));
    cfg.sweep.drop = vec![DropAxis::FineOnly, DropAxis::TrainedWithoutDropping];
    cfg.sweep.guidance =
        vec![GuidancePoint { omega_t: 7.5, omega_i: 7.5 }, GuidancePoint { omega_t: 2.5, omega_i: 7.5 }];
    cfg.sweep.workers = 3;
    let cfg = cfg.resolve().unwrap();

    let rows = cmd_ablate(&cfg, &tmp.path().join("w3")).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.cell).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(rows.iter().map(|r| r.trained).collect::<Vec<_>>(), vec![false, false, true, true]);
    assert_eq!(rows[2].checkpoint, rows[3].checkpoint);
    assert!(rows.iter().all(|r| r.t_bar == 900));
    let trained_dirs: Vec<_> = fs::read_dir(tmp.path().join("w3/ablate"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("train_"))
        .collect();
    assert_eq!(trained_dirs.len(), 1);

    let table: Vec<serde_json::Value> =
        serde_json::from_slice(&bytes(tmp.path().join("w3/ablate/table.json"))).unwrap();
    assert_eq!(table.len(), 4);
    for col in [
        "omega_t",
        "omega_i",
        "drop",
        "design",
        "identity_score",
        "text_alignment",
        "dynamic_degree",
        "subject_consistency",
        "background_consistency",
    ] {
        assert!(table[0].get(col).is_some(), "missing column {col}");
    }

    let serial = RunConfig { sweep: sugar_cli::SweepConfig { workers: 1, ..cfg.sweep.clone() }, ..cfg.clone() };
    let rows1 = cmd_ablate(&serial, &tmp.path().join("w1")).unwrap();
    for (a, b) in rows.iter().zip(&rows1) {
        assert_eq!(a.metrics, b.metrics, "cell {}", a.cell);
    }
}
