//! End-to-end runs of the `pedcov` binary and the command library.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pedcov::metrics::EvalRecord;
use pedcov::pipeline::{GoalSource, Predictor};
use pedcov::train::{CorpusKind, NoiseSchedule};
use pedcov::{Gaussian2D, Vec2};
use pedcov_cli::{cmd_synth, write_eval_outputs, Layout, RunConfig, SynthOptions, Target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pedcov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedcov"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, scenes: usize, count: usize) {
    cmd_synth(&SynthOptions {
        out_dir: dir.to_path_buf(),
        scenes,
        count,
        kind: CorpusKind::HeteroscedasticNoise,
        schedule: NoiseSchedule::Linear { base: 0.2, slope: 0.05 },
        seed: 11,
    })
    .unwrap();
}

/// A config with tiny models so training finishes in seconds.
fn small_config(root: &Path) -> PathBuf {
    let mut cfg = RunConfig {
        data_dir: root.join("data"),
        output_dir: root.join("out"),
        seed: 3,
        ..RunConfig::default()
    };
    cfg.goal_model.d_model = 8;
    cfg.goal_model.head_hidden = 8;
    cfg.covnet.hidden = 8;
    cfg.covnet.latent = 2;
    cfg.covnet.attention = 4;
    cfg.covnet.neighbor_embed = 4;
    for t in [&mut cfg.goal_train, &mut cfg.cov_train] {
        t.epochs = 2;
        t.batch_size = 32;
    }
    let path = root.join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_writes_one_entry_per_scene_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 5, 30);
    let out = dir.path().join("out");
    let run = || pedcov(&["ingest", "--data-dir", s(&data), "--output-dir", s(&out)]);
    let first = run();
    ok(&first);
    let summary = fs::read_to_string(out.join("ingest_summary.txt")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| l.starts_with("synth_")).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with("\t30")));
    let cache = fs::read(out.join("windows.cache")).unwrap();
    ok(&run());
    assert_eq!(fs::read(out.join("windows.cache")).unwrap(), cache);
    let scenes = pedcov::dataset::read_window_cache(out.join("windows.cache")).unwrap();
    assert_eq!(scenes.len(), 5);
}

#[test]
fn missing_scene_file_fails_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 5);
    let out = dir.path().join("out");
    let r = pedcov(&[
        "ingest",
        "--data-dir",
        s(&data),
        "--output-dir",
        s(&out),
        "--scene",
        "synth_00",
        "--scene",
        "eth",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("eth.txt"));
    assert!(!out.join("windows.cache").exists());
}

#[test]
fn malformed_scene_leaves_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 5);
    fs::write(data.join("broken.txt"), "10 1 0.0 0.0\n20 1 zero 0.0\n").unwrap();
    let out = dir.path().join("out");
    let r = pedcov(&["ingest", "--data-dir", s(&data), "--output-dir", s(&out)]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("broken.txt") && err.contains('2'), "{err}");
    let leftovers: Vec<_> = fs::read_dir(&out).map(|d| d.collect()).unwrap_or_default();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn cov_training_requires_a_goal_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 2, 20);
    let cfg = small_config(dir.path());
    ok(&pedcov(&["ingest", "--config", s(&cfg)]));
    let r = pedcov(&["train", "--target", "cov", "--config", s(&cfg)]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(
        err.contains("goal checkpoint") && err.contains("--target goal"),
        "{err}"
    );
    assert!(!dir.path().join("out/covnet.ckpt").exists());
    assert!(!dir.path().join("out/covnet_log.csv").exists());
}

#[test]
fn fp_baseline_evaluates_without_trained_models() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 2, 20);
    let cfg = small_config(dir.path());
    ok(&pedcov(&["ingest", "--config", s(&cfg)]));
    ok(&pedcov(&[
        "eval",
        "--predictor",
        "fp",
        "--goal-source",
        "ground-truth-endpoint",
        "--config",
        s(&cfg),
    ]));
    let eval = dir.path().join("out/eval/fp");
    let ppei = fs::read_to_string(eval.join("ppei.csv")).unwrap();
    let lines: Vec<&str> = ppei.lines().collect();
    assert_eq!(lines[0], "t,ppei1,ppei3");
    assert_eq!(lines.len(), 13);
    for (k, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], (k + 1).to_string());
    }
    for f in ["report.json", "report.csv", "md.csv", "curves.svg"] {
        assert!(eval.join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(eval.join("curves.svg")).unwrap().starts_with("<svg"));
    // Predicted goals need the goal model, which does not exist yet.
    let r = pedcov(&["eval", "--predictor", "fp", "--config", s(&cfg)]);
    assert!(!r.status.success());
}

#[test]
fn full_pipeline_trains_both_models_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 2, 40);
    let cfg_path = small_config(dir.path());
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let layout = Layout::new(&cfg);
    let c = s(&cfg_path);
    ok(&pedcov(&["ingest", "--config", c]));
    ok(&pedcov(&["train", "--target", "goal", "--config", c]));
    ok(&pedcov(&["train", "--target", "cov", "--config", c]));
    for t in [Target::Goal, Target::Cov] {
        assert!(layout.checkpoint(t).is_file());
        let log = fs::read_to_string(layout.train_log(t)).unwrap();
        assert!(log.starts_with("epoch,split,nll,kl,total\n"));
    }
    ok(&pedcov(&["eval", "--predictor", "covnet", "--config", c]));
    ok(&pedcov(&["eval", "--predictor", "fp", "--config", c]));
    let table = pedcov(&["report", "--config", c]);
    ok(&table);
    let text = String::from_utf8_lossy(&table.stdout);
    assert!(text.contains("covnet") && text.contains("fp") && text.contains("ideal"));

    let snapshot = |files: &[PathBuf]| files.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>();
    let files = vec![
        layout.train_log(Target::Goal),
        layout.train_log(Target::Cov),
        layout.eval_dir(Predictor::Covnet).join("report.json"),
        layout.eval_dir(Predictor::Fp).join("report.json"),
    ];
    let before = snapshot(&files);
    ok(&pedcov(&["train", "--target", "goal", "--config", c]));
    ok(&pedcov(&["train", "--target", "cov", "--config", c]));
    ok(&pedcov(&["eval", "--predictor", "covnet", "--config", c]));
    ok(&pedcov(&["eval", "--predictor", "fp", "--config", c]));
    assert_eq!(snapshot(&files), before);
}

#[test]
fn flags_override_config_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let r = pedcov(&[
        "show-config",
        "--config",
        s(&cfg),
        "--seed",
        "42",
        "--goal-source",
        "ground-truth-endpoint",
    ]);
    ok(&r);
    let shown = RunConfig::from_json(&String::from_utf8_lossy(&r.stdout)).unwrap();
    assert_eq!(shown.seed, 42);
    assert_eq!(shown.goal_source, GoalSource::GroundTruthEndpoint);
    assert_eq!(shown.covnet.hidden, 8);
}

#[test]
fn calibration_oracle_records_give_reference_deltas() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let records: Vec<EvalRecord> = (0..10_000)
        .map(|i| {
            let pred: Vec<Gaussian2D> = (0..12)
                .map(|k| Gaussian2D::new(Vec2::new(i as f64, k as f64), 0.2 + 0.05 * k as f64, 0.3, 0.25).unwrap())
                .collect();
            let truth = pred.iter().map(|g| g.sample(&mut rng)).collect();
            EvalRecord::new(pred, truth).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let report = write_eval_outputs(dir.path(), &records).unwrap();
    assert!(report.delta.ppei1.abs() < 0.01, "{:?}", report.delta);
    assert!(report.delta.ppei3.abs() < 0.005, "{:?}", report.delta);
    assert!(report.delta.md_median.abs() < 0.02, "{:?}", report.delta);
    let ppei = fs::read_to_string(dir.path().join("ppei.csv")).unwrap();
    assert_eq!(ppei.lines().count(), 13);
}
