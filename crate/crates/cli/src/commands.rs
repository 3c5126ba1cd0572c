//! The batch commands. Each returns its result value and writes its files
//! through a [`Staging`] set, so outputs appear only when the command succeeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pedcov::covnet::CovNetModel;
use pedcov::dataset::{
    build_windows, list_scenes, parse_annotation_file, read_window_cache, write_annotation_file, write_window_cache,
    SceneFile, SceneWindows, TrackletWindow,
};
use pedcov::goalnet::{train_goal, GoalModel};
use pedcov::metrics::{build_report, CalibrationReport, EvalRecord};
use pedcov::neural::checkpoint::sidecar_path;
use pedcov::pipeline::{eval_record, predict_covnet, predict_fp, sfm_means, GoalContext, GoalSource, Predictor};
use pedcov::train::{
    synthetic_scene, train_covnet, write_log_csv, CorpusKind, CovSample, FitOutcome, NoiseSchedule, SyntheticSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Target};
use crate::output::Staging;
use crate::svg::curves_svg;

/// Where each command reads and writes inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("windows.cache")
    }

    pub fn ingest_summary(&self) -> PathBuf {
        self.root.join("ingest_summary.txt")
    }

    pub fn checkpoint(&self, target: Target) -> PathBuf {
        match target {
            Target::Goal => self.root.join("goal.ckpt"),
            Target::Cov => self.root.join("covnet.ckpt"),
        }
    }

    pub fn train_log(&self, target: Target) -> PathBuf {
        match target {
            Target::Goal => self.root.join("goal_log.csv"),
            Target::Cov => self.root.join("covnet_log.csv"),
        }
    }

    pub fn eval_dir(&self, predictor: Predictor) -> PathBuf {
        self.root.join("eval").join(match predictor {
            Predictor::Covnet => "covnet",
            Predictor::Fp => "fp",
        })
    }

    pub fn report_table(&self) -> PathBuf {
        self.root.join("report_table.csv")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Per-scene window counts and the neighbor-count histogram of an ingest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub scenes: Vec<(String, usize)>,
    /// Neighbor count (capped at 10, meaning "10 or more") to window count.
    pub neighbor_histogram: BTreeMap<usize, usize>,
}

const HISTOGRAM_CAP: usize = 10;

impl IngestSummary {
    fn from_scenes(scenes: &[SceneWindows]) -> Self {
        let mut neighbor_histogram = BTreeMap::new();
        for w in scenes.iter().flat_map(|s| &s.windows) {
            *neighbor_histogram
                .entry(w.neighbors().len().min(HISTOGRAM_CAP))
                .or_insert(0) += 1;
        }
        Self {
            scenes: scenes.iter().map(|s| (s.name.clone(), s.windows.len())).collect(),
            neighbor_histogram,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("scene\twindows\n");
        for (name, n) in &self.scenes {
            writeln!(out, "{name}\t{n}").unwrap();
        }
        out.push_str("\nneighbors\twindows\n");
        for (k, n) in &self.neighbor_histogram {
            let label = if *k == HISTOGRAM_CAP {
                format!("{k}+")
            } else {
                k.to_string()
            };
            writeln!(out, "{label}\t{n}").unwrap();
        }
        out
    }
}

fn scene_files(cfg: &RunConfig) -> Result<Vec<SceneFile>> {
    cfg.require_data_dir()?;
    if cfg.scenes.is_empty() {
        let found = list_scenes(&cfg.data_dir)?;
        if found.is_empty() {
            bail!("no *.txt scene files in {}", cfg.data_dir.display());
        }
        return Ok(found);
    }
    let mut names = cfg.scenes.clone();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let path = cfg.data_dir.join(format!("{name}.txt"));
            if !path.is_file() {
                bail!("missing scene file {}", path.display());
            }
            Ok(SceneFile { name, path })
        })
        .collect()
}

/// Parses every scene, builds windows, and writes the cache and summary.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    cfg.validate()?;
    let files = scene_files(cfg)?;
    let mut scenes = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for f in &files {
        match parse_annotation_file(&f.path).and_then(|rows| build_windows(&rows, cfg.dt, cfg.frame_stride)) {
            Ok(windows) => {
                log::info!("{}: {} windows", f.name, windows.len());
                scenes.push(SceneWindows {
                    name: f.name.clone(),
                    windows,
                });
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        bail!("ingest failed:\n  {}", failures.join("\n  "));
    }
    let summary = IngestSummary::from_scenes(&scenes);
    let layout = Layout::new(cfg);
    ensure_dir(&layout.root)?;
    let mut staging = Staging::new();
    let cache_tmp = staging.stage(&layout.cache())?;
    write_window_cache(&cache_tmp, &scenes)?;
    staging.write(&layout.ingest_summary(), summary.to_text())?;
    staging.commit()?;
    Ok(summary)
}

fn load_cache(cfg: &RunConfig) -> Result<Vec<SceneWindows>> {
    let path = Layout::new(cfg).cache();
    if !path.is_file() {
        bail!("window cache {} not found; run `pedcov ingest` first", path.display());
    }
    Ok(read_window_cache(&path)?)
}

/// `(training windows, test windows)` of the configured split.
pub fn split_windows(cfg: &RunConfig) -> Result<(Vec<TrackletWindow>, Vec<TrackletWindow>)> {
    let scenes = load_cache(cfg)?;
    let names: Vec<String> = scenes.iter().map(|s| s.name.clone()).collect();
    let (train_names, test_name) = cfg.split.resolve(&names)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in scenes {
        if s.name == test_name {
            test = s.windows;
        } else if train_names.contains(&s.name) {
            train.extend(s.windows);
        }
    }
    log::info!(
        "split: train on {} ({} windows), test on {test_name} ({} windows)",
        train_names.join(", "),
        train.len(),
        test.len()
    );
    Ok((train, test))
}

fn load_goal_model(cfg: &RunConfig, needed_for: &str) -> Result<GoalModel> {
    let path = Layout::new(cfg).checkpoint(Target::Goal);
    if !path.is_file() {
        bail!(
            "goal checkpoint {} not found ({needed_for}); run `pedcov train --target goal` first",
            path.display()
        );
    }
    GoalModel::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn stage_checkpoint(staging: &mut Staging, target: &Path) -> Result<PathBuf> {
    let tmp = staging.stage(target)?;
    staging.register(sidecar_path(&tmp), sidecar_path(target));
    Ok(tmp)
}

/// Trains the goal model or CovarianceNet on the training scenes.
pub fn cmd_train(cfg: &RunConfig, target: Target) -> Result<FitOutcome> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    // Check the prerequisite before the (possibly slow) data loading.
    let goal = match target {
        Target::Cov => Some(load_goal_model(
            cfg,
            "CovarianceNet trains on SFM means driven by predicted goals",
        )?),
        Target::Goal => None,
    };
    let (train, _) = split_windows(cfg)?;
    if train.is_empty() {
        bail!("the training scenes contain no complete 20-step windows");
    }
    let mut staging = Staging::new();
    let ckpt_tmp = stage_checkpoint(&mut staging, &layout.checkpoint(target))?;
    let log_tmp = staging.stage(&layout.train_log(target))?;
    let outcome = match (target, goal) {
        (Target::Goal, _) => {
            let mut model = GoalModel::new(cfg.goal_model.clone(), cfg.seed)?;
            let outcome = train_goal(&mut model, &train, &cfg.goal_train_config())?;
            model.save(&ckpt_tmp)?;
            outcome
        }
        (Target::Cov, Some(goal)) => {
            let ctx = GoalContext {
                source: cfg.goal_source,
                model: Some(&goal),
                sfm: &cfg.sfm,
            };
            let samples = train
                .par_iter()
                .map(|w| Ok(CovSample::new(w, &sfm_means(w, &ctx)?)?))
                .collect::<Result<Vec<_>>>()?;
            let mut model = CovNetModel::new(cfg.covnet.clone(), cfg.seed)?;
            let outcome = train_covnet(&mut model, &samples, &cfg.cov_train_config())?;
            model.save(&ckpt_tmp)?;
            outcome
        }
        (Target::Cov, None) => unreachable!("goal model loaded above"),
    };
    write_log_csv(&log_tmp, &outcome.log)?;
    staging.commit()?;
    log::info!(
        "best epoch {} of {} (validation NLL {:.5})",
        outcome.best_epoch,
        outcome.epochs_run,
        outcome.best_val_nll
    );
    Ok(outcome)
}

/// Scores `windows` with the configured predictor.
pub fn predict_records(cfg: &RunConfig, windows: &[TrackletWindow]) -> Result<Vec<EvalRecord>> {
    let needs_goal = cfg.predictor == Predictor::Covnet || cfg.goal_source == GoalSource::Predicted;
    let goal = if needs_goal {
        Some(load_goal_model(cfg, "predicted goals drive the SFM means")?)
    } else {
        None
    };
    let ctx = GoalContext {
        source: cfg.goal_source,
        model: goal.as_ref(),
        sfm: &cfg.sfm,
    };
    match cfg.predictor {
        Predictor::Fp => windows
            .par_iter()
            .map(|w| Ok(eval_record(w, predict_fp(w, &ctx)?)?))
            .collect(),
        Predictor::Covnet => {
            let path = Layout::new(cfg).checkpoint(Target::Cov);
            if !path.is_file() {
                bail!(
                    "CovarianceNet checkpoint {} not found; run `pedcov train --target cov` first",
                    path.display()
                );
            }
            let model = CovNetModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let chunks = windows
                .par_chunks(cfg.eval_batch)
                .map(|chunk| {
                    let preds = predict_covnet(&model, chunk, &ctx)?;
                    chunk
                        .iter()
                        .zip(preds)
                        .map(|(w, p)| Ok(eval_record(w, p.steps)?))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(chunks.into_iter().flatten().collect())
        }
    }
}

/// Writes the report JSON/CSV, the PPEI and MD curve CSVs and the SVG for
/// `records` into `dir`. This is the scoring half of `eval`, callable with
/// any record set.
pub fn write_eval_outputs(dir: &Path, records: &[EvalRecord]) -> Result<CalibrationReport> {
    let report = build_report(records)?;
    ensure_dir(dir)?;
    let mut staging = Staging::new();
    staging.write(&dir.join("report.json"), report.to_json()?)?;
    staging.write(&dir.join("report.csv"), report.to_csv())?;
    let mut ppei = String::from("t,ppei1,ppei3\n");
    let mut md = String::from("t,md_p25,md_p50,md_p75\n");
    for s in &report.steps {
        writeln!(ppei, "{},{},{}", s.t, s.ppei1, s.ppei3).unwrap();
        writeln!(md, "{},{},{},{}", s.t, s.md_p25, s.md_p50, s.md_p75).unwrap();
    }
    staging.write(&dir.join("ppei.csv"), ppei)?;
    staging.write(&dir.join("md.csv"), md)?;
    staging.write(&dir.join("curves.svg"), curves_svg(&report))?;
    staging.commit()?;
    Ok(report)
}

/// Scores the held-out scene.
pub fn cmd_eval(cfg: &RunConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let (_, test) = split_windows(cfg)?;
    if test.is_empty() {
        bail!("the test scene contains no complete 20-step windows");
    }
    let records = predict_records(cfg, &test)?;
    let dir = Layout::new(cfg).eval_dir(cfg.predictor);
    let report = write_eval_outputs(&dir, &records)?;
    log::info!("wrote {}", dir.display());
    Ok(report)
}

/// Collects the evaluation reports present in the output directory into one
/// table (text to stdout, CSV on disk).
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let mut rows = Vec::new();
    for (name, predictor) in [("covnet", Predictor::Covnet), ("fp", Predictor::Fp)] {
        let path = layout.eval_dir(predictor).join("report.json");
        if path.is_file() {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report: CalibrationReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            rows.push((name, report));
        }
    }
    if rows.is_empty() {
        bail!(
            "no evaluation reports under {}; run `pedcov eval` first",
            layout.root.join("eval").display()
        );
    }
    let mut csv = String::from("predictor,ade,fde,ppei1_mean,ppei1_std,ppei3_mean,ppei3_std,md_median\n");
    let mut text = format!(
        "{:<10}{:>8}{:>8}{:>18}{:>18}{:>11}\n",
        "predictor", "ADE", "FDE", "PPEI1 %", "PPEI3 %", "median MD"
    );
    for (name, r) in &rows {
        writeln!(
            csv,
            "{name},{},{},{},{},{},{},{}",
            r.mean_ade, r.fde, r.ppei1_mean, r.ppei1_std, r.ppei3_mean, r.ppei3_std, r.md_median
        )
        .unwrap();
        writeln!(
            text,
            "{:<10}{:>8.2}{:>8.2}{:>18}{:>18}{:>11.2}",
            name,
            r.mean_ade,
            r.fde,
            format!("{:.1}±{:.1}", 100.0 * r.ppei1_mean, 100.0 * r.ppei1_std),
            format!("{:.1}±{:.1}", 100.0 * r.ppei3_mean, 100.0 * r.ppei3_std),
            r.md_median
        )
        .unwrap();
    }
    let reference = rows[0].1.reference;
    writeln!(
        text,
        "{:<10}{:>8}{:>8}{:>18.1}{:>18.1}{:>11.2}",
        "ideal",
        "",
        "",
        100.0 * reference.ppei1,
        100.0 * reference.ppei3,
        reference.md_median
    )
    .unwrap();
    let mut staging = Staging::new();
    staging.write(&layout.report_table(), csv)?;
    staging.commit()?;
    Ok(text)
}

/// Options of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub out_dir: PathBuf,
    pub scenes: usize,
    pub count: usize,
    pub kind: CorpusKind,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

/// Writes `scenes` annotation files of synthetic walkers, scene `i` seeded
/// with `seed + i`.
pub fn cmd_synth(opts: &SynthOptions) -> Result<Vec<PathBuf>> {
    if opts.scenes == 0 || opts.count == 0 {
        bail!("synth needs at least one scene and one walker per scene");
    }
    ensure_dir(&opts.out_dir)?;
    let mut staging = Staging::new();
    for i in 0..opts.scenes {
        let rows = synthetic_scene(&SyntheticSpec {
            kind: opts.kind,
            schedule: opts.schedule.clone(),
            count: opts.count,
            seed: opts.seed + i as u64,
        })?;
        let tmp = staging.stage(&opts.out_dir.join(format!("synth_{i:02}.txt")))?;
        write_annotation_file(&tmp, &rows)?;
    }
    staging.commit()
}
