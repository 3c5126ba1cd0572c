use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pedcov::pipeline::{GoalSource, Predictor};
use pedcov::train::{CorpusKind, NoiseSchedule};
use pedcov_cli::config::parse_enum;
use pedcov_cli::{cmd_eval, cmd_ingest, cmd_report, cmd_synth, cmd_train, Overrides, RunConfig, SynthOptions, Target};

#[derive(Parser)]
#[command(
    name = "pedcov",
    version,
    about = "Pedestrian motion prediction with calibrated per-step uncertainty"
)]
struct Cli {
    /// JSON run configuration; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonFlags {
    /// Directory holding one `<scene>.txt` annotation file per scene.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Where the cache, checkpoints, logs and reports go.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Seed for initialization, shuffling and splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// predicted | ground-truth-endpoint
    #[arg(long, global = true, value_parser = parse_enum::<GoalSource>)]
    goal_source: Option<GoalSource>,
    /// Scene name to load (repeatable); default is every *.txt in the data directory.
    #[arg(long = "scene", global = true)]
    scenes: Vec<String>,
    /// Hold out this scene and train on the others.
    #[arg(long, global = true)]
    test_scene: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse scenes, build windows, write the window cache and a summary.
    Ingest,
    /// Train the goal model or CovarianceNet.
    Train {
        /// goal | cov
        #[arg(long, value_parser = parse_enum::<Target>)]
        target: Target,
        /// Overrides the target's configured epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Adam learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score the held-out scene and write report, curve CSVs and SVG.
    Eval {
        /// covnet | fp
        #[arg(long, value_parser = parse_enum::<Predictor>)]
        predictor: Option<Predictor>,
    },
    /// Tabulate the evaluation reports found in the output directory.
    Report,
    /// Print the effective configuration as JSON.
    ShowConfig,
    /// Write synthetic walker scenes in the annotation format.
    Synth {
        /// Directory to write the scene files into.
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of scene files.
        #[arg(long = "scenes", default_value_t = 3)]
        scene_count: usize,
        /// Walkers per scene.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// constant-velocity | heteroscedastic-noise
        #[arg(long, default_value = "heteroscedastic-noise", value_parser = parse_enum::<CorpusKind>)]
        kind: CorpusKind,
        /// Per-step noise deviation at the first future step, m.
        #[arg(long, default_value_t = 0.2)]
        base: f64,
        /// Increase of the per-step deviation per step, m.
        #[arg(long, default_value_t = 0.05)]
        slope: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let c = cli.common;
    let mut overrides = Overrides {
        data_dir: c.data_dir,
        output_dir: c.output_dir,
        seed: c.seed,
        goal_source: c.goal_source,
        scenes: c.scenes,
        test_scene: c.test_scene,
        ..Overrides::default()
    };
    match cli.command {
        Command::Ingest => {
            overrides.apply(&mut cfg, None);
            print!("{}", cmd_ingest(&cfg)?.to_text());
        }
        Command::Train {
            target,
            epochs,
            lr,
            batch_size,
        } => {
            overrides.epochs = epochs;
            overrides.lr = lr;
            overrides.batch_size = batch_size;
            overrides.apply(&mut cfg, Some(target));
            let out = cmd_train(&cfg, target)?;
            println!(
                "trained {target:?}: best epoch {} of {}, validation NLL {:.5}",
                out.best_epoch, out.epochs_run, out.best_val_nll
            );
        }
        Command::Eval { predictor } => {
            overrides.predictor = predictor;
            overrides.apply(&mut cfg, None);
            let r = cmd_eval(&cfg)?;
            println!(
                "{} windows: ADE {:.3} FDE {:.3} PPEI1 {:.4}±{:.4} PPEI3 {:.4}±{:.4} median MD {:.3}",
                r.records, r.mean_ade, r.fde, r.ppei1_mean, r.ppei1_std, r.ppei3_mean, r.ppei3_std, r.md_median
            );
        }
        Command::Report => {
            overrides.apply(&mut cfg, None);
            print!("{}", cmd_report(&cfg)?);
        }
        Command::ShowConfig => {
            overrides.apply(&mut cfg, None);
            println!("{}", cfg.to_json());
        }
        Command::Synth {
            out_dir,
            scene_count,
            count,
            kind,
            base,
            slope,
        } => {
            let written = cmd_synth(&SynthOptions {
                out_dir,
                scenes: scene_count,
                count,
                kind,
                schedule: NoiseSchedule::Linear { base, slope },
                seed: overrides.seed.unwrap_or(cfg.seed),
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
