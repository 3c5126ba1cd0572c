//! Training configuration, the generic minibatch loop, the ELBO loss and
//! synthetic corpora.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neural::{adam_step, AdamConfig, ParamGrads, ParamStore};
use crate::{Error, Result};

mod elbo;
mod synthetic;

pub use elbo::{elbo_graph, elbo_loss, train_covnet, CovSample, ElboTerms};
pub use synthetic::{accumulated_variance, make_synthetic, synthetic_scene, CorpusKind, NoiseSchedule, SyntheticSpec};

/// Which distribution the posterior is regularized toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlTarget {
    /// `KL(q ‖ N(0, I))`; the prior network is fitted to `q` separately.
    #[default]
    Standard,
    /// `KL(q ‖ p_prior)`.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the NLL term.
    pub alpha: f64,
    pub seed: u64,
    pub kl_target: KlTarget,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            alpha: 1.0,
            seed: 0,
            kl_target: KlTarget::Standard,
            val_fraction: 0.1,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Per-window averaged loss components. For the goal model `nll` carries
/// the endpoint MSE and `kl` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,split,nll,kl,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.split, r.nll, r.kl, r.total));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<LogRow>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub epochs_run: usize,
}

/// Deterministic train/validation split of `0..n`.
pub fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).min(n - 1)
    };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Minibatch Adam with best-validation checkpointing and early stopping.
///
/// `batch_step` returns the batch-mean loss and its parameter gradients;
/// `evaluate` scores a set of windows without stochasticity. Without a
/// validation split the training loss drives model selection. On return
/// `store` holds the best parameters.
pub(crate) fn fit<S, E>(
    store: &mut ParamStore,
    n: usize,
    cfg: &TrainConfig,
    mut batch_step: S,
    mut evaluate: E,
) -> Result<FitOutcome>
where
    S: FnMut(&ParamStore, &[usize], &mut ChaCha8Rng) -> Result<(LossParts, ParamGrads)>,
    E: FnMut(&ParamStore, &[usize]) -> Result<LossParts>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset("no training windows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, val) = split_indices(n, cfg.val_fraction, &mut rng);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut log = Vec::new();
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut t = 0u64;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        train.shuffle(&mut rng);
        let mut acc = LossParts::default();
        for (b, batch) in train.chunks(cfg.batch_size).enumerate() {
            let (parts, grads) = batch_step(store, batch, &mut rng)?;
            if !parts.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    first_window: *batch.iter().min().expect("nonempty batch"),
                    last_window: *batch.iter().max().expect("nonempty batch"),
                });
            }
            t += 1;
            adam_step(store, &grads, &adam, t)?;
            let w = batch.len() as f64;
            acc.nll += parts.nll * w;
            acc.kl += parts.kl * w;
            acc.total += parts.total * w;
        }
        let m = train.len() as f64;
        log.push(LogRow {
            epoch,
            split: "train".into(),
            nll: acc.nll / m,
            kl: acc.kl / m,
            total: acc.total / m,
        });
        let score = if val.is_empty() {
            evaluate(store, &train)?
        } else {
            let v = evaluate(store, &val)?;
            log.push(LogRow {
                epoch,
                split: "val".into(),
                nll: v.nll,
                kl: v.kl,
                total: v.total,
            });
            v
        };
        log::debug!("epoch {epoch}: train {:.5} select {:.5}", acc.total / m, score.nll);
        if score.nll < best_val {
            best_val = score.nll;
            best_epoch = epoch;
            best = store.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    *store = best;
    Ok(FitOutcome {
        log,
        best_epoch,
        best_val_nll: best_val,
        epochs_run,
    })
}
