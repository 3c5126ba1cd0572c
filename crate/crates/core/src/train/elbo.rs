use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{fit, FitOutcome, KlTarget, LossParts, TrainConfig};
use crate::covnet::{relative_future, CovInput, CovNetModel};
use crate::dataset::TrackletWindow;
use crate::neural::{Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::{Error, Result, Vec2, PRED_LEN};

/// One training example: network inputs plus the observed future.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSample {
    pub input: CovInput,
    pub fut_rel: [Vec2; PRED_LEN],
    pub truth: [Vec2; PRED_LEN],
}

impl CovSample {
    pub fn new(w: &TrackletWindow, sfm_means: &[Vec2]) -> Result<Self> {
        Ok(Self {
            input: CovInput::new(w, sfm_means)?,
            fut_rel: relative_future(w),
            truth: *w.fut(),
        })
    }
}

/// Loss nodes of one batch, each already averaged per agent.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub nll: Var,
    pub kl: Var,
    /// `α·nll + kl`, the reported loss.
    pub total: Var,
    /// What is differentiated: `total` plus, under [`KlTarget::Standard`],
    /// the prior-fitting term `KL(stop(q) ‖ p)` that trains the prior
    /// network without touching the posterior.
    pub objective: Var,
    /// The SFM mean inputs; detached, so they never receive gradient.
    pub mean_inputs: [Var; PRED_LEN],
}

fn col(g: &mut Graph, values: impl Iterator<Item = f64>) -> Var {
    let data: Vec<f64> = values.collect();
    let n = data.len();
    g.constant(Tensor::new(vec![n, 1], data).expect("column"))
}

/// Bi-variate Gaussian NLL per batch row, summed over the horizon: `[batch, 1]`.
pub(crate) fn nll_vars(g: &mut Graph, sigma: &[Var], rho: &[Var], dx: &[Var], dy: &[Var]) -> Var {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total: Option<Var> = None;
    for t in 0..sigma.len() {
        let sx = g.slice_cols(sigma[t], 0, 1);
        let sy = g.slice_cols(sigma[t], 1, 2);
        let ux = g.div(dx[t], sx);
        let uy = g.div(dy[t], sy);
        let r2 = g.square(rho[t]);
        let nr2 = g.scale(r2, -1.0);
        let om = g.add_scalar(nr2, 1.0);
        let ux2 = g.square(ux);
        let uy2 = g.square(uy);
        let cross = g.mul(ux, uy);
        let cross = g.mul(cross, rho[t]);
        let cross = g.scale(cross, -2.0);
        let q = g.add(ux2, uy2);
        let q = g.add(q, cross);
        let two_om = g.scale(om, 2.0);
        let quad = g.div(q, two_om);
        let lsx = g.ln(sx);
        let lsy = g.ln(sy);
        let lom = g.ln(om);
        let half_lom = g.scale(lom, 0.5);
        let s = g.add(lsx, lsy);
        let s = g.add(s, half_lom);
        let s = g.add(s, quad);
        let step = g.add_scalar(s, ln2pi);
        total = Some(match total {
            None => step,
            Some(acc) => g.add(acc, step),
        });
    }
    total.expect("nonempty horizon")
}

/// `KL(N(μq, σq) ‖ N(μp, σp))` summed over latent dims: `[batch, 1]`.
fn kl_diag(g: &mut Graph, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
    let d = g.sub(mq, mp);
    let d2 = g.square(d);
    let lq2 = g.scale(lq, 2.0);
    let vq = g.exp(lq2);
    let num = g.add(vq, d2);
    let lp2 = g.scale(lp, 2.0);
    let vp = g.exp(lp2);
    let den = g.scale(vp, 2.0);
    let frac = g.div(num, den);
    let dl = g.sub(lp, lq);
    let s = g.add(dl, frac);
    let s = g.add_scalar(s, -0.5);
    g.sum_cols(s)
}

/// `KL(N(μ, σ) ‖ N(0, I))` summed over latent dims: `[batch, 1]`.
fn kl_standard(g: &mut Graph, m: Var, l: Var) -> Var {
    let l2 = g.scale(l, 2.0);
    let v = g.exp(l2);
    let m2 = g.square(m);
    let s = g.add(v, m2);
    let s = g.sub(s, l2);
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    g.sum_cols(s)
}

fn per_agent_mean(g: &mut Graph, x: Var, n: usize) -> Var {
    let s = g.sum_all(x);
    g.scale(s, 1.0 / n as f64)
}

/// Truth minus SFM mean per step as `[batch, 1]` columns, with the means
/// entering as detached inputs.
fn residuals(g: &mut Graph, batch: &[&CovSample]) -> ([Var; PRED_LEN], Vec<Var>, Vec<Var>) {
    let mut means = Vec::with_capacity(PRED_LEN);
    let mut dx = Vec::with_capacity(PRED_LEN);
    let mut dy = Vec::with_capacity(PRED_LEN);
    for t in 0..PRED_LEN {
        let data: Vec<f64> = batch
            .iter()
            .flat_map(|s| [s.input.sfm_means[t].x, s.input.sfm_means[t].y])
            .collect();
        let m = g.variable(Tensor::new(vec![batch.len(), 2], data).expect("means"));
        means.push(m);
        let md = g.detach(m);
        let mx = g.slice_cols(md, 0, 1);
        let my = g.slice_cols(md, 1, 2);
        let tx = col(g, batch.iter().map(|s| s.truth[t].x));
        let ty = col(g, batch.iter().map(|s| s.truth[t].y));
        dx.push(g.sub(tx, mx));
        dy.push(g.sub(ty, my));
    }
    (means.try_into().expect("horizon"), dx, dy)
}

/// Builds the ELBO for `batch` with posterior noise `eps` (`[batch, latent]`).
/// Dropout is active only when `dropout_rng` is given.
pub fn elbo_graph(
    model: &CovNetModel,
    g: &mut Graph,
    batch: &[&CovSample],
    eps: Tensor,
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut (dyn RngCore + 'static)>,
) -> Result<ElboTerms> {
    let inputs: Vec<&CovInput> = batch.iter().map(|s| &s.input).collect();
    let futs: Vec<&[Vec2; PRED_LEN]> = batch.iter().map(|s| &s.fut_rel).collect();
    let n = batch.len();
    let scene = model.encode_vars(g, &inputs)?;
    let e_fut = model.encode_future_vars(g, &futs)?;
    let (mq, lq) = model.posterior_vars(g, scene.e_scene, e_fut, dropout_rng.as_deref_mut())?;
    let (mp, lp) = model.prior_vars(g, scene.e_scene, dropout_rng.as_deref_mut())?;
    let z = model.reparameterize_vars(g, mq, lq, eps);
    let prev = model.prev_mean_vars(g, &inputs);
    let dec = model.decode_vars(g, z, scene.e_scene, &prev, dropout_rng.as_deref_mut())?;

    let (mean_inputs, dx, dy) = residuals(g, batch);
    let nll_rows = nll_vars(g, &dec.sigma, &dec.rho, &dx, &dy);
    let nll = per_agent_mean(g, nll_rows, n);

    let (kl, prior_fit) = match cfg.kl_target {
        KlTarget::Standard => {
            let kl_rows = kl_standard(g, mq, lq);
            let mq_s = g.detach(mq);
            let lq_s = g.detach(lq);
            let fit_rows = kl_diag(g, mq_s, lq_s, mp, lp);
            (per_agent_mean(g, kl_rows, n), Some(per_agent_mean(g, fit_rows, n)))
        }
        KlTarget::Prior => {
            let kl_rows = kl_diag(g, mq, lq, mp, lp);
            (per_agent_mean(g, kl_rows, n), None)
        }
    };
    let weighted = g.scale(nll, cfg.alpha);
    let total = g.add(weighted, kl);
    let objective = match prior_fit {
        Some(p) => g.add(total, p),
        None => total,
    };
    Ok(ElboTerms {
        nll,
        kl,
        total,
        objective,
        mean_inputs,
    })
}

fn draw_eps<R: Rng + ?Sized>(rng: &mut R, n: usize, latent: usize) -> Tensor {
    let data = (0..n * latent).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, latent], data).expect("eps shape")
}

/// Per-agent `(total, nll, kl)` of a batch with freshly sampled latents
/// (dropout off).
pub fn elbo_loss(
    model: &CovNetModel,
    batch: &[&CovSample],
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty ELBO batch"));
    }
    let eps = draw_eps(rng, batch.len(), model.latent_dim());
    let mut g = Graph::new(model.store());
    let t = elbo_graph(model, &mut g, batch, eps, cfg, None)?;
    Ok(LossParts {
        nll: g.value(t.nll).scalar(),
        kl: g.value(t.kl).scalar(),
        total: g.value(t.total).scalar(),
    })
}

/// Deterministic validation score: NLL through the prior mean, KL from the
/// posterior, per agent.
fn validation_loss(
    model: &CovNetModel,
    store: &ParamStore,
    samples: &[CovSample],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for chunk in idx.chunks(256) {
        let batch: Vec<&CovSample> = chunk.iter().map(|i| &samples[*i]).collect();
        let inputs: Vec<&CovInput> = batch.iter().map(|s| &s.input).collect();
        let futs: Vec<&[Vec2; PRED_LEN]> = batch.iter().map(|s| &s.fut_rel).collect();
        let mut g = Graph::new(store);
        let scene = model.encode_vars(&mut g, &inputs)?;
        let (mp, lp) = model.prior_vars(&mut g, scene.e_scene, None)?;
        let prev = model.prev_mean_vars(&mut g, &inputs);
        let dec = model.decode_vars(&mut g, mp, scene.e_scene, &prev, None)?;
        let (_, dx, dy) = residuals(&mut g, &batch);
        let nll_rows = nll_vars(&mut g, &dec.sigma, &dec.rho, &dx, &dy);
        let e_fut = model.encode_future_vars(&mut g, &futs)?;
        let (mq, lq) = model.posterior_vars(&mut g, scene.e_scene, e_fut, None)?;
        let kl_rows = match cfg.kl_target {
            KlTarget::Standard => kl_standard(&mut g, mq, lq),
            KlTarget::Prior => kl_diag(&mut g, mq, lq, mp, lp),
        };
        let nll = g.sum_all(nll_rows);
        let kl = g.sum_all(kl_rows);
        acc.nll += g.value(nll).scalar();
        acc.kl += g.value(kl).scalar();
    }
    let n = idx.len() as f64;
    acc.nll /= n;
    acc.kl /= n;
    acc.total = cfg.alpha * acc.nll + acc.kl;
    Ok(acc)
}

/// Fits `model` on `samples`; on return it holds the parameters with the
/// best validation NLL.
pub fn train_covnet(model: &mut CovNetModel, samples: &[CovSample], cfg: &TrainConfig) -> Result<FitOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("covnet training needs at least one window"));
    }
    let frozen = model.clone();
    let latent = model.latent_dim();
    let mut store = model.store().clone();
    let outcome = fit(
        &mut store,
        samples.len(),
        cfg,
        |s: &ParamStore, idx: &[usize], rng: &mut ChaCha8Rng| {
            let batch: Vec<&CovSample> = idx.iter().map(|i| &samples[*i]).collect();
            let eps = draw_eps(rng, batch.len(), latent);
            let mut g = Graph::new(s);
            let t = elbo_graph(&frozen, &mut g, &batch, eps, cfg, Some(rng))?;
            let parts = LossParts {
                nll: g.value(t.nll).scalar(),
                kl: g.value(t.kl).scalar(),
                total: g.value(t.total).scalar(),
            };
            let grads = g.backward(t.objective);
            let pg: ParamGrads = g.param_grads(&grads);
            Ok((parts, pg))
        },
        |s: &ParamStore, idx: &[usize]| validation_loss(&frozen, s, samples, idx, cfg),
    )?;
    *model.store_mut() = store;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covnet::{CovNetConfig, PredictMode};
    use crate::train::{make_synthetic, CorpusKind, NoiseSchedule, SyntheticSpec};
    use rand::SeedableRng;

    fn tiny() -> CovNetConfig {
        CovNetConfig {
            hidden: 6,
            latent: 2,
            attention: 4,
            neighbor_embed: 4,
            dropout: 0.0,
        }
    }

    /// Walkers whose SFM means are the noise-free extrapolation.
    fn samples(count: usize, seed: u64) -> Vec<CovSample> {
        let spec = SyntheticSpec {
            kind: CorpusKind::HeteroscedasticNoise,
            schedule: NoiseSchedule::Linear { base: 0.1, slope: 0.05 },
            count,
            seed,
        };
        make_synthetic(&spec)
            .unwrap()
            .iter()
            .map(|w| {
                let v = (w.obs()[7] - w.obs()[6]) * (1.0 / w.dt());
                let means: Vec<Vec2> = (1..=PRED_LEN).map(|k| w.last_obs() + v * (k as f64 * w.dt())).collect();
                CovSample::new(w, &means).unwrap()
            })
            .collect()
    }

    #[test]
    fn validation_nll_matches_scalar_density_of_predictions() {
        let m = CovNetModel::new(tiny(), 4).unwrap();
        let s = samples(5, 1);
        let idx: Vec<usize> = (0..s.len()).collect();
        let cfg = TrainConfig::default();
        let v = validation_loss(&m, m.store(), &s, &idx, &cfg).unwrap();
        let inputs: Vec<&CovInput> = s.iter().map(|x| &x.input).collect();
        let preds = m
            .predict_batch(&inputs, PredictMode::PriorMean, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let expected: f64 = preds
            .iter()
            .zip(&s)
            .map(|(p, x)| p.steps.iter().zip(&x.truth).map(|(g, t)| g.nll(*t)).sum::<f64>())
            .sum::<f64>()
            / s.len() as f64;
        assert!(
            (v.nll - expected).abs() < 1e-9 * expected.abs().max(1.0),
            "{} vs {expected}",
            v.nll
        );
        assert!(v.kl >= 0.0);
        assert_eq!(v.total, v.nll + v.kl);
    }

    #[test]
    fn elbo_loss_is_per_agent_and_weights_nll_by_alpha() {
        let m = CovNetModel::new(tiny(), 5).unwrap();
        let s = samples(3, 2);
        let batch: Vec<&CovSample> = s.iter().collect();
        let cfg = TrainConfig {
            alpha: 2.5,
            ..TrainConfig::default()
        };
        let parts = elbo_loss(&m, &batch, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        assert!((parts.total - (2.5 * parts.nll + parts.kl)).abs() < 1e-12);
        assert!(parts.kl >= 0.0);
        assert!(elbo_loss(&m, &[], &mut ChaCha8Rng::seed_from_u64(1), &cfg).is_err());
    }

    #[test]
    fn training_lowers_validation_nll_and_is_reproducible() {
        let s = samples(120, 3);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 5e-3,
            val_fraction: 0.25,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = CovNetModel::new(tiny(), 6).unwrap();
            let out = train_covnet(&mut m, &s, &cfg).unwrap();
            (m, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(o1.log, o2.log);
        assert!(m1.store().named().eq(m2.store().named()));
        let val: Vec<f64> = o1.log.iter().filter(|r| r.split == "val").map(|r| r.nll).collect();
        assert!(o1.best_val_nll < val[0], "{val:?}");
        assert_eq!(o1.best_val_nll, val[o1.best_epoch - 1]);
    }

    #[test]
    fn overflowing_loss_names_the_batch() {
        let mut s = samples(8, 4);
        s[5].truth[3] = Vec2::new(1e200, 0.0);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 100,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let mut m = CovNetModel::new(tiny(), 7).unwrap();
        match train_covnet(&mut m, &s, &cfg) {
            Err(Error::NonFiniteLoss {
                epoch,
                batch,
                first_window,
                last_window,
            }) => {
                assert_eq!((epoch, batch), (1, 0));
                assert!(first_window <= 5 && 5 <= last_window);
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }
}
