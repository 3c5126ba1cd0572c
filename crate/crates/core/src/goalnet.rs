//! Goal predictor: a small self-attention encoder over the observed steps
//! regressing the displacement from the last observed position to the
//! position at the end of the prediction horizon.
//!
//! Per-step features are `[x_t − x_last, v_t]`, so predictions are
//! translation-equivariant. The head output is scaled by the horizon
//! duration, i.e. the network regresses a mean future velocity.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Kinematics, TrackletWindow};
use crate::neural::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
use crate::neural::{Dense, Graph, Mlp, ParamGrads, ParamId, ParamStore, Tensor, Var};
use crate::train::{fit, FitOutcome, LossParts, TrainConfig};
use crate::{Error, Result, Vec2, OBS_LEN, PRED_LEN};

pub const CHECKPOINT_KIND: &str = "goalnet";
const FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Step duration used to convert the regressed velocity to metres.
    pub dt: f64,
}

impl Default for GoalConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            head_hidden: 32,
            dropout: 0.1,
            dt: crate::DT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GoalModel {
    config: GoalConfig,
    store: ParamStore,
    embed: Dense,
    pos_embed: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: Dense,
    head: Mlp,
    skip: Dense,
}

impl GoalModel {
    pub fn new(config: GoalConfig, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if config.heads == 0 || d == 0 || d % config.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d} must be a positive multiple of heads {}",
                config.heads
            )));
        }
        if !(config.dt > 0.0) {
            return Err(Error::invalid("goal model dt must be > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Dense::new(&mut store, "embed", FEATURES, d, &mut rng)?;
        let pos_embed = store.add_uniform("pos_embed", OBS_LEN, d, &mut rng)?;
        let wq = store.add_uniform("attn.wq", d, d, &mut rng)?;
        let wk = store.add_uniform("attn.wk", d, d, &mut rng)?;
        let wv = store.add_uniform("attn.wv", d, d, &mut rng)?;
        let wo = Dense::new(&mut store, "attn.wo", d, d, &mut rng)?;
        let pooled = 2 * d + FEATURES;
        let head = Mlp::new(
            &mut store,
            "head",
            pooled,
            config.head_hidden,
            2,
            config.dropout,
            &mut rng,
        )?;
        let skip = Dense::new(&mut store, "skip", pooled, 2, &mut rng)?;
        Ok(Self {
            config,
            store,
            embed,
            pos_embed,
            wq,
            wk,
            wv,
            wo,
            head,
            skip,
        })
    }

    pub fn config(&self) -> &GoalConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes the regression head and skip so every prediction is the last
    /// observed position.
    pub fn zero_head(&mut self) {
        for id in [self.head.second.w, self.head.second.b, self.skip.w, self.skip.b] {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    fn horizon_seconds(&self) -> f64 {
        PRED_LEN as f64 * self.config.dt
    }

    /// `[OBS_LEN, 4]` feature matrix of one window.
    pub fn features(w: &TrackletWindow) -> Tensor {
        let k = Kinematics::derive(w);
        let last = w.last_obs();
        let rows: Vec<Vec<f64>> = w
            .obs()
            .iter()
            .zip(&k.vel)
            .map(|(p, v)| {
                let r = *p - last;
                vec![r.x, r.y, v.x, v.y]
            })
            .collect();
        Tensor::from_rows(&rows).expect("fixed-width rows")
    }

    /// Displacement for one window as a `[1, 2]` node.
    fn forward_one(&self, g: &mut Graph, feats: &Tensor, mut rng: Option<&mut (dyn RngCore + 'static)>) -> Result<Var> {
        let d = self.config.d_model;
        let hd = d / self.config.heads;
        let x = g.constant(feats.clone());
        let e = self.embed.forward(g, x)?;
        let pe = g.param(self.pos_embed);
        let h = g.add(e, pe);

        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let all = vec![vec![true; OBS_LEN]; OBS_LEN];
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let (a, b) = (i * hd, (i + 1) * hd);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, 1.0 / (hd as f64).sqrt());
            let att = g.masked_softmax(s, &all);
            heads.push(g.matmul(att, vh));
        }
        let cat = g.concat(&heads);
        let o = self.wo.forward(g, cat)?;
        let h = g.add(h, o);

        let ones = g.constant(Tensor::filled(1, OBS_LEN, 1.0 / OBS_LEN as f64));
        let mean = g.matmul(ones, h);
        let last = g.slice_rows(h, OBS_LEN - 1, OBS_LEN);
        let raw_last = g.slice_rows(x, OBS_LEN - 1, OBS_LEN);
        let pooled = g.concat(&[mean, last, raw_last]);
        let y = self.head.forward(g, pooled, rng.as_deref_mut())?;
        let s = self.skip.forward(g, pooled)?;
        let y = g.add(y, s);
        Ok(g.scale(y, self.horizon_seconds()))
    }

    fn displacement(&self, feats: &Tensor) -> Result<Vec2> {
        let mut g = Graph::new(&self.store);
        let y = self.forward_one(&mut g, feats, None)?;
        let v = g.value(y);
        Ok(Vec2::new(v.get(0, 0), v.get(0, 1)))
    }

    /// Predicted position at the end of the horizon.
    pub fn predict_goal(&self, w: &TrackletWindow) -> Result<Vec2> {
        Ok(w.last_obs() + self.displacement(&Self::features(w))?)
    }

    /// Goal from a bare observed track (used for neighbors).
    pub fn predict_goal_from_track(&self, obs: &[Vec2; OBS_LEN], dt: f64) -> Result<Vec2> {
        let w = TrackletWindow::new(0, 0, *obs, [obs[OBS_LEN - 1]; PRED_LEN], Vec::new(), dt)?;
        self.predict_goal(&w)
    }

    /// Mean squared endpoint-displacement error over a set of windows.
    fn batch_loss(
        &self,
        g: &mut Graph,
        data: &[(Tensor, Vec2)],
        batch: &[usize],
        mut rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<Var> {
        let mut total = None;
        for &i in batch {
            let (feats, target) = &data[i];
            let y = self.forward_one(g, feats, rng.as_deref_mut())?;
            let t = g.constant(Tensor::row(&[target.x, target.y]));
            let diff = g.sub(y, t);
            let sq = g.square(diff);
            let s = g.sum_all(sq);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s),
            });
        }
        let total = total.ok_or(Error::EmptyDataset("empty goal batch"))?;
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(path, CHECKPOINT_KIND, &self.store)?;
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(sidecar_path(path), json).map_err(|e| Error::io(sidecar_path(path), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: GoalConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_named(load_checkpoint(path, CHECKPOINT_KIND)?)?;
        Ok(model)
    }
}

/// Trains `model` in place on endpoint displacement MSE and keeps the
/// best-validation parameters.
pub fn train_goal(model: &mut GoalModel, windows: &[TrackletWindow], cfg: &TrainConfig) -> Result<FitOutcome> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset("goal training needs at least one window"));
    }
    let data: Vec<(Tensor, Vec2)> = windows
        .iter()
        .map(|w| (GoalModel::features(w), w.fut()[PRED_LEN - 1] - w.last_obs()))
        .collect();
    let frozen = model.clone();
    let mut store = model.store.clone();
    let outcome = fit(
        &mut store,
        data.len(),
        cfg,
        |s: &ParamStore, batch: &[usize], rng: &mut ChaCha8Rng| {
            let mut g = Graph::new(s);
            let loss = frozen.batch_loss(&mut g, &data, batch, Some(rng))?;
            let value = g.value(loss).scalar();
            let grads = g.backward(loss);
            let pg: ParamGrads = g.param_grads(&grads);
            Ok((
                LossParts {
                    nll: value,
                    kl: 0.0,
                    total: value,
                },
                pg,
            ))
        },
        |s: &ParamStore, idx: &[usize]| {
            let mut g = Graph::new(s);
            let loss = frozen.batch_loss(&mut g, &data, idx, None)?;
            let v = g.value(loss).scalar();
            Ok(LossParts {
                nll: v,
                kl: 0.0,
                total: v,
            })
        },
    )?;
    model.store = store;
    Ok(outcome)
}
