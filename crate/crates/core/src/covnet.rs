//! CovarianceNet: a CVAE that completes the SFM mean rollout with per-step
//! `(σx, σy, ρ)`.
//!
//! All positional inputs are relative to the agent's last observed
//! position. The decoder never touches the means it is given; they only
//! enter as (detached) inputs, and every output Gaussian carries the SFM
//! mean bit-for-bit.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Kinematics, TrackletWindow};
use crate::gauss::{DiagGaussianN, Gaussian2D, RHO_MAX, SIGMA_FLOOR};
use crate::neural::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
use crate::neural::{AdditiveAttention, Dense, Graph, GruCell, LstmCell, Mlp, ParamStore, Tensor, Var};
use crate::{Error, Result, Vec2, OBS_LEN, PRED_LEN};

pub const CHECKPOINT_KIND: &str = "covnet";
/// Latent log-deviation clamp.
pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovNetConfig {
    pub hidden: usize,
    pub latent: usize,
    pub attention: usize,
    /// Width of the per-neighbor key/value embedding.
    pub neighbor_embed: usize,
    pub dropout: f64,
}

impl Default for CovNetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 16,
            attention: 32,
            neighbor_embed: 32,
            dropout: 0.1,
        }
    }
}

/// Network inputs of one window, all relative to its last observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CovInput {
    pub rel_obs: [Vec2; OBS_LEN],
    pub vel: [Vec2; OBS_LEN],
    pub acc: [Vec2; OBS_LEN],
    /// Per neighbor and step: neighbor position minus agent position.
    pub neighbors: Vec<[Option<Vec2>; OBS_LEN]>,
    /// SFM means relative to `last_obs`.
    pub rel_means: [Vec2; PRED_LEN],
    pub sfm_means: [Vec2; PRED_LEN],
    pub last_obs: Vec2,
}

impl CovInput {
    pub fn new(w: &TrackletWindow, sfm_means: &[Vec2]) -> Result<Self> {
        let sfm_means: [Vec2; PRED_LEN] = sfm_means.try_into().map_err(|_| Error::Shape {
            op: "sfm means",
            expected: vec![PRED_LEN],
            got: vec![sfm_means.len()],
        })?;
        let k = Kinematics::derive(w);
        let last = w.last_obs();
        let neighbors = w
            .neighbors()
            .iter()
            .map(|n| std::array::from_fn(|t| n.track[t].map(|p| p - w.obs()[t])))
            .collect();
        Ok(Self {
            rel_obs: std::array::from_fn(|t| w.obs()[t] - last),
            vel: k.vel,
            acc: k.acc,
            neighbors,
            rel_means: std::array::from_fn(|t| sfm_means[t] - last),
            sfm_means,
            last_obs: last,
        })
    }
}

/// Future positions relative to the last observation (posterior input).
pub fn relative_future(w: &TrackletWindow) -> [Vec2; PRED_LEN] {
    std::array::from_fn(|t| w.fut()[t] - w.last_obs())
}

fn column_pair(points: impl Iterator<Item = Vec2>) -> Tensor {
    let rows: Vec<Vec<f64>> = points.map(|p| vec![p.x, p.y]).collect();
    Tensor::from_rows(&rows).expect("two columns")
}

/// Scene encodings as concrete tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedScene {
    pub e_hist: Tensor,
    pub e_neigh: Tensor,
    pub e_scene: Tensor,
    pub e_fut: Option<Tensor>,
}

/// Graph nodes of a batch encoding.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    pub e_hist: Var,
    pub e_neigh: Var,
    pub e_scene: Var,
}

/// Per-step decoder outputs: `sigma[t]` is `[batch, 2]`, `rho[t]` is `[batch, 1]`.
#[derive(Debug, Clone)]
pub struct DecodedVars {
    pub sigma: Vec<Var>,
    pub rho: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    PriorSample,
    PriorMean,
}

/// Per-step Gaussians: means from the SFM, spread from the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDistribution {
    pub steps: Vec<Gaussian2D>,
}

#[derive(Debug, Clone)]
pub struct CovNetModel {
    config: CovNetConfig,
    store: ParamStore,
    lstm_pos: LstmCell,
    lstm_vel: LstmCell,
    lstm_acc: LstmCell,
    lstm_fut: LstmCell,
    nbr_embed: Dense,
    attention: AdditiveAttention,
    lstm_nbr: LstmCell,
    prior_mu: Mlp,
    prior_ls: Mlp,
    post_mu: Mlp,
    post_ls: Mlp,
    dec_init: Mlp,
    gru: GruCell,
    sigma_head: Mlp,
    rho_head: Mlp,
}

type TrainRng<'a> = Option<&'a mut (dyn RngCore + 'static)>;

impl CovNetModel {
    pub fn new(config: CovNetConfig, seed: u64) -> Result<Self> {
        let CovNetConfig {
            hidden: h,
            latent: l,
            attention: a,
            neighbor_embed: e,
            dropout: p,
        } = config.clone();
        if h == 0 || l == 0 || a == 0 || e == 0 {
            return Err(Error::invalid("covnet sizes must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let s_ = &mut s;
        Ok(Self {
            lstm_pos: LstmCell::new(s_, "hist.pos", 2, h, r)?,
            lstm_vel: LstmCell::new(s_, "hist.vel", 2, h, r)?,
            lstm_acc: LstmCell::new(s_, "hist.acc", 2, h, r)?,
            lstm_fut: LstmCell::new(s_, "fut", 2, h, r)?,
            nbr_embed: Dense::new(s_, "neigh.embed", 3, e, r)?,
            attention: AdditiveAttention::new(s_, "neigh.attn", h, e, e, a, r)?,
            lstm_nbr: LstmCell::new(s_, "neigh.lstm", e, h, r)?,
            prior_mu: Mlp::new(s_, "prior.mu", h, h, l, p, r)?,
            prior_ls: Mlp::new(s_, "prior.log_sigma", h, h, l, p, r)?,
            post_mu: Mlp::new(s_, "post.mu", 2 * h, h, l, p, r)?,
            post_ls: Mlp::new(s_, "post.log_sigma", 2 * h, h, l, p, r)?,
            dec_init: Mlp::new(s_, "dec.init", h, h, h, p, r)?,
            gru: GruCell::new(s_, "dec.gru", 2 + l, h, r)?,
            sigma_head: Mlp::new(s_, "dec.sigma", h, h, 2, p, r)?,
            rho_head: Mlp::new(s_, "dec.rho", h, h, 1, p, r)?,
            config,
            store: s,
        })
    }

    pub fn config(&self) -> &CovNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    /// History and neighbor encodings for a batch.
    pub fn encode_vars(&self, g: &mut Graph, batch: &[&CovInput]) -> Result<SceneVars> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty covnet batch"));
        }
        let seq = |g: &mut Graph, f: &dyn Fn(&CovInput, usize) -> Vec2| -> Vec<Var> {
            (0..OBS_LEN)
                .map(|t| g.constant(column_pair(batch.iter().map(|x| f(x, t)))))
                .collect()
        };
        let pos_in = seq(g, &|x, t| x.rel_obs[t]);
        let vel_in = seq(g, &|x, t| x.vel[t]);
        let acc_in = seq(g, &|x, t| x.acc[t]);
        let h_pos = self.lstm_pos.run(g, &pos_in)?;
        let h_vel = self.lstm_vel.run(g, &vel_in)?;
        let h_acc = self.lstm_acc.run(g, &acc_in)?;
        let e_hist = g.add(h_pos[OBS_LEN - 1], h_vel[OBS_LEN - 1]);
        let e_hist = g.add(e_hist, h_acc[OBS_LEN - 1]);

        let n_max = batch.iter().map(|x| x.neighbors.len()).max().unwrap_or(0);
        let mut contexts = Vec::with_capacity(OBS_LEN);
        for (t, query) in h_pos.iter().enumerate() {
            let mut keys = Vec::with_capacity(n_max);
            let mut mask = vec![vec![false; n_max]; batch.len()];
            for j in 0..n_max {
                let mut data = Vec::with_capacity(batch.len() * 3);
                for (b, x) in batch.iter().enumerate() {
                    match x.neighbors.get(j).and_then(|n| n[t]) {
                        Some(d) => {
                            data.extend_from_slice(&[d.x, d.y, 1.0]);
                            mask[b][j] = true;
                        }
                        None => data.extend_from_slice(&[0.0; 3]),
                    }
                }
                let feats = g.constant(Tensor::new(vec![batch.len(), 3], data)?);
                keys.push(self.nbr_embed.forward(g, feats)?);
            }
            let (ctx, _) = self.attention.forward(g, *query, &keys, &keys, &mask)?;
            contexts.push(ctx);
        }
        let h_nbr = self.lstm_nbr.run(g, &contexts)?;
        let e_neigh = h_nbr[OBS_LEN - 1];
        let e_scene = g.add(e_hist, e_neigh);
        Ok(SceneVars {
            e_hist,
            e_neigh,
            e_scene,
        })
    }

    /// Final hidden state of the future-trajectory encoder.
    pub fn encode_future_vars(&self, g: &mut Graph, futures: &[&[Vec2; PRED_LEN]]) -> Result<Var> {
        let inputs: Vec<Var> = (0..PRED_LEN)
            .map(|t| g.constant(column_pair(futures.iter().map(|f| f[t]))))
            .collect();
        let hs = self.lstm_fut.run(g, &inputs)?;
        Ok(hs[PRED_LEN - 1])
    }

    fn gaussian_head(&self, g: &mut Graph, mu: &Mlp, ls: &Mlp, x: Var, mut rng: TrainRng) -> Result<(Var, Var)> {
        let m = mu.forward(g, x, rng.as_deref_mut())?;
        let l = ls.forward(g, x, rng.as_deref_mut())?;
        Ok((m, g.clamp(l, LOG_SIGMA_MIN, LOG_SIGMA_MAX)))
    }

    /// Prior `(μ, log σ)` from the scene encoding.
    pub fn prior_vars(&self, g: &mut Graph, e_scene: Var, rng: TrainRng) -> Result<(Var, Var)> {
        self.gaussian_head(g, &self.prior_mu, &self.prior_ls, e_scene, rng)
    }

    /// Posterior `(μ, log σ)` from the scene and future encodings.
    pub fn posterior_vars(&self, g: &mut Graph, e_scene: Var, e_fut: Var, rng: TrainRng) -> Result<(Var, Var)> {
        let x = g.concat(&[e_scene, e_fut]);
        self.gaussian_head(g, &self.post_mu, &self.post_ls, x, rng)
    }

    /// `z = μ + exp(log σ) ⊙ ε`.
    pub fn reparameterize_vars(&self, g: &mut Graph, mu: Var, log_sigma: Var, eps: Tensor) -> Var {
        let sigma = g.exp(log_sigma);
        let e = g.constant(eps);
        let se = g.mul(sigma, e);
        g.add(mu, se)
    }

    /// Runs the GRU decoder. `prev_means[t]` is the `[batch, 2]` input of
    /// step `t`: zero at the first step, the previous relative SFM mean after.
    pub fn decode_vars(
        &self,
        g: &mut Graph,
        z: Var,
        e_scene: Var,
        prev_means: &[Var],
        mut rng: TrainRng,
    ) -> Result<DecodedVars> {
        let mut h = self.dec_init.forward(g, e_scene, rng.as_deref_mut())?;
        let mut sigma = Vec::with_capacity(prev_means.len());
        let mut rho = Vec::with_capacity(prev_means.len());
        for m in prev_means {
            let x = g.concat(&[*m, z]);
            h = self.gru.step(g, x, h)?;
            let s = self.sigma_head.forward(g, h, rng.as_deref_mut())?;
            let s = g.softplus(s);
            sigma.push(g.add_scalar(s, SIGMA_FLOOR));
            let r = self.rho_head.forward(g, h, rng.as_deref_mut())?;
            let r = g.tanh(r);
            rho.push(g.scale(r, RHO_MAX));
        }
        Ok(DecodedVars { sigma, rho })
    }

    /// Decoder inputs for a batch: the previous relative mean at each step,
    /// detached so no gradient reaches the SFM means.
    pub fn prev_mean_vars(&self, g: &mut Graph, batch: &[&CovInput]) -> Vec<Var> {
        (0..PRED_LEN)
            .map(|t| {
                let pts = batch
                    .iter()
                    .map(|x| if t == 0 { Vec2::ZERO } else { x.rel_means[t - 1] });
                let v = g.variable(column_pair(pts));
                g.detach(v)
            })
            .collect()
    }

    fn single<T>(&self, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
        let mut g = Graph::new(&self.store);
        f(&mut g)
    }

    pub fn encode_history(&self, w: &TrackletWindow) -> Result<Tensor> {
        let x = CovInput::new(w, &[w.last_obs(); PRED_LEN])?;
        self.single(|g| {
            let v = self.encode_vars(g, &[&x])?;
            Ok(g.value(v.e_hist).clone())
        })
    }

    pub fn encode_neighbors(&self, w: &TrackletWindow) -> Result<Tensor> {
        let x = CovInput::new(w, &[w.last_obs(); PRED_LEN])?;
        self.single(|g| {
            let v = self.encode_vars(g, &[&x])?;
            Ok(g.value(v.e_neigh).clone())
        })
    }

    /// Encodes a window; `with_future` adds the future-encoder state.
    pub fn encode(&self, w: &TrackletWindow, with_future: bool) -> Result<EncodedScene> {
        let x = CovInput::new(w, &[w.last_obs(); PRED_LEN])?;
        let fut = relative_future(w);
        self.single(|g| {
            let v = self.encode_vars(g, &[&x])?;
            let e_fut = if with_future {
                let f = self.encode_future_vars(g, &[&fut])?;
                Some(g.value(f).clone())
            } else {
                None
            };
            Ok(EncodedScene {
                e_hist: g.value(v.e_hist).clone(),
                e_neigh: g.value(v.e_neigh).clone(),
                e_scene: g.value(v.e_scene).clone(),
                e_fut,
            })
        })
    }

    fn to_diag(&self, g: &Graph, mu: Var, ls: Var) -> Result<DiagGaussianN> {
        let sigma = g.value(ls).data().iter().map(|v| v.exp()).collect();
        DiagGaussianN::new(g.value(mu).data().to_vec(), sigma)
    }

    pub fn prior(&self, enc: &EncodedScene) -> Result<DiagGaussianN> {
        self.single(|g| {
            let e = g.constant(enc.e_scene.clone());
            let (m, l) = self.prior_vars(g, e, None)?;
            self.to_diag(g, m, l)
        })
    }

    pub fn posterior(&self, enc: &EncodedScene) -> Result<DiagGaussianN> {
        let fut = enc
            .e_fut
            .as_ref()
            .ok_or_else(|| Error::invalid("posterior needs the future encoding"))?;
        self.single(|g| {
            let e = g.constant(enc.e_scene.clone());
            let f = g.constant(fut.clone());
            let (m, l) = self.posterior_vars(g, e, f, None)?;
            self.to_diag(g, m, l)
        })
    }

    /// Per-step `(σx, σy, ρ)` for latent `z`.
    pub fn decode(
        &self,
        z: &[f64],
        e_scene: &Tensor,
        sfm_means: &[Vec2],
        last_obs: Vec2,
    ) -> Result<Vec<(f64, f64, f64)>> {
        if z.len() != self.config.latent {
            return Err(Error::Shape {
                op: "decode latent",
                expected: vec![self.config.latent],
                got: vec![z.len()],
            });
        }
        if sfm_means.len() != PRED_LEN {
            return Err(Error::Shape {
                op: "decode means",
                expected: vec![PRED_LEN],
                got: vec![sfm_means.len()],
            });
        }
        self.single(|g| {
            let zv = g.constant(Tensor::row(z));
            let e = g.constant(e_scene.clone());
            let prev: Vec<Var> = (0..PRED_LEN)
                .map(|t| {
                    let p = if t == 0 {
                        Vec2::ZERO
                    } else {
                        sfm_means[t - 1] - last_obs
                    };
                    g.constant(Tensor::row(&[p.x, p.y]))
                })
                .collect();
            let d = self.decode_vars(g, zv, e, &prev, None)?;
            Ok(d.sigma
                .iter()
                .zip(&d.rho)
                .map(|(s, r)| {
                    let s = g.value(*s);
                    (s.get(0, 0), s.get(0, 1), g.value(*r).scalar())
                })
                .collect())
        })
    }

    /// Predicted distributions for a batch of windows with their SFM means.
    pub fn predict_batch<R: Rng + ?Sized>(
        &self,
        inputs: &[&CovInput],
        mode: PredictMode,
        rng: &mut R,
    ) -> Result<Vec<PredictedDistribution>> {
        let mut g = Graph::new(&self.store);
        let scene = self.encode_vars(&mut g, inputs)?;
        let (mu, ls) = self.prior_vars(&mut g, scene.e_scene, None)?;
        let z = match mode {
            PredictMode::PriorMean => mu,
            PredictMode::PriorSample => {
                let n = inputs.len() * self.config.latent;
                let eps = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                self.reparameterize_vars(
                    &mut g,
                    mu,
                    ls,
                    Tensor::new(vec![inputs.len(), self.config.latent], eps)?,
                )
            }
        };
        let prev = self.prev_mean_vars(&mut g, inputs);
        let d = self.decode_vars(&mut g, z, scene.e_scene, &prev, None)?;
        inputs
            .iter()
            .enumerate()
            .map(|(b, x)| {
                let steps = (0..PRED_LEN)
                    .map(|t| {
                        let s = g.value(d.sigma[t]);
                        let r = g.value(d.rho[t]).get(b, 0);
                        Gaussian2D::new(x.sfm_means[t], s.get(b, 0), s.get(b, 1), r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PredictedDistribution { steps })
            })
            .collect()
    }

    pub fn predict_distribution<R: Rng + ?Sized>(
        &self,
        w: &TrackletWindow,
        sfm_means: &[Vec2],
        mode: PredictMode,
        rng: &mut R,
    ) -> Result<PredictedDistribution> {
        let x = CovInput::new(w, sfm_means)?;
        Ok(self.predict_batch(&[&x], mode, rng)?.remove(0))
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
        let config: CovNetConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_named(load_checkpoint(path, CHECKPOINT_KIND)?)?;
        Ok(model)
    }
}

/// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(q: &DiagGaussianN, rng: &mut R) -> Vec<f64> {
    q.sample(rng)
}
