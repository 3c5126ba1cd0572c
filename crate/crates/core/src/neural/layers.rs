//! Dense, MLP, LSTM, GRU and additive-attention layers on top of [`Graph`].
//!
//! Layers own only [`ParamId`]s; the tensors live in a [`ParamStore`]. All
//! activations are batch-major `[batch, features]`.

use rand::{Rng, RngCore};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result};

fn check_cols(g: &Graph, x: Var, cols: usize, op: &'static str) -> Result<()> {
    let (r, c) = g.shape(x);
    if c != cols {
        return Err(Error::Shape {
            op,
            expected: vec![r, cols],
            got: vec![r, c],
        });
    }
    Ok(())
}

fn check_rows(g: &Graph, x: Var, rows: usize, op: &'static str) -> Result<()> {
    let (r, c) = g.shape(x);
    if r != rows {
        return Err(Error::Shape {
            op,
            expected: vec![rows, c],
            got: vec![r, c],
        });
    }
    Ok(())
}

/// `y = x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::invalid(format!("dense `{name}` needs nonzero sizes")));
        }
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), input, output, rng)?,
            b: store.add_zeros(format!("{name}.b"), 1, output)?,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_cols(g, x, self.input, "dense")?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        Ok(g.add_bias(xw, b))
    }
}

/// Two dense layers with a logistic sigmoid and dropout between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub first: Dense,
    pub second: Dense,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            first: Dense::new(store, &format!("{name}.0"), input, hidden, rng)?,
            second: Dense::new(store, &format!("{name}.1"), hidden, output, rng)?,
            dropout,
        })
    }

    /// Inverted dropout is applied only when `train_rng` is given; without
    /// it the layer is deterministic.
    pub fn forward(&self, g: &mut Graph, x: Var, train_rng: Option<&mut (dyn RngCore + 'static)>) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let mut h = g.sigmoid(h);
        if let Some(rng) = train_rng {
            if self.dropout > 0.0 {
                let (r, c) = g.shape(h);
                let keep = 1.0 - self.dropout;
                let mask = (0..r * c)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h = g.mul_const(h, Tensor::from_parts(r, c, mask));
            }
        }
        self.second.forward(g, h)
    }
}

/// LSTM cell with gates ordered `i, f, g, o` over `[x, h]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::invalid(format!("lstm `{name}` needs nonzero sizes")));
        }
        let w = store.add_uniform(format!("{name}.w"), input + hidden, 4 * hidden, rng)?;
        let mut bias = Tensor::zeros(1, 4 * hidden);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), bias)?;
        Ok(Self { w, b, input, hidden })
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(batch, self.hidden));
        let c = g.constant(Tensor::zeros(batch, self.hidden));
        (h, c)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        check_cols(g, x, self.input, "lstm input")?;
        check_cols(g, h, self.hidden, "lstm hidden")?;
        check_cols(g, c, self.hidden, "lstm cell")?;
        let batch = g.shape(x).0;
        check_rows(g, h, batch, "lstm hidden")?;
        check_rows(g, c, batch, "lstm cell")?;
        let n = self.hidden;
        let xh = g.concat(&[x, h]);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let pre = g.matmul(xh, w);
        let pre = g.add_bias(pre, b);
        let i = g.slice_cols(pre, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(pre, n, 2 * n);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(pre, 2 * n, 3 * n);
        let cand = g.tanh(cand);
        let o = g.slice_cols(pre, 3 * n, 4 * n);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_next = g.add(fc, ig);
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc);
        Ok((h_next, c_next))
    }

    /// Runs over `inputs` from a zero state; returns every hidden state.
    pub fn run(&self, g: &mut Graph, inputs: &[Var]) -> Result<Vec<Var>> {
        let Some(first) = inputs.first() else {
            return Err(Error::invalid("lstm run over an empty sequence"));
        };
        let batch = g.shape(*first).0;
        let (mut h, mut c) = self.zero_state(g, batch);
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            (h, c) = self.step(g, *x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// GRU cell: `z, r = σ(W_zr·[x, h] + b)`, `n = tanh(W_n·[x, r⊙h] + b_n)`,
/// `h' = (1 − z)⊙n + z⊙h`.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_zr: ParamId,
    pub b_zr: ParamId,
    pub w_n: ParamId,
    pub b_n: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::invalid(format!("gru `{name}` needs nonzero sizes")));
        }
        Ok(Self {
            w_zr: store.add_uniform(format!("{name}.w_zr"), input + hidden, 2 * hidden, rng)?,
            b_zr: store.add_zeros(format!("{name}.b_zr"), 1, 2 * hidden)?,
            w_n: store.add_uniform(format!("{name}.w_n"), input + hidden, hidden, rng)?,
            b_n: store.add_zeros(format!("{name}.b_n"), 1, hidden)?,
            input,
            hidden,
        })
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        check_cols(g, x, self.input, "gru input")?;
        check_cols(g, h, self.hidden, "gru hidden")?;
        check_rows(g, h, g.shape(x).0, "gru hidden")?;
        let n = self.hidden;
        let xh = g.concat(&[x, h]);
        let w_zr = g.param(self.w_zr);
        let b_zr = g.param(self.b_zr);
        let zr = g.matmul(xh, w_zr);
        let zr = g.add_bias(zr, b_zr);
        let zr = g.sigmoid(zr);
        let z = g.slice_cols(zr, 0, n);
        let r = g.slice_cols(zr, n, 2 * n);
        let rh = g.mul(r, h);
        let xrh = g.concat(&[x, rh]);
        let w_n = g.param(self.w_n);
        let b_n = g.param(self.b_n);
        let cand = g.matmul(xrh, w_n);
        let cand = g.add_bias(cand, b_n);
        let cand = g.tanh(cand);
        // h' = n + z⊙(h − n)
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        Ok(g.add(cand, zd))
    }
}

/// Additive (Bahdanau) attention: `score_j = vᵀ tanh(W_q·q + W_k·k_j)`.
#[derive(Debug, Clone, Copy)]
pub struct AdditiveAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub v: ParamId,
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub attn: usize,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query: usize,
        key: usize,
        value: usize,
        attn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if query == 0 || key == 0 || value == 0 || attn == 0 {
            return Err(Error::invalid(format!("attention `{name}` needs nonzero sizes")));
        }
        Ok(Self {
            w_q: store.add_uniform(format!("{name}.w_q"), query, attn, rng)?,
            w_k: store.add_uniform(format!("{name}.w_k"), key, attn, rng)?,
            v: store.add_uniform(format!("{name}.v"), attn, 1, rng)?,
            query,
            key,
            value,
            attn,
        })
    }

    /// `mask[b][j]` is true where key `j` exists for batch row `b`. Returns
    /// the context `[batch, value]` and the weights `[batch, n_keys]`
    /// (`None` when there are no keys at all, in which case the context is
    /// zero).
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        keys: &[Var],
        values: &[Var],
        mask: &[Vec<bool>],
    ) -> Result<(Var, Option<Var>)> {
        check_cols(g, query, self.query, "attention query")?;
        let batch = g.shape(query).0;
        if keys.len() != values.len() {
            return Err(Error::Shape {
                op: "attention values",
                expected: vec![keys.len()],
                got: vec![values.len()],
            });
        }
        if mask.len() != batch || mask.iter().any(|m| m.len() != keys.len()) {
            return Err(Error::invalid("attention mask does not match batch and key count"));
        }
        if keys.is_empty() {
            return Ok((g.constant(Tensor::zeros(batch, self.value)), None));
        }
        let w_q = g.param(self.w_q);
        let w_k = g.param(self.w_k);
        let v = g.param(self.v);
        let qp = g.matmul(query, w_q);
        let mut scores = Vec::with_capacity(keys.len());
        for (k, val) in keys.iter().zip(values) {
            check_cols(g, *k, self.key, "attention key")?;
            check_cols(g, *val, self.value, "attention value")?;
            check_rows(g, *k, batch, "attention key")?;
            check_rows(g, *val, batch, "attention value")?;
            let kp = g.matmul(*k, w_k);
            let s = g.add(qp, kp);
            let s = g.tanh(s);
            scores.push(g.matmul(s, v));
        }
        let scores = g.concat(&scores);
        let weights = g.masked_softmax(scores, mask);
        let mut context = None;
        for (j, val) in values.iter().enumerate() {
            let wj = g.slice_cols(weights, j, j + 1);
            let term = g.mul_col(*val, wj);
            context = Some(match context {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        Ok((context.expect("nonempty keys"), Some(weights)))
    }
}
