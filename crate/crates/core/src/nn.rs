//! Parameter storage and the transformer building blocks shared by the text
//! encoder, the attention pool and the label-specific decoder.

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::rng::{gaussian, Rng};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Owns every parameter tensor of a model, frozen or trainable.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// The optimizer's parameter list. Frozen parameters never appear here.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).trainable).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// A tape plus the binding of store parameters to tape leaves.
///
/// Trainable parameters become differentiable leaves and frozen ones become
/// constants, so frozen weights never receive a gradient.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagates from `root` and gathers one gradient per trainable
    /// parameter (zeros for parameters the root does not depend on).
    pub fn param_grads(&self, root: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let mut grads: Gradients = self.tape.backward(root)?;
        Ok(self
            .store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).value.shape()));
                (id, g)
            })
            .collect())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Gaussian with standard deviation `1 / sqrt(fan_in)`.
    Fan,
    Gaussian(f64),
    Zeros,
    /// `gain * (I + noise)` with Gaussian noise of the given standard deviation.
    NearIdentity { gain: f64, noise: f64 },
}

fn init_matrix(rows: usize, cols: usize, init: Init, rng: &mut Rng) -> Tensor {
    let data = match init {
        Init::Fan => {
            let std = 1.0 / (rows as f64).sqrt();
            (0..rows * cols).map(|_| gaussian(rng, std)).collect()
        }
        Init::Gaussian(std) => (0..rows * cols).map(|_| gaussian(rng, std)).collect(),
        Init::Zeros => vec![0.0; rows * cols],
        Init::NearIdentity { gain, noise } => (0..rows * cols)
            .map(|i| {
                let eye = if i / cols == i % cols { 1.0 } else { 0.0 };
                gain * (eye + gaussian(rng, noise))
            })
            .collect(),
    };
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        trainable: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_matrix(d_in, d_out, init, rng),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let xw = s.tape.matmul(x, w)?;
        s.tape.add_row(xw, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), trainable),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b)
    }
}

/// Initialization of the four attention projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInit {
    pub query: Init,
    pub key: Init,
    pub value: Init,
    pub output: Init,
}

impl AttentionInit {
    pub fn uniform(init: Init) -> Self {
        Self {
            query: init,
            key: init,
            value: init,
            output: init,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub d: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        init: AttentionInit,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(CbsaError::Spec(format!(
                "{n_heads} heads do not divide width {d}"
            )));
        }
        Ok(Self {
            n_heads,
            d,
            q: Linear::new(store, &format!("{name}.q"), d, d, init.query, trainable, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, init.key, trainable, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, init.value, trainable, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, init.output, trainable, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Scaled dot-product attention per head, heads concatenated and
    /// output-projected. No residual is added here.
    pub fn forward(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(s, q, k, v)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the per-head
    /// attention weight matrices (`n_q x n_k` each).
    pub fn forward_with_weights(
        &self,
        s: &mut Session,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Vec<Var>)> {
        for (name, x) in [("query", q), ("key", k), ("value", v)] {
            if s.value(x).cols() != self.d {
                return Err(CbsaError::dim(format!(
                    "attention {name} {:?} against width {}",
                    s.value(x).shape(),
                    self.d
                )));
            }
        }
        if s.value(k).rows() != s.value(v).rows() {
            return Err(CbsaError::dim(format!(
                "attention keys {:?} and values {:?}",
                s.value(k).shape(),
                s.value(v).shape()
            )));
        }
        let qp = self.q.forward(s, q)?;
        let kp = self.k.forward(s, k)?;
        let vp = self.v.forward(s, v)?;
        let (cat, weights) = self.attend(s, qp, kp, vp)?;
        Ok((self.o.forward(s, cat)?, weights))
    }

    /// Multi-head attention over already projected queries, keys and values;
    /// returns the concatenated heads before the output projection.
    pub fn attend(&self, s: &mut Session, qp: Var, kp: Var, vp: Var) -> Result<(Var, Vec<Var>)> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    s.tape.slice_cols(qp, h * dh, dh)?,
                    s.tape.slice_cols(kp, h * dh, dh)?,
                    s.tape.slice_cols(vp, h * dh, dh)?,
                )
            };
            let scores = s.tape.matmul_nt(qh, kh)?;
            let scores = s.tape.scale(scores, scale);
            let w = s.tape.softmax_rows(scores, 1.0)?;
            heads.push(s.tape.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            s.tape.concat_cols(&heads)?
        };
        Ok((cat, weights))
    }
}

/// Pre-norm cross-attention decoder layer: queries attend to a memory
/// sequence, then pass through a feed-forward block. Queries never attend to
/// each other.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub norm_attn: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

const ALIGNED_NOISE: f64 = 0.05;

impl DecoderLayer {
    /// The cross-attention output projection and the last feed-forward layer
    /// start at zero when `zero_residual` is set, making the layer the
    /// identity on its queries.
    ///
    /// With `query_gain`, the query, key and value projections start near the
    /// identity and queries are scaled by the gain, so each query initially
    /// attends to the memory rows most similar to it. Otherwise they are
    /// fan-scaled Gaussians.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        ff_hidden: usize,
        zero_residual: bool,
        query_gain: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out_init = if zero_residual { Init::Zeros } else { Init::Fan };
        let attn_init = match query_gain {
            Some(gain) => AttentionInit {
                query: Init::NearIdentity { gain, noise: ALIGNED_NOISE },
                key: Init::NearIdentity { gain: 1.0, noise: ALIGNED_NOISE },
                value: Init::NearIdentity { gain: 1.0, noise: ALIGNED_NOISE },
                output: out_init,
            },
            None => AttentionInit {
                query: Init::Fan,
                key: Init::Fan,
                value: Init::Fan,
                output: out_init,
            },
        };
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d, true),
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                d,
                n_heads,
                attn_init,
                true,
                rng,
            )?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d, true),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, ff_hidden, Init::Fan, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_hidden, d, out_init, true, rng),
        })
    }

    pub fn forward(&self, s: &mut Session, queries: Var, memory: Var) -> Result<Var> {
        let normed = self.norm_attn.forward(s, queries)?;
        let attended = self.cross_attn.forward(s, normed, memory, memory)?;
        let x = s.tape.add(queries, attended)?;
        let normed = self.norm_ff.forward(s, x)?;
        let hidden = self.ff_in.forward(s, normed)?;
        let hidden = s.tape.gelu(hidden);
        let out = self.ff_out.forward(s, hidden)?;
        s.tape.add(x, out)
    }
}

/// Refines `queries` (`C x d`) by cross-attending over `memory` (`HW x d`)
/// through every layer in turn.
pub fn decoder_forward(
    s: &mut Session,
    queries: Var,
    memory: Var,
    layers: &[DecoderLayer],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(CbsaError::Contract("decoder needs at least one layer".into()));
    }
    let d = s.value(queries).cols();
    if s.value(memory).cols() != d {
        return Err(CbsaError::dim(format!(
            "decoder queries {:?} and memory {:?}",
            s.value(queries).shape(),
            s.value(memory).shape()
        )));
    }
    let mut x = queries;
    for layer in layers {
        x = layer.forward(s, x, memory)?;
    }
    Ok(x)
}

/// Pre-norm self-attention encoder layer with configurable residual branch
/// scale, used by the frozen surrogate text encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        ff_hidden: usize,
        branch_std: f64,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let attn_init = AttentionInit {
            query: Init::Fan,
            key: Init::Fan,
            value: Init::Fan,
            output: Init::Gaussian(branch_std),
        };
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d, trainable),
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                d,
                n_heads,
                attn_init,
                trainable,
                rng,
            )?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d, trainable),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, ff_hidden, Init::Fan, trainable, rng),
            ff_out: Linear::new(
                store,
                &format!("{name}.ff_out"),
                ff_hidden,
                d,
                Init::Gaussian(branch_std),
                trainable,
                rng,
            ),
        })
    }

    /// Runs the layer over `x`, a stack of independent sequences of
    /// `block_len` rows each; attention never crosses sequence boundaries.
    /// With `last_only`, only the final row of every sequence is computed
    /// and returned (one row per sequence).
    pub fn forward_blocks(
        &self,
        s: &mut Session,
        x: Var,
        block_len: usize,
        last_only: bool,
    ) -> Result<Var> {
        let rows = s.value(x).rows();
        if block_len == 0 || !rows.is_multiple_of(block_len) {
            return Err(CbsaError::dim(format!(
                "{rows} rows do not split into sequences of {block_len}"
            )));
        }
        let n_blocks = rows / block_len;
        let normed = self.norm_attn.forward(s, x)?;
        let attn = &self.self_attn;
        let kp = attn.k.forward(s, normed)?;
        let vp = attn.v.forward(s, normed)?;
        let (residual, q_src, q_len) = if last_only {
            let lasts = (0..n_blocks)
                .map(|b| s.tape.slice_rows(x, b * block_len + block_len - 1, 1))
                .collect::<Result<Vec<_>>>()?;
            let normed_lasts = (0..n_blocks)
                .map(|b| s.tape.slice_rows(normed, b * block_len + block_len - 1, 1))
                .collect::<Result<Vec<_>>>()?;
            (
                s.tape.concat_rows(&lasts)?,
                s.tape.concat_rows(&normed_lasts)?,
                1,
            )
        } else {
            (x, normed, block_len)
        };
        let qp = attn.q.forward(s, q_src)?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let qb = if n_blocks == 1 { qp } else { s.tape.slice_rows(qp, b * q_len, q_len)? };
            let kb = if n_blocks == 1 { kp } else { s.tape.slice_rows(kp, b * block_len, block_len)? };
            let vb = if n_blocks == 1 { vp } else { s.tape.slice_rows(vp, b * block_len, block_len)? };
            blocks.push(attn.attend(s, qb, kb, vb)?.0);
        }
        let cat = if n_blocks == 1 { blocks[0] } else { s.tape.concat_rows(&blocks)? };
        let attended = attn.o.forward(s, cat)?;
        let x = s.tape.add(residual, attended)?;
        self.feed_forward(s, x)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let normed = self.norm_attn.forward(s, x)?;
        let attended = self.self_attn.forward(s, normed, normed, normed)?;
        let x = s.tape.add(x, attended)?;
        self.feed_forward(s, x)
    }

    fn feed_forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let normed = self.norm_ff.forward(s, x)?;
        let hidden = self.ff_in.forward(s, normed)?;
        let hidden = s.tape.gelu(hidden);
        let out = self.ff_out.forward(s, hidden)?;
        s.tape.add(x, out)
    }
}
