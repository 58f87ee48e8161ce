//! Transformer sequence encoder with a tied item-embedding output layer.
//!
//! Input representation is item embedding plus learnable position
//! embedding. Each block is post-norm: causal multi-head self-attention,
//! residual, layer norm, position-wise ReLU feed-forward, residual, layer
//! norm. The user state `h` is the last block's output at the final position,
//! and next-item scores are `h · Mᵀ` over the whole embedding table
//! (padding row included; it is masked out at ranking time).

use rand::{Rng, SeedableRng};

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::params::{constant, truncated_normal, Bound, ParamStore, INIT_STD};
use crate::tensor::{AttentionSpec, Tape, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Width multiplier of the feed-forward sublayer.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub num_items: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn new(num_items: usize) -> Self {
        BackboneConfig {
            num_items,
            dim: 64,
            layers: 2,
            heads: 2,
            max_len: 50,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim ({}) must be a positive multiple of heads ({})",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.num_items == 0 {
            return Err(Error::Config("num_items must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Backbone parameters. This is everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

pub const ITEM_EMB: &str = "item_emb";
pub const POS_EMB: &str = "pos_emb";

fn layer_key(l: usize, part: &str) -> String {
    format!("layer{l}.{part}")
}

/// Tape outputs of one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `rows x d` user states.
    pub h: Var,
    /// `rows*width x d` input representation.
    pub input: Var,
    /// Attention node per block.
    pub attention: Vec<Var>,
}

impl Backbone {
    /// Parameter names and shapes implied by `config`, in insertion order.
    pub fn expected_shapes(config: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.dim;
        let ff = FFN_MULT * d;
        let mut out = vec![
            (ITEM_EMB.to_string(), vec![config.num_items + 1, d]),
            (POS_EMB.to_string(), vec![config.max_len, d]),
        ];
        for l in 0..config.layers {
            let mut push = |part: &str, shape: Vec<usize>| out.push((layer_key(l, part), shape));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                push(w, vec![d, d]);
            }
            push("ln1.gain", vec![d]);
            push("ln1.bias", vec![d]);
            push("ffn.w1", vec![ff, d]);
            push("ffn.b1", vec![ff]);
            push("ffn.w2", vec![d, ff]);
            push("ffn.b2", vec![d]);
            push("ln2.gain", vec![d]);
            push("ln2.bias", vec![d]);
        }
        out
    }

    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        for (name, shape) in Self::expected_shapes(&config) {
            let t = if name.ends_with(".gain") {
                constant(shape, 1.0)
            } else if shape.len() == 1 {
                constant(shape, 0.0)
            } else {
                truncated_normal(shape, INIT_STD, rng)
            };
            p.insert(name, t);
        }
        Ok(Backbone { config, params: p })
    }

    /// Rebuilds a backbone from loaded parameters, checking every expected
    /// tensor is present with the right shape. Extra parameters are dropped.
    pub fn from_params(config: BackboneConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut kept = ParamStore::new();
        for (name, shape) in Self::expected_shapes(&config) {
            let t = params
                .take(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            kept.insert(name, t);
        }
        Ok(Backbone { config, params: kept })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// `H = E + P` over the batch window, `rows*width x d`.
    pub fn embed(&self, tape: &mut Tape, vars: &Bound, batch: &Batch) -> Result<Var> {
        if batch.width > self.config.max_len {
            return Err(TensorError::Shape {
                op: "embed",
                left: vec![batch.width],
                right: vec![self.config.max_len],
            }
            .into());
        }
        let e = tape.embedding_lookup(vars.var(ITEM_EMB), &batch.prefixes)?;
        let cols = batch.positions();
        let pos: Vec<usize> = (0..batch.rows).flat_map(|_| cols.iter().copied()).collect();
        let p = tape.gather_rows(vars.var(POS_EMB), &pos)?;
        Ok(tape.add(e, p)?)
    }

    /// Runs the blocks and reads out the last position of every row.
    ///
    /// The final block only evaluates its queries at the readout position;
    /// the other positions cannot influence `h` past that point.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &Bound,
        batch: &Batch,
        input: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let c = &self.config;
        let (rows, width) = (batch.rows, batch.width);
        if width == 0 {
            return Err(TensorError::Contract("encode needs a non-empty window".into()).into());
        }
        let readout: Vec<usize> = (0..rows).map(|r| r * width + width - 1).collect();
        let pad = batch.pad_mask();
        let mut attention = Vec::with_capacity(c.layers);
        let mut x = input;
        for l in 0..c.layers {
            let last = l + 1 == c.layers;
            let w = |part: &str| vars.var(&layer_key(l, part));
            let xq = if last { tape.gather_rows(x, &readout)? } else { x };
            let q = tape.matmul_bt(xq, w("attn.wq"))?;
            let k = tape.matmul_bt(x, w("attn.wk"))?;
            let v = tape.matmul_bt(x, w("attn.wv"))?;
            let spec = AttentionSpec {
                heads: c.heads,
                seq_len: width,
                query_len: if last { 1 } else { width },
                key_pad: pad.clone(),
                dropout: c.dropout,
                train,
            };
            let a = tape.attention(q, k, v, spec, rng)?;
            attention.push(a);
            let o = tape.matmul_bt(a, w("attn.wo"))?;
            let r1 = tape.add(xq, o)?;
            let x1 = tape.layer_norm(r1, w("ln1.gain"), w("ln1.bias"), LAYER_NORM_EPS)?;
            let f = tape.matmul_bt(x1, w("ffn.w1"))?;
            let f = tape.add_row(f, w("ffn.b1"))?;
            let f = tape.relu(f);
            let f = tape.matmul_bt(f, w("ffn.w2"))?;
            let f = tape.add_row(f, w("ffn.b2"))?;
            let f = tape.dropout(f, c.dropout, train, rng)?;
            let r2 = tape.add(x1, f)?;
            x = tape.layer_norm(r2, w("ln2.gain"), w("ln2.bias"), LAYER_NORM_EPS)?;
        }
        let h = if c.layers == 0 {
            tape.gather_rows(x, &readout)?
        } else {
            x
        };
        Ok(Encoded { h, input, attention })
    }

    /// Convenience: embed then encode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &Bound,
        batch: &Batch,
        train: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let input = self.embed(tape, vars, batch)?;
        self.encode(tape, vars, batch, input, train, rng)
    }

    /// Inference-mode user states for a set of histories, `rows x d` flat.
    pub fn states(&self, contexts: &[&[u32]]) -> Result<Vec<f64>> {
        if contexts.iter().any(|c| c.is_empty()) {
            return Err(TensorError::Contract("history must be non-empty".into()).into());
        }
        let batch = Batch::from_contexts(contexts, self.config.max_len);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let enc = self.forward(&mut tape, &vars, &batch, false, &mut rng)?;
        Ok(tape.value(enc.h).to_vec())
    }

    pub fn item_embeddings(&self) -> &[f64] {
        self.params.get(ITEM_EMB).expect("item embeddings exist").data()
    }
}

/// Scores `h · Mᵀ` over the full table, `rows x (V+1)`.
pub fn predict(tape: &mut Tape, item_emb: Var, h: Var) -> Result<Var> {
    Ok(tape.matmul_bt(h, item_emb)?)
}

/// Mean next-item cross-entropy.
pub fn main_loss(tape: &mut Tape, logits: Var, targets: &[u32]) -> Result<Var> {
    let cols = tape.shape(logits)[1];
    if let Some(&bad) = targets.iter().find(|&&t| t == PAD || t as usize >= cols) {
        return Err(TensorError::Contract(format!("next-item target {bad} is padding or out of range")).into());
    }
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let ls = tape.log_softmax_lastdim(logits)?;
    let picked = tape.pick(ls, &idx)?;
    let mean = tape.mean(picked);
    Ok(tape.scalar_mul(mean, -1.0))
}
