//! Transformer encoder mapping an action chunk to the flat embedding that
//! parameterizes the quadratic cost matrix.
//!
//! Tokens are the per-step action vectors: each is linearly embedded, given
//! a learned positional code, passed through post-norm encoder layers
//! (multi-head self-attention + tanh feedforward), then the output tokens
//! are flattened and projected to length `(horizon * action_dim)^2` by a
//! single linear head. The head is zero-initialized so an untrained model
//! produces the zero embedding and the downstream cost starts out as a
//! near-identity matrix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Matrix, NodeId, ParamStore, Tape};
use crate::trajectory::ActionChunk;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub feedforward_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub horizon: usize,
    pub action_dim: usize,
}

impl EncoderConfig {
    /// Default capacity with the given chunk geometry.
    pub fn new(horizon: usize, action_dim: usize) -> Self {
        Self {
            embed_dim: 256,
            feedforward_dim: 256,
            heads: 4,
            layers: 2,
            dropout: 0.1,
            horizon,
            action_dim,
        }
    }

    /// Shrunk capacity for small synthetic tasks and tests.
    pub fn compact(horizon: usize, action_dim: usize, embed_dim: usize) -> Self {
        Self {
            embed_dim,
            feedforward_dim: embed_dim,
            heads: 2,
            layers: 1,
            dropout: 0.1,
            horizon,
            action_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::BadHeadSplit {
                embed: self.embed_dim,
                heads: self.heads,
            });
        }
        Ok(())
    }

    /// Length of the embedding the head emits.
    pub fn embedding_len(&self) -> usize {
        let n = self.horizon * self.action_dim;
        n * n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    /// Output head starts at zero: the cost matrix starts near identity.
    Zero,
    /// Random head, used when a nontrivial starting cost is wanted.
    Random,
}

#[derive(Debug, Clone)]
struct LayerIndices {
    query: Vec<usize>,
    key: Vec<usize>,
    value: Vec<usize>,
    attn_w: usize,
    attn_b: usize,
    norm1_gain: usize,
    norm1_bias: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    norm2_gain: usize,
    norm2_bias: usize,
}

/// Parameter indices of one encoder; values live in a shared `ParamStore`.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    embed_w: usize,
    embed_b: usize,
    pos: usize,
    layers: Vec<LayerIndices>,
    head_w: usize,
    head_b: usize,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

impl TransformerEncoder {
    pub fn init(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        seed: u64,
        head_init: HeadInit,
    ) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.embed_dim;
        let head_dim = e / cfg.heads;

        let embed_w = store.add("embed.w", xavier(&mut rng, cfg.action_dim, e));
        let embed_b = store.add("embed.b", Matrix::zeros(1, e));
        let pos = store.add(
            "pos",
            Matrix::from_fn(cfg.horizon, e, |_, _| rng.gen_range(-0.02..0.02)),
        );

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut query = Vec::new();
            let mut key = Vec::new();
            let mut value = Vec::new();
            for h in 0..cfg.heads {
                query.push(store.add(format!("layer{l}.head{h}.wq"), xavier(&mut rng, e, head_dim)));
                key.push(store.add(format!("layer{l}.head{h}.wk"), xavier(&mut rng, e, head_dim)));
                value.push(store.add(format!("layer{l}.head{h}.wv"), xavier(&mut rng, e, head_dim)));
            }
            layers.push(LayerIndices {
                query,
                key,
                value,
                attn_w: store.add(format!("layer{l}.attn.w"), xavier(&mut rng, e, e)),
                attn_b: store.add(format!("layer{l}.attn.b"), Matrix::zeros(1, e)),
                norm1_gain: store.add(format!("layer{l}.norm1.gain"), Matrix::raw(1, e, vec![1.0; e])),
                norm1_bias: store.add(format!("layer{l}.norm1.bias"), Matrix::zeros(1, e)),
                ffn_w1: store.add(
                    format!("layer{l}.ffn.w1"),
                    xavier(&mut rng, e, cfg.feedforward_dim),
                ),
                ffn_b1: store.add(format!("layer{l}.ffn.b1"), Matrix::zeros(1, cfg.feedforward_dim)),
                ffn_w2: store.add(
                    format!("layer{l}.ffn.w2"),
                    xavier(&mut rng, cfg.feedforward_dim, e),
                ),
                ffn_b2: store.add(format!("layer{l}.ffn.b2"), Matrix::zeros(1, e)),
                norm2_gain: store.add(format!("layer{l}.norm2.gain"), Matrix::raw(1, e, vec![1.0; e])),
                norm2_bias: store.add(format!("layer{l}.norm2.bias"), Matrix::zeros(1, e)),
            });
        }

        let flat = cfg.horizon * e;
        let out = cfg.embedding_len();
        let head_w = match head_init {
            HeadInit::Zero => store.add("head.w", Matrix::zeros(flat, out)),
            HeadInit::Random => store.add("head.w", xavier(&mut rng, flat, out).scale(0.5)),
        };
        let head_b = store.add("head.b", Matrix::zeros(1, out));

        Ok(Self {
            cfg,
            embed_w,
            embed_b,
            pos,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the encoder on the tape and returns the `1 x (T_p D_a)^2`
    /// embedding node. Dropout is active only when an RNG is supplied;
    /// without one the pass is deterministic.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        chunk: &ActionChunk,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if chunk.horizon != self.cfg.horizon || chunk.action_dim != self.cfg.action_dim {
            return Err(Error::DimensionMismatch {
                what: "encoder input chunk",
                expected: self.cfg.horizon * self.cfg.action_dim,
                got: chunk.values.len(),
            });
        }
        let t = self.cfg.horizon;
        let head_dim = self.cfg.embed_dim / self.cfg.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let tokens = tape.constant(chunk.as_matrix());
        let embed_w = tape.param(store, self.embed_w);
        let embed_b = tape.param(store, self.embed_b);
        let projected = tape.matmul(tokens, embed_w)?;
        let bias_rows = tape.broadcast_rows(embed_b, t)?;
        let with_bias = tape.add(projected, bias_rows)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(with_bias, pos)?;

        for layer in &self.layers {
            // Multi-head self-attention with per-head projections.
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let wq = tape.param(store, layer.query[h]);
                let wk = tape.param(store, layer.key[h]);
                let wv = tape.param(store, layer.value[h]);
                let q = tape.matmul(x, wq)?;
                let k = tape.matmul(x, wk)?;
                let v = tape.matmul(x, wv)?;
                let k_t = tape.transpose(k);
                let scores = tape.matmul(q, k_t)?;
                let scaled = tape.scale(scores, scale);
                let weights = tape.row_softmax(scaled);
                heads.push(tape.matmul(weights, v)?);
            }
            let merged = tape.concat(&heads, Axis::Cols)?;
            let attn_w = tape.param(store, layer.attn_w);
            let attn_b = tape.param(store, layer.attn_b);
            let proj = tape.matmul(merged, attn_w)?;
            let proj_b = tape.broadcast_rows(attn_b, t)?;
            let mut attn_out = tape.add(proj, proj_b)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn_out = tape.dropout(attn_out, self.cfg.dropout, rng)?;
            }
            let res1 = tape.add(x, attn_out)?;
            let g1 = tape.param(store, layer.norm1_gain);
            let b1 = tape.param(store, layer.norm1_bias);
            x = tape.layer_norm(res1, g1, b1)?;

            // Position-wise feedforward.
            let w1 = tape.param(store, layer.ffn_w1);
            let b1f = tape.param(store, layer.ffn_b1);
            let w2 = tape.param(store, layer.ffn_w2);
            let b2f = tape.param(store, layer.ffn_b2);
            let hidden_lin = tape.matmul(x, w1)?;
            let b1_rows = tape.broadcast_rows(b1f, t)?;
            let hidden_biased = tape.add(hidden_lin, b1_rows)?;
            let hidden = tape.tanh(hidden_biased);
            let out_lin = tape.matmul(hidden, w2)?;
            let b2_rows = tape.broadcast_rows(b2f, t)?;
            let mut ffn_out = tape.add(out_lin, b2_rows)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                ffn_out = tape.dropout(ffn_out, self.cfg.dropout, rng)?;
            }
            let res2 = tape.add(x, ffn_out)?;
            let g2 = tape.param(store, layer.norm2_gain);
            let b2n = tape.param(store, layer.norm2_bias);
            x = tape.layer_norm(res2, g2, b2n)?;
        }

        let flat = tape.reshape(x, 1, t * self.cfg.embed_dim)?;
        let head_w = tape.param(store, self.head_w);
        let head_b = tape.param(store, self.head_b);
        let projected = tape.matmul(flat, head_w)?;
        tape.add(projected, head_b)
    }
}
