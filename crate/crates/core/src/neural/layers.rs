//! Transformer building blocks on top of the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{xavier, Bound, ParamId, ParamStore};
use super::tape::{AttentionSpec, Segment, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Shape hyperparameters shared by the codec and the receiver models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder/decoder layer count.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Complex channel symbols per token.
    pub channel_dim: usize,
    /// Fixed token-sequence length.
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            d_model: 128,
            heads: 8,
            d_ff: 512,
            channel_dim: 16,
            max_len: 32,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("channel_dim", self.channel_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model.{name} must be >= 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::InvalidArgument("model.max_len must be >= 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("model.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Inverted dropout; a no-op unless built with [`Dropout::train`].
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let (rows, cols) = tape.shape(x);
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..rows * cols)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, Tensor::from_vec(rows, cols, mask))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.weight"), xavier(rng, input, output)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(1, output)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Multi-head attention: bias-free Q/K/V projections plus an output
/// projection with bias.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        MultiHeadAttention {
            wq: store.add(format!("{name}.wq"), xavier(rng, d_model, d_model)),
            wk: store.add(format!("{name}.wk"), xavier(rng, d_model, d_model)),
            wv: store.add(format!("{name}.wv"), xavier(rng, d_model, d_model)),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            heads,
        }
    }

    /// Returns `(output, attention_node)`; the attention node exposes the
    /// softmax weights through [`Tape::attention_probs`].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        queries: Var,
        keys: Var,
        segments: &[Segment],
        causal: bool,
    ) -> (Var, Var) {
        let q = tape.matmul(queries, p[self.wq]);
        let k = tape.matmul(keys, p[self.wk]);
        let v = tape.matmul(keys, p[self.wv]);
        let att = tape.attention(
            q,
            k,
            v,
            AttentionSpec {
                heads: self.heads,
                segments: segments.to_vec(),
                causal,
            },
        );
        (self.out.forward(tape, p, att), att)
    }
}

/// Post-norm Transformer encoder layer:
/// `a = LN(x + MHA(x))`, `z = LN(a + W2 relu(W1 a + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.d_ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        segments: &[Segment],
        drop: &mut Dropout<'_>,
    ) -> Var {
        self.forward_traced(tape, p, x, segments, drop).0
    }

    /// Like [`EncoderLayer::forward`] but also returns the attention node.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        segments: &[Segment],
        drop: &mut Dropout<'_>,
    ) -> (Var, Var) {
        let (att, node) = self.attn.forward(tape, p, x, x, segments, false);
        let att = drop.apply(tape, att);
        let res = tape.add(x, att);
        let a = self.ln1.forward(tape, p, res);
        let f = feed_forward(tape, p, &self.ff1, &self.ff2, a);
        let f = drop.apply(tape, f);
        let res = tape.add(a, f);
        (self.ln2.forward(tape, p, res), node)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// receiver memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, cfg.heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.d_ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, d, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    /// `self_segments` must be square; `cross_segments` pair each query
    /// block with its memory block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        self_segments: &[Segment],
        memory: Var,
        cross_segments: &[Segment],
        drop: &mut Dropout<'_>,
    ) -> Var {
        let (sa, _) = self.self_attn.forward(tape, p, x, x, self_segments, true);
        let sa = drop.apply(tape, sa);
        let res = tape.add(x, sa);
        let a = self.ln1.forward(tape, p, res);
        let (ca, _) = self
            .cross_attn
            .forward(tape, p, a, memory, cross_segments, false);
        let ca = drop.apply(tape, ca);
        let res = tape.add(a, ca);
        let b = self.ln2.forward(tape, p, res);
        let f = feed_forward(tape, p, &self.ff1, &self.ff2, b);
        let f = drop.apply(tape, f);
        let res = tape.add(b, f);
        self.ln3.forward(tape, p, res)
    }
}

fn feed_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    ff1: &Linear,
    ff2: &Linear,
    x: Var,
) -> Var {
    let h = ff1.forward(tape, p, x);
    let h = tape.relu(h);
    ff2.forward(tape, p, h)
}

/// Standard sinusoidal position table, `len x d`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::lit(v));
        }
    }
    t
}

/// Stacks position rows `0..len` for every length in `lens`.
pub fn stacked_positions<T: Scalar>(table: &Tensor<T>, lens: &[usize]) -> Tensor<T> {
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * table.cols());
    for &len in lens {
        data.extend_from_slice(&table.data()[..len * table.cols()]);
    }
    Tensor::from_vec(total, table.cols(), data)
}
