//! Prefix-bidirectional decoder: token plus local-position embeddings,
//! rotary global positions, RMS-normalized pre-norm blocks with grouped
//! query attention and gated feed-forward layers.

mod cache;
mod checkpoint;
mod float;
mod forward;
mod mask;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{token_to_continuous, CONTINUOUS_END, CONTINUOUS_START, VOCAB_SIZE};

pub use cache::DecodeCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelCheckpoint};
pub use float::{gemm, Float};
pub use forward::{masked_ce_loss, LossStats, SeqInput, Targets};
pub use mask::{attention_mask, mask_row, AttentionMask};

#[cfg(test)]
pub(crate) use forward::tests as forward_tests;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
    /// Hide infeasible entities' prefix tokens from post-prefix queries.
    pub prefix_masking: bool,
    /// Seed continuous-value token embeddings with sinusoidal features of
    /// their bin centers instead of pure noise.
    #[serde(default)]
    pub value_init: bool,
}

/// Hidden width of the gated feed-forward layer: two thirds of 4×dim,
/// rounded up to a multiple of 32.
fn ffn_width(dim: usize) -> usize {
    (8 * dim / 3).div_ceil(32) * 32
}

impl ModelConfig {
    pub fn default_preset() -> Self {
        ModelConfig {
            layers: 10,
            embed_dim: 768,
            q_heads: 8,
            kv_heads: 8,
            ffn_dim: ffn_width(768),
            vocab_size: VOCAB_SIZE,
            max_len: 1000,
            norm_eps: 1e-6,
            rope_base: 10_000.0,
            prefix_masking: true,
            value_init: true,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            layers: 4,
            embed_dim: 128,
            q_heads: 4,
            kv_heads: 4,
            ffn_dim: ffn_width(128),
            max_len: 256,
            ..Self::default_preset()
        }
    }

    /// Very small shapes for tests.
    pub fn tiny() -> Self {
        ModelConfig { layers: 2, embed_dim: 16, q_heads: 4, kv_heads: 2, ffn_dim: 24, max_len: 128, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_preset()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.q_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.embed_dim == 0 || self.q_heads == 0 || self.kv_heads == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.q_heads) {
            return bad(format!("embed_dim {} not divisible by q_heads {}", self.embed_dim, self.q_heads));
        }
        if !self.q_heads.is_multiple_of(self.kv_heads) {
            return bad(format!("q_heads {} not divisible by kv_heads {}", self.q_heads, self.kv_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head dimension must be even for rotary embedding".into());
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if !(self.norm_eps > 0.0) || self.max_len == 0 || self.ffn_dim == 0 {
            return bad("norm_eps, max_len and ffn_dim must be positive".into());
        }
        Ok(())
    }
}

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w3: usize,
    pub w2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub loc_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_norm: usize,
    pub out: usize,
    pub total: usize,
    /// `(offset, len, is_gain)` for every tensor, in storage order.
    pub tensors: Vec<(usize, usize, bool)>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.embed_dim;
        let dh = c.head_dim();
        let mut at = 0;
        let mut tensors = Vec::new();
        let mut take = |len: usize, gain: bool| {
            let o = at;
            at += len;
            tensors.push((o, len, gain));
            o
        };
        let tok_emb = take(c.vocab_size * d, false);
        let loc_emb = take(c.max_len * d, false);
        let blocks = (0..c.layers)
            .map(|_| BlockLayout {
                attn_norm: take(d, true),
                wq: take(d * c.q_heads * dh, false),
                wk: take(d * c.kv_heads * dh, false),
                wv: take(d * c.kv_heads * dh, false),
                wo: take(c.q_heads * dh * d, false),
                ffn_norm: take(d, true),
                w1: take(d * c.ffn_dim, false),
                w3: take(d * c.ffn_dim, false),
                w2: take(c.ffn_dim * d, false),
            })
            .collect();
        let final_norm = take(d, true);
        let out = take(d * c.vocab_size, false);
        Layout { tok_emb, loc_emb, blocks, final_norm, out, total: at, tensors }
    }
}

/// Rotation tables for rotary position embedding, `[max_len, head_dim / 2]`.
#[derive(Clone, Debug)]
pub(crate) struct Rope<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub half: usize,
}

impl<T: Float> Rope<T> {
    fn new(c: &ModelConfig) -> Self {
        let half = c.head_dim() / 2;
        let mut cos = Vec::with_capacity(c.max_len * half);
        let mut sin = Vec::with_capacity(c.max_len * half);
        for p in 0..c.max_len {
            for i in 0..half {
                let theta = p as f64 * c.rope_base.powf(-2.0 * i as f64 / c.head_dim() as f64);
                cos.push(T::f(theta.cos()));
                sin.push(T::f(theta.sin()));
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotates interleaved pairs of every head in `row` by position `pos`;
    /// `sign = -1` applies the inverse rotation.
    pub fn apply(&self, row: &mut [T], pos: usize, heads: usize, sign: T) {
        let dh = 2 * self.half;
        let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
        for h in 0..heads {
            let x = &mut row[h * dh..(h + 1) * dh];
            for i in 0..self.half {
                let (a, b) = (x[2 * i], x[2 * i + 1]);
                let s = sn[i] * sign;
                x[2 * i] = a * cs[i] - b * s;
                x[2 * i + 1] = a * s + b * cs[i];
            }
        }
    }
}

/// Adds `sin`/`cos` features of each continuous token's value, at
/// geometrically spaced frequencies, to its embedding row.
fn value_features<T: Float>(c: &ModelConfig, table: &mut [T]) {
    const AMPLITUDE: f64 = 0.05;
    let d = c.embed_dim;
    let pairs = d / 2;
    for id in CONTINUOUS_START..CONTINUOUS_END {
        let v = token_to_continuous(id).expect("continuous id");
        let row = &mut table[id as usize * d..(id as usize + 1) * d];
        for k in 0..pairs {
            let freq = (MAX_FREQ.ln() * k as f64 / pairs.max(2) as f64).exp();
            row[2 * k] += T::f(AMPLITUDE * (freq * v).sin());
            row[2 * k + 1] += T::f(AMPLITUDE * (freq * v).cos());
        }
    }
}

const MAX_FREQ: f64 = 1000.0;

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub params: Vec<T>,
    pub(crate) layout: Layout,
    pub(crate) rope: Rope<T>,
}

impl<T: Float> Model<T> {
    /// Random initialization: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2·layers), unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).unwrap();
        let resid = 0.02 / (2.0 * config.layers as f64).sqrt();
        let resid_starts: Vec<usize> = layout.blocks.iter().flat_map(|b| [b.wo, b.w2]).collect();
        let mut params = vec![T::zero(); layout.total];
        for &(off, len, gain) in &layout.tensors {
            let scale = if resid_starts.contains(&off) { resid / 0.02 } else { 1.0 };
            for p in &mut params[off..off + len] {
                *p = if gain { T::one() } else { T::f(base.sample(&mut rng) * scale) };
            }
        }
        if config.value_init {
            value_features(&config, &mut params[layout.tok_emb..layout.tok_emb + config.vocab_size * config.embed_dim]);
        }
        let rope = Rope::new(&config);
        Ok(Model { config, params, layout, rope })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        let rope = Rope::new(&config);
        Ok(Model { config, params, layout, rope })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// True for parameters that receive weight decay (everything but norm gains).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.layout.total];
        for &(off, len, gain) in &self.layout.tensors {
            if gain {
                m[off..off + len].iter_mut().for_each(|x| *x = false);
            }
        }
        m
    }

    /// Casts parameters to another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let params = self.params.iter().map(|&p| U::from_f64(p.to_f64().unwrap()).unwrap()).collect();
        Model::from_params(self.config.clone(), params).expect("same config")
    }
}
