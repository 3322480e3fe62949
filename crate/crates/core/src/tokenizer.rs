//! Value-to-token mapping: discrete values map to their own id, continuous
//! values go through mu-law companding and uniform binning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{prefix_len, state_len, ProblemInstance, ProblemKind, TaggedValue};

pub const DISCRETE_END: u32 = 200;
pub const CONTINUOUS_START: u32 = 200;
pub const CONTINUOUS_END: u32 = 2000;
pub const ACTION_SPLIT: u32 = 2000;
pub const PREFIX_SPLIT: u32 = 2001;
pub const PAD: u32 = 2002;
pub const VOCAB_SIZE: usize = 2003;
pub const MU_LAW_M: f64 = 4.0;
pub const MU_LAW_MU: f64 = 15.0;
pub const N_BINS: u32 = 1800;

/// Vocabulary constants, stored in every checkpoint so decoding can refuse
/// a model trained against a different layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub discrete: [u32; 2],
    pub continuous: [u32; 2],
    pub action_split: u32,
    pub prefix_split: u32,
    pub pad: u32,
    pub vocab_size: usize,
    pub m: f64,
    pub mu: f64,
    pub n_bins: u32,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            discrete: [0, DISCRETE_END],
            continuous: [CONTINUOUS_START, CONTINUOUS_END],
            action_split: ACTION_SPLIT,
            prefix_split: PREFIX_SPLIT,
            pad: PAD,
            vocab_size: VOCAB_SIZE,
            m: MU_LAW_M,
            mu: MU_LAW_MU,
            n_bins: N_BINS,
        }
    }
}

impl VocabSpec {
    pub fn check_compatible(&self) -> Result<()> {
        if *self != VocabSpec::default() {
            return Err(Error::Compatibility(format!(
                "checkpoint vocabulary {self:?} differs from tokenizer {:?}",
                VocabSpec::default()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Prefix,
    State,
    Split,
    Action,
    Pad,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<TokenRole>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: u32, role: TokenRole) {
        self.ids.push(id);
        self.roles.push(role);
    }
}

pub fn mu_law_encode(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidValue(format!("non-finite value {x}")));
    }
    let c = x.clamp(-MU_LAW_M, MU_LAW_M);
    let y = (c.abs() * MU_LAW_MU).ln_1p() / (MU_LAW_M * MU_LAW_MU).ln_1p();
    Ok(if c < 0.0 { -y } else { y })
}

pub fn mu_law_decode(y: f64) -> f64 {
    let mag = ((MU_LAW_M * MU_LAW_MU).ln_1p() * y.abs()).exp_m1() / MU_LAW_MU;
    if y < 0.0 {
        -mag
    } else {
        mag
    }
}

pub fn continuous_to_token(x: f64) -> Result<u32> {
    let y = mu_law_encode(x)?;
    let bin = ((y + 1.0) / 2.0 * N_BINS as f64).floor();
    let bin = bin.clamp(0.0, (N_BINS - 1) as f64) as u32;
    Ok(CONTINUOUS_START + bin)
}

/// Bin center in companded space, mapped back through the inverse transform.
pub fn token_to_continuous(id: u32) -> Result<f64> {
    if !(CONTINUOUS_START..CONTINUOUS_END).contains(&id) {
        return Err(Error::Range(format!("token {id} is not a continuous token")));
    }
    let bin = (id - CONTINUOUS_START) as f64;
    let y = (bin + 0.5) / N_BINS as f64 * 2.0 - 1.0;
    Ok(mu_law_decode(y))
}

pub fn discrete_to_token(v: i64) -> Result<u32> {
    if !(0..DISCRETE_END as i64).contains(&v) {
        return Err(Error::Range(format!("discrete value {v} outside [0, {DISCRETE_END})")));
    }
    Ok(v as u32)
}

pub fn value_to_token(v: TaggedValue) -> Result<u32> {
    match v {
        TaggedValue::Discrete(d) => discrete_to_token(d as i64),
        TaggedValue::Continuous(x) => continuous_to_token(x),
    }
}

/// Value a token stands for, for inspection.
pub fn decode_token(id: u32) -> Option<TaggedValue> {
    if id < DISCRETE_END {
        Some(TaggedValue::Discrete(id))
    } else if id < CONTINUOUS_END {
        token_to_continuous(id).ok().map(TaggedValue::Continuous)
    } else {
        None
    }
}

pub fn encode_values(values: &[TaggedValue]) -> Result<Vec<u32>> {
    values.iter().map(|&v| value_to_token(v)).collect()
}

/// Prefix tokens followed by the prefix splitter.
pub fn encode_prefix(inst: &ProblemInstance) -> Result<TokenSequence> {
    let values = crate::problems::static_prefix_values(inst);
    let mut seq = TokenSequence::default();
    for v in values {
        seq.push(value_to_token(v)?, TokenRole::Prefix);
    }
    seq.push(PREFIX_SPLIT, TokenRole::Split);
    Ok(seq)
}

/// `[state tokens.., ACTION_SPLIT, action]`.
pub fn encode_step(state_values: &[TaggedValue], action: usize) -> Result<TokenSequence> {
    let mut seq = TokenSequence::default();
    for &v in state_values {
        seq.push(value_to_token(v)?, TokenRole::State);
    }
    seq.push(ACTION_SPLIT, TokenRole::Split);
    seq.push(discrete_to_token(action as i64)?, TokenRole::Action);
    Ok(seq)
}

/// Token count of one step block.
pub fn step_token_len(kind: ProblemKind, n: usize) -> usize {
    state_len(kind, n) + 2
}

/// Token count of the prefix including its splitter.
pub fn prefix_token_len(kind: ProblemKind, n: usize) -> usize {
    prefix_len(kind, n) + 1
}
