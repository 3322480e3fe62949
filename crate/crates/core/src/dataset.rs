//! Fixed-length training records built from traced episodes, multi-problem
//! mixing, batching and the on-disk shard store.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experts::{trace_solution, MdpEpisode, Solution};
use crate::problems::{prefix_entity_tokens, prefix_len, state_len, ActionMask, ProblemInstance, ProblemKind};
use crate::tokenizer::{
    encode_prefix, encode_step, step_token_len, TokenSequence, VocabSpec, ACTION_SPLIT, PAD, PREFIX_SPLIT,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub kind: ProblemKind,
    pub n: usize,
    pub ids: Vec<u32>,
    /// Number of prefix value tokens; the prefix splitter sits at this index.
    pub prefix_len: usize,
    pub pad_mask: Vec<bool>,
    pub loss_mask_stage1: Vec<bool>,
    pub loss_mask_stage2: Vec<bool>,
    pub local_pos: Vec<u32>,
    pub global_pos: Vec<u32>,
    /// Feasibility mask in force at each window step.
    pub step_feasibility: Vec<ActionMask>,
    /// Episode index of the first window step.
    pub window_start: usize,
}

impl TrajectoryRecord {
    /// Builds every derived field from the raw token layout.
    pub fn assemble(
        kind: ProblemKind,
        n: usize,
        ids: Vec<u32>,
        step_feasibility: Vec<ActionMask>,
        window_start: usize,
    ) -> Result<Self> {
        let l = ids.len();
        let p = prefix_len(kind, n);
        let sl = step_token_len(kind, n);
        let steps = step_feasibility.len();
        let used = p + 1 + steps * sl;
        if used > l {
            return Err(Error::Shape(format!("{steps} steps need {used} tokens, record holds {l}")));
        }
        if ids[p] != PREFIX_SPLIT {
            return Err(Error::Shape(format!("expected prefix splitter at {p}")));
        }
        let mut pad_mask = vec![false; l];
        let mut s1 = vec![false; l];
        let mut s2 = vec![false; l];
        let mut local = vec![0u32; l];
        for (i, lp) in local.iter_mut().enumerate().take(p) {
            *lp = i as u32;
        }
        for i in used..l {
            pad_mask[i] = true;
        }
        for j in 0..steps {
            let base = p + 1 + j * sl;
            for k in 0..sl {
                local[base + k] = k as u32;
            }
            if j > 0 {
                for flag in &mut s1[base..base + sl - 2] {
                    *flag = true;
                }
            }
            s2[base + sl - 1] = true;
        }
        Ok(TrajectoryRecord {
            kind,
            n,
            ids,
            prefix_len: p,
            pad_mask,
            loss_mask_stage1: s1,
            loss_mask_stage2: s2,
            local_pos: local,
            global_pos: (0..l as u32).collect(),
            step_feasibility,
            window_start,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.step_feasibility.len()
    }

    /// Number of tokens before trailing padding.
    pub fn used_len(&self) -> usize {
        self.prefix_len + 1 + self.window_len() * step_token_len(self.kind, self.n)
    }

    /// Window step that each position belongs to; `None` for prefix, the
    /// splitter and padding.
    pub fn query_steps(&self) -> Vec<Option<usize>> {
        let sl = step_token_len(self.kind, self.n);
        let start = self.prefix_len + 1;
        (0..self.len())
            .map(|i| {
                if i < start || i >= self.used_len() {
                    None
                } else {
                    Some((i - start) / sl)
                }
            })
            .collect()
    }

    /// Per window step, which prefix tokens are hidden from attention.
    pub fn prefix_hidden(&self) -> Vec<Vec<bool>> {
        self.step_feasibility.iter().map(|m| prefix_hidden(self.kind, self.n, m)).collect()
    }

    /// Splits the window back into (state tokens, action) pairs.
    pub fn decode_window(&self) -> Vec<(Vec<u32>, usize)> {
        let sl = step_token_len(self.kind, self.n);
        (0..self.window_len())
            .map(|j| {
                let base = self.prefix_len + 1 + j * sl;
                (self.ids[base..base + sl - 2].to_vec(), self.ids[base + sl - 1] as usize)
            })
            .collect()
    }
}

/// Prefix tokens belonging to entities whose action is infeasible under `mask`.
pub fn prefix_hidden(kind: ProblemKind, n: usize, mask: &ActionMask) -> Vec<bool> {
    let mut hidden = vec![false; prefix_len(kind, n)];
    for a in 0..mask.len() {
        if !mask.get(a) {
            for t in prefix_entity_tokens(kind, n, a) {
                hidden[t] = true;
            }
        }
    }
    hidden
}

/// Steps that fit after the prefix in a record of length `l`.
pub fn max_steps(kind: ProblemKind, n: usize, l: usize) -> Result<usize> {
    let need = prefix_len(kind, n) + 1;
    if need > l {
        return Err(Error::Capacity { kind, detail: format!("prefix of {need} tokens exceeds record length {l}") });
    }
    Ok((l - need) / step_token_len(kind, n))
}

/// Clips a random step window out of `episode` and lays it out after the
/// prefix. The window length is uniform over `[2, min(H, T)]` and its start
/// uniform over all valid offsets.
pub fn build_trajectory<R: Rng>(
    kind: ProblemKind,
    n: usize,
    episode: &MdpEpisode,
    prefix: &TokenSequence,
    l: usize,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    let h = max_steps(kind, n, l)?;
    let t = episode.total_steps;
    let top = h.min(t);
    let lo = 2.min(top);
    if lo < 2 && t >= 2 {
        return Err(Error::Capacity { kind, detail: format!("record length {l} leaves room for {h} steps, need 2") });
    }
    if top == 0 {
        return Err(Error::Shape("episode has no steps".into()));
    }
    let w = rng.gen_range(lo..=top);
    let start = rng.gen_range(0..=t - w);
    let mut ids = prefix.ids.clone();
    let mut feas = Vec::with_capacity(w);
    for step in &episode.steps[start..start + w] {
        ids.extend(encode_step(&step.state_values, step.action)?.ids);
        feas.push(step.mask.clone());
    }
    ids.resize(l, PAD);
    TrajectoryRecord::assemble(kind, n, ids, feas, start)
}

/// `reps` records from one solved instance, each with its own window drawn
/// from [`record_seed`].
pub fn instance_records(
    inst: &ProblemInstance,
    solution: &Solution,
    l: usize,
    global_seed: u64,
    reps: usize,
) -> Result<Vec<TrajectoryRecord>> {
    let episode = trace_solution(inst, solution)?;
    let prefix = encode_prefix(inst)?;
    (0..reps as u64)
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(global_seed, inst.kind, inst.seed, rep));
            build_trajectory(inst.kind, inst.n, &episode, &prefix, l, &mut rng)
        })
        .collect()
}

/// Deterministic per-record seed.
pub fn record_seed(global: u64, kind: ProblemKind, instance_seed: u64, rep: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(kind.as_str().as_bytes());
    h.update(instance_seed.to_le_bytes());
    h.update(rep.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Weighted random interleaving of per-kind record streams.
pub struct Mixer<I> {
    streams: Vec<I>,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

pub fn mix_problems<I: Iterator>(streams: Vec<I>, weights: Option<&[f64]>, seed: u64) -> Result<Mixer<I>> {
    if streams.is_empty() {
        return Err(Error::Config("no record streams to mix".into()));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != streams.len() => {
            return Err(Error::Config(format!("{} weights for {} streams", w.len(), streams.len())))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; streams.len()],
    };
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid mixing weights {w:?}")));
    }
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let cumulative = w
        .iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect();
    Ok(Mixer { streams, cumulative, rng: ChaCha8Rng::seed_from_u64(seed) })
}

impl<I: Iterator> Mixer<I> {
    pub fn pick(&mut self) -> usize {
        let u: f64 = self.rng.gen();
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1)
    }
}

impl<I: Iterator> Iterator for Mixer<I> {
    type Item = I::Item;

    fn next(&mut self) -> Option<I::Item> {
        let k = self.pick();
        self.streams[k].next()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub records: Vec<TrajectoryRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.records[0].len()
    }
}

pub fn make_batch(records: Vec<TrajectoryRecord>) -> Result<Batch> {
    let Some(first) = records.first() else {
        return Err(Error::Shape("empty batch".into()));
    };
    let l = first.len();
    if let Some(r) = records.iter().find(|r| r.len() != l) {
        return Err(Error::Shape(format!("mixed record lengths {l} and {}", r.len())));
    }
    Ok(Batch { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RecordMeta {
    kind: ProblemKind,
    n: usize,
    window_start: usize,
    steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ShardHeader {
    l: usize,
    records: Vec<RecordMeta>,
}

/// Shard layout: `u32` LE header length, JSON header, then per record `L`
/// little-endian `u16` ids followed by its packed step masks.
pub fn write_shard(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let l = records.first().map_or(0, |r| r.len());
    let header = ShardHeader {
        l,
        records: records
            .iter()
            .map(|r| RecordMeta { kind: r.kind, n: r.n, window_start: r.window_start, steps: r.window_len() })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(4 + head.len() + records.len() * l * 2);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for r in records {
        if r.len() != l {
            return Err(Error::Shape("mixed record lengths in shard".into()));
        }
        for &id in &r.ids {
            buf.extend_from_slice(&(id as u16).to_le_bytes());
        }
        for m in &r.step_feasibility {
            buf.extend_from_slice(&m.to_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::File(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let bad = || Error::File(format!("{}: truncated shard", path.display()));
    let hl = u32::from_le_bytes(buf.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let header: ShardHeader = serde_json::from_slice(buf.get(4..4 + hl).ok_or_else(bad)?)?;
    let mut at = 4 + hl;
    let mut out = Vec::with_capacity(header.records.len());
    for meta in header.records {
        let raw = buf.get(at..at + 2 * header.l).ok_or_else(bad)?;
        let ids: Vec<u32> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect();
        at += 2 * header.l;
        let size = meta.kind.action_space(meta.n);
        let bytes = size.div_ceil(8);
        let mut feas = Vec::with_capacity(meta.steps);
        for _ in 0..meta.steps {
            feas.push(ActionMask::from_bytes(buf.get(at..at + bytes).ok_or_else(bad)?, size));
            at += bytes;
        }
        out.push(TrajectoryRecord::assemble(meta.kind, meta.n, ids, feas, meta.window_start)?);
    }
    Ok(out)
}

/// Directory-level description of a trajectory store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "L")]
    pub l: usize,
    pub vocab: VocabSpec,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub seed: u64,
    pub shards: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text =
            fs::read_to_string(&path).map_err(|e| Error::File(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_all(&self, dir: &Path) -> Result<Vec<TrajectoryRecord>> {
        let mut out = Vec::new();
        for s in &self.shards {
            out.extend(read_shard(&dir.join(s))?);
        }
        Ok(out)
    }
}

/// Expected stage-1 target count for a window: state tokens of every step
/// but the first.
pub fn stage1_count(kind: ProblemKind, n: usize, window: usize) -> usize {
    window.saturating_sub(1) * state_len(kind, n)
}

/// True for token ids the step grammar places at splitter positions.
pub fn is_splitter(id: u32) -> bool {
    id == ACTION_SPLIT || id == PREFIX_SPLIT
}
