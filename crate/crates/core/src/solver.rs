//! Feasibility-masked decoding and solution metrics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{prefix_hidden, record_seed};
use crate::error::{Error, Result};
use crate::experts::Solution;
use crate::model::{DecodeCache, Float, Model, ModelCheckpoint, SeqInput};
use crate::problems::{
    apply_action, feasible_actions, initial_state, objective, state_step_values, ProblemInstance, Sense,
};
use crate::tokenizer::{encode_prefix, encode_values, ACTION_SPLIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeStrategy {
    pub mode: DecodeMode,
    pub samples: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Reuse keys and values across steps instead of recomputing the sequence.
    pub use_cache: bool,
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        DecodeStrategy { mode: DecodeMode::Greedy, samples: 16, temperature: 1.0, seed: 0, use_cache: true }
    }
}

impl DecodeStrategy {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn sample(k: usize, seed: u64) -> Self {
        DecodeStrategy { mode: DecodeMode::Sample, samples: k, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Token source for one rollout: either a growing cache or the full
/// sequence recomputed at every step.
enum Context<T: Float> {
    Cached(DecodeCache<T>),
    Full(SeqInput),
}

impl<T: Float> Context<T> {
    fn len(&self) -> usize {
        match self {
            Context::Cached(c) => c.len(),
            Context::Full(s) => s.len(),
        }
    }

    /// Feeds tokens and returns logits at the last of them.
    fn feed(&mut self, model: &Model<T>, ids: &[u32], local: &[u32], hidden: Option<&[bool]>) -> Result<Vec<T>> {
        let start = self.len();
        let pos: Vec<usize> = (start..start + ids.len()).collect();
        match self {
            Context::Cached(c) => model.forward_incremental_last(c, ids, &pos, local, hidden),
            Context::Full(s) => {
                let set = hidden.map(|h| {
                    s.hidden_sets.push(h.to_vec());
                    s.hidden_sets.len() - 1
                });
                for (i, &id) in ids.iter().enumerate() {
                    s.ids.push(id);
                    s.local_pos.push(local[i]);
                    s.pad.push(false);
                    s.query_set.push(if start + i <= s.prefix_len { None } else { set });
                }
                let logits = model.forward_seqs(std::slice::from_ref(s))?.pop().unwrap();
                let v = model.config.vocab_size;
                Ok(logits[logits.len() - v..].to_vec())
            }
        }
    }
}

fn start_context<T: Float>(model: &Model<T>, inst: &ProblemInstance, use_cache: bool) -> Result<(Context<T>, Vec<T>)> {
    let prefix = encode_prefix(inst)?;
    let p = prefix.len() - 1;
    let mut local: Vec<u32> = (0..p as u32).collect();
    local.push(0);
    let mut ctx = if use_cache {
        Context::Cached(DecodeCache::new(model, p))
    } else {
        Context::Full(SeqInput {
            ids: Vec::new(),
            local_pos: Vec::new(),
            prefix_len: p,
            pad: Vec::new(),
            hidden_sets: Vec::new(),
            query_set: Vec::new(),
        })
    };
    if prefix.len() > model.config.max_len {
        return Err(Error::Length { need: prefix.len(), max: model.config.max_len });
    }
    let logits = ctx.feed(model, &prefix.ids, &local, None)?;
    Ok((ctx, logits))
}

/// Picks among feasible actions; `None` rng means greedy (lowest id wins ties).
fn choose<T: Float, R: Rng>(logits: &[T], feasible: &[usize], rng: Option<(&mut R, f64)>) -> usize {
    match rng {
        None => {
            let mut best = feasible[0];
            for &a in &feasible[1..] {
                if logits[a] > logits[best] {
                    best = a;
                }
            }
            best
        }
        Some((rng, temp)) => {
            let vals: Vec<f64> = feasible.iter().map(|&a| logits[a].to_f64().unwrap() / temp).collect();
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return feasible[i];
                }
                u -= wi;
            }
            // Rounding left a sliver past the last bucket: take the heaviest.
            feasible[w.iter().enumerate().fold(0, |b, (i, x)| if *x > w[b] { i } else { b })]
        }
    }
}

fn rollout<T: Float, R: Rng>(
    model: &Model<T>,
    inst: &ProblemInstance,
    mut ctx: Context<T>,
    mut rng: Option<(&mut R, f64)>,
) -> Result<Vec<usize>> {
    let kind = inst.kind;
    let mut state = initial_state(inst);
    while !state.terminal {
        let mask = feasible_actions(inst, &state);
        let feasible: Vec<usize> = mask.actions().collect();
        if feasible.is_empty() {
            return Err(Error::EnvContract(format!("no feasible action at step {}", state.step())));
        }
        let hidden = model.config.prefix_masking.then(|| prefix_hidden(kind, inst.n, &mask));
        let mut ids = encode_values(&state_step_values(inst, &state))?;
        ids.push(ACTION_SPLIT);
        let need = ctx.len() + ids.len() + 1;
        if need > model.config.max_len {
            return Err(Error::Length { need, max: model.config.max_len });
        }
        let local: Vec<u32> = (0..ids.len() as u32).collect();
        let logits = ctx.feed(model, &ids, &local, hidden.as_deref())?;
        let a = choose(&logits, &feasible, rng.as_mut().map(|(r, t)| (&mut **r, *t)));
        state = apply_action(inst, &state, a)?;
        if !state.terminal {
            // The action token closes the step block; its output is not needed.
            match &mut ctx {
                Context::Cached(c) => {
                    let p = c.len();
                    model.forward_incremental(c, &[a as u32], &[p], &[local.len() as u32], hidden.as_deref())?;
                }
                Context::Full(_) => {
                    ctx.feed(model, &[a as u32], &[local.len() as u32], hidden.as_deref())?;
                }
            }
        }
    }
    Ok(state.history)
}

/// Constructs a solution with the model choosing every action among the
/// feasible ones. Sampling returns the best of `k` rollouts, the first of
/// which is the greedy one.
pub fn solve<T: Float>(inst: &ProblemInstance, model: &Model<T>, strategy: &DecodeStrategy) -> Result<Solution> {
    strategy.validate()?;
    let start = Instant::now();
    let (ctx, _) = start_context(model, inst, strategy.use_cache)?;
    let fork = |c: &Context<T>| match c {
        Context::Cached(k) => Context::Cached(k.clone()),
        Context::Full(s) => Context::Full(s.clone()),
    };
    let sense = inst.kind.sense();
    let greedy = rollout::<T, ChaCha8Rng>(model, inst, fork(&ctx), None)?;
    let mut best_obj = objective(inst, &crate::problems::replay(inst, &greedy)?)?;
    let mut best = greedy;
    if strategy.mode == DecodeMode::Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(record_seed(strategy.seed, inst.kind, inst.seed, 0));
        for _ in 1..strategy.samples {
            let acts = rollout(model, inst, fork(&ctx), Some((&mut rng, strategy.temperature)))?;
            let obj = objective(inst, &crate::problems::replay(inst, &acts)?)?;
            if sense.better(obj, best_obj) {
                best_obj = obj;
                best = acts;
            }
        }
    }
    let name = match strategy.mode {
        DecodeMode::Greedy => "model-greedy".to_string(),
        DecodeMode::Sample => format!("model-sample{}", strategy.samples),
    };
    Ok(Solution { actions: best, objective: best_obj, solver_name: name, elapsed: start.elapsed().as_secs_f64() })
}

/// Checks vocabulary compatibility before decoding with a checkpoint.
pub fn solve_with_checkpoint<T: Float>(
    inst: &ProblemInstance,
    ck: &ModelCheckpoint<T>,
    strategy: &DecodeStrategy,
) -> Result<Solution> {
    ck.meta.vocab.check_compatible()?;
    solve(inst, &ck.model, strategy)
}

/// Solves all instances, in parallel over `workers` threads; output order
/// follows input order.
pub fn solve_all<T: Float>(
    instances: &[ProblemInstance],
    model: &Model<T>,
    strategy: &DecodeStrategy,
    workers: usize,
) -> Result<Vec<Solution>> {
    if workers <= 1 {
        return instances.iter().map(|i| solve(i, model, strategy)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| instances.par_iter().map(|i| solve(i, model, strategy)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_obj: f64,
    /// Percent distance from the expert, positive when worse.
    pub gap: f64,
    /// Percent of the way from random (0) to expert (100).
    pub score: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn compute_metrics(objs: &[f64], expert_objs: &[f64], random_objs: &[f64], sense: Sense) -> Result<Metrics> {
    if objs.is_empty() || objs.len() != expert_objs.len() || objs.len() != random_objs.len() {
        return Err(Error::Shape(format!(
            "metric inputs of lengths {}, {}, {}",
            objs.len(),
            expert_objs.len(),
            random_objs.len()
        )));
    }
    let (o, e, r) = (mean(objs), mean(expert_objs), mean(random_objs));
    if (e - r).abs() < 1e-12 {
        return Err(Error::DegenerateBaseline(e));
    }
    let gap = match sense {
        Sense::Minimize => (o - e) / e * 100.0,
        Sense::Maximize => (e - o) / e * 100.0,
    };
    let score = (o - r).abs() / (e - r).abs() * 100.0;
    Ok(Metrics { mean_obj: o, gap, score })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: String,
    pub kind: String,
    pub n: usize,
    pub count: usize,
    pub mean_obj: f64,
    pub gap: f64,
    pub score: f64,
    pub time: f64,
}

impl SolveReport {
    pub fn new(method: &str, inst: &ProblemInstance, count: usize, m: Metrics, time: f64) -> Self {
        SolveReport {
            method: method.into(),
            kind: inst.kind.to_string(),
            n: inst.n,
            count,
            mean_obj: m.mean_obj,
            gap: m.gap,
            score: m.score,
            time,
        }
    }
}

/// Aligned plain-text table, one row per report.
pub fn format_table(rows: &[SolveReport]) -> String {
    let mut out = format!(
        "{:<8} {:>4} {:<18} {:>10} {:>9} {:>9} {:>10}\n",
        "Problem", "N", "Method", "Obj", "Gap", "Score", "Time"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>4} {:<18} {:>10.4} {:>8.2}% {:>8.2}% {:>9.2}s\n",
            r.kind, r.n, r.method, r.mean_obj, r.gap, r.score, r.time
        ));
    }
    out
}

pub fn format_csv(rows: &[SolveReport]) -> String {
    let mut out = String::from("Problem,N,Method,Obj,Gap,Score,Time\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.kind, r.n, r.method, r.mean_obj, r.gap, r.score, r.time
        ));
    }
    out
}
