//! Two-stage training: next-state prediction, then action generation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::experts::{random_rollout, solve_expert};
use crate::model::{save_checkpoint, CheckpointMeta, Float, LossStats, Model, ModelCheckpoint, ModelConfig, Targets};
use crate::problems::{ProblemInstance, ProblemKind};
use crate::solver::{compute_metrics, solve_all, DecodeStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Predict next-state tokens.
    Dynamics,
    /// Predict action tokens, starting from a dynamics checkpoint.
    Policy,
    /// Predict action tokens from random initialization.
    Direct,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dynamics => "dynamics",
            Stage::Policy => "policy",
            Stage::Direct => "direct",
        }
    }

    pub fn targets(self) -> Targets {
        match self {
            Stage::Dynamics => Targets::Stage1,
            Stage::Policy | Stage::Direct => Targets::Stage2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayStyle {
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Records per forward/backward pass; micro-batches of one step run in
    /// parallel and their gradients are summed in a fixed order.
    pub micro_batch: usize,
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub decay_ratio: f64,
    pub decay_factor: f64,
    pub decay_style: DecayStyle,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub early_stop_evals: usize,
    pub eval_every_epochs: usize,
    pub min_improvement: f64,
    /// Upper bound on epochs; the schedule spans this many epochs.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Dynamics,
            batches_per_epoch: 400,
            batch_size: 128,
            micro_batch: 128,
            max_lr: 2.5e-4,
            warmup_ratio: 0.05,
            decay_ratio: 0.75,
            decay_factor: 10.0,
            decay_style: DecayStyle::Cosine,
            weight_decay: 1e-4,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            early_stop_evals: 6,
            eval_every_epochs: 2,
            min_improvement: 1e-4,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.warmup_ratio) || !unit(self.decay_ratio) || self.warmup_ratio + self.decay_ratio > 1.0 {
            return bad("warmup_ratio and decay_ratio must lie in [0, 1] and sum to at most 1");
        }
        if !unit(self.betas.0) || !unit(self.betas.1) {
            return bad("betas must lie in [0, 1]");
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 || self.micro_batch == 0 || self.max_epochs == 0 {
            return bad("batch sizes and epoch counts must be positive");
        }
        if self.eval_every_epochs == 0 || self.early_stop_evals == 0 {
            return bad("evaluation cadence must be positive");
        }
        if !(self.max_lr > 0.0) || !(self.decay_factor >= 1.0) || !(self.weight_decay >= 0.0) {
            return bad("max_lr must be positive, decay_factor at least 1, weight_decay non-negative");
        }
        if !(self.grad_clip > 0.0) || !(self.adam_eps > 0.0) {
            return bad("grad_clip and adam_eps must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.max_epochs * self.batches_per_epoch
    }
}

/// Learning rate for `step` of `total`: linear warmup from zero, decay to
/// `max_lr / decay_factor`, then constant.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    lr_at_position(step as f64, total.max(1) as f64, cfg)
}

/// [`lr_at`] over a real-valued step.
pub fn lr_at_position(s: f64, t: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_ratio * t;
    let decay = cfg.decay_ratio * t;
    let lo = cfg.max_lr / cfg.decay_factor;
    if s < warm {
        cfg.max_lr * s / warm
    } else if s < warm + decay {
        let u = (s - warm) / decay;
        let w = match cfg.decay_style {
            DecayStyle::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * u).cos()),
            DecayStyle::Linear => 1.0 - u,
        };
        lo + (cfg.max_lr - lo) * w
    } else {
        lo
    }
}

/// Decoupled weight-decay Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    decay: Vec<bool>,
}

impl<T: Float> AdamW<T> {
    pub fn new(decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        AdamW { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0, decay: decay_mask }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2) = (T::f(b1), T::f(b2));
        let (ob1, ob2) = (T::f(1.0 - b1), T::f(1.0 - b2));
        let step = T::f(lr / c1);
        let inv_c2 = T::f(1.0 / c2);
        let eps = T::f(cfg.adam_eps);
        let shrink = T::f(1.0 - lr * cfg.weight_decay);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = tb1 * self.m[i] + ob1 * g;
            self.v[i] = tb2 * self.v[i] + ob2 * g * g;
            if self.decay[i] {
                params[i] *= shrink;
            }
            params[i] -= step * self.m[i] / ((self.v[i] * inv_c2).sqrt() + eps);
        }
    }
}

/// Held-out instances of one kind with their expert and random baselines.
#[derive(Clone, Debug)]
pub struct ValidationGroup {
    pub kind: ProblemKind,
    pub instances: Vec<ProblemInstance>,
    pub expert_objs: Vec<f64>,
    pub random_objs: Vec<f64>,
}

impl ValidationGroup {
    pub fn build(instances: Vec<ProblemInstance>, exact_limit: usize, random_seed: u64) -> Result<Self> {
        let kind = instances.first().ok_or_else(|| Error::Config("empty validation group".into()))?.kind;
        if instances.iter().any(|i| i.kind != kind) {
            return Err(Error::Config("validation group mixes problem kinds".into()));
        }
        let expert_objs = instances.iter().map(|i| Ok(solve_expert(i, exact_limit)?.objective)).collect::<Result<_>>()?;
        let random_objs = instances.iter().map(|i| Ok(random_rollout(i, random_seed)?.objective)).collect::<Result<_>>()?;
        Ok(ValidationGroup { kind, instances, expert_objs, random_objs })
    }

    /// Greedy-decode score of `model` on this group.
    pub fn score<T: Float>(&self, model: &Model<T>, workers: usize) -> Result<f64> {
        let sols = solve_all(&self.instances, model, &DecodeStrategy::greedy(), workers)?;
        let objs: Vec<f64> = sols.iter().map(|s| s.objective).collect();
        Ok(compute_metrics(&objs, &self.expert_objs, &self.random_objs, self.kind.sense())?.score)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Validation {
    /// Records scored by next-state token accuracy.
    pub records: Vec<TrajectoryRecord>,
    /// Instance sets scored by greedy decoding.
    pub groups: Vec<ValidationGroup>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Token accuracy (dynamics) or mean greedy score over groups (policy).
    pub metric: f64,
    pub loss: Option<f64>,
}

pub fn evaluate<T: Float>(model: &Model<T>, stage: Stage, val: &Validation, workers: usize) -> Result<EvalResult> {
    match stage {
        Stage::Dynamics => {
            if val.records.is_empty() {
                return Err(Error::Config("dynamics validation needs records".into()));
            }
            let mut stats = LossStats::default();
            for chunk in val.records.chunks(64) {
                let refs: Vec<&TrajectoryRecord> = chunk.iter().collect();
                stats.add(model.record_loss(&refs, Targets::Stage1, None)?);
            }
            Ok(EvalResult { metric: stats.accuracy(), loss: Some(stats.mean()) })
        }
        Stage::Policy | Stage::Direct => {
            if val.groups.is_empty() {
                return Err(Error::Config("policy validation needs instance groups".into()));
            }
            let mut total = 0.0;
            for g in &val.groups {
                total += g.score(model, workers)?;
            }
            let loss = if val.records.is_empty() {
                None
            } else {
                let refs: Vec<&TrajectoryRecord> = val.records.iter().collect();
                Some(model.record_loss(&refs, Targets::Stage2, None)?.mean())
            };
            Ok(EvalResult { metric: total / val.groups.len() as f64, loss })
        }
    }
}

/// Training records grouped per kind with optional mixing weights.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub pools: Vec<Vec<TrajectoryRecord>>,
    pub weights: Option<Vec<f64>>,
}

impl TrainData {
    /// Splits records into per-kind pools in first-seen order.
    pub fn from_records(records: Vec<TrajectoryRecord>) -> Self {
        let mut kinds: Vec<ProblemKind> = Vec::new();
        let mut pools: Vec<Vec<TrajectoryRecord>> = Vec::new();
        for r in records {
            match kinds.iter().position(|&k| k == r.kind) {
                Some(i) => pools[i].push(r),
                None => {
                    kinds.push(r.kind);
                    pools.push(vec![r]);
                }
            }
        }
        TrainData { pools, weights: None }
    }

    pub fn kinds(&self) -> Vec<ProblemKind> {
        self.pools.iter().filter_map(|p| p.first().map(|r| r.kind)).collect()
    }

    fn cumulative(&self) -> Result<Vec<f64>> {
        if self.pools.is_empty() || self.pools.iter().any(|p| p.is_empty()) {
            return Err(Error::Config("training data has an empty pool".into()));
        }
        let w = self.weights.clone().unwrap_or_else(|| self.pools.iter().map(|p| p.len() as f64).collect());
        if w.len() != self.pools.len() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid mixing weights {w:?}")));
        }
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        Ok(w.iter()
            .map(|x| {
                acc += x / total;
                acc
            })
            .collect())
    }

    /// Records of batch `step`; depends only on `(seed, step)`, so a resumed
    /// run draws the same batches.
    fn batch(&self, cum: &[f64], seed: u64, step: usize, size: usize) -> Vec<&TrajectoryRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64 + 1);
        (0..size)
            .map(|_| {
                let u: f64 = rng.gen();
                let k = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
                let pool = &self.pools[k];
                &pool[rng.gen_range(0..pool.len())]
            })
            .collect()
    }
}

fn batch_digest(batch: &[&TrajectoryRecord]) -> String {
    let mut h = Sha256::new();
    for r in batch {
        for id in &r.ids {
            h.update(id.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the config snapshot, metric log and checkpoints.
    pub run_dir: Option<PathBuf>,
    /// Continue from `run_dir/last` when it exists.
    pub resume: bool,
    pub workers: usize,
    pub verbose: bool,
    /// End this invocation once the global step reaches this value.
    pub stop_at_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Float> {
    /// Parameters with the best validation metric.
    pub best: ModelCheckpoint<T>,
    pub last: ModelCheckpoint<T>,
    pub log: Vec<LogRow>,
    pub evals: Vec<(usize, EvalResult)>,
    pub skipped_batches: usize,
    pub steps: usize,
}

/// Progress that must survive a restart.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunState {
    step: usize,
    adam_t: u64,
    best_metric: Option<f64>,
    best_epoch: usize,
    stale_evals: usize,
    skipped: usize,
    evals: Vec<(usize, EvalResult)>,
    stopped: bool,
}

fn write_vec<T: Float>(path: &Path, v: &[T]) -> Result<()> {
    let mut blob = Vec::with_capacity(v.len() * T::BYTES);
    for &x in v {
        x.write_le(&mut blob);
    }
    fs::write(path, blob)?;
    Ok(())
}

fn read_vec<T: Float>(path: &Path, len: usize) -> Result<Vec<T>> {
    let blob = fs::read(path).map_err(|e| Error::File(format!("{}: {e}", path.display())))?;
    if blob.len() != len * T::BYTES {
        return Err(Error::Shape(format!("{} holds {} bytes, expected {}", path.display(), blob.len(), len * T::BYTES)));
    }
    Ok(blob.chunks_exact(T::BYTES).map(T::read_le).collect())
}

fn append_log(dir: &Path, row: &LogRow) -> Result<()> {
    let path = dir.join("metrics.csv");
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "step,lr,loss,val,val_loss")?;
    }
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    writeln!(f, "{},{:.6e},{:.6},{},{}", row.step, row.lr, row.loss, opt(row.val), opt(row.val_loss))?;
    Ok(())
}

/// Mean loss and parameter gradient over one batch.
fn batch_grad<T: Float>(
    model: &Model<T>,
    batch: &[&TrajectoryRecord],
    targets: Targets,
    micro: usize,
    grad: &mut [T],
) -> Result<Option<LossStats>> {
    let count: usize = batch.iter().map(|r| targets.positions(r).len()).sum();
    if count == 0 {
        return Ok(None);
    }
    let scale = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g = T::zero());
    let chunks: Vec<&[&TrajectoryRecord]> = batch.chunks(micro).collect();
    let mut stats = LossStats::default();
    if chunks.len() == 1 {
        stats = model.record_loss(batch, targets, Some((grad, scale)))?;
    } else {
        let parts: Vec<(LossStats, Vec<T>)> = chunks
            .par_iter()
            .map(|c| {
                let mut g = vec![T::zero(); grad.len()];
                model.record_loss(c, targets, Some((&mut g, scale))).map(|s| (s, g))
            })
            .collect::<Result<_>>()?;
        for (s, g) in parts {
            stats.add(s);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
        }
    }
    Ok(Some(stats))
}

fn clip<T: Float>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::f(max_norm / norm);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Trains `init` (or a fresh model of `model_config` for dynamics and
/// direct stages) and returns the best and last checkpoints. The policy
/// stage continues a trained checkpoint: a dynamics run, or a policy run
/// being fine-tuned on new data.
pub fn train<T: Float>(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    data: &TrainData,
    val: &Validation,
    init: Option<ModelCheckpoint<T>>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let cum = data.cumulative()?;
    let init = match (cfg.stage, init) {
        (Stage::Policy, None) => return Err(Error::Config("policy stage needs a trained checkpoint".into())),
        (Stage::Policy, Some(ck)) if ck.meta.stage == "init" => {
            return Err(Error::Config(format!("policy stage initialized from a '{}' checkpoint", ck.meta.stage)))
        }
        (Stage::Direct, Some(_)) => return Err(Error::Config("direct stage starts from random weights".into())),
        (_, Some(ck)) => ck,
        (_, None) => ModelCheckpoint {
            model: Model::init(model_config.clone(), cfg.seed)?,
            meta: CheckpointMeta::fresh(model_config.clone(), T::DTYPE, cfg.seed),
        },
    };
    let targets = cfg.stage.targets();
    let total = cfg.total_steps();
    let mut model = init.model;
    let mut meta = init.meta;
    meta.stage = cfg.stage.as_str().into();
    meta.kinds = data.kinds().iter().map(|k| k.to_string()).collect();
    if !meta.seeds.contains(&cfg.seed) {
        meta.seeds.push(cfg.seed);
    }
    let mut opt = AdamW::new(model.decay_mask());
    let mut state =
        RunState { step: 0, adam_t: 0, best_metric: None, best_epoch: 0, stale_evals: 0, skipped: 0, evals: Vec::new(), stopped: false };
    let mut best_params = model.params.clone();

    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir)?;
        let snapshot = serde_json::json!({ "train": cfg, "model": model.config });
        let last = dir.join("last");
        if opts.resume && last.join("state.json").exists() {
            let old: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
            if old != snapshot {
                return Err(Error::Config("run directory holds a different configuration".into()));
            }
            state = serde_json::from_str(&fs::read_to_string(last.join("state.json"))?)?;
            let n = model.params.len();
            model.params = read_vec(&last.join("params.bin"), n)?;
            opt.m = read_vec(&last.join("adam_m.bin"), n)?;
            opt.v = read_vec(&last.join("adam_v.bin"), n)?;
            opt.t = state.adam_t;
            best_params = read_vec(&dir.join("best").join("params.bin"), n)?;
        } else {
            if dir.join("metrics.csv").exists() {
                fs::remove_file(dir.join("metrics.csv"))?;
            }
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
        }
    }

    let mut log = Vec::new();
    let mut grad = vec![T::zero(); model.params.len()];
    let micro = cfg.micro_batch.min(cfg.batch_size);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut running = (0.0, 0usize);

    while !state.stopped && state.step < total && opts.stop_at_step.is_none_or(|s| state.step < s) {
        let step = state.step;
        let lr = lr_at(step + 1, total, cfg);
        let batch = data.batch(&cum, cfg.seed, step, cfg.batch_size);
        let stats = pool.install(|| batch_grad(&model, &batch, targets, micro, &mut grad))?;
        state.step += 1;
        let mut row = LogRow { step: state.step, lr, loss: f64::NAN, val: None, val_loss: None };
        match stats {
            None => state.skipped += 1,
            Some(s) => {
                let loss = s.mean();
                let norm = clip(&mut grad, cfg.grad_clip);
                if !loss.is_finite() || !norm.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss {loss} at step {step}, lr {lr:.3e}, batch {}",
                        batch_digest(&batch)
                    )));
                }
                opt.step(&mut model.params, &grad, lr, cfg);
                state.adam_t = opt.t;
                row.loss = loss;
                running.0 += loss;
                running.1 += 1;
            }
        }

        let epoch_end = state.step.is_multiple_of(cfg.batches_per_epoch);
        let epoch = state.step / cfg.batches_per_epoch;
        if epoch_end && (epoch.is_multiple_of(cfg.eval_every_epochs) || state.step == total) {
            let ev = pool.install(|| evaluate(&model, cfg.stage, val, opts.workers.max(1)))?;
            row.val = Some(ev.metric);
            row.val_loss = ev.loss;
            state.evals.push((state.step, ev));
            let improved = state.best_metric.is_none_or(|b| ev.metric >= b + cfg.min_improvement);
            if improved {
                state.best_metric = Some(ev.metric);
                state.best_epoch = epoch;
                state.stale_evals = 0;
                best_params.copy_from_slice(&model.params);
            } else {
                state.stale_evals += 1;
                if state.stale_evals >= cfg.early_stop_evals {
                    state.stopped = true;
                }
            }
            if opts.verbose {
                eprintln!(
                    "epoch {epoch} step {} lr {lr:.2e} loss {:.4} val {:.4}{}",
                    state.step,
                    running.0 / running.1.max(1) as f64,
                    ev.metric,
                    if improved { " *" } else { "" }
                );
            }
            running = (0.0, 0);
        }
        if let Some(dir) = &opts.run_dir {
            append_log(dir, &row)?;
            if epoch_end {
                let vals: Vec<f64> = state.evals.iter().map(|(_, e)| e.metric).collect();
                let mut m = meta.clone();
                m.epoch = epoch;
                m.step = state.step;
                m.validation = vals;
                if row.val.is_some() && state.best_epoch == epoch {
                    save_checkpoint(&dir.join("best"), &ModelCheckpoint { model: model.clone(), meta: m.clone() })?;
                }
                let last = dir.join("last");
                save_checkpoint(&last, &ModelCheckpoint { model: model.clone(), meta: m })?;
                write_vec(&last.join("adam_m.bin"), &opt.m)?;
                write_vec(&last.join("adam_v.bin"), &opt.v)?;
                fs::write(last.join("state.json"), serde_json::to_string(&state)?)?;
            }
        }
        log.push(row);
    }

    if state.evals.is_empty() {
        // The step budget ended mid-epoch without any evaluation.
        let ev = pool.install(|| evaluate(&model, cfg.stage, val, opts.workers.max(1)))?;
        state.evals.push((state.step, ev));
        best_params.copy_from_slice(&model.params);
        state.best_epoch = state.step / cfg.batches_per_epoch;
    }
    meta.step = state.step;
    meta.epoch = state.step / cfg.batches_per_epoch;
    meta.validation = state.evals.iter().map(|(_, e)| e.metric).collect();
    let last = ModelCheckpoint { model: model.clone(), meta: meta.clone() };
    let mut best_meta = meta;
    best_meta.epoch = state.best_epoch;
    let best = ModelCheckpoint { model: Model::from_params(model.config.clone(), best_params)?, meta: best_meta };
    Ok(TrainOutcome { best, last, log, evals: state.evals, skipped_batches: state.skipped, steps: state.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_tests::sample_record;
    use std::fs;

    #[test]
    fn schedule_anchor_points() {
        let cfg = TrainConfig::default();
        let total = 10_000;
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert!((lr_at(500, total, &cfg) - 2.5e-4).abs() < 1e-15);
        assert!((lr_at(8000, total, &cfg) - 2.5e-5).abs() < 1e-15);
        assert!((lr_at(total, total, &cfg) - 2.5e-5).abs() < 1e-15);
        let mid = lr_at(4250, total, &cfg);
        assert!((mid - (2.5e-5 + 2.25e-4 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { warmup_ratio: 1.2, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_ratio: 0.5, decay_ratio: 0.6, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::<f64>::new(vec![true, true]);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.1, &cfg);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        let wd = TrainConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::<f64>::new(vec![true, false]);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[0.0, 0.0], 0.1, &wd);
        assert_eq!(p, vec![0.95, 1.0]);
    }

    fn tiny_data() -> (TrainData, Validation) {
        let recs: Vec<_> = (0..24).map(|s| sample_record(ProblemKind::Tsp, 5, s, 64)).collect();
        let val = Validation { records: recs[..4].to_vec(), groups: Vec::new() };
        (TrainData::from_records(recs), val)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batches_per_epoch: 5,
            batch_size: 8,
            micro_batch: 4,
            max_epochs: 4,
            eval_every_epochs: 1,
            max_lr: 3e-3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_runs_repeat_and_loss_falls() {
        let (data, val) = tiny_data();
        let mc = ModelConfig::tiny();
        let a = train::<f64>(&tiny_cfg(), &mc, &data, &val, None, &TrainOptions::default()).unwrap();
        let b = train::<f64>(&tiny_cfg(), &mc, &data, &val, None, &TrainOptions { workers: 2, ..Default::default() })
            .unwrap();
        let la: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.log.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert!(la.last().unwrap() < &la[0]);
        assert_eq!(a.evals.len(), 4);
    }

    #[test]
    fn stage_preconditions() {
        let (data, val) = tiny_data();
        let mc = ModelConfig::tiny();
        let cfg = TrainConfig { stage: Stage::Policy, ..tiny_cfg() };
        assert!(matches!(train::<f32>(&cfg, &mc, &data, &val, None, &Default::default()), Err(Error::Config(_))));
        let fresh = ModelCheckpoint {
            model: Model::<f32>::init(mc.clone(), 1).unwrap(),
            meta: CheckpointMeta::fresh(mc.clone(), "f32", 1),
        };
        assert!(train(&cfg, &mc, &data, &val, Some(fresh), &Default::default()).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (data, val) = tiny_data();
        let mc = ModelConfig::tiny();
        let full = train::<f64>(&tiny_cfg(), &mc, &data, &val, None, &Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
            resume: true,
            stop_at_step: Some(10),
            ..Default::default()
        };
        let first = train::<f64>(&tiny_cfg(), &mc, &data, &val, None, &opts).unwrap();
        assert_eq!(first.steps, 10);
        let st: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("last/state.json")).unwrap()).unwrap();
        assert_eq!(st["step"], 10);
        let rest = TrainOptions { stop_at_step: None, ..opts };
        let again = train::<f64>(&tiny_cfg(), &mc, &data, &val, None, &rest).unwrap();
        assert_eq!(again.steps, 20);
        assert_eq!(again.last.model.params, full.last.model.params);
        assert_eq!(again.best.model.params, full.best.model.params);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 21);
        assert!(dir.path().join("best/params.bin").exists());
        let changed = TrainConfig { max_lr: 1e-3, ..tiny_cfg() };
        assert!(matches!(train::<f64>(&changed, &mc, &data, &val, None, &rest), Err(Error::Config(_))));
    }
}
