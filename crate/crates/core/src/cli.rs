//! Commands behind the `colm` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split, RUN_DIR_ENV};
use crate::dataset::{instance_records, max_steps, write_shard, Manifest, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::experts::{random_rollout, solve_expert, solve_heuristic, trace_solution, SolutionRecord};
use crate::model::{load_checkpoint, save_checkpoint, Float, ModelCheckpoint};
use crate::problems::{generate_instance, ProblemInstance, ProblemKind, Sense};
use crate::solver::{compute_metrics, format_csv, format_table, solve_all, DecodeMode, DecodeStrategy, Metrics, SolveReport};
use crate::tokenizer::{decode_token, encode_prefix, encode_step, TokenRole};
use crate::training::{train, Stage, TrainData, TrainOptions, Validation, ValidationGroup};

#[derive(Clone, Debug, Default)]
pub struct Opts {
    pub workers: usize,
    pub force: bool,
    pub resume: bool,
    pub verbose: bool,
}

impl Opts {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::File(format!("{} exists; pass --force to overwrite", path.display())));
        }
        Ok(())
    }
}

/// Reads a config file, applies `section.key=value` overrides and the
/// run-directory override (argument first, then environment).
pub fn load_config(path: &Path, sets: &[String], run_dir: Option<PathBuf>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::File(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override '{s}' lacks '='")))?;
        let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut at = &mut table;
        for p in &parts[..parts.len() - 1] {
            at = at
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
        }
        at.insert(parts[parts.len() - 1].to_string(), value);
    }
    if let Some(dir) = run_dir.or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from)) {
        table.insert("run_dir".into(), toml::Value::String(dir.to_string_lossy().into_owned()));
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_instances(path: &Path) -> Result<Vec<ProblemInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::File(format!("{}: {e}", path.display())))?;
    let out: Vec<ProblemInstance> =
        text.lines().filter(|l| !l.trim().is_empty()).map(ProblemInstance::from_json_line).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::File(format!("{}: no instances", path.display())));
    }
    Ok(out)
}

fn read_solutions(path: &Path) -> Result<Vec<SolutionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::File(format!("{}: {e}", path.display())))?;
    let out: Vec<SolutionRecord> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    if out.is_empty() {
        return Err(Error::File(format!("{}: no solutions", path.display())));
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn split_count(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.problems.train_count,
        Split::Val => cfg.problems.val_count,
        Split::Test => cfg.problems.test_count,
    }
}

/// Writes one JSONL instance file per kind and split.
pub fn cmd_gen_data(cfg: &RunConfig, opts: &Opts) -> Result<Vec<PathBuf>> {
    let kinds = cfg.kinds()?;
    let pool = opts.pool()?;
    let mut written = Vec::new();
    for &kind in &kinds {
        for split in Split::ALL {
            let path = cfg.instance_path(kind, split);
            opts.guard(&path)?;
            let count = split_count(cfg, split);
            let lines: Vec<String> = pool.install(|| {
                (0..count)
                    .into_par_iter()
                    .map(|i| Ok(generate_instance(kind, cfg.problems.n, split.instance_seed(cfg.problems.seed, i))?.to_json_line()))
                    .collect::<Result<_>>()
            })?;
            write_lines(&path, lines)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub kind: ProblemKind,
    pub split: String,
    pub count: usize,
    pub mean_objective: f64,
    pub solvers: BTreeMap<String, usize>,
    /// Mean heuristic gap to the exact solution in percent, when both ran.
    pub heuristic_gap: Option<f64>,
    pub time: f64,
}

fn oriented_gap(obj: f64, reference: f64, sense: Sense) -> f64 {
    match sense {
        Sense::Minimize => (obj - reference) / reference * 100.0,
        Sense::Maximize => (reference - obj) / reference * 100.0,
    }
}

/// Solves every instance file with the expert and writes solutions plus a
/// summary.
pub fn cmd_solve_expert(cfg: &RunConfig, opts: &Opts) -> Result<Vec<SolveSummary>> {
    let pool = opts.pool()?;
    let mut summaries = Vec::new();
    let limit = cfg.experts.exact_limit;
    for kind in cfg.kinds()? {
        for split in Split::ALL {
            let out = cfg.solution_path(kind, split);
            opts.guard(&out)?;
            let instances = read_instances(&cfg.instance_path(kind, split))?;
            let start = Instant::now();
            let solved: Vec<(SolutionRecord, Option<f64>)> = pool.install(|| {
                instances
                    .par_iter()
                    .map(|inst| {
                        let sol = solve_expert(inst, limit)?;
                        let exact = sol.solver_name == "exact";
                        let gap = if cfg.experts.compare_heuristic && exact && kind != ProblemKind::Knapsack {
                            Some(oriented_gap(solve_heuristic(inst)?.objective, sol.objective, kind.sense()))
                        } else {
                            None
                        };
                        Ok((SolutionRecord::new(inst, &sol), gap))
                    })
                    .collect::<Result<_>>()
            })?;
            let time = start.elapsed().as_secs_f64();
            let mut solvers = BTreeMap::new();
            for (r, _) in &solved {
                *solvers.entry(r.solver.clone()).or_insert(0) += 1;
            }
            let gaps: Vec<f64> = solved.iter().filter_map(|(_, g)| *g).collect();
            summaries.push(SolveSummary {
                kind,
                split: split.as_str().into(),
                count: solved.len(),
                mean_objective: solved.iter().map(|(r, _)| r.objective).sum::<f64>() / solved.len() as f64,
                solvers,
                heuristic_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
                time,
            });
            write_lines(&out, solved.iter().map(|(r, _)| serde_json::to_string(r).unwrap()))?;
        }
    }
    let path = cfg.run_dir.join("solutions").join("summary.json");
    fs::write(path, serde_json::to_string_pretty(&summaries)?)?;
    Ok(summaries)
}

fn load_pairs(cfg: &RunConfig, kind: ProblemKind, split: Split) -> Result<Vec<(ProblemInstance, SolutionRecord)>> {
    let instances = read_instances(&cfg.instance_path(kind, split))?;
    let sols = read_solutions(&cfg.solution_path(kind, split))?;
    if sols.len() != instances.len() || instances.iter().zip(&sols).any(|(i, s)| i.seed != s.seed || i.kind != s.kind) {
        return Err(Error::File(format!("solutions for {kind} {} do not match the instances", split.as_str())));
    }
    Ok(instances.into_iter().zip(sols).collect())
}

/// Builds train and validation trajectory shards with their manifests.
pub fn cmd_build_traj(cfg: &RunConfig, opts: &Opts) -> Result<Vec<Manifest>> {
    let pool = opts.pool()?;
    let kinds = cfg.kinds()?;
    let l = cfg.dataset.l;
    for &kind in &kinds {
        max_steps(kind, cfg.problems.n, l)?;
    }
    let mut manifests = Vec::new();
    for split in [Split::Train, Split::Val] {
        let dir = cfg.traj_dir(split);
        opts.guard(&dir.join("manifest.json"))?;
        fs::create_dir_all(&dir)?;
        let mut records: Vec<TrajectoryRecord> = Vec::new();
        let mut counts = BTreeMap::new();
        for &kind in &kinds {
            let pairs = load_pairs(cfg, kind, split)?;
            let recs: Vec<Vec<TrajectoryRecord>> = pool.install(|| {
                pairs
                    .par_iter()
                    .map(|(inst, s)| instance_records(inst, &s.to_solution(), l, cfg.dataset.seed, cfg.dataset.records_per_instance))
                    .collect::<Result<_>>()
            })?;
            let before = records.len();
            records.extend(recs.into_iter().flatten());
            counts.insert(kind.to_string(), records.len() - before);
        }
        let mut shards = Vec::new();
        for (i, chunk) in records.chunks(cfg.dataset.shard_size).enumerate() {
            let name = format!("shard_{i:05}.bin");
            write_shard(&dir.join(&name), chunk)?;
            shards.push(name);
        }
        let m = Manifest { l, vocab: Default::default(), counts, seed: cfg.dataset.seed, shards };
        m.save(&dir)?;
        manifests.push(m);
    }
    Ok(manifests)
}

fn validation(cfg: &RunConfig, opts: &Opts, stage: Stage) -> Result<Validation> {
    let dir = cfg.traj_dir(Split::Val);
    let records = Manifest::load(&dir)?.read_all(&dir)?;
    let mut groups = Vec::new();
    if stage != Stage::Dynamics {
        let pool = opts.pool()?;
        for kind in cfg.kinds()? {
            let pairs = load_pairs(cfg, kind, Split::Val)?;
            let random_objs: Vec<f64> = pool.install(|| {
                pairs.par_iter().map(|(i, _)| Ok(random_rollout(i, cfg.experts.random_seed)?.objective)).collect::<Result<_>>()
            })?;
            groups.push(ValidationGroup {
                kind,
                expert_objs: pairs.iter().map(|(_, s)| s.objective).collect(),
                instances: pairs.into_iter().map(|(i, _)| i).collect(),
                random_objs,
            });
        }
    }
    Ok(Validation { records, groups })
}

fn run_train<T: Float>(cfg: &RunConfig, opts: &Opts, data: &TrainData, val: &Validation) -> Result<PathBuf> {
    let stage = cfg.training.stage;
    let init_dir = cfg.model.init.clone().or_else(|| {
        (stage == Stage::Policy).then(|| cfg.run_dir.join("train").join(Stage::Dynamics.as_str()).join("best"))
    });
    let init = match init_dir {
        Some(d) => Some(load_checkpoint::<T>(&d)?),
        None => None,
    };
    let dir = cfg.train_dir();
    if !opts.resume {
        opts.guard(&dir.join("config.json"))?;
    }
    let topts = TrainOptions { run_dir: Some(dir.clone()), resume: opts.resume, workers: opts.workers, verbose: opts.verbose, stop_at_step: None };
    let out = train::<T>(&cfg.training, &cfg.model_config()?, data, val, init, &topts)?;
    save_checkpoint(&dir.join("best"), &out.best)?;
    save_checkpoint(&dir.join("last"), &out.last)?;
    Ok(dir)
}

/// Trains the configured stage; returns the run directory.
pub fn cmd_train(cfg: &RunConfig, opts: &Opts) -> Result<PathBuf> {
    cfg.check_paths()?;
    let dir = cfg.traj_dir(Split::Train);
    let records = Manifest::load(&dir)?.read_all(&dir)?;
    if records.is_empty() {
        return Err(Error::File(format!("{}: no training records", dir.display())));
    }
    let mut data = TrainData::from_records(records);
    data.weights = cfg.weights(&data.kinds())?;
    let val = validation(cfg, opts, cfg.training.stage)?;
    match cfg.model.dtype.as_str() {
        "f64" => run_train::<f64>(cfg, opts, &data, &val),
        _ => run_train::<f32>(cfg, opts, &data, &val),
    }
}

fn method_name(s: &DecodeStrategy) -> String {
    match s.mode {
        DecodeMode::Greedy => "Model greedy".into(),
        DecodeMode::Sample => format!("Model sample{}", s.samples),
    }
}

fn eval_with<T: Float>(cfg: &RunConfig, opts: &Opts, ck: &ModelCheckpoint<T>) -> Result<Vec<SolveReport>> {
    let mut strategies = Vec::new();
    if cfg.eval.strategy.mode == DecodeMode::Sample && cfg.eval.include_greedy {
        strategies.push(DecodeStrategy { mode: DecodeMode::Greedy, ..cfg.eval.strategy.clone() });
    }
    strategies.push(cfg.eval.strategy.clone());
    let pool = opts.pool()?;
    let summaries: Vec<SolveSummary> = fs::read_to_string(cfg.run_dir.join("solutions").join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for kind in cfg.kinds()? {
        let mut instances = read_instances(&cfg.instance_path(kind, Split::Test))?;
        if let Some(c) = cfg.eval.count {
            instances.truncate(c);
        }
        let sense = kind.sense();
        let (expert, expert_time) = match read_solutions(&cfg.solution_path(kind, Split::Test)) {
            Ok(s) if s.len() >= instances.len() => {
                let t = summaries.iter().find(|x| x.kind == kind && x.split == "test").map_or(0.0, |x| x.time);
                (s[..instances.len()].iter().map(|r| r.objective).collect::<Vec<_>>(), t)
            }
            _ => {
                let start = Instant::now();
                let objs = pool.install(|| {
                    instances
                        .par_iter()
                        .map(|i| Ok(solve_expert(i, cfg.experts.exact_limit)?.objective))
                        .collect::<Result<Vec<_>>>()
                })?;
                (objs, start.elapsed().as_secs_f64())
            }
        };
        let start = Instant::now();
        let random: Vec<f64> = pool.install(|| {
            instances.par_iter().map(|i| Ok(random_rollout(i, cfg.experts.random_seed)?.objective)).collect::<Result<_>>()
        })?;
        let random_time = start.elapsed().as_secs_f64();
        let row = |name: &str, m: Metrics, t: f64| SolveReport::new(name, &instances[0], instances.len(), m, t);
        rows.push(row("Random", compute_metrics(&random, &expert, &random, sense)?, random_time));
        rows.push(row("Expert", compute_metrics(&expert, &expert, &random, sense)?, expert_time));
        for s in &strategies {
            let start = Instant::now();
            let sols = solve_all(&instances, &ck.model, s, opts.workers)?;
            let objs: Vec<f64> = sols.iter().map(|x| x.objective).collect();
            rows.push(row(&method_name(s), compute_metrics(&objs, &expert, &random, sense)?, start.elapsed().as_secs_f64()));
        }
    }
    Ok(rows)
}

/// Evaluates a checkpoint on the test split and writes the report.
pub fn cmd_eval(cfg: &RunConfig, opts: &Opts) -> Result<Vec<SolveReport>> {
    cfg.check_paths()?;
    let dir = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.train_dir().join("best"));
    let rows = match cfg.model.dtype.as_str() {
        "f64" => eval_with(cfg, opts, &load_checkpoint::<f64>(&dir)?)?,
        _ => eval_with(cfg, opts, &load_checkpoint::<f32>(&dir)?)?,
    };
    let out = cfg.eval_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), format_table(&rows))?;
    fs::write(out.join("report.csv"), format_csv(&rows))?;
    Ok(rows)
}

/// Human-readable token dump of one instance's prefix and expert trajectory.
pub fn cmd_tokenize_inspect(kind: ProblemKind, n: usize, seed: u64, exact_limit: usize) -> Result<String> {
    let inst = generate_instance(kind, n, seed)?;
    let sol = solve_expert(&inst, exact_limit)?;
    let ep = trace_solution(&inst, &sol)?;
    let prefix = encode_prefix(&inst)?;
    let mut out = String::new();
    let show = |id: u32| match decode_token(id) {
        Some(v) => format!("{v:?}"),
        None => String::new(),
    };
    writeln!(out, "{kind} n={n} seed={seed} solver={} objective={:.6}", sol.solver_name, sol.objective).unwrap();
    writeln!(out, "prefix ({} tokens)", prefix.len()).unwrap();
    for (i, (&id, role)) in prefix.ids.iter().zip(&prefix.roles).enumerate() {
        writeln!(out, "  {i:>4} {id:>5} {role:?} {}", show(id)).unwrap();
    }
    for (j, step) in ep.steps.iter().enumerate() {
        let seq = encode_step(&step.state_values, step.action)?;
        let tokens: Vec<String> = seq
            .ids
            .iter()
            .zip(&seq.roles)
            .map(|(&id, role)| match role {
                TokenRole::Split => format!("<{id}>"),
                TokenRole::Action => format!("a{id}"),
                _ => id.to_string(),
            })
            .collect();
        let mask: String = (0..step.mask.len()).map(|a| if step.mask.get(a) { '1' } else { '0' }).collect();
        writeln!(out, "step {j:>3}: {}  feasible {mask}", tokens.join(" ")).unwrap();
    }
    Ok(out)
}
