//! Expert solvers and episode tracing.

mod exact;
mod heuristic;

use std::time::Instant;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{
    apply_action, feasible_actions, initial_state, objective, replay, state_step_values, ActionMask,
    ProblemInstance, ProblemKind, TaggedValue,
};

pub use exact::{exact_actions, knapsack_brute_force, EXACT_LIMIT, KNAPSACK_SCALE};
pub use heuristic::heuristic_actions;

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub actions: Vec<usize>,
    pub objective: f64,
    pub solver_name: String,
    pub elapsed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub state_values: Vec<TaggedValue>,
    pub mask: ActionMask,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdpEpisode {
    pub steps: Vec<EpisodeStep>,
    pub total_steps: usize,
    pub final_objective: f64,
}

fn finish(inst: &ProblemInstance, actions: Vec<usize>, name: &str, start: Instant) -> Result<Solution> {
    let state = replay(inst, &actions)?;
    let objective = objective(inst, &state)?;
    Ok(Solution { actions, objective, solver_name: name.into(), elapsed: start.elapsed().as_secs_f64() })
}

/// Optimal solution. Routing and MIS kinds are limited to [`EXACT_LIMIT`]
/// nodes; SPCTSP is solved with full knowledge of the realized prizes.
pub fn solve_exact(inst: &ProblemInstance) -> Result<Solution> {
    let start = Instant::now();
    let actions = exact_actions(inst)?;
    finish(inst, actions, "exact", start)
}

pub fn solve_heuristic(inst: &ProblemInstance) -> Result<Solution> {
    let start = Instant::now();
    let actions = heuristic_actions(inst);
    finish(inst, actions, "heuristic", start)
}

/// Exact when within budget, heuristic otherwise. SPCTSP always uses the
/// online heuristic since the exact solver peeks at hidden prizes.
pub fn solve_expert(inst: &ProblemInstance, exact_limit: usize) -> Result<Solution> {
    let exact_ok = inst.kind == ProblemKind::Knapsack || inst.n <= exact_limit.min(EXACT_LIMIT);
    if exact_ok && inst.kind != ProblemKind::Spctsp {
        solve_exact(inst)
    } else {
        solve_heuristic(inst)
    }
}

/// Uniform choice among feasible actions at every step.
pub fn random_rollout(inst: &ProblemInstance, seed: u64) -> Result<Solution> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial_state(inst);
    while !state.terminal {
        let mask = feasible_actions(inst, &state);
        let a = mask
            .actions()
            .choose(&mut rng)
            .ok_or_else(|| Error::EnvContract(format!("no feasible action at step {}", state.step())))?;
        state = apply_action(inst, &state, a)?;
    }
    let objective = objective(inst, &state)?;
    Ok(Solution {
        actions: state.history,
        objective,
        solver_name: "random".into(),
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Records the state values and feasibility mask seen before each action.
pub fn trace_solution(inst: &ProblemInstance, solution: &Solution) -> Result<MdpEpisode> {
    let mut state = initial_state(inst);
    let mut steps = Vec::with_capacity(solution.actions.len());
    for &a in &solution.actions {
        let state_values = state_step_values(inst, &state);
        let mask = feasible_actions(inst, &state);
        let next = apply_action(inst, &state, a)?;
        steps.push(EpisodeStep { state_values, mask, action: a });
        state = next;
    }
    let final_objective = objective(inst, &state)?;
    Ok(MdpEpisode { total_steps: steps.len(), steps, final_objective })
}

/// One line of a solutions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub kind: ProblemKind,
    pub n: usize,
    pub seed: u64,
    pub solver: String,
    pub actions: Vec<usize>,
    pub objective: f64,
}

impl SolutionRecord {
    pub fn new(inst: &ProblemInstance, sol: &Solution) -> Self {
        SolutionRecord {
            kind: inst.kind,
            n: inst.n,
            seed: inst.seed,
            solver: sol.solver_name.clone(),
            actions: sol.actions.clone(),
            objective: sol.objective,
        }
    }

    pub fn to_solution(&self) -> Solution {
        Solution { actions: self.actions.clone(), objective: self.objective, solver_name: self.solver.clone(), elapsed: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{
        generate_instance, verify_solution, KnapsackData, MisData, Payload, Sense, SpctspData, TspData,
    };

    fn all_permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let x = rest.remove(i);
            for mut p in all_permutations(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    fn brute_force_tour(inst: &ProblemInstance) -> f64 {
        let rest: Vec<usize> = (1..inst.n).collect();
        all_permutations(&rest)
            .into_iter()
            .map(|p| {
                let mut tour = vec![0];
                tour.extend(p);
                verify_solution(inst, &tour).objective
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn knapsack_example() {
        let inst = ProblemInstance {
            kind: ProblemKind::Knapsack,
            n: 3,
            seed: 0,
            payload: Payload::Knapsack(KnapsackData {
                values: vec![10.0, 6.0, 4.0],
                volumes: vec![5.0, 9.0, 2.0],
                capacity: 10.0,
            }),
        };
        let s = solve_exact(&inst).unwrap();
        assert_eq!(s.actions, vec![0, 2, 3]);
        assert_eq!(s.objective, 14.0);
    }

    #[test]
    fn knapsack_dp_matches_enumeration() {
        for seed in 0..200 {
            let n = 2 + (seed as usize % 11);
            let inst = generate_instance(ProblemKind::Knapsack, n, seed).unwrap();
            let Payload::Knapsack(d) = &inst.payload else { unreachable!() };
            let s = solve_exact(&inst).unwrap();
            assert_eq!(s.objective, knapsack_brute_force(&d.values, &d.volumes, d.capacity), "seed {seed}");
        }
    }

    #[test]
    fn square_tour() {
        let inst = ProblemInstance {
            kind: ProblemKind::Tsp,
            n: 4,
            seed: 0,
            payload: Payload::Tsp(TspData { coords: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]] }),
        };
        let s = solve_exact(&inst).unwrap();
        assert!((s.objective - 4.0).abs() < 1e-12);
        assert_eq!(s.actions, vec![0, 2, 1, 3]);
    }

    #[test]
    fn tour_dp_matches_permutations() {
        for seed in 0..20 {
            for kind in [ProblemKind::Tsp, ProblemKind::Atsp] {
                let n = 3 + seed as usize % 6;
                let inst = crate::problems::generate_instance_with(
                    kind,
                    n,
                    seed,
                    crate::problems::GenOptions { atsp_noise: true, ..Default::default() },
                )
                .unwrap();
                let s = solve_exact(&inst).unwrap();
                assert!((s.objective - brute_force_tour(&inst)).abs() < 1e-12, "{kind} seed {seed}");
            }
        }
    }

    #[test]
    fn mis_path_and_triangle() {
        let path = ProblemInstance {
            kind: ProblemKind::Mis,
            n: 3,
            seed: 0,
            payload: Payload::Mis(MisData { adjacency: vec![0, 1, 0, 1, 0, 1, 0, 1, 0] }),
        };
        let s = solve_exact(&path).unwrap();
        assert_eq!(s.actions, vec![0, 2]);
        assert_eq!(s.objective, 2.0);

        let tri = ProblemInstance {
            kind: ProblemKind::Mis,
            n: 3,
            seed: 0,
            payload: Payload::Mis(MisData { adjacency: vec![0, 1, 1, 1, 0, 1, 1, 1, 0] }),
        };
        assert_eq!(solve_heuristic(&tri).unwrap().objective, 1.0);
    }

    #[test]
    fn exact_budget_enforced() {
        let inst = generate_instance(ProblemKind::Tsp, 13, 0).unwrap();
        assert!(matches!(solve_exact(&inst), Err(Error::SizeLimit { n: 13, limit: 12 })));
        let kp = generate_instance(ProblemKind::Knapsack, 50, 0).unwrap();
        assert!(solve_exact(&kp).is_ok());
    }

    #[test]
    fn tsp_heuristic_close_to_exact() {
        let mut within = 0;
        for seed in 0..200 {
            let inst = generate_instance(ProblemKind::Tsp, 8, seed).unwrap();
            let e = solve_exact(&inst).unwrap().objective;
            let h = solve_heuristic(&inst).unwrap().objective;
            if h <= 1.05 * e {
                within += 1;
            }
        }
        assert!(within >= 190, "{within}/200");
    }

    #[test]
    fn oracle_dominance_all_kinds() {
        for kind in ProblemKind::ALL {
            for seed in 0..12 {
                let inst = generate_instance(kind, 7, seed).unwrap();
                let e = solve_exact(&inst).unwrap();
                let h = solve_heuristic(&inst).unwrap();
                let r = random_rollout(&inst, seed).unwrap();
                for other in [&h, &r] {
                    assert!(
                        !kind.sense().better(other.objective, e.objective + kind_slack(kind.sense())),
                        "{kind} seed {seed}: {} beats exact {}",
                        other.objective,
                        e.objective
                    );
                    assert!(verify_solution(&inst, &other.actions).feasible);
                }
            }
        }
    }

    fn kind_slack(sense: Sense) -> f64 {
        match sense {
            Sense::Minimize => -1e-9,
            Sense::Maximize => 1e-9,
        }
    }

    #[test]
    fn heuristics_feasible_at_twenty() {
        for kind in ProblemKind::ALL {
            for seed in 0..5 {
                let inst = generate_instance(kind, 20, seed).unwrap();
                let s = solve_heuristic(&inst).unwrap();
                let v = verify_solution(&inst, &s.actions);
                assert!(v.feasible, "{kind}: {:?}", v.reason);
                assert!((v.objective - s.objective).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn random_rollout_deterministic_and_feasible() {
        for kind in ProblemKind::ALL {
            let inst = generate_instance(kind, 10, 4).unwrap();
            let a = random_rollout(&inst, 9).unwrap();
            let b = random_rollout(&inst, 9).unwrap();
            assert_eq!(a.actions, b.actions);
            assert!(verify_solution(&inst, &a.actions).feasible);
        }
    }

    #[test]
    fn trace_counts_and_masks() {
        let inst = generate_instance(ProblemKind::Tsp, 20, 1).unwrap();
        let ep = trace_solution(&inst, &solve_heuristic(&inst).unwrap()).unwrap();
        assert_eq!(ep.total_steps, 20);
        assert!(ep.steps.iter().all(|s| s.mask.get(s.action)));

        let kp = generate_instance(ProblemKind::Knapsack, 20, 1).unwrap();
        let sol = solve_exact(&kp).unwrap();
        let ep = trace_solution(&kp, &sol).unwrap();
        assert_eq!(ep.total_steps, sol.actions.len());
        assert_eq!(*sol.actions.last().unwrap(), 20);
        assert_eq!(ep.final_objective, sol.objective);
    }

    #[test]
    fn trace_rejects_infeasible_at_offending_step() {
        let inst = generate_instance(ProblemKind::Tsp, 5, 1).unwrap();
        let bad = Solution { actions: vec![0, 1, 1, 2, 3], objective: 0.0, solver_name: "x".into(), elapsed: 0.0 };
        assert!(matches!(trace_solution(&inst, &bad), Err(Error::ConstraintViolation { step: 2, .. })));
    }

    #[test]
    fn spctsp_decisions_ignore_unrevealed_prizes() {
        for seed in 0..10 {
            let inst = generate_instance(ProblemKind::Spctsp, 10, seed).unwrap();
            let sol = solve_heuristic(&inst).unwrap();
            let Payload::Spctsp(d) = &inst.payload else { unreachable!() };
            // At every step t, shuffle the realized prizes of nodes not yet
            // visited; the next decision must not change.
            for t in 0..sol.actions.len() {
                let visited: Vec<usize> = sol.actions[..t].iter().filter(|&&a| a > 0).map(|&a| a - 1).collect();
                let hidden: Vec<usize> = (0..10).filter(|i| !visited.contains(i)).collect();
                if hidden.len() < 2 {
                    continue;
                }
                let mut realized = d.realized.clone();
                let first = realized[hidden[0]];
                for w in 0..hidden.len() - 1 {
                    realized[hidden[w]] = realized[hidden[w + 1]];
                }
                realized[*hidden.last().unwrap()] = first;
                let twin = ProblemInstance {
                    payload: Payload::Spctsp(SpctspData { realized, ..d.clone() }),
                    ..inst.clone()
                };
                let other = solve_heuristic(&twin).unwrap();
                assert_eq!(other.actions[..=t], sol.actions[..=t], "seed {seed} step {t}");
            }
        }
    }

    #[test]
    fn solution_record_json() {
        let inst = generate_instance(ProblemKind::Op, 6, 2).unwrap();
        let sol = solve_exact(&inst).unwrap();
        let rec = SolutionRecord::new(&inst, &sol);
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.starts_with("{\"kind\":\"OP\""));
        let back: SolutionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
