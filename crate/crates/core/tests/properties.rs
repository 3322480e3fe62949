mod common;

use std::collections::BTreeSet;

use colm::experts::{random_rollout, solve_exact};
use colm::model::{attention_mask, masked_ce_loss, Model, ModelConfig};
use colm::problems::{
    apply_action, feasible_actions, generate_instance, initial_state, objective, replay, verify_solution, KnapsackData,
    MisData, Payload, ProblemInstance, ProblemKind,
};
use colm::tokenizer::{
    continuous_to_token, encode_prefix, encode_step, mu_law_encode, token_to_continuous, ACTION_SPLIT, PAD,
    PREFIX_SPLIT,
};
use colm::training::{lr_at_position, DecayStyle, TrainConfig};
use common::{brute_force_solutions, incremental_logits, law, random_seq, reachable_terminals};
use proptest::prelude::*;
use proptest::sample::select;

fn any_kind() -> impl Strategy<Value = ProblemKind> {
    select(ProblemKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn masks_reach_exactly_the_feasible_solutions(kind in any_kind(), n in 3usize..=5, seed in 0u64..10_000) {
        let inst = generate_instance(kind, n, seed).unwrap();
        prop_assert_eq!(reachable_terminals(&inst), brute_force_solutions(&inst));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masked_rollouts_never_strand(kind in any_kind(), n in 2usize..=8, seed in 0u64..100_000, rs in any::<u64>()) {
        let inst = generate_instance(kind, n, seed).unwrap();
        let sol = random_rollout(&inst, rs).unwrap();
        let v = verify_solution(&inst, &sol.actions);
        prop_assert!(v.feasible, "{:?}", v.reason);
        prop_assert!((v.objective - sol.objective).abs() <= 1e-9 * v.objective.abs().max(1.0));
    }

    #[test]
    fn replay_is_exact(kind in any_kind(), n in 2usize..=12, seed in 0u64..100_000, rs in any::<u64>()) {
        let inst = generate_instance(kind, n, seed).unwrap();
        let acts = random_rollout(&inst, rs).unwrap().actions;
        let a = replay(&inst, &acts).unwrap();
        let b = replay(&inst, &acts).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(objective(&inst, &a).unwrap().to_bits(), objective(&inst, &b).unwrap().to_bits());
    }

    #[test]
    fn generation_is_byte_stable(kind in any_kind(), n in 2usize..=20, seed in any::<u64>()) {
        prop_assert_eq!(
            generate_instance(kind, n, seed).unwrap().to_json_line(),
            generate_instance(kind, n, seed).unwrap().to_json_line()
        );
    }
}

fn knapsack_without(inst: &ProblemInstance, d: &KnapsackData, item: usize) -> (ProblemInstance, Vec<usize>) {
    let keep: Vec<usize> = (0..inst.n).filter(|&i| i != item).collect();
    let sub = KnapsackData {
        values: keep.iter().map(|&i| d.values[i]).collect(),
        volumes: keep.iter().map(|&i| d.volumes[i]).collect(),
        capacity: d.capacity - d.volumes[item],
    };
    (ProblemInstance { kind: inst.kind, n: keep.len(), seed: inst.seed, payload: Payload::Knapsack(sub) }, keep)
}

fn mis_residual(inst: &ProblemInstance, d: &MisData, node: usize) -> (ProblemInstance, Vec<usize>) {
    let n = inst.n;
    let keep: Vec<usize> = (0..n).filter(|&u| u != node && d.adjacency[node * n + u] == 0).collect();
    let adjacency = keep.iter().flat_map(|&a| keep.iter().map(move |&b| d.adjacency[a * n + b])).collect();
    (ProblemInstance { kind: inst.kind, n: keep.len(), seed: inst.seed, payload: Payload::Mis(MisData { adjacency }) }, keep)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    /// After one selection the remaining knapsack is a fresh knapsack over
    /// the other items with reduced capacity.
    #[test]
    fn knapsack_tail_recursion(n in 3usize..=8, seed in 0u64..100_000, pick in 0usize..8) {
        let inst = generate_instance(ProblemKind::Knapsack, n, seed).unwrap();
        let Payload::Knapsack(d) = &inst.payload else { unreachable!() };
        let open: Vec<usize> = (0..n).filter(|&i| feasible_actions(&inst, &initial_state(&inst)).get(i)).collect();
        prop_assume!(!open.is_empty());
        let item = open[pick % open.len()];
        let s1 = apply_action(&inst, &initial_state(&inst), item).unwrap();
        let (sub, keep) = knapsack_without(&inst, d, item);
        let sub_mask = feasible_actions(&sub, &initial_state(&sub));
        let mask = feasible_actions(&inst, &s1);
        for (j, &i) in keep.iter().enumerate() {
            prop_assert_eq!(mask.get(i), sub_mask.get(j));
        }
        let best_after: f64 = reachable_terminals(&inst)
            .into_iter()
            .filter(|h| h[0] == item)
            .map(|h| verify_solution(&inst, &h).objective)
            .fold(f64::NEG_INFINITY, f64::max);
        let sub_best = solve_exact(&sub).unwrap().objective;
        prop_assert!((best_after - (d.values[item] + sub_best)).abs() < 1e-9);
    }

    /// Selecting a node leaves the maximum independent set problem on the
    /// graph without that node and its neighbours.
    #[test]
    fn mis_tail_recursion(n in 3usize..=7, seed in 0u64..100_000, pick in 0usize..7) {
        let inst = generate_instance(ProblemKind::Mis, n, seed).unwrap();
        let Payload::Mis(d) = &inst.payload else { unreachable!() };
        let node = pick % n;
        let s1 = apply_action(&inst, &initial_state(&inst), node).unwrap();
        let (sub, keep) = mis_residual(&inst, d, node);
        let mask = feasible_actions(&inst, &s1);
        prop_assert_eq!(mask.count(), keep.len());
        if !keep.is_empty() {
            prop_assert!(keep.iter().all(|&u| mask.get(u)));
            let sub_best = solve_exact(&sub).unwrap().objective;
            let best_after = reachable_terminals(&inst)
                .into_iter()
                .filter(|h| h[0] == node)
                .map(|h| h.len() as f64)
                .fold(0.0, f64::max);
            prop_assert_eq!(best_after, 1.0 + sub_best);
        } else {
            prop_assert!(s1.terminal);
        }
    }

    /// Tour cost splits into the accumulated path plus the cost of any
    /// completion.
    #[test]
    fn tour_cost_decomposes(atsp in any::<bool>(), n in 3usize..=6, seed in 0u64..100_000, k in 1usize..6) {
        let kind = if atsp { ProblemKind::Atsp } else { ProblemKind::Tsp };
        let inst = generate_instance(kind, n, seed).unwrap();
        let k = k.min(n - 1);
        for h in reachable_terminals(&inst) {
            let head = replay_prefix(&inst, &h[..k]);
            let mut tail = 0.0;
            for w in h[k - 1..].windows(2) {
                tail += inst.cost(w[0], w[1]);
            }
            tail += inst.cost(h[n - 1], h[0]);
            let total = verify_solution(&inst, &h).objective;
            prop_assert!((head + tail - total).abs() < 1e-9);
        }
    }
}

fn replay_prefix(inst: &ProblemInstance, acts: &[usize]) -> f64 {
    let mut s = initial_state(inst);
    for &a in acts {
        s = apply_action(inst, &s, a).unwrap();
    }
    s.length
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn token_ids_are_monotone(x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        prop_assert!(continuous_to_token(a).unwrap() <= continuous_to_token(b).unwrap());
    }

    #[test]
    fn mu_law_is_odd(x in -4.0f64..=4.0) {
        prop_assert!((mu_law_encode(-x).unwrap() + mu_law_encode(x).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn binning_error_is_below_one_bin(x in -4.0f64..=4.0) {
        let back = token_to_continuous(continuous_to_token(x).unwrap()).unwrap();
        prop_assert!((mu_law_encode(back).unwrap() - mu_law_encode(x).unwrap()).abs() <= 1.0 / 1800.0 + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splitters_only_where_the_grammar_puts_them(kind in any_kind(), n in 2usize..=12, seed in 0u64..10_000, rs in any::<u64>()) {
        let inst = generate_instance(kind, n, seed).unwrap();
        let prefix = encode_prefix(&inst).unwrap();
        let (last, body) = prefix.ids.split_last().unwrap();
        prop_assert_eq!(*last, PREFIX_SPLIT);
        prop_assert!(body.iter().all(|&t| t < ACTION_SPLIT));
        let acts = random_rollout(&inst, rs).unwrap().actions;
        let mut s = initial_state(&inst);
        for a in acts {
            let step = encode_step(&colm::problems::state_step_values(&inst, &s), a).unwrap();
            let m = step.ids.len();
            prop_assert_eq!(step.ids[m - 2], ACTION_SPLIT);
            prop_assert!(step.ids.iter().enumerate().all(|(i, &t)| i == m - 2 || (t < ACTION_SPLIT && t != PAD)));
            s = apply_action(&inst, &s, a).unwrap();
        }
    }
}

fn mask_case() -> impl Strategy<Value = (usize, Vec<bool>, Vec<Option<Vec<bool>>>)> {
    (1usize..24).prop_flat_map(|s| {
        (0..=s).prop_flat_map(move |p| {
            (
                Just(p),
                prop::collection::vec(prop::bool::weighted(0.2), s),
                prop::collection::vec(prop::option::of(prop::collection::vec(any::<bool>(), p)), s),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn attention_mask_follows_the_law((p, pad, hidden) in mask_case()) {
        let s = pad.len();
        let rows: Vec<Option<&[bool]>> = hidden.iter().map(|h| h.as_deref()).collect();
        let m = attention_mask(p, s, &pad, &rows).unwrap();
        for q in 0..s {
            let got: BTreeSet<usize> = (0..s).filter(|&k| m.get(q, k)).collect();
            let h = if q < p { None } else { hidden[q].as_ref() };
            prop_assert_eq!(got, law(q, p, &pad, h), "query {}", q);
        }
        // Prefix clause is symmetric.
        for a in 0..p {
            for b in 0..p {
                if !pad[a] && !pad[b] {
                    prop_assert!(m.get(a, b) && m.get(b, a));
                }
            }
        }
    }

    #[test]
    fn schedule_is_continuous(total in 100.0f64..1e7, warm in 0.01f64..0.3, decay in 0.1f64..0.69, factor in 1.0f64..50.0, linear in any::<bool>()) {
        let cfg = TrainConfig {
            warmup_ratio: warm,
            decay_ratio: decay,
            decay_factor: factor,
            decay_style: if linear { DecayStyle::Linear } else { DecayStyle::Cosine },
            ..Default::default()
        };
        for b in [warm * total, (warm + decay) * total] {
            let eps = b * 1e-12;
            let jump = (lr_at_position(b - eps, total, &cfg) - lr_at_position(b, total, &cfg)).abs();
            prop_assert!(jump <= 1e-12, "jump {} at {}", jump, b);
        }
    }

    /// Logits at rows that predict no target do not move the loss.
    #[test]
    fn unmasked_logits_are_inert(
        mask in prop::collection::vec(any::<bool>(), 2..12),
        noise in prop::collection::vec(-50.0f64..50.0, 12),
        seed in any::<u64>(),
    ) {
        let len = mask.len();
        let v = 7;
        let mut rng = seed;
        let mut next = || { rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (rng >> 33) as f64 / (1u64 << 31) as f64 };
        let logits: Vec<f64> = (0..len * v).map(|_| next() * 4.0 - 2.0).collect();
        let ids: Vec<u32> = (0..len).map(|_| (next() * v as f64) as u32 % v as u32).collect();
        let mut mask = mask;
        mask[0] = false;
        let base = masked_ce_loss(&logits, v, &ids, &mask);
        let mut moved = logits.clone();
        for r in 0..len {
            if !mask.get(r + 1).copied().unwrap_or(false) {
                for j in 0..v {
                    moved[r * v + j] += noise[(r + j) % noise.len()];
                }
            }
        }
        let after = masked_ce_loss(&moved, v, &ids, &mask);
        prop_assert_eq!(base.map(f64::to_bits), after.map(f64::to_bits));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(25))]

    #[test]
    fn incremental_matches_full(
        layers in 1usize..3,
        heads in select(vec![(2usize, 1usize), (2, 2), (4, 2), (4, 1)]),
        len in 3usize..40,
        pfrac in 0.0f64..0.8,
        chunk in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig { layers, embed_dim: 16, q_heads: heads.0, kv_heads: heads.1, ffn_dim: 32, max_len: 64, ..ModelConfig::tiny() };
        let model = Model::<f64>::init(cfg, seed).unwrap();
        let p = ((len as f64 * pfrac) as usize).min(len - 1);
        let seq = random_seq(len, p, seed, true);
        let full = model.forward_seqs(std::slice::from_ref(&seq)).unwrap().pop().unwrap();
        let got = incremental_logits(&model, &seq, chunk);
        prop_assert_eq!(full.len(), got.len());
        let worst = full.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-9, "max diff {}", worst);
    }
}
