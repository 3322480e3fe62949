//! Enumerators shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

use colm::model::{DecodeCache, Float, Model, SeqInput};
use colm::problems::{
    apply_action, feasible_actions, initial_state, verify_solution, MdpState, ProblemInstance, ProblemKind,
};
use colm::tokenizer::VOCAB_SIZE;

/// Every terminal history reachable by following masks. Panics if a masked
/// action fails to apply or a live state has no feasible action.
pub fn reachable_terminals(inst: &ProblemInstance) -> BTreeSet<Vec<usize>> {
    fn walk(inst: &ProblemInstance, s: &MdpState, out: &mut BTreeSet<Vec<usize>>) {
        if s.terminal {
            out.insert(s.history.clone());
            return;
        }
        let mask = feasible_actions(inst, s);
        assert!(mask.any(), "dead end after {:?}", s.history);
        for a in mask.actions() {
            let next = apply_action(inst, s, a).unwrap_or_else(|e| panic!("masked action {a} failed: {e}"));
            walk(inst, &next, out);
        }
    }
    let mut out = BTreeSet::new();
    walk(inst, &initial_state(inst), &mut out);
    out
}

/// All sequences of distinct values from `items`, of every length.
pub fn arrangements(items: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..items.len() {
        let mut next = Vec::new();
        for seq in &frontier {
            for &i in items {
                if !seq.contains(&i) {
                    let mut s: Vec<usize> = seq.clone();
                    s.push(i);
                    next.push(s);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    arrangements(items).into_iter().filter(|s| s.len() == items.len()).collect()
}

/// Feasible action sequences found by generating every candidate of the
/// kind's solution grammar and keeping those the checker accepts.
pub fn brute_force_solutions(inst: &ProblemInstance) -> BTreeSet<Vec<usize>> {
    let n = inst.n;
    let cities: Vec<usize> = (0..n).collect();
    let customers: Vec<usize> = (1..=n).collect();
    let candidates: Vec<Vec<usize>> = match inst.kind {
        ProblemKind::Tsp | ProblemKind::Atsp => permutations(&cities),
        ProblemKind::Mis => arrangements(&cities),
        ProblemKind::Knapsack => arrangements(&cities)
            .into_iter()
            .map(|mut s| {
                s.push(n);
                s
            })
            .collect(),
        ProblemKind::Op | ProblemKind::Pctsp | ProblemKind::Spctsp => arrangements(&customers)
            .into_iter()
            .map(|mut s| {
                s.push(0);
                s
            })
            .collect(),
        ProblemKind::Cvrp => {
            let mut out = Vec::new();
            for perm in permutations(&customers) {
                for cuts in 0u32..1 << (n - 1) {
                    let mut seq = vec![perm[0]];
                    for (i, &c) in perm.iter().enumerate().skip(1) {
                        if cuts >> (i - 1) & 1 == 1 {
                            seq.push(0);
                        }
                        seq.push(c);
                    }
                    out.push(seq);
                }
            }
            out
        }
    };
    candidates.into_iter().filter(|c| verify_solution(inst, c).feasible).collect()
}

/// Random token sequence with a prefix of `prefix` tokens, short local
/// position cycles and, when `masking`, a few hidden-prefix sets shared by
/// runs of queries.
pub fn random_seq(len: usize, prefix: usize, seed: u64, masking: bool) -> SeqInput {
    let mut x = seed | 1;
    let mut next = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x
    };
    let ids: Vec<u32> = (0..len).map(|_| (next() % (VOCAB_SIZE as u64 - 1)) as u32).collect();
    let local_pos: Vec<u32> = (0..len).map(|i| if i < prefix { i as u32 } else { ((i - prefix) % 5) as u32 }).collect();
    let hidden_sets: Vec<Vec<bool>> = if masking && prefix > 0 {
        (0..3).map(|_| (0..prefix).map(|_| next() % 3 == 0).collect()).collect()
    } else {
        Vec::new()
    };
    let query_set = (0..len)
        .map(|q| if q > prefix && !hidden_sets.is_empty() { Some((q / 4) % hidden_sets.len()) } else { None })
        .collect();
    SeqInput { ids, local_pos, prefix_len: prefix, pad: vec![false; len], hidden_sets, query_set }
}

/// Logits for every position of `seq` computed through the decode cache:
/// the prefix and splitter first, then runs of at most `chunk` tokens that
/// share a hidden set.
pub fn incremental_logits<T: Float>(model: &Model<T>, seq: &SeqInput, chunk: usize) -> Vec<T> {
    let p = seq.prefix_len;
    let len = seq.ids.len();
    let mut cache = DecodeCache::new(model, p);
    let mut got = model
        .forward_incremental(&mut cache, &seq.ids[..=p], &(0..=p).collect::<Vec<_>>(), &seq.local_pos[..=p], None)
        .unwrap();
    let mut t = p + 1;
    while t < len {
        let set = seq.query_set[t];
        let mut end = t + 1;
        while end < len && end - t < chunk && seq.query_set[end] == set {
            end += 1;
        }
        let h = set.map(|i| seq.hidden_sets[i].as_slice());
        got.extend(
            model
                .forward_incremental(&mut cache, &seq.ids[t..end], &(t..end).collect::<Vec<_>>(), &seq.local_pos[t..end], h)
                .unwrap(),
        );
        t = end;
    }
    got
}

/// Admissible keys of query `q`, written from the mask law.
pub fn law(q: usize, p: usize, pad: &[bool], hidden: Option<&Vec<bool>>) -> BTreeSet<usize> {
    let keys: BTreeSet<usize> = if q < p {
        (0..p).collect()
    } else {
        let prefix = (0..p).filter(|&k| hidden.is_none_or(|h| !h[k]));
        prefix.chain(p..=q).collect()
    };
    keys.into_iter().filter(|&k| !pad[k]).collect()
}
