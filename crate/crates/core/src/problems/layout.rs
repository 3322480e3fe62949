//! Raw (untokenized) value layouts for the static prefix and per-step states.

use super::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaggedValue {
    Discrete(u32),
    Continuous(f64),
}

/// Number of prefix values for a kind of size `n`.
pub fn prefix_len(kind: ProblemKind, n: usize) -> usize {
    match kind {
        ProblemKind::Tsp | ProblemKind::Knapsack => 2 * n,
        ProblemKind::Cvrp | ProblemKind::Op => 3 * n + 2,
        ProblemKind::Pctsp | ProblemKind::Spctsp => 4 * n + 2,
        ProblemKind::Atsp | ProblemKind::Mis => n * n,
    }
}

/// Number of state values emitted per step.
pub fn state_len(kind: ProblemKind, n: usize) -> usize {
    match kind {
        ProblemKind::Tsp => 2,
        ProblemKind::Cvrp | ProblemKind::Pctsp | ProblemKind::Spctsp => 3,
        ProblemKind::Op => 4,
        ProblemKind::Knapsack => 1,
        ProblemKind::Atsp | ProblemKind::Mis => n,
    }
}

fn discrete(x: f64) -> TaggedValue {
    TaggedValue::Discrete(round_half_even(x).max(0) as u32)
}

fn push_points(out: &mut Vec<TaggedValue>, pts: impl IntoIterator<Item = Point>) {
    for p in pts {
        out.push(TaggedValue::Continuous(p[0]));
        out.push(TaggedValue::Continuous(p[1]));
    }
}

fn push_cont(out: &mut Vec<TaggedValue>, xs: impl IntoIterator<Item = f64>) {
    out.extend(xs.into_iter().map(TaggedValue::Continuous));
}

pub fn static_prefix_values(inst: &ProblemInstance) -> Vec<TaggedValue> {
    let mut out = Vec::with_capacity(prefix_len(inst.kind, inst.n));
    match &inst.payload {
        Payload::Tsp(d) => push_points(&mut out, d.coords.iter().copied()),
        Payload::Cvrp(d) => {
            push_points(&mut out, inst.locations());
            let cap = d.capacity as f64;
            push_cont(&mut out, d.demands.iter().map(|&q| q as f64 / cap));
        }
        Payload::Op(d) => {
            push_points(&mut out, inst.locations());
            push_cont(&mut out, d.prizes.iter().copied());
        }
        Payload::Pctsp(d) => {
            push_points(&mut out, inst.locations());
            push_cont(&mut out, d.prizes.iter().copied());
            push_cont(&mut out, d.penalties.iter().copied());
        }
        Payload::Spctsp(d) => {
            push_points(&mut out, inst.locations());
            push_cont(&mut out, d.expected.iter().copied());
            push_cont(&mut out, d.penalties.iter().copied());
        }
        Payload::Knapsack(d) => {
            out.extend(d.values.iter().map(|&v| discrete(v)));
            out.extend(d.volumes.iter().map(|&k| discrete(k)));
        }
        Payload::Atsp(d) => push_cont(&mut out, d.dist.iter().copied()),
        Payload::Mis(d) => out.extend(d.adjacency.iter().map(|&a| TaggedValue::Discrete(a as u32))),
    }
    out
}

pub fn state_step_values(inst: &ProblemInstance, state: &MdpState) -> Vec<TaggedValue> {
    let mut out = Vec::with_capacity(state_len(inst.kind, inst.n));
    // Before the first TSP/ATSP action there is no current city; the
    // origin (or a zero row) stands in for it.
    let here = state.current.map(|c| inst.location(c)).unwrap_or([0.0, 0.0]);
    match &inst.payload {
        Payload::Tsp(_) => push_points(&mut out, [here]),
        Payload::Cvrp(d) => {
            push_points(&mut out, [here]);
            out.push(TaggedValue::Continuous(state.remaining / d.capacity as f64));
        }
        Payload::Op(_) => {
            push_points(&mut out, [here]);
            out.push(TaggedValue::Continuous(state.collected));
            out.push(TaggedValue::Continuous(state.remaining));
        }
        Payload::Pctsp(PctspData { min_prize, .. }) | Payload::Spctsp(SpctspData { min_prize, .. }) => {
            push_points(&mut out, [here]);
            out.push(TaggedValue::Continuous((min_prize - state.collected).max(0.0)));
        }
        Payload::Knapsack(_) => out.push(discrete(state.remaining)),
        Payload::Atsp(d) => match state.current {
            Some(c) => push_cont(&mut out, d.dist[c * inst.n..(c + 1) * inst.n].iter().copied()),
            None => push_cont(&mut out, std::iter::repeat_n(0.0, inst.n)),
        },
        Payload::Mis(_) => out.extend(state.status.iter().map(|&s| TaggedValue::Discrete(s as u32))),
    }
    out
}

/// Prefix value indices that describe the entity behind `action`; masking an
/// infeasible action hides these tokens from attention.
pub fn prefix_entity_tokens(kind: ProblemKind, n: usize, action: usize) -> Vec<usize> {
    match kind {
        ProblemKind::Tsp => vec![2 * action, 2 * action + 1],
        ProblemKind::Atsp | ProblemKind::Mis => (action * n..(action + 1) * n).collect(),
        ProblemKind::Knapsack => {
            if action < n {
                vec![action, n + action]
            } else {
                Vec::new()
            }
        }
        ProblemKind::Cvrp | ProblemKind::Op | ProblemKind::Pctsp | ProblemKind::Spctsp => {
            let mut v = vec![2 * action, 2 * action + 1];
            if action > 0 {
                let base = 2 * (n + 1);
                v.push(base + action - 1);
                if matches!(kind, ProblemKind::Pctsp | ProblemKind::Spctsp) {
                    v.push(base + n + action - 1);
                }
            }
            v
        }
    }
}
