use serde::{Deserialize, Serialize};

use super::*;

/// Absolute slack accepted on length and volume budgets.
pub const BUDGET_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeStatus {
    Undecided = 0,
    Selected = 1,
    Excluded = 2,
}

/// A partial solution. Everything except `history` is derived and is
/// reproduced exactly by replaying `history` from [`initial_state`].
#[derive(Clone, Debug, PartialEq)]
pub struct MdpState {
    pub history: Vec<usize>,
    /// Action index of the current location (routing problems only).
    pub current: Option<usize>,
    /// Per city / item / node status; for depot problems entry `i` is action `i + 1`.
    pub status: Vec<NodeStatus>,
    /// Remaining vehicle capacity, length budget or knapsack volume.
    pub remaining: f64,
    /// Collected prize (OP, PCTSP, SPCTSP), packed value (knapsack) or set size (MIS).
    pub collected: f64,
    /// Travel cost so far; closing arcs are added on termination.
    pub length: f64,
    pub terminal: bool,
}

impl MdpState {
    pub fn visited(&self, entity: usize) -> bool {
        self.status[entity] != NodeStatus::Undecided
    }

    fn all_decided(&self) -> bool {
        self.status.iter().all(|&s| s != NodeStatus::Undecided)
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionMask(pub Vec<bool>);

impl ActionMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, a: usize) -> bool {
        self.0.get(a).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Little-endian bit packing, eight actions per byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.0.len().div_ceil(8)];
        for a in self.actions() {
            out[a / 8] |= 1 << (a % 8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        ActionMask((0..len).map(|a| bytes.get(a / 8).is_some_and(|b| b >> (a % 8) & 1 == 1)).collect())
    }
}

pub fn initial_state(inst: &ProblemInstance) -> MdpState {
    let n = inst.n;
    let mut s = MdpState {
        history: Vec::new(),
        current: None,
        status: vec![NodeStatus::Undecided; n],
        remaining: 0.0,
        collected: 0.0,
        length: 0.0,
        terminal: false,
    };
    match &inst.payload {
        Payload::Cvrp(d) => {
            s.current = Some(0);
            s.remaining = d.capacity as f64;
        }
        Payload::Op(d) => {
            s.current = Some(0);
            s.remaining = d.length_limit;
        }
        Payload::Pctsp(_) | Payload::Spctsp(_) => s.current = Some(0),
        Payload::Knapsack(d) => s.remaining = d.capacity,
        Payload::Tsp(_) | Payload::Atsp(_) | Payload::Mis(_) => {}
    }
    s
}

/// Why `action` is not allowed in `state`, or `None` when it is.
fn violation(inst: &ProblemInstance, state: &MdpState, action: usize) -> Option<String> {
    let n = inst.n;
    if state.terminal {
        return Some("episode already terminated".into());
    }
    if action >= inst.kind.action_space(n) {
        return Some(format!("action {action} outside action space"));
    }
    match &inst.payload {
        Payload::Tsp(_) | Payload::Atsp(_) => {
            if state.visited(action) {
                return Some(format!("node {action} already visited"));
            }
        }
        Payload::Cvrp(d) => {
            let cur = state.current.unwrap_or(0);
            if action == 0 {
                if cur == 0 {
                    return Some("depot revisited without serving a customer".into());
                }
            } else {
                let i = action - 1;
                if state.visited(i) {
                    return Some(format!("customer {action} already served"));
                }
                if d.demands[i] as f64 > state.remaining {
                    return Some(format!(
                        "demand {} exceeds remaining capacity {}",
                        d.demands[i], state.remaining
                    ));
                }
            }
        }
        Payload::Op(_) => {
            if action != 0 {
                let i = action - 1;
                if state.visited(i) {
                    return Some(format!("node {action} already visited"));
                }
                let cur = state.current.unwrap_or(0);
                let need = inst.cost(cur, action) + inst.cost(action, 0);
                if need > state.remaining + BUDGET_EPS {
                    return Some(format!(
                        "visit and return need {need}, budget is {}",
                        state.remaining
                    ));
                }
            }
        }
        Payload::Pctsp(PctspData { min_prize, .. }) | Payload::Spctsp(SpctspData { min_prize, .. }) => {
            if action == 0 {
                if state.collected < *min_prize && !state.all_decided() {
                    return Some(format!(
                        "collected prize {} below minimum {min_prize}",
                        state.collected
                    ));
                }
            } else if state.visited(action - 1) {
                return Some(format!("node {action} already visited"));
            }
        }
        Payload::Knapsack(d) => {
            if action < n {
                if state.visited(action) {
                    return Some(format!("item {action} already packed"));
                }
                if d.volumes[action] > state.remaining + BUDGET_EPS {
                    return Some(format!(
                        "volume {} exceeds remaining {}",
                        d.volumes[action], state.remaining
                    ));
                }
            }
        }
        Payload::Mis(_) => {
            if state.status[action] != NodeStatus::Undecided {
                return Some(format!("node {action} is not undecided"));
            }
        }
    }
    None
}

pub fn feasible_actions(inst: &ProblemInstance, state: &MdpState) -> ActionMask {
    let size = inst.kind.action_space(inst.n);
    if state.terminal {
        return ActionMask(vec![false; size]);
    }
    ActionMask((0..size).map(|a| violation(inst, state, a).is_none()).collect())
}

pub fn apply_action(inst: &ProblemInstance, state: &MdpState, action: usize) -> Result<MdpState> {
    if let Some(constraint) = violation(inst, state, action) {
        return Err(Error::ConstraintViolation { step: state.step(), constraint });
    }
    let mut s = state.clone();
    s.history.push(action);
    match &inst.payload {
        Payload::Tsp(_) | Payload::Atsp(_) => {
            if let Some(cur) = s.current {
                s.length += inst.cost(cur, action);
            }
            s.current = Some(action);
            s.status[action] = NodeStatus::Selected;
            if s.all_decided() {
                s.length += inst.cost(action, s.history[0]);
                s.terminal = true;
            }
        }
        Payload::Cvrp(d) => {
            let cur = s.current.unwrap_or(0);
            s.length += inst.cost(cur, action);
            s.current = Some(action);
            if action == 0 {
                s.remaining = d.capacity as f64;
            } else {
                s.status[action - 1] = NodeStatus::Selected;
                s.remaining -= d.demands[action - 1] as f64;
                if s.all_decided() {
                    s.length += inst.cost(action, 0);
                    s.terminal = true;
                }
            }
        }
        Payload::Op(d) => {
            let cur = s.current.unwrap_or(0);
            let step = inst.cost(cur, action);
            s.length += step;
            s.remaining -= step;
            s.current = Some(action);
            if action == 0 {
                s.terminal = true;
            } else {
                s.status[action - 1] = NodeStatus::Selected;
                s.collected += d.prizes[action - 1];
            }
        }
        Payload::Pctsp(_) | Payload::Spctsp(_) => {
            let cur = s.current.unwrap_or(0);
            s.length += inst.cost(cur, action);
            s.current = Some(action);
            if action == 0 {
                s.terminal = true;
            } else {
                let i = action - 1;
                s.status[i] = NodeStatus::Selected;
                s.collected += match &inst.payload {
                    Payload::Pctsp(d) => d.prizes[i],
                    Payload::Spctsp(d) => d.realized[i],
                    _ => unreachable!(),
                };
            }
        }
        Payload::Knapsack(d) => {
            if action == inst.n {
                s.terminal = true;
            } else {
                s.status[action] = NodeStatus::Selected;
                s.remaining -= d.volumes[action];
                s.collected += d.values[action];
            }
        }
        Payload::Mis(d) => {
            let n = inst.n;
            s.status[action] = NodeStatus::Selected;
            for j in 0..n {
                if d.adjacency[action * n + j] == 1 && s.status[j] == NodeStatus::Undecided {
                    s.status[j] = NodeStatus::Excluded;
                }
            }
            s.collected += 1.0;
            if s.all_decided() {
                s.terminal = true;
            }
        }
    }
    Ok(s)
}

pub fn objective(inst: &ProblemInstance, state: &MdpState) -> Result<f64> {
    if !state.terminal {
        return Err(Error::IncompleteSolution);
    }
    let unvisited_penalty = |pen: &[f64]| -> f64 {
        pen.iter()
            .zip(&state.status)
            .filter(|(_, &st)| st == NodeStatus::Undecided)
            .map(|(p, _)| p)
            .sum()
    };
    Ok(match &inst.payload {
        Payload::Tsp(_) | Payload::Atsp(_) | Payload::Cvrp(_) => state.length,
        Payload::Op(_) | Payload::Knapsack(_) | Payload::Mis(_) => state.collected,
        Payload::Pctsp(d) => state.length + unvisited_penalty(&d.penalties),
        Payload::Spctsp(d) => state.length + unvisited_penalty(&d.penalties),
    })
}

/// Replays a full action sequence from the initial state.
pub fn replay(inst: &ProblemInstance, actions: &[usize]) -> Result<MdpState> {
    let mut s = initial_state(inst);
    for &a in actions {
        s = apply_action(inst, &s, a)?;
    }
    Ok(s)
}
