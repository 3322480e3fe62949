//! Combinatorial optimization problems formulated as deterministic
//! construction MDPs.
//!
//! Every problem shares one action convention: for problems with a depot
//! the depot is action `0` and city `i` (0-based in the payload) is action
//! `i + 1`, matching the order of the coordinate block in the prefix. For
//! the knapsack, item `i` is action `i` and action `n` terminates.

mod generate;
mod layout;
mod mdp;
mod verify;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_instance, generate_instance_with, GenOptions};
pub use layout::{
    prefix_entity_tokens, prefix_len, state_len, state_step_values, static_prefix_values,
    TaggedValue,
};
pub use mdp::{
    apply_action, feasible_actions, initial_state, objective, replay, ActionMask, MdpState, NodeStatus,
    BUDGET_EPS,
};
pub use generate::{cvrp_capacity, knapsack_capacity, length_scale};
pub use verify::{verify_solution, Verdict};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProblemKind {
    #[serde(rename = "TSP")]
    Tsp,
    #[serde(rename = "CVRP")]
    Cvrp,
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "PCTSP")]
    Pctsp,
    #[serde(rename = "SPCTSP")]
    Spctsp,
    #[serde(rename = "KNAPSACK")]
    Knapsack,
    #[serde(rename = "ATSP")]
    Atsp,
    #[serde(rename = "MIS")]
    Mis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Minimize => a < b,
            Sense::Maximize => a > b,
        }
    }
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 8] = [
        ProblemKind::Tsp,
        ProblemKind::Cvrp,
        ProblemKind::Op,
        ProblemKind::Pctsp,
        ProblemKind::Spctsp,
        ProblemKind::Knapsack,
        ProblemKind::Atsp,
        ProblemKind::Mis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Tsp => "TSP",
            ProblemKind::Cvrp => "CVRP",
            ProblemKind::Op => "OP",
            ProblemKind::Pctsp => "PCTSP",
            ProblemKind::Spctsp => "SPCTSP",
            ProblemKind::Knapsack => "KNAPSACK",
            ProblemKind::Atsp => "ATSP",
            ProblemKind::Mis => "MIS",
        }
    }

    pub fn index(self) -> usize {
        ProblemKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn sense(self) -> Sense {
        match self {
            ProblemKind::Op | ProblemKind::Knapsack | ProblemKind::Mis => Sense::Maximize,
            _ => Sense::Minimize,
        }
    }

    /// Problems whose payload has a depot at coordinate index 0.
    pub fn has_depot(self) -> bool {
        matches!(
            self,
            ProblemKind::Cvrp | ProblemKind::Op | ProblemKind::Pctsp | ProblemKind::Spctsp
        )
    }

    /// Number of distinct actions for an instance of size `n`.
    pub fn action_space(self, n: usize) -> usize {
        match self {
            ProblemKind::Tsp | ProblemKind::Atsp | ProblemKind::Mis => n,
            _ => n + 1,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let kind = match up.as_str() {
            "TSP" => ProblemKind::Tsp,
            "CVRP" | "VRP" => ProblemKind::Cvrp,
            "OP" => ProblemKind::Op,
            "PCTSP" => ProblemKind::Pctsp,
            "SPCTSP" => ProblemKind::Spctsp,
            "KNAPSACK" | "KP" => ProblemKind::Knapsack,
            "ATSP" => ProblemKind::Atsp,
            "MIS" => ProblemKind::Mis,
            _ => return Err(Error::Config(format!("unknown problem kind `{s}`"))),
        };
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TspData {
    pub coords: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvrpData {
    pub depot: Point,
    pub coords: Vec<Point>,
    pub demands: Vec<u32>,
    pub capacity: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpData {
    pub depot: Point,
    pub coords: Vec<Point>,
    pub prizes: Vec<f64>,
    pub length_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PctspData {
    pub depot: Point,
    pub coords: Vec<Point>,
    pub prizes: Vec<f64>,
    pub penalties: Vec<f64>,
    pub min_prize: f64,
}

/// Stochastic PCTSP: `expected` is visible, `realized` is revealed only
/// when a node is visited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpctspData {
    pub depot: Point,
    pub coords: Vec<Point>,
    pub expected: Vec<f64>,
    pub realized: Vec<f64>,
    pub penalties: Vec<f64>,
    pub min_prize: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackData {
    pub values: Vec<f64>,
    pub volumes: Vec<f64>,
    pub capacity: f64,
}

/// Row-major `n * n` distance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtspData {
    pub dist: Vec<f64>,
}

/// Row-major `n * n` symmetric 0/1 adjacency matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisData {
    pub adjacency: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Tsp(TspData),
    Cvrp(CvrpData),
    Op(OpData),
    Pctsp(PctspData),
    Spctsp(SpctspData),
    Knapsack(KnapsackData),
    Atsp(AtspData),
    Mis(MisData),
}

impl Payload {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Payload::Tsp(_) => ProblemKind::Tsp,
            Payload::Cvrp(_) => ProblemKind::Cvrp,
            Payload::Op(_) => ProblemKind::Op,
            Payload::Pctsp(_) => ProblemKind::Pctsp,
            Payload::Spctsp(_) => ProblemKind::Spctsp,
            Payload::Knapsack(_) => ProblemKind::Knapsack,
            Payload::Atsp(_) => ProblemKind::Atsp,
            Payload::Mis(_) => ProblemKind::Mis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    pub n: usize,
    pub seed: u64,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    kind: ProblemKind,
    n: usize,
    seed: u64,
    payload: serde_json::Value,
}

impl From<ProblemInstance> for RawInstance {
    fn from(inst: ProblemInstance) -> Self {
        let payload = match &inst.payload {
            Payload::Tsp(d) => serde_json::to_value(d),
            Payload::Cvrp(d) => serde_json::to_value(d),
            Payload::Op(d) => serde_json::to_value(d),
            Payload::Pctsp(d) => serde_json::to_value(d),
            Payload::Spctsp(d) => serde_json::to_value(d),
            Payload::Knapsack(d) => serde_json::to_value(d),
            Payload::Atsp(d) => serde_json::to_value(d),
            Payload::Mis(d) => serde_json::to_value(d),
        }
        .expect("payload serializes");
        RawInstance { kind: inst.kind, n: inst.n, seed: inst.seed, payload }
    }
}

impl TryFrom<RawInstance> for ProblemInstance {
    type Error = String;

    fn try_from(raw: RawInstance) -> std::result::Result<Self, String> {
        fn parse<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> std::result::Result<T, String> {
            serde_json::from_value(v).map_err(|e| e.to_string())
        }
        let payload = match raw.kind {
            ProblemKind::Tsp => Payload::Tsp(parse(raw.payload)?),
            ProblemKind::Cvrp => Payload::Cvrp(parse(raw.payload)?),
            ProblemKind::Op => Payload::Op(parse(raw.payload)?),
            ProblemKind::Pctsp => Payload::Pctsp(parse(raw.payload)?),
            ProblemKind::Spctsp => Payload::Spctsp(parse(raw.payload)?),
            ProblemKind::Knapsack => Payload::Knapsack(parse(raw.payload)?),
            ProblemKind::Atsp => Payload::Atsp(parse(raw.payload)?),
            ProblemKind::Mis => Payload::Mis(parse(raw.payload)?),
        };
        let inst = ProblemInstance { kind: raw.kind, n: raw.n, seed: raw.seed, payload };
        inst.validate().map_err(|e| e.to_string())?;
        Ok(inst)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl ProblemInstance {
    /// Checks the structural invariants of the payload.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n < 2 {
            return Err(Error::InvalidSize(format!("n = {n}, need n >= 2")));
        }
        if self.payload.kind() != self.kind {
            return Err(Error::InvalidValue("payload does not match kind".into()));
        }
        let bad = |what: &str| Err(Error::InvalidValue(format!("{}: {what}", self.kind)));
        let in_square = |p: &Point| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        match &self.payload {
            Payload::Tsp(d) => {
                if d.coords.len() != n || !d.coords.iter().all(in_square) {
                    return bad("coords");
                }
            }
            Payload::Cvrp(d) => {
                if d.coords.len() != n || d.demands.len() != n || !in_square(&d.depot) {
                    return bad("lengths");
                }
                if !d.coords.iter().all(in_square) {
                    return bad("coords");
                }
                if d.demands.iter().any(|&q| q == 0 || q > d.capacity) {
                    return bad("demand exceeds capacity");
                }
            }
            Payload::Op(d) => {
                if d.coords.len() != n || d.prizes.len() != n || !d.coords.iter().all(in_square) {
                    return bad("lengths");
                }
                if !(d.length_limit > 0.0) {
                    return bad("length limit");
                }
            }
            Payload::Pctsp(d) => {
                if d.coords.len() != n || d.prizes.len() != n || d.penalties.len() != n {
                    return bad("lengths");
                }
                if !d.coords.iter().all(in_square) {
                    return bad("coords");
                }
            }
            Payload::Spctsp(d) => {
                if d.coords.len() != n
                    || d.expected.len() != n
                    || d.realized.len() != n
                    || d.penalties.len() != n
                {
                    return bad("lengths");
                }
                if !d.coords.iter().all(in_square) {
                    return bad("coords");
                }
            }
            Payload::Knapsack(d) => {
                if d.values.len() != n || d.volumes.len() != n {
                    return bad("lengths");
                }
                if d.volumes.iter().any(|&k| !(k > 0.0)) {
                    return bad("volumes must be positive");
                }
            }
            Payload::Atsp(d) => {
                if d.dist.len() != n * n {
                    return bad("matrix shape");
                }
                if (0..n).any(|i| d.dist[i * n + i] != 0.0) || d.dist.iter().any(|&x| x < 0.0) {
                    return bad("diagonal or sign");
                }
            }
            Payload::Mis(d) => {
                if d.adjacency.len() != n * n {
                    return bad("matrix shape");
                }
                for i in 0..n {
                    if d.adjacency[i * n + i] != 0 {
                        return bad("diagonal");
                    }
                    for j in 0..n {
                        if d.adjacency[i * n + j] != d.adjacency[j * n + i] || d.adjacency[i * n + j] > 1 {
                            return bad("adjacency not symmetric 0/1");
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Coordinates indexed by action for routing problems (depot first when present).
    pub fn locations(&self) -> Vec<Point> {
        match &self.payload {
            Payload::Tsp(d) => d.coords.clone(),
            Payload::Cvrp(d) => std::iter::once(d.depot).chain(d.coords.iter().copied()).collect(),
            Payload::Op(d) => std::iter::once(d.depot).chain(d.coords.iter().copied()).collect(),
            Payload::Pctsp(d) => std::iter::once(d.depot).chain(d.coords.iter().copied()).collect(),
            Payload::Spctsp(d) => std::iter::once(d.depot).chain(d.coords.iter().copied()).collect(),
            _ => Vec::new(),
        }
    }

    /// Full travel-cost matrix over action-indexed locations, or `None` for
    /// non-routing problems.
    pub fn cost_matrix(&self) -> Option<Vec<Vec<f64>>> {
        match &self.payload {
            Payload::Atsp(d) => {
                let n = self.n;
                Some((0..n).map(|i| d.dist[i * n..(i + 1) * n].to_vec()).collect())
            }
            Payload::Knapsack(_) | Payload::Mis(_) => None,
            _ => {
                let locs = self.locations();
                Some(locs.iter().map(|&a| locs.iter().map(|&b| dist(a, b)).collect()).collect())
            }
        }
    }

    /// Travel cost between two action-indexed locations.
    pub fn cost(&self, from: usize, to: usize) -> f64 {
        match &self.payload {
            Payload::Atsp(d) => d.dist[from * self.n + to],
            Payload::Tsp(d) => dist(d.coords[from], d.coords[to]),
            Payload::Cvrp(_) | Payload::Op(_) | Payload::Pctsp(_) | Payload::Spctsp(_) => {
                let a = self.location(from);
                let b = self.location(to);
                dist(a, b)
            }
            Payload::Knapsack(_) | Payload::Mis(_) => 0.0,
        }
    }

    /// Location of an action index (depot = 0 for depot problems).
    pub fn location(&self, idx: usize) -> Point {
        let pick = |depot: Point, coords: &[Point]| if idx == 0 { depot } else { coords[idx - 1] };
        match &self.payload {
            Payload::Tsp(d) => d.coords[idx],
            Payload::Cvrp(d) => pick(d.depot, &d.coords),
            Payload::Op(d) => pick(d.depot, &d.coords),
            Payload::Pctsp(d) => pick(d.depot, &d.coords),
            Payload::Spctsp(d) => pick(d.depot, &d.coords),
            _ => [0.0, 0.0],
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Round-half-even to an integer, used wherever a real value has to be
/// carried by a discrete token.
pub fn round_half_even(x: f64) -> i64 {
    x.round_ties_even() as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parse_roundtrip() {
        for k in ProblemKind::ALL {
            assert_eq!(k.as_str().parse::<ProblemKind>().unwrap(), k);
        }
        assert!("FFSP".parse::<ProblemKind>().is_err());
    }

    #[test]
    fn half_even() {
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
        assert_eq!(round_half_even(3.49), 3);
        assert_eq!(round_half_even(-2.5), -2);
        assert_eq!(round_half_even(7.0), 7);
    }

    #[test]
    fn json_roundtrip_all_kinds() {
        for k in ProblemKind::ALL {
            let inst = generate_instance(k, 7, 42).unwrap();
            let line = inst.to_json_line();
            let back = ProblemInstance::from_json_line(&line).unwrap();
            assert_eq!(back, inst);
            assert_eq!(back.to_json_line(), line);
        }
    }

    #[test]
    fn rejects_malformed_payload() {
        let line = r#"{"kind":"TSP","n":3,"seed":1,"payload":{"coords":[[0.1,0.2]]}}"#;
        assert!(ProblemInstance::from_json_line(line).is_err());
        let line = r#"{"kind":"MIS","n":2,"seed":1,"payload":{"adjacency":[0,1,0,0]}}"#;
        assert!(ProblemInstance::from_json_line(line).is_err());
    }
}
