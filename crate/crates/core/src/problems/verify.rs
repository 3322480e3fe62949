//! Solution checker written against the problem definitions directly. It
//! shares no code with the MDP transition and masking logic, so it can be
//! used to test that logic.

use super::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub feasible: bool,
    /// Objective when feasible, NaN otherwise.
    pub objective: f64,
    pub reason: Option<String>,
}

impl Verdict {
    fn ok(objective: f64) -> Self {
        Verdict { feasible: true, objective, reason: None }
    }

    fn fail(reason: impl Into<String>) -> Self {
        Verdict { feasible: false, objective: f64::NAN, reason: Some(reason.into()) }
    }
}

const TOL: f64 = 1e-9;

fn euclid(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn distinct(items: &[usize], bound: usize) -> bool {
    let mut seen = vec![false; bound];
    for &i in items {
        if i >= bound || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Closed tour cost through `order` over an arbitrary cost function.
fn closed_cost(order: &[usize], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for w in order.windows(2) {
        total += cost(w[0], w[1]);
    }
    if order.len() > 1 {
        total += cost(order[order.len() - 1], order[0]);
    }
    total
}

/// Splits `depot, c.., depot` style routes for prize problems: the sequence
/// must be distinct cities followed by a single trailing depot.
fn prize_tour(actions: &[usize], n: usize) -> std::result::Result<Vec<usize>, String> {
    match actions.split_last() {
        Some((&0, body)) => {
            if body.contains(&0) {
                return Err("depot visited before the end".into());
            }
            let cities: Vec<usize> = body.iter().map(|&a| a.wrapping_sub(1)).collect();
            if !distinct(&cities, n) {
                return Err("repeated or unknown node".into());
            }
            Ok(cities)
        }
        _ => Err("tour must end at the depot".into()),
    }
}

fn route_length(depot: Point, coords: &[Point], cities: &[usize]) -> f64 {
    let mut pts = vec![depot];
    pts.extend(cities.iter().map(|&c| coords[c]));
    closed_cost(&(0..pts.len()).collect::<Vec<_>>(), |a, b| euclid(pts[a], pts[b]))
}

pub fn verify_solution(inst: &ProblemInstance, actions: &[usize]) -> Verdict {
    let n = inst.n;
    match &inst.payload {
        Payload::Tsp(d) => {
            if actions.len() != n || !distinct(actions, n) {
                return Verdict::fail("not a permutation of all cities");
            }
            Verdict::ok(closed_cost(actions, |a, b| euclid(d.coords[a], d.coords[b])))
        }
        Payload::Atsp(d) => {
            if actions.len() != n || !distinct(actions, n) {
                return Verdict::fail("not a permutation of all cities");
            }
            Verdict::ok(closed_cost(actions, |a, b| d.dist[a * n + b]))
        }
        Payload::Cvrp(d) => {
            if actions.first() == Some(&0) || actions.last() == Some(&0) {
                return Verdict::fail("routes must start and end implicitly at the depot");
            }
            let routes: Vec<&[usize]> = actions.split(|&a| a == 0).collect();
            if routes.iter().any(|r| r.is_empty()) {
                return Verdict::fail("empty route");
            }
            let cities: Vec<usize> = actions.iter().filter(|&&a| a != 0).map(|&a| a - 1).collect();
            if cities.len() != n || !distinct(&cities, n) {
                return Verdict::fail("every customer must be served exactly once");
            }
            let mut total = 0.0;
            for r in routes {
                let load: u32 = r.iter().map(|&a| d.demands[a - 1]).sum();
                if load > d.capacity {
                    return Verdict::fail(format!("route load {load} exceeds capacity {}", d.capacity));
                }
                let idx: Vec<usize> = r.iter().map(|&a| a - 1).collect();
                total += route_length(d.depot, &d.coords, &idx);
            }
            Verdict::ok(total)
        }
        Payload::Op(d) => match prize_tour(actions, n) {
            Err(e) => Verdict::fail(e),
            Ok(cities) => {
                let len = route_length(d.depot, &d.coords, &cities);
                if len > d.length_limit + TOL {
                    return Verdict::fail(format!("tour length {len} over limit {}", d.length_limit));
                }
                Verdict::ok(cities.iter().map(|&c| d.prizes[c]).sum())
            }
        },
        Payload::Pctsp(d) => pc_verdict(actions, n, d.depot, &d.coords, &d.prizes, &d.penalties, d.min_prize),
        Payload::Spctsp(d) => {
            pc_verdict(actions, n, d.depot, &d.coords, &d.realized, &d.penalties, d.min_prize)
        }
        Payload::Knapsack(d) => match actions.split_last() {
            Some((&t, items)) if t == n => {
                if !distinct(items, n) {
                    return Verdict::fail("repeated or unknown item");
                }
                let vol: f64 = items.iter().map(|&i| d.volumes[i]).sum();
                if vol > d.capacity + TOL {
                    return Verdict::fail(format!("volume {vol} over capacity {}", d.capacity));
                }
                Verdict::ok(items.iter().map(|&i| d.values[i]).sum())
            }
            _ => Verdict::fail("selection must end with the terminate action"),
        },
        Payload::Mis(d) => {
            if !distinct(actions, n) {
                return Verdict::fail("repeated or unknown node");
            }
            let mut chosen = vec![false; n];
            for &a in actions {
                chosen[a] = true;
            }
            for &a in actions {
                for &b in actions {
                    if d.adjacency[a * n + b] == 1 {
                        return Verdict::fail(format!("nodes {a} and {b} are adjacent"));
                    }
                }
            }
            // Construction ends only when every node is decided, so the set
            // must be maximal.
            for v in 0..n {
                if !chosen[v] && !(0..n).any(|u| chosen[u] && d.adjacency[u * n + v] == 1) {
                    return Verdict::fail(format!("set is not maximal: node {v} can be added"));
                }
            }
            Verdict::ok(actions.len() as f64)
        }
    }
}

fn pc_verdict(
    actions: &[usize],
    n: usize,
    depot: Point,
    coords: &[Point],
    prizes: &[f64],
    penalties: &[f64],
    min_prize: f64,
) -> Verdict {
    match prize_tour(actions, n) {
        Err(e) => Verdict::fail(e),
        Ok(cities) => {
            let prize: f64 = cities.iter().map(|&c| prizes[c]).sum();
            if prize < min_prize - TOL && cities.len() < n {
                return Verdict::fail(format!("collected prize {prize} below minimum {min_prize}"));
            }
            let mut visited = vec![false; n];
            for &c in &cities {
                visited[c] = true;
            }
            let penalty: f64 = (0..n).filter(|&i| !visited[i]).map(|i| penalties[i]).sum();
            Verdict::ok(route_length(depot, coords, &cities) + penalty)
        }
    }
}
