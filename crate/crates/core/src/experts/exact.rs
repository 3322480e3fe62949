//! Exact solvers for small instances: Held–Karp style subset DP for the
//! routing problems, subset enumeration for MIS and volume DP for knapsack.

use crate::error::{Error, Result};
use crate::problems::{Payload, ProblemInstance, ProblemKind, BUDGET_EPS};

/// Largest n handled by the exponential solvers.
pub const EXACT_LIMIT: usize = 12;

/// Volume scale for knapsack integerization; generated volumes have at most
/// two decimals so this is lossless.
pub const KNAPSACK_SCALE: f64 = 100.0;

/// Subset DP over paths that leave `start` and visit the nodes of the mask.
/// `nodes[k]` is the action index of subset bit `k`.
struct PathDp {
    nodes: Vec<usize>,
    /// `cost[mask * m + j]` = cheapest path from `start` covering `mask`, ending at bit `j`.
    cost: Vec<f64>,
    parent: Vec<u8>,
}

const NO_PARENT: u8 = u8::MAX;

impl PathDp {
    fn build(nodes: Vec<usize>, start: usize, c: &dyn Fn(usize, usize) -> f64) -> Self {
        let m = nodes.len();
        let full = 1usize << m;
        let mut cost = vec![f64::INFINITY; full * m];
        let mut parent = vec![NO_PARENT; full * m];
        for j in 0..m {
            cost[(1 << j) * m + j] = c(start, nodes[j]);
        }
        for mask in 1..full {
            for j in 0..m {
                if mask >> j & 1 == 0 {
                    continue;
                }
                let base = cost[mask * m + j];
                if !base.is_finite() {
                    continue;
                }
                for k in 0..m {
                    if mask >> k & 1 == 1 {
                        continue;
                    }
                    let next = mask | 1 << k;
                    let cand = base + c(nodes[j], nodes[k]);
                    if cand < cost[next * m + k] {
                        cost[next * m + k] = cand;
                        parent[next * m + k] = j as u8;
                    }
                }
            }
        }
        PathDp { nodes, cost, parent }
    }

    fn m(&self) -> usize {
        self.nodes.len()
    }

    fn at(&self, mask: usize, j: usize) -> f64 {
        self.cost[mask * self.m() + j]
    }

    /// Cheapest closing: (cost including the arc to `end`, last bit).
    fn close(&self, mask: usize, end: usize, c: &dyn Fn(usize, usize) -> f64) -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..self.m() {
            if mask >> j & 1 == 1 {
                let v = self.at(mask, j) + c(self.nodes[j], end);
                if v < best.0 {
                    best = (v, j);
                }
            }
        }
        best
    }

    /// Node order (action indices) of the path covering `mask` ending at bit `last`.
    fn path(&self, mut mask: usize, mut last: usize) -> Vec<usize> {
        let mut out = Vec::new();
        loop {
            out.push(self.nodes[last]);
            let p = self.parent[mask * self.m() + last];
            mask &= !(1 << last);
            if p == NO_PARENT {
                break;
            }
            last = p as usize;
        }
        out.reverse();
        out
    }
}

fn check_budget(inst: &ProblemInstance) -> Result<()> {
    if inst.kind != ProblemKind::Knapsack && inst.n > EXACT_LIMIT {
        return Err(Error::SizeLimit { n: inst.n, limit: EXACT_LIMIT });
    }
    Ok(())
}

/// Flip a route so that its first city has the lower index of the two ends.
fn orient(route: &mut [usize]) {
    if route.len() > 1 && route[route.len() - 1] < route[0] {
        route.reverse();
    }
}

/// Optimal action sequence for an instance within the exact budget.
pub fn exact_actions(inst: &ProblemInstance) -> Result<Vec<usize>> {
    check_budget(inst)?;
    let n = inst.n;
    let c = |a: usize, b: usize| inst.cost(a, b);
    match &inst.payload {
        Payload::Tsp(_) | Payload::Atsp(_) => {
            // Tours are canonical: start at city 0.
            let dp = PathDp::build((1..n).collect(), 0, &c);
            let full = (1 << (n - 1)) - 1;
            let (_, last) = dp.close(full, 0, &c);
            let mut rest = dp.path(full, last);
            if inst.kind == ProblemKind::Tsp {
                orient(&mut rest);
            }
            let mut tour = vec![0];
            tour.extend(rest);
            Ok(tour)
        }
        Payload::Cvrp(d) => {
            let dp = PathDp::build((1..=n).collect(), 0, &c);
            let full = (1usize << n) - 1;
            let load: Vec<u32> = (0..=full)
                .map(|mask| (0..n).filter(|&j| mask >> j & 1 == 1).map(|j| d.demands[j]).sum())
                .collect();
            let route: Vec<(f64, usize)> = (0..=full)
                .map(|mask| {
                    if mask == 0 || load[mask] > d.capacity {
                        (f64::INFINITY, usize::MAX)
                    } else {
                        dp.close(mask, 0, &c)
                    }
                })
                .collect();
            // Set partitioning over subsets; each block contains the lowest remaining bit.
            let mut best = vec![f64::INFINITY; full + 1];
            let mut choice = vec![0usize; full + 1];
            best[0] = 0.0;
            for mask in 1..=full {
                let low = mask & mask.wrapping_neg();
                let rest = mask ^ low;
                let mut sub = rest;
                loop {
                    let block = sub | low;
                    let v = route[block].0 + best[mask ^ block];
                    if v < best[mask] {
                        best[mask] = v;
                        choice[mask] = block;
                    }
                    if sub == 0 {
                        break;
                    }
                    sub = (sub - 1) & rest;
                }
            }
            let mut routes = Vec::new();
            let mut mask = full;
            while mask != 0 {
                let block = choice[mask];
                let mut r = dp.path(block, route[block].1);
                orient(&mut r);
                routes.push(r);
                mask ^= block;
            }
            routes.sort_by_key(|r| *r.iter().min().unwrap());
            let mut actions = Vec::new();
            for (i, r) in routes.into_iter().enumerate() {
                if i > 0 {
                    actions.push(0);
                }
                actions.extend(r);
            }
            Ok(actions)
        }
        Payload::Op(d) => {
            let dp = PathDp::build((1..=n).collect(), 0, &c);
            let full = (1usize << n) - 1;
            let mut best: (f64, f64, usize, usize) = (0.0, 0.0, 0, usize::MAX);
            for mask in 1..=full {
                let (len, last) = dp.close(mask, 0, &c);
                if len > d.length_limit + BUDGET_EPS {
                    continue;
                }
                let prize: f64 = (0..n).filter(|&j| mask >> j & 1 == 1).map(|j| d.prizes[j]).sum();
                let tie = (prize - best.0).abs() <= 1e-12;
                if prize > best.0 + 1e-12 || (tie && len < best.1) {
                    best = (prize, len, mask, last);
                }
            }
            let mut actions = if best.3 == usize::MAX {
                Vec::new()
            } else {
                let mut r = dp.path(best.2, best.3);
                orient(&mut r);
                r
            };
            actions.push(0);
            Ok(actions)
        }
        Payload::Pctsp(_) | Payload::Spctsp(_) => {
            // SPCTSP is solved with the realized prizes: the clairvoyant
            // optimum, a bound no online policy can beat.
            let (prizes, penalties, min_prize) = match &inst.payload {
                Payload::Pctsp(d) => (&d.prizes, &d.penalties, d.min_prize),
                Payload::Spctsp(d) => (&d.realized, &d.penalties, d.min_prize),
                _ => unreachable!(),
            };
            let dp = PathDp::build((1..=n).collect(), 0, &c);
            let full = (1usize << n) - 1;
            let mut best = (f64::INFINITY, 0usize, usize::MAX);
            for mask in 1..=full {
                let prize: f64 = (0..n).filter(|&j| mask >> j & 1 == 1).map(|j| prizes[j]).sum();
                if prize < min_prize && mask != full {
                    continue;
                }
                let (len, last) = dp.close(mask, 0, &c);
                let pen: f64 = (0..n).filter(|&j| mask >> j & 1 == 0).map(|j| penalties[j]).sum();
                if len + pen < best.0 {
                    best = (len + pen, mask, last);
                }
            }
            let mut r = dp.path(best.1, best.2);
            orient(&mut r);
            r.push(0);
            Ok(r)
        }
        Payload::Knapsack(d) => {
            let cap = (d.capacity * KNAPSACK_SCALE).round() as usize;
            let w: Vec<usize> = d.volumes.iter().map(|&k| (k * KNAPSACK_SCALE).round() as usize).collect();
            // table[i][c]: best value using items i.. with capacity c.
            let mut table = vec![vec![0.0f64; cap + 1]; n + 1];
            for i in (0..n).rev() {
                for cc in 0..=cap {
                    let skip = table[i + 1][cc];
                    let take = if w[i] <= cc { table[i + 1][cc - w[i]] + d.values[i] } else { f64::NEG_INFINITY };
                    table[i][cc] = skip.max(take);
                }
            }
            let mut actions = Vec::new();
            let mut cc = cap;
            for i in 0..n {
                // Prefer taking on ties so lower-index items win.
                if w[i] <= cc && table[i + 1][cc - w[i]] + d.values[i] >= table[i][cc] {
                    actions.push(i);
                    cc -= w[i];
                }
            }
            actions.push(n);
            Ok(actions)
        }
        Payload::Mis(d) => {
            let full = 1usize << n;
            let nb: Vec<usize> = (0..n)
                .map(|i| (0..n).filter(|&j| d.adjacency[i * n + j] == 1).fold(0, |m, j| m | 1 << j))
                .collect();
            let mut best = (0u32, 0usize);
            for mask in 0..full {
                let size = mask.count_ones();
                if size <= best.0 && mask != 0 {
                    continue;
                }
                if (0..n).all(|i| mask >> i & 1 == 0 || nb[i] & mask == 0) && size > best.0 {
                    best = (size, mask);
                }
            }
            Ok((0..n).filter(|&i| best.1 >> i & 1 == 1).collect())
        }
    }
}

/// Knapsack optimum by subset enumeration; test oracle for the DP.
pub fn knapsack_brute_force(values: &[f64], volumes: &[f64], capacity: f64) -> f64 {
    let n = values.len();
    let mut best = 0.0f64;
    for mask in 0usize..1 << n {
        let vol: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| volumes[i]).sum();
        if vol <= capacity + BUDGET_EPS {
            let val: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| values[i]).sum();
            best = best.max(val);
        }
    }
    best
}
