//! Construction plus local-search heuristics, one per problem.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problems::{Payload, ProblemInstance, ProblemKind, BUDGET_EPS};

use super::exact::exact_actions;

const IMPROVE_EPS: f64 = 1e-9;

/// A path with fixed endpoints `seq[0]` and `seq[len-1]` (which may be the
/// same node for closed tours). Moves touch only interior positions.
struct Path<'a> {
    seq: Vec<usize>,
    cost: &'a dyn Fn(usize, usize) -> f64,
    symmetric: bool,
}

impl<'a> Path<'a> {
    fn total(&self) -> f64 {
        path_cost(&self.seq, self.cost)
    }

    /// 2-opt reversals of interior segments until a full pass finds nothing.
    fn two_opt(&mut self) -> bool {
        let mut any = false;
        loop {
            let mut improved = false;
            let len = self.seq.len();
            if len < 4 {
                return any;
            }
            for i in 1..len - 2 {
                for j in i + 1..len - 1 {
                    let c = self.cost;
                    let s = &self.seq;
                    let delta = if self.symmetric {
                        c(s[i - 1], s[j]) + c(s[i], s[j + 1]) - c(s[i - 1], s[i]) - c(s[j], s[j + 1])
                    } else {
                        let before = path_cost(&s[i - 1..=j + 1], c);
                        let mut seg: Vec<usize> = s[i - 1..=j + 1].to_vec();
                        seg[1..=j - i + 1].reverse();
                        path_cost(&seg, c) - before
                    };
                    if delta < -IMPROVE_EPS {
                        self.seq[i..=j].reverse();
                        improved = true;
                    }
                }
            }
            if !improved {
                return any;
            }
            any = true;
        }
    }

    /// Moves segments of one to three interior nodes to a better place
    /// without reversing them.
    fn or_opt(&mut self) -> bool {
        let mut any = false;
        loop {
            let mut improved = false;
            for seg_len in 1..=3 {
                let len = self.seq.len();
                if len < seg_len + 3 {
                    continue;
                }
                let mut i = 1;
                while i + seg_len < len {
                    let base = self.total();
                    let seg: Vec<usize> = self.seq[i..i + seg_len].to_vec();
                    let mut rest: Vec<usize> = self.seq[..i].to_vec();
                    rest.extend_from_slice(&self.seq[i + seg_len..]);
                    let mut best: Option<(f64, usize)> = None;
                    for p in 1..rest.len() {
                        if p == i {
                            continue;
                        }
                        let mut cand = rest[..p].to_vec();
                        cand.extend_from_slice(&seg);
                        cand.extend_from_slice(&rest[p..]);
                        let v = path_cost(&cand, self.cost);
                        if v < base - IMPROVE_EPS && best.is_none_or(|(b, _)| v < b) {
                            best = Some((v, p));
                        }
                    }
                    if let Some((_, p)) = best {
                        let mut cand = rest[..p].to_vec();
                        cand.extend_from_slice(&seg);
                        cand.extend_from_slice(&rest[p..]);
                        self.seq = cand;
                        improved = true;
                    }
                    i += 1;
                }
            }
            if !improved {
                return any;
            }
            any = true;
        }
    }

    fn improve(&mut self) {
        loop {
            let a = self.two_opt();
            let b = self.or_opt();
            if !a && !b {
                break;
            }
        }
    }

    /// Cheapest interior insertion position and added cost for `node`.
    fn best_insertion(&self, node: usize) -> (f64, usize) {
        let c = self.cost;
        let mut best = (f64::INFINITY, 1);
        for p in 1..self.seq.len() {
            let a = self.seq[p - 1];
            let b = self.seq[p];
            let add = c(a, node) + c(node, b) - c(a, b);
            if add < best.0 {
                best = (add, p);
            }
        }
        best
    }

    fn interior(&self) -> &[usize] {
        &self.seq[1..self.seq.len() - 1]
    }
}

fn path_cost(seq: &[usize], c: &dyn Fn(usize, usize) -> f64) -> f64 {
    seq.windows(2).map(|w| c(w[0], w[1])).sum()
}

fn rotate_canonical(tour: &[usize], symmetric: bool) -> Vec<usize> {
    let n = tour.len();
    let zero = tour.iter().position(|&x| x == 0).unwrap_or(0);
    let mut out: Vec<usize> = (0..n).map(|k| tour[(zero + k) % n]).collect();
    if symmetric && n > 2 && out[n - 1] < out[1] {
        out[1..].reverse();
    }
    out
}

fn tsp_heuristic(inst: &ProblemInstance) -> Vec<usize> {
    let n = inst.n;
    let c = |a: usize, b: usize| inst.cost(a, b);
    let symmetric = inst.kind == ProblemKind::Tsp;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for start in 0..n {
        let mut tour = vec![start];
        let mut used = vec![false; n];
        used[start] = true;
        for _ in 1..n {
            let cur = *tour.last().unwrap();
            let next = (0..n)
                .filter(|&j| !used[j])
                .min_by(|&a, &b| c(cur, a).total_cmp(&c(cur, b)))
                .unwrap();
            used[next] = true;
            tour.push(next);
        }
        tour.push(start);
        let mut path = Path { seq: tour, cost: &c, symmetric };
        path.improve();
        let v = path.total();
        if best.as_ref().is_none_or(|(b, _)| v < *b - IMPROVE_EPS) {
            let mut closed = path.seq;
            closed.pop();
            best = Some((v, closed));
        }
    }
    rotate_canonical(&best.unwrap().1, symmetric)
}

fn cvrp_heuristic(inst: &ProblemInstance) -> Vec<usize> {
    let Payload::Cvrp(d) = &inst.payload else { unreachable!() };
    let n = inst.n;
    let c = |a: usize, b: usize| inst.cost(a, b);
    let cap = d.capacity;
    let demand = |a: usize| d.demands[a - 1];

    // Clarke–Wright parallel savings.
    let mut routes: Vec<Vec<usize>> = (1..=n).map(|i| vec![i]).collect();
    let mut owner: Vec<usize> = (0..=n).map(|i| i.saturating_sub(1)).collect();
    let mut savings = Vec::new();
    for i in 1..=n {
        for j in i + 1..=n {
            savings.push((c(0, i) + c(0, j) - c(i, j), i, j));
        }
    }
    savings.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(s, i, j) in &savings {
        if s <= 0.0 {
            break;
        }
        let (ri, rj) = (owner[i], owner[j]);
        if ri == rj || routes[ri].is_empty() || routes[rj].is_empty() {
            continue;
        }
        let load: u32 = routes[ri].iter().chain(&routes[rj]).map(|&a| demand(a)).sum();
        if load > cap {
            continue;
        }
        let (a, b) = (&routes[ri], &routes[rj]);
        let merged = if *a.last().unwrap() == i && b[0] == j {
            [a.clone(), b.clone()].concat()
        } else if *a.last().unwrap() == i && *b.last().unwrap() == j {
            [a.clone(), b.iter().rev().copied().collect()].concat()
        } else if a[0] == i && b[0] == j {
            [a.iter().rev().copied().collect(), b.clone()].concat()
        } else if a[0] == i && *b.last().unwrap() == j {
            [b.clone(), a.clone()].concat()
        } else {
            continue;
        };
        for &x in &merged {
            owner[x] = ri;
        }
        routes[ri] = merged;
        routes[rj].clear();
    }
    let mut routes: Vec<Vec<usize>> = routes.into_iter().filter(|r| !r.is_empty()).collect();

    let improve_route = |r: &mut Vec<usize>| {
        let mut seq = vec![0];
        seq.extend(r.iter().copied());
        seq.push(0);
        let mut p = Path { seq, cost: &c, symmetric: true };
        p.improve();
        *r = p.interior().to_vec();
    };
    for r in routes.iter_mut() {
        improve_route(r);
    }

    // Inter-route relocation.
    let route_len = |r: &[usize]| {
        let mut s = vec![0];
        s.extend_from_slice(r);
        s.push(0);
        path_cost(&s, &c)
    };
    loop {
        let mut moved = false;
        'outer: for from in 0..routes.len() {
            for pos in 0..routes[from].len() {
                let x = routes[from][pos];
                let mut shrunk = routes[from].clone();
                shrunk.remove(pos);
                let gain = route_len(&routes[from]) - route_len(&shrunk);
                for to in 0..routes.len() {
                    if to == from {
                        continue;
                    }
                    let load: u32 = routes[to].iter().map(|&a| demand(a)).sum();
                    if load + demand(x) > cap {
                        continue;
                    }
                    let base = route_len(&routes[to]);
                    for ins in 0..=routes[to].len() {
                        let mut grown = routes[to].clone();
                        grown.insert(ins, x);
                        if route_len(&grown) - base < gain - IMPROVE_EPS {
                            routes[from] = shrunk;
                            routes[to] = grown;
                            moved = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        routes.retain(|r| !r.is_empty());
        if !moved {
            break;
        }
    }
    for r in routes.iter_mut() {
        improve_route(r);
        if r.len() > 1 && r[r.len() - 1] < r[0] {
            r.reverse();
        }
    }
    routes.sort_by_key(|r| *r.iter().min().unwrap());
    let mut actions = Vec::new();
    for (i, r) in routes.into_iter().enumerate() {
        if i > 0 {
            actions.push(0);
        }
        actions.extend(r);
    }
    actions
}

/// Orienteering: ratio-greedy insertion, tour shortening, repeat.
fn op_heuristic(inst: &ProblemInstance) -> Vec<usize> {
    let Payload::Op(d) = &inst.payload else { unreachable!() };
    let n = inst.n;
    let c = |a: usize, b: usize| inst.cost(a, b);
    let mut path = Path { seq: vec![0, 0], cost: &c, symmetric: true };
    loop {
        let len = path.total();
        let mut best: Option<(f64, usize, usize)> = None;
        for node in 1..=n {
            if path.seq.contains(&node) {
                continue;
            }
            let (add, pos) = path.best_insertion(node);
            if len + add > d.length_limit + BUDGET_EPS {
                continue;
            }
            let ratio = d.prizes[node - 1] / add.max(1e-12);
            if best.is_none_or(|(r, _, _)| ratio > r) {
                best = Some((ratio, node, pos));
            }
        }
        match best {
            Some((_, node, pos)) => {
                path.seq.insert(pos, node);
                path.improve();
            }
            None => break,
        }
    }
    let mut r = path.interior().to_vec();
    if r.len() > 1 && r[r.len() - 1] < r[0] {
        r.reverse();
    }
    r.push(0);
    r
}

/// Plans an open path `start -> .. -> 0` over `candidates` that collects at
/// least `need` prize and trades travel against penalties.
fn pc_plan(
    start: usize,
    candidates: &[usize],
    prize: &dyn Fn(usize) -> f64,
    penalty: &dyn Fn(usize) -> f64,
    need: f64,
    c: &dyn Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let mut path = Path { seq: vec![start, 0], cost: c, symmetric: true };
    let collected = |p: &Path| p.interior().iter().map(|&x| prize(x)).sum::<f64>();
    // Reach the prize requirement by ratio-greedy insertion.
    while collected(&path) < need {
        let mut best: Option<(f64, usize, usize)> = None;
        for &node in candidates {
            if path.seq[1..].contains(&node) {
                continue;
            }
            let (add, pos) = path.best_insertion(node);
            let ratio = (prize(node) + penalty(node)) / add.max(1e-12);
            if best.is_none_or(|(r, _, _)| ratio > r) {
                best = Some((ratio, node, pos));
            }
        }
        match best {
            Some((_, node, pos)) => path.seq.insert(pos, node),
            None => break,
        }
    }
    path.improve();
    loop {
        let mut changed = false;
        // Add nodes whose penalty outweighs the detour.
        let mut best: Option<(f64, usize, usize)> = None;
        for &node in candidates {
            if path.seq[1..].contains(&node) {
                continue;
            }
            let (add, pos) = path.best_insertion(node);
            let gain = penalty(node) - add;
            if gain > IMPROVE_EPS && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, node, pos));
            }
        }
        if let Some((_, node, pos)) = best {
            path.seq.insert(pos, node);
            changed = true;
        }
        // Drop nodes whose detour outweighs their penalty.
        let total = collected(&path);
        let mut drop: Option<(f64, usize)> = None;
        for p in 1..path.seq.len() - 1 {
            let x = path.seq[p];
            if total - prize(x) < need {
                continue;
            }
            let saving = c(path.seq[p - 1], x) + c(x, path.seq[p + 1]) - c(path.seq[p - 1], path.seq[p + 1]);
            let gain = saving - penalty(x);
            if gain > IMPROVE_EPS && drop.is_none_or(|(g, _)| gain > g) {
                drop = Some((gain, p));
            }
        }
        if let Some((_, p)) = drop {
            path.seq.remove(p);
            changed = true;
        }
        if changed {
            path.improve();
        } else {
            break;
        }
    }
    path.interior().to_vec()
}

fn pctsp_heuristic(inst: &ProblemInstance) -> Vec<usize> {
    let Payload::Pctsp(d) = &inst.payload else { unreachable!() };
    let n = inst.n;
    let c = |a: usize, b: usize| inst.cost(a, b);
    let candidates: Vec<usize> = (1..=n).collect();
    let mut r = pc_plan(0, &candidates, &|x| d.prizes[x - 1], &|x| d.penalties[x - 1], d.min_prize, &c);
    if r.len() > 1 && r[r.len() - 1] < r[0] {
        r.reverse();
    }
    r.push(0);
    r
}

/// Online re-planning: plan on expected prizes, commit one move, observe the
/// realized prize of the visited node, re-plan from there.
fn spctsp_heuristic(inst: &ProblemInstance) -> Vec<usize> {
    let Payload::Spctsp(d) = &inst.payload else { unreachable!() };
    let n = inst.n;
    let c = |a: usize, b: usize| inst.cost(a, b);
    let mut visited = vec![false; n];
    let mut collected = 0.0;
    let mut cur = 0;
    let mut actions = Vec::new();
    loop {
        let candidates: Vec<usize> = (1..=n).filter(|&x| !visited[x - 1]).collect();
        let need = (d.min_prize - collected).max(0.0);
        let satisfied = collected >= d.min_prize || candidates.is_empty();
        let plan = pc_plan(cur, &candidates, &|x| d.expected[x - 1], &|x| d.penalties[x - 1], need, &c);
        match plan.first() {
            Some(&next) => {
                actions.push(next);
                visited[next - 1] = true;
                collected += d.realized[next - 1];
                cur = next;
            }
            None if satisfied => {
                actions.push(0);
                return actions;
            }
            // Expected prizes say the requirement is met but realized ones
            // fell short: keep visiting the best remaining ratio.
            None => {
                let next = *candidates
                    .iter()
                    .max_by(|&&a, &&b| {
                        let ra = (d.expected[a - 1] + d.penalties[a - 1]) / c(cur, a).max(1e-12);
                        let rb = (d.expected[b - 1] + d.penalties[b - 1]) / c(cur, b).max(1e-12);
                        ra.total_cmp(&rb).then(b.cmp(&a))
                    })
                    .unwrap();
                actions.push(next);
                visited[next - 1] = true;
                collected += d.realized[next - 1];
                cur = next;
            }
        }
    }
}

/// Min-degree greedy followed by (1,2)-swaps and seeded plateau perturbation.
fn mis_heuristic(inst: &ProblemInstance) -> Vec<usize> {
    let Payload::Mis(d) = &inst.payload else { unreachable!() };
    let n = inst.n;
    let adj = |a: usize, b: usize| d.adjacency[a * n + b] == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ 0x5eed_0f_315);

    let fill = |sol: &mut Vec<bool>| {
        loop {
            let free: Vec<usize> =
                (0..n).filter(|&v| !sol[v] && !(0..n).any(|u| sol[u] && adj(u, v))).collect();
            if free.is_empty() {
                break;
            }
            let deg = |v: usize| free.iter().filter(|&&u| adj(u, v)).count();
            let v = *free.iter().min_by_key(|&&v| (deg(v), v)).unwrap();
            sol[v] = true;
        }
    };
    let two_improve = |sol: &mut Vec<bool>| {
        'again: loop {
            for x in (0..n).filter(|&x| sol[x]) {
                // Nodes whose only selected neighbor is x.
                let cand: Vec<usize> = (0..n)
                    .filter(|&v| !sol[v] && adj(x, v) && (0..n).filter(|&u| sol[u] && adj(u, v)).count() == 1)
                    .collect();
                for (a, &u) in cand.iter().enumerate() {
                    for &v in &cand[a + 1..] {
                        if !adj(u, v) {
                            sol[x] = false;
                            sol[u] = true;
                            sol[v] = true;
                            continue 'again;
                        }
                    }
                }
            }
            break;
        }
    };

    let mut sol = vec![false; n];
    fill(&mut sol);
    two_improve(&mut sol);
    fill(&mut sol);
    let size = |s: &Vec<bool>| s.iter().filter(|&&b| b).count();
    let mut best = sol.clone();
    for _ in 0..(20 * n) {
        let outside: Vec<usize> = (0..n).filter(|&v| !sol[v]).collect();
        let Some(&v) = outside.choose(&mut rng) else { break };
        let mut cand = sol.clone();
        for u in 0..n {
            if adj(u, v) {
                cand[u] = false;
            }
        }
        cand[v] = true;
        fill(&mut cand);
        two_improve(&mut cand);
        fill(&mut cand);
        // Accept plateau moves, occasionally a step down.
        if size(&cand) >= size(&sol) || rng.gen::<f64>() < 0.05 {
            sol = cand;
        }
        if size(&sol) > size(&best) {
            best = sol.clone();
        }
    }
    (0..n).filter(|&v| best[v]).collect()
}

pub fn heuristic_actions(inst: &ProblemInstance) -> Vec<usize> {
    match inst.kind {
        ProblemKind::Tsp | ProblemKind::Atsp => tsp_heuristic(inst),
        ProblemKind::Cvrp => cvrp_heuristic(inst),
        ProblemKind::Op => op_heuristic(inst),
        ProblemKind::Pctsp => pctsp_heuristic(inst),
        ProblemKind::Spctsp => spctsp_heuristic(inst),
        ProblemKind::Knapsack => exact_actions(inst).expect("knapsack DP has no size limit"),
        ProblemKind::Mis => mis_heuristic(inst),
    }
}
