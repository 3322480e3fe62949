use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Generator knobs that are not part of the published data schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenOptions {
    /// Multiply each directed ATSP arc by U(0.8, 1.2).
    pub atsp_noise: bool,
    /// Erdős–Rényi edge probability for MIS graphs.
    pub mis_edge_prob: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { atsp_noise: false, mis_edge_prob: 0.3 }
    }
}

pub fn generate_instance(kind: ProblemKind, n: usize, seed: u64) -> Result<ProblemInstance> {
    generate_instance_with(kind, n, seed, GenOptions::default())
}

/// CVRP vehicle capacity by size: 20 up to 10 nodes, 30 up to 20, 40 up to 50, 50 beyond.
pub fn cvrp_capacity(n: usize) -> u32 {
    match n {
        0..=10 => 20,
        11..=20 => 30,
        21..=50 => 40,
        _ => 50,
    }
}

/// Half tour-length scale used for OP length limits and PCTSP penalties.
pub fn length_scale(n: usize) -> f64 {
    match n {
        0..=20 => 2.0,
        21..=50 => 3.0,
        _ => 4.0,
    }
}

/// Knapsack capacity `floor(1.5 n)`: 30 at n = 20 and 75 at n = 50.
pub fn knapsack_capacity(n: usize) -> f64 {
    (3 * n / 2) as f64
}

fn rng_for(kind: ProblemKind, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.index() as u64 + 1);
    rng
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()
}

pub fn generate_instance_with(
    kind: ProblemKind,
    n: usize,
    seed: u64,
    opts: GenOptions,
) -> Result<ProblemInstance> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("n = {n}, need n >= 2")));
    }
    let mut rng = rng_for(kind, seed);
    let payload = match kind {
        ProblemKind::Tsp => Payload::Tsp(TspData { coords: points(&mut rng, n) }),
        ProblemKind::Cvrp => {
            let depot = [rng.gen(), rng.gen()];
            let coords = points(&mut rng, n);
            let demands = (0..n).map(|_| rng.gen_range(1..=9)).collect();
            Payload::Cvrp(CvrpData { depot, coords, demands, capacity: cvrp_capacity(n) })
        }
        ProblemKind::Op => {
            let depot: Point = [rng.gen(), rng.gen()];
            let coords = points(&mut rng, n);
            let d0: Vec<f64> = coords.iter().map(|&c| dist(depot, c)).collect();
            let dmax = d0.iter().cloned().fold(0.0, f64::max);
            let prizes = d0
                .iter()
                .map(|&d| {
                    let ratio = if dmax > 0.0 { d / dmax } else { 0.0 };
                    (1.0 + (99.0 * ratio).floor()) / 100.0
                })
                .collect();
            Payload::Op(OpData { depot, coords, prizes, length_limit: length_scale(n) })
        }
        ProblemKind::Pctsp | ProblemKind::Spctsp => {
            let depot: Point = [rng.gen(), rng.gen()];
            let coords = points(&mut rng, n);
            let scale = 4.0 / n as f64;
            let prizes: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * scale).collect();
            let pmax = 3.0 * length_scale(n) / n as f64;
            let penalties = (0..n).map(|_| rng.gen::<f64>() * pmax).collect();
            if kind == ProblemKind::Pctsp {
                Payload::Pctsp(PctspData { depot, coords, prizes, penalties, min_prize: 1.0 })
            } else {
                // Realized prizes come from the same distribution as the
                // visible expectations and stay hidden until a visit.
                let realized = (0..n).map(|_| rng.gen::<f64>() * scale).collect();
                Payload::Spctsp(SpctspData {
                    depot,
                    coords,
                    expected: prizes,
                    realized,
                    penalties,
                    min_prize: 1.0,
                })
            }
        }
        ProblemKind::Knapsack => {
            // Even integer values keep both volume choices integral, so
            // discrete tokens carry them exactly.
            let values: Vec<f64> = (0..n).map(|_| 2.0 * rng.gen_range(1..=10) as f64).collect();
            let volumes = values
                .iter()
                .map(|&v| if rng.gen::<bool>() { 0.5 * v } else { 1.5 * v })
                .collect();
            Payload::Knapsack(KnapsackData { values, volumes, capacity: knapsack_capacity(n) })
        }
        ProblemKind::Atsp => {
            let coords = points(&mut rng, n);
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let mut c = dist(coords[i], coords[j]);
                        if opts.atsp_noise {
                            c *= rng.gen_range(0.8..1.2);
                        }
                        d[i * n + j] = c;
                    }
                }
            }
            Payload::Atsp(AtspData { dist: d })
        }
        ProblemKind::Mis => {
            let mut adj = vec![0u8; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen::<f64>() < opts.mis_edge_prob {
                        adj[i * n + j] = 1;
                        adj[j * n + i] = 1;
                    }
                }
            }
            Payload::Mis(MisData { adjacency: adj })
        }
    };
    let inst = ProblemInstance { kind, n, seed, payload };
    debug_assert!(inst.validate().is_ok());
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsp_points_in_unit_square() {
        let inst = generate_instance(ProblemKind::Tsp, 20, 3).unwrap();
        let Payload::Tsp(d) = &inst.payload else { panic!() };
        assert_eq!(d.coords.len(), 20);
        assert!(d.coords.iter().flatten().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn cvrp_capacity_and_demands() {
        let inst = generate_instance(ProblemKind::Cvrp, 20, 9).unwrap();
        let Payload::Cvrp(d) = &inst.payload else { panic!() };
        assert_eq!(d.capacity, 30);
        assert!(d.demands.iter().all(|&q| (1..=9).contains(&q)));
    }

    #[test]
    fn knapsack_volumes_are_half_or_one_and_half() {
        for seed in 0..20 {
            let inst = generate_instance(ProblemKind::Knapsack, 20, seed).unwrap();
            let Payload::Knapsack(d) = &inst.payload else { panic!() };
            assert_eq!(d.capacity, 30.0);
            for (v, k) in d.values.iter().zip(&d.volumes) {
                assert!((2.0..=20.0).contains(v));
                assert!(*k == 0.5 * v || *k == 1.5 * v);
            }
        }
        let inst = generate_instance(ProblemKind::Knapsack, 50, 0).unwrap();
        let Payload::Knapsack(d) = &inst.payload else { panic!() };
        assert_eq!(d.capacity, 75.0);
    }

    #[test]
    fn op_prizes_follow_distance() {
        let inst = generate_instance(ProblemKind::Op, 20, 5).unwrap();
        let Payload::Op(d) = &inst.payload else { panic!() };
        assert_eq!(d.length_limit, 2.0);
        assert!(d.prizes.iter().all(|&p| p > 0.0 && p <= 1.0));
        // The farthest node gets the full prize.
        assert!(d.prizes.contains(&1.0));
    }

    #[test]
    fn mis_symmetric_zero_diagonal() {
        let inst = generate_instance(ProblemKind::Mis, 12, 1).unwrap();
        assert!(inst.validate().is_ok());
    }

    #[test]
    fn atsp_noise_breaks_symmetry() {
        let opts = GenOptions { atsp_noise: true, ..Default::default() };
        let inst = generate_instance_with(ProblemKind::Atsp, 6, 1, opts).unwrap();
        let Payload::Atsp(d) = &inst.payload else { panic!() };
        assert!((0..6).any(|i| (0..6).any(|j| d.dist[i * 6 + j] != d.dist[j * 6 + i])));
        let plain = generate_instance(ProblemKind::Atsp, 6, 1).unwrap();
        let Payload::Atsp(d) = &plain.payload else { panic!() };
        assert!((0..6).all(|i| (0..6).all(|j| d.dist[i * 6 + j] == d.dist[j * 6 + i])));
    }

    #[test]
    fn same_seed_same_bytes() {
        for k in ProblemKind::ALL {
            let a = generate_instance(k, 9, 77).unwrap().to_json_line();
            let b = generate_instance(k, 9, 77).unwrap().to_json_line();
            assert_eq!(a, b);
            let c = generate_instance(k, 9, 78).unwrap().to_json_line();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(generate_instance(ProblemKind::Tsp, 1, 0), Err(Error::InvalidSize(_))));
    }
}
