use super::*;
use crate::rng::chain_rng;

fn spread(row: &[f64]) -> f64 {
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

fn hand_pools(spec: &ModelSpec, y: &ObservationSequence, states: &[&[f64]], scheme: Scheme) -> PoolSet {
    // states[i] holds pool i flattened, P = 1
    let pools = states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rows: Vec<Vec<f64>> = s.iter().map(|v| vec![*v]).collect();
            Pool::from_states(spec, y.row(i), &rows)
        })
        .collect();
    PoolSet { pools, current: vec![0; states.len()], scheme, flip: false }
}

fn seq_weight(spec: &ModelSpec, y: &ObservationSequence, xs: &[f64], log_kappa: &[f64]) -> f64 {
    let mut w = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let prev = if i == 0 { None } else { Some(&xs[i - 1..i]) };
        w += spec.log_trans_density(prev, &[*x]) + spec.log_obs_density(&[*x], y.row(i)) - log_kappa[i];
    }
    w
}

/// Enumerates all `L^n` sequences through `P = 1` pools with their exact
/// selection probabilities `∝ p(x, y) / Π κ_i(x_i)`.
fn enumerate(pools: &PoolSet, spec: &ModelSpec, y: &ObservationSequence, log_kappa: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
    let n = pools.len();
    let l = pools.pools[0].len();
    let total = l.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let idx: Vec<usize> = (0..n).map(|i| (code / l.pow(i as u32)) % l).collect();
        let xs: Vec<f64> = idx.iter().enumerate().map(|(i, &k)| pools.pools[i].state(k)[0]).collect();
        let lk: Vec<f64> = idx.iter().enumerate().map(|(i, &k)| log_kappa[i][k]).collect();
        out.push((idx, seq_weight(spec, y, &xs, &lk)));
    }
    let m = out.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = out.iter().map(|o| (o.1 - m).exp()).sum();
    out.iter_mut().for_each(|o| o.1 = (o.1 - m).exp() / z);
    out
}

fn index_of(pools: &PoolSet, x: &LatentSequence) -> Vec<usize> {
    (0..pools.len())
        .map(|i| (0..pools.pools[i].len()).find(|&k| pools.pools[i].state(k) == x.row(i)).unwrap())
        .collect()
}

fn check_frequencies<F>(pools: &PoolSet, exact: &[(Vec<usize>, f64)], draws: usize, mut draw: F)
where
    F: FnMut() -> LatentSequence,
{
    let mut counts = vec![0usize; exact.len()];
    for _ in 0..draws {
        let x = draw();
        let idx = index_of(pools, &x);
        let pos = exact.iter().position(|e| e.0 == idx).unwrap();
        counts[pos] += 1;
    }
    for (c, e) in counts.iter().zip(exact) {
        let f = *c as f64 / draws as f64;
        let se = (e.1 * (1.0 - e.1) / draws as f64).sqrt();
        assert!((f - e.1).abs() < 5.0 * se + 1e-3, "sequence {:?}: {f} vs {}", e.0, e.1);
    }
}

fn small_problem() -> (ModelSpec, ObservationSequence) {
    let spec = ModelSpec::log_link(3, 1, 0.8, 0.0, -0.2, 0.9).unwrap();
    let y = Sequence::new(3, 1, vec![2.0, 0.0, 1.0]).unwrap();
    (spec, y)
}

const STATES: [&[f64]; 3] = [&[-0.7, 0.4], &[1.1, -0.2], &[0.3, -1.5]];

#[test]
fn alpha_matches_brute_force() {
    let (spec, y) = small_problem();
    let pools = hand_pools(&spec, &y, &STATES, Scheme::Forward);
    let log_kappa = vec![vec![0.3, -0.8], vec![1.2, 0.1], vec![-0.4, 0.5]];
    let alpha = compute_alpha(&pools, &spec, &log_kappa);

    let p = |prev: Option<f64>, x: f64| spec.log_trans_density(prev.as_ref().map(std::slice::from_ref), &[x]).exp();
    let g = |i: usize, x: f64| spec.log_obs_density(&[x], y.row(i)).exp();
    let mut lin = vec![[0.0; 2]; 3];
    for k in 0..2 {
        let x = STATES[0][k];
        lin[0][k] = p(None, x) * g(0, x) / log_kappa[0][k].exp();
    }
    for i in 1..3 {
        for k in 0..2 {
            let x = STATES[i][k];
            let s: f64 = (0..2).map(|m| p(Some(STATES[i - 1][m]), x) * lin[i - 1][m]).sum();
            lin[i][k] = g(i, x) / log_kappa[i][k].exp() * s;
        }
    }
    for i in 0..3 {
        let expect = (lin[i][0] / lin[i][1]).ln();
        assert!((alpha[i][0] - alpha[i][1] - expect).abs() < 1e-10);
    }
}

#[test]
fn beta_matches_brute_force() {
    let (spec, y) = small_problem();
    let pools = hand_pools(&spec, &y, &STATES, Scheme::Backward);
    let log_kappa = vec![vec![0.3, -0.8], vec![1.2, 0.1], vec![-0.4, 0.5]];
    let beta = compute_beta(&pools, &spec, &log_kappa);

    let p = |prev: f64, x: f64| spec.log_trans_density(Some(&[prev]), &[x]).exp();
    let g = |i: usize, x: f64| spec.log_obs_density(&[x], y.row(i)).exp();
    // time-n pool density folded into the time-n weight
    let mut lin = vec![[1.0; 2]; 3];
    for k in 0..2 {
        let x = STATES[1][k];
        let s: f64 = (0..2).map(|m| g(2, STATES[2][m]) / log_kappa[2][m].exp() * p(x, STATES[2][m])).sum();
        lin[1][k] = s / log_kappa[1][k].exp();
    }
    for k in 0..2 {
        let x = STATES[0][k];
        let s: f64 = (0..2).map(|m| g(1, STATES[1][m]) * p(x, STATES[1][m]) * lin[1][m]).sum();
        lin[0][k] = s / log_kappa[0][k].exp();
    }
    assert_eq!(beta[2], vec![0.0, 0.0]);
    for i in 0..2 {
        let expect = (lin[i][0] / lin[i][1]).ln();
        assert!((beta[i][0] - beta[i][1] - expect).abs() < 1e-10);
    }
}

#[test]
fn backward_pass_draws_exact_sequence_law() {
    let (spec, y) = small_problem();
    let pools = hand_pools(&spec, &y, &STATES, Scheme::Forward);
    let log_kappa = vec![vec![0.3, -0.8], vec![1.2, 0.1], vec![-0.4, 0.5]];
    let alpha = compute_alpha(&pools, &spec, &log_kappa);
    let exact = enumerate(&pools, &spec, &y, &log_kappa);
    let mut rng = chain_rng(11, 0);
    let mut tally = Tally::default();
    check_frequencies(&pools, &exact, 100_000, || backward_pass(&pools, &spec, Some(&alpha), &mut rng, &mut tally).unwrap());
}

#[test]
fn forward_pass_draws_exact_sequence_law() {
    let (spec, y) = small_problem();
    let pools = hand_pools(&spec, &y, &STATES, Scheme::Backward);
    let log_kappa = vec![vec![0.3, -0.8], vec![1.2, 0.1], vec![-0.4, 0.5]];
    let beta = compute_beta(&pools, &spec, &log_kappa);
    let exact = enumerate(&pools, &spec, &y, &log_kappa);
    let mut rng = chain_rng(12, 0);
    let mut tally = Tally::default();
    check_frequencies(&pools, &exact, 100_000, || {
        forward_pass(&pools, &spec, Some(&beta), Some(&log_kappa[2]), &mut rng, &mut tally).unwrap()
    });
}

#[test]
fn constant_alpha_fast_path_matches_sequential_forward_law() {
    let (spec, y) = small_problem();
    let pools = hand_pools(&spec, &y, &STATES, Scheme::Forward);
    let kappa = forward_pool_log_density(&pools, &spec);
    let exact = enumerate(&pools, &spec, &y, &kappa);
    let mut rng = chain_rng(13, 0);
    let mut tally = Tally::default();
    check_frequencies(&pools, &exact, 100_000, || backward_pass(&pools, &spec, None, &mut rng, &mut tally).unwrap());
}

#[test]
fn constant_beta_fast_path_matches_sequential_backward_law() {
    let (spec, y) = small_problem();
    let pools = hand_pools(&spec, &y, &STATES, Scheme::Backward);
    let kappa = backward_pool_log_density(&pools, &spec);
    let exact = enumerate(&pools, &spec, &y, &kappa);
    let mut rng = chain_rng(14, 0);
    let mut tally = Tally::default();
    check_frequencies(&pools, &exact, 100_000, || {
        forward_pass(&pools, &spec, None, Some(&kappa[2]), &mut rng, &mut tally).unwrap()
    });
}

fn sample_problem(p: usize, n: usize, seed: u64) -> (ModelSpec, LatentSequence, ObservationSequence) {
    let spec = ModelSpec::log_link(n, p, 0.9, 0.5, -0.4, 0.8).unwrap();
    let (x, y) = spec.simulate(seed);
    (spec, x, y)
}

#[test]
fn sequential_alpha_and_beta_are_constant() {
    let (spec, x, y) = sample_problem(2, 6, 3);
    let mut rng = chain_rng(3, 1);
    let mut tally = Tally::default();
    let config = EhmmConfig::new(8, (0.1, 0.4));
    for flip in [false, true] {
        let config = config.clone().with_flip(flip);
        let fwd = build_pools(&x, &spec, &y, &config, Scheme::Forward, &mut rng, &mut tally).unwrap();
        let kappa = forward_pool_log_density(&fwd, &spec);
        for row in compute_alpha(&fwd, &spec, &kappa) {
            assert!(spread(&row) < 1e-10, "alpha spread {}", spread(&row));
        }
        let bwd = build_pools(&x, &spec, &y, &config, Scheme::Backward, &mut rng, &mut tally).unwrap();
        let kappa = backward_pool_log_density(&bwd, &spec);
        for row in compute_beta(&bwd, &spec, &kappa) {
            assert!(spread(&row) < 1e-10, "beta spread {}", spread(&row));
        }
    }
}

#[test]
fn current_sequence_is_in_every_pool() {
    let (spec, x, y) = sample_problem(2, 7, 5);
    let mut rng = chain_rng(5, 2);
    let mut tally = Tally::default();
    for scheme in [Scheme::Forward, Scheme::Backward] {
        for flip in [false, true] {
            for _ in 0..20 {
                let config = EhmmConfig::new(6, (0.1, 0.9)).with_flip(flip);
                let pools = build_pools(&x, &spec, &y, &config, scheme, &mut rng, &mut tally).unwrap();
                for i in 0..x.len() {
                    assert_eq!(pools.pools[i].state(pools.current[i]), x.row(i));
                }
            }
        }
    }
}

#[test]
fn single_state_pools_keep_the_current_sequence() {
    let (spec, x, y) = sample_problem(2, 5, 6);
    let mut rng = chain_rng(6, 0);
    let mut tally = Tally::default();
    let config = EhmmConfig::new(1, (0.2, 0.8));
    for dir in [Direction::Forward, Direction::Reversed, Direction::Backward] {
        let out = ehmm_update(&x, &spec, &y, &config, dir, &mut rng, &mut tally).unwrap();
        assert_eq!(out, x);
    }
    let out = independence_pool_update(&x, &spec, &y, 1, Direction::Forward, &mut rng, &mut tally).unwrap();
    assert_eq!(out, x);
}

#[test]
fn flip_pools_are_mirror_pairs_under_sign_symmetry() {
    let spec = ModelSpec::abs_poisson(6, 2, 0.9, 0.5, 0.8).unwrap();
    let (x, y) = spec.simulate(9);
    let mut rng = chain_rng(9, 0);
    let mut tally = Tally::default();
    let config = EhmmConfig::new(4, (0.1, 0.5)).with_flip(true);
    for _ in 0..20 {
        let pools = build_pools(&x, &spec, &y, &config, Scheme::Forward, &mut rng, &mut tally).unwrap();
        for pool in &pools.pools {
            for j in (0..pool.len()).step_by(2) {
                let neg: Vec<f64> = pool.state(j).iter().map(|v| -v).collect();
                assert_eq!(pool.state(j + 1), neg.as_slice());
                assert_eq!(pool.link(j + 1), pool.link(j).map(mirror_index));
            }
        }
    }
    assert_eq!(tally.flip.total.accepted, tally.flip.total.proposed);
}

#[test]
fn pool_chain_marginals_match_their_targets() {
    // one long pool chain at time 2 (forward) and time 1 (backward)
    let spec = ModelSpec::log_link(2, 1, 0.8, 0.0, 0.0, 1.0).unwrap();
    let y = Sequence::new(2, 1, vec![2.0, 0.0]).unwrap();
    let adj_states = vec![vec![-1.0], vec![0.5], vec![2.0]];
    let size = 100_000;
    let config = EhmmConfig::new(size, (0.2, 1.0));
    let mut rng = chain_rng(21, 0);
    let mut tally = Tally::default();

    let prev = Pool::from_states(&spec, y.row(0), &adj_states);
    let forward = PoolTarget::new(&spec, TargetKind::Linked { y: y.row(1), prev: &prev });
    let next = Pool::from_states(&spec, y.row(1), &adj_states);
    let geometry = BackwardGeometry::new(&spec).unwrap();
    let backward = PoolTarget::new(&spec, TargetKind::BackLinked { next: &next, geometry: &geometry });

    for (target, own) in [(forward, y.row(1)), (backward, y.row(0))] {
        let link = target.init_link(&[0.3], &mut rng, &mut tally).unwrap();
        let start = PoolState { x: vec![0.3], link };
        let (pool, _) = generate_pool(&target, &start, own, &config, 0, &mut rng, &mut tally).unwrap();

        let (lo, width, bins) = (-6.0, 0.1, 120);
        let mut hist = vec![0.0; bins];
        for k in 0..pool.len() {
            let b = ((pool.state(k)[0] - lo) / width).floor();
            if (0.0..bins as f64).contains(&b) {
                hist[b as usize] += 1.0 / size as f64;
            }
        }
        // target marginal integrated on a fine grid
        let sub = 20;
        let mut dens = vec![0.0; bins];
        let mut scratch = Tally::default();
        for (b, d) in dens.iter_mut().enumerate() {
            for s in 0..sub {
                let v = lo + width * (b as f64 + (s as f64 + 0.5) / sub as f64);
                let terms: Vec<f64> = (0..3).map(|l| target.log_density(&[v], Some(l), &mut scratch)).collect();
                *d += crate::linalg::log_sum_exp(&terms).exp();
            }
        }
        let z: f64 = dens.iter().sum();
        let tv: f64 = 0.5 * hist.iter().zip(&dens).map(|(h, d)| (h - d / z).abs()).sum::<f64>();
        assert!(tv < 0.05, "total variation {tv}");
    }
}

#[test]
fn cost_is_linear_in_pool_size() {
    let (spec, x, y) = sample_problem(2, 20, 7);
    let mut rng = chain_rng(7, 0);
    for dir in [Direction::Forward, Direction::Backward] {
        let count = |l: usize, rng: &mut crate::rng::ChainRng| {
            let mut tally = Tally::default();
            let config = EhmmConfig::new(l, (0.2, 0.8));
            ehmm_update(&x, &spec, &y, &config, dir, rng, &mut tally).unwrap();
            tally.density_evals()
        };
        let (a, b) = (count(50, &mut rng), count(100, &mut rng));
        assert!((b as f64) <= 2.2 * a as f64, "{dir:?}: {a} -> {b}");
    }
}

#[test]
fn independence_pools_accept_everything_under_flat_observations() {
    // c = sigma = 0 makes every observation density constant in x
    let spec = ModelSpec::log_link(5, 2, 0.9, 0.3, 0.0, 0.0).unwrap();
    let (x, y) = spec.simulate(2);
    let mut rng = chain_rng(2, 0);
    let mut tally = Tally::default();
    for _ in 0..10 {
        independence_pool_update(&x, &spec, &y, 10, Direction::Forward, &mut rng, &mut tally).unwrap();
    }
    assert!(tally.independence.total.proposed > 0);
    assert_eq!(tally.independence.total.accepted, tally.independence.total.proposed);
}

#[test]
fn invalid_configurations_are_rejected() {
    let (spec, x, y) = sample_problem(2, 4, 1);
    let mut rng = chain_rng(1, 0);
    let mut tally = Tally::default();
    let odd = EhmmConfig::new(3, (0.1, 0.2)).with_flip(true);
    assert!(matches!(ehmm_update(&x, &spec, &y, &odd, Direction::Forward, &mut rng, &mut tally), Err(Error::Config(_))));
    let bad_eps = EhmmConfig::new(4, (0.5, 0.1));
    assert!(bad_eps.validate().is_err());

    let zero_phi = ModelSpec::new(4, vec![0.9, 0.0], 0.0, spec.obs().clone()).unwrap();
    let ok = EhmmConfig::new(4, (0.1, 0.2));
    let res = ehmm_update(&x, &zero_phi, &y, &ok, Direction::Backward, &mut rng, &mut tally);
    assert!(matches!(res, Err(Error::Config(_))));

    let hetero = ModelSpec::new(4, vec![0.9, 0.5], 0.5, spec.obs().clone()).unwrap();
    let res = ehmm_update(&x, &hetero, &y, &ok, Direction::Reversed, &mut rng, &mut tally);
    assert!(matches!(res, Err(Error::Config(_))));
}

#[test]
fn updates_are_reproducible() {
    let (spec, x, y) = sample_problem(2, 8, 4);
    let config = EhmmConfig::new(10, (0.1, 0.5)).with_flip(true);
    let run = |seed| {
        let mut rng = chain_rng(seed, 3);
        let mut tally = Tally::default();
        let mut cur = x.clone();
        for k in 0..5 {
            let dir = if k % 2 == 0 { Direction::Forward } else { Direction::Backward };
            cur = ehmm_update(&cur, &spec, &y, &config, dir, &mut rng, &mut tally).unwrap();
        }
        (cur, tally)
    };
    assert_eq!(run(8), run(8));
    assert_ne!(run(8).0, run(9).0);
}
