use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use seqpool::ehmm::{
    backward_pool_log_density, build_pools, compute_alpha, compute_beta, forward_pool_log_density, mirror_index,
    shift_forward, BackwardGeometry, Pool, PoolTarget, Scheme, TargetKind,
};
use seqpool::linalg::{log_sum_exp, Cholesky};
use seqpool::model::{lyapunov_covariance, stationary_covariance};
use seqpool::{ehmm_update, Direction, EhmmConfig, ModelSpec, ObsModel, Sequence, Tally};

fn phi_strategy(p: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-0.95..-0.05f64, 0.05..0.95f64], p)
}

fn rho_strategy(p: usize) -> impl Strategy<Value = f64> {
    let lower = if p > 1 { -0.9 / (p as f64 - 1.0) } else { -0.9 };
    lower.max(-0.9)..0.9
}

fn obs_strategy(p: usize) -> impl Strategy<Value = ObsModel> {
    prop_oneof![
        (prop::collection::vec(-1.0..1.0f64, p), prop::collection::vec(0.1..1.0f64, p))
            .prop_map(|(c, sigma)| ObsModel::LogLinkPoisson { c, sigma }),
        prop::collection::vec(0.2..1.5f64, p).prop_map(|sigma| ObsModel::AbsPoisson { sigma }),
        prop::collection::vec(0.3..2.0f64, p).prop_map(|tau| ObsModel::GaussianObs { tau }),
    ]
}

/// A model together with a simulation seed.
fn instance(max_n: usize, max_p: usize) -> impl Strategy<Value = (ModelSpec, u64)> {
    (1..=max_n, 1..=max_p).prop_flat_map(|(n, p)| {
        (phi_strategy(p), rho_strategy(p), obs_strategy(p), any::<u64>())
            .prop_map(move |(phi, rho, obs, seed)| (ModelSpec::new(n, phi, rho, obs).unwrap(), seed))
    })
}

fn spread(row: &[f64]) -> f64 {
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn current_state_sits_at_recorded_position(
        (spec, seed) in instance(8, 3),
        half in 1usize..5,
        flip in any::<bool>(),
        backward in any::<bool>(),
    ) {
        let (x, y) = spec.simulate(seed);
        let config = EhmmConfig::new(2 * half, (0.1, 0.5)).with_flip(flip);
        let scheme = if backward { Scheme::Backward } else { Scheme::Forward };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pools = build_pools(&x, &spec, &y, &config, scheme, &mut rng, &mut Tally::default()).unwrap();
        prop_assert_eq!(pools.len(), spec.n());
        for i in 0..spec.n() {
            prop_assert_eq!(pools.pools[i].len(), 2 * half);
            prop_assert_eq!(pools.pools[i].state(pools.current[i]), x.row(i));
        }
    }

    #[test]
    fn forward_probabilities_are_constant_within_each_pool(
        (spec, seed) in instance(12, 4),
        half in 1usize..8,
        flip in any::<bool>(),
    ) {
        let (x, y) = spec.simulate(seed);
        let config = EhmmConfig::new(2 * half, (0.1, 0.6)).with_flip(flip);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
        let pools = build_pools(&x, &spec, &y, &config, Scheme::Forward, &mut rng, &mut Tally::default()).unwrap();
        let alpha = compute_alpha(&pools, &spec, &forward_pool_log_density(&pools, &spec));
        for row in &alpha {
            prop_assert!(spread(row) < 1e-10, "spread {}", spread(row));
        }
    }

    #[test]
    fn backward_probabilities_are_constant_within_each_pool(
        (spec, seed) in instance(12, 4),
        half in 1usize..8,
        flip in any::<bool>(),
    ) {
        let (x, y) = spec.simulate(seed);
        let config = EhmmConfig::new(2 * half, (0.1, 0.6)).with_flip(flip);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 2);
        let pools = build_pools(&x, &spec, &y, &config, Scheme::Backward, &mut rng, &mut Tally::default()).unwrap();
        let beta = compute_beta(&pools, &spec, &backward_pool_log_density(&pools, &spec));
        for row in &beta {
            prop_assert!(spread(row) < 1e-10, "spread {}", spread(row));
        }
    }

    #[test]
    fn shift_changes_only_the_observation_term(
        (spec, seed) in instance(1, 5),
        size in 2usize..10,
        picks in (0usize..10, 0usize..10),
    ) {
        let spec = spec.with_len(2).unwrap();
        let (_, y) = spec.simulate(seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let states: Vec<Vec<f64>> = (0..size).map(|_| spec.sample_prior(&mut rng).row(0).to_vec()).collect();
        let x = spec.sample_prior(&mut rng).row(1).to_vec();
        let (from, to) = (picks.0 % size, picks.1 % size);
        let mut tally = Tally::default();
        let mut moved = vec![0.0; spec.p()];

        let prev = Pool::from_states(&spec, y.row(0), &states);
        let target = PoolTarget::new(&spec, TargetKind::Linked { y: y.row(1), prev: &prev });
        shift_forward(spec.phi(), &x, prev.state(to), prev.state(from), &mut moved);
        let full = target.log_density(&moved, Some(to), &mut tally) - target.log_density(&x, Some(from), &mut tally);
        let obs = spec.log_obs_density(&moved, y.row(1)) - spec.log_obs_density(&x, y.row(1));
        prop_assert!((full - obs).abs() <= 1e-12 * (1.0 + obs.abs()), "forward {full} vs {obs}");

        let next = Pool::from_states(&spec, y.row(1), &states);
        let geometry = BackwardGeometry::new(&spec).unwrap();
        let target = PoolTarget::new(&spec, TargetKind::BackLinked { next: &next, geometry: &geometry });
        let inv: Vec<f64> = spec.phi().iter().map(|f| 1.0 / f).collect();
        shift_forward(&inv, &x, next.state(to), next.state(from), &mut moved);
        let full = target.log_density(&moved, Some(to), &mut tally) - target.log_density(&x, Some(from), &mut tally);
        let obs = next.obs_loglik(to) - next.obs_loglik(from);
        prop_assert!((full - obs).abs() <= 1e-12 * (1.0 + obs.abs()), "backward {full} vs {obs}");
    }

    #[test]
    fn autoregressive_kernel_is_reversible_for_its_gaussian(
        p in 1usize..5,
        rho in -0.2..0.9f64,
        eps in 0.01..1.0f64,
        seed in any::<u64>(),
    ) {
        let spec = ModelSpec::gaussian(1, p, 0.5, rho, 1.0).unwrap();
        let chol = spec.chol_sigma();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mean = spec.sample_prior(&mut rng).row(0).to_vec();
        let a = spec.sample_prior(&mut rng).row(0).to_vec();
        let b = spec.sample_prior(&mut rng).row(0).to_vec();
        let keep = (1.0 - eps * eps).sqrt();
        let step_cov = Cholesky::new(&(spec.sigma() * (eps * eps))).unwrap();
        let off = |v: &[f64], m: &[f64]| -> Vec<f64> { v.iter().zip(m).map(|(v, m)| v - m).collect() };
        let step = |to: &[f64], from: &[f64]| -> Vec<f64> {
            (0..p).map(|j| to[j] - mean[j] - keep * (from[j] - mean[j])).collect()
        };
        let forward = chol.log_density(&off(&a, &mean)) + step_cov.log_density(&step(&b, &a));
        let reverse = chol.log_density(&off(&b, &mean)) + step_cov.log_density(&step(&a, &b));
        prop_assert!((forward - reverse).abs() <= 1e-8 * (1.0 + forward.abs()), "{forward} vs {reverse}");
    }

    #[test]
    fn mirror_labels_pair_up(k in 0usize..10_000) {
        prop_assert_eq!(mirror_index(mirror_index(k)), k);
        prop_assert_eq!(mirror_index(k) / 2, k / 2);
        prop_assert_ne!(mirror_index(k), k);
    }

    #[test]
    fn sign_symmetric_models_are_invariant_under_negation(
        (spec, seed) in instance(6, 4),
    ) {
        let (x, y) = spec.simulate(seed);
        let neg = Sequence::new(x.len(), x.dim(), x.values().iter().map(|v| -v).collect()).unwrap();
        for i in 0..spec.n() {
            let prev = (i > 0).then(|| x.row(i - 1));
            let prev_neg = (i > 0).then(|| neg.row(i - 1));
            let t = spec.log_trans_density(prev, x.row(i));
            let t_neg = spec.log_trans_density(prev_neg, neg.row(i));
            prop_assert!((t - t_neg).abs() <= 1e-12 * (1.0 + t.abs()));
            if spec.obs().is_sign_symmetric() {
                let o = spec.log_obs_density(x.row(i), y.row(i));
                let o_neg = spec.log_obs_density(neg.row(i), y.row(i));
                prop_assert!((o - o_neg).abs() <= 1e-12 * (1.0 + o.abs()));
            }
        }
    }

    #[test]
    fn reversal_is_an_involution(n in 1usize..20, p in 1usize..5, seed in any::<u64>()) {
        let spec = ModelSpec::gaussian(n, p, 0.7, 0.3, 1.0).unwrap();
        let (x, _) = spec.simulate(seed);
        let r = x.reversed();
        prop_assert_eq!(r.row(0), x.row(n - 1));
        prop_assert_eq!(r.reversed(), x);
    }

    #[test]
    fn lyapunov_covariance_is_a_fixed_point(
        (phi, rho) in (1usize..6).prop_flat_map(|p| (phi_strategy(p), rho_strategy(p))),
    ) {
        let s = lyapunov_covariance(&phi, rho);
        let p = phi.len();
        for j in 0..p {
            for k in 0..p {
                let innovation = if j == k { 1.0 } else { rho };
                let rhs = phi[j] * s[(j, k)] * phi[k] + innovation;
                prop_assert!((s[(j, k)] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn closed_form_covariance_is_stationary_for_common_phi(
        p in 1usize..6,
        phi in prop_oneof![-0.95..-0.05f64, 0.05..0.95f64],
        rho in -0.2..0.9f64,
    ) {
        let phi = vec![phi; p];
        let closed = stationary_covariance(&phi, rho).unwrap();
        prop_assert!((closed - lyapunov_covariance(&phi, rho)).abs().max() < 1e-10);
    }

    #[test]
    fn log_sum_exp_matches_direct_sum(xs in prop::collection::vec(-30.0..30.0f64, 1..20)) {
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn updates_return_finite_paths_of_the_right_shape(
        (spec, seed) in instance(10, 3),
        direction in prop_oneof![Just(Direction::Forward), Just(Direction::Backward)],
    ) {
        let (x, y) = spec.simulate(seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let next = ehmm_update(&x, &spec, &y, &EhmmConfig::new(6, (0.1, 0.4)), direction, &mut rng, &mut Tally::default()).unwrap();
        prop_assert_eq!(next.len(), spec.n());
        prop_assert_eq!(next.dim(), spec.p());
        prop_assert!(next.values().iter().all(|v| v.is_finite()));
    }
}
