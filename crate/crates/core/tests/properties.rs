use imcv::adaptation::{AdamConfig, AdamState};
use imcv::dist::log_sum_exp;
use imcv::estimators::{
    est_batch, est_cim, est_imcv, est_rb, imcv_with_coefficients, sample_variance, vrf, Evaluated,
};
use imcv::experiments::{replica_fanout, ExperimentConfig, ExperimentKind};
use imcv::kernel::acceptance_prob;
use imcv::linalg::{CholeskyFactor, Matrix, Vector};
use imcv::modelselect::Model;
use imcv::proposals::GaussianProposal;
use imcv::rng::RngStream;
use proptest::prelude::*;
use rand::Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

prop_compose! {
    fn evaluated(max: usize)(n in 2..max)(
        fx in prop::collection::vec(-50.0..50.0f64, n),
        fy in prop::collection::vec(-50.0..50.0f64, n),
        alpha in prop::collection::vec(0.0..=1.0f64, n),
    ) -> Evaluated {
        Evaluated::new(fx, fy, alpha).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn acceptance_is_a_probability(a in -30.0..30.0f64, b in -30.0..30.0f64, c in -30.0..30.0f64, d in -30.0..30.0f64) {
        let p = acceptance_prob(a, b, c, d).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        // importance weights w = f - log q; the move is certain when w_y ≥ w_x
        if b - d >= a - c {
            prop_assert_eq!(p, 1.0);
        } else {
            prop_assert!(close(p, ((b - d) - (a - c)).exp(), 1e-12));
        }
    }

    #[test]
    fn imcv_is_rb_minus_mean_control(ev in evaluated(200), eq in -10.0..10.0f64) {
        let imcv = est_imcv(&ev, eq).unwrap().value;
        let rb = est_rb(&ev).unwrap().value;
        let control = ev.fy.iter().map(|y| y - eq).sum::<f64>() / ev.len() as f64;
        prop_assert!(close(imcv, rb - control, 1e-12));
        prop_assert!(close(imcv_with_coefficients(&ev, eq, 1.0, 1.0), imcv, 1e-12));
    }

    #[test]
    fn always_accepting_chain_collapses(ys in prop::collection::vec(-20.0..20.0f64, 2..100), x0 in -5.0..5.0f64, eq in -3.0..3.0f64) {
        // α ≡ 1: X_{i+1} = Y_i
        let mut fx = vec![x0];
        fx.extend_from_slice(&ys[..ys.len() - 1]);
        let ev = Evaluated::new(fx, ys.clone(), vec![1.0; ys.len()]).unwrap();
        prop_assert_eq!(est_imcv(&ev, eq).unwrap().value.to_bits(), eq.to_bits());
        prop_assert_eq!(est_cim(&ev, eq, false).unwrap().value.to_bits(), eq.to_bits());
    }

    #[test]
    fn batch_is_weighted_imcv(ev in evaluated(120), cut in 0.1..0.9f64, e1 in -5.0..5.0f64, e2 in -5.0..5.0f64) {
        let n = ev.len();
        let single = est_batch(&ev, &[(0..n, Some(e1))], false).unwrap().value;
        prop_assert!(close(single, est_imcv(&ev, e1).unwrap().value, 1e-12));
        let k = ((n as f64 * cut) as usize).clamp(1, n - 1);
        let two = est_batch(&ev, &[(0..k, Some(e1)), (k..n, Some(e2))], false).unwrap().value;
        let part = |r: std::ops::Range<usize>, e: f64| {
            let sub = Evaluated::new(ev.fx[r.clone()].to_vec(), ev.fy[r.clone()].to_vec(), ev.alpha[r].to_vec()).unwrap();
            est_imcv(&sub, e).unwrap().value
        };
        let expect = (k as f64 * part(0..k, e1) + (n - k) as f64 * part(k..n, e2)) / n as f64;
        prop_assert!(close(two, expect, 1e-11));
    }

    #[test]
    fn vrf_scaling(a in prop::collection::vec(-5.0..5.0f64, 3..40), c in 0.1..10.0f64) {
        prop_assume!(sample_variance(&a) > 1e-8);
        prop_assert!(close(vrf(&a, &a).unwrap(), 1.0, 1e-12));
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        prop_assert!(close(vrf(&scaled, &a).unwrap(), c * c, 1e-9));
    }

    #[test]
    fn cholesky_solve_round_trip(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = RngStream::new(seed, 0).rng();
        let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + Matrix::identity(d, d);
        let c = CholeskyFactor::decompose(&a).unwrap();
        let v = Vector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        prop_assert!((&a * c.solve(&v) - &v).norm() < 1e-9 * v.norm().max(1.0));
        prop_assert!(close(2.0 * c.half_log_det(), a.determinant().ln(), 1e-10));
    }

    #[test]
    fn gaussian_sample_is_reparameterized(seed in any::<u64>(), d in 1usize..5) {
        let q = GaussianProposal::new(Vector::from_element(d, 0.5), CholeskyFactor::scaled_identity(d, 2.0).unwrap()).unwrap();
        let (y, z) = q.sample(&mut RngStream::new(seed, 1).rng());
        prop_assert!((&q.mu + q.chol.mul_vec(&z) - y).norm() < 1e-12);
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), s in any::<u64>()) {
        let draw = |st: RngStream| -> Vec<u64> { let mut r = st.rng(); (0..4).map(|_| r.random()).collect() };
        prop_assert_eq!(draw(RngStream::new(seed, s)), draw(RngStream::new(seed, s)));
        prop_assert_ne!(draw(RngStream::new(seed, s)), draw(RngStream::new(seed, s.wrapping_add(1))));
        prop_assert_ne!(draw(RngStream::new(seed, s).child(0)), draw(RngStream::new(seed, s).child(1)));
    }

    #[test]
    fn log_sum_exp_bounds(xs in prop::collection::vec(-700.0..700.0f64, 1..30), shift in -100.0..100.0f64) {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&xs);
        prop_assert!(l >= m && l <= m + (xs.len() as f64).ln() + 1e-12);
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        prop_assert!(close(log_sum_exp(&shifted), l + shift, 1e-12));
    }

    #[test]
    fn adam_ignores_zero_gradient(p in 1usize..10, step in 0.0..0.1f64) {
        let mut s = AdamState::with_steps(vec![step; p], &AdamConfig::default());
        for _ in 0..5 {
            prop_assert!(s.step(&vec![0.0; p]).iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn fanout_order_matches_stream_ids(seed in any::<u64>(), t in 1usize..20) {
        let out = replica_fanout(seed, t, |i, s| (i, s));
        for (i, (j, s)) in out.into_iter().enumerate() {
            prop_assert_eq!(i, j);
            prop_assert_eq!(s, RngStream::new(seed, i as u64));
        }
    }

    #[test]
    fn config_numeric_keys_round_trip(n in 2usize..100_000, seed in any::<u64>(), r in 2usize..500) {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::GaussD);
        cfg.apply("n", &n.to_string()).unwrap();
        cfg.apply("seed", &seed.to_string()).unwrap();
        cfg.apply("replicas", &r.to_string()).unwrap();
        prop_assert_eq!((cfg.n, cfg.seed, cfg.replicas), (n, seed, r));
        prop_assert!(cfg.validate().is_ok());
    }
}

#[test]
fn all_submodels_are_enumerated_once() {
    for p in 1..=6 {
        let ms = Model::all_nonempty(p);
        assert_eq!(ms.len(), (1 << p) - 1);
        let mut labels: Vec<String> = ms.iter().map(|m| m.label()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), ms.len());
        assert!(ms.windows(2).all(|w| w[0].dim() <= w[1].dim()));
    }
}
