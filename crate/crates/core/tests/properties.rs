use approx::assert_relative_eq;
use hgp::field::{draw_path, InducingSet};
use hgp::kernel::{energy_cov, energy_field_cov, field_cov, KernelHyper};
use hgp::linalg::Tensor;
use hgp::odeint::{integrate_segments, SegmentPlan, SolverSpec, TimeGrid};
use hgp::systems::{
    energy_cutoff, sample_initial, true_h, Standardization, System, SystemParams, Trajectory,
};
use hgp::vi::{kl_gaussian, kl_whitened, DiagGaussian};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hyper(ls: &[f64], var: f64) -> KernelHyper {
    KernelHyper::new(ls, var).unwrap()
}

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, dim)
}

fn phase_dim() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![2usize, 4])
}

fn path_inputs() -> impl Strategy<Value = (usize, Vec<f64>, f64, u64)> {
    phase_dim().prop_flat_map(|d| {
        (
            Just(d),
            prop::collection::vec(0.3f64..3.0, d),
            0.2f64..3.0,
            any::<u64>(),
        )
    })
}

fn inducing(dim: usize, m: usize, seed: u64) -> InducingSet {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::from_vec(
        m,
        dim,
        (0..m * dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
    );
    let mean = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut chol = Tensor::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            chol[(i, j)] = rng.random_range(-0.3..0.3);
        }
        chol[(i, i)] = rng.random_range(0.1..1.0);
    }
    InducingSet::new(z, mean, chol).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_diagonal_is_exact((d, ls, var, _) in path_inputs(), x in point(4)) {
        let x = &x[..d];
        let hyp = hyper(&ls, var);
        prop_assert_eq!(energy_cov(x, x, &hyp).unwrap(), hyp.signal_variance());
        prop_assert!(energy_field_cov(x, x, &hyp).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn field_cov_is_symmetric_under_swap((d, ls, var, _) in path_inputs(), x in point(4), y in point(4)) {
        let hyp = hyper(&ls, var);
        let a = field_cov(&x[..d], &y[..d], &hyp).unwrap();
        let b = field_cov(&y[..d], &x[..d], &hyp).unwrap();
        for i in 0..d {
            for j in 0..d {
                assert_relative_eq!(a[(i, j)], b[(j, i)], epsilon = 1e-14, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn joint_gram_is_psd(
        (d, ls, var, seed) in path_inputs(),
        n in 1usize..=5,
        m in 1usize..=5,
    ) {
        use rand::Rng;
        let hyp = hyper(&ls, var);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = |k: usize| -> Vec<Vec<f64>> {
            (0..k).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let (xs, ys) = (pts(n), pts(m));
        let size = n + m * d;
        let mut g = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = energy_cov(&xs[i], &xs[j], &hyp).unwrap();
            }
            for j in 0..m {
                for (a, v) in energy_field_cov(&xs[i], &ys[j], &hyp).unwrap().into_iter().enumerate() {
                    g[(i, n + j * d + a)] = v;
                    g[(n + j * d + a, i)] = v;
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                let f = field_cov(&ys[i], &ys[j], &hyp).unwrap();
                for a in 0..d {
                    for b in 0..d {
                        g[(n + i * d + a, n + j * d + b)] = f[(a, b)];
                    }
                }
            }
        }
        prop_assert!((&g - g.transpose()).amax() < 1e-12);
        prop_assert!(g.symmetric_eigen().eigenvalues.min() >= -1e-8);
    }

    #[test]
    fn sampled_fields_conserve_and_are_divergence_free(
        (d, ls, var, seed) in path_inputs(),
        m in 2usize..8,
        x in point(4),
    ) {
        let hyp = hyper(&ls, var);
        let ind = inducing(d, m, seed);
        let path = draw_path(&ind, &hyp, 64, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let x = &x[..d];
        let f = path.vector_field(x).unwrap();
        let g = path.grad_h(x).unwrap();
        let inner: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
        let scale = f.iter().map(|v| v * v).sum::<f64>().sqrt() * g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(inner.abs() <= 1e-10 * (scale + 1.0));

        let h = 1e-5;
        let mut div = 0.0;
        for k in 0..d {
            let (mut up, mut down) = (x.to_vec(), x.to_vec());
            up[k] += h;
            down[k] -= h;
            div += (path.vector_field(&up).unwrap()[k] - path.vector_field(&down).unwrap()[k]) / (2.0 * h);
        }
        prop_assert!(div.abs() <= 1e-4, "divergence {}", div);
    }

    #[test]
    fn segment_plans_partition_observations(n in 1usize..200, frac in 0.0f64..1.0) {
        let count = 1 + ((n - 1) as f64 * frac) as usize;
        let plan = SegmentPlan::with_count(n, count).unwrap();
        prop_assert_eq!(plan.len(), count);
        prop_assert!(plan.starts().windows(2).all(|w| w[0] < w[1]));
        let mut covered = 0;
        for l in 0..plan.len() {
            let r = plan.segment(l);
            prop_assert_eq!(r.start, covered);
            for i in r.clone() {
                prop_assert_eq!(plan.obs_map(i), l);
            }
            covered = r.end;
        }
        prop_assert_eq!(covered, n);
    }

    #[test]
    fn segment_integration_ignores_scheduling(seed in any::<u64>(), per in 2usize..6) {
        let ind = inducing(2, 5, seed);
        let hyp = hyper(&[1.0, 1.0], 1.0);
        let path = draw_path(&ind, &hyp, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let grid = TimeGrid::uniform(0.0, 5.0, 21).unwrap();
        let plan = SegmentPlan::every(grid.len(), per).unwrap();
        let states: Vec<Vec<f64>> = (0..plan.len()).map(|l| vec![0.1 * l as f64, -0.2]).collect();
        let solver = SolverSpec::rk4(0.02);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| integrate_segments(path.field(), &states, &plan, &grid, &solver).unwrap())
        };
        prop_assert_eq!(run(1), run(3));
    }

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_itself(
        mean in prop::collection::vec(-3.0f64..3.0, 4),
        var in prop::collection::vec(0.05f64..4.0, 4),
        mean2 in prop::collection::vec(-3.0f64..3.0, 4),
        var2 in prop::collection::vec(0.05f64..4.0, 4),
    ) {
        let q = DiagGaussian::new(mean, var).unwrap();
        let p = DiagGaussian::new(mean2, var2).unwrap();
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_gaussian(&q, &q).unwrap().abs() < 1e-14);
    }

    #[test]
    fn whitened_prior_has_zero_kl(m in 1usize..40) {
        prop_assert_eq!(kl_whitened(&vec![0.0; m], &Tensor::identity(m)).unwrap(), 0.0);
    }

    #[test]
    fn standardization_round_trips(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 3..20),
        x in point(4),
    ) {
        let times: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
        let t = Trajectory::new(times, Tensor::from_rows(&rows)).unwrap();
        let s = Standardization::fit(&[t]).unwrap();
        let back = s.invert(&s.apply(&x));
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn henon_heiles_draws_respect_the_cutoff(seed in any::<u64>()) {
        let p = SystemParams::defaults(System::Hh);
        let cutoff = energy_cutoff(System::Hh, &p).unwrap();
        prop_assert_eq!(cutoff, 1.0 / (6.0 * 0.8 * 0.8));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x = sample_initial(System::Hh, &p, &mut rng).unwrap();
            prop_assert!(x.iter().all(|v| v.abs() <= 1.0));
            prop_assert!(true_h(System::Hh, &p, &x).unwrap() <= cutoff);
        }
    }
}
