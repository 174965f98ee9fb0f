use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use aoed_core::cholesky::SkylineCholesky;
use aoed_core::config::ExperimentConfig;
use aoed_core::design::{binary_gap, penalty_eval, random_designs, Penalty};
use aoed_core::experiments::{run_oed_solve, Problem};
use aoed_core::forward::{ForwardModel, ScenarioConfig, SensorGrid};
use aoed_core::hessian::HessianMode;
use aoed_core::krylov::{cg_solve, CgOptions, CgTag};
use aoed_core::map::{solve_map, MapOptions};
use aoed_core::mesh::{build_rect_mesh, MarkerRule, Rect};
use aoed_core::trace::prior_trace_exact;
use aoed_core::{FemSpace, SolveCounters, SparseOperator};

fn dense(a: &SparseOperator) -> DMatrix<f64> {
    let d = a.to_dense();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| d[i][j])
}

fn small_problem(cells: usize, sensors: SensorGrid) -> Problem {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario.nx = cells;
    cfg.scenario.ny = cells;
    cfg.scenario.sensors = sensors;
    Problem::from_config(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_coefficient_gives_linear_pressure(nx in 1usize..24, ny in 2usize..24, c in -3.0f64..3.0) {
        let sc = ScenarioConfig::baseline(nx, ny);
        let space = Arc::new(FemSpace::new(sc.build_mesh().unwrap()));
        let model = ForwardModel::new(space, &sc, Arc::new(SolveCounters::new())).unwrap();
        let u = model.solve_state(&vec![c; model.num_nodes()]).unwrap();
        for (ui, x) in u.iter().zip(model.mesh().nodes()) {
            prop_assert!((ui - x[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn mesh_covers_domain(nx in 1usize..30, ny in 1usize..30, w in 0.5f64..3.0, h in 0.5f64..3.0) {
        let mesh = build_rect_mesh(nx, ny, Rect::new(0.0, w, 0.0, h), MarkerRule::TopBottomDirichlet).unwrap();
        prop_assert_eq!(mesh.num_nodes(), (nx + 1) * (ny + 1));
        prop_assert_eq!(mesh.num_triangles(), 2 * nx * ny);
        prop_assert!((mesh.total_area() - w * h).abs() < 1e-12 * w * h);
        prop_assert!(mesh.element_areas().iter().all(|&a| a > 0.0));
    }

    #[test]
    fn mass_and_stiffness_match_integrals(nx in 1usize..16, ny in 1usize..16) {
        let mesh = build_rect_mesh(nx, ny, Rect::unit_square(), MarkerRule::TopBottomDirichlet).unwrap();
        let space = FemSpace::new(mesh.clone());
        let m = space.mass();
        prop_assert!((m.entry_sum() - 1.0).abs() < 1e-12);
        let x: Vec<f64> = mesh.nodes().iter().map(|p| p[0]).collect();
        let k = space.stiffness_elementwise(&vec![1.0; mesh.num_triangles()]);
        // ∫ |∇x|² = 1 and constants lie in the kernel
        let kx = k.matvec(&x);
        prop_assert!((x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(k.row_sums().iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn skyline_cholesky_matches_dense_solve(n in 2usize..40, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 4.0 + rng.random::<f64>()));
            let j = rng.random_range(0..n);
            if j != i {
                let v = rng.random::<f64>() - 0.5;
                trip.push((i, j, v));
                trip.push((j, i, v));
            }
        }
        let a = SparseOperator::from_triplets(n, n, &trip, true).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = SkylineCholesky::factor(&a).unwrap().solve(&b);
        let xd = dense(&a).cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        for (p, q) in x.iter().zip(xd.iter()) {
            prop_assert!((p - q).abs() < 1e-10 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn cg_matches_dense_solve(n in 2usize..30, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a = &g * g.transpose() + DMatrix::identity(n, n);
        let b = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        let opts = CgOptions { rtol: 1e-12, atol: 0.0, maxiter: 10 * n };
        let res = cg_solve(
            |v| Ok((&a * DVector::from_column_slice(v)).as_slice().to_vec()),
            b.as_slice(),
            |r| Ok(r.to_vec()),
            &opts,
            None,
            CgTag::Outer,
        ).unwrap();
        prop_assert!(res.converged());
        let x = a.clone().cholesky().unwrap().solve(&b);
        for (p, q) in res.x.iter().zip(x.iter()) {
            prop_assert!((p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn eps_penalty_tends_to_support_size(t in proptest::collection::vec(0.0f64..1.0, 1..40)) {
        let support = t.iter().filter(|&&x| x > 0.0).count() as f64;
        let (l1, _) = penalty_eval(&t, Penalty::L1);
        let mut prev = f64::NEG_INFINITY;
        for eps in [1.0, 0.1, 1e-2, 1e-3, 1e-4] {
            let (v, g) = penalty_eval(&t, Penalty::Eps { eps });
            prop_assert!(v >= prev - 1e-12);
            prop_assert!(v <= support + 1e-12);
            prop_assert!(g.iter().all(|&d| d > 0.0));
            prev = v;
        }
        prop_assert!((l1 - t.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn random_designs_are_distinct_with_fixed_budget(n_s in 5usize..60, k in 1usize..5, seed in any::<u64>()) {
        let n_active = k.min(n_s);
        let designs = random_designs(n_s, 6, n_active, seed).unwrap();
        prop_assert_eq!(designs.len(), 6);
        for w in &designs {
            prop_assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), n_active);
            prop_assert!(binary_gap(w) == 0.0);
        }
        prop_assert_eq!(designs.clone(), random_designs(n_s, 6, n_active, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn prior_covariance_is_self_adjoint_with_inverse(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let pb = small_problem(8, SensorGrid::Lattice { nx: 3, ny: 3 });
        let n = pb.prior.dim();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let cu = pb.prior.apply_cpr(&u);
        let cv = pb.prior.apply_cpr(&v);
        let l = pb.prior.inner_m(&u, &cv);
        let r = pb.prior.inner_m(&cu, &v);
        prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()));
        prop_assert!(pb.prior.inner_m(&u, &cu) > 0.0);
        let back = pb.prior.apply_cpr_inv(&cu);
        let err = back.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-8);
    }
}

#[test]
fn prior_trace_matches_dense_oracle() {
    let pb = small_problem(10, SensorGrid::Lattice { nx: 3, ny: 3 });
    let l = dense(pb.prior.operator());
    let m = dense(pb.prior.mass());
    let x = l.cholesky().unwrap().solve(&m);
    let oracle = (&x * &x).trace();
    let t = prior_trace_exact(&pb.prior);
    assert!((t - oracle).abs() < 1e-9 * oracle, "{t} vs {oracle}");
}

fn gn_dense_at_prior_mean(pb: &Problem, w: &[f64]) -> (DMatrix<f64>, f64) {
    let d = vec![0.0; pb.model.num_sensors()];
    let opts = MapOptions {
        max_newton: 0,
        ..MapOptions::default()
    };
    let sol = solve_map(&pb.model, &pb.prior, w, &d, Some(pb.prior.mean()), &opts).unwrap();
    let ctx = sol.hessian(&pb.model, &pb.prior, w, HessianMode::GaussNewton).unwrap();
    let h = ctx.dense(400).unwrap();
    let h = (&h + h.transpose()) * 0.5;
    let tr = ctx.posterior_trace_dense(400).unwrap();
    (h, tr)
}

#[test]
fn posterior_variance_never_exceeds_prior_variance() {
    let pb = small_problem(10, SensorGrid::Lattice { nx: 4, ny: 4 });
    let n = pb.prior.dim();
    let w = vec![1.0; pb.model.num_sensors()];
    let (h, _) = gn_dense_at_prior_mean(&pb, &w);
    let (r, _) = gn_dense_at_prior_mean(&pb, &vec![0.0; w.len()]);
    let post = h.cholesky().unwrap().inverse();
    let prior = r.cholesky().unwrap().inverse();
    for i in 0..n {
        assert!(post[(i, i)] <= prior[(i, i)] * (1.0 + 1e-10), "node {i}");
    }
}

#[test]
fn adding_a_sensor_reduces_the_trace() {
    let pb = small_problem(10, SensorGrid::Lattice { nx: 4, ny: 4 });
    let n_s = pb.model.num_sensors();
    let mut w = vec![0.0; n_s];
    let mut prev = gn_dense_at_prior_mean(&pb, &w).1;
    let prior_trace = prior_trace_exact(&pb.prior);
    assert!((prev - prior_trace).abs() < 1e-8 * prior_trace);
    for j in [0, 5, 10, 15] {
        w[j] = 1.0;
        let t = gn_dense_at_prior_mean(&pb, &w).1;
        assert!(t < prev, "sensor {j}: {t} !< {prev}");
        prev = t;
    }
}

#[test]
fn woodbury_trace_agrees_with_dense_at_binary_design() {
    let pb = small_problem(10, SensorGrid::Lattice { nx: 4, ny: 4 });
    let mut w = vec![0.0; pb.model.num_sensors()];
    for j in [1, 6, 11] {
        w[j] = 1.0;
    }
    let d = vec![0.1; w.len()];
    let sol = solve_map(&pb.model, &pb.prior, &w, &d, None, &MapOptions::default()).unwrap();
    let ctx = sol.hessian(&pb.model, &pb.prior, &w, HessianMode::GaussNewton).unwrap();
    let exact = ctx.posterior_trace_gn_exact(prior_trace_exact(&pb.prior)).unwrap();
    let dense = ctx.posterior_trace_dense(400).unwrap();
    assert!((exact - dense).abs() < 1e-8 * dense, "{exact} vs {dense}");
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.oed.gammas = vec![0.01];
    cfg.scenario.sensors = SensorGrid::Count { count: 250 };
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    let partial = ExperimentConfig::from_toml_str("seed = 3\n[oed]\nn_d = 2\n").unwrap();
    assert_eq!(partial.seed, 3);
    assert_eq!(partial.oed.n_d, 2);
    assert_eq!(partial.oed.n_tr, ExperimentConfig::default().oed.n_tr);
    assert!(ExperimentConfig::from_toml_str("[oed]\nn_d = 0\n").is_err());
}

fn small_design_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario.nx = 12;
    cfg.scenario.ny = 12;
    cfg.scenario.sensors = SensorGrid::Lattice { nx: 4, ny: 4 };
    cfg.oed.n_d = 1;
    cfg.oed.n_tr = 3;
    cfg
}

#[test]
fn continuation_sparsifies_and_descends() {
    let cfg = small_design_config();
    let dir = tempfile::tempdir().unwrap();
    let rec = run_oed_solve(&cfg, 0.1, dir.path()).unwrap();
    // active count at the end of each continuation stage never grows
    let ends: Vec<usize> = rec
        .stages
        .iter()
        .enumerate()
        .filter(|(i, s)| rec.stages.get(i + 1).map_or(true, |n| n.stage != s.stage))
        .map(|(_, s)| s.n_active)
        .collect();
    assert!(ends.windows(2).all(|p| p[1] <= p[0]), "{ends:?}");
    assert!(rec.n_active < 16 && rec.n_active > 0, "{}", rec.n_active);
    assert!(binary_gap(&rec.w) < 1e-2);
    assert!(rec.w.iter().all(|&t| t > 0.0 && t < 1.0));
    for pair in rec.history.windows(2) {
        if pair[0].stage == pair[1].stage && pair[0].mu == pair[1].mu {
            assert!(pair[1].barrier_objective <= pair[0].barrier_objective);
        }
    }
}

#[test]
fn large_penalty_prices_out_every_sensor() {
    let mut cfg = small_design_config();
    cfg.oed.epsilons = vec![0.1];
    let dir = tempfile::tempdir().unwrap();
    let rec = run_oed_solve(&cfg, 100.0, dir.path()).unwrap();
    assert_eq!(rec.n_active, 0);
    assert!(rec.w_binary.iter().all(|&t| t == 0.0));
}
