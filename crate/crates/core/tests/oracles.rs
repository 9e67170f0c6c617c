//! Results checked against independently computed references: exact rational
//! arithmetic, brute-force search, enumeration and closed forms.

use ndarray::{array, Array1, Array2};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use robust_sysid::features::estimate_excitation;
use robust_sysid::harness::output::{verify_manifest, write_experiment, RESULTS_FILE};
use robust_sysid::harness::{run_experiment, ExperimentConfig, ExperimentKind, Scale};
use robust_sysid::linalg::{qr_least_squares, symmetric_eig};
use robust_sysid::rng::{stream, Stream};
use robust_sysid::theory::prob_max_run_below;
use robust_sysid::{solve, BasisSet, InputPolicy, LowerBoundInstance, Norm, RegressionProblem, SolverConfig};

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn to_f64(x: &BigRational) -> f64 {
    // Exact enough: both parts fit in f64 range for these sizes.
    let scale = BigInt::from(10).pow(30);
    let scaled = (x * BigRational::from_integer(scale.clone())).round().to_integer();
    scaled.to_string().parse::<f64>().unwrap() / 1e30
}

/// Gauss-Jordan on a square rational system.
fn rational_solve(mut a: Vec<Vec<BigRational>>, mut b: Vec<BigRational>) -> Vec<BigRational> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| a[r][col] != rat(0, 1)).expect("nonsingular");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col && a[row][col] != rat(0, 1) {
                let f = &a[row][col] / &a[col][col];
                for k in col..n {
                    let v = &f * &a[col][k];
                    a[row][k] -= v;
                }
                let v = &f * &b[col];
                b[row] -= v;
            }
        }
    }
    (0..n).map(|i| &b[i] / &a[i][i]).collect()
}

fn hilbert(rows: usize, cols: usize) -> Vec<Vec<BigRational>> {
    (0..rows).map(|i| (0..cols).map(|j| rat(1, (i + j + 1) as i64)).collect()).collect()
}

fn as_f64(m: &[Vec<BigRational>]) -> Array2<f64> {
    Array2::from_shape_fn((m.len(), m[0].len()), |(i, j)| to_f64(&m[i][j]))
}

fn rel_err(x: &Array1<f64>, exact: &[BigRational]) -> f64 {
    let e: Array1<f64> = exact.iter().map(to_f64).collect();
    let d = x - &e;
    d.dot(&d).sqrt() / e.dot(&e).sqrt()
}

#[test]
fn qr_solves_hilbert_like_8_against_exact_rationals() {
    // H₈ + 1e-8·I: condition number about 1.7e8, still above the rank cut.
    let mut h = hilbert(8, 8);
    for (i, row) in h.iter_mut().enumerate() {
        row[i] += rat(1, 100_000_000);
    }
    let b: Vec<BigRational> = (0..8).map(|i| rat(if i % 2 == 0 { i + 1 } else { -(i + 1) }, 1)).collect();
    let exact = rational_solve(h.clone(), b.clone());
    let bf = Array2::from_shape_fn((8, 1), |(i, _)| to_f64(&b[i]));
    let sol = qr_least_squares(as_f64(&h).view(), bf.view()).unwrap();
    assert!(!sol.rank_deficient);
    let x = sol.solution.column(0).to_owned();
    assert!(rel_err(&x, &exact) < 1e-4, "{}", rel_err(&x, &exact));
}

#[test]
fn exact_hilbert_8_falls_below_the_rank_cut() {
    // σ_min(H₈)/‖H₈‖_F ≈ 6.5e-11 < 1e-10, so the minimum-norm branch is taken.
    let h = as_f64(&hilbert(8, 8));
    let sol = qr_least_squares(h.view(), Array2::<f64>::ones((8, 1)).view()).unwrap();
    assert!(sol.rank_deficient);
    assert_eq!(sol.rank, 7);
}

#[test]
fn qr_least_squares_matches_exact_normal_equations() {
    // 12×5 Hilbert block: the normal equations are solved exactly in rationals.
    let a = hilbert(12, 5);
    let b: Vec<BigRational> = (0..12).map(|i| rat((i * i) as i64 - 7, 3)).collect();
    let ata: Vec<Vec<BigRational>> = (0..5)
        .map(|j| (0..5).map(|k| (0..12).map(|i| &a[i][j] * &a[i][k]).sum()).collect())
        .collect();
    let atb: Vec<BigRational> = (0..5).map(|j| (0..12).map(|i| &a[i][j] * &b[i]).sum()).collect();
    let exact = rational_solve(ata, atb);
    let bf = Array2::from_shape_fn((12, 1), |(i, _)| to_f64(&b[i]));
    let x = qr_least_squares(as_f64(&a).view(), bf.view()).unwrap().solution.column(0).to_owned();
    assert!(rel_err(&x, &exact) < 1e-6, "{}", rel_err(&x, &exact));
}

/// Minimizes a 2-parameter objective by repeatedly refining a square grid
/// around the incumbent.
fn grid_minimize(f: impl Fn(f64, f64) -> f64, center: (f64, f64), half_width: f64) -> ((f64, f64), f64) {
    let steps = 200;
    let (mut best, mut value) = (center, f(center.0, center.1));
    let mut half = half_width;
    for _ in 0..8 {
        let c = best;
        let h = half / steps as f64;
        for i in -steps..=steps {
            for j in -steps..=steps {
                let p = (c.0 + i as f64 * h, c.1 + j as f64 * h);
                let v = f(p.0, p.1);
                if v < value {
                    value = v;
                    best = p;
                }
            }
        }
        half = 4.0 * h;
    }
    (best, value)
}

#[test]
fn single_feature_estimators_match_a_brute_force_grid() {
    let mut rng = stream(3, Stream::Custom(5));
    let n = 30;
    let phi = Array2::from_shape_fn((1, n), |_| StandardNormal.sample(&mut rng));
    let mut y = Array2::zeros((2, n));
    for t in 0..n {
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        y[[0, t]] = 1.5 * phi[[0, t]] + 0.2 * e0;
        y[[1, t]] = -0.7 * phi[[0, t]] + 0.2 * e1;
        if rng.random::<f64>() < 0.2 {
            y[[0, t]] += 25.0;
            y[[1, t]] -= 10.0;
        }
    }
    let cfg = SolverConfig::default();
    for norm in Norm::ALL {
        let problem = RegressionProblem::new(phi.clone(), y.clone(), norm, 0).unwrap();
        let report = solve(&problem, &cfg).unwrap();
        let objective = |a: f64, b: f64| problem.objective(&array![[a], [b]]);
        let ((a, b), best) = grid_minimize(objective, (0.0, 0.0), 8.0);
        let rel = (report.objective - best).abs() / best;
        assert!(rel <= 1e-4, "{norm:?}: solver {} vs grid {best}", report.objective);
        let dg = (report.g_hat[[0, 0]] - a).abs().max((report.g_hat[[1, 0]] - b).abs());
        assert!(dg <= 1e-4, "{norm:?}: coefficient gap {dg}");
    }
}

#[test]
fn run_tail_recursion_matches_enumeration() {
    let horizon = 14;
    for p in [0.1f64, 0.3, 0.7] {
        for len in 1..=6 {
            let mut prob = 0.0;
            for mask in 0u32..(1 << horizon) {
                let (mut run, mut longest) = (0, 0);
                for t in 0..horizon {
                    if mask >> t & 1 == 1 {
                        run = 0;
                    } else {
                        run += 1;
                        longest = longest.max(run);
                    }
                }
                if longest < len {
                    let attacks = mask.count_ones() as i32;
                    prob += p.powi(attacks) * (1.0 - p).powi(horizon as i32 - attacks);
                }
            }
            let dp = prob_max_run_below(p, horizon, len);
            assert!((dp - prob).abs() < 1e-12, "p={p} len={len}: {dp} vs {prob}");
        }
    }
}

#[test]
fn lower_bound_gram_matches_its_closed_form() {
    let inst = LowerBoundInstance::build(0.5, 1.0, 5, 500, 0.1, 0).unwrap();
    let ex = estimate_excitation(&inst.basis, &inst.input_policy, 400_000, 9).unwrap();
    // Independent closed form: Rademacher inputs are orthonormal, so
    // E[φ₁²] = Σ_{i≤τ} (Lρ^i)², and φ₂ − φ₁ = a·u_{t−τ} with a = Lρ^τ·c.
    let (rho, l, tau) = (0.5f64, 1.0f64, 5);
    let c = (1.0 - rho.tanh() / (rho * 1f64.tanh())).abs();
    let g: f64 = (0..=tau).map(|i| (l * rho.powi(i)).powi(2)).sum();
    let b = l * rho.powi(tau);
    let a = b * c;
    let expect = array![[g, g + a * b], [g + a * b, g + 2.0 * a * b + a * a]];
    for ((i, j), &v) in expect.indexed_iter() {
        assert!((ex.gram[[i, j]] - v).abs() <= 5.0 * ex.gram_se[[i, j]] + 1e-12, "entry ({i},{j})");
    }
    let lmin = symmetric_eig(expect.view()).unwrap().values.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(lmin >= a * a / 3.0, "{lmin} vs {}", a * a / 3.0);
}

#[test]
fn kernel_sections_match_the_hand_formula() {
    let policy = InputPolicy::uniform(-8.0, 10.0);
    let (tau, m) = (2, 3);
    let basis = BasisSet::random_poly_kernel(4, 3, tau, m, &policy, 17).unwrap();
    let robust_sysid::features::BasisKind::PolyKernelSections { centers, .. } = &basis.kind else {
        panic!("kernel basis expected");
    };
    let window = Array2::from_shape_fn((tau + 1, m), |(i, j)| (i as f64 - 1.0) * 2.5 + j as f64);
    let phi = basis.evaluate(window.view()).unwrap();
    let s = ((tau + 1) * m) as f64 * 75.0;
    let flat: Vec<f64> = window.iter().copied().collect();
    for (k, center) in centers.rows().into_iter().enumerate() {
        let dot: f64 = center.iter().zip(&flat).map(|(a, b)| a * b).sum();
        let want = (1.0 + dot / s).powi(3) - 1.0;
        assert!((phi[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::CompareLsL2, Scale::Desk);
    cfg.system.state_dim = 6;
    cfg.system.input_dim = 2;
    cfg.system.obs_dim = 3;
    cfg.system.horizon = 80;
    cfg.system.tau = vec![2];
    cfg.basis.count = 6;
    cfg.basis.gt_samples = 120;
    cfg.basis.excitation_samples = 600;
    cfg.basis.lipschitz_pairs = 100;
    cfg.n_seeds = 2;
    cfg.eval_points = 8;
    cfg
}

#[test]
fn manifest_detects_tampering() {
    let cfg = tiny_config();
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_experiment(dir.path(), &cfg, &out).unwrap();
    let manifest = verify_manifest(dir.path()).unwrap();
    assert_eq!(manifest.config_hash, cfg.short_hash());
    assert_eq!(manifest.timings_ms.len(), 2 * cfg.inputs.len());

    let path = dir.path().join(RESULTS_FILE);
    let original = std::fs::read_to_string(&path).unwrap();
    let tampered = original.replacen(",L2,", ",SquaredL2,", 1);
    assert_ne!(tampered, original);
    std::fs::write(&path, tampered).unwrap();
    assert!(verify_manifest(dir.path()).is_err());
}
