//! Seeded experiment grids: simulate, fit G* once per cell, solve every
//! estimator on growing prefixes, and summarize the plateau error.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::adversary::{AttackPolicy, InputPolicy};
use crate::dynamics::{window_residual, simulate, SystemSpec, Trajectory};
use crate::error::{invalid, Result};
use crate::estimators::{solve, Norm, RegressionProblem};
use crate::features::{estimate_excitation, estimate_lipschitz, fit_ground_truth, BasisSet, GroundTruth, GroundTruthConfig};
use crate::rng::{self, Stream};
use crate::theory::{check_sufficient_condition, clean_window_flags, compute_nu, NuDiagnostic};

pub const SCHEMA_VERSION: u32 = 1;

/// Fraction of the horizon, counted from the end, that defines the plateau.
pub const PLATEAU_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub input: String,
    pub t: usize,
    pub estimator: String,
    pub tau: usize,
    pub rho: f64,
    pub frob_error: f64,
    pub eps_bar: f64,
    pub lambda_emp: f64,
    pub nu: f64,
    pub converged: bool,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub input: String,
    pub tau: usize,
    pub rho: f64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub input: String,
    pub tau: usize,
    pub rho: f64,
    pub estimator: String,
    /// Median over seeds of the per-seed mean error over the plateau window.
    pub plateau_median: f64,
    pub plateau_per_seed: Vec<f64>,
    /// Least-squares slope of the median error curve over the plateau window,
    /// times the window length, divided by the window mean.
    pub relative_slope: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<SeedFailure>,
    pub summary: Vec<GroupSummary>,
    /// Wall time per (seed, cell), in the order of `cells`.
    pub cell_ms: Vec<(u64, String, usize, f64, f64)>,
}

impl ExperimentOutput {
    pub fn group(&self, input: &str, tau: usize, rho: f64, estimator: Norm) -> Option<&GroupSummary> {
        self.summary
            .iter()
            .find(|g| g.input == input && g.tau == tau && g.rho == rho && g.estimator == estimator.name())
    }
}

/// Evaluation horizons t = τ + kΔ (k ≥ 1, below T) followed by T itself.
pub fn eval_horizons(horizon: usize, tau: usize, points: usize) -> Vec<usize> {
    let delta = (horizon / points.max(1)).max(1);
    let mut out: Vec<usize> = (1..).map(|k| tau + k * delta).take_while(|&t| t < horizon).collect();
    out.push(horizon);
    out
}

/// Everything computed for one (input family, τ, ρ, seed) cell before estimation.
#[derive(Clone, Debug)]
pub struct CellData {
    pub spec: SystemSpec,
    pub basis: BasisSet,
    pub ground_truth: GroundTruth,
    pub trajectory: Trajectory,
    pub attack: AttackPolicy,
    /// Columns Φ(U_t), t = τ..T−1.
    pub features: Array2<f64>,
    /// Columns y_t, t = τ..T−1.
    pub targets: Array2<f64>,
    pub nu: Option<NuDiagnostic>,
}

pub fn prepare_cell(cfg: &ExperimentConfig, input: &InputPolicy, tau: usize, rho: f64, seed: u64) -> Result<CellData> {
    let sys = &cfg.system;
    let mut matrix_rng = rng::stream(seed, Stream::SystemMatrices);
    let spec = SystemSpec::random_activated_linear(sys.state_dim, sys.input_dim, sys.obs_dim, rho, sys.activation, &mut matrix_rng)?;
    let window = InputPolicy::uniform(cfg.basis.window_lo, cfg.basis.window_hi);
    let mut basis = BasisSet::random_poly_kernel(cfg.basis.count, cfg.basis.degree, tau, sys.input_dim, &window, seed)?;
    let gt_cfg = GroundTruthConfig {
        n_samples: cfg.basis.gt_samples,
        train_fraction: cfg.basis.train_fraction,
        reg_grid: cfg.basis.reg_grid.clone(),
        sampler: window,
        seed,
    };
    let ground_truth = fit_ground_truth(&spec, &basis, &gt_cfg)?;

    let attack = cfg.attack.policy(tau)?;
    let x0 = Array1::from_elem(sys.state_dim, sys.x0);
    let trajectory = simulate(&spec, input, &attack, x0.view(), sys.horizon, seed)?;
    let features = basis.design_matrix(trajectory.inputs.view())?;
    let targets = trajectory.observations.slice(s![tau.., ..]).t().to_owned();

    let excitation = estimate_excitation(&basis, input, cfg.basis.excitation_samples.max(10 * basis.len()), seed)?;
    basis.lambda_emp = Some(excitation.lambda_emp);
    basis.l_phi = Some(estimate_lipschitz(&basis, input, cfg.basis.lipschitz_pairs, seed)?);
    let nu = compute_nu(&basis, input.sigma_u, attack.p, sys.obs_dim, cfg.checks.delta).ok();

    Ok(CellData {
        spec,
        basis,
        ground_truth,
        trajectory,
        attack,
        features,
        targets,
        nu,
    })
}

#[derive(Clone, Debug)]
struct Cell {
    input_index: usize,
    tau: usize,
    rho: f64,
    seed: u64,
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        for input_index in 0..cfg.inputs.len() {
            for &tau in &cfg.system.tau {
                for &rho in &cfg.system.rho {
                    out.push(Cell {
                        input_index,
                        tau,
                        rho,
                        seed,
                    });
                }
            }
        }
    }
    out
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, hash: &str) -> Result<Vec<ResultRow>> {
    let input = &cfg.inputs[cell.input_index];
    let data = prepare_cell(cfg, input, cell.tau, cell.rho, cell.seed)?;
    let full = RegressionProblem::new(data.features.clone(), data.targets.clone(), Norm::L2, cell.tau)?;
    let lambda_emp = data.basis.lambda_emp.unwrap_or(0.0);
    let nu = data.nu.as_ref().map_or(f64::NAN, |d| d.nu);
    let mut rows = Vec::new();
    for &norm in &cfg.estimators {
        for t in eval_horizons(cfg.system.horizon, cell.tau, cfg.eval_points) {
            let problem = full.prefix(t - cell.tau).with_norm(norm);
            let report = solve(&problem, &cfg.solver)?.with_truth(&data.ground_truth.g_star);
            rows.push(ResultRow {
                schema_version: SCHEMA_VERSION,
                experiment: cfg.experiment.name().into(),
                config_hash: hash.into(),
                seed: cell.seed,
                input: input.label(),
                t,
                estimator: norm.name().into(),
                tau: cell.tau,
                rho: cell.rho,
                frob_error: report.frob_error.unwrap_or(f64::NAN),
                eps_bar: data.ground_truth.eps_bar,
                lambda_emp,
                nu,
                converged: report.converged,
                iters: report.iters,
            });
        }
    }
    Ok(rows)
}

/// Runs every (seed, input, τ, ρ) cell of the grid. Failed cells are
/// recorded in `failures`; rows are sorted by (experiment, seed, estimator, t)
/// with input, τ and ρ as tie-breakers.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let hash = cfg.short_hash();
    let grid = cells(cfg);
    let results: Vec<(Cell, Result<Vec<ResultRow>>, f64)> = grid
        .into_par_iter()
        .map(|cell| {
            let start = Instant::now();
            let res = run_cell(cfg, &cell, &hash);
            (cell, res, start.elapsed().as_secs_f64() * 1e3)
        })
        .collect();

    let mut out = ExperimentOutput::default();
    for (cell, res, ms) in results {
        let label = cfg.inputs[cell.input_index].label();
        out.cell_ms.push((cell.seed, label.clone(), cell.tau, cell.rho, ms));
        match res {
            Ok(rows) => out.rows.extend(rows),
            Err(e) => out.failures.push(SeedFailure {
                seed: cell.seed,
                input: label,
                tau: cell.tau,
                rho: cell.rho,
                error: e.to_string(),
            }),
        }
    }
    out.rows.sort_by(|a, b| {
        (&a.experiment, a.seed, &a.estimator, a.t, &a.input, a.tau)
            .cmp(&(&b.experiment, b.seed, &b.estimator, b.t, &b.input, b.tau))
            .then(a.rho.total_cmp(&b.rho))
    });
    out.summary = summarize(&out.rows, cfg.system.horizon);
    Ok(out)
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.experiment != kind {
        return Err(invalid(format!(
            "expected a {} config, got {}",
            kind.name(),
            cfg.experiment.name()
        )));
    }
    Ok(())
}

/// Least squares vs the ℓ2 estimator.
pub fn run_experiment_1(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    expect_kind(cfg, ExperimentKind::CompareLsL2)?;
    run_grid(cfg)
}

/// ℓ1 vs ℓ2 vs ℓ∞.
pub fn run_experiment_2(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    expect_kind(cfg, ExperimentKind::CompareNorms)?;
    run_grid(cfg)
}

/// ℓ2 error over a (τ, ρ) grid.
pub fn run_experiment_3(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    expect_kind(cfg, ExperimentKind::SweepTauRho)?;
    run_grid(cfg)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Plateau statistics per (input, τ, ρ, estimator).
pub fn summarize(rows: &[ResultRow], horizon: usize) -> Vec<GroupSummary> {
    let start = horizon as f64 * (1.0 - PLATEAU_FRACTION);
    type Key = (String, usize, u64, String);
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<(usize, f64)>>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.t as f64 >= start) {
        groups
            .entry((row.input.clone(), row.tau, row.rho.to_bits(), row.estimator.clone()))
            .or_default()
            .entry(row.seed)
            .or_default()
            .push((row.t, row.frob_error));
    }
    groups
        .into_iter()
        .map(|((input, tau, rho_bits, estimator), by_seed)| {
            let mut per_seed: Vec<f64> = by_seed
                .values()
                .map(|pts| pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64)
                .collect();
            let plateau_per_seed = per_seed.clone();
            let plateau_median = median(&mut per_seed);

            let mut by_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for pts in by_seed.values() {
                for &(t, e) in pts {
                    by_t.entry(t).or_default().push(e);
                }
            }
            let curve: Vec<(f64, f64)> = by_t.into_iter().map(|(t, mut v)| (t as f64, median(&mut v))).collect();
            GroupSummary {
                input,
                tau,
                rho: f64::from_bits(rho_bits),
                estimator,
                plateau_median,
                plateau_per_seed,
                relative_slope: relative_slope(&curve),
            }
        })
        .collect()
}

fn relative_slope(curve: &[(f64, f64)]) -> f64 {
    if curve.len() < 2 {
        return 0.0;
    }
    let n = curve.len() as f64;
    let mt = curve.iter().map(|p| p.0).sum::<f64>() / n;
    let me = curve.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = curve.iter().map(|p| (p.0 - mt) * (p.1 - me)).sum();
    let sxx: f64 = curve.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let span = curve[curve.len() - 1].0 - curve[0].0;
    if me == 0.0 {
        0.0
    } else {
        sxy / sxx * span / me
    }
}

// ---- per-seed checks --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBoundSummary {
    pub checked: usize,
    pub violations: usize,
    /// Largest ‖residual‖ / (W_bound + x_bound) observed.
    pub max_ratio: f64,
}

/// Checks the residual bound at every t ≥ τ of a trajectory with relative
/// tolerance `rel_tol`.
pub fn residual_bound_sweep(spec: &SystemSpec, traj: &Trajectory, tau: usize, rel_tol: f64) -> Result<ResidualBoundSummary> {
    let mut summary = ResidualBoundSummary {
        checked: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    for t in tau..traj.horizon() {
        let terms = window_residual(spec, traj, t, tau)?;
        let bound = terms.w_bound + terms.x_bound;
        summary.checked += 1;
        if !terms.holds(rel_tol, 0.0) {
            summary.violations += 1;
        }
        if bound > 0.0 {
            summary.max_ratio = summary.max_ratio.max(terms.residual_norm() / bound);
        } else if terms.residual_norm() > 0.0 {
            summary.max_ratio = f64::INFINITY;
        }
    }
    Ok(summary)
}

/// Sampled-direction minimum of the uniqueness condition on one cell.
pub fn sufficient_condition_value(data: &CellData, n_directions: usize, seed: u64) -> Result<f64> {
    let tau = data.basis.tau;
    let clean = clean_window_flags(&data.trajectory, tau);
    Ok(check_sufficient_condition(data.features.view(), &clean, data.spec.obs_dim, n_directions, seed)?.min_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Scale;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(kind, Scale::Desk);
        cfg.system.state_dim = 6;
        cfg.system.input_dim = 2;
        cfg.system.obs_dim = 3;
        cfg.system.horizon = 120;
        cfg.system.tau = vec![2];
        cfg.basis.count = 8;
        cfg.basis.gt_samples = 200;
        cfg.basis.excitation_samples = 2_000;
        cfg.basis.lipschitz_pairs = 200;
        cfg.n_seeds = 2;
        cfg.eval_points = 10;
        cfg
    }

    #[test]
    fn horizons_cover_the_run() {
        let h = eval_horizons(500, 5, 50);
        assert_eq!(h[0], 15);
        assert_eq!(*h.last().unwrap(), 500);
        assert!(h.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_rows_are_sorted_and_complete() {
        let cfg = tiny(ExperimentKind::CompareLsL2);
        let out = run_experiment_1(&cfg).unwrap();
        assert!(out.failures.is_empty());
        let per_cell = eval_horizons(120, 2, 10).len() * 2;
        assert_eq!(out.rows.len(), per_cell * 2 * 2);
        let keys: Vec<_> = out.rows.iter().map(|r| (r.seed, r.estimator.clone(), r.t)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(out.rows.iter().all(|r| r.frob_error >= 0.0));
        assert_eq!(out.summary.len(), 2 * 2);
        assert!(run_experiment_2(&cfg).is_err());
    }

    #[test]
    fn rerun_is_bit_identical() {
        let cfg = tiny(ExperimentKind::CompareNorms);
        let a = run_experiment_2(&cfg).unwrap();
        let b = run_experiment_2(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let mut cfg = tiny(ExperimentKind::Custom);
        cfg.system.activation = crate::dynamics::Activation::SignLog;
        cfg.system.x0 = 1e13;
        cfg.n_seeds = 1;
        let out = run_grid(&cfg).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.failures.len(), 2);
        assert!(out.failures[0].error.contains("t = 0"));
    }

    #[test]
    fn relative_slope_of_a_line() {
        let flat = [(0.0, 2.0), (1.0, 2.0), (2.0, 2.0)];
        assert_eq!(relative_slope(&flat), 0.0);
        let rising = [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)];
        assert!((relative_slope(&rising) - 1.0).abs() < 1e-12);
    }
}
