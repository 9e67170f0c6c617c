//! Theory checks over an experiment config, and the lower-bound construction run.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiments::{residual_bound_sweep, prepare_cell, sufficient_condition_value};
use crate::adversary::InputPolicy;
use crate::features::sample_window;
use crate::error::{invalid, Result};
use crate::rng::{self, Stream};
use crate::theory::{
    prob_max_run_below, run_length_threshold, CheckReport, LowerBoundInstance, PairOutcome, NU_FLOOR,
};

/// Relative tolerance of the residual bound check.
pub const RESIDUAL_BOUND_REL_TOL: f64 = 1e-6;

/// Runs the per-seed checks on the first input family, first τ and first ρ of
/// the config: the residual bound, the sampled uniqueness condition, the
/// excitation and ν diagnostics, and the clean-window probability.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<Vec<CheckReport>> {
    cfg.validate()?;
    let input = cfg.inputs.first().ok_or_else(|| invalid("no input family configured"))?;
    let tau = cfg.system.tau[0];
    let rho = cfg.system.rho[0];
    let seeds: Vec<u64> = cfg.seeds().collect();

    struct PerSeed {
        bound_violations: usize,
        bound_ratio: f64,
        condition: f64,
        lambda: f64,
        nu: f64,
    }
    let per_seed: Vec<PerSeed> = seeds
        .par_iter()
        .map(|&seed| -> Result<PerSeed> {
            let data = prepare_cell(cfg, input, tau, rho, seed)?;
            let bound = residual_bound_sweep(&data.spec, &data.trajectory, tau, RESIDUAL_BOUND_REL_TOL)?;
            let condition = sufficient_condition_value(&data, cfg.checks.n_directions, seed)?;
            Ok(PerSeed {
                bound_violations: bound.violations,
                bound_ratio: bound.max_ratio,
                condition,
                lambda: data.basis.lambda_emp.unwrap_or(0.0),
                nu: data.nu.map_or(f64::NAN, |d| d.nu),
            })
        })
        .collect::<Result<_>>()?;

    let n = seeds.len() as f64;
    let violations: usize = per_seed.iter().map(|s| s.bound_violations).sum();
    let worst_ratio = per_seed.iter().map(|s| s.bound_ratio).fold(0.0, f64::max);
    let positive = per_seed.iter().filter(|s| s.condition > 0.0).count() as f64;
    let min_lambda = per_seed.iter().map(|s| s.lambda).fold(f64::INFINITY, f64::min);
    let min_nu = per_seed.iter().map(|s| s.nu).fold(f64::INFINITY, f64::min);
    let p = cfg.attack.policy(tau)?.p;
    let clean_prob = (1.0 - p).powi(tau as i32);

    Ok(vec![
        CheckReport::new("residual_bound", violations == 0, worst_ratio, 1.0 + RESIDUAL_BOUND_REL_TOL, seeds.clone()),
        CheckReport::new("sufficient_condition_positive_fraction", positive / n >= 0.9, positive / n, 0.9, seeds.clone()),
        CheckReport::new("excitation_lambda_min", min_lambda > 0.0, min_lambda, 0.0, seeds.clone()),
        CheckReport::new("nu_diagnostic_min", min_nu >= NU_FLOOR, min_nu, NU_FLOOR, seeds.clone()),
        CheckReport::new("clean_window_probability", clean_prob > 0.5, clean_prob, 0.5, seeds),
    ])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub rho: f64,
    pub l: f64,
    pub tau: usize,
    pub horizon: usize,
    pub delta: f64,
    pub kappa: f64,
    pub c: f64,
    pub sigma_w: f64,
    pub gap: f64,
    /// Largest |h₁ − h₂ clean gap − Lρ^τc| over sampled Rademacher windows.
    pub gap_max_dev: f64,
    pub floor_fraction: f64,
    /// Seeds whose floor held but whose outputs still disagreed.
    pub indistinguishable_failures: Vec<u64>,
    pub lambda_sq: f64,
    pub lambda_sq_se: f64,
    pub lambda_sq_floor: f64,
    /// ‖Ĝ(h₂ data) − [1, 0]‖_F on the first seed.
    pub fitted_gap: f64,
    pub run_tail_empirical: f64,
    pub run_tail_exact: f64,
    pub run_threshold: f64,
    pub outcomes: Vec<PairOutcome>,
}

pub const GAP_WINDOWS: usize = 1000;

/// Builds the two-system construction and checks its identities over
/// `lower_bound.n_seeds` seeds.
pub fn run_lower_bound(cfg: &ExperimentConfig) -> Result<(LowerBoundReport, Vec<CheckReport>)> {
    let lb = &cfg.lower_bound;
    let inst = LowerBoundInstance::build_with_kappa(lb.rho, lb.l, lb.tau, lb.horizon, lb.delta, cfg.base_seed, lb.kappa)?;
    let gap = inst.gap();

    let mut rng = rng::stream(cfg.base_seed, Stream::Custom(7));
    let rademacher = InputPolicy::rademacher();
    let mut gap_max_dev = 0.0_f64;
    for _ in 0..GAP_WINDOWS {
        let window = sample_window(&rademacher, lb.tau, 1, &mut rng);
        gap_max_dev = gap_max_dev.max((inst.clean_gap(window.view())? - gap).abs());
    }

    let seeds: Vec<u64> = (0..lb.n_seeds as u64).map(|k| cfg.base_seed + k).collect();
    let outcomes: Vec<PairOutcome> = seeds
        .par_iter()
        .map(|&seed| inst.simulate_pair(seed).map(|(_, _, o)| o))
        .collect::<Result<_>>()?;
    let floor_fraction = outcomes.iter().filter(|o| o.floor_holds).count() as f64 / outcomes.len().max(1) as f64;
    let indistinguishable_failures: Vec<u64> = outcomes
        .iter()
        .filter(|o| o.floor_holds && !(o.max_obs_gap <= 1e-10 && o.window_consistent))
        .map(|o| o.seed)
        .collect();

    let excitation = inst.excitation(lb.excitation_samples, cfg.base_seed)?;
    let lambda_sq = excitation.lambda_min;
    let lambda_sq_se = excitation.lambda_min_se;
    let lambda_sq_floor = inst.lambda_sq_floor();

    let (traj, _, _) = inst.simulate_pair(cfg.base_seed)?;
    let (_, g2, _) = inst.fit_pair(&traj)?;
    let g1_star = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).expect("shape");
    let fitted_gap = crate::linalg::frobenius((&g2 - &g1_star).view());

    let run_threshold = run_length_threshold(lb.tau, lb.horizon, lb.delta);
    let below = outcomes.iter().filter(|o| (o.longest_clean_run as f64) < run_threshold).count();
    let run_tail_empirical = below as f64 / outcomes.len().max(1) as f64;
    let run_tail_exact = prob_max_run_below(inst.attack_policy.p, lb.horizon, run_threshold.ceil() as usize);

    let checks = vec![
        CheckReport::new("lower_bound_gap_identity", gap_max_dev <= 1e-12, gap_max_dev, 1e-12, vec![cfg.base_seed]),
        CheckReport::new("lower_bound_state_floor", floor_fraction >= 0.9, floor_fraction, 0.9, seeds.clone()),
        CheckReport::new(
            "lower_bound_indistinguishable",
            indistinguishable_failures.is_empty(),
            indistinguishable_failures.len() as f64,
            0.0,
            seeds.clone(),
        ),
        CheckReport::new(
            "lower_bound_excitation",
            lambda_sq >= lambda_sq_floor - 3.0 * lambda_sq_se,
            lambda_sq,
            lambda_sq_floor - 3.0 * lambda_sq_se,
            vec![cfg.base_seed],
        ),
        CheckReport::new(
            "lower_bound_fitted_gap",
            (fitted_gap - 2f64.sqrt()).abs() <= 1e-3,
            fitted_gap,
            2f64.sqrt(),
            vec![cfg.base_seed],
        ),
        CheckReport::new(
            "attack_free_run_tail",
            run_tail_empirical >= 1.0 - lb.delta,
            run_tail_empirical,
            1.0 - lb.delta,
            seeds,
        ),
    ];
    let report = LowerBoundReport {
        rho: lb.rho,
        l: lb.l,
        tau: lb.tau,
        horizon: lb.horizon,
        delta: lb.delta,
        kappa: lb.kappa,
        c: inst.c,
        sigma_w: inst.sigma_w,
        gap,
        gap_max_dev,
        floor_fraction,
        indistinguishable_failures,
        lambda_sq,
        lambda_sq_se,
        lambda_sq_floor,
        fitted_gap,
        run_tail_empirical,
        run_tail_exact,
        run_threshold,
        outcomes,
    };
    Ok((report, checks))
}
