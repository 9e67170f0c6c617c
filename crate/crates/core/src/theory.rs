//! Empirical checks of the analytical devices: the sampled-direction uniqueness
//! condition, the ν diagnostic, the attack-free run length M_T, and the scalar
//! lower-bound construction.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{max_attack_free_run, AttackPolicy, InputPolicy};
use crate::dynamics::{beta, simulate, SystemSpec, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::estimators::{solve, Norm, RegressionProblem, SolverConfig};
use crate::features::{estimate_excitation, BasisSet, Excitation};
use crate::linalg::frobenius;
use crate::rng::{self, Stream};

/// One row of a check report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, pass: bool, value: f64, threshold: f64, seeds: Vec<u64>) -> Self {
        CheckReport {
            check_name: name.into(),
            pass,
            value,
            threshold,
            seeds,
        }
    }
}

// ---- sufficient condition -------------------------------------------------

/// 1{W_t = 0} for t = τ, …, T−1, i.e. w_{t−1} = ⋯ = w_{t−τ} = 0.
pub fn clean_window_flags(traj: &Trajectory, tau: usize) -> Vec<bool> {
    (tau..traj.horizon()).map(|t| traj.disturbance_free_window(t, tau)).collect()
}

#[derive(Clone, Debug)]
pub struct SufficientCondition {
    /// Smallest sampled value of Σ_t ±‖Z Φ_t‖₂.
    pub min_value: f64,
    /// The unit-Frobenius direction attaining it.
    pub argmin: Array2<f64>,
    pub n_directions: usize,
}

const DIRECTION_BATCH: usize = 256;

/// Samples Z uniformly on the unit Frobenius sphere of r×M matrices and
/// minimizes Σ_t s_t ‖Z Φ_t‖₂ with s_t = +1 on clean windows and −1 otherwise.
pub fn check_sufficient_condition(
    features: ArrayView2<f64>,
    clean: &[bool],
    obs_dim: usize,
    n_directions: usize,
    seed: u64,
) -> Result<SufficientCondition> {
    if n_directions < 1 {
        return Err(invalid("need at least one direction"));
    }
    if clean.len() != features.ncols() {
        return Err(Error::DimensionMismatch {
            what: "clean-window flags",
            expected: features.ncols(),
            got: clean.len(),
        });
    }
    let mm = features.nrows();
    let signs: Array1<f64> = clean.iter().map(|&c| if c { 1.0 } else { -1.0 }).collect();
    let batches = n_directions.div_ceil(DIRECTION_BATCH);
    let results: Vec<(f64, Array2<f64>)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let count = DIRECTION_BATCH.min(n_directions - b * DIRECTION_BATCH);
            let mut rng = rng::stream(seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), Stream::Directions);
            let mut z = Array2::<f64>::zeros((count * obs_dim, mm));
            for k in 0..count {
                let mut block = z.slice_mut(ndarray::s![k * obs_dim..(k + 1) * obs_dim, ..]);
                block.mapv_inplace(|_| StandardNormal.sample(&mut rng));
                let norm = frobenius(block.view());
                block /= norm;
            }
            let proj = z.dot(&features);
            let mut best = (f64::INFINITY, 0);
            for k in 0..count {
                let block = proj.slice(ndarray::s![k * obs_dim..(k + 1) * obs_dim, ..]);
                let norms = block.map_axis(Axis(0), |c| c.dot(&c).sqrt());
                let value = norms.dot(&signs);
                if value < best.0 {
                    best = (value, k);
                }
            }
            let k = best.1;
            (best.0, z.slice(ndarray::s![k * obs_dim..(k + 1) * obs_dim, ..]).to_owned())
        })
        .collect();
    let (min_value, argmin) = results
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("at least one batch");
    Ok(SufficientCondition {
        min_value,
        argmin,
        n_directions,
    })
}

// ---- ν diagnostic ---------------------------------------------------------

/// ν must stay bounded away from zero on every bundled instance.
pub const NU_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuDiagnostic {
    pub nu: f64,
    /// τν⁸/(2(1−p)^τ − 1)² · [rM log(τν/(2(1−p)^τ − 1)) + log(1/δ)] with the
    /// absolute constant set to 1. Infinite when 2(1−p)^τ ≤ 1.
    pub time_bound_estimate: f64,
    pub label: String,
}

/// ν = √(Mτ)·L_φ·σ_u/λ from the basis' empirical constants.
pub fn compute_nu(basis: &BasisSet, sigma_u: f64, p: f64, obs_dim: usize, delta: f64) -> Result<NuDiagnostic> {
    let l_phi = basis
        .l_phi
        .ok_or_else(|| invalid("basis has no empirical Lipschitz constant"))?;
    let lambda = basis
        .lambda_emp
        .ok_or_else(|| invalid("basis has no empirical excitation constant"))?;
    if !(lambda > 0.0) {
        return Err(Error::NotExcited(lambda));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(invalid(format!("delta {delta} outside (0, 1]")));
    }
    let tau = basis.tau as f64;
    let mm = basis.len() as f64;
    let nu = (mm * tau).sqrt() * l_phi * sigma_u / lambda;
    let margin = 2.0 * (1.0 - p).powf(tau) - 1.0;
    let time_bound_estimate = if margin > 0.0 {
        let log_term = (obs_dim as f64) * mm * (tau * nu / margin).ln() + (1.0 / delta).ln();
        tau * nu.powi(8) / (margin * margin) * log_term
    } else {
        f64::INFINITY
    };
    Ok(NuDiagnostic {
        nu,
        time_bound_estimate,
        label: "diagnostic, not certified".into(),
    })
}

// ---- attack-free runs -----------------------------------------------------

/// τ·ln(T/δ), the run-length threshold in the M_T tail statement.
pub fn run_length_threshold(tau: usize, horizon: usize, delta: f64) -> f64 {
    tau as f64 * (horizon as f64 / delta).ln()
}

/// ln(T/δ)/(−ln(1−p)): the threshold the union bound actually supports.
pub fn union_bound_run_threshold(p: f64, horizon: usize, delta: f64) -> f64 {
    (horizon as f64 / delta).ln() / -(1.0 - p).ln()
}

/// Exact P(M_T < len) for i.i.d. attacks with probability p, by dynamic
/// programming over the current run length.
pub fn prob_max_run_below(p: f64, horizon: usize, len: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    // state[k] = P(current run = k and no run reached len so far)
    let mut state = vec![0.0; len];
    state[0] = 1.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; len];
        let alive: f64 = state.iter().sum();
        next[0] = alive * p;
        for k in 0..len - 1 {
            next[k + 1] = state[k] * (1.0 - p);
        }
        state = next;
    }
    state.iter().sum()
}

/// Fraction of seeds whose longest attack-free run is below `threshold`.
pub fn empirical_run_tail(p: f64, horizon: usize, threshold: f64, seeds: impl Iterator<Item = u64>) -> (f64, usize) {
    let policy = AttackPolicy::constant(p, 0.0);
    let mut hits = 0;
    let mut n = 0;
    for seed in seeds {
        let mut rng = rng::stream(seed, Stream::AttackFlags);
        let flags: Vec<bool> = (0..horizon).map(|_| policy.draw_flag(&mut rng)).collect();
        hits += usize::from((max_attack_free_run(&flags) as f64) < threshold);
        n += 1;
    }
    (hits as f64 / n.max(1) as f64, n)
}

// ---- lower-bound construction ---------------------------------------------

/// Exponent constant κ in σ_w = (1/ρ)^{⌈κ τ ln(T/δ)⌉}.
pub const DEFAULT_KAPPA: f64 = 2.0;
/// Upper cap on σ_w, far above anything the default parameters need.
pub const SIGMA_W_CAP: f64 = 1e150;

/// c = |1 − tanh(ρ)/(ρ·tanh(1))|.
pub fn lower_bound_constant(rho: f64) -> f64 {
    (1.0 - rho.tanh() / (rho * 1.0_f64.tanh())).abs()
}

#[derive(Clone, Debug)]
pub struct LowerBoundInstance {
    pub rho: f64,
    pub l: f64,
    pub tau: usize,
    pub horizon: usize,
    pub delta: f64,
    pub kappa: f64,
    pub c: f64,
    pub sigma_w: f64,
    pub seed: u64,
    /// Plain scalar system (G* = [1, 0] on the pair basis).
    pub h1: SystemSpec,
    /// β-inserted alternative (G* = [0, 1]).
    pub h2: SystemSpec,
    pub basis: BasisSet,
    pub input_policy: InputPolicy,
    pub attack_policy: AttackPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub seed: u64,
    pub min_state: f64,
    pub floor_holds: bool,
    /// max_t |y_t(h1) − y_t(h2)|
    pub max_obs_gap: f64,
    /// Whether h1's observations match h2's τ-window representation at every t ≥ τ.
    pub window_consistent: bool,
    pub longest_clean_run: usize,
}

impl LowerBoundInstance {
    pub fn build(rho: f64, l: f64, tau: usize, horizon: usize, delta: f64, seed: u64) -> Result<Self> {
        Self::build_with_kappa(rho, l, tau, horizon, delta, seed, DEFAULT_KAPPA)
    }

    pub fn build_with_kappa(
        rho: f64,
        l: f64,
        tau: usize,
        horizon: usize,
        delta: f64,
        seed: u64,
        kappa: f64,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(invalid("the lower-bound construction needs τ ≥ 1"));
        }
        if !(delta > 0.0 && delta < 1.0) || horizon == 0 || !(kappa > 0.0) {
            return Err(invalid("need 0 < δ < 1, T ≥ 1 and κ > 0"));
        }
        let exponent = (kappa * run_length_threshold(tau, horizon, delta)).ceil();
        let sigma_w = (1.0 / rho).powf(exponent).min(SIGMA_W_CAP);
        let limit = 1e3 * sigma_w / (1.0 - rho);
        let h1 = SystemSpec::scalar_contract(rho, l)?.with_state_limit(limit);
        let h2 = SystemSpec::scalar_contract_beta(rho, l)?.with_state_limit(limit);
        Ok(LowerBoundInstance {
            rho,
            l,
            tau,
            horizon,
            delta,
            kappa,
            c: lower_bound_constant(rho),
            sigma_w,
            seed,
            h1,
            h2,
            basis: BasisSet::lower_bound_pair(rho, l, tau),
            input_policy: InputPolicy::rademacher(),
            attack_policy: AttackPolicy::constant(AttackPolicy::probability_for_memory(tau), sigma_w),
        })
    }

    /// L·ρ^τ·c, the clean-mapping gap on every Rademacher window.
    pub fn gap(&self) -> f64 {
        self.l * self.rho.powi(self.tau as i32) * self.c
    }

    /// |h₁(0, U, 0) − h₂(0, U, 0)|.
    pub fn clean_gap(&self, window: ArrayView2<f64>) -> Result<f64> {
        let a = self.h1.unroll_auxiliary(window)?[0];
        let b = self.h2.unroll_auxiliary(window)?[0];
        Ok((a - b).abs())
    }

    /// E[ΦΦᵀ] under Rademacher inputs. With a = Lρ^τc, b = Lρ^τ and
    /// g = L²Σ_{i=0}^{τ} ρ^{2i}, φ₂ = φ₁ + a·u_{t−τ} gives
    /// [[g, g + ab], [g + ab, g + 2ab + a²]].
    pub fn closed_form_gram(&self) -> Array2<f64> {
        let g: f64 = (0..=self.tau).map(|i| self.l * self.l * self.rho.powi(2 * i as i32)).sum();
        let b = self.l * self.rho.powi(self.tau as i32);
        let a = b * self.c;
        ndarray::array![[g, g + a * b], [g + a * b, g + 2.0 * a * b + a * a]]
    }

    /// (Lρ^τc)²/3, the excitation floor.
    pub fn lambda_sq_floor(&self) -> f64 {
        self.gap().powi(2) / 3.0
    }

    pub fn excitation(&self, n_mc: usize, seed: u64) -> Result<Excitation> {
        estimate_excitation(&self.basis, &self.input_policy, n_mc, seed)
    }

    /// Simulates both systems from x₀ = σ_w with identical streams.
    pub fn simulate_pair(&self, seed: u64) -> Result<(Trajectory, Trajectory, PairOutcome)> {
        let x0 = Array1::from_elem(1, self.sigma_w);
        let t1 = simulate(&self.h1, &self.input_policy, &self.attack_policy, x0.view(), self.horizon, seed)?;
        let t2 = simulate(&self.h2, &self.input_policy, &self.attack_policy, x0.view(), self.horizon, seed)?;
        let min_state = t1.states.iter().copied().fold(f64::INFINITY, f64::min);
        let max_obs_gap = t1
            .observations
            .iter()
            .zip(t2.observations.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let mut window_consistent = true;
        for t in self.tau..self.horizon {
            let x_old = t1.states.row(t - self.tau);
            let inputs = t1.input_window(t, self.tau)?;
            let dists = t1.disturbances.slice(ndarray::s![t - self.tau..t, ..]);
            let y2 = self.h2.window_map(x_old, inputs, dists)?;
            window_consistent &= y2[0] == t1.observations[[t, 0]];
        }
        let outcome = PairOutcome {
            seed,
            min_state,
            floor_holds: min_state >= 1.0,
            max_obs_gap,
            window_consistent,
            longest_clean_run: max_attack_free_run(&t1.attack_flags),
        };
        Ok((t1, t2, outcome))
    }

    /// Fits Ĝ to the clean mapping of h₁ and of h₂ on the windows of a
    /// trajectory, with the ℓ2 estimator. Returns (Ĝ₁, Ĝ₂, ‖Ĝ₁ − Ĝ₂‖_F).
    pub fn fit_pair(&self, traj: &Trajectory) -> Result<(Array2<f64>, Array2<f64>, f64)> {
        let features = self.basis.design_matrix(traj.inputs.view())?;
        let mut y1 = Array2::zeros((1, features.ncols()));
        let mut y2 = Array2::zeros((1, features.ncols()));
        for (k, t) in (self.tau..traj.horizon()).enumerate() {
            let window = traj.input_window(t, self.tau)?;
            y1[[0, k]] = self.h1.unroll_auxiliary(window)?[0];
            y2[[0, k]] = self.h2.unroll_auxiliary(window)?[0];
        }
        let cfg = SolverConfig::default();
        let g1 = solve(&RegressionProblem::new(features.clone(), y1, Norm::L2, self.tau)?, &cfg)?.g_hat;
        let g2 = solve(&RegressionProblem::new(features, y2, Norm::L2, self.tau)?, &cfg)?.g_hat;
        let gap = frobenius((&g1 - &g2).view());
        Ok((g1, g2, gap))
    }
}

/// Sanity helper for the β map used throughout: β(1⁻) vs β(1⁺).
pub fn beta_jump_at_one() -> f64 {
    let below = beta(1.0);
    let above = beta(1.0 + f64::EPSILON);
    (below - above).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn c_is_strictly_between_zero_and_one() {
        for i in 1..100 {
            let rho = i as f64 / 100.0;
            let c = lower_bound_constant(rho);
            assert!(c > 0.0 && c < 1.0, "rho {rho}: {c}");
        }
        assert!(beta_jump_at_one() <= 1e-12);
    }

    #[test]
    fn gap_is_exact_on_rademacher_windows() {
        let inst = LowerBoundInstance::build(0.5, 1.0, 5, 500, 0.1, 0).unwrap();
        let mut rng = rng::stream(1, Stream::Custom(3));
        for _ in 0..200 {
            let w = crate::features::sample_window(&InputPolicy::rademacher(), 5, 1, &mut rng);
            assert!((inst.clean_gap(w.view()).unwrap() - inst.gap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigma_w_follows_the_exponent_rule() {
        let inst = LowerBoundInstance::build(0.5, 1.0, 5, 500, 0.1, 0).unwrap();
        let exponent = (2.0 * 5.0 * (500.0_f64 / 0.1).ln()).ceil();
        assert_eq!(exponent, 86.0);
        assert_eq!(inst.sigma_w, 2f64.powi(86));
        assert_eq!(inst.attack_policy.p, 1.0 / 11.0);
    }

    #[test]
    fn sufficient_condition_signs() {
        let mut rng = rng::stream(2, Stream::Custom(4));
        let phi = Array2::from_shape_fn((4, 60), |_| StandardNormal.sample(&mut rng));
        let clean = check_sufficient_condition(phi.view(), &[true; 60], 2, 500, 1).unwrap();
        assert!(clean.min_value > 0.0);
        assert!((frobenius(clean.argmin.view()) - 1.0).abs() < 1e-12);
        let attacked = check_sufficient_condition(phi.view(), &[false; 60], 2, 500, 1).unwrap();
        assert!(attacked.min_value < 0.0);
        assert!(check_sufficient_condition(phi.view(), &[true; 60], 2, 0, 1).is_err());
        assert!(check_sufficient_condition(phi.view(), &[true; 59], 2, 10, 1).is_err());
    }

    #[test]
    fn sampled_minimum_matches_direct_evaluation() {
        let mut rng = rng::stream(3, Stream::Custom(5));
        let phi = Array2::from_shape_fn((3, 40), |_| StandardNormal.sample(&mut rng));
        let flags: Vec<bool> = (0..40).map(|t| t % 4 != 0).collect();
        let res = check_sufficient_condition(phi.view(), &flags, 2, 700, 9).unwrap();
        let direct: f64 = (0..40)
            .map(|t| {
                let v = res.argmin.dot(&phi.column(t));
                let s = if flags[t] { 1.0 } else { -1.0 };
                s * v.dot(&v).sqrt()
            })
            .sum();
        assert!((direct - res.min_value).abs() <= 1e-10 * direct.abs().max(1.0));
        let again = check_sufficient_condition(phi.view(), &flags, 2, 700, 9).unwrap();
        assert_eq!(again.min_value, res.min_value);
    }

    #[test]
    fn nu_by_hand() {
        let mut basis = BasisSet::linear(1, 1);
        basis.l_phi = Some(1.0);
        basis.lambda_emp = Some(1.0);
        let d = compute_nu(&basis, 1.0, 0.1, 1, 0.1).unwrap();
        // M = 2, τ = 1
        assert!((d.nu - 2f64.sqrt()).abs() < 1e-15);
        let margin = 2.0 * 0.9 - 1.0;
        let expected = d.nu.powi(8) / (margin * margin) * (2.0 * (d.nu / margin).ln() + 10f64.ln());
        assert!((d.time_bound_estimate - expected).abs() <= 1e-12 * expected);
        basis.lambda_emp = Some(0.0);
        assert!(matches!(compute_nu(&basis, 1.0, 0.1, 1, 0.1), Err(Error::NotExcited(_))));
    }

    #[test]
    fn run_length_dp_matches_enumeration() {
        // Enumerate all 2^10 flag patterns.
        let (p, horizon, len) = (0.3_f64, 10, 3);
        let mut exact = 0.0;
        for mask in 0u32..(1 << horizon) {
            let flags: Vec<bool> = (0..horizon).map(|i| mask >> i & 1 == 1).collect();
            if max_attack_free_run(&flags) < len {
                let k = mask.count_ones() as i32;
                exact += p.powi(k) * (1.0 - p).powi(horizon as i32 - k);
            }
        }
        assert!((prob_max_run_below(p, horizon, len) - exact).abs() < 1e-14);
    }

    #[test]
    fn pair_is_indistinguishable_above_the_floor() {
        let inst = LowerBoundInstance::build(0.5, 1.0, 3, 60, 0.1, 0).unwrap();
        let (_, _, out) = inst.simulate_pair(4).unwrap();
        assert!(out.floor_holds);
        assert_eq!(out.max_obs_gap, 0.0);
        assert!(out.window_consistent);
    }

    #[test]
    fn fitted_pair_is_root_two_apart() {
        let inst = LowerBoundInstance::build(0.5, 1.0, 3, 200, 0.1, 0).unwrap();
        let (traj, _, _) = inst.simulate_pair(2).unwrap();
        let (g1, g2, gap) = inst.fit_pair(&traj).unwrap();
        assert!((&g1 - &array![[1.0, 0.0]]).iter().all(|v| v.abs() < 1e-6));
        assert!((&g2 - &array![[0.0, 1.0]]).iter().all(|v| v.abs() < 1e-6));
        assert!((gap - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn report_json_shape() {
        let r = CheckReport::new("residual_bound", true, 0.0, 1e-6, vec![1, 2]);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["check_name", "pass", "value", "threshold", "seeds"] {
            assert!(v.get(k).is_some());
        }
    }
}
