//! Sum-of-norms estimators Ĝ = argmin_G Σ_t ‖y_t − G Φ_t‖_α.
//!
//! * `SquaredL2`: ordinary least squares through Householder QR.
//! * `L2`, `L1`: iteratively reweighted least squares with weights
//!   1/max(‖r_t‖, ε) (L1 runs per output row with 1/max(|r_ti|, ε)).
//! * `Linf`: log-sum-exp smoothing ‖r‖_∞ ≈ μ log Σ_i (e^{r_i/μ} + e^{−r_i/μ})
//!   minimized by damped Newton while μ is annealed, with a Polyak
//!   subgradient fallback.
//!
//! ε is taken relative to the RMS target norm, so scaling all targets by s
//! scales Ĝ by s.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::matrix_rows;
use crate::linalg::{cholesky_solve, frobenius, qr_least_squares};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
    Linf,
    SquaredL2,
}

impl Norm {
    pub const ALL: [Norm; 4] = [Norm::L1, Norm::L2, Norm::Linf, Norm::SquaredL2];

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "L1",
            Norm::L2 => "L2",
            Norm::Linf => "Linf",
            Norm::SquaredL2 => "SquaredL2",
        }
    }

    /// The per-sample loss of one residual vector.
    pub fn loss(self, r: ndarray::ArrayView1<f64>) -> f64 {
        match self {
            Norm::L1 => r.iter().map(|v| v.abs()).sum(),
            Norm::L2 => r.dot(&r).sqrt(),
            Norm::Linf => r.iter().fold(0.0, |m, v| m.max(v.abs())),
            Norm::SquaredL2 => r.dot(&r),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Norm::ALL
            .into_iter()
            .find(|n| n.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown norm {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    #[serde(rename = "IRLS")]
    Irls,
    SubgradientPolyak,
    NormalEquations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub smoothing_eps: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub backend: Backend,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            smoothing_eps: 1e-8,
            max_iters: 10_000,
            rel_tol: 1e-9,
            backend: Backend::Irls,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_eps > 0.0) || !(self.rel_tol > 0.0) || self.max_iters == 0 {
            return Err(invalid("solver needs positive smoothing_eps, rel_tol and max_iters"));
        }
        Ok(())
    }
}

/// Columns of `features` are Φ_t, columns of `targets` are y_t, for t = t0, t0+1, ….
#[derive(Clone, Debug)]
pub struct RegressionProblem {
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
    pub norm: Norm,
    pub t0: usize,
}

impl RegressionProblem {
    pub fn new(features: Array2<f64>, targets: Array2<f64>, norm: Norm, t0: usize) -> Result<Self> {
        let p = RegressionProblem {
            features,
            targets,
            norm,
            t0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.ncols() != self.targets.ncols() {
            return Err(Error::DimensionMismatch {
                what: "sample count",
                expected: self.features.ncols(),
                got: self.targets.ncols(),
            });
        }
        if self.features.ncols() == 0 {
            return Err(invalid("regression problem has no samples"));
        }
        if self.features.iter().chain(self.targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression problem"));
        }
        Ok(())
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> RegressionProblem {
        RegressionProblem {
            features: self.features.slice(s![.., ..n]).to_owned(),
            targets: self.targets.slice(s![.., ..n]).to_owned(),
            norm: self.norm,
            t0: self.t0,
        }
    }

    pub fn with_norm(&self, norm: Norm) -> RegressionProblem {
        RegressionProblem { norm, ..self.clone() }
    }

    pub fn n_samples(&self) -> usize {
        self.features.ncols()
    }

    pub fn residuals(&self, g: &Array2<f64>) -> Array2<f64> {
        &self.targets - &g.dot(&self.features)
    }

    /// Σ_t ‖y_t − G Φ_t‖_α.
    pub fn objective(&self, g: &Array2<f64>) -> f64 {
        self.residuals(g).columns().into_iter().map(|r| self.norm.loss(r)).sum()
    }

    fn target_scale(&self) -> f64 {
        let n = self.n_samples() as f64;
        let s = (self.targets.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

impl ResidualSummary {
    fn of(residuals: &Array2<f64>) -> Self {
        let mut norms: Vec<f64> = residuals.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
        if norms.is_empty() {
            return Self::default();
        }
        norms.sort_by(f64::total_cmp);
        let q = |p: f64| norms[((norms.len() - 1) as f64 * p).round() as usize];
        ResidualSummary {
            min: norms[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: norms[norms.len() - 1],
            mean: norms.iter().sum::<f64>() / norms.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    #[serde(rename = "G_hat", with = "matrix_rows")]
    pub g_hat: Array2<f64>,
    pub norm: Norm,
    pub backend: Backend,
    /// Exact objective Σ‖y_t − Ĝ Φ_t‖_α at Ĝ.
    pub objective: f64,
    pub iters: usize,
    pub converged: bool,
    /// True when least squares met a rank-deficient design and returned the
    /// minimum-norm solution.
    pub rank_deficient: bool,
    pub frob_error: Option<f64>,
    pub residuals: ResidualSummary,
    /// The objective the iteration actually decreases (ε-smoothed for IRLS,
    /// log-sum-exp for Linf), one entry per iterate.
    pub objective_history: Vec<f64>,
    /// Whether `objective_history` is non-increasing to 1e-12 relative.
    pub monotone: bool,
}

impl EstimateReport {
    pub fn with_truth(mut self, g_star: &Array2<f64>) -> Self {
        self.frob_error = Some(frobenius((g_star - &self.g_hat).view()));
        self
    }
}

fn is_monotone(history: &[f64]) -> bool {
    history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(f64::MIN_POSITIVE))
}

struct Outcome {
    g: Array2<f64>,
    iters: usize,
    converged: bool,
    rank_deficient: bool,
    history: Vec<f64>,
}

pub fn solve(problem: &RegressionProblem, config: &SolverConfig) -> Result<EstimateReport> {
    problem.validate()?;
    config.validate()?;
    let out = match (problem.norm, config.backend) {
        (Norm::SquaredL2, Backend::NormalEquations) => normal_equations(problem)?,
        (Norm::SquaredL2, _) => least_squares(problem)?,
        (_, Backend::NormalEquations) => {
            return Err(invalid("the normal-equations backend only solves SquaredL2"));
        }
        (norm, Backend::SubgradientPolyak) => {
            let start = least_squares(problem)?.g;
            polyak(problem, norm, start, config)
        }
        (Norm::L2, Backend::Irls) => irls_l2(problem, config)?,
        (Norm::L1, Backend::Irls) => irls_l1(problem, config)?,
        (Norm::Linf, Backend::Irls) => linf(problem, config)?,
    };
    let residuals = problem.residuals(&out.g);
    Ok(EstimateReport {
        objective: problem.objective(&out.g),
        residuals: ResidualSummary::of(&residuals),
        monotone: is_monotone(&out.history),
        g_hat: out.g,
        norm: problem.norm,
        backend: config.backend,
        iters: out.iters,
        converged: out.converged,
        rank_deficient: out.rank_deficient,
        frob_error: None,
        objective_history: out.history,
    })
}

fn least_squares(problem: &RegressionProblem) -> Result<Outcome> {
    let sol = qr_least_squares(problem.features.t(), problem.targets.t())?;
    let g = sol.solution.reversed_axes();
    let history = vec![problem.with_norm(Norm::SquaredL2).objective(&g)];
    Ok(Outcome {
        g,
        iters: 1,
        converged: true,
        rank_deficient: sol.rank_deficient,
        history,
    })
}

fn normal_equations(problem: &RegressionProblem) -> Result<Outcome> {
    let phi = &problem.features;
    let gram = phi.dot(&phi.t());
    match cholesky_solve(gram.view(), phi.dot(&problem.targets.t()).view()) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => {
            let g = sol.reversed_axes();
            let history = vec![problem.objective(&g)];
            Ok(Outcome {
                g,
                iters: 1,
                converged: true,
                rank_deficient: false,
                history,
            })
        }
        _ => least_squares(problem),
    }
}

/// Solves min Σ_t w_t ‖y_t − G Φ_t‖² for G (r×M). Weighted normal equations
/// with a QR fallback.
fn weighted_lstsq(phi: ArrayView2<f64>, y: ArrayView2<f64>, w: &Array1<f64>) -> Result<Array2<f64>> {
    let weighted = phi.to_owned() * w;
    let gram = weighted.dot(&phi.t());
    let rhs = weighted.dot(&y.t());
    if let Some(sol) = cholesky_solve(gram.view(), rhs.view()) {
        if sol.iter().all(|v| v.is_finite()) {
            return Ok(sol.reversed_axes());
        }
    }
    let root = w.mapv(f64::sqrt);
    let a = (phi.to_owned() * &root).reversed_axes();
    let b = (y.to_owned() * &root).reversed_axes();
    Ok(qr_least_squares(a.view(), b.view())?.solution.reversed_axes())
}

/// ε-smoothed absolute value: |x| above ε, x²/(2ε) + ε/2 below. IRLS with
/// weights 1/max(|x|, ε) is a majorize-minimize scheme for it.
#[inline]
fn huber(x: f64, eps: f64) -> f64 {
    if x >= eps {
        x
    } else {
        x * x / (2.0 * eps) + eps / 2.0
    }
}

fn converged_step(prev: f64, cur: f64, rel_tol: f64) -> bool {
    (prev - cur).abs() <= rel_tol * prev.abs() || cur == 0.0
}

/// IRLS converges linearly, and a small objective change alone can stop it
/// well before the first-order condition holds.
const L2_STATIONARITY_TARGET: f64 = 1e-6;

fn irls_l2(problem: &RegressionProblem, config: &SolverConfig) -> Result<Outcome> {
    let eps = config.smoothing_eps * problem.target_scale();
    let init = least_squares(problem)?;
    let mut g = init.g;
    let smoothed = |g: &Array2<f64>| -> (f64, Array1<f64>) {
        let r = problem.residuals(g);
        let norms = r.map_axis(Axis(0), |c| c.dot(&c).sqrt());
        (norms.iter().map(|&n| huber(n, eps)).sum(), norms)
    };
    let (mut f, mut norms) = smoothed(&g);
    let mut history = vec![f];
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        iters += 1;
        let w = norms.mapv(|n| 1.0 / n.max(eps));
        let g_next = weighted_lstsq(problem.features.view(), problem.targets.view(), &w)?;
        let (f_next, norms_next) = smoothed(&g_next);
        // Rounding can make the exact MM step fail to decrease near the optimum.
        if f_next > f {
            converged = converged_step(f, f_next, config.rel_tol);
            break;
        }
        let done = converged_step(f, f_next, config.rel_tol) && {
            let (res, scale) = stationarity_residual(problem, &g_next, config.smoothing_eps);
            res <= L2_STATIONARITY_TARGET * scale
        };
        g = g_next;
        f = f_next;
        norms = norms_next;
        history.push(f);
        if done {
            converged = true;
            break;
        }
    }
    Ok(Outcome {
        g,
        iters,
        converged,
        rank_deficient: init.rank_deficient,
        history,
    })
}

fn irls_l1(problem: &RegressionProblem, config: &SolverConfig) -> Result<Outcome> {
    let eps = config.smoothing_eps * problem.target_scale();
    let init = least_squares(problem)?;
    let rows = problem.targets.nrows();
    let mut g = init.g;
    let smoothed_row = |row: &Array1<f64>, i: usize| -> (f64, Array1<f64>) {
        let r = &problem.targets.row(i) - &row.dot(&problem.features);
        let abs = r.mapv(f64::abs);
        (abs.iter().map(|&a| huber(a, eps)).sum(), abs)
    };
    // Each output row is an independent least-absolute-deviations problem.
    let mut total_history: Vec<f64> = Vec::new();
    let mut max_iters = 0;
    let mut all_converged = true;
    let mut row_histories = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut coef = g.row(i).to_owned();
        let (mut f, mut abs) = smoothed_row(&coef, i);
        let mut history = vec![f];
        let mut converged = false;
        let mut iters = 0;
        let y_i = problem.targets.slice(s![i..=i, ..]);
        while iters < config.max_iters {
            iters += 1;
            let w = abs.mapv(|a| 1.0 / a.max(eps));
            let next = weighted_lstsq(problem.features.view(), y_i, &w)?.row(0).to_owned();
            let (f_next, abs_next) = smoothed_row(&next, i);
            if f_next > f {
                converged = converged_step(f, f_next, config.rel_tol);
                break;
            }
            let done = converged_step(f, f_next, config.rel_tol);
            coef = next;
            f = f_next;
            abs = abs_next;
            history.push(f);
            if done {
                converged = true;
                break;
            }
        }
        g.row_mut(i).assign(&coef);
        max_iters = max_iters.max(iters);
        all_converged &= converged;
        row_histories.push(history);
    }
    // Total smoothed objective per iteration; finished rows hold their last value.
    let len = row_histories.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..len {
        total_history.push(row_histories.iter().map(|h| h[k.min(h.len() - 1)]).sum());
    }
    Ok(Outcome {
        g,
        iters: max_iters,
        converged: all_converged,
        rank_deficient: init.rank_deficient,
        history: total_history,
    })
}

// ---- Linf -----------------------------------------------------------------

/// Smoothed Σ_t ‖r_t‖_∞ with temperature μ, plus per-sample softmax data.
struct LseEval {
    value: f64,
    /// g_t = p⁺ − p⁻ (r×N): the gradient of the smoothed max wrt r_t.
    grad_r: Array2<f64>,
    /// d_t = p⁺ + p⁻ (r×N).
    diag: Array2<f64>,
}

fn lse_eval(resid: &Array2<f64>, mu: f64, want_derivatives: bool) -> LseEval {
    let (rows, n) = resid.dim();
    let mut value = 0.0;
    let mut grad_r = Array2::zeros(if want_derivatives { (rows, n) } else { (0, 0) });
    let mut diag = Array2::zeros(if want_derivatives { (rows, n) } else { (0, 0) });
    let mut pos = vec![0.0; rows];
    let mut neg = vec![0.0; rows];
    for (t, r) in resid.columns().into_iter().enumerate() {
        let top = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut z = 0.0;
        for (i, &v) in r.iter().enumerate() {
            pos[i] = ((v - top) / mu).exp();
            neg[i] = ((-v - top) / mu).exp();
            z += pos[i] + neg[i];
        }
        value += top + mu * z.ln();
        if want_derivatives {
            for i in 0..rows {
                grad_r[[i, t]] = (pos[i] - neg[i]) / z;
                diag[[i, t]] = (pos[i] + neg[i]) / z;
            }
        }
    }
    LseEval { value, grad_r, diag }
}

/// Upper triangle of Φ_t Φ_tᵀ for every sample, one row per t.
fn feature_outer_products(phi: &Array2<f64>) -> Array2<f64> {
    let (mm, n) = phi.dim();
    let mut out = Array2::zeros((n, mm * (mm + 1) / 2));
    for t in 0..n {
        let col = phi.column(t);
        let mut k = 0;
        for a in 0..mm {
            for b in a..mm {
                out[[t, k]] = col[a] * col[b];
                k += 1;
            }
        }
    }
    out
}

/// Newton system for the smoothed objective in G (flattened row-major,
/// index i·M + a). Hessian = (1/μ) Σ_t (diag(d_t) − g_t g_tᵀ) ⊗ Φ_t Φ_tᵀ.
fn linf_newton_direction(
    phi: &Array2<f64>,
    outer: &Array2<f64>,
    ev: &LseEval,
    mu: f64,
    damping: f64,
) -> Option<Array2<f64>> {
    let (mm, n) = phi.dim();
    let rows = ev.grad_r.nrows();
    let dim = rows * mm;
    // Block (i, j) is Σ_t (δ_ij d_ti − g_ti g_tj) Φ_tΦ_tᵀ; all j ≥ i blocks
    // come out of one product of the pair weights with the outer products.
    let pairs: Vec<(usize, usize)> = (0..rows).flat_map(|i| (i..rows).map(move |j| (i, j))).collect();
    let mut weights = Array2::<f64>::zeros((pairs.len(), n));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let mut w = weights.row_mut(p);
        for t in 0..n {
            let d = if i == j { ev.diag[[i, t]] } else { 0.0 };
            w[t] = d - ev.grad_r[[i, t]] * ev.grad_r[[j, t]];
        }
    }
    let blocks = weights.dot(outer);
    let mut hess = Array2::<f64>::zeros((dim, dim));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let mut k = 0;
        for a in 0..mm {
            for b in a..mm {
                let v = blocks[[p, k]];
                k += 1;
                hess[[i * mm + a, j * mm + b]] = v;
                hess[[i * mm + b, j * mm + a]] = v;
                hess[[j * mm + a, i * mm + b]] = v;
                hess[[j * mm + b, i * mm + a]] = v;
            }
        }
    }
    hess /= mu;
    // Gradient wrt G is −(g Φᵀ); the Newton step solves H Δ = g Φᵀ.
    let grad = ev.grad_r.dot(&phi.t());
    let rhs = grad.into_shape_with_order((dim, 1)).ok()?;
    let trace = (0..dim).map(|k| hess[[k, k]]).sum::<f64>() / dim as f64;
    let mut shift = damping * trace.max(f64::MIN_POSITIVE);
    for _ in 0..12 {
        let mut h = hess.clone();
        for k in 0..dim {
            h[[k, k]] += shift;
        }
        if let Some(step) = cholesky_solve(h.view(), rhs.view()) {
            if step.iter().all(|x| x.is_finite()) {
                return step.into_shape_with_order((rows, mm)).ok();
            }
        }
        shift *= 100.0;
    }
    None
}

const LINF_STAGE_ITERS: usize = 200;
const LINF_MU_FLOOR: f64 = 1e-6;
/// Intermediate temperatures only need a rough minimizer; the last one is
/// solved until the Newton decrement certifies `rel_tol`.
const LINF_STAGE_TOL: f64 = 1e-5;

fn linf(problem: &RegressionProblem, config: &SolverConfig) -> Result<Outcome> {
    let scale = problem.target_scale();
    let init = least_squares(problem)?;
    let mut g = init.g;
    let phi = &problem.features;
    let outer = feature_outer_products(phi);
    let max_resid = problem.residuals(&g).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mu_floor = LINF_MU_FLOOR * scale;
    let mut mu = (0.1 * max_resid).max(mu_floor);
    let mut history = vec![lse_eval(&problem.residuals(&g), mu, false).value];
    let mut iters = 0;
    let mut newton_failed = false;

    'stages: loop {
        let mut f = lse_eval(&problem.residuals(&g), mu, false).value;
        for _ in 0..LINF_STAGE_ITERS {
            if iters >= config.max_iters {
                break 'stages;
            }
            iters += 1;
            let ev = lse_eval(&problem.residuals(&g), mu, true);
            let Some(step) = linf_newton_direction(phi, &outer, &ev, mu, 1e-10) else {
                newton_failed = true;
                break 'stages;
            };
            // Directional derivative of the objective along +step is −⟨gΦᵀ, step⟩.
            let slope = -(ev.grad_r.dot(&phi.t()) * &step).sum();
            if !(slope < 0.0) {
                break;
            }
            // Half the squared Newton decrement estimates f − f*(μ).
            let tol = if mu > mu_floor { LINF_STAGE_TOL.max(config.rel_tol) } else { config.rel_tol };
            if -0.5 * slope <= tol * f.abs() {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-10 {
                let cand = &g + &(&step * alpha);
                let fc = lse_eval(&problem.residuals(&cand), mu, false).value;
                if fc <= f + 1e-4 * alpha * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, fc)) = accepted else { break };
            let done = converged_step(f, fc, config.rel_tol);
            g = cand;
            f = fc;
            history.push(f);
            if done {
                break;
            }
        }
        if mu <= mu_floor {
            break;
        }
        mu = (mu * 0.5).max(mu_floor);
        // Lowering μ never raises the smoothed value, so the history stays monotone.
        history.push(lse_eval(&problem.residuals(&g), mu, false).value);
    }

    let converged = !newton_failed && mu <= mu_floor && iters < config.max_iters;
    if newton_failed {
        let fallback = polyak(problem, Norm::Linf, g.clone(), config);
        if problem.objective(&fallback.g) < problem.objective(&g) {
            g = fallback.g;
        }
    }
    Ok(Outcome {
        g,
        iters,
        converged,
        rank_deficient: init.rank_deficient,
        history,
    })
}

// ---- Polyak subgradient ---------------------------------------------------

fn subgradient(problem: &RegressionProblem, norm: Norm, g: &Array2<f64>) -> Array2<f64> {
    let r = problem.residuals(g);
    let mut dir = Array2::zeros(r.dim());
    for (t, col) in r.columns().into_iter().enumerate() {
        match norm {
            Norm::L2 | Norm::SquaredL2 => {
                let n = col.dot(&col).sqrt();
                if n > 0.0 {
                    let k = if norm == Norm::SquaredL2 { 2.0 } else { 1.0 / n };
                    dir.column_mut(t).assign(&(&col * k));
                }
            }
            Norm::L1 => dir.column_mut(t).assign(&col.mapv(|v| if v == 0.0 { 0.0 } else { v.signum() })),
            Norm::Linf => {
                let (mut best, mut idx) = (0.0, None);
                for (i, &v) in col.iter().enumerate() {
                    if v.abs() > best {
                        best = v.abs();
                        idx = Some(i);
                    }
                }
                if let Some(i) = idx {
                    dir[[i, t]] = col[i].signum();
                }
            }
        }
    }
    // d/dG Σ loss = −dir Φᵀ
    -dir.dot(&problem.features.t())
}

/// Polyak steps toward a moving target level f_best − δ; δ halves whenever
/// progress stalls.
fn polyak(problem: &RegressionProblem, norm: Norm, start: Array2<f64>, config: &SolverConfig) -> Outcome {
    let exact = problem.with_norm(norm);
    let mut g = start;
    let mut f = exact.objective(&g);
    let mut best = (f, g.clone());
    let mut delta = 0.05 * f.max(f64::MIN_POSITIVE);
    let mut stall = 0;
    let mut history = vec![f];
    let mut iters = 0;
    let mut converged = false;
    while iters < config.max_iters {
        iters += 1;
        let sg = subgradient(&exact, norm, &g);
        let nrm2 = sg.iter().map(|v| v * v).sum::<f64>();
        if nrm2 == 0.0 {
            converged = true;
            break;
        }
        let step = (f - best.0 + delta) / nrm2;
        Zip::from(&mut g).and(&sg).for_each(|x, &d| *x -= step * d);
        f = exact.objective(&g);
        if f < best.0 - 0.5 * delta {
            best = (f, g.clone());
            stall = 0;
        } else {
            if f < best.0 {
                best = (f, g.clone());
            }
            stall += 1;
            if stall >= 50 {
                delta *= 0.5;
                stall = 0;
                g = best.1.clone();
                f = best.0;
            }
        }
        history.push(best.0);
        if delta <= config.rel_tol * best.0.abs() || best.0 == 0.0 {
            converged = true;
            break;
        }
    }
    Outcome {
        g: best.1,
        iters,
        converged,
        rank_deficient: false,
        history,
    }
}

/// First-order certificate for the ε-smoothed ℓ2 objective:
/// ‖Σ_t r_t Φ_tᵀ / max(‖r_t‖, ε)‖_F together with the scale Σ_t ‖Φ_t‖.
pub fn stationarity_residual(problem: &RegressionProblem, g: &Array2<f64>, smoothing_eps: f64) -> (f64, f64) {
    let eps = smoothing_eps * problem.target_scale();
    let r = problem.residuals(g);
    let w = r.map_axis(Axis(0), |c| 1.0 / c.dot(&c).sqrt().max(eps));
    let grad = (r * &w).dot(&problem.features.t());
    let scale = problem.features.map_axis(Axis(0), |c| c.dot(&c).sqrt()).sum();
    (frobenius(grad.view()), scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_problem(seed: u64, mm: usize, r: usize, n: usize, outliers: f64) -> (RegressionProblem, Array2<f64>) {
        let mut rng = rng::stream(seed, Stream::Custom(7));
        let phi = Array2::from_shape_fn((mm, n), |_| StandardNormal.sample(&mut rng));
        let g_star = Array2::from_shape_fn((r, mm), |_| rng.random_range(-1.0..1.0));
        let mut y = g_star.dot(&phi);
        for mut col in y.columns_mut() {
            if rng.random::<f64>() < outliers {
                col.mapv_inplace(|v| v + 50.0 + 10.0 * rng.random::<f64>());
            }
        }
        (RegressionProblem::new(phi, y, Norm::L2, 0).unwrap(), g_star)
    }

    #[test]
    fn noiseless_recovery_for_every_norm() {
        let (p, g_star) = random_problem(1, 6, 3, 80, 0.0);
        for norm in Norm::ALL {
            let rep = solve(&p.with_norm(norm), &SolverConfig::default()).unwrap().with_truth(&g_star);
            assert!(rep.frob_error.unwrap() <= 1e-6, "{norm:?}: {:?}", rep.frob_error);
            assert!(rep.converged);
        }
    }

    #[test]
    fn one_dimensional_median_instance() {
        let phi = array![[1.0, 1.0, 1.0]];
        let y = array![[0.0, 0.0, 10.0]];
        let p = RegressionProblem::new(phi, y, Norm::SquaredL2, 0).unwrap();
        let ls = solve(&p, &SolverConfig::default()).unwrap();
        assert!((ls.g_hat[[0, 0]] - 10.0 / 3.0).abs() < 1e-12);
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            let rep = solve(&p.with_norm(norm), &SolverConfig::default()).unwrap();
            assert!(rep.g_hat[[0, 0]].abs() < 1e-4, "{norm:?}: {}", rep.g_hat[[0, 0]]);
        }
    }

    #[test]
    fn l2_resists_outliers_where_least_squares_does_not() {
        let (p, g_star) = random_problem(2, 5, 4, 400, 0.1);
        let ls = solve(&p.with_norm(Norm::SquaredL2), &SolverConfig::default()).unwrap().with_truth(&g_star);
        let l2 = solve(&p, &SolverConfig::default()).unwrap().with_truth(&g_star);
        assert!(l2.frob_error.unwrap() < 1e-3, "{:?}", l2.frob_error);
        assert!(ls.frob_error.unwrap() > 1.0);
    }

    #[test]
    fn irls_history_is_monotone_and_certified() {
        let (p, _) = random_problem(3, 8, 3, 300, 0.2);
        let mut p = p;
        let mut rng = rng::stream(3, Stream::Custom(8));
        p.targets.mapv_inplace(|v| v + 0.1 * rng.random_range(-1.0..1.0));
        for norm in [Norm::L1, Norm::L2] {
            let rep = solve(&p.with_norm(norm), &SolverConfig::default()).unwrap();
            assert!(rep.monotone, "{norm:?}");
            assert!(rep.converged, "{norm:?}");
        }
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        let (res, scale) = stationarity_residual(&p, &rep.g_hat, 1e-8);
        assert!(res <= 1e-5 * scale, "{res} vs {scale}");
    }

    #[test]
    fn report_objective_is_recomputable() {
        let (p, _) = random_problem(4, 4, 2, 120, 0.15);
        for norm in Norm::ALL {
            let q = p.with_norm(norm);
            let rep = solve(&q, &SolverConfig::default()).unwrap();
            let again = q.objective(&rep.g_hat);
            assert!((rep.objective - again).abs() <= 1e-9 * again.abs().max(1e-300));
        }
    }

    #[test]
    fn linf_smoothed_history_is_monotone() {
        let (p, g_star) = random_problem(5, 4, 3, 150, 0.05);
        let rep = solve(&p.with_norm(Norm::Linf), &SolverConfig::default()).unwrap().with_truth(&g_star);
        assert!(rep.monotone);
        assert!(rep.converged);
        assert!(rep.frob_error.unwrap() < 1e-2, "{:?}", rep.frob_error);
    }

    #[test]
    fn polyak_backend_approaches_irls() {
        let (p, _) = random_problem(6, 3, 2, 100, 0.1);
        let cfg = SolverConfig {
            backend: Backend::SubgradientPolyak,
            max_iters: 20_000,
            ..Default::default()
        };
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            let q = p.with_norm(norm);
            let a = solve(&q, &cfg).unwrap();
            let b = solve(&q, &SolverConfig::default()).unwrap();
            assert!(a.monotone);
            assert!(a.objective <= b.objective * (1.0 + 1e-3) + 1e-9, "{norm:?}: {} vs {}", a.objective, b.objective);
        }
    }

    #[test]
    fn normal_equations_backend_matches_qr() {
        let (p, _) = random_problem(7, 5, 2, 60, 0.0);
        let q = p.with_norm(Norm::SquaredL2);
        let a = solve(&q, &SolverConfig { backend: Backend::NormalEquations, ..Default::default() }).unwrap();
        let b = solve(&q, &SolverConfig::default()).unwrap();
        assert!(frobenius((&a.g_hat - &b.g_hat).view()) < 1e-9);
        assert!(solve(&p, &SolverConfig { backend: Backend::NormalEquations, ..Default::default() }).is_err());
    }

    #[test]
    fn malformed_problems_are_rejected() {
        assert!(RegressionProblem::new(Array2::zeros((2, 3)), Array2::zeros((1, 4)), Norm::L2, 0).is_err());
        let mut bad = Array2::zeros((2, 3));
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(
            RegressionProblem::new(bad, Array2::zeros((1, 3)), Norm::L2, 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rank_deficient_least_squares_is_flagged() {
        let phi = array![[1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.0]];
        let y = array![[1.0, 2.0, 3.0, 4.0]];
        let rep = solve(&RegressionProblem::new(phi, y, Norm::SquaredL2, 0).unwrap(), &SolverConfig::default()).unwrap();
        assert!(rep.rank_deficient);
        // Minimum-norm solution of g1 + 2 g2 = 1.
        assert!((rep.g_hat[[0, 0]] - 0.2).abs() < 1e-10);
        assert!((rep.g_hat[[0, 1]] - 0.4).abs() < 1e-10);
    }

    #[test]
    fn report_json_round_trip() {
        let (p, g) = random_problem(8, 3, 2, 40, 0.1);
        let rep = solve(&p, &SolverConfig::default()).unwrap().with_truth(&g);
        let text = serde_json::to_string(&rep).unwrap();
        assert!(text.contains("\"G_hat\""));
        let back: EstimateReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
    }
}
