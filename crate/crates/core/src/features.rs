//! Basis maps Φ over input windows, the ground-truth fit G*, and empirical
//! excitation / Lipschitz constants.
//!
//! A window U is the (τ+1)×m matrix of inputs u_{t−τ}, …, u_t, oldest first.
//! Where a flat vector is needed it is the row-major flattening of U.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::InputPolicy;
use crate::dynamics::{beta, matrix_to_rows, rows_to_matrix, SystemSpec};
use crate::error::{invalid, Error, Result};
use crate::linalg::{condition_estimate, qr_least_squares, symmetric_eig};
use crate::rng::{self, Stream, StreamRng};

pub const DEFAULT_REG_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

/// Number of independent Monte Carlo chunks. Fixed so results do not depend
/// on the thread count.
const MC_CHUNKS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub enum BasisKind {
    /// φ_j(U) = (1 + ⟨U, U_j⟩/s)^degree − 1, one section per frozen center U_j.
    /// `centers` holds one flattened center per row.
    PolyKernelSections {
        centers: Array2<f64>,
        degree: i32,
        scale: f64,
    },
    /// The two-function basis of the lower-bound construction: the plain
    /// scalar unroll and the unroll with β inserted after the oldest step.
    LowerBoundPair { rho: f64, l: f64 },
    /// φ(U) = vec(U).
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisDoc", into = "BasisDoc")]
pub struct BasisSet {
    pub kind: BasisKind,
    pub tau: usize,
    pub input_dim: usize,
    /// Empirical Lipschitz constant (a lower bound on the true L_φ).
    pub l_phi: Option<f64>,
    /// Empirical excitation constant.
    pub lambda_emp: Option<f64>,
}

impl BasisSet {
    pub fn linear(tau: usize, input_dim: usize) -> Self {
        BasisSet {
            kind: BasisKind::Linear,
            tau,
            input_dim,
            l_phi: None,
            lambda_emp: None,
        }
    }

    pub fn lower_bound_pair(rho: f64, l: f64, tau: usize) -> Self {
        BasisSet {
            kind: BasisKind::LowerBoundPair { rho, l },
            tau,
            input_dim: 1,
            l_phi: None,
            lambda_emp: None,
        }
    }

    /// Kernel sections with the default scale s = (τ+1)·m·75.
    pub fn poly_kernel(centers: Array2<f64>, degree: i32, tau: usize, input_dim: usize) -> Result<Self> {
        let scale = ((tau + 1) * input_dim) as f64 * 75.0;
        Self::poly_kernel_scaled(centers, degree, scale, tau, input_dim)
    }

    pub fn poly_kernel_scaled(
        centers: Array2<f64>,
        degree: i32,
        scale: f64,
        tau: usize,
        input_dim: usize,
    ) -> Result<Self> {
        if centers.ncols() != (tau + 1) * input_dim {
            return Err(Error::DimensionMismatch {
                what: "kernel center width",
                expected: (tau + 1) * input_dim,
                got: centers.ncols(),
            });
        }
        if centers.nrows() == 0 || degree < 1 || !(scale > 0.0) {
            return Err(invalid("kernel basis needs ≥ 1 center, degree ≥ 1 and a positive scale"));
        }
        Ok(BasisSet {
            kind: BasisKind::PolyKernelSections { centers, degree, scale },
            tau,
            input_dim,
            l_phi: None,
            lambda_emp: None,
        })
    }

    /// Draws `count` centers i.i.d. from `policy` and builds the kernel basis.
    pub fn random_poly_kernel(
        count: usize,
        degree: i32,
        tau: usize,
        input_dim: usize,
        policy: &InputPolicy,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::BasisCenters);
        let width = (tau + 1) * input_dim;
        let mut centers = Array2::zeros((count, width));
        for mut row in centers.rows_mut() {
            row.assign(&sample_window(policy, tau, input_dim, &mut rng).into_shape_with_order(width).unwrap());
        }
        Self::poly_kernel(centers, degree, tau, input_dim)
    }

    /// M, the number of basis functions.
    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::PolyKernelSections { centers, .. } => centers.nrows(),
            BasisKind::LowerBoundPair { .. } => 2,
            BasisKind::Linear => (self.tau + 1) * self.input_dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_width(&self) -> usize {
        (self.tau + 1) * self.input_dim
    }

    fn check_window(&self, window: ArrayView2<f64>) -> Result<()> {
        if window.nrows() != self.tau + 1 {
            return Err(Error::DimensionMismatch {
                what: "window length",
                expected: self.tau + 1,
                got: window.nrows(),
            });
        }
        if window.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "window width",
                expected: self.input_dim,
                got: window.ncols(),
            });
        }
        Ok(())
    }

    /// Φ(U) for one (τ+1)×m window.
    pub fn evaluate(&self, window: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_window(window)?;
        let flat: Array1<f64> = window.iter().copied().collect();
        Ok(self.evaluate_flat(flat.view()))
    }

    /// Φ on a row-major flattened window. The caller guarantees the width.
    pub fn evaluate_flat(&self, u: ArrayView1<f64>) -> Array1<f64> {
        match &self.kind {
            BasisKind::PolyKernelSections { centers, degree, scale } => {
                centers.dot(&u).mapv(|z| section(z / scale, *degree))
            }
            BasisKind::LowerBoundPair { rho, l } => {
                let (plain, with_beta) = lower_bound_pair_values(*rho, *l, u);
                Array1::from(vec![plain, with_beta])
            }
            BasisKind::Linear => u.to_owned(),
        }
    }

    /// Φ evaluated on many flattened windows (one per row). Returns M×N, one
    /// column per window.
    pub fn evaluate_rows(&self, windows: ArrayView2<f64>) -> Result<Array2<f64>> {
        if windows.ncols() != self.window_width() {
            return Err(Error::DimensionMismatch {
                what: "flattened window width",
                expected: self.window_width(),
                got: windows.ncols(),
            });
        }
        Ok(match &self.kind {
            BasisKind::PolyKernelSections { centers, degree, scale } => {
                centers.dot(&windows.t()).mapv(|z| section(z / scale, *degree))
            }
            BasisKind::Linear => windows.t().to_owned(),
            BasisKind::LowerBoundPair { .. } => {
                let mut out = Array2::zeros((2, windows.nrows()));
                for (j, w) in windows.rows().into_iter().enumerate() {
                    out.column_mut(j).assign(&self.evaluate_flat(w));
                }
                out
            }
        })
    }

    /// Design matrix with columns Φ(U_t) for t = τ, …, horizon−1 of an input
    /// sequence (one input per row).
    pub fn design_matrix(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input width",
                expected: self.input_dim,
                got: inputs.ncols(),
            });
        }
        let horizon = inputs.nrows();
        if horizon <= self.tau {
            return Err(Error::WindowOutOfRange {
                t: horizon.saturating_sub(1),
                tau: self.tau,
            });
        }
        self.evaluate_rows(stack_windows(inputs, self.tau).view())
    }
}

/// Flattened windows U_t for t = τ, …, T−1, one per row.
pub fn stack_windows(inputs: ArrayView2<f64>, tau: usize) -> Array2<f64> {
    let m = inputs.ncols();
    let n = inputs.nrows().saturating_sub(tau);
    let mut out = Array2::zeros((n, (tau + 1) * m));
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let block = inputs.slice(s![k..=k + tau, ..]);
        for (dst, src) in row.iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    out
}

#[inline]
fn section(z: f64, degree: i32) -> f64 {
    (1.0 + z).powi(degree) - 1.0
}

fn lower_bound_pair_values(rho: f64, l: f64, u: ArrayView1<f64>) -> (f64, f64) {
    let tau = u.len() - 1;
    if tau == 0 {
        return (l * u[0], l * u[0]);
    }
    let mut plain = rho * u[0];
    let mut with_beta = beta(rho * u[0]);
    for &v in u.iter().take(tau).skip(1) {
        plain = rho * (plain + v);
        with_beta = rho * (with_beta + v);
    }
    (l * (plain + u[tau]), l * (with_beta + u[tau]))
}

/// One (τ+1)×m window with i.i.d. entries from `policy`.
pub fn sample_window(policy: &InputPolicy, tau: usize, m: usize, rng: &mut StreamRng) -> Array2<f64> {
    let mut w = Array2::zeros((tau + 1, m));
    for mut row in w.rows_mut() {
        row.assign(&policy.draw(m, rng));
    }
    w
}

fn sample_flat_windows(policy: &InputPolicy, tau: usize, m: usize, n: usize, rng: &mut StreamRng) -> Array2<f64> {
    let width = (tau + 1) * m;
    let mut out = Array2::zeros((n, width));
    for mut row in out.rows_mut() {
        let w = sample_window(policy, tau, m, rng);
        row.assign(&w.into_shape_with_order(width).unwrap());
    }
    out
}

fn chunk_rng(seed: u64, stream: Stream, chunk: usize) -> StreamRng {
    rng::stream(seed ^ (chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), stream)
}

// ---- ground truth ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GroundTruthConfig {
    pub n_samples: usize,
    /// Fraction of samples used for training.
    pub train_fraction: f64,
    pub reg_grid: Vec<f64>,
    /// Distribution of the window entries.
    pub sampler: InputPolicy,
    pub seed: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            n_samples: 1000,
            train_fraction: 0.8,
            reg_grid: DEFAULT_REG_GRID.to_vec(),
            sampler: InputPolicy::uniform(-15.0, 15.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegFit {
    pub reg: f64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "G_star", with = "matrix_rows")]
    pub g_star: Array2<f64>,
    /// RMS of ‖y_clean − G*Φ(U)‖₂ over the held-out windows.
    pub eps_bar: f64,
    /// Largest held-out ‖y_clean − G*Φ(U)‖₂.
    pub eps_max: f64,
    pub reg_param: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub fit_report: Vec<RegFit>,
    pub basis: BasisSet,
}

pub(crate) mod matrix_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        rows_to_matrix("matrix", rows).map_err(serde::de::Error::custom)
    }
}

/// Samples the clean τ-window mapping on random windows and returns
/// (flattened windows, targets r×N).
fn clean_samples(
    spec: &SystemSpec,
    basis: &BasisSet,
    cfg: &GroundTruthConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rng = rng::stream(cfg.seed, Stream::GroundTruthSamples);
    let (tau, m) = (basis.tau, basis.input_dim);
    let windows = sample_flat_windows(&cfg.sampler, tau, m, cfg.n_samples, &mut rng);
    let mut targets = Array2::zeros((spec.obs_dim, cfg.n_samples));
    for (j, w) in windows.rows().into_iter().enumerate() {
        let w = w.into_shape_with_order((tau + 1, m)).unwrap();
        targets.column_mut(j).assign(&spec.unroll_auxiliary(w)?);
    }
    Ok((windows, targets))
}

fn split_sizes(cfg: &GroundTruthConfig) -> (usize, usize) {
    let n_train = (cfg.n_samples as f64 * cfg.train_fraction).round() as usize;
    (n_train, cfg.n_samples - n_train)
}

/// Ridge fit G = YΦᵀ(ΦΦᵀ + reg·I)⁻¹, solved as least squares on [Φᵀ; √reg·I].
pub fn ridge(features: ArrayView2<f64>, targets: ArrayView2<f64>, reg: f64) -> Result<Array2<f64>> {
    let (mm, n) = features.dim();
    let mut a = Array2::zeros((n + mm, mm));
    a.slice_mut(s![..n, ..]).assign(&features.t());
    let root = reg.sqrt();
    for i in 0..mm {
        a[[n + i, i]] = root;
    }
    let mut b = Array2::zeros((n + mm, targets.nrows()));
    b.slice_mut(s![..n, ..]).assign(&targets.t());
    let sol = qr_least_squares(a.view(), b.view())?;
    if sol.rank_deficient {
        return Err(Error::SingularGram {
            condition: condition_estimate(a.view()),
        });
    }
    Ok(sol.solution.reversed_axes())
}

fn column_errors(g: &Array2<f64>, features: ArrayView2<f64>, targets: ArrayView2<f64>) -> Array1<f64> {
    let resid = &targets - &g.dot(&features);
    resid.map_axis(Axis(0), |c| c.dot(&c).sqrt())
}

fn mse(errors: &Array1<f64>) -> f64 {
    errors.mapv(|e| e * e).mean().unwrap_or(0.0)
}

/// Fits G* on the clean τ-window mapping of `spec` and selects the ridge
/// parameter with the smallest held-out MSE.
pub fn fit_ground_truth(spec: &SystemSpec, basis: &BasisSet, cfg: &GroundTruthConfig) -> Result<GroundTruth> {
    if basis.input_dim != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "basis input width",
            expected: spec.input_dim,
            got: basis.input_dim,
        });
    }
    if cfg.n_samples < basis.len() {
        return Err(invalid(format!(
            "need at least M = {} samples, got {}",
            basis.len(),
            cfg.n_samples
        )));
    }
    if cfg.reg_grid.is_empty() || cfg.reg_grid.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("regularization grid must be non-empty and positive"));
    }
    let (n_train, n_test) = split_sizes(cfg);
    if n_train == 0 || n_test == 0 {
        return Err(invalid("train/test split leaves an empty side"));
    }
    let (windows, targets) = clean_samples(spec, basis, cfg)?;
    let phi = basis.evaluate_rows(windows.view())?;
    let (phi_tr, phi_te) = (phi.slice(s![.., ..n_train]), phi.slice(s![.., n_train..]));
    let (y_tr, y_te) = (targets.slice(s![.., ..n_train]), targets.slice(s![.., n_train..]));

    // (test mse, reg, G, per-sample test errors)
    let mut best: Option<(f64, f64, Array2<f64>, Array1<f64>)> = None;
    let mut fit_report = Vec::with_capacity(cfg.reg_grid.len());
    for &reg in &cfg.reg_grid {
        let g = ridge(phi_tr, y_tr, reg)?;
        let train_mse = mse(&column_errors(&g, phi_tr, y_tr));
        let test_err = column_errors(&g, phi_te, y_te);
        let test_mse = mse(&test_err);
        fit_report.push(RegFit { reg, train_mse, test_mse });
        if best.as_ref().is_none_or(|b| test_mse < b.0) {
            best = Some((test_mse, reg, g, test_err));
        }
    }
    let (_, reg_param, g_star, test_err) = best.expect("non-empty grid");
    Ok(GroundTruth {
        g_star,
        eps_bar: mse(&test_err).sqrt(),
        eps_max: test_err.iter().copied().fold(0.0, f64::max),
        reg_param,
        seed: cfg.seed,
        n_train,
        n_test,
        fit_report,
        basis: basis.clone(),
    })
}

/// Recomputes the held-out RMS error of `gt` from its stored seed and split.
pub fn recompute_eps_bar(spec: &SystemSpec, gt: &GroundTruth, sampler: &InputPolicy) -> Result<f64> {
    let cfg = GroundTruthConfig {
        n_samples: gt.n_train + gt.n_test,
        train_fraction: gt.n_train as f64 / (gt.n_train + gt.n_test) as f64,
        reg_grid: vec![gt.reg_param],
        sampler: sampler.clone(),
        seed: gt.seed,
    };
    let (windows, targets) = clean_samples(spec, &gt.basis, &cfg)?;
    let phi = gt.basis.evaluate_rows(windows.slice(s![gt.n_train.., ..]))?;
    let err = column_errors(&gt.g_star, phi.view(), targets.slice(s![.., gt.n_train..]));
    Ok(mse(&err).sqrt())
}

// ---- excitation -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Excitation {
    pub lambda_emp: f64,
    /// Smallest eigenvalue of the Monte Carlo Gram (may be slightly negative
    /// only through rounding).
    pub lambda_min: f64,
    pub gram: Array2<f64>,
    /// Standard error of each Gram entry.
    pub gram_se: Array2<f64>,
    /// Batch-means standard error of `lambda_min`.
    pub lambda_min_se: f64,
    pub n_mc: usize,
}

/// Monte Carlo estimate of E[ΦΦᵀ] over windows with i.i.d. entries from
/// `policy`, and λ = sqrt(max(0, λ_min)).
pub fn estimate_excitation(basis: &BasisSet, policy: &InputPolicy, n_mc: usize, seed: u64) -> Result<Excitation> {
    let mm = basis.len();
    if n_mc < 10 * mm {
        return Err(invalid(format!("need n_mc ≥ 10·M = {}, got {n_mc}", 10 * mm)));
    }
    policy.validate(basis.input_dim)?;
    let chunks = MC_CHUNKS;
    let per_chunk: Vec<usize> = (0..chunks).map(|k| n_mc / chunks + usize::from(k < n_mc % chunks)).collect();
    // Per chunk: sum of ΦΦᵀ and sum of (ΦΦᵀ)² entrywise.
    let partials: Vec<(Array2<f64>, Array2<f64>, usize)> = per_chunk
        .par_iter()
        .enumerate()
        .map(|(k, &count)| {
            let mut rng = chunk_rng(seed, Stream::Excitation, k);
            let windows = sample_flat_windows(policy, basis.tau, basis.input_dim, count, &mut rng);
            let phi = basis.evaluate_rows(windows.view())?;
            let sum = phi.dot(&phi.t());
            let mut sq = Array2::zeros((mm, mm));
            for col in phi.columns() {
                for i in 0..mm {
                    for j in 0..mm {
                        let v = col[i] * col[j];
                        sq[[i, j]] += v * v;
                    }
                }
            }
            Ok((sum, sq, count))
        })
        .collect::<Result<_>>()?;

    let mut sum = Array2::zeros((mm, mm));
    let mut sq = Array2::zeros((mm, mm));
    let mut batch_lambdas = Vec::with_capacity(chunks);
    for (s_k, q_k, count) in &partials {
        sum += s_k;
        sq += q_k;
        if *count > 0 {
            let g = symmetrize(s_k / *count as f64);
            batch_lambdas.push(symmetric_eig(g.view())?.values[0]);
        }
    }
    let n = n_mc as f64;
    let gram = symmetrize(sum / n);
    let var = (&sq / n - &gram.mapv(|v| v * v)).mapv(|v| v.max(0.0));
    let gram_se = var.mapv(|v| (v / n).sqrt());
    let lambda_min = symmetric_eig(gram.view())?.values[0];
    let b = batch_lambdas.len() as f64;
    let mean = batch_lambdas.iter().sum::<f64>() / b;
    let batch_var = batch_lambdas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0).max(1.0);
    Ok(Excitation {
        lambda_emp: lambda_min.max(0.0).sqrt(),
        lambda_min,
        gram,
        gram_se,
        lambda_min_se: (batch_var / b).sqrt(),
        n_mc,
    })
}

fn symmetrize(a: Array2<f64>) -> Array2<f64> {
    (&a + &a.t()) * 0.5
}

// ---- Lipschitz ------------------------------------------------------------

/// Largest observed |φ_i(U) − φ_i(U′)| / ‖U − U′‖₂ over random pairs and
/// coordinate probes. Pairs with U′ = U are skipped. This is a lower bound on
/// the true constant.
pub fn estimate_lipschitz(basis: &BasisSet, policy: &InputPolicy, n_pairs: usize, seed: u64) -> Result<f64> {
    policy.validate(basis.input_dim)?;
    let width = basis.window_width();
    let mut rng = rng::stream(seed, Stream::Lipschitz);
    let mut best = 0.0_f64;
    let mut ratio = |u: &Array1<f64>, v: &Array1<f64>| {
        let diff = v - u;
        let denom = diff.dot(&diff).sqrt();
        if denom == 0.0 {
            return;
        }
        let gap = &basis.evaluate_flat(v.view()) - &basis.evaluate_flat(u.view());
        let num = gap.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        best = best.max(num / denom);
    };
    for k in 0..n_pairs {
        let u: Array1<f64> = sample_window(policy, basis.tau, basis.input_dim, &mut rng)
            .into_shape_with_order(width)
            .unwrap();
        // Alternate far pairs, local perturbations and coordinate probes.
        let v = match k % 3 {
            0 => sample_window(policy, basis.tau, basis.input_dim, &mut rng)
                .into_shape_with_order(width)
                .unwrap(),
            1 => {
                let h = 10f64.powf(rng.random_range(-4.0..0.0));
                u.mapv(|x| x + h * rng.random_range(-1.0..1.0))
            }
            _ => {
                let mut v = u.clone();
                let i = rng.random_range(0..width);
                v[i] += 10f64.powf(rng.random_range(-3.0..0.0));
                v
            }
        };
        ratio(&u, &v);
    }
    Ok(best)
}

// ---- JSON document --------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BasisDoc {
    kind: String,
    tau: usize,
    input_dim: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    centers: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degree: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    l: Option<f64>,
    #[serde(rename = "L_phi", default, skip_serializing_if = "Option::is_none")]
    l_phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_emp: Option<f64>,
}

impl TryFrom<BasisDoc> for BasisSet {
    type Error = Error;

    fn try_from(doc: BasisDoc) -> Result<Self> {
        let mut basis = match doc.kind.as_str() {
            "PolyKernelSections" => {
                let centers = rows_to_matrix("centers", doc.centers.ok_or_else(|| invalid("kernel basis needs centers"))?)?;
                let degree = doc.degree.unwrap_or(3);
                match doc.scale {
                    Some(s) => BasisSet::poly_kernel_scaled(centers, degree, s, doc.tau, doc.input_dim)?,
                    None => BasisSet::poly_kernel(centers, degree, doc.tau, doc.input_dim)?,
                }
            }
            "LowerBoundPair" => BasisSet::lower_bound_pair(
                doc.rho.ok_or_else(|| invalid("LowerBoundPair needs rho"))?,
                doc.l.unwrap_or(1.0),
                doc.tau,
            ),
            "Linear" => BasisSet::linear(doc.tau, doc.input_dim),
            other => return Err(invalid(format!("unknown basis kind {other}"))),
        };
        if basis.len() != doc.m {
            return Err(Error::DimensionMismatch {
                what: "basis size M",
                expected: basis.len(),
                got: doc.m,
            });
        }
        basis.l_phi = doc.l_phi;
        basis.lambda_emp = doc.lambda_emp;
        Ok(basis)
    }
}

impl From<BasisSet> for BasisDoc {
    fn from(b: BasisSet) -> Self {
        let m = b.len();
        let mut doc = BasisDoc {
            kind: String::new(),
            tau: b.tau,
            input_dim: b.input_dim,
            m,
            centers: None,
            degree: None,
            scale: None,
            rho: None,
            l: None,
            l_phi: b.l_phi,
            lambda_emp: b.lambda_emp,
        };
        match b.kind {
            BasisKind::PolyKernelSections { centers, degree, scale } => {
                doc.kind = "PolyKernelSections".into();
                doc.centers = Some(matrix_to_rows(&centers));
                doc.degree = Some(degree);
                doc.scale = Some(scale);
            }
            BasisKind::LowerBoundPair { rho, l } => {
                doc.kind = "LowerBoundPair".into();
                doc.rho = Some(rho);
                doc.l = Some(l);
            }
            BasisKind::Linear => doc.kind = "Linear".into(),
        }
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn kernel_basis() -> BasisSet {
        BasisSet::random_poly_kernel(25, 3, 2, 3, &InputPolicy::uniform(-15.0, 15.0), 11).unwrap()
    }

    #[test]
    fn zero_window_maps_to_zero() {
        for basis in [kernel_basis(), BasisSet::lower_bound_pair(0.5, 1.0, 4), BasisSet::linear(3, 2)] {
            let zero = Array2::zeros((basis.tau + 1, basis.input_dim));
            let phi = basis.evaluate(zero.view()).unwrap();
            assert_eq!(phi.len(), basis.len());
            assert!(phi.iter().all(|v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn kernel_section_at_own_center() {
        let basis = kernel_basis();
        let BasisKind::PolyKernelSections { centers, scale, .. } = &basis.kind else {
            unreachable!()
        };
        let j = 7;
        let cj = centers.row(j);
        let window = cj.to_owned().into_shape_with_order((3, 3)).unwrap();
        let phi = basis.evaluate(window.view()).unwrap();
        // k(U_j, U_j) − k(0, U_j) by hand.
        let mut ip = 0.0;
        for v in cj {
            ip += v * v;
        }
        let k = |z: f64| (1.0 + z) * (1.0 + z) * (1.0 + z);
        let expected = k(ip / scale) - k(0.0);
        assert!((phi[j] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn lower_bound_pair_matches_unrolls() {
        let (rho, l, tau) = (0.5, 1.0, 5);
        let basis = BasisSet::lower_bound_pair(rho, l, tau);
        let plain = SystemSpec::scalar_contract(rho, l).unwrap();
        let alt = SystemSpec::scalar_contract_beta(rho, l).unwrap();
        let window = array![[1.0], [-1.0], [-1.0], [1.0], [1.0], [-1.0]];
        let phi = basis.evaluate(window.view()).unwrap();
        assert_eq!(phi[0], plain.unroll_auxiliary(window.view()).unwrap()[0]);
        assert_eq!(phi[1], alt.unroll_auxiliary(window.view()).unwrap()[0]);
    }

    #[test]
    fn design_matrix_columns_match_single_windows() {
        let basis = kernel_basis();
        let mut rng = rng::stream(1, Stream::Custom(0));
        let inputs = Array2::from_shape_fn((12, 3), |_| rng.random_range(-5.0..5.0));
        let design = basis.design_matrix(inputs.view()).unwrap();
        assert_eq!(design.dim(), (25, 10));
        for t in 2..12 {
            let phi = basis.evaluate(inputs.slice(s![t - 2..=t, ..])).unwrap();
            for i in 0..25 {
                assert!((design[[i, t - 2]] - phi[i]).abs() <= 1e-12 * phi[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn linear_basis_recovers_scalar_unroll_coefficients() {
        let (rho, l, tau) = (0.6, 1.5, 4);
        let spec = SystemSpec::scalar_contract(rho, l).unwrap();
        let basis = BasisSet::linear(tau, 1);
        let gt = fit_ground_truth(&spec, &basis, &GroundTruthConfig::default()).unwrap();
        assert_eq!((gt.n_train, gt.n_test), (800, 200));
        assert_eq!(gt.fit_report.len(), 7);
        for k in 0..=tau {
            let expected = l * rho.powi((tau - k) as i32);
            assert!((gt.g_star[[0, k]] - expected).abs() <= 1e-8, "coefficient {k}");
        }
        // Shrinkage at reg = 1e-4 alone leaves a residual of a few 1e-8.
        assert!(gt.eps_bar <= 1e-7, "eps_bar = {}", gt.eps_bar);

        let mut cfg = GroundTruthConfig::default();
        cfg.reg_grid.insert(0, 1e-10);
        let gt = fit_ground_truth(&spec, &basis, &cfg).unwrap();
        assert_eq!(gt.reg_param, 1e-10);
        assert!(gt.eps_bar <= 1e-8, "eps_bar = {}", gt.eps_bar);
    }

    #[test]
    fn selected_reg_has_smallest_test_error() {
        let mut rng = rng::stream(2, Stream::SystemMatrices);
        let spec = SystemSpec::random_activated_linear(6, 2, 3, 0.5, crate::dynamics::Activation::Tanh, &mut rng).unwrap();
        let basis = BasisSet::random_poly_kernel(25, 3, 3, 2, &InputPolicy::uniform(-15.0, 15.0), 2).unwrap();
        let cfg = GroundTruthConfig { seed: 4, ..Default::default() };
        let gt = fit_ground_truth(&spec, &basis, &cfg).unwrap();
        let chosen = gt.fit_report.iter().find(|f| f.reg == gt.reg_param).unwrap();
        assert!(gt.fit_report.iter().all(|f| chosen.test_mse <= f.test_mse));
        let again = fit_ground_truth(&spec, &basis, &cfg).unwrap();
        assert_eq!(gt, again);
        let eps = recompute_eps_bar(&spec, &gt, &cfg.sampler).unwrap();
        assert!((eps - gt.eps_bar).abs() <= 1e-12 * gt.eps_bar.max(1.0));
        assert!(gt.eps_max >= gt.eps_bar);
    }

    #[test]
    fn ridge_satisfies_normal_equations() {
        let mut rng = rng::stream(3, Stream::Custom(1));
        let phi = Array2::from_shape_fn((6, 40), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((2, 40), |_| rng.random_range(-1.0..1.0));
        for reg in DEFAULT_REG_GRID {
            let g = ridge(phi.view(), y.view(), reg).unwrap();
            let lhs = g.dot(&(phi.dot(&phi.t()) + Array2::<f64>::eye(6) * reg));
            let rhs = y.dot(&phi.t());
            let scale = rhs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let gap = (&lhs - &rhs).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(gap <= 1e-8 * scale, "reg {reg}: {gap}");
        }
    }

    #[test]
    fn isotropic_linear_excitation() {
        let basis = BasisSet::linear(0, 3);
        let exc = estimate_excitation(&basis, &InputPolicy::gaussian(1.0), 100_000, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((exc.gram[[i, j]] - target).abs() < 0.03);
            }
        }
        assert!((exc.lambda_emp - 1.0).abs() < 0.05);
    }

    #[test]
    fn collinear_basis_is_not_excited() {
        // φ = (u, 2u): rank one.
        let centers = array![[1.0], [2.0]];
        let basis = BasisSet::poly_kernel_scaled(centers, 1, 1.0, 0, 1).unwrap();
        let exc = estimate_excitation(&basis, &InputPolicy::gaussian(1.0), 10_000, 1).unwrap();
        assert!(exc.lambda_emp < 1e-6, "{}", exc.lambda_emp);
        assert!(estimate_excitation(&basis, &InputPolicy::gaussian(1.0), 5, 1).is_err());
    }

    #[test]
    fn excitation_is_deterministic() {
        let basis = BasisSet::lower_bound_pair(0.5, 1.0, 3);
        let a = estimate_excitation(&basis, &InputPolicy::rademacher(), 2_000, 9).unwrap();
        let b = estimate_excitation(&basis, &InputPolicy::rademacher(), 2_000, 9).unwrap();
        assert_eq!(a.gram, b.gram);
        assert_eq!(a.lambda_min, b.lambda_min);
    }

    #[test]
    fn linear_lipschitz_is_one() {
        let basis = BasisSet::linear(3, 2);
        let l = estimate_lipschitz(&basis, &InputPolicy::uniform(-15.0, 15.0), 600, 1).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn lower_bound_pair_lipschitz_within_chain_rule_bound() {
        let (l, tau) = (1.0, 5);
        let basis = BasisSet::lower_bound_pair(0.5, l, tau);
        let est = estimate_lipschitz(&basis, &InputPolicy::uniform(-2.0, 2.0), 3000, 2).unwrap();
        assert!(est > 0.0);
        // β has slope 1/tanh(1) at the origin.
        assert!(est <= l * ((tau + 1) as f64).sqrt() / 1.0_f64.tanh());
    }

    #[test]
    fn basis_json_round_trip() {
        let mut basis = kernel_basis();
        basis.l_phi = Some(0.25);
        let text = serde_json::to_string(&basis).unwrap();
        let back: BasisSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, basis);
        let spec = SystemSpec::scalar_contract(0.5, 1.0).unwrap();
        let gt = fit_ground_truth(&spec, &BasisSet::linear(2, 1), &GroundTruthConfig::default()).unwrap();
        let text = serde_json::to_string(&gt).unwrap();
        assert!(text.contains("\"G_star\""));
        let back: GroundTruth = serde_json::from_str(&text).unwrap();
        assert_eq!(back, gt);
    }
}
