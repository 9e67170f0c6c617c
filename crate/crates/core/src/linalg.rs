//! Dense linear algebra used by the estimators and the excitation checks.
//!
//! Householder QR with column pivoting (minimum-norm on rank deficiency),
//! cyclic Jacobi for symmetric eigenproblems, and a small Cholesky solver for
//! the Newton steps of the smoothed max-norm estimator.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LstsqSolution {
    /// n × k minimizer of ‖A X − B‖_F.
    pub solution: Array2<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Column-major scratch copy used by the factorizations.
struct ColMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColMajor {
    fn from_view(a: ArrayView2<f64>) -> Self {
        let (rows, cols) = a.dim();
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            data.extend(a.column(j).iter().copied());
        }
        ColMajor { rows, cols, data }
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    fn swap_cols(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for i in 0..self.rows {
            self.data.swap(a * self.rows + i, b * self.rows + i);
        }
    }
}

/// Householder QR factorization (optionally pivoted) of an m × n matrix.
/// Reflectors are stored below the diagonal, R on and above it.
struct HouseholderQr {
    qr: ColMajor,
    betas: Vec<f64>,
    perm: Vec<usize>,
}

impl HouseholderQr {
    fn factor(a: ArrayView2<f64>, pivot: bool) -> Self {
        let mut qr = ColMajor::from_view(a);
        let (m, n) = (qr.rows, qr.cols);
        let steps = m.min(n);
        let mut betas = vec![0.0; steps];
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..steps {
            if pivot {
                let mut best = k;
                let mut best_norm = -1.0;
                for j in k..n {
                    let nrm: f64 = qr.col(j)[k..].iter().map(|v| v * v).sum();
                    if nrm > best_norm {
                        best_norm = nrm;
                        best = j;
                    }
                }
                qr.swap_cols(k, best);
                perm.swap(k, best);
            }

            let col = &mut qr.data[k * m..(k + 1) * m];
            let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                betas[k] = 0.0;
                continue;
            }
            let alpha = if col[k] >= 0.0 { -norm } else { norm };
            let v0 = col[k] - alpha;
            // v = [1, col[k+1..]/v0]; beta = -v0 / alpha
            for x in col[k + 1..].iter_mut() {
                *x /= v0;
            }
            let beta = -v0 / alpha;
            col[k] = alpha;
            betas[k] = beta;

            for j in k + 1..n {
                let (left, right) = qr.data.split_at_mut(j * m);
                let v = &left[k * m..(k + 1) * m];
                let target = &mut right[..m];
                let mut dot = target[k];
                for i in k + 1..m {
                    dot += v[i] * target[i];
                }
                let s = beta * dot;
                target[k] -= s;
                for i in k + 1..m {
                    target[i] -= s * v[i];
                }
            }
        }
        HouseholderQr { qr, betas, perm }
    }

    /// Overwrites the m × k column-major block `b` with Qᵀ b.
    fn apply_qt(&self, b: &mut ColMajor) {
        let m = self.qr.rows;
        for (k, &beta) in self.betas.iter().enumerate() {
            if beta == 0.0 {
                continue;
            }
            let v = self.qr.col(k);
            for j in 0..b.cols {
                let target = &mut b.data[j * m..(j + 1) * m];
                let mut dot = target[k];
                for i in k + 1..m {
                    dot += v[i] * target[i];
                }
                let s = beta * dot;
                target[k] -= s;
                for i in k + 1..m {
                    target[i] -= s * v[i];
                }
            }
        }
    }

    /// Overwrites the m × k block `b` with Q b.
    fn apply_q(&self, b: &mut ColMajor) {
        let m = self.qr.rows;
        for (k, &beta) in self.betas.iter().enumerate().rev() {
            if beta == 0.0 {
                continue;
            }
            let v = self.qr.col(k);
            for j in 0..b.cols {
                let target = &mut b.data[j * m..(j + 1) * m];
                let mut dot = target[k];
                for i in k + 1..m {
                    dot += v[i] * target[i];
                }
                let s = beta * dot;
                target[k] -= s;
                for i in k + 1..m {
                    target[i] -= s * v[i];
                }
            }
        }
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.qr.at(i, j)
    }
}

fn all_finite(a: ArrayView2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Solves min ‖A X − B‖_F by Householder QR with column pivoting.
///
/// Columns whose pivot falls below `1e-10 · ‖A‖_F` are treated as dependent
/// and the minimum-norm solution is returned through a complete orthogonal
/// decomposition.
pub fn qr_least_squares(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<LstsqSolution> {
    let (m, n) = a.dim();
    if b.nrows() != m {
        return Err(Error::DimensionMismatch {
            what: "least-squares right-hand side rows",
            expected: m,
            got: b.nrows(),
        });
    }
    if !all_finite(a) || !all_finite(b) {
        return Err(Error::NonFinite("qr_least_squares"));
    }
    let k = b.ncols();
    if n == 0 {
        return Ok(LstsqSolution {
            solution: Array2::zeros((0, k)),
            rank: 0,
            rank_deficient: false,
        });
    }

    let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-10 * a_norm;
    let f = HouseholderQr::factor(a, true);
    let steps = m.min(n);
    let rank = (0..steps).take_while(|&i| f.r(i, i).abs() > tol).count();

    let mut rhs = ColMajor::from_view(b);
    f.apply_qt(&mut rhs);

    // z solves the (possibly reduced) triangular system in pivoted coordinates.
    let mut z = Array2::<f64>::zeros((n, k));
    if rank == n {
        for j in 0..k {
            for i in (0..n).rev() {
                let mut s = rhs.at(i, j);
                for l in i + 1..n {
                    s -= f.r(i, l) * z[[l, j]];
                }
                z[[i, j]] = s / f.r(i, i);
            }
        }
    } else if rank > 0 {
        // [R11 R12] = R2ᵀ Q2ᵀ via QR of its transpose; minimum-norm z = Q2 R2⁻ᵀ c.
        let mut t = Array2::<f64>::zeros((n, rank));
        for i in 0..rank {
            for l in i..n {
                t[[l, i]] = f.r(i, l);
            }
        }
        let g = HouseholderQr::factor(t.view(), false);
        let mut y = ColMajor {
            rows: n,
            cols: k,
            data: vec![0.0; n * k],
        };
        for j in 0..k {
            for i in 0..rank {
                let mut s = rhs.at(i, j);
                for l in 0..i {
                    s -= g.r(l, i) * y.data[j * n + l];
                }
                y.data[j * n + i] = s / g.r(i, i);
            }
        }
        g.apply_q(&mut y);
        for j in 0..k {
            for i in 0..n {
                z[[i, j]] = y.data[j * n + i];
            }
        }
    }

    let mut solution = Array2::<f64>::zeros((n, k));
    for (i, &p) in f.perm.iter().enumerate() {
        solution.row_mut(p).assign(&z.row(i));
    }
    Ok(LstsqSolution {
        solution,
        rank,
        rank_deficient: rank < n,
    })
}

/// Ratio of the largest to the smallest pivot of a QR factorization: a cheap
/// condition estimate for a square or tall matrix.
pub fn condition_estimate(a: ArrayView2<f64>) -> f64 {
    let f = HouseholderQr::factor(a, true);
    let steps = a.nrows().min(a.ncols());
    if steps == 0 {
        return 1.0;
    }
    let first = f.r(0, 0).abs();
    let last = f.r(steps - 1, steps - 1).abs();
    if last == 0.0 {
        f64::INFINITY
    } else {
        first / last
    }
}

#[derive(Clone, Debug)]
pub struct SymmetricEig {
    /// Ascending.
    pub values: Array1<f64>,
    /// Column i is the unit eigenvector of `values[i]`.
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi eigensolver for a symmetric matrix.
pub fn symmetric_eig(s: ArrayView2<f64>) -> Result<SymmetricEig> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "symmetric_eig columns",
            expected: n,
            got: s.ncols(),
        });
    }
    if !all_finite(s) {
        return Err(Error::NonFinite("symmetric_eig"));
    }
    let scale = s.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((s[[i, j]] - s[[j, i]]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(Error::Asymmetric(asym));
    }

    let mut a = s.to_owned();
    // Symmetrize exactly so rotations act on a truly symmetric matrix.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let fro = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = 1e-12 * fro;
    const MAX_SWEEPS: usize = 100;

    let off = |a: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[[i, j]] * a[[i, j]];
                }
            }
        }
        acc.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) > target {
        if sweeps == MAX_SWEEPS {
            return Err(Error::EigNonConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - sn * akq;
                    a[[k, q]] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - sn * aqk;
                    a[[q, k]] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymmetricEig { values, vectors })
}

/// Largest singular value, computed from the eigenvalues of AᵀA.
pub fn spectral_norm(a: ArrayView2<f64>) -> Result<f64> {
    let ata = a.t().dot(&a);
    let eig = symmetric_eig(ata.view())?;
    Ok(eig.values.iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt())
}

/// Power-iteration estimate of ‖A‖₂ from a fixed all-ones start vector.
pub fn power_iteration_norm(a: ArrayView2<f64>, iters: usize) -> f64 {
    let n = a.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut x = Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..iters {
        let y = a.t().dot(&a.dot(&x));
        let nrm = y.dot(&y).sqrt();
        if nrm == 0.0 {
            return 0.0;
        }
        est = nrm.sqrt();
        x = y / nrm;
    }
    est
}

/// Solves S X = B for symmetric positive definite S via Cholesky.
/// Returns `None` if a pivot is not positive.
const CHOLESKY_BLOCK: usize = 48;

/// Dot product with independent partial sums, which lets the loop vectorize.
#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Lower Cholesky factor, blocked so the trailing update is a matrix product.
fn cholesky_factor(s: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = s.nrows();
    let mut a = s.to_owned();
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + CHOLESKY_BLOCK).min(n);
        {
            let data = a.as_slice_mut().expect("owned standard layout");
            for j in k0..k1 {
                let (before, rest) = data.split_at_mut((j + 1) * n);
                let row_j = &mut before[j * n..];
                let d = row_j[j] - dot_unrolled(&row_j[k0..j], &row_j[k0..j]);
                if !(d > 0.0) {
                    return None;
                }
                let d = d.sqrt();
                row_j[j] = d;
                let pivot = &row_j[k0..j];
                for row_i in rest.chunks_exact_mut(n) {
                    row_i[j] = (row_i[j] - dot_unrolled(&row_i[k0..j], pivot)) / d;
                }
            }
        }
        if k1 < n {
            let panel = a.slice(s![k1.., k0..k1]).to_owned();
            let update = panel.dot(&panel.t());
            let mut trailing = a.slice_mut(s![k1.., k1..]);
            trailing -= &update;
        }
        k0 = k1;
    }
    for i in 0..n {
        for j in i + 1..n {
            a[[i, j]] = 0.0;
        }
    }
    Some(a)
}

pub fn cholesky_solve(s: ArrayView2<f64>, b: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = s.nrows();
    let lower = cholesky_factor(s)?;
    let l = lower.as_slice().expect("owned standard layout");
    let mut x = b.to_owned();
    let mut col = vec![0.0; n];
    for c in 0..x.ncols() {
        for i in 0..n {
            col[i] = x[[i, c]];
        }
        // L y = b, one row of L at a time.
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            col[i] = (col[i] - dot_unrolled(row, &col[..i])) / l[i * n + i];
        }
        // Lᵀ x = y: after fixing x_i, remove its contribution from the rest.
        for i in (0..n).rev() {
            col[i] /= l[i * n + i];
            let xi = col[i];
            for (t, v) in col[..i].iter_mut().zip(&l[i * n..i * n + i]) {
                *t -= xi * v;
            }
        }
        for i in 0..n {
            x[[i, c]] = col[i];
        }
    }
    Some(x)
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
