//! Factorizations and fitting.
//!
//! Least squares goes through Householder QR rather than the normal
//! equations: the normal equations square the condition number, and the
//! context fits this crate performs can be poorly conditioned when the
//! context set is small. The normal-equations form survives in the test
//! suites as an independent oracle.

use crate::error::{Error, Result};
use crate::numkit::matrix::Matrix;

/// Relative pivot ratio below which a least-squares system is rejected.
pub const RANK_TOL: f64 = 1e-10;

/// Solves min ||a z - b||_F for z (a.cols x b.cols) via Householder QR.
///
/// Requires a.rows >= a.cols. Fails if the smallest diagonal of R falls
/// below RANK_TOL times the largest, which covers both exact rank loss and
/// numerically hopeless systems.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let m = a.rows();
    let d = a.cols();
    if b.rows() != m {
        return Err(Error::DimensionMismatch {
            op: "lstsq",
            detail: format!("lhs has {} rows, rhs has {}", m, b.rows()),
        });
    }
    if m < d {
        return Err(Error::DimensionMismatch {
            op: "lstsq",
            detail: format!("underdetermined system: {} rows < {} cols", m, d),
        });
    }
    a.ensure_finite("lstsq")?;
    b.ensure_finite("lstsq")?;

    let mut r = a.clone();
    let mut rhs = b.clone();
    let q = rhs.cols();
    let mut v = vec![0.0; m];

    for k in 0..d {
        // Householder vector annihilating column k below the diagonal.
        let mut normx = 0.0;
        for i in k..m {
            normx += r.get(i, k) * r.get(i, k);
        }
        let normx = normx.sqrt();
        let rkk = r.get(k, k);
        let alpha = if rkk >= 0.0 { -normx } else { normx };
        v[k] = rkk - alpha;
        for i in (k + 1)..m {
            v[i] = r.get(i, k);
        }
        let vnorm2: f64 = v[k..m].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            let scale = 2.0 / vnorm2;
            for j in (k + 1)..d {
                let mut proj = 0.0;
                for i in k..m {
                    proj += v[i] * r.get(i, j);
                }
                let proj = proj * scale;
                for i in k..m {
                    let val = r.get(i, j) - proj * v[i];
                    r.set(i, j, val);
                }
            }
            for j in 0..q {
                let mut proj = 0.0;
                for i in k..m {
                    proj += v[i] * rhs.get(i, j);
                }
                let proj = proj * scale;
                for i in k..m {
                    let val = rhs.get(i, j) - proj * v[i];
                    rhs.set(i, j, val);
                }
            }
        }
        r.set(k, k, alpha);
        for i in (k + 1)..m {
            r.set(i, k, 0.0);
        }
    }

    let mut max_diag = 0.0f64;
    let mut min_diag = f64::INFINITY;
    for k in 0..d {
        let p = r.get(k, k).abs();
        max_diag = max_diag.max(p);
        min_diag = min_diag.min(p);
    }
    if d > 0 && (max_diag == 0.0 || min_diag < RANK_TOL * max_diag) {
        let ratio = if max_diag == 0.0 {
            0.0
        } else {
            min_diag / max_diag
        };
        return Err(Error::RankDeficient {
            op: "lstsq",
            ratio,
            tol: RANK_TOL,
            rows: m,
            cols: d,
        });
    }

    // Back substitution on the upper-triangular head.
    let mut z = Matrix::zeros(d, q);
    for j in 0..q {
        for k in (0..d).rev() {
            let mut s = rhs.get(k, j);
            for l in (k + 1)..d {
                s -= r.get(k, l) * z.get(l, j);
            }
            z.set(k, j, s / r.get(k, k));
        }
    }
    z.ensure_finite("lstsq")?;
    Ok(z)
}

/// Least-squares estimate of the operator taking the rows of `x` to the rows
/// of `x_p`: returns the square map r_hat minimizing ||x_p - x r_hat^T||_F.
pub fn solve_least_squares(x: &Matrix, x_p: &Matrix) -> Result<Matrix> {
    if x.cols() != x_p.cols() {
        return Err(Error::DimensionMismatch {
            op: "solve_least_squares",
            detail: format!("{} vs {} columns", x.cols(), x_p.cols()),
        });
    }
    Ok(lstsq(x, x_p)?.transpose())
}

struct LuFactors {
    /// L strictly below the diagonal (unit diagonal implied), U on and above.
    lu: Matrix,
    /// perm[k] is the original row index occupying row k after pivoting.
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

fn lu_decompose(a: &Matrix) -> LuFactors {
    let n = a.rows();
    assert_eq!(n, a.cols(), "lu_decompose requires a square matrix");
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    let mut singular = false;
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = lu.get(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.get(i, k).abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_val == 0.0 {
            singular = true;
            continue;
        }
        if pivot_row != k {
            for j in 0..n {
                let tmp = lu.get(k, j);
                lu.set(k, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, tmp);
            }
            perm.swap(k, pivot_row);
            sign = -sign;
        }
        let pivot = lu.get(k, k);
        for i in (k + 1)..n {
            let factor = lu.get(i, k) / pivot;
            lu.set(i, k, factor);
            for j in (k + 1)..n {
                let val = lu.get(i, j) - factor * lu.get(k, j);
                lu.set(i, j, val);
            }
        }
    }
    LuFactors {
        lu,
        perm,
        sign,
        singular,
    }
}

pub fn determinant(a: &Matrix) -> f64 {
    let f = lu_decompose(a);
    if f.singular {
        return 0.0;
    }
    let mut det = f.sign;
    for k in 0..a.rows() {
        det *= f.lu.get(k, k);
    }
    det
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let f = lu_decompose(a);
    if f.singular {
        return Err(Error::RankDeficient {
            op: "inverse",
            ratio: 0.0,
            tol: 0.0,
            rows: n,
            cols: n,
        });
    }
    let mut x = Matrix::zeros(n, n);
    for col in 0..n {
        // Forward substitution with the unit lower triangle on P*e_col.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if f.perm[i] == col { 1.0 } else { 0.0 };
            for j in 0..i {
                s -= f.lu.get(i, j) * y[j];
            }
            y[i] = s;
        }
        // Back substitution with the upper triangle.
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= f.lu.get(i, j) * x.get(j, col);
            }
            x.set(i, col, s / f.lu.get(i, i));
        }
    }
    x.ensure_finite("inverse")?;
    Ok(x)
}

/// Smallest and largest singular values of `a`, via cyclic Jacobi on a^T a.
/// Intended for the small matrices that occur in mixing-network screening.
pub fn singular_value_bounds(a: &Matrix) -> (f64, f64) {
    let mut g = a.matmul_tn(a);
    let n = g.rows();
    if n == 0 {
        return (0.0, 0.0);
    }
    let scale = g.frobenius_norm();
    if scale == 0.0 {
        return (0.0, 0.0);
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += g.get(p, q) * g.get(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let gpq = g.get(p, q);
                if gpq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (g.get(q, q) - g.get(p, p)) / (2.0 * gpq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for j in 0..n {
                    let gpj = g.get(p, j);
                    let gqj = g.get(q, j);
                    g.set(p, j, c * gpj - s * gqj);
                    g.set(q, j, s * gpj + c * gqj);
                }
                for i in 0..n {
                    let gip = g.get(i, p);
                    let giq = g.get(i, q);
                    g.set(i, p, c * gip - s * giq);
                    g.set(i, q, s * gip + c * giq);
                }
            }
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for k in 0..n {
        let ev = g.get(k, k).max(0.0);
        lo = lo.min(ev);
        hi = hi.max(ev);
    }
    (lo.sqrt(), hi.sqrt())
}

/// Ordinary least squares from row features to row targets.
/// Returns (map, offset) with map of shape targets x features. With
/// `intercept` false the offset is zero and the fit is forced through the
/// origin.
pub fn fit_linear_map(
    features: &Matrix,
    targets: &Matrix,
    intercept: bool,
) -> Result<(Matrix, Vec<f64>)> {
    if features.rows() != targets.rows() {
        return Err(Error::DimensionMismatch {
            op: "fit_linear_map",
            detail: format!("{} feature rows vs {} target rows", features.rows(), targets.rows()),
        });
    }
    if !intercept {
        let z = lstsq(features, targets)?;
        return Ok((z.transpose(), vec![0.0; targets.cols()]));
    }
    let f_mean = column_means(features);
    let t_mean = column_means(targets);
    let fc = subtract_row(features, &f_mean);
    let tc = subtract_row(targets, &t_mean);
    let z = lstsq(&fc, &tc)?;
    let map = z.transpose();
    let mut offset = t_mean.clone();
    for (i, o) in offset.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..map.cols() {
            s += map.get(i, j) * f_mean[j];
        }
        *o -= s;
    }
    Ok((map, offset))
}

pub fn column_means(a: &Matrix) -> Vec<f64> {
    let mut means = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        for (j, m) in means.iter_mut().enumerate() {
            *m += a.get(i, j);
        }
    }
    let n = a.rows().max(1) as f64;
    for m in &mut means {
        *m /= n;
    }
    means
}

fn subtract_row(a: &Matrix, row: &[f64]) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) - row[j])
}

/// Coefficient of determination pooled across output dimensions
/// (variance-weighted): 1 - SS_res / SS_tot with SS_tot taken around the
/// per-column means of the target. Errors when every target column is
/// constant, since no variance is left to explain.
pub fn r_squared(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    if predictions.rows() != targets.rows() || predictions.cols() != targets.cols() {
        return Err(Error::DimensionMismatch {
            op: "r_squared",
            detail: format!(
                "{}x{} predictions vs {}x{} targets",
                predictions.rows(),
                predictions.cols(),
                targets.rows(),
                targets.cols()
            ),
        });
    }
    if targets.rows() == 0 {
        return Err(Error::EmptyInput { op: "r_squared" });
    }
    let mut all_constant = true;
    for j in 0..targets.cols() {
        let first = targets.get(0, j);
        for i in 1..targets.rows() {
            if targets.get(i, j) != first {
                all_constant = false;
                break;
            }
        }
        if !all_constant {
            break;
        }
    }
    if all_constant {
        return Err(Error::UndefinedVariance);
    }
    let means = column_means(targets);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..targets.rows() {
        for j in 0..targets.cols() {
            let r = predictions.get(i, j) - targets.get(i, j);
            let d = targets.get(i, j) - means[j];
            ss_res += r * r;
            ss_tot += d * d;
        }
    }
    if ss_tot == 0.0 {
        return Err(Error::UndefinedVariance);
    }
    Ok(1.0 - ss_res / ss_tot)
}
