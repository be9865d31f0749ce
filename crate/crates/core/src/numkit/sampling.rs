//! Random matrix and direction samplers.
//!
//! Draw order is part of the contract: matrices fill row-major, one
//! standard-normal draw per entry, so a fixed RngStream address always
//! yields the same sample. Changing draw order is a breaking change for
//! stored datasets.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkit::linalg::{determinant, inverse};
use crate::numkit::matrix::Matrix;
use crate::numkit::rng::RngStream;

/// Determinant band accepted by the general-linear sampler.
pub const GL_DET_LOW: f64 = 0.2;
pub const GL_DET_HIGH: f64 = 10.0;
/// Inversion residual bound for accepted general-linear samples.
pub const GL_INV_RESIDUAL: f64 = 1e-3;
/// Attempt cap for rejection loops.
pub const REJECTION_CAP: usize = 10_000;

pub fn standard_normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn sample_gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(standard_normal(rng));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Uniform draw from the unit sphere in `dim` dimensions. For dim 1 this
/// degenerates to a fair sign.
pub fn unit_sphere_sample(rng: &mut RngStream, dim: usize) -> Vec<f64> {
    // The zero-dimensional sphere is empty; callers use dim 0 for "no
    // content channel" and expect an empty vector, not a draw.
    if dim == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Thin QR factorization via Householder reflections, m >= n.
pub fn qr_factor(a: &Matrix) -> (Matrix, Matrix) {
    let m = a.rows();
    let n = a.cols();
    assert!(m >= n, "qr_factor requires rows >= cols");
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut normx = 0.0;
        for i in k..m {
            normx += r.get(i, k) * r.get(i, k);
        }
        let normx = normx.sqrt();
        let rkk = r.get(k, k);
        let alpha = if rkk >= 0.0 { -normx } else { normx };
        let mut v = vec![0.0; m];
        v[k] = rkk - alpha;
        for i in (k + 1)..m {
            v[i] = r.get(i, k);
        }
        let vnorm2: f64 = v[k..m].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            let scale = 2.0 / vnorm2;
            for j in k..n {
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
        }
        r.set(k, k, alpha);
        for i in (k + 1)..m {
            r.set(i, k, 0.0);
        }
        vs.push(v);
    }
    // Accumulate the thin Q by applying the reflectors, last first, to the
    // leading columns of the identity.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &vs[k];
        let vnorm2: f64 = v[k..m].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let scale = 2.0 / vnorm2;
        for j in 0..n {
            let mut proj = 0.0;
            for i in k..m {
                proj += v[i] * q.get(i, j);
            }
            let proj = proj * scale;
            for i in k..m {
                let val = q.get(i, j) - proj * v[i];
                q.set(i, j, val);
            }
        }
    }
    let r_head = Matrix::from_fn(n, n, |i, j| r.get(i, j));
    (q, r_head)
}

/// Haar-distributed orthogonal matrix. QR of a Gaussian matrix alone is not
/// Haar; multiplying Q by the signs of R's diagonal removes the sign
/// convention the factorization imposes.
pub fn haar_orthogonal(rng: &mut RngStream, n: usize) -> Matrix {
    assert!(n >= 1);
    let a = sample_gaussian_matrix(rng, n, n);
    let (q, r) = qr_factor(&a);
    let mut out = q;
    for j in 0..n {
        // signum(0) would drop the column; treat exact zero as positive.
        let s = if r.get(j, j) >= 0.0 { 1.0 } else { -1.0 };
        for i in 0..n {
            let val = out.get(i, j) * s;
            out.set(i, j, val);
        }
    }
    out
}

/// Haar draw restricted to rotations: an orientation-reversing draw is mapped
/// into the special orthogonal group by flipping its first column.
pub fn haar_special_orthogonal(rng: &mut RngStream, n: usize) -> Matrix {
    let mut q = haar_orthogonal(rng, n);
    if determinant(&q) < 0.0 {
        for i in 0..n {
            let val = -q.get(i, 0);
            q.set(i, 0, val);
        }
    }
    q
}

/// Gaussian matrices filtered to a numerically safe slice of the general
/// linear group: determinant magnitude inside [GL_DET_LOW, GL_DET_HIGH] and
/// a small inversion residual. Returns the accepted sample and the number
/// of attempts it took.
pub fn sample_gl_rejection(rng: &mut RngStream, n: usize) -> Result<(Matrix, usize)> {
    for attempt in 1..=REJECTION_CAP {
        let a = sample_gaussian_matrix(rng, n, n);
        let det = determinant(&a).abs();
        if !(GL_DET_LOW..=GL_DET_HIGH).contains(&det) {
            continue;
        }
        let inv = match inverse(&a) {
            Ok(inv) => inv,
            Err(_) => continue,
        };
        let residual = Matrix::identity(n).sub(&a.matmul(&inv)).frobenius_norm();
        if residual <= GL_INV_RESIDUAL {
            return Ok((a, attempt));
        }
    }
    Err(Error::RejectionCapExceeded {
        op: "sample_gl_rejection",
        cap: REJECTION_CAP,
    })
}
