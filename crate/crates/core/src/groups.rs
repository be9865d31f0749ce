//! Group elements, their action on latents, and the estimated (implicit)
//! representation recovered from sample pairs by least squares, including
//! the block form that pins an identity on the content coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    determinant, haar_orthogonal, haar_special_orthogonal, inverse, sample_gl_rejection,
    solve_least_squares, Matrix, RngStream,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupFamily {
    #[serde(rename = "so")]
    SpecialOrthogonal,
    #[serde(rename = "o")]
    Orthogonal,
    #[serde(rename = "gl")]
    GeneralLinear,
}

impl std::fmt::Display for GroupFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            GroupFamily::SpecialOrthogonal => "so",
            GroupFamily::Orthogonal => "o",
            GroupFamily::GeneralLinear => "gl",
        };
        write!(f, "{}", name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKind {
    pub family: GroupFamily,
    pub n: usize,
}

impl GroupKind {
    pub fn new(family: GroupFamily, n: usize) -> Self {
        assert!(n >= 1, "group dimension must be at least 1");
        GroupKind { family, n }
    }
}

/// Orthogonality / determinant slack accepted when validating elements.
const ORTHO_TOL: f64 = 1e-8;
const GL_RESIDUAL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GroupElement {
    pub kind: GroupKind,
    pub matrix: Matrix,
}

impl GroupElement {
    /// Wraps a matrix after checking the family invariants.
    pub fn new(kind: GroupKind, matrix: Matrix) -> Result<Self> {
        let el = GroupElement { kind, matrix };
        el.validate()?;
        Ok(el)
    }

    pub fn identity(kind: GroupKind) -> Self {
        GroupElement {
            kind,
            matrix: Matrix::identity(kind.n),
        }
    }

    pub fn n(&self) -> usize {
        self.kind.n
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kind.n;
        if self.matrix.rows() != n || self.matrix.cols() != n {
            return Err(Error::DimensionMismatch {
                op: "GroupElement::validate",
                detail: format!(
                    "{}x{} matrix for group dimension {}",
                    self.matrix.rows(),
                    self.matrix.cols(),
                    n
                ),
            });
        }
        self.matrix.ensure_finite("GroupElement::validate")?;
        match self.kind.family {
            GroupFamily::SpecialOrthogonal | GroupFamily::Orthogonal => {
                let gram = self.matrix.matmul_tn(&self.matrix);
                let dev = gram.sub(&Matrix::identity(n)).frobenius_norm();
                if dev >= ORTHO_TOL {
                    return Err(Error::InvalidConfig(format!(
                        "matrix is not orthogonal, ||M^T M - I|| = {:.3e}",
                        dev
                    )));
                }
                if self.kind.family == GroupFamily::SpecialOrthogonal {
                    let det = determinant(&self.matrix);
                    if (det - 1.0).abs() > ORTHO_TOL {
                        return Err(Error::InvalidConfig(format!(
                            "rotation determinant {} is not +1",
                            det
                        )));
                    }
                }
            }
            GroupFamily::GeneralLinear => {
                let inv = inverse(&self.matrix)?;
                let residual = Matrix::identity(n)
                    .sub(&self.matrix.matmul(&inv))
                    .frobenius_norm();
                if residual > GL_RESIDUAL_TOL {
                    return Err(Error::InvalidConfig(format!(
                        "inversion residual {:.3e} too large for a usable element",
                        residual
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws one group element. The general-linear family reports how many
/// rejection attempts the draw consumed via the validated element alone;
/// callers needing the count should use `sample_gl_rejection` directly.
pub fn sample_group_element(kind: GroupKind, rng: &mut RngStream) -> Result<GroupElement> {
    let matrix = match kind.family {
        GroupFamily::SpecialOrthogonal => haar_special_orthogonal(rng, kind.n),
        GroupFamily::Orthogonal => haar_orthogonal(rng, kind.n),
        GroupFamily::GeneralLinear => sample_gl_rejection(rng, kind.n)?.0,
    };
    GroupElement::new(kind, matrix)
}

/// Applies R(g) to every row of `points`.
pub fn apply_representation(g: &GroupElement, points: &Matrix) -> Result<Matrix> {
    if points.cols() != g.n() {
        return Err(Error::DimensionMismatch {
            op: "apply_representation",
            detail: format!("{} columns vs group dimension {}", points.cols(), g.n()),
        });
    }
    Ok(g.matrix.apply_to_rows(points))
}

/// Estimated representation mapping the rows of `phi_y` onto the rows of
/// `phi_yp`. Thin wrapper over the least-squares transport; the rank error
/// from the solver already carries the pivot-ratio diagnostics.
pub fn implicit_representation(phi_y: &Matrix, phi_yp: &Matrix) -> Result<Matrix> {
    solve_least_squares(phi_y, phi_yp)
}

/// Block transport: a general linear map on the first `n_style` coordinates
/// and an implicit identity on the remaining content coordinates. Only the
/// style block is ever stored or fitted.
#[derive(Debug, Clone)]
pub struct StructuredRep {
    pub style_block: Matrix,
    pub n_style: usize,
    pub m_content: usize,
}

impl StructuredRep {
    pub fn identity(n_style: usize, m_content: usize) -> Self {
        StructuredRep {
            style_block: Matrix::identity(n_style),
            n_style,
            m_content,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_style + self.m_content
    }

    /// Applies the block map to one embedding vector.
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "embedding length mismatch");
        let mut out = Vec::with_capacity(v.len());
        for i in 0..self.n_style {
            let mut s = 0.0;
            for j in 0..self.n_style {
                s += self.style_block.get(i, j) * v[j];
            }
            out.push(s);
        }
        out.extend_from_slice(&v[self.n_style..]);
        out
    }

    /// Applies the block map to every row.
    pub fn apply_rows(&self, points: &Matrix) -> Matrix {
        assert_eq!(points.cols(), self.dim(), "embedding width mismatch");
        let style = points.columns(0, self.n_style);
        let moved = style.matmul_nt(&self.style_block);
        if self.m_content == 0 {
            moved
        } else {
            let content = points.columns(self.n_style, self.dim());
            moved.hstack(&content)
        }
    }

    /// Applies the transpose of the block map to one vector (the adjoint
    /// used when pulling gradients back through a stop-gradient transport).
    pub fn apply_transpose_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim());
        let mut out = Vec::with_capacity(v.len());
        for j in 0..self.n_style {
            let mut s = 0.0;
            for i in 0..self.n_style {
                s += self.style_block.get(i, j) * v[i];
            }
            out.push(s);
        }
        out.extend_from_slice(&v[self.n_style..]);
        out
    }

    /// Materializes the full block-diagonal matrix. Test and debug helper.
    pub fn to_full_matrix(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_fn(d, d, |i, j| {
            if i < self.n_style && j < self.n_style {
                self.style_block.get(i, j)
            } else if i == j {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Fits the style block from the first `n_style` coordinates of the
/// embedding pairs; content coordinates never enter the fit.
pub fn structured_representation(
    phi_y: &Matrix,
    phi_yp: &Matrix,
    n_style: usize,
) -> Result<StructuredRep> {
    if phi_y.cols() != phi_yp.cols() || phi_y.rows() != phi_yp.rows() {
        return Err(Error::DimensionMismatch {
            op: "structured_representation",
            detail: format!(
                "{}x{} vs {}x{}",
                phi_y.rows(),
                phi_y.cols(),
                phi_yp.rows(),
                phi_yp.cols()
            ),
        });
    }
    if n_style > phi_y.cols() {
        return Err(Error::DimensionMismatch {
            op: "structured_representation",
            detail: format!("n_style {} exceeds embedding width {}", n_style, phi_y.cols()),
        });
    }
    let style_y = phi_y.columns(0, n_style);
    let style_yp = phi_yp.columns(0, n_style);
    let style_block = solve_least_squares(&style_y, &style_yp)?;
    Ok(StructuredRep {
        style_block,
        n_style,
        m_content: phi_y.cols() - n_style,
    })
}

/// Matrix product of two elements of the same group, revalidated. Training
/// never composes actions; the property suites do.
pub fn compose(a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
    if a.kind != b.kind {
        return Err(Error::DimensionMismatch {
            op: "compose",
            detail: format!(
                "{}({}) vs {}({})",
                a.kind.family,
                a.kind.n,
                b.kind.family,
                b.kind.n
            ),
        });
    }
    GroupElement::new(a.kind, a.matrix.matmul(&b.matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{sample_gaussian_matrix, unit_sphere_sample};

    fn kind(family: GroupFamily, n: usize) -> GroupKind {
        GroupKind::new(family, n)
    }

    #[test]
    fn identity_element_leaves_points_alone() {
        let g = GroupElement::identity(kind(GroupFamily::SpecialOrthogonal, 3));
        let mut rng = RngStream::new(1, 0);
        let x = sample_gaussian_matrix(&mut rng, 8, 3);
        let moved = apply_representation(&g, &x).unwrap();
        assert!(moved.sub(&x).max_abs() == 0.0);
    }

    #[test]
    fn rotations_preserve_norms() {
        let mut rng = RngStream::new(2, 0);
        let g = sample_group_element(kind(GroupFamily::SpecialOrthogonal, 3), &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..16).map(|_| unit_sphere_sample(&mut rng, 3)).collect();
        let x = Matrix::from_fn(16, 3, |i, j| rows[i][j]);
        let moved = apply_representation(&g, &x).unwrap();
        for i in 0..16 {
            let norm: f64 = moved.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "row {} norm {}", i, norm);
        }
    }

    #[test]
    fn basis_vector_reads_off_matrix_column() {
        let mut rng = RngStream::new(3, 0);
        let g = sample_group_element(kind(GroupFamily::GeneralLinear, 3), &mut rng).unwrap();
        let e1 = Matrix::from_fn(1, 3, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let moved = apply_representation(&g, &e1).unwrap();
        for i in 0..3 {
            assert_eq!(moved.get(0, i), g.matrix.get(i, 0));
        }
    }

    #[test]
    fn orthogonal_family_covers_both_orientations() {
        let mut rng = RngStream::new(4, 0);
        let mut seen_plus = false;
        let mut seen_minus = false;
        for _ in 0..64 {
            let g = sample_group_element(kind(GroupFamily::Orthogonal, 2), &mut rng).unwrap();
            if determinant(&g.matrix) > 0.0 {
                seen_plus = true;
            } else {
                seen_minus = true;
            }
        }
        assert!(seen_plus && seen_minus, "one orientation class never sampled");
    }

    #[test]
    fn implicit_representation_is_identity_on_equal_inputs() {
        let mut rng = RngStream::new(5, 0);
        let x = sample_gaussian_matrix(&mut rng, 10, 3);
        let r = implicit_representation(&x, &x).unwrap();
        assert!(r.sub(&Matrix::identity(3)).max_abs() < 1e-10);
    }

    #[test]
    fn implicit_representation_recovers_group_matrix_exactly() {
        let mut rng = RngStream::new(6, 0);
        for family in [
            GroupFamily::SpecialOrthogonal,
            GroupFamily::Orthogonal,
            GroupFamily::GeneralLinear,
        ] {
            let g = sample_group_element(kind(family, 3), &mut rng).unwrap();
            let x = sample_gaussian_matrix(&mut rng, 12, 3);
            let moved = apply_representation(&g, &x).unwrap();
            let estimated = implicit_representation(&x, &moved).unwrap();
            assert!(
                estimated.sub(&g.matrix).max_abs() < 1e-8,
                "family {} not recovered",
                family
            );
        }
    }

    #[test]
    fn representation_estimate_is_batch_independent() {
        let mut rng = RngStream::new(7, 0);
        let g = sample_group_element(kind(GroupFamily::GeneralLinear, 3), &mut rng).unwrap();
        let x1 = sample_gaussian_matrix(&mut rng, 15, 3);
        let x2 = sample_gaussian_matrix(&mut rng, 9, 3);
        let r1 =
            implicit_representation(&x1, &apply_representation(&g, &x1).unwrap()).unwrap();
        let r2 =
            implicit_representation(&x2, &apply_representation(&g, &x2).unwrap()).unwrap();
        assert!(r1.sub(&r2).max_abs() < 1e-8);
    }

    #[test]
    fn homomorphism_under_composition() {
        let mut rng = RngStream::new(8, 0);
        let k = kind(GroupFamily::SpecialOrthogonal, 3);
        let g1 = sample_group_element(k, &mut rng).unwrap();
        let g2 = sample_group_element(k, &mut rng).unwrap();
        let g21 = compose(&g2, &g1).unwrap();
        let x = sample_gaussian_matrix(&mut rng, 12, 3);
        let once = implicit_representation(&x, &apply_representation(&g21, &x).unwrap()).unwrap();
        let r1 = implicit_representation(&x, &apply_representation(&g1, &x).unwrap()).unwrap();
        let step2_in = apply_representation(&g1, &x).unwrap();
        let r2 = implicit_representation(
            &step2_in,
            &apply_representation(&g2, &step2_in).unwrap(),
        )
        .unwrap();
        let product = r2.matmul(&r1);
        assert!(once.sub(&product).max_abs() < 1e-8);
    }

    #[test]
    fn conjugation_under_invertible_embedding() {
        let mut rng = RngStream::new(9, 0);
        let g = sample_group_element(kind(GroupFamily::SpecialOrthogonal, 3), &mut rng).unwrap();
        let x = sample_gaussian_matrix(&mut rng, 12, 3);
        let moved = apply_representation(&g, &x).unwrap();
        // Build a well-conditioned embedding map.
        let q = haar_orthogonal(&mut rng, 3);
        let l = Matrix::from_fn(3, 3, |i, j| q.get(i, j) * [1.5, 0.8, 1.1][j]);
        let estimated = implicit_representation(&x.matmul_nt(&l), &moved.matmul_nt(&l)).unwrap();
        let expected = l.matmul(&g.matrix).matmul(&inverse(&l).unwrap());
        assert!(estimated.sub(&expected).max_abs() < 1e-6);
    }

    #[test]
    fn structured_rep_degenerates_to_implicit_when_all_style() {
        let mut rng = RngStream::new(10, 0);
        let x = sample_gaussian_matrix(&mut rng, 12, 4);
        let xp = sample_gaussian_matrix(&mut rng, 12, 4);
        let full = implicit_representation(&x, &xp).unwrap();
        let s = structured_representation(&x, &xp, 4).unwrap();
        assert_eq!(s.m_content, 0);
        assert!(s.style_block.sub(&full).max_abs() < 1e-12);
    }

    #[test]
    fn structured_rep_fits_style_and_passes_content_through() {
        let mut rng = RngStream::new(11, 0);
        let g = sample_group_element(kind(GroupFamily::GeneralLinear, 3), &mut rng).unwrap();
        let style = sample_gaussian_matrix(&mut rng, 14, 3);
        let content = sample_gaussian_matrix(&mut rng, 14, 2);
        let phi_y = style.hstack(&content);
        let phi_yp = apply_representation(&g, &style).unwrap().hstack(&content);
        let s = structured_representation(&phi_y, &phi_yp, 3).unwrap();
        assert!(s.style_block.sub(&g.matrix).max_abs() < 1e-8);
        let applied = s.apply_rows(&phi_y);
        assert!(applied.columns(3, 5).sub(&content).max_abs() == 0.0);
    }

    #[test]
    fn structured_rep_ignores_content_disagreement() {
        let mut rng = RngStream::new(12, 0);
        let g = sample_group_element(kind(GroupFamily::SpecialOrthogonal, 3), &mut rng).unwrap();
        let style = sample_gaussian_matrix(&mut rng, 14, 3);
        let content_a = sample_gaussian_matrix(&mut rng, 14, 2);
        let content_b = sample_gaussian_matrix(&mut rng, 14, 2);
        let phi_y = style.hstack(&content_a);
        let phi_yp = apply_representation(&g, &style).unwrap().hstack(&content_b);
        let s = structured_representation(&phi_y, &phi_yp, 3).unwrap();
        // Oracle: block-diagonal least squares with the content block pinned
        // to the identity decouples, so the style block must match a fit on
        // the style columns alone, no matter how the content columns differ.
        let style_only = implicit_representation(&style, &apply_representation(&g, &style).unwrap())
            .unwrap();
        assert!(s.style_block.sub(&style_only).max_abs() < 1e-10);
        let applied = s.apply_rows(&phi_y);
        assert!(applied.columns(3, 5).sub(&content_a).max_abs() == 0.0);
    }

    #[test]
    fn structured_rep_adjoint_matches_full_matrix_transpose() {
        let mut rng = RngStream::new(13, 0);
        let s = StructuredRep {
            style_block: sample_gaussian_matrix(&mut rng, 3, 3),
            n_style: 3,
            m_content: 2,
        };
        let v: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 1.0).collect();
        let via_block = s.apply_transpose_vec(&v);
        let full_t = s.to_full_matrix().transpose();
        for i in 0..5 {
            let mut want = 0.0;
            for j in 0..5 {
                want += full_t.get(i, j) * v[j];
            }
            assert!((via_block[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_rejects_mismatched_kinds() {
        let mut rng = RngStream::new(14, 0);
        let a = sample_group_element(kind(GroupFamily::SpecialOrthogonal, 3), &mut rng).unwrap();
        let b = sample_group_element(kind(GroupFamily::SpecialOrthogonal, 2), &mut rng).unwrap();
        assert!(compose(&a, &b).is_err());
    }

    #[test]
    fn resampling_the_same_stream_reproduces_the_element() {
        for family in [
            GroupFamily::SpecialOrthogonal,
            GroupFamily::Orthogonal,
            GroupFamily::GeneralLinear,
        ] {
            let mut r1 = RngStream::new(55, 9);
            let mut r2 = RngStream::new(55, 9);
            let a = sample_group_element(kind(family, 3), &mut r1).unwrap();
            let b = sample_group_element(kind(family, 3), &mut r2).unwrap();
            assert_eq!(a.matrix.data(), b.matrix.data());
        }
    }
}
