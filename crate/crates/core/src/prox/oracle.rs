//! Reference solver for the tangent-space subproblem.
//!
//! Works in an explicit orthonormal basis `{B_k}` of `T_X M` so the tangent
//! constraint disappears: with `ζ = Σ c_k B_k` the problem becomes
//! `min_c ⟨Bᵀv, c⟩ + ‖c‖²/(2γ) + h(X + Bc)`, solved by ADMM on the split
//! `y = X + Bc`. Slow but shares no code path with the Newton solver, so it
//! is used to validate it.

use crate::manifold::{Geometry, StiefelPoint};
use crate::prox::NonsmoothTerm;
use crate::Mat;

pub const DEFAULT_ITERS: usize = 100_000;

/// Orthonormal basis of `T_X M` (Frobenius inner product).
///
/// Stiefel mode has `dr − r(r+1)/2` elements `X(E_ij − E_ji)/√2` and
/// `X_⊥ e_a e_bᵀ`; Grassmann mode keeps only the latter.
pub fn tangent_basis(x: &StiefelPoint) -> Vec<Mat> {
    let (d, r) = x.shape();
    let xm = x.matrix();
    let complement = orthogonal_complement(xm);
    let mut basis = Vec::new();
    if x.geometry() == Geometry::Stiefel {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..r {
            for j in (i + 1)..r {
                let mut omega = Mat::zeros(r, r);
                omega[(i, j)] = s;
                omega[(j, i)] = -s;
                basis.push(xm * omega);
            }
        }
    }
    for a in 0..complement.ncols() {
        for b in 0..r {
            let mut e = Mat::zeros(d, r);
            e.column_mut(b).copy_from(&complement.column(a));
            basis.push(e);
        }
    }
    basis
}

fn orthogonal_complement(x: &Mat) -> Mat {
    let (d, r) = x.shape();
    let proj = Mat::identity(d, d) - x * x.transpose();
    let eig = proj.symmetric_eigen();
    let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    debug_assert_eq!(keep.len(), d - r);
    Mat::from_fn(d, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])])
}

/// Solves the subproblem by ADMM in tangent coordinates, stopping early
/// once both ADMM residuals fall below `1e-14`.
pub fn solve_reference(x: &StiefelPoint, v: &Mat, gamma: f64, h: &NonsmoothTerm, max_iters: usize) -> Mat {
    let basis = tangent_basis(x);
    let (d, r) = x.shape();
    let dim = basis.len();
    if dim == 0 {
        return Mat::zeros(d, r);
    }
    // dr × k matrix of vectorized basis elements
    let b = Mat::from_fn(d * r, dim, |i, k| basis[k].as_slice()[i]);
    let xv = Mat::from_column_slice(d * r, 1, x.matrix().as_slice());
    let vv = Mat::from_column_slice(d * r, 1, v.as_slice());
    let btv = b.tr_mul(&vv);
    let to_tangent = |c: &Mat| Mat::from_column_slice(d, r, (&b * c).as_slice());

    if h.is_zero() {
        return to_tangent(&(btv * -gamma));
    }

    let rho = 1.0 / gamma;
    let inv = 1.0 / (1.0 / gamma + rho);
    let reshape = |m: &Mat| Mat::from_column_slice(d, r, m.as_slice());
    let flatten = |m: &Mat| Mat::from_column_slice(d * r, 1, m.as_slice());

    let mut y = xv.clone();
    let mut u = Mat::zeros(d * r, 1);
    let mut c = Mat::zeros(dim, 1);
    for _ in 0..max_iters {
        c = (&btv + b.tr_mul(&(&xv - &y + &u)) * rho) * -inv;
        let bc = &b * &c;
        let y_prev = y.clone();
        y = flatten(&h.prox(&reshape(&(&xv + &bc + &u)), 1.0 / rho));
        let primal = &xv + &bc - &y;
        u += &primal;
        let dual = (&y - &y_prev).norm() * rho;
        if primal.norm() <= 1e-14 && dual <= 1e-14 {
            break;
        }
    }
    to_tangent(&c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{random_point, tangency_error};

    #[test]
    fn basis_is_orthonormal_and_tangent() {
        let x = random_point(6, 3, 4).unwrap();
        let basis = tangent_basis(&x);
        assert_eq!(basis.len(), 6 * 3 - 3 * 4 / 2);
        for (i, bi) in basis.iter().enumerate() {
            assert!(tangency_error(&x, bi) <= 1e-12);
            for (j, bj) in basis.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((bi.dot(bj) - expected).abs() <= 1e-12);
            }
        }
        let g = random_point(6, 3, 4).unwrap().with_geometry(Geometry::Grassmann);
        assert_eq!(tangent_basis(&g).len(), 3 * 3);
    }
}
