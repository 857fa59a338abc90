//! Geometry of the Stiefel manifold `St(d, r) = {X : XᵀX = I_r}`.
//!
//! The Grassmann manifold is handled as a quotient of the Stiefel manifold:
//! points are orthonormal representatives and tangent vectors live in the
//! horizontal space `{ζ : Xᵀζ = 0}`. The mode is carried by each point as a
//! [`Geometry`] flag so that projection and transport pick the right space.
//!
//! Tangent vectors are ambient `d × r` matrices paired with the point they
//! are tangent at; the metric is the Frobenius inner product inherited from
//! the ambient space.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Mat, Result};

/// Tolerance on `‖XᵀX − I‖_F` above which a point is re-orthonormalized.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    #[default]
    Stiefel,
    Grassmann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetractionKind {
    #[default]
    Polar,
    #[serde(rename = "qr")]
    Qr,
    Cayley,
    Exponential,
}

impl RetractionKind {
    /// The retractions used in experiments; the exponential map is opt-in.
    pub const DEFAULTS: [RetractionKind; 3] =
        [RetractionKind::Polar, RetractionKind::Qr, RetractionKind::Cayley];
}

/// A `d × r` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    data: Mat,
    geometry: Geometry,
}

impl StiefelPoint {
    /// Wraps `data`, re-orthonormalizing through the Q factor when the
    /// columns drift further than [`ORTHONORMALITY_TOL`] from orthonormal.
    pub fn new(data: Mat, geometry: Geometry) -> Result<Self> {
        let (d, r) = data.shape();
        if r == 0 || d < r {
            return Err(Error::Dimension(format!("need d >= r >= 1, got {d}x{r}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in point".into()));
        }
        let data = if orthonormality_error(&data) > ORTHONORMALITY_TOL {
            qf(&data)?
        } else {
            data
        };
        Ok(Self { data, geometry })
    }

    pub fn stiefel(data: Mat) -> Result<Self> {
        Self::new(data, Geometry::Stiefel)
    }

    pub fn matrix(&self) -> &Mat {
        &self.data
    }

    pub fn into_matrix(self) -> Mat {
        self.data
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Self {
        self.geometry = geometry;
        self
    }

    pub fn d(&self) -> usize {
        self.data.nrows()
    }

    pub fn r(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    /// `‖XᵀX − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.data)
    }

    /// Replaces the representative by `qf(X)`.
    pub fn reorthonormalize(&mut self) -> Result<()> {
        self.data = qf(&self.data)?;
        Ok(())
    }
}

/// A tangent vector together with its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    data: Mat,
    base: StiefelPoint,
}

impl TangentVector {
    pub fn zero(base: &StiefelPoint) -> Self {
        let (d, r) = base.shape();
        Self { data: Mat::zeros(d, r), base: base.clone() }
    }

    pub fn matrix(&self) -> &Mat {
        &self.data
    }

    pub fn into_matrix(self) -> Mat {
        self.data
    }

    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { data: &self.data * s, base: self.base.clone() }
    }

    /// Residual of the tangent-space constraint at the base point.
    pub fn tangency_error(&self) -> f64 {
        tangency_error(&self.base, &self.data)
    }

    /// Wraps a matrix that is already tangent at `base` (up to rounding).
    pub(crate) fn new_unchecked(data: Mat, base: &StiefelPoint) -> Self {
        Self { data, base: base.clone() }
    }
}

/// `½(A + Aᵀ)`.
pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

fn orthonormality_error(x: &Mat) -> f64 {
    let r = x.ncols();
    (x.tr_mul(x) - Mat::identity(r, r)).norm()
}

/// `‖ζᵀX + Xᵀζ‖_F` in Stiefel mode, `‖Xᵀζ‖_F` in Grassmann mode.
pub fn tangency_error(x: &StiefelPoint, zeta: &Mat) -> f64 {
    let xtz = x.data.tr_mul(zeta);
    match x.geometry {
        Geometry::Stiefel => (&xtz + xtz.transpose()).norm(),
        Geometry::Grassmann => xtz.norm(),
    }
}

fn check_shape(x: &StiefelPoint, y: &Mat) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dim(x.shape(), y.shape()));
    }
    Ok(())
}

/// Q factor of the thin QR factorization with `R` forced to a positive
/// diagonal, which makes the factor unique for full column rank input.
pub fn qf(a: &Mat) -> Result<Mat> {
    let (d, r) = a.shape();
    if d < r {
        return Err(Error::Dimension(format!("qf needs rows >= cols, got {d}x{r}")));
    }
    let qr = a.clone().qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..r {
        let rjj = rr[(j, j)];
        if rjj == 0.0 || !rjj.is_finite() {
            return Err(Error::Numerical(format!(
                "rank-deficient matrix in qf (R[{j},{j}] = {rjj})"
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Orthogonal projection of an ambient matrix onto `T_X M`.
///
/// Stiefel: `Y − X sym(XᵀY)`. Grassmann: `(I − XXᵀ)Y`.
pub fn project_tangent(x: &StiefelPoint, y: &Mat) -> Result<TangentVector> {
    check_shape(x, y)?;
    Ok(TangentVector { data: project_matrix(x, y), base: x.clone() })
}

pub(crate) fn project_matrix(x: &StiefelPoint, y: &Mat) -> Mat {
    let xty = x.data.tr_mul(y);
    match x.geometry {
        Geometry::Stiefel => y - &x.data * sym(&xty),
        Geometry::Grassmann => y - &x.data * xty,
    }
}

/// Maps a tangent vector back to the manifold.
///
/// A zero tangent vector returns `X` itself for every kind.
pub fn retract(x: &StiefelPoint, xi: &TangentVector, kind: RetractionKind) -> Result<StiefelPoint> {
    if xi.base.data != x.data {
        return Err(Error::Contract("tangent vector is not based at the retraction point".into()));
    }
    if xi.data.iter().all(|&v| v == 0.0) {
        return Ok(x.clone());
    }
    let y = match kind {
        RetractionKind::Polar => polar(&(&x.data + &xi.data))?,
        RetractionKind::Qr => qf(&(&x.data + &xi.data))?,
        RetractionKind::Cayley => cayley(&x.data, &xi.data)?,
        RetractionKind::Exponential => exponential(&x.data, &xi.data)?,
    };
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{kind:?} retraction produced non-finite entries")));
    }
    Ok(StiefelPoint { data: y, geometry: x.geometry })
}

/// Orthogonal polar factor `UVᵀ` of `A = UΣVᵀ`.
fn polar(a: &Mat) -> Result<Mat> {
    let svd = a.clone().svd(true, true);
    let smin = svd.singular_values.min();
    if smin <= 0.0 || !smin.is_finite() {
        return Err(Error::Numerical(format!("polar factor undefined, smallest singular value {smin}")));
    }
    let u = svd.u.ok_or_else(|| Error::Numerical("svd did not return U".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("svd did not return Vᵀ".into()))?;
    Ok(u * vt)
}

fn cayley(x: &Mat, xi: &Mat) -> Result<Mat> {
    let d = x.nrows();
    let p = Mat::identity(d, d) - (x * x.transpose()) * 0.5;
    let pxi = &p * xi;
    let w = &pxi * x.transpose() - x * pxi.transpose();
    let lhs = Mat::identity(d, d) - &w * 0.5;
    let rhs = (Mat::identity(d, d) + &w * 0.5) * x;
    lhs.lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical(format!("Cayley system I - W/2 is singular (‖W‖_F = {:.3e})", w.norm()))
    })
}

/// `[X, Q] exp([[A, −Rᵀ], [R, 0]]) [I; 0]` with `A = Xᵀξ` and
/// `QR = (I − XXᵀ)ξ`.
fn exponential(x: &Mat, xi: &Mat) -> Result<Mat> {
    let (d, r) = x.shape();
    let a = x.tr_mul(xi);
    let normal = xi - x * &a;
    let (q, rr) = if d > r {
        thin_qr_allow_deficient(&normal)
    } else {
        (Mat::zeros(d, r), Mat::zeros(r, r))
    };
    let mut m = Mat::zeros(2 * r, 2 * r);
    m.view_mut((0, 0), (r, r)).copy_from(&a);
    m.view_mut((0, r), (r, r)).copy_from(&(-rr.transpose()));
    m.view_mut((r, 0), (r, r)).copy_from(&rr);
    let e = m.exp();
    let top = e.view((0, 0), (r, r));
    let bottom = e.view((r, 0), (r, r));
    Ok(x * top + q * bottom)
}

fn thin_qr_allow_deficient(a: &Mat) -> (Mat, Mat) {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..r.nrows() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    (q, r)
}

/// Projection transport of `ζ ∈ T_X M` to `T_Y M`.
pub fn transport(x: &StiefelPoint, y: &StiefelPoint, zeta: &TangentVector) -> Result<TangentVector> {
    if zeta.base.data != x.data {
        return Err(Error::Contract("transported vector is not based at the source point".into()));
    }
    check_shape(y, &zeta.data)?;
    project_tangent(y, &zeta.data)
}

/// Projection transport followed by rescaling to the original norm.
/// A vector that projects to zero is returned as zero.
pub fn transport_isometric(
    x: &StiefelPoint,
    y: &StiefelPoint,
    zeta: &TangentVector,
) -> Result<TangentVector> {
    let mut out = transport(x, y, zeta)?;
    let n = out.norm();
    if n > 0.0 {
        out.data *= zeta.norm() / n;
    }
    Ok(out)
}

/// Gaussian `d × r` matrix from a seeded stream.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Mat {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Point obtained from the Q factor of a seeded Gaussian matrix.
pub fn random_point(d: usize, r: usize, seed: u64) -> Result<StiefelPoint> {
    random_point_with(d, r, Geometry::Stiefel, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_point_with(
    d: usize,
    r: usize,
    geometry: Geometry,
    rng: &mut impl rand::Rng,
) -> Result<StiefelPoint> {
    if r == 0 || r > d {
        return Err(Error::Dimension(format!("need d >= r >= 1, got d={d}, r={r}")));
    }
    let g = gaussian_matrix(d, r, rng);
    Ok(StiefelPoint { data: qf(&g)?, geometry })
}

/// Unit-norm tangent vector at `x` from a seeded Gaussian.
pub fn random_tangent(x: &StiefelPoint, seed: u64) -> Result<TangentVector> {
    random_tangent_with(x, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_tangent_with(x: &StiefelPoint, rng: &mut impl rand::Rng) -> Result<TangentVector> {
    let (d, r) = x.shape();
    let mut t = project_tangent(x, &gaussian_matrix(d, r, rng))?;
    let n = t.norm();
    if n == 0.0 {
        return Err(Error::Numerical("tangent space is trivial at this point".into()));
    }
    t.data /= n;
    Ok(t)
}
