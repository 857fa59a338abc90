use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SampleMode, StochasticProblem};
use crate::manifold::gaussian_matrix;
use crate::prox::NonsmoothTerm;
use crate::{Error, Mat, Result};

/// Online sparse PCA: `E‖z − XXᵀz‖² + μ‖X‖₁` over `St(d, r)`.
///
/// Samples are the rows of `data`. The sample gradient is `−2 z zᵀX`,
/// which differs from the ambient gradient of `‖z − XXᵀz‖²` at a feasible
/// point by `2XXᵀzzᵀX = X·(symmetric)`, a normal direction. The tangent
/// subproblem only sees `v` through `⟨v, ζ⟩` with tangent `ζ`, so both give
/// the same iterates.
#[derive(Debug, Clone)]
pub struct SparsePcaProblem {
    data: Mat,
    r: usize,
    h: NonsmoothTerm,
    mode: SampleMode,
}

impl SparsePcaProblem {
    /// `data` is `n × d` with one sample per row.
    pub fn new(data: Mat, r: usize, mu: f64) -> Result<Self> {
        let (n, d) = data.shape();
        if n == 0 {
            return Err(Error::Parameter("sparse PCA needs at least one sample".into()));
        }
        if r == 0 || d < r {
            return Err(Error::Dimension(format!("need d >= r >= 1, got d={d}, r={r}")));
        }
        let h = NonsmoothTerm::l1(mu);
        h.validate((d, r))?;
        Ok(Self { data, r, h, mode: SampleMode::FiniteSum })
    }

    pub fn with_mode(mut self, mode: SampleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn mu(&self) -> f64 {
        self.h.weight()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    fn check(&self, x: &Mat) -> Result<()> {
        let expected = (self.dim(), self.r);
        if x.shape() != expected {
            return Err(Error::dim(expected, x.shape()));
        }
        Ok(())
    }

    /// `‖z_i − XXᵀz_i‖²`.
    pub fn sample_smooth_loss(&self, x: &Mat, i: usize) -> Result<f64> {
        self.check(x)?;
        let z = self.data.row(i).transpose();
        let recon = x * (x.tr_mul(&z));
        Ok((z - recon).norm_squared())
    }

    /// `−2 z_i z_iᵀX`.
    pub fn sample_gradient(&self, x: &Mat, i: usize) -> Result<Mat> {
        self.check(x)?;
        let mut out = Mat::zeros(self.dim(), self.r);
        self.add_sample_gradient(x, i, &mut out);
        Ok(out)
    }

    fn add_sample_gradient(&self, x: &Mat, i: usize, out: &mut Mat) {
        let z = self.data.row(i);
        // w = Xᵀz
        let w = z * x;
        out.ger(-2.0, &z.transpose(), &w.transpose(), 1.0);
    }

    /// Planted model: `z = Σ_k √λ_k g_k l_k + σ ε` with sparse orthonormal
    /// loadings `l_k` on disjoint supports.
    pub fn synthetic(cfg: &SpcaSynthConfig, rng: &mut impl Rng) -> Result<Self> {
        let loadings = cfg.loadings(rng)?;
        let (d, r) = (cfg.d, cfg.r);
        let mut data = gaussian_matrix(cfg.n, d, rng) * cfg.noise;
        let scores = gaussian_matrix(cfg.n, r, rng);
        for k in 0..r {
            let var = cfg.component_variance(k);
            let col = scores.column(k) * var.sqrt();
            data.ger(1.0, &col, &loadings.column(k), 1.0);
        }
        Self::new(data, r, cfg.mu)
    }
}

impl StochasticProblem for SparsePcaProblem {
    fn shape(&self) -> (usize, usize) {
        (self.dim(), self.r)
    }

    fn num_samples(&self) -> usize {
        self.data.nrows()
    }

    fn mode(&self) -> SampleMode {
        self.mode
    }

    fn nonsmooth(&self) -> &NonsmoothTerm {
        &self.h
    }

    fn smooth_loss(&self, x: &Mat) -> Result<f64> {
        self.check(x)?;
        let proj = &self.data * x;
        let resid = &self.data - proj * x.transpose();
        Ok(resid.norm_squared() / self.data.nrows() as f64)
    }

    fn accumulate_gradient(&self, x: &Mat, indices: &[usize], out: &mut Mat) -> Result<()> {
        self.check(x)?;
        for &i in indices {
            self.add_sample_gradient(x, i, out);
        }
        Ok(())
    }
}

/// Parameters of the planted sparse PCA generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpcaSynthConfig {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    /// Nonzeros per planted loading.
    pub support: usize,
    /// Variance of the leading component; later ones decay linearly to half.
    pub signal: f64,
    pub noise: f64,
    pub mu: f64,
}

impl Default for SpcaSynthConfig {
    fn default() -> Self {
        Self { n: 500, d: 50, r: 5, support: 8, signal: 4.0, noise: 0.3, mu: 0.2 }
    }
}

impl SpcaSynthConfig {
    fn component_variance(&self, k: usize) -> f64 {
        if self.r <= 1 {
            return self.signal;
        }
        self.signal * (1.0 - 0.5 * k as f64 / (self.r - 1) as f64)
    }

    /// Sparse orthonormal `d × r` loadings with disjoint random supports.
    pub fn loadings(&self, rng: &mut impl Rng) -> Result<Mat> {
        if self.support == 0 || self.support * self.r > self.d {
            return Err(Error::Parameter(format!(
                "need 1 <= support*r <= d, got support={} r={} d={}",
                self.support, self.r, self.d
            )));
        }
        let mut rows: Vec<usize> = (0..self.d).collect();
        rows.shuffle(rng);
        let scale = 1.0 / (self.support as f64).sqrt();
        let mut l = Mat::zeros(self.d, self.r);
        for k in 0..self.r {
            for &i in &rows[k * self.support..(k + 1) * self.support] {
                l[(i, k)] = if rng.random::<bool>() { scale } else { -scale };
            }
        }
        Ok(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{project_matrix, random_point, random_tangent_with, StiefelPoint};
    use crate::problems::full_gradient;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (SparsePcaProblem, StiefelPoint) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SpcaSynthConfig { n: 40, d: 12, r: 3, support: 3, ..Default::default() };
        (SparsePcaProblem::synthetic(&cfg, &mut rng).unwrap(), random_point(12, 3, 4).unwrap())
    }

    #[test]
    fn exact_subspace_has_zero_loss() {
        let x = random_point(6, 2, 1).unwrap();
        let coeffs = gaussian_matrix(10, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let data = coeffs * x.matrix().transpose();
        let p = SparsePcaProblem::new(data, 2, 0.0).unwrap();
        assert!(p.loss(x.matrix()).unwrap() <= 1e-12);
    }

    #[test]
    fn orthogonal_sample_keeps_full_norm() {
        let x = StiefelPoint::stiefel(Mat::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        let p = SparsePcaProblem::new(Mat::from_row_slice(1, 3, &[0.0, 2.0, -1.0]), 1, 0.0).unwrap();
        assert_abs_diff_eq!(p.loss(x.matrix()).unwrap(), 5.0, epsilon = 1e-15);
        let g = p.sample_gradient(x.matrix(), 0).unwrap();
        assert!(project_matrix(&x, &g).norm() == 0.0);
    }

    #[test]
    fn loss_matches_literal_formula() {
        let (p, x) = small();
        let xm = x.matrix();
        let mut acc = 0.0;
        for i in 0..p.num_samples() {
            let z = p.data().row(i).transpose();
            let r = &z - xm * xm.transpose() * &z;
            acc += r.norm_squared();
        }
        let l1: f64 = xm.iter().map(|v| v.abs()).sum();
        let expected = acc / p.num_samples() as f64 + p.mu() * l1;
        assert!((p.loss(xm).unwrap() - expected).abs() <= 1e-12 * expected.max(1.0));
        assert!(p.smooth_loss(xm).unwrap() >= 0.0);
    }

    #[test]
    fn sample_gradient_passes_directional_finite_differences() {
        let (p, x) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for k in 0..20 {
            let i = k % p.num_samples();
            let g = p.sample_gradient(x.matrix(), i).unwrap();
            let dir = random_tangent_with(&x, &mut rng).unwrap();
            let plus = p.sample_smooth_loss(&(x.matrix() + dir.matrix() * h), i).unwrap();
            let minus = p.sample_smooth_loss(&(x.matrix() - dir.matrix() * h), i).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let an = g.dot(dir.matrix());
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-8), "{fd} vs {an}");
        }
    }

    #[test]
    fn gradient_conventions_agree_on_tangent_space() {
        let (p, x) = small();
        let xm = x.matrix();
        for i in 0..5 {
            let z = p.data().row(i).transpose();
            let g = p.sample_gradient(xm, i).unwrap();
            let ambient = &g + xm * xm.transpose() * &z * z.transpose() * xm * 2.0;
            let a = project_matrix(&x, &g);
            let b = project_matrix(&x, &ambient);
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn full_gradient_is_mean_of_samples() {
        let (p, x) = small();
        let full = full_gradient(&p, x.matrix()).unwrap();
        let dense = p.data().transpose() * (p.data() * x.matrix()) * (-2.0 / p.num_samples() as f64);
        assert!((full - dense).norm() <= 1e-12);
        let online = p.clone().with_mode(SampleMode::Online);
        assert!(matches!(full_gradient(&online, x.matrix()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn planted_loadings_are_orthonormal_and_sparse() {
        let cfg = SpcaSynthConfig::default();
        let l = cfg.loadings(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((l.tr_mul(&l) - Mat::identity(cfg.r, cfg.r)).norm() <= 1e-14);
        assert_eq!(l.iter().filter(|v| **v != 0.0).count(), cfg.r * cfg.support);
    }
}
