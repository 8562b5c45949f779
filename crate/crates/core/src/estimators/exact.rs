//! Exact Gaussian inference by dense linear algebra on small grids.
//!
//! The Besag prior is improper: its precision `τ(D − A)` has one null
//! direction per connected component. Those directions (per-component
//! constants) carry a flat prior, the rest of the field follows the
//! sum-to-zero-constrained intrinsic model, and normalizing constants use
//! the generalized determinant over the nonzero Laplacian eigenvalues.

use std::f64::consts::PI;

use faer::{Mat, Side};

use super::ObservationNoise;
use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::phase::{dense_psi_matrix, PhaseOperator, DENSE_LIMIT};
use crate::priors::{laplacian_spectrum, PriorKind, SpatialPrior, Theta};

/// Posterior mean and per-voxel posterior variances at a fixed `θ`.
#[derive(Clone, Debug)]
pub struct DensePosterior {
    pub mean: Volume,
    pub variance: Vec<f64>,
}

/// Dense `Ψ`, the Laplacian spectrum and the null-space dimension of a prior,
/// shared by every time point and `θ` evaluated on one grid.
#[derive(Clone, Debug)]
pub struct ExactContext {
    pub(crate) prior: SpatialPrior,
    pub(crate) psi: Mat<f64>,
    pub(crate) spectrum: Vec<f64>,
    pub(crate) null_dim: usize,
    dims: crate::grid::GridDims,
}

impl ExactContext {
    pub fn new(psi: &PhaseOperator, prior: SpatialPrior) -> Result<Self> {
        let n = psi.dims().len();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge {
                n,
                limit: DENSE_LIMIT,
            });
        }
        if prior.graph.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "prior graph of {} voxels for a grid of {n}",
                prior.graph.len()
            )));
        }
        let null_dim = match prior.kind {
            PriorKind::Besag => prior.graph.components().1,
            PriorKind::Leroux => usize::from(prior.intercept),
        };
        Ok(ExactContext {
            psi: dense_psi_matrix(psi)?,
            spectrum: laplacian_spectrum(&prior.graph)?,
            null_dim,
            prior,
            dims: *psi.dims(),
        })
    }

    pub fn prior(&self) -> &SpatialPrior {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.psi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.nrows() == 0
    }

    /// Rank deficiency of the prior precision (0 for zero-mean Leroux).
    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    pub fn laplacian_spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub(crate) fn check(
        &self,
        c_m: &Volume,
        dphi: &Volume,
        noise: &ObservationNoise,
    ) -> Result<()> {
        c_m.check_same_grid(dphi)?;
        if !c_m.dims().same_shape(&self.dims) {
            return Err(Error::DimensionMismatch(format!(
                "volumes on {} but context on {}",
                c_m.dims(),
                self.dims
            )));
        }
        if noise.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "noise for {} voxels on a grid of {}",
                noise.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `Σ_m⁻¹ + Ψᵀ Σ_φ⁻¹ Ψ`, formed densely.
    pub fn data_precision(&self, noise: &ObservationNoise) -> Mat<f64> {
        let n = self.len();
        let inv_phi = noise.inv_phi();
        let weighted = Mat::<f64>::from_fn(n, n, |i, j| inv_phi[i] * self.psi[(i, j)]);
        let mut h = self.psi.transpose() * &weighted;
        for (i, w) in noise.inv_m().iter().enumerate() {
            h[(i, i)] += w;
        }
        symmetrize(&mut h);
        h
    }

    /// `Σ_m⁻¹ c_m + Ψᵀ Σ_φ⁻¹ Δφ`.
    pub fn rhs(&self, c_m: &Volume, dphi: &Volume, noise: &ObservationNoise) -> Vec<f64> {
        let n = self.len();
        let inv_m = noise.inv_m();
        let inv_phi = noise.inv_phi();
        (0..n)
            .map(|j| {
                let phase: f64 = (0..n)
                    .map(|i| self.psi[(i, j)] * inv_phi[i] * dphi.values()[i])
                    .sum();
                inv_m[j] * c_m.values()[j] + phase
            })
            .collect()
    }

    /// `log det Q(θ)`, generalized to the nonzero spectrum for Besag.
    pub fn prior_log_det(&self, theta: Theta) -> Result<f64> {
        check_theta(self.prior.kind, theta)?;
        let n = self.len() as f64;
        let tau_ln = theta.tau.ln();
        Ok(match self.prior.kind {
            PriorKind::Besag => {
                let rank = self.len() - self.null_dim;
                rank as f64 * tau_ln
                    + self.spectrum[self.null_dim..]
                        .iter()
                        .map(|r| r.ln())
                        .sum::<f64>()
            }
            PriorKind::Leroux => {
                let l = theta.lambda;
                let full = self
                    .spectrum
                    .iter()
                    .map(|r| (1.0 - l + l * r.max(0.0)).ln())
                    .sum::<f64>();
                if self.prior.intercept {
                    // The constant vector sits in the Laplacian null space and
                    // loses its (1 − λ) eigenvalue.
                    (n - 1.0) * tau_ln + full - (1.0 - l).ln()
                } else {
                    n * tau_ln + full
                }
            }
        })
    }

    /// Observation-only terms `yᵀΣ⁻¹y` and `log det Σ`.
    pub(crate) fn observation_terms(
        c_m: &Volume,
        dphi: &Volume,
        noise: &ObservationNoise,
    ) -> (f64, f64) {
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for i in 0..noise.len() {
            let (sm, sp) = (noise.sigma_m2()[i], noise.sigma_phi2()[i]);
            quad += c_m.values()[i].powi(2) / sm + dphi.values()[i].powi(2) / sp;
            logdet += sm.ln() + sp.ln();
        }
        (quad, logdet)
    }

    /// Gaussian normalizing constant: `−½ (n_obs − null_dim) ln 2π`.
    pub(crate) fn log_two_pi_term(&self) -> f64 {
        let n_obs = 2 * self.len();
        -0.5 * (n_obs - self.null_dim) as f64 * (2.0 * PI).ln()
    }

    fn posterior_factor(
        &self,
        noise: &ObservationNoise,
        theta: Theta,
    ) -> Result<faer::linalg::solvers::Llt<f64>> {
        let q = self.prior.precision(theta)?.to_dense()?;
        let q_post = self.data_precision(noise) + q;
        q_post
            .llt(Side::Lower)
            .map_err(|e| Error::Factorization(format!("posterior precision: {e:?}")))
    }

    pub fn dense_posterior(
        &self,
        c_m: &Volume,
        dphi: &Volume,
        noise: &ObservationNoise,
        theta: Theta,
    ) -> Result<DensePosterior> {
        self.check(c_m, dphi, noise)?;
        check_theta(self.prior.kind, theta)?;
        let llt = self.posterior_factor(noise, theta)?;
        let n = self.len();
        let b = self.rhs(c_m, dphi, noise);
        let mean = cholesky_solve(llt.L(), &b);
        let mut linv = Mat::<f64>::zeros(n, n);
        faer::linalg::triangular_inverse::invert_lower_triangular(
            linv.as_mut(),
            llt.L(),
            faer::Par::Seq,
        );
        // diag(Q_post⁻¹)_j = Σ_k (L⁻¹)_{kj}².
        let variance = (0..n)
            .map(|j| (j..n).map(|k| linv[(k, j)].powi(2)).sum())
            .collect();
        Ok(DensePosterior {
            mean: Volume::new(*c_m.dims(), mean)?,
            variance,
        })
    }

    pub fn log_marginal_likelihood(
        &self,
        c_m: &Volume,
        dphi: &Volume,
        noise: &ObservationNoise,
        theta: Theta,
    ) -> Result<f64> {
        self.check(c_m, dphi, noise)?;
        let log_det_q = self.prior_log_det(theta)?;
        let llt = self.posterior_factor(noise, theta)?;
        let l = llt.L();
        let log_det_post: f64 = 2.0 * (0..self.len()).map(|i| l[(i, i)].ln()).sum::<f64>();
        let b = self.rhs(c_m, dphi, noise);
        let mu = cholesky_solve(l, &b);
        let fit: f64 = b.iter().zip(&mu).map(|(b, m)| b * m).sum();
        let (yy, log_det_sigma) = Self::observation_terms(c_m, dphi, noise);
        let value =
            0.5 * (log_det_q - log_det_post + fit - yy - log_det_sigma) + self.log_two_pi_term();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "log marginal likelihood is {value}"
            )));
        }
        Ok(value)
    }
}

pub(crate) fn check_theta(kind: PriorKind, theta: Theta) -> Result<()> {
    if !(theta.tau.is_finite() && theta.tau > 0.0) {
        return Err(Error::Domain(format!(
            "tau must be positive and finite, got {}",
            theta.tau
        )));
    }
    if kind == PriorKind::Leroux && !(theta.lambda > 0.0 && theta.lambda < 1.0) {
        return Err(Error::Domain(format!(
            "lambda must lie in (0, 1), got {}",
            theta.lambda
        )));
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Solves `L Lᵀ x = b` for lower-triangular `L`.
pub(crate) fn cholesky_solve(l: faer::MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, x.as_mut(), faer::Par::Seq);
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(
        l.transpose(),
        x.as_mut(),
        faer::Par::Seq,
    );
    (0..n).map(|i| x[(i, 0)]).collect()
}

/// Exact posterior at `θ`; builds a one-off [`ExactContext`].
pub fn dense_posterior(
    c_m: &Volume,
    dphi: &Volume,
    noise: &ObservationNoise,
    psi: &PhaseOperator,
    prior: &SpatialPrior,
    theta: Theta,
) -> Result<DensePosterior> {
    ExactContext::new(psi, prior.clone())?.dense_posterior(c_m, dphi, noise, theta)
}

/// `log p(c_m, Δφ | θ)`; builds a one-off [`ExactContext`].
pub fn log_marginal_likelihood(
    c_m: &Volume,
    dphi: &Volume,
    noise: &ObservationNoise,
    psi: &PhaseOperator,
    prior: &SpatialPrior,
    theta: Theta,
) -> Result<f64> {
    ExactContext::new(psi, prior.clone())?.log_marginal_likelihood(c_m, dphi, noise, theta)
}
