//! MLE and MAP estimation of the concentration volume, exact dense posteriors
//! for small grids, and the hyperparameter posterior over `(τ, λ)`.

pub mod cg;
pub mod exact;
pub mod hyper;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::phantom::NoiseModel;
use crate::phase::PhaseOperator;
use crate::priors::PrecisionOperator;

pub use cg::{conjugate_gradient, conjugate_gradient_preconditioned, CgOptions, CgSolution};
pub use exact::{dense_posterior, log_marginal_likelihood, DensePosterior, ExactContext};
pub use hyper::GridPoint;
pub use hyper::{estimate_small_image, hyperparameter_posterior, HyperPriorSpec, PosteriorSummary};

/// How the magnitude variances are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `ξ_var · c_m² + σ_m²`, using the observation in place of the truth.
    #[default]
    PlugIn,
    /// `ξ_var · c² + σ_m²` with the true volume; for oracle studies only.
    TruthSigma,
}

/// Diagonal observation covariances `Σ_m` (mM²) and `Σ_φ` (rad²).
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationNoise {
    sigma_m2: Vec<f64>,
    sigma_phi2: Vec<f64>,
}

impl ObservationNoise {
    pub fn new(sigma_m2: Vec<f64>, sigma_phi2: Vec<f64>) -> Result<Self> {
        if sigma_m2.len() != sigma_phi2.len() {
            return Err(Error::DimensionMismatch(format!(
                "magnitude variances for {} voxels, phase variances for {}",
                sigma_m2.len(),
                sigma_phi2.len()
            )));
        }
        for (name, v) in [("magnitude", &sigma_m2), ("phase", &sigma_phi2)] {
            if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::Domain(format!(
                    "{name} variance must be positive and finite, got {bad}"
                )));
            }
        }
        Ok(ObservationNoise {
            sigma_m2,
            sigma_phi2,
        })
    }

    pub fn uniform(n: usize, sigma_m2: f64, sigma_phi2: f64) -> Result<Self> {
        Self::new(vec![sigma_m2; n], vec![sigma_phi2; n])
    }

    pub fn plug_in(c_m: &Volume, noise: &NoiseModel) -> Result<Self> {
        Self::from_reference(c_m, noise)
    }

    pub fn from_truth(c: &Volume, noise: &NoiseModel) -> Result<Self> {
        Self::from_reference(c, noise)
    }

    fn from_reference(reference: &Volume, noise: &NoiseModel) -> Result<Self> {
        noise.validate()?;
        let sm2 = noise.sigma_m().powi(2);
        let sp2 = noise.sigma_phi().powi(2);
        Self::new(
            reference
                .values()
                .iter()
                .map(|c| noise.xi_variance * c * c + sm2)
                .collect(),
            vec![sp2; reference.len()],
        )
    }

    pub fn for_mode(
        mode: SigmaMode,
        c_m: &Volume,
        truth: Option<&Volume>,
        noise: &NoiseModel,
    ) -> Result<Self> {
        match mode {
            SigmaMode::PlugIn => Self::plug_in(c_m, noise),
            SigmaMode::TruthSigma => {
                let truth = truth.ok_or_else(|| {
                    Error::Config("truth-sigma mode needs the true volume".into())
                })?;
                Self::from_truth(truth, noise)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.sigma_m2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_m2.is_empty()
    }

    pub fn sigma_m2(&self) -> &[f64] {
        &self.sigma_m2
    }

    pub fn sigma_phi2(&self) -> &[f64] {
        &self.sigma_phi2
    }

    pub fn inv_m(&self) -> Vec<f64> {
        self.sigma_m2.iter().map(|v| 1.0 / v).collect()
    }

    pub fn inv_phi(&self) -> Vec<f64> {
        self.sigma_phi2.iter().map(|v| 1.0 / v).collect()
    }

    /// Returns the common phase precision when `Σ_φ` is a multiple of the identity.
    pub fn uniform_inv_phi(&self) -> Option<f64> {
        let first = *self.sigma_phi2.first()?;
        self.sigma_phi2
            .iter()
            .all(|&v| v == first)
            .then(|| 1.0 / first)
    }
}

/// The MAP normal-equation operator `Σ_m⁻¹ + Ψᵀ Σ_φ⁻¹ Ψ + Q`.
pub struct NormalOperator<'a> {
    psi: &'a PhaseOperator,
    inv_m: Vec<f64>,
    inv_phi: Vec<f64>,
    uniform_phi: Option<f64>,
    prior: Option<&'a PrecisionOperator>,
}

impl<'a> NormalOperator<'a> {
    pub fn new(
        psi: &'a PhaseOperator,
        noise: &ObservationNoise,
        prior: Option<&'a PrecisionOperator>,
    ) -> Result<Self> {
        let n = psi.dims().len();
        if noise.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "noise for {} voxels on a grid of {n}",
                noise.len()
            )));
        }
        if let Some(q) = prior {
            if q.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "precision of size {} on a grid of {n}",
                    q.len()
                )));
            }
        }
        Ok(NormalOperator {
            psi,
            inv_m: noise.inv_m(),
            inv_phi: noise.inv_phi(),
            uniform_phi: noise.uniform_inv_phi(),
            prior,
        })
    }

    pub fn len(&self) -> usize {
        self.inv_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_m.is_empty()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.len();
        let mut t = vec![0.0; n];
        match self.uniform_phi {
            // Ψ is self-adjoint, so ΨᵀsΨ = sΨ² costs one filter pass.
            Some(s) => {
                self.psi.apply_squared_into(x, &mut t);
                t.iter_mut().for_each(|v| *v *= s);
            }
            None => {
                let mut u = vec![0.0; n];
                self.psi.apply_into(x, &mut u);
                u.iter_mut().zip(&self.inv_phi).for_each(|(u, w)| *u *= w);
                self.psi.apply_into(&u, &mut t);
            }
        }
        if let Some(q) = self.prior {
            q.matvec(x, y);
        } else {
            y.iter_mut().for_each(|v| *v = 0.0);
        }
        for i in 0..n {
            y[i] += self.inv_m[i] * x[i] + t[i];
        }
    }

    /// `Σ_m⁻¹ c_m + Ψᵀ Σ_φ⁻¹ Δφ`.
    pub fn rhs(&self, c_m: &[f64], dphi: &[f64]) -> Vec<f64> {
        let weighted: Vec<f64> = dphi.iter().zip(&self.inv_phi).map(|(d, w)| d * w).collect();
        let mut out = vec![0.0; self.len()];
        self.psi.apply_into(&weighted, &mut out);
        for i in 0..out.len() {
            out[i] += self.inv_m[i] * c_m[i];
        }
        out
    }

    /// Jacobi preconditioner: `diag(Σ_m⁻¹ + Q)` plus the mean diagonal of
    /// `Ψᵀ Σ_φ⁻¹ Ψ`, which is `mean(Σ_φ⁻¹) · mean(G²)` by Parseval.
    pub fn preconditioner(&self) -> Vec<f64> {
        let mean_phi = self.inv_phi.iter().sum::<f64>() / self.len().max(1) as f64;
        let psi_diag = mean_phi * self.psi.kernel().mean_square();
        let mut d: Vec<f64> = self.inv_m.iter().map(|v| v + psi_diag).collect();
        if let Some(q) = self.prior {
            d.iter_mut().zip(q.diagonal()).for_each(|(d, q)| *d += q);
        }
        d
    }

    /// Objective `(c_m−c)ᵀΣ_m⁻¹(c_m−c) + (Δφ−Ψc)ᵀΣ_φ⁻¹(Δφ−Ψc) + cᵀQc`.
    pub fn objective(&self, c: &[f64], c_m: &[f64], dphi: &[f64]) -> f64 {
        let n = self.len();
        let mut psi_c = vec![0.0; n];
        self.psi.apply_into(c, &mut psi_c);
        let mut total = 0.0;
        for i in 0..n {
            let rm = c_m[i] - c[i];
            let rp = dphi[i] - psi_c[i];
            total += rm * rm * self.inv_m[i] + rp * rp * self.inv_phi[i];
        }
        if let Some(q) = self.prior {
            total += q.quadratic_form(c);
        }
        total
    }

    /// Gradient of [`Self::objective`]: `2 (A c − rhs)`.
    pub fn gradient(&self, c: &[f64], c_m: &[f64], dphi: &[f64]) -> Vec<f64> {
        let mut ac = vec![0.0; self.len()];
        self.apply(c, &mut ac);
        let b = self.rhs(c_m, dphi);
        ac.iter().zip(&b).map(|(a, b)| 2.0 * (a - b)).collect()
    }
}

/// A point estimate with solver diagnostics.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub volume: Volume,
    pub iterations: usize,
    pub relative_residual: f64,
    /// Fraction of voxels with a negative estimate (reported, not enforced).
    pub negative_fraction: f64,
}

fn check_inputs(c_m: &Volume, dphi: &Volume, psi: &PhaseOperator) -> Result<()> {
    c_m.check_same_grid(dphi)?;
    if !c_m.dims().same_shape(psi.dims()) {
        return Err(Error::DimensionMismatch(format!(
            "volumes on {} but phase operator on {}",
            c_m.dims(),
            psi.dims()
        )));
    }
    Ok(())
}

fn solve(
    c_m: &Volume,
    dphi: &Volume,
    noise: &ObservationNoise,
    psi: &PhaseOperator,
    prior: Option<&PrecisionOperator>,
    opts: &CgOptions,
) -> Result<Estimate> {
    check_inputs(c_m, dphi, psi)?;
    let op = NormalOperator::new(psi, noise, prior)?;
    let b = op.rhs(c_m.values(), dphi.values());
    let diag = op.preconditioner();
    let sol = conjugate_gradient_preconditioned(|x, y| op.apply(x, y), &b, Some(&diag), opts)?;
    let negative = sol.x.iter().filter(|&&v| v < 0.0).count();
    Ok(Estimate {
        negative_fraction: negative as f64 / sol.x.len().max(1) as f64,
        volume: Volume::new(*c_m.dims(), sol.x)?,
        iterations: sol.iterations,
        relative_residual: sol.relative_residual,
    })
}

/// Model-I maximum likelihood estimate by CG on the normal equations.
pub fn mle_estimate(
    c_m: &Volume,
    dphi: &Volume,
    noise: &ObservationNoise,
    psi: &PhaseOperator,
    opts: &CgOptions,
) -> Result<Estimate> {
    solve(c_m, dphi, noise, psi, None, opts)
}

/// MAP estimate under a GMRF prior with precision `q`.
pub fn map_estimate(
    c_m: &Volume,
    dphi: &Volume,
    noise: &ObservationNoise,
    psi: &PhaseOperator,
    q: &PrecisionOperator,
    opts: &CgOptions,
) -> Result<Estimate> {
    solve(c_m, dphi, noise, psi, Some(q), opts)
}
