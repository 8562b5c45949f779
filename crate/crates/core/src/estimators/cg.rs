//! Linear conjugate gradient for matrix-free symmetric positive definite systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub max_iterations: usize,
    /// Stop once `‖b − A x‖ / ‖b‖` falls to this value.
    pub tolerance: f64,
    /// Use the Jacobi (diagonal) preconditioner when one is supplied.
    pub preconditioner: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            max_iterations: 2000,
            tolerance: 1e-8,
            preconditioner: true,
        }
    }
}

impl CgOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        CgOptions {
            tolerance,
            ..CgOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "CG tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("CG needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unpreconditioned CG from a zero initial guess.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], opts: &CgOptions) -> Result<CgSolution>
where
    F: FnMut(&[f64], &mut [f64]),
{
    conjugate_gradient_preconditioned(apply, b, None, opts)
}

/// CG with an optional Jacobi preconditioner given as the diagonal of `A`.
///
/// Errors with [`Error::Indefinite`] when a search direction has
/// nonpositive curvature, and with [`Error::NotConverged`] (carrying the
/// lowest-residual iterate) when the iteration budget runs out.
pub fn conjugate_gradient_preconditioned<F>(
    mut apply: F,
    b: &[f64],
    diagonal: Option<&[f64]>,
    opts: &CgOptions,
) -> Result<CgSolution>
where
    F: FnMut(&[f64], &mut [f64]),
{
    opts.validate()?;
    let n = b.len();
    let inv_diag: Option<Vec<f64>> = match diagonal {
        Some(d) if opts.preconditioner => {
            if d.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "preconditioner of length {} for a system of size {n}",
                    d.len()
                )));
            }
            Some(
                d.iter()
                    .map(|&v| {
                        if v > 0.0 && v.is_finite() {
                            1.0 / v
                        } else {
                            1.0
                        }
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    let precondition = |r: &[f64], z: &mut [f64]| match &inv_diag {
        Some(m) => z
            .iter_mut()
            .zip(r.iter().zip(m))
            .for_each(|(z, (r, m))| *z = r * m),
        None => z.copy_from_slice(r),
    };

    let b_norm = dot(b, b).sqrt();
    if !b_norm.is_finite() {
        return Err(Error::NonFinite("right-hand side".into()));
    }
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut best = (1.0, x.clone());

    for iteration in 0..opts.max_iterations {
        apply(&p, &mut ap);
        let curvature = dot(&p, &ap);
        // Also catches a NaN curvature.
        if curvature.is_nan() || curvature <= 0.0 {
            return Err(Error::Indefinite {
                iteration,
                curvature,
            });
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let residual = dot(&r, &r).sqrt() / b_norm;
        if !residual.is_finite() {
            return Err(Error::NonFinite(format!(
                "CG residual at iteration {iteration}"
            )));
        }
        if residual <= opts.tolerance {
            return Ok(CgSolution {
                x,
                iterations: iteration + 1,
                relative_residual: residual,
            });
        }
        if residual < best.0 {
            best = (residual, x.clone());
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iterations,
        residual: best.0,
        best: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_apply(a: &[Vec<f64>]) -> impl FnMut(&[f64], &mut [f64]) + '_ {
        move |x, y| {
            for (row, yi) in a.iter().zip(y.iter_mut()) {
                *yi = dot(row, x);
            }
        }
    }

    #[test]
    fn identity_converges_in_one_step() {
        let b = vec![3.0, -1.0, 0.5, 7.0];
        let sol =
            conjugate_gradient(|x, y| y.copy_from_slice(x), &b, &CgOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.x, b);
    }

    #[test]
    fn diagonal_system() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let sol = conjugate_gradient(
            dense_apply(&a),
            &[1.0, 2.0],
            &CgOptions::with_tolerance(1e-14),
        )
        .unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-14 && (sol.x[1] - 1.0).abs() < 1e-14);
        let pre = conjugate_gradient_preconditioned(
            dense_apply(&a),
            &[1.0, 2.0],
            Some(&[1.0, 2.0]),
            &CgOptions::default(),
        )
        .unwrap();
        assert_eq!(pre.iterations, 1);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let sol = conjugate_gradient(
            |x, y| y.copy_from_slice(x),
            &[0.0; 5],
            &CgOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indefinite_operator_is_reported() {
        let a = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        let err =
            conjugate_gradient(dense_apply(&a), &[0.0, 1.0], &CgOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Indefinite { iteration: 0, .. }));
    }

    #[test]
    fn budget_exhaustion_carries_best_iterate() {
        let n = 30;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { (i + 1) as f64 * 10.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let b = vec![1.0; n];
        let opts = CgOptions {
            max_iterations: 3,
            tolerance: 1e-12,
            preconditioner: false,
        };
        match conjugate_gradient(dense_apply(&a), &b, &opts).unwrap_err() {
            Error::NotConverged {
                iterations,
                residual,
                best,
            } => {
                assert_eq!(iterations, 3);
                assert!(residual < 1.0);
                assert_eq!(best.len(), n);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_options() {
        let opts = CgOptions {
            tolerance: 0.0,
            ..CgOptions::default()
        };
        assert!(conjugate_gradient(|x, y| y.copy_from_slice(x), &[1.0], &opts).is_err());
        let opts = CgOptions {
            max_iterations: 0,
            ..CgOptions::default()
        };
        assert!(conjugate_gradient(|x, y| y.copy_from_slice(x), &[1.0], &opts).is_err());
    }
}
