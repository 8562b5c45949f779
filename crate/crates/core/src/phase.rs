//! The phase forward operator: a circular convolution applied in k-space.
//!
//! A concentration volume `c` produces the phase shift `F⁻¹(G · F(c))`, where
//! `G` is the susceptibility dipole kernel `ψ₀ (1/3 − k_z²/|k|²)` with
//! `G(0) = 0`. The operator is real, symmetric and singular.

use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{GridDims, Volume};

/// Largest grid for which the dense operator matrix is materialized.
pub const DENSE_LIMIT: usize = 4096;

/// Signed DFT frequency of bin `i` on an axis of length `n`, in cycles per voxel.
#[inline]
pub fn dft_frequency(i: usize, n: usize) -> f64 {
    let signed = if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    signed / n as f64
}

#[derive(Clone, Debug)]
pub struct DipoleKernel {
    dims: GridDims,
    values: Vec<f64>,
    psi0: f64,
}

impl DipoleKernel {
    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    /// Kernel samples on the DFT grid, x-fastest like volumes.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn psi0(&self) -> f64 {
        self.psi0
    }

    /// Kernel value at DFT bin `(i, j, k)`.
    pub fn at(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        Ok(self.values[self.dims.linear_index(i, j, k)?])
    }

    /// Mean of `G²`, which is also every diagonal entry of `Ψ²`.
    pub fn mean_square(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>() / self.values.len() as f64
    }

    /// True when `G(k) == G(-k)` for every bin.
    pub fn is_symmetric(&self) -> bool {
        let d = &self.dims;
        (0..d.len()).all(|idx| {
            let (i, j, k) = d.coords_unchecked(idx);
            let mirror = d.index_unchecked((d.nx - i) % d.nx, (d.ny - j) % d.ny, (d.nz - k) % d.nz);
            self.values[idx] == self.values[mirror]
        })
    }
}

pub fn build_dipole_kernel(dims: GridDims, psi0: f64) -> Result<DipoleKernel> {
    dims.validate()?;
    if !psi0.is_finite() {
        return Err(Error::Config(format!("psi0 must be finite, got {psi0}")));
    }
    let mut values = Vec::with_capacity(dims.len());
    for k in 0..dims.nz {
        let kz = dft_frequency(k, dims.nz);
        for j in 0..dims.ny {
            let ky = dft_frequency(j, dims.ny);
            for i in 0..dims.nx {
                let kx = dft_frequency(i, dims.nx);
                let k2 = kx * kx + ky * ky + kz * kz;
                values.push(if k2 == 0.0 {
                    0.0
                } else {
                    psi0 * (1.0 / 3.0 - kz * kz / k2)
                });
            }
        }
    }
    Ok(DipoleKernel { dims, values, psi0 })
}

/// Forward/inverse 1-D plans for each axis. Scratch space is allocated per
/// call, so one plan set can be shared across threads.
#[derive(Clone)]
struct Fft3Plans {
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3Plans {
    fn new(dims: &GridDims) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = [
            planner.plan_fft_forward(dims.nx),
            planner.plan_fft_forward(dims.ny),
            planner.plan_fft_forward(dims.nz),
        ];
        let inv = [
            planner.plan_fft_inverse(dims.nx),
            planner.plan_fft_inverse(dims.ny),
            planner.plan_fft_inverse(dims.nz),
        ];
        Fft3Plans { fwd, inv }
    }

    /// Unnormalized in-place 3-D transform.
    fn transform(&self, dims: &GridDims, data: &mut [Complex64], inverse: bool) {
        let plans = if inverse { &self.inv } else { &self.fwd };
        let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
        let scratch_len = plans
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let mut scratch = vec![Complex64::default(); scratch_len];

        if nx > 1 {
            for row in data.chunks_exact_mut(nx) {
                plans[0].process_with_scratch(row, &mut scratch);
            }
        }
        if ny > 1 {
            let mut line = vec![Complex64::default(); ny];
            for k in 0..nz {
                for i in 0..nx {
                    let base = i + nx * ny * k;
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = data[base + nx * j];
                    }
                    plans[1].process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        data[base + nx * j] = *v;
                    }
                }
            }
        }
        if nz > 1 {
            let plane = nx * ny;
            let mut line = vec![Complex64::default(); nz];
            for base in 0..plane {
                for (k, v) in line.iter_mut().enumerate() {
                    *v = data[base + plane * k];
                }
                plans[2].process_with_scratch(&mut line, &mut scratch);
                for (k, v) in line.iter().enumerate() {
                    data[base + plane * k] = *v;
                }
            }
        }
    }
}

/// `Ψ`, applied through FFTs.
#[derive(Clone)]
pub struct PhaseOperator {
    kernel: DipoleKernel,
    squared: Vec<f64>,
    plans: Fft3Plans,
}

impl std::fmt::Debug for PhaseOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhaseOperator")
            .field("dims", &self.kernel.dims)
            .field("psi0", &self.kernel.psi0)
            .finish()
    }
}

impl PhaseOperator {
    pub fn new(kernel: DipoleKernel) -> Self {
        let plans = Fft3Plans::new(&kernel.dims);
        let squared = kernel.values.iter().map(|g| g * g).collect();
        PhaseOperator {
            kernel,
            squared,
            plans,
        }
    }

    pub fn for_grid(dims: GridDims, psi0: f64) -> Result<Self> {
        Ok(Self::new(build_dipole_kernel(dims, psi0)?))
    }

    pub fn dims(&self) -> &GridDims {
        &self.kernel.dims
    }

    pub fn kernel(&self) -> &DipoleKernel {
        &self.kernel
    }

    pub fn apply(&self, c: &Volume) -> Result<Volume> {
        self.check_dims(c.dims())?;
        let mut out = vec![0.0; c.len()];
        self.apply_into(c.values(), &mut out);
        Ok(Volume::from_vec_unchecked(*c.dims(), out))
    }

    /// `Ψ²x`, i.e. `ΨᵀΨx` since `Ψ` is symmetric, in a single k-space pass.
    pub fn apply_squared(&self, c: &Volume) -> Result<Volume> {
        self.check_dims(c.dims())?;
        let mut out = vec![0.0; c.len()];
        self.apply_squared_into(c.values(), &mut out);
        Ok(Volume::from_vec_unchecked(*c.dims(), out))
    }

    pub fn apply_into(&self, input: &[f64], out: &mut [f64]) {
        self.filter(input, out, &self.kernel.values);
    }

    pub fn apply_squared_into(&self, input: &[f64], out: &mut [f64]) {
        self.filter(input, out, &self.squared);
    }

    fn check_dims(&self, dims: &GridDims) -> Result<()> {
        if !dims.same_shape(&self.kernel.dims) {
            return Err(Error::DimensionMismatch(format!(
                "volume grid {} does not match operator grid {}",
                dims, self.kernel.dims
            )));
        }
        Ok(())
    }

    fn filter(&self, input: &[f64], out: &mut [f64], gain: &[f64]) {
        let dims = &self.kernel.dims;
        let n = dims.len();
        assert_eq!(input.len(), n, "input length does not match operator grid");
        assert_eq!(out.len(), n, "output length does not match operator grid");

        // gain(0) = 0: the mean carries no signal, and removing it here keeps
        // constant volumes exactly in the null space.
        let mean = input.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex64> = input
            .iter()
            .map(|&v| Complex64::new(v - mean, 0.0))
            .collect();
        self.plans.transform(dims, &mut buf, false);
        for (z, &g) in buf.iter_mut().zip(gain) {
            *z *= g;
        }
        self.plans.transform(dims, &mut buf, true);

        let scale = 1.0 / n as f64;
        let mut imag_sq = 0.0;
        let mut real_sq = 0.0;
        for (o, z) in out.iter_mut().zip(&buf) {
            *o = z.re * scale;
            real_sq += *o * *o;
            imag_sq += (z.im * scale).powi(2);
        }
        let in_norm = input.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let gmax = gain.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(
            imag_sq.sqrt() <= 1e-8 * real_sq.sqrt() + 1e-12 * gmax * in_norm,
            "imaginary residue {} too large for real output norm {}",
            imag_sq.sqrt(),
            real_sq.sqrt()
        );
    }
}

/// Materializes `Ψ` column by column (`column j = Ψ e_j`).
pub fn dense_psi_matrix(op: &PhaseOperator) -> Result<Mat<f64>> {
    let n = op.dims().len();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: DENSE_LIMIT,
        });
    }
    let mut mat = Mat::<f64>::zeros(n, n);
    let mut basis = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        basis[j] = 1.0;
        op.apply_into(&basis, &mut col);
        basis[j] = 0.0;
        for (i, v) in col.iter().enumerate() {
            mat[(i, j)] = *v;
        }
    }
    Ok(mat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: GridDims, rng: &mut ChaCha8Rng) -> Volume {
        Volume::new(
            dims,
            (0..dims.len())
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn kernel_examples() {
        let dims = GridDims::cube(8).unwrap();
        let g = build_dipole_kernel(dims, 1.0).unwrap();
        assert_eq!(g.at(0, 0, 0).unwrap(), 0.0);
        assert!((g.at(0, 0, 3).unwrap() + 2.0 / 3.0).abs() < 1e-15);
        assert!((g.at(2, 5, 0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(g.is_symmetric());
        let odd = build_dipole_kernel(GridDims::new(5, 6, 7).unwrap(), 2.5).unwrap();
        assert!(odd.is_symmetric());
        assert!(build_dipole_kernel(dims, f64::NAN).is_err());
    }

    #[test]
    fn zero_and_constant_inputs_vanish() {
        let dims = GridDims::new(10, 10, 10).unwrap();
        let op = PhaseOperator::for_grid(dims, 1.0).unwrap();
        assert!(op
            .apply(&Volume::zeros(dims))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(op
            .apply(&Volume::constant(dims, 1.0))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(op
            .apply(&Volume::constant(dims, 2.5))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn output_sums_to_zero() {
        let dims = GridDims::new(6, 5, 4).unwrap();
        let op = PhaseOperator::for_grid(dims, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = op.apply(&random_volume(dims, &mut rng)).unwrap();
        assert!(out.sum().abs() < 1e-12);
    }

    #[test]
    fn dims_mismatch() {
        let op = PhaseOperator::for_grid(GridDims::cube(4).unwrap(), 1.0).unwrap();
        assert!(matches!(
            op.apply(&Volume::zeros(GridDims::cube(3).unwrap())),
            Err(Error::DimensionMismatch(_))
        ));
    }

    /// Direct O(N²) DFT convolution, independent of the FFT path.
    fn naive_apply(kernel: &DipoleKernel, c: &[f64]) -> Vec<f64> {
        let d = kernel.dims();
        let n = d.len();
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut spectrum = vec![Complex64::default(); n];
        for (kidx, s) in spectrum.iter_mut().enumerate() {
            let (p, q, r) = d.coords_unchecked(kidx);
            for (xidx, &v) in c.iter().enumerate() {
                let (i, j, k) = d.coords_unchecked(xidx);
                let phase = -two_pi
                    * ((p * i) as f64 / d.nx as f64
                        + (q * j) as f64 / d.ny as f64
                        + (r * k) as f64 / d.nz as f64);
                *s += Complex64::from_polar(v, phase);
            }
            *s *= kernel.values()[kidx];
        }
        (0..n)
            .map(|xidx| {
                let (i, j, k) = d.coords_unchecked(xidx);
                let mut acc = Complex64::default();
                for (kidx, s) in spectrum.iter().enumerate() {
                    let (p, q, r) = d.coords_unchecked(kidx);
                    let phase = two_pi
                        * ((p * i) as f64 / d.nx as f64
                            + (q * j) as f64 / d.ny as f64
                            + (r * k) as f64 / d.nz as f64);
                    acc += s * Complex64::from_polar(1.0, phase);
                }
                acc.re / n as f64
            })
            .collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for dims in [GridDims::new(3, 4, 5).unwrap(), GridDims::cube(4).unwrap()] {
            let op = PhaseOperator::for_grid(dims, 1.3).unwrap();
            let c = random_volume(dims, &mut rng);
            let fast = op.apply(&c).unwrap();
            let slow = naive_apply(op.kernel(), c.values());
            let err: f64 = fast
                .values()
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-10 * fast.norm(), "err {err}");
        }
    }

    #[test]
    fn dense_matrix_properties() {
        let op = PhaseOperator::for_grid(GridDims::cube(2).unwrap(), 1.0).unwrap();
        let m = dense_psi_matrix(&op).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (8, 8));
        for i in 0..8 {
            let row_sum: f64 = (0..8).map(|j| m[(i, j)]).sum();
            assert!(row_sum.abs() < 1e-14);
            for j in 0..8 {
                assert!((m[(i, j)] - m[(j, i)]).abs() < 1e-12);
            }
        }
        let big = PhaseOperator::for_grid(GridDims::cube(17).unwrap(), 1.0).unwrap();
        assert!(matches!(
            dense_psi_matrix(&big),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn squared_matches_double_application() {
        let dims = GridDims::new(5, 6, 4).unwrap();
        let op = PhaseOperator::for_grid(dims, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_volume(dims, &mut rng);
        let twice = op.apply(&op.apply(&c).unwrap()).unwrap();
        let once = op.apply_squared(&c).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = dense_psi_matrix(&op).unwrap();
        let m2 = &m * &m;
        assert!((m2[(7, 7)] - op.kernel().mean_square()).abs() < 1e-12);
    }
}
