//! Besag and Leroux Gaussian Markov random field priors on the voxel graph.
//!
//! With `D` the degree matrix and `A` the 0/1 adjacency, the Besag structure
//! matrix `D(I − W)` (row-normalized `W`) is the graph Laplacian `R = D − A`.
//!
//! * Besag: `Q = τ R`, intrinsic (rank `N − #components`).
//! * Leroux: `Q = τ((1 − λ) I + λ R)`, positive definite for `λ ∈ (0, 1)`.

use std::sync::Arc;

use faer::Mat;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDims, TissueMap, Volume};
use crate::phase::DENSE_LIMIT;

/// First-order (6-connected) neighbor graph in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    dims: GridDims,
    offsets: Vec<usize>,
    adjacency: Vec<u32>,
    restricted: bool,
}

impl NeighborGraph {
    pub fn build(dims: GridDims, tissue: Option<&TissueMap>) -> Result<Self> {
        dims.validate()?;
        if let Some(t) = tissue {
            if !t.dims().same_shape(&dims) {
                return Err(Error::DimensionMismatch(format!(
                    "tissue map {} does not match grid {}",
                    t.dims(),
                    dims
                )));
            }
        }
        let n = dims.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut adjacency = Vec::with_capacity(6 * n);
        offsets.push(0);
        for idx in 0..n {
            let (i, j, k) = dims.coords_unchecked(idx);
            dims.for_each_neighbor(i, j, k, |nb| {
                let keep = tissue.is_none_or(|t| t.labels()[nb] == t.labels()[idx]);
                if keep {
                    adjacency.push(nb as u32);
                }
            });
            offsets.push(adjacency.len());
        }
        Ok(NeighborGraph {
            dims,
            offsets,
            adjacency,
            restricted: tissue.is_some(),
        })
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_restricted(&self) -> bool {
        self.restricted
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.adjacency[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.degree(i)).collect()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.len() / 2
    }

    /// Connected-component label per voxel and the component count.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.len();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &nb in self.neighbors(v) {
                    let nb = nb as usize;
                    if label[nb] == usize::MAX {
                        label[nb] = count;
                        stack.push(nb);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// Dense graph Laplacian `D − A`.
    pub fn dense_laplacian(&self) -> Result<Mat<f64>> {
        let n = self.len();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge {
                n,
                limit: DENSE_LIMIT,
            });
        }
        let mut m = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.degree(i) as f64;
            for &j in self.neighbors(i) {
                m[(i, j as usize)] = -1.0;
            }
        }
        Ok(m)
    }

    /// `y = (D − A) x`.
    pub fn laplacian_apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let s: f64 = self.neighbors(i).iter().map(|&j| x[j as usize]).sum();
            *yi = self.degree(i) as f64 * x[i] - s;
        }
    }
}

/// Eigenvalues of the graph Laplacian, ascending, by dense decomposition.
pub fn laplacian_spectrum(graph: &NeighborGraph) -> Result<Vec<f64>> {
    let lap = graph.dense_laplacian()?;
    let mut ev = lap
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

#[derive(Clone, Debug)]
pub struct BesagModel {
    pub graph: Arc<NeighborGraph>,
    pub tau: f64,
}

impl BesagModel {
    /// Spatial dependence; identically 1 for the intrinsic model.
    pub const RHO: f64 = 1.0;
}

#[derive(Clone, Debug)]
pub struct LerouxModel {
    pub graph: Arc<NeighborGraph>,
    pub tau: f64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Besag,
    Leroux,
}

/// Hyperparameters `θ = (τ, λ)`; `λ` is ignored by the Besag prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub tau: f64,
    pub lambda: f64,
}

impl Theta {
    pub fn new(tau: f64, lambda: f64) -> Self {
        Theta { tau, lambda }
    }
}

/// A prior family over a fixed graph, parameterized by `θ`.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    pub kind: PriorKind,
    pub graph: Arc<NeighborGraph>,
    /// Leroux only: add a global mean with a flat prior. Integrating it out
    /// replaces `(1 − λ) I` by `(1 − λ)(I − 11ᵀ/N)`. Besag is already
    /// invariant to constants, so the flag changes nothing there.
    pub intercept: bool,
}

impl SpatialPrior {
    pub fn besag(graph: Arc<NeighborGraph>) -> Self {
        SpatialPrior {
            kind: PriorKind::Besag,
            graph,
            intercept: false,
        }
    }

    /// Zero-mean Leroux prior.
    pub fn leroux(graph: Arc<NeighborGraph>) -> Self {
        SpatialPrior {
            kind: PriorKind::Leroux,
            graph,
            intercept: false,
        }
    }

    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    /// True when the Leroux global-mean term is active.
    pub fn centered(&self) -> bool {
        self.intercept && self.kind == PriorKind::Leroux
    }

    pub fn precision(&self, theta: Theta) -> Result<PrecisionOperator> {
        match self.kind {
            PriorKind::Besag => besag_precision(&BesagModel {
                graph: self.graph.clone(),
                tau: theta.tau,
            }),
            PriorKind::Leroux => {
                let mut q = leroux_precision(&LerouxModel {
                    graph: self.graph.clone(),
                    tau: theta.tau,
                    lambda: theta.lambda,
                })?;
                if self.intercept {
                    q.centering = theta.tau * (1.0 - theta.lambda);
                }
                Ok(q)
            }
        }
    }
}

/// Symmetric precision `Q = diag(d) + c · A − (κ/N) 11ᵀ` over a neighbor graph.
///
/// Every off-diagonal graph entry shares the single coefficient `c`, so
/// symmetry holds exactly. `κ` is nonzero only for the Leroux prior with an
/// intercept.
#[derive(Clone, Debug)]
pub struct PrecisionOperator {
    graph: Arc<NeighborGraph>,
    diag: Vec<f64>,
    offdiag: f64,
    centering: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Domain(format!(
            "precision tau must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

pub fn besag_precision(model: &BesagModel) -> Result<PrecisionOperator> {
    check_tau(model.tau)?;
    let g = &model.graph;
    Ok(PrecisionOperator {
        diag: (0..g.len())
            .map(|i| model.tau * g.degree(i) as f64)
            .collect(),
        offdiag: -model.tau,
        graph: g.clone(),
        centering: 0.0,
    })
}

pub fn leroux_precision(model: &LerouxModel) -> Result<PrecisionOperator> {
    check_tau(model.tau)?;
    let lambda = model.lambda;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!(
            "Leroux lambda must lie in (0, 1), got {lambda}"
        )));
    }
    let g = &model.graph;
    Ok(PrecisionOperator {
        diag: (0..g.len())
            .map(|i| model.tau * (1.0 - lambda + lambda * g.degree(i) as f64))
            .collect(),
        offdiag: -model.tau * lambda,
        graph: g.clone(),
        centering: 0.0,
    })
}

impl PrecisionOperator {
    /// `τ I`: the independent (λ = 0) endpoint of the Leroux family.
    pub fn iid(graph: Arc<NeighborGraph>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(PrecisionOperator {
            diag: vec![tau; graph.len()],
            offdiag: 0.0,
            graph,
            centering: 0.0,
        })
    }

    /// The zero operator (no prior).
    pub fn zero(graph: Arc<NeighborGraph>) -> Self {
        PrecisionOperator {
            diag: vec![0.0; graph.len()],
            offdiag: 0.0,
            graph,
            centering: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn graph(&self) -> &Arc<NeighborGraph> {
        &self.graph
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn offdiagonal(&self) -> f64 {
        self.offdiag
    }

    /// Coefficient `κ` of the rank-one term `−(κ/N) 11ᵀ`.
    pub fn centering(&self) -> f64 {
        self.centering
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let sparse = if i == j {
            self.diag[i]
        } else if self.graph.neighbors(i).contains(&(j as u32)) {
            self.offdiag
        } else {
            0.0
        };
        sparse - self.centering / self.len() as f64
    }

    /// `y = Q x` on raw slices.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.len());
        assert_eq!(y.len(), self.len());
        let shift = if self.centering != 0.0 {
            self.centering * x.iter().sum::<f64>() / x.len() as f64
        } else {
            0.0
        };
        for (i, yi) in y.iter_mut().enumerate() {
            let s: f64 = self.graph.neighbors(i).iter().map(|&j| x[j as usize]).sum();
            *yi = self.diag[i] * x[i] + self.offdiag * s - shift;
        }
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.matvec(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> Result<Mat<f64>> {
        let n = self.len();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge {
                n,
                limit: DENSE_LIMIT,
            });
        }
        let shift = self.centering / n as f64;
        let mut m = Mat::<f64>::from_fn(n, n, |_, _| -shift);
        for i in 0..n {
            m[(i, i)] += self.diag[i];
            for &j in self.graph.neighbors(i) {
                m[(i, j as usize)] += self.offdiag;
            }
        }
        Ok(m)
    }
}

pub fn q_matvec(q: &PrecisionOperator, x: &Volume) -> Result<Volume> {
    if x.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "volume of {} voxels against a {}x{} precision",
            x.len(),
            q.len(),
            q.len()
        )));
    }
    let mut y = vec![0.0; x.len()];
    q.matvec(x.values(), &mut y);
    Ok(Volume::from_vec_unchecked(*x.dims(), y))
}

/// A concrete prior for full-conditional queries.
#[derive(Clone, Debug)]
pub enum PriorModel {
    Besag(BesagModel),
    Leroux(LerouxModel),
}

/// Mean and variance of `c_i` given all other voxels.
pub fn full_conditional(model: &PriorModel, c: &Volume, i: usize) -> Result<(f64, f64)> {
    let graph = match model {
        PriorModel::Besag(m) => &m.graph,
        PriorModel::Leroux(m) => &m.graph,
    };
    if c.len() != graph.len() {
        return Err(Error::DimensionMismatch(format!(
            "volume of {} voxels on a graph of {}",
            c.len(),
            graph.len()
        )));
    }
    if i >= graph.len() {
        return Err(Error::IndexOutOfBounds {
            index: i,
            len: graph.len(),
        });
    }
    let d = graph.degree(i) as f64;
    let sum: f64 = graph
        .neighbors(i)
        .iter()
        .map(|&j| c.values()[j as usize])
        .sum();
    match model {
        PriorModel::Besag(m) => {
            check_tau(m.tau)?;
            if graph.degree(i) == 0 {
                return Err(Error::DegenerateConditional(i));
            }
            Ok((BesagModel::RHO / d * sum, 1.0 / (m.tau * d)))
        }
        PriorModel::Leroux(m) => {
            check_tau(m.tau)?;
            let denom = 1.0 - m.lambda + m.lambda * d;
            Ok((m.lambda / denom * sum, 1.0 / (m.tau * denom)))
        }
    }
}

/// Draws `c ~ N(0, Q⁻¹)` from a Leroux prior by dense Cholesky.
pub fn sample_leroux<R: Rng + ?Sized>(model: &LerouxModel, rng: &mut R) -> Result<Volume> {
    let q = leroux_precision(model)?.to_dense()?;
    let llt = q
        .llt(faer::Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let n = q.nrows();
    let mut z = Mat::<f64>::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Q = L Lᵀ  ⇒  x = L⁻ᵀ z has covariance Q⁻¹.
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(
        llt.L().transpose(),
        z.as_mut(),
        faer::Par::Seq,
    );
    let values = (0..n).map(|i| z[(i, 0)]).collect();
    Volume::new(*model.graph.dims(), values)
}

/// Which prior, and over which graph, a Bayesian method uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorChoice {
    Besag,
    /// Besag with neighbors restricted to the same tissue class.
    BesagTissue,
    Leroux,
}

impl PriorChoice {
    pub fn kind(self) -> PriorKind {
        match self {
            PriorChoice::Besag | PriorChoice::BesagTissue => PriorKind::Besag,
            PriorChoice::Leroux => PriorKind::Leroux,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorChoice::Besag => "besag",
            PriorChoice::BesagTissue => "besag-tissue",
            PriorChoice::Leroux => "leroux",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            PriorChoice::Besag,
            PriorChoice::BesagTissue,
            PriorChoice::Leroux,
        ]
        .into_iter()
        .find(|p| p.name() == name)
    }

    pub fn spatial_prior(self, dims: GridDims, tissue: Option<&TissueMap>) -> Result<SpatialPrior> {
        let restrict = match self {
            PriorChoice::BesagTissue => Some(
                tissue.ok_or_else(|| Error::Config("besag-tissue needs a tissue map".into()))?,
            ),
            _ => None,
        };
        Ok(SpatialPrior {
            kind: self.kind(),
            graph: Arc::new(NeighborGraph::build(dims, restrict)?),
            intercept: false,
        })
    }
}
