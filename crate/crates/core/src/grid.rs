//! Voxel-grid geometry and the value containers built on it.
//!
//! Every volume is stored x-fastest: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Files, dense-matrix oracles and FFT routines all
//! rely on this ordering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Isotropic voxel edge length in millimetres.
    #[serde(default = "default_voxel_mm")]
    pub voxel_mm: f64,
}

fn default_voxel_mm() -> f64 {
    1.0
}

impl GridDims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::with_voxel_size(nx, ny, nz, 1.0)
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn with_voxel_size(nx: usize, ny: usize, nz: usize, voxel_mm: f64) -> Result<Self> {
        let dims = GridDims {
            nx,
            ny,
            nz,
            voxel_mm,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if !(self.voxel_mm.is_finite() && self.voxel_mm > 0.0) {
            return Err(Error::Config(format!(
                "voxel size must be positive and finite, got {}",
                self.voxel_mm
            )));
        }
        Ok(())
    }

    /// Total voxel count `N`.
    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Same voxel layout (ignores voxel size).
    pub fn same_shape(&self, other: &GridDims) -> bool {
        self.shape() == other.shape()
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        if i >= self.nx || j >= self.ny || k >= self.nz {
            return Err(Error::OutOfBounds {
                i,
                j,
                k,
                nx: self.nx,
                ny: self.ny,
                nz: self.nz,
            });
        }
        Ok(self.index_unchecked(i, j, k))
    }

    #[inline(always)]
    pub(crate) fn index_unchecked(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    /// Inverse of [`GridDims::linear_index`].
    pub fn coords(&self, index: usize) -> Result<(usize, usize, usize)> {
        if index >= self.len() {
            return Err(Error::IndexOutOfBounds {
                index,
                len: self.len(),
            });
        }
        Ok(self.coords_unchecked(index))
    }

    #[inline(always)]
    pub(crate) fn coords_unchecked(&self, index: usize) -> (usize, usize, usize) {
        let i = index % self.nx;
        let rest = index / self.nx;
        (i, rest % self.ny, rest / self.ny)
    }

    /// Face-adjacent (6-connected) neighbors of `index`, without wrap-around.
    ///
    /// With `restrict` set, neighbors carrying a different tissue label than
    /// the center voxel are dropped.
    pub fn neighbors(&self, index: usize, restrict: Option<&TissueMap>) -> Result<Vec<usize>> {
        let (i, j, k) = self.coords(index)?;
        if let Some(tissue) = restrict {
            if !tissue.dims.same_shape(self) {
                return Err(Error::DimensionMismatch(format!(
                    "tissue map {:?} does not match grid {:?}",
                    tissue.dims.shape(),
                    self.shape()
                )));
            }
        }
        let mut out = Vec::with_capacity(6);
        self.for_each_neighbor(i, j, k, |n| out.push(n));
        if let Some(tissue) = restrict {
            let center = tissue.labels[index];
            out.retain(|&n| tissue.labels[n] == center);
        }
        Ok(out)
    }

    /// Visits face neighbors in a fixed order: -x, +x, -y, +y, -z, +z.
    #[inline]
    pub(crate) fn for_each_neighbor(&self, i: usize, j: usize, k: usize, mut f: impl FnMut(usize)) {
        let idx = self.index_unchecked(i, j, k);
        let sx = 1;
        let sy = self.nx;
        let sz = self.nx * self.ny;
        if i > 0 {
            f(idx - sx);
        }
        if i + 1 < self.nx {
            f(idx + sx);
        }
        if j > 0 {
            f(idx - sy);
        }
        if j + 1 < self.ny {
            f(idx + sy);
        }
        if k > 0 {
            f(idx - sz);
        }
        if k + 1 < self.nz {
            f(idx + sz);
        }
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A real scalar field over a grid: CA concentration (mM), phase (rad) or noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: GridDims,
    values: Vec<f64>,
}

impl Volume {
    pub fn new(dims: GridDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values supplied for a {} grid ({} voxels)",
                values.len(),
                dims,
                dims.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume value at index {pos}")));
        }
        Ok(Volume { dims, values })
    }

    pub fn zeros(dims: GridDims) -> Self {
        Volume {
            dims,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn constant(dims: GridDims, value: f64) -> Self {
        Volume {
            dims,
            values: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: GridDims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.len());
        for k in 0..dims.nz {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    values.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, values)
    }

    /// Skips the finiteness scan; used on hot paths whose inputs were checked.
    pub(crate) fn from_vec_unchecked(dims: GridDims, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), dims.len());
        Volume { dims, values }
    }

    #[inline]
    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        Ok(self.values[self.dims.linear_index(i, j, k)?])
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Volume) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn check_same_grid(&self, other: &Volume) -> Result<()> {
        if !self.dims.same_shape(&other.dims) {
            return Err(Error::DimensionMismatch(format!(
                "volumes on {} and {} grids",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Tissue classes used by the phantom and the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tissue {
    Background,
    Vessel,
    TumorRim,
    WhiteMatter,
    GrayMatter,
    TumorCore,
}

impl Tissue {
    pub const ALL: [Tissue; 6] = [
        Tissue::Background,
        Tissue::Vessel,
        Tissue::TumorRim,
        Tissue::WhiteMatter,
        Tissue::GrayMatter,
        Tissue::TumorCore,
    ];

    pub fn code(self) -> u8 {
        match self {
            Tissue::Background => 0,
            Tissue::Vessel => 1,
            Tissue::TumorRim => 2,
            Tissue::WhiteMatter => 3,
            Tissue::GrayMatter => 4,
            Tissue::TumorCore => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Tissue> {
        Tissue::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::Vessel => "vessel",
            Tissue::TumorRim => "tumor-rim",
            Tissue::WhiteMatter => "white-matter",
            Tissue::GrayMatter => "gray-matter",
            Tissue::TumorCore => "tumor-core",
        }
    }

    pub fn from_name(name: &str) -> Option<Tissue> {
        Tissue::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn default_class_table() -> BTreeMap<u8, String> {
        Tissue::ALL
            .into_iter()
            .map(|t| (t.code(), t.name().to_string()))
            .collect()
    }
}

impl fmt::Display for Tissue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-voxel tissue labels plus the table naming each label code.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueMap {
    pub(crate) dims: GridDims,
    pub(crate) labels: Vec<u8>,
    pub(crate) classes: BTreeMap<u8, String>,
}

impl TissueMap {
    pub fn new(dims: GridDims, labels: Vec<u8>, classes: BTreeMap<u8, String>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {} grid",
                labels.len(),
                dims
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !classes.contains_key(l)) {
            return Err(Error::Config(format!(
                "label {bad} is not a declared class"
            )));
        }
        Ok(TissueMap {
            dims,
            labels,
            classes,
        })
    }

    /// Builds a map over the standard [`Tissue`] class table.
    pub fn from_tissues(dims: GridDims, tissues: &[Tissue]) -> Result<Self> {
        let labels = tissues.iter().map(|t| t.code()).collect();
        TissueMap::new(dims, labels, Tissue::default_class_table())
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn classes(&self) -> &BTreeMap<u8, String> {
        &self.classes
    }

    pub fn tissue_at(&self, index: usize) -> Option<Tissue> {
        self.labels.get(index).copied().and_then(Tissue::from_code)
    }

    pub fn count(&self, class: Tissue) -> usize {
        let code = class.code();
        self.labels.iter().filter(|&&l| l == code).count()
    }

    pub fn indices_of(&self, class: Tissue) -> Vec<usize> {
        let code = class.code();
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == code).then_some(i))
            .collect()
    }
}

/// Acquisition times in seconds: every 2 s up to 30 s, then every 5 s to 60 s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl Default for TimeGrid {
    fn default() -> Self {
        let mut times: Vec<f64> = (0..=15).map(|k| 2.0 * k as f64).collect();
        times.extend((1..=6).map(|k| 30.0 + 5.0 * k as f64));
        TimeGrid { times }
    }
}

impl TimeGrid {
    pub const LEN: usize = 22;

    pub fn new(times: Vec<f64>) -> Result<Self> {
        let grid = TimeGrid { times };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != Self::LEN {
            return Err(Error::Config(format!(
                "time grid must have {} points, got {}",
                Self::LEN,
                self.times.len()
            )));
        }
        if self.times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Config(
                "time points must be finite and nonnegative".into(),
            ));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "time points must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}
