//! Digital DCE phantom and the magnitude/phase observation model.
//!
//! Truth curves come from a gamma-variate arterial input function pushed
//! through per-tissue exchange kernels. Observations follow
//!
//! ```text
//! c_m = ξ ∘ c + ε_m,    ξ ~ N(1, 0.09),  ε_m ~ N(0, σ_m²)
//! Δφ  = Ψ c + ε_φ,      ε_φ ~ N(0, σ_φ²)
//! ```
//!
//! with both noise levels scaled by `1/rSNR`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDims, TimeGrid, Tissue, TissueMap, Volume};
use crate::phase::PhaseOperator;

const STREAM_MAGNITUDE: u64 = 1;
const STREAM_PHASE: u64 = 2;
const STREAM_TISSUE: u64 = 3;

/// SplitMix64 finalizer; decorrelates nearby integer seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of simulation replicate `index` derived from an experiment seed.
pub fn replicate_seed(base: u64, index: u64) -> u64 {
    mix_seed(base ^ mix_seed(index.wrapping_add(0x5EED)))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed));
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Relative SNR η; 5 corresponds to a 12-channel head coil, 1 to a body coil.
    pub rsnr: f64,
    /// Magnitude-CA noise s.d. at rSNR = 1 (mM).
    pub sigma_m_base: f64,
    /// Phase noise s.d. at rSNR = 1 (rad).
    pub sigma_phi_base: f64,
    /// Variance of the multiplicative magnitude bias ξ.
    pub xi_variance: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            rsnr: 5.0,
            sigma_m_base: 1.0,
            sigma_phi_base: 0.5,
            xi_variance: 0.09,
        }
    }
}

impl NoiseModel {
    pub fn with_rsnr(rsnr: f64) -> Self {
        NoiseModel {
            rsnr,
            ..NoiseModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rsnr.is_finite() && (1.0..=5.0).contains(&self.rsnr)) {
            return Err(Error::Config(format!(
                "rSNR must lie in [1, 5], got {}",
                self.rsnr
            )));
        }
        for (name, v) in [
            ("sigma_m_base", self.sigma_m_base),
            ("sigma_phi_base", self.sigma_phi_base),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.xi_variance.is_finite() && self.xi_variance >= 0.0) {
            return Err(Error::Config(format!(
                "xi_variance must be nonnegative, got {}",
                self.xi_variance
            )));
        }
        Ok(())
    }

    pub fn sigma_m(&self) -> f64 {
        self.sigma_m_base / self.rsnr
    }

    pub fn sigma_phi(&self) -> f64 {
        self.sigma_phi_base / self.rsnr
    }
}

/// Gamma-variate arterial input function parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AifParams {
    /// Peak concentration (mM).
    pub amplitude: f64,
    /// Arrival time (s).
    pub t0: f64,
    /// Time from arrival to peak (s).
    pub tp: f64,
    pub alpha: f64,
}

impl Default for AifParams {
    fn default() -> Self {
        AifParams {
            amplitude: 6.0,
            t0: 4.0,
            tp: 8.0,
            alpha: 1.5,
        }
    }
}

impl AifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::Config(format!(
                "AIF amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if !(self.tp.is_finite() && self.tp > 0.0) {
            return Err(Error::Config(format!(
                "AIF time-to-peak must be positive, got {}",
                self.tp
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "AIF shape must be positive, got {}",
                self.alpha
            )));
        }
        if !self.t0.is_finite() {
            return Err(Error::Config("AIF arrival time must be finite".into()));
        }
        Ok(())
    }

    pub fn peak_time(&self) -> f64 {
        self.t0 + self.tp
    }
}

/// Concentration of the arterial input function at time `t` (s).
pub fn aif(t: f64, params: &AifParams) -> Result<f64> {
    params.validate()?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    Ok(aif_unchecked(t, params))
}

#[inline]
fn aif_unchecked(t: f64, p: &AifParams) -> f64 {
    if t <= p.t0 {
        return 0.0;
    }
    let x = (t - p.t0) / p.tp;
    p.amplitude * x.powf(p.alpha) * (p.alpha * (1.0 - x)).exp()
}

/// How a tissue class responds to the arterial input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TissueResponse {
    /// No contrast agent.
    None,
    /// Blood pool: follows the AIF exactly.
    Arterial,
    /// `gain · rate · ∫ aif(s) exp(-rate (t - s)) ds`. Tends to `gain · aif`
    /// as `rate → ∞`.
    Exchange { gain: f64, rate: f64 },
}

impl TissueResponse {
    fn validate(&self) -> Result<()> {
        if let TissueResponse::Exchange { gain, rate } = *self {
            if !(gain.is_finite() && gain >= 0.0 && rate.is_finite() && rate > 0.0) {
                return Err(Error::Config(format!(
                    "exchange response needs gain >= 0 and rate > 0, got gain {gain}, rate {rate}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub response: TissueResponse,
    /// Relative s.d. of the voxelwise gain around the class curve.
    #[serde(default)]
    pub heterogeneity: f64,
}

const QUADRATURE_INTERVALS: usize = 4096;

/// Concentration of a tissue with the given response at time `t`.
pub fn tissue_curve(t: f64, response: &TissueResponse, aif_params: &AifParams) -> Result<f64> {
    response.validate()?;
    let a = aif(t, aif_params)?;
    Ok(match *response {
        TissueResponse::None => 0.0,
        TissueResponse::Arterial => a,
        TissueResponse::Exchange { gain, rate } => {
            gain * rate * exchange_integral(t, rate, aif_params)
        }
    })
}

/// Composite Simpson rule for `∫_{t0}^{t} aif(s) e^{-rate (t-s)} ds`.
fn exchange_integral(t: f64, rate: f64, p: &AifParams) -> f64 {
    let start = p.t0.max(0.0);
    if t <= start {
        return 0.0;
    }
    let n = QUADRATURE_INTERVALS;
    let h = (t - start) / n as f64;
    let f = |s: f64| aif_unchecked(s, p) * (-rate * (t - s)).exp();
    let mut acc = f(start) + f(t);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(start + i as f64 * h);
    }
    acc * h / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Infinite cylinder parallel to the z axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Cylinder {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)
            <= self.radius * self.radius
    }
}

/// Region geometry in normalized coordinates: the grid spans `[-1, 1]` on
/// every axis and voxel centers sit at `2 (i + 0.5) / n - 1`.
///
/// Precedence: vessel, tumor core, tumor rim, white matter, gray matter
/// (rest of the head), background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomLayout {
    pub head: Ellipsoid,
    pub white_matter: Ellipsoid,
    pub tumor: Ellipsoid,
    pub tumor_core: Ellipsoid,
    pub vessels: Vec<Cylinder>,
}

impl Default for PhantomLayout {
    fn default() -> Self {
        PhantomLayout {
            head: Ellipsoid {
                center: [0.0, 0.0, 0.0],
                radii: [0.95, 0.95, 1.25],
            },
            white_matter: Ellipsoid {
                center: [-0.1, 0.05, 0.0],
                radii: [0.55, 0.6, 0.85],
            },
            tumor: Ellipsoid {
                center: [0.35, 0.3, 0.0],
                radii: [0.45, 0.45, 0.45],
            },
            tumor_core: Ellipsoid {
                center: [0.35, 0.3, 0.0],
                radii: [0.2, 0.2, 0.2],
            },
            vessels: vec![Cylinder {
                center: [-0.3, -0.3],
                radius: 0.6,
            }],
        }
    }
}

impl PhantomLayout {
    pub fn classify(&self, p: [f64; 3]) -> Tissue {
        if !self.head.contains(p) {
            Tissue::Background
        } else if self.vessels.iter().any(|v| v.contains(p)) {
            Tissue::Vessel
        } else if self.tumor_core.contains(p) {
            Tissue::TumorCore
        } else if self.tumor.contains(p) {
            Tissue::TumorRim
        } else if self.white_matter.contains(p) {
            Tissue::WhiteMatter
        } else {
            Tissue::GrayMatter
        }
    }
}

/// Normalized center coordinate of voxel `i` on an axis of `n` voxels.
#[inline]
pub fn normalized_center(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: GridDims,
    #[serde(default)]
    pub layout: PhantomLayout,
    #[serde(default)]
    pub aif: AifParams,
    #[serde(default = "default_classes")]
    pub classes: BTreeMap<Tissue, ClassParams>,
    #[serde(default)]
    pub time: TimeGrid,
    /// Seeds the voxelwise tissue heterogeneity.
    #[serde(default)]
    pub seed: u64,
}

pub fn default_classes() -> BTreeMap<Tissue, ClassParams> {
    use TissueResponse::*;
    let class = |response, heterogeneity| ClassParams {
        response,
        heterogeneity,
    };
    BTreeMap::from([
        (Tissue::Background, class(None, 0.0)),
        (Tissue::Vessel, class(Arterial, 0.0)),
        (
            Tissue::TumorRim,
            class(
                Exchange {
                    gain: 0.5,
                    rate: 0.08,
                },
                0.15,
            ),
        ),
        (
            Tissue::TumorCore,
            class(
                Exchange {
                    gain: 0.25,
                    rate: 0.02,
                },
                0.15,
            ),
        ),
        (
            Tissue::WhiteMatter,
            class(
                Exchange {
                    gain: 0.04,
                    rate: 0.05,
                },
                0.15,
            ),
        ),
        (
            Tissue::GrayMatter,
            class(
                Exchange {
                    gain: 0.08,
                    rate: 0.08,
                },
                0.15,
            ),
        ),
    ])
}

impl PhantomSpec {
    pub fn new(dims: GridDims) -> Self {
        PhantomSpec {
            dims,
            layout: PhantomLayout::default(),
            aif: AifParams::default(),
            classes: default_classes(),
            time: TimeGrid::default(),
            seed: 0,
        }
    }

    pub fn class_params(&self, tissue: Tissue) -> Result<&ClassParams> {
        self.classes
            .get(&tissue)
            .ok_or_else(|| Error::Config(format!("no curve parameters for tissue class {tissue}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.aif.validate()?;
        self.time.validate()?;
        for (tissue, params) in &self.classes {
            params.response.validate()?;
            if !(params.heterogeneity.is_finite() && params.heterogeneity >= 0.0) {
                return Err(Error::Config(format!(
                    "heterogeneity of {tissue} must be nonnegative"
                )));
            }
        }
        Ok(())
    }

    pub fn tissue_map(&self) -> Result<TissueMap> {
        let d = self.dims;
        let mut labels = Vec::with_capacity(d.len());
        for k in 0..d.nz {
            let z = normalized_center(k, d.nz);
            for j in 0..d.ny {
                let y = normalized_center(j, d.ny);
                for i in 0..d.nx {
                    let x = normalized_center(i, d.nx);
                    labels.push(self.layout.classify([x, y, z]));
                }
            }
        }
        TissueMap::from_tissues(d, &labels)
    }

    /// Class curve sampled on the time grid.
    pub fn class_curve(&self, tissue: Tissue) -> Result<Vec<f64>> {
        let params = self.class_params(tissue)?;
        self.time
            .times()
            .iter()
            .map(|&t| tissue_curve(t, &params.response, &self.aif))
            .collect()
    }
}

/// Tissue map and noiseless concentration volumes, one per time point.
pub fn build_phantom(spec: &PhantomSpec) -> Result<(TissueMap, Vec<Volume>)> {
    spec.validate()?;
    let tissue = spec.tissue_map()?;
    if tissue.count(Tissue::Vessel) == 0 {
        return Err(Error::Config(format!(
            "vessel region is empty on a {} grid",
            spec.dims
        )));
    }

    let mut curves: BTreeMap<Tissue, Vec<f64>> = BTreeMap::new();
    for idx in 0..tissue.labels().len() {
        let t = tissue
            .tissue_at(idx)
            .expect("labels come from Tissue codes");
        if let Entry::Vacant(e) = curves.entry(t) {
            e.insert(spec.class_curve(t)?);
        }
    }

    let mut rng = rng_for(spec.seed, STREAM_TISSUE);
    let gains: Vec<f64> = (0..tissue.labels().len())
        .map(|idx| {
            let t = tissue
                .tissue_at(idx)
                .expect("labels come from Tissue codes");
            let h = spec.classes[&t].heterogeneity;
            let z: f64 = StandardNormal.sample(&mut rng);
            (1.0 + h * z).max(0.0)
        })
        .collect();

    let truth = (0..spec.time.len())
        .map(|ti| {
            let values = (0..gains.len())
                .map(|idx| {
                    let t = tissue
                        .tissue_at(idx)
                        .expect("labels come from Tissue codes");
                    gains[idx] * curves[&t][ti]
                })
                .collect();
            Volume::new(spec.dims, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tissue, truth))
}

/// `ξ ∘ c + ε_m` with fresh draws per call, deterministic in `seed`.
pub fn corrupt_magnitude(c: &Volume, noise: &NoiseModel, seed: u64) -> Result<Volume> {
    noise.validate()?;
    let mut rng = rng_for(seed, STREAM_MAGNITUDE);
    let xi =
        Normal::new(1.0, noise.xi_variance.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let eps = Normal::new(0.0, noise.sigma_m()).map_err(|e| Error::Config(e.to_string()))?;
    let values = c
        .values()
        .iter()
        .map(|&ci| {
            let bias: f64 = xi.sample(&mut rng);
            let e: f64 = eps.sample(&mut rng);
            bias * ci + e
        })
        .collect();
    Volume::new(*c.dims(), values)
}

/// `Ψ c + ε_φ`, deterministic in `seed`.
pub fn corrupt_phase(
    c: &Volume,
    op: &PhaseOperator,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Volume> {
    noise.validate()?;
    let clean = op.apply(c)?;
    let mut rng = rng_for(seed, STREAM_PHASE);
    let eps = Normal::new(0.0, noise.sigma_phi()).map_err(|e| Error::Config(e.to_string()))?;
    let values = clean
        .values()
        .iter()
        .map(|&v| v + eps.sample(&mut rng))
        .collect();
    Volume::new(*c.dims(), values)
}

/// Ground truth plus noisy magnitude and phase stacks over the time grid.
#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub truth: Vec<Volume>,
    pub magnitude: Vec<Volume>,
    pub phase: Vec<Volume>,
    pub tissue: TissueMap,
    pub noise: NoiseModel,
    pub time: TimeGrid,
    pub seed: u64,
}

impl SimulatedDataset {
    pub fn dims(&self) -> &GridDims {
        self.tissue.dims()
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Per-time-point noise seed; each time point gets its own substream.
pub fn time_point_seed(seed: u64, time_index: usize) -> u64 {
    seed ^ time_index as u64
}

/// Corrupts an existing truth stack. Lets repeated simulations share one phantom.
pub fn simulate_from_truth(
    tissue: &TissueMap,
    truth: &[Volume],
    time: &TimeGrid,
    noise: &NoiseModel,
    op: &PhaseOperator,
    seed: u64,
) -> Result<SimulatedDataset> {
    if truth.len() != time.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} truth volumes for {} time points",
            truth.len(),
            time.len()
        )));
    }
    let mut magnitude = Vec::with_capacity(truth.len());
    let mut phase = Vec::with_capacity(truth.len());
    for (ti, c) in truth.iter().enumerate() {
        let s = time_point_seed(seed, ti);
        magnitude.push(corrupt_magnitude(c, noise, s)?);
        phase.push(corrupt_phase(c, op, noise, s)?);
    }
    Ok(SimulatedDataset {
        truth: truth.to_vec(),
        magnitude,
        phase,
        tissue: tissue.clone(),
        noise: *noise,
        time: time.clone(),
        seed,
    })
}

pub fn simulate(
    spec: &PhantomSpec,
    noise: &NoiseModel,
    op: &PhaseOperator,
    seed: u64,
) -> Result<SimulatedDataset> {
    let (tissue, truth) = build_phantom(spec)?;
    simulate_from_truth(&tissue, &truth, &spec.time, noise, op, seed)
}
