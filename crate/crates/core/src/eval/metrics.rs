//! rMSE by tissue class, method comparisons and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Tissue, TissueMap, Volume};

/// Running sums of squared errors per time point.
///
/// Accumulation is a plain sum, so merging partial accumulators in a fixed
/// order gives a schedule-independent result.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmseAccumulator {
    pub sum_sq: Vec<f64>,
    pub count: Vec<usize>,
}

impl RmseAccumulator {
    pub fn new(time_points: usize) -> Self {
        RmseAccumulator {
            sum_sq: vec![0.0; time_points],
            count: vec![0; time_points],
        }
    }

    pub fn add(
        &mut self,
        time_index: usize,
        estimate: &Volume,
        truth: &Volume,
        indices: &[usize],
    ) -> Result<()> {
        estimate.check_same_grid(truth)?;
        if time_index >= self.sum_sq.len() {
            return Err(Error::IndexOutOfBounds {
                index: time_index,
                len: self.sum_sq.len(),
            });
        }
        let (e, t) = (estimate.values(), truth.values());
        let mut s = 0.0;
        for &i in indices {
            let d = e[i] - t[i];
            s += d * d;
        }
        self.sum_sq[time_index] += s;
        self.count[time_index] += indices.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &RmseAccumulator) {
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
    }

    pub fn finish(&self) -> Result<Vec<f64>> {
        self.sum_sq
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| {
                if c == 0 {
                    Err(Error::Config("rMSE over an empty voxel set".into()))
                } else {
                    Ok((s / c as f64).sqrt())
                }
            })
            .collect()
    }
}

/// Per time point: `sqrt(mean over simulations × class voxels of (ĉ − c)²)`.
///
/// `estimates[s][t]` and `truth[s][t]` index simulation `s`, time point `t`.
pub fn rmse_by_tissue(
    estimates: &[Vec<Volume>],
    truth: &[Vec<Volume>],
    tissue: &TissueMap,
    class: Tissue,
) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimate stacks against {} truth stacks",
            estimates.len(),
            truth.len()
        )));
    }
    let indices = tissue.indices_of(class);
    if indices.is_empty() {
        return Err(Error::Config(format!("tissue class {class} has no voxels")));
    }
    let time_points = estimates[0].len();
    let mut acc = RmseAccumulator::new(time_points);
    for (est, tru) in estimates.iter().zip(truth) {
        if est.len() != time_points || tru.len() != time_points {
            return Err(Error::DimensionMismatch(
                "stacks differ in time points".into(),
            ));
        }
        for (t, (e, c)) in est.iter().zip(tru).enumerate() {
            if !e.dims().same_shape(tissue.dims()) {
                return Err(Error::DimensionMismatch(format!(
                    "estimate on {} but tissue map on {}",
                    e.dims(),
                    tissue.dims()
                )));
            }
            acc.add(t, e, c, &indices)?;
        }
    }
    acc.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseSeries {
    pub method: String,
    pub tissue: Tissue,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub config_hash: String,
    pub seed: u64,
    pub simulations: usize,
    pub rsnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseTable {
    pub times: Vec<f64>,
    pub series: Vec<RmseSeries>,
    pub meta: TableMeta,
}

impl RmseTable {
    pub fn get(&self, method: &str, tissue: Tissue) -> Option<&[f64]> {
        self.series
            .iter()
            .find(|s| s.method == method && s.tissue == tissue)
            .map(|s| s.values.as_slice())
    }

    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.series {
            if !out.contains(&s.method.as_str()) {
                out.push(&s.method);
            }
        }
        out
    }

    /// `method,tissue,time_s,rmse` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,tissue,time_s,rmse\n");
        for s in &self.series {
            for (t, v) in self.times.iter().zip(&s.values) {
                out.push_str(&format!("{},{},{},{}\n", s.method, s.tissue.name(), t, v));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RmseTable> {
        let mut lines = text.lines();
        if lines.next() != Some("method,tissue,time_s,rmse") {
            return Err(Error::Config(
                "rMSE CSV header must be method,tissue,time_s,rmse".into(),
            ));
        }
        let mut times: Vec<f64> = Vec::new();
        let mut series: Vec<RmseSeries> = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Config(format!("malformed rMSE CSV row {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let tissue = Tissue::from_name(f[1]).ok_or_else(bad)?;
            let time: f64 = f[2].parse().map_err(|_| bad())?;
            let value: f64 = f[3].parse().map_err(|_| bad())?;
            let idx = match series
                .iter()
                .position(|s| s.method == f[0] && s.tissue == tissue)
            {
                Some(i) => i,
                None => {
                    series.push(RmseSeries {
                        method: f[0].to_string(),
                        tissue,
                        values: Vec::new(),
                    });
                    series.len() - 1
                }
            };
            let s = &mut series[idx];
            if idx == 0 {
                times.push(time);
            } else if times.get(s.values.len()) != Some(&time) {
                return Err(bad());
            }
            s.values.push(value);
        }
        if series.iter().any(|s| s.values.len() != times.len()) {
            return Err(Error::Config(
                "rMSE CSV series have different lengths".into(),
            ));
        }
        Ok(RmseTable {
            times,
            series,
            meta: TableMeta::default(),
        })
    }
}

/// Relative changes of `candidate` against `baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub tissue: Tissue,
    /// `100 · (1 − candidate/baseline)` at the peak time point.
    pub peak_decrease_pct: f64,
    /// Same, using the mean over the last three time points.
    pub tail_decrease_pct: f64,
    /// Mean of `baseline − candidate` over all time points.
    pub mean_difference: f64,
}

pub fn tail_mean(series: &[f64]) -> f64 {
    let k = series.len().min(3);
    series[series.len() - k..].iter().sum::<f64>() / k as f64
}

pub fn compare_series(
    baseline: &[f64],
    candidate: &[f64],
    peak_index: usize,
) -> Result<(f64, f64, f64)> {
    if baseline.len() != candidate.len() || baseline.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "series of length {} and {}",
            baseline.len(),
            candidate.len()
        )));
    }
    if peak_index >= baseline.len() {
        return Err(Error::IndexOutOfBounds {
            index: peak_index,
            len: baseline.len(),
        });
    }
    let pct = |b: f64, c: f64| if b == c { 0.0 } else { 100.0 * (1.0 - c / b) };
    let peak = pct(baseline[peak_index], candidate[peak_index]);
    let tail = pct(tail_mean(baseline), tail_mean(candidate));
    let mean = baseline
        .iter()
        .zip(candidate)
        .map(|(b, c)| b - c)
        .sum::<f64>()
        / baseline.len() as f64;
    Ok((peak, tail, mean))
}

/// Every ordered method pair of a table for one tissue class.
pub fn compare_methods(
    table: &RmseTable,
    tissue: Tissue,
    peak_index: usize,
) -> Result<Vec<Comparison>> {
    let methods = table.methods();
    let mut out = Vec::new();
    for &b in &methods {
        for &c in &methods {
            if b == c {
                continue;
            }
            let (Some(bs), Some(cs)) = (table.get(b, tissue), table.get(c, tissue)) else {
                return Err(Error::Config(format!(
                    "table lacks {tissue} series for {b} or {c}"
                )));
            };
            let (peak, tail, mean) = compare_series(bs, cs, peak_index)?;
            out.push(Comparison {
                baseline: b.to_string(),
                candidate: c.to_string(),
                tissue,
                peak_decrease_pct: peak,
                tail_decrease_pct: tail,
                mean_difference: mean,
            });
        }
    }
    Ok(out)
}

/// Index of the maximum; first one on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// series is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "series of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// λ̂ time series averaged over simulations, with its rank correlation to
/// the mean vessel concentration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub times: Vec<f64>,
    pub lambda_mean: Vec<f64>,
    pub vessel_mean: Vec<f64>,
    pub spearman: f64,
}

impl LambdaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,lambda_mean,vessel_mean\n");
        for ((t, l), v) in self
            .times
            .iter()
            .zip(&self.lambda_mean)
            .zip(&self.vessel_mean)
        {
            out.push_str(&format!("{t},{l},{v}\n"));
        }
        out
    }
}

/// `lambda_series[s][t]` is λ̂ for simulation `s` at time point `t`.
pub fn lambda_series_report(
    times: &[f64],
    lambda_series: &[Vec<f64>],
    vessel_mean: &[f64],
) -> Result<LambdaReport> {
    if lambda_series.is_empty() {
        return Err(Error::Config("no λ̂ series to report".into()));
    }
    let n = times.len();
    if vessel_mean.len() != n || lambda_series.iter().any(|s| s.len() != n) {
        return Err(Error::DimensionMismatch(
            "λ̂ series and time grid differ in length".into(),
        ));
    }
    let lambda_mean: Vec<f64> = (0..n)
        .map(|t| lambda_series.iter().map(|s| s[t]).sum::<f64>() / lambda_series.len() as f64)
        .collect();
    Ok(LambdaReport {
        spearman: spearman(&lambda_mean, vessel_mean)?,
        times: times.to_vec(),
        lambda_mean,
        vessel_mean: vessel_mean.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDims;

    #[test]
    fn rmse_hand_examples() {
        let dims = GridDims::new(2, 1, 1).unwrap();
        let map = TissueMap::from_tissues(dims, &[Tissue::Vessel, Tissue::Vessel]).unwrap();
        let truth = vec![vec![Volume::new(dims, vec![1.0, 2.0]).unwrap()]];
        let est = vec![vec![Volume::new(dims, vec![1.3, 1.6]).unwrap()]];
        let r = rmse_by_tissue(&est, &truth, &map, Tissue::Vessel).unwrap();
        assert!((r[0] - 0.125f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            rmse_by_tissue(&truth, &truth, &map, Tissue::Vessel).unwrap(),
            vec![0.0]
        );
        let shifted = vec![vec![Volume::new(dims, vec![1.5, 2.5]).unwrap()]];
        assert_eq!(
            rmse_by_tissue(&shifted, &truth, &map, Tissue::Vessel).unwrap(),
            vec![0.5]
        );
        assert!(rmse_by_tissue(&est, &truth, &map, Tissue::TumorRim).is_err());
    }

    #[test]
    fn comparisons() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let (p, t, m) = compare_series(&a, &a, 2).unwrap();
        assert_eq!((p, t, m), (0.0, 0.0, 0.0));
        let b: Vec<f64> = a.iter().map(|v| 0.6 * v).collect();
        let (p, t, _) = compare_series(&a, &b, 1).unwrap();
        assert!((p - 40.0).abs() < 1e-12 && (t - 40.0).abs() < 1e-12);
        assert!(compare_series(&a, &b[..3], 0).is_err());
    }

    #[test]
    fn spearman_examples() {
        let v = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(spearman(&[0.4; 4], &v).unwrap(), 0.0);
        let anti: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((spearman(&anti, &v).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn csv_roundtrip() {
        let table = RmseTable {
            times: vec![0.0, 2.0],
            series: vec![
                RmseSeries {
                    method: "mle".into(),
                    tissue: Tissue::Vessel,
                    values: vec![0.5, 0.25],
                },
                RmseSeries {
                    method: "bhm-leroux".into(),
                    tissue: Tissue::Vessel,
                    values: vec![0.4, 0.125],
                },
            ],
            meta: TableMeta::default(),
        };
        let csv = table.to_csv();
        assert!(csv.starts_with("method,tissue,time_s,rmse\nmle,vessel,0,0.5\n"));
        assert_eq!(RmseTable::from_csv(&csv).unwrap(), table);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
    }
}
