//! Forecast scoring: RMSE, accuracy, predictive entropy, CRPS, Poisson NLL and
//! interval coverage. Every function skips points whose mask is `false`.
//!
//! CRPS follows the usual non-negative convention
//! `σ [z (2Φ(z) − 1) + 2φ(z) − 1/√π]`, so lower is better.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;


use crate::Error;

pub const LAMBDA_FLOOR: f64 = 1e-10;
const DEGENERATE_SIGMA: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("length mismatch: {0}")]
    Length(String),
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn check_len(a: usize, b: usize, mask: usize) -> Result<(), MetricError> {
    if a != b || a != mask {
        return Err(MetricError::Length(format!("{a} predictions, {b} targets, {mask} mask entries")));
    }
    Ok(())
}

fn masked_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `None` when every point is masked.
pub fn rmse(preds: &[f64], truth: &[f64], mask: &[bool]) -> Result<Option<f64>, MetricError> {
    check_len(preds.len(), truth.len(), mask.len())?;
    let mse = masked_mean(
        preds.iter().zip(truth).zip(mask).filter(|(_, &m)| m).map(|((p, t), _)| (p - t).powi(2)),
    );
    Ok(mse.map(f64::sqrt))
}

pub fn accuracy(preds: &[usize], truth: &[usize], mask: &[bool]) -> Result<Option<f64>, MetricError> {
    check_len(preds.len(), truth.len(), mask.len())?;
    Ok(masked_mean(
        preds.iter().zip(truth).zip(mask).filter(|(_, &m)| m).map(|((p, t), _)| f64::from(u8::from(p == t))),
    ))
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropySummary {
    pub per_point: f64,
    /// Entropy summed over the observed points of one sequence.
    pub summed: f64,
}

/// Entropy averaged over observed points, plus the summed-over-horizon variant.
pub fn predictive_entropy(probs: &[Vec<f64>], mask: &[bool]) -> Result<Option<EntropySummary>, MetricError> {
    check_len(probs.len(), probs.len(), mask.len())?;
    let hs: Vec<f64> = probs.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| entropy(p)).collect();
    if hs.is_empty() {
        return Ok(None);
    }
    let summed: f64 = hs.iter().sum();
    Ok(Some(EntropySummary { per_point: summed / hs.len() as f64, summed }))
}

pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64, MetricError> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(MetricError::NegativeSigma(sigma));
    }
    if sigma < DEGENERATE_SIGMA {
        return Ok((y - mu).abs());
    }
    let n = std_normal();
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / PI.sqrt()))
}

/// `E|m + s Z|` for standard normal `Z`.
fn abs_moment(m: f64, s: f64) -> f64 {
    if s < DEGENERATE_SIGMA {
        return m.abs();
    }
    let n = std_normal();
    2.0 * s * n.pdf(m / s) + m * (2.0 * n.cdf(m / s) - 1.0)
}

/// Energy form `mean|X − y| − ½ mean|X − X′|` over all ordered sample pairs.
pub fn crps_ensemble(samples: &[f64], y: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let first = s.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    let pair: f64 = s.iter().enumerate().map(|(i, x)| (2.0 * (i as f64 + 1.0) - nf - 1.0) * x).sum();
    first - pair / (nf * nf)
}

/// CRPS of the equal-weight mixture of `N(mus[i], sigmas[i]²)`.
pub fn crps_mixture(mus: &[f64], sigmas: &[f64], y: f64) -> Result<f64, MetricError> {
    if mus.len() != sigmas.len() || mus.is_empty() {
        return Err(MetricError::Length(format!("{} means, {} sigmas", mus.len(), sigmas.len())));
    }
    if let Some(&s) = sigmas.iter().find(|&&s| s < 0.0 || s.is_nan()) {
        return Err(MetricError::NegativeSigma(s));
    }
    let m = mus.len() as f64;
    let first: f64 = mus.iter().zip(sigmas).map(|(&mu, &s)| abs_moment(mu - y, s)).sum::<f64>() / m;
    let mut pair = 0.0;
    for i in 0..mus.len() {
        for j in 0..i {
            pair += 2.0 * abs_moment(mus[i] - mus[j], sigmas[i].hypot(sigmas[j]));
        }
        pair += abs_moment(0.0, sigmas[i] * 2f64.sqrt());
    }
    Ok(first - 0.5 * pair / (m * m))
}

/// Quantile of an equal-weight Gaussian mixture, found by bisection.
pub fn mixture_quantile(mus: &[f64], sigmas: &[f64], q: f64) -> f64 {
    let n = std_normal();
    let cdf = |x: f64| {
        mus.iter()
            .zip(sigmas)
            .map(|(&m, &s)| if s < DEGENERATE_SIGMA { f64::from(u8::from(x >= m)) } else { n.cdf((x - m) / s) })
            .sum::<f64>()
            / mus.len() as f64
    };
    let spread = sigmas.iter().fold(0.0f64, |a, &s| a.max(s));
    let mut lo = mus.iter().fold(f64::INFINITY, |a, &m| a.min(m)) - 10.0 * spread - 1e-9;
    let mut hi = mus.iter().fold(f64::NEG_INFINITY, |a, &m| a.max(m)) + 10.0 * spread + 1e-9;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `λ − y ln λ + ln y!` with `λ` floored at [`LAMBDA_FLOOR`].
pub fn poisson_nll_point(lambda: f64, y: f64) -> f64 {
    let l = lambda.max(LAMBDA_FLOOR);
    l - y * l.ln() + ln_gamma(y + 1.0)
}

pub fn poisson_nll(lambdas: &[f64], counts: &[f64], mask: &[bool]) -> Result<Option<f64>, MetricError> {
    check_len(lambdas.len(), counts.len(), mask.len())?;
    Ok(masked_mean(
        lambdas.iter().zip(counts).zip(mask).filter(|(_, &m)| m).map(|((&l, &y), _)| poisson_nll_point(l, y)),
    ))
}

/// Fraction of observed truths inside `[low, high]`.
pub fn coverage95(low: &[f64], high: &[f64], truth: &[f64], mask: &[bool]) -> Result<Option<f64>, MetricError> {
    check_len(low.len(), truth.len(), mask.len())?;
    check_len(high.len(), truth.len(), mask.len())?;
    Ok(masked_mean((0..truth.len()).filter(|&i| mask[i]).map(|i| {
        f64::from(u8::from(low[i] <= truth[i] && truth[i] <= high[i]))
    })))
}

/// One row of a forecast export: one patient, time and variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub patient: String,
    pub time: f64,
    pub variable: String,
    pub kind: String,
    pub mean: f64,
    pub std: f64,
    /// Empirical quantiles of the per-path decoded values.
    pub q025: f64,
    pub q975: f64,
    /// Quantiles of the full predictive distribution (path mixture of head outputs).
    pub pi025: f64,
    pub pi975: f64,
    pub truth: Option<f64>,
    pub crps: Option<f64>,
    pub nll: Option<f64>,
    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    pub p4: Option<f64>,
    pub p5: Option<f64>,
    pub model: String,
    pub condition: String,
    pub seed: u64,
}

impl ForecastRow {
    pub fn probs(&self) -> Option<Vec<f64>> {
        [self.p0, self.p1, self.p2, self.p3, self.p4, self.p5].into_iter().collect()
    }

    pub fn set_probs(&mut self, p: &[f64]) {
        let get = |i: usize| p.get(i).copied();
        (self.p0, self.p1, self.p2, self.p3, self.p4, self.p5) = (get(0), get(1), get(2), get(3), get(4), get(5));
    }
}

pub fn write_forecasts(path: &Path, rows: &[ForecastRow]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRow>, Error> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Metrics of one variable within one forecast file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct VariableMetrics {
    pub variable: String,
    pub points: usize,
    pub rmse: Option<f64>,
    pub crps: Option<f64>,
    pub nll: Option<f64>,
    pub accuracy: Option<f64>,
    pub pe: Option<f64>,
    pub pe_sum: Option<f64>,
    pub coverage95: Option<f64>,
}

impl VariableMetrics {
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        [
            ("rmse", self.rmse),
            ("crps", self.crps),
            ("nll", self.nll),
            ("accuracy", self.accuracy),
            ("pe", self.pe),
            ("pe_sum", self.pe_sum),
            ("coverage95", self.coverage95),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Scores every variable of a forecast table, skipping rows without truth.
pub fn score_rows(rows: &[ForecastRow]) -> Result<Vec<VariableMetrics>, MetricError> {
    let mut by_var: BTreeMap<&str, Vec<&ForecastRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.truth.is_some()) {
        by_var.entry(r.variable.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (var, rs) in by_var {
        let truth: Vec<f64> = rs.iter().map(|r| r.truth.unwrap_or(f64::NAN)).collect();
        let mask = vec![true; rs.len()];
        let mut m = VariableMetrics { variable: var.to_string(), points: rs.len(), ..Default::default() };
        match rs[0].kind.as_str() {
            "categorical" => {
                let probs: Vec<Vec<f64>> = rs.iter().filter_map(|r| r.probs()).collect();
                check_len(probs.len(), rs.len(), rs.len())?;
                let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
                let t: Vec<usize> = truth.iter().map(|&y| y.round() as usize).collect();
                m.accuracy = accuracy(&pred, &t, &mask)?;
                m.pe = predictive_entropy(&probs, &mask)?.map(|e| e.per_point);
                let mut per_patient: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
                for (r, p) in rs.iter().zip(&probs) {
                    per_patient.entry(r.patient.as_str()).or_default().push(p.clone());
                }
                m.pe_sum = masked_mean(per_patient.values().map(|ps| ps.iter().map(|p| entropy(p)).sum()));
            }
            "poisson" => {
                let lam: Vec<f64> = rs.iter().map(|r| r.mean).collect();
                m.rmse = rmse(&lam, &truth, &mask)?;
                m.nll = poisson_nll(&lam, &truth, &mask)?;
            }
            _ => {
                let mean: Vec<f64> = rs.iter().map(|r| r.mean).collect();
                m.rmse = rmse(&mean, &truth, &mask)?;
                m.crps = masked_mean(rs.iter().filter_map(|r| r.crps));
                m.nll = masked_mean(rs.iter().filter_map(|r| r.nll));
                let lo: Vec<f64> = rs.iter().map(|r| r.pi025).collect();
                let hi: Vec<f64> = rs.iter().map(|r| r.pi975).collect();
                m.coverage95 = coverage95(&lo, &hi, &truth, &mask)?;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// One aggregated cell of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variable: String,
    pub metric: String,
    pub model: String,
    pub condition: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub const REPORT_NOTE: &str =
    "# crps: non-negative convention sigma*(z*(2*Phi(z)-1)+2*phi(z)-1/sqrt(pi)); pe: per point, pe_sum: summed per sequence";

/// Mean and sample standard deviation over seeds of every (variable, metric,
/// model, condition) cell.
pub fn aggregate(scored: &[(String, String, u64, Vec<VariableMetrics>)]) -> Vec<ReportRow> {
    let mut cells: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for (model, condition, _seed, vars) in scored {
        for v in vars {
            for (metric, value) in v.named() {
                cells
                    .entry((v.variable.clone(), metric.to_string(), model.clone(), condition.clone()))
                    .or_default()
                    .push(value);
            }
        }
    }
    cells
        .into_iter()
        .map(|((variable, metric, model, condition), vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            ReportRow { variable, metric, model, condition, mean, std, n_seeds: vals.len() }
        })
        .collect()
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<(), Error> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{REPORT_NOTE}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, Error> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let m = [true, true];
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], &m).unwrap(), Some(0.0));
        assert_eq!(rmse(&[3.0, 0.0], &[1.0, 2.0], &m).unwrap(), Some(2.0));
        assert_eq!(rmse(&[3.0, 4.0], &[0.0, 0.0], &m).unwrap(), Some(12.5f64.sqrt()));
        assert_eq!(rmse(&[3.0], &[0.0], &[false]).unwrap(), None);
    }

    #[test]
    fn accuracy_examples() {
        let m = [true; 4];
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 4], &m).unwrap(), Some(1.0));
        assert_eq!(accuracy(&[0, 0, 0, 0], &[1, 2, 3, 4], &m).unwrap(), Some(0.0));
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4], &m).unwrap(), Some(0.75));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[1.0 / 6.0; 6]) - 6f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn crps_degenerate_and_negative() {
        assert_eq!(crps_gaussian(1.0, 0.0, 3.5).unwrap(), 2.5);
        assert!(crps_gaussian(0.0, -1.0, 0.0).is_err());
        let at_mode = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((at_mode - ((2.0 / PI).sqrt() - 1.0 / PI.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(crps_ensemble(&[2.0, 2.0, 2.0], 2.0), 0.0);
        assert_eq!(crps_ensemble(&[1.5], 4.0), 2.5);
    }

    #[test]
    fn single_component_mixture_is_gaussian() {
        let a = crps_mixture(&[0.3], &[1.7], -0.4).unwrap();
        let b = crps_gaussian(0.3, 1.7, -0.4).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn point_mass_mixture_is_ensemble() {
        let xs = [0.1, -2.0, 3.0, 0.7];
        let a = crps_mixture(&xs, &[0.0; 4], 0.5).unwrap();
        assert!((a - crps_ensemble(&xs, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn mixture_quantile_of_one_gaussian() {
        let q = mixture_quantile(&[1.0], &[2.0], 0.975);
        assert!((q - (1.0 + 2.0 * 1.959_963_984_540_054)).abs() < 1e-8);
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_nll_point(1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((poisson_nll_point(2.0, 2.0) - (2.0 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn coverage_examples() {
        let m = [true; 3];
        assert_eq!(coverage95(&[0.0; 3], &[2.0; 3], &[1.0, 0.0, 2.0], &m).unwrap(), Some(1.0));
        assert_eq!(coverage95(&[5.0; 3], &[5.0; 3], &[1.0, 0.0, 2.0], &m).unwrap(), Some(0.0));
    }
}
