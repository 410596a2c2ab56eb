use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::dataset::{Record, VariableKind};
use crate::diffcore::{DiffError, Tape, Var};
use crate::metrics::{crps_mixture, mixture_quantile, poisson_nll_point, ForecastRow};
use crate::rng::{derive_seed, key_of, rng_for};
use crate::sde::{sample_wiener, WienerIncrements};
use crate::Error;

use super::{DiffusionMode, EncoderBatch, HeadOutput, Model, ModelKind, RolloutOptions};

/// Head parameters of every sample path at one point, in native units.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleParams {
    Gaussian { mu: Vec<f64>, sigma: Vec<f64> },
    Poisson { lambda: Vec<f64> },
    Categorical { probs: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointForecast {
    pub time: f64,
    pub variable: String,
    pub samples: SampleParams,
    pub truth: Option<f64>,
}

/// Forecast of every variable at every forecast-window stamp of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub patient: String,
    pub points: Vec<PointForecast>,
}

fn head_values(model: &Model, tape: &mut Tape, var: usize, out: HeadOutput) -> SampleParams {
    let v = &model.spec.variables[var];
    let col = |t: &Tape, x: Var| t.value(x).data().to_vec();
    match out {
        HeadOutput::Gaussian { mean_z, std_z } => SampleParams::Gaussian {
            mu: col(tape, mean_z).iter().map(|a| v.loc + v.scale * a).collect(),
            sigma: col(tape, std_z).iter().map(|s| v.scale * s).collect(),
        },
        HeadOutput::Poisson { rate } => SampleParams::Poisson { lambda: col(tape, rate) },
        HeadOutput::Categorical { log_probs } => {
            let t = tape.value(log_probs);
            SampleParams::Categorical {
                probs: (0..t.rows()).map(|r| t.row(r).iter().map(|l| l.exp()).collect()).collect(),
            }
        }
    }
}

fn decode_all(model: &Model, tape: &mut Tape, bound: &crate::diffcore::Bound, x: Var) -> Result<Vec<SampleParams>, DiffError> {
    (0..model.n_vars())
        .map(|v| {
            let out = model.head(tape, bound, v, x)?;
            Ok(head_values(model, tape, v, out))
        })
        .collect()
}

/// Per-sample draws for a record: `(ε for x̃0, Wiener increments)`.
pub(crate) fn forecast_draws(model: &Model, record: &Record, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<WienerIncrements>) {
    let key = key_of(&record.id);
    let dx = model.config.latent_dim;
    let grid = model.grid();
    (0..n as u64)
        .map(|s| {
            let mut rng = rng_for(seed, &[key, s, 0]);
            let eps = (0..dx).map(|_| StandardNormal.sample(&mut rng)).collect();
            (eps, sample_wiener(&grid, dx, derive_seed(seed, &[key, s, 1])))
        })
        .unzip()
}

/// Conditions on the observation window (`t <= split_time`) and samples
/// `n_samples` continuations over the forecast window.
pub fn forecast_record(model: &Model, record: &Record, n_samples: usize, seed: u64) -> Result<PredictiveDistribution, Error> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let scale = model.spec.time_scale;
    let grid = model.grid();
    let queries: Vec<usize> = (0..record.obs_times.len()).filter(|&j| record.obs_times[j] > record.split_time).collect();
    let mut query_steps = Vec::with_capacity(queries.len());
    for &j in &queries {
        let t = record.obs_times[j];
        let k = grid
            .nearest_index(t / scale)
            .ok_or_else(|| Error::Config(format!("record {}: time {t} outside the model grid", record.id)))?;
        query_steps.push(k);
    }
    let batch = EncoderBatch::new(&model.spec, model.config.prefix_frac, &[record], record.split_time)?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape)?;
    let enc = model.encode(&mut tape, &bound, &batch)?;
    let (eps, noise) = forecast_draws(model, record, n_samples, seed);
    let origin = vec![0usize; n_samples];
    let x0 = model.sample_x0(&mut tape, &enc, &origin, &eps)?;
    let controls = vec![record.controls.clone(); n_samples];

    // Decoded head parameters at each query step.
    let mut decoded: BTreeMap<usize, Vec<SampleParams>> = BTreeMap::new();
    match model.kind {
        ModelKind::Sde | ModelKind::Ode => {
            let wanted: std::collections::BTreeSet<usize> = query_steps.iter().copied().collect();
            let mut hook = |tape: &mut Tape, k: usize, x: Var| -> Result<(), DiffError> {
                if wanted.contains(&k) {
                    let vals = decode_all(model, tape, &bound, x)?;
                    decoded.insert(k, vals);
                }
                Ok(())
            };
            if model.kind == ModelKind::Sde {
                let split_step = (record.split_time / scale / grid.dt).round() as usize;
                let opts = RolloutOptions {
                    posterior_steps: split_step.min(grid.steps),
                    diffusion: DiffusionMode::Learned,
                    with_kl: false,
                    compact: true,
                };
                model.sde_rollout(&mut tape, &bound, Some((&enc, &batch)), &origin, &controls, x0, &noise, opts, &mut hook)?;
            } else {
                model.ode_rollout(&mut tape, &bound, &controls, x0, true, &mut hook)?;
            }
        }
        ModelKind::Lstm => {
            let mut stamps: Vec<f64> = batch.knots[0].iter().map(|&(t, _)| t).collect();
            let first_query = stamps.len();
            stamps.extend(queries.iter().map(|&j| record.obs_times[j] / scale));
            let states = model.lstm_rollout(&mut tape, &bound, &controls, x0, &vec![stamps; n_samples])?;
            for (qi, &k) in query_steps.iter().enumerate() {
                let vals = decode_all(model, &mut tape, &bound, states[first_query + qi])?;
                decoded.insert(k + qi * (grid.steps + 1), vals);
            }
        }
    }
    let mut points = Vec::with_capacity(queries.len() * model.n_vars());
    for (qi, (&j, &k)) in queries.iter().zip(&query_steps).enumerate() {
        let key = if model.kind == ModelKind::Lstm { k + qi * (grid.steps + 1) } else { k };
        let vals = &decoded[&key];
        for (v, spec) in model.spec.variables.iter().enumerate() {
            points.push(PointForecast {
                time: record.obs_times[j],
                variable: spec.info.name.clone(),
                samples: vals[v].clone(),
                truth: record.value(&spec.info.name, j),
            });
        }
    }
    Ok(PredictiveDistribution { patient: record.id.clone(), points })
}

pub fn forecast(model: &Model, records: &[Record], n_samples: usize, seed: u64) -> Result<Vec<PredictiveDistribution>, Error> {
    records.iter().map(|r| forecast_record(model, r, n_samples, seed)).collect()
}

/// Linear-interpolation sample quantile.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

fn poisson_mixture_quantile(lambda: &[f64], q: f64) -> f64 {
    let dists: Vec<Poisson> = lambda.iter().map(|&l| Poisson::new(l).expect("positive rate")).collect();
    let mut k = 0u64;
    loop {
        let cdf = dists.iter().map(|d| d.cdf(k)).sum::<f64>() / dists.len() as f64;
        if cdf >= q || k > 10_000_000 {
            return k as f64;
        }
        k += 1;
    }
}

fn gaussian_mixture_nll(mu: &[f64], sigma: &[f64], y: f64) -> f64 {
    let logs: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| -0.5 * ((y - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .collect();
    let mx = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    -(mx + (logs.iter().map(|l| (l - mx).exp()).sum::<f64>() / logs.len() as f64).ln())
}

/// Flattens a predictive distribution into export rows with ensemble statistics.
pub fn summarize(dist: &PredictiveDistribution, model: &str, condition: &str, seed: u64) -> Result<Vec<ForecastRow>, Error> {
    let mut rows = Vec::with_capacity(dist.points.len());
    for p in &dist.points {
        let mut row = ForecastRow {
            patient: dist.patient.clone(),
            time: p.time,
            variable: p.variable.clone(),
            kind: String::new(),
            mean: 0.0,
            std: 0.0,
            q025: 0.0,
            q975: 0.0,
            pi025: 0.0,
            pi975: 0.0,
            truth: p.truth,
            crps: None,
            nll: None,
            p0: None,
            p1: None,
            p2: None,
            p3: None,
            p4: None,
            p5: None,
            model: model.to_string(),
            condition: condition.to_string(),
            seed,
        };
        match &p.samples {
            SampleParams::Gaussian { mu, sigma } => {
                row.kind = "gaussian".into();
                row.mean = mean(mu);
                row.std = (mean(&sigma.iter().map(|s| s * s).collect::<Vec<_>>()) + pop_var(mu)).sqrt();
                row.q025 = quantile(mu, 0.025);
                row.q975 = quantile(mu, 0.975);
                row.pi025 = mixture_quantile(mu, sigma, 0.025);
                row.pi975 = mixture_quantile(mu, sigma, 0.975);
                if let Some(y) = p.truth {
                    row.crps = Some(crps_mixture(mu, sigma, y).map_err(|e| Error::Numerical(e.to_string()))?);
                    row.nll = Some(gaussian_mixture_nll(mu, sigma, y));
                }
            }
            SampleParams::Poisson { lambda } => {
                row.kind = "poisson".into();
                row.mean = mean(lambda);
                row.std = (row.mean + pop_var(lambda)).sqrt();
                row.q025 = quantile(lambda, 0.025);
                row.q975 = quantile(lambda, 0.975);
                row.pi025 = poisson_mixture_quantile(lambda, 0.025);
                row.pi975 = poisson_mixture_quantile(lambda, 0.975);
                row.nll = p.truth.map(|y| poisson_nll_point(row.mean, y));
            }
            SampleParams::Categorical { probs } => {
                row.kind = "categorical".into();
                let k = probs[0].len();
                let pbar: Vec<f64> = (0..k).map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / probs.len() as f64).collect();
                let expected: Vec<f64> =
                    probs.iter().map(|p| p.iter().enumerate().map(|(c, pc)| c as f64 * pc).sum()).collect();
                row.mean = pbar.iter().enumerate().map(|(c, pc)| c as f64 * pc).sum();
                row.std = pbar.iter().enumerate().map(|(c, pc)| (c as f64 - row.mean).powi(2) * pc).sum::<f64>().sqrt();
                row.q025 = quantile(&expected, 0.025);
                row.q975 = quantile(&expected, 0.975);
                let class_at = |q: f64| {
                    let mut acc = 0.0;
                    for (c, pc) in pbar.iter().enumerate() {
                        acc += pc;
                        if acc >= q - 1e-12 {
                            return c as f64;
                        }
                    }
                    (k - 1) as f64
                };
                row.pi025 = class_at(0.025);
                row.pi975 = class_at(0.975);
                row.nll = p.truth.map(|y| {
                    let c = (y.round().max(0.0) as usize).min(k - 1);
                    -pbar[c].max(1e-300).ln()
                });
                row.set_probs(&pbar);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

impl SampleParams {
    pub fn kind(&self) -> VariableKind {
        match self {
            SampleParams::Gaussian { .. } => VariableKind::Gaussian,
            SampleParams::Poisson { .. } => VariableKind::Poisson,
            SampleParams::Categorical { probs } => VariableKind::Categorical { classes: probs[0].len() },
        }
    }
}
