//! Ornstein–Uhlenbeck pilot data: `dx = −θ x dt + σ dW`, observed with
//! Gaussian noise at irregular times.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Split, VariableInfo, VariableKind, SCHEMA_VERSION};
use crate::rng::rng_for;
use crate::sde::ControlSignal;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuConfig {
    pub n: usize,
    pub theta: f64,
    pub sigma: f64,
    pub obs_noise: f64,
    /// Uniformly drawn observation times per sequence, plus one at t = 0.
    pub points: usize,
    pub horizon: f64,
    pub x0_spread: f64,
    pub seed: u64,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self { n: 64, theta: 1.0, sigma: 0.3, obs_noise: 0.1, points: 24, horizon: 4.0, x0_spread: 2.0, seed: 0 }
    }
}

pub fn generate_ou(cfg: &OuConfig) -> Result<Vec<Record>, Error> {
    if cfg.n == 0 || cfg.points == 0 || !(cfg.horizon > 0.0) {
        return Err(Error::Config("OU dataset needs n, points and horizon positive".into()));
    }
    let noise = Normal::new(0.0, cfg.obs_noise).map_err(|e| Error::Config(e.to_string()))?;
    (0..cfg.n)
        .map(|i| {
            let mut rng = rng_for(cfg.seed, &[i as u64]);
            let mut times: Vec<f64> = (0..cfg.points).map(|_| rng.random_range(0.0..cfg.horizon)).collect();
            times.push(0.0);
            times.sort_by(f64::total_cmp);
            times.dedup();
            let mut x = rng.random_range(-cfg.x0_spread..=cfg.x0_spread);
            let mut t = 0.0;
            let mut ys = Vec::with_capacity(times.len());
            for &ti in &times {
                // Exact transition over [t, ti].
                let dt = ti - t;
                let decay = (-cfg.theta * dt).exp();
                let var = cfg.sigma.powi(2) * (1.0 - decay * decay) / (2.0 * cfg.theta);
                let z: f64 = StandardNormal.sample(&mut rng);
                x = x * decay + var.sqrt() * z;
                t = ti;
                ys.push(Some(x + noise.sample(&mut rng)));
            }
            let id = format!("ou-{i:05}");
            Ok(Record {
                schema_version: SCHEMA_VERSION,
                split: Split::for_id(&id),
                id,
                source: "ou".into(),
                time_unit: "units".into(),
                horizon: cfg.horizon,
                split_time: cfg.horizon / 2.0,
                variables: vec![VariableInfo { name: "y".into(), kind: VariableKind::Gaussian, readout: false }],
                covariates: BTreeMap::new(),
                observations: BTreeMap::from([("y".to_string(), ys)]),
                masks: BTreeMap::from([("y".to_string(), vec![true; times.len()])]),
                obs_times: times,
                controls: ControlSignal::empty(0),
                baseline: None,
                params: None,
                population_params: None,
                schedule: None,
                truth_grid: None,
                truth_tumor_volume: None,
            })
        })
        .collect()
}
