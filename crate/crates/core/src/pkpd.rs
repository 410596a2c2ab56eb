//! Synthetic lung-cancer cohort: tumour growth under chemo- and radiotherapy
//! with immune response and overall health, observed through Poisson cell
//! counts and ECOG performance scores.
//!
//! Time is measured in weeks. The mechanistic states follow
//!
//! ```text
//! dx = (ρ ln(K/x) − β_c c − (α_r d + β_r d²)) x dt + σ x dW
//! dc = (−φ_c c + u_c) dt
//! dd = (−φ_d d + u_d) dt
//! dI = (δ (1 − I/I_max) I − β_I c − α_I d + θ_I (I_max − I)/(1 + λ_I x) − ω_I I) dt
//! dS = (θ_S (1 − S)/(1 + λ_S x) − γ_I (I/I_max − 1)²) dt
//! ```
//!
//! Simulator conventions that are not part of the model equations:
//! * covariate modulation: clearance rates φ_c, φ_d scale by `1 − 0.002 (age − 80)`,
//!   θ_S by `bsa / 1.9`, and small-cell tumours grow 1.2× faster;
//! * treatments are unit-rate pulses one week long; radiotherapy follows each
//!   chemotherapy cycle by one week;
//! * initial state: x0 ~ U[5, 30], c = d = 0, I = I_max, S = 1;
//! * ECOG = min(5, ⌊6 (1 − S)⌋).
//!
//! α_c is sampled and recorded but does not enter the dynamics.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Split, VariableInfo, VariableKind, SCHEMA_VERSION};
use crate::rng::rng_for;
use crate::sde::{ControlSignal, TimeGrid};
use crate::Error;

pub const HORIZON_WEEKS: f64 = 52.0;
pub const OBS_POINTS: usize = 52;
pub const SIM_DT: f64 = 0.01;
/// Observation window is weeks 0–25, the forecast window weeks 26–51.
pub const SPLIT_WEEK: f64 = 25.0;
/// One treatment session lasts a day.
pub const PULSE_WEEKS: f64 = 1.0 / 7.0;
/// Radiotherapy follows each chemotherapy session after a week.
pub const RADIO_LAG_WEEKS: f64 = 1.0;
const X_FLOOR: f64 = 1e-6;

/// Population mean and standard deviation of one model constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopulationParam {
    pub mean: f64,
    pub sd: f64,
}

const fn pp(mean: f64, sd: f64) -> PopulationParam {
    PopulationParam { mean, sd }
}

/// Normal(μ, σ) population distributions of the mechanistic constants.
pub mod population {
    use super::{pp, PopulationParam};
    pub const RHO: PopulationParam = pp(8.0e-2, 1.0e-3);
    pub const K: PopulationParam = pp(100.0, 10.0);
    pub const ALPHA_R: PopulationParam = pp(0.1, 0.05);
    pub const BETA_R: PopulationParam = pp(0.1, 0.05);
    pub const ALPHA_C: PopulationParam = pp(0.1, 0.05);
    pub const BETA_C: PopulationParam = pp(0.1, 0.05);
    /// Radiotherapy clearance (listed as φ_r; drives the d equation).
    pub const PHI_D: PopulationParam = pp(0.1, 0.05);
    pub const PHI_C: PopulationParam = pp(0.1, 0.05);
    pub const DELTA: PopulationParam = pp(0.013, 0.005);
    pub const I_MAX: PopulationParam = pp(0.95, 0.4);
    pub const BETA_I: PopulationParam = pp(0.1, 0.05);
    pub const ALPHA_I: PopulationParam = pp(0.1, 0.05);
    pub const THETA_I: PopulationParam = pp(0.08, 0.04);
    pub const LAMBDA_I: PopulationParam = pp(0.005, 0.002);
    pub const OMEGA_I: PopulationParam = pp(0.15, 0.05);
    pub const GAMMA_I: PopulationParam = pp(8.0e-3, 5.0e-3);
    pub const THETA_S: PopulationParam = pp(100.0, 10.0);
    pub const LAMBDA_S: PopulationParam = pp(200.0, 20.0);
}

/// Upper bound for the immune capacity draw.
pub const I_MAX_CAP: f64 = 2.0;

/// Normal draw rejected below `0.1 · mean` (and above `upper`, if given).
pub fn truncated_normal<R: Rng>(rng: &mut R, p: PopulationParam, upper: Option<f64>) -> f64 {
    let lower = 0.1 * p.mean;
    let dist = Normal::new(p.mean, p.sd).expect("finite population parameters");
    loop {
        let v = dist.sample(rng);
        if v >= lower && upper.is_none_or(|u| v <= u) {
            return v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PkpdParams {
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
    pub phi_c: f64,
    pub phi_d: f64,
    pub delta: f64,
    #[serde(rename = "I_max")]
    pub i_max: f64,
    #[serde(rename = "beta_I")]
    pub beta_i: f64,
    #[serde(rename = "alpha_I")]
    pub alpha_i: f64,
    #[serde(rename = "theta_I")]
    pub theta_i: f64,
    #[serde(rename = "lambda_I")]
    pub lambda_i: f64,
    #[serde(rename = "omega_I")]
    pub omega_i: f64,
    #[serde(rename = "gamma_I")]
    pub gamma_i: f64,
    #[serde(rename = "theta_S")]
    pub theta_s: f64,
    #[serde(rename = "lambda_S")]
    pub lambda_s: f64,
}

impl PkpdParams {
    pub fn population_means() -> Self {
        use population::*;
        Self {
            rho: RHO.mean,
            k: K.mean,
            alpha_r: ALPHA_R.mean,
            beta_r: BETA_R.mean,
            alpha_c: ALPHA_C.mean,
            beta_c: BETA_C.mean,
            phi_c: PHI_C.mean,
            phi_d: PHI_D.mean,
            delta: DELTA.mean,
            i_max: I_MAX.mean,
            beta_i: BETA_I.mean,
            alpha_i: ALPHA_I.mean,
            theta_i: THETA_I.mean,
            lambda_i: LAMBDA_I.mean,
            omega_i: OMEGA_I.mean,
            gamma_i: GAMMA_I.mean,
            theta_s: THETA_S.mean,
            lambda_s: LAMBDA_S.mean,
        }
    }

    pub fn all_positive(&self) -> bool {
        [
            self.rho, self.k, self.alpha_r, self.beta_r, self.alpha_c, self.beta_c, self.phi_c, self.phi_d,
            self.delta, self.i_max, self.beta_i, self.alpha_i, self.theta_i, self.lambda_i, self.omega_i,
            self.gamma_i, self.theta_s, self.lambda_s,
        ]
        .iter()
        .all(|&v| v > 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorType {
    SmallCell,
    NonSmallCell,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCovariates {
    pub age: f64,
    pub weight: f64,
    pub height: f64,
    pub gender: Gender,
    pub tumor_type: TumorType,
    pub bmi: f64,
    pub bsa: f64,
}

impl BaselineCovariates {
    pub fn new(age: f64, weight: f64, height: f64, gender: Gender, tumor_type: TumorType) -> Self {
        let bmi = weight / (height / 100.0).powi(2);
        let bsa = (height * weight / 3600.0).sqrt();
        Self { age, weight, height, gender, tumor_type, bmi, bsa }
    }

    /// Age 80–120 years, weight 70–150 kg, height 100–200 cm, both binaries fair.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let age = rng.random_range(80.0..=120.0);
        let weight = rng.random_range(70.0..=150.0);
        let height = rng.random_range(100.0..=200.0);
        let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
        let tumor_type = if rng.random_bool(0.5) { TumorType::SmallCell } else { TumorType::NonSmallCell };
        Self::new(age, weight, height, gender, tumor_type)
    }

    /// Standardised covariate vector for the model encoders.
    pub fn model_features(&self) -> BTreeMap<String, f64> {
        let uni_sd = |range: f64| range / 12f64.sqrt();
        BTreeMap::from([
            ("age".to_string(), (self.age - 100.0) / uni_sd(40.0)),
            ("weight".to_string(), (self.weight - 110.0) / uni_sd(80.0)),
            ("height".to_string(), (self.height - 150.0) / uni_sd(100.0)),
            ("male".to_string(), f64::from(u8::from(self.gender == Gender::Male))),
            ("small_cell".to_string(), f64::from(u8::from(self.tumor_type == TumorType::SmallCell))),
        ])
    }
}

/// Independent Table draws, before covariate modulation.
pub fn sample_population_params<R: Rng>(rng: &mut R) -> PkpdParams {
    use population::*;
    let mut d = |p| truncated_normal(rng, p, None);
    let rho = d(RHO);
    let k = d(K);
    let alpha_r = d(ALPHA_R);
    let beta_r = d(BETA_R);
    let alpha_c = d(ALPHA_C);
    let beta_c = d(BETA_C);
    let phi_d = d(PHI_D);
    let phi_c = d(PHI_C);
    let delta = d(DELTA);
    let i_max = truncated_normal(rng, I_MAX, Some(I_MAX_CAP));
    let mut d = |p| truncated_normal(rng, p, None);
    PkpdParams {
        rho,
        k,
        alpha_r,
        beta_r,
        alpha_c,
        beta_c,
        phi_c,
        phi_d,
        delta,
        i_max,
        beta_i: d(BETA_I),
        alpha_i: d(ALPHA_I),
        theta_i: d(THETA_I),
        lambda_i: d(LAMBDA_I),
        omega_i: d(OMEGA_I),
        gamma_i: d(GAMMA_I),
        theta_s: d(THETA_S),
        lambda_s: d(LAMBDA_S),
    }
}

pub fn apply_covariates(p: &PkpdParams, cov: &BaselineCovariates) -> PkpdParams {
    let clearance = 1.0 - 0.002 * (cov.age - 80.0);
    let mut out = *p;
    out.phi_c *= clearance;
    out.phi_d *= clearance;
    out.theta_s *= cov.bsa / 1.9;
    if cov.tumor_type == TumorType::SmallCell {
        out.rho *= 1.2;
    }
    out
}

pub fn sample_params<R: Rng>(rng: &mut R, cov: &BaselineCovariates) -> PkpdParams {
    apply_covariates(&sample_population_params(rng), cov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSchedule {
    pub interval_weeks: f64,
    pub pulse_weeks: f64,
    pub chemo_times: Vec<f64>,
    pub radio_times: Vec<f64>,
}

impl TreatmentSchedule {
    pub fn none() -> Self {
        Self { interval_weeks: 0.0, pulse_weeks: PULSE_WEEKS, chemo_times: vec![], radio_times: vec![] }
    }

    /// Chemotherapy at weeks 1, 1 + i, 1 + 2i, …; radiotherapy one week after each.
    pub fn periodic(interval_weeks: f64, horizon: f64) -> Self {
        let mut chemo = Vec::new();
        let mut t = 1.0;
        while t < horizon {
            chemo.push(t);
            t += interval_weeks;
        }
        let radio = chemo.iter().map(|t| t + RADIO_LAG_WEEKS).filter(|&t| t < horizon).collect();
        Self { interval_weeks, pulse_weeks: PULSE_WEEKS, chemo_times: chemo, radio_times: radio }
    }

    fn on(times: &[f64], width: f64, t: f64) -> bool {
        times.iter().any(|&s| t >= s && t < s + width)
    }

    /// `[u_c(t), u_d(t)]`.
    pub fn rates(&self, t: f64) -> [f64; 2] {
        [
            f64::from(u8::from(Self::on(&self.chemo_times, self.pulse_weeks, t))),
            f64::from(u8::from(Self::on(&self.radio_times, self.pulse_weeks, t))),
        ]
    }

    /// Two-channel zero-order-hold signal with an event at every pulse edge.
    pub fn to_control(&self) -> ControlSignal {
        let mut edges: Vec<f64> = self
            .chemo_times
            .iter()
            .chain(&self.radio_times)
            .flat_map(|&s| [s, s + self.pulse_weeks])
            .collect();
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        let mut times = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for t in edges {
            let v = self.rates(t).to_vec();
            if values.last() != Some(&v) {
                times.push(t);
                values.push(v);
            }
        }
        ControlSignal { dim: 2, times, values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanisticTrajectory {
    pub grid: TimeGrid,
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub immune: Vec<f64>,
    pub health: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub x: f64,
    pub c: f64,
    pub d: f64,
    pub immune: f64,
    pub health: f64,
}

impl State {
    pub fn initial(x0: f64, p: &PkpdParams) -> Self {
        Self { x: x0, c: 0.0, d: 0.0, immune: p.i_max, health: 1.0 }
    }
}

impl MechanisticTrajectory {
    pub fn state(&self, k: usize) -> State {
        State { x: self.x[k], c: self.c[k], d: self.d[k], immune: self.immune[k], health: self.health[k] }
    }

    /// State at the grid point nearest to `t`.
    pub fn at(&self, t: f64) -> State {
        let k = self.grid.nearest_index(t).unwrap_or(self.grid.steps);
        self.state(k)
    }
}

/// Deterministic parts of the dynamics, `(dx, dc, dd, dI, dS)` per unit time,
/// with `u = [u_c, u_d]`.
pub fn drift(p: &PkpdParams, s: &State, u: [f64; 2]) -> [f64; 5] {
    let tumor = (p.rho * (p.k / s.x).ln() - p.beta_c * s.c - (p.alpha_r * s.d + p.beta_r * s.d * s.d)) * s.x;
    let chemo = -p.phi_c * s.c + u[0];
    let radio = -p.phi_d * s.d + u[1];
    let immune = p.delta * (1.0 - s.immune / p.i_max) * s.immune - p.beta_i * s.c - p.alpha_i * s.d
        + p.theta_i * (p.i_max - s.immune) / (1.0 + p.lambda_i * s.x)
        - p.omega_i * s.immune;
    let health = p.theta_s * (1.0 - s.health) / (1.0 + p.lambda_s * s.x)
        - p.gamma_i * (s.immune / p.i_max - 1.0).powi(2);
    [tumor, chemo, radio, immune, health]
}

/// Euler–Maruyama integration of the mechanistic model.
pub fn simulate(
    params: &PkpdParams,
    schedule: &TreatmentSchedule,
    x0: f64,
    horizon: f64,
    dt: f64,
    sigma_proc: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MechanisticTrajectory, Error> {
    if !(x0 > 0.0) {
        return Err(Error::Config(format!("initial tumour volume must be positive, got {x0}")));
    }
    let grid = TimeGrid::new(0.0, horizon, dt)?;
    let n = grid.steps + 1;
    let mut traj = MechanisticTrajectory {
        grid,
        x: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        immune: Vec::with_capacity(n),
        health: Vec::with_capacity(n),
    };
    let mut s = State::initial(x0, params);
    let sd = dt.sqrt();
    for k in 0..n {
        traj.x.push(s.x);
        traj.c.push(s.c);
        traj.d.push(s.d);
        traj.immune.push(s.immune);
        traj.health.push(s.health);
        if k == grid.steps {
            break;
        }
        let f = drift(params, &s, schedule.rates(grid.time(k)));
        let dw = if sigma_proc > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        } else {
            0.0
        };
        s = State {
            x: (s.x + f[0] * dt + sigma_proc * s.x * dw).max(X_FLOOR),
            c: (s.c + f[1] * dt).max(0.0),
            d: (s.d + f[2] * dt).max(0.0),
            immune: (s.immune + f[3] * dt).max(0.0),
            health: (s.health + f[4] * dt).clamp(0.0, 1.0),
        };
        if ![s.x, s.c, s.d, s.immune, s.health].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("PKPD state non-finite at step {}", k + 1)));
        }
    }
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalObservations {
    pub times: Vec<f64>,
    pub cell_count: Vec<u64>,
    pub ecog: Vec<u8>,
    pub mask: Vec<bool>,
    /// Latent tumour volume at each observation time.
    pub tumor_volume: Vec<f64>,
}

impl ClinicalObservations {
    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn ecog_score(health: f64) -> u8 {
    ((6.0 * (1.0 - health)).floor().clamp(0.0, 5.0)) as u8
}

pub fn weekly_times() -> Vec<f64> {
    (0..OBS_POINTS).map(|w| w as f64).collect()
}

/// Poisson cell counts and ECOG scores at the given times, all marked observed.
pub fn observe(traj: &MechanisticTrajectory, times: &[f64], rng: &mut ChaCha8Rng) -> ClinicalObservations {
    let mut out = ClinicalObservations {
        times: times.to_vec(),
        cell_count: Vec::with_capacity(times.len()),
        ecog: Vec::with_capacity(times.len()),
        mask: vec![true; times.len()],
        tumor_volume: Vec::with_capacity(times.len()),
    };
    for &t in times {
        let s = traj.at(t);
        out.cell_count.push(poisson_count(s.x, rng));
        out.ecog.push(ecog_score(s.health));
        out.tumor_volume.push(s.x);
    }
    out
}

pub fn poisson_count<R: Rng>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).map_or(0, |d| d.sample(rng) as u64)
}

/// Removes `round(frac · n)` points uniformly without replacement, never the first.
pub fn subsample(obs: &ClinicalObservations, missing_frac: f64, rng: &mut ChaCha8Rng) -> Result<ClinicalObservations, Error> {
    if !(0.0..1.0).contains(&missing_frac) {
        return Err(Error::Config(format!("missing fraction must lie in [0, 1), got {missing_frac}")));
    }
    let n = obs.times.len();
    let mut out = obs.clone();
    if n <= 1 {
        return Ok(out);
    }
    let remove = ((missing_frac * n as f64).round() as usize).min(n - 1);
    for i in sample_indices(rng, n - 1, remove) {
        out.mask[i + 1] = false;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub sigma_proc: f64,
    pub missing_frac: f64,
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    SIM_DT
}

/// Weekly values of every mechanistic state for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub id: String,
    pub times: Vec<f64>,
    pub tumor_volume: Vec<f64>,
    pub chemo: Vec<f64>,
    pub radio: Vec<f64>,
    pub immune: Vec<f64>,
    pub health: Vec<f64>,
}

pub fn variables() -> Vec<VariableInfo> {
    vec![
        VariableInfo { name: "cell_count".into(), kind: VariableKind::Poisson, readout: false },
        VariableInfo { name: "ecog".into(), kind: VariableKind::Categorical { classes: 6 }, readout: false },
        VariableInfo { name: "tumor_volume".into(), kind: VariableKind::Gaussian, readout: true },
    ]
}

pub fn simulate_patient(index: usize, cfg: &CohortConfig) -> Result<(Record, LatentTruth), Error> {
    let mut rng = rng_for(cfg.seed, &[index as u64]);
    let id = format!("pkpd-{:05}", index);
    let cov = BaselineCovariates::sample(&mut rng);
    let population = sample_population_params(&mut rng);
    let params = apply_covariates(&population, &cov);
    let interval = f64::from(rng.random_range(2u8..=5));
    let schedule = TreatmentSchedule::periodic(interval, HORIZON_WEEKS);
    let x0 = rng.random_range(5.0..=30.0);
    let traj = simulate(&params, &schedule, x0, HORIZON_WEEKS, cfg.dt, cfg.sigma_proc, &mut rng)?;
    let times = weekly_times();
    let full = observe(&traj, &times, &mut rng);
    let obs = subsample(&full, cfg.missing_frac, &mut rng)?;

    let masked = |vals: Vec<f64>| -> Vec<Option<f64>> {
        vals.into_iter().zip(&obs.mask).map(|(v, &m)| m.then_some(v)).collect()
    };
    let observations = BTreeMap::from([
        ("cell_count".to_string(), masked(obs.cell_count.iter().map(|&c| c as f64).collect())),
        ("ecog".to_string(), masked(obs.ecog.iter().map(|&e| f64::from(e)).collect())),
        ("tumor_volume".to_string(), obs.tumor_volume.iter().map(|&v| Some(v)).collect()),
    ]);
    let masks = BTreeMap::from([
        ("cell_count".to_string(), obs.mask.clone()),
        ("ecog".to_string(), obs.mask.clone()),
        ("tumor_volume".to_string(), vec![true; times.len()]),
    ]);
    let truth = LatentTruth {
        id: id.clone(),
        times: times.clone(),
        tumor_volume: times.iter().map(|&t| traj.at(t).x).collect(),
        chemo: times.iter().map(|&t| traj.at(t).c).collect(),
        radio: times.iter().map(|&t| traj.at(t).d).collect(),
        immune: times.iter().map(|&t| traj.at(t).immune).collect(),
        health: times.iter().map(|&t| traj.at(t).health).collect(),
    };
    let record = Record {
        schema_version: SCHEMA_VERSION,
        split: Split::for_id(&id),
        id,
        source: "pkpd".into(),
        time_unit: "weeks".into(),
        horizon: HORIZON_WEEKS,
        split_time: SPLIT_WEEK,
        variables: variables(),
        covariates: cov.model_features(),
        obs_times: times.clone(),
        observations,
        masks,
        controls: schedule.to_control(),
        baseline: Some(cov),
        params: Some(params),
        population_params: Some(population),
        schedule: Some(schedule),
        truth_grid: Some(times),
        truth_tumor_volume: Some(truth.tumor_volume.clone()),
    };
    Ok((record, truth))
}

/// Simulates `n` patients; patient `i` draws from its own stream of `cfg.seed`.
pub fn generate_cohort(n: usize, cfg: &CohortConfig) -> Result<(Vec<Record>, Vec<LatentTruth>), Error> {
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let (r, t) = simulate_patient(i, cfg)?;
        records.push(r);
        truths.push(t);
    }
    Ok((records, truths))
}
