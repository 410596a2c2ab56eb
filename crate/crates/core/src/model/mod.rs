//! Latent SDE and its two baselines.
//!
//! All three models share the observation encoders and decoder heads:
//!
//! * a forward GRU over the first `c` observations gives the initial-state
//!   posterior `Q0 = N(m, diag s²)`;
//! * a reverse GRU over every observation gives the context signal, queried
//!   with the first knot at or after `t` (latent SDE only);
//! * one affine head per variable maps a latent state to a Gaussian, Poisson
//!   or categorical distribution.
//!
//! The latent SDE evolves `dx = ν(x, u, c) dt + σ(x, u) dW` under the
//! posterior and `dx = μ(x, u) dt + σ(x, u) dW` under the prior. The latent
//! ODE integrates `dx = μ(x, u) dt` with Euler steps. The latent LSTM advances
//! the state at observation stamps with stacked LSTM cells.
//!
//! Model time is the dataset's native time divided by [`ModelSpec::time_scale`],
//! so every horizon maps onto `[0, 1]` and the solver step `dt` is a fraction
//! of it.

mod encode;
mod forecast;
mod rollout;

pub use encode::{EncoderBatch, Encoded, PointTargets};
pub use forecast::{forecast, forecast_record, summarize, PointForecast, PredictiveDistribution, SampleParams};
pub use rollout::{DiffusionMode, HeadOutput, LossTerms, Rollout, RolloutOptions, RowDraw, StateHook};

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Record, VariableInfo, VariableKind};
use crate::diffcore::{Activation, Dense, DenseStack, GruStack, LstmCell, ParamId, ParamSpec, ParamStore};
use crate::rng::rng_for;
use crate::Error;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sde,
    Ode,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sde => "sde",
            ModelKind::Ode => "ode",
            ModelKind::Lstm => "lstm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub drift_width: usize,
    pub drift_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub context_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Solver step in model time.
    pub dt: f64,
    /// Fraction of observed points fed to the initial-state encoder.
    pub prefix_frac: f64,
    pub head_sigma_floor: f64,
    pub q0_std_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            drift_width: 64,
            drift_layers: 2,
            encoder_hidden: 256,
            encoder_layers: 2,
            context_dim: 16,
            lstm_hidden: 64,
            lstm_layers: 2,
            dt: 0.01,
            prefix_frac: 0.25,
            head_sigma_floor: 1e-3,
            q0_std_floor: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("drift_width", self.drift_width),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_layers", self.encoder_layers),
            ("context_dim", self.context_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::Config(format!("dt must lie in (0, 1], got {}", self.dt)));
        }
        if !(self.prefix_frac > 0.0 && self.prefix_frac <= 1.0) {
            return Err(Error::Config(format!("prefix_frac must lie in (0, 1], got {}", self.prefix_frac)));
        }
        Ok(())
    }
}

/// Per-variable scaling fitted on the training records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    pub info: VariableInfo,
    /// Head output location and scale (native units).
    pub loc: f64,
    pub scale: f64,
    /// Standardisation of the encoder feature.
    pub feat_mean: f64,
    pub feat_std: f64,
}

impl VarSpec {
    /// Encoder feature before standardisation.
    pub fn raw_feature(&self, y: f64) -> f64 {
        match self.info.kind {
            VariableKind::Poisson => y.max(0.0).ln_1p(),
            _ => y,
        }
    }

    pub fn feature(&self, y: f64) -> f64 {
        (self.raw_feature(y) - self.feat_mean) / self.feat_std
    }

    fn output_dim(&self) -> usize {
        match self.info.kind {
            VariableKind::Gaussian => 2,
            VariableKind::Poisson => 1,
            VariableKind::Categorical { classes } => classes,
        }
    }
}

/// Everything about the data a model needs besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variables: Vec<VarSpec>,
    pub covariates: Vec<String>,
    pub control_dim: usize,
    pub time_scale: f64,
    /// Median spacing of encoder stamps in model time, for the LSTM's Δt feature.
    pub nominal_dt: f64,
}

fn moments(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 1.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if s > 1e-8 { s } else { 1.0 })
}

impl ModelSpec {
    pub fn fit(records: &[Record]) -> Result<Self, Error> {
        let first = records.first().ok_or_else(|| Error::Dataset("cannot fit a model on no records".into()))?;
        let covariates: Vec<String> = first.covariates.keys().cloned().collect();
        for r in records {
            if r.variables != first.variables || r.covariates.keys().ne(covariates.iter()) {
                return Err(Error::Dataset(format!("record {} has a different variable or covariate set", r.id)));
            }
            if r.controls.dim != first.controls.dim {
                return Err(Error::Dataset(format!("record {} has a different control dimension", r.id)));
            }
        }
        let time_scale = records.iter().map(|r| r.horizon).fold(0.0, f64::max);
        if !(time_scale > 0.0) {
            return Err(Error::Dataset("records must have a positive horizon".into()));
        }
        let mut variables = Vec::new();
        for info in &first.variables {
            let vals: Vec<f64> = records
                .iter()
                .flat_map(|r| (0..r.obs_times.len()).filter_map(|j| r.value(&info.name, j)))
                .collect();
            let (mean, std) = moments(&vals);
            let (loc, scale) = match info.kind {
                VariableKind::Gaussian => (mean, std),
                VariableKind::Poisson => (0.0, mean.max(1.0)),
                VariableKind::Categorical { .. } => (0.0, 1.0),
            };
            let mut v = VarSpec { info: info.clone(), loc, scale, feat_mean: 0.0, feat_std: 1.0 };
            let feats: Vec<f64> = vals.iter().map(|&y| v.raw_feature(y)).collect();
            (v.feat_mean, v.feat_std) = moments(&feats);
            variables.push(v);
        }
        let mut gaps = Vec::new();
        for r in records {
            let stamps: Vec<f64> = (0..r.obs_times.len())
                .filter(|&j| first.variables.iter().any(|v| !v.readout && r.value(&v.name, j).is_some()))
                .map(|j| r.obs_times[j] / time_scale)
                .collect();
            gaps.extend(stamps.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0));
        }
        gaps.sort_by(f64::total_cmp);
        let nominal_dt = gaps.get(gaps.len() / 2).copied().unwrap_or(1.0);
        Ok(Self { variables, covariates, control_dim: first.controls.dim, time_scale, nominal_dt })
    }

    pub fn encoded_variables(&self) -> impl Iterator<Item = &VarSpec> {
        self.variables.iter().filter(|v| !v.info.readout)
    }

    /// Width of one encoder input row: feature and mask per encoded variable,
    /// covariates, and time.
    pub fn encoder_input(&self) -> usize {
        2 * self.encoded_variables().count() + self.covariates.len() + 1
    }

    pub fn check_record(&self, r: &Record) -> Result<(), Error> {
        let names: BTreeSet<&str> = r.variables.iter().map(|v| v.name.as_str()).collect();
        if self.variables.iter().any(|v| !names.contains(v.info.name.as_str()))
            || r.covariates.keys().ne(self.covariates.iter())
            || r.controls.dim != self.control_dim
        {
            return Err(Error::Dataset(format!("record {} does not match the model's data spec", r.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Nets {
    pub q0_gru: GruStack,
    pub q0_head: Dense,
    pub ctx_gru: Option<GruStack>,
    pub ctx_proj: Option<Dense>,
    pub prior_drift: Option<DenseStack>,
    pub post_drift: Option<DenseStack>,
    pub diffusion: Option<DenseStack>,
    pub lstm: Vec<LstmCell>,
    pub lstm_out: Option<Dense>,
    pub p0_mean: ParamId,
    pub p0_logstd: ParamId,
    pub heads: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub(crate) nets: Nets,
}

fn build(kind: ModelKind, c: &ModelConfig, spec: &ModelSpec, seed: u64) -> (ParamStore, Nets) {
    let mut rng = rng_for(seed, &[crate::rng::key_of("init")]);
    let mut s = ParamStore::new();
    let dx = c.latent_dim;
    let du = spec.control_dim;
    let enc_in = spec.encoder_input();
    let q0_gru = GruStack::new(&mut s, "q0_gru", enc_in, c.encoder_hidden, c.encoder_layers, &mut rng);
    let q0_head =
        Dense::new(&mut s, "q0_head", c.encoder_hidden + spec.covariates.len(), 2 * dx, Activation::Identity, &mut rng);
    let mlp = |s: &mut ParamStore, name: &str, input: usize, out: Activation, rng: &mut _| {
        DenseStack::mlp(s, name, input, c.drift_width, c.drift_layers, dx, Activation::Tanh, out, rng)
    };
    let (mut ctx_gru, mut ctx_proj, mut prior_drift, mut post_drift, mut diffusion) = (None, None, None, None, None);
    let (mut lstm, mut lstm_out) = (Vec::new(), None);
    match kind {
        ModelKind::Sde => {
            ctx_gru = Some(GruStack::new(&mut s, "ctx_gru", enc_in, c.encoder_hidden, c.encoder_layers, &mut rng));
            ctx_proj = Some(Dense::new(&mut s, "ctx_proj", c.encoder_hidden, c.context_dim, Activation::Tanh, &mut rng));
            prior_drift = Some(mlp(&mut s, "prior_drift", dx + du, Activation::Identity, &mut rng));
            post_drift = Some(mlp(&mut s, "post_drift", dx + du + c.context_dim, Activation::Identity, &mut rng));
            diffusion = Some(mlp(&mut s, "diffusion", dx + du, Activation::Softplus, &mut rng));
        }
        ModelKind::Ode => {
            prior_drift = Some(mlp(&mut s, "prior_drift", dx + du, Activation::Identity, &mut rng));
        }
        ModelKind::Lstm => {
            for l in 0..c.lstm_layers {
                let input = if l == 0 { dx + du + 1 } else { c.lstm_hidden };
                lstm.push(LstmCell::new(&mut s, &format!("lstm.{l}"), input, c.lstm_hidden, &mut rng));
            }
            lstm_out = Some(Dense::new(&mut s, "lstm_out", c.lstm_hidden, dx, Activation::Identity, &mut rng));
        }
    }
    let p0_mean = s.add("p0.mean", vec![dx], vec![0.0; dx]);
    let p0_logstd = s.add("p0.logstd", vec![dx], vec![0.0; dx]);
    let heads = spec
        .variables
        .iter()
        .map(|v| Dense::new(&mut s, &format!("head.{}", v.info.name), dx, v.output_dim(), Activation::Identity, &mut rng))
        .collect();
    let nets = Nets {
        q0_gru,
        q0_head,
        ctx_gru,
        ctx_proj,
        prior_drift,
        post_drift,
        diffusion,
        lstm,
        lstm_out,
        p0_mean,
        p0_logstd,
        heads,
    };
    (s, nets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub spec: ModelSpec,
    pub params: Vec<ParamSpec>,
    pub values: Vec<f64>,
    pub epoch: usize,
    pub seed: u64,
    /// Seed stream the next epoch would draw from.
    pub rng_state: Vec<u64>,
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub normalizer: Option<serde_json::Value>,
}

impl Model {
    pub fn new(kind: ModelKind, config: ModelConfig, spec: ModelSpec, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let (store, nets) = build(kind, &config, &spec, seed);
        Ok(Self { kind, config, spec, store, nets })
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    pub fn n_vars(&self) -> usize {
        self.spec.variables.len()
    }

    pub fn checkpoint(&self, epoch: usize, seed: u64, val_loss: Option<f64>) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            kind: self.kind,
            config: self.config.clone(),
            spec: self.spec.clone(),
            params: self.store.specs().to_vec(),
            values: self.store.flat().to_vec(),
            epoch,
            seed,
            rng_state: vec![seed, epoch as u64],
            val_loss,
            normalizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Error> {
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Config(format!(
                "checkpoint schema_version {} (expected {CHECKPOINT_SCHEMA})",
                ck.schema_version
            )));
        }
        let mut model = Self::new(ck.kind, ck.config.clone(), ck.spec.clone(), 0)?;
        if model.store.specs() != ck.params.as_slice() {
            return Err(Error::Config("checkpoint parameter layout does not match its configuration".into()));
        }
        model.store = ParamStore::from_parts(ck.params.clone(), ck.values.clone())?;
        Ok(model)
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
