//! ELBO assembly, KL annealing, AdamW and the epoch loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Split};
use crate::diffcore::{DiffError, Tape};
use crate::metrics::{score_rows, ForecastRow, VariableMetrics};
use crate::model::{forecast_record, summarize, Checkpoint, Model, ModelConfig, ModelKind, ModelSpec, RowDraw};
use crate::rng::{derive_seed, key_of, rng_for};
use crate::sde::sample_wiener;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub anneal_cycles: usize,
    pub beta_max: f64,
    /// Overrides the annealing schedule when set.
    pub fixed_beta: Option<f64>,
    pub seed: u64,
    /// Posterior samples per datum in the ELBO estimate.
    pub n_samples: usize,
    pub clip_norm: f64,
    pub threads: usize,
    /// Predictive samples for the validation RMSE/CRPS; 0 disables them.
    pub val_samples: usize,
    /// Fill the `wall_seconds` column (makes the log run-dependent).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            lr0: 1e-3,
            lr_decay: 0.97,
            weight_decay: 0.01,
            anneal_cycles: 4,
            beta_max: 10.0,
            fixed_beta: None,
            seed: 0,
            n_samples: 1,
            clip_norm: 10.0,
            threads: 1,
            val_samples: 16,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |what: &str| Err(Error::Config(format!("train config: {what}")));
        if self.epochs == 0 || self.batch_size == 0 || self.n_samples == 0 || self.threads == 0 {
            return bad("epochs, batch_size, n_samples and threads must be positive");
        }
        if self.anneal_cycles == 0 {
            return bad("anneal_cycles must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.weight_decay >= 0.0 && self.beta_max >= 0.0) {
            return bad("lr0 and lr_decay must be positive, weight_decay and beta_max non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if matches!(self.fixed_beta, Some(b) if !(b >= 0.0)) {
            return bad("fixed_beta must be non-negative");
        }
        Ok(())
    }
}

/// ELBO terms summed over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    pub recon_loglik: f64,
    pub kl0: f64,
    pub path_kl: f64,
    pub beta: f64,
    pub rows: usize,
}

impl ElboBreakdown {
    /// `recon − β (kl0 + path_kl)`.
    pub fn objective(&self) -> f64 {
        self.recon_loglik - self.beta * (self.kl0 + self.path_kl)
    }

    fn accumulate(&mut self, o: &ElboBreakdown) {
        self.recon_loglik += o.recon_loglik;
        self.kl0 += o.kl0;
        self.path_kl += o.path_kl;
        self.rows += o.rows;
    }
}

/// Evaluates the ELBO of `records` under `draws`; with `with_grad` also
/// returns the gradient of the summed negative ELBO in the store's flat layout.
pub fn elbo(
    model: &Model,
    records: &[&Record],
    draws: &[RowDraw],
    beta: f64,
    with_grad: bool,
) -> Result<(ElboBreakdown, Option<Vec<f64>>), Error> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape)?;
    let terms = model.loss_terms(&mut tape, &bound, records, draws)?;
    let mut recon = terms.recon;
    if let Some(r) = terms.readout {
        recon = tape.add(recon, r)?;
    }
    let mut kl = terms.kl0;
    if let Some(p) = terms.path_kl {
        kl = tape.add(kl, p)?;
    }
    let weighted = tape.scale(kl, beta)?;
    let neg = tape.sub(weighted, recon)?;
    let out = ElboBreakdown {
        recon_loglik: tape.value(recon).item(),
        kl0: tape.value(terms.kl0).item(),
        path_kl: terms.path_kl.map_or(0.0, |p| tape.value(p).item()),
        beta,
        rows: terms.rows,
    };
    let grads = if with_grad { Some(crate::diffcore::eval_with_grad(&tape, neg, &model.store, &bound)?) } else { None };
    Ok((out, grads))
}

/// Cyclic schedule: linear ramp from 0 to `beta_max` over the first half of
/// each cycle, then constant.
pub fn anneal_beta(step: usize, total_steps: usize, cycles: usize, beta_max: f64) -> f64 {
    let len = total_steps as f64 / cycles.max(1) as f64;
    let p = (step as f64 % len) / len;
    beta_max * (2.0 * p).min(1.0)
}

pub fn exp_lr(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: AdamParams) -> Result<(), Error> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adamw: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * params[i]);
    }
    Ok(())
}

/// Rescales `grads` to global norm at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Noise for `record`, sample `s`, under the stream `stream` (an epoch or the
/// validation stream).
pub fn row_draw(model: &Model, record: &Record, seed: u64, stream: u64, s: u64) -> RowDraw {
    let key = key_of(&record.id);
    let dx = model.config.latent_dim;
    let mut rng = rng_for(seed, &[stream, key, s, 2]);
    let eps = (0..dx).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = sample_wiener(&model.grid(), dx, derive_seed(seed, &[stream, key, s, 3]));
    RowDraw { eps, noise }
}

const VAL_STREAM: u64 = u64::MAX;

/// Sums the ELBO over `records` in chunks, optionally with gradients, sharding
/// each chunk over `threads` and reducing in shard order.
fn batch_elbo(
    model: &Model,
    records: &[&Record],
    draws: &[RowDraw],
    beta: f64,
    with_grad: bool,
    threads: usize,
) -> Result<(ElboBreakdown, Option<Vec<f64>>), Error> {
    let shards = threads.min(records.len()).max(1);
    let per = records.len().div_ceil(shards);
    let results: Vec<Result<(ElboBreakdown, Option<Vec<f64>>), Error>> = if shards == 1 {
        vec![elbo(model, records, draws, beta, with_grad)]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = records
                .chunks(per)
                .zip(draws.chunks(per))
                .map(|(r, d)| sc.spawn(move || elbo(model, r, d, beta, with_grad)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("shard thread panicked")).collect()
        })
    };
    let mut total = ElboBreakdown { beta, ..Default::default() };
    let mut grads: Option<Vec<f64>> = None;
    for r in results {
        let (b, g) = r?;
        total.accumulate(&b);
        if let Some(g) = g {
            match &mut grads {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => grads = Some(g),
            }
        }
    }
    Ok((total, grads))
}

/// Mean negative ELBO per datum at β = 1 under the fixed validation noise.
pub fn validation_loss(model: &Model, records: &[Record], cfg: &TrainConfig) -> Result<f64, Error> {
    if records.is_empty() {
        return Err(Error::Dataset("no validation records".into()));
    }
    let mut total = ElboBreakdown { beta: 1.0, ..Default::default() };
    for chunk in records.chunks(cfg.batch_size) {
        let refs: Vec<&Record> = chunk.iter().collect();
        let draws: Vec<RowDraw> = chunk.iter().map(|r| row_draw(model, r, cfg.seed, VAL_STREAM, 0)).collect();
        let (b, _) = batch_elbo(model, &refs, &draws, 1.0, false, cfg.threads)?;
        total.accumulate(&b);
    }
    Ok(-total.objective() / total.rows as f64)
}

/// Forecast metrics on `records`: mean RMSE and CRPS over the Gaussian variables.
pub fn validation_metrics(model: &Model, records: &[Record], n_samples: usize, seed: u64) -> Result<(Option<f64>, Option<f64>), Error> {
    let mut rows: Vec<ForecastRow> = Vec::new();
    for r in records {
        match forecast_record(model, r, n_samples, seed) {
            Ok(d) => rows.extend(summarize(&d, model.kind.name(), "val", seed)?),
            Err(Error::Dataset(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let scored = score_rows(&rows).map_err(|e| Error::Numerical(e.to_string()))?;
    let gaussian: Vec<&VariableMetrics> = scored.iter().filter(|m| m.crps.is_some()).collect();
    let mean_of = |f: &dyn Fn(&VariableMetrics) -> Option<f64>| {
        let v: Vec<f64> = gaussian.iter().filter_map(|m| f(m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok((mean_of(&|m| m.rmse), mean_of(&|m| m.crps)))
}

/// One row of the metrics log; `objective` is the mean negative ELBO per datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub objective: f64,
    pub recon: f64,
    pub kl0: f64,
    pub path_kl: f64,
    pub beta: f64,
    pub lr: f64,
    pub val_rmse: Option<f64>,
    pub val_crps: Option<f64>,
    pub wall_seconds: Option<f64>,
}

/// Per-optimizer-step statistics (per datum).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub epoch: usize,
    pub step: usize,
    pub objective: f64,
    pub kl0: f64,
    pub path_kl: f64,
    pub beta: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: Vec<StepStats>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_FILE: &str = "checkpoint.json";
pub const LAST_FILE: &str = "last.json";

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{other:?}")),
    })?;
    if log.is_empty() {
        w.write_record(["epoch", "objective", "recon", "kl0", "path_kl", "beta", "lr", "val_rmse", "val_crps", "wall_seconds"])?;
    }
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{other:?}")),
    })?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Diff(DiffError::NonFinite { .. }) | Error::Sde(_) | Error::Numerical(_) => {
            Error::Divergence { epoch, reason: e.to_string() }
        }
        other => other,
    }
}

/// Trains a fresh model on the training split of `records`. Validation uses
/// the validation split, falling back to the training records when it is
/// empty. With `out`, the metrics log and the best/last checkpoints are
/// written there after every epoch; on divergence the last good checkpoint
/// stays on disk and [`Error::Divergence`] is returned.
pub fn train(
    kind: ModelKind,
    model_config: &ModelConfig,
    records: &[Record],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutput, Error> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let train_set: Vec<Record> = {
        let t: Vec<Record> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        if t.is_empty() {
            log::warn!("no training-split records; training on all {} records", records.len());
            records.to_vec()
        } else {
            t
        }
    };
    let val_set: Vec<Record> = {
        let v: Vec<Record> = records.iter().filter(|r| r.split == Split::Val).cloned().collect();
        if v.is_empty() {
            log::warn!("no validation-split records; validating on the training records");
            train_set.clone()
        } else {
            v
        }
    };
    let spec = ModelSpec::fit(&train_set)?;
    let mut model = Model::new(kind, model_config.clone(), spec, cfg.seed)?;
    let paths = out.map(|d| (d.join(METRICS_FILE), d.join(BEST_FILE), d.join(LAST_FILE)));

    let n = train_set.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let hp = AdamParams { weight_decay: cfg.weight_decay, ..AdamParams::default() };
    let mut adam = AdamState::new(model.param_count());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut best: Option<Checkpoint> = None;
    let mut last: Option<Checkpoint> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = exp_lr(epoch, cfg.lr0, cfg.lr_decay);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[key_of("shuffle"), epoch as u64]));
        let mut sum = ElboBreakdown::default();
        let mut weighted = 0.0;
        let mut beta_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let beta = cfg.fixed_beta.unwrap_or_else(|| anneal_beta(step, total_steps, cfg.anneal_cycles, cfg.beta_max));
            let mut refs = Vec::with_capacity(idx.len() * cfg.n_samples);
            let mut draws = Vec::with_capacity(idx.len() * cfg.n_samples);
            for s in 0..cfg.n_samples as u64 {
                for &i in idx {
                    refs.push(&train_set[i]);
                    draws.push(row_draw(&model, &train_set[i], cfg.seed, epoch as u64, s));
                }
            }
            let (bd, grads) =
                batch_elbo(&model, &refs, &draws, beta, true, cfg.threads).map_err(|e| divergence(epoch, e))?;
            let obj = bd.objective();
            if !obj.is_finite() {
                return Err(Error::Divergence { epoch, reason: format!("non-finite objective at step {step}") });
            }
            let mut g = grads.expect("gradients requested");
            let rows = bd.rows as f64;
            g.iter_mut().for_each(|x| *x /= rows);
            let grad_norm = clip_grad_norm(&mut g, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Divergence { epoch, reason: format!("non-finite gradient at step {step}") });
            }
            adamw_step(model.store.flat_mut(), &g, &mut adam, lr, hp)?;
            steps.push(StepStats {
                epoch,
                step,
                objective: -obj / rows,
                kl0: bd.kl0 / rows,
                path_kl: bd.path_kl / rows,
                beta,
                grad_norm,
            });
            // Batch sums re-normalised by the sample count give per-datum sums.
            let s = cfg.n_samples as f64;
            sum.recon_loglik += bd.recon_loglik / s;
            sum.kl0 += bd.kl0 / s;
            sum.path_kl += bd.path_kl / s;
            weighted += -obj / s;
            beta_sum += beta * idx.len() as f64;
        }
        let nf = n as f64;
        let val_loss = validation_loss(&model, &val_set, cfg).map_err(|e| divergence(epoch, e))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, reason: "non-finite validation loss".into() });
        }
        let (val_rmse, val_crps) = if cfg.val_samples > 0 {
            validation_metrics(&model, &val_set, cfg.val_samples, cfg.seed).map_err(|e| divergence(epoch, e))?
        } else {
            (None, None)
        };
        let row = EpochLog {
            epoch,
            objective: weighted / nf,
            recon: sum.recon_loglik / nf,
            kl0: sum.kl0 / nf,
            path_kl: sum.path_kl / nf,
            beta: beta_sum / nf,
            lr,
            val_rmse,
            val_crps,
            wall_seconds: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}: objective {:.6} recon {:.6} kl0 {:.6} path_kl {:.6} val_loss {val_loss:.6}",
            row.objective,
            row.recon,
            row.kl0,
            row.path_kl
        );
        log.push(row);
        let ck = model.checkpoint(epoch + 1, cfg.seed, Some(val_loss));
        let improved = best.as_ref().is_none_or(|b| b.val_loss.is_some_and(|bl| val_loss < bl));
        if let Some((metrics, best_path, last_path)) = &paths {
            write_log(metrics, &log)?;
            ck.save(last_path)?;
            if improved {
                ck.save(best_path)?;
            }
        }
        if improved {
            best = Some(ck.clone());
        }
        last = Some(ck);
    }
    Ok(TrainOutput {
        model,
        best: best.expect("at least one epoch"),
        last: last.expect("at least one epoch"),
        log,
        steps,
    })
}

/// Output paths of a training run directory.
pub fn run_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(METRICS_FILE), dir.join(BEST_FILE), dir.join(LAST_FILE))
}
