use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::dataset::{Record, VariableKind};
use crate::diffcore::{Bound, DiffError, Tape, Tensor, Var};
use crate::metrics::LAMBDA_FLOOR;
use crate::sde::{
    control_at, em_update, euler_update, kl_increment, ControlSignal, SdeError, TimeGrid, WienerIncrements,
    DIFFUSION_FLOOR,
};
use crate::Error;

use super::{EncoderBatch, Encoded, Model, ModelKind, PointTargets};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionMode {
    Learned,
    /// Diffusion replaced by exact zeros.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    /// Steps `k < posterior_steps` use the posterior drift; later steps the prior.
    pub posterior_steps: usize,
    pub diffusion: DiffusionMode,
    pub with_kl: bool,
    /// Keep only the current state on the tape between steps (no gradients).
    pub compact: bool,
}

impl RolloutOptions {
    pub fn training(steps: usize) -> Self {
        Self { posterior_steps: steps, diffusion: DiffusionMode::Learned, with_kl: true, compact: false }
    }

    pub fn prior() -> Self {
        Self { posterior_steps: 0, diffusion: DiffusionMode::Learned, with_kl: false, compact: false }
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub grid: TimeGrid,
    /// Empty in compact mode.
    pub states: Vec<Var>,
    /// Per-row `[rows, 1]` path KL over the posterior steps.
    pub path_kl: Option<Var>,
}

/// Head output in normalised units.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    /// `y = loc + scale · z` with `z ~ N(mean_z, std_z²)`.
    Gaussian { mean_z: Var, std_z: Var },
    Poisson { rate: Var },
    Categorical { log_probs: Var },
}

/// Scalar sums over a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    /// Log-likelihood of the readout variables, fitted on detached latents.
    pub readout: Option<Var>,
    pub kl0: Var,
    pub path_kl: Option<Var>,
    pub rows: usize,
}

/// Noise for one batch row.
#[derive(Clone, Debug)]
pub struct RowDraw {
    pub eps: Vec<f64>,
    pub noise: WienerIncrements,
}

pub type StateHook<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<(), DiffError> + 'a;

fn concat(tape: &mut Tape, parts: &[Option<Var>]) -> Result<Var, DiffError> {
    let vs: Vec<Var> = parts.iter().flatten().copied().collect();
    if vs.len() == 1 {
        Ok(vs[0])
    } else {
        tape.concat_cols(&vs)
    }
}

fn sde_err(step: usize, e: DiffError) -> SdeError {
    match e {
        DiffError::NonFinite { .. } => SdeError::NonFiniteState { step, source: e },
        other => SdeError::Diff(other),
    }
}

impl Model {
    /// Solver grid spanning model time `[0, 1]`.
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::covering(0.0, 1.0, self.config.dt).expect("validated dt")
    }

    pub fn prior_drift(&self, tape: &mut Tape, bound: &Bound, x: Var, u: Option<Var>) -> Result<Var, DiffError> {
        let net = self.nets.prior_drift.as_ref().ok_or_else(|| DiffError::Shape("model has no drift net".into()))?;
        let inp = concat(tape, &[Some(x), u])?;
        net.forward(tape, bound, inp)
    }

    pub fn posterior_drift(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        u: Option<Var>,
        c: Var,
    ) -> Result<Var, DiffError> {
        let net = self.nets.post_drift.as_ref().ok_or_else(|| DiffError::Shape("model has no posterior drift".into()))?;
        let inp = concat(tape, &[Some(x), u, Some(c)])?;
        net.forward(tape, bound, inp)
    }

    /// Learned diffusion, floored at [`DIFFUSION_FLOOR`].
    pub fn diffusion(&self, tape: &mut Tape, bound: &Bound, x: Var, u: Option<Var>) -> Result<Var, DiffError> {
        let net = self.nets.diffusion.as_ref().ok_or_else(|| DiffError::Shape("model has no diffusion net".into()))?;
        let inp = concat(tape, &[Some(x), u])?;
        let s = net.forward(tape, bound, inp)?;
        tape.clamp_min(s, DIFFUSION_FLOOR)
    }

    /// `mean + std ⊙ ε` with encoder row `origin[b]` feeding batch row `b`.
    pub fn sample_x0(&self, tape: &mut Tape, enc: &Encoded, origin: &[usize], eps: &[Vec<f64>]) -> Result<Var, DiffError> {
        let dx = self.config.latent_dim;
        let m = tape.gather_rows(enc.q0_mean, origin)?;
        let s = tape.gather_rows(enc.q0_std, origin)?;
        let e = tape.constant(Tensor::matrix(origin.len(), dx, eps.concat()))?;
        let se = tape.mul(s, e)?;
        tape.add(m, se)
    }

    /// Latent SDE over the full grid: posterior drift for the first
    /// `opts.posterior_steps` steps, prior drift afterwards.
    #[allow(clippy::too_many_arguments)]
    pub fn sde_rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: Option<(&Encoded, &EncoderBatch)>,
        origin: &[usize],
        controls: &[ControlSignal],
        x0: Var,
        noise: &[WienerIncrements],
        opts: RolloutOptions,
        hook: &mut StateHook<'_>,
    ) -> Result<Rollout, SdeError> {
        let grid = self.grid();
        let rows = origin.len();
        if noise.len() != rows || noise.iter().any(|w| w.steps < grid.steps || w.dim != self.config.latent_dim) {
            return Err(SdeError::Noise { got: noise.len(), want: rows });
        }
        if opts.posterior_steps > 0 && enc.and_then(|(e, _)| e.context).is_none() {
            return Err(SdeError::Diff(DiffError::Shape("posterior steps need a context signal".into())));
        }
        let dx = self.config.latent_dim;
        let base = tape.len();
        let mut states = Vec::new();
        let mut x = x0;
        hook(tape, 0, x).map_err(|e| sde_err(0, e))?;
        if !opts.compact {
            states.push(x);
        }
        let mut kl = if opts.with_kl && !opts.compact {
            Some(tape.constant(Tensor::zeros(vec![rows, 1]))?)
        } else {
            None
        };
        let mut ctx_cache: Option<(Vec<usize>, Var)> = None;
        for k in 0..grid.steps {
            let t = grid.time(k);
            let want_kl = kl.is_some();
            let result = (|tape: &mut Tape, ctx_cache: &mut Option<(Vec<usize>, Var)>| -> Result<(Var, Option<Var>), DiffError> {
                let u = control_at(tape, controls, t * self.spec.time_scale)?;
                let mu = self.prior_drift(tape, bound, x, u)?;
                let sigma = match opts.diffusion {
                    DiffusionMode::Learned => self.diffusion(tape, bound, x, u)?,
                    DiffusionMode::Zero => tape.constant(Tensor::zeros(vec![rows, dx]))?,
                };
                let mut inc = None;
                let drift = if k < opts.posterior_steps {
                    let (e, batch) = enc.expect("checked above");
                    let ctx_all = e.context.expect("checked above");
                    let idx: Vec<usize> =
                        origin.iter().map(|&r| batch.knot_at(r, t) * batch.rows + r).collect();
                    let c = match ctx_cache {
                        Some((cached, v)) if *cached == idx => *v,
                        _ => {
                            let v = tape.gather_rows(ctx_all, &idx)?;
                            *ctx_cache = Some((idx, v));
                            v
                        }
                    };
                    let nu = self.posterior_drift(tape, bound, x, u, c)?;
                    if want_kl {
                        inc = Some(kl_increment(tape, nu, mu, sigma, grid.dt)?);
                    }
                    nu
                } else {
                    mu
                };
                let data: Vec<f64> = noise.iter().flat_map(|w| w.step(k).iter().copied()).collect();
                let dw = tape.constant(Tensor::matrix(rows, dx, data))?;
                Ok((em_update(tape, x, drift, sigma, dw, grid.dt)?, inc))
            })(tape, &mut ctx_cache);
            let (next, inc) = result.map_err(|e| sde_err(k, e))?;
            if let (Some(total), Some(inc)) = (kl, inc) {
                kl = Some(tape.add(total, inc).map_err(|e| sde_err(k, e))?);
            }
            x = next;
            if opts.compact {
                let v = tape.value(x).clone();
                tape.truncate(base);
                ctx_cache = None;
                x = tape.constant(v)?;
            } else {
                states.push(x);
            }
            hook(tape, k + 1, x).map_err(|e| sde_err(k + 1, e))?;
        }
        Ok(Rollout { grid, states, path_kl: kl })
    }

    /// Deterministic Euler rollout of the prior drift.
    pub fn ode_rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        controls: &[ControlSignal],
        x0: Var,
        compact: bool,
        hook: &mut StateHook<'_>,
    ) -> Result<Rollout, SdeError> {
        let grid = self.grid();
        let base = tape.len();
        let mut states = Vec::new();
        let mut x = x0;
        hook(tape, 0, x).map_err(|e| sde_err(0, e))?;
        if !compact {
            states.push(x);
        }
        for k in 0..grid.steps {
            let t = grid.time(k);
            x = (|| {
                let u = control_at(tape, controls, t * self.spec.time_scale)?;
                let f = self.prior_drift(tape, bound, x, u)?;
                euler_update(tape, x, f, grid.dt)
            })()
            .map_err(|e| sde_err(k, e))?;
            if compact {
                let v = tape.value(x).clone();
                tape.truncate(base);
                x = tape.constant(v)?;
            } else {
                states.push(x);
            }
            hook(tape, k + 1, x).map_err(|e| sde_err(k + 1, e))?;
        }
        Ok(Rollout { grid, states, path_kl: None })
    }

    /// Stacked-LSTM rollout over per-row stamps (model time). State `i` of
    /// row `b` belongs to `stamps[b][i]`; rows shorter than the longest are
    /// padded with zero-length steps.
    pub fn lstm_rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        controls: &[ControlSignal],
        x0: Var,
        stamps: &[Vec<f64>],
    ) -> Result<Vec<Var>, DiffError> {
        let rows = stamps.len();
        let steps = stamps.iter().map(Vec::len).max().unwrap_or(0);
        let out = self.nets.lstm_out.as_ref().ok_or_else(|| DiffError::Shape("model has no LSTM".into()))?;
        let mut h: Vec<Var> = Vec::new();
        let mut c: Vec<Var> = Vec::new();
        for cell in &self.nets.lstm {
            h.push(tape.constant(Tensor::zeros(vec![rows, cell.hidden]))?);
            c.push(tape.constant(Tensor::zeros(vec![rows, cell.hidden]))?);
        }
        let at = |s: &[f64], i: usize| s[i.min(s.len() - 1)];
        let mut states = vec![x0];
        let mut x = x0;
        for i in 1..steps {
            let dt_feat: Vec<f64> =
                stamps.iter().map(|s| (at(s, i) - at(s, i - 1)) / self.spec.nominal_dt - 1.0).collect();
            let dtv = tape.constant(Tensor::matrix(rows, 1, dt_feat))?;
            let u = if self.spec.control_dim > 0 {
                let data: Vec<f64> = stamps
                    .iter()
                    .zip(controls)
                    .flat_map(|(s, ctl)| ctl.query(at(s, i - 1) * self.spec.time_scale))
                    .collect();
                Some(tape.constant(Tensor::matrix(rows, self.spec.control_dim, data))?)
            } else {
                None
            };
            let mut inp = concat(tape, &[Some(x), u, Some(dtv)])?;
            for (l, cell) in self.nets.lstm.iter().enumerate() {
                let (hn, cn) = cell.step(tape, bound, inp, h[l], c[l])?;
                h[l] = hn;
                c[l] = cn;
                inp = hn;
            }
            let dxv = out.forward(tape, bound, inp)?;
            x = tape.add(x, dxv)?;
            states.push(x);
        }
        Ok(states)
    }

    pub fn head(&self, tape: &mut Tape, bound: &Bound, var: usize, x: Var) -> Result<HeadOutput, DiffError> {
        let v = &self.spec.variables[var];
        let out = self.nets.heads[var].forward(tape, bound, x)?;
        Ok(match v.info.kind {
            VariableKind::Gaussian => {
                let mean_z = tape.slice_cols(out, 0, 1)?;
                let raw = tape.slice_cols(out, 1, 2)?;
                let sp = tape.softplus(raw)?;
                HeadOutput::Gaussian { mean_z, std_z: tape.clamp_min(sp, self.config.head_sigma_floor)? }
            }
            VariableKind::Poisson => {
                let sp = tape.softplus(out)?;
                let rate = tape.scale(sp, v.scale)?;
                HeadOutput::Poisson { rate: tape.clamp_min(rate, LAMBDA_FLOOR)? }
            }
            VariableKind::Categorical { .. } => HeadOutput::Categorical { log_probs: tape.log_softmax_rows(out)? },
        })
    }

    /// Summed log-likelihood of native-unit targets `ys` under a head output.
    pub fn loglik(&self, tape: &mut Tape, var: usize, out: HeadOutput, ys: &[f64]) -> Result<Var, DiffError> {
        let v = &self.spec.variables[var];
        let n = ys.len();
        match out {
            HeadOutput::Gaussian { mean_z, std_z } => {
                let z: Vec<f64> = ys.iter().map(|y| (y - v.loc) / v.scale).collect();
                let zc = tape.constant(Tensor::matrix(n, 1, z))?;
                let d = tape.sub(zc, mean_z)?;
                let u = tape.div(d, std_z)?;
                let sq = tape.square(u)?;
                let sq = tape.sum(sq)?;
                let ln_s = tape.ln(std_z)?;
                let ln_s = tape.sum(ln_s)?;
                let a = tape.scale(sq, -0.5)?;
                let b = tape.sub(a, ln_s)?;
                tape.add_scalar(b, -(n as f64) * (0.5 * (2.0 * PI).ln() + v.scale.ln()))
            }
            HeadOutput::Poisson { rate } => {
                let yc = tape.constant(Tensor::matrix(n, 1, ys.to_vec()))?;
                let ln_l = tape.ln(rate)?;
                let yl = tape.mul(yc, ln_l)?;
                let yl = tape.sum(yl)?;
                let l = tape.sum(rate)?;
                let d = tape.sub(yl, l)?;
                tape.add_scalar(d, -ys.iter().map(|&y| ln_gamma(y + 1.0)).sum::<f64>())
            }
            HeadOutput::Categorical { log_probs } => {
                let classes = tape.value(log_probs).cols();
                let mut onehot = vec![0.0; n * classes];
                for (i, &y) in ys.iter().enumerate() {
                    let k = (y.round().max(0.0) as usize).min(classes - 1);
                    onehot[i * classes + k] = 1.0;
                }
                let oh = tape.constant(Tensor::matrix(n, classes, onehot))?;
                let p = tape.mul(oh, log_probs)?;
                tape.sum(p)
            }
        }
    }

    /// Scores `targets` against states chosen by `index(row, native time)`,
    /// which returns a row of `stacked`.
    fn decode_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stacked: Var,
        targets: &PointTargets,
        index: &dyn Fn(usize, f64) -> Option<usize>,
    ) -> Result<(Option<Var>, Option<Var>), DiffError> {
        let (mut recon, mut readout): (Option<Var>, Option<Var>) = (None, None);
        for (vi, pts) in targets.per_var.iter().enumerate() {
            let (idx, ys): (Vec<usize>, Vec<f64>) =
                pts.iter().filter_map(|&(row, t, y)| index(row, t).map(|i| (i, y))).unzip();
            if idx.is_empty() {
                continue;
            }
            let mut x = tape.gather_rows(stacked, &idx)?;
            let is_readout = self.spec.variables[vi].info.readout;
            if is_readout {
                x = tape.detach(x)?;
            }
            let out = self.head(tape, bound, vi, x)?;
            let ll = self.loglik(tape, vi, out, &ys)?;
            let slot = if is_readout { &mut readout } else { &mut recon };
            *slot = Some(match *slot {
                Some(acc) => tape.add(acc, ll)?,
                None => ll,
            });
        }
        Ok((recon, readout))
    }

    /// ELBO ingredients over every observation of `records`, one batch row
    /// per record with noise from `draws`.
    pub fn loss_terms(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        records: &[&Record],
        draws: &[RowDraw],
    ) -> Result<LossTerms, Error> {
        let rows = records.len();
        if draws.len() != rows {
            return Err(Error::Config(format!("{} noise draws for {rows} rows", draws.len())));
        }
        let batch = EncoderBatch::new(&self.spec, self.config.prefix_frac, records, f64::INFINITY)?;
        let enc = self.encode(tape, bound, &batch)?;
        let origin: Vec<usize> = (0..rows).collect();
        let eps: Vec<Vec<f64>> = draws.iter().map(|d| d.eps.clone()).collect();
        let x0 = self.sample_x0(tape, &enc, &origin, &eps)?;
        let kl0_rows = self.kl0(tape, bound, enc.q0_mean, enc.q0_std)?;
        let kl0 = tape.sum(kl0_rows)?;
        let controls: Vec<ControlSignal> = records.iter().map(|r| r.controls.clone()).collect();
        let targets = PointTargets::new(&self.spec, records, f64::NEG_INFINITY, f64::INFINITY);
        let scale = self.spec.time_scale;
        let (recon, readout, path_kl) = match self.kind {
            ModelKind::Sde | ModelKind::Ode => {
                let roll = if self.kind == ModelKind::Sde {
                    let noise: Vec<WienerIncrements> = draws.iter().map(|d| d.noise.clone()).collect();
                    let steps = self.grid().steps;
                    self.sde_rollout(
                        tape,
                        bound,
                        Some((&enc, &batch)),
                        &origin,
                        &controls,
                        x0,
                        &noise,
                        RolloutOptions::training(steps),
                        &mut |_, _, _| Ok(()),
                    )?
                } else {
                    self.ode_rollout(tape, bound, &controls, x0, false, &mut |_, _, _| Ok(()))?
                };
                let stacked = tape.stack_rows(&roll.states)?;
                let grid = roll.grid;
                let (recon, readout) = self.decode_loss(tape, bound, stacked, &targets, &|row, t| {
                    grid.nearest_index(t / scale).map(|k| k * rows + row)
                })?;
                let pk = match roll.path_kl {
                    Some(v) => Some(tape.sum(v)?),
                    None => None,
                };
                (recon, readout, pk)
            }
            ModelKind::Lstm => {
                let stamps: Vec<Vec<f64>> =
                    batch.knots.iter().map(|k| k.iter().map(|&(t, _)| t).collect()).collect();
                let states = self.lstm_rollout(tape, bound, &controls, x0, &stamps)?;
                let stacked = tape.stack_rows(&states)?;
                let (recon, readout) = self.decode_loss(tape, bound, stacked, &targets, &|row, t| {
                    let tm = t / scale;
                    stamps[row].iter().position(|&s| (s - tm).abs() < 1e-12).map(|i| i * rows + row)
                })?;
                (recon, readout, None)
            }
        };
        let recon = match recon {
            Some(r) => r,
            None => tape.constant(Tensor::scalar(0.0))?,
        };
        Ok(LossTerms { recon, readout, kl0, path_kl, rows })
    }
}
