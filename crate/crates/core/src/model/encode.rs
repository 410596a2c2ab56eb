use crate::dataset::Record;
use crate::diffcore::{Bound, DiffError, Tape, Tensor, Var};
use crate::Error;

use super::{Model, ModelSpec};

/// Padded encoder inputs for a batch of records, one step per observed stamp.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    pub rows: usize,
    pub steps: usize,
    pub inputs: Vec<Tensor>,
    pub step_masks: Vec<Vec<f64>>,
    pub prefix_masks: Vec<Vec<f64>>,
    /// Per row, `(model time, step)` of each observed stamp.
    pub knots: Vec<Vec<(f64, usize)>>,
    pub covariates: Option<Tensor>,
}

impl EncoderBatch {
    /// Uses the stamps with `t <= until` (native time) at which at least one
    /// encoded variable is observed.
    pub fn new(spec: &ModelSpec, prefix_frac: f64, records: &[&Record], until: f64) -> Result<Self, Error> {
        let rows = records.len();
        if rows == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        let vars: Vec<_> = spec.encoded_variables().collect();
        let width = spec.encoder_input();
        let mut stamps = Vec::with_capacity(rows);
        for r in records {
            spec.check_record(r)?;
            let s: Vec<usize> = (0..r.obs_times.len())
                .filter(|&j| r.obs_times[j] <= until && vars.iter().any(|v| r.value(&v.info.name, j).is_some()))
                .collect();
            if s.is_empty() {
                return Err(Error::Dataset(format!("record {}: no observation to encode", r.id)));
            }
            stamps.push(s);
        }
        let steps = stamps.iter().map(Vec::len).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(steps);
        let mut step_masks = Vec::with_capacity(steps);
        let mut prefix_masks = Vec::with_capacity(steps);
        for i in 0..steps {
            let mut data = vec![0.0; rows * width];
            let mut mask = vec![0.0; rows];
            let mut prefix = vec![0.0; rows];
            for (row, (r, s)) in records.iter().zip(&stamps).enumerate() {
                let Some(&j) = s.get(i) else { continue };
                let out = &mut data[row * width..(row + 1) * width];
                for (k, v) in vars.iter().enumerate() {
                    if let Some(y) = r.value(&v.info.name, j) {
                        out[2 * k] = v.feature(y);
                        out[2 * k + 1] = 1.0;
                    }
                }
                let base = 2 * vars.len();
                for (k, c) in spec.covariates.iter().enumerate() {
                    out[base + k] = r.covariates[c];
                }
                out[width - 1] = r.obs_times[j] / spec.time_scale;
                mask[row] = 1.0;
                let c = ((prefix_frac * s.len() as f64).ceil() as usize).max(1);
                if i < c {
                    prefix[row] = 1.0;
                }
            }
            inputs.push(Tensor::matrix(rows, width, data));
            step_masks.push(mask);
            prefix_masks.push(prefix);
        }
        let knots = records
            .iter()
            .zip(&stamps)
            .map(|(r, s)| s.iter().enumerate().map(|(i, &j)| (r.obs_times[j] / spec.time_scale, i)).collect())
            .collect();
        let nc = spec.covariates.len();
        let covariates = (nc > 0).then(|| {
            let data = records.iter().flat_map(|r| spec.covariates.iter().map(|c| r.covariates[c])).collect();
            Tensor::matrix(rows, nc, data)
        });
        Ok(Self { rows, steps, inputs, step_masks, prefix_masks, knots, covariates })
    }

    /// Step index of the first knot at or after `t`, or the last knot.
    pub fn knot_at(&self, row: usize, t: f64) -> usize {
        let k = &self.knots[row];
        k.iter().find(|(tk, _)| *tk >= t - 1e-12).unwrap_or(&k[k.len() - 1]).1
    }
}

/// Encoder outputs on the tape for the `rows` records of a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub q0_mean: Var,
    pub q0_std: Var,
    /// `[steps * rows, context_dim]`; row `i * rows + r` is the knot of record `r` at step `i`.
    pub context: Option<Var>,
}

/// Observed values to score, per variable: `(record row, native time, value)`.
#[derive(Clone, Debug, Default)]
pub struct PointTargets {
    pub per_var: Vec<Vec<(usize, f64, f64)>>,
}

impl PointTargets {
    pub fn new(spec: &ModelSpec, records: &[&Record], from: f64, until: f64) -> Self {
        let per_var = spec
            .variables
            .iter()
            .map(|v| {
                let mut pts = Vec::new();
                for (row, r) in records.iter().enumerate() {
                    for (j, &t) in r.obs_times.iter().enumerate() {
                        if t >= from && t <= until {
                            if let Some(y) = r.value(&v.info.name, j) {
                                pts.push((row, t, y));
                            }
                        }
                    }
                }
                pts
            })
            .collect();
        Self { per_var }
    }

    pub fn count(&self) -> usize {
        self.per_var.iter().map(Vec::len).sum()
    }
}

impl Model {
    /// Initial-state posterior and, for the latent SDE, the context knots.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, batch: &EncoderBatch) -> Result<Encoded, DiffError> {
        let inputs: Vec<Var> = batch.inputs.iter().map(|t| tape.constant(t.clone())).collect::<Result<_, _>>()?;
        let hs = self.nets.q0_gru.scan(tape, bound, &inputs, &batch.prefix_masks)?;
        let mut last = *hs.last().ok_or(DiffError::EmptySequence)?;
        if let Some(cov) = &batch.covariates {
            let c = tape.constant(cov.clone())?;
            last = tape.concat_cols(&[last, c])?;
        }
        let out = self.nets.q0_head.forward(tape, bound, last)?;
        let dx = self.config.latent_dim;
        let q0_mean = tape.slice_cols(out, 0, dx)?;
        let raw = tape.slice_cols(out, dx, 2 * dx)?;
        let sp = tape.softplus(raw)?;
        let q0_std = tape.clamp_min(sp, self.config.q0_std_floor)?;

        let context = match (&self.nets.ctx_gru, &self.nets.ctx_proj) {
            (Some(gru), Some(proj)) => {
                let rev_in: Vec<Var> = inputs.iter().rev().copied().collect();
                let rev_mask: Vec<Vec<f64>> = batch.step_masks.iter().rev().cloned().collect();
                let rev = gru.scan(tape, bound, &rev_in, &rev_mask)?;
                let in_order: Vec<Var> = rev.into_iter().rev().collect();
                let stacked = tape.stack_rows(&in_order)?;
                Some(proj.forward(tape, bound, stacked)?)
            }
            _ => None,
        };
        Ok(Encoded { q0_mean, q0_std, context })
    }

    /// Per-row `KL(Q0 ‖ P0)` as `[rows, 1]`.
    pub fn kl0(&self, tape: &mut Tape, bound: &Bound, mean: Var, std: Var) -> Result<Var, DiffError> {
        let pm = bound.var(self.nets.p0_mean);
        let pls = bound.var(self.nets.p0_logstd);
        let npm = tape.neg(pm)?;
        let diff = tape.add_row(mean, npm)?;
        let sq_diff = tape.square(diff)?;
        let var_q = tape.square(std)?;
        let num = tape.add(var_q, sq_diff)?;
        let m2 = tape.scale(pls, -2.0)?;
        let inv_var = tape.exp(m2)?;
        let half_inv = tape.scale(inv_var, 0.5)?;
        let quad = tape.mul_row(num, half_inv)?;
        let ln_q = tape.ln(std)?;
        let neg_ln_q = tape.neg(ln_q)?;
        let log_ratio = tape.add_row(neg_ln_q, pls)?;
        let per_dim = tape.add(log_ratio, quad)?;
        let per_dim = tape.add_scalar(per_dim, -0.5)?;
        tape.row_sum(per_dim)
    }
}
