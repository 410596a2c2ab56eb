//! Fixed-step integration of controlled dynamics on a [`Tape`].
//!
//! States are `[rows, dim]` matrices so a batch of independent paths (one per
//! patient or per forecast sample) advances in lock step on a shared grid.
//! Noise is diagonal: the diffusion output multiplies the Wiener increment
//! elementwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};

/// Lower bound applied to every diffusion magnitude.
pub const DIFFUSION_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("invalid control signal: {0}")]
    Control(String),
    #[error("non-finite state at step {step}: {source}")]
    NonFiniteState { step: usize, source: DiffError },
    #[error("noise pool has {got} rows/steps, expected {want}")]
    Noise { got: usize, want: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid from `t0` to `t1`; `t1 - t0` must be an integer multiple of `dt`.
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self, SdeError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SdeError::Grid(format!("dt must be positive, got {dt}")));
        }
        if t1 < t0 {
            return Err(SdeError::Grid(format!("t1 {t1} < t0 {t0}")));
        }
        let steps = ((t1 - t0) / dt).round() as usize;
        if (t0 + steps as f64 * dt - t1).abs() > 1e-12 * t1.abs().max(1.0) {
            return Err(SdeError::Grid(format!("({t1} - {t0}) is not a multiple of {dt}")));
        }
        Ok(Self { t0, dt, steps })
    }

    /// Smallest grid with step `dt` starting at `t0` that reaches `t1`.
    pub fn covering(t0: f64, t1: f64, dt: f64) -> Result<Self, SdeError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SdeError::Grid(format!("dt must be positive, got {dt}")));
        }
        let steps = ((t1 - t0) / dt - 1e-9).ceil().max(0.0) as usize;
        Ok(Self { t0, dt, steps })
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.steps as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Nearest grid index for `t`, or `None` when `t` lies outside the grid
    /// by more than half a step.
    pub fn nearest_index(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.dt;
        if x < -0.5 - 1e-9 || x > self.steps as f64 + 0.5 + 1e-9 {
            return None;
        }
        Some((x.round().max(0.0) as usize).min(self.steps))
    }
}

/// `steps x dim` Normal(0, dt) draws reproducible from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct WienerIncrements {
    pub dim: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    data: Vec<f64>,
}

impl WienerIncrements {
    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self { dim, steps: grid.steps, dt: grid.dt, seed: 0, data: vec![0.0; grid.steps * dim] }
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn sample_wiener(grid: &TimeGrid, dim: usize, seed: u64) -> WienerIncrements {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = grid.dt.sqrt();
    let data = (0..grid.steps * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sd
        })
        .collect();
    WienerIncrements { dim, steps: grid.steps, dt: grid.dt, seed, data }
}

/// Piecewise-constant control input built from dated events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub dim: usize,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn new(dim: usize, times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, SdeError> {
        if times.len() != values.len() {
            return Err(SdeError::Control(format!("{} times vs {} values", times.len(), values.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SdeError::Control("event times must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| v.len() != dim) {
            return Err(SdeError::Control(format!("event of width {} in a {dim}-channel signal", v.len())));
        }
        Ok(Self { dim, times, values })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, times: Vec::new(), values: Vec::new() }
    }

    /// Value of the latest event at or before `t`; zeros before the first event.
    pub fn query(&self, t: f64) -> Vec<f64> {
        let n = self.times.partition_point(|&e| e <= t);
        if n == 0 {
            vec![0.0; self.dim]
        } else {
            self.values[n - 1].clone()
        }
    }

    /// Rescales event times, e.g. from native units to model time.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { dim: self.dim, times: self.times.iter().map(|t| t * factor).collect(), values: self.values.clone() }
    }
}

pub fn query_control(control: &ControlSignal, t: f64) -> Vec<f64> {
    control.query(t)
}

/// Discretised trajectory for a batch of rows; `states[k]` is `[rows, dim]` at `grid.time(k)`.
#[derive(Clone, Debug)]
pub struct LatentPath {
    pub grid: TimeGrid,
    pub states: Vec<Var>,
}

impl LatentPath {
    pub fn last(&self) -> Var {
        *self.states.last().expect("path has at least the initial state")
    }
}

/// `f(tape, step, x, u) -> [rows, dim]` evaluated at the left end of a step.
pub type Field<'a> = dyn FnMut(&mut Tape, usize, Var, Option<Var>) -> Result<Var, DiffError> + 'a;

/// Control inputs for every row at time `t`, or `None` for zero-width controls.
pub fn control_at(tape: &mut Tape, controls: &[ControlSignal], t: f64) -> Result<Option<Var>, DiffError> {
    let dim = controls.first().map_or(0, |c| c.dim);
    if dim == 0 {
        return Ok(None);
    }
    let data: Vec<f64> = controls.iter().flat_map(|c| c.query(t)).collect();
    tape.constant(Tensor::matrix(controls.len(), dim, data)).map(Some)
}

fn noise_at(tape: &mut Tape, noise: &[WienerIncrements], k: usize) -> Result<Var, DiffError> {
    let dim = noise[0].dim;
    let data: Vec<f64> = noise.iter().flat_map(|w| w.step(k).iter().copied()).collect();
    tape.constant(Tensor::matrix(noise.len(), dim, data))
}

fn check_noise(noise: &[WienerIncrements], rows: usize, grid: &TimeGrid) -> Result<(), SdeError> {
    if noise.len() != rows {
        return Err(SdeError::Noise { got: noise.len(), want: rows });
    }
    if let Some(w) = noise.iter().find(|w| w.steps < grid.steps) {
        return Err(SdeError::Noise { got: w.steps, want: grid.steps });
    }
    Ok(())
}

/// `x + drift * dt + diffusion ⊙ dw`.
pub fn em_update(tape: &mut Tape, x: Var, drift: Var, diffusion: Var, dw: Var, dt: f64) -> Result<Var, DiffError> {
    let fd = tape.scale(drift, dt)?;
    let x1 = tape.add(x, fd)?;
    let sd = tape.mul(diffusion, dw)?;
    tape.add(x1, sd)
}

/// `x + drift * dt`.
pub fn euler_update(tape: &mut Tape, x: Var, drift: Var, dt: f64) -> Result<Var, DiffError> {
    let fd = tape.scale(drift, dt)?;
    tape.add(x, fd)
}

/// Per-row `½ ‖(ν − μ) / σ‖² dt` as a `[rows, 1]` matrix.
pub fn kl_increment(tape: &mut Tape, nu: Var, mu: Var, sigma: Var, dt: f64) -> Result<Var, DiffError> {
    let diff = tape.sub(nu, mu)?;
    let u = tape.div(diff, sigma)?;
    let sq = tape.square(u)?;
    let rs = tape.row_sum(sq)?;
    tape.scale(rs, 0.5 * dt)
}

fn at_step<T>(step: usize, r: Result<T, DiffError>) -> Result<T, SdeError> {
    r.map_err(|source| match source {
        DiffError::NonFinite { .. } => SdeError::NonFiniteState { step, source },
        other => SdeError::Diff(other),
    })
}

/// Euler–Maruyama: `x_{k+1} = x_k + f(x_k, u(t_k)) dt + g(x_k, u(t_k)) ⊙ ΔW_k`.
pub fn integrate_em(
    tape: &mut Tape,
    drift: &mut Field<'_>,
    diffusion: &mut Field<'_>,
    x0: Var,
    controls: &[ControlSignal],
    grid: &TimeGrid,
    noise: &[WienerIncrements],
) -> Result<LatentPath, SdeError> {
    let rows = tape.value(x0).rows();
    check_noise(noise, rows, grid)?;
    let mut states = Vec::with_capacity(grid.steps + 1);
    states.push(x0);
    let mut x = x0;
    for k in 0..grid.steps {
        x = at_step(k, (|| {
            let u = control_at(tape, controls, grid.time(k))?;
            let f = drift(tape, k, x, u)?;
            let g = diffusion(tape, k, x, u)?;
            let dw = noise_at(tape, noise, k)?;
            em_update(tape, x, f, g, dw, grid.dt)
        })())?;
        states.push(x);
    }
    Ok(LatentPath { grid: *grid, states })
}

/// Deterministic Euler scheme.
pub fn integrate_euler(
    tape: &mut Tape,
    drift: &mut Field<'_>,
    x0: Var,
    controls: &[ControlSignal],
    grid: &TimeGrid,
) -> Result<LatentPath, SdeError> {
    let mut states = Vec::with_capacity(grid.steps + 1);
    states.push(x0);
    let mut x = x0;
    for k in 0..grid.steps {
        x = at_step(k, (|| {
            let u = control_at(tape, controls, grid.time(k))?;
            let f = drift(tape, k, x, u)?;
            euler_update(tape, x, f, grid.dt)
        })())?;
        states.push(x);
    }
    Ok(LatentPath { grid: *grid, states })
}

/// Discretised path KL between two SDEs sharing `diffusion`, per row `[rows, 1]`:
/// `Σ_k ½ ‖(ν − μ)/σ‖²(x_k) dt` over the left end of every step of `path`.
///
/// `diffusion` is floored at [`DIFFUSION_FLOOR`] before dividing.
pub fn girsanov_kl(
    tape: &mut Tape,
    posterior_drift: &mut Field<'_>,
    prior_drift: &mut Field<'_>,
    diffusion: &mut Field<'_>,
    path: &LatentPath,
    controls: &[ControlSignal],
) -> Result<Var, SdeError> {
    let grid = path.grid;
    let rows = tape.value(path.states[0]).rows();
    let mut total = tape.constant(Tensor::zeros(vec![rows, 1]))?;
    for k in 0..grid.steps {
        let x = path.states[k];
        total = at_step(k, (|| {
            let u = control_at(tape, controls, grid.time(k))?;
            let nu = posterior_drift(tape, k, x, u)?;
            let mu = prior_drift(tape, k, x, u)?;
            let sigma = diffusion(tape, k, x, u)?;
            let sigma = tape.clamp_min(sigma, DIFFUSION_FLOOR)?;
            debug_assert!(tape.value(sigma).data().iter().all(|&s| s >= DIFFUSION_FLOOR));
            let inc = kl_increment(tape, nu, mu, sigma, grid.dt)?;
            tape.add(total, inc)
        })())?;
    }
    Ok(total)
}
