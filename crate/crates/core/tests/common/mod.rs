//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lsde::dataset::Record;
use lsde::diffcore::{eval_with_grad, Activation, Bound, Dense, DenseStack, DiffError, GruStack, LstmCell, ParamStore, Tape, Tensor, Var};
use lsde::model::{Model, ModelConfig, ModelKind, ModelSpec, RowDraw};
use lsde::pkpd::{generate_cohort, CohortConfig};
use lsde::rng::rng_for;
use lsde::sde::{girsanov_kl, integrate_em, sample_wiener, ControlSignal, TimeGrid};
use lsde::toy::{generate_ou, OuConfig};
use lsde::training::row_draw;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/physionet")
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&d) / scale
    }
}

pub type LossFn<'a> = dyn Fn(&mut Tape, &Bound) -> Result<Var, DiffError> + 'a;

fn eval(store: &ParamStore, f: &LossFn<'_>) -> f64 {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape).unwrap();
    let loss = f(&mut tape, &bound).unwrap();
    tape.value(loss).item()
}

/// Worst relative error between the analytic gradient of `f` and central
/// differences, per parameter tensor. Tensors of up to four entries are
/// differenced entry by entry; larger ones along the gradient direction and
/// one random direction, each normalised by the tensor's gradient norm.
pub fn gradient_error(store: &ParamStore, f: &LossFn<'_>, rng: &mut ChaCha8Rng) -> f64 {
    gradient_error_on(store, f, rng, &|_| true)
}

/// [`gradient_error`] over the tensors whose name satisfies `keep`.
pub fn gradient_error_on(store: &ParamStore, f: &LossFn<'_>, rng: &mut ChaCha8Rng, keep: &dyn Fn(&str) -> bool) -> f64 {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape).unwrap();
    let loss = f(&mut tape, &bound).unwrap();
    let analytic = eval_with_grad(&tape, loss, store, &bound).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    let mut shifted = |offset: usize, dir: &[f64]| {
        let base = store.flat();
        let at = |s: f64, probe: &mut ParamStore| {
            let flat = probe.flat_mut();
            for (i, d) in dir.iter().enumerate() {
                flat[offset + i] = base[offset + i] + s * d;
            }
            eval(probe, f)
        };
        let d = (at(FD_STEP, &mut probe) - at(-FD_STEP, &mut probe)) / (2.0 * FD_STEP);
        probe.flat_mut()[offset..offset + dir.len()].copy_from_slice(&base[offset..offset + dir.len()]);
        d
    };
    for spec in store.specs().iter().filter(|s| keep(&s.name)) {
        let g = &analytic[spec.offset..spec.offset + spec.len()];
        let gn = norm(g);
        if spec.len() <= 4 {
            let fd: Vec<f64> = (0..spec.len())
                .map(|i| {
                    let mut e = vec![0.0; spec.len()];
                    e[i] = 1.0;
                    shifted(spec.offset, &e)
                })
                .collect();
            worst = worst.max(rel_err(g, &fd));
        } else {
            if gn < 1e-10 {
                let r: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let r: Vec<f64> = r.iter().map(|x| x / norm(&r)).collect();
                let fd = shifted(spec.offset, &r);
                worst = worst.max(if fd.abs() < 1e-8 { 0.0 } else { 1.0 });
                continue;
            }
            let unit: Vec<f64> = g.iter().map(|x| x / gn).collect();
            let along = shifted(spec.offset, &unit);
            worst = worst.max((along - gn).abs() / gn);
            let r: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rn = norm(&r);
            let r: Vec<f64> = r.iter().map(|x| x / rn).collect();
            let fd = shifted(spec.offset, &r);
            let an: f64 = g.iter().zip(&r).map(|(a, b)| a * b).sum();
            worst = worst.max((fd - an).abs() / gn);
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `Σ W ⊙ v` with fixed random weights, so every output entry matters.
fn weighted_sum(tape: &mut Tape, v: Var, w: &[f64]) -> Result<Var, DiffError> {
    let shape = tape.value(v).shape().to_vec();
    let wc = tape.constant(Tensor::new(shape, w.to_vec())?)?;
    let p = tape.mul(v, wc)?;
    tape.sum(p)
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var, DiffError>;

/// One primitive applied to random parameters `[rows, cols]` (inputs drawn in `range`).
fn op_case(seed: u64, shapes: &[(usize, usize)], range: (f64, f64), build: Build) -> f64 {
    let mut rng = rng_for(seed, &[11]);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), vec![r, c], uniform(&mut rng, r * c, range.0, range.1)))
        .collect();
    let out_len = {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let vars: Vec<Var> = ids.iter().map(|&id| bound.var(id)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).len()
    };
    let w = uniform(&mut rng, out_len, -1.0, 1.0);
    let f = |tape: &mut Tape, bound: &Bound| {
        let vars: Vec<Var> = ids.iter().map(|&id| bound.var(id)).collect();
        let out = build(tape, &vars)?;
        weighted_sum(tape, out, &w)
    };
    gradient_error(&store, &f, &mut rng)
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut rng = rng_for(seed, &[7]);
    (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5))
}

/// A named gradient check; `run(seed)` returns the worst relative error.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            run: |s| {
                let (r, k, c) = dims(s);
                op_case(s, &[(r, k), (k, c)], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]))
            },
        },
        GradCase {
            name: "add",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (r, c)], (-1.0, 1.0), |t, v| t.add(v[0], v[1]))
            },
        },
        GradCase {
            name: "sub",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (r, c)], (-1.0, 1.0), |t, v| t.sub(v[0], v[1]))
            },
        },
        GradCase {
            name: "mul",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (r, c)], (-1.0, 1.0), |t, v| t.mul(v[0], v[1]))
            },
        },
        GradCase {
            name: "div",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (r, c)], (0.5, 2.0), |t, v| t.div(v[0], v[1]))
            },
        },
        GradCase {
            name: "add_row",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (1, c)], (-1.0, 1.0), |t, v| t.add_row(v[0], v[1]))
            },
        },
        GradCase {
            name: "mul_row",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (1, c)], (-1.0, 1.0), |t, v| t.mul_row(v[0], v[1]))
            },
        },
        GradCase {
            name: "scale_add_scalar_neg",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-1.0, 1.0), |t, v| {
                    let a = t.scale(v[0], -1.7)?;
                    let b = t.add_scalar(a, 0.3)?;
                    t.neg(b)
                })
            },
        },
        GradCase {
            name: "tanh",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-2.0, 2.0), |t, v| t.tanh(v[0]))
            },
        },
        GradCase {
            name: "sigmoid",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-3.0, 3.0), |t, v| t.sigmoid(v[0]))
            },
        },
        GradCase {
            name: "softplus",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-3.0, 3.0), |t, v| t.softplus(v[0]))
            },
        },
        GradCase {
            name: "exp",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-2.0, 2.0), |t, v| t.exp(v[0]))
            },
        },
        GradCase {
            name: "ln",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (0.2, 3.0), |t, v| t.ln(v[0]))
            },
        },
        GradCase {
            name: "square",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-2.0, 2.0), |t, v| t.square(v[0]))
            },
        },
        GradCase {
            name: "clamp_min",
            run: |s| {
                let (r, c, _) = dims(s);
                // Inputs stay clear of the kink at 0.
                op_case(s, &[(r, c)], (0.05, 1.0), |t, v| {
                    let a = t.add_scalar(v[0], -0.5)?;
                    let a = t.square(a)?;
                    t.clamp_min(a, 0.01)
                })
            },
        },
        GradCase {
            name: "row_sum",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-1.0, 1.0), |t, v| t.row_sum(v[0]))
            },
        },
        GradCase {
            name: "sum",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c)], (-1.0, 1.0), |t, v| {
                    let q = t.square(v[0])?;
                    t.sum(q)
                })
            },
        },
        GradCase {
            name: "concat_slice",
            run: |s| {
                let (r, c, k) = dims(s);
                op_case(s, &[(r, c), (r, k)], (-1.0, 1.0), |t, v| {
                    let cat = t.concat_cols(&[v[0], v[1], v[0]])?;
                    let w = t.value(cat).cols();
                    t.slice_cols(cat, 1.min(w - 1), w)
                })
            },
        },
        GradCase {
            name: "stack_gather",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c), (r, c)], (-1.0, 1.0), |t, v| {
                    let st = t.stack_rows(&[v[0], v[1]])?;
                    let n = t.value(st).rows();
                    let idx: Vec<usize> = (0..n + 2).map(|i| (i * 3) % n).collect();
                    t.gather_rows(st, &idx)
                })
            },
        },
        GradCase {
            name: "log_softmax",
            run: |s| {
                let (r, c, _) = dims(s);
                op_case(s, &[(r, c + 1)], (-3.0, 3.0), |t, v| t.log_softmax_rows(v[0]))
            },
        },
    ]
}

fn network_case(seed: u64, kind: usize) -> f64 {
    let mut rng = rng_for(seed, &[13, kind as u64]);
    let mut store = ParamStore::new();
    let (rows, input, hidden) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
    let steps = 3;
    let xs: Vec<Vec<f64>> = (0..steps).map(|_| uniform(&mut rng, rows * input, -1.0, 1.0)).collect();
    let masks: Vec<Vec<f64>> = (0..steps)
        .map(|k| (0..rows).map(|r| if k == 0 || (r + k) % 3 != 0 { 1.0 } else { 0.0 }).collect())
        .collect();
    let acts = [Activation::Tanh, Activation::Softplus, Activation::Sigmoid, Activation::Identity];
    let act = acts[seed as usize % 4];
    let dense = Dense::new(&mut store, "dense", input, hidden, act, &mut rng);
    let mlp = DenseStack::mlp(&mut store, "mlp", input, 5, 2, hidden, Activation::Tanh, act, &mut rng);
    let gru = GruStack::new(&mut store, "gru", input, hidden, 2, &mut rng);
    let lstm = LstmCell::new(&mut store, "lstm", input, hidden, &mut rng);
    let w = uniform(&mut rng, rows * hidden, -1.0, 1.0);
    let f = |tape: &mut Tape, bound: &Bound| -> Result<Var, DiffError> {
        let x: Vec<Var> = xs.iter().map(|d| tape.constant(Tensor::matrix(rows, input, d.clone()))).collect::<Result<_, _>>()?;
        let out = match kind {
            0 => dense.forward(tape, bound, x[0])?,
            1 => mlp.forward(tape, bound, x[0])?,
            2 => *gru.scan(tape, bound, &x, &masks)?.last().unwrap(),
            _ => {
                let mut h = tape.constant(Tensor::zeros(vec![rows, hidden]))?;
                let mut c = tape.constant(Tensor::zeros(vec![rows, hidden]))?;
                for xi in &x {
                    (h, c) = lstm.step(tape, bound, *xi, h, c)?;
                }
                tape.add(h, c)?
            }
        };
        weighted_sum(tape, out, &w)
    };
    gradient_error(&store, &f, &mut rng)
}

fn controlled_field<'a>(
    net: &'a DenseStack,
    bound: &'a Bound,
) -> impl FnMut(&mut Tape, usize, Var, Option<Var>) -> Result<Var, DiffError> + 'a {
    move |tape, _k, x, u| {
        let inp = tape.concat_cols(&[x, u.expect("one control channel")])?;
        net.forward(tape, bound, inp)
    }
}

/// Euler–Maruyama rollout with MLP drift/diffusion and the path KL against a second drift.
fn rollout_case(seed: u64, with_kl: bool) -> f64 {
    let mut rng = rng_for(seed, &[17]);
    let mut store = ParamStore::new();
    let (rows, dim) = (rng.random_range(1..4), rng.random_range(1..4));
    let drift = DenseStack::mlp(&mut store, "f", dim + 1, 6, 2, dim, Activation::Tanh, Activation::Identity, &mut rng);
    let post = DenseStack::mlp(&mut store, "h", dim + 1, 6, 2, dim, Activation::Tanh, Activation::Identity, &mut rng);
    let diff = DenseStack::mlp(&mut store, "g", dim + 1, 6, 1, dim, Activation::Tanh, Activation::Softplus, &mut rng);
    let x0v = store.add("x0", vec![rows, dim], uniform(&mut rng, rows * dim, -1.0, 1.0));
    let grid = TimeGrid::new(0.0, 0.2, 0.02).unwrap();
    let noise: Vec<_> = (0..rows).map(|r| sample_wiener(&grid, dim, seed * 31 + r as u64)).collect();
    let controls: Vec<ControlSignal> =
        (0..rows).map(|r| ControlSignal::new(1, vec![0.05, 0.11], vec![vec![1.0 + r as f64], vec![0.0]]).unwrap()).collect();
    let w = uniform(&mut rng, rows * dim, -1.0, 1.0);
    let f = |tape: &mut Tape, bound: &Bound| -> Result<Var, DiffError> {
        let field = |net| controlled_field(net, bound);
        let x0 = bound.var(x0v);
        let path = integrate_em(tape, &mut field(&post), &mut field(&diff), x0, &controls, &grid, &noise)
            .map_err(|e| DiffError::Shape(e.to_string()))?;
        let end = weighted_sum(tape, path.last(), &w)?;
        if !with_kl {
            return Ok(end);
        }
        let kl = girsanov_kl(tape, &mut field(&post), &mut field(&drift), &mut field(&diff), &path, &controls)
            .map_err(|e| DiffError::Shape(e.to_string()))?;
        let kl = tape.sum(kl)?;
        tape.add(end, kl)
    };
    gradient_error(&store, &f, &mut rng)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        drift_width: 6,
        drift_layers: 2,
        encoder_hidden: 5,
        encoder_layers: 2,
        context_dim: 3,
        lstm_hidden: 4,
        lstm_layers: 2,
        dt: 0.05,
        ..ModelConfig::default()
    }
}

pub fn pkpd_records(n: usize, seed: u64) -> Vec<Record> {
    generate_cohort(n, &CohortConfig { sigma_proc: 0.1, missing_frac: 0.5, seed, dt: 0.01 }).unwrap().0
}

pub fn ou_records(n: usize, seed: u64) -> Vec<Record> {
    generate_ou(&OuConfig { n, points: 8, seed, ..OuConfig::default() }).unwrap()
}

/// Negative ELBO of a tiny model on fixed noise. The readout term is checked
/// separately over the readout heads, since its latent input is detached.
fn model_case(seed: u64, kind: ModelKind, pkpd: bool) -> f64 {
    let mut rng = rng_for(seed, &[19, kind as u64]);
    let records = if pkpd { pkpd_records(2, seed) } else { ou_records(3, seed) };
    let spec = ModelSpec::fit(&records).unwrap();
    let model = Model::new(kind, tiny_model_config(), spec, seed).unwrap();
    let refs: Vec<&Record> = records.iter().collect();
    let draws: Vec<RowDraw> = records.iter().map(|r| row_draw(&model, r, seed, 0, 0)).collect();
    let f = |tape: &mut Tape, bound: &Bound| -> Result<Var, DiffError> {
        let t = model.loss_terms(tape, bound, &refs, &draws).map_err(|e| DiffError::Shape(e.to_string()))?;
        let mut total = tape.sub(t.kl0, t.recon)?;
        if let Some(p) = t.path_kl {
            total = tape.add(total, p)?;
        }
        Ok(total)
    };
    let readout = |tape: &mut Tape, bound: &Bound| -> Result<Var, DiffError> {
        let t = model.loss_terms(tape, bound, &refs, &draws).map_err(|e| DiffError::Shape(e.to_string()))?;
        match t.readout {
            Some(r) => tape.neg(r),
            None => tape.constant(Tensor::scalar(0.0)),
        }
    };
    let readout_heads: Vec<String> =
        model.spec.variables.iter().filter(|v| v.info.readout).map(|v| format!("head.{}.", v.info.name)).collect();
    let main = gradient_error(&model.store, &f, &mut rng);
    let head = gradient_error_on(&model.store, &readout, &mut rng, &|n| readout_heads.iter().any(|h| n.starts_with(h)));
    main.max(head)
}

pub fn composite_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "dense", run: |s| network_case(s, 0) },
        GradCase { name: "mlp", run: |s| network_case(s, 1) },
        GradCase { name: "gru_scan_masked", run: |s| network_case(s, 2) },
        GradCase { name: "lstm_steps", run: |s| network_case(s, 3) },
        GradCase { name: "em_rollout", run: |s| rollout_case(s, false) },
        GradCase { name: "em_rollout_with_path_kl", run: |s| rollout_case(s, true) },
    ]
}

pub fn model_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "latent_sde_elbo_ou", run: |s| model_case(s, ModelKind::Sde, false) },
        GradCase { name: "latent_sde_elbo_pkpd", run: |s| model_case(s, ModelKind::Sde, true) },
        GradCase { name: "latent_ode_elbo_pkpd", run: |s| model_case(s, ModelKind::Ode, true) },
        GradCase { name: "latent_lstm_elbo_pkpd", run: |s| model_case(s, ModelKind::Lstm, true) },
    ]
}

/// Worst error of `case` over `seeds` seeds.
pub fn worst_over(case: &GradCase, seeds: u64) -> f64 {
    (0..seeds).map(|s| (case.run)(s)).fold(0.0, f64::max)
}

/// `∫ (F(t) − 1{t ≥ y})² dt` for `N(mu, sigma²)` by composite Simpson on each side of `y`.
pub fn crps_quadrature(mu: f64, sigma: f64, y: f64) -> f64 {
    let d = Normal::new(mu, sigma).unwrap();
    let simpson = |a: f64, b: f64, n: usize, g: &dyn Fn(f64) -> f64| {
        let h = (b - a) / n as f64;
        let mut s = g(a) + g(b);
        for i in 1..n {
            s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let lo = (mu - 14.0 * sigma).min(y);
    let hi = (mu + 14.0 * sigma).max(y);
    simpson(lo, y, 20_000, &|t| d.cdf(t).powi(2)) + simpson(y, hi, 20_000, &|t| (1.0 - d.cdf(t)).powi(2))
}

fn clock(minutes: u32) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

/// Writes `n` PhysioNet-format records with mean-reverting HR/MAP/Temp
/// trajectories and returns their paths.
pub fn write_synthetic_icu(dir: &Path, n: usize, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(seed, &[23, i as u64]);
        let id = 150_000 + i;
        let mut text = String::from("Time,Parameter,Value\n");
        writeln!(text, "00:00,RecordID,{id}").unwrap();
        writeln!(text, "00:00,Age,{}", rng.random_range(20..90)).unwrap();
        writeln!(text, "00:00,Gender,{}", rng.random_range(0..2)).unwrap();
        let height = if rng.random_bool(0.2) { -1.0 } else { (rng.random_range(150.0..195.0f64) * 10.0).round() / 10.0 };
        writeln!(text, "00:00,Height,{height}").unwrap();
        writeln!(text, "00:00,ICUType,{}", rng.random_range(1..5)).unwrap();
        writeln!(text, "00:00,Weight,{:.1}", rng.random_range(50.0..120.0f64)).unwrap();
        // (name, long-run mean, patient sd, reversion per hour, noise per √hour, sampling gap minutes, decimals)
        let channels = [
            ("HR", 85.0, 12.0, 0.3, 4.0, 60u32, 0usize),
            ("MAP", 80.0, 10.0, 0.3, 4.0, 60, 0),
            ("Temp", 37.0, 0.5, 0.2, 0.2, 240, 1),
        ];
        let mut rows: Vec<(u32, String)> = Vec::new();
        for (name, m, sd, theta, vol, gap, dec) in channels {
            let level = m + sd * rng.random_range(-1.5..1.5);
            let mut x = level + sd * rng.random_range(-1.0..1.0);
            let mut t = rng.random_range(5..gap);
            let mut last = 0u32;
            while t < 2880 {
                let dt = (t - last) as f64 / 60.0;
                let a = (-theta * dt).exp();
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                x = level + (x - level) * a + vol * ((1.0 - a * a) / (2.0 * theta)).sqrt() * z;
                let v = format!("{x:.dec$}");
                rows.push((t, format!("{},{name},{v}", clock(t))));
                last = t;
                t += rng.random_range(gap / 2..gap * 3 / 2);
            }
        }
        rows.sort_by_key(|(t, _)| *t);
        for (_, r) in rows {
            text.push_str(&r);
            text.push('\n');
        }
        let p = dir.join(format!("{id}.txt"));
        std::fs::write(&p, text).unwrap();
        paths.push(p);
    }
    paths
}

fn decay_field(rate: f64) -> impl FnMut(&mut Tape, usize, Var, Option<Var>) -> Result<Var, DiffError> {
    move |tape: &mut Tape, _k, x, _u| tape.scale(x, rate)
}

fn constant_field(c: f64) -> impl FnMut(&mut Tape, usize, Var, Option<Var>) -> Result<Var, DiffError> {
    move |tape: &mut Tape, _k, x, _u| {
        let z = tape.scale(x, 0.0)?;
        tape.add_scalar(z, c)
    }
}

/// `x(1)` for `dx = −x dt`, `x(0) = 1`, by Euler–Maruyama with zero diffusion at `dt`.
pub fn exp_decay_endpoint(dt: f64) -> f64 {
    let mut tape = Tape::new();
    let grid = TimeGrid::new(0.0, 1.0, dt).unwrap();
    let x0 = tape.constant(Tensor::matrix(1, 1, vec![1.0])).unwrap();
    let path = integrate_em(
        &mut tape,
        &mut decay_field(-1.0),
        &mut constant_field(0.0),
        x0,
        &[],
        &grid,
        &[sample_wiener(&grid, 1, 0)],
    )
    .unwrap();
    tape.value(path.last()).item()
}

/// Monte-Carlo mean of `X(1)` for `dX = a X dt + b X dW`, `X(0) = 1`, at `dt = 0.01`,
/// and the analytic mean `e^a`.
pub fn gbm_mean(a: f64, b: f64, paths: usize, seed: u64) -> (f64, f64) {
    let mut tape = Tape::new();
    let grid = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
    let x0 = tape.constant(Tensor::full(vec![paths, 1], 1.0)).unwrap();
    let noise: Vec<_> = (0..paths).map(|p| sample_wiener(&grid, 1, rng_for(seed, &[p as u64]).random())).collect();
    let path = integrate_em(&mut tape, &mut decay_field(a), &mut decay_field(b), x0, &[], &grid, &noise).unwrap();
    let mean = tape.value(path.last()).data().iter().sum::<f64>() / paths as f64;
    (mean, a.exp())
}

/// Path KL between drifts `prior + offset` and `prior` under unit diffusion over `[0, tau]`.
pub fn offset_kl(prior: f64, offset: f64, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let grid = TimeGrid::new(0.0, tau, 0.01).unwrap();
    let x0 = tape.constant(Tensor::matrix(1, 1, vec![0.3])).unwrap();
    let noise = [sample_wiener(&grid, 1, 3)];
    let path = integrate_em(&mut tape, &mut constant_field(prior), &mut constant_field(1.0), x0, &[], &grid, &noise).unwrap();
    let kl = girsanov_kl(
        &mut tape,
        &mut constant_field(prior + offset),
        &mut constant_field(prior),
        &mut constant_field(1.0),
        &path,
        &[],
    )
    .unwrap();
    tape.value(kl).item()
}

/// Path KL of an MLP drift against itself along a learned-diffusion path.
pub fn self_kl(seed: u64) -> f64 {
    let mut rng = rng_for(seed, &[29]);
    let mut store = ParamStore::new();
    let drift = DenseStack::mlp(&mut store, "f", 2, 8, 2, 2, Activation::Tanh, Activation::Identity, &mut rng);
    let diff = DenseStack::mlp(&mut store, "g", 2, 8, 1, 2, Activation::Tanh, Activation::Softplus, &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
    let x0 = tape.constant(Tensor::matrix(3, 2, uniform(&mut rng, 6, -1.0, 1.0))).unwrap();
    let noise: Vec<_> = (0..3).map(|r| sample_wiener(&grid, 2, seed * 7 + r)).collect();
    let field = |net: &DenseStack| {
        let bound = &bound;
        let net = net.clone();
        move |tape: &mut Tape, _k: usize, x: Var, _u: Option<Var>| net.forward(tape, bound, x)
    };
    let path = integrate_em(&mut tape, &mut field(&drift), &mut field(&diff), x0, &[], &grid, &noise).unwrap();
    let kl = girsanov_kl(&mut tape, &mut field(&drift), &mut field(&drift), &mut field(&diff), &path, &[]).unwrap();
    tape.value(kl).data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Decay rate of the chemo concentration after a single pulse, from a
/// least-squares fit of `ln c` on weeks 2–10, and the true `φ_c`.
pub fn fitted_chemo_decay() -> (f64, f64) {
    let p = lsde::pkpd::PkpdParams::population_means();
    let schedule = lsde::pkpd::TreatmentSchedule {
        chemo_times: vec![1.0],
        radio_times: vec![],
        ..lsde::pkpd::TreatmentSchedule::none()
    };
    let mut rng = rng_for(0, &[]);
    let traj = lsde::pkpd::simulate(&p, &schedule, 20.0, 12.0, 0.01, 0.0, &mut rng).unwrap();
    let pts: Vec<(f64, f64)> = (0..=traj.grid.steps)
        .map(|k| (traj.grid.time(k), traj.c[k]))
        .filter(|&(t, _)| (2.0..=10.0).contains(&t))
        .map(|(t, c)| (t, c.ln()))
        .collect();
    let n = pts.len() as f64;
    let (mt, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(t, y)| (a + t / n, b + y / n));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), &(t, y)| (a + (t - mt) * (y - my), b + (t - mt).powi(2)));
    (-sxy / sxx, p.phi_c)
}

/// Smallest and largest health state over the full solver grid of `n`
/// cohort patients at process noise `sigma`, together with the range of
/// recorded ECOG scores.
pub fn health_range(n: usize, sigma: f64, seed: u64) -> ((f64, f64), (f64, f64)) {
    use lsde::pkpd::*;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let mut rng = rng_for(seed, &[i as u64]);
        let cov = BaselineCovariates::sample(&mut rng);
        let params = sample_params(&mut rng, &cov);
        let interval = f64::from(rng.random_range(2u8..=5));
        let x0 = rng.random_range(5.0..=30.0);
        let traj =
            simulate(&params, &TreatmentSchedule::periodic(interval, HORIZON_WEEKS), x0, HORIZON_WEEKS, SIM_DT, sigma, &mut rng)
                .unwrap();
        for &s in &traj.health {
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    let (records, _) = generate_cohort(n, &CohortConfig { sigma_proc: sigma, missing_frac: 0.0, seed, dt: SIM_DT }).unwrap();
    let ecog = records.iter().flat_map(|r| r.observations["ecog"].iter().flatten().copied());
    let e = ecog.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    ((lo, hi), e)
}

/// Rolls a latent SDE with zero diffusion and a latent ODE sharing its prior
/// drift from the same `x̃0`; true when every state is bit-identical.
pub fn zero_diffusion_matches_ode(seed: u64) -> bool {
    use lsde::model::{DiffusionMode, RolloutOptions};
    let records = pkpd_records(3, seed);
    let spec = ModelSpec::fit(&records).unwrap();
    let sde = Model::new(ModelKind::Sde, tiny_model_config(), spec.clone(), seed).unwrap();
    let mut ode = Model::new(ModelKind::Ode, tiny_model_config(), spec, seed + 1).unwrap();
    for s in sde.store.specs() {
        if s.name.starts_with("prior_drift.") {
            let (src, dst) = (sde.store.id_of(&s.name).unwrap(), ode.store.id_of(&s.name).unwrap());
            ode.store.values_mut(dst).copy_from_slice(sde.store.values(src));
        }
    }
    let rows = records.len();
    let dx = sde.config.latent_dim;
    let mut rng = rng_for(seed, &[31]);
    let x0v = uniform(&mut rng, rows * dx, -1.0, 1.0);
    let controls: Vec<ControlSignal> = records.iter().map(|r| r.controls.clone()).collect();
    let grid = sde.grid();
    let noise: Vec<_> = (0..rows).map(|r| sample_wiener(&grid, dx, seed * 13 + r as u64)).collect();
    let origin: Vec<usize> = (0..rows).collect();
    let opts = RolloutOptions { posterior_steps: 0, diffusion: DiffusionMode::Zero, with_kl: false, compact: false };

    let mut ta = Tape::new();
    let ba = sde.store.bind(&mut ta).unwrap();
    let xa = ta.constant(Tensor::matrix(rows, dx, x0v.clone())).unwrap();
    let ra = sde.sde_rollout(&mut ta, &ba, None, &origin, &controls, xa, &noise, opts, &mut |_, _, _| Ok(())).unwrap();

    let mut tb = Tape::new();
    let bb = ode.store.bind(&mut tb).unwrap();
    let xb = tb.constant(Tensor::matrix(rows, dx, x0v)).unwrap();
    let rb = ode.ode_rollout(&mut tb, &bb, &controls, xb, false, &mut |_, _, _| Ok(())).unwrap();

    ra.states.len() == rb.states.len()
        && ra.states.iter().zip(&rb.states).all(|(&a, &b)| {
            let (a, b) = (ta.value(a).data(), tb.value(b).data());
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Worst gap between the closed-form Gaussian CRPS and quadrature over `n` random triples.
pub fn crps_max_error(n: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, &[37]);
    (0..n)
        .map(|_| {
            let mu = rng.random_range(-10.0..10.0);
            let sigma = rng.random_range(0.05..5.0);
            let y = mu + sigma * rng.random_range(-4.0..4.0);
            (lsde::metrics::crps_gaussian(mu, sigma, y).unwrap() - crps_quadrature(mu, sigma, y)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn lsde_exe() -> &'static str {
    env!("CARGO_BIN_EXE_lsde")
}

/// Runs the CLI with `args`; returns (exit code, stdout, stderr).
pub fn lsde(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(lsde_exe()).args(args).env("RUST_LOG", "error").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn lsde_ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = lsde(args);
    assert_eq!(code, 0, "lsde {args:?} failed:\n{stderr}");
    stdout
}

/// Every file below `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Training config for fast CLI runs.
pub fn write_quick_train_config(path: &Path, epochs: usize) {
    let cfg = serde_json::json!({
        "model": {
            "latent_dim": 3, "drift_width": 8, "drift_layers": 1, "encoder_hidden": 8, "encoder_layers": 1,
            "context_dim": 3, "lstm_hidden": 6, "lstm_layers": 1, "dt": 0.05
        },
        "train": { "epochs": epochs, "batch_size": 8, "lr0": 0.003, "val_samples": 4 }
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

/// simulate → train → forecast → evaluate under `root`, every step single-threaded.
pub fn cli_pipeline(root: &Path, kind: &str) {
    let s = |p: &str| root.join(p).to_string_lossy().into_owned();
    write_quick_train_config(&root.join("train.json"), 2);
    lsde_ok(&["simulate", "--n", "12", "--noise", "moderate", "--missing", "50", "--seed", "3", "--out", &s("sim")]);
    lsde_ok(&[
        "train", "--model", kind, "--data", &s("sim/dataset.ndjson"), "--config", &s("train.json"), "--seed", "1",
        "--threads", "1", "--out", &s("run"),
    ]);
    lsde_ok(&[
        "forecast", "--ckpt", &s("run/checkpoint.json"), "--data", &s("sim/dataset.ndjson"), "--n-samples", "4",
        "--split", "all", "--condition", "toy", "--out", &s("fc"),
    ]);
    lsde_ok(&["evaluate", "--forecasts", &s("fc/forecasts.csv"), "--out", &s("eval")]);
}
