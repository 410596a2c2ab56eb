mod common;

use lsde::dataset::{Record, Split};
use lsde::diffcore::{Tape, Tensor};
use lsde::model::{Checkpoint, HeadOutput, Model, ModelKind, ModelSpec, RowDraw};
use lsde::toy::{generate_ou, OuConfig};
use lsde::training::*;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, lr0: 3e-3, val_samples: 0, ..TrainConfig::default() }
}

fn validation_set(records: &[Record]) -> Vec<Record> {
    let pick = |s: Split| records.iter().filter(|r| r.split == s).cloned().collect::<Vec<_>>();
    let val = pick(Split::Val);
    if !val.is_empty() {
        return val;
    }
    let train = pick(Split::Train);
    if train.is_empty() { records.to_vec() } else { train }
}

#[test]
fn gaussian_loglik_at_the_mode() {
    let records = common::ou_records(4, 0);
    let mut model = Model::new(ModelKind::Ode, common::tiny_model_config(), ModelSpec::fit(&records).unwrap(), 0).unwrap();
    model.spec.variables[0].scale = 1.0;
    let loc = model.spec.variables[0].loc;
    let mut tape = Tape::new();
    let mean_z = tape.constant(Tensor::matrix(1, 1, vec![0.0])).unwrap();
    let std_z = tape.constant(Tensor::matrix(1, 1, vec![1.0])).unwrap();
    let ll = model.loglik(&mut tape, 0, HeadOutput::Gaussian { mean_z, std_z }, &[loc]).unwrap();
    let want = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((tape.value(ll).item() - want).abs() < 1e-12);
}

#[test]
fn poisson_loglik_of_zero_at_unit_rate() {
    let records = common::pkpd_records(2, 0);
    let model = Model::new(ModelKind::Ode, common::tiny_model_config(), ModelSpec::fit(&records).unwrap(), 0).unwrap();
    let v = model.spec.variables.iter().position(|v| v.info.name == "cell_count").unwrap();
    let mut tape = Tape::new();
    let rate = tape.constant(Tensor::matrix(1, 1, vec![1.0])).unwrap();
    let ll = model.loglik(&mut tape, v, HeadOutput::Poisson { rate }, &[0.0]).unwrap();
    assert!((-tape.value(ll).item() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_beta_objective_is_the_reconstruction() {
    let records = common::pkpd_records(3, 1);
    let model = Model::new(ModelKind::Sde, common::tiny_model_config(), ModelSpec::fit(&records).unwrap(), 1).unwrap();
    let refs: Vec<&Record> = records.iter().collect();
    let draws: Vec<RowDraw> = records.iter().map(|r| row_draw(&model, r, 1, 0, 0)).collect();
    let (b, _) = elbo(&model, &refs, &draws, 0.0, false).unwrap();
    assert_eq!(b.objective(), b.recon_loglik);
    assert!(b.kl0 >= 0.0 && b.path_kl >= 0.0);
    let (b1, _) = elbo(&model, &refs, &draws, 1.0, false).unwrap();
    assert!((b1.objective() - (b.recon_loglik - b.kl0 - b.path_kl)).abs() < 1e-9);
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let p0 = [0.5, -1.0, 2.0, 0.0];
    let g = [0.3, -2.0, 1e-3, 4.0];
    let (lr, wd, eps) = (0.01, 0.1, 1e-8);
    let mut p = p0;
    let mut st = AdamState::new(4);
    adamw_step(&mut p, &g, &mut st, lr, AdamParams { weight_decay: wd, eps, ..AdamParams::default() }).unwrap();
    for i in 0..4 {
        let want = p0[i] - lr * (g[i] / (g[i].abs() + eps) + wd * p0[i]);
        assert!((p[i] - want).abs() < 1e-15, "{i}: {} vs {want}", p[i]);
    }
    let mut q = p;
    adamw_step(&mut q, &g, &mut st, lr, AdamParams { weight_decay: wd, eps, ..AdamParams::default() }).unwrap();
    for i in 0..4 {
        let want = p[i] - lr * (g[i] / (g[i].abs() + eps) + wd * p[i]);
        assert!((q[i] - want).abs() < 1e-12);
    }
}

#[test]
fn one_epoch_checkpoint_reproduces_validation_loss() {
    let records = common::ou_records(2, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(1);
    let run = train(ModelKind::Sde, &common::tiny_model_config(), &records, &cfg, Some(dir.path())).unwrap();
    let (metrics, best, last) = run_files(dir.path());
    let log = read_log(&metrics).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log, run.log);
    assert!(log[0].wall_seconds.is_none());
    let ck = Checkpoint::load(&best).unwrap();
    assert_eq!(ck, Checkpoint::load(&last).unwrap());
    let model = Model::from_checkpoint(&ck).unwrap();
    let v = validation_loss(&model, &validation_set(&records), &cfg).unwrap();
    assert!((v - ck.val_loss.unwrap()).abs() < 1e-12, "{v} vs {:?}", ck.val_loss);
}

#[test]
fn training_is_deterministic() {
    let records = common::pkpd_records(4, 3);
    for kind in [ModelKind::Sde, ModelKind::Ode, ModelKind::Lstm] {
        let a = train(kind, &common::tiny_model_config(), &records, &quick(2), None).unwrap();
        let b = train(kind, &common::tiny_model_config(), &records, &quick(2), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
    }
}

#[test]
fn threads_do_not_change_the_objective_beyond_rounding() {
    let records = common::ou_records(12, 4);
    let one = train(ModelKind::Sde, &common::tiny_model_config(), &records, &quick(1), None).unwrap();
    let two = train(ModelKind::Sde, &common::tiny_model_config(), &records, &TrainConfig { threads: 2, ..quick(1) }, None).unwrap();
    let (a, b) = (one.log[0].objective, two.log[0].objective);
    assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn deterministic_ode_descends_on_a_noiseless_linear_toy() {
    let records = generate_ou(&OuConfig { n: 16, sigma: 0.0, obs_noise: 0.0, points: 10, ..OuConfig::default() }).unwrap();
    let mut model = Model::new(ModelKind::Ode, common::tiny_model_config(), ModelSpec::fit(&records).unwrap(), 0).unwrap();
    let refs: Vec<&Record> = records.iter().collect();
    let draws: Vec<RowDraw> = records
        .iter()
        .map(|r| RowDraw { eps: vec![0.0; model.config.latent_dim], ..row_draw(&model, r, 0, 0, 0) })
        .collect();
    let mut adam = AdamState::new(model.param_count());
    let mut obj = Vec::new();
    for _ in 0..60 {
        let (b, g) = elbo(&model, &refs, &draws, 0.0, true).unwrap();
        obj.push(-b.objective() / b.rows as f64);
        let mut g = g.unwrap();
        g.iter_mut().for_each(|x| *x /= b.rows as f64);
        clip_grad_norm(&mut g, 10.0);
        adamw_step(model.store.flat_mut(), &g, &mut adam, 1e-3, AdamParams::default()).unwrap();
    }
    for w in obj.windows(2) {
        assert!(w[1] <= w[0] + 0.05 * w[0].abs(), "objective rose: {obj:?}");
    }
    assert!(obj.last().unwrap() < &obj[0]);
}

#[test]
fn kl_terms_are_non_negative_at_every_step() {
    let records = common::ou_records(16, 5);
    let run = train(ModelKind::Sde, &common::tiny_model_config(), &records, &quick(3), None).unwrap();
    assert!(run.steps.iter().all(|s| s.kl0 >= 0.0 && s.path_kl >= 0.0));
    assert!(run.steps.iter().all(|s| s.grad_norm.is_finite()));
}

#[test]
fn invalid_config_is_rejected() {
    let records = common::ou_records(2, 6);
    let bad = TrainConfig { batch_size: 0, ..quick(1) };
    assert!(matches!(train(ModelKind::Ode, &common::tiny_model_config(), &records, &bad, None), Err(lsde::Error::Config(_))));
}
