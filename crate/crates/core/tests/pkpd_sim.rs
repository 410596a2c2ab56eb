mod common;

use lsde::pkpd::*;
use lsde::rng::rng_for;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn untreated(x0: f64) -> MechanisticTrajectory {
    let p = PkpdParams::population_means();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    simulate(&p, &TreatmentSchedule::none(), x0, HORIZON_WEEKS, SIM_DT, 0.0, &mut rng).unwrap()
}

#[test]
fn capacity_is_a_fixed_point() {
    let traj = untreated(PkpdParams::population_means().k);
    assert!(traj.x.iter().all(|&x| x == 100.0));
}

#[test]
fn untreated_tumour_approaches_capacity_monotonically() {
    for x0 in [5.0, 30.0, 160.0] {
        let traj = untreated(x0);
        let up = x0 < 100.0;
        for w in traj.x.windows(2) {
            if up {
                assert!(w[1] >= w[0] && w[1] <= 100.0);
            } else {
                assert!(w[1] <= w[0] && w[1] >= 100.0);
            }
        }
        let end = *traj.x.last().unwrap();
        assert!((end - 100.0).abs() < 0.2 * (x0 - 100.0f64).abs(), "x0 {x0}: end {end}");
    }
}

#[test]
fn chemo_decay_recovers_clearance() {
    let (fit, truth) = common::fitted_chemo_decay();
    assert!((fit / truth - 1.0).abs() < 0.02, "{fit} vs {truth}");
}

#[test]
fn health_stays_in_unit_interval() {
    for sigma in [0.01, 0.1, 0.5] {
        let ((lo, hi), (e_lo, e_hi)) = common::health_range(100, sigma, 4);
        assert!(lo >= 0.0 && hi <= 1.0, "sigma {sigma}: [{lo}, {hi}]");
        assert!(e_lo >= 0.0 && e_hi <= 5.0);
    }
}

#[test]
fn growth_rate_sample_mean_is_within_clt_band() {
    let n = 4000;
    let mut rng = rng_for(5, &[]);
    let mean = (0..n).map(|_| sample_population_params(&mut rng).rho).sum::<f64>() / n as f64;
    let se = population::RHO.sd / (n as f64).sqrt();
    assert!((mean - population::RHO.mean).abs() < 4.0 * se, "mean {mean}");
}

#[test]
fn immune_capacity_follows_truncated_normal() {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let n = 20_000;
    let mut rng = rng_for(6, &[]);
    let draws: Vec<f64> = (0..n).map(|_| sample_population_params(&mut rng).i_max).collect();
    assert!(draws.iter().all(|&v| (0.095..=I_MAX_CAP).contains(&v)));
    let p = population::I_MAX;
    let z = Normal::new(0.0, 1.0).unwrap();
    let (a, b) = ((0.1 * p.mean - p.mean) / p.sd, (I_MAX_CAP - p.mean) / p.sd);
    let expected = p.mean + p.sd * (z.pdf(a) - z.pdf(b)) / (z.cdf(b) - z.cdf(a));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
}

#[test]
fn cell_counts_have_poisson_mean() {
    let mut rng = rng_for(7, &[]);
    let n = 20_000;
    let mean = (0..n).map(|_| poisson_count(42.5, &mut rng) as f64).sum::<f64>() / n as f64;
    assert!((mean - 42.5).abs() < 4.0 * (42.5f64 / n as f64).sqrt(), "{mean}");
}

#[test]
fn cohort_is_reproducible_and_seed_sensitive() {
    let cfg = CohortConfig { sigma_proc: 0.1, missing_frac: 0.5, seed: 11, dt: SIM_DT };
    let (a, ta) = generate_cohort(4, &cfg).unwrap();
    let (b, tb) = generate_cohort(4, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = generate_cohort(4, &CohortConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn missing_fraction_removes_points_but_keeps_truth() {
    let cfg = CohortConfig { sigma_proc: 0.1, missing_frac: 0.8, seed: 2, dt: SIM_DT };
    let (records, truths) = generate_cohort(3, &cfg).unwrap();
    for (r, t) in records.iter().zip(&truths) {
        let want = OBS_POINTS - (0.8 * OBS_POINTS as f64).round() as usize;
        assert_eq!(r.observed_count("cell_count"), want);
        assert!(r.masks["cell_count"][0]);
        assert_eq!(r.observations["tumor_volume"].iter().flatten().count(), OBS_POINTS);
        assert_eq!(t.tumor_volume.len(), OBS_POINTS);
    }
}

#[test]
fn treatment_schedules_interleave_chemo_and_radio() {
    let s = TreatmentSchedule::periodic(3.0, HORIZON_WEEKS);
    assert_eq!(s.chemo_times[..3], [1.0, 4.0, 7.0]);
    assert_eq!(s.radio_times[..3], [2.0, 5.0, 8.0]);
    assert_eq!(s.rates(1.05), [1.0, 0.0]);
    assert_eq!(s.rates(2.05), [0.0, 1.0]);
    assert_eq!(s.rates(1.5), [0.0, 0.0]);
}
