use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gating::{candidates, route_with_capacity};

fn close(a: Real, b: Real, tol: Real) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn ema_examples() {
    let cfg = DccConfig::for_batch(2, 8);
    let mut s = DccState::new(&cfg);
    s.record_batch(&[8, 0], 8, 0.95).unwrap();
    assert!(close(s.u_avg[0], 0.05, 1e-12) && s.u_avg[1] == 0.0);

    s.u_avg = vec![0.25, 0.75];
    s.record_batch(&[2, 6], 8, 0.95).unwrap();
    assert!(close(s.u_avg[0], 0.25, 1e-15) && close(s.u_avg[1], 0.75, 1e-15));

    // closed form of the geometric series
    let mut s = DccState::new(&cfg);
    for t in 1..=40 {
        s.record_batch(&[3, 5], 8, 0.95).unwrap();
        let want = 0.375 * (1.0 - 0.95_f64.powi(t));
        assert!(close(s.u_avg[0], want, 1e-12), "t={t}");
    }
    assert!(s.record_batch(&[1, 1], 0, 0.95).is_err());
    assert!(s.record_batch(&[1], 8, 0.95).is_err());
}

#[test]
fn capacity_examples() {
    let cfg = DccConfig::for_batch(8, 64);
    assert!(close(cfg.base_capacity, 9.6, 1e-12));
    let mut s = DccState::new(&cfg);
    s.u_avg = vec![0.125, 0.25, 0.0, 0.125, 0.125, 0.125, 0.125, 0.125];
    s.update_capacities(&cfg);
    assert!(close(s.capacities[0], 9.6, 1e-12));
    assert!(close(s.capacities[1], 9.48, 1e-12));
    assert!(close(s.capacities[2], 9.72, 1e-12));
    // absolute, not incremental
    let before = s.capacities.clone();
    s.update_capacities(&cfg);
    assert_eq!(before, s.capacities);
}

#[test]
fn capacity_floor_and_contraction() {
    let mut cfg = DccConfig::for_batch(4, 4);
    cfg.alpha = 5.0;
    let mut s = DccState::new(&cfg);
    s.u_avg = vec![1.0, 0.0, 0.0, 0.0];
    s.update_capacities(&cfg);
    assert_eq!(s.capacities[0], cfg.min_capacity);
    assert!(s.capacities[1] > cfg.base_capacity);
}

#[test]
fn capacity_conservation() {
    for n in 1..=8 {
        for b in 1..=64 {
            let cfg = DccConfig::for_batch(n, b);
            let s = DccState::new(&cfg);
            let total: usize = s.capacities.iter().map(|c| c.ceil() as usize).sum();
            assert!(total >= b, "n={n} b={b}");
        }
    }
}

#[test]
fn temperature_examples() {
    let mut cfg = DccConfig::for_batch(8, 64);
    cfg.tau_band = 10.0;
    let mut s = DccState::new(&cfg);
    s.u_avg = vec![0.125; 8];
    let h = entropy(&s.u_avg);
    assert!(close(h, 8f64.ln(), 1e-12));
    assert!(close(h, 2.0794, 1e-4));
    let tau = s.update_temperature(&cfg);
    assert!(close(tau, 1.0 + 0.01 * h, 1e-12));

    let mut s = DccState::new(&cfg);
    s.u_avg = vec![0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(s.update_temperature(&cfg), 1.0);

    let mut s = DccState::new(&cfg);
    s.tau_base = cfg.tau_max;
    s.u_avg = vec![0.3; 8];
    assert_eq!(s.update_temperature(&cfg), cfg.tau_max);
    assert_eq!(entropy(&[0.0; 4]), 0.0);
}

#[test]
fn temperature_band_limits_entropy_drift() {
    let cfg = DccConfig::for_batch(4, 8);
    let mut s = DccState::new(&cfg);
    s.u_avg = vec![0.25; 4];
    for _ in 0..1000 {
        s.update_temperature(&cfg);
    }
    assert!(close(s.tau, 1.0 + cfg.tau_band, 1e-12));
    s.set_epoch(450, 500, &cfg);
    assert!(close(s.tau, 0.3 + cfg.tau_band, 1e-12));
}

#[test]
fn phase_schedule_examples() {
    let p = PhaseSchedule::default();
    assert_eq!(p.temperature(0, 500), 1.0);
    assert!(close(p.temperature(300, 500), 0.65, 1e-12));
    assert!(close(p.temperature(450, 500), 0.3, 1e-12));
    assert_eq!((p.phase(199, 500), p.phase(200, 500), p.phase(400, 500)), (0, 1, 2));
    // nonincreasing over the run
    let taus: Vec<Real> = (0..500).map(|e| p.temperature(e, 500)).collect();
    assert!(taus.windows(2).all(|w| w[1] <= w[0] + 1e-15));
}

#[test]
fn config_validation() {
    assert!(DccConfig::for_batch(4, 8).validate().is_ok());
    let mut c = DccConfig::for_batch(4, 8);
    c.momentum = 1.0;
    assert!(c.validate().is_err());
    let mut c = DccConfig::for_batch(4, 8);
    c.min_capacity = 0.5;
    assert!(c.validate().is_err());
    let mut c = DccConfig::for_batch(4, 8);
    c.phases.fractions = [0.5, 0.5, 0.5];
    assert!(c.validate().is_err());
    let mut c = DccConfig::for_batch(4, 8);
    c.task_weights.pop();
    assert!(c.validate().is_err());
}

#[test]
fn update_cadence() {
    let cfg = DccConfig::for_batch(2, 4);
    let mut s = DccState::new(&cfg);
    let due: Vec<bool> = (0..11)
        .map(|_| {
            s.loads = vec![4, 0];
            s.end_iteration(&cfg, 4).unwrap()
        })
        .collect();
    assert_eq!(due.iter().filter(|&&d| d).count(), 3);
    assert!(due[0] && due[5] && due[10]);
    assert!(close(s.u_avg[0], 1.0 - 0.95_f64.powi(3), 1e-12));
}

/// Synthetic workload: expert 0 is preferred with probability 0.6, the rest
/// share the remainder uniformly.
fn synthetic_utilization(n: usize, constrained: bool, seed: u64) -> (Vec<Real>, usize) {
    let batch = 32;
    let mut cfg = DccConfig::for_batch(n, batch);
    if !constrained {
        cfg.base_capacity = batch as Real * 10.0;
        cfg.min_capacity = batch as Real * 10.0;
    }
    let mut s = DccState::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..500 * cfg.period {
        let prefs: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                let mut p = vec![0.4 / (n - 1) as Real; n];
                p[0] = 0.6;
                let noise: Vec<Real> = p.iter().map(|v| v * rng.random_range(0.5..1.5)).collect();
                let first = if rng.random::<Real>() < 0.6 { 0 } else { rng.random_range(1..n) };
                let mut c = candidates(&noise, n);
                c.retain(|&i| i != first);
                c.insert(0, first);
                c.truncate(2);
                c
            })
            .collect();
        route_with_capacity(&prefs, &mut s).unwrap();
        assert!(s.within_capacity());
        s.end_iteration(&cfg, batch).unwrap();
    }
    (s.u_avg.clone(), s.max_low_streak)
}

fn std_dev(v: &[Real]) -> Real {
    let m = v.iter().sum::<Real>() / v.len() as Real;
    (v.iter().map(|x| (x - m).powi(2)).sum::<Real>() / v.len() as Real).sqrt()
}

#[test]
fn capacity_constraints_balance_utilization() {
    let (with, _) = synthetic_utilization(8, true, 3);
    let (without, _) = synthetic_utilization(8, false, 3);
    assert!(std_dev(&with) <= 0.5 * std_dev(&without), "{with:?} vs {without:?}");
}

#[test]
fn no_expert_starves_with_dcc() {
    let (_, streak) = synthetic_utilization(8, true, 11);
    assert!(streak <= 50, "streak {streak}");
}

#[test]
fn csv_log_has_fixed_columns() {
    let cfg = DccConfig::for_batch(2, 4);
    let s = DccState::new(&cfg);
    let mut buf = Vec::new();
    {
        let mut log = DccLog::new(&mut buf, 2).unwrap();
        log.record(&s).unwrap();
    }
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,u_avg_0,u_avg_1,capacity_0,capacity_1,tau,overflow"
    );
    assert_eq!(lines.next().unwrap().split(',').count(), 7);
}
