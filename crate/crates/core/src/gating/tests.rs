use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dcc::DccConfig;
use crate::gradcheck;

fn config(use_features: bool) -> GatingConfig {
    GatingConfig {
        n_experts: 3,
        latent_dim: 4,
        partial_dim: 8,
        feature_dim: 2,
        hidden: [6, 5],
        use_features,
    }
}

#[test]
fn zero_network_gives_zero_scores() {
    let mut gn = GatingNetwork::new(config(true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    gn.zero_init();
    let s = affinity_scores(&gn, &[0.0; 4], None, &vec![vec![0.0; 2]; 3]).unwrap();
    assert_eq!(s, vec![0.0; 3]);
}

#[test]
fn scores_are_deterministic_and_check_feature_count() {
    let gn = GatingNetwork::new(config(true), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let z = [0.3, -0.2, 1.0, 0.5];
    let grid = VoxelGrid::from_values(2, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let f = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
    let a = affinity_scores(&gn, &z, Some(&grid), &f).unwrap();
    let b = affinity_scores(&gn, &z, Some(&grid), &f).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    assert!(affinity_scores(&gn, &z, Some(&grid), &f[..2]).is_err());
    // the generation-mode slot is zeros
    let zero = VoxelGrid::zeros(2);
    assert_eq!(
        affinity_scores(&gn, &z, None, &f).unwrap(),
        affinity_scores(&gn, &z, Some(&zero), &f).unwrap()
    );
}

#[test]
fn feature_free_network_ignores_feature_order() {
    let gn = GatingNetwork::new(config(false), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let z = [0.3, -0.2, 1.0, 0.5];
    let f = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
    let mut g = f.clone();
    g.rotate_left(1);
    assert_eq!(
        affinity_scores(&gn, &z, None, &f).unwrap(),
        affinity_scores(&gn, &z, None, &g).unwrap()
    );
    let with = GatingNetwork::new(config(true), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(
        affinity_scores(&with, &z, None, &f).unwrap(),
        affinity_scores(&with, &z, None, &g).unwrap()
    );
}

#[test]
fn gating_network_gradients() {
    let mut gn = GatingNetwork::new(config(true), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let z = gradcheck::random(&[2, 4], 5);
    let f: Vec<Tensor> = (0..3).map(|i| gradcheck::random(&[2, 2], 10 + i)).collect();
    let input = gn.input(&z, None, &f).unwrap();
    let cfg = gn.config.clone();
    let mut store = std::mem::take(&mut gn.store);
    let check = gradcheck::check_params(&mut store, &[input], 1e-6, |tape, st, xs| {
        let net = GatingNetwork {
            config: cfg.clone(),
            store: std::mem::take(st),
            layers: gn.layers.clone(),
        };
        let out = net.forward(tape, xs[0]);
        *st = net.store;
        gradcheck::project(out?, 7)
    })
    .unwrap();
    assert!(check.max_rel_err < 1e-4, "{}", check.max_rel_err);
}

#[test]
fn topk_examples() {
    let p = [0.4, 0.3, 0.2, 0.1];
    assert_eq!(topk_gate(&p, 2, false).unwrap(), vec![0.4, 0.3, 0.0, 0.0]);
    assert_eq!(topk_gate(&p, 4, false).unwrap(), p.to_vec());
    assert_eq!(topk_gate(&[0.25; 4], 1, false).unwrap(), vec![0.25, 0.0, 0.0, 0.0]);
    let r = topk_gate(&p, 2, true).unwrap();
    assert!((r[0] - 4.0 / 7.0).abs() < 1e-12 && (r[1] - 3.0 / 7.0).abs() < 1e-12);
    assert!(topk_gate(&p, 0, false).is_err());
    assert!(topk_gate(&p, 5, false).is_err());
    assert_eq!(candidates(&[0.1, 0.5, 0.5, 0.2], 3), vec![1, 2, 3]);
}

#[test]
fn gating_state_invariants() {
    let s = GatingState::new(vec![2.0, -1.0, 0.5, 0.0], 0.7, 2, false).unwrap();
    assert!((s.probs.iter().sum::<Real>() - 1.0).abs() < 1e-12);
    assert_eq!(s.gates.iter().filter(|&&g| g != 0.0).count(), 2);
    for (g, p) in s.gates.iter().zip(&s.probs) {
        assert!(*g == 0.0 || g == p);
    }
    assert_eq!(s.candidates(), vec![0, 2]);
}

#[test]
fn mixture_examples() {
    let h = [vec![1.0, 2.0], vec![-1.0, -2.0], vec![5.0, 5.0]];
    let mut calls = Vec::new();
    let out = mixture_output(&[0.0, 1.0, 0.0], |i| {
        calls.push(i);
        Ok(h[i].clone())
    })
    .unwrap();
    assert_eq!(out, h[1]);
    assert_eq!(calls, vec![1]);

    let out = mixture_output(&[0.5, 0.5, 0.0], |i| Ok(h[i].clone())).unwrap();
    assert_eq!(out, vec![0.0, 0.0]);

    let ones = [vec![1.0; 3], vec![1.0; 3]];
    let out = mixture_output(&[0.4, 0.3], |i| Ok(ones[i].clone())).unwrap();
    assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-15));

    assert!(mixture_output(&[0.5, 0.5], |i| Ok(vec![0.0; i + 1])).is_err());
}

fn state_with(capacities: Vec<Real>) -> DccState {
    let mut s = DccState::new(&DccConfig::for_batch(capacities.len(), 4));
    s.capacities = capacities;
    s
}

#[test]
fn routing_traces() {
    let mut s = state_with(vec![1.0, 1.0]);
    let r = route_with_capacity(&vec![vec![0, 1]; 3], &mut s).unwrap();
    assert_eq!(r.iter().map(|d| d.expert).collect::<Vec<_>>(), vec![0, 1, 0]);
    assert_eq!(r.iter().map(|d| d.overflow).collect::<Vec<_>>(), vec![false, false, true]);
    assert_eq!(s.overflow, 1);

    let mut s = state_with(vec![2.0, 2.0]);
    route_with_capacity(&vec![vec![0, 1]; 4], &mut s).unwrap();
    assert_eq!(s.loads, vec![2, 2]);

    let mut s = state_with(vec![10.0, 10.0]);
    let r = route_with_capacity(&vec![vec![1, 0]; 8], &mut s).unwrap();
    assert!(r.iter().all(|d| d.expert == 1 && !d.overflow && d.weights == vec![0.0, 1.0]));

    // fallback prefers the largest residual ratio outside the candidates
    let mut s = state_with(vec![1.0, 1.0, 3.0]);
    let r = route_with_capacity(&vec![vec![0, 1]; 3], &mut s).unwrap();
    assert_eq!((r[2].expert, r[2].overflow), (2, true));
    assert!(route_with_capacity(&[vec![]], &mut s).is_err());
}

#[test]
fn adaptive_k_examples() {
    assert_eq!(adaptive_k(&[1.0, 0.0, 0.0, 0.0], 1, 3).unwrap(), 1);
    assert_eq!(adaptive_k(&[0.25; 4], 1, 3).unwrap(), 3);
    assert_eq!(adaptive_k(&[0.125; 8], 2, 8).unwrap(), 8);
    let p = half_entropy_distribution(8);
    assert!((entropy(&p) - 8f64.ln() / 2.0).abs() < 1e-10);
    assert_eq!(adaptive_k(&p, 1, 2).unwrap(), 2);
    assert!(adaptive_k(&[0.5, 0.5], 2, 1).is_err());
    assert!(adaptive_k(&[0.5, 0.5], 1, 3).is_err());
    assert_eq!(adaptive_k(&[1.0], 1, 1).unwrap(), 1);
}

/// One heavy entry and seven equal light ones, bisected to entropy ln(n)/2.
fn half_entropy_distribution(n: usize) -> Vec<Real> {
    let target = (n as Real).ln() / 2.0;
    let make = |a: Real| {
        let mut p = vec![(1.0 - a) / (n - 1) as Real; n];
        p[0] = a;
        p
    };
    let (mut lo, mut hi) = (1.0 / n as Real, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy(&make(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    make(0.5 * (lo + hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_shift_invariance(s in prop::collection::vec(-5.0f64..5.0, 2..8), c in -50.0f64..50.0) {
        let a = GatingState::new(s.clone(), 0.8, 1, false).unwrap();
        let shifted: Vec<Real> = s.iter().map(|v| v + c).collect();
        let b = GatingState::new(shifted, 0.8, 1, false).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_temperature_sharpens(s in prop::collection::vec(-3.0f64..3.0, 2..8), t in 0.2f64..2.0) {
        let spread = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - s.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let hot = GatingState::new(s.clone(), t, 1, false).unwrap();
        let cold = GatingState::new(s, t * 0.8, 1, false).unwrap();
        let max = |p: &[Real]| p.iter().cloned().fold(0.0, f64::max);
        prop_assert!(max(&cold.probs) > max(&hot.probs));
    }

    #[test]
    fn routing_respects_capacity(
        caps in prop::collection::vec(1.0f64..4.0, 2..5),
        prefs in prop::collection::vec(prop::collection::vec(0usize..4, 1..3), 1..16),
    ) {
        let n = caps.len();
        let cands: Vec<Vec<usize>> = prefs.iter().map(|c| c.iter().map(|&i| i % n).collect()).collect();
        let mut s = state_with(caps.clone());
        let r = route_with_capacity(&cands, &mut s).unwrap();
        let mut loads = vec![0usize; n];
        for d in &r {
            if !d.overflow {
                prop_assert!(loads[d.expert] < caps[d.expert].ceil() as usize);
            }
            loads[d.expert] += 1;
        }
        prop_assert_eq!(&loads, &s.loads);
        let mut again = state_with(caps);
        prop_assert_eq!(route_with_capacity(&cands, &mut again).unwrap(), r);
    }
}
