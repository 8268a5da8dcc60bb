//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr, so the summary shows up even with captured output.

use std::io::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moe_cgan::config::{RoutingMode, RunConfig, Task};
use moe_cgan::dcc::{DccConfig, DccState};
use moe_cgan::eval::{completion_rows, mean_metrics, occlusion_sweep, SWEEP_RATIOS};
use moe_cgan::gan::{geometric_consistency, geometric_consistency_loss, Checkpoint, Trainer};
use moe_cgan::gating::{route_with_capacity, GatingConfig, GatingNetwork};
use moe_cgan::gradcheck::{check, check_params, project, random};
use moe_cgan::mesh::{marching_cubes, read_obj, write_obj};
use moe_cgan::metrics::{chamfer, emd, hausdorff};
use moe_cgan::nn::{Conv3d, Conv3dSpec, ConvTranspose3d, Linear, Norm3d, NormKind, ParamStore, ResidualBlock, SpectralNorm};
use moe_cgan::tensor::{Real, Tape, Tensor, Var};
use moe_cgan::voxel::{
    apply_occlusion, read_vox, synthesize_shape, write_vox, Dataset, OcclusionMode, PointCloud, ProceduralShapeSpec,
    ShapeFamily, Split, VoxelGrid,
};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("PASS criterion {n:>2} ({name}): {detail} [{secs:.1}s]"),
        Err(why) => format!("FAIL criterion {n:>2} ({name}): {why} [{secs:.1}s]"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(why) = outcome {
        panic!("criterion {n} failed: {why}");
    }
}

fn err(e: moe_cgan::Error) -> String {
    e.to_string()
}

const TRIALS: u64 = 20;
const GRAD_TOL: Real = 1e-4;
const STEP: Real = 1e-6;

struct GradTally {
    worst: Real,
    checks: usize,
}

impl GradTally {
    fn record(&mut self, label: &str, rel: Real) -> std::result::Result<(), String> {
        self.worst = self.worst.max(rel);
        self.checks += 1;
        ensure!(rel < GRAD_TOL, "{label}: relative error {rel:.3e}");
        Ok(())
    }
}

#[test]
fn criterion_01_gradients() {
    report(1, "gradient correctness", || {
        let mut tally = GradTally { worst: 0.0, checks: 0 };
        type Unary = for<'t> fn(Var<'t>) -> Var<'t>;
        let unary: [(&str, Unary); 11] = [
            ("relu", |v| v.relu()),
            ("leaky_relu", |v| v.leaky_relu(0.2)),
            ("gelu", |v| v.gelu()),
            ("sigmoid", |v| v.sigmoid()),
            ("tanh", |v| v.tanh()),
            ("exp", |v| v.exp()),
            ("square", |v| v.square()),
            ("ln", |v| v.square().add_scalar(0.5).ln()),
            ("scale", |v| v.scale(-1.7)),
            ("neg", |v| v.neg()),
            ("clamp", |v| v.clamp(-0.4, 0.3)),
        ];
        for seed in 0..TRIALS {
            for (name, f) in unary {
                let x = random(&[3, 4], 1000 + seed);
                let r = check(&[x], STEP, |_, v| project(f(v[0]), seed)).map_err(err)?;
                tally.record(name, r.max_rel_err)?;
            }

            let (a, b) = (random(&[2, 3, 4], seed), random(&[3, 1], seed + 500));
            for (k, name) in ["add", "sub", "mul", "div"].iter().enumerate() {
                let r = check(&[a.clone(), b.clone()], STEP, |_, v| {
                    let out = match k {
                        0 => v[0].add(v[1])?,
                        1 => v[0].sub(v[1])?,
                        2 => v[0].mul(v[1])?,
                        _ => v[0].div(v[1].square().add_scalar(1.0))?,
                    };
                    project(out, seed)
                })
                .map_err(err)?;
                tally.record(name, r.max_rel_err)?;
            }

            let (a, b) = (random(&[3, 4], seed + 1), random(&[4, 2], seed + 2));
            let r = check(&[a, b], STEP, |_, v| project(v[0].matmul(v[1])?, seed)).map_err(err)?;
            tally.record("matmul", r.max_rel_err)?;

            let (a, b) = (random(&[3, 2, 2, 2, 2], seed + 3), random(&[3, 1, 2, 2, 2], seed + 4));
            let r = check(&[a, b], STEP, |_, v| {
                let c = Var::concat(&[v[0], v[1]], 1)?;
                let picked = c.index_select(&[2, 0])?;
                let scattered = Var::scatter_rows(&[(picked, vec![1, 0]), (c.index_select(&[1])?, vec![2])], 3)?;
                let pooled = scattered.spatial_mean()?.transpose()?.reshape(&[9])?;
                let soft = pooled.softmax_temperature(0.7)?;
                Ok(project(soft, seed)?.add(scattered.mean())?.add(c.sum().scale(0.01))?)
            })
            .map_err(err)?;
            tally.record("structural", r.max_rel_err)?;

            let x = random(&[2, 3, 2, 3, 2], seed + 5);
            for per_instance in [false, true] {
                let r = check(&[x.clone()], STEP, |_, v| project(v[0].normalize(per_instance, 1e-5)?.0, seed))
                    .map_err(err)?;
                tally.record("normalize", r.max_rel_err)?;
            }

            let (x, w, b) = (random(&[2, 2, 6, 6, 6], seed + 6), random(&[3, 2, 4, 4, 4], seed + 7), random(&[3], seed + 8));
            let r = check(&[x, w, b], STEP, |_, v| project(v[0].conv3d(v[1], Some(v[2]), 2, 1, 1)?, seed))
                .map_err(err)?;
            tally.record("conv3d", r.max_rel_err)?;

            let (x, w, b) = (random(&[2, 3, 3, 3, 3], seed + 9), random(&[3, 2, 4, 4, 4], seed + 10), random(&[2], seed + 11));
            let r = check(&[x, w, b], STEP, |_, v| {
                project(v[0].conv_transpose3d(v[1], Some(v[2]), 2, 1, 1)?, seed)
            })
            .map_err(err)?;
            tally.record("conv_transpose3d", r.max_rel_err)?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for seed in 0..TRIALS {
            let mut store = ParamStore::new();
            let conv = Conv3d::new(&mut store, "c", Conv3dSpec::new(2, 3, 4, 2, 1), &mut rng);
            let x = random(&[2, 2, 6, 6, 6], seed);
            let r = check_params(&mut store, &[x], STEP, |t, s, v| project(conv.forward(t, s, v[0])?, seed))
                .map_err(err)?;
            tally.record("conv k4s2 layer", r.max_rel_err)?;

            for rate in [2usize, 4, 8] {
                let mut store = ParamStore::new();
                let conv = Conv3d::new(&mut store, "d", Conv3dSpec::new(1, 2, 3, 1, rate).dilation(rate), &mut rng);
                let x = random(&[1, 1, rate + 2, rate + 2, rate + 2], seed + rate as u64);
                let r = check_params(&mut store, &[x], STEP, |t, s, v| project(conv.forward(t, s, v[0])?, seed))
                    .map_err(err)?;
                tally.record("dilated conv", r.max_rel_err)?;

                let mut store = ParamStore::new();
                let block = ResidualBlock::new(&mut store, "r", 2, rate, NormKind::Instance, &mut rng);
                let x = random(&[2, 2, 4, 4, 4], seed + 20 + rate as u64);
                let r = check_params(&mut store, &[x], STEP, |t, s, v| project(block.forward(t, s, v[0], false)?, seed))
                    .map_err(err)?;
                tally.record("dilated residual block", r.max_rel_err)?;
            }

            let mut store = ParamStore::new();
            let up = ConvTranspose3d::new(&mut store, "u", Conv3dSpec::new(3, 2, 4, 2, 1), &mut rng);
            let x = random(&[2, 3, 3, 3, 3], seed + 1);
            let r = check_params(&mut store, &[x], STEP, |t, s, v| project(up.forward(t, s, v[0])?, seed))
                .map_err(err)?;
            tally.record("transposed conv layer", r.max_rel_err)?;

            for kind in [NormKind::Batch, NormKind::Instance] {
                let mut store = ParamStore::new();
                let norm = Norm3d::new(&mut store, "n", kind, 3);
                let x = random(&[2, 3, 3, 3, 3], seed + 2);
                let r = check_params(&mut store, &[x], STEP, |t, s, v| project(norm.forward(t, s, v[0], true)?, seed))
                    .map_err(err)?;
                tally.record("norm layer", r.max_rel_err)?;
            }

            let mut store = ParamStore::new();
            let conv = Conv3d::new(&mut store, "s", Conv3dSpec::new(2, 3, 4, 2, 1), &mut rng);
            let sn = SpectralNorm::new(&mut store, "s", conv.weight, &mut rng);
            sn.power_iterate(&mut store, 3);
            let x = random(&[2, 2, 4, 4, 4], seed + 3);
            let r = check_params(&mut store, &[x], STEP, |t, s, v| {
                let w = sn.forward(t, s, false)?;
                let bias = conv.bias.map(|b| s.bind(t, b));
                project(conv.forward_with(v[0], w, bias)?.leaky_relu(0.2), seed)
            })
            .map_err(err)?;
            tally.record("spectral-norm path", r.max_rel_err)?;

            let mut store = ParamStore::new();
            let l1 = Linear::new(&mut store, "l1", 5, 4, &mut rng);
            let l2 = Linear::new(&mut store, "l2", 4, 3, &mut rng);
            let x = random(&[2, 5], seed + 4);
            let r = check_params(&mut store, &[x], STEP, |t, s, v| {
                let h = l1.forward(t, s, v[0])?.gelu();
                project(l2.forward(t, s, h)?.sigmoid(), seed)
            })
            .map_err(err)?;
            tally.record("linear stack", r.max_rel_err)?;

            let gate = GatingNetwork::new(
                GatingConfig {
                    n_experts: 3,
                    latent_dim: 4,
                    partial_dim: 8,
                    feature_dim: 2,
                    hidden: [6, 5],
                    use_features: true,
                },
                &mut rng,
            )
            .map_err(err)?;
            let mut store = gate.store.clone();
            let x = random(&[2, 4 + 8 + 3 * 2], seed + 5);
            let r = check_params(&mut store, &[x], STEP, |t, s, v| {
                project(gate.forward_with(t, s, v[0])?.softmax_temperature(0.8)?, seed)
            })
            .map_err(err)?;
            tally.record("gating MLP", r.max_rel_err)?;
        }
        Ok(format!("{} checks, worst relative error {:.2e}", tally.checks, tally.worst))
    });
}

fn dcc_with_capacities(capacities: Vec<Real>) -> DccState {
    let mut s = DccState::new(&DccConfig::for_batch(capacities.len(), 8));
    s.capacities = capacities;
    s
}

#[test]
fn criterion_02_routing_exactness() {
    report(2, "routing and capacity arithmetic", || {
        // Integer capacities; the last sample finds every candidate full and
        // falls back to the first of three tied residual ratios.
        let mut s = dcc_with_capacities(vec![2.0, 1.0, 1.0]);
        let cands = vec![vec![0, 1], vec![0, 2], vec![0, 1], vec![1, 2], vec![2, 0]];
        let r = route_with_capacity(&cands, &mut s).map_err(err)?;
        let got: Vec<(usize, bool)> = r.iter().map(|d| (d.expert, d.overflow)).collect();
        let want = vec![(0, false), (0, false), (1, false), (2, false), (0, true)];
        ensure!(got == want, "trace 1: {got:?}");
        ensure!(s.loads == vec![3, 1, 1] && s.overflow == 1, "trace 1 loads {:?}", s.loads);

        // Fractional capacities; overflow picks the largest residual ratio,
        // even when it is outside the candidate list.
        let mut s = dcc_with_capacities(vec![1.5, 0.5]);
        let cands = vec![vec![0], vec![0], vec![0], vec![1]];
        let r = route_with_capacity(&cands, &mut s).map_err(err)?;
        let got: Vec<(usize, bool)> = r.iter().map(|d| (d.expert, d.overflow)).collect();
        let want = vec![(0, false), (0, false), (1, true), (0, true)];
        ensure!(got == want, "trace 2: {got:?}");
        ensure!(r.iter().all(|d| d.weights.iter().sum::<Real>() == 1.0), "hard weights are not one-hot");

        // Loads are reset on every call.
        let again = route_with_capacity(&cands, &mut s).map_err(err)?;
        ensure!(again == r && s.loads == vec![3, 1], "routing is not repeatable");

        let cfg = DccConfig::for_batch(8, 64);
        ensure!((cfg.base_capacity - 9.6).abs() <= 1e-12, "base capacity {}", cfg.base_capacity);
        ensure!(cfg.alpha == 0.1 && cfg.momentum == 0.95 && cfg.period == 5, "constants {cfg:?}");
        let mut s = DccState::new(&cfg);
        s.u_avg = vec![0.125, 0.25, 0.0, 0.125, 0.125, 0.125, 0.125, 0.125];
        s.update_capacities(&cfg);
        let (c0, c1, c2) = (s.capacities[0], s.capacities[1], s.capacities[2]);
        ensure!((c0 - 9.6).abs() <= 1e-12, "balanced expert {c0}");
        ensure!((c1 - 9.48).abs() <= 1e-12, "overused expert {c1}");
        ensure!((c2 - 9.72).abs() <= 1e-12, "idle expert {c2}");
        Ok(format!("2 traces exact; capacities {c1:.12} / {c2:.12}"))
    });
}

/// Routes 500 batches of 64 samples. The first preference is expert 0 with
/// probability 0.6, otherwise uniform; the second is uniform over the rest.
fn skewed_workload(constrained: bool) -> std::result::Result<(Vec<Real>, usize), String> {
    let (n, batch) = (8usize, 64usize);
    let mut cfg = DccConfig::for_batch(n, batch);
    if !constrained {
        cfg.base_capacity = 100.0 * batch as Real;
        cfg.min_capacity = cfg.base_capacity;
    }
    let mut s = DccState::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let cands: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                let first = if rng.random::<Real>() < 0.6 { 0 } else { rng.random_range(1..n) };
                let mut second = rng.random_range(0..n - 1);
                if second >= first {
                    second += 1;
                }
                vec![first, second]
            })
            .collect();
        route_with_capacity(&cands, &mut s).map_err(err)?;
        s.end_iteration(&cfg, batch).map_err(err)?;
    }
    Ok((s.u_avg, s.max_low_streak))
}

fn mean_std(v: &[Real]) -> (Real, Real) {
    let m = v.iter().sum::<Real>() / v.len() as Real;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<Real>() / v.len() as Real).sqrt())
}

#[test]
fn criterion_03_load_balance() {
    report(3, "load balance under skewed affinity", || {
        let (with, streak) = skewed_workload(true)?;
        let (without, _) = skewed_workload(false)?;
        let (m_with, s_with) = mean_std(&with);
        let (m_without, s_without) = mean_std(&without);
        ensure!(s_with <= 0.5 * s_without, "std {s_with:.4} vs {s_without:.4}");
        for m in [m_with, m_without] {
            ensure!((m - 0.125).abs() <= 0.01, "mean utilization {m:.4}");
        }
        ensure!(streak <= 50, "starvation streak {streak}");
        Ok(format!(
            "std {s_with:.4} with vs {s_without:.4} without; means {m_with:.4} / {m_without:.4}"
        ))
    });
}

/// Minimum mean matched distance over all m! bijections.
fn permutation_emd(a: &[[Real; 3]], b: &[[Real; 3]]) -> Real {
    fn go(i: usize, a: &[[Real; 3]], b: &[[Real; 3]], used: &mut [bool], acc: Real, best: &mut Real) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                let d = ((a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2) + (a[i][2] - b[j][2]).powi(2)).sqrt();
                used[j] = true;
                go(i + 1, a, b, used, acc + d, best);
                used[j] = false;
            }
        }
    }
    let mut best = Real::INFINITY;
    go(0, a, b, &mut vec![false; b.len()], 0.0, &mut best);
    best / a.len() as Real
}

#[test]
fn criterion_04_metric_oracles() {
    report(4, "EMD oracle and distance identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst: Real = 0.0;
        let mut cloud = |m: usize| -> Vec<[Real; 3]> {
            (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
        };
        for trial in 0..200 {
            let m = 1 + trial % 6;
            let (a, b) = (cloud(m), cloud(m));
            let exact = emd(&PointCloud::new(a.clone()), &PointCloud::new(b.clone())).map_err(err)?;
            let oracle = permutation_emd(&a, &b);
            worst = worst.max((exact - oracle).abs());
            ensure!((exact - oracle).abs() <= 1e-9, "trial {trial} (m={m}): {exact} vs {oracle}");
            let (pa, pb) = (PointCloud::new(a), PointCloud::new(b));
            ensure!(chamfer(&pa, &pa).map_err(err)? == 0.0, "CD identity");
            ensure!(hausdorff(&pa, &pa).map_err(err)? == 0.0, "HD identity");
            ensure!(emd(&pa, &pa).map_err(err)?.abs() < 1e-15, "EMD identity");
            ensure!(chamfer(&pa, &pb).map_err(err)? == chamfer(&pb, &pa).map_err(err)?, "CD symmetry");
            ensure!(hausdorff(&pa, &pb).map_err(err)? == hausdorff(&pb, &pa).map_err(err)?, "HD symmetry");
        }
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        ensure!(chamfer(&p, &q).map_err(err)? == 2.0, "two-point CD");
        ensure!(hausdorff(&p, &q).map_err(err)? == 1.0, "two-point HD");
        ensure!(emd(&p, &q).map_err(err)? == 1.0, "two-point EMD");
        let pair = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        ensure!(chamfer(&pair, &p).map_err(err)? == 0.5, "asymmetric-size CD");
        ensure!(hausdorff(&pair, &p).map_err(err)? == 1.0, "asymmetric-size HD");
        Ok(format!("200 instances, worst EMD gap {worst:.1e}"))
    });
}

#[test]
fn criterion_05_geometric_locality() {
    report(5, "geometric loss locality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let shape = [2, 1, 5, 5, 5];
            let x = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
            let xt = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
            let keep = rng.random_range(0.1..0.9);
            let mask_values: Vec<Real> = (0..x.numel()).map(|_| Real::from(u8::from(rng.random::<Real>() < keep))).collect();
            let mask = Tensor::new(shape.to_vec(), mask_values.clone()).map_err(err)?;
            let lambda = rng.random_range(0.1..20.0);
            let mut moved = xt.clone();
            for (v, &m) in moved.data_mut().iter_mut().zip(&mask_values) {
                if m == 0.0 {
                    *v = rng.random_range(-100.0..100.0);
                }
            }

            let tape = Tape::new();
            let leaf = tape.leaf(xt.clone().with_requires_grad(true));
            let loss = geometric_consistency(leaf, &x, &mask, lambda).map_err(err)?;
            let base = loss.value().item();
            let grads = tape.backward(loss).map_err(err)?;
            let g = grads.get(leaf).ok_or("no gradient for x̃")?;
            for (i, (&gv, &m)) in g.data().iter().zip(&mask_values).enumerate() {
                ensure!(m != 0.0 || gv == 0.0, "trial {trial}: gradient {gv} at unmasked cell {i}");
            }
            let tape = Tape::new();
            let moved_loss = geometric_consistency(tape.constant(moved.clone()), &x, &mask, lambda)
                .map_err(err)?
                .value()
                .item();
            ensure!(moved_loss == base, "trial {trial}: {moved_loss} vs {base}");
        }

        // Single-grid form against a hand-built occlusion mask.
        let spec = ProceduralShapeSpec::sample(ShapeFamily::ALL[1], 3);
        let x = synthesize_shape(&spec, 16).map_err(err)?;
        let (x_p, mask) = apply_occlusion(&x, 0.5, OcclusionMode::RandomCells, 7).map_err(err)?;
        let mut far = x_p.clone();
        for (i, &m) in mask.values.iter().enumerate() {
            if m == 0 {
                far.set_index(i, 0.37);
            }
        }
        let a = geometric_consistency_loss(&x, &x_p, &mask, 10.0).map_err(err)?;
        let b = geometric_consistency_loss(&x, &far, &mask, 10.0).map_err(err)?;
        ensure!(a == b, "grid form {a} vs {b}");
        Ok("100 random triples exact; gradient zero outside the mask".into())
    });
}

fn small_training_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.count = 50;
    c
}

fn training_split(c: &RunConfig) -> std::result::Result<Vec<VoxelGrid>, String> {
    let ds = Dataset::synthesize(c.data.count, c.data.resolution, c.data.seed).map_err(err)?;
    Ok(ds.split(Split::Train).map(|i| i.grid.clone()).collect())
}

#[test]
fn criterion_06_sparse_activation() {
    report(6, "sparse activation counters", || {
        let mut detail = Vec::new();
        for mode in [RoutingMode::Hard, RoutingMode::Soft] {
            let mut c = small_training_config();
            c.routing.train_mode = mode;
            let k = c.routing.k;
            let mut t = Trainer::new(&c, training_split(&c)?).map_err(err)?;
            let (mut samples, mut forwards, mut gate_forwards) = (0usize, 0usize, 0usize);
            for step in 0..10 {
                let r = t.train_step().map_err(err)?;
                ensure!(r.full_forwards.len() == c.train.batch_size, "step {step}: counters for {} samples", r.full_forwards.len());
                for (&f, &g) in r.full_forwards.iter().zip(&r.gate_forwards) {
                    match mode {
                        RoutingMode::Hard => ensure!(f == 1, "hard step {step}: {f} full forwards"),
                        RoutingMode::Soft => ensure!((1..=k).contains(&f), "soft step {step}: {f} full forwards"),
                    }
                    ensure!(g <= k, "step {step}: {g} gate-update forwards");
                }
                samples += r.full_forwards.len();
                forwards += r.full_forwards.iter().sum::<usize>();
                gate_forwards += r.gate_forwards.iter().sum::<usize>();
            }
            detail.push(format!(
                "{mode:?}: {:.2} expert + {:.2} gate-update forwards/sample",
                forwards as Real / samples as Real,
                gate_forwards as Real / samples as Real
            ));
        }
        Ok(detail.join("; "))
    });
}

fn inversions(v: &[Real]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

#[test]
fn criterion_07_desk_training() {
    report(7, "desk-scale training", || {
        let c = RunConfig::desk();
        let ds = Dataset::synthesize(c.data.count, c.data.resolution, c.data.seed).map_err(err)?;
        let train: Vec<VoxelGrid> = ds.split(Split::Train).map(|i| i.grid.clone()).collect();
        let test: Vec<(String, VoxelGrid)> = ds.split(Split::Test).map(|i| (i.id.to_string(), i.grid.clone())).collect();
        let settings = c.eval.settings();
        let mut t = Trainer::new(&c, train).map_err(err)?;

        let untrained = completion_rows(&mut t.model, &test, 0.5, OcclusionMode::RandomCells, &settings).map_err(err)?;
        let [cd0, ..] = mean_metrics(&untrained);

        let mut non_finite = 0usize;
        t.train(|_, r| {
            let l = &r.losses;
            if ![l.d_loss, l.g_loss, l.geom, l.total, r.gate_loss].iter().all(|v| v.is_finite()) {
                non_finite += 1;
            }
            Ok(())
        })
        .map_err(err)?;
        ensure!(non_finite == 0, "{non_finite} steps with non-finite losses");
        let streak = t.model.dcc.max_low_streak;
        ensure!(!t.model.dcc.starved(50), "expert starvation streak {streak}");

        let rows = completion_rows(&mut t.model, &test, 0.5, OcclusionMode::RandomCells, &settings).map_err(err)?;
        let [cd, _, _, prr] = mean_metrics(&rows);
        ensure!(prr >= 80.0, "PRR {prr:.2} at 50% occlusion");
        ensure!(3.0 * cd <= cd0, "CD {cd:.5} vs untrained {cd0:.5}");

        let sweep = occlusion_sweep(&mut t.model, &test, &SWEEP_RATIOS, OcclusionMode::RandomCells, &settings)
            .map_err(err)?;
        let per: Vec<[Real; 4]> = sweep.chunks(test.len()).map(mean_metrics).collect();
        for (k, name) in ["CD", "HD", "EMD"].iter().enumerate() {
            let series: Vec<Real> = per.iter().map(|m| m[k]).collect();
            ensure!(inversions(&series) <= 1, "{name} across the sweep: {series:?}");
        }
        Ok(format!(
            "PRR {prr:.1}, CD {cd:.5} vs untrained {cd0:.5} ({:.0}x), max low-utilization streak {streak}",
            cd0 / cd
        ))
    });
}

#[test]
fn criterion_08_ablation() {
    report(8, "expert-count ablation", || {
        let mut c = RunConfig::desk();
        c.train.epochs = 2;
        let ds = Dataset::synthesize(c.data.count, c.data.resolution, c.data.seed).map_err(err)?;
        let report = moe_cgan::cli::run_ablation(&c, &ds, &[1, 4, 8], &[Task::Completion, Task::Generation])
            .map_err(err)?;
        let md = &report.markdown;
        ensure!(md.contains("desk scale"), "report is not labelled as desk scale");
        ensure!(md.contains("Completion") && md.contains("Generation"), "missing task tables");
        for n in [1, 4, 8] {
            ensure!(md.contains(&format!("| n={n} |")), "no rows for n={n}");
        }
        ensure!(
            report.rows.iter().all(|r| r.cd.is_finite() && r.hd.is_finite() && r.emd.is_finite()),
            "non-finite metric rows"
        );
        Ok(format!("{} metric rows, {} report lines", report.rows.len(), md.lines().count()))
    });
}

#[test]
fn criterion_09_marching_cubes() {
    report(9, "marching cubes", || {
        let mut cell = VoxelGrid::zeros(4);
        cell.set(1, 2, 1, 1.0);
        let m = marching_cubes(&cell, 0.5);
        ensure!(m.euler_characteristic() == 2 && m.is_watertight(), "single cell: χ={}", m.euler_characteristic());

        let (res, radius) = (16usize, 5.0);
        let mut ball = VoxelGrid::zeros(res);
        let c = res as Real / 2.0;
        for i in 0..ball.len() {
            let q = ball.coords(i).map(|v| v as Real + 0.5 - c);
            let d = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            ball.set_index(i, (0.5 + radius - d).clamp(0.0, 1.0));
        }
        let sphere = marching_cubes(&ball, 0.5);
        let h = 1.0 / res as Real;
        let analytic = 4.0 * std::f64::consts::PI * (radius * h).powi(2);
        let area_err = (sphere.surface_area() - analytic).abs() / analytic;
        ensure!(area_err < 0.10, "sphere area off by {:.1}%", 100.0 * area_err);

        for family in ShapeFamily::ALL {
            for seed in 0..4 {
                let g = synthesize_shape(&ProceduralShapeSpec::sample(family, seed), 16).map_err(err)?;
                let m = marching_cubes(&g, 0.5);
                ensure!(!m.is_empty() && m.is_watertight() && m.is_valid(), "{family:?} seed {seed} not watertight");
            }
        }

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("sphere.obj");
        write_obj(&sphere, &path).map_err(err)?;
        let back = read_obj(&path).map_err(err)?;
        ensure!(back.triangles == sphere.triangles, "faces changed in the OBJ round trip");
        let drift = back
            .vertices
            .iter()
            .zip(&sphere.vertices)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, Real::max);
        ensure!(back.vertices.len() == sphere.vertices.len() && drift < 1e-5, "vertex drift {drift:.2e}");
        Ok(format!("sphere area error {:.2}%, OBJ drift {drift:.1e}", 100.0 * area_err))
    });
}

#[test]
fn criterion_10_persistence() {
    report(10, "checkpoint resume and VOX1 round trip", || {
        let c = small_training_config();
        let data = training_split(&c)?;
        let mut t = Trainer::new(&c, data.clone()).map_err(err)?;
        for _ in 0..2 {
            t.train_step().map_err(err)?;
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("resume.mckp");
        moe_cgan::gan::save_checkpoint(&t, &path).map_err(err)?;
        let mut resumed = moe_cgan::gan::load_checkpoint(&path)
            .map_err(err)?
            .into_trainer(data)
            .map_err(err)?;
        for step in 0..5 {
            let a = t.train_step().map_err(err)?.losses;
            let b = resumed.train_step().map_err(err)?.losses;
            let bits = |l: &moe_cgan::gan::LossSummary| [l.d_loss, l.g_loss, l.geom, l.total].map(Real::to_bits);
            ensure!(bits(&a) == bits(&b), "step {step}: {a:?} vs {b:?}");
        }
        let same = Checkpoint::from_trainer(&t).to_bytes().map_err(err)?
            == Checkpoint::from_trainer(&resumed).to_bytes().map_err(err)?;
        ensure!(same, "states diverged after resuming");

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Real-valued payloads are stored as f32.
        let mut grid = VoxelGrid::zeros(16);
        for i in 0..grid.len() {
            grid.set_index(i, Real::from(rng.random::<f32>()));
        }
        let back = VoxelGrid::from_vox_bytes(&grid.to_vox_bytes()).map_err(err)?;
        ensure!(
            back.values().iter().zip(grid.values()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "VOX1 bytes round trip changed values"
        );
        let solid = synthesize_shape(&ProceduralShapeSpec::sample(ShapeFamily::ALL[2], 1), 16).map_err(err)?;
        let bytes = solid.to_vox_bytes();
        ensure!(bytes.len() == 16 + 16usize.pow(3), "binary grid not stored one byte per cell");
        ensure!(VoxelGrid::from_vox_bytes(&bytes).map_err(err)? == solid, "binary VOX1 round trip");
        let vox = dir.path().join("grid.vox");
        write_vox(&grid, &vox).map_err(err)?;
        ensure!(read_vox(&vox).map_err(err)? == grid, "VOX1 file round trip changed the grid");
        Ok("5 resumed losses bit-identical; VOX1 bit-exact".into())
    });
}
