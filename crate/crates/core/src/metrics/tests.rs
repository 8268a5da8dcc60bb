use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn cloud(points: &[[Real; 3]]) -> PointCloud {
    PointCloud::new(points.to_vec())
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
}

/// Minimum over all permutations, by Heap's algorithm.
fn brute_force_emd(a: &PointCloud, b: &PointCloud) -> Real {
    let m = a.len();
    let cost = |perm: &[usize]| {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| {
                let (p, q) = (a.points[i], b.points[j]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            })
            .sum::<Real>()
    };
    let mut perm: Vec<usize> = (0..m).collect();
    let mut c = vec![0; m];
    let mut best = cost(&perm);
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / m as Real
}

#[test]
fn two_point_values() {
    let a = cloud(&[[0.0, 0.0, 0.0]]);
    let b = cloud(&[[1.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    assert_eq!(hausdorff(&a, &b).unwrap(), 1.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    assert_eq!(hausdorff(&b, &b).unwrap(), 0.0);
    assert!(chamfer(&a, &PointCloud::default()).is_err());
    assert!(hausdorff(&PointCloud::default(), &a).is_err());
}

#[test]
fn emd_line_example() {
    let a = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let b = cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
    let s = emd_solution(&a, &b).unwrap();
    assert!((s.cost - 1.0).abs() < 1e-15);
    assert_eq!(s.assignment, vec![0, 1]);
    assert_eq!(s.epsilon, 0.0);
    assert!(emd(&a, &cloud(&[[0.0; 3]])).is_err());
    assert!(emd(&PointCloud::default(), &PointCloud::default()).is_err());
}

#[test]
fn emd_of_permutation_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_cloud(40, &mut rng);
    let mut b = a.clone();
    b.points.shuffle(&mut rng);
    assert!(emd(&a, &b).unwrap().abs() < 1e-15);
}

#[test]
fn hungarian_matches_factorial_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200 {
        let m = 1 + trial % 6;
        let a = random_cloud(m, &mut rng);
        let b = random_cloud(m, &mut rng);
        let exact = emd(&a, &b).unwrap();
        let oracle = brute_force_emd(&a, &b);
        assert!((exact - oracle).abs() < 1e-9, "m={m}: {exact} vs {oracle}");
    }
}

#[test]
fn emd_is_bounded_below_by_centroid_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = random_cloud(20, &mut rng);
        let mut b = random_cloud(20, &mut rng);
        b.points.iter_mut().for_each(|p| p[0] += 0.3);
        let (ca, cb) = (a.centroid(), b.centroid());
        let gap = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt();
        assert!(emd(&a, &b).unwrap() >= gap - 1e-12);
    }
}

#[test]
fn auction_is_within_epsilon_of_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in [5, 30, 120] {
        let a = random_cloud(m, &mut rng);
        let b = random_cloud(m, &mut rng);
        let cost = emd::cost_matrix(&a.points, &b.points);
        let total = |asg: &[usize]| asg.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum::<Real>();
        let exact = total(&hungarian(&cost, m));
        let eps = 1e-4;
        let approx_asg = auction(&cost, m, eps);
        let mut seen = approx_asg.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..m).collect::<Vec<_>>());
        let approx = total(&approx_asg);
        assert!(approx >= exact - 1e-12 && approx <= exact + m as Real * eps, "{approx} vs {exact}");
    }
}

#[test]
fn large_clouds_use_auction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_cloud(EXACT_EMD_LIMIT + 1, &mut rng);
    let b = random_cloud(EXACT_EMD_LIMIT + 1, &mut rng);
    let s = emd_solution(&a, &b).unwrap();
    assert_eq!(s.epsilon, AUCTION_EPSILON);
    assert!(s.cost > 0.0);
}

#[test]
fn accelerated_nearest_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let a = random_cloud(20 + trial, &mut rng);
        let mut b = random_cloud(30 + 2 * trial, &mut rng);
        // clustered and offset targets stress the ring search
        if trial % 3 == 0 {
            b.points.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = 2.0 + 0.1 * *v));
        }
        let brute = chamfer(&a, &b).unwrap();
        let fast = chamfer_accelerated(&a, &b).unwrap();
        assert!((brute - fast).abs() <= 1e-12 * brute.max(1.0), "trial {trial}");
    }
    let a = random_cloud(BRUTE_FORCE_LIMIT + 10, &mut rng);
    let b = random_cloud(300, &mut rng);
    let direct: Real = {
        let d = nearest::nearest_brute(&a.points, &b.points);
        let e = nearest::nearest_brute(&b.points, &a.points);
        d.iter().sum::<Real>() / d.len() as Real + e.iter().sum::<Real>() / e.len() as Real
    };
    assert!((chamfer(&a, &b).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn symmetry_and_triangle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let a = random_cloud(15, &mut rng);
        let b = random_cloud(25, &mut rng);
        let c = random_cloud(10, &mut rng);
        assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        let (ab, bc, ac) = (
            hausdorff(&a, &b).unwrap(),
            hausdorff(&b, &c).unwrap(),
            hausdorff(&a, &c).unwrap(),
        );
        assert!(ac <= ab + bc + 1e-12);
        let mut b2 = b.clone();
        b2.points.push(a.points[3]);
        assert!(hausdorff(&a, &b2).unwrap() <= ab + 1e-15);
    }
}

#[test]
fn prr_examples() {
    let mut xp = VoxelGrid::zeros(8);
    for i in 0..10 {
        xp.set_index(i * 3, 1.0);
    }
    assert_eq!(prr(&xp, &xp, 0.5).unwrap(), 100.0);
    let mut nine = xp.clone();
    nine.set_index(0, 0.2);
    assert!((prr(&xp, &nine, 0.5).unwrap() - 90.0).abs() < 1e-12);
    assert_eq!(prr(&xp, &VoxelGrid::filled(8, 1.0), 0.5).unwrap(), 100.0);
    assert_eq!(prr(&VoxelGrid::zeros(8), &VoxelGrid::zeros(8), 0.5).unwrap(), 100.0);
    assert!(prr(&xp, &VoxelGrid::zeros(4), 0.5).is_err());
}

#[test]
fn identity_pair_evaluates_to_zero() {
    let mut g = VoxelGrid::zeros(8);
    for x in 2..6 {
        for y in 2..6 {
            for z in 2..6 {
                g.set(x, y, z, 1.0);
            }
        }
    }
    let settings = EvalSettings {
        points: 64,
        ..EvalSettings::default()
    };
    let r = evaluate(&g, &g, Some(&g), &settings).unwrap();
    assert_eq!((r.cd, r.hd, r.emd, r.prr), (0.0, 0.0, 0.0, Some(100.0)));
    // an empty prediction still evaluates through the argmax fallback
    let r = evaluate(&g, &VoxelGrid::zeros(8), None, &settings).unwrap();
    assert!(r.cd > 0.0 && r.prr.is_none());
}

#[test]
fn csv_and_markdown_reports() {
    let report = MetricReport {
        cd: 0.0123,
        hd: 0.0456,
        emd: 0.0789,
        prr: Some(95.0),
    };
    let rows = vec![
        MetricRow::new("a", &report, Some(0.5), "completion"),
        MetricRow::new(
            "b",
            &MetricReport { prr: None, ..report },
            None,
            "generation",
        ),
    ];
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,cd,hd,emd,prr,occlusion_ratio,mode");
    assert_eq!(lines[2], "b,0.0123,0.0456,0.0789,,,generation");
    let md = markdown_table("Desk-scale results", &[("n=4".into(), rows)]);
    assert!(md.contains("PRR (this work's definition)"));
    assert!(md.contains("| n=4 | completion | 50% | 1.230 | 45.60 | 0.789 | 95.00 | 1 |"), "{md}");
    assert!(md.contains("| n=4 | generation | – |"));
}
