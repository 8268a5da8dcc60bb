use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_binary(resolution: usize, fill: f64, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..resolution.pow(3))
        .map(|_| if rng.random::<f64>() < fill { 1.0 } else { 0.0 })
        .collect();
    VoxelGrid::from_values(resolution, vals).unwrap()
}

#[test]
fn full_box_fills_grid() {
    let spec = ProceduralShapeSpec::centered(ShapeFamily::Box, [0.5; 3]);
    let g = synthesize_shape(&spec, 16).unwrap();
    assert!(g.values().iter().all(|&v| v == 1.0));
}

#[test]
fn ellipsoid_volume_matches_sphere() {
    let r = 16;
    let spec = ProceduralShapeSpec::centered(ShapeFamily::Ellipsoid, [0.5; 3]);
    let g = synthesize_shape(&spec, r).unwrap();
    let radius = 0.5 * r as f64;
    let analytic = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
    let count = g.occupied_count(0.5) as f64;
    assert!((count - analytic).abs() / analytic < 0.05, "{count} vs {analytic}");
}

#[test]
fn synthesis_is_deterministic_and_nonempty() {
    for family in ShapeFamily::ALL {
        for seed in 0..10 {
            let spec = ProceduralShapeSpec::sample(family, seed);
            let a = synthesize_shape(&spec, 16).unwrap();
            let b = synthesize_shape(&spec, 16).unwrap();
            assert_eq!(a, b);
            assert!(a.is_binary());
            assert!(a.occupied_count(0.5) as f64 >= 0.01 * 4096.0, "{family:?} {seed}");
        }
    }
}

#[test]
fn degenerate_shape_errors_after_resampling_budget() {
    let mut spec = ProceduralShapeSpec::centered(ShapeFamily::Box, [1e-4; 3]);
    spec.seed = 3;
    // resampling replaces the parameters, so a tiny box recovers
    assert!(synthesize_shape(&spec, 16).is_ok());
    assert!(synthesize_shape(&spec, 4).is_err());
    assert!(synthesize_shape(&spec, 65).is_err());
}

#[test]
fn random_cell_occlusion_removes_exact_count() {
    let mut g = VoxelGrid::zeros(16);
    for i in 0..100 {
        g.set_index(i * 7, 1.0);
    }
    let (partial, mask) = apply_occlusion(&g, 0.7, OcclusionMode::RandomCells, 1).unwrap();
    assert_eq!(partial.occupied_count(0.5), 30);
    assert_eq!(mask.removed(), 70);
}

#[test]
fn all_observed_mask_is_identity() {
    let g = random_binary(8, 0.3, 2);
    let mask = OcclusionMask::all_observed(8);
    assert_eq!(g.hadamard(&mask.to_grid()).unwrap(), g);
}

#[test]
fn half_space_removes_one_side() {
    let g = synthesize_shape(&ProceduralShapeSpec::centered(ShapeFamily::Box, [0.3; 3]), 16).unwrap();
    for seed in 0..5 {
        let (partial, mask) = apply_occlusion(&g, 0.5, OcclusionMode::HalfSpace, seed).unwrap();
        let removed: Vec<usize> = (0..g.len()).filter(|&i| mask.values[i] == 0).collect();
        let kept = partial.occupied(0.5);
        // some plane separates the sets: fit one through the removed set's
        // least extreme point along the best separating axis via brute force
        // over candidate normals is overkill; the construction ranks cells by
        // a projection, so verify a threshold exists on that projection by
        // checking the two sets are linearly separable along some direction
        // sampled from the same generator.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = loop {
            let v = [0; 3].map(|_| 2.0 * rng.random::<f64>() - 1.0);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                break v.map(|a| a / n);
            }
        };
        let proj = |i: usize| {
            let c = g.coords(i);
            (0..3).map(|a| c[a] as f64 * normal[a]).sum::<f64>()
        };
        let min_removed = removed.iter().map(|&i| proj(i)).fold(f64::INFINITY, f64::min);
        let max_kept = kept.iter().map(|&i| proj(i)).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_removed >= max_kept - 1e-12);
        assert_eq!(removed.len(), g.occupied_count(0.5) / 2);
    }
}

#[test]
fn occlusion_rejects_bad_input() {
    let g = random_binary(8, 0.3, 4);
    assert!(apply_occlusion(&g, 0.0, OcclusionMode::RandomCells, 0).is_err());
    assert!(apply_occlusion(&g, 0.96, OcclusionMode::RandomCells, 0).is_err());
    assert!(apply_occlusion(&VoxelGrid::zeros(8), 0.5, OcclusionMode::RandomCells, 0).is_err());
}

#[test]
fn single_voxel_points_stay_in_cell() {
    let mut g = VoxelGrid::zeros(8);
    g.set(3, 4, 5, 1.0);
    let pc = voxel_to_pointcloud(&g, 50, 0.5, 0).unwrap();
    let (lo, hi) = g.cell_bounds(g.index(3, 4, 5));
    assert_eq!(pc.len(), 50);
    for p in &pc.points {
        assert!((0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]));
    }
}

#[test]
fn solid_box_points_hug_the_boundary() {
    let g = synthesize_shape(&ProceduralShapeSpec::centered(ShapeFamily::Box, [0.25; 3]), 16).unwrap();
    let pc = voxel_to_pointcloud(&g, 500, 0.5, 1).unwrap();
    let h = g.cell_size();
    for p in &pc.points {
        // distance to the box boundary [0.25, 0.75]³
        let d = (0..3)
            .map(|a| (p[a] - 0.25).abs().min((0.75 - p[a]).abs()))
            .fold(f64::INFINITY, f64::min);
        assert!(d <= h + 1e-12, "{p:?}");
    }
    assert_eq!(pc, voxel_to_pointcloud(&g, 500, 0.5, 1).unwrap());
}

#[test]
fn empty_grid_has_no_points() {
    assert!(voxel_to_pointcloud(&VoxelGrid::zeros(8), 10, 0.5, 0).is_err());
}

#[test]
fn vox_round_trip_is_bit_exact() {
    let g = random_binary(16, 0.4, 5);
    let bytes = g.to_vox_bytes();
    assert_eq!(bytes.len(), 16 + 16usize.pow(3));
    let back = VoxelGrid::from_vox_bytes(&bytes).unwrap();
    assert_eq!(back, g);
    assert_eq!(back.to_vox_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.vox");
    write_vox(&g, &path).unwrap();
    assert_eq!(read_vox(&path).unwrap(), g);
}

#[test]
fn vox_rejects_bad_magic_and_truncation() {
    let g = random_binary(8, 0.4, 6);
    let mut bytes = g.to_vox_bytes();
    bytes[0] = b'X';
    let err = VoxelGrid::from_vox_bytes(&bytes).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("XOX1"), "{err}");

    let bytes = g.to_vox_bytes();
    let err = VoxelGrid::from_vox_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(err, Error::Truncated { .. }));
    let mut long = bytes.clone();
    long.push(0);
    assert!(VoxelGrid::from_vox_bytes(&long).is_err());
    assert!(matches!(read_vox("/nonexistent/x.vox"), Err(Error::MissingInput(_))));
}

#[test]
fn vox_real_payload_round_trips_f32_values() {
    let vals: Vec<_> = (0..512).map(|i| (i % 17) as f64 / 16.0).collect();
    let g = VoxelGrid::from_values(8, vals).unwrap();
    let back = VoxelGrid::from_vox_bytes(&g.to_vox_bytes()).unwrap();
    assert_eq!(back, g);
}

#[test]
fn dataset_split_is_80_20_disjoint_and_stable() {
    let a = Dataset::synthesize(200, 16, 7).unwrap();
    let train: Vec<usize> = a.split(Split::Train).map(|it| it.id).collect();
    let test: Vec<usize> = a.split(Split::Test).map(|it| it.id).collect();
    assert_eq!((train.len(), test.len()), (160, 40));
    assert!(train.iter().all(|i| !test.contains(i)));
    let b = Dataset::synthesize(200, 16, 7).unwrap();
    let train_b: Vec<usize> = b.split(Split::Train).map(|it| it.id).collect();
    assert_eq!(train, train_b);
    assert!(a.items.iter().zip(&b.items).all(|(x, y)| x.grid == y.grid));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn occlusion_never_creates_occupancy(
        seed in 0u64..1000,
        ratio in 0.01f64..0.95,
        mode in prop_oneof![
            Just(OcclusionMode::RandomCells),
            Just(OcclusionMode::HalfSpace),
            Just(OcclusionMode::SphericalBlob)
        ],
    ) {
        let x = random_binary(8, 0.35, seed);
        let (xp, mask) = apply_occlusion(&x, ratio, mode, seed).unwrap();
        let occupied = x.occupied_count(0.5);
        for i in 0..x.len() {
            prop_assert!(xp.values()[i] <= x.values()[i]);
            // x_p ⊙ (x − x_p) = 0
            prop_assert_eq!(xp.values()[i] * (x.values()[i] - xp.values()[i]), 0.0);
            prop_assert!(mask.values[i] <= 1);
        }
        let removed = (occupied - xp.occupied_count(0.5)) as f64 / occupied as f64;
        prop_assert!((removed - ratio).abs() <= 0.02 || occupied < 50);
        prop_assert_eq!(xp.occupied_count(0.5), occupied - (ratio * occupied as f64).floor() as usize);
    }

    #[test]
    fn binarize_is_idempotent(seed in 0u64..1000, t in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..64).map(|_| rng.random::<f64>()).collect();
        let g = VoxelGrid::from_values(4, vals).unwrap();
        let once = g.binarize(t);
        prop_assert_eq!(once.binarize(t), once);
    }
}
