use super::*;
use crate::voxel::{synthesize_shape, ProceduralShapeSpec, ShapeFamily};

fn single_cell() -> VoxelGrid {
    let mut g = VoxelGrid::zeros(4);
    g.set(1, 2, 1, 1.0);
    g
}

/// Smooth occupancy ramp around a ball of `radius` cells.
fn ball(resolution: usize, radius: Real) -> VoxelGrid {
    let mut g = VoxelGrid::zeros(resolution);
    let c = resolution as Real / 2.0;
    for i in 0..g.len() {
        let q = g.coords(i).map(|v| v as Real + 0.5 - c);
        let d = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        g.set_index(i, (0.5 + radius - d).clamp(0.0, 1.0));
    }
    g
}

#[test]
fn constant_grid_is_empty() {
    assert!(marching_cubes(&VoxelGrid::zeros(8), 0.5).is_empty());
    assert!(marching_cubes(&VoxelGrid::filled(8, 1.0), 0.5).is_empty());
    assert!(marching_cubes(&single_cell(), 1.0).is_empty());
}

#[test]
fn single_cell_is_a_closed_sphere() {
    let m = marching_cubes(&single_cell(), 0.5);
    assert_eq!(m.euler_characteristic(), 2);
    assert!(m.is_watertight());
    assert!(m.is_valid());
    assert!(m.signed_volume() > 0.0, "{}", m.signed_volume());
    // octahedron with vertices half a cell from the center
    assert_eq!(m.vertices.len(), 6);
    let h: Real = 0.25;
    let expected = 4.0 / 3.0 * (h * 0.5).powi(3);
    assert!((m.signed_volume() - expected).abs() < 1e-12);
}

#[test]
fn sphere_area_matches_analytic() {
    let r = 8;
    let radius = 3.0;
    let m = marching_cubes(&ball(r, radius), 0.5);
    let h = 1.0 / r as Real;
    let analytic = 4.0 * std::f64::consts::PI * (radius * h).powi(2);
    let area = m.surface_area();
    assert!((area - analytic).abs() / analytic < 0.10, "{area} vs {analytic}");
    assert!(m.is_watertight());
}

#[test]
fn primitives_are_watertight() {
    let mut specs: Vec<ProceduralShapeSpec> = ShapeFamily::ALL
        .iter()
        .map(|&f| ProceduralShapeSpec::centered(f, [0.3, 0.25, 0.35]))
        .collect();
    specs.extend(ShapeFamily::ALL.iter().map(|&f| ProceduralShapeSpec::sample(f, 5)));
    for spec in specs {
        let g = synthesize_shape(&spec, 16).unwrap();
        let m = marching_cubes(&g, 0.5);
        assert!(m.is_watertight(), "{:?}", spec.family);
        assert!(m.is_valid());
        assert!(m.signed_volume() > 0.0);
    }
    // boundary-touching solids close thanks to the padding
    let mut g = VoxelGrid::zeros(6);
    for i in 0..g.len() {
        if g.coords(i)[0] < 3 {
            g.set_index(i, 1.0);
        }
    }
    let m = marching_cubes(&g, 0.5);
    assert!(m.is_watertight());
    assert_eq!(m.euler_characteristic(), 2);
}

#[test]
fn raising_iso_never_grows_volume() {
    let g = ball(12, 4.0);
    let volumes: Vec<Real> = [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|&iso| marching_cubes(&g, iso).signed_volume())
        .collect();
    assert!(volumes.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{volumes:?}");
}

#[test]
fn extraction_is_deterministic() {
    let g = ball(10, 3.3);
    assert_eq!(marching_cubes(&g, 0.5), marching_cubes(&g, 0.5));
}

#[test]
fn obj_output_and_round_trip() {
    let mut buf = Vec::new();
    write_obj_to(&TriangleMesh::default(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().all(|l| l.starts_with('#')));

    let tri = TriangleMesh {
        vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        triangles: vec![[0, 1, 2]],
    };
    let mut buf = Vec::new();
    write_obj_to(&tri, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(!text.contains('\r'));
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).collect::<Vec<_>>(), vec!["f 1 2 3"]);

    let m = marching_cubes(&ball(8, 2.7), 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ball.obj");
    write_obj(&m, &path).unwrap();
    let back = read_obj(&path).unwrap();
    assert_eq!(back.triangles, m.triangles);
    for (a, b) in back.vertices.iter().zip(&m.vertices) {
        assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-5));
    }
}

#[test]
fn six_significant_digits() {
    assert_eq!(obj::sig6(0.123456789), "0.123457");
    assert_eq!(obj::sig6(12.5), "12.5");
    assert_eq!(obj::sig6(-3.0), "-3");
    assert_eq!(obj::sig6(0.0), "0");
    assert_eq!(obj::sig6(1234567.0), "1.23457e6");
}

#[test]
fn obj_reader_rejects_garbage() {
    assert!(obj::parse_obj("v 1 2\n").is_err());
    assert!(obj::parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    assert!(obj::parse_obj("f 1 2 3 4\n").is_err());
    let m = obj::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n").unwrap();
    assert_eq!(m.triangles, vec![[0, 1, 2]]);
}
