use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `%g`-style formatting with six significant digits.
pub(crate) fn sig6(v: Real) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn write_obj_to<W: Write>(mesh: &TriangleMesh, mut out: W) -> io::Result<()> {
    writeln!(
        out,
        "# {} vertices, {} triangles",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", sig6(v[0]), sig6(v[1]), sig6(v[2]))?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()
}

pub fn write_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path.as_ref())?;
    write_obj_to(mesh, io::BufWriter::new(file))?;
    Ok(())
}

/// Reads `v` and triangular `f` records; other records are ignored.
pub fn read_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_obj(&text)
}

pub(crate) fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", n + 1));
        match parts.next() {
            Some("v") => {
                let xyz: Vec<Real> = parts
                    .take(3)
                    .map(|s| s.parse().map_err(|_| bad("bad coordinate")))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                mesh.vertices.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        s.split('/')
                            .next()
                            .and_then(|i| i.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangles are supported"));
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if mesh.triangles.iter().flatten().any(|&i| i >= mesh.vertices.len()) {
        return Err(Error::Format("OBJ face index out of range".into()));
    }
    Ok(mesh)
}
