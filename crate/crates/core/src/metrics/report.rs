use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::error::Result;
use crate::tensor::Real;

/// One CSV row: raw metric values for one evaluated shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub cd: Real,
    pub hd: Real,
    pub emd: Real,
    pub prr: Option<Real>,
    pub occlusion_ratio: Option<Real>,
    pub mode: String,
}

impl MetricRow {
    pub fn new(id: impl Into<String>, report: &MetricReport, occlusion_ratio: Option<Real>, mode: &str) -> Self {
        Self {
            id: id.into(),
            cd: report.cd,
            hd: report.hd,
            emd: report.emd,
            prr: report.prr,
            occlusion_ratio,
            mode: mode.to_string(),
        }
    }
}

/// Columns `id,cd,hd,emd,prr,occlusion_ratio,mode`; absent values are empty.
pub fn write_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Means grouped by `label` (first column) and rows' (mode, occlusion)
/// pairs, in scaled units.
pub fn markdown_table(title: &str, groups: &[(String, Vec<MetricRow>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "### {title}\n");
    let _ = writeln!(
        s,
        "| Model | Mode | Occlusion | CD (×10²) | HD (×10³) | EMD (×10) | PRR (this work's definition) | Shapes |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for (label, rows) in groups {
        let mut by_key: BTreeMap<(String, u64), Vec<&MetricRow>> = BTreeMap::new();
        for r in rows {
            let ratio = r.occlusion_ratio.map_or(u64::MAX, |v| (v * 1e6).round() as u64);
            by_key.entry((r.mode.clone(), ratio)).or_default().push(r);
        }
        for ((mode, ratio), rs) in by_key {
            let n = rs.len() as Real;
            let avg = |f: &dyn Fn(&MetricRow) -> Real| rs.iter().map(|r| f(r)).sum::<Real>() / n;
            let prrs: Vec<Real> = rs.iter().filter_map(|r| r.prr).collect();
            let prr = if prrs.is_empty() {
                "–".to_string()
            } else {
                format!("{:.2}", prrs.iter().sum::<Real>() / prrs.len() as Real)
            };
            let occ = if ratio == u64::MAX {
                "–".to_string()
            } else {
                format!("{:.0}%", ratio as Real / 1e4)
            };
            let _ = writeln!(
                s,
                "| {label} | {mode} | {occ} | {:.3} | {:.2} | {:.3} | {prr} | {} |",
                avg(&|r| r.cd) * MetricReport::CD_SCALE,
                avg(&|r| r.hd) * MetricReport::HD_SCALE,
                avg(&|r| r.emd) * MetricReport::EMD_SCALE,
                rs.len()
            );
        }
    }
    s
}

/// One block of a category × configuration table.
#[derive(Clone, Debug)]
pub struct TableEntry {
    pub category: String,
    pub config: String,
    pub rows: Vec<MetricRow>,
}

/// Category | Experts | CD | HD | EMD | PRR | Shapes, one line per entry,
/// in scaled units. `note` is printed under the title.
pub fn category_table(title: &str, note: &str, entries: &[TableEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "### {title}\n");
    if !note.is_empty() {
        let _ = writeln!(s, "{note}\n");
    }
    let _ = writeln!(
        s,
        "| Category | Experts | CD (×10²) | HD (×10³) | EMD (×10) | PRR (this work's definition) | Shapes |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for e in entries {
        let n = e.rows.len().max(1) as Real;
        let avg = |f: &dyn Fn(&MetricRow) -> Real| e.rows.iter().map(f).sum::<Real>() / n;
        let prrs: Vec<Real> = e.rows.iter().filter_map(|r| r.prr).collect();
        let prr = if prrs.is_empty() {
            "–".to_string()
        } else {
            format!("{:.2}", prrs.iter().sum::<Real>() / prrs.len() as Real)
        };
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.2} | {:.3} | {prr} | {} |",
            e.category,
            e.config,
            avg(&|r| r.cd) * MetricReport::CD_SCALE,
            avg(&|r| r.hd) * MetricReport::HD_SCALE,
            avg(&|r| r.emd) * MetricReport::EMD_SCALE,
            e.rows.len()
        );
    }
    s
}
