//! Held-out evaluation of a trained model.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gan::MoeModel;
use crate::metrics::{evaluate, EvalSettings, MetricReport, MetricRow};
use crate::tensor::Real;
use crate::voxel::{apply_occlusion, item_seed, OcclusionMode, VoxelGrid};

/// Ratios used by the occlusion sweep.
pub const SWEEP_RATIOS: [Real; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Shapes evaluated together in one inference batch.
const EVAL_BATCH: usize = 16;

/// Occludes each shape at `ratio`, completes it and scores the result.
/// Occlusion seeds depend only on `settings.seed` and the shape index.
pub fn completion_rows(
    model: &mut MoeModel,
    shapes: &[(String, VoxelGrid)],
    ratio: Real,
    mode: OcclusionMode,
    settings: &EvalSettings,
) -> Result<Vec<MetricRow>> {
    let mut partials = Vec::with_capacity(shapes.len());
    for (i, (_, x)) in shapes.iter().enumerate() {
        partials.push(apply_occlusion(x, ratio, mode, item_seed(settings.seed, i))?.0);
    }
    let mut rows = Vec::with_capacity(shapes.len());
    for (start, chunk) in partials.chunks(EVAL_BATCH).enumerate().map(|(c, p)| (c * EVAL_BATCH, p)) {
        let outputs = model.complete(chunk, settings.seed ^ start as u64)?;
        for (j, out) in outputs.iter().enumerate() {
            let (id, truth) = &shapes[start + j];
            let report = evaluate(&truth.binarize(0.5), out, Some(&chunk[j]), settings)?;
            rows.push(MetricRow::new(id.clone(), &report, Some(ratio), mode.name()));
        }
    }
    Ok(rows)
}

/// Scores unconditional samples against the reference shapes, pairing each
/// sample with its nearest reference by Chamfer distance.
pub fn generation_rows(model: &mut MoeModel, shapes: &[(String, VoxelGrid)], settings: &EvalSettings) -> Result<Vec<MetricRow>> {
    if shapes.is_empty() {
        return Err(Error::invalid("no reference shapes to evaluate against"));
    }
    let samples = model.generate(shapes.len(), settings.seed)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut best: Option<(usize, MetricReport)> = None;
        for (j, (_, truth)) in shapes.iter().enumerate() {
            let r = evaluate(&truth.binarize(0.5), s, None, settings)?;
            if best.as_ref().is_none_or(|(_, b)| r.cd < b.cd) {
                best = Some((j, r));
            }
        }
        let (j, report) = best.expect("nonempty reference set");
        rows.push(MetricRow::new(format!("sample{i}~{}", shapes[j].0), &report, None, "generation"));
    }
    Ok(rows)
}

/// Completion rows at each ratio, in order.
pub fn occlusion_sweep(
    model: &mut MoeModel,
    shapes: &[(String, VoxelGrid)],
    ratios: &[Real],
    mode: OcclusionMode,
    settings: &EvalSettings,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &ratio in ratios {
        rows.extend(completion_rows(model, shapes, ratio, mode, settings)?);
    }
    Ok(rows)
}

/// Mean (CD, HD, EMD, PRR) over rows; PRR is NaN when absent.
pub fn mean_metrics(rows: &[MetricRow]) -> [Real; 4] {
    let n = rows.len().max(1) as Real;
    let sum = |f: &dyn Fn(&MetricRow) -> Real| rows.iter().map(f).sum::<Real>() / n;
    [
        sum(&|r| r.cd),
        sum(&|r| r.hd),
        sum(&|r| r.emd),
        sum(&|r| r.prr.unwrap_or(Real::NAN)),
    ]
}

/// Fraction of shapes whose top-1 expert matches the most common top-1 expert
/// of their category. Categories are the id text before the first `:`.
/// Uncalibrated: it only says whether routing follows the category labels.
pub fn routing_consistency(
    model: &mut MoeModel,
    shapes: &[(String, VoxelGrid)],
    ratio: Real,
    mode: OcclusionMode,
    settings: &EvalSettings,
) -> Result<Real> {
    if shapes.is_empty() {
        return Err(Error::invalid("no shapes to route"));
    }
    let mut partials = Vec::with_capacity(shapes.len());
    for (i, (_, x)) in shapes.iter().enumerate() {
        partials.push(apply_occlusion(x, ratio, mode, item_seed(settings.seed, i))?.0);
    }
    let mut experts = Vec::with_capacity(shapes.len());
    for (start, chunk) in partials.chunks(EVAL_BATCH).enumerate().map(|(c, p)| (c * EVAL_BATCH, p)) {
        experts.extend(model.top_experts(chunk, settings.seed ^ start as u64)?);
    }
    let mut counts: HashMap<&str, HashMap<usize, usize>> = HashMap::new();
    for ((id, _), &e) in shapes.iter().zip(&experts) {
        let category = id.split(':').next().unwrap_or(id);
        *counts.entry(category).or_default().entry(e).or_default() += 1;
    }
    let agreeing: usize = counts.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
    Ok(agreeing as Real / shapes.len() as Real)
}
