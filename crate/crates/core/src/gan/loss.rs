use super::Discriminator;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::voxel::{OcclusionMask, VoxelGrid};

/// Loss values from one evaluation of the objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// `E[log D(x)] + E[log(1 − D(x̃))]`, which the discriminator maximizes.
    pub adv: Real,
    /// `−adv`, minimized by the discriminator step.
    pub d_loss: Real,
    /// Non-saturating generator loss `−E[log D(x̃)]`.
    pub g_loss: Real,
    pub geom: Real,
    pub lambda: Real,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv, self.d_loss, self.g_loss, self.geom].iter().all(|v| v.is_finite())
    }
}

/// `−(E[log D(x)] + E[log(1 − D(x̃))])` from discriminator outputs.
pub fn discriminator_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    let real = d_real.ln().mean();
    let fake = d_fake.neg().add_scalar(1.0).ln().mean();
    Ok(real.add(fake)?.neg())
}

/// `−E[log D(x̃)]`.
pub fn generator_loss(d_fake: Var<'_>) -> Var<'_> {
    d_fake.ln().mean().neg()
}

/// Per-sample weights `λ / (B · max(1, Σ mask_b))` spread over the mask.
fn weighted_mask(mask: &Tensor, lambda: Real) -> Tensor {
    let b = mask.shape()[0];
    let per = mask.numel() / b;
    let mut w = mask.clone();
    for row in w.data_mut().chunks_mut(per) {
        let count: Real = row.iter().sum();
        let scale = lambda / (b as Real * count.max(1.0));
        row.iter_mut().for_each(|v| *v *= scale);
    }
    w
}

/// `λ · Σ mask ⊙ (x − x̃)² / Σ mask`, averaged over the batch. Cells outside
/// the mask get exactly zero gradient.
pub fn geometric_consistency<'t>(x_tilde: Var<'t>, x: &Tensor, mask: &Tensor, lambda: Real) -> Result<Var<'t>> {
    if x_tilde.shape() != x.shape() || x.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            lhs: x_tilde.shape(),
            rhs: mask.shape().to_vec(),
            context: "geometric consistency loss",
        });
    }
    let tape = x_tilde.tape();
    let diff = x_tilde.sub(tape.constant(x.clone()))?;
    diff.square().mul(tape.constant(weighted_mask(mask, lambda)))?.sum().reshape(&[1])
}

/// Single-shape value of the geometric consistency loss.
pub fn geometric_consistency_loss(
    x: &VoxelGrid,
    x_tilde: &VoxelGrid,
    mask: &OcclusionMask,
    lambda: Real,
) -> Result<Real> {
    if x.resolution() != x_tilde.resolution() || x.resolution() != mask.resolution {
        return Err(Error::ShapeMismatch {
            lhs: vec![x.resolution(); 3],
            rhs: vec![x_tilde.resolution(); 3],
            context: "geometric consistency loss",
        });
    }
    let (mut total, mut count) = (0.0, 0.0);
    for ((&a, &b), &m) in x.values().iter().zip(x_tilde.values()).zip(&mask.values) {
        if m != 0 {
            total += (a - b) * (a - b);
            count += 1.0;
        }
    }
    Ok(lambda * total / Real::max(count, 1.0))
}

/// Evaluates both adversarial objectives with `d` in eval mode.
pub fn adversarial_losses(d: &mut Discriminator, real: &Tensor, fake: &Tensor) -> Result<LossReport> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch {
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
            context: "adversarial losses",
        });
    }
    let dr = d.score(real)?;
    let df = d.score(fake)?;
    Ok(adversarial_from_scores(&dr, &df))
}

/// Loss values from already clamped discriminator outputs.
pub fn adversarial_from_scores(d_real: &[Real], d_fake: &[Real]) -> LossReport {
    let mean = |v: &[Real], f: &dyn Fn(Real) -> Real| v.iter().map(|&x| f(x)).sum::<Real>() / v.len() as Real;
    let adv = mean(d_real, &|d| d.ln()) + mean(d_fake, &|d| (1.0 - d).ln());
    LossReport {
        adv,
        d_loss: -adv,
        g_loss: -mean(d_fake, &|d| d.ln()),
        geom: 0.0,
        lambda: 0.0,
    }
}
