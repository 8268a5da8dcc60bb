use std::rc::Rc;

use super::tape::{NormGroups, Op, Unary};
use super::{broadcast_index, broadcast_shape, gemm, ConvGeom, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which activation an [`Var::activate`] call applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(Real),
    Gelu,
    Sigmoid,
    Tanh,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Copy of the value as a fresh constant leaf.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, kind: Unary, f: impl Fn(Real) -> Real) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::Unary(self.id, kind), self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'t>,
        context: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
            context,
        })?;
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(a.shape(), &shape);
            let ib = broadcast_index(b.shape(), &shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, op(self.id, other.id), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, c: Real) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: Real) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v + c).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu, |v| v.max(0.0))
    }

    pub fn leaky_relu(&self, slope: Real) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu, |v| 0.5 * v * (1.0 + super::erf(v / Real::sqrt(2.0))))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh, |v| v.tanh())
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp, |v| v.exp())
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln, |v| v.ln())
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square, |v| v * v)
    }

    pub fn activate(&self, act: Activation) -> Var<'t> {
        match act {
            Activation::Relu => self.relu(),
            Activation::LeakyRelu(s) => self.leaky_relu(s),
            Activation::Gelu => self.gelu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Tanh => self.tanh(),
        }
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: Real, hi: Real) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::Clamp(self.id, lo, hi), self.requires_grad())
    }

    pub fn sum(&self) -> Var<'t> {
        let s: Real = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s: Real = x.data().iter().sum::<Real>() / x.numel() as Real;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
                context: "matmul inner dimension",
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(vec![m, n], c)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "transpose needs a matrix".into(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.tape.push(out, Op::Transpose(self.id), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == first[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                    context: "concat",
                });
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::new(shape, data)?, Op::Concat { inputs, axis }, rg))
    }

    /// Gathers rows (slices along axis 0).
    pub fn index_select(&self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::invalid(format!("row indices {rows:?} out of range for {n} rows")));
        }
        let row = x.numel() / n;
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let op = Op::IndexSelect {
            input: self.id,
            rows: rows.to_vec(),
        };
        Ok(self.tape.push(Tensor::new(shape, data)?, op, self.requires_grad()))
    }

    /// Builds a `[n_rows, ...]` tensor where row `rows[j]` of part `p`
    /// receives row `j` of `p`. Rows not covered stay zero; overlaps add.
    pub fn scatter_rows(parts: &[(Var<'t>, Vec<usize>)], n_rows: usize) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::invalid("scatter of nothing"))?.0.tape;
        let tail = parts[0].0.shape()[1..].to_vec();
        let row: usize = tail.iter().product();
        let mut data = vec![0.0; n_rows * row];
        for (p, rows) in parts {
            let v = p.value();
            if v.shape()[1..] != tail[..] || v.shape()[0] != rows.len() {
                return Err(Error::ShapeMismatch {
                    lhs: tail.clone(),
                    rhs: v.shape().to_vec(),
                    context: "scatter_rows",
                });
            }
            for (j, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::invalid(format!("row {r} out of range")));
                }
                data[r * row..(r + 1) * row]
                    .iter_mut()
                    .zip(&v.data()[j * row..(j + 1) * row])
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = vec![n_rows];
        shape.extend(tail);
        let rg = parts.iter().any(|(p, _)| p.requires_grad());
        let parts = parts.iter().map(|(p, r)| (p.id, r.clone())).collect();
        Ok(tape.push(Tensor::new(shape, data)?, Op::ScatterRows { parts }, rg))
    }

    /// 3D convolution. `self`: `[B, Cin, D, H, W]`, `w`: `[Cout, Cin, k, k, k]`.
    pub fn conv3d(
        &self,
        w: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        check_conv_operands(&x, &wv, wv.shape()[1], "conv3d channels")?;
        let k = wv.shape()[2];
        let geom = ConvGeom::forward(spatial(&x), k, stride, padding, dilation)?;
        let (batch, cin, cout) = (x.shape()[0], x.shape()[1], wv.shape()[0]);
        let rows = cin * geom.kernel_volume();
        let (nl, ns) = (geom.large_len(), geom.small_len());
        let mut out = vec![0.0; batch * cout * ns];
        let mut cols = vec![0.0; rows * ns];
        for b in 0..batch {
            geom.im2col(&x.data()[b * cin * nl..(b + 1) * cin * nl], cin, &mut cols);
            gemm(cout, rows, ns, wv.data(), false, &cols, false,
                &mut out[b * cout * ns..(b + 1) * cout * ns], false);
        }
        add_channel_bias(&mut out, bias.as_ref(), cout, ns)?;
        let mut shape = vec![batch, cout];
        shape.extend(geom.small);
        let rg = self.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv {
            x: self.id,
            w: w.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Transposed 3D convolution. `w`: `[Cin, Cout, k, k, k]`.
    pub fn conv_transpose3d(
        &self,
        w: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        check_conv_operands(&x, &wv, wv.shape()[0], "conv_transpose3d channels")?;
        let k = wv.shape()[2];
        let geom = ConvGeom::transposed(spatial(&x), k, stride, padding, dilation)?;
        let (batch, cin, cout) = (x.shape()[0], x.shape()[1], wv.shape()[1]);
        let rows = cout * geom.kernel_volume();
        let (nl, ns) = (geom.large_len(), geom.small_len());
        let mut out = vec![0.0; batch * cout * nl];
        let mut cols = vec![0.0; rows * ns];
        for b in 0..batch {
            gemm(rows, cin, ns, wv.data(), true, &x.data()[b * cin * ns..(b + 1) * cin * ns],
                false, &mut cols, false);
            geom.col2im(&cols, cout, &mut out[b * cout * nl..(b + 1) * cout * nl]);
        }
        add_channel_bias(&mut out, bias.as_ref(), cout, nl)?;
        let mut shape = vec![batch, cout];
        shape.extend(geom.large);
        let rg = self.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::ConvTranspose {
            x: self.id,
            w: w.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Standardizes `[B, C, ...]` to zero mean and unit (biased) variance,
    /// per channel (`per_instance = false`) or per sample and channel.
    /// Returns the normalized value and the per-group means and variances.
    pub fn normalize(&self, per_instance: bool, eps: Real) -> Result<(Var<'t>, Vec<Real>, Vec<Real>)> {
        let x = self.value();
        if x.ndim() < 3 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "normalization expects [B, C, spatial...]".into(),
            });
        }
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let spatial: usize = x.shape()[2..].iter().product();
        let groups = if per_instance { NormGroups::PerInstance } else { NormGroups::PerChannel };
        let n_groups = if per_instance { batch * channels } else { channels };
        let group_of = |i: usize| -> usize {
            let bc = i / spatial;
            if per_instance {
                bc
            } else {
                bc % channels
            }
        };
        let count = (x.numel() / n_groups) as Real;
        let mut mean = vec![0.0; n_groups];
        for (i, v) in x.data().iter().enumerate() {
            mean[group_of(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n_groups];
        for (i, v) in x.data().iter().enumerate() {
            let d = v - mean[group_of(i)];
            var[group_of(i)] += d * d;
        }
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<Real> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[group_of(i)]) * inv_std[group_of(i)])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let op = Op::Normalize {
            x: self.id,
            groups,
            inv_std,
        };
        Ok((self.tape.push(out, op, self.requires_grad()), mean, var))
    }

    /// Global average over spatial dims: `[B, C, ...] -> [B, C]`.
    pub fn spatial_mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() < 3 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "spatial_mean expects [B, C, spatial...]".into(),
            });
        }
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let spatial = x.numel() / (batch * channels);
        let data = x
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<Real>() / spatial as Real)
            .collect();
        let out = Tensor::new(vec![batch, channels], data)?;
        Ok(self.tape.push(out, Op::SpatialMean(self.id), self.requires_grad()))
    }

    /// `softmax(s / tau)` along the last axis, computed with max-subtraction.
    pub fn softmax_temperature(&self, tau: Real) -> Result<Var<'t>> {
        let x = self.value();
        let data = softmax_rows(x.data(), *x.shape().last().unwrap(), tau)?;
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let op = Op::Softmax { x: self.id, tau };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }
}

/// Row-wise tempered softmax over contiguous rows of length `n`.
pub fn softmax_rows(s: &[Real], n: usize, tau: Real) -> Result<Vec<Real>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax score {bad}")));
    }
    let mut out = vec![0.0; s.len()];
    for (row, o) in s.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for (oi, &si) in o.iter_mut().zip(row) {
            *oi = ((si - max) / tau).exp();
            total += *oi;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

fn spatial(x: &Tensor) -> [usize; 3] {
    [x.shape()[2], x.shape()[3], x.shape()[4]]
}

fn check_conv_operands(x: &Tensor, w: &Tensor, expected_cin: usize, context: &'static str) -> Result<()> {
    if x.ndim() != 5 || w.ndim() != 5 || x.shape()[1] != expected_cin {
        return Err(Error::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
            context,
        });
    }
    let k = w.shape()[2];
    if w.shape()[3] != k || w.shape()[4] != k {
        return Err(Error::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "kernel must be cubic".into(),
        });
    }
    Ok(())
}

fn add_channel_bias(out: &mut [Real], bias: Option<&Var<'_>>, channels: usize, per: usize) -> Result<()> {
    let Some(b) = bias else { return Ok(()) };
    let bv = b.value();
    if bv.numel() != channels {
        return Err(Error::ShapeMismatch {
            lhs: vec![channels],
            rhs: bv.shape().to_vec(),
            context: "convolution bias",
        });
    }
    for (i, chunk) in out.chunks_mut(per).enumerate() {
        let c = bv.data()[i % channels];
        chunk.iter_mut().for_each(|v| *v += c);
    }
    Ok(())
}
