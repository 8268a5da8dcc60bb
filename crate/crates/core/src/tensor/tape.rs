use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{broadcast_index, gemm, ConvGeom, Real, Tensor};
use crate::error::{Error, Result};

/// Identifies a parameter slot inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Relu,
    LeakyRelu(Real),
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormGroups {
    /// One group per channel, spanning batch and spatial positions.
    PerChannel,
    /// One group per (sample, channel), spanning spatial positions.
    PerInstance,
}

pub(crate) enum Op {
    Leaf { param: Option<ParamKey> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, Real),
    AddScalar(usize),
    Unary(usize, Unary),
    Clamp(usize, Real, Real),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    IndexSelect { input: usize, rows: Vec<usize> },
    ScatterRows { parts: Vec<(usize, Vec<usize>)> },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ConvTranspose { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Normalize { x: usize, groups: NormGroups, inv_std: Vec<Real> },
    SpatialMean(usize),
    Softmax { x: usize, tau: Real },
}

pub(crate) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of primitive operations. Inputs always precede the node
/// that consumes them, so reverse insertion order is a valid backward order.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf { param: None }, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.with_requires_grad(false), Op::Leaf { param: None }, false)
    }

    /// Records a parameter leaf; its gradient is reported under `key`.
    pub fn param(&self, key: ParamKey, value: &Tensor, trainable: bool) -> Var<'_> {
        let mut t = value.clone();
        t.zero_grad();
        t.set_requires_grad(trainable);
        self.push(t, Op::Leaf { param: Some(key) }, trainable)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let value = value.with_requires_grad(requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if let Op::Leaf { param } = node.op {
                if node.requires_grad {
                    leaves.push((id, param));
                }
            }
        }
        Ok(Gradients { grads, leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    leaves: Vec<(usize, Option<ParamKey>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` if it did not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(var.shape(), g.clone()).expect("grad shape matches value"))
    }

    /// Raw gradient buffer for the leaf with id `var`.
    pub fn raw(&self, var: Var<'_>) -> Option<&[Real]> {
        self.grads.get(var.id)?.as_deref()
    }

    /// Adds the gradient of `var` into `target`'s grad buffer.
    pub fn accumulate_into(&self, var: Var<'_>, target: &mut Tensor) {
        if let Some(g) = self.raw(var) {
            target.accumulate_grad(g);
        }
    }

    /// Gradients of every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &[Real])> + '_ {
        self.leaves.iter().filter_map(|(id, key)| {
            let key = (*key)?;
            let g = self.grads[*id].as_deref()?;
            Some((key, g))
        })
    }
}

fn acc(grads: &mut [Option<Vec<Real>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [Real])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id].value.numel()]);
    }
    f(slot.as_mut().unwrap());
}

fn propagate(nodes: &[Node], id: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
    let out = &nodes[id].value;
    let v = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign: Real = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (a, b) = (*a, *b);
            let ia = broadcast_index(v(a).shape(), out.shape());
            acc(grads, nodes, a, |ga| {
                for (gi, &src) in g.iter().zip(&ia) {
                    ga[src] += gi;
                }
            });
            let ib = broadcast_index(v(b).shape(), out.shape());
            acc(grads, nodes, b, |gb| {
                for (gi, &src) in g.iter().zip(&ib) {
                    gb[src] += sign * gi;
                }
            });
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let ia = broadcast_index(v(a).shape(), out.shape());
            let ib = broadcast_index(v(b).shape(), out.shape());
            let (da, db) = (v(a).data(), v(b).data());
            acc(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[ia[i]] += g[i] * db[ib[i]];
                }
            });
            acc(grads, nodes, b, |gb| {
                for i in 0..g.len() {
                    gb[ib[i]] += g[i] * da[ia[i]];
                }
            });
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let ia = broadcast_index(v(a).shape(), out.shape());
            let ib = broadcast_index(v(b).shape(), out.shape());
            let (da, db) = (v(a).data(), v(b).data());
            acc(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[ia[i]] += g[i] / db[ib[i]];
                }
            });
            acc(grads, nodes, b, |gb| {
                for i in 0..g.len() {
                    let d = db[ib[i]];
                    gb[ib[i]] -= g[i] * da[ia[i]] / (d * d);
                }
            });
        }
        Op::Scale(a, c) => {
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)
            });
        }
        Op::AddScalar(a) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
        }
        Op::Unary(a, kind) => {
            let x = v(*a).data();
            let y = out.data();
            let kind = *kind;
            acc(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => (x[i] > 0.0) as i32 as Real,
                        Unary::LeakyRelu(s) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        Unary::Gelu => {
                            let cdf = 0.5 * (1.0 + super::erf(x[i] / Real::sqrt(2.0)));
                            let pdf = (-0.5 * x[i] * x[i]).exp()
                                / (2.0 * std::f64::consts::PI as Real).sqrt();
                            cdf + x[i] * pdf
                        }
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Exp => y[i],
                        Unary::Ln => 1.0 / x[i],
                        Unary::Square => 2.0 * x[i],
                    };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Clamp(a, lo, hi) => {
            let x = v(*a).data();
            acc(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Sum(a) => acc(grads, nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => {
            let n = v(*a).numel() as Real;
            acc(grads, nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = (v(a).shape()[0], v(a).shape()[1]);
            let n = v(b).shape()[1];
            let (da, db) = (v(a).data(), v(b).data());
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            acc(grads, nodes, a, |ga| gemm(m, n, k, g, false, db, true, ga, true));
            acc(grads, nodes, b, |gb| gemm(k, m, n, da, true, g, false, gb, true));
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            acc(grads, nodes, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let width = v(inp).shape()[*axis] * inner;
                acc(grads, nodes, inp, |gi| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        gi[o * width..(o + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, s)| *x += s);
                    }
                });
                offset += width;
            }
        }
        Op::IndexSelect { input, rows } => {
            let row = out.numel() / rows.len();
            acc(grads, nodes, *input, |gi| {
                for (j, &r) in rows.iter().enumerate() {
                    gi[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&g[j * row..(j + 1) * row])
                        .for_each(|(x, s)| *x += s);
                }
            });
        }
        Op::ScatterRows { parts } => {
            let row = out.numel() / out.shape()[0];
            for (part, rows) in parts {
                acc(grads, nodes, *part, |gp| {
                    for (j, &r) in rows.iter().enumerate() {
                        gp[j * row..(j + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                            .for_each(|(x, s)| *x += s);
                    }
                });
            }
        }
        Op::Conv { x, w, b, geom } => conv_backward(nodes, grads, g, *x, *w, *b, geom),
        Op::ConvTranspose { x, w, b, geom } => {
            conv_transpose_backward(nodes, grads, g, *x, *w, *b, geom)
        }
        Op::Normalize { x, groups, inv_std } => {
            let xhat = out.data();
            let shape = out.shape();
            let (batch, channels) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            acc(grads, nodes, *x, |gx| {
                let mut apply = |ranges: &[(usize, usize)], inv: Real| {
                    let n: usize = ranges.iter().map(|(s, e)| e - s).sum();
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for &(s, e) in ranges {
                        for i in s..e {
                            sg += g[i];
                            sgx += g[i] * xhat[i];
                        }
                    }
                    let n_r = n as Real;
                    for &(s, e) in ranges {
                        for i in s..e {
                            gx[i] += inv / n_r * (n_r * g[i] - sg - xhat[i] * sgx);
                        }
                    }
                };
                match groups {
                    NormGroups::PerChannel => {
                        for c in 0..channels {
                            let ranges: Vec<_> = (0..batch)
                                .map(|b| {
                                    let s = (b * channels + c) * spatial;
                                    (s, s + spatial)
                                })
                                .collect();
                            apply(&ranges, inv_std[c]);
                        }
                    }
                    NormGroups::PerInstance => {
                        for bc in 0..batch * channels {
                            apply(&[(bc * spatial, (bc + 1) * spatial)], inv_std[bc]);
                        }
                    }
                }
            });
        }
        Op::SpatialMean(a) => {
            let spatial = v(*a).numel() / out.numel();
            acc(grads, nodes, *a, |ga| {
                for (j, gj) in g.iter().enumerate() {
                    ga[j * spatial..(j + 1) * spatial]
                        .iter_mut()
                        .for_each(|x| *x += gj / spatial as Real);
                }
            });
        }
        Op::Softmax { x, tau } => {
            let p = out.data();
            let n = *out.shape().last().unwrap();
            acc(grads, nodes, *x, |gx| {
                for r in 0..p.len() / n {
                    let (ps, gs) = (&p[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: Real = ps.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        gx[r * n + i] += ps[i] * (gs[i] - dot) / tau;
                    }
                }
            });
        }
    }
}

fn conv_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Real>>],
    g: &[Real],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: &ConvGeom,
) {
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let (batch, cin) = (xv.shape()[0], xv.shape()[1]);
    let cout = wv.shape()[0];
    let rows = cin * geom.kernel_volume();
    let (nl, ns) = (geom.large_len(), geom.small_len());
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;
    let mut cols = vec![0.0; rows * ns];
    let mut dcols = vec![0.0; rows * ns];
    for bi in 0..batch {
        let gout = &g[bi * cout * ns..(bi + 1) * cout * ns];
        if need_w {
            geom.im2col(&xv.data()[bi * cin * nl..(bi + 1) * cin * nl], cin, &mut cols);
            acc(grads, nodes, w, |gw| gemm(cout, ns, rows, gout, false, &cols, true, gw, true));
        }
        if need_x {
            gemm(rows, cout, ns, wv.data(), true, gout, false, &mut dcols, false);
            acc(grads, nodes, x, |gx| {
                geom.col2im(&dcols, cin, &mut gx[bi * cin * nl..(bi + 1) * cin * nl])
            });
        }
    }
    if let Some(b) = b {
        acc(grads, nodes, b, |gb| {
            for bi in 0..batch {
                for (c, gbc) in gb.iter_mut().enumerate() {
                    let s = (bi * cout + c) * ns;
                    *gbc += g[s..s + ns].iter().sum::<Real>();
                }
            }
        });
    }
}

fn conv_transpose_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Real>>],
    g: &[Real],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: &ConvGeom,
) {
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let (batch, cin) = (xv.shape()[0], xv.shape()[1]);
    let cout = wv.shape()[1];
    let rows = cout * geom.kernel_volume();
    let (nl, ns) = (geom.large_len(), geom.small_len());
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;
    let mut cols = vec![0.0; rows * ns];
    for bi in 0..batch {
        geom.im2col(&g[bi * cout * nl..(bi + 1) * cout * nl], cout, &mut cols);
        if need_x {
            acc(grads, nodes, x, |gx| {
                gemm(cin, rows, ns, wv.data(), false, &cols, false,
                    &mut gx[bi * cin * ns..(bi + 1) * cin * ns], true)
            });
        }
        if need_w {
            let xb = &xv.data()[bi * cin * ns..(bi + 1) * cin * ns];
            acc(grads, nodes, w, |gw| gemm(cin, ns, rows, xb, false, &cols, true, gw, true));
        }
    }
    if let Some(b) = b {
        acc(grads, nodes, b, |gb| {
            for bi in 0..batch {
                for (c, gbc) in gb.iter_mut().enumerate() {
                    let s = (bi * cout + c) * nl;
                    *gbc += g[s..s + nl].iter().sum::<Real>();
                }
            }
        });
    }
}
