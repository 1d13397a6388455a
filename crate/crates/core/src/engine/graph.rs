use indexmap::IndexMap;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    DilatedConv,
    Pointwise,
    Relu,
    Softmax,
    Concat,
    Add,
    Mul,
    Dropout,
    CrossEntropy,
    Smoothness,
    Combine,
    WeightedSum,
}

/// Scales the first gradient an operator emits during backward (the weight
/// gradient for convolutions, the input gradient otherwise). Used to check
/// that the finite-difference harness notices a wrong backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op<F> {
    Leaf,
    DilatedConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        dilation: usize,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Softmax(NodeId),
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Dropout {
        x: NodeId,
        mask: Array2<F>,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
        floor: F,
    },
    Smoothness {
        probs: NodeId,
        tau: F,
        floor: F,
    },
    Combine(Vec<(NodeId, F)>),
    WeightedSum {
        x: NodeId,
        weights: Array2<F>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operators in execution order; [`Graph::backward`] replays them in
/// exact reverse. One graph serves a single forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: IndexMap<String, NodeId>,
    grads: Vec<Option<Array2<F>>>,
    fault: Option<Fault>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Binding the same name twice returns the same
    /// node, so shared weights accumulate gradient from every use.
    pub fn param(&mut self, set: &ParamSet<F>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let id = self.variable(set.get(name)?.clone());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn dilated_conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (in_ch, _) = xv.dim();
        let (out_ch, taps) = wv.dim();
        if kernel.is_multiple_of(2) || dilation == 0 {
            return Err(Error::shape(
                "dilated_conv1d",
                format!("kernel {kernel} must be odd and dilation {dilation} >= 1"),
            ));
        }
        if taps != in_ch * kernel || bv.dim() != (out_ch, 1) {
            return Err(Error::shape(
                "dilated_conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?} with kernel {kernel}",
                    xv.dim(),
                    wv.dim(),
                    bv.dim()
                ),
            ));
        }
        let col = im2col(xv.view(), kernel, dilation);
        let mut y = wv.dot(&col);
        y += bv;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            y,
            Op::DilatedConv {
                x,
                w,
                b,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    pub fn pointwise_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.ncols() != xv.nrows() || bv.dim() != (wv.nrows(), 1) {
            return Err(Error::shape(
                "pointwise_conv",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    xv.dim(),
                    wv.dim(),
                    bv.dim()
                ),
            ));
        }
        let mut y = wv.dot(xv);
        y += bv;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Pointwise { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.max(F::zero()));
        let rg = self.needs(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    /// Softmax over channels, independently for every time step.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for mut col in y.columns_mut() {
            let max = col.fold(F::neg_infinity(), |m, &v| m.max(v));
            col.mapv_inplace(|v| (v - max).exp());
            let sum = col.sum();
            col.mapv_inplace(|v| v / sum);
        }
        let rg = self.needs(&[x]);
        self.push(y, Op::Softmax(x), rg)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::shape(
                "concat_channels",
                format!("time lengths {} and {}", av.ncols(), bv.ncols()),
            ));
        }
        let y = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).expect("checked shapes");
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape(
                "elementwise_add",
                format!("{:?} vs {:?}", av.dim(), bv.dim()),
            ));
        }
        let y = av + bv;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape(
                "elementwise_mul",
                format!("{:?} vs {:?}", av.dim(), bv.dim()),
            ));
        }
        let y = av * bv;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Only called during training.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask = Array2::from_shape_simple_fn(self.value(x).dim(), || {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        });
        let y = self.value(x) * &mask;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Dropout { x, mask }, rg))
    }

    /// Mean over frames of `-log max(p[label_t, t], floor)`.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize], floor: f64) -> Result<NodeId> {
        let p = self.value(probs);
        let (c, m) = p.dim();
        if labels.len() != m {
            return Err(Error::shape(
                "classification_loss",
                format!("{} labels for {m} frames", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "classification_loss",
                format!("label {bad} >= {c} classes"),
            ));
        }
        let floor = F::of(floor);
        let total: F = labels
            .iter()
            .enumerate()
            .map(|(t, &l)| -p[[l, t]].max(floor).ln())
            .sum();
        let y = Array2::from_elem((1, 1), total / F::of(m as f64));
        let rg = self.needs(&[probs]);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        ))
    }

    /// `1/(M·C) · Σ_{t≥1,c} min(|log p[c,t] - log p[c,t-1]|, tau)²`.
    pub fn smoothness(&mut self, probs: NodeId, tau: f64, floor: f64) -> NodeId {
        let p = self.value(probs);
        let (c, m) = p.dim();
        let (tau, floor) = (F::of(tau), F::of(floor));
        let mut total = F::zero();
        for t in 1..m {
            for k in 0..c {
                let d = (p[[k, t]].max(floor).ln() - p[[k, t - 1]].max(floor).ln()).abs();
                let d = d.min(tau);
                total += d * d;
            }
        }
        let y = Array2::from_elem((1, 1), total / F::of((m * c) as f64));
        let rg = self.needs(&[probs]);
        self.push(y, Op::Smoothness { probs, tau, floor }, rg)
    }

    /// Which side of every non-smooth point (ReLU zero, smoothness
    /// truncation, log floor) each element currently sits on. Two evaluations
    /// with equal patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(x) => bits.extend(self.value(x).iter().map(|v| *v > F::zero())),
                &Op::Smoothness { probs, tau, floor } => {
                    let p = self.value(probs);
                    bits.extend(p.iter().map(|v| *v >= floor));
                    for t in 1..p.ncols() {
                        for k in 0..p.nrows() {
                            let d =
                                (p[[k, t]].max(floor).ln() - p[[k, t - 1]].max(floor).ln()).abs();
                            bits.push(d < tau);
                        }
                    }
                }
                Op::CrossEntropy {
                    probs,
                    labels,
                    floor,
                } => {
                    let p = self.value(*probs);
                    bits.extend(labels.iter().enumerate().map(|(t, &l)| p[[l, t]] >= *floor));
                }
                _ => {}
            }
        }
        bits
    }

    /// `Σ coef · x` over equally shaped inputs.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::shape("combine", "no terms"));
        };
        let dim = self.value(first).dim();
        let mut y = Array2::zeros(dim);
        for &(id, coef) in terms {
            let v = self.value(id);
            if v.dim() != dim {
                return Err(Error::shape("combine", format!("{:?} vs {dim:?}", v.dim())));
            }
            y.scaled_add(F::of(coef), v);
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&ids);
        let terms = terms.iter().map(|&(id, c)| (id, F::of(c))).collect();
        Ok(self.push(y, Op::Combine(terms), rg))
    }

    /// `Σ x ⊙ weights`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Array2<F>) -> Result<NodeId> {
        let v = self.value(x);
        if v.dim() != weights.dim() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", v.dim(), weights.dim()),
            ));
        }
        let total = (v * &weights).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum { x, weights },
            rg,
        ))
    }

    fn faulted(&self, kind: OpKind, mut g: Array2<F>) -> Array2<F> {
        if let Some(f) = self.fault.filter(|f| f.op == kind) {
            g.mapv_inplace(|v| v * F::of(f.factor));
        }
        g
    }

    fn accumulate(&mut self, id: NodeId, g: Array2<F>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).dim()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            for (id, g) in self.local_grads(idx, &gy) {
                self.accumulate(id, g);
            }
            if keep {
                self.grads[idx] = Some(gy);
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, gy: &Array2<F>) -> Vec<(NodeId, Array2<F>)> {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::DilatedConv {
                x,
                w,
                b,
                kernel,
                dilation,
            } => {
                let xv = self.value(x);
                if needs(w) {
                    let col = im2col(xv.view(), kernel, dilation);
                    out.push((w, self.faulted(OpKind::DilatedConv, gy.dot(&col.t()))));
                }
                if needs(b) {
                    out.push((b, gy.sum_axis(Axis(1)).insert_axis(Axis(1))));
                }
                if needs(x) {
                    let gcol = self.value(w).t().dot(gy);
                    out.push((x, col2im(gcol.view(), xv.nrows(), kernel, dilation)));
                }
            }
            &Op::Pointwise { x, w, b } => {
                if needs(w) {
                    let gw = gy.dot(&self.value(x).t());
                    out.push((w, self.faulted(OpKind::Pointwise, gw)));
                }
                if needs(b) {
                    out.push((b, gy.sum_axis(Axis(1)).insert_axis(Axis(1))));
                }
                if needs(x) {
                    out.push((x, self.value(w).t().dot(gy)));
                }
            }
            &Op::Relu(x) => {
                let mut gx = gy.clone();
                Zip::from(&mut gx).and(&node.value).for_each(|g, &y| {
                    if y <= F::zero() {
                        *g = F::zero();
                    }
                });
                out.push((x, self.faulted(OpKind::Relu, gx)));
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = y * gy;
                for (mut col, ycol) in gx.columns_mut().into_iter().zip(y.columns()) {
                    let dot = col.sum();
                    Zip::from(&mut col)
                        .and(&ycol)
                        .for_each(|g, &p| *g -= p * dot);
                }
                out.push((x, self.faulted(OpKind::Softmax, gx)));
            }
            &Op::Concat(a, b) => {
                let na = self.value(a).nrows();
                let ga = gy.slice(s![..na, ..]).to_owned();
                out.push((a, self.faulted(OpKind::Concat, ga)));
                out.push((b, gy.slice(s![na.., ..]).to_owned()));
            }
            &Op::Add(a, b) => {
                out.push((a, self.faulted(OpKind::Add, gy.clone())));
                out.push((b, gy.clone()));
            }
            &Op::Mul(a, b) => {
                let ga = gy * self.value(b);
                out.push((a, self.faulted(OpKind::Mul, ga)));
                out.push((b, gy * self.value(a)));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, self.faulted(OpKind::Dropout, gy * mask)));
            }
            Op::CrossEntropy {
                probs,
                labels,
                floor,
            } => {
                let p = self.value(*probs);
                let m = F::of(labels.len() as f64);
                let g = gy[[0, 0]];
                let mut gp = Array2::zeros(p.dim());
                for (t, &l) in labels.iter().enumerate() {
                    let v = p[[l, t]];
                    if v > *floor {
                        gp[[l, t]] = -g / (m * v);
                    }
                }
                out.push((*probs, self.faulted(OpKind::CrossEntropy, gp)));
            }
            &Op::Smoothness { probs, tau, floor } => {
                let p = self.value(probs);
                let (c, m) = p.dim();
                let scale = gy[[0, 0]] * F::of(2.0) / F::of((m * c) as f64);
                // gradient with respect to the floored logs, then through the log
                let mut gp = Array2::<F>::zeros((c, m));
                for t in 1..m {
                    for k in 0..c {
                        let diff = p[[k, t]].max(floor).ln() - p[[k, t - 1]].max(floor).ln();
                        if diff.abs() <= tau {
                            gp[[k, t]] += scale * diff;
                            gp[[k, t - 1]] -= scale * diff;
                        }
                    }
                }
                Zip::from(&mut gp).and(p).for_each(|g, &v| {
                    *g = if v > floor { *g / v } else { F::zero() };
                });
                out.push((probs, self.faulted(OpKind::Smoothness, gp)));
            }
            Op::Combine(terms) => {
                for (n, &(id, coef)) in terms.iter().enumerate() {
                    let g = gy * coef;
                    let g = if n == 0 {
                        self.faulted(OpKind::Combine, g)
                    } else {
                        g
                    };
                    out.push((id, g));
                }
            }
            Op::WeightedSum { x, weights } => {
                let g = weights * gy[[0, 0]];
                out.push((*x, self.faulted(OpKind::WeightedSum, g)));
            }
        }
        out
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every bound parameter; zero for parameters that did not
    /// influence the loss.
    pub fn param_grads(&self) -> IndexMap<String, Array2<F>> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.value(id).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Row `i * kernel + k` holds input channel `i` shifted by `(k - kernel/2) * dilation`,
/// zero outside `[0, T)`.
fn im2col<F: Scalar>(x: ArrayView2<F>, kernel: usize, dilation: usize) -> Array2<F> {
    let (ch, t) = x.dim();
    let mut col = Array2::zeros((ch * kernel, t));
    let center = (kernel / 2) as isize;
    for i in 0..ch {
        let src = x.row(i);
        for k in 0..kernel {
            let shift = (k as isize - center) * dilation as isize;
            let mut dst = col.row_mut(i * kernel + k);
            if shift.unsigned_abs() >= t {
                continue;
            }
            let s = shift.unsigned_abs();
            if shift >= 0 {
                dst.slice_mut(s![..t - s]).assign(&src.slice(s![s..]));
            } else {
                dst.slice_mut(s![s..]).assign(&src.slice(s![..t - s]));
            }
        }
    }
    col
}

fn col2im<F: Scalar>(gcol: ArrayView2<F>, ch: usize, kernel: usize, dilation: usize) -> Array2<F> {
    let t = gcol.ncols();
    let mut gx = Array2::zeros((ch, t));
    let center = (kernel / 2) as isize;
    for i in 0..ch {
        let mut dst = gx.row_mut(i);
        for k in 0..kernel {
            let shift = (k as isize - center) * dilation as isize;
            if shift.unsigned_abs() >= t {
                continue;
            }
            let s = shift.unsigned_abs();
            let src = gcol.row(i * kernel + k);
            if shift >= 0 {
                let mut d = dst.slice_mut(s![s..]);
                d += &src.slice(s![..t - s]);
            } else {
                let mut d = dst.slice_mut(s![..t - s]);
                d += &src.slice(s![s..]);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn conv(x: Array2<f64>, w: Array2<f64>, dilation: usize) -> Array2<f64> {
        let mut g = Graph::new();
        let b = g.constant(Array2::zeros((w.nrows(), 1)));
        let (x, w) = (g.constant(x), g.constant(w));
        let y = g.dilated_conv1d(x, w, b, 3, dilation).unwrap();
        g.value(y).clone()
    }

    // y[o,t] = b[o] + Σ w[o,i,k] x[i, t + (k-1)d], written directly.
    fn direct_conv(x: &Array2<f64>, w: &Array2<f64>, d: usize) -> Array2<f64> {
        let (ci, t) = x.dim();
        let co = w.nrows();
        Array2::from_shape_fn((co, t), |(o, tt)| {
            let mut acc = 0.0;
            for i in 0..ci {
                for k in 0..3 {
                    let src = tt as isize + (k as isize - 1) * d as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w[[o, i * 3 + k]] * x[[i, src as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_any_dilation() {
        let x = array![[1.0, -2.0, 3.0, 0.5, 7.0]];
        assert_eq!(conv(x.clone(), array![[0.0, 1.0, 0.0]], 4), x);
    }

    #[test]
    fn left_tap_shifts_right() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let y = conv(x.clone(), array![[1.0, 0.0, 0.0]], 1);
        assert_eq!(y, array![[0.0, 1.0, 2.0, 3.0]]);
        assert_eq!(y, direct_conv(&x, &array![[1.0, 0.0, 0.0]], 1));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Array2::from_shape_fn((3, 11), |(i, t)| ((i * 7 + t * 3) % 5) as f64 - 2.0);
        let w = Array2::from_shape_fn((2, 9), |(o, k)| (o as f64 + 1.0) * (k as f64 - 4.0) / 3.0);
        for d in [1, 2, 4, 16] {
            assert_eq!(
                conv(x.clone(), w.clone(), d),
                direct_conv(&x, &w, d),
                "dilation {d}"
            );
        }
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array2::from_shape_fn((4, 9), |(c, t)| {
            (c * t) as f64 * 0.37 - 3.0
        }));
        let y = g.softmax(x);
        for col in g.value(y).columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[-0.0, -1.0, -3.5, 2.0]]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &array![[0.0, 0.0, 0.0, 2.0]]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array2::zeros((2, 5)));
        let w = g.constant(Array2::zeros((3, 5)));
        let b = g.constant(Array2::zeros((3, 1)));
        assert!(g.dilated_conv1d(x, w, b, 3, 1).is_err());
        assert!(g.pointwise_conv(x, w, b).is_err());
        let z = g.constant(Array2::zeros((2, 4)));
        assert!(g.concat(x, z).is_err());
        assert!(g.add(x, z).is_err());
        assert!(g.dropout(x, 1.0, &mut rand::rng()).is_err());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn concat_gradient_splits_exactly() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Array2::from_elem((2, 3), 1.0));
        let b = g.variable(Array2::from_elem((1, 3), 2.0));
        let y = g.concat(a, b).unwrap();
        let probe = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
        let s = g.weighted_sum(y, probe.clone()).unwrap();
        g.backward(s).unwrap();
        let whole = ndarray::concatenate(
            Axis(0),
            &[g.grad(a).unwrap().view(), g.grad(b).unwrap().view()],
        )
        .unwrap();
        assert_eq!(whole, probe);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut set = ParamSet::new();
        set.insert("w", array![[2.0]]);
        set.insert("b", array![[0.0]]);
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0, 3.0]]);
        let w = g.param(&set, "w").unwrap();
        let b = g.param(&set, "b").unwrap();
        let h = g.pointwise_conv(x, w, b).unwrap();
        let w2 = g.param(&set, "w").unwrap();
        assert_eq!(w, w2);
        let y = g.pointwise_conv(h, w2, b).unwrap();
        let s = g.weighted_sum(y, array![[1.0, 1.0]]).unwrap();
        g.backward(s).unwrap();
        // y = w² x  ⇒  dy/dw = 2 w Σx = 16
        assert_eq!(g.param_grads()["w"], array![[16.0]]);
    }
}
