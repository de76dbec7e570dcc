//! The autodiff tape: eager forward evaluation, reverse-mode backward.

use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, IxDyn, Slice};

use super::{Element, NnError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation. Inputs are earlier tape ids, so reverse id order is
/// a valid reverse topological order.
pub enum Op<E: Element> {
    Leaf,
    /// 2-D matrix product.
    MatMul(TensorId, TensorId),
    /// 2-D transpose.
    Transpose(TensorId),
    Reshape(TensorId),
    Add(TensorId, TensorId),
    /// lhs + rhs with rhs broadcast to the lhs shape.
    AddBroadcast(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, E),
    Relu(TensorId),
    Softmax {
        x: TensorId,
        axis: usize,
    },
    /// Log-sum-exp along `axis`, keeping the axis with length 1.
    LogSumExp {
        x: TensorId,
        axis: usize,
    },
    /// Max along `axis` (axis removed); argmax saved for backward routing.
    MaxAxis {
        x: TensorId,
        axis: usize,
        argmax: Vec<usize>,
    },
    /// Concatenation along `axis`.
    Concat {
        a: TensorId,
        b: TensorId,
        axis: usize,
    },
    /// Group normalization over [n, k, c] with per-channel affine.
    GroupNorm {
        x: TensorId,
        gain: TensorId,
        offset: TensorId,
        groups: usize,
        xhat: ArrayD<E>,
        inv_std: Array2<E>,
    },
    /// Paired 2-D rotations with fixed per-position angles; x is [n, d],
    /// cos/sin are [n, d/2].
    Rotary {
        x: TensorId,
        cos: Rc<Array2<E>>,
        sin: Rc<Array2<E>>,
    },
    /// y[i, j] = sum_p q[i, p] * table[i, j, p]; the table is constant.
    PairwiseBias {
        q: TensorId,
        table: Rc<Array3<E>>,
    },
    /// Pads an [m, n] score matrix to [m+1, n+1]; every padded entry takes
    /// the scalar `z` (the learned dustbin score).
    AugmentScores {
        scores: TensorId,
        z: TensorId,
    },
    /// Mean of -logp over the listed (row, col) entries.
    NllSelected {
        logp: TensorId,
        targets: Vec<(usize, usize)>,
    },
    Sum(TensorId),
    Mean(TensorId),
}

struct Node<E: Element> {
    value: ArrayD<E>,
    op: Op<E>,
}

/// Define-by-run computation tape.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView2<'_, E> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

/// Sum-reduces `grad` down to `shape` (inverse of numpy-style broadcasting).
fn reduce_to_shape<E: Element>(grad: &ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<E>, op: Op<E>) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers an input that does not require gradients (gradients are
    /// still propagated through it if requested, but by convention constants
    /// are not read back).
    pub fn constant(&mut self, value: ArrayD<E>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    /// Registers a trainable leaf. Identical to `constant` on the tape; the
    /// caller keeps track of which leaves to read gradients for.
    pub fn leaf(&mut self, value: ArrayD<E>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let y = as2(av).dot(&as2(bv));
        Ok(self.push(y.into_dyn(), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let y = as2(&self.nodes[a.0].value).t().to_owned();
        self.push(y.into_dyn(), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, NnError> {
        let v = &self.nodes[a.0].value;
        if v.len() != shape.iter().product::<usize>() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", v.shape(), shape),
            });
        }
        let y = v
            .clone()
            .into_shape_with_order(IxDyn(&shape))
            .expect("element count checked");
        Ok(self.push(y, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch {
                op: "add",
                details: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let y = av + bv;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// a + b with b broadcast against a (numpy rules, b.ndim <= a.ndim).
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bb = bv.broadcast(av.raw_dim()).ok_or_else(|| NnError::ShapeMismatch {
            op: "add_broadcast",
            details: format!("{:?} vs {:?}", av.shape(), bv.shape()),
        })?;
        let y = av + &bb;
        Ok(self.push(y, Op::AddBroadcast(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch {
                op: "sub",
                details: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let y = av - bv;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch {
                op: "mul",
                details: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let y = av * bv;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> TensorId {
        let y = &self.nodes[a.0].value * c;
        self.push(y, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let y = self.nodes[a.0].value.mapv(|v| if v > E::zero() { v } else { E::zero() });
        self.push(y, Op::Relu(a))
    }

    /// Max-subtracted stable softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let mut y = self.nodes[x.0].value.clone();
        for mut lane in y.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(E::neg_infinity(), E::max);
            lane.mapv_inplace(|v| (v - m).exp());
            let s: E = lane.iter().cloned().sum();
            lane.mapv_inplace(|v| v / s);
        }
        self.push(y, Op::Softmax { x, axis })
    }

    /// Log-sum-exp along `axis`, keeping the reduced axis with length 1.
    pub fn logsumexp(&mut self, x: TensorId, axis: usize) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape[axis] = 1;
        let reduced = xv.map_axis(Axis(axis), |lane| {
            let m = lane.iter().cloned().fold(E::neg_infinity(), E::max);
            let s: E = lane.iter().map(|&v| (v - m).exp()).sum();
            m + s.ln()
        });
        let y = reduced.insert_axis(Axis(axis));
        self.push(y, Op::LogSumExp { x, axis })
    }

    /// Max along `axis`; the axis is removed from the output shape.
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let mut argmax = Vec::with_capacity(xv.len() / xv.shape()[axis]);
        let y = xv.map_axis(Axis(axis), |lane| {
            let mut best = 0usize;
            for (i, v) in lane.iter().enumerate() {
                if *v > lane[best] {
                    best = i;
                }
            }
            argmax.push(best);
            lane[best]
        });
        self.push(y.into_dyn(), Op::MaxAxis { x, axis, argmax })
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let y = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()]).map_err(|e| {
            NnError::ShapeMismatch {
                op: "concat",
                details: e.to_string(),
            }
        })?;
        Ok(self.push(y, Op::Concat { a, b, axis }))
    }

    const GROUP_NORM_EPS: f64 = 1e-5;

    /// Group normalization over an [n, k, c] tensor: per sample and group,
    /// zero mean / unit variance over the (k x channels-in-group) block,
    /// then per-channel gain/offset.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        offset: TensorId,
        groups: usize,
    ) -> Result<TensorId, NnError> {
        let xv = &self.nodes[x.0].value;
        if xv.ndim() != 3 {
            return Err(NnError::ShapeMismatch {
                op: "group_norm",
                details: format!("expected [n, k, c], got {:?}", xv.shape()),
            });
        }
        let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if c % groups != 0 {
            return Err(NnError::BadGroupCount { channels: c, groups });
        }
        let cg = c / groups;
        let m = E::from_f64((k * cg) as f64);
        let eps = E::from_f64(Self::GROUP_NORM_EPS);
        let x4 = xv
            .view()
            .into_shape_with_order(IxDyn(&[n, k, groups, cg]))
            .expect("c divisible by groups");
        let mut xhat = x4.to_owned();
        let mut inv_std = Array2::<E>::zeros((n, groups));
        for i in 0..n {
            for g in 0..groups {
                let mut mean = E::zero();
                for kk in 0..k {
                    for cc in 0..cg {
                        mean = mean + x4[[i, kk, g, cc]];
                    }
                }
                mean = mean / m;
                let mut var = E::zero();
                for kk in 0..k {
                    for cc in 0..cg {
                        let d = x4[[i, kk, g, cc]] - mean;
                        var = var + d * d;
                    }
                }
                var = var / m;
                let istd = (var + eps).sqrt().recip();
                inv_std[[i, g]] = istd;
                for kk in 0..k {
                    for cc in 0..cg {
                        xhat[[i, kk, g, cc]] = (x4[[i, kk, g, cc]] - mean) * istd;
                    }
                }
            }
        }
        let gv = &self.nodes[gain.0].value;
        let ov = &self.nodes[offset.0].value;
        if gv.len() != c || ov.len() != c {
            return Err(NnError::ShapeMismatch {
                op: "group_norm",
                details: format!("gain/offset must have {c} channels"),
            });
        }
        let mut y = ArrayD::<E>::zeros(IxDyn(&[n, k, c]));
        for i in 0..n {
            for kk in 0..k {
                for g in 0..groups {
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        y[[i, kk, ch]] =
                            xhat[[i, kk, g, cc]] * gv[[ch]] + ov[[ch]];
                    }
                }
            }
        }
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gain,
                offset,
                groups,
                xhat,
                inv_std,
            },
        ))
    }

    /// Applies per-position paired rotations: for pair p of row i,
    /// (y[2p], y[2p+1]) = R(angle[i, p]) (x[2p], x[2p+1]).
    pub fn rotary(
        &mut self,
        x: TensorId,
        cos: Rc<Array2<E>>,
        sin: Rc<Array2<E>>,
    ) -> Result<TensorId, NnError> {
        let xv = &self.nodes[x.0].value;
        if xv.ndim() != 2 || xv.shape()[1] != cos.shape()[1] * 2 || xv.shape()[0] != cos.shape()[0] {
            return Err(NnError::ShapeMismatch {
                op: "rotary",
                details: format!("x {:?} vs angles {:?}", xv.shape(), cos.shape()),
            });
        }
        let (n, half) = (cos.shape()[0], cos.shape()[1]);
        let mut y = xv.clone();
        for i in 0..n {
            for p in 0..half {
                let (c, s) = (cos[[i, p]], sin[[i, p]]);
                let a = xv[[i, 2 * p]];
                let b = xv[[i, 2 * p + 1]];
                y[[i, 2 * p]] = c * a - s * b;
                y[[i, 2 * p + 1]] = s * a + c * b;
            }
        }
        Ok(self.push(y, Op::Rotary { x, cos, sin }))
    }

    /// y[i, j] = sum_p q[i, p] table[i, j, p].
    pub fn pairwise_bias(
        &mut self,
        q: TensorId,
        table: Rc<Array3<E>>,
    ) -> Result<TensorId, NnError> {
        let qv = &self.nodes[q.0].value;
        let (rows, cols, d) = (table.shape()[0], table.shape()[1], table.shape()[2]);
        if qv.ndim() != 2 || qv.shape() != [rows, d] {
            return Err(NnError::ShapeMismatch {
                op: "pairwise_bias",
                details: format!("q {:?} vs table {:?}", qv.shape(), table.shape()),
            });
        }
        let q2 = as2(qv);
        let mut y = Array2::<E>::zeros((rows, cols));
        for i in 0..rows {
            let ti = table.index_axis(Axis(0), i); // [cols, d]
            let yi = ti.dot(&q2.row(i));
            y.row_mut(i).assign(&yi);
        }
        Ok(self.push(y.into_dyn(), Op::PairwiseBias { q, table }))
    }

    /// Pads an [m, n] score matrix with a dustbin row and column holding the
    /// scalar `z`.
    pub fn augment_scores(&mut self, scores: TensorId, z: TensorId) -> Result<TensorId, NnError> {
        let sv = &self.nodes[scores.0].value;
        let zv = &self.nodes[z.0].value;
        if sv.ndim() != 2 || zv.len() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "augment_scores",
                details: format!("scores {:?}, z {:?}", sv.shape(), zv.shape()),
            });
        }
        let (m, n) = (sv.shape()[0], sv.shape()[1]);
        let zval = *zv.iter().next().unwrap();
        let mut y = Array2::<E>::from_elem((m + 1, n + 1), zval);
        y.slice_mut(ndarray::s![..m, ..n]).assign(&as2(sv));
        Ok(self.push(y.into_dyn(), Op::AugmentScores { scores, z }))
    }

    /// Mean negative log-likelihood over the selected entries of a log-plan.
    pub fn nll_selected(
        &mut self,
        logp: TensorId,
        targets: Vec<(usize, usize)>,
    ) -> Result<TensorId, NnError> {
        let pv = &self.nodes[logp.0].value;
        if pv.ndim() != 2 || targets.is_empty() {
            return Err(NnError::ShapeMismatch {
                op: "nll_selected",
                details: "need a 2-D log-plan and at least one target".into(),
            });
        }
        let mut total = E::zero();
        for &(i, j) in &targets {
            total = total - pv[[i, j]];
        }
        let y = ArrayD::from_elem(IxDyn(&[]), total / E::from_f64(targets.len() as f64));
        Ok(self.push(y, Op::NllSelected { logp, targets }))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: E = self.nodes[x.0].value.iter().cloned().sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let s: E = v.iter().cloned().sum();
        let y = s / E::from_f64(v.len() as f64);
        self.push(ArrayD::from_elem(IxDyn(&[]), y), Op::Mean(x))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every node.
    /// Returns one optional gradient per tape id; leaves that the loss does
    /// not depend on stay `None`.
    pub fn backward(&self, loss: TensorId) -> Result<Vec<Option<ArrayD<E>>>, NnError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(lv.raw_dim(), E::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn add_grad(grads: &mut [Option<ArrayD<E>>], id: TensorId, g: ArrayD<E>) {
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(
        &self,
        id: usize,
        g: &ArrayD<E>,
        grads: &mut Vec<Option<ArrayD<E>>>,
    ) -> Result<(), NnError> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let g2 = as2(g);
                let da = g2.dot(&as2(bv).t()).into_dyn();
                let db = as2(av).t().dot(&g2).into_dyn();
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::Transpose(a) => {
                Self::add_grad(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                // incoming gradients may be non-contiguous (e.g. out of a
                // normalization backward); reshape needs standard layout
                let da = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(shape)
                    .expect("gradient has the node's element count");
                Self::add_grad(grads, *a, da);
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                let db = reduce_to_shape(g, self.nodes[b.0].value.shape());
                Self::add_grad(grads, *b, db);
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g * &self.nodes[b.0].value;
                let db = g * &self.nodes[a.0].value;
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::Scale(a, c) => {
                Self::add_grad(grads, *a, g * *c);
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].value;
                let da = ndarray::Zip::from(g)
                    .and(xv)
                    .map_collect(|&gv, &x| if x > E::zero() { gv } else { E::zero() });
                Self::add_grad(grads, *a, da);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let mut da = g * y;
                // da -= y * sum(g*y) along axis
                let s = da.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let sb = s.broadcast(y.raw_dim()).unwrap().to_owned();
                da = da - sb * y;
                Self::add_grad(grads, *x, da);
            }
            Op::LogSumExp { x, axis } => {
                let xv = &self.nodes[x.0].value;
                let yv = &self.nodes[id].value; // keepdim
                let yb = yv.broadcast(xv.raw_dim()).unwrap();
                let gb = g.broadcast(xv.raw_dim()).unwrap();
                let da = ndarray::Zip::from(&gb)
                    .and(xv)
                    .and(&yb)
                    .map_collect(|&gv, &x, &y| gv * (x - y).exp());
                let _ = axis;
                Self::add_grad(grads, *x, da);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let xv = &self.nodes[x.0].value;
                let mut da = ArrayD::<E>::zeros(xv.raw_dim());
                for (lane_idx, (mut lane, &gv)) in da
                    .lanes_mut(Axis(*axis))
                    .into_iter()
                    .zip(g.iter())
                    .enumerate()
                {
                    lane[argmax[lane_idx]] = gv;
                }
                Self::add_grad(grads, *x, da);
            }
            Op::Concat { a, b, axis } => {
                let na = self.nodes[a.0].value.shape()[*axis] as isize;
                let da = g
                    .slice_axis(Axis(*axis), Slice::from(..na))
                    .to_owned();
                let db = g
                    .slice_axis(Axis(*axis), Slice::from(na..))
                    .to_owned();
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::GroupNorm {
                x,
                gain,
                offset,
                groups,
                xhat,
                inv_std,
            } => {
                let xv = &self.nodes[x.0].value;
                let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cg = c / groups;
                let m = E::from_f64((k * cg) as f64);
                let gv = &self.nodes[gain.0].value;

                let mut dgain = ArrayD::<E>::zeros(IxDyn(&[c]));
                let mut doffset = ArrayD::<E>::zeros(IxDyn(&[c]));
                let mut dx = ArrayD::<E>::zeros(xv.raw_dim());
                for i in 0..n {
                    for grp in 0..*groups {
                        // per-group reductions of dxhat and dxhat*xhat
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for kk in 0..k {
                            for cc in 0..cg {
                                let ch = grp * cg + cc;
                                let gy = g[[i, kk, ch]];
                                let xh = xhat[[i, kk, grp, cc]];
                                dgain[[ch]] = dgain[[ch]] + gy * xh;
                                doffset[[ch]] = doffset[[ch]] + gy;
                                let dxh = gy * gv[[ch]];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            }
                        }
                        let mean_dxh = sum_dxh / m;
                        let mean_dxh_xh = sum_dxh_xh / m;
                        let istd = inv_std[[i, grp]];
                        for kk in 0..k {
                            for cc in 0..cg {
                                let ch = grp * cg + cc;
                                let dxh = g[[i, kk, ch]] * gv[[ch]];
                                let xh = xhat[[i, kk, grp, cc]];
                                dx[[i, kk, ch]] =
                                    istd * (dxh - mean_dxh - xh * mean_dxh_xh);
                            }
                        }
                    }
                }
                Self::add_grad(grads, *x, dx);
                Self::add_grad(grads, *gain, dgain);
                Self::add_grad(grads, *offset, doffset);
            }
            Op::Rotary { x, cos, sin } => {
                let (n, half) = (cos.shape()[0], cos.shape()[1]);
                let mut dx = ArrayD::<E>::zeros(self.nodes[x.0].value.raw_dim());
                for i in 0..n {
                    for p in 0..half {
                        let (c, s) = (cos[[i, p]], sin[[i, p]]);
                        let ga = g[[i, 2 * p]];
                        let gb = g[[i, 2 * p + 1]];
                        // transpose of the rotation
                        dx[[i, 2 * p]] = c * ga + s * gb;
                        dx[[i, 2 * p + 1]] = -s * ga + c * gb;
                    }
                }
                Self::add_grad(grads, *x, dx);
            }
            Op::PairwiseBias { q, table } => {
                let (rows, _cols, d) = (table.shape()[0], table.shape()[1], table.shape()[2]);
                let g2 = as2(g);
                let mut dq = Array2::<E>::zeros((rows, d));
                for i in 0..rows {
                    let ti = table.index_axis(Axis(0), i); // [cols, d]
                    let dqi = ti.t().dot(&g2.row(i));
                    dq.row_mut(i).assign(&dqi);
                }
                Self::add_grad(grads, *q, dq.into_dyn());
            }
            Op::AugmentScores { scores, z } => {
                let sv = &self.nodes[scores.0].value;
                let (m, n) = (sv.shape()[0], sv.shape()[1]);
                let g2 = as2(g);
                let ds = g2.slice(ndarray::s![..m, ..n]).to_owned().into_dyn();
                let mut dz = E::zero();
                for j in 0..=n {
                    dz = dz + g2[[m, j]];
                }
                for i in 0..m {
                    dz = dz + g2[[i, n]];
                }
                Self::add_grad(grads, *scores, ds);
                let zshape = self.nodes[z.0].value.raw_dim();
                Self::add_grad(grads, *z, ArrayD::from_elem(zshape, dz));
            }
            Op::NllSelected { logp, targets } => {
                let gv = *g.iter().next().unwrap();
                let scale = gv / E::from_f64(targets.len() as f64);
                let mut dp = ArrayD::<E>::zeros(self.nodes[logp.0].value.raw_dim());
                for &(i, j) in targets {
                    dp[[i, j]] = dp[[i, j]] - scale;
                }
                Self::add_grad(grads, *logp, dp);
            }
            Op::Sum(x) => {
                let gv = *g.iter().next().unwrap();
                let da = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                Self::add_grad(grads, *x, da);
            }
            Op::Mean(x) => {
                let xv = &self.nodes[x.0].value;
                let gv = *g.iter().next().unwrap() / E::from_f64(xv.len() as f64);
                Self::add_grad(grads, *x, ArrayD::from_elem(xv.raw_dim(), gv));
            }
        }
        Ok(())
    }

    /// Asserts every forward value on the tape is finite.
    pub fn check_finite(&self) -> Result<(), NnError> {
        for node in &self.nodes {
            if node.value.iter().any(|v| !v.into_f64().is_finite()) {
                return Err(NnError::NonFinite("forward pass"));
            }
        }
        Ok(())
    }
}
