//! Tape-based reverse-mode differentiation over complex matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a real scalar node replays the tape in reverse and
//! returns the gradient of that scalar with respect to every trainable
//! parameter in the backing [`ParamStore`].
//!
//! Each complex entry is treated as two independent real variables, so a
//! gradient is itself a [`CMat`] whose real plane holds `∂L/∂re` and whose
//! imaginary plane holds `∂L/∂im`. Nodes flagged real carry an identically
//! zero imaginary plane and never receive imaginary gradient.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cmat::{cmul, softmax_into, CMat, Channel};
use crate::error::{Error, Result};

/// Norm below which a row is treated as the zero vector.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Real,
    Complex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: CMat,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named, ordered collection of leaf tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Real parameters must have a zero
    /// imaginary plane.
    pub fn add(&mut self, name: impl Into<String>, value: CMat, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        if kind == ParamKind::Real && !value.is_real() {
            return Err(Error::Argument(format!("real parameter `{name}` has an imaginary part")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            kind,
            trainable: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &CMat {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }
}

/// Gradients of a scalar with respect to the trainable parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<CMat>>,
}

impl Gradients {
    /// No gradients for a store of `len` parameters.
    pub fn empty(len: usize) -> Self {
        Gradients {
            grads: vec![None; len],
        }
    }

    pub fn set(&mut self, id: ParamId, grad: CMat) {
        self.grads[id.0] = Some(grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&CMat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &CMat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Polar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Transpose(NodeId),
    Conj(NodeId),
    RealPart(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    CSoftmax(NodeId, Channel),
    NormalizeRows(NodeId),
    CNormalizeRows(NodeId),
    WrapPhase(NodeId),
    Reshape(NodeId),
    Rows(NodeId, usize),
    Cols(NodeId, usize),
    RowSum(NodeId),
    VStack(Vec<NodeId>),
    HConcat(Vec<NodeId>),
    CrossEntropy(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: CMat,
    real: bool,
    op: Op,
}

/// Operation tape bound to a parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &CMat {
        &self.nodes[id.0].value
    }

    pub fn is_real(&self, id: NodeId) -> bool {
        self.nodes[id.0].real
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, mut value: CMat, real: bool, op: Op) -> NodeId {
        // Real operands can still produce `NaN·0` in the imaginary plane.
        if real && !value.is_real() {
            value.im_mut().fill(0.0);
        }
        self.nodes.push(Node { value, real, op });
        NodeId(self.nodes.len() - 1)
    }

    fn require_real(&self, id: NodeId, op: &str) -> Result<()> {
        if self.nodes[id.0].real {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op} requires a real-valued operand")))
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let p = self.store.get(id);
        self.push(p.value.clone(), p.kind == ParamKind::Real, Op::Param(id))
    }

    /// Selects rows of a parameter table, e.g. embedding lookup.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<NodeId> {
        let p = self.store.get(id);
        let table = &p.value;
        let cols = table.cols();
        let mut out = CMat::zeros(rows.len(), cols);
        for (dst, &src) in rows.iter().enumerate() {
            if src >= table.rows() {
                return Err(Error::Argument(format!(
                    "row {src} out of range for `{}` with {} rows",
                    p.name,
                    table.rows()
                )));
            }
            let s = src * cols..(src + 1) * cols;
            let d = dst * cols..(dst + 1) * cols;
            out.re_mut()[d.clone()].copy_from_slice(&table.re()[s.clone()]);
            out.im_mut()[d].copy_from_slice(&table.im()[s]);
        }
        Ok(self.push(out, p.kind == ParamKind::Real, Op::Gather(id, rows.to_vec())))
    }

    pub fn constant(&mut self, value: CMat) -> NodeId {
        let real = value.is_real();
        self.push(value, real, Op::Const)
    }

    // ── binary ──────────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let real = self.is_real(a) && self.is_real(b);
        Ok(self.push(v, real, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let real = self.is_real(a) && self.is_real(b);
        Ok(self.push(v, real, Op::Sub(a, b)))
    }

    /// Entrywise complex product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let real = self.is_real(a) && self.is_real(b);
        Ok(self.push(v, real, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = cmul(self.value(a), self.value(b))?;
        let real = self.is_real(a) && self.is_real(b);
        Ok(self.push(v, real, Op::MatMul(a, b)))
    }

    /// Multiplies row `i` of `x` by entry `i` of the vector `s`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (rows, cols) = xv.shape();
        if sv.len() != rows || (sv.rows() != 1 && sv.cols() != 1) {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let mut out = CMat::zeros(rows, cols);
        for i in 0..rows {
            let (sr, si) = (sv.re()[i], sv.im()[i]);
            for j in 0..cols {
                let (a, b) = xv.get(i, j);
                out.set(i, j, (a * sr - b * si, a * si + b * sr));
            }
        }
        let real = self.is_real(x) && self.is_real(s);
        Ok(self.push(out, real, Op::ScaleRows(x, s)))
    }

    /// `r · e^{iφ}` entrywise from real amplitude and phase tensors.
    pub fn polar(&mut self, r: NodeId, phase: NodeId) -> Result<NodeId> {
        self.require_real(r, "polar")?;
        self.require_real(phase, "polar")?;
        let (rv, pv) = (self.value(r), self.value(phase));
        if rv.shape() != pv.shape() {
            return Err(Error::shape("polar", rv.shape(), pv.shape()));
        }
        let re = rv.re().iter().zip(pv.re()).map(|(m, p)| m * p.cos()).collect();
        let im = rv.re().iter().zip(pv.re()).map(|(m, p)| m * p.sin()).collect();
        let out = CMat::from_parts(rv.rows(), rv.cols(), re, im)?;
        Ok(self.push(out, false, Op::Polar(r, phase)))
    }

    // ── unary ───────────────────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        let real = self.is_real(a);
        self.push(v, real, Op::Scale(a, factor))
    }

    /// Adds a real constant to the real plane.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.re_mut().iter_mut().for_each(|x| *x += c);
        let real = self.is_real(a);
        self.push(v, real, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let real = self.is_real(a);
        self.push(v, real, Op::Transpose(a))
    }

    pub fn conj(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).conj();
        let real = self.is_real(a);
        self.push(v, real, Op::Conj(a))
    }

    pub fn real_part(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = CMat::from_real(v.rows(), v.cols(), v.re().to_vec()).expect("same shape");
        self.push(out, true, Op::RealPart(a))
    }

    /// `tanh` on each part independently (`ctanh`).
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = crate::cmat::ctanh(self.value(a));
        let real = self.is_real(a);
        self.push(v, real, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_real(a, "sigmoid")?;
        let v = self.value(a);
        let re = v.re().iter().map(|x| sigmoid(*x)).collect();
        let out = CMat::from_real(v.rows(), v.cols(), re)?;
        Ok(self.push(out, true, Op::Sigmoid(a)))
    }

    /// Row-wise softmax of a real tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_real(a, "softmax")?;
        let v = self.value(a);
        if v.cols() == 0 {
            return Err(Error::Argument("softmax of an empty vector".into()));
        }
        let mut out = CMat::zeros(v.rows(), v.cols());
        let c = v.cols();
        for r in 0..v.rows() {
            softmax_into(&v.re()[r * c..(r + 1) * c], &mut out.re_mut()[r * c..(r + 1) * c]);
        }
        Ok(self.push(out, true, Op::Softmax(a)))
    }

    /// Row-wise `csoftmax` with the given channel.
    pub fn csoftmax(&mut self, a: NodeId, channel: Channel) -> Result<NodeId> {
        let v = crate::cmat::csoftmax(self.value(a), channel)?;
        Ok(self.push(v, false, Op::CSoftmax(a, channel)))
    }

    /// Scales each row of a real tensor to unit L2 norm. Rows with norm below
    /// [`DEGENERATE_NORM`] become the uniform vector `1/√cols`.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_real(a, "normalize_rows")?;
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let mut re = v.re().to_vec();
        for row in re.chunks_mut(cols.max(1)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < DEGENERATE_NORM {
                row.fill(1.0 / (cols as f64).sqrt());
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let out = CMat::from_real(rows, cols, re)?;
        Ok(self.push(out, true, Op::NormalizeRows(a)))
    }

    /// Scales each complex row to unit norm `sqrt(Σ|x|²)`.
    pub fn cnormalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let mut out = v.clone();
        for r in 0..rows {
            let n = row_cnorm(v, r);
            if n < DEGENERATE_NORM {
                return Err(Error::DegenerateProjector { index: r, norm: n });
            }
            for c in 0..cols {
                let (x, y) = v.get(r, c);
                out.set(r, c, (x / n, y / n));
            }
        }
        let real = self.is_real(a);
        Ok(self.push(out, real, Op::CNormalizeRows(a)))
    }

    /// Wraps real entries into `[−π, π]`. Differentiates as the identity.
    pub fn wrap_phase(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_real(a, "wrap_phase")?;
        let v = self.value(a);
        let re = v.re().iter().map(|p| wrap_angle(*p)).collect();
        let out = CMat::from_real(v.rows(), v.cols(), re)?;
        Ok(self.push(out, true, Op::WrapPhase(a)))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(a).reshaped(rows, cols)?;
        let real = self.is_real(a);
        Ok(self.push(v, real, Op::Reshape(a)))
    }

    /// Rows `start..start + count`.
    pub fn rows(&mut self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start + count > v.rows() {
            return Err(Error::shape("rows", v.shape(), (start, count)));
        }
        let c = v.cols();
        let span = start * c..(start + count) * c;
        let out = CMat::from_parts(count, c, v.re()[span.clone()].to_vec(), v.im()[span].to_vec())?;
        let real = self.is_real(a);
        Ok(self.push(out, real, Op::Rows(a, start)))
    }

    /// Columns `start..start + count`.
    pub fn cols(&mut self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start + count > v.cols() {
            return Err(Error::shape("cols", v.shape(), (start, count)));
        }
        let mut out = CMat::zeros(v.rows(), count);
        for r in 0..v.rows() {
            for c in 0..count {
                out.set(r, c, v.get(r, start + c));
            }
        }
        let real = self.is_real(a);
        Ok(self.push(out, real, Op::Cols(a, start)))
    }

    /// Sums each row into a `rows × 1` column.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = CMat::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            let mut s = (0.0, 0.0);
            for c in 0..v.cols() {
                let (x, y) = v.get(r, c);
                s.0 += x;
                s.1 += y;
            }
            out.set(r, 0, s);
        }
        let real = self.is_real(a);
        self.push(out, real, Op::RowSum(a))
    }

    /// Concatenates along rows; all parts share a column count.
    pub fn vstack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("vstack of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut re = Vec::new();
        let mut im = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("vstack", self.value(first).shape(), v.shape()));
            }
            re.extend_from_slice(v.re());
            im.extend_from_slice(v.im());
            rows += v.rows();
        }
        let real = parts.iter().all(|&p| self.is_real(p));
        let out = CMat::from_parts(rows, cols, re, im)?;
        Ok(self.push(out, real, Op::VStack(parts.to_vec())))
    }

    /// Concatenates along columns; all parts share a row count.
    pub fn hconcat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("hconcat of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("hconcat", self.value(first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut out = CMat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        let real = parts.iter().all(|&p| self.is_real(p));
        Ok(self.push(out, real, Op::HConcat(parts.to_vec())))
    }

    /// Softmax cross-entropy of a real `1 × C` logit row against class `target`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        self.require_real(logits, "cross_entropy")?;
        let v = self.value(logits);
        if v.rows() != 1 || target >= v.cols() {
            return Err(Error::Argument(format!(
                "cross_entropy target {target} for logits of shape {:?}",
                v.shape()
            )));
        }
        let loss = logsumexp(v.re()) - v.re()[target];
        Ok(self.push(CMat::scalar(loss, 0.0), true, Op::CrossEntropy(logits, target)))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter that influenced it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.is_real(loss) {
            return Err(Error::Contract("backward needs a real-valued loss".into()));
        }

        let mut adj: Vec<Option<CMat>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(CMat::scalar(1.0, 0.0));
        let mut grads: Vec<Option<CMat>> = vec![None; self.store.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => {
                    if self.store.get(*pid).trainable {
                        accumulate_param(&mut grads, *pid, g, self.store);
                    }
                }
                Op::Gather(pid, rows) => {
                    let p = self.store.get(*pid);
                    if p.trainable {
                        let slot = grads[pid.0]
                            .get_or_insert_with(|| CMat::zeros(p.value.rows(), p.value.cols()));
                        let cols = p.value.cols();
                        for (src, &dst) in rows.iter().enumerate() {
                            for c in 0..cols {
                                slot.re_mut()[dst * cols + c] += g.re()[src * cols + c];
                                if p.kind == ParamKind::Complex {
                                    slot.im_mut()[dst * cols + c] += g.im()[src * cols + c];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, g.clone());
                    self.acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *b, g.scale(-1.0));
                    self.acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(&self.value(*b).conj())?;
                    let gb = g.hadamard(&self.value(*a).conj())?;
                    self.acc(&mut adj, *a, ga);
                    self.acc(&mut adj, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = cmul(&g, &self.value(*b).adjoint())?;
                    let gb = cmul(&self.value(*a).adjoint(), &g)?;
                    self.acc(&mut adj, *a, ga);
                    self.acc(&mut adj, *b, gb);
                }
                Op::ScaleRows(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let (rows, cols) = xv.shape();
                    let mut gx = CMat::zeros(rows, cols);
                    let mut gs = CMat::zeros(sv.rows(), sv.cols());
                    for r in 0..rows {
                        let sc = (sv.re()[r], -sv.im()[r]);
                        let mut acc = (0.0, 0.0);
                        for c in 0..cols {
                            let gc = g.get(r, c);
                            gx.set(r, c, cmul_scalar(gc, sc));
                            let (xr, xi) = xv.get(r, c);
                            let t = cmul_scalar(gc, (xr, -xi));
                            acc.0 += t.0;
                            acc.1 += t.1;
                        }
                        gs.re_mut()[r] = acc.0;
                        gs.im_mut()[r] = acc.1;
                    }
                    self.acc(&mut adj, *x, gx);
                    self.acc(&mut adj, *s, gs);
                }
                Op::Polar(r, phase) => {
                    let (rv, pv) = (self.value(*r), self.value(*phase));
                    let n = rv.len();
                    let mut gr = vec![0.0; n];
                    let mut gp = vec![0.0; n];
                    for k in 0..n {
                        let (s, c) = pv.re()[k].sin_cos();
                        let (gre, gim) = (g.re()[k], g.im()[k]);
                        gr[k] = gre * c + gim * s;
                        gp[k] = rv.re()[k] * (gim * c - gre * s);
                    }
                    let (rows, cols) = rv.shape();
                    self.acc(&mut adj, *r, CMat::from_real(rows, cols, gr)?);
                    self.acc(&mut adj, *phase, CMat::from_real(rows, cols, gp)?);
                }
                Op::Scale(a, f) => self.acc(&mut adj, *a, g.scale(*f)),
                Op::AddScalar(a) | Op::WrapPhase(a) => self.acc(&mut adj, *a, g),
                Op::Transpose(a) => self.acc(&mut adj, *a, g.transpose()),
                Op::Conj(a) => self.acc(&mut adj, *a, g.conj()),
                Op::RealPart(a) => {
                    let (rows, cols) = g.shape();
                    let (re, _) = g.into_parts();
                    self.acc(&mut adj, *a, CMat::from_real(rows, cols, re)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for k in 0..y.len() {
                        ga.re_mut()[k] *= 1.0 - y.re()[k] * y.re()[k];
                        ga.im_mut()[k] *= 1.0 - y.im()[k] * y.im()[k];
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for k in 0..y.len() {
                        ga.re_mut()[k] *= y.re()[k] * (1.0 - y.re()[k]);
                        ga.im_mut()[k] = 0.0;
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = CMat::zeros(y.rows(), y.cols());
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let span = r * c..(r + 1) * c;
                        softmax_vjp(&y.re()[span.clone()], &g.re()[span.clone()], &mut ga.re_mut()[span]);
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::CSoftmax(a, channel) => {
                    // For both channels the vjp is s ⊙ (g − Σ g·s) with s the
                    // underlying (positive) softmax output.
                    let sign = if *channel == Channel::Pos { 1.0 } else { -1.0 };
                    let s = node.value.scale(sign);
                    let mut ga = CMat::zeros(s.rows(), s.cols());
                    let c = s.cols();
                    for r in 0..s.rows() {
                        let span = r * c..(r + 1) * c;
                        softmax_vjp(&s.re()[span.clone()], &g.re()[span.clone()], &mut ga.re_mut()[span.clone()]);
                        softmax_vjp(&s.im()[span.clone()], &g.im()[span.clone()], &mut ga.im_mut()[span]);
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let (rows, cols) = x.shape();
                    let mut ga = CMat::zeros(rows, cols);
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let n = x.re()[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n < DEGENERATE_NORM {
                            continue;
                        }
                        let yr = &y.re()[span.clone()];
                        let gr = &g.re()[span.clone()];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, out) in ga.re_mut()[span].iter_mut().enumerate() {
                            *out = (gr[k] - yr[k] * dot) / n;
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::CNormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let (rows, cols) = x.shape();
                    let mut ga = CMat::zeros(rows, cols);
                    for r in 0..rows {
                        let n = row_cnorm(x, r);
                        let mut dot = 0.0;
                        for c in 0..cols {
                            let (yr, yi) = y.get(r, c);
                            let (gr, gi) = g.get(r, c);
                            dot += yr * gr + yi * gi;
                        }
                        for c in 0..cols {
                            let (yr, yi) = y.get(r, c);
                            let (gr, gi) = g.get(r, c);
                            ga.set(r, c, ((gr - yr * dot) / n, (gi - yi * dot) / n));
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.shape(*a);
                    self.acc(&mut adj, *a, g.reshaped(rows, cols)?);
                }
                Op::Rows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = CMat::zeros(rows, cols);
                    let off = start * cols;
                    ga.re_mut()[off..off + g.len()].copy_from_slice(g.re());
                    ga.im_mut()[off..off + g.len()].copy_from_slice(g.im());
                    self.acc(&mut adj, *a, ga);
                }
                Op::Cols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = CMat::zeros(rows, cols);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, start + c, g.get(r, c));
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = CMat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.get(r, 0);
                        for c in 0..cols {
                            ga.set(r, c, gr);
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::VStack(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let span = offset * cols..(offset + rows) * cols;
                        let part = CMat::from_parts(
                            rows,
                            cols,
                            g.re()[span.clone()].to_vec(),
                            g.im()[span].to_vec(),
                        )?;
                        self.acc(&mut adj, p, part);
                        offset += rows;
                    }
                }
                Op::HConcat(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut part = CMat::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                part.set(r, c, g.get(r, offset + c));
                            }
                        }
                        self.acc(&mut adj, p, part);
                        offset += cols;
                    }
                }
                Op::CrossEntropy(a, target) => {
                    let z = self.value(*a);
                    let mut p = vec![0.0; z.cols()];
                    softmax_into(z.re(), &mut p);
                    p[*target] -= 1.0;
                    let scale = g.re()[0];
                    let gz: Vec<f64> = p.iter().map(|v| v * scale).collect();
                    self.acc(&mut adj, *a, CMat::from_real(1, z.cols(), gz)?);
                }
            }
        }

        Ok(Gradients { grads })
    }

    fn acc(&self, adj: &mut [Option<CMat>], id: NodeId, mut g: CMat) {
        if self.nodes[id.0].real {
            g.im_mut().fill(0.0);
        }
        match &mut adj[id.0] {
            Some(existing) => {
                for (e, v) in existing.re_mut().iter_mut().zip(g.re()) {
                    *e += v;
                }
                for (e, v) in existing.im_mut().iter_mut().zip(g.im()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn accumulate_param(grads: &mut [Option<CMat>], pid: ParamId, mut g: CMat, store: &ParamStore) {
    if store.get(pid).kind == ParamKind::Real {
        g.im_mut().fill(0.0);
    }
    match &mut grads[pid.0] {
        Some(existing) => {
            *existing = existing.add(&g).expect("gradient shape matches parameter");
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn cmul_scalar(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn row_cnorm(m: &CMat, r: usize) -> f64 {
    (0..m.cols())
        .map(|c| {
            let (x, y) = m.get(r, c);
            x * x + y * y
        })
        .sum::<f64>()
        .sqrt()
}

fn softmax_vjp(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for k in 0..y.len() {
        out[k] = y[k] * (g[k] - dot);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Maps an angle into `[−π, π]`.
pub fn wrap_angle(p: f64) -> f64 {
    if (-PI..=PI).contains(&p) {
        return p;
    }
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w < -PI {
        w + 2.0 * PI
    } else {
        w
    }
}
