//! Reverse-mode automatic differentiation over dense real arrays.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, which is already a topological order because an operation can
//! only reference nodes created before it. [`Tape::backward`] walks the
//! record once in reverse, accumulating exact partials into per-node
//! gradient buffers. Gradients of nodes that were never reached stay
//! bit-exact zeros, which is what makes [`Tape::stop_gradient`] and the
//! straight-through estimator work.
//!
//! Complex quantities are carried as stacked real vectors
//! `[re_0..re_E, im_0..im_E]`; [`Tape::unit_modulus`] normalizes such a
//! vector pair-wise onto the unit circle.

use crate::error::AdError;

use super::array::Array;

/// Magnitudes below this are treated as zero by the pair-wise
/// unit-modulus normalization; the pair is replaced by (1, 0).
pub const UNIT_MODULUS_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Div(Node, Node),
    Neg(Node),
    Square(Node),
    Sqrt(Node),
    Matmul(Node, Node),
    Matvec(Node, Node),
    Tanh(Node),
    Sigmoid(Node),
    Relu(Node),
    Sum(Node),
    Mean(Node),
    Concat(Vec<Node>),
    Slice(Node, usize, usize),
    Col(Node, usize),
    StopGradient,
    /// Forward value is a verbatim copy of the quantized operand;
    /// backward routes the incoming gradient to the stored pre-quantized
    /// operand unchanged and contributes nothing to the quantized one.
    StraightThrough(Node),
    UnitModulus(Node),
}

struct Record {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape {
    nodes: Vec<Record>,
    grads: Vec<Option<Array>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Node {
        self.nodes.push(Record {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Node(self.nodes.len() - 1)
    }

    fn needs(&self, n: Node) -> bool {
        self.nodes[n.0].needs_grad
    }

    /// Insert a leaf value. `requires_grad` marks it as a trainable
    /// input whose gradient will be populated by [`Tape::backward`].
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Node {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Array) -> Node {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Node {
        self.constant(Array::scalar(v))
    }

    pub fn value(&self, n: Node) -> &Array {
        &self.nodes[n.0].value
    }

    /// Gradient accumulated for `n`. Returns zeros of the node's shape
    /// if backward never reached it.
    pub fn grad(&self, n: Node) -> Array {
        match &self.grads[n.0] {
            Some(g) => g.clone(),
            None => Array::zeros(self.nodes[n.0].value.shape().to_vec()),
        }
    }

    /// Clear all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    // ── elementwise binary ops ──────────────────────────────────────

    fn binary_shape(&self, a: Node, b: Node, name: &str) -> Result<Vec<usize>, AdError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else if self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else {
            Err(AdError::Shape(format!(
                "{name}: incompatible shapes {sa:?} and {sb:?}"
            )))
        }
    }

    fn binary(
        &mut self,
        a: Node,
        b: Node,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Node, AdError> {
        let shape = self.binary_shape(a, b, name)?;
        let numel: usize = shape.iter().product();
        let va = self.value(a);
        let vb = self.value(b);
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = va.data()[i % va.numel()];
            let y = vb.data()[i % vb.numel()];
            data.push(f(x, y));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::from_vec(shape, data)?, op, needs))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Node, b: Node) -> Result<Node, AdError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ── elementwise unary ops ───────────────────────────────────────

    fn unary(&mut self, a: Node, f: impl Fn(f64) -> f64, op: Op) -> Node {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(Array::from_vec(shape, data).unwrap(), op, needs)
    }

    pub fn neg(&mut self, a: Node) -> Node {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn square(&mut self, a: Node) -> Node {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Node) -> Result<Node, AdError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(AdError::Domain("sqrt of negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Node) -> Node {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Multiply by a plain constant.
    pub fn scale(&mut self, a: Node, s: f64) -> Node {
        let c = self.scalar(s);
        self.mul(a, c).expect("scalar broadcast cannot fail")
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product of two rank-2 nodes, (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(AdError::Shape("matmul expects rank-2 operands".into()));
        }
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(AdError::Shape(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = va.at(i, l);
                for j in 0..n {
                    out[i * n + j] += ail * vb.at(l, j);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::matrix(m, n, out)?, Op::Matmul(a, b), needs))
    }

    /// Matrix-vector product, (m,k) x (k,) -> (m,).
    pub fn matvec(&mut self, w: Node, x: Node) -> Result<Node, AdError> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.shape().len() != 2 || vx.shape().len() != 1 {
            return Err(AdError::Shape(
                "matvec expects a rank-2 matrix and a rank-1 vector".into(),
            ));
        }
        let (m, k) = (vw.rows(), vw.cols());
        if k != vx.numel() {
            return Err(AdError::Shape(format!(
                "matvec: matrix has {k} columns, vector has {} elements",
                vx.numel()
            )));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += vw.at(i, l) * vx.data()[l];
            }
            out[i] = acc;
        }
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(Array::vector(&out), Op::Matvec(w, x), needs))
    }

    // ── reductions and reshaping ────────────────────────────────────

    pub fn sum(&mut self, a: Node) -> Node {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Node) -> Node {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(a);
        self.push(Array::scalar(m), Op::Mean(a), needs)
    }

    /// Concatenate rank-1 nodes into one vector.
    pub fn concat(&mut self, parts: &[Node]) -> Result<Node, AdError> {
        if parts.is_empty() {
            return Err(AdError::Shape("concat of zero nodes".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(AdError::Shape("concat expects rank-1 operands".into()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Array::vector(&data), Op::Concat(parts.to_vec()), needs))
    }

    /// Sub-range `[start, end)` of a rank-1 node.
    pub fn slice(&mut self, a: Node, start: usize, end: usize) -> Result<Node, AdError> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(AdError::Shape("slice expects a rank-1 operand".into()));
        }
        if start > end || end > v.numel() {
            return Err(AdError::Shape(format!(
                "slice {start}..{end} out of range for length {}",
                v.numel()
            )));
        }
        let data = v.data()[start..end].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Array::vector(&data), Op::Slice(a, start, end), needs))
    }

    /// Column `j` of a rank-2 node as a rank-1 vector.
    pub fn col(&mut self, a: Node, j: usize) -> Result<Node, AdError> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(AdError::Shape("col expects a rank-2 operand".into()));
        }
        if j >= v.cols() {
            return Err(AdError::Shape(format!(
                "column {j} out of range for {} columns",
                v.cols()
            )));
        }
        let data: Vec<f64> = (0..v.rows()).map(|i| v.at(i, j)).collect();
        let needs = self.needs(a);
        Ok(self.push(Array::vector(&data), Op::Col(a, j), needs))
    }

    // ── gradient-flow control ───────────────────────────────────────

    /// Identity in the forward pass, zero partial derivatives in the
    /// backward pass.
    pub fn stop_gradient(&mut self, a: Node) -> Node {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Straight-through estimator: the forward value is a verbatim copy
    /// of `quantized`, while the backward pass copies the incoming
    /// gradient onto `pre_q` and contributes nothing to `quantized`.
    pub fn straight_through(&mut self, pre_q: Node, quantized: Node) -> Result<Node, AdError> {
        if self.value(pre_q).shape() != self.value(quantized).shape() {
            return Err(AdError::Shape(format!(
                "straight_through: shapes {:?} and {:?} differ",
                self.value(pre_q).shape(),
                self.value(quantized).shape()
            )));
        }
        let v = self.value(quantized).clone();
        let needs = self.needs(pre_q);
        Ok(self.push(v, Op::StraightThrough(pre_q), needs))
    }

    /// Pair-wise unit-modulus normalization of a stacked `[re; im]`
    /// vector of even length 2E: pair e becomes (a,b)/sqrt(a^2+b^2).
    /// Pairs with magnitude below [`UNIT_MODULUS_EPS`] are replaced by
    /// (1, 0) and treated as locally constant.
    pub fn unit_modulus(&mut self, a: Node) -> Result<Node, AdError> {
        let v = self.value(a);
        if v.shape().len() != 1 || v.numel() % 2 != 0 {
            return Err(AdError::Shape(
                "unit_modulus expects a rank-1 vector of even length".into(),
            ));
        }
        let out = normalize_pairs(v.data());
        let needs = self.needs(a);
        Ok(self.push(Array::vector(&out), Op::UnitModulus(a), needs))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Gradients of all nodes
    /// with `requires_grad` (direct or inherited) are populated; calling
    /// again without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Node) -> Result<(), AdError> {
        if !self.value(loss).is_scalar() {
            return Err(AdError::Shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Array>> = vec![None; n];
        adj[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // An all-zero adjoint contributes nothing; skipping it keeps
            // gradients of blocked subgraphs bit-exact zeros (no -0.0
            // contamination from zero-weighted branches).
            if g.data().iter().any(|&v| v != 0.0 || v.is_nan()) {
                self.propagate(idx, &g, &mut adj);
            }
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Add `contrib` into the adjoint slot of `child`, un-broadcasting
    /// to the child's shape when the forward op broadcast a scalar.
    fn accumulate(&self, adj: &mut [Option<Array>], child: Node, contrib: Array) {
        if !self.nodes[child.0].needs_grad {
            return;
        }
        let child_shape = self.nodes[child.0].value.shape();
        let reduced = if contrib.shape() == child_shape {
            contrib
        } else {
            // forward broadcast a scalar across an array: fold back
            debug_assert_eq!(child_shape.iter().product::<usize>(), 1);
            Array::scalar(contrib.data().iter().sum())
        };
        match &mut adj[child.0] {
            Some(a) => a.add_assign(&reduced),
            slot => *slot = Some(reduced),
        }
    }

    fn propagate(&self, idx: usize, g: &Array, adj: &mut [Option<Array>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                self.accumulate(adj, b, neg);
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                self.accumulate(adj, a, broadcast_mul(g, vb));
                self.accumulate(adj, b, broadcast_mul(g, va));
            }
            Op::Div(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                let ga = broadcast_zip(g, vb, |gi, bi| gi / bi);
                let gb = {
                    let numel = g.numel();
                    let mut data = Vec::with_capacity(numel);
                    for i in 0..numel {
                        let ai = va.data()[i % va.numel()];
                        let bi = vb.data()[i % vb.numel()];
                        data.push(-g.data()[i] * ai / (bi * bi));
                    }
                    Array::from_vec(g.shape().to_vec(), data).unwrap()
                };
                self.accumulate(adj, a, ga);
                self.accumulate(adj, b, gb);
            }
            Op::Neg(a) => {
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                self.accumulate(adj, a, neg);
            }
            Op::Square(a) => {
                let va = &self.nodes[a.0].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gi, ai)| 2.0 * ai * gi)
                    .collect();
                self.accumulate(adj, a, Array::from_vec(va.shape().to_vec(), data).unwrap());
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[idx].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gi, oi)| gi / (2.0 * oi))
                    .collect();
                self.accumulate(adj, a, Array::from_vec(out.shape().to_vec(), data).unwrap());
            }
            Op::Matmul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                // dA = g . B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.at(i, j);
                        for l in 0..k {
                            ga[i * k + l] += gij * vb.at(l, j);
                        }
                    }
                }
                // dB = A^T . g
                let mut gb = vec![0.0; k * n];
                for l in 0..k {
                    for i in 0..m {
                        let ail = va.at(i, l);
                        for j in 0..n {
                            gb[l * n + j] += ail * g.at(i, j);
                        }
                    }
                }
                self.accumulate(adj, a, Array::matrix(m, k, ga).unwrap());
                self.accumulate(adj, b, Array::matrix(k, n, gb).unwrap());
            }
            Op::Matvec(w, x) => {
                let vw = &self.nodes[w.0].value;
                let vx = &self.nodes[x.0].value;
                let (m, k) = (vw.rows(), vw.cols());
                let mut gw = vec![0.0; m * k];
                for i in 0..m {
                    let gi = g.data()[i];
                    for l in 0..k {
                        gw[i * k + l] = gi * vx.data()[l];
                    }
                }
                let mut gx = vec![0.0; k];
                for i in 0..m {
                    let gi = g.data()[i];
                    for l in 0..k {
                        gx[l] += vw.at(i, l) * gi;
                    }
                }
                self.accumulate(adj, w, Array::matrix(m, k, gw).unwrap());
                self.accumulate(adj, x, Array::vector(&gx));
            }
            Op::Tanh(a) => {
                let out = &self.nodes[idx].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gi, oi)| gi * (1.0 - oi * oi))
                    .collect();
                self.accumulate(adj, a, Array::from_vec(out.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gi, oi)| gi * oi * (1.0 - oi))
                    .collect();
                self.accumulate(adj, a, Array::from_vec(out.shape().to_vec(), data).unwrap());
            }
            Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gi, ai)| if *ai > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(adj, a, Array::from_vec(va.shape().to_vec(), data).unwrap());
            }
            Op::Sum(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let numel: usize = shape.iter().product();
                let data = vec![g.item(); numel];
                self.accumulate(adj, a, Array::from_vec(shape, data).unwrap());
            }
            Op::Mean(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let numel: usize = shape.iter().product();
                let data = vec![g.item() / numel as f64; numel];
                self.accumulate(adj, a, Array::from_vec(shape, data).unwrap());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let part = Array::vector(&g.data()[offset..offset + len]);
                    self.accumulate(adj, p, part);
                    offset += len;
                }
            }
            Op::Slice(a, start, end) => {
                let mut full = Array::zeros(self.nodes[a.0].value.shape().to_vec());
                full.data_mut()[start..end].copy_from_slice(g.data());
                self.accumulate(adj, a, full);
            }
            Op::Col(a, j) => {
                let src = &self.nodes[a.0].value;
                let mut full = Array::zeros(src.shape().to_vec());
                for i in 0..src.rows() {
                    *full.at_mut(i, j) = g.data()[i];
                }
                self.accumulate(adj, a, full);
            }
            Op::StopGradient => {}
            Op::StraightThrough(pre_q) => {
                self.accumulate(adj, pre_q, g.clone());
            }
            Op::UnitModulus(a) => {
                let va = &self.nodes[a.0].value;
                let e = va.numel() / 2;
                let mut out = vec![0.0; va.numel()];
                for i in 0..e {
                    let (re, im) = (va.data()[i], va.data()[e + i]);
                    let m2 = re * re + im * im;
                    let m = m2.sqrt();
                    if m < UNIT_MODULUS_EPS {
                        continue;
                    }
                    let m3 = m2 * m;
                    let (g_re, g_im) = (g.data()[i], g.data()[e + i]);
                    out[i] = (g_re * im * im - g_im * re * im) / m3;
                    out[e + i] = (g_im * re * re - g_re * re * im) / m3;
                }
                self.accumulate(adj, a, Array::vector(&out));
            }
        }
    }
}

/// Pairs whose magnitude is already this close to 1 are passed through
/// untouched, which makes repeated normalization a bit-exact identity.
const UNIT_SKIP_TOL: f64 = 8.0 * f64::EPSILON;

/// Pair-wise normalization used by [`Tape::unit_modulus`] and by the
/// plain-array codebook projection: pair e of a stacked `[re; im]`
/// vector becomes (a,b)/sqrt(a^2+b^2), or (1,0) if the magnitude is
/// below [`UNIT_MODULUS_EPS`]. A pair already on the unit circle (to
/// within a few ulps) is returned verbatim so the map is idempotent.
pub fn normalize_pairs(stacked: &[f64]) -> Vec<f64> {
    let e = stacked.len() / 2;
    let mut out = vec![0.0; stacked.len()];
    for i in 0..e {
        let (re, im) = (stacked[i], stacked[e + i]);
        let m = (re * re + im * im).sqrt();
        if m < UNIT_MODULUS_EPS {
            out[i] = 1.0;
            out[e + i] = 0.0;
        } else if (m - 1.0).abs() <= UNIT_SKIP_TOL {
            out[i] = re;
            out[e + i] = im;
        } else {
            out[i] = re / m;
            out[e + i] = im / m;
        }
    }
    out
}

fn broadcast_mul(g: &Array, other: &Array) -> Array {
    let data: Vec<f64> = (0..g.numel())
        .map(|i| g.data()[i] * other.data()[i % other.numel()])
        .collect();
    Array::from_vec(g.shape().to_vec(), data).unwrap()
}

fn broadcast_zip(g: &Array, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data: Vec<f64> = (0..g.numel())
        .map(|i| f(g.data()[i], other.data()[i % other.numel()]))
        .collect();
    Array::from_vec(g.shape().to_vec(), data).unwrap()
}
