//! Batched reverse-mode automatic differentiation.
//!
//! Every node on the [`Tape`] holds a dense `rows × cols` matrix; the row axis
//! is the sample (batch) axis. Operations are recorded in creation order, so a
//! reverse sweep over the node list is a valid topological order for the
//! adjoint pass.
//!
//! Subgradient conventions at kinks: `relu`/positive part has slope 1 at zero
//! and `max(a, b)` routes the gradient to `a` on ties.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Max(Var, Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ColumnMean(Var),
    BroadcastRows(Var),
    Column(Var, usize),
    Concat(Vec<Var>),
    RowMatVec(Var, Var),
    Slice { src: Var, offset: usize },
    Opaque(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a differentiable computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v` flattened row-major; zeros if `v` was unreached.
    pub fn flat(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn parameter(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1), "scalar_value on a non-scalar node");
        x[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension mismatch");
        let out = va.dot(vb);
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a + bias` with a `1 × cols` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let vb = self.value(bias);
        assert_eq!(vb.nrows(), 1, "bias must be a row vector");
        assert_eq!(vb.ncols(), self.value(a).ncols(), "bias width mismatch");
        let out = self.value(a) + &vb.row(0);
        self.push_op(out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push_op(out, Op::Shift(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    /// Positive part `max(a, 0)`.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "max");
        let out = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x >= y { x } else { y });
        self.push_op(out, Op::Max(a, b), &[a, b])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push_op(out, Op::Square(a), &[a])
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    /// Mean of all entries, as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(!v.is_empty(), "mean of an empty node");
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push_op(out, Op::Mean(a), &[a])
    }

    /// Mean over the row (sample) axis: `n × c → 1 × c`.
    pub fn column_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(v.nrows() > 0, "column mean of an empty node");
        let out = v.sum_axis(Axis(0)).insert_axis(Axis(0)) / v.nrows() as f64;
        self.push_op(out, Op::ColumnMean(a), &[a])
    }

    /// Repeats a `1 × c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1, "broadcast_rows expects a single row");
        let out = v.broadcast((rows, v.ncols())).expect("row broadcast").to_owned();
        self.push_op(out, Op::BroadcastRows(a), &[a])
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a);
        assert!(j < v.ncols(), "column index out of range");
        let out = v.slice(s![.., j..j + 1]).to_owned();
        self.push_op(out, Op::Column(a, j), &[a])
    }

    /// Horizontal concatenation of equally tall nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat row mismatch");
        self.push_op(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Per-row matrix-vector product. `m` is `n × (p·q)` holding one row-major
    /// `p × q` matrix per row and `v` is `n × q`; the result is `n × p`.
    pub fn row_mat_vec(&mut self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.value(m), self.value(v));
        assert_eq!(vm.nrows(), vv.nrows(), "row_mat_vec row mismatch");
        let q = vv.ncols();
        assert!(q > 0 && vm.ncols() % q == 0, "row_mat_vec width mismatch");
        let p = vm.ncols() / q;
        let mut out = Array2::zeros((vm.nrows(), p));
        for r in 0..vm.nrows() {
            for i in 0..p {
                let mut acc = 0.0;
                for j in 0..q {
                    acc += vm[[r, i * q + j]] * vv[[r, j]];
                }
                out[[r, i]] = acc;
            }
        }
        self.push_op(out, Op::RowMatVec(m, v), &[m, v])
    }

    /// Views `rows·cols` consecutive entries of a `1 × P` node, starting at
    /// `offset`, as a row-major `rows × cols` matrix.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let v = self.value(src);
        assert_eq!(v.nrows(), 1, "slice source must be a flat row");
        assert!(offset + rows * cols <= v.ncols(), "slice out of range");
        let data = v.slice(s![0, offset..offset + rows * cols]).to_vec();
        let out = Array2::from_shape_vec((rows, cols), data).expect("slice shape");
        self.push_op(out, Op::Slice { src, offset }, &[src])
    }

    /// A value computed outside the supported primitive set. Differentiating
    /// through it is a contract error.
    pub fn opaque(&mut self, inputs: &[Var], value: Array2<f64>) -> Var {
        self.push_op(value, Op::Opaque(inputs.to_vec()), inputs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: operand shapes differ"
        );
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let d = g.dot(&self.value(*b).t());
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = self.value(*a).t().dot(&g);
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.requires_grad(*bias) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *bias, d);
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, -&g);
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let d = &g * self.value(*b);
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = &g * self.value(*a);
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => self.accumulate(&mut grads, *a, g * *c),
                Op::Shift(a) => self.accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * (1.0 - y * y));
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x >= 0.0 { g } else { 0.0 });
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g * sigmoid(x));
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Max(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let d = Zip::from(&g)
                            .and(va)
                            .and(vb)
                            .map_collect(|&g, &x, &y| if x >= y { g } else { 0.0 });
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = Zip::from(&g)
                            .and(va)
                            .and(vb)
                            .map_collect(|&g, &x, &y| if x >= y { 0.0 } else { g });
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::Square(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| 2.0 * g * x);
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let d = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                    self.accumulate(&mut grads, *a, d);
                }
                Op::ColumnMean(a) => {
                    let n = self.value(*a).nrows();
                    let d = g
                        .broadcast((n, g.ncols()))
                        .expect("column mean broadcast")
                        .mapv(|x| x / n as f64);
                    self.accumulate(&mut grads, *a, d);
                }
                Op::BroadcastRows(a) => {
                    let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Column(a, j) => {
                    if let Some(acc) = self.slot(&mut grads, *a) {
                        let mut col = acc.slice_mut(s![.., *j..*j + 1]);
                        col += &g;
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.requires_grad(*p) {
                            let d = g.slice(s![.., start..start + w]).to_owned();
                            self.accumulate(&mut grads, *p, d);
                        }
                        start += w;
                    }
                }
                Op::RowMatVec(m, v) => {
                    let (vm, vv) = (self.value(*m), self.value(*v));
                    let q = vv.ncols();
                    let p = g.ncols();
                    if self.requires_grad(*m) {
                        let mut d = Array2::zeros(vm.dim());
                        for r in 0..vm.nrows() {
                            for i in 0..p {
                                for j in 0..q {
                                    d[[r, i * q + j]] = g[[r, i]] * vv[[r, j]];
                                }
                            }
                        }
                        self.accumulate(&mut grads, *m, d);
                    }
                    if self.requires_grad(*v) {
                        let mut d = Array2::zeros(vv.dim());
                        for r in 0..vm.nrows() {
                            for j in 0..q {
                                let mut acc = 0.0;
                                for i in 0..p {
                                    acc += g[[r, i]] * vm[[r, i * q + j]];
                                }
                                d[[r, j]] = acc;
                            }
                        }
                        self.accumulate(&mut grads, *v, d);
                    }
                }
                Op::Slice { src, offset } => {
                    if let Some(acc) = self.slot(&mut grads, *src) {
                        let n = g.len();
                        let mut dst = acc.slice_mut(s![0, *offset..*offset + n]);
                        for (d, x) in dst.iter_mut().zip(g.iter()) {
                            *d += x;
                        }
                    }
                }
                Op::Opaque(inputs) => {
                    return Err(Error::Contract(format!(
                        "node {i} (over {} inputs) is not a supported differentiable primitive",
                        inputs.len()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Zero-initialised gradient buffer for `v`, if `v` is trainable.
    fn slot<'g>(&self, grads: &'g mut [Option<Array2<f64>>], v: Var) -> Option<&'g mut Array2<f64>> {
        if !self.requires_grad(v) {
            return None;
        }
        let dim = self.value(v).dim();
        Some(grads[v.0].get_or_insert_with(|| Array2::zeros(dim)))
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &d,
            slot @ None => *slot = Some(d),
        }
    }
}
