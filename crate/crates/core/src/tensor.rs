//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! Tensors are immutable values (cheap to clone, safe to share across
//! threads). A [`Tape`] records primitive operations during a forward pass
//! and replays them backward to produce gradients for every leaf that
//! participated; leaves that did not participate get exact zeros.
//!
//! Shape mismatches are programmer errors and panic with a descriptive
//! message. Data-dependent failures elsewhere in the crate use `Result`.

use std::sync::Arc;

pub const LOG_EPS: f64 = 1e-12;

/// Immutable dense tensor, row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "tensor with shape {:?} contains a non-finite entry",
            shape
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![1.0; n])
    }

    /// Stacks equal-length rows into a `[rows.len(), width]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "expected scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected matrix, got shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected matrix, got shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    /// Returns the rows selected by `idx` as a new matrix (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), w], data)
    }

    fn same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape, other.shape,
            "{}: shape mismatch {:?} vs {:?}",
            op, self.shape, other.shape
        );
    }
}

// ── Pure (untraced) operations ───────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul: inner dimensions {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.same_shape(b, "add");
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    a.same_shape(b, "sub");
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    a.same_shape(b, "mul");
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::new(a.shape.clone(), a.data.iter().map(|x| x * s).collect())
}

/// Adds a `[n]` bias to every row of a `[batch, n]` matrix.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.cols();
    assert_eq!(bias.shape(), [n], "add_bias: bias shape {:?} vs width {}", bias.shape(), n);
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        for c in 0..n {
            data.push(x.at(r, c) + bias.data[c]);
        }
    }
    Tensor::new(x.shape.clone(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape.clone(), x.data.iter().map(|v| v.max(0.0)).collect())
}

pub fn tanh(x: &Tensor) -> Tensor {
    Tensor::new(x.shape.clone(), x.data.iter().map(|v| v.tanh()).collect())
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (b, c) = (logits.rows(), logits.cols());
    assert!(c >= 2, "softmax: need at least 2 classes, got {}", c);
    let mut data = Vec::with_capacity(b * c);
    for r in 0..b {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), data)
}

/// Sums each row of a `[batch, c]` matrix into a `[batch]` vector.
pub fn sum_rows(x: &Tensor) -> Tensor {
    let rows = x.rows();
    let data = (0..rows).map(|r| x.row(r).iter().sum()).collect();
    Tensor::new(vec![rows], data)
}

pub fn mean_all(x: &Tensor) -> Tensor {
    assert!(!x.is_empty(), "mean_all: empty tensor");
    Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64)
}

// ── Gradient tape ────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// Differentiable leaf: gradients are collected here.
    Leaf,
    /// Non-differentiable leaf: gradients never flow into it.
    Constant,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    /// ln(x + LOG_EPS)
    LogEps(Var),
    /// |x| with subgradient 0 at exactly 0.
    Abs(Var),
    SumRows(Var),
    MeanAll(Var),
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    /// False when no differentiable leaf can be reached from this node.
    needs_grad: bool,
}

/// Records primitive operations in topological order for reverse replay.
///
/// A tape is confined to a single thread for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant (inputs, frozen values). Gradients pass through
    /// ops applied to it but are never collected for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor, input: Var, op: Op) -> Var {
        let ng = self.nodes[input.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, value: Tensor, a: Var, b: Var, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.binary(value, a, b, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = add(self.value(a), self.value(b));
        self.binary(value, a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = sub(self.value(a), self.value(b));
        self.binary(value, a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = mul(self.value(a), self.value(b));
        self.binary(value, a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = scale(self.value(a), s);
        self.unary(value, a, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = scale(self.value(a), -1.0);
        self.unary(value, a, Op::Neg(a))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let value = add_bias(self.value(x), self.value(bias));
        self.binary(value, x, bias, Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu(self.value(x));
        self.unary(value, x, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = tanh(self.value(x));
        self.unary(value, x, Op::Tanh(x))
    }

    pub fn softmax(&mut self, logits: Var) -> Var {
        let value = softmax(self.value(logits));
        self.unary(value, logits, Op::Softmax(logits))
    }

    pub fn log_eps(&mut self, x: Var) -> Var {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| (v + LOG_EPS).ln()).collect(),
        );
        self.unary(value, x, Op::LogEps(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v.abs()).collect(),
        );
        self.unary(value, x, Op::Abs(x))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let value = sum_rows(self.value(x));
        self.unary(value, x, Op::SumRows(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = mean_all(self.value(x));
        self.unary(value, x, Op::MeanAll(x))
    }

    /// Identity forward; blocks gradient flow backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Reverse pass from a scalar objective. Returns `∂objective/∂p` for
    /// each requested leaf; a leaf that did not participate gets zeros.
    pub fn grad(&mut self, objective: Var, params: &[Var]) -> Vec<Tensor> {
        assert!(
            self.value(objective).is_scalar(),
            "grad: objective must be scalar, got shape {:?}",
            self.value(objective).shape()
        );
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[objective.0] = Some(vec![1.0]);

        for i in (0..=objective.0).rev() {
            let adj = match adjoint[i].take() {
                Some(a) => a,
                None => continue,
            };
            match self.nodes[i].op {
                // Keep the leaf's adjoint for collection below.
                Op::Leaf => adjoint[i] = Some(adj),
                Op::Constant | Op::StopGrad => {}
                // Nothing differentiable below this node.
                _ if !self.nodes[i].needs_grad => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    // dA = adj @ B^T
                    let mut da = vec![0.0; m * k];
                    let bdat = self.nodes[b.0].value.data();
                    for r in 0..m {
                        for c in 0..n {
                            let g = adj[r * n + c];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[r * k + p] += g * bdat[p * n + c];
                            }
                        }
                    }
                    // dB = A^T @ adj
                    let mut db = vec![0.0; k * n];
                    let adat = self.nodes[a.0].value.data();
                    for r in 0..m {
                        for p in 0..k {
                            let av = adat[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                db[p * n + c] += av * adj[r * n + c];
                            }
                        }
                    }
                    self.accumulate(&mut adjoint, a, da);
                    self.accumulate(&mut adjoint, b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, adj.clone());
                    self.accumulate(&mut adjoint, b, adj);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, adj.clone());
                    self.accumulate(&mut adjoint, b, adj.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = adj
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = adj
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(&mut adjoint, a, da);
                    self.accumulate(&mut adjoint, b, db);
                }
                Op::Scale(a, s) => {
                    self.accumulate(&mut adjoint, a, adj.iter().map(|v| v * s).collect());
                }
                Op::Neg(a) => {
                    self.accumulate(&mut adjoint, a, adj.iter().map(|v| -v).collect());
                }
                Op::AddBias(x, bias) => {
                    let n = self.nodes[bias.0].value.len();
                    let mut dbias = vec![0.0; n];
                    for (j, g) in adj.iter().enumerate() {
                        dbias[j % n] += g;
                    }
                    self.accumulate(&mut adjoint, x, adj);
                    self.accumulate(&mut adjoint, bias, dbias);
                }
                Op::Relu(x) => {
                    let dx: Vec<f64> = adj
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adjoint, x, dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = adj
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(&mut adjoint, x, dx);
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[i].value;
                    let (b, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; b * c];
                    for r in 0..b {
                        let yrow = y.row(r);
                        let grow = &adj[r * c..(r + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            dx[r * c + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(&mut adjoint, x, dx);
                }
                Op::LogEps(x) => {
                    let dx: Vec<f64> = adj
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, v)| g / (v + LOG_EPS))
                        .collect();
                    self.accumulate(&mut adjoint, x, dx);
                }
                Op::Abs(x) => {
                    let dx: Vec<f64> = adj
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, v)| g * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adjoint, x, dx);
                }
                Op::SumRows(x) => {
                    let w = self.nodes[x.0].value.cols();
                    let mut dx = Vec::with_capacity(adj.len() * w);
                    for g in &adj {
                        dx.extend(std::iter::repeat(*g).take(w));
                    }
                    self.accumulate(&mut adjoint, x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].value.len();
                    let g = adj[0] / n as f64;
                    self.accumulate(&mut adjoint, x, vec![g; n]);
                }
            }
        }

        params
            .iter()
            .map(|p| {
                let shape = self.nodes[p.0].value.shape().to_vec();
                match &adjoint[p.0] {
                    Some(a) => Tensor::new(shape, a.clone()),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }

    fn accumulate(&self, adjoint: &mut [Option<Vec<f64>>], v: Var, grad: Vec<f64>) {
        if !self.nodes[v.0].needs_grad && !matches!(self.nodes[v.0].op, Op::Leaf) {
            return;
        }
        match &mut adjoint[v.0] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            slot => *slot = Some(grad),
        }
    }
}
