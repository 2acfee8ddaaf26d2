//! Reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Tape`] records every operation applied during a forward pass into an
//! append-only node list (inputs always precede their consumers), then
//! [`Tape::backward`] walks the list once in reverse, accumulating adjoints.
//! Values are stored as `f32`; dot products and adjoint accumulation run in
//! `f64` so analytic gradients stay well inside the finite-difference
//! tolerances used to check them.
//!
//! A tape created with [`Tape::inference`] executes the same arithmetic
//! without recording, so forward results are bitwise identical with and
//! without gradient tracking.

use std::collections::HashMap;

use crate::tensor::{NodeId, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    /// Parameter or interned constant.
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul { a: NodeId, b: NodeId },
    /// Row-broadcast add: `[r,n] + [n] -> [r,n]`
    AddBias { x: NodeId, bias: NodeId },
    /// Elementwise add of equal shapes.
    Add { a: NodeId, b: NodeId },
    /// Multiply by a compile-time constant.
    Scale { x: NodeId, factor: f32 },
    Relu { x: NodeId },
    /// Same data, new shape.
    Reshape { x: NodeId },
    /// Per-row `-log softmax(logits)[label]`: `[rows,classes] -> [rows]`
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Mean over all elements -> scalar.
    Mean { x: NodeId },
    /// Sum over all elements -> scalar.
    Sum { x: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
}

/// Gradients of a scalar loss with respect to the tape's named parameters,
/// in parameter registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Wengert list for one forward-backward step.
pub struct Tape {
    recording: bool,
    nodes: Vec<Node>,
    // name -> node, in registration order
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    /// A pass-through tape: ops compute values, nothing is recorded.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes (leaves included).
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Register a named parameter. Registering the same name twice returns
    /// the node created the first time.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Tensor {
        if !self.recording {
            return value.detached();
        }
        let id = match self.param_index.get(name) {
            Some(&id) => id,
            None => {
                let id = self.push(Op::Leaf, value.shape().to_vec(), value.data().to_vec());
                self.params.push((name.to_string(), id));
                self.param_index.insert(name.to_string(), id);
                id
            }
        };
        let mut t = value.detached();
        t.grad_id = Some(id);
        t
    }

    /// Intern a constant leaf (no gradient is reported for it).
    pub fn constant(&mut self, value: &Tensor) -> Tensor {
        if !self.recording {
            return value.detached();
        }
        let id = self.push(Op::Leaf, value.shape().to_vec(), value.data().to_vec());
        let mut t = value.detached();
        t.grad_id = Some(id);
        t
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, value });
        id
    }

    /// Node id of `t`, interning it as a constant leaf if it has none.
    fn operand(&mut self, t: &Tensor) -> NodeId {
        match t.grad_id {
            Some(id) => {
                assert!(id < self.nodes.len(), "tensor from a different tape");
                id
            }
            None => self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec()),
        }
    }

    fn output(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>) -> Tensor {
        if self.recording {
            let id = self.push(op, shape.clone(), value.clone());
            let mut t = Tensor::new(shape, value).expect("op outputs are shape-consistent");
            t.grad_id = Some(id);
            t
        } else {
            Tensor::new(shape, value).expect("op outputs are shape-consistent")
        }
    }

    // ── Ops ──────────────────────────────────────────────────────────

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = matmul_f32(a.data(), b.data(), m, k, n);
        let (ia, ib) = if self.recording {
            (self.operand(a), self.operand(b))
        } else {
            (0, 0)
        };
        Ok(self.output(Op::Matmul { a: ia, b: ib }, vec![m, n], value))
    }

    /// Broadcast a bias row over `[r,n]`.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (r, n) = x.dims2("add_bias")?;
        if bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut value = Vec::with_capacity(r * n);
        for row in 0..r {
            for col in 0..n {
                value.push(x.data()[row * n + col] + bias.data()[col]);
            }
        }
        let (ix, ib) = if self.recording {
            (self.operand(x), self.operand(bias))
        } else {
            (0, 0)
        };
        Ok(self.output(Op::AddBias { x: ix, bias: ib }, vec![r, n], value))
    }

    /// Elementwise add of identically shaped tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x + y)
            .collect();
        let (ia, ib) = if self.recording {
            (self.operand(a), self.operand(b))
        } else {
            (0, 0)
        };
        Ok(self.output(Op::Add { a: ia, b: ib }, a.shape().to_vec(), value))
    }

    /// Multiply every element by `factor`.
    pub fn scale(&mut self, x: &Tensor, factor: f32) -> Tensor {
        let value = x.data().iter().map(|v| v * factor).collect();
        let ix = if self.recording { self.operand(x) } else { 0 };
        self.output(Op::Scale { x: ix, factor }, x.shape().to_vec(), value)
    }

    /// Elementwise `max(0, x)`. The gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let value = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ix = if self.recording { self.operand(x) } else { 0 };
        self.output(Op::Relu { x: ix }, x.shape().to_vec(), value)
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let count: usize = shape.iter().product();
        if count != x.len() {
            return Err(TensorError::ReshapeCount {
                from: x.shape().to_vec(),
                to: shape,
            });
        }
        let ix = if self.recording { self.operand(x) } else { 0 };
        Ok(self.output(Op::Reshape { x: ix }, shape, x.data().to_vec()))
    }

    /// Row-major flatten to rank 1.
    pub fn flatten(&mut self, x: &Tensor) -> Tensor {
        let n = x.len();
        self.reshape(x, vec![n]).expect("flatten preserves count")
    }

    /// Stabilized `-log softmax(logits)[label]` for a single sample.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor,
        label: usize,
    ) -> Result<Tensor, TensorError> {
        let n_classes = match logits.shape() {
            [n] => *n,
            _ => {
                return Err(TensorError::BadRank {
                    op: "softmax_cross_entropy",
                    expected: "a rank-1 logits tensor",
                    actual: logits.shape().to_vec(),
                })
            }
        };
        let as_row = self.reshape(logits, vec![1, n_classes])?;
        let per_row = self.softmax_cross_entropy_batch(&as_row, &[label])?;
        self.reshape(&per_row, vec![])
    }

    /// Per-row stabilized cross-entropy: `[rows,classes] -> [rows]`.
    pub fn softmax_cross_entropy_batch(
        &mut self,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<Tensor, TensorError> {
        let (rows, classes) = logits.dims2("softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &label in labels {
            if label >= classes {
                return Err(TensorError::LabelOutOfRange {
                    label,
                    n_classes: classes,
                });
            }
        }
        let mut value = Vec::with_capacity(rows);
        for (row, &label) in labels.iter().enumerate() {
            let z = &logits.data()[row * classes..(row + 1) * classes];
            value.push(cross_entropy_row(z, label));
        }
        let il = if self.recording {
            self.operand(logits)
        } else {
            0
        };
        Ok(self.output(
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
            vec![rows],
            value,
        ))
    }

    /// Mean of all elements -> scalar.
    pub fn mean(&mut self, x: &Tensor) -> Tensor {
        let n = x.len().max(1) as f64;
        let sum: f64 = x.data().iter().map(|&v| f64::from(v)).sum();
        let ix = if self.recording { self.operand(x) } else { 0 };
        self.output(Op::Mean { x: ix }, vec![], vec![(sum / n) as f32])
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let sum: f64 = x.data().iter().map(|&v| f64::from(v)).sum();
        let ix = if self.recording { self.operand(x) } else { 0 };
        self.output(Op::Sum { x: ix }, vec![], vec![sum as f32])
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters with no path to the loss get zero gradients.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients, TensorError> {
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let loss_id = loss.grad_id.ok_or(TensorError::NotOnTape)?;
        if loss_id >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let d_out = match adjoint[id].take() {
                Some(d) => d,
                None => continue,
            };
            // Re-store: a node may also be read again as a leaf below.
            adjoint[id] = Some(d_out.clone());
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = dims2(&self.nodes[a].shape);
                    let n = self.nodes[b].shape[1];
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    // dA[i,p] += sum_j d_out[i,j] * B[p,j]
                    let mut da = vec![0.0f64; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = d_out[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += d * f64::from(bv[p * n + j]);
                            }
                        }
                    }
                    accumulate(&mut adjoint, a, &da);
                    // dB[p,j] += sum_i A[i,p] * d_out[i,j]
                    let mut db = vec![0.0f64; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aval = f64::from(av[i * k + p]);
                            if aval == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aval * d_out[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut adjoint, b, &db);
                }
                Op::AddBias { x, bias } => {
                    accumulate(&mut adjoint, x, &d_out);
                    let (r, n) = dims2(&self.nodes[x].shape);
                    let mut dbias = vec![0.0f64; n];
                    for row in 0..r {
                        for col in 0..n {
                            dbias[col] += d_out[row * n + col];
                        }
                    }
                    accumulate(&mut adjoint, bias, &dbias);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoint, a, &d_out);
                    accumulate(&mut adjoint, b, &d_out);
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = d_out.iter().map(|d| d * f64::from(factor)).collect();
                    accumulate(&mut adjoint, x, &dx);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x].value;
                    let dx: Vec<f64> = d_out
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut adjoint, x, &dx);
                }
                Op::Reshape { x } => {
                    accumulate(&mut adjoint, x, &d_out);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let classes = self.nodes[logits].shape[1];
                    let lv = &self.nodes[logits].value;
                    let mut dl = vec![0.0f64; lv.len()];
                    for (row, &label) in labels.iter().enumerate() {
                        let d = d_out[row];
                        if d == 0.0 {
                            continue;
                        }
                        let z = &lv[row * classes..(row + 1) * classes];
                        let probs = softmax_f64(z);
                        for (col, &p) in probs.iter().enumerate() {
                            let indicator = if col == label { 1.0 } else { 0.0 };
                            dl[row * classes + col] += d * (p - indicator);
                        }
                    }
                    accumulate(&mut adjoint, logits, &dl);
                }
                Op::Mean { x } => {
                    let n = self.nodes[x].value.len().max(1) as f64;
                    let d = d_out[0] / n;
                    let dx = vec![d; self.nodes[x].value.len()];
                    accumulate(&mut adjoint, x, &dx);
                }
                Op::Sum { x } => {
                    let dx = vec![d_out[0]; self.nodes[x].value.len()];
                    accumulate(&mut adjoint, x, &dx);
                }
            }
        }

        let mut entries = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (name, id) in &self.params {
            let shape = self.nodes[*id].shape.clone();
            let grad = match &adjoint[*id] {
                Some(d) => d.iter().map(|&v| v as f32).collect(),
                None => vec![0.0f32; self.nodes[*id].value.len()],
            };
            index.insert(name.clone(), entries.len());
            entries.push((
                name.clone(),
                Tensor::new(shape, grad).expect("gradient matches parameter shape"),
            ));
        }
        Ok(Gradients { entries, index })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn accumulate(adjoint: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut adjoint[id] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => adjoint[id] = Some(delta.to_vec()),
    }
}

/// Row-major `[m,k] x [k,n]` with f64 accumulation.
pub(crate) fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let row_acc = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let aval = f64::from(a[i * k + p]);
            if aval == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (dst, &bv) in row_acc.iter_mut().zip(brow) {
                *dst += aval * f64::from(bv);
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

fn softmax_f64(z: &[f32]) -> Vec<f64> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = z.iter().map(|&v| f64::from(v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Stabilized `-log softmax(z)[label]` in f64, rounded to f32.
fn cross_entropy_row(z: &[f32], label: usize) -> f32 {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = z.iter().map(|&v| f64::from(v - max).exp()).sum();
    (sum.ln() - f64::from(z[label] - max)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_grad;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::inference();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let out = tape.matmul(&eye, &b).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::inference();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::seed_from_u64(42);
        let a_data: Vec<f32> = (0..12).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        let b_data: Vec<f32> = (0..6).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        let (m, k, n) = (4, 3, 2);

        // Independent brute-force oracle.
        let mut expected = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += f64::from(a_data[i * k + p]) * f64::from(b_data[p * n + j]);
                }
                expected[i * n + j] = acc as f32;
            }
        }

        let mut tape = Tape::inference();
        let out = tape
            .matmul(&t(&[m, k], &a_data), &t(&[k, n], &b_data))
            .unwrap();
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::inference();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn relu_forward_cases() {
        let mut tape = Tape::inference();
        let out = tape.relu(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let positive = t(&[3], &[0.5, 1.0, 7.0]);
        let out = tape.relu(&positive);
        assert_eq!(out.data(), positive.data());
    }

    #[test]
    fn relu_gradient_is_step() {
        let mut tape = Tape::new();
        let x = tape.param("x", &t(&[2], &[-1.0, 3.0]));
        let r = tape.relu(&x);
        let loss = tape.sum(&r);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0]);

        // Finite differences on the f64 reference agree away from the kink.
        let fd = finite_difference_grad(
            |p| p.iter().map(|&v| v.max(0.0)).sum(),
            &[-1.0, 3.0],
            1e-3,
        );
        assert!(fd[0] == 0.0 && (fd[1] - 1.0).abs() < 1e-9, "fd = {fd:?}");
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param("x", &t(&[1], &[0.0]));
        let r = tape.relu(&x);
        let loss = tape.sum(&r);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::inference();
        let loss = tape
            .softmax_cross_entropy(&t(&[4], &[0.0; 4]), 2)
            .unwrap();
        assert!((f64::from(loss.item()) - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_is_overflow_safe() {
        let mut tape = Tape::inference();
        let loss = tape
            .softmax_cross_entropy(&t(&[2], &[1000.0, 0.0]), 0)
            .unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        for _ in 0..100 {
            let logits: Vec<f32> = (0..5).map(|_| rng.uniform_f32(-4.0, 4.0)).collect();
            let label = rng.below(5) as usize;
            // Direct formula oracle in f64.
            let sum: f64 = logits.iter().map(|&z| f64::from(z).exp()).sum();
            let expected = -(f64::from(logits[label]).exp() / sum).ln();

            let mut tape = Tape::inference();
            let loss = tape
                .softmax_cross_entropy(&t(&[5], &logits), label)
                .unwrap();
            assert!(
                (f64::from(loss.item()) - expected).abs() < 1e-6,
                "got {} expected {expected}",
                loss.item()
            );
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::inference();
        let err = tape.softmax_cross_entropy(&t(&[3], &[0.0; 3]), 3).unwrap_err();
        assert!(matches!(err, TensorError::LabelOutOfRange { label: 3, n_classes: 3 }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param("p", &t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, -0.25, 0.125]));
        let loss = tape.sum(&p);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_via_matmul() {
        let mut tape = Tape::new();
        let p = tape.param("p", &t(&[1, 1], &[3.0]));
        let sq = tape.matmul(&p, &p).unwrap();
        let loss = tape.reshape(&sq, vec![]).unwrap();
        assert_eq!(loss.item(), 9.0);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param("p", &t(&[2], &[1.0, 2.0]));
        let doubled = tape.scale(&p, 2.0);
        let err = tape.backward(&doubled).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param("used", &t(&[1], &[2.0]));
        let _unused = tape.param("unused", &t(&[3], &[1.0, 1.0, 1.0]));
        let loss = tape.sum(&used);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("used").unwrap().data(), &[1.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = sum(p + p) => d/dp = 2
        let mut tape = Tape::new();
        let p = tape.param("p", &t(&[2], &[1.0, 4.0]));
        let doubled = tape.add(&p, &p).unwrap();
        let loss = tape.sum(&doubled);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        // loss(p) for a 3 -> 4 -> 2 network with relu and cross-entropy.
        let mut rng = crate::rng::Rng::seed_from_u64(17);
        let w1: Vec<f32> = (0..12).map(|_| rng.uniform_f32(-0.8, 0.8)).collect();
        let b1: Vec<f32> = (0..4).map(|_| rng.uniform_f32(-0.3, 0.3)).collect();
        let w2: Vec<f32> = (0..8).map(|_| rng.uniform_f32(-0.8, 0.8)).collect();
        let b2: Vec<f32> = (0..2).map(|_| rng.uniform_f32(-0.3, 0.3)).collect();
        let x = t(&[1, 3], &[0.3, -0.7, 0.9]);

        let run = |w1: &[f32], b1: &[f32], w2: &[f32], b2: &[f32], tape: &mut Tape| {
            let w1 = tape.param("w1", &t(&[3, 4], w1));
            let b1 = tape.param("b1", &t(&[4], b1));
            let w2 = tape.param("w2", &t(&[4, 2], w2));
            let b2 = tape.param("b2", &t(&[2], b2));
            let h = tape.matmul(&x, &w1).unwrap();
            let h = tape.add_bias(&h, &b1).unwrap();
            let h = tape.relu(&h);
            let z = tape.matmul(&h, &w2).unwrap();
            let z = tape.add_bias(&z, &b2).unwrap();
            let per = tape.softmax_cross_entropy_batch(&z, &[1]).unwrap();
            tape.mean(&per)
        };

        let mut tape = Tape::new();
        let loss = run(&w1, &b1, &w2, &b2, &mut tape);
        let grads = tape.backward(&loss).unwrap();

        // Independent f64 re-implementation of the same loss.
        let x64: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        let reference = |p: &[f64]| -> f64 {
            let (w1, rest) = p.split_at(12);
            let (b1, rest) = rest.split_at(4);
            let (w2, b2) = rest.split_at(8);
            let mut hidden = [0.0f64; 4];
            for (o, slot) in hidden.iter_mut().enumerate() {
                let mut acc = b1[o];
                for (i, &xv) in x64.iter().enumerate() {
                    acc += xv * w1[i * 4 + o];
                }
                *slot = acc.max(0.0);
            }
            let mut logits = [0.0f64; 2];
            for (o, slot) in logits.iter_mut().enumerate() {
                let mut acc = b2[o];
                for (i, &h) in hidden.iter().enumerate() {
                    acc += h * w2[i * 2 + o];
                }
                *slot = acc;
            }
            let max = logits[0].max(logits[1]);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            sum.ln() - (logits[1] - max)
        };

        let packed: Vec<f64> = w1
            .iter()
            .chain(&b1)
            .chain(&w2)
            .chain(&b2)
            .map(|&v| f64::from(v))
            .collect();
        let fd = finite_difference_grad(reference, &packed, 1e-3);

        let analytic: Vec<f32> = ["w1", "b1", "w2", "b2"]
            .iter()
            .flat_map(|name| grads.get(name).unwrap().data().to_vec())
            .collect();
        for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
            let a = f64::from(a);
            if f.abs() > 1e-3 {
                assert!(
                    ((a - f) / f).abs() < 1e-4,
                    "coord {i}: analytic {a} vs fd {f}"
                );
            } else {
                assert!((a - f).abs() < 1e-6, "coord {i}: analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn forward_identical_with_and_without_recording() {
        let mut rng = crate::rng::Rng::seed_from_u64(23);
        let w: Vec<f32> = (0..20).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        let x: Vec<f32> = (0..8).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();

        let run = |tape: &mut Tape| {
            let w = tape.param("w", &t(&[4, 5], &w));
            let x = t(&[2, 4], &x);
            let h = tape.matmul(&x, &w).unwrap();
            let h = tape.relu(&h);
            let per = tape.softmax_cross_entropy_batch(&h, &[0, 3]).unwrap();
            let m = tape.mean(&per);
            (h.data().to_vec(), m.item())
        };

        let (h_rec, l_rec) = run(&mut Tape::new());
        let (h_inf, l_inf) = run(&mut Tape::inference());
        assert_eq!(h_rec, h_inf);
        assert_eq!(l_rec.to_bits(), l_inf.to_bits());
    }

    #[test]
    fn op_count_ignores_leaves() {
        let mut tape = Tape::new();
        let a = tape.param("a", &t(&[1, 1], &[1.0]));
        let b = tape.param("b", &t(&[1, 1], &[2.0]));
        let c = tape.matmul(&a, &b).unwrap();
        let _ = tape.sum(&c);
        assert_eq!(tape.op_count(), 2);
        assert_eq!(tape.node_count(), 4);
    }
}
