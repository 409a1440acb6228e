//! Recorded-tape reverse-mode differentiation over the fixed operation set
//! of the training pipeline: matrix products, the two attention scores,
//! softmax rows, LeakyReLU/ReLU/sigmoid, exponential affinity, the pooling
//! statistics, L2 normalization, and cross-entropy.
//!
//! Values are computed eagerly as operations are recorded; `backward` then
//! walks the tape once in reverse. Leaves are either parameters (gradients
//! accumulate) or constants (gradient flow stops, so frozen tensors such as
//! the one-hot values, the classifier rows, and the input patches never
//! receive one).

use crate::error::{Error, Result};
use crate::graphattn::{leaky_relu, sigmoid};
use crate::mat::Mat;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    /// A (r x k) * B (k x c)
    MatMul { a: NodeId, b: NodeId },
    /// A (r x k) * B^T, B is (c x k)
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    MulElem { a: NodeId, b: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    /// Concatenation attention: E[p][q] = a_self . g_p + a_neigh . g_q
    PairScores { g: NodeId, a_vec: NodeId },
    SoftmaxRows { a: NodeId },
    /// y = exp(mul * x + add)
    ExpAffine { a: NodeId, mul: f64 },
    ColMean { a: NodeId },
    ColMax { a: NodeId, arg_rows: Vec<usize> },
    ColMin { a: NodeId, arg_rows: Vec<usize> },
    ColStd { a: NodeId },
    /// y = s * x where s is a 1x1 node
    ScaleByScalar { a: NodeId, s: NodeId },
    L2Normalize { a: NodeId, norm: f64 },
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    grad: Mat,
    op: Op,
}

/// Forward recording plus one reverse pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        let grad = Mat::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].grad
    }

    /// Parameter leaf: gradients accumulate here.
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Constant leaf: no gradient is accumulated.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(Error::dim(
                "tape.matmul",
                format!("{}x{} * {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = va.matmul(vb);
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(Error::dim(
                "tape.matmul_nt",
                format!("{}x{} * ({}x{})^T", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = va.matmul_nt(vb);
        Ok(self.push(value, Op::MatMulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::dim(
                "tape.add",
                format!("{}x{} + {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = va.add(vb);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(factor);
        self.push(value, Op::Scale { a, factor })
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::dim(
                "tape.mul_elem",
                format!("{}x{} . {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = va.mul_elem(vb);
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(value, Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| leaky_relu(x, slope));
        self.push(value, Op::LeakyRelu { a, slope })
    }

    /// E[p][q] = a_self . g_p + a_neigh . g_q, with `a_vec` a 1 x 2*d row.
    pub fn pair_scores(&mut self, g: NodeId, a_vec: NodeId) -> Result<NodeId> {
        let (vg, va) = (&self.nodes[g.0].value, &self.nodes[a_vec.0].value);
        let d = vg.cols();
        if va.rows() != 1 || va.cols() != 2 * d {
            return Err(Error::dim(
                "tape.pair_scores",
                format!("attention vector is {}x{}, expected 1x{}", va.rows(), va.cols(), 2 * d),
            ));
        }
        let p = vg.rows();
        let (a_self, a_neigh) = va.data().split_at(d);
        let dot = |row: &[f64], a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        let u: Vec<f64> = (0..p).map(|i| dot(vg.row(i), a_self)).collect();
        let v: Vec<f64> = (0..p).map(|i| dot(vg.row(i), a_neigh)).collect();
        let mut value = Mat::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                value[(i, j)] = u[i] + v[j];
            }
        }
        Ok(self.push(value, Op::PairScores { g, a_vec }))
    }

    /// Row softmax with max-shifted exponentials.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut value = Mat::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let row = va.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = value.row_mut(i);
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(value, Op::SoftmaxRows { a })
    }

    /// y = exp(mul * x + add), elementwise.
    pub fn exp_affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| (mul * x + add).exp());
        self.push(value, Op::ExpAffine { a, mul })
    }

    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let value = crate::pooling::aggregate(crate::pooling::Aggregator::Mean, &self.nodes[a.0].value)?;
        Ok(self.push(value, Op::ColMean { a }))
    }

    pub fn col_max(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let value = crate::pooling::aggregate(crate::pooling::Aggregator::Max, va)?;
        let arg_rows = arg_rows_of(va, &value);
        Ok(self.push(value, Op::ColMax { a, arg_rows }))
    }

    pub fn col_min(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let value = crate::pooling::aggregate(crate::pooling::Aggregator::Min, va)?;
        let arg_rows = arg_rows_of(va, &value);
        Ok(self.push(value, Op::ColMin { a, arg_rows }))
    }

    pub fn col_std(&mut self, a: NodeId) -> Result<NodeId> {
        let value = crate::pooling::aggregate(crate::pooling::Aggregator::Std, &self.nodes[a.0].value)?;
        Ok(self.push(value, Op::ColStd { a }))
    }

    /// y = s * x with a learnable 1x1 scalar node.
    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = &self.nodes[s.0].value;
        if vs.rows() != 1 || vs.cols() != 1 {
            return Err(Error::dim(
                "tape.scale_by_scalar",
                format!("scalar node is {}x{}", vs.rows(), vs.cols()),
            ));
        }
        let c = vs[(0, 0)];
        let value = self.nodes[a.0].value.scale(c);
        Ok(self.push(value, Op::ScaleByScalar { a, s }))
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let norm = va.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= crate::embank::EPS_NORM {
            return Err(Error::ZeroVector {
                norm,
                eps: crate::embank::EPS_NORM,
            });
        }
        let value = va.scale(1.0 / norm);
        Ok(self.push(value, Op::L2Normalize { a, norm }))
    }

    /// Stable `-log softmax(logits)[label]` of a 1 x N logits row.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = &self.nodes[logits.0].value;
        if v.rows() != 1 {
            return Err(Error::dim(
                "tape.cross_entropy",
                format!("logits must be a row vector, got {}x{}", v.rows(), v.cols()),
            ));
        }
        if label >= v.cols() {
            return Err(Error::LabelOutOfRange {
                offset: 0,
                label: label as u32,
                classes: v.cols() as u32,
            });
        }
        let row = v.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        let loss = log_sum - row[label];
        let probs: Vec<f64> = row.iter().map(|&x| (x - log_sum).exp()).collect();
        Ok(self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar node, seeding its gradient with 1.
    pub fn backward(&mut self, from: NodeId) -> Result<()> {
        if self.nodes.is_empty() || from.0 >= self.nodes.len() {
            return Err(Error::GraphNotRecorded);
        }
        if self.nodes[from.0].value.len() != 1 {
            return Err(Error::dim(
                "tape.backward",
                "backward must start from a scalar node".into(),
            ));
        }
        self.nodes[from.0].grad.fill(0.0);
        self.nodes[from.0].grad[(0, 0)] = 1.0;

        for idx in (0..=from.0).rev() {
            let grad = self.nodes[idx].grad.clone();
            if grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            // split borrow: read op metadata first
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul_nt(&self.nodes[b.0].value);
                    let db = self.nodes[a.0].value.matmul_tn(&grad);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatMulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul(&self.nodes[b.0].value);
                    let db = grad.matmul_tn(&self.nodes[a.0].value);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Scale { a, factor } => {
                    let (a, factor) = (*a, *factor);
                    self.accumulate(a, grad.scale(factor));
                }
                Op::MulElem { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.mul_elem(&self.nodes[b.0].value);
                    let db = grad.mul_elem(&self.nodes[a.0].value);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let da = Mat::from_vec(
                        y.rows(),
                        y.cols(),
                        y.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&y, &g)| g * y * (1.0 - y))
                            .collect(),
                    );
                    self.accumulate(a, da);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let da = Mat::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                    );
                    self.accumulate(a, da);
                }
                Op::LeakyRelu { a, slope } => {
                    let (a, slope) = (*a, *slope);
                    let x = &self.nodes[a.0].value;
                    let da = Mat::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
                            .collect(),
                    );
                    self.accumulate(a, da);
                }
                Op::PairScores { g, a_vec } => {
                    let (gid, aid) = (*g, *a_vec);
                    let gv = self.nodes[gid.0].value.clone();
                    let av = self.nodes[aid.0].value.clone();
                    let p = gv.rows();
                    let d = gv.cols();
                    let (a_self, a_neigh) = av.data().split_at(d);
                    let mut row_sums = vec![0.0; p];
                    let mut col_sums = vec![0.0; p];
                    for i in 0..p {
                        for j in 0..p {
                            let g_ij = grad[(i, j)];
                            row_sums[i] += g_ij;
                            col_sums[j] += g_ij;
                        }
                    }
                    let mut dg = Mat::zeros(p, d);
                    let mut da = Mat::zeros(1, 2 * d);
                    for i in 0..p {
                        for k in 0..d {
                            dg[(i, k)] = row_sums[i] * a_self[k] + col_sums[i] * a_neigh[k];
                            da[(0, k)] += row_sums[i] * gv[(i, k)];
                            da[(0, d + k)] += col_sums[i] * gv[(i, k)];
                        }
                    }
                    self.accumulate(gid, dg);
                    self.accumulate(aid, da);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = y
                            .row(i)
                            .iter()
                            .zip(grad.row(i))
                            .map(|(&y, &g)| y * g)
                            .sum();
                        for j in 0..y.cols() {
                            da[(i, j)] = y[(i, j)] * (grad[(i, j)] - dot);
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::ExpAffine { a, mul } => {
                    let (a, mul) = (*a, *mul);
                    let y = &self.nodes[idx].value;
                    let da = Mat::from_vec(
                        y.rows(),
                        y.cols(),
                        y.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&y, &g)| g * y * mul)
                            .collect(),
                    );
                    self.accumulate(a, da);
                }
                Op::ColMean { a } => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let p = x.rows() as f64;
                    let mut da = Mat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        for j in 0..x.cols() {
                            da[(i, j)] = grad[(0, j)] / p;
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::ColMax { a, arg_rows } | Op::ColMin { a, arg_rows } => {
                    let a = *a;
                    let arg_rows = arg_rows.clone();
                    let x = &self.nodes[a.0].value;
                    let mut da = Mat::zeros(x.rows(), x.cols());
                    for (j, &row) in arg_rows.iter().enumerate() {
                        da[(row, j)] = grad[(0, j)];
                    }
                    self.accumulate(a, da);
                }
                Op::ColStd { a } => {
                    let a = *a;
                    let x = self.nodes[a.0].value.clone();
                    let y = &self.nodes[idx].value;
                    let p = x.rows() as f64;
                    let mut da = Mat::zeros(x.rows(), x.cols());
                    for j in 0..x.cols() {
                        let std = y[(0, j)];
                        if std == 0.0 {
                            continue; // subgradient 0 at the kink
                        }
                        let mean: f64 = (0..x.rows()).map(|i| x[(i, j)]).sum::<f64>() / p;
                        for i in 0..x.rows() {
                            da[(i, j)] = grad[(0, j)] * (x[(i, j)] - mean) / (p * std);
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::ScaleByScalar { a, s } => {
                    let (a, s) = (*a, *s);
                    let c = self.nodes[s.0].value[(0, 0)];
                    let da = grad.scale(c);
                    let ds: f64 = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| x * g)
                        .sum();
                    self.accumulate(a, da);
                    self.accumulate(s, Mat::from_vec(1, 1, vec![ds]));
                }
                Op::L2Normalize { a, norm } => {
                    let (a, norm) = (*a, *norm);
                    let y = &self.nodes[idx].value;
                    let dot: f64 = y
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&y, &g)| y * g)
                        .sum();
                    let da = Mat::from_vec(
                        y.rows(),
                        y.cols(),
                        y.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&y, &g)| (g - dot * y) / norm)
                            .collect(),
                    );
                    self.accumulate(a, da);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let (logits, label) = (*logits, *label);
                    let probs = probs.clone();
                    let g = grad[(0, 0)];
                    let da = Mat::from_vec(
                        1,
                        probs.len(),
                        probs
                            .iter()
                            .enumerate()
                            .map(|(j, &p)| g * (p - if j == label { 1.0 } else { 0.0 }))
                            .collect(),
                    );
                    self.accumulate(logits, da);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad: Mat) {
        if let Op::Leaf { requires_grad: false } = self.nodes[id.0].op {
            return;
        }
        self.nodes[id.0].grad.add_assign(&grad);
    }
}

/// First row achieving each column's recorded statistic (ties go to the
/// lowest row index, matching the forward scan order).
fn arg_rows_of(x: &Mat, pooled: &Mat) -> Vec<usize> {
    (0..x.cols())
        .map(|j| {
            (0..x.rows())
                .find(|&i| x[(i, j)] == pooled[(0, j)])
                .expect("pooled value always comes from some row")
        })
        .collect()
}

/// Standalone stable cross-entropy, `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            offset: 0,
            label: label as u32,
            classes: logits.len() as u32,
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum_exp.ln() - logits[label])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let loss = cross_entropy(&[0.7, 0.7, 0.7, 0.7], 2).unwrap();
        assert_close(loss, 4.0f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits() {
        let loss = cross_entropy(&[10.0, -10.0], 0).unwrap();
        // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        assert_close(loss, (1.0 + (-20.0f64).exp()).ln(), 1e-18);
        assert!(loss < 2.1e-9 && loss > 2.0e-9);
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let a = cross_entropy(&[1.0, -2.0, 0.5], 1).unwrap();
        let b = cross_entropy(&[101.0, 98.0, 100.5], 1).unwrap();
        assert_close(a, b, 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn linear_layer_gradient_closed_form() {
        // logits = x W^T, CE: dW = (softmax - onehot)^T x
        let x_val = Mat::row_vec(&[0.5, -1.5, 2.0]);
        let w_val = Mat::from_rows(&[vec![0.1, 0.2, -0.3], vec![-0.4, 0.5, 0.6]]);
        let mut tape = Tape::new();
        let x = tape.constant(x_val.clone());
        let w = tape.param(w_val.clone());
        let logits = tape.matmul_nt(x, w).unwrap();
        let loss = tape.cross_entropy(logits, 0).unwrap();
        tape.backward(loss).unwrap();

        let z = x_val.matmul_nt(&w_val);
        let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let dw = tape.grad(w);
        for c in 0..2 {
            let coeff = probs[c] - if c == 0 { 1.0 } else { 0.0 };
            for j in 0..3 {
                assert_close(dw[(c, j)], coeff * x_val[(0, j)], 1e-12);
            }
        }
        // input is a constant leaf: no gradient flows into it
        assert!(tape.grad(x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_independent_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::row_vec(&[1.0, 2.0]));
        let w_used = tape.param(Mat::identity(2));
        let w_unused = tape.param(Mat::identity(2));
        let logits = tape.matmul_nt(x, w_used).unwrap();
        let loss = tape.cross_entropy(logits, 0).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w_unused).data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(w_used).data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn backward_without_graph_fails() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.backward(NodeId(0)),
            Err(Error::GraphNotRecorded)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]));
        let y = tape.softmax_rows(x);
        for i in 0..2 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert_close(s, 1.0, 1e-12);
        }
    }

    #[test]
    fn col_max_routes_gradient_to_first_achiever() {
        let mut tape = Tape::new();
        // column 0 ties at rows 0 and 2: gradient goes to row 0
        let x = tape.param(Mat::from_rows(&[
            vec![5.0, 1.0],
            vec![2.0, 9.0],
            vec![5.0, 3.0],
        ]));
        let pooled = tape.col_max(x).unwrap();
        let ones = tape.constant(Mat::from_vec(2, 1, vec![1.0, 1.0]));
        let total = tape.matmul(pooled, ones).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(x);
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(g[(2, 0)], 0.0);
        assert_eq!(g[(1, 1)], 1.0);
    }

    #[test]
    fn exp_affine_matches_affinity_form() {
        let beta = 2.5;
        let mut tape = Tape::new();
        let sims = tape.constant(Mat::row_vec(&[1.0, 0.0, -1.0]));
        let aff = tape.exp_affine(sims, beta, -beta);
        let v = tape.value(aff);
        assert_close(v[(0, 0)], 1.0, 1e-12);
        assert_close(v[(0, 1)], (-beta).exp(), 1e-12);
        assert_close(v[(0, 2)], (-2.0 * beta).exp(), 1e-12);
    }
}
