//! The computation tape: eager forward values, recorded ops, reverse sweep.

use super::{Rng, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffValue(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        x: DiffValue,
        w: DiffValue,
        b: DiffValue,
    },
    Concat {
        parts: Vec<DiffValue>,
    },
    Slice {
        x: DiffValue,
        start: usize,
    },
    Add {
        a: DiffValue,
        b: DiffValue,
    },
    Mul {
        a: DiffValue,
        b: DiffValue,
    },
    Tanh {
        x: DiffValue,
    },
    Sigmoid {
        x: DiffValue,
    },
    Softmax {
        x: DiffValue,
    },
    Mean {
        x: DiffValue,
    },
    Inner {
        a: DiffValue,
        b: DiffValue,
    },
    WeightedSum {
        weights: DiffValue,
        vectors: Vec<DiffValue>,
    },
    SelectRow {
        table: DiffValue,
        row: usize,
    },
    Clamp {
        x: DiffValue,
        lo: f64,
        hi: f64,
    },
    Reparam {
        mean: DiffValue,
        logvar: DiffValue,
        noise: Vec<f64>,
    },
    GaussianKl {
        mean_q: DiffValue,
        logvar_q: DiffValue,
        mean_p: DiffValue,
        logvar_p: DiffValue,
    },
    NllOneHot {
        logits: DiffValue,
        target: usize,
        weight: f64,
    },
    Scale {
        x: DiffValue,
        factor: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// A dynamic computation graph, rebuilt per sequence.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> DiffValue {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op });
        DiffValue(self.nodes.len() - 1)
    }

    fn vec_len(&self, v: DiffValue, op: &str) -> usize {
        let node = &self.nodes[v.0];
        assert!(
            node.shape.len() == 1,
            "{op}: expected a vector, got shape {:?}",
            node.shape
        );
        node.data.len()
    }

    pub fn shape(&self, v: DiffValue) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: DiffValue) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: DiffValue) -> f64 {
        let data = &self.nodes[v.0].data;
        assert_eq!(data.len(), 1, "scalar() on a value of length {}", data.len());
        data[0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: DiffValue) -> &[f64] {
        assert!(
            !self.grads.is_empty(),
            "grad() before backward() was called"
        );
        &self.grads[v.0]
    }

    // -- inputs ------------------------------------------------------------

    pub fn leaf(&mut self, tensor: &Tensor) -> DiffValue {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>) -> DiffValue {
        self.push(vec![data.len()], data, Op::Leaf)
    }

    pub fn zeros(&mut self, len: usize) -> DiffValue {
        self.constant(vec![0.0; len])
    }

    // -- ops ---------------------------------------------------------------

    /// `y = W x + b` with `W` of shape `[out, in]`.
    pub fn affine(&mut self, x: DiffValue, w: DiffValue, b: DiffValue) -> DiffValue {
        let w_shape = self.nodes[w.0].shape.clone();
        assert!(
            w_shape.len() == 2,
            "affine: weight must be 2-D, got {w_shape:?}"
        );
        let (out, inp) = (w_shape[0], w_shape[1]);
        let x_len = self.vec_len(x, "affine");
        let b_len = self.vec_len(b, "affine");
        assert!(
            x_len == inp,
            "affine: weight {out}x{inp} expects input of length {inp}, got {x_len}"
        );
        assert!(
            b_len == out,
            "affine: weight {out}x{inp} expects bias of length {out}, got {b_len}"
        );
        let mut data = self.nodes[b.0].data.clone();
        {
            let w_data = &self.nodes[w.0].data;
            let x_data = &self.nodes[x.0].data;
            for (i, y) in data.iter_mut().enumerate() {
                let row = &w_data[i * inp..(i + 1) * inp];
                let mut acc = 0.0;
                for (wv, xv) in row.iter().zip(x_data) {
                    acc += wv * xv;
                }
                *y += acc;
            }
        }
        self.push(vec![out], data, Op::Affine { x, w, b })
    }

    pub fn concat(&mut self, parts: &[DiffValue]) -> DiffValue {
        assert!(!parts.is_empty(), "concat: no parts");
        let mut data = Vec::new();
        for &p in parts {
            self.vec_len(p, "concat");
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(
            vec![data.len()],
            data,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice(&mut self, x: DiffValue, start: usize, len: usize) -> DiffValue {
        let total = self.vec_len(x, "slice");
        assert!(
            start + len <= total,
            "slice: range {start}..{} out of length {total}",
            start + len
        );
        let data = self.nodes[x.0].data[start..start + len].to_vec();
        self.push(vec![len], data, Op::Slice { x, start })
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> DiffValue {
        let (la, lb) = (self.vec_len(a, "add"), self.vec_len(b, "add"));
        assert!(la == lb, "add: length mismatch {la} vs {lb}");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(vec![la], data, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> DiffValue {
        let (la, lb) = (self.vec_len(a, "mul"), self.vec_len(b, "mul"));
        assert!(la == lb, "mul: length mismatch {la} vs {lb}");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(vec![la], data, Op::Mul { a, b })
    }

    pub fn tanh(&mut self, x: DiffValue) -> DiffValue {
        let len = self.vec_len(x, "tanh");
        let data = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        self.push(vec![len], data, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: DiffValue) -> DiffValue {
        let len = self.vec_len(x, "sigmoid");
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(vec![len], data, Op::Sigmoid { x })
    }

    pub fn softmax(&mut self, x: DiffValue) -> DiffValue {
        let len = self.vec_len(x, "softmax");
        let input = &self.nodes[x.0].data;
        let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut data: Vec<f64> = input.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= sum);
        self.push(vec![len], data, Op::Softmax { x })
    }

    pub fn mean(&mut self, x: DiffValue) -> DiffValue {
        let len = self.vec_len(x, "mean");
        assert!(len > 0, "mean: empty vector");
        let m = self.nodes[x.0].data.iter().sum::<f64>() / len as f64;
        self.push(vec![1], vec![m], Op::Mean { x })
    }

    pub fn inner_product(&mut self, a: DiffValue, b: DiffValue) -> DiffValue {
        let (la, lb) = (
            self.vec_len(a, "inner_product"),
            self.vec_len(b, "inner_product"),
        );
        assert!(la == lb, "inner_product: length mismatch {la} vs {lb}");
        let s = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![1], vec![s], Op::Inner { a, b })
    }

    /// `y = sum_j weights[j] * vectors[j]`; the attention combiner.
    pub fn weighted_sum(&mut self, weights: DiffValue, vectors: &[DiffValue]) -> DiffValue {
        let k = self.vec_len(weights, "weighted_sum");
        assert!(
            k == vectors.len() && k > 0,
            "weighted_sum: {k} weights vs {} vectors",
            vectors.len()
        );
        let dim = self.vec_len(vectors[0], "weighted_sum");
        let mut data = vec![0.0; dim];
        for (j, &v) in vectors.iter().enumerate() {
            let lv = self.vec_len(v, "weighted_sum");
            assert!(lv == dim, "weighted_sum: vector {j} has length {lv}, expected {dim}");
            let wj = self.nodes[weights.0].data[j];
            for (acc, x) in data.iter_mut().zip(&self.nodes[v.0].data) {
                *acc += wj * x;
            }
        }
        self.push(
            vec![dim],
            data,
            Op::WeightedSum {
                weights,
                vectors: vectors.to_vec(),
            },
        )
    }

    /// Embedding lookup: row `row` of a 2-D table.
    pub fn select_row(&mut self, table: DiffValue, row: usize) -> DiffValue {
        let shape = self.nodes[table.0].shape.clone();
        assert!(
            shape.len() == 2,
            "select_row: table must be 2-D, got {shape:?}"
        );
        let (rows, cols) = (shape[0], shape[1]);
        assert!(row < rows, "select_row: row {row} out of {rows}");
        let data = self.nodes[table.0].data[row * cols..(row + 1) * cols].to_vec();
        self.push(vec![cols], data, Op::SelectRow { table, row })
    }

    pub fn clamp(&mut self, x: DiffValue, lo: f64, hi: f64) -> DiffValue {
        let len = self.vec_len(x, "clamp");
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        self.push(vec![len], data, Op::Clamp { x, lo, hi })
    }

    /// `z = mean + exp(0.5 * logvar) * eps`, `eps ~ N(0, I)` drawn from `rng`.
    /// Gradient flows to `mean` and `logvar`, not to the noise.
    pub fn reparameterize(&mut self, mean: DiffValue, logvar: DiffValue, rng: &mut Rng) -> DiffValue {
        let len = self.vec_len(mean, "reparameterize");
        let lv_len = self.vec_len(logvar, "reparameterize");
        assert!(len == lv_len, "reparameterize: length mismatch {len} vs {lv_len}");
        let noise: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        self.reparameterize_with_noise(mean, logvar, noise)
    }

    /// Reparameterization with caller-supplied noise; used by tests to pin eps.
    pub fn reparameterize_with_noise(
        &mut self,
        mean: DiffValue,
        logvar: DiffValue,
        noise: Vec<f64>,
    ) -> DiffValue {
        let len = self.vec_len(mean, "reparameterize");
        assert!(noise.len() == len, "reparameterize: noise length mismatch");
        let data = (0..len)
            .map(|i| {
                let m = self.nodes[mean.0].data[i];
                let lv = self.nodes[logvar.0].data[i];
                m + (0.5 * lv).exp() * noise[i]
            })
            .collect();
        self.push(vec![len], data, Op::Reparam { mean, logvar, noise })
    }

    /// Closed-form KL of diagonal Gaussians, summed over dimensions.
    pub fn gaussian_kl(
        &mut self,
        mean_q: DiffValue,
        logvar_q: DiffValue,
        mean_p: DiffValue,
        logvar_p: DiffValue,
    ) -> DiffValue {
        let len = self.vec_len(mean_q, "gaussian_kl");
        for (name, v) in [
            ("logvar_q", logvar_q),
            ("mean_p", mean_p),
            ("logvar_p", logvar_p),
        ] {
            let l = self.vec_len(v, "gaussian_kl");
            assert!(l == len, "gaussian_kl: {name} has length {l}, expected {len}");
        }
        let mut total = 0.0;
        for d in 0..len {
            let mq = self.nodes[mean_q.0].data[d];
            let lq = self.nodes[logvar_q.0].data[d];
            let mp = self.nodes[mean_p.0].data[d];
            let lp = self.nodes[logvar_p.0].data[d];
            let delta = mq - mp;
            total += 0.5 * ((lq - lp).exp() + delta * delta * (-lp).exp() - 1.0 + lp - lq);
        }
        self.push(
            vec![1],
            vec![total],
            Op::GaussianKl {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            },
        )
    }

    /// `-weight * log softmax(logits)[target]`, computed via log-sum-exp.
    pub fn nll_onehot(&mut self, logits: DiffValue, target: usize, weight: f64) -> DiffValue {
        let len = self.vec_len(logits, "nll_onehot");
        assert!(target < len, "nll_onehot: target {target} out of {len} classes");
        let data = &self.nodes[logits.0].data;
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = weight * (lse - data[target]);
        self.push(
            vec![1],
            vec![value],
            Op::NllOneHot {
                logits,
                target,
                weight,
            },
        )
    }

    pub fn scale(&mut self, x: DiffValue, factor: f64) -> DiffValue {
        let len = self.vec_len(x, "scale");
        let data = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        self.push(vec![len], data, Op::Scale { x, factor })
    }

    /// Sums a nonempty list of scalars.
    pub fn sum_scalars(&mut self, values: &[DiffValue]) -> DiffValue {
        assert!(!values.is_empty(), "sum_scalars: empty");
        let mut acc = values[0];
        for &v in &values[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of every node are
    /// available through [`Graph::grad`] afterwards; each node is visited
    /// exactly once, in reverse recording order.
    pub fn backward(&mut self, loss: DiffValue) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward: loss must be scalar"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..n).rev() {
            // take this node's gradient out so parents can be borrowed freely
            let gout = std::mem::take(&mut grads[idx]);
            if gout.iter().all(|&g| g == 0.0) {
                grads[idx] = gout;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let inp = self.nodes[x.0].data.len();
                    let x_data = &self.nodes[x.0].data;
                    let w_data = &self.nodes[w.0].data;
                    for (i, &gi) in gout.iter().enumerate() {
                        grads[b.0][i] += gi;
                        let w_row = &w_data[i * inp..(i + 1) * inp];
                        let gw_row = &mut grads[w.0][i * inp..(i + 1) * inp];
                        for j in 0..inp {
                            gw_row[j] += gi * x_data[j];
                        }
                        // dx accumulated below to keep the two writes separate
                        let _ = w_row;
                    }
                    for (i, &gi) in gout.iter().enumerate() {
                        let w_row = &w_data[i * inp..(i + 1) * inp];
                        for j in 0..inp {
                            grads[x.0][j] += gi * w_row[j];
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        for (gp, go) in grads[p.0].iter_mut().zip(&gout[offset..offset + len]) {
                            *gp += go;
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, start } => {
                    for (i, &g) in gout.iter().enumerate() {
                        grads[x.0][start + i] += g;
                    }
                }
                Op::Add { a, b } => {
                    for (ga, &g) in grads[a.0].iter_mut().zip(&gout) {
                        *ga += g;
                    }
                    for (gb, &g) in grads[b.0].iter_mut().zip(&gout) {
                        *gb += g;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for i in 0..gout.len() {
                        grads[a.0][i] += gout[i] * self.nodes[b.0].data[i];
                    }
                    for i in 0..gout.len() {
                        grads[b.0][i] += gout[i] * self.nodes[a.0].data[i];
                    }
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[idx].data;
                    for i in 0..gout.len() {
                        grads[x.0][i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[idx].data;
                    for i in 0..gout.len() {
                        grads[x.0][i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[idx].data;
                    let dot: f64 = gout.iter().zip(y).map(|(g, yi)| g * yi).sum();
                    for i in 0..gout.len() {
                        grads[x.0][i] += y[i] * (gout[i] - dot);
                    }
                }
                Op::Mean { x } => {
                    let len = self.nodes[x.0].data.len() as f64;
                    let g = gout[0] / len;
                    for gx in grads[x.0].iter_mut() {
                        *gx += g;
                    }
                }
                Op::Inner { a, b } => {
                    let g = gout[0];
                    let (a, b) = (*a, *b);
                    for i in 0..self.nodes[a.0].data.len() {
                        grads[a.0][i] += g * self.nodes[b.0].data[i];
                    }
                    for i in 0..self.nodes[b.0].data.len() {
                        grads[b.0][i] += g * self.nodes[a.0].data[i];
                    }
                }
                Op::WeightedSum { weights, vectors } => {
                    for (j, &v) in vectors.iter().enumerate() {
                        let wj = self.nodes[weights.0].data[j];
                        let mut dot = 0.0;
                        for (i, &g) in gout.iter().enumerate() {
                            dot += g * self.nodes[v.0].data[i];
                            grads[v.0][i] += wj * g;
                        }
                        grads[weights.0][j] += dot;
                    }
                }
                Op::SelectRow { table, row } => {
                    let cols = gout.len();
                    let gt = &mut grads[table.0][row * cols..(row + 1) * cols];
                    for (g, &go) in gt.iter_mut().zip(&gout) {
                        *g += go;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for (i, &g) in gout.iter().enumerate() {
                        let xv = self.nodes[x.0].data[i];
                        if xv > *lo && xv < *hi {
                            grads[x.0][i] += g;
                        }
                    }
                }
                Op::Reparam {
                    mean,
                    logvar,
                    noise,
                } => {
                    for (i, &g) in gout.iter().enumerate() {
                        grads[mean.0][i] += g;
                        let lv = self.nodes[logvar.0].data[i];
                        grads[logvar.0][i] += g * 0.5 * (0.5 * lv).exp() * noise[i];
                    }
                }
                Op::GaussianKl {
                    mean_q,
                    logvar_q,
                    mean_p,
                    logvar_p,
                } => {
                    let g = gout[0];
                    for d in 0..self.nodes[mean_q.0].data.len() {
                        let mq = self.nodes[mean_q.0].data[d];
                        let lq = self.nodes[logvar_q.0].data[d];
                        let mp = self.nodes[mean_p.0].data[d];
                        let lp = self.nodes[logvar_p.0].data[d];
                        let delta = mq - mp;
                        let inv_var_p = (-lp).exp();
                        grads[mean_q.0][d] += g * delta * inv_var_p;
                        grads[mean_p.0][d] -= g * delta * inv_var_p;
                        grads[logvar_q.0][d] += g * 0.5 * ((lq - lp).exp() - 1.0);
                        grads[logvar_p.0][d] +=
                            g * 0.5 * (1.0 - (lq - lp).exp() - delta * delta * inv_var_p);
                    }
                }
                Op::NllOneHot {
                    logits,
                    target,
                    weight,
                } => {
                    let g = gout[0] * weight;
                    let data = &self.nodes[logits.0].data;
                    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = data.iter().map(|v| (v - max).exp()).sum();
                    for i in 0..data.len() {
                        let soft = (data[i] - max).exp() / sum;
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        grads[logits.0][i] += g * (soft - onehot);
                    }
                }
                Op::Scale { x, factor } => {
                    for (i, &g) in gout.iter().enumerate() {
                        grads[x.0][i] += g * factor;
                    }
                }
            }
            grads[idx] = gout;
        }
        self.grads = grads;
    }
}

/// Weight handles for one LSTM cell: `weight` is `[4H, in + H]` with gate
/// rows ordered input, forget, candidate, output; `bias` is `[4H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub weight: DiffValue,
    pub bias: DiffValue,
}

/// One LSTM step: returns `(h, c)`.
///
/// Gates: `i, f, o = sigmoid(..)`, candidate `g = tanh(..)`,
/// `c = f e c_prev + i e g`, `h = o e tanh(c)`.
pub fn lstm_cell(
    graph: &mut Graph,
    x: DiffValue,
    h_prev: DiffValue,
    c_prev: DiffValue,
    cell: LstmCell,
) -> (DiffValue, DiffValue) {
    let hidden = graph.value(h_prev).len();
    let joint = graph.concat(&[x, h_prev]);
    let pre = graph.affine(joint, cell.weight, cell.bias);
    let pre_i = graph.slice(pre, 0, hidden);
    let pre_f = graph.slice(pre, hidden, hidden);
    let pre_g = graph.slice(pre, 2 * hidden, hidden);
    let pre_o = graph.slice(pre, 3 * hidden, hidden);
    let gate_i = graph.sigmoid(pre_i);
    let gate_f = graph.sigmoid(pre_f);
    let cand = graph.tanh(pre_g);
    let gate_o = graph.sigmoid(pre_o);
    let keep = graph.mul(gate_f, c_prev);
    let write = graph.mul(gate_i, cand);
    let c = graph.add(keep, write);
    let c_act = graph.tanh(c);
    let h = graph.mul(gate_o, c_act);
    (h, c)
}
