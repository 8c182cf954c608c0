//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A `Tape` is rebuilt for every forward pass. Ops append nodes in execution
//! order; `backward` walks them in exact reverse insertion order, accumulating
//! gradients additively at fan-out. A tape supports exactly one backward pass.

use crate::error::{Result, ScaptError};
use crate::tensor::{matmul_values, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    MeanRows(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Relu(usize),
    NormalizeRows(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    SupContrastive {
        sim: usize,
        labels: Vec<usize>,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, zeros if unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Tensor {
            shape: node.value.shape.clone(),
            data,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(ScaptError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(ScaptError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0, b.0]);
        self.push(t, Op::Add(a.0, b.0), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0, b.0]);
        self.push(t, Op::Sub(a.0, b.0), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0, b.0]);
        self.push(t, Op::Mul(a.0, b.0), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * c).collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::Scale(a.0, c), rg, "scale")
    }

    /// Adds a length-d bias vector to every row of an n×d matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        if self.value(bias).numel() != d {
            return Err(ScaptError::ShapeMismatch(format!(
                "add_bias: matrix cols {} vs bias len {}",
                d,
                self.value(bias).numel()
            )));
        }
        let mut data = self.value(a).data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.value(bias).data[j];
            }
        }
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0, bias.0]);
        self.push(t, Op::AddBias(a.0, bias.0), rg, "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = matmul_values(self.value(a), self.value(b))?;
        let rg = self.requires(&[a.0, b.0]);
        self.push(t, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let src = &self.value(a).data;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = src[i * d + j];
            }
        }
        let t = Tensor {
            shape: vec![d, n],
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::Transpose(a.0), rg, "transpose")
    }

    /// Columns [start, end) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        if start >= end || end > d {
            return Err(ScaptError::Index(format!(
                "slice_cols [{start},{end}) of {d} columns"
            )));
        }
        let w = end - start;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + end]);
        }
        let t = Tensor {
            shape: vec![n, w],
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::SliceCols(a.0, start, end), rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ScaptError::Contract("concat_cols of zero parts".into()));
        }
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(ScaptError::ShapeMismatch(
                    "concat_cols: differing row counts".into(),
                ));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor {
            shape: vec![n, total],
            data,
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.requires(&ids);
        self.push(t, Op::ConcatCols(ids), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ScaptError::Contract("concat_rows of zero parts".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            if self.value(p).cols() != d {
                return Err(ScaptError::ShapeMismatch(
                    "concat_rows: differing column counts".into(),
                ));
            }
            n += self.value(p).rows();
            data.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor {
            shape: vec![n, d],
            data,
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.requires(&ids);
        self.push(t, Op::ConcatRows(ids), rg, "concat_rows")
    }

    /// Rows of `a` at the given indices; duplicates allowed, gradients
    /// accumulate additively on repeated rows. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(ScaptError::Index(format!("gather_rows: row {i} of {n}")));
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        let t = Tensor {
            shape: vec![indices.len(), d],
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::GatherRows(a.0, indices.to_vec()), rg, "gather_rows")
    }

    /// Arithmetic mean over rows: n×d → 1×d.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        if n == 0 {
            return Err(ScaptError::Contract("mean_rows of empty matrix".into()));
        }
        let mut data = vec![0.0; d];
        for i in 0..n {
            for (j, v) in data.iter_mut().enumerate() {
                *v += self.value(a).at(i, j);
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let t = Tensor {
            shape: vec![1, d],
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::MeanRows(a.0), rg, "mean_rows")
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(ScaptError::NonFinite("softmax_rows input"));
        }
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = self.value(a).row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                data[i * d + j] = e;
                z += e;
            }
            for j in 0..d {
                data[i * d + j] /= z;
            }
        }
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::SoftmaxRows(a.0), rg, "softmax_rows")
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(ScaptError::Contract("layer_norm: eps must be > 0".into()));
        }
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(ScaptError::ShapeMismatch(
                "layer_norm: gain/bias length must equal row width".into(),
            ));
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let sd = (var + eps).sqrt();
            for j in 0..d {
                let norm = (row[j] - mean) / sd;
                data[i * d + j] = self.value(gain).data[j] * norm + self.value(bias).data[j];
            }
        }
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data,
        };
        let rg = self.requires(&[x.0, gain.0, bias.0]);
        self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data.iter().map(|v| v.max(0.0)).collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::Relu(a.0), rg, "relu")
    }

    /// Scales each row to unit L2 norm (with a small guard for zero rows).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = self.value(a).row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.requires(&[a.0]);
        self.push(t, Op::NormalizeRows(a.0), rg, "normalize_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.requires(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(ScaptError::Contract("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data.iter().sum::<f64>() / n as f64;
        let rg = self.requires(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg, "mean")
    }

    /// Mean of −log softmax(logits)[target] over rows, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != n {
            return Err(ScaptError::ShapeMismatch(format!(
                "cross_entropy: {} rows vs {} targets",
                n,
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(ScaptError::Index(format!(
                    "cross_entropy: target {t} with {c} classes"
                )));
            }
            let row = self.value(logits).row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / n as f64;
        let rg = self.requires(&[logits.0]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Supervised contrastive loss over a similarity matrix.
    ///
    /// `sim` is n×n with sim[i][b] the similarity of anchors i and b. For each
    /// anchor i with at least one other sample of the same label, contributes
    /// −log((1/C_i)·Σ_{c: y_c=y_i, c≠i} P(i,c)) where
    /// P(i,c) = exp(sim[i][c]/τ) / Σ_{b≠i} exp(sim[i][b]/τ). Anchors without
    /// positives are skipped; if every anchor is skipped the batch is degenerate.
    pub fn sup_contrastive(&mut self, sim: Var, labels: &[usize], tau: f64) -> Result<Var> {
        let n = self.value(sim).rows();
        if self.value(sim).cols() != n || labels.len() != n {
            return Err(ScaptError::ShapeMismatch(
                "sup_contrastive: sim must be n×n with n labels".into(),
            ));
        }
        if n < 2 {
            return Err(ScaptError::Contract(
                "sup_contrastive: batch size must be ≥ 2".into(),
            ));
        }
        if tau <= 0.0 {
            return Err(ScaptError::Contract("sup_contrastive: tau must be > 0".into()));
        }
        let mut total = 0.0;
        let mut contributed = false;
        for i in 0..n {
            let positives: Vec<usize> = (0..n)
                .filter(|&c| c != i && labels[c] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            contributed = true;
            let row = self.value(sim).row(i);
            let scaled: Vec<f64> = (0..n)
                .filter(|&b| b != i)
                .map(|b| row[b] / tau)
                .collect();
            let lse_all = log_sum_exp(&scaled);
            let scaled_pos: Vec<f64> = positives.iter().map(|&c| row[c] / tau).collect();
            let lse_pos = log_sum_exp(&scaled_pos);
            total += lse_all - lse_pos + (positives.len() as f64).ln();
        }
        if !contributed {
            return Err(ScaptError::DegenerateBatch);
        }
        let rg = self.requires(&[sim.0]);
        self.push(
            Tensor::scalar(total),
            Op::SupContrastive {
                sim: sim.0,
                labels: labels.to_vec(),
                tau,
            },
            rg,
            "sup_contrastive",
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape's single backward
    /// budget; a second call without a fresh forward is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(ScaptError::Contract(
                "backward called twice on the same graph".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(ScaptError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.spent = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any differentiable leaf; grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: usize, delta: &[f64]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, id: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*b].value.data)
                    .map(|(x, y)| x * y)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].value.data)
                    .map(|(x, y)| x * y)
                    .collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(*a, &da);
            }
            Op::AddBias(a, bias) => {
                self.add_grad(*a, g);
                let d = self.nodes[*bias].value.numel();
                let n = g.len() / d;
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
                self.add_grad(*bias, &db);
            }
            Op::MatMul(a, b) => {
                let at = &self.nodes[*a].value;
                let bt = &self.nodes[*b].value;
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                // dA = dC·Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bt.data[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = Aᵀ·dC
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += at.data[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Transpose(a) => {
                let (n, d) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[j * n + i];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::SliceCols(a, start, end) => {
                let (n, d) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let w = end - start;
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..w {
                        da[i * d + start + j] = g[i * w + j];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[parts[0]].value.rows();
                let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        for j in 0..w {
                            dp[i * w + j] = g[i * total + offset + j];
                        }
                    }
                    self.add_grad(p, &dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = self.nodes[parts[0]].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let dp = g[offset * d..(offset + rows) * d].to_vec();
                    self.add_grad(p, &dp);
                    offset += rows;
                }
            }
            Op::GatherRows(a, indices) => {
                let (n, d) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let mut da = vec![0.0; n * d];
                for (j, &idx) in indices.iter().enumerate() {
                    for c in 0..d {
                        da[idx * d + c] += g[j * d + c];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::MeanRows(a) => {
                let (n, d) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[j] / n as f64;
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (n, d) = (y.rows(), y.cols());
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..d {
                        da[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xt = &self.nodes[*x].value;
                let (n, d) = (xt.rows(), xt.cols());
                let gaint = self.nodes[*gain].value.data.clone();
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..n {
                    let row = xt.row(i);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let sd = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sd).collect();
                    let gr = &g[i * d..(i + 1) * d];
                    let gy: Vec<f64> = gr.iter().zip(&gaint).map(|(a, b)| a * b).collect();
                    let mean_gy = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) / sd;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*gain, &dgain);
                self.add_grad(*bias, &dbias);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = self.nodes[*a]
                    .value
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::NormalizeRows(a) => {
                let xt = &self.nodes[*a].value;
                let (n, d) = (xt.rows(), xt.cols());
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    let row = xt.row(i);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let y: Vec<f64> = row.iter().map(|v| v / norm).collect();
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        da[i * d + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[*a].value.numel()];
                self.add_grad(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let da = vec![g[0] / n as f64; n];
                self.add_grad(*a, &da);
            }
            Op::CrossEntropy { logits, targets } => {
                let lt = &self.nodes[*logits].value;
                let (n, c) = (lt.rows(), lt.cols());
                let mut dl = vec![0.0; n * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = lt.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / z;
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[i * c + j] = g[0] * (p - onehot) / n as f64;
                    }
                }
                self.add_grad(*logits, &dl);
            }
            Op::SupContrastive { sim, labels, tau } => {
                let st = &self.nodes[*sim].value;
                let n = st.rows();
                let mut ds = vec![0.0; n * n];
                for i in 0..n {
                    let positives: Vec<usize> = (0..n)
                        .filter(|&c| c != i && labels[c] == labels[i])
                        .collect();
                    if positives.is_empty() {
                        continue;
                    }
                    let row = st.row(i);
                    // softmax over all b ≠ i
                    let others: Vec<usize> = (0..n).filter(|&b| b != i).collect();
                    let scaled: Vec<f64> = others.iter().map(|&b| row[b] / tau).collect();
                    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scaled.iter().map(|v| (v - m).exp()).sum();
                    for (k, &b) in others.iter().enumerate() {
                        ds[i * n + b] += g[0] * ((scaled[k] - m).exp() / z) / tau;
                    }
                    // softmax over positives only
                    let scaled_pos: Vec<f64> = positives.iter().map(|&c| row[c] / tau).collect();
                    let mp = scaled_pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let zp: f64 = scaled_pos.iter().map(|v| (v - mp).exp()).sum();
                    for (k, &c) in positives.iter().enumerate() {
                        ds[i * n + c] -= g[0] * ((scaled_pos[k] - mp).exp() / zp) / tau;
                    }
                }
                self.add_grad(*sim, &ds);
            }
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
