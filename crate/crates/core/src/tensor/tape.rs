use serde::{Deserialize, Serialize};

use super::{gelu, gelu_grad, gemm, layer_norm, softmax_inplace, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self
                .values
                .iter()
                .map(|m| Mat::zeros(m.rows, m.cols))
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|m| m.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Constant,
    Param,
    Gather { table: ParamId, ids: Vec<usize> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Dropout { a: Var, mask: Vec<f64> },
    WeightedNll { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Mat, clamped: Vec<bool> },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Probability floor for the negative log-likelihood.
pub const PROB_EPS: f64 = 1e-12;

/// Records a forward computation so gradients can be pulled back onto the
/// parameters of a [`ParamStore`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    clamp_count: usize,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            clamp_count: 0,
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    /// Number of gold outcomes whose probability fell below [`PROB_EPS`].
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of a parameter table selected by `ids`.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, trans_b: false }, ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows, bv.rows);
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, trans_b: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `1 x cols` matrix `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        super::add_row_inplace(&mut out, &self.value(row).data);
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| gelu(x)).collect());
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, xhat, inv_std) = layer_norm(
            self.value(x),
            &self.value(gain).data,
            &self.value(bias).data,
        );
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Row-wise softmax; `-inf` entries get probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        super::softmax_rows_inplace(&mut out);
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by
    /// `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.data.len());
        let out = Mat::from_vec(
            av.rows,
            av.cols,
            av.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let ng = self.needs(a);
        self.push(out, Op::Dropout { a, mask }, ng)
    }

    /// `-sum_t weights[t] * ln max(softmax(logits[t])[targets[t]], eps)` as a
    /// `1 x 1` node.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        assert_eq!(lv.rows, weights.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        let mut clamped = vec![false; targets.len()];
        for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            let row = probs.row_mut(t);
            softmax_inplace(row);
            let p = row[y];
            if p < PROB_EPS {
                clamped[t] = true;
                loss -= w * PROB_EPS.ln();
            } else {
                loss -= w * p.ln();
            }
        }
        self.clamp_count += clamped.iter().filter(|&&c| c).count();
        let ng = self.needs(logits);
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                clamped,
            },
            ng,
        )
    }

    /// Back-propagates from the scalar node `loss`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        let mut g: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    if let Value::Param(id) = node.value {
                        grads.tensors[id.0].add_assign(&gout);
                    }
                }
                Op::Gather { table, ids } => {
                    let gt = &mut grads.tensors[table.0];
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(id).iter_mut().zip(gout.row(r)) {
                            *a += b;
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut ga = Mat::zeros(av.rows, av.cols);
                        // C = A B  -> dA = dC B^T ; C = A B^T -> dA = dC B
                        gemm(1.0, &gout, false, bv, !trans_b, 0.0, &mut ga);
                        accumulate(&mut g, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Mat::zeros(bv.rows, bv.cols);
                        if *trans_b {
                            // dB = dC^T A
                            gemm(1.0, &gout, true, av, false, 0.0, &mut gb);
                        } else {
                            // dB = A^T dC
                            gemm(1.0, av, true, &gout, false, 0.0, &mut gb);
                        }
                        accumulate(&mut g, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut g, *b, gout.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut g, *a, gout);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.needs(*row) {
                        let mut gr = Mat::zeros(1, gout.cols);
                        for r in 0..gout.rows {
                            for (x, y) in gr.data.iter_mut().zip(gout.row(r)) {
                                *x += y;
                            }
                        }
                        accumulate(&mut g, *row, gr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut g, *a, gout);
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = gout;
                    ga.scale_assign(*s);
                    accumulate(&mut g, *a, ga);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let mut ga = gout;
                    for (x, &v) in ga.data.iter_mut().zip(&av.data) {
                        *x *= gelu_grad(v);
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gain_v = &self.value(*gain).data;
                    let d = gout.cols;
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut gg = Mat::zeros(1, d);
                        let mut gb = Mat::zeros(1, d);
                        for r in 0..gout.rows {
                            let (go, xh) = (gout.row(r), xhat.row(r));
                            for c in 0..d {
                                gg.data[c] += go[c] * xh[c];
                                gb.data[c] += go[c];
                            }
                        }
                        accumulate(&mut g, *gain, gg);
                        accumulate(&mut g, *bias, gb);
                    }
                    if self.needs(*x) {
                        let mut gx = Mat::zeros(gout.rows, d);
                        for (r, &istd) in inv_std.iter().enumerate().take(gout.rows) {
                            let (go, xh) = (gout.row(r), xhat.row(r));
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for c in 0..d {
                                let gh = go[c] * gain_v[c];
                                mean_g += gh;
                                mean_gx += gh * xh[c];
                            }
                            mean_g /= d as f64;
                            mean_gx /= d as f64;
                            let out = gx.row_mut(r);
                            for c in 0..d {
                                let gh = go[c] * gain_v[c];
                                out[c] = istd * (gh - mean_g - xh[c] * mean_gx);
                            }
                        }
                        accumulate(&mut g, *x, gx);
                    }
                }
                Op::Softmax(a) => {
                    let p = match &node.value {
                        Value::Owned(m) => m,
                        Value::Param(_) => unreachable!(),
                    };
                    let mut ga = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), gout.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (pv, gv)) in ga.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pv * (gv - dot);
                        }
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        ga.row_mut(r)[*start..*start + gout.cols].copy_from_slice(gout.row(r));
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.needs(p) {
                            let mut gp = Mat::zeros(gout.rows, cols);
                            for r in 0..gout.rows {
                                gp.row_mut(r).copy_from_slice(&gout.row(r)[off..off + cols]);
                            }
                            accumulate(&mut g, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::Dropout { a, mask } => {
                    let mut ga = gout;
                    for (x, m) in ga.data.iter_mut().zip(mask) {
                        *x *= m;
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::WeightedNll { logits, targets, weights, probs, clamped } => {
                    let scale = gout.data[0];
                    let mut gl = Mat::zeros(probs.rows, probs.cols);
                    for t in 0..targets.len() {
                        if clamped[t] || weights[t] == 0.0 {
                            continue;
                        }
                        let w = weights[t] * scale;
                        let out = gl.row_mut(t);
                        for (o, p) in out.iter_mut().zip(probs.row(t)) {
                            *o = w * p;
                        }
                        out[targets[t]] -= w;
                    }
                    accumulate(&mut g, *logits, gl);
                }
            }
        }
    }
}

fn accumulate(g: &mut [Option<Mat>], v: Var, m: Mat) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&m),
        slot @ None => *slot = Some(m),
    }
}
