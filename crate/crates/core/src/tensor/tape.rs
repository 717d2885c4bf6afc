use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { input: Var, row: usize, col: usize },
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<(usize, usize)>),
    ScaleRows(Var, Var),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentLogSumExp(Var, Vec<usize>),
    RowSoftmax(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Exp(Var),
    Log(Var, f64),
    MaxPoolRows(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that a single reverse
/// sweep can produce gradients for every differentiable leaf.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    /// Binds a named parameter as a leaf. Repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.leaf(value, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), g))
    }

    /// Dot product of two `1 x n` rows, as a `1 x 1` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != 1 || sa != sb {
            return Err(Error::shape("dot", format!("{sa:?} . {sb:?}")));
        }
        self.matmul_nt(a, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), g)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    /// Adds a `1 x n` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb[0] != 1 || sb[1] != sa[1] {
            return Err(Error::shape("add_row", format!("{sa:?} + {sb:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(sa[1]) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let g = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_in_place(factor);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.shape(first)[0];
        if let Some(bad) = parts.iter().find(|p| self.shape(**p)[0] != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {} vs {}", rows, self.shape(*bad)[0]),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.shape(first)[1];
        if let Some(bad) = parts.iter().find(|p| self.shape(**p)[1] != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts {} vs {}", cols, self.shape(*bad)[1]),
            ));
        }
        let rows: usize = parts.iter().map(|p| self.shape(*p)[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Rectangular block `[row..row+rows, col..col+cols]`.
    pub fn slice(&mut self, a: Var, row: usize, rows: usize, col: usize, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if rows == 0 || cols == 0 || row + rows > s[0] || col + cols > s[1] {
            return Err(Error::shape(
                "slice",
                format!("block [{row}+{rows}, {col}+{cols}] of {s:?}"),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            data.extend_from_slice(&src.row(r)[col..col + cols]);
        }
        let value = Tensor::new(rows, cols, data)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Slice { input: a, row, col }, g))
    }

    pub fn slice_rows(&mut self, a: Var, row: usize, rows: usize) -> Result<Var> {
        let cols = self.shape(a)[1];
        self.slice(a, row, rows, 0, cols)
    }

    pub fn slice_cols(&mut self, a: Var, col: usize, cols: usize) -> Result<Var> {
        let rows = self.shape(a)[0];
        self.slice(a, 0, rows, col, cols)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let s = self.shape(a);
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {s:?}")));
        }
        let value = self.value(a).select_rows(&indices);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::GatherRows(a, indices), g))
    }

    /// Picks individual entries, producing an `m x 1` column.
    pub fn gather_elements(&mut self, a: Var, coords: Vec<(usize, usize)>) -> Result<Var> {
        let s = self.shape(a);
        if let Some(bad) = coords.iter().find(|(r, c)| *r >= s[0] || *c >= s[1]) {
            return Err(Error::shape("gather_elements", format!("{bad:?} of {s:?}")));
        }
        let src = self.value(a);
        let data = coords.iter().map(|&(r, c)| src.get(r, c)).collect();
        let value = Tensor::new(coords.len(), 1, data)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::GatherElements(a, coords), g))
    }

    /// Multiplies row `i` of `a` by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if ss != [sa[0], 1] {
            return Err(Error::shape("scale_rows", format!("{sa:?} by {ss:?}")));
        }
        let scales = self.value(s).data().to_vec();
        let mut value = self.value(a).clone();
        for (row, f) in value.data_mut().chunks_mut(sa[1]).zip(&scales) {
            for x in row {
                *x *= f;
            }
        }
        let g = self.any_grad(&[a, s]);
        Ok(self.push(value, Op::ScaleRows(a, s), g))
    }

    fn check_segments(&self, op: &'static str, a: Var, segments: &[usize], column: bool) -> Result<usize> {
        let s = self.shape(a);
        if segments.len() != s[0] {
            return Err(Error::shape(
                op,
                format!("{} segment ids for {s:?}", segments.len()),
            ));
        }
        if column && s[1] != 1 {
            return Err(Error::shape(op, format!("expected a column, got {s:?}")));
        }
        Ok(s[1])
    }

    /// Sums the rows of `a` into `count` buckets given by `segments`.
    pub fn segment_sum(&mut self, a: Var, segments: Vec<usize>, count: usize) -> Result<Var> {
        let cols = self.check_segments("segment_sum", a, &segments, false)?;
        if let Some(bad) = segments.iter().find(|&&s| s >= count) {
            return Err(Error::shape("segment_sum", format!("segment {bad} >= {count}")));
        }
        let mut value = Tensor::zeros(count, cols);
        let src = self.value(a);
        for (i, &seg) in segments.iter().enumerate() {
            let dst = &mut value.data_mut()[seg * cols..(seg + 1) * cols];
            for (d, x) in dst.iter_mut().zip(src.row(i)) {
                *d += x;
            }
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::SegmentSum(a, segments), g))
    }

    /// Softmax of an `m x 1` column taken separately within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Vec<usize>) -> Result<Var> {
        self.check_segments("segment_softmax", a, &segments, true)?;
        let groups = group_indices(&segments);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for idx in groups.values() {
            let vals: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let mut sm = vec![0.0; vals.len()];
            kernels::softmax_into(&vals, &mut sm);
            for (&i, p) in idx.iter().zip(sm) {
                out[i] = p;
            }
        }
        let value = Tensor::new(x.len(), 1, out)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::SegmentSoftmax(a, segments), g))
    }

    /// Log-sum-exp of an `m x 1` column per segment, giving `count x 1`.
    /// Empty segments evaluate to `-inf`.
    pub fn segment_log_sum_exp(&mut self, a: Var, segments: Vec<usize>, count: usize) -> Result<Var> {
        self.check_segments("segment_log_sum_exp", a, &segments, true)?;
        if let Some(bad) = segments.iter().find(|&&s| s >= count) {
            return Err(Error::shape("segment_log_sum_exp", format!("segment {bad} >= {count}")));
        }
        let groups = group_indices(&segments);
        let x = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; count];
        for (&seg, idx) in &groups {
            let vals: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            out[seg] = kernels::log_sum_exp(&vals);
        }
        let value = Tensor::new(count, 1, out)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::SegmentLogSumExp(a, segments), g))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut value = Tensor::zeros(src.rows(), cols);
        for (r, out) in value.data_mut().chunks_mut(cols).enumerate() {
            kernels::softmax_into(src.row(r), out);
        }
        let g = self.any_grad(&[a]);
        self.push(value, Op::RowSoftmax(a), g)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.rows(), src.cols(), data).expect("same shape");
        let g = self.any_grad(&[a]);
        self.push(value, op, g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// `ln(max(x, floor))`; entries below the floor receive no gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::Log(a, floor), |x| x.max(floor).ln())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, f64::MIN_POSITIVE)
    }

    /// Columnwise max over rows, giving a `1 x n` row. Ties resolve to the
    /// first row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut arg = vec![0usize; cols];
        let mut best = src.row(0).to_vec();
        for r in 1..src.rows() {
            for (c, &x) in src.row(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    arg[c] = r;
                }
            }
        }
        let value = Tensor::row_vector(best);
        let g = self.any_grad(&[a]);
        self.push(value, Op::MaxPoolRows(a, arg), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.value(a).norm_squared();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::SumSquares(a), g)
    }

    /// Inverted dropout with a mask drawn from `seed`. A rate of zero records
    /// nothing and returns the input.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(src.rows(), src.cols(), data).expect("same shape");
        let g = self.any_grad(&[a]);
        self.push(value, Op::Dropout(a, mask), g)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a);
        for p in [gamma, beta] {
            if self.shape(p) != [1, s[1]] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("input {s:?}, affine {:?}", self.shape(p)),
                ));
            }
        }
        let n = s[1] as f64;
        let src = self.value(a);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(src.len());
        for r in 0..s[0] {
            let row = src.row(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, &x) in row.iter().enumerate() {
                let xh = (x - mu) * inv;
                normalized.push(xh);
                out.push(g[c] * xh + b[c]);
            }
        }
        let value = Tensor::new(s[0], s[1], out)?;
        let needs = self.any_grad(&[a, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(Error::NonScalarLoss(s));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Ok(Gradients::new(grads, shapes, params))
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, dy.matmul_nt(tb).expect("shapes checked"));
                }
                if needs(*b) {
                    let mut g = vec![0.0; tb.len()];
                    kernels::matmul_tn(ta.data(), dy.data(), &mut g, ta.rows(), ta.cols(), dy.cols());
                    acc(*b, Tensor::new(tb.rows(), tb.cols(), g).expect("shape"));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, dy.matmul(tb).expect("shapes checked"));
                }
                if needs(*b) {
                    let mut g = vec![0.0; tb.len()];
                    kernels::matmul_tn(dy.data(), ta.data(), &mut g, dy.rows(), dy.cols(), ta.cols());
                    acc(*b, Tensor::new(tb.rows(), tb.cols(), g).expect("shape"));
                }
            }
            Op::Transpose(a) => acc(*a, dy.transpose()),
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                let mut g = dy.clone();
                g.scale_in_place(-1.0);
                acc(*b, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, elementwise(dy, tb, |g, x| g * x));
                }
                if needs(*b) {
                    acc(*b, elementwise(dy, ta, |g, x| g * x));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, dy.clone());
                if needs(*bias) {
                    let mut g = vec![0.0; dy.cols()];
                    for row in dy.data().chunks(dy.cols()) {
                        for (s, x) in g.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(*bias, Tensor::row_vector(g));
                }
            }
            Op::Scale(a, f) => {
                let mut g = dy.clone();
                g.scale_in_place(*f);
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let [rows, cols] = val(*p).shape();
                    if needs(*p) {
                        let mut g = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            g.extend_from_slice(&dy.row(r)[offset..offset + cols]);
                        }
                        acc(*p, Tensor::new(rows, cols, g).expect("shape"));
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let [rows, cols] = val(*p).shape();
                    if needs(*p) {
                        let g = dy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(*p, Tensor::new(rows, cols, g).expect("shape"));
                    }
                    offset += rows;
                }
            }
            Op::Slice { input, row, col } => {
                let [_, cols] = val(*input).shape();
                let mut g = Tensor::zeros(val(*input).rows(), cols);
                for r in 0..dy.rows() {
                    let dst = &mut g.data_mut()[(row + r) * cols + col..(row + r) * cols + col + dy.cols()];
                    dst.copy_from_slice(dy.row(r));
                }
                acc(*input, g);
            }
            Op::GatherRows(a, indices) => {
                let [rows, cols] = val(*a).shape();
                let mut g = Tensor::zeros(rows, cols);
                for (k, &i) in indices.iter().enumerate() {
                    let dst = &mut g.data_mut()[i * cols..(i + 1) * cols];
                    for (d, x) in dst.iter_mut().zip(dy.row(k)) {
                        *d += x;
                    }
                }
                acc(*a, g);
            }
            Op::GatherElements(a, coords) => {
                let [rows, cols] = val(*a).shape();
                let mut g = Tensor::zeros(rows, cols);
                for (k, &(r, c)) in coords.iter().enumerate() {
                    g.data_mut()[r * cols + c] += dy.data()[k];
                }
                acc(*a, g);
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let cols = ta.cols();
                if needs(*a) {
                    let mut g = dy.clone();
                    for (row, f) in g.data_mut().chunks_mut(cols).zip(ts.data()) {
                        for x in row {
                            *x *= f;
                        }
                    }
                    acc(*a, g);
                }
                if needs(*s) {
                    let g = (0..ta.rows())
                        .map(|r| kernels::dot(dy.row(r), ta.row(r)))
                        .collect();
                    acc(*s, Tensor::new(ta.rows(), 1, g).expect("shape"));
                }
            }
            Op::SegmentSum(a, segments) => {
                let cols = dy.cols();
                let mut g = Vec::with_capacity(segments.len() * cols);
                for &s in segments {
                    g.extend_from_slice(dy.row(s));
                }
                acc(*a, Tensor::new(segments.len(), cols, g).expect("shape"));
            }
            Op::SegmentSoftmax(a, segments) => {
                let p = y.data();
                let mut g = vec![0.0; p.len()];
                for idx in group_indices(segments).values() {
                    let inner: f64 = idx.iter().map(|&i| p[i] * dy.data()[i]).sum();
                    for &i in idx {
                        g[i] = p[i] * (dy.data()[i] - inner);
                    }
                }
                acc(*a, Tensor::new(p.len(), 1, g).expect("shape"));
            }
            Op::SegmentLogSumExp(a, segments) => {
                let x = val(*a).data();
                let g = segments
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| dy.data()[s] * (x[i] - y.data()[s]).exp())
                    .collect();
                acc(*a, Tensor::new(x.len(), 1, g).expect("shape"));
            }
            Op::RowSoftmax(a) => {
                let cols = y.cols();
                let mut g = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (p, d) = (y.row(r), dy.row(r));
                    let inner = kernels::dot(p, d);
                    for (c, out) in g.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        *out = p[c] * (d[c] - inner);
                    }
                }
                acc(*a, g);
            }
            Op::LeakyRelu(a, slope) => {
                acc(*a, elementwise(dy, val(*a), |g, x| if x > 0.0 { g } else { g * slope }));
            }
            Op::Gelu(a) => acc(*a, elementwise(dy, val(*a), |g, x| g * kernels::gelu_grad(x))),
            Op::Exp(a) => acc(*a, elementwise(dy, y, |g, e| g * e)),
            Op::Log(a, floor) => {
                acc(*a, elementwise(dy, val(*a), |g, x| if x >= *floor { g / x } else { 0.0 }));
            }
            Op::MaxPoolRows(a, arg) => {
                let [rows, cols] = val(*a).shape();
                let mut g = Tensor::zeros(rows, cols);
                for (c, &r) in arg.iter().enumerate() {
                    g.data_mut()[r * cols + c] += dy.data()[c];
                }
                acc(*a, g);
            }
            Op::Sum(a) => {
                let [rows, cols] = val(*a).shape();
                acc(*a, Tensor::filled(rows, cols, dy.item()));
            }
            Op::SumSquares(a) => {
                let d = dy.item();
                acc(*a, elementwise(val(*a), val(*a), |x, _| 2.0 * x * d));
            }
            Op::Dropout(a, mask) => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*a, Tensor::new(dy.rows(), dy.cols(), data).expect("shape"));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let cols = dy.cols();
                let n = cols as f64;
                let gv = val(*gamma).data();
                if needs(*gamma) {
                    let mut g = vec![0.0; cols];
                    for (r, drow) in dy.data().chunks(cols).enumerate() {
                        for c in 0..cols {
                            g[c] += drow[c] * normalized[r * cols + c];
                        }
                    }
                    acc(*gamma, Tensor::row_vector(g));
                }
                if needs(*beta) {
                    let mut g = vec![0.0; cols];
                    for drow in dy.data().chunks(cols) {
                        for (s, x) in g.iter_mut().zip(drow) {
                            *s += x;
                        }
                    }
                    acc(*beta, Tensor::row_vector(g));
                }
                if needs(*input) {
                    let mut g = Vec::with_capacity(dy.len());
                    for (r, drow) in dy.data().chunks(cols).enumerate() {
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        let dxh: Vec<f64> = drow.iter().zip(gv).map(|(d, gm)| d * gm).collect();
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = kernels::dot(&dxh, xh);
                        for c in 0..cols {
                            g.push(inv_std[r] / n * (n * dxh[c] - sum_d - xh[c] * sum_dx));
                        }
                    }
                    acc(*input, Tensor::new(dy.rows(), cols, g).expect("shape"));
                }
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn group_indices(segments: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in segments.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    groups
}
