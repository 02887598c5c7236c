//! A small reverse-mode autodiff tape over `f64` matrices.
//!
//! Every value is a 2-d array. Image-like tensors are stored one example per
//! row in channel-major order (`C × H × W` flattened), and the convolution
//! and normalization ops carry their geometry explicitly.

use ndarray::{s, Array1, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a stride-1, unpadded 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub out_channels: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 1 - self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Batch statistics computed by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Array1<f64>,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Array2<f64>),
    MulRows(usize, Array1<f64>),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Gather(usize, Vec<usize>),
    RowMix(usize, Vec<Vec<(usize, f64)>>),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    ChannelBias {
        x: usize,
        b: usize,
        channels: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    NegSqDist(usize, usize),
    /// Loss with its gradient precomputed during the forward pass.
    Loss(usize, Array2<f64>),
    WeightedSum(usize, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by variable.
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-channel view of a `(batch, channels * spatial)` matrix as
/// `channels` groups of `batch * spatial` values.
fn channel_iter(x: &Array2<f64>, channels: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let spatial = x.ncols() / channels;
    (0..x.nrows()).flat_map(move |b| (0..channels).flat_map(move |c| (0..spatial).map(move |s| (b, c, c * spatial + s))))
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

    fn push(&mut self, value: Array2<f64>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// A trainable input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.needs(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), g)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.needs(&[a.0, b.0]);
        self.push(v, Op::MatMulT(a.0, b.0), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.needs(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.needs(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.needs(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), g)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        let g = self.needs(&[a.0, row.0]);
        self.push(v, Op::AddRow(a.0, row.0), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let g = self.needs(&[a.0]);
        self.push(v, Op::Scale(a.0, k), g)
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        let g = self.needs(&[a.0]);
        self.push(v, Op::MulConst(a.0, c), g)
    }

    /// Scales row `i` by `k[i]`.
    pub fn mul_rows(&mut self, a: Var, k: Array1<f64>) -> Var {
        let v = self.value(a) * &k.view().insert_axis(Axis(1));
        let g = self.needs(&[a.0]);
        self.push(v, Op::MulRows(a.0, k), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let g = self.needs(&[a.0]);
        self.push(v, Op::Sigmoid(a.0), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.needs(&[a.0]);
        self.push(v, Op::Tanh(a.0), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let g = self.needs(&[a.0]);
        self.push(v, Op::Relu(a.0), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let g = self.needs(&ids);
        self.push(v, Op::ConcatCols(ids), g)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let g = self.needs(&[a.0]);
        self.push(v, Op::SliceCols(a.0, start), g)
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        let g = self.needs(&[a.0]);
        self.push(v, Op::Gather(a.0, idx.to_vec()), g)
    }

    /// Output row `i` is `Σ w · a[j]` over the `(j, w)` pairs of `mix[i]`.
    pub fn row_mix(&mut self, a: Var, mix: Vec<Vec<(usize, f64)>>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((mix.len(), src.ncols()));
        for (i, terms) in mix.iter().enumerate() {
            let mut row = v.row_mut(i);
            for &(j, w) in terms {
                row.scaled_add(w, &src.row(j));
            }
        }
        let g = self.needs(&[a.0]);
        self.push(v, Op::RowMix(a.0, mix), g)
    }

    /// Row-major reinterpretation as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape: size mismatch");
        let g = self.needs(&[a.0]);
        self.push(v, Op::Reshape(a.0), g)
    }

    /// Convolution of each row of `x` (an image in `geom`) with `w`
    /// (`out_channels × in_channels·k·k`). No bias.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let input = self.value(x);
        assert_eq!(input.ncols(), geom.in_channels * geom.height * geom.width, "conv2d input size");
        let (oh, ow, k) = (geom.out_height(), geom.out_width(), geom.kernel);
        let batch = input.nrows();
        let mut cols = Array2::zeros((batch * oh * ow, geom.patch_len()));
        for b in 0..batch {
            let img = input.row(b);
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut row = cols.row_mut(b * oh * ow + y * ow + x0);
                    let mut p = 0;
                    for c in 0..geom.in_channels {
                        for dy in 0..k {
                            let base = c * geom.height * geom.width + (y + dy) * geom.width + x0;
                            for dx in 0..k {
                                row[p] = img[base + dx];
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        let out = cols.dot(&self.value(w).t());
        let ohw = oh * ow;
        let mut v = Array2::zeros((batch, geom.out_channels * ohw));
        for b in 0..batch {
            for p in 0..ohw {
                for c in 0..geom.out_channels {
                    v[[b, c * ohw + p]] = out[[b * ohw + p, c]];
                }
            }
        }
        let g = self.needs(&[x.0, w.0]);
        self.push(v, Op::Conv2d { x: x.0, w: w.0, geom, cols }, g)
    }

    /// Adds `b[c]` to every value of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var, channels: usize) -> Var {
        let bias = self.value(b).clone();
        let mut v = self.value(x).clone();
        let spatial = v.ncols() / channels;
        for mut row in v.rows_mut() {
            for c in 0..channels {
                row.slice_mut(s![c * spatial..(c + 1) * spatial]).mapv_inplace(|y| y + bias[[0, c]]);
            }
        }
        let g = self.needs(&[x.0, b.0]);
        self.push(v, Op::ChannelBias { x: x.0, b: b.0, channels }, g)
    }

    /// Training-mode batch normalization over batch and spatial positions
    /// of each channel. Returns the output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, channels: usize, eps: f64) -> (Var, BatchStats) {
        let input = self.value(x);
        let n = (input.nrows() * input.ncols() / channels) as f64;
        let mut mean = Array1::<f64>::zeros(channels);
        for (b, c, j) in channel_iter(input, channels) {
            mean[c] += input[[b, j]];
        }
        mean /= n;
        let mut var = Array1::<f64>::zeros(channels);
        for (b, c, j) in channel_iter(input, channels) {
            let d = input[[b, j]] - mean[c];
            var[c] += d * d;
        }
        var /= n;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let (v, xhat) = self.affine_normalize(x, gamma, beta, channels, &mean, &inv_std);
        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var };
        let g = self.needs(&[x.0, gamma.0, beta.0]);
        let out = self.push(
            v,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channels,
                xhat,
                inv_std,
            },
            g,
        );
        (out, BatchStats { mean, var: unbiased })
    }

    /// Evaluation-mode normalization with fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let (v, xhat) = self.affine_normalize(x, gamma, beta, channels, mean, &inv_std);
        let g = self.needs(&[x.0, gamma.0, beta.0]);
        self.push(
            v,
            Op::ChannelAffine {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channels,
                xhat,
                inv_std,
            },
            g,
        )
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        mean: &Array1<f64>,
        inv_std: &Array1<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let input = self.value(x);
        let (gm, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = Array2::zeros(input.raw_dim());
        let mut v = Array2::zeros(input.raw_dim());
        for (b, c, j) in channel_iter(input, channels) {
            let h = (input[[b, j]] - mean[c]) * inv_std[c];
            xhat[[b, j]] = h;
            v[[b, j]] = gm[[0, c]] * h + bt[[0, c]];
        }
        (v, xhat)
    }

    /// `out[i][j] = −‖a_i − b_j‖²`, computed by expansion and clamped at 0.
    pub fn neg_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let an = av.map_axis(Axis(1), |r| r.dot(&r));
        let bn = bv.map_axis(Axis(1), |r| r.dot(&r));
        let mut v = av.dot(&bv.t()) * 2.0;
        Zip::indexed(&mut v).for_each(|(i, j), x| {
            // Rounding can push a zero distance slightly positive; NaN must
            // survive the clamp.
            let d = *x - an[i] - bn[j];
            *x = if d > 0.0 { 0.0 } else { d };
        });
        let g = self.needs(&[a.0, b.0]);
        self.push(v, Op::NegSqDist(a.0, b.0), g)
    }

    /// Mean binary cross-entropy of `σ(x)` against `targets` over all
    /// entries, with each log clamped below at `ln 1e-12`. Returns `1 × 1`.
    pub fn bce_with_logits_mean(&mut self, x: Var, targets: &Array2<f64>) -> Var {
        let logits = self.value(x);
        assert_eq!(logits.dim(), targets.dim(), "bce target shape");
        let floor = 1e-12f64.ln();
        let n = logits.len() as f64;
        let mut total = 0.0;
        let mut grad = Array2::zeros(logits.raw_dim());
        Zip::from(&mut grad).and(logits).and(targets).for_each(|g, &z, &y| {
            let log_p = -softplus(-z);
            let log_q = -softplus(z);
            let p = sigmoid(z);
            let mut d = 0.0;
            if log_p > floor {
                d -= y * (1.0 - p);
            }
            if log_q > floor {
                d += (1.0 - y) * p;
            }
            // `f64::max` would turn a NaN logit into the floor.
            let clamp = |v: f64| if v < floor { floor } else { v };
            total -= y * clamp(log_p) + (1.0 - y) * clamp(log_q);
            *g = d / n;
        });
        let g = self.needs(&[x.0]);
        self.push(Array2::from_elem((1, 1), total / n), Op::Loss(x.0, grad), g)
    }

    /// `Σ a ⊙ w` as a `1 × 1` value.
    pub fn weighted_sum(&mut self, a: Var, w: Array2<f64>) -> Var {
        let v = (self.value(a) * &w).sum();
        let g = self.needs(&[a.0]);
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSum(a.0, w), g)
    }

    /// Back-propagates from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones(self.nodes[out.0].value.raw_dim()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].grad;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.dot(val(*b)));
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], -g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g * val(*b));
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*r) {
                    accumulate(&mut grads[*r], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[*a], g * *k),
            Op::MulConst(a, c) => accumulate(&mut grads[*a], g * c),
            Op::MulRows(a, k) => accumulate(&mut grads[*a], g * &k.view().insert_axis(Axis(1))),
            Op::Sigmoid(a) => {
                let y = &node.value;
                accumulate(&mut grads[*a], g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                accumulate(&mut grads[*a], g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(&mut grads[*a], d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if wants(p) {
                        accumulate(&mut grads[p], g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[*a], d);
            }
            Op::Gather(a, idx) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                for (r, &j) in idx.iter().enumerate() {
                    let mut row = d.row_mut(j);
                    row += &g.row(r);
                }
                accumulate(&mut grads[*a], d);
            }
            Op::RowMix(a, mix) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                for (r, terms) in mix.iter().enumerate() {
                    for &(j, w) in terms {
                        d.row_mut(j).scaled_add(w, &g.row(r));
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(&mut grads[*a], Array2::from_shape_vec(val(*a).raw_dim(), flat).unwrap());
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (oh, ow, k) = (geom.out_height(), geom.out_width(), geom.kernel);
                let ohw = oh * ow;
                let batch = g.nrows();
                let mut gm = Array2::zeros((batch * ohw, geom.out_channels));
                for b in 0..batch {
                    for c in 0..geom.out_channels {
                        for p in 0..ohw {
                            gm[[b * ohw + p, c]] = g[[b, c * ohw + p]];
                        }
                    }
                }
                if wants(*w) {
                    accumulate(&mut grads[*w], gm.t().dot(cols));
                }
                if wants(*x) {
                    let dcols = gm.dot(val(*w));
                    let mut dx = Array2::zeros((batch, geom.in_channels * geom.height * geom.width));
                    for b in 0..batch {
                        for y in 0..oh {
                            for x0 in 0..ow {
                                let row = dcols.row(b * ohw + y * ow + x0);
                                let mut p = 0;
                                for c in 0..geom.in_channels {
                                    for dy in 0..k {
                                        let base = c * geom.height * geom.width + (y + dy) * geom.width + x0;
                                        for dx_ in 0..k {
                                            dx[[b, base + dx_]] += row[p];
                                            p += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::ChannelBias { x, b, channels } => {
                if wants(*x) {
                    accumulate(&mut grads[*x], g.clone());
                }
                if wants(*b) {
                    let mut d = Array2::zeros((1, *channels));
                    for (r, c, j) in channel_iter(g, *channels) {
                        d[[0, c]] += g[[r, j]];
                    }
                    accumulate(&mut grads[*b], d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
            } => {
                let c = *channels;
                let n = (g.len() / c) as f64;
                let gm = val(*gamma);
                let mut sum_g = Array1::<f64>::zeros(c);
                let mut sum_gx = Array1::<f64>::zeros(c);
                for (r, ch, j) in channel_iter(g, c) {
                    sum_g[ch] += g[[r, j]];
                    sum_gx[ch] += g[[r, j]] * xhat[[r, j]];
                }
                if wants(*gamma) {
                    accumulate(&mut grads[*gamma], sum_gx.clone().insert_axis(Axis(0)));
                }
                if wants(*beta) {
                    accumulate(&mut grads[*beta], sum_g.clone().insert_axis(Axis(0)));
                }
                if wants(*x) {
                    let mut dx = Array2::zeros(g.raw_dim());
                    for (r, ch, j) in channel_iter(g, c) {
                        dx[[r, j]] = gm[[0, ch]] * inv_std[ch] / n
                            * (n * g[[r, j]] - sum_g[ch] - xhat[[r, j]] * sum_gx[ch]);
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
            } => {
                let c = *channels;
                let gm = val(*gamma);
                if wants(*gamma) || wants(*beta) {
                    let mut dg = Array2::zeros((1, c));
                    let mut db = Array2::zeros((1, c));
                    for (r, ch, j) in channel_iter(g, c) {
                        dg[[0, ch]] += g[[r, j]] * xhat[[r, j]];
                        db[[0, ch]] += g[[r, j]];
                    }
                    if wants(*gamma) {
                        accumulate(&mut grads[*gamma], dg);
                    }
                    if wants(*beta) {
                        accumulate(&mut grads[*beta], db);
                    }
                }
                if wants(*x) {
                    let mut dx = Array2::zeros(g.raw_dim());
                    for (r, ch, j) in channel_iter(g, c) {
                        dx[[r, j]] = g[[r, j]] * gm[[0, ch]] * inv_std[ch];
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::NegSqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let rows = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = (g.dot(bv) - &(av * &rows)) * 2.0;
                    accumulate(&mut grads[*a], d);
                }
                if wants(*b) {
                    let cols = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let d = (g.t().dot(av) - &(bv * &cols)) * 2.0;
                    accumulate(&mut grads[*b], d);
                }
            }
            Op::Loss(a, d) => accumulate(&mut grads[*a], d * g[[0, 0]]),
            Op::WeightedSum(a, w) => accumulate(&mut grads[*a], w * g[[0, 0]]),
        }
    }
}
