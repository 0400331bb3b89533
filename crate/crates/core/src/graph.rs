//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in creation order; [`Graph::backward`] walks
//! the tape in exact reverse order. Leaves that require gradients accumulate
//! into their grad buffer across repeated backward calls until cleared.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel moments of the batch a normalization was computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Values per channel the moments were taken over.
    pub count: usize,
}

/// Which statistics a normalization op divides by.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Recompute mean/variance on the current batch and backpropagate through them.
    Batch,
    /// Use stored statistics; they are constants to autodiff.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatmulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, out_ch: usize, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool, n: usize, c: usize, hw: usize },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, cols: usize },
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool { x: Var, hw: usize },
    AvgPool2d { x: Var, k: usize, c: usize, h: usize, w: usize },
    TopTPool { x: Var, hw: usize, picks: Vec<usize>, count: usize },
    Reshape(Var),
    Concat { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    SliceRows { x: Var, start: usize, row_len: usize },
    WeightedSum { feat: Var, weights: Var, k: usize, f: usize },
    Grl { x: Var, lambda: f64 },
    Bce { pred: Var, target: Vec<f64>, clamped: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Probabilities are clamped this far inside (0, 1) before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            Ok((sa, va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()))
        } else if vb.len() == 1 {
            let y = vb[0];
            Ok((sa, va.iter().map(|x| f(*x, y)).collect()))
        } else if va.len() == 1 {
            let x = va[0];
            Ok((sb, vb.iter().map(|y| f(x, *y)).collect()))
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x + s).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, data, rg, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * s).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, data, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, data, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, data, rg, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = shape.last().copied().unwrap_or(1);
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::Softmax { x: a, cols })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid(format!("log of non-positive value {bad}")));
        }
        let data = self.value(a).iter().map(|x| x.ln()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(shape, data, rg, Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.abs()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, data, rg, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], rg, Op::Mean(a))
    }

    /// Gradient reversal: identity forward, `-lambda · upstream` backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("gradient reversal needs lambda >= 0, got {lambda}")));
        }
        let data = self.value(a).to_vec();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(shape, data, rg, Op::Grl { x: a, lambda }))
    }

    // ----- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Concatenates two `rows×_` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", format!("{sa:?} with {sb:?}")));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows, ca + cb], data, rg, Op::Concat { a, b, rows, ca, cb }))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {shape:?}")));
        }
        let row_len: usize = shape[1..].iter().product();
        let data = self.value(a)[start * row_len..(start + len) * row_len].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(out_shape, data, rg, Op::SliceRows { x: a, start, row_len }))
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// Adds a length-`F` bias to every row of an `N×F` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let f = self.value(bias).len();
        if sx.len() != 2 || sx[1] != f {
            return Err(Error::shape("add_bias", format!("{sx:?} + [{f}]")));
        }
        let b = self.value(bias).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx, data, rg, Op::AddBias { x, bias }))
    }

    /// `x · wᵀ + b` for `x: N×in`, `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("input {sx:?} with weight {sw:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(m, k, n, self.value(x), self.value(w), &mut out);
        let rg = self.rg(x) || self.rg(w);
        let y = self.push(vec![m, n], out, rg, Op::MatmulNt { a: x, b: w, m, k, n });
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ----- convolution / pooling ----------------------------------------

    /// Cross-correlation of `x: N×C×H×W` with `w: O×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("{} input channels, weight expects {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::shape("conv2d", format!("bias of {} for {o} filters", self.value(b).len())));
            }
        }
        let geom = ConvGeom {
            channels: c, height: h, width: wd, kh, kw, stride, pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        let (xv, wv) = (self.value(x), self.value(w));
        for i in 0..n {
            let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let col = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
            kernels::im2col(&geom, img, col);
            kernels::gemm_nn(o, rows, ncols, wv, col, &mut out[i * o * ncols..(i + 1) * o * ncols]);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for i in 0..n {
                for f in 0..o {
                    let base = (i * o + f) * ncols;
                    out[base..base + ncols].iter_mut().for_each(|v| *v += bv[f]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // Columns are only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            vec![n, o, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d { x, w, b, geom, batch: n, out_ch: o, cols },
        ))
    }

    /// Per-channel normalization of `N×C×H×W` (or `N×C`) input followed by a
    /// `gamma`/`beta` affine map. With [`NormStats::Batch`] the batch moments
    /// are returned alongside the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("batch norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = match shape.as_slice() {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            _ => return Err(Error::shape("batch_norm", format!("input {shape:?}"))),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels, gamma/beta sized {}/{}", self.value(gamma).len(), self.value(beta).len())));
        }
        let m = n * hw;
        let xv = self.value(x);
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                if m < 2 {
                    return Err(Error::BatchTooSmall(m));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                let moments = BatchMoments { mean: mean.clone(), var: var.clone(), count: m };
                (mean, var, Some(moments))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "stored statistics have wrong channel count"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = moments.is_some();
        let v = self.push(shape, out, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, n, c, hw });
        Ok((v, moments))
    }

    /// Spatial mean: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self.value(x).chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[1]], data, rg, Op::GlobalAvgPool { x, hw }))
    }

    /// Non-overlapping `k×k` average pooling (trailing rows/columns dropped).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("avg_pool2d", format!("input {s:?} with window {k}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for p in 0..n * c {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let row = &plane[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                        acc += row.iter().sum::<f64>();
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::AvgPool2d { x, k, c, h, w }))
    }

    /// Mean of the `ceil(t·H·W)` largest values of every `H×W` map.
    pub fn top_t_pool(&mut self, x: Var, t: f64) -> Result<Var> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid(format!("top-t fraction must be in (0, 1], got {t}")));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("top_t_pool", format!("input {s:?}")));
        }
        let hw = s[2] * s[3];
        let count = top_t_count(t, hw);
        let xv = self.value(x);
        let mut picks = Vec::with_capacity(s[0] * s[1] * count);
        let mut out = Vec::with_capacity(s[0] * s[1]);
        let mut order: Vec<usize> = Vec::with_capacity(hw);
        for (g, plane) in xv.chunks(hw).enumerate() {
            order.clear();
            order.extend(0..hw);
            order.sort_by(|&a, &b| plane[b].total_cmp(&plane[a]));
            let mut acc = 0.0;
            for &i in &order[..count] {
                acc += plane[i];
                picks.push(g * hw + i);
            }
            out.push(acc / count as f64);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[1]], out, rg, Op::TopTPool { x, hw, picks, count }))
    }

    /// Attention pooling: `feat: (N·K)×F`, `weights: N×K -> N×F`.
    pub fn weighted_sum(&mut self, feat: Var, weights: Var) -> Result<Var> {
        let (sf, sw) = (self.shape(feat).to_vec(), self.shape(weights).to_vec());
        if sf.len() != 2 || sw.len() != 2 || sf[0] != sw[0] * sw[1] {
            return Err(Error::shape("weighted_sum", format!("features {sf:?}, weights {sw:?}")));
        }
        let (n, k, f) = (sw[0], sw[1], sf[1]);
        let (fv, wv) = (self.value(feat), self.value(weights));
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..k {
                let a = wv[i * k + j];
                let row = &fv[(i * k + j) * f..(i * k + j + 1) * f];
                out[i * f..(i + 1) * f].iter_mut().zip(row).for_each(|(o, v)| *o += a * v);
            }
        }
        let rg = self.rg(feat) || self.rg(weights);
        Ok(self.push(vec![n, f], out, rg, Op::WeightedSum { feat, weights, k, f }))
    }

    // ----- losses --------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    ///
    /// Predictions must lie in `[0, 1]`; they are clamped by [`BCE_CLAMP`]
    /// before the logarithm so saturated sigmoids stay finite.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::shape("bce", format!("{} predictions, {} targets", pv.len(), target.len())));
        }
        if let Some(p) = pv.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("prediction {p} outside (0, 1)")));
        }
        if let Some(y) = target.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::invalid(format!("target {y} outside [0, 1]")));
        }
        let clamped: Vec<f64> = pv.iter().map(|p| p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)).collect();
        let loss = clamped
            .iter()
            .zip(target)
            .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / pv.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(Vec::new(), vec![loss], rg, Op::Bce { pred, target: target.to_vec(), clamped }))
    }

    // ----- backward ------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let len = node.value.numel();
                let g = grads.get_mut(idx).and_then(Option::take).unwrap_or_else(|| vec![0.0; len]);
                node.value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.broadcast_back(*a, g, 1.0, grads);
                self.broadcast_back(*b, g, sign, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let contrib = mul_broadcast(g, vb);
                    self.broadcast_back(*a, &contrib, 1.0, grads);
                }
                if self.rg(*b) {
                    let contrib = mul_broadcast(g, va);
                    self.broadcast_back(*b, &contrib, 1.0, grads);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.rg(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Scale(a, k) => {
                if self.rg(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g);
                }
            }
            Op::Grl { x, lambda } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += -lambda * g);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let s = slot(grads, *a, g.len());
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let s = slot(grads, *a, g.len());
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, cols } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, g.len());
                    for ((srow, grow), yrow) in s.chunks_mut(*cols).zip(g.chunks(*cols)).zip(out.chunks(*cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((sv, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Log(a) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let s = slot(grads, *a, g.len());
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g / x;
                    }
                }
            }
            Op::Abs(a) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let s = slot(grads, *a, g.len());
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).len();
                    let k = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    slot(grads, *a, n).iter_mut().for_each(|s| *s += k);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let vb = self.value(*b);
                    kernels::gemm_nt(*m, *n, *k, g, vb, slot(grads, *a, m * k));
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    kernels::gemm_tn(*k, *m, *n, va, g, slot(grads, *b, k * n));
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                // out = a · bᵀ with a: m×k, b: n×k
                if self.rg(*a) {
                    let vb = self.value(*b);
                    kernels::gemm_nn(*m, *n, *k, g, vb, slot(grads, *a, m * k));
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    kernels::gemm_tn(*n, *m, *k, g, va, slot(grads, *b, n * k));
                }
            }
            Op::AddBias { x, bias } => {
                let f = self.value(*bias).len();
                if self.rg(*x) {
                    let s = slot(grads, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if self.rg(*bias) {
                    let s = slot(grads, *bias, f);
                    for row in g.chunks(f) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, batch, out_ch, cols } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.channels * geom.height * geom.width;
                if self.rg(*w) {
                    let sw = slot(grads, *w, out_ch * rows);
                    for i in 0..*batch {
                        let gi = &g[i * out_ch * ncols..(i + 1) * out_ch * ncols];
                        let col = &cols[i * rows * ncols..(i + 1) * rows * ncols];
                        kernels::gemm_nt(*out_ch, ncols, rows, gi, col, sw);
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let sb = slot(grads, *b, *out_ch);
                        for i in 0..*batch {
                            for f in 0..*out_ch {
                                let base = (i * out_ch + f) * ncols;
                                sb[f] += g[base..base + ncols].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let mut dcol = vec![0.0; rows * ncols];
                    let sx = slot(grads, *x, batch * img_len);
                    for i in 0..*batch {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        let gi = &g[i * out_ch * ncols..(i + 1) * out_ch * ncols];
                        kernels::gemm_tn(rows, *out_ch, ncols, wv, gi, &mut dcol);
                        kernels::col2im(geom, &dcol, &mut sx[i * img_len..(i + 1) * img_len]);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, n, c, hw } => {
                let (n, c, hw) = (*n, *c, *hw);
                let gv = self.value(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*gamma) {
                    slot(grads, *gamma, c).iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v);
                }
                if self.rg(*beta) {
                    slot(grads, *beta, c).iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v);
                }
                if self.rg(*x) {
                    let m = (n * hw) as f64;
                    let sx = slot(grads, *x, g.len());
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            if *batch_stats {
                                let mg = sum_g[ch] / m;
                                let mgx = sum_gx[ch] / m;
                                for j in base..base + hw {
                                    sx[j] += k * (g[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in base..base + hw {
                                    sx[j] += k * g[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x, hw } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, g.len() * hw);
                    for (plane, gv) in s.chunks_mut(*hw).zip(g) {
                        let k = gv / *hw as f64;
                        plane.iter_mut().for_each(|v| *v += k);
                    }
                }
            }
            Op::AvgPool2d { x, k, c, h, w } => {
                if self.rg(*x) {
                    let (oh, ow) = (h / k, w / k);
                    let planes = g.len() / (oh * ow);
                    debug_assert_eq!(planes % c, 0);
                    let norm = 1.0 / (k * k) as f64;
                    let s = slot(grads, *x, planes * h * w);
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(p * oh + oy) * ow + ox] * norm;
                                for dy in 0..*k {
                                    let base = p * h * w + (oy * k + dy) * w + ox * k;
                                    s[base..base + k].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                }
            }
            Op::TopTPool { x, hw, picks, count } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, g.len() * hw);
                    for (grp, gv) in g.iter().enumerate() {
                        let k = gv / *count as f64;
                        for &i in &picks[grp * count..(grp + 1) * count] {
                            s[i] += k;
                        }
                    }
                }
            }
            Op::Concat { a, b, rows, ca, cb } => {
                let w = ca + cb;
                if self.rg(*a) {
                    let s = slot(grads, *a, rows * ca);
                    for r in 0..*rows {
                        for j in 0..*ca {
                            s[r * ca + j] += g[r * w + j];
                        }
                    }
                }
                if self.rg(*b) {
                    let s = slot(grads, *b, rows * cb);
                    for r in 0..*rows {
                        for j in 0..*cb {
                            s[r * cb + j] += g[r * w + ca + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start, row_len } => {
                if self.rg(*x) {
                    let total = self.value(*x).len();
                    let s = slot(grads, *x, total);
                    let off = start * row_len;
                    s[off..off + g.len()].iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::WeightedSum { feat, weights, k, f } => {
                let (k, f) = (*k, *f);
                let n = g.len() / f;
                if self.rg(*feat) {
                    let wv = self.value(*weights);
                    let s = slot(grads, *feat, n * k * f);
                    for i in 0..n {
                        for j in 0..k {
                            let a = wv[i * k + j];
                            let base = (i * k + j) * f;
                            for t in 0..f {
                                s[base + t] += a * g[i * f + t];
                            }
                        }
                    }
                }
                if self.rg(*weights) {
                    let fv = self.value(*feat);
                    let s = slot(grads, *weights, n * k);
                    for i in 0..n {
                        for j in 0..k {
                            let base = (i * k + j) * f;
                            s[i * k + j] += (0..f).map(|t| g[i * f + t] * fv[base + t]).sum::<f64>();
                        }
                    }
                }
            }
            Op::Bce { pred, target, clamped } => {
                if self.rg(*pred) {
                    let n = target.len() as f64;
                    let s = slot(grads, *pred, target.len());
                    for ((s, y), p) in s.iter_mut().zip(target).zip(clamped) {
                        *s += g[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
                    }
                }
            }
        }
    }

    /// Routes `g` (shaped like the op output) into operand `v`, summing when
    /// `v` was a broadcast scalar.
    fn broadcast_back(&self, v: Var, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).len();
        let s = slot(grads, v, len);
        if len == g.len() {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
        } else {
            s[0] += sign * g.iter().sum::<f64>();
        }
    }
}

fn mul_broadcast(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(a, b)| a * b).collect()
    } else {
        g.iter().map(|a| a * other[0]).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Number of values pooled by top-t pooling over `hw` positions.
pub fn top_t_count(t: f64, hw: usize) -> usize {
    (((t * hw as f64) - 1e-9).ceil() as usize).clamp(1, hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{gradcheck, random_tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_slice(&[1.0, 2.0]));
        let b = g.constant(Tensor::from_slice(&[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let h = g.constant(Tensor::from_slice(&[2.0, 4.0]));
        let half = g.scale(h, 0.5);
        assert_eq!(g.value(half), &[1.0, 2.0]);
        let bad = g.constant(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn mul_by_zero_kills_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.5, -2.0, 3.0]).with_requires_grad(true));
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.mul(x, zero).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p), g.value(m));
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(r, c).unwrap();
        assert_eq!(g.value(d), &[11.0]);
        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn matmul_gradcheck() {
        let a = random_tensor(&[3, 4], 1);
        let b = random_tensor(&[4, 2], 2);
        let err = gradcheck(&[a, b], |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&[2, 3], 5).with_requires_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        // repeated backward accumulates
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grads();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad_buffer() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0]).with_requires_grad(true));
        let y = g.leaf(Tensor::from_slice(&[1.0, 1.0]).with_requires_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_gradchecks() {
        let a = random_tensor(&[2, 3], 11);
        let b = random_tensor(&[2, 3], 12);
        let s = random_tensor(&[1], 13);
        let err = gradcheck(&[a.clone(), b.clone(), s], |g, v| {
            let x = g.mul(v[0], v[1])?;
            let y = g.sub(x, v[2])?;
            let z = g.add(y, v[0])?;
            let z = g.scale(z, 1.7);
            let z = g.add_scalar(z, 0.3);
            let z = g.sigmoid(z);
            let zz = g.mul(z, z)?;
            Ok(g.mean(zz))
        });
        assert!(err < 1e-7, "{err}");

        let pos = Tensor::new(vec![2, 3], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        let err = gradcheck(&[pos, b], |g, v| {
            let l = g.log(v[0])?;
            let r = g.relu(v[1]);
            let ab = g.abs(v[1]);
            let m = g.mul(l, r)?;
            let m = g.add(m, ab)?;
            Ok(g.sum(m))
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_rows_and_grad() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = g.softmax(z);
        assert_eq!(g.value(s), &[0.5, 0.5]);

        let x = random_tensor(&[3, 4], 21);
        let w = random_tensor(&[3, 4], 22);
        let err = gradcheck(&[x, w], |g, v| {
            let s = g.softmax(v[0]);
            let p = g.mul(s, v[1])?;
            Ok(g.sum(p))
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn relu_sigmoid_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn linear_and_bias_gradcheck() {
        let x = random_tensor(&[4, 3], 31);
        let w = random_tensor(&[2, 3], 32);
        let b = random_tensor(&[2], 33);
        let err = gradcheck(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = random_tensor(&[1, 1, 4, 4], 41);
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(xv, one, None, 1, 0).unwrap();
        assert_eq!(g.value(y), x.data());

        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(ones, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);

        let bad = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        assert!(g.conv2d(bad, k, None, 1, 0).is_err());
    }

    #[test]
    fn conv_output_extent_formula() {
        for (h, k, s, p) in [(8, 3, 1, 1), (9, 3, 2, 1), (16, 5, 2, 2), (7, 4, 4, 0)] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[1, 1, h, h + 1]));
            let w = g.constant(Tensor::zeros(&[2, 1, k, k]));
            let y = g.conv2d(x, w, None, s, p).unwrap();
            assert_eq!(g.shape(y), &[1, 2, (h + 2 * p - k) / s + 1, (h + 1 + 2 * p - k) / s + 1]);
        }
    }

    #[test]
    fn conv_gradcheck() {
        let x = random_tensor(&[2, 3, 8, 8], 51);
        let w = random_tensor(&[4, 3, 3, 3], 52);
        let b = random_tensor(&[4], 53);
        let r = random_tensor(&[2, 4, 4, 4], 54);
        let err = gradcheck(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let rr = g.constant(r.clone());
            let p = g.mul(y, rr)?;
            let p2 = g.mul(p, p)?;
            Ok(g.sum(p2))
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p), &[4.0]);
        let c = g.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).iter().all(|v| (*v - 2.5).abs() < 1e-15));

        let m = g.constant(t(&[1, 1, 2, 2], &[4.0, 3.0, 2.0, 1.0]));
        let tp = g.top_t_pool(m, 0.5).unwrap();
        assert_eq!(g.value(tp), &[3.5]);
        let tp1 = g.top_t_pool(m, 1.0).unwrap();
        assert_eq!(g.value(tp1), &[2.5]);
        let tpc = g.top_t_pool(c, 0.07).unwrap();
        assert!(g.value(tpc).iter().all(|v| (*v - 2.5).abs() < 1e-15));
        assert!(g.top_t_pool(m, 0.0).is_err());
        assert!(g.top_t_pool(m, 1.5).is_err());
    }

    #[test]
    fn global_avg_pool_matches_direct_sum() {
        let x = random_tensor(&[2, 3, 5, 4], 61);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = g.global_avg_pool(xv).unwrap();
        for (i, plane) in x.data().chunks(20).enumerate() {
            let mut s = 0.0;
            for v in plane {
                s += v;
            }
            assert!((g.value(p)[i] - s / 20.0).abs() < 1e-14);
        }
    }

    #[test]
    fn pooling_gradchecks() {
        let x = random_tensor(&[2, 2, 4, 6], 71);
        let err = gradcheck(&[x], |g, v| {
            let a = g.global_avg_pool(v[0])?;
            let b = g.top_t_pool(v[0], 0.2)?;
            let c = g.avg_pool2d(v[0], 2)?;
            let c = g.global_avg_pool(c)?;
            let ab = g.mul(a, b)?;
            let abc = g.mul(ab, c)?;
            Ok(g.sum(abc))
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn shape_op_gradchecks() {
        let f = random_tensor(&[6, 3], 81);
        let w = random_tensor(&[2, 3], 82);
        let o = random_tensor(&[6, 2], 83);
        let err = gradcheck(&[f, w, o], |g, v| {
            let ws = g.softmax(v[1]);
            let pooled = g.weighted_sum(v[0], ws)?;
            let cat = g.concat_cols(pooled, pooled)?;
            let sl = g.slice_rows(v[2], 2, 2)?;
            let sl = g.reshape(sl, vec![2, 2])?;
            let cat = g.concat_cols(cat, sl)?;
            let sq = g.mul(cat, cat)?;
            Ok(g.sum(sq))
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn bce_values_and_grad() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_slice(&[0.5, 0.5]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = g.constant(Tensor::from_slice(&[1.5]));
        assert!(g.bce(bad, &[1.0]).is_err());

        let logits = random_tensor(&[3, 2], 91);
        let err = gradcheck(&[logits], |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grl_examples() {
        let x0 = random_tensor(&[2, 3], 101);
        for (lambda, want) in [(0.0, 0.0), (1.0, -1.0)] {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone().with_requires_grad(true));
            let r = g.grl(x, lambda).unwrap();
            assert_eq!(g.value(r), x0.data());
            let l = g.sum(r);
            g.backward(l).unwrap();
            assert!(g.grad(x).unwrap().iter().all(|v| *v == want));
        }
        let mut g = Graph::new();
        let x = g.leaf(x0.with_requires_grad(true));
        assert!(g.grl(x, -0.1).is_err());
    }

    #[test]
    fn linearity_of_backward() {
        let x0 = random_tensor(&[5], 111);
        let grad_of = |build: &dyn Fn(&mut Graph, Var) -> Var| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone().with_requires_grad(true));
            let l = build(&mut g, x);
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let f = |g: &mut Graph, x: Var| {
            let s = g.sigmoid(x);
            g.sum(s)
        };
        let h = |g: &mut Graph, x: Var| {
            let s = g.mul(x, x).unwrap();
            g.mean(s)
        };
        let (a, b) = (0.7, -2.3);
        let combo = grad_of(&|g, x| {
            let fv = f(g, x);
            let hv = h(g, x);
            let fa = g.scale(fv, a);
            let hb = g.scale(hv, b);
            g.add(fa, hb).unwrap()
        });
        let gf = grad_of(&f);
        let gh = grad_of(&h);
        for i in 0..5 {
            assert!((combo[i] - (a * gf[i] + b * gh[i])).abs() < 1e-14);
        }
    }
}
