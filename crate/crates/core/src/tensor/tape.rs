use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanAxis0(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    GradReverse(Var, f64),
    NormalizeRows(Var, Vec<f64>),
    PairwiseSqDist(Var),
}

/// Records operations in creation order; indices double as topological order.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(op, format!("expected a rank-2 tensor, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let op = if requires { op } else { Op::Leaf };
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Records an input. Gradients are only tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros when none flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.values[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad length mirrors value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.values[a.0];
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let width = *sx.last().unwrap();
        if sb != [width] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let b = self.values[bias.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_mut(width) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Shift(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols("matmul", &self.values[a.0])?;
        let (k2, n) = rows_cols("matmul", &self.values[b.0])?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Fully connected layer: `x [m, in] * w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.values[a.0].data();
        let total: f64 = src.iter().sum();
        let value = Tensor::scalar(total / src.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Sums each row of `[m, n]`, giving `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols("sum_rows", &self.values[a.0])?;
        let data = self.values[a.0]
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let value = Tensor::new(vec![m], data)?;
        Ok(self.push(value, Op::SumRows(a), &[a]))
    }

    /// Averages `[m, n]` over its first axis, giving `[1, n]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols("mean_axis0", &self.values[a.0])?;
        let mut data = vec![0.0; n];
        for row in self.values[a.0].data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let value = Tensor::new(vec![1, n], data)?;
        Ok(self.push(value, Op::MeanAxis0(a), &[a]))
    }

    /// Softmax over the last axis of a `[m, n]` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = rows_cols("softmax", &self.values[a.0])?;
        let data = kernels::softmax_rows(self.values[a.0].data(), n);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = rows_cols("log_softmax", &self.values[a.0])?;
        let data = kernels::log_softmax_rows(self.values[a.0].data(), n);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.values[p.0].data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.values[a.0].numel() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = self.values[a.0].reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Selects rows (first-axis slices) of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let src = &self.values[a.0];
        let lead = src.shape()[0];
        if rows.is_empty() {
            return Err(invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= lead) {
            return Err(invalid(
                "gather_rows",
                format!("row {bad} out of range for shape {:?}", src.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * src.numel() / lead);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Picks flat elements of `a`, giving a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.values[a.0].data();
        if idx.is_empty() {
            return Err(invalid("gather", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(value, Op::Gather(a, idx.to_vec()), &[a]))
    }

    /// 2-D convolution of `x [N, C, H, W]` with square kernels `w [O, C, k, k]`
    /// plus bias `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, c, h, wd) = match sx {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(invalid("conv2d", format!("input must be rank 4, got {sx:?}"))),
        };
        let (o, k) = match sw {
            [o, ci, k1, k2] if *ci == c && k1 == k2 => (*o, *k1),
            _ => return Err(mismatch("conv2d", sx, sw)),
        };
        if sb != [o] {
            return Err(mismatch("conv2d", sw, sb));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid(
                "conv2d",
                format!("kernel {k} with stride {stride} and pad {pad} does not fit {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        let xs = self.values[x.0].data();
        let ws = self.values[w.0].data();
        let bs = self.values[b.0].data();
        for i in 0..n {
            let col = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
            kernels::im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], &geom, col);
            let dst = &mut out[i * o * ncols..(i + 1) * o * ncols];
            for (ch, plane) in dst.chunks_mut(ncols).enumerate() {
                plane.fill(bs[ch]);
            }
            kernels::gemm(o, rows, ncols, ws, false, col, false, 1.0, dst);
        }
        let value = Tensor::new(vec![n, o, geom.out_h(), geom.out_w()], out)?;
        let needs = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: if needs { cols } else { Vec::new() },
        };
        Ok(self.push(value, op, &[x, w, b]))
    }

    /// Max pooling with a square window over `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(invalid("max_pool2d", format!("input must be rank 4, got {s:?}"))),
        };
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(invalid(
                "max_pool2d",
                format!("window {kernel}/{stride} does not fit {h}x{w}"),
            ));
        }
        let (out, arg) = kernels::max_pool(self.values[x.0].data(), n * c, h, w, kernel, stride);
        let shape = vec![n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool(x, arg), &[x]))
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => {
                return Err(invalid(
                    "global_avg_pool",
                    format!("input must be rank 4, got {s:?}"),
                ))
            }
        };
        let area = (h * w) as f64;
        let data = self.values[x.0]
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.values[x.0].clone();
        self.push(value, Op::GradReverse(x, lambda), &[x])
    }

    /// Scales each row of `[m, n]` to unit L2 norm (norms floored at `eps`).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, n) = rows_cols("normalize_rows", &self.values[x.0])?;
        let src = self.values[x.0].data();
        let mut norms = Vec::with_capacity(src.len() / n);
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::NormalizeRows(x, norms), &[x]))
    }

    /// Squared Euclidean distances between all rows: `[m, d] -> [m, m]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let (m, d) = rows_cols("pairwise_sq_dist", &self.values[x.0])?;
        let src = self.values[x.0].data();
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let dist: f64 = src[i * d..(i + 1) * d]
                    .iter()
                    .zip(&src[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                data[i * m + j] = dist;
                data[j * m + i] = dist;
            }
        }
        let value = Tensor::new(vec![m, m], data)?;
        Ok(self.push(value, Op::PairwiseSqDist(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from a previous sweep are
    /// discarded; within one sweep they accumulate over every use of a value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape {
            values,
            grads,
            requires,
            ops,
        } = self;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(&ops[i], &values[i], &g, values, grads, requires);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    values: &[Tensor],
    requires: &[bool],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !requires[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].numel()]))
}

fn backprop(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
) {
    macro_rules! acc {
        ($v:expr) => {
            slot(grads, values, requires, $v)
        };
    }
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(ga) = acc!(v) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc!(*a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = acc!(*b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (values[a.0].data(), values[b.0].data());
            if let Some(ga) = acc!(*a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * y;
                }
            }
            if let Some(gb) = acc!(*b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * x;
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc!(*x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = acc!(*b) {
                let width = gb.len();
                for row in g.chunks(width) {
                    gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(ga) = acc!(*a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += f * s);
            }
        }
        Op::Shift(a) | Op::Reshape(a) => {
            if let Some(ga) = acc!(*a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
            let n = values[b.0].shape()[1];
            if let Some(ga) = acc!(*a) {
                kernels::gemm(m, n, k, g, false, values[b.0].data(), true, 1.0, ga);
            }
            if let Some(gb) = acc!(*b) {
                kernels::gemm(k, m, n, values[a.0].data(), true, g, false, 1.0, gb);
            }
        }
        Op::Relu(a) => {
            let x = values[a.0].data();
            if let Some(ga) = acc!(*a) {
                for ((d, s), xv) in ga.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc!(*a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y;
                }
            }
        }
        Op::Log(a) => {
            let x = values[a.0].data();
            if let Some(ga) = acc!(*a) {
                for ((d, s), xv) in ga.iter_mut().zip(g).zip(x) {
                    *d += s / xv;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = acc!(*a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * 0.5 / y;
                }
            }
        }
        Op::Square(a) => {
            let x = values[a.0].data();
            if let Some(ga) = acc!(*a) {
                for ((d, s), xv) in ga.iter_mut().zip(g).zip(x) {
                    *d += 2.0 * xv * s;
                }
            }
        }
        Op::ClampMin(a, floor) => {
            let x = values[a.0].data();
            if let Some(ga) = acc!(*a) {
                for ((d, s), xv) in ga.iter_mut().zip(g).zip(x) {
                    if *xv > *floor {
                        *d += s;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc!(*a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc!(*a) {
                let share = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += share);
            }
        }
        Op::SumRows(a) => {
            if let Some(ga) = acc!(*a) {
                let width = ga.len() / g.len();
                for (row, s) in ga.chunks_mut(width).zip(g) {
                    row.iter_mut().for_each(|d| *d += s);
                }
            }
        }
        Op::MeanAxis0(a) => {
            if let Some(ga) = acc!(*a) {
                let m = (ga.len() / g.len()) as f64;
                for row in ga.chunks_mut(g.len()) {
                    row.iter_mut().zip(g).for_each(|(d, s)| *d += s / m);
                }
            }
        }
        Op::Softmax(a) => {
            let width = out.shape()[1];
            if let Some(ga) = acc!(*a) {
                for ((d, s), y) in ga
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(out.data().chunks(width))
                {
                    let dot: f64 = s.iter().zip(y).map(|(p, q)| p * q).sum();
                    for ((dd, ss), yy) in d.iter_mut().zip(s).zip(y) {
                        *dd += yy * (ss - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let width = out.shape()[1];
            if let Some(ga) = acc!(*a) {
                for ((d, s), y) in ga
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(out.data().chunks(width))
                {
                    let total: f64 = s.iter().sum();
                    for ((dd, ss), yy) in d.iter_mut().zip(s).zip(y) {
                        *dd += ss - yy.exp() * total;
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = values[p.0].numel();
                if let Some(gp) = acc!(*p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, s)| *d += s);
                }
                offset += len;
            }
        }
        Op::GatherRows(a, rows) => {
            let width = values[a.0].numel() / values[a.0].shape()[0];
            if let Some(ga) = acc!(*a) {
                for (r, s) in rows.iter().zip(g.chunks(width)) {
                    ga[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(s)
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::Gather(a, idx) => {
            if let Some(ga) = acc!(*a) {
                for (&i, s) in idx.iter().zip(g) {
                    ga[i] += s;
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let n = values[x.0].shape()[0];
            let o = values[w.0].shape()[0];
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let in_len = geom.channels * geom.height * geom.width;
            if let Some(gb) = acc!(*b) {
                for img in g.chunks(o * ncols) {
                    for (d, plane) in gb.iter_mut().zip(img.chunks(ncols)) {
                        *d += plane.iter().sum::<f64>();
                    }
                }
            }
            if let Some(gw) = acc!(*w) {
                for i in 0..n {
                    let gy = &g[i * o * ncols..(i + 1) * o * ncols];
                    let col = &cols[i * rows * ncols..(i + 1) * rows * ncols];
                    kernels::gemm(o, ncols, rows, gy, false, col, true, 1.0, gw);
                }
            }
            if requires[x.0] {
                let wv = values[w.0].data();
                let gx = acc!(*x).expect("checked requires");
                let mut dcol = vec![0.0; rows * ncols];
                for i in 0..n {
                    let gy = &g[i * o * ncols..(i + 1) * o * ncols];
                    kernels::gemm(rows, o, ncols, wv, true, gy, false, 0.0, &mut dcol);
                    kernels::col2im_add(&dcol, geom, &mut gx[i * in_len..(i + 1) * in_len]);
                }
            }
        }
        Op::MaxPool(x, arg) => {
            if let Some(gx) = acc!(*x) {
                for (&i, s) in arg.iter().zip(g) {
                    gx[i] += s;
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = values[x.0].shape();
            let area = s[2] * s[3];
            if let Some(gx) = acc!(*x) {
                for (plane, v) in gx.chunks_mut(area).zip(g) {
                    let share = v / area as f64;
                    plane.iter_mut().for_each(|d| *d += share);
                }
            }
        }
        Op::GradReverse(x, lambda) => {
            if let Some(gx) = acc!(*x) {
                let factor = -lambda;
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
            }
        }
        Op::NormalizeRows(x, norms) => {
            let width = out.shape()[1];
            let src = values[x.0].data();
            if let Some(gx) = acc!(*x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let y = &out.data()[span.clone()];
                    let s = &g[span.clone()];
                    let d = &mut gx[span.clone()];
                    let raw: f64 = src[span].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw < norm {
                        // norm was floored: plain scaling
                        d.iter_mut().zip(s).for_each(|(dd, ss)| *dd += ss / norm);
                    } else {
                        let dot: f64 = y.iter().zip(s).map(|(a, b)| a * b).sum();
                        for ((dd, ss), yy) in d.iter_mut().zip(s).zip(y) {
                            *dd += (ss - yy * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::PairwiseSqDist(x) => {
            let (m, d) = (values[x.0].shape()[0], values[x.0].shape()[1]);
            let src = values[x.0].data();
            if let Some(gx) = acc!(*x) {
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let coef = 2.0 * (g[i * m + j] + g[j * m + i]);
                        if coef == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            gx[i * d + k] += coef * (src[i * d + k] - src[j * d + k]);
                        }
                    }
                }
            }
        }
    }
}
