//! Differentiable tensor operations recorded on a [`Graph`].

use super::{BackwardCtx, Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "add")?;
        let value = Tensor::from_parts(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        Ok(self.push(
            OpKind::Add,
            value,
            vec![a, b],
            Box::new(|ctx: &BackwardCtx<'_>| {
                vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(
            OpKind::Scale,
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(ctx.grad.iter().map(|g| g * factor).collect())]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "mul")?;
        let value = Tensor::from_parts(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        Ok(self.push(
            OpKind::Mul,
            value,
            vec![a, b],
            Box::new(|ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect()),
                    ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect()),
                ]
            }),
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let n = self.value(a).numel();
        self.push(
            OpKind::Sum,
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(
            OpKind::Reshape,
            value,
            vec![a],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Copies the value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).rows(start, len)?;
        let total = self.value(a).numel();
        let stride = total / self.shape(a)[0];
        Ok(self.push(
            OpKind::Rows,
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; total];
                g[start * stride..(start + len) * stride].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(dim_err("concat", self.shape(*first), s));
            }
            lead += s[0];
            sizes.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(
            OpKind::Concat,
            Tensor::from_parts(shape, data),
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&n, &need)| {
                        let g = need.then(|| ctx.grad[offset..offset + n].to_vec());
                        offset += n;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// Stacks `times` copies of `a` along the leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Input("repeat count must be positive".into()));
        }
        let src = self.value(a);
        let n = src.numel();
        let mut data = Vec::with_capacity(n * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let mut shape = src.shape().to_vec();
        shape[0] *= times;
        Ok(self.push(
            OpKind::Repeat,
            Tensor::from_parts(shape, data),
            vec![a],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; n];
                for chunk in ctx.grad.chunks(n) {
                    for (acc, d) in g.iter_mut().zip(chunk) {
                        *acc += d;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean over `steps` equal chunks of the leading axis: `[steps*B, ...]`
    /// becomes `[B, ...]`.
    pub fn time_mean(&mut self, a: Var, steps: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if steps == 0 || !shape[0].is_multiple_of(steps) {
            return Err(Error::Input(format!(
                "leading extent {} not divisible into {steps} timesteps",
                shape[0]
            )));
        }
        let chunk = self.value(a).numel() / steps;
        let inv = 1.0 / steps as f64;
        let mut data = vec![0.0; chunk];
        for part in self.value(a).data().chunks(chunk) {
            for (acc, v) in data.iter_mut().zip(part) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape[0] /= steps;
        Ok(self.push(
            OpKind::TimeMean,
            Tensor::from_parts(out_shape, data),
            vec![a],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = Vec::with_capacity(chunk * steps);
                for _ in 0..steps {
                    g.extend(ctx.grad.iter().map(|d| d * inv));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `y[i, j] = sum_k x[i, k] w[j, k] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(dim_err("linear", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(dim_err("linear bias", ws, bs));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            1.0,
            MatRef::new(self.value(x).data(), batch, inp),
            MatRef::transposed(self.value(w).data(), inp, out),
            1.0,
            &mut y,
        );
        Ok(self.push(
            OpKind::Linear,
            Tensor::from_parts(vec![batch, out], y),
            vec![x, w, b],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![0.0; batch * inp];
                    gemm(
                        1.0,
                        MatRef::new(g, batch, out),
                        MatRef::new(ctx.inputs[1].data(), out, inp),
                        0.0,
                        &mut dx,
                    );
                    dx
                });
                let dw = ctx.needs[1].then(|| {
                    let mut dw = vec![0.0; out * inp];
                    gemm(
                        1.0,
                        MatRef::transposed(g, out, batch),
                        MatRef::new(ctx.inputs[0].data(), batch, inp),
                        0.0,
                        &mut dw,
                    );
                    dw
                });
                let db = ctx.needs[2].then(|| {
                    let mut db = vec![0.0; out];
                    for row in g.chunks(out) {
                        for (acc, d) in db.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// 2-D cross-correlation without bias. Output extents follow
    /// `floor((h + 2 pad - kh) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        let cols = im2col(self.value(x).data(), &geom);
        let np = geom.n * geom.out_positions();
        let mut out2 = vec![0.0; geom.cout * np];
        gemm(
            1.0,
            MatRef::new(self.value(k).data(), geom.cout, geom.patch()),
            MatRef::new(&cols, geom.patch(), np),
            0.0,
            &mut out2,
        );
        drop(cols);
        let out = channel_major_to_batch_major(&out2, geom.cout, geom.n, geom.out_positions());
        let shape = vec![geom.n, geom.cout, geom.oh, geom.ow];
        Ok(self.push(
            OpKind::Conv2d,
            Tensor::from_parts(shape, out),
            vec![x, k],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let p = geom.out_positions();
                let np = geom.n * p;
                let g2 = batch_major_to_channel_major(ctx.grad, geom.cout, geom.n, p);
                let dk = ctx.needs[1].then(|| {
                    let cols = im2col(ctx.inputs[0].data(), &geom);
                    let mut dk = vec![0.0; geom.cout * geom.patch()];
                    gemm(
                        1.0,
                        MatRef::new(&g2, geom.cout, np),
                        MatRef::transposed(&cols, np, geom.patch()),
                        0.0,
                        &mut dk,
                    );
                    dk
                });
                let dx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; geom.patch() * np];
                    gemm(
                        1.0,
                        MatRef::transposed(ctx.inputs[1].data(), geom.patch(), geom.cout),
                        MatRef::new(&g2, geom.cout, np),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, &geom)
                });
                vec![dx, dk]
            }),
        ))
    }

    /// Mean over all spatial positions: `[N, C, ...]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::Input(format!(
                "global_avg_pool needs spatial axes, got {s:?}"
            )));
        }
        let spatial: usize = s[2..].iter().product();
        let inv = 1.0 / spatial as f64;
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        Ok(self.push(
            OpKind::GlobalAvgPool,
            Tensor::from_parts(vec![s[0], s[1]], data),
            vec![x],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = Vec::with_capacity(ctx.grad.len() * spatial);
                for &d in ctx.grad {
                    g.extend(std::iter::repeat_n(d * inv, spatial));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Training-mode batch normalization. Statistics are taken per channel
    /// over the leading axis (batch and time merged) and all spatial axes.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        let (n, c) = bn_dims(&s, self.shape(gamma), self.shape(beta))?;
        let spatial: usize = s[2..].iter().product();
        let m = n * spatial;
        if m < 2 {
            return Err(Error::Input(format!(
                "batch norm needs at least two values per channel, got shape {s:?}"
            )));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, (mu, va)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                acc += xv[base..base + spatial].iter().sum::<f64>();
            }
            *mu = acc / m as f64;
            let mut sq = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                sq += xv[base..base + spatial]
                    .iter()
                    .map(|v| (v - *mu) * (v - *mu))
                    .sum::<f64>();
            }
            *va = sq / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    y[j] = gv[ch] * xhat[j] + bv[ch];
                }
            }
        }
        let unbiased = m as f64 / (m as f64 - 1.0);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * unbiased).collect(),
        };
        let out = self.push(
            OpKind::BatchNorm,
            Tensor::from_parts(s, y),
            vec![x, gamma, beta],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad;
                let gv = ctx.inputs[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                    let mf = m as f64;
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let sum_dxhat = gv[ch] * dbeta[ch];
                            let sum_dxhat_xhat = gv[ch] * dgamma[ch];
                            let k = inv_std[ch] / mf;
                            let base = (i * c + ch) * spatial;
                            for j in base..base + spatial {
                                let dxhat = g[j] * gv[ch];
                                dx[j] = k * (mf * dxhat - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    ctx.needs[1].then_some(dgamma),
                    ctx.needs[2].then_some(dbeta),
                ]
            }),
        );
        Ok((out, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, c) = bn_dims(&s, self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err("batch_norm running stats", &[c], &[running_mean.len()]));
        }
        let spatial: usize = s[2..].iter().product();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    y[j] = gv[ch] * (xv[j] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        Ok(self.push(
            OpKind::BatchNormEval,
            Tensor::from_parts(s, y),
            vec![x, gamma, beta],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad;
                let (xv, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            let xhat = (xv[j] - mean[ch]) * inv_std[ch];
                            dx[j] = g[j] * gv[ch] * inv_std[ch];
                            dgamma[ch] += g[j] * xhat;
                            dbeta[ch] += g[j];
                        }
                    }
                }
                vec![
                    ctx.needs[0].then_some(dx),
                    ctx.needs[1].then_some(dgamma),
                    ctx.needs[2].then_some(dbeta),
                ]
            }),
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = softmax_ce_forward(self.value(logits).data(), labels, classes);
        let labels = labels.to_vec();
        Ok(self.push(
            OpKind::SoftmaxCrossEntropy,
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let scale = ctx.grad[0] / batch as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * classes + l] -= scale;
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// Loss value and softmax probabilities for row-major `[batch, classes]` logits.
/// Mean softmax cross-entropy of a `[batch, classes]` logit tensor.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(dim_err("cross_entropy", s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(Error::Input(format!("label {bad} out of range for {} classes", s[1])));
    }
    Ok(softmax_ce_forward(logits.data(), labels, s[1]).0)
}

pub(crate) fn softmax_ce_forward(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, (row, prow)) in logits
        .chunks(classes)
        .zip(probs.chunks_mut(classes))
        .enumerate()
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        prow.iter_mut().for_each(|p| *p /= z);
        loss += z.ln() + max - row[labels[i]];
    }
    (loss / labels.len() as f64, probs)
}

fn bn_dims(s: &[usize], gamma: &[usize], beta: &[usize]) -> Result<(usize, usize)> {
    if s.len() < 2 {
        return Err(dim_err("batch_norm", s, gamma));
    }
    if gamma != [s[1]] || beta != [s[1]] {
        return Err(dim_err("batch_norm", s, gamma));
    }
    Ok((s[0], s[1]))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(dim_err("conv2d", xs, ks));
        }
        let (kh, kw) = (ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} must have odd extents")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, w) = (xs[2], xs[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Config(format!(
                "conv2d input {h}x{w} with pad {pad} is smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(ConvGeom {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ks[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source index along one axis, or `None` inside the zero padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x` into a `[cin*kh*kw, n*oh*ow]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_positions();
    let np = g.n * p;
    let mut cols = vec![0.0; g.patch() * np];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * np..(r + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let dst = &mut row[n * p + oy * g.ow..][..g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) {
                                *d = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_positions();
    let np = g.n * p;
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &cols[r * np..(r + 1) * np];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let src = &row[n * p + oy * g.ow..][..g.ow];
                        for (ox, s) in src.iter().enumerate() {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) {
                                plane[iy * g.w + ix] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn channel_major_to_batch_major(src: &[f64], c: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..n {
            out[(i * c + ch) * p..][..p].copy_from_slice(&src[ch * n * p + i * p..][..p]);
        }
    }
    out
}

fn batch_major_to_channel_major(src: &[f64], c: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..n {
            out[ch * n * p + i * p..][..p].copy_from_slice(&src[(i * c + ch) * p..][..p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x0 = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let b2 = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.linear(x0, w, b2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut g = Graph::new();
        let input = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let x = g.constant(input.clone());
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &input);

        let kz = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = g.conv2d(x, kz, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[1, 2, 3, 3]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_fn(&[2, 2, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f64 - 3.0);
        let (stride, pad) = (2, 1);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let (oh, ow) = (3, 2);
        assert_eq!(g.shape(y), &[2, 3, oh, ow]);
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    acc += x.data()[((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                        * k.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = g.value(y).data()[((n * 3 + co) * oh + oy) * ow + ox];
                        assert_eq!(got, acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn global_avg_pool_means() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let x = g.constant(Tensor::full(&[2, 3, 4, 5], 0.7));
        let y = g.global_avg_pool(x).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn batch_norm_constant_input_and_zero_gamma() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2, 3, 3], 5.0));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, _) = g.batch_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let xr = g.constant(Tensor::from_fn(&[4, 2, 3, 3], |i| (i as f64).sin()));
        let gamma0 = g.constant(Tensor::zeros(&[2]));
        let beta2 = g.constant(t(&[2], &[0.5, -1.5]));
        let (y, _) = g.batch_norm(xr, gamma0, beta2, 1e-5).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert_eq!(*v, [0.5, -1.5][ch]);
        }
    }

    #[test]
    fn batch_norm_needs_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        assert!(g.batch_norm(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let z = g.constant(t(&[1, 2], &[20.0, -20.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-8);

        assert!(matches!(
            g.softmax_cross_entropy(z, &[2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn concat_rows_time_mean_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.leaf(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[4, 3]);
        let r = g.rows(c, 2, 2).unwrap();
        assert_eq!(g.value(r), g.value(b));
        let m = g.time_mean(c, 2).unwrap();
        assert_eq!(g.value(m).data()[0], 5.0);
        let s = g.sum(m);
        let grads = g.backward(s, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[0.5; 6]);
    }
}
