//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] is built fresh for every forward pass that needs gradients.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Loss operations take the target side (teacher
//! outputs, soft labels, confidence weights) as plain tensors: nothing handed
//! over as a tensor can ever receive a gradient.

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{gemm, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Lerp {
        a: Var,
        b: Var,
        t: f64,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: Var,
        /// `softmax(z)·Σt − t`, pre-multiplied by the row weight.
        grad: Tensor,
    },
    TemperedKl {
        logits: Var,
        grad: Tensor,
    },
    FeatureDistance {
        x: Var,
        grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(Error::shape(&[o, c, kh, kw], self.value(w).shape()));
        }
        if h + 2 * geom.pad < kh || wd + 2 * geom.pad < kw {
            return Err(Error::shape(&[n, c, kh, kw], self.value(x).shape()));
        }
        let ho = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let wo = (wd + 2 * geom.pad - kw) / geom.stride + 1;
        let spatial = ho * wo;
        let ckk = c * kh * kw;
        let cols = im2col(self.value(x).data(), n, c, h, wd, kh, kw, geom, ho, wo);

        let mut prod = vec![0.0; o * n * spatial];
        gemm(o, ckk, n * spatial, self.value(w).data(), false, &cols, false, &mut prod, false);

        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; n * o * spatial];
        for s in 0..n {
            for oc in 0..o {
                let src = &prod[oc * n * spatial + s * spatial..][..spatial];
                let dst = &mut out[(s * o + oc) * spatial..][..spatial];
                let shift = bias.as_ref().map_or(0.0, |b| b[oc]);
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + shift;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        // im2col buffers are only needed when something upstream wants a gradient.
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Batch normalization with statistics of the presented batch. Returns
    /// the output and the biased per-channel mean and variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let spatial = h * w;
        let count = (n * spatial) as f64;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xs[(s * c + ch) * spatial..][..spatial];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let plane = &xs[(s * c + ch) * spatial..][..spatial];
                var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let y = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((y, mean, var))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.value(gamma).ensure_shape(&[c])?;
        self.value(beta).ensure_shape(&[c])?;
        let spatial = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                for i in off..off + spatial {
                    let v = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = v;
                    out[i] = g[ch] * v + b[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `t·a + (1−t)·b`, elementwise.
    pub fn lerp(&mut self, a: Var, b: Var, t: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        vb.ensure_shape(va.shape())?;
        let value = va.zip(vb, |x, y| t * x + (1.0 - t) * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Lerp { a, b, t }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let spatial = h * w;
        let xs = self.value(x).data();
        let data = (0..n * c)
            .map(|i| xs[i * spatial..(i + 1) * spatial].iter().sum::<f64>() / spatial as f64)
            .collect();
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `x (n×d) · wᵀ (d×k) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.row_len());
        let wv = self.value(w);
        let k = wv.rows();
        if wv.row_len() != d || wv.shape().len() != 2 {
            return Err(Error::shape(&[k, d], wv.shape()));
        }
        self.value(b).ensure_shape(&[k])?;
        let mut out = vec![0.0; n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, d, k, xv.data(), false, wv.data(), true, &mut out, true);
        let rg = self.any_grad(&[x, w, b]);
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let n = self.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Protocol(format!("row {bad} out of range for batch of {n}")));
        }
        let value = self.value(x).gather_rows(&rows);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GatherRows { x, rows }, rg))
    }

    /// `Σ_r weight_r · CE(softmax(logits_r), target_r)` for soft targets.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor, weights: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        check_rows(z, targets, weights)?;
        let mut total = 0.0;
        let mut grad = Tensor::zeros(z.shape());
        for (r, &wt) in weights.iter().enumerate() {
            let (zr, tr) = (z.row(r), targets.row(r));
            total += wt * losses::soft_cross_entropy(zr, tr)?;
            let p = losses::softmax(zr);
            let mass: f64 = tr.iter().sum();
            for ((g, p), t) in grad.row_mut(r).iter_mut().zip(&p).zip(tr) {
                *g = wt * (p * mass - t);
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(total), Op::SoftCrossEntropy { logits, grad }, rg))
    }

    /// `Σ_r weight_r · T²·KL(softmax(teacher_r/T) ‖ softmax(student_r/T))`.
    pub fn tempered_kl(&mut self, student: Var, teacher: &Tensor, temperature: f64, weights: &[f64]) -> Result<Var> {
        let z = self.value(student);
        check_rows(z, teacher, weights)?;
        let mut total = 0.0;
        let mut grad = Tensor::zeros(z.shape());
        for (r, &wt) in weights.iter().enumerate() {
            let (zs, zt) = (z.row(r), teacher.row(r));
            total += wt * losses::kl_with_temperature(zs, zt, temperature)?;
            let ps = losses::softmax_tempered(zs, temperature);
            let pt = losses::softmax_tempered(zt, temperature);
            for ((g, s), t) in grad.row_mut(r).iter_mut().zip(&ps).zip(&pt) {
                *g = wt * temperature * (s - t);
            }
        }
        let rg = self.any_grad(&[student]);
        Ok(self.push(Tensor::scalar(total), Op::TemperedKl { logits: student, grad }, rg))
    }

    /// `Σ_r weight_r · ‖x_r − target_r‖₂ / numel(x_r)`: the unsquared l₂
    /// distance normalized by the per-sample element count.
    pub fn feature_distance(&mut self, x: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        target.ensure_shape(xv.shape())?;
        if weights.len() != xv.rows() {
            return Err(Error::shape(&[xv.rows()], &[weights.len()]));
        }
        let per_row = xv.row_len() as f64;
        let mut total = 0.0;
        let mut grad = Tensor::zeros(xv.shape());
        for (r, &wt) in weights.iter().enumerate() {
            let norm = losses::l2_distance(xv.row(r), target.row(r));
            total += wt * norm / per_row;
            if norm > 0.0 {
                let scale = wt / (per_row * norm);
                for ((g, a), b) in grad.row_mut(r).iter_mut().zip(xv.row(r)).zip(target.row(r)) {
                    *g = scale * (a - b);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::FeatureDistance { x, grad }, rg))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let val = self.value(v);
            if val.numel() != 1 {
                return Err(Error::shape(&[], val.shape()));
            }
            total += c * val.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(&[], self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(upstream) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &upstream, &mut grads)?;
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4()?;
                let (o, _, kh, kw) = wv.dims4()?;
                let (_, _, ho, wo) = out.dims4()?;
                let spatial = ho * wo;
                let ckk = c * kh * kw;
                // rearrange upstream to o × (n·spatial)
                let mut dmat = vec![0.0; o * n * spatial];
                for s in 0..n {
                    for oc in 0..o {
                        let src = &up.data()[(s * o + oc) * spatial..][..spatial];
                        dmat[oc * n * spatial + s * spatial..][..spatial].copy_from_slice(src);
                    }
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, n * spatial, ckk, &dmat, false, cols, true, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = (0..o)
                            .map(|oc| dmat[oc * n * spatial..(oc + 1) * n * spatial].iter().sum())
                            .collect();
                        self.accumulate(grads, *b, Tensor::new(vec![o], db)?);
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; ckk * n * spatial];
                    gemm(ckk, o, n * spatial, wv.data(), true, &dmat, false, &mut dcols, false);
                    let dx = col2im(&dcols, n, c, h, wd, kh, kw, *geom, ho, wo);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = out.dims4()?;
                let spatial = h * w;
                let g = self.value(*gamma).data();
                let dy = up.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        for i in off..off + spatial {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    let count = (n * spatial) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * spatial;
                            for i in off..off + spatial {
                                dx[i] = if *batch_stats {
                                    g[ch] * inv_std[ch] / count
                                        * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dy[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Relu(x) => {
                let dx = up.zip(out, |g, y| if y > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Lerp { a, b, t } => {
                self.accumulate(grads, *a, up.scale(*t));
                self.accumulate(grads, *b, up.scale(1.0 - t));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let spatial = h * w;
                let mut dx = vec![0.0; n * c * spatial];
                for (i, g) in up.data().iter().enumerate() {
                    let v = g / spatial as f64;
                    dx[i * spatial..(i + 1) * spatial].iter_mut().for_each(|d| *d = v);
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d, k) = (xv.rows(), xv.row_len(), wv.rows());
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, k, d, up.data(), false, wv.data(), false, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; k * d];
                    gemm(k, n, d, up.data(), true, xv.data(), false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![k, d], dw)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k];
                    for row in up.data().chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k], db)?);
                }
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (i, &r) in rows.iter().enumerate() {
                    dx.row_mut(r).iter_mut().zip(up.row(i)).for_each(|(d, g)| *d += g);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftCrossEntropy { logits: v, grad }
            | Op::TemperedKl { logits: v, grad }
            | Op::FeatureDistance { x: v, grad } => {
                self.accumulate(grads, *v, grad.scale(up.item()));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(c * up.item()));
                }
            }
        }
        Ok(())
    }
}

fn check_rows(z: &Tensor, target: &Tensor, weights: &[f64]) -> Result<()> {
    if z.shape().len() != 2 {
        return Err(Error::shape(&[z.rows(), z.row_len()], z.shape()));
    }
    target.ensure_shape(z.shape())?;
    if weights.len() != z.rows() {
        return Err(Error::shape(&[z.rows()], &[weights.len()]));
    }
    Ok(())
}

/// Unfold `x` (n×c×h×w) into a `(c·kh·kw) × (n·ho·wo)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let spatial = ho * wo;
    let width = n * spatial;
    let mut cols = vec![0.0; c * kh * kw * width];
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for s in 0..n {
                    let plane = &x[(s * c + ch) * h * w..][..h * w];
                    let dst = &mut dst_row[s * spatial..(s + 1) * spatial];
                    for oy in 0..ho {
                        let iy = oy as isize * stride - pad + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * stride - pad + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let spatial = ho * wo;
    let width = n * spatial;
    let mut x = vec![0.0; n * c * h * w];
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src_row = &cols[row * width..(row + 1) * width];
                for s in 0..n {
                    let plane = &mut x[(s * c + ch) * h * w..][..h * w];
                    let src = &src_row[s * spatial..(s + 1) * spatial];
                    for oy in 0..ho {
                        let iy = oy as isize * stride - pad + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = ox as isize * stride - pad + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
