use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::{gemm, Scalar};

use super::dense::{split_axis, Tensor};
use super::tape::{Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: S,
    },
    Relu {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BatchNormMode,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        cols: Vec<S>,
    },
    Pool {
        x: Var,
        axis: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    /// Output element `i` reads input element `map[i]` (swap_axes, broadcast_to).
    Gather {
        x: Var,
        map: Vec<usize>,
        name: &'static str,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    SmoothedCrossEntropy {
        logits: Var,
        probs: Vec<S>,
        targets: Vec<S>,
    },
}

impl<S> Op<S> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Affine { .. } => "affine",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Conv1d { .. } => "conv1d_temporal",
            Op::Pool { .. } => "pool_axis",
            Op::Reshape { .. } => "reshape",
            Op::Gather { name, .. } => name,
            Op::ConcatLast { .. } => "concat_last",
            Op::Sum { .. } => "sum",
            Op::SmoothedCrossEntropy { .. } => "smoothed_cross_entropy",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::ConcatLast { a, b } => vec![*a, *b],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv1d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::SoftmaxRows { x }
            | Op::Pool { x, .. }
            | Op::Reshape { x }
            | Op::Gather { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::SmoothedCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

fn col_sums<S: Scalar>(rows: usize, cols: usize, data: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o = *o + v;
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b })
    }

    /// Batched product over a shared leading axis:
    /// `[N, m, k] x [N, k, n]`, or `[N, m, k] x [N, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err(format!(
                "bmm: inner dimensions differ for {sa:?} and {sb:?} (trans_b = {trans_b})"
            ));
        }
        let mut out = vec![S::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(value, Op::BatchMatMul { a, b, trans_b })
    }

    /// `y = x W^T + b` applied along the last axis of `x`; `W` is `[d_out, d_in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let Some(&d_in) = sx.last() else {
            return dim_err("affine: input must have at least one axis");
        };
        if sw.len() != 2 || sw[1] != d_in {
            return dim_err(format!("affine: input {sx:?} does not match weight {sw:?}"));
        }
        let d_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return dim_err(format!(
                    "affine: bias {:?} does not match output width {d_out}",
                    self.shape(b)
                ));
            }
        }
        let rows = self.value(x).numel() / d_in.max(1);
        let mut out = vec![S::zero(); rows * d_out];
        gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Affine { x, w, b })
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(value, Op::Relu { x })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let Some(&n) = src.shape().last() else {
            return dim_err("softmax_rows: scalar input");
        };
        let mut out = src.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::SoftmaxRows { x })
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `running` with momentum [`BN_MOMENTUM`]; eval mode uses `running` as is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<S>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("batchnorm: axis {axis} out of range for {shape:?}"));
        }
        let (outer, channels, inner) = split_axis(&shape, axis);
        if self.shape(gamma) != [channels]
            || self.shape(beta) != [channels]
            || running.channels() != channels
        {
            return dim_err(format!(
                "batchnorm: {channels} channels in {shape:?} but gamma {:?}, beta {:?}, running stats {}",
                self.shape(gamma),
                self.shape(beta),
                running.channels()
            ));
        }
        let count = outer * inner;
        let eps = S::of(BN_EPS);
        let xs = self.value(x).data();
        let layout = ChannelLayout { channels, inner };

        let (mean, var) = match mode {
            BatchNormMode::Train => {
                if count == 0 {
                    return dim_err("batchnorm: empty batch");
                }
                let n = S::of(count as f64);
                let mut mean = vec![S::zero(); channels];
                layout.reduce(xs, &mut mean, |acc, x| acc + x);
                mean.iter_mut().for_each(|m| *m = *m / n);
                let centered: Vec<S> = layout.map(xs, |c, x| x - mean[c]);
                let mut var = vec![S::zero(); channels];
                layout.reduce(&centered, &mut var, |acc, d| acc + d * d);
                var.iter_mut().for_each(|v| *v = *v / n);
                let momentum = S::of(BN_MOMENTUM);
                let unbias = if count > 1 {
                    S::of(count as f64 / (count - 1) as f64)
                } else {
                    S::one()
                };
                for c in 0..channels {
                    running.mean[c] = (S::one() - momentum) * running.mean[c] + momentum * mean[c];
                    running.var[c] =
                        (S::one() - momentum) * running.var[c] + momentum * var[c] * unbias;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (running.mean.clone(), running.var.clone()),
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xhat = layout.map(xs, |c, x| (x - mean[c]) * inv_std[c]);
        let out = layout.map(&xhat, |c, h| h * g[c] + b[c]);
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                mode,
                xhat,
                inv_std,
            },
        )
    }

    /// Temporal cross-correlation of `x: [N, T, C_in]` with `kernel: [C_out, C_in, k]`.
    ///
    /// `k` must be odd; `(k - 1) / 2` zeros pad each end so the output keeps
    /// all `T` frames.
    pub fn conv1d_temporal(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 3 {
            return dim_err(format!("conv1d: kernel must be [C_out, C_in, k], got {sk:?}"));
        }
        let (c_out, c_in_k, ks) = (sk[0], sk[1], sk[2]);
        if ks % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d: kernel size {ks} must be odd"
            )));
        }
        if sx.len() != 3 || sx[2] != c_in_k {
            return dim_err(format!(
                "conv1d: input {sx:?} does not match kernel {sk:?}"
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return dim_err(format!("conv1d: bias {:?} for {c_out} outputs", self.shape(b)));
            }
        }
        let (n, t, c_in) = (sx[0], sx[1], sx[2]);
        let width = c_in * ks;
        let cols = im2col(self.value(x).data(), n, t, c_in, ks);
        let mut out = vec![S::zero(); n * t * c_out];
        gemm(
            n * t,
            width,
            c_out,
            &cols,
            false,
            self.value(kernel).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bias = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let value = Tensor::new(vec![n, t, c_out], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                cols,
            },
        )
    }

    /// Reduces `axis` completely. Max mode also returns, for every output
    /// element, the winning index along `axis` (lowest index on ties).
    pub fn pool_axis(&mut self, x: Var, axis: usize, mode: PoolMode) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("pool_axis: axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return dim_err("pool_axis: cannot pool an empty axis");
        }
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xs[o * len * inner + i];
                        let mut best_j = 0;
                        for j in 1..len {
                            let v = xs[(o * len + j) * inner + i];
                            if v > best {
                                best = v;
                                best_j = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_j;
                    }
                }
            }
            PoolMode::Avg => {
                let scale = S::one() / S::of(len as f64);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] = out[o * inner + i] + xs[(o * len + j) * inner + i];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v = *v * scale);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let var = self.push(
            value,
            Op::Pool {
                x,
                axis,
                mode,
                argmax: argmax.clone(),
            },
        )?;
        Ok((var, argmax))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { x })
    }

    /// Exchanges two axes, materializing the result.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return dim_err(format!("swap_axes: ({a}, {b}) out of range for {shape:?}"));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(a, b);
        let in_strides = strides(&shape);
        let mut perm_strides = in_strides.clone();
        perm_strides.swap(a, b);
        let map = gather_map(&out_shape, &perm_strides);
        let data = map.iter().map(|&i| self.value(x).data()[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(
            value,
            Op::Gather {
                x,
                map,
                name: "swap_axes",
            },
        )
    }

    /// Right-aligned broadcast (size-1 or missing axes are repeated).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() > shape.len() {
            return dim_err(format!("broadcast_to: cannot broadcast {src:?} to {shape:?}"));
        }
        let offset = shape.len() - src.len();
        let src_strides = strides(&src);
        let mut bstrides = vec![0usize; shape.len()];
        for (i, &d) in src.iter().enumerate() {
            let target = shape[offset + i];
            if d == target {
                bstrides[offset + i] = src_strides[i];
            } else if d != 1 {
                return dim_err(format!("broadcast_to: cannot broadcast {src:?} to {shape:?}"));
            }
        }
        let map = gather_map(shape, &bstrides);
        let data = map.iter().map(|&i| self.value(x).data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(
            value,
            Op::Gather {
                x,
                map,
                name: "broadcast_to",
            },
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return dim_err(format!("concat_last: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).numel() / wa.max(1);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::ConcatLast { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Mean over the batch of `-sum_k q_k log softmax(logits)_k` with the
    /// label-smoothed target `q = (1 - eps) onehot + eps / K`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err(format!(
                "cross entropy: logits {shape:?} for {} labels",
                labels.len()
            ));
        }
        let (batch, k) = (shape[0], shape[1]);
        if batch == 0 || k == 0 {
            return dim_err("cross entropy: empty logits");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Contract(format!("smoothing factor {eps} not in [0, 1)")));
        }
        let xs = self.value(logits).data();
        let off = S::of(eps / k as f64);
        let on = S::of(1.0 - eps) + off;
        let mut probs = xs.to_vec();
        let mut targets = vec![off; batch * k];
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &xs[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            targets[r * k + label] = on;
            for j in 0..k {
                let logp = row[j] - lse;
                probs[r * k + j] = logp.exp();
                total = total - targets[r * k + j] * logp;
            }
        }
        let value = Tensor::scalar(total / S::of(batch as f64));
        self.push(
            value,
            Op::SmoothedCrossEntropy {
                logits,
                probs,
                targets,
            },
        )
    }

    /// Vector-Jacobian product of node `v` with upstream gradient `g`.
    pub(crate) fn vjp(&self, v: Var, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, false);
                    self.accumulate(*b, db, grads);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        // C = A B  -> dA = dC B^T ;  C = A B^T -> dA = dC B
                        gemm(m, n, k, gi, false, bi, !*trans_b, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    self.accumulate(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let slot = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB = dC^T A : [n, k]
                            gemm(n, m, k, gi, true, ai, false, slot, false);
                        } else {
                            // dB = A^T dC : [k, n]
                            gemm(k, m, n, ai, true, gi, false, slot, false);
                        }
                    }
                    self.accumulate(*b, db, grads);
                }
            }
            Op::Affine { x, w, b } => {
                let sw = self.shape(*w);
                let (d_out, d_in) = (sw[0], sw[1]);
                let rows = self.value(*x).numel() / d_in.max(1);
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); rows * d_in];
                    gemm(rows, d_out, d_in, g, false, self.value(*w).data(), false, &mut dx, false);
                    self.accumulate(*x, dx, grads);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![S::zero(); d_out * d_in];
                    gemm(d_out, rows, d_in, g, true, self.value(*x).data(), false, &mut dw, false);
                    self.accumulate(*w, dw, grads);
                }
                if let Some(b) = b {
                    self.accumulate(*b, col_sums(rows, d_out, g), grads);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.to_vec(), grads);
                self.accumulate(*b, g.to_vec(), grads);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect();
                let db = g.iter().zip(va).map(|(&gi, &x)| gi * x).collect();
                self.accumulate(*a, da, grads);
                self.accumulate(*b, db, grads);
            }
            Op::Scale { x, factor } => {
                let dx = g.iter().map(|&gi| gi * *factor).collect();
                self.accumulate(*x, dx, grads);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect();
                self.accumulate(*x, dx, grads);
            }
            Op::SoftmaxRows { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.len()];
                if n > 0 {
                    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(*x, dx, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                mode,
                xhat,
                inv_std,
            } => {
                let (outer, channels, inner) = split_axis(node.value.shape(), *axis);
                let layout = ChannelLayout { channels, inner };
                let gam = self.value(*gamma).data();
                let mut dbeta = vec![S::zero(); channels];
                layout.reduce(g, &mut dbeta, |acc, v| acc + v);
                let gx: Vec<S> = g.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).collect();
                let mut dgamma = vec![S::zero(); channels];
                layout.reduce(&gx, &mut dgamma, |acc, v| acc + v);
                if self.requires_grad(*x) {
                    let dx = match mode {
                        BatchNormMode::Train => {
                            // with dxhat = g * gamma:
                            // dx = inv_std / n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
                            let n = S::of((outer * inner) as f64);
                            let scale: Vec<S> = (0..channels).map(|c| gam[c] * inv_std[c] / n).collect();
                            let shifted = layout.map(xhat, |c, h| h * dgamma[c] + dbeta[c]);
                            let centered: Vec<S> = g.iter().zip(&shifted).map(|(&gk, &sk)| n * gk - sk).collect();
                            layout.map(&centered, |c, v| v * scale[c])
                        }
                        BatchNormMode::Eval => layout.map(g, |c, v| v * gam[c] * inv_std[c]),
                    };
                    self.accumulate(*x, dx, grads);
                }
                self.accumulate(*gamma, dgamma, grads);
                self.accumulate(*beta, dbeta, grads);
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                cols,
            } => {
                let sx = self.shape(*x);
                let (n, t, c_in) = (sx[0], sx[1], sx[2]);
                let sk = self.shape(*kernel);
                let (c_out, ks) = (sk[0], sk[2]);
                let width = c_in * ks;
                if self.requires_grad(*x) {
                    let mut dcols = vec![S::zero(); n * t * width];
                    gemm(n * t, c_out, width, g, false, self.value(*kernel).data(), false, &mut dcols, false);
                    self.accumulate(*x, col2im(&dcols, n, t, c_in, ks), grads);
                }
                if self.requires_grad(*kernel) {
                    let mut dk = vec![S::zero(); c_out * width];
                    gemm(c_out, n * t, width, g, true, cols, false, &mut dk, false);
                    self.accumulate(*kernel, dk, grads);
                }
                if let Some(b) = bias {
                    self.accumulate(*b, col_sums(n * t, c_out, g), grads);
                }
            }
            Op::Pool {
                x,
                axis,
                mode,
                argmax,
            } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![S::zero(); outer * len * inner];
                match mode {
                    PoolMode::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = argmax[o * inner + i];
                                dx[(o * len + j) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    PoolMode::Avg => {
                        let scale = S::one() / S::of(len as f64);
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    dx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx, grads);
            }
            Op::Reshape { x } => self.accumulate(*x, g.to_vec(), grads),
            Op::Gather { x, map, .. } => {
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (&src, &gi) in map.iter().zip(g) {
                    dx[src] = dx[src] + gi;
                }
                self.accumulate(*x, dx, grads);
            }
            Op::ConcatLast { a, b } => {
                let wa = *self.shape(*a).last().unwrap();
                let wb = *self.shape(*b).last().unwrap();
                let rows = self.value(*a).numel() / wa.max(1);
                let mut da = Vec::with_capacity(rows * wa);
                let mut db = Vec::with_capacity(rows * wb);
                for r in 0..rows {
                    let row = &g[r * (wa + wb)..(r + 1) * (wa + wb)];
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                self.accumulate(*a, da, grads);
                self.accumulate(*b, db, grads);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, dx, grads);
            }
            Op::SmoothedCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let batch = S::of(self.shape(*logits)[0] as f64);
                let scale = g[0] / batch;
                let dx = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &q)| (p - q) * scale)
                    .collect();
                self.accumulate(*logits, dx, grads);
            }
        }
        Ok(())
    }
}

/// Flat layout `[outer, channels, inner]` for per-channel loops that stay
/// vectorizable whether the channel axis is last (`inner == 1`) or not.
#[derive(Clone, Copy)]
struct ChannelLayout {
    channels: usize,
    inner: usize,
}

impl ChannelLayout {
    fn reduce<S: Scalar>(self, xs: &[S], acc: &mut [S], f: impl Fn(S, S) -> S) {
        if self.inner == 1 {
            for row in xs.chunks_exact(self.channels) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a = f(*a, x);
                }
            }
        } else {
            for block in xs.chunks_exact(self.channels * self.inner) {
                for (a, run) in acc.iter_mut().zip(block.chunks_exact(self.inner)) {
                    *a = run.iter().fold(*a, |s, &x| f(s, x));
                }
            }
        }
    }

    fn map<S: Scalar>(self, xs: &[S], f: impl Fn(usize, S) -> S) -> Vec<S> {
        let mut out = Vec::with_capacity(xs.len());
        if self.inner == 1 {
            for row in xs.chunks_exact(self.channels) {
                out.extend(row.iter().enumerate().map(|(c, &x)| f(c, x)));
            }
        } else {
            for block in xs.chunks_exact(self.channels * self.inner) {
                for (c, run) in block.chunks_exact(self.inner).enumerate() {
                    out.extend(run.iter().map(|&x| f(c, x)));
                }
            }
        }
        out
    }
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offsets for every element of `out_shape` under the given source strides.
fn gather_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        map.push(index.iter().zip(src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..out_shape.len()).rev() {
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    map
}

/// Rows `(n, t)`, columns `c * k + j` holding `x[n, t + j - pad, c]`.
fn im2col<S: Scalar>(x: &[S], n: usize, t: usize, c_in: usize, ks: usize) -> Vec<S> {
    let pad = (ks - 1) / 2;
    let width = c_in * ks;
    let mut cols = vec![S::zero(); n * t * width];
    for b in 0..n {
        for ti in 0..t {
            let row = &mut cols[(b * t + ti) * width..(b * t + ti + 1) * width];
            for j in 0..ks {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let frame = &x[(b * t + src - pad) * c_in..(b * t + src - pad + 1) * c_in];
                for (c, &v) in frame.iter().enumerate() {
                    row[c * ks + j] = v;
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], n: usize, t: usize, c_in: usize, ks: usize) -> Vec<S> {
    let pad = (ks - 1) / 2;
    let width = c_in * ks;
    let mut x = vec![S::zero(); n * t * c_in];
    for b in 0..n {
        for ti in 0..t {
            let row = &cols[(b * t + ti) * width..(b * t + ti + 1) * width];
            for j in 0..ks {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let frame = &mut x[(b * t + src - pad) * c_in..(b * t + src - pad + 1) * c_in];
                for (c, v) in frame.iter_mut().enumerate() {
                    *v = *v + row[c * ks + j];
                }
            }
        }
    }
    x
}
