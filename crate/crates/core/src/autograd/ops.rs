use super::kernels::{self, ConvGeom};
use super::{BatchStats, BnMode, Op, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{cst, split_axis, strides, Float};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        ));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err!("{name}: shapes {sa:?} and {sb:?} are not broadcast-compatible")
        })?;
        let (da, db) = (self.value(a), self.value(b));
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_index_map(&sa, &out_shape);
            let mb = kernels::broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        self.push(name, out_shape, data, op, &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = cst::<T>(c);
        let data = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, c), &[a])
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err!("matmul: cannot contract {sa:?} with {sb:?}"));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let lead = kernels::broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(
            || shape_err!("matmul: batch axes of {sa:?} and {sb:?} do not broadcast"),
        )?;
        let ma = kernels::broadcast_index_map(&sa[..sa.len() - 2], &lead);
        let mb = kernels::broadcast_index_map(&sb[..sb.len() - 2], &lead);
        let mut out = vec![T::zero(); ma.len() * m * n];
        let (da, db) = (self.value(a), self.value(b));
        for (j, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
            kernels::gemm_nn(
                &da[ia * m * k..(ia + 1) * m * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut out[j * m * n..(j + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, data, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (cst::<T>(GELU_C), cst::<T>(GELU_A));
        let half = cst::<T>(0.5);
        let data = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, data, Op::Gelu(a), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err!("layer_norm: scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!(
                "layer_norm: gamma {:?} / beta {:?} must have extent [{d}] for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let rows = self.value(x).len() / d;
        let (src, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let eps = cst::<T>(eps);
        let dn = cst::<T>(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization with per-channel parameters on `axis`; statistics
    /// are taken over every other axis. Train mode also returns the batch
    /// statistics for the caller's running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "batch_norm")?;
        let (outer, ch, inner) = split_axis(&shape, axis);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err!(
                "batch_norm: gamma {:?} / beta {:?} must have extent [{ch}] for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let count = outer * inner;
        let eps_t = cst::<T>(eps);
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); ch];
        let mut out = vec![T::zero(); src.len()];
        let idx = |o: usize, c: usize, i: usize| (o * ch + c) * inner + i;
        let (train, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(contract_err!(
                        "batch_norm: train mode needs more than one value per channel, input {shape:?}"
                    ));
                }
                let n = cst::<T>(count as f64);
                let mut means = vec![T::zero(); ch];
                let mut vars = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for o in 0..outer {
                        for i in 0..inner {
                            s += src[idx(o, c, i)];
                        }
                    }
                    let mean = s / n;
                    let mut sq = T::zero();
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = src[idx(o, c, i)] - mean;
                            sq += d * d;
                        }
                    }
                    means[c] = mean;
                    vars[c] = sq / n;
                }
                for c in 0..ch {
                    rstd[c] = T::one() / (vars[c] + eps_t).sqrt();
                }
                let unbiased = vars
                    .iter()
                    .map(|&v| v * n / cst::<T>((count - 1) as f64))
                    .collect();
                (
                    true,
                    Some((
                        means.clone(),
                        BatchStats {
                            mean: means,
                            var: unbiased,
                        },
                    )),
                )
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(shape_err!(
                        "batch_norm: running stats of length {}/{} for {ch} channels",
                        mean.len(),
                        var.len()
                    ));
                }
                for c in 0..ch {
                    rstd[c] = T::one() / (var[c] + eps_t).sqrt();
                }
                (
                    false,
                    Some((
                        mean.to_vec(),
                        BatchStats {
                            mean: vec![],
                            var: vec![],
                        },
                    )),
                )
            }
        };
        let (means, batch_stats) = stats.expect("both modes produce centering statistics");
        for o in 0..outer {
            for c in 0..ch {
                for i in 0..inner {
                    let k = idx(o, c, i);
                    let xh = (src[k] - means[c]) * rstd[c];
                    xhat[k] = xh;
                    out[k] = xh * g[c] + b[c];
                }
            }
        }
        let v = self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, if train { Some(batch_stats) } else { None }))
    }

    /// 2-D convolution over `[B, C_in, H, W]` with weights `[C_out, C_in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(shape_err!(
                "conv2d: input {sx:?} incompatible with weight {sw:?}"
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be at least 1"));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, k) = (sw[0], sw[2]);
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(shape_err!(
                "conv2d: kernel {k}x{k} larger than padded input {}x{} (input {sx:?})",
                h + 2 * padding,
                wd + 2 * padding
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err!(
                    "conv2d: bias {:?} must have extent [{c_out}]",
                    self.shape(b)
                ));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        };
        let hw_out = geom.h_out * geom.w_out;
        let mut out = vec![T::zero(); batch * c_out * hw_out];
        let mut cols = vec![T::zero(); geom.cols_len()];
        let (dx, dw) = (self.value(x), self.value(w));
        let img = c_in * h * wd;
        for bi in 0..batch {
            kernels::im2col(&dx[bi * img..(bi + 1) * img], &geom, &mut cols);
            kernels::gemm_nn(
                dw,
                &cols,
                &mut out[bi * c_out * hw_out..(bi + 1) * c_out * hw_out],
                c_out,
                geom.cols_rows(),
                hw_out,
            );
        }
        if let Some(b) = bias {
            let db = self.value(b);
            for bi in 0..batch {
                for o in 0..c_out {
                    let base = (bi * c_out + o) * hw_out;
                    out[base..base + hw_out]
                        .iter_mut()
                        .for_each(|v| *v += db[o]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv2d",
            vec![batch, c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                c_out,
            },
            &inputs,
        )
    }

    /// Max pooling over the last two axes. Ties resolve to the first element
    /// in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || k == 0 || stride == 0 {
            return Err(shape_err!(
                "max_pool2d: invalid input {shape:?} or window {k}/{stride}"
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if k > h || k > w || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(shape_err!(
                "max_pool2d: spatial extent {h}x{w} not tiled by window {k} with stride {stride}"
            ));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.extend([ho, wo]);
        self.push("max_pool2d", oshape, out, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            ));
        }
        let data = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err!(
                "permute: {perm:?} is not a permutation of {shape:?}"
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_map(&shape, perm);
        let src = self.value(x);
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(
            "permute",
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err!(
                "transpose: axes {a},{b} out of range for {:?}",
                self.shape(x)
            ));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err!(
                    "concat: {s:?} does not match {base:?} off axis {axis}"
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "slice")?;
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "slice: range {start}..{} out of bounds for axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * ext + start) * inner;
            data.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("slice", oshape, data, Op::Slice { x, axis, start }, &[x])
    }

    /// Gathers entries `index` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "index_select")?;
        if index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err!(
                "index_select: indices out of range for axis {axis} of {shape:?}"
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let b = (o * ext + i) * inner;
                data.extend_from_slice(&src[b..b + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = index.len();
        self.push(
            "index_select",
            oshape,
            data,
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "mean")?;
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let inv = cst::<T>(1.0 / ext as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let b = (o * ext + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[b + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape;
        oshape.remove(axis);
        self.push("mean", oshape, data, Op::Mean { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum_all", vec![], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / cst::<T>(v.len() as f64);
        self.push("mean_all", vec![], vec![s], Op::MeanAll(x), &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match kernels::broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(shape_err!(
                    "broadcast_to: cannot expand {sx:?} to {shape:?}"
                ))
            }
        }
        let map = kernels::broadcast_index_map(&sx, shape);
        let src = self.value(x);
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(
            "broadcast_to",
            shape.to_vec(),
            data,
            Op::BroadcastTo(x),
            &[x],
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err!(
                "cross_entropy: label {bad} out of range for {c} classes"
            ));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= cst::<T>(b as f64);
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub(crate) fn backward_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = &node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let ga = self.reduce_to(*a, out_shape, g.iter().copied());
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_to(*b, out_shape, g.iter().map(|&v| v * sign));
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let ma = kernels::broadcast_index_map(sa, out_shape);
                let mb = kernels::broadcast_index_map(sb, out_shape);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for k in 0..g.len() {
                        ga[ma[k]] += g[k] * vb[mb[k]];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for k in 0..g.len() {
                        gb[mb[k]] += g[k] * va[ma[k]];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let ga = g.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let lead = &out_shape[..out_shape.len() - 2];
                let ma = kernels::broadcast_index_map(&sa[..sa.len() - 2], lead);
                let mb = kernels::broadcast_index_map(&sb[..sb.len() - 2], lead);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for (j, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                        kernels::gemm_nt(
                            &g[j * m * n..(j + 1) * m * n],
                            &vb[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for (j, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                        kernels::gemm_tn(
                            &va[ia * m * k..(ia + 1) * m * k],
                            &g[j * m * n..(j + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu(a) => {
                let ga = self
                    .value(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let (c, k) = (cst::<T>(GELU_C), cst::<T>(GELU_A));
                let half = cst::<T>(0.5);
                let three = cst::<T>(3.0);
                let ga = self
                    .value(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gv * d
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let y = &node.data;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let gam = self.value(*gamma);
                let rows = g.len() / d;
                let dn = cst::<T>(d as f64);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let p = r * d + j;
                        let dxh = g[p] * gam[j];
                        s1 += dxh;
                        s2 += dxh * xhat[p];
                        gg[j] += g[p] * xhat[p];
                        gb[j] += g[p];
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    for j in 0..d {
                        let p = r * d + j;
                        gx[p] = rstd[r] * (g[p] * gam[j] - m1 - xhat[p] * m2);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
                train,
            } => {
                let (outer, ch, inner) = split_axis(out_shape, *axis);
                let gam = self.value(*gamma);
                let idx = |o: usize, c: usize, i: usize| (o * ch + c) * inner + i;
                let n = cst::<T>((outer * inner) as f64);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); ch];
                let mut gb = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let p = idx(o, c, ii);
                            s1 += g[p];
                            s2 += g[p] * xhat[p];
                        }
                    }
                    gg[c] = s2;
                    gb[c] = s1;
                    let scale = gam[c] * rstd[c];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let p = idx(o, c, ii);
                            gx[p] = if *train {
                                scale * (g[p] - s1 / n - xhat[p] * s2 / n)
                            } else {
                                scale * g[p]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                c_out,
            } => {
                let hw_out = geom.h_out * geom.w_out;
                let img = geom.c_in * geom.h * geom.w;
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut cols = vec![T::zero(); geom.cols_len()];
                let mut gw = vec![T::zero(); vw.len()];
                let mut gx = vec![T::zero(); vx.len()];
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                for bi in 0..*batch {
                    let gb = &g[bi * c_out * hw_out..(bi + 1) * c_out * hw_out];
                    if need_w {
                        kernels::im2col(&vx[bi * img..(bi + 1) * img], geom, &mut cols);
                        kernels::gemm_nt(gb, &cols, &mut gw, *c_out, hw_out, geom.cols_rows());
                    }
                    if need_x {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(vw, gb, &mut cols, geom.cols_rows(), *c_out, hw_out);
                        kernels::col2im(&cols, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, gx);
                }
                if need_w {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = bias {
                    let mut gbias = vec![T::zero(); *c_out];
                    for bi in 0..*batch {
                        for o in 0..*c_out {
                            let base = (bi * c_out + o) * hw_out;
                            gbias[o] += g[base..base + hw_out].iter().copied().sum();
                        }
                    }
                    self.accumulate(grads, *b, gbias);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += g[k];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let map = permute_map(self.shape(*x), perm);
                let mut gx = vec![T::zero(); g.len()];
                for (k, &src) in map.iter().enumerate() {
                    gx[src] = g[k];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[b..b + len * inner]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let b = (o * ext + start) * inner;
                    gx[b..b + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::IndexSelect { x, axis, index } => {
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    for (j, &src) in index.iter().enumerate() {
                        let gb = (o * index.len() + j) * inner;
                        let xb = (o * ext + src) * inner;
                        for ii in 0..inner {
                            gx[xb + ii] += g[gb + ii];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean { x, axis } => {
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let inv = cst::<T>(1.0 / ext as f64);
                let mut gx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    for j in 0..ext {
                        for ii in 0..inner {
                            gx[(o * ext + j) * inner + ii] = g[o * inner + ii] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / cst::<T>(n as f64); n]);
            }
            Op::BroadcastTo(x) => {
                let gx = self.reduce_to(*x, out_shape, g.iter().copied());
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / cst::<T>(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                self.accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }

    /// Sums a gradient of `out_shape` back down to the (broadcast) shape of `v`.
    fn reduce_to(&self, v: Var, out_shape: &[usize], g: impl Iterator<Item = T>) -> Vec<T> {
        let sv = self.shape(v);
        if sv == out_shape {
            return g.collect();
        }
        let map = kernels::broadcast_index_map(sv, out_shape);
        let mut out = vec![T::zero(); self.value(v).len()];
        for (k, gv) in g.enumerate() {
            out[map[k]] += gv;
        }
        out
    }
}

/// For each flat output index of a permutation, the flat source index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
