//! Reference kernels for every [`OpKind`].
//!
//! Every reduction runs in a fixed order that depends only on
//! the extents of the reduced axis, never on how many frames or pixels are
//! in the tensor. A per-frame or per-pixel kernel therefore produces the
//! same bits whether it sees the whole feature map or one slice of it.

use crate::error::KernelError;
use crate::ops::{OpKind, STEP_EMBED_DIM};
use crate::tensor::{Scalar, Shape5, Tensor};

/// Runtime context shared by all kernels of one network evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCtx {
    pub step: usize,
}

/// Sinusoidal embedding of a denoising step index.
pub fn step_embedding(step: usize) -> [f64; STEP_EMBED_DIM] {
    let half = STEP_EMBED_DIM / 2;
    let mut emb = [0.0; STEP_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        emb[i] = arg.sin();
        emb[half + i] = arg.cos();
    }
    emb
}

/// Pure form: allocates and returns a fresh output.
pub fn apply_kernel<T: Scalar>(
    kind: &OpKind,
    inputs: &[&Tensor<T>],
    params: &[&[T]],
    ctx: StepCtx,
) -> Result<Tensor<T>, KernelError> {
    let mut out = Tensor::empty_with_capacity(0);
    let mut scratch = Vec::new();
    apply_kernel_into(kind, inputs, params, ctx, &mut out, &mut scratch)?;
    Ok(out)
}

/// Computes `kind` into `out`, resizing it to the output shape, using
/// `scratch` as working memory. Both buffers keep their allocation when
/// already large enough.
pub fn apply_kernel_into<T: Scalar>(
    kind: &OpKind,
    inputs: &[&Tensor<T>],
    params: &[&[T]],
    ctx: StepCtx,
    out: &mut Tensor<T>,
    scratch: &mut Vec<T>,
) -> Result<(), KernelError> {
    let shapes: Vec<Shape5> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = kind.infer_shape(&shapes)?;
    if let Some(&first) = shapes.first() {
        let specs = kind.param_specs(first);
        if specs.len() != params.len() {
            return Err(KernelError::InvalidParam(format!(
                "{} expects {} parameter tensors, got {}",
                kind.name(),
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(params) {
            if spec.numel() != p.len() {
                return Err(KernelError::InvalidParam(format!(
                    "{}.{} has {} elements, expected {:?}",
                    kind.name(),
                    spec.name,
                    p.len(),
                    spec.shape
                )));
            }
        }
    }
    out.reshape_for_write(out_shape);
    let need = shapes.first().map(|&s| kind.scratch_elems(s)).unwrap_or(0);
    scratch.clear();
    scratch.resize(need, T::zero());

    match kind {
        OpKind::Input { .. } => {
            return Err(KernelError::InvalidParam("input placeholders are not executable".into()))
        }
        OpKind::Conv2d { .. } => conv2d(inputs[0], params[0], params[1], out),
        OpKind::TemporalConv { .. } => temporal_conv(inputs[0], params[0], params[1], out),
        OpKind::GroupNorm { groups, eps } => group_norm(inputs[0], *groups, T::of(*eps), params[0], params[1], out),
        OpKind::LayerNorm { eps } => layer_norm(inputs[0], T::of(*eps), params[0], params[1], out),
        OpKind::Silu => {
            for (o, &x) in out.data_mut().iter_mut().zip(inputs[0].data()) {
                *o = x / (T::one() + (-x).exp());
            }
        }
        OpKind::Linear { .. } => linear(inputs[0], params[0], params[1], out),
        OpKind::StepBias => step_bias(inputs[0], params[0], params[1], ctx, out),
        OpKind::SpatialAttention => spatial_attention(inputs[0], params, out, scratch),
        OpKind::TemporalAttention => temporal_attention(inputs[0], params, out, scratch),
        OpKind::Downsample2x => downsample(inputs[0], out),
        OpKind::Upsample2x => upsample(inputs[0], out),
        OpKind::Add => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(a).zip(b) {
                *o = x + y;
            }
        }
        OpKind::Concat => concat(inputs, out),
        OpKind::Split { offset, len } => {
            let s = inputs[0].shape();
            let hw = s.plane();
            let src = inputs[0].data();
            let dst = out.data_mut();
            for f in 0..s.bt() {
                let from = (f * s.c + offset) * hw;
                dst[f * len * hw..(f + 1) * len * hw].copy_from_slice(&src[from..from + len * hw]);
            }
        }
    }
    Ok(())
}

fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out: &mut Tensor<T>) {
    let s = x.shape();
    let (cin, h, w, hw) = (s.c, s.h as isize, s.w as isize, s.plane());
    let cout = out.shape().c;
    let src_all = x.data();
    let dst_all = out.data_mut();
    for f in 0..s.bt() {
        let src_frame = &src_all[f * cin * hw..(f + 1) * cin * hw];
        for co in 0..cout {
            let dst = &mut dst_all[(f * cout + co) * hw..(f * cout + co + 1) * hw];
            dst.fill(T::zero());
            for ci in 0..cin {
                let src = &src_frame[ci * hw..(ci + 1) * hw];
                for ky in 0..3isize {
                    let dy = ky - 1;
                    for kx in 0..3isize {
                        let dx = kx - 1;
                        let wv = weight[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize];
                        let (y0, y1) = (0.max(-dy), h.min(h - dy));
                        let (x0, x1) = (0.max(-dx), w.min(w - dx));
                        for y in y0..y1 {
                            let d = &mut dst[(y * w + x0) as usize..(y * w + x1) as usize];
                            let srow = (y + dy) * w + dx;
                            let s = &src[(srow + x0) as usize..(srow + x1) as usize];
                            for (o, &v) in d.iter_mut().zip(s) {
                                *o = *o + wv * v;
                            }
                        }
                    }
                }
            }
            let b = bias[co];
            for v in dst.iter_mut() {
                *v = *v + b;
            }
        }
    }
}

fn temporal_conv<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out: &mut Tensor<T>) {
    let s = x.shape();
    let (cin, hw) = (s.c, s.plane());
    let cout = out.shape().c;
    let src = x.data();
    let dst_all = out.data_mut();
    for b in 0..s.b {
        for t in 0..s.t {
            for co in 0..cout {
                let o = ((b * s.t + t) * cout + co) * hw;
                let dst = &mut dst_all[o..o + hw];
                dst.fill(T::zero());
                for ci in 0..cin {
                    for dt in 0..3usize {
                        let tt = t as isize + dt as isize - 1;
                        if tt < 0 || tt >= s.t as isize {
                            continue;
                        }
                        let wv = weight[(co * cin + ci) * 3 + dt];
                        let i = ((b * s.t + tt as usize) * cin + ci) * hw;
                        for (d, &v) in dst.iter_mut().zip(&src[i..i + hw]) {
                            *d = *d + wv * v;
                        }
                    }
                }
                let bv = bias[co];
                for d in dst.iter_mut() {
                    *d = *d + bv;
                }
            }
        }
    }
}

fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, eps: T, gamma: &[T], beta: &[T], out: &mut Tensor<T>) {
    let s = x.shape();
    let (c, hw) = (s.c, s.plane());
    let cg = c / groups;
    let n = T::of((cg * hw) as f64);
    let src = x.data();
    let dst = out.data_mut();
    for f in 0..s.bt() {
        for g in 0..groups {
            let lo = (f * c + g * cg) * hw;
            let hi = lo + cg * hw;
            let vals = &src[lo..hi];
            let mean = vals.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = vals.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            for k in 0..cg {
                let ch = g * cg + k;
                let (ga, be) = (gamma[ch], beta[ch]);
                for i in 0..hw {
                    let j = lo + k * hw + i;
                    dst[j] = (src[j] - mean) * inv * ga + be;
                }
            }
        }
    }
}

fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: T, gamma: &[T], beta: &[T], out: &mut Tensor<T>) {
    let s = x.shape();
    let (c, hw) = (s.c, s.plane());
    let n = T::of(c as f64);
    let src = x.data();
    let dst = out.data_mut();
    for f in 0..s.bt() {
        let base = f * c * hw;
        for p in 0..hw {
            let mut mean = T::zero();
            for ch in 0..c {
                mean = mean + src[base + ch * hw + p];
            }
            mean = mean / n;
            let mut var = T::zero();
            for ch in 0..c {
                let d = src[base + ch * hw + p] - mean;
                var = var + d * d;
            }
            let inv = T::one() / (var / n + eps).sqrt();
            for ch in 0..c {
                let j = base + ch * hw + p;
                dst[j] = (src[j] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
}

fn linear<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out: &mut Tensor<T>) {
    let s = x.shape();
    let (cin, hw) = (s.c, s.plane());
    let cout = out.shape().c;
    let src_all = x.data();
    let dst_all = out.data_mut();
    for f in 0..s.bt() {
        for co in 0..cout {
            let dst = &mut dst_all[(f * cout + co) * hw..(f * cout + co + 1) * hw];
            dst.fill(T::zero());
            for ci in 0..cin {
                let wv = weight[co * cin + ci];
                let src = &src_all[(f * cin + ci) * hw..(f * cin + ci + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + wv * v;
                }
            }
            let b = bias[co];
            for d in dst.iter_mut() {
                *d = *d + b;
            }
        }
    }
}

fn step_bias<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], ctx: StepCtx, out: &mut Tensor<T>) {
    let s = x.shape();
    let emb = step_embedding(ctx.step).map(T::of);
    let shift: Vec<T> = (0..s.c)
        .map(|ch| {
            let row = &weight[ch * STEP_EMBED_DIM..(ch + 1) * STEP_EMBED_DIM];
            row.iter().zip(&emb).fold(T::zero(), |a, (&w, &e)| a + w * e) + bias[ch]
        })
        .collect();
    let hw = s.plane();
    let src = x.data();
    let dst = out.data_mut();
    for f in 0..s.bt() {
        for (ch, &sh) in shift.iter().enumerate() {
            let o = (f * s.c + ch) * hw;
            for i in o..o + hw {
                dst[i] = src[i] + sh;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order, so the result depends only on the operands.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let split = a.len() - a.len() % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    for (l, (&x, &y)) in a[split..].iter().zip(&b[split..]).enumerate() {
        acc[l] = acc[l] + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Attention over `tokens` vectors of width `c`. `get(n, j)` reads input
/// channel `j` of token `n`; `put(n, j, v)` writes the output. `scratch`
/// holds q, k (`tokens × c`), v transposed (`c × tokens`) and the
/// `tokens × tokens` score matrix.
fn attend<T: Scalar>(
    tokens: usize,
    c: usize,
    params: &[&[T]],
    scratch: &mut [T],
    get: impl Fn(usize, usize) -> T,
    mut put: impl FnMut(usize, usize, T),
) {
    let (wq, wk, wv, wo, bo) = (params[0], params[1], params[2], params[3], params[4]);
    let (q, rest) = scratch.split_at_mut(tokens * c);
    let (k, rest) = rest.split_at_mut(tokens * c);
    let (v, scores) = rest.split_at_mut(tokens * c);
    for n in 0..tokens {
        for i in 0..c {
            let (mut aq, mut ak, mut av) = (T::zero(), T::zero(), T::zero());
            for j in 0..c {
                let x = get(n, j);
                aq = aq + wq[i * c + j] * x;
                ak = ak + wk[i * c + j] * x;
                av = av + wv[i * c + j] * x;
            }
            q[n * c + i] = aq;
            k[n * c + i] = ak;
            v[i * tokens + n] = av;
        }
    }
    let scale = T::one() / T::of(c as f64).sqrt();
    for n in 0..tokens {
        let row = &mut scores[n * tokens..(n + 1) * tokens];
        let qn = &q[n * c..(n + 1) * c];
        for (m, r) in row.iter_mut().enumerate() {
            let km = &k[m * c..(m + 1) * c];
            *r = dot(qn, km) * scale;
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum = sum + *r;
        }
        for r in row.iter_mut() {
            *r = *r / sum;
        }
    }
    // q is dead once the scores exist; its storage holds the attended values
    for n in 0..tokens {
        let row = &scores[n * tokens..(n + 1) * tokens];
        for i in 0..c {
            q[n * c + i] = dot(row, &v[i * tokens..(i + 1) * tokens]);
        }
    }
    for n in 0..tokens {
        let a = &q[n * c..(n + 1) * c];
        for co in 0..c {
            let y = a.iter().zip(&wo[co * c..(co + 1) * c]).fold(T::zero(), |acc, (&x, &w)| acc + w * x);
            put(n, co, y + bo[co]);
        }
    }
}

fn spatial_attention<T: Scalar>(x: &Tensor<T>, params: &[&[T]], out: &mut Tensor<T>, scratch: &mut [T]) {
    let s = x.shape();
    let (c, n) = (s.c, s.plane());
    let per = n * n + 3 * n * c;
    let src = x.data();
    let dst = out.data_mut();
    for f in 0..s.bt() {
        let base = f * c * n;
        let frame = &src[base..base + c * n];
        let out_frame = &mut dst[base..base + c * n];
        attend(
            n,
            c,
            params,
            &mut scratch[f * per..(f + 1) * per],
            |tok, j| frame[j * n + tok],
            |tok, j, v| out_frame[j * n + tok] = v,
        );
    }
}

fn temporal_attention<T: Scalar>(x: &Tensor<T>, params: &[&[T]], out: &mut Tensor<T>, scratch: &mut [T]) {
    let s = x.shape();
    let (c, t, hw) = (s.c, s.t, s.plane());
    let per = t * t + 3 * t * c;
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..s.b {
        for p in 0..hw {
            let idx = |tok: usize, j: usize| ((b * t + tok) * c + j) * hw + p;
            let slot = (b * hw + p) * per;
            attend(
                t,
                c,
                params,
                &mut scratch[slot..slot + per],
                |tok, j| src[idx(tok, j)],
                |tok, j, v| dst[idx(tok, j)] = v,
            );
        }
    }
}

fn downsample<T: Scalar>(x: &Tensor<T>, out: &mut Tensor<T>) {
    let s = x.shape();
    let o = out.shape();
    let quarter = T::of(0.25);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..s.bt() * s.c {
        let si = plane * s.plane();
        let di = plane * o.plane();
        for y in 0..o.h {
            for xx in 0..o.w {
                let a = si + 2 * y * s.w + 2 * xx;
                let sum = src[a] + src[a + 1] + src[a + s.w] + src[a + s.w + 1];
                dst[di + y * o.w + xx] = sum * quarter;
            }
        }
    }
}

fn upsample<T: Scalar>(x: &Tensor<T>, out: &mut Tensor<T>) {
    let s = x.shape();
    let o = out.shape();
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..s.bt() * s.c {
        let si = plane * s.plane();
        let di = plane * o.plane();
        for y in 0..o.h {
            for xx in 0..o.w {
                dst[di + y * o.w + xx] = src[si + (y / 2) * s.w + xx / 2];
            }
        }
    }
}

fn concat<T: Scalar>(inputs: &[&Tensor<T>], out: &mut Tensor<T>) {
    let o = out.shape();
    let hw = o.plane();
    let dst = out.data_mut();
    for f in 0..o.bt() {
        let mut ch = 0;
        for x in inputs {
            let c = x.shape().c;
            let src = &x.data()[f * c * hw..(f + 1) * c * hw];
            let at = (f * o.c + ch) * hw;
            dst[at..at + c * hw].copy_from_slice(src);
            ch += c;
        }
    }
}
