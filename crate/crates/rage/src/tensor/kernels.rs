//! Dense numeric kernels behind the tensor ops.
//!
//! Every kernel computes each output element with a fixed reduction order, so
//! results are bit-identical regardless of thread count. Parallel kernels only
//! split work across disjoint output slices.

use rayon::prelude::*;

use super::Real;

/// Work size above which matmul rows are distributed over the rayon pool.
const PAR_FLOPS_THRESHOLD: usize = 1 << 16;

/// c[m,n] += a[m,k] * b[k,n], all row-major.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [F]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// c[m,j] += sum_l a[m,l] * b[j,l]  (i.e. c += a * b^T), all row-major.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, l: usize, j: usize) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), j * l);
    debug_assert_eq!(c.len(), m * j);
    let row = |i: usize, crow: &mut [F]| {
        let arow = &a[i * l..(i + 1) * l];
        for (jj, cv) in crow.iter_mut().enumerate() {
            let brow = &b[jj * l..(jj + 1) * l];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    };
    if m * l * j >= PAR_FLOPS_THRESHOLD {
        c.par_chunks_mut(j)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(j).enumerate() {
            row(i, crow);
        }
    }
}

/// c[i,n] += sum_j a[j,i] * b[j,n]  (i.e. c += a^T * b), all row-major.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], j: usize, i: usize, n: usize) {
    debug_assert_eq!(a.len(), j * i);
    debug_assert_eq!(b.len(), j * n);
    debug_assert_eq!(c.len(), i * n);
    // Fixed j-major order keeps each c element's accumulation sequence stable.
    for jj in 0..j {
        let arow = &a[jj * i..(jj + 1) * i];
        let brow = &b[jj * n..(jj + 1) * n];
        for (ii, &aji) in arow.iter().enumerate() {
            let crow = &mut c[ii * n..(ii + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + aji * bv;
            }
        }
    }
}

/// Spatial output extent of a convolution along one axis.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, out_h*out_w].
pub fn im2col<F: Real>(
    input: &[F],
    cols: &mut [F],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let out_h = conv_out_extent(h, kh, stride, padding);
    let out_w = conv_out_extent(w, kw, stride, padding);
    let l = out_h * out_w;
    debug_assert_eq!(cols.len(), channels * kh * kw * l);
    let mut r = 0;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[r * l..(r + 1) * l];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    let drow = &mut dst[oh * out_w..(oh + 1) * out_w];
                    if ih < 0 || ih as usize >= h {
                        for v in drow.iter_mut() {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let srow = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in drow.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        *v = if iw < 0 || iw as usize >= w {
                            F::zero()
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Fold column gradients [C*kh*kw, out_h*out_w] back onto the image gradient [C,H,W].
pub fn col2im_acc<F: Real>(
    cols: &[F],
    dinput: &mut [F],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let out_h = conv_out_extent(h, kh, stride, padding);
    let out_w = conv_out_extent(w, kw, stride, padding);
    let l = out_h * out_w;
    let mut r = 0;
    for c in 0..channels {
        let plane_off = c * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[r * l..(r + 1) * l];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let row_off = plane_off + ih as usize * w;
                    let srow = &src[oh * out_w..(oh + 1) * out_w];
                    for (ow, &v) in srow.iter().enumerate() {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dinput[row_off + iw as usize] += v;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv2d_forward<F: Real>(input: &[F], weight: &[F], bias: &[F], d: &ConvDims) -> Vec<F> {
    let l = d.out_h * d.out_w;
    let k = d.c_in * d.kh * d.kw;
    let mut out = vec![F::zero(); d.batch * d.c_out * l];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); k * l]
    };
    for n in 0..d.batch {
        let in_n = &input[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        let out_n = &mut out[n * d.c_out * l..(n + 1) * d.c_out * l];
        if d.is_pointwise() {
            matmul_acc(weight, in_n, out_n, d.c_out, k, l);
        } else {
            im2col(in_n, &mut cols, d.c_in, d.h, d.w, d.kh, d.kw, d.stride, d.padding);
            matmul_acc(weight, &cols, out_n, d.c_out, k, l);
        }
        for (c, orow) in out_n.chunks_mut(l).enumerate() {
            let b = bias[c];
            for v in orow.iter_mut() {
                *v = *v + b;
            }
        }
    }
    out
}

pub struct ConvGrads<F> {
    pub dinput: Option<Vec<F>>,
    pub dweight: Option<Vec<F>>,
    pub dbias: Option<Vec<F>>,
}

pub fn conv2d_backward<F: Real>(
    grad_out: &[F],
    input: &[F],
    weight: &[F],
    d: &ConvDims,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<F> {
    let l = d.out_h * d.out_w;
    let k = d.c_in * d.kh * d.kw;
    let mut dinput = need_input.then(|| vec![F::zero(); d.batch * d.c_in * d.h * d.w]);
    let mut dweight = need_weight.then(|| vec![F::zero(); d.c_out * k]);
    let mut dbias = need_bias.then(|| vec![F::zero(); d.c_out]);

    if let Some(db) = dbias.as_mut() {
        for n in 0..d.batch {
            let g_n = &grad_out[n * d.c_out * l..(n + 1) * d.c_out * l];
            for (c, grow) in g_n.chunks(l).enumerate() {
                let mut acc = F::zero();
                for &g in grow {
                    acc = acc + g;
                }
                db[c] += acc;
            }
        }
    }

    let weight_t = if dinput.is_some() {
        // [k, c_out] transpose of the weight matrix
        let mut wt = vec![F::zero(); k * d.c_out];
        for c in 0..d.c_out {
            for r in 0..k {
                wt[r * d.c_out + c] = weight[c * k + r];
            }
        }
        wt
    } else {
        Vec::new()
    };

    let mut cols = if dweight.is_some() && !d.is_pointwise() {
        vec![F::zero(); k * l]
    } else {
        Vec::new()
    };
    let mut dcols = if dinput.is_some() && !d.is_pointwise() {
        vec![F::zero(); k * l]
    } else {
        Vec::new()
    };

    for n in 0..d.batch {
        let g_n = &grad_out[n * d.c_out * l..(n + 1) * d.c_out * l];
        let in_n = &input[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        if let Some(dw) = dweight.as_mut() {
            if d.is_pointwise() {
                matmul_nt_acc(g_n, in_n, dw, d.c_out, l, k);
            } else {
                im2col(in_n, &mut cols, d.c_in, d.h, d.w, d.kh, d.kw, d.stride, d.padding);
                matmul_nt_acc(g_n, &cols, dw, d.c_out, l, k);
            }
        }
        if let Some(di) = dinput.as_mut() {
            let di_n = &mut di[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
            if d.is_pointwise() {
                matmul_acc(&weight_t, g_n, di_n, k, d.c_out, l);
            } else {
                dcols.iter_mut().for_each(|v| *v = F::zero());
                matmul_acc(&weight_t, g_n, &mut dcols, k, d.c_out, l);
                col2im_acc(&dcols, di_n, d.c_in, d.h, d.w, d.kh, d.kw, d.stride, d.padding);
            }
        }
    }

    ConvGrads { dinput, dweight, dbias }
}

pub fn upsample2x_forward<F: Real>(input: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let base = 2 * i * ow + 2 * j;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Real>(grad: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut din = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut din[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let base = 2 * i * ow + 2 * j;
                dst[i * w + j] = g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
            }
        }
    }
    din
}

pub struct GroupNormStats<F> {
    pub out: Vec<F>,
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn group_norm_forward<F: Real>(
    input: &[F],
    gamma: &[F],
    beta: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> GroupNormStats<F> {
    let cg = channels / groups;
    let m = cg * spatial;
    let mut out = vec![F::zero(); input.len()];
    let mut mean = vec![F::zero(); batch * groups];
    let mut rstd = vec![F::zero(); batch * groups];
    for n in 0..batch {
        for g in 0..groups {
            let off = (n * channels + g * cg) * spatial;
            let x = &input[off..off + m];
            let mut mu = F::zero();
            for &v in x {
                mu = mu + v;
            }
            mu = mu / F::of(m as f64);
            let mut var = F::zero();
            for &v in x {
                let d = v - mu;
                var = var + d * d;
            }
            var = var / F::of(m as f64);
            let rs = (var + F::of(eps)).sqrt().recip();
            mean[n * groups + g] = mu;
            rstd[n * groups + g] = rs;
            let y = &mut out[off..off + m];
            for c in 0..cg {
                let ch = g * cg + c;
                let (ga, be) = (gamma[ch], beta[ch]);
                for s in 0..spatial {
                    let idx = c * spatial + s;
                    y[idx] = (x[idx] - mu) * rs * ga + be;
                }
            }
        }
    }
    GroupNormStats { out, mean, rstd }
}

pub struct GroupNormGrads<F> {
    pub dinput: Option<Vec<F>>,
    pub dgamma: Option<Vec<F>>,
    pub dbeta: Option<Vec<F>>,
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<F: Real>(
    grad: &[F],
    input: &[F],
    gamma: &[F],
    mean: &[F],
    rstd: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    need_input: bool,
    need_affine: bool,
) -> GroupNormGrads<F> {
    let cg = channels / groups;
    let m = cg * spatial;
    let m_f = F::of(m as f64);
    let mut dinput = need_input.then(|| vec![F::zero(); input.len()]);
    let mut dgamma = need_affine.then(|| vec![F::zero(); channels]);
    let mut dbeta = need_affine.then(|| vec![F::zero(); channels]);
    for n in 0..batch {
        for g in 0..groups {
            let off = (n * channels + g * cg) * spatial;
            let x = &input[off..off + m];
            let go = &grad[off..off + m];
            let (mu, rs) = (mean[n * groups + g], rstd[n * groups + g]);

            if let (Some(dg), Some(db)) = (dgamma.as_mut(), dbeta.as_mut()) {
                for c in 0..cg {
                    let ch = g * cg + c;
                    let mut sg = F::zero();
                    let mut sb = F::zero();
                    for s in 0..spatial {
                        let idx = c * spatial + s;
                        sg = sg + go[idx] * (x[idx] - mu) * rs;
                        sb = sb + go[idx];
                    }
                    dg[ch] += sg;
                    db[ch] += sb;
                }
            }

            if let Some(di) = dinput.as_mut() {
                // dx = rs * (gy - mean(gy) - xhat * mean(gy * xhat)),  gy = g * gamma_c
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                for c in 0..cg {
                    let ga = gamma[g * cg + c];
                    for s in 0..spatial {
                        let idx = c * spatial + s;
                        let gy = go[idx] * ga;
                        s1 = s1 + gy;
                        s2 = s2 + gy * (x[idx] - mu) * rs;
                    }
                }
                s1 = s1 / m_f;
                s2 = s2 / m_f;
                let d = &mut di[off..off + m];
                for c in 0..cg {
                    let ga = gamma[g * cg + c];
                    for s in 0..spatial {
                        let idx = c * spatial + s;
                        let xhat = (x[idx] - mu) * rs;
                        d[idx] = rs * (go[idx] * ga - s1 - xhat * s2);
                    }
                }
            }
        }
    }
    GroupNormGrads { dinput, dgamma, dbeta }
}

pub struct AttentionOut<F> {
    pub out: Vec<F>,
    pub attn: Vec<F>,
}

/// softmax(q k^T / sqrt(dk)) v over [batch, seq, dk] / [batch, seq, dv] inputs.
pub fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    batch: usize,
    seq: usize,
    dk: usize,
    dv: usize,
) -> AttentionOut<F> {
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut attn = vec![F::zero(); batch * seq * seq];
    let mut out = vec![F::zero(); batch * seq * dv];
    for n in 0..batch {
        let qn = &q[n * seq * dk..(n + 1) * seq * dk];
        let kn = &k[n * seq * dk..(n + 1) * seq * dk];
        let vn = &v[n * seq * dv..(n + 1) * seq * dv];
        let an = &mut attn[n * seq * seq..(n + 1) * seq * seq];
        matmul_nt_acc(qn, kn, an, seq, dk, seq);
        for row in an.chunks_mut(seq) {
            let mut mx = F::neg_infinity();
            for v in row.iter_mut() {
                *v = *v * scale;
                if *v > mx {
                    mx = *v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let on = &mut out[n * seq * dv..(n + 1) * seq * dv];
        matmul_acc(an, vn, on, seq, seq, dv);
    }
    AttentionOut { out, attn }
}

pub struct AttentionGrads<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dv: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Real>(
    grad: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    attn: &[F],
    batch: usize,
    seq: usize,
    dk: usize,
    dv: usize,
) -> AttentionGrads<F> {
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut dq = vec![F::zero(); q.len()];
    let mut dkk = vec![F::zero(); k.len()];
    let mut dvv = vec![F::zero(); v.len()];
    let mut dattn = vec![F::zero(); seq * seq];
    let mut dlogits = vec![F::zero(); seq * seq];
    for n in 0..batch {
        let g_n = &grad[n * seq * dv..(n + 1) * seq * dv];
        let qn = &q[n * seq * dk..(n + 1) * seq * dk];
        let kn = &k[n * seq * dk..(n + 1) * seq * dk];
        let vn = &v[n * seq * dv..(n + 1) * seq * dv];
        let an = &attn[n * seq * seq..(n + 1) * seq * seq];

        matmul_tn_acc(an, g_n, &mut dvv[n * seq * dv..(n + 1) * seq * dv], seq, seq, dv);

        dattn.iter_mut().for_each(|x| *x = F::zero());
        matmul_nt_acc(g_n, vn, &mut dattn, seq, dv, seq);

        // softmax jacobian-vector product per row
        for i in 0..seq {
            let arow = &an[i * seq..(i + 1) * seq];
            let darow = &dattn[i * seq..(i + 1) * seq];
            let mut dot = F::zero();
            for (&a, &da) in arow.iter().zip(darow.iter()) {
                dot = dot + a * da;
            }
            let lrow = &mut dlogits[i * seq..(i + 1) * seq];
            for ((l, &a), &da) in lrow.iter_mut().zip(arow.iter()).zip(darow.iter()) {
                *l = a * (da - dot) * scale;
            }
        }

        matmul_acc(&dlogits, kn, &mut dq[n * seq * dk..(n + 1) * seq * dk], seq, seq, dk);
        matmul_tn_acc(&dlogits, qn, &mut dkk[n * seq * dk..(n + 1) * seq * dk], seq, seq, dk);
    }
    AttentionGrads { dq, dk: dkk, dv: dvv }
}
