//! Reverse-topological gradient propagation.
//!
//! Gradients for interior nodes live in a transient map keyed by tensor id;
//! only `requires_grad` leaves keep their gradient after the pass, so a
//! second forward pass starts from a clean slate.

use std::collections::HashMap;

use super::kernels;
use super::{Op, Real, Tensor};

pub(super) fn run<F: Real>(loss: &Tensor<F>) {
    let order = loss.topo_order();
    let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
    grads.insert(loss.id(), vec![F::one()]);

    for node in order.iter().rev() {
        let Some(grad_out) = grads.remove(&node.id()) else {
            continue;
        };
        if node.0.requires_grad {
            node.accumulate_grad(&grad_out);
        }
        propagate(node, &grad_out, &mut grads);
    }
}

fn add_into<F: Real>(grads: &mut HashMap<u64, Vec<F>>, target: &Tensor<F>, contribution: Vec<F>) {
    if !target.0.needs_grad {
        return;
    }
    match grads.entry(target.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (g, c) in e.get_mut().iter_mut().zip(contribution) {
                *g += c;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

fn propagate<F: Real>(node: &Tensor<F>, grad_out: &[F], grads: &mut HashMap<u64, Vec<F>>) {
    match &node.0.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (n, c_in, h, w) = match input.shape() {
                &[n, c, h, w] => (n, c, h, w),
                _ => unreachable!("validated in forward"),
            };
            let (c_out, _, kh, kw) = match weight.shape() {
                &[a, b, c, d] => (a, b, c, d),
                _ => unreachable!("validated in forward"),
            };
            let dims = kernels::ConvDims {
                batch: n,
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
                stride: *stride,
                padding: *padding,
                out_h: kernels::conv_out_extent(h, kh, *stride, *padding),
                out_w: kernels::conv_out_extent(w, kw, *stride, *padding),
            };
            let g = kernels::conv2d_backward(
                grad_out,
                input.data(),
                weight.data(),
                &dims,
                input.0.needs_grad,
                weight.0.needs_grad,
                bias.0.needs_grad,
            );
            if let Some(di) = g.dinput {
                add_into(grads, input, di);
            }
            if let Some(dw) = g.dweight {
                add_into(grads, weight, dw);
            }
            if let Some(db) = g.dbias {
                add_into(grads, bias, db);
            }
        }
        Op::Upsample2x(input) => {
            let (n, c, h, w) = match input.shape() {
                &[n, c, h, w] => (n, c, h, w),
                _ => unreachable!("validated in forward"),
            };
            add_into(
                grads,
                input,
                kernels::upsample2x_backward(grad_out, n * c, h, w),
            );
        }
        Op::Add(a, b) => {
            add_into(grads, a, grad_out.to_vec());
            add_into(grads, b, grad_out.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(grads, a, grad_out.to_vec());
            add_into(grads, b, grad_out.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            if a.0.needs_grad {
                let da = grad_out
                    .iter()
                    .zip(b.data())
                    .map(|(&g, &bv)| g * bv)
                    .collect();
                add_into(grads, a, da);
            }
            if b.0.needs_grad {
                let db = grad_out
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &av)| g * av)
                    .collect();
                add_into(grads, b, db);
            }
        }
        Op::Neg(a) => {
            add_into(grads, a, grad_out.iter().map(|&g| -g).collect());
        }
        Op::AddScalar(a) => {
            add_into(grads, a, grad_out.to_vec());
        }
        Op::MulScalar(a, s) => {
            add_into(grads, a, grad_out.iter().map(|&g| g * *s).collect());
        }
        Op::Sigmoid(a) => {
            // y(1-y) in terms of the saved output
            let da = grad_out
                .iter()
                .zip(node.data())
                .map(|(&g, &y)| g * y * (F::one() - y))
                .collect();
            add_into(grads, a, da);
        }
        Op::Relu(a) => {
            let da = grad_out
                .iter()
                .zip(a.data())
                .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                .collect();
            add_into(grads, a, da);
        }
        Op::Sqrt(a) => {
            let half = F::of(0.5);
            let da = grad_out
                .iter()
                .zip(node.data())
                .map(|(&g, &y)| g * half / y)
                .collect();
            add_into(grads, a, da);
        }
        Op::GateMul { x, alpha } => {
            let (n, c, h, w) = match x.shape() {
                &[n, c, h, w] => (n, c, h, w),
                _ => unreachable!("validated in forward"),
            };
            let hw = h * w;
            if x.0.needs_grad {
                let mut dx = vec![F::zero(); x.numel()];
                for nn in 0..n {
                    let a = &alpha.data()[nn * hw..(nn + 1) * hw];
                    for cc in 0..c {
                        let off = (nn * c + cc) * hw;
                        for i in 0..hw {
                            dx[off + i] = grad_out[off + i] * a[i];
                        }
                    }
                }
                add_into(grads, x, dx);
            }
            if alpha.0.needs_grad {
                // channel sum folds into the single gate plane
                let mut dalpha = vec![F::zero(); alpha.numel()];
                for nn in 0..n {
                    let dst = &mut dalpha[nn * hw..(nn + 1) * hw];
                    for cc in 0..c {
                        let off = (nn * c + cc) * hw;
                        for i in 0..hw {
                            dst[i] += grad_out[off + i] * x.data()[off + i];
                        }
                    }
                }
                add_into(grads, alpha, dalpha);
            }
        }
        Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let (n, c, h, w) = match input.shape() {
                &[n, c, h, w] => (n, c, h, w),
                _ => unreachable!("validated in forward"),
            };
            let g = kernels::group_norm_backward(
                grad_out,
                input.data(),
                gamma.data(),
                mean,
                rstd,
                n,
                c,
                h * w,
                *groups,
                input.0.needs_grad,
                gamma.0.needs_grad || beta.0.needs_grad,
            );
            if let Some(di) = g.dinput {
                add_into(grads, input, di);
            }
            if let Some(dg) = g.dgamma {
                add_into(grads, gamma, dg);
            }
            if let Some(db) = g.dbeta {
                add_into(grads, beta, db);
            }
        }
        Op::Attention { q, k, v, attn } => {
            let (n, t, dk) = match q.shape() {
                &[n, t, dk] => (n, t, dk),
                _ => unreachable!("validated in forward"),
            };
            let dv = v.shape()[2];
            let g = kernels::attention_backward(
                grad_out,
                q.data(),
                k.data(),
                v.data(),
                attn,
                n,
                t,
                dk,
                dv,
            );
            add_into(grads, q, g.dq);
            add_into(grads, k, g.dk);
            add_into(grads, v, g.dv);
        }
        Op::NchwToNtc(input) => {
            let (n, c, h, w) = match input.shape() {
                &[n, c, h, w] => (n, c, h, w),
                _ => unreachable!("validated in forward"),
            };
            let hw = h * w;
            let mut di = vec![F::zero(); input.numel()];
            for nn in 0..n {
                for cc in 0..c {
                    let dst = &mut di[(nn * c + cc) * hw..(nn * c + cc + 1) * hw];
                    for (t, d) in dst.iter_mut().enumerate() {
                        *d = grad_out[(nn * hw + t) * c + cc];
                    }
                }
            }
            add_into(grads, input, di);
        }
        Op::NtcToNchw { input, height, width } => {
            let (n, t, c) = match input.shape() {
                &[n, t, c] => (n, t, c),
                _ => unreachable!("validated in forward"),
            };
            let hw = height * width;
            debug_assert_eq!(hw, t);
            let mut di = vec![F::zero(); input.numel()];
            for nn in 0..n {
                for tt in 0..t {
                    let dst = &mut di[(nn * t + tt) * c..(nn * t + tt + 1) * c];
                    for (cc, d) in dst.iter_mut().enumerate() {
                        *d = grad_out[(nn * c + cc) * hw + tt];
                    }
                }
            }
            add_into(grads, input, di);
        }
        Op::Sum(a) => {
            let g = grad_out[0];
            add_into(grads, a, vec![g; a.numel()]);
        }
        Op::Mean(a) => {
            let g = grad_out[0] / F::of(a.numel() as f64);
            add_into(grads, a, vec![g; a.numel()]);
        }
        Op::MagnitudeRi(input) => {
            let (n, _, h, w) = match input.shape() {
                &[n, c, h, w] => (n, c, h, w),
                _ => unreachable!("validated in forward"),
            };
            let hw = h * w;
            // d mag / d re = re / mag, likewise for im; eps keeps mag > 0
            let mut di = vec![F::zero(); input.numel()];
            for nn in 0..n {
                let re = &input.data()[nn * 2 * hw..nn * 2 * hw + hw];
                let im = &input.data()[nn * 2 * hw + hw..(nn + 1) * 2 * hw];
                let mag = &node.data()[nn * hw..(nn + 1) * hw];
                let gout = &grad_out[nn * hw..(nn + 1) * hw];
                for i in 0..hw {
                    let scale = gout[i] / mag[i];
                    di[nn * 2 * hw + i] = scale * re[i];
                    di[nn * 2 * hw + hw + i] = scale * im[i];
                }
            }
            add_into(grads, input, di);
        }
    }
}
