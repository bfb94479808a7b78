//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Result, Tensor};

/// Report from comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over all perturbed coordinates.
    pub max_rel_err: f64,
    /// Flat index (input #, coordinate) where the maximum occurred.
    pub worst: (usize, usize),
}

/// Compare the analytic gradients of `f` at `inputs` against central finite
/// differences with step `eps`, perturbing every coordinate of every input.
///
/// `f` must rebuild the graph from the given leaves on every call. Relative
/// error uses a denominator floor of 1e-8 so near-zero derivative pairs
/// compare in absolute terms. Meant for f64 tensors; f32 rounding drowns the
/// signal at usable step sizes.
pub fn finite_diff_check<F, Build>(inputs: &[Tensor<F>], eps: f64, mut f: Build) -> Result<FdReport>
where
    F: Real,
    Build: FnMut(&[Tensor<F>]) -> Result<Tensor<F>>,
{
    let leaves: Vec<Tensor<F>> = inputs
        .iter()
        .map(|t| Tensor::with_grad(t.data().to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<F>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![F::zero(); l.numel()]))
        .collect();

    let eval = |pts: &[Vec<F>], f: &mut Build| -> Result<f64> {
        let rebuilt: Vec<Tensor<F>> = pts
            .iter()
            .zip(inputs)
            .map(|(d, t)| Tensor::from_vec(d.clone(), t.shape()))
            .collect::<Result<_>>()?;
        Ok(f(&rebuilt)?.data()[0].as_f64())
    };

    let mut points: Vec<Vec<F>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    for i in 0..points.len() {
        for j in 0..points[i].len() {
            let orig = points[i][j];
            points[i][j] = orig + F::of(eps);
            let up = eval(&points, &mut f)?;
            points[i][j] = orig - F::of(eps);
            let down = eval(&points, &mut f)?;
            points[i][j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (i, j);
            }
        }
    }
    Ok(FdReport { max_rel_err, worst })
}

/// Worst finite-difference deviation seen for one operation across all its
/// random trials.
#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
}

/// Uniform magnitudes in [min_abs, max_abs) with random signs: random data
/// that stays clear of non-differentiable points at zero.
fn away_from_zero(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    min_abs: f64,
    max_abs: f64,
) -> Result<Tensor<f64>> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..max_abs)
        })
        .collect();
    Tensor::from_vec(data, shape)
}

fn run_op<M, B>(
    rng: &mut ChaCha8Rng,
    instances: usize,
    eps: f64,
    mut make: M,
    mut build: B,
) -> Result<f64>
where
    M: FnMut(&mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>>,
    B: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut max = 0.0f64;
    for _ in 0..instances {
        let inputs = make(rng)?;
        max = max.max(finite_diff_check(&inputs, eps, &mut build)?.max_rel_err);
    }
    Ok(max)
}

/// Verify every differentiable tensor operation against central finite
/// differences on `instances` random inputs each, in f64. Shapes and data
/// are drawn from `seed`; the report lists the worst relative error per op.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<OpGradReport>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<OpGradReport> = Vec::new();
    let push = |op, max_rel_err| OpGradReport { op, instances, max_rel_err };

    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(3..=5usize);
    let chans = |rng: &mut ChaCha8Rng| rng.gen_range(1..=3usize);

    let conv_inputs = |rng: &mut ChaCha8Rng, k: usize| -> Result<Vec<Tensor<f64>>> {
        let (c_in, c_out) = (chans(rng), chans(rng));
        let (h, w) = (dim(rng), dim(rng));
        Ok(vec![
            uniform(rng, &[1, c_in, h, w], -1.0, 1.0)?,
            uniform(rng, &[c_out, c_in, k, k], -0.7, 0.7)?,
            uniform(rng, &[c_out], -0.3, 0.3)?,
        ])
    };
    let r = run_op(rng, instances, 1e-5, |r| conv_inputs(r, 3), |t| {
        Ok(t[0].conv2d(&t[1], &t[2], 1, 1)?.sum())
    })?;
    out.push(push("conv2d 3x3 stride 1", r));

    let r = run_op(rng, instances, 1e-5, |r| conv_inputs(r, 3), |t| {
        Ok(t[0].conv2d(&t[1], &t[2], 2, 1)?.sum())
    })?;
    out.push(push("conv2d 3x3 stride 2", r));

    let r = run_op(rng, instances, 1e-5, |r| conv_inputs(r, 1), |t| {
        Ok(t[0].conv2d(&t[1], &t[2], 1, 0)?.sum())
    })?;
    out.push(push("conv2d 1x1", r));

    let grid = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let shape = [1, chans(rng), dim(rng), dim(rng)];
        Ok(vec![uniform(rng, &shape, -1.0, 1.0)?])
    };
    let pair = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let shape = [1, chans(rng), dim(rng), dim(rng)];
        Ok(vec![
            uniform(rng, &shape, -1.0, 1.0)?,
            uniform(rng, &shape, -1.0, 1.0)?,
        ])
    };

    let r = run_op(rng, instances, 1e-5, grid, |t| Ok(t[0].upsample2x()?.sum()))?;
    out.push(push("upsample2x", r));

    let r = run_op(rng, instances, 1e-5, pair, |t| Ok(t[0].add(&t[1])?.sum()))?;
    out.push(push("add", r));
    let r = run_op(rng, instances, 1e-5, pair, |t| Ok(t[0].sub(&t[1])?.sum()))?;
    out.push(push("sub", r));
    let r = run_op(rng, instances, 1e-5, pair, |t| Ok(t[0].mul(&t[1])?.sum()))?;
    out.push(push("mul", r));

    let r = run_op(rng, instances, 1e-5, grid, |t| Ok(t[0].neg().sum()))?;
    out.push(push("neg", r));
    let r = run_op(rng, instances, 1e-5, grid, |t| Ok(t[0].add_scalar(0.37).sum()))?;
    out.push(push("add_scalar", r));
    let r = run_op(rng, instances, 1e-5, grid, |t| Ok(t[0].mul_scalar(-1.83).sum()))?;
    out.push(push("mul_scalar", r));

    let r = run_op(rng, instances, 1e-6, grid, |t| Ok(t[0].sigmoid().sum()))?;
    out.push(push("sigmoid", r));

    let relu_in = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let shape = [1, chans(rng), dim(rng), dim(rng)];
        Ok(vec![away_from_zero(rng, &shape, 0.05, 1.0)?])
    };
    let r = run_op(rng, instances, 1e-5, relu_in, |t| Ok(t[0].relu().sum()))?;
    out.push(push("relu", r));

    let sqrt_in = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let shape = [1, chans(rng), dim(rng), dim(rng)];
        Ok(vec![uniform(rng, &shape, 0.1, 1.2)?])
    };
    let r = run_op(rng, instances, 1e-6, sqrt_in, |t| Ok(t[0].sqrt_elem().sum()))?;
    out.push(push("sqrt_elem", r));

    let gate_in = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let (c, h, w) = (chans(rng), dim(rng), dim(rng));
        Ok(vec![
            uniform(rng, &[1, c, h, w], -1.0, 1.0)?,
            uniform(rng, &[1, 1, h, w], 0.05, 0.95)?,
        ])
    };
    let r = run_op(rng, instances, 1e-5, gate_in, |t| Ok(t[0].gate_mul(&t[1])?.sum()))?;
    out.push(push("gate_mul", r));

    let gn_in = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let (h, w) = (dim(rng), dim(rng));
        Ok(vec![
            uniform(rng, &[1, 4, h, w], -1.0, 1.0)?,
            uniform(rng, &[4], 0.5, 1.5)?,
            uniform(rng, &[4], -0.5, 0.5)?,
        ])
    };
    let r = run_op(rng, instances, 1e-5, gn_in, |t| {
        Ok(t[0].group_norm(&t[1], &t[2], 2, 1e-5)?.sum())
    })?;
    out.push(push("group_norm", r));

    let attn_in = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let (tokens, c) = (rng.gen_range(2..=5usize), chans(rng) + 1);
        Ok(vec![
            uniform(rng, &[1, tokens, c], -1.0, 1.0)?,
            uniform(rng, &[1, tokens, c], -1.0, 1.0)?,
            uniform(rng, &[1, tokens, c], -1.0, 1.0)?,
        ])
    };
    let r = run_op(rng, instances, 1e-5, attn_in, |t| {
        Ok(Tensor::scaled_dot_attention(&t[0], &t[1], &t[2])?.sum())
    })?;
    out.push(push("scaled_dot_attention", r));

    let r = run_op(rng, instances, 1e-5, grid, |t| {
        let (h, w) = (t[0].shape()[2], t[0].shape()[3]);
        Ok(t[0].nchw_to_ntc()?.ntc_to_nchw(h, w)?.mul(&t[0])?.sum())
    })?;
    out.push(push("nchw/ntc reshape round trip", r));

    let r = run_op(rng, instances, 1e-5, grid, |t| t[0].mul(&t[0])?.mean())?;
    out.push(push("mean", r));

    let mag_in = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
        let (f, t) = (dim(rng), dim(rng));
        Ok(vec![away_from_zero(rng, &[1, 2, f, t], 0.05, 1.0)?])
    };
    let r = run_op(rng, instances, 1e-6, mag_in, |t| {
        Ok(t[0].magnitude_ri(1e-9)?.sum())
    })?;
    out.push(push("magnitude_ri", r));

    Ok(out)
}
