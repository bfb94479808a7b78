//! Layer primitives: convolution, group normalization, ResNet block,
//! attention gate and the bottleneck self-attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{param_tensor, Real, Result, Tensor};

/// Group count for normalizing `channels`: 8 when it divides evenly, 1 for
/// narrow layers, otherwise the largest common divisor with 8.
pub fn norm_groups(channels: usize) -> usize {
    if channels < 8 {
        1
    } else if channels % 8 == 0 {
        8
    } else {
        // gcd(channels, 8); channels is even for every schedule width
        let mut a = channels;
        let mut b = 8;
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
}

pub const GN_EPS: f64 = 1e-5;

/// Fan-in-scaled uniform draw over [-sqrt(3·gain²/fan_in), +bound]. Gain² = 2
/// preserves variance through a following ReLU (Kaiming); gain² = 1 preserves
/// it through a linear path. Using the ReLU gain on linear convs compounds a
/// ×2 variance growth per layer, which drives deep gate logits into sigmoid
/// saturation at init, so each constructor picks the gain for its role.
fn uniform_fan_in<F: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, gain_sq: f64) -> Vec<F> {
    let bound = (3.0 * gain_sq / fan_in as f64).sqrt();
    (0..n)
        .map(|_| F::of(bound * (2.0 * rng.gen::<f64>() - 1.0)))
        .collect()
}

pub struct Conv2d<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Real> Conv2d<F> {
    /// Kaiming init for convs whose output feeds a ReLU.
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_gain(rng, c_in, c_out, k, stride, padding, 2.0)
    }

    /// Variance-preserving init for convs on purely linear paths (stems,
    /// shortcuts, downsamples, projections, gate logits).
    pub fn new_linear(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_gain(rng, c_in, c_out, k, stride, padding, 1.0)
    }

    fn with_gain(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        gain_sq: f64,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        Ok(Conv2d {
            weight: param_tensor(
                uniform_fan_in(rng, c_out * fan_in, fan_in, gain_sq),
                &[c_out, c_in, k, k],
            )?,
            bias: param_tensor(vec![F::zero(); c_out], &[c_out])?,
            stride,
            padding,
        })
    }

    /// Zero weights and biases: the layer outputs zero until trained.
    pub fn zeroed(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(Conv2d {
            weight: param_tensor(vec![F::zero(); c_out * c_in * k * k], &[c_out, c_in, k, k])?,
            bias: param_tensor(vec![F::zero(); c_out], &[c_out])?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

pub struct GroupNorm<F: Real> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub groups: usize,
}

impl<F: Real> GroupNorm<F> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(GroupNorm {
            gamma: param_tensor(vec![F::one(); channels], &[channels])?,
            beta: param_tensor(vec![F::zero(); channels], &[channels])?,
            groups: norm_groups(channels),
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.group_norm(&self.gamma, &self.beta, self.groups, GN_EPS)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

/// Residual block: shortcut(x) + gn2(conv2(relu(gn1(conv1(x))))), with a 1x1
/// shortcut conv only when the channel width changes.
pub struct ResnetBlock<F: Real> {
    pub conv1: Conv2d<F>,
    pub gn1: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    pub gn2: GroupNorm<F>,
    pub shortcut: Option<Conv2d<F>>,
}

impl<F: Real> ResnetBlock<F> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ResnetBlock {
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1)?,
            gn1: GroupNorm::new(c_out)?,
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1)?,
            gn2: GroupNorm::new(c_out)?,
            shortcut: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new_linear(rng, c_in, c_out, 1, 1, 0)?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.gn1.forward(&self.conv1.forward(x)?)?.relu();
        let h = self.gn2.forward(&self.conv2.forward(&h)?)?;
        let base = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        base.add(&h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.gn1.params(&format!("{prefix}.gn1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        self.gn2.params(&format!("{prefix}.gn2"), out);
        if let Some(sc) = &self.shortcut {
            sc.params(&format!("{prefix}.shortcut"), out);
        }
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.conv1.slots(&format!("{prefix}.conv1"), out);
        self.gn1.slots(&format!("{prefix}.gn1"), out);
        self.conv2.slots(&format!("{prefix}.conv2"), out);
        self.gn2.slots(&format!("{prefix}.gn2"), out);
        if let Some(sc) = &mut self.shortcut {
            sc.slots(&format!("{prefix}.shortcut"), out);
        }
    }
}

/// Attention gate over a skip connection: coefficients are computed at the
/// gating signal's (coarser) resolution and upsampled onto the skip.
pub struct AttentionGate<F: Real> {
    /// 1x1 stride-2 projection of the skip feature down to gate resolution.
    pub wx: Conv2d<F>,
    /// 1x1 projection of the gating signal.
    pub wg: Conv2d<F>,
    /// 1x1 collapse to a single coefficient channel.
    pub psi: Conv2d<F>,
}

impl<F: Real> AttentionGate<F> {
    pub fn inter_channels(c_x: usize) -> usize {
        (c_x / 2).max(1)
    }

    pub fn new(rng: &mut ChaCha8Rng, c_x: usize, c_g: usize) -> Result<Self> {
        let f = Self::inter_channels(c_x);
        Ok(AttentionGate {
            wx: Conv2d::new_linear(rng, c_x, f, 1, 2, 0)?,
            wg: Conv2d::new_linear(rng, c_g, f, 1, 1, 0)?,
            psi: Conv2d::new_linear(rng, f, 1, 1, 1, 0)?,
        })
    }

    /// Returns (gated skip, upsampled attention coefficients alpha).
    pub fn forward(&self, x_l: &Tensor<F>, g: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let a = self.wx.forward(x_l)?.add(&self.wg.forward(g)?)?.relu();
        let alpha = self.psi.forward(&a)?.sigmoid().upsample2x()?;
        Ok((x_l.gate_mul(&alpha)?, alpha))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.wx.params(&format!("{prefix}.wx"), out);
        self.wg.params(&format!("{prefix}.wg"), out);
        self.psi.params(&format!("{prefix}.psi"), out);
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.wx.slots(&format!("{prefix}.wx"), out);
        self.wg.slots(&format!("{prefix}.wg"), out);
        self.psi.slots(&format!("{prefix}.psi"), out);
    }
}

/// Single-head self-attention over flattened spatial positions, residual-added.
pub struct SelfAttention2d<F: Real> {
    pub q: Conv2d<F>,
    pub k: Conv2d<F>,
    pub v: Conv2d<F>,
    pub proj: Conv2d<F>,
}

impl<F: Real> SelfAttention2d<F> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Result<Self> {
        Ok(SelfAttention2d {
            q: Conv2d::new_linear(rng, channels, channels, 1, 1, 0)?,
            k: Conv2d::new_linear(rng, channels, channels, 1, 1, 0)?,
            v: Conv2d::new_linear(rng, channels, channels, 1, 1, 0)?,
            proj: Conv2d::new_linear(rng, channels, channels, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w) = match x.shape() {
            &[_, _, h, w] => (h, w),
            _ => unreachable!("conv layers guarantee rank 4"),
        };
        let q = self.q.forward(x)?.nchw_to_ntc()?;
        let k = self.k.forward(x)?.nchw_to_ntc()?;
        let v = self.v.forward(x)?.nchw_to_ntc()?;
        let ctx = Tensor::scaled_dot_attention(&q, &k, &v)?.ntc_to_nchw(h, w)?;
        x.add(&self.proj.forward(&ctx)?)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.q.params(&format!("{prefix}.q"), out);
        self.k.params(&format!("{prefix}.k"), out);
        self.v.params(&format!("{prefix}.v"), out);
        self.proj.params(&format!("{prefix}.proj"), out);
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.q.slots(&format!("{prefix}.q"), out);
        self.k.slots(&format!("{prefix}.k"), out);
        self.v.slots(&format!("{prefix}.v"), out);
        self.proj.slots(&format!("{prefix}.proj"), out);
    }
}
