//! ResNet U-Net speech enhancement predictor with attention-gated skips,
//! bottleneck self-attention, multi-scale heads, and an optional
//! reverse-attention wrapper that decodes positive, residual and negated
//! encoder features through three parallel decoders.

mod count;
pub(crate) mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use count::param_count;

use crate::dsp::{RISpectrogram, StftConfig};
use crate::tensor::{Parameter, Real, Result, Tensor, TensorError};

use layers::{AttentionGate, Conv2d, ResnetBlock, SelfAttention2d};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub use_attention_gates: bool,
    pub use_reverse_attention: bool,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            depth: 4,
            use_attention_gates: true,
            use_reverse_attention: false,
            stft: StftConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 {
            return Err(TensorError::Invalid(format!(
                "base_channels must be at least 2, got {}",
                self.base_channels
            )));
        }
        if self.depth < 1 {
            return Err(TensorError::Invalid("depth must be at least 1".into()));
        }
        if self.use_reverse_attention && !self.use_attention_gates {
            return Err(TensorError::Invalid(
                "reverse attention wraps the attention-gated model; enable attention gates".into(),
            ));
        }
        self.stft
            .validate()
            .map_err(|e| TensorError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// Channel widths along the contracting path: entry 0 is the stem output,
/// entry s the output of encoder stage s. Doubling capped at 8x base.
pub fn widths(cfg: &ModelConfig) -> Vec<usize> {
    let cap = 8 * cfg.base_channels;
    (0..=cfg.depth)
        .map(|s| (cfg.base_channels << s).min(cap))
        .collect()
}

/// How the per-stage 3x3 collapse heads start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    /// Zero weights: the untrained model outputs silence. Default.
    Zero,
    /// Kaiming weights, for tests that need gradient flow through every
    /// parameter from the first step.
    Random,
}

struct EncoderStage<F: Real> {
    res: ResnetBlock<F>,
    down: Conv2d<F>,
}

struct Bottleneck<F: Real> {
    res1: ResnetBlock<F>,
    attn: SelfAttention2d<F>,
    res2: ResnetBlock<F>,
}

impl<F: Real> Bottleneck<F> {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.res2.forward(&self.attn.forward(&self.res1.forward(x)?)?)
    }
}

struct DecoderStage<F: Real> {
    align: Conv2d<F>,
    gate: Option<AttentionGate<F>>,
    res: ResnetBlock<F>,
    head: Conv2d<F>,
}

/// One full decoding tower, deepest stage first.
struct Decoder<F: Real>(Vec<DecoderStage<F>>);

/// Encoder tower output: per-stage skip features (pre-downsample, finest
/// first) and the deepest downsampled map.
struct Encoded<F: Real> {
    skips: Vec<Tensor<F>>,
    deepest: Tensor<F>,
}

pub struct ForwardOutput<F: Real> {
    pub out: Tensor<F>,
    /// Attention coefficients per gate evaluation, in decode order
    /// (deepest stage first; branch after branch under reverse attention).
    pub alphas: Vec<Tensor<F>>,
    /// Aggregated 2-channel output of each decoder tower; one entry for the
    /// plain model, three (positive, residual, negated) under reverse
    /// attention. `out` is their elementwise sum.
    pub branches: Vec<Tensor<F>>,
}

pub struct Predictor<F: Real> {
    pub cfg: ModelConfig,
    stem: Conv2d<F>,
    enc: Vec<EncoderStage<F>>,
    bott: Bottleneck<F>,
    dec: Decoder<F>,
    /// Reverse-attention extras: second encoder tower with bottleneck, plus
    /// residual (M) and negation (R) decoders.
    ra: Option<RaParts<F>>,
}

struct RaParts<F: Real> {
    enc_r: Vec<EncoderStage<F>>,
    bott_r: Bottleneck<F>,
    dec_m: Decoder<F>,
    dec_r: Decoder<F>,
}

fn build_encoder<F: Real>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Vec<EncoderStage<F>>> {
    let w = widths(cfg);
    (1..=cfg.depth)
        .map(|s| {
            Ok(EncoderStage {
                res: ResnetBlock::new(rng, w[s - 1], w[s - 1])?,
                down: Conv2d::new_linear(rng, w[s - 1], w[s], 3, 2, 1)?,
            })
        })
        .collect()
}

fn build_bottleneck<F: Real>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Bottleneck<F>> {
    let wd = *widths(cfg).last().expect("depth >= 1");
    Ok(Bottleneck {
        res1: ResnetBlock::new(rng, wd, wd)?,
        attn: SelfAttention2d::new(rng, wd)?,
        res2: ResnetBlock::new(rng, wd, wd)?,
    })
}

fn build_decoder<F: Real>(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    head_init: HeadInit,
) -> Result<Decoder<F>> {
    let w = widths(cfg);
    let stages = (1..=cfg.depth)
        .rev()
        .map(|s| {
            Ok(DecoderStage {
                align: Conv2d::new_linear(rng, w[s], w[s - 1], 1, 1, 0)?,
                gate: if cfg.use_attention_gates {
                    Some(AttentionGate::new(rng, w[s - 1], w[s])?)
                } else {
                    None
                },
                res: ResnetBlock::new(rng, w[s - 1], w[s - 1])?,
                head: match head_init {
                    HeadInit::Zero => Conv2d::zeroed(w[s - 1], 2, 3, 1, 1)?,
                    HeadInit::Random => Conv2d::new_linear(rng, w[s - 1], 2, 3, 1, 1)?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decoder(stages))
}

impl<F: Real> Predictor<F> {
    /// Build a freshly initialized model. The same seed always produces
    /// bit-identical parameters within one precision.
    pub fn new(cfg: ModelConfig, seed: u64, head_init: HeadInit) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new_linear(&mut rng, 2, cfg.base_channels, 1, 1, 0)?;
        let enc = build_encoder(&mut rng, &cfg)?;
        let bott = build_bottleneck(&mut rng, &cfg)?;
        let dec = build_decoder(&mut rng, &cfg, head_init)?;
        let ra = if cfg.use_reverse_attention {
            Some(RaParts {
                enc_r: build_encoder(&mut rng, &cfg)?,
                bott_r: build_bottleneck(&mut rng, &cfg)?,
                dec_m: build_decoder(&mut rng, &cfg, head_init)?,
                dec_r: build_decoder(&mut rng, &cfg, head_init)?,
            })
        } else {
            None
        };
        Ok(Predictor { cfg, stem, enc, bott, dec, ra })
    }

    fn encode(enc: &[EncoderStage<F>], bott: &Bottleneck<F>, x0: &Tensor<F>) -> Result<Encoded<F>> {
        let mut skips = Vec::with_capacity(enc.len());
        let mut cur = x0.clone();
        for stage in enc {
            let (h, w) = match cur.shape() {
                &[_, _, h, w] => (h, w),
                _ => unreachable!("conv output is rank 4"),
            };
            if h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::Invalid(format!(
                    "encoder stage needs even spatial extents, got {h}x{w}; \
                     pad the input to a multiple of 2^depth"
                )));
            }
            let r = stage.res.forward(&cur)?;
            cur = stage.down.forward(&r)?;
            skips.push(r);
        }
        Ok(Encoded {
            skips,
            deepest: bott.forward(&cur)?,
        })
    }

    /// Run one decoder tower over (deepest feature, skips finest-first);
    /// returns the aggregated 2-channel output plus gate coefficients.
    fn decode(
        dec: &Decoder<F>,
        deepest: &Tensor<F>,
        skips: &[Tensor<F>],
        alphas: &mut Vec<Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let mut d = deepest.clone();
        let mut heads = Vec::with_capacity(dec.0.len());
        for (stage, skip) in dec.0.iter().zip(skips.iter().rev()) {
            let gated = match &stage.gate {
                Some(gate) => {
                    let (gated, alpha) = gate.forward(skip, &d)?;
                    alphas.push(alpha);
                    gated
                }
                None => skip.clone(),
            };
            let u = stage.align.forward(&d.upsample2x()?)?;
            d = stage.res.forward(&u.add(&gated)?)?.relu();
            heads.push(stage.head.forward(&d)?);
        }
        aggregate_heads(&heads)
    }

    /// Forward pass over a [N, 2, F_pad, T_pad] grid whose spatial extents
    /// are multiples of 2^depth. Output has the input's shape.
    pub fn forward(&self, x: &Tensor<F>) -> Result<ForwardOutput<F>> {
        match x.shape() {
            &[_, 2, _, _] => {}
            other => {
                return Err(TensorError::ShapeMismatch {
                    context: "predictor input",
                    expected: vec![0, 2, 0, 0],
                    got: other.to_vec(),
                })
            }
        }
        let x0 = self.stem.forward(x)?;
        let central = Self::encode(&self.enc, &self.bott, &x0)?;
        let mut alphas = Vec::new();
        let out_l = Self::decode(&self.dec, &central.deepest, &central.skips, &mut alphas)?;

        let Some(ra) = &self.ra else {
            return Ok(ForwardOutput {
                out: out_l.clone(),
                alphas,
                branches: vec![out_l],
            });
        };

        let right = Self::encode(&ra.enc_r, &ra.bott_r, &x0)?;
        // negative features: right tower modulated by the sigmoid-negated
        // central tower, at every stage and at the bottleneck
        let neg_skips = central
            .skips
            .iter()
            .zip(&right.skips)
            .map(|(c, r)| r.mul(&c.neg().sigmoid()))
            .collect::<Result<Vec<_>>>()?;
        let neg_deep = right.deepest.mul(&central.deepest.neg().sigmoid())?;

        let resid_skips = central
            .skips
            .iter()
            .zip(&neg_skips)
            .map(|(c, n)| c.sub(n))
            .collect::<Result<Vec<_>>>()?;
        let resid_deep = central.deepest.sub(&neg_deep)?;
        let out_m = Self::decode(&ra.dec_m, &resid_deep, &resid_skips, &mut alphas)?;

        let negated_skips: Vec<Tensor<F>> = central.skips.iter().map(|c| c.neg()).collect();
        let negated_deep = central.deepest.neg();
        let out_r = Self::decode(&ra.dec_r, &negated_deep, &negated_skips, &mut alphas)?;

        Ok(ForwardOutput {
            out: out_l.add(&out_m)?.add(&out_r)?,
            alphas,
            branches: vec![out_l, out_m, out_r],
        })
    }

    /// All named parameters as cheap handles, in a stable construction order.
    pub fn parameters(&self) -> Vec<Parameter<F>> {
        let mut out = Vec::new();
        self.stem.params("stem", &mut out);
        for (i, stage) in self.enc.iter().enumerate() {
            stage.res.params(&format!("enc.{i}.res"), &mut out);
            stage.down.params(&format!("enc.{i}.down"), &mut out);
        }
        self.bott.res1.params("bott.res1", &mut out);
        self.bott.attn.params("bott.attn", &mut out);
        self.bott.res2.params("bott.res2", &mut out);
        decoder_params(&self.dec, "dec", &mut out);
        if let Some(ra) = &self.ra {
            for (i, stage) in ra.enc_r.iter().enumerate() {
                stage.res.params(&format!("renc.{i}.res"), &mut out);
                stage.down.params(&format!("renc.{i}.down"), &mut out);
            }
            ra.bott_r.res1.params("rbott.res1", &mut out);
            ra.bott_r.attn.params("rbott.attn", &mut out);
            ra.bott_r.res2.params("rbott.res2", &mut out);
            decoder_params(&ra.dec_m, "mdec", &mut out);
            decoder_params(&ra.dec_r, "rdec", &mut out);
        }
        out.into_iter()
            .map(|(name, tensor)| Parameter { name, tensor })
            .collect()
    }

    /// Mutable slots for every parameter, for optimizers to swap in updated
    /// leaves. Names match [`Predictor::parameters`] exactly.
    pub fn parameter_slots(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        self.stem.slots("stem", &mut out);
        for (i, stage) in self.enc.iter_mut().enumerate() {
            stage.res.slots(&format!("enc.{i}.res"), &mut out);
            stage.down.slots(&format!("enc.{i}.down"), &mut out);
        }
        self.bott.res1.slots("bott.res1", &mut out);
        self.bott.attn.slots("bott.attn", &mut out);
        self.bott.res2.slots("bott.res2", &mut out);
        decoder_slots(&mut self.dec, "dec", &mut out);
        if let Some(ra) = &mut self.ra {
            for (i, stage) in ra.enc_r.iter_mut().enumerate() {
                stage.res.slots(&format!("renc.{i}.res"), &mut out);
                stage.down.slots(&format!("renc.{i}.down"), &mut out);
            }
            ra.bott_r.res1.slots("rbott.res1", &mut out);
            ra.bott_r.attn.slots("rbott.attn", &mut out);
            ra.bott_r.res2.slots("rbott.res2", &mut out);
            decoder_slots(&mut ra.dec_m, "mdec", &mut out);
            decoder_slots(&mut ra.dec_r, "rdec", &mut out);
        }
        out
    }

    /// Live parameter total; must agree exactly with [`param_count`].
    pub fn live_param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Enhance one spectrogram: scale to unit RMS, pad to multiples of
    /// 2^depth, run the network, crop back and restore the scale.
    pub fn enhance(&self, spec: &RISpectrogram) -> Result<RISpectrogram> {
        let (bins, frames) = (spec.bins(), spec.frames());
        let scale = input_scale(spec.data.data());
        let x = spectrogram_to_input::<F>(spec, self.cfg.depth)?
            .mul_scalar(F::of(1.0 / scale));
        let y = self.forward(&x)?.out.mul_scalar(F::of(scale));
        output_to_spectrogram(&y, bins, frames, spec.config, spec.sample_rate_hz)
    }
}

fn decoder_params<F: Real>(dec: &Decoder<F>, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
    for (i, stage) in dec.0.iter().enumerate() {
        stage.align.params(&format!("{prefix}.{i}.align"), out);
        if let Some(gate) = &stage.gate {
            gate.params(&format!("{prefix}.{i}.gate"), out);
        }
        stage.res.params(&format!("{prefix}.{i}.res"), out);
        stage.head.params(&format!("{prefix}.{i}.head"), out);
    }
}

fn decoder_slots<'a, F: Real>(
    dec: &'a mut Decoder<F>,
    prefix: &str,
    out: &mut Vec<(String, &'a mut Tensor<F>)>,
) {
    for (i, stage) in dec.0.iter_mut().enumerate() {
        stage.align.slots(&format!("{prefix}.{i}.align"), out);
        if let Some(gate) = &mut stage.gate {
            gate.slots(&format!("{prefix}.{i}.gate"), out);
        }
        stage.res.slots(&format!("{prefix}.{i}.res"), out);
        stage.head.slots(&format!("{prefix}.{i}.head"), out);
    }
}

/// Fuse per-stage 2-channel heads, coarsest first, by repeated
/// upsample-and-add; each head must be exactly twice its predecessor.
pub fn aggregate_heads<F: Real>(heads: &[Tensor<F>]) -> Result<Tensor<F>> {
    let mut iter = heads.iter();
    let first = iter
        .next()
        .ok_or_else(|| TensorError::Invalid("aggregate_heads needs at least one head".into()))?;
    let mut running = first.clone();
    for head in iter {
        let up = running.upsample2x()?;
        if up.shape() != head.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "aggregate_heads chain",
                expected: up.shape().to_vec(),
                got: head.shape().to_vec(),
            });
        }
        running = up.add(head)?;
    }
    Ok(running)
}

/// Round `n` up to the next multiple of `unit`.
pub fn pad_to_multiple(n: usize, unit: usize) -> usize {
    n.div_ceil(unit) * unit
}

/// Per-utterance network input scale: the RMS of the spectrogram values,
/// floored so silence maps to 1 (identity). STFT magnitudes span orders of
/// magnitude with loudness; dividing inputs by this scale and multiplying
/// outputs back keeps activations near unit variance for any utterance.
pub fn input_scale(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
    if rms < 1e-12 {
        1.0
    } else {
        rms
    }
}

/// Pack a spectrogram into a zero-padded [1, 2, F_pad, T_pad] network input.
pub fn spectrogram_to_input<F: Real>(spec: &RISpectrogram, depth: usize) -> Result<Tensor<F>> {
    let (bins, frames) = (spec.bins(), spec.frames());
    let unit = 1usize << depth;
    let (fp, tp) = (pad_to_multiple(bins, unit), pad_to_multiple(frames, unit));
    let mut data = vec![F::zero(); 2 * fp * tp];
    for ch in 0..2 {
        for f in 0..bins {
            for t in 0..frames {
                data[(ch * fp + f) * tp + t] =
                    F::of(spec.data.data()[(ch * bins + f) * frames + t]);
            }
        }
    }
    Tensor::from_vec(data, &[1, 2, fp, tp])
}

/// Crop a [1, 2, F_pad, T_pad] network output back to spectrogram extents.
pub fn output_to_spectrogram<F: Real>(
    out: &Tensor<F>,
    bins: usize,
    frames: usize,
    config: StftConfig,
    sample_rate_hz: u32,
) -> Result<RISpectrogram> {
    let (fp, tp) = match out.shape() {
        &[1, 2, fp, tp] => (fp, tp),
        other => {
            return Err(TensorError::ShapeMismatch {
                context: "network output",
                expected: vec![1, 2, 0, 0],
                got: other.to_vec(),
            })
        }
    };
    if fp < bins || tp < frames {
        return Err(TensorError::Invalid(format!(
            "output {fp}x{tp} smaller than requested crop {bins}x{frames}"
        )));
    }
    let mut data = vec![0.0f64; 2 * bins * frames];
    for ch in 0..2 {
        for f in 0..bins {
            for t in 0..frames {
                data[(ch * bins + f) * frames + t] =
                    out.data()[(ch * fp + f) * tp + t].as_f64();
            }
        }
    }
    Ok(RISpectrogram {
        data: Tensor::from_vec(data, &[2, bins, frames])?,
        config,
        sample_rate_hz,
    })
}
