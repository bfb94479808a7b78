//! Closed-form parameter counting, kept independent of the live tensors so
//! the two totals can cross-check each other.

use super::{widths, ModelConfig};
use crate::model::layers::AttentionGate;

fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

fn group_norm(channels: usize) -> usize {
    2 * channels
}

fn resnet(c_in: usize, c_out: usize) -> usize {
    let shortcut = if c_in == c_out { 0 } else { conv(c_in, c_out, 1) };
    conv(c_in, c_out, 3) + group_norm(c_out) + conv(c_out, c_out, 3) + group_norm(c_out) + shortcut
}

fn gate(c_x: usize, c_g: usize) -> usize {
    let f = AttentionGate::<f64>::inter_channels(c_x);
    conv(c_x, f, 1) + conv(c_g, f, 1) + conv(f, 1, 1)
}

/// One encoder tower: per-stage resnet plus strided downsample conv.
fn encoder(cfg: &ModelConfig) -> usize {
    let w = widths(cfg);
    (1..=cfg.depth)
        .map(|s| resnet(w[s - 1], w[s - 1]) + conv(w[s - 1], w[s], 3))
        .sum()
}

/// Bottleneck: resnet, four 1x1 attention projections, resnet.
fn bottleneck(cfg: &ModelConfig) -> usize {
    let wd = *widths(cfg).last().expect("depth >= 1");
    2 * resnet(wd, wd) + 4 * conv(wd, wd, 1)
}

/// One decoder tower: align conv, optional gate, resnet and 2-channel head
/// per stage.
fn decoder(cfg: &ModelConfig) -> usize {
    let w = widths(cfg);
    (1..=cfg.depth)
        .map(|s| {
            let gate_params = if cfg.use_attention_gates {
                gate(w[s - 1], w[s])
            } else {
                0
            };
            conv(w[s], w[s - 1], 1) + gate_params + resnet(w[s - 1], w[s - 1]) + conv(w[s - 1], 2, 3)
        })
        .sum()
}

/// Exact scalar parameter total for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.base_channels;
    let core = conv(2, c, 1) + encoder(cfg) + bottleneck(cfg) + decoder(cfg);
    if cfg.use_reverse_attention {
        // second encoder tower with its own bottleneck, plus two more decoders
        core + encoder(cfg) + bottleneck(cfg) + 2 * decoder(cfg)
    } else {
        core
    }
}
