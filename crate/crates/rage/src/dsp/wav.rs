//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.

use std::fs;
use std::path::Path;

use super::{DspError, Result, WaveBuffer};

const FMT_PCM: u16 = 1;

fn format_err(msg: impl Into<String>) -> DspError {
    DspError::Format(msg.into())
}

fn u16_at(bytes: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

/// Read a 16-bit PCM mono WAV file. Samples map to [-1, 1] via s/32767.
pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(&bytes, off + 4) as usize;
        let body = off + 8;
        if body + size > bytes.len() {
            return Err(format_err(format!(
                "{}: truncated chunk {:?} (declares {size} bytes, {} remain)",
                path.display(),
                String::from_utf8_lossy(id),
                bytes.len() - body
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(format!(
                        "{}: fmt chunk too short ({size} bytes)",
                        path.display()
                    )));
                }
                fmt = Some((
                    u16_at(&bytes, body),
                    u16_at(&bytes, body + 2),
                    u32_at(&bytes, body + 4),
                    u16_at(&bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // chunks are word-aligned
        off = body + size + (size % 2);
    }

    let (audio_format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| format_err(format!("{}: missing fmt chunk", path.display())))?;
    if audio_format != FMT_PCM {
        return Err(format_err(format!(
            "{}: unsupported audio format {audio_format} (PCM only)",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(format_err(format!(
            "{}: unsupported channel count {channels} (mono only)",
            path.display()
        )));
    }
    if bits != 16 {
        return Err(format_err(format!(
            "{}: unsupported bit depth {bits} (16-bit only)",
            path.display()
        )));
    }
    let data =
        data.ok_or_else(|| format_err(format!("{}: missing data chunk", path.display())))?;
    if data.len() % 2 != 0 {
        return Err(format_err(format!(
            "{}: data chunk has odd byte length {}",
            path.display(),
            data.len()
        )));
    }

    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
        .collect();
    WaveBuffer::new(samples, sample_rate)
}

/// Write 16-bit PCM mono. Samples are clamped to [-1, 1] and quantized with
/// round-to-nearest, so a read-back differs by at most one quantization step.
pub fn write_wav(path: impl AsRef<Path>, wave: &WaveBuffer) -> Result<()> {
    let data_len = wave.samples.len() * 2;
    let riff_len = 4 + 8 + 16 + 8 + data_len;
    let mut bytes = Vec::with_capacity(riff_len + 8);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(riff_len as u32).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&FMT_PCM.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&wave.sample_rate_hz.to_le_bytes());
    let byte_rate = wave.sample_rate_hz * 2;
    bytes.extend_from_slice(&byte_rate.to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}
