use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavSpec};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// On-disk sample encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a 16 kHz mono or stereo WAV (16-bit PCM or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format_err(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    let n_ch = spec.channels as usize;
    if !(1..=2).contains(&n_ch) {
        return Err(format_err(format!("{n_ch} channels, expected 1 or 2")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (HoundFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            return Err(format_err(format!(
                "unsupported encoding {fmt:?} {bits}-bit"
            )))
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    Waveform::from_channels(channels)
}

/// Writes a waveform; PCM16 output is clipped to the representable range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, HoundFormat::Int),
        SampleFormat::Float32 => (32, HoundFormat::Float),
    };
    let spec = WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..wave.len() {
        for ch in wave.channels() {
            let v = ch[i];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(wav_err(path))?;
                }
                SampleFormat::Float32 => writer.write_sample(v as f32).map_err(wav_err(path))?,
            }
        }
    }
    writer.finalize().map_err(wav_err(path))
}
