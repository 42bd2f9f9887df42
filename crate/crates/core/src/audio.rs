//! Multichannel sample buffers and WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{contract, Error, Result};
use crate::tensor::{cast, Float};

/// Planar multichannel audio: channel `m` occupies
/// `samples[m * len .. (m + 1) * len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelAudio<T = f32> {
    pub sample_rate: u32,
    channels: usize,
    samples: Vec<T>,
}

impl<T: Float> MultichannelAudio<T> {
    pub fn new(sample_rate: u32, channels: usize, samples: Vec<T>) -> Result<Self> {
        if channels == 0 || samples.len() % channels != 0 {
            return Err(contract(format!(
                "{} samples cannot be split into {} channels",
                samples.len(),
                channels
            )));
        }
        Ok(MultichannelAudio {
            sample_rate,
            channels,
            samples,
        })
    }

    pub fn from_channels(sample_rate: u32, chans: Vec<Vec<T>>) -> Result<Self> {
        let len = chans.first().map_or(0, |c| c.len());
        if chans.iter().any(|c| c.len() != len) {
            return Err(contract("channels differ in length"));
        }
        let m = chans.len();
        Self::new(sample_rate, m, chans.into_iter().flatten().collect())
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Self {
        MultichannelAudio {
            sample_rate,
            channels,
            samples: vec![T::zero(); channels * len],
        }
    }

    /// Builds planar audio from interleaved frames.
    pub fn from_interleaved(sample_rate: u32, channels: usize, inter: &[T]) -> Result<Self> {
        if channels == 0 || inter.len() % channels != 0 {
            return Err(contract("interleaved length not a multiple of the channel count"));
        }
        let len = inter.len() / channels;
        let mut samples = vec![T::zero(); inter.len()];
        for (i, frame) in inter.chunks_exact(channels).enumerate() {
            for (m, &v) in frame.iter().enumerate() {
                samples[m * len + i] = v;
            }
        }
        Ok(MultichannelAudio {
            sample_rate,
            channels,
            samples,
        })
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        let len = self.len();
        let mut out = Vec::with_capacity(self.samples.len());
        for i in 0..len {
            for m in 0..self.channels {
                out.push(self.samples[m * len + i]);
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, m: usize) -> &[T] {
        let len = self.len();
        &self.samples[m * len..(m + 1) * len]
    }

    pub fn channel_mut(&mut self, m: usize) -> &mut [T] {
        let len = self.len();
        &mut self.samples[m * len..(m + 1) * len]
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    /// Copy of samples `start..end` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let chans = (0..self.channels)
            .map(|m| self.channel(m)[start..end].to_vec())
            .collect();
        Self::from_channels(self.sample_rate, chans).expect("equal lengths")
    }

    pub fn rms(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        let e: T = self.samples.iter().map(|&v| v * v).sum();
        (e / cast(self.samples.len() as f64)).sqrt()
    }

    pub fn cast<U: Float>(&self) -> MultichannelAudio<U> {
        MultichannelAudio {
            sample_rate: self.sample_rate,
            channels: self.channels,
            samples: self
                .samples
                .iter()
                .map(|v| cast::<U>(v.to_f64().unwrap_or(0.0)))
                .collect(),
        }
    }
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a PCM16 or IEEE-float32 WAV file of any channel count.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelAudio<f32>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let inter: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(contract(format!(
                "{}: unsupported WAV encoding {:?}/{} bits (PCM16 or float32 only)",
                path.display(),
                fmt,
                bits
            )))
        }
    };
    MultichannelAudio::from_interleaved(spec.sample_rate, spec.channels as usize, &inter)
}

/// Reads a WAV file and rejects it when its rate differs from `expected_rate`.
pub fn read_wav_at(path: impl AsRef<Path>, expected_rate: u32) -> Result<MultichannelAudio<f32>> {
    let audio = read_wav(&path)?;
    if audio.sample_rate != expected_rate {
        return Err(contract(format!(
            "{}: sample rate {} Hz does not match configured {} Hz (no resampling)",
            path.as_ref().display(),
            audio.sample_rate,
            expected_rate
        )));
    }
    Ok(audio)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &MultichannelAudio<f32>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: audio.channels() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for v in audio.to_interleaved() {
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_sample(q).map_err(|e| wav_err(path, e))?;
            }
            WavEncoding::Float32 => w.write_sample(v).map_err(|e| wav_err(path, e))?,
        }
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_round_trip() {
        let a = MultichannelAudio::<f32>::from_channels(8000, vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(a.to_interleaved(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = MultichannelAudio::from_interleaved(8000, 2, &a.to_interleaved()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wav_round_trip_float_and_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let chans: Vec<Vec<f32>> = (0..3)
            .map(|m| (0..100).map(|i| ((i * (m + 1)) as f32 * 0.01).sin() * 0.5).collect())
            .collect();
        let a = MultichannelAudio::from_channels(8000, chans).unwrap();
        let pf = dir.path().join("f.wav");
        write_wav(&pf, &a, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&pf).unwrap(), a);
        let pi = dir.path().join("i.wav");
        write_wav(&pi, &a, WavEncoding::Pcm16).unwrap();
        let b = read_wav(&pi).unwrap();
        assert_eq!(b.channels(), 3);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!((x - y).abs() <= 1.0 / 32768.0);
        }
        assert!(read_wav_at(&pi, 16000).is_err());
        assert!(read_wav_at(&pi, 8000).is_ok());
    }
}
