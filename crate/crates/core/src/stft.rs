//! STFT analysis/synthesis front end and real/complex channel packing.
//!
//! Analysis uses a periodic Hann window without centering: frame `t` covers
//! samples `t * hop .. t * hop + window`. Synthesis is weighted overlap-add
//! normalized by the summed squared window, so analysis followed by
//! synthesis reconstructs every sample covered by two frames exactly.

use std::sync::Arc;

pub use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelAudio;
use crate::autodiff::Var;
use crate::error::{config, contract, Error, Result};
use crate::tensor::{cast, Float, Tensor};

/// Overlap-add normalization floor. Samples whose summed squared window is
/// below this (only the outer edge of the first and last frame) are
/// attenuated instead of amplified.
pub const OLA_FLOOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window: 256,
            hop: 128,
            sample_rate: 8000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.window.is_power_of_two() || self.window < 2 {
            return Err(config(format!("window length {} is not a power of two", self.window)));
        }
        if self.hop == 0 || self.window % self.hop != 0 {
            return Err(config(format!(
                "hop {} does not divide window {}",
                self.hop, self.window
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Frame count for `n` samples (0 when shorter than one window).
    pub fn frames_for(&self, n: usize) -> usize {
        if n < self.window {
            0
        } else {
            1 + (n - self.window) / self.hop
        }
    }

    /// Samples produced by synthesizing `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window
        }
    }

    /// Smallest length `>= n` that is a whole number of frames.
    pub fn padded_len(&self, n: usize) -> usize {
        if n < self.window {
            self.window
        } else {
            n + (self.hop - (n - self.window) % self.hop) % self.hop
        }
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Periodic Hann window.
pub fn hann<T: Float>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| cast(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Complex STFT coefficients indexed `[f, t, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T = f32> {
    pub cfg: StftConfig,
    frames: usize,
    channels: usize,
    data: Vec<Complex<T>>,
}

impl<T: Float> Spectrogram<T> {
    pub fn zeros(cfg: StftConfig, frames: usize, channels: usize) -> Self {
        Spectrogram {
            cfg,
            frames,
            channels,
            data: vec![Complex::new(T::zero(), T::zero()); cfg.bins() * frames * channels],
        }
    }

    pub fn from_data(cfg: StftConfig, frames: usize, channels: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != cfg.bins() * frames * channels {
            return Err(contract(format!(
                "spectrogram data length {} != {} bins x {} frames x {} channels",
                data.len(),
                cfg.bins(),
                frames,
                channels
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(contract("spectrogram contains non-finite values"));
        }
        Ok(Spectrogram {
            cfg,
            frames,
            channels,
            data,
        })
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn idx(&self, f: usize, t: usize, m: usize) -> usize {
        (f * self.frames + t) * self.channels + m
    }

    pub fn get(&self, f: usize, t: usize, m: usize) -> Complex<T> {
        self.data[self.idx(f, t, m)]
    }

    pub fn set(&mut self, f: usize, t: usize, m: usize, v: Complex<T>) {
        let i = self.idx(f, t, m);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    /// Frames `start..end` as a new spectrogram.
    pub fn frames_range(&self, start: usize, end: usize) -> Self {
        let mut out = Spectrogram::zeros(self.cfg, end - start, self.channels);
        for f in 0..self.bins() {
            for t in start..end {
                for m in 0..self.channels {
                    out.set(f, t - start, m, self.get(f, t, m));
                }
            }
        }
        out
    }

    /// Packs to real features `[F, T, 2M]`, interleaving `(re, im)` per channel.
    pub fn pack_real(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.data.len() * 2);
        for c in &self.data {
            data.push(c.re);
            data.push(c.im);
        }
        Tensor::new(vec![self.bins(), self.frames, 2 * self.channels], data).expect("pack shape")
    }

    /// Inverse of [`Spectrogram::pack_real`]: `[F, T, 2M]` features back to
    /// an `M`-channel spectrogram.
    pub fn unpack_complex(cfg: StftConfig, x: &Tensor<T>) -> Result<Self> {
        let sh = x.shape();
        if sh.len() != 3 || sh[0] != cfg.bins() {
            return Err(contract(format!(
                "unpack expects [{}, T, 2M], got {:?}",
                cfg.bins(),
                sh
            )));
        }
        if sh[2] % 2 != 0 {
            return Err(contract(format!("odd feature count {} cannot be unpacked", sh[2])));
        }
        let data = x.data().chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
        Ok(Spectrogram {
            cfg,
            frames: sh[1],
            channels: sh[2] / 2,
            data,
        })
    }
}

/// Planned STFT for one configuration and scalar type.
pub struct Stft<T: Float> {
    cfg: StftConfig,
    window: Vec<T>,
    r2c: Arc<dyn RealToComplex<T>>,
    c2r: Arc<dyn ComplexToReal<T>>,
}

impl<T: Float> Stft<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<T>::new();
        Ok(Stft {
            cfg,
            window: hann(cfg.window),
            r2c: planner.plan_fft_forward(cfg.window),
            c2r: planner.plan_fft_inverse(cfg.window),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Windowed real FFT of one frame of `window` samples into `out` (`bins` long).
    pub fn forward_frame(&self, frame: &[T], out: &mut [Complex<T>]) {
        let mut buf: Vec<T> = frame.iter().zip(&self.window).map(|(&x, &w)| x * w).collect();
        let mut scratch = self.r2c.make_scratch_vec();
        self.r2c
            .process_with_scratch(&mut buf, out, &mut scratch)
            .expect("fft length fixed by plan");
    }

    /// Inverse FFT of one frame (without windowing), scaled so that it
    /// inverts [`Stft::forward_frame`] before the window.
    pub fn inverse_frame(&self, spec: &[Complex<T>], out: &mut [T]) {
        let mut buf = spec.to_vec();
        let last = buf.len() - 1;
        buf[0].im = T::zero();
        buf[last].im = T::zero();
        let mut scratch = self.c2r.make_scratch_vec();
        self.c2r
            .process_with_scratch(&mut buf, out, &mut scratch)
            .expect("fft length fixed by plan");
        let scale = T::one() / cast(self.cfg.window as f64);
        for v in out.iter_mut() {
            *v *= scale;
        }
    }

    /// Overlap-add normalizer `1 / max(sum_t w^2[n - t hop], floor)`.
    pub fn ola_gain(&self, frames: usize) -> Vec<T> {
        let n = self.cfg.samples_for(frames);
        let mut den = vec![T::zero(); n];
        for t in 0..frames {
            for (i, &w) in self.window.iter().enumerate() {
                den[t * self.cfg.hop + i] += w * w;
            }
        }
        let floor: T = cast(OLA_FLOOR);
        den.into_iter().map(|d| T::one() / d.max(floor)).collect()
    }

    pub fn analyze(&self, audio: &MultichannelAudio<T>) -> Result<Spectrogram<T>> {
        if audio.sample_rate != self.cfg.sample_rate {
            return Err(contract(format!(
                "audio rate {} Hz != STFT rate {} Hz",
                audio.sample_rate, self.cfg.sample_rate
            )));
        }
        let n = audio.len();
        if n < self.cfg.window {
            return Err(Error::Length {
                needed: self.cfg.window,
                got: n,
            });
        }
        let frames = self.cfg.frames_for(n);
        let (bins, m_ch) = (self.cfg.bins(), audio.channels());
        let mut spec = Spectrogram::zeros(self.cfg, frames, m_ch);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); bins];
        for m in 0..m_ch {
            let x = audio.channel(m);
            for t in 0..frames {
                let s = t * self.cfg.hop;
                self.forward_frame(&x[s..s + self.cfg.window], &mut buf);
                for (f, &v) in buf.iter().enumerate() {
                    spec.set(f, t, m, v);
                }
            }
        }
        Ok(spec)
    }

    pub fn synthesize(&self, spec: &Spectrogram<T>) -> Result<MultichannelAudio<T>> {
        if spec.cfg != self.cfg {
            return Err(contract(format!(
                "spectrogram config {:?} does not match synthesis config {:?}",
                spec.cfg, self.cfg
            )));
        }
        let frames = spec.frames();
        let n = self.cfg.samples_for(frames);
        let gain = self.ola_gain(frames);
        let (bins, win, hop) = (self.cfg.bins(), self.cfg.window, self.cfg.hop);
        let mut chans = Vec::with_capacity(spec.channels());
        let mut fbuf = vec![Complex::new(T::zero(), T::zero()); bins];
        let mut tbuf = vec![T::zero(); win];
        for m in 0..spec.channels() {
            let mut y = vec![T::zero(); n];
            for t in 0..frames {
                for (f, v) in fbuf.iter_mut().enumerate() {
                    *v = spec.get(f, t, m);
                }
                self.inverse_frame(&fbuf, &mut tbuf);
                for i in 0..win {
                    y[t * hop + i] += self.window[i] * tbuf[i];
                }
            }
            for (v, &g) in y.iter_mut().zip(&gain) {
                *v *= g;
            }
            chans.push(y);
        }
        MultichannelAudio::from_channels(self.cfg.sample_rate, chans)
    }

    /// Differentiable synthesis of packed single-channel estimates
    /// `[B, F, T, 2]` into waveforms `[B, samples_for(T)]`.
    pub fn synthesize_var(self: &Arc<Self>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape().to_vec();
        if sh.len() != 4 || sh[1] != self.cfg.bins() || sh[3] != 2 {
            return Err(contract(format!(
                "synthesize_var expects [B, {}, T, 2], got {:?}",
                self.cfg.bins(),
                sh
            )));
        }
        let (nb, bins, frames) = (sh[0], sh[1], sh[2]);
        let (win, hop) = (self.cfg.window, self.cfg.hop);
        let n = self.cfg.samples_for(frames);
        let gain = Arc::new(self.ola_gain(frames));
        let mut out = vec![T::zero(); nb * n];
        let mut fbuf = vec![Complex::new(T::zero(), T::zero()); bins];
        let mut tbuf = vec![T::zero(); win];
        let xd = x.data();
        for b in 0..nb {
            let y = &mut out[b * n..(b + 1) * n];
            for t in 0..frames {
                for (f, v) in fbuf.iter_mut().enumerate() {
                    let i = ((b * bins + f) * frames + t) * 2;
                    *v = Complex::new(xd[i], xd[i + 1]);
                }
                self.inverse_frame(&fbuf, &mut tbuf);
                for i in 0..win {
                    y[t * hop + i] += self.window[i] * tbuf[i];
                }
            }
            for (v, &g) in y.iter_mut().zip(gain.iter()) {
                *v *= g;
            }
        }
        let me = self.clone();
        let id = x.id();
        Ok(Var::custom(&[x], Tensor::new(vec![nb, n], out)?, move |g, s| {
            // adjoint: gain, window, then the adjoint of the real inverse FFT,
            // which is a forward FFT weighted by c_k / N (c_k = 1 at DC and
            // Nyquist, 2 elsewhere)
            let Some(gx) = s.slot(id) else { return };
            let inv_n: T = T::one() / cast(win as f64);
            let two: T = cast(2.0);
            let mut seg = vec![T::zero(); win];
            let mut spec = vec![Complex::new(T::zero(), T::zero()); bins];
            let mut scratch = me.r2c.make_scratch_vec();
            for b in 0..nb {
                let gy = &g[b * n..(b + 1) * n];
                for t in 0..frames {
                    for i in 0..win {
                        let k = t * hop + i;
                        seg[i] = gy[k] * gain[k] * me.window[i];
                    }
                    me.r2c
                        .process_with_scratch(&mut seg, &mut spec, &mut scratch)
                        .expect("fft length fixed by plan");
                    for (f, c) in spec.iter().enumerate() {
                        let w = if f == 0 || f == bins - 1 { inv_n } else { two * inv_n };
                        let i = ((b * bins + f) * frames + t) * 2;
                        gx[i] += c.re * w;
                        gx[i + 1] += if f == 0 || f == bins - 1 { T::zero() } else { c.im * w };
                    }
                }
            }
        }))
    }
}

pub fn analyze<T: Float>(audio: &MultichannelAudio<T>, cfg: StftConfig) -> Result<Spectrogram<T>> {
    Stft::new(cfg)?.analyze(audio)
}

pub fn synthesize<T: Float>(spec: &Spectrogram<T>, cfg: StftConfig) -> Result<MultichannelAudio<T>> {
    Stft::new(cfg)?.synthesize(spec)
}

/// Frame-by-frame analysis over a sample stream with a one-window buffer.
pub struct StreamingAnalyzer<T: Float> {
    stft: Arc<Stft<T>>,
    channels: usize,
    buf: Vec<Vec<T>>,
    filled: usize,
}

impl<T: Float> StreamingAnalyzer<T> {
    pub fn new(stft: Arc<Stft<T>>, channels: usize) -> Self {
        let win = stft.cfg.window;
        StreamingAnalyzer {
            stft,
            channels,
            buf: vec![vec![T::zero(); win]; channels],
            filled: 0,
        }
    }

    /// Pushes one hop of planar samples (`channels x hop`) and returns the
    /// next single-frame spectrogram once a full window has accumulated.
    pub fn push_hop(&mut self, hop_samples: &[Vec<T>]) -> Result<Option<Spectrogram<T>>> {
        let (win, hop) = (self.stft.cfg.window, self.stft.cfg.hop);
        if hop_samples.len() != self.channels || hop_samples.iter().any(|c| c.len() != hop) {
            return Err(contract("push_hop needs exactly one hop per channel"));
        }
        for (b, x) in self.buf.iter_mut().zip(hop_samples) {
            b.copy_within(hop.., 0);
            b[win - hop..].copy_from_slice(x);
        }
        self.filled = (self.filled + hop).min(win);
        if self.filled < win {
            return Ok(None);
        }
        let bins = self.stft.cfg.bins();
        let mut spec = Spectrogram::zeros(self.stft.cfg, 1, self.channels);
        let mut fbuf = vec![Complex::new(T::zero(), T::zero()); bins];
        for (m, b) in self.buf.iter().enumerate() {
            self.stft.forward_frame(b, &mut fbuf);
            for (f, &v) in fbuf.iter().enumerate() {
                spec.set(f, 0, m, v);
            }
        }
        Ok(Some(spec))
    }
}

/// Incremental overlap-add synthesis of a single channel. Each pushed frame
/// finalizes `hop` samples; [`StreamingSynthesizer::finish`] flushes the tail.
pub struct StreamingSynthesizer<T: Float> {
    stft: Arc<Stft<T>>,
    acc: Vec<T>,
    frames: usize,
}

impl<T: Float> StreamingSynthesizer<T> {
    pub fn new(stft: Arc<Stft<T>>) -> Self {
        let win = stft.cfg.window;
        StreamingSynthesizer {
            stft,
            acc: vec![T::zero(); win],
            frames: 0,
        }
    }

    /// Normalizer for offset `pos` within the most recent frame: every
    /// earlier frame `d` hops back overlaps it at `pos + d * hop`.
    fn gain_at(&self, pos: usize) -> T {
        let (win, hop) = (self.stft.cfg.window, self.stft.cfg.hop);
        let w = self.stft.window();
        let mut den = T::zero();
        let mut off = pos;
        let mut d = 0;
        while d < self.frames && off < win {
            den += w[off] * w[off];
            off += hop;
            d += 1;
        }
        T::one() / den.max(cast(OLA_FLOOR))
    }

    /// Adds one frame and returns the `hop` samples that are now final.
    pub fn push_frame(&mut self, frame: &[Complex<T>]) -> Vec<T> {
        let (win, hop) = (self.stft.cfg.window, self.stft.cfg.hop);
        let mut tbuf = vec![T::zero(); win];
        self.stft.inverse_frame(frame, &mut tbuf);
        for i in 0..win {
            self.acc[i] += self.stft.window[i] * tbuf[i];
        }
        self.frames += 1;
        let out: Vec<T> = (0..hop).map(|i| self.acc[i] * self.gain_at(i)).collect();
        self.acc.copy_within(hop.., 0);
        for v in &mut self.acc[win - hop..] {
            *v = T::zero();
        }
        out
    }

    /// Remaining `window - hop` samples after the last frame.
    pub fn finish(self) -> Vec<T> {
        let (win, hop) = (self.stft.cfg.window, self.stft.cfg.hop);
        (0..win - hop).map(|i| self.acc[i] * self.gain_at(i + hop)).collect()
    }
}
