//! Dry speech, diffuse noise and SNR mixing.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::num_complex::Complex;

use super::{distance, Point, SOUND_SPEED};
use crate::error::{contract, Result};
use crate::stft::{Stft, StftConfig};

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(|clean|^2 / |noise|^2)`.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (energy(clean) / energy(noise)).log10()
}

/// Scales `noise` so that the reference-channel (first channel) SNR equals
/// `snr` and returns `clean + noise` together with the scaled noise.
pub fn mix_noise(clean: &[Vec<f64>], noise: &[Vec<f64>], snr: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if clean.is_empty() || clean.len() != noise.len() {
        return Err(contract(format!(
            "{} clean vs {} noise channels",
            clean.len(),
            noise.len()
        )));
    }
    let n = clean[0].len();
    if clean.iter().chain(noise).any(|c| c.len() != n) {
        return Err(contract("clean and noise channels differ in length"));
    }
    let (ec, en) = (energy(&clean[0]), energy(&noise[0]));
    if ec == 0.0 || en == 0.0 {
        return Err(contract(
            "cannot set an SNR with a silent clean or noise reference channel",
        ));
    }
    let g = (ec / (en * 10f64.powf(snr / 10.0))).sqrt();
    let scaled: Vec<Vec<f64>> = noise.iter().map(|c| c.iter().map(|v| v * g).collect()).collect();
    let mix = clean
        .iter()
        .zip(&scaled)
        .map(|(c, s)| c.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect();
    Ok((mix, scaled))
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

/// In-place Cholesky factor of a small symmetric positive definite matrix
/// (row-major, lower triangle returned).
fn cholesky(a: &mut [f64], m: usize) {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        let d = d.max(1e-12).sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = s / d;
        }
        for k in j + 1..m {
            a[j * m + k] = 0.0;
        }
    }
}

/// Spherically diffuse noise at the given microphones: independent
/// pinkish noise per channel, mixed per STFT bin by the Cholesky factor of
/// the coherence `sinc(2 pi f d / c)`.
pub fn diffuse_noise(rng: &mut impl Rng, mics: &[Point], len: usize, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let m = mics.len();
    let cfg = StftConfig {
        window: 256,
        hop: 128,
        sample_rate,
    };
    let stft = Stft::<f64>::new(cfg)?;
    let pad = cfg.window;
    let total = len + 2 * pad;
    let frames = cfg.frames_for(total);
    let bins = cfg.bins();
    let mut spec = vec![vec![Complex::new(0.0, 0.0); bins * frames]; m];
    let mut frame = vec![0.0; cfg.window];
    let mut buf = vec![Complex::new(0.0, 0.0); bins];
    for ch in spec.iter_mut() {
        let white: Vec<f64> = (0..total).map(|_| StandardNormal.sample(rng)).collect();
        for t in 0..frames {
            frame.copy_from_slice(&white[t * cfg.hop..t * cfg.hop + cfg.window]);
            stft.forward_frame(&frame, &mut buf);
            for f in 0..bins {
                // roughly -3 dB/octave above 200 Hz
                let hz = (f as f64 * sample_rate as f64 / cfg.window as f64).max(200.0);
                ch[f * frames + t] = buf[f] * (200.0 / hz).sqrt();
            }
        }
    }
    let mut coh = vec![0.0; m * m];
    for f in 0..bins {
        let w = 2.0 * PI * f as f64 * sample_rate as f64 / cfg.window as f64;
        for i in 0..m {
            for j in 0..m {
                coh[i * m + j] = sinc(w * distance(mics[i], mics[j]) / SOUND_SPEED);
            }
        }
        cholesky(&mut coh, m);
        for t in 0..frames {
            let x: Vec<Complex<f64>> = (0..m).map(|i| spec[i][f * frames + t]).collect();
            for i in 0..m {
                let mut acc = Complex::new(0.0, 0.0);
                for (j, xv) in x.iter().enumerate().take(i + 1) {
                    acc += xv * coh[i * m + j];
                }
                spec[i][f * frames + t] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(m);
    let gain = stft.ola_gain(frames);
    let mut tbuf = vec![0.0; cfg.window];
    for ch in &spec {
        let mut acc = vec![0.0; cfg.samples_for(frames)];
        for t in 0..frames {
            let col: Vec<Complex<f64>> = (0..bins).map(|f| ch[f * frames + t]).collect();
            stft.inverse_frame(&col, &mut tbuf);
            for (i, v) in tbuf.iter().enumerate() {
                acc[t * cfg.hop + i] += stft.window()[i] * v;
            }
        }
        out.push(acc.iter().zip(&gain).skip(pad).take(len).map(|(a, g)| a * g).collect());
    }
    Ok(out)
}

/// Two-pole resonator coefficients for centre `fc` and bandwidth `bw`, Hz.
fn resonator(fc: f64, bw: f64, fs: f64) -> (f64, f64, f64) {
    let r = (-PI * bw / fs).exp();
    let a1 = 2.0 * r * (2.0 * PI * fc / fs).cos();
    let a2 = -r * r;
    (1.0 - r, a1, a2)
}

/// Speech-like test signal: syllables of harmonic (voiced) or noise
/// (unvoiced) excitation shaped by three formant resonators and a smooth
/// envelope, separated by short pauses. Normalized to RMS 0.1.
pub fn synthetic_speech(rng: &mut impl Rng, len: usize, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mut out = vec![0.0; len];
    let f0_base = rng.gen_range(90.0..220.0);
    let mut pos = (rng.gen_range(0.0..0.2) * fs) as usize;
    while pos < len {
        let dur = (rng.gen_range(0.08..0.35) * fs) as usize;
        let voiced = rng.gen_bool(0.75);
        let f0 = f0_base * rng.gen_range(0.85..1.2);
        let glide = rng.gen_range(-0.25..0.25);
        let amp = rng.gen_range(0.3..1.0);
        let formants = [
            (rng.gen_range(300.0..900.0), rng.gen_range(60.0..160.0)),
            (rng.gen_range(900.0..2400.0), rng.gen_range(80.0..200.0)),
            (rng.gen_range(2400.0..3500.0), rng.gen_range(120.0..300.0)),
        ];
        let mut states = [[0.0f64; 2]; 3];
        let mut phase = 0.0f64;
        for i in 0..dur.min(len - pos) {
            let u = i as f64 / dur as f64;
            let exc = if voiced {
                let f = f0 * (1.0 + glide * u);
                phase = (phase + f / fs).fract();
                let harmonics = ((fs / 2.0) / f).floor() as usize;
                (1..=harmonics.min(40))
                    .map(|k| (2.0 * PI * k as f64 * phase).sin() / k as f64)
                    .sum::<f64>()
            } else {
                StandardNormal.sample(rng)
            };
            let mut y = 0.0;
            for (st, &(fc, bw)) in states.iter_mut().zip(&formants) {
                let (b0, a1, a2) = resonator(fc, bw, fs);
                let v = b0 * exc + a1 * st[0] + a2 * st[1];
                st[1] = st[0];
                st[0] = v;
                y += v;
            }
            let env = (PI * u).sin().powf(0.6);
            out[pos + i] = amp * env * y;
        }
        pos += dur;
        let gap = if rng.gen_bool(0.15) {
            rng.gen_range(0.3..0.6)
        } else {
            rng.gen_range(0.03..0.2)
        };
        pos += (gap * fs) as usize;
    }
    let rms = (energy(&out) / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v *= 0.1 / rms;
        }
    }
    out
}
