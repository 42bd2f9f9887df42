//! Image-source room impulse responses and FFT convolution.

use std::cell::RefCell;

use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::{distance, Point, Room, SOUND_SPEED};
use crate::error::{config, Result};

/// Half-width of the windowed-sinc fractional delay, in samples.
pub const SINC_HALF_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RirOptions {
    pub sample_rate: u32,
    /// Highest total number of wall reflections per image.
    pub max_order: usize,
    /// Response length in samples; later images are dropped.
    pub len: usize,
}

impl RirOptions {
    /// Length covering `rt60` and every image that arrives within it.
    pub fn for_room(room: &Room, sample_rate: u32) -> Self {
        let len = (room.rt60 * sample_rate as f64).ceil() as usize + 2 * SINC_HALF_WIDTH;
        RirOptions {
            sample_rate,
            max_order: usize::MAX,
            len,
        }
    }

    pub fn direct(sample_rate: u32, len: usize) -> Self {
        RirOptions {
            sample_rate,
            max_order: 0,
            len,
        }
    }
}

/// Adds `gain` delayed by `delay` samples (fractional) into `h`, using a
/// Hann-windowed sinc of half-width [`SINC_HALF_WIDTH`].
pub fn add_delayed(h: &mut [f64], delay: f64, gain: f64) {
    let base = delay.floor();
    let frac = delay - base;
    let base = base as isize;
    if frac == 0.0 {
        if base >= 0 && (base as usize) < h.len() {
            h[base as usize] += gain;
        }
        return;
    }
    use std::f64::consts::PI;
    let w = SINC_HALF_WIDTH as isize;
    // tap at offset j from base sees x = j - frac:
    // sin(pi x) = -(-1)^j sin(pi frac), window cos(pi x / W) by rotation
    // sin(pi frac) = sin(pi (1 - frac)); the latter keeps precision near 1
    let s0 = (PI * frac.min(1.0 - frac)).sin();
    let step = PI / w as f64;
    let (sd, cd) = step.sin_cos();
    let (mut sa, mut ca) = (((1 - w) as f64 - frac) * step).sin_cos();
    for j in (1 - w)..=w {
        let k = base + j;
        let x = j as f64 - frac;
        if k >= 0 && (k as usize) < h.len() {
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            let sinc = sign * s0 / (PI * x);
            h[k as usize] += gain * sinc * 0.5 * (1.0 + ca);
        }
        let (ns, nc) = (sa * cd + ca * sd, ca * cd - sa * sd);
        sa = ns;
        ca = nc;
    }
}

/// Shoebox impulse response from `src` to `mic`, each image contributing
/// `beta^reflections / (4 pi dist)` at delay `dist / c`.
pub fn ism_rir(room: &Room, beta: f64, src: Point, mic: Point, opts: &RirOptions) -> Result<Vec<f64>> {
    room.check_inside(src, "source")?;
    room.check_inside(mic, "microphone")?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(config(format!("reflection coefficient {} outside [0, 1]", beta)));
    }
    let fs = opts.sample_rate as f64;
    let mut h = vec![0.0; opts.len];
    let reach = (opts.len + SINC_HALF_WIDTH) as f64 / fs * SOUND_SPEED;
    let n: Vec<i64> = room
        .dims
        .iter()
        .map(|&l| ((reach / (2.0 * l)).ceil() as i64 + 1).min(opts.max_order.min(1 << 20) as i64))
        .collect();
    let four_pi = 4.0 * std::f64::consts::PI;
    for nx in -n[0]..=n[0] {
        for px in 0..2i64 {
            let ox = (nx - px).abs() + nx.abs();
            let x = (1 - 2 * px) as f64 * src[0] + 2.0 * nx as f64 * room.dims[0];
            for ny in -n[1]..=n[1] {
                for py in 0..2i64 {
                    let oy = (ny - py).abs() + ny.abs();
                    if (ox + oy) as usize > opts.max_order {
                        continue;
                    }
                    let y = (1 - 2 * py) as f64 * src[1] + 2.0 * ny as f64 * room.dims[1];
                    for nz in -n[2]..=n[2] {
                        for pz in 0..2i64 {
                            let order = (ox + oy + (nz - pz).abs() + nz.abs()) as usize;
                            if order > opts.max_order {
                                continue;
                            }
                            let z = (1 - 2 * pz) as f64 * src[2] + 2.0 * nz as f64 * room.dims[2];
                            let d = distance([x, y, z], mic);
                            let delay = d / SOUND_SPEED * fs;
                            if delay >= (opts.len + SINC_HALF_WIDTH) as f64 {
                                continue;
                            }
                            let gain = if order == 0 { 1.0 } else { beta.powi(order as i32) };
                            if gain == 0.0 {
                                continue;
                            }
                            add_delayed(&mut h, delay, gain / (four_pi * d));
                        }
                    }
                }
            }
        }
    }
    Ok(h)
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Full linear convolution, length `x.len() + h.len() - 1`.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if x.len().min(h.len()) <= 32 {
        let mut y = vec![0.0; out_len];
        for (i, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        return y;
    }
    let n = out_len.next_power_of_two();
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fwd = p.plan_fft_forward(n);
        let inv = p.plan_fft_inverse(n);
        let spec = |v: &[f64]| {
            let mut buf = vec![0.0; n];
            buf[..v.len()].copy_from_slice(v);
            let mut out = vec![Complex::new(0.0, 0.0); n / 2 + 1];
            fwd.process(&mut buf, &mut out).expect("fft sizes match");
            out
        };
        let mut a = spec(x);
        let b = spec(h);
        for (u, v) in a.iter_mut().zip(&b) {
            *u *= v / n as f64;
        }
        a[0].im = 0.0;
        a[n / 2].im = 0.0;
        let mut y = vec![0.0; n];
        inv.process(&mut a, &mut y).expect("fft sizes match");
        y.truncate(out_len);
        y
    })
}
