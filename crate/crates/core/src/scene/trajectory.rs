//! Loop trajectories and block-wise rendering of moving sources with
//! trapezium crossfades.

use serde::{Deserialize, Serialize};

use super::rir::{fft_convolve, ism_rir, RirOptions};
use super::{distance, Point, Room};
use crate::error::{config, contract, Result};

/// Closed polygonal loop traversed at constant speed. A speed of zero is
/// a static source parked at `offset` along the loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Point>,
    /// m/s.
    pub speed: f64,
    /// Arc length of the start position, m.
    pub offset: f64,
    /// +1 follows the waypoint order, -1 runs backwards.
    pub direction: f64,
}

impl Trajectory {
    pub fn fixed(p: Point) -> Self {
        Trajectory {
            waypoints: vec![p],
            speed: 0.0,
            offset: 0.0,
            direction: 1.0,
        }
    }

    pub fn is_static(&self) -> bool {
        self.speed == 0.0 || self.waypoints.len() < 2
    }

    /// Length of the closed loop.
    pub fn perimeter(&self) -> f64 {
        let n = self.waypoints.len();
        (0..n)
            .map(|i| distance(self.waypoints[i], self.waypoints[(i + 1) % n]))
            .sum()
    }

    /// Position at arc length `s` (wrapped around the loop).
    pub fn at_arc(&self, s: f64) -> Point {
        let per = self.perimeter();
        if self.waypoints.len() < 2 || per == 0.0 {
            return self.waypoints[0];
        }
        let mut s = s.rem_euclid(per);
        let n = self.waypoints.len();
        for i in 0..n {
            let (a, b) = (self.waypoints[i], self.waypoints[(i + 1) % n]);
            let seg = distance(a, b);
            if s <= seg || i == n - 1 {
                let u = if seg > 0.0 { (s / seg).min(1.0) } else { 0.0 };
                return [
                    a[0] + u * (b[0] - a[0]),
                    a[1] + u * (b[1] - a[1]),
                    a[2] + u * (b[2] - a[2]),
                ];
            }
            s -= seg;
        }
        unreachable!()
    }

    /// Arc length travelled after `t` seconds.
    pub fn travelled(&self, t: f64) -> f64 {
        self.speed * t
    }

    pub fn position(&self, t: f64) -> Point {
        self.at_arc(self.offset + self.direction * self.travelled(t))
    }

    pub fn validate(&self, room: &Room) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(config("trajectory has no waypoints"));
        }
        if !(self.speed >= 0.0) {
            return Err(config(format!("trajectory speed {} must be non-negative", self.speed)));
        }
        for &p in &self.waypoints {
            if !room.contains(p) {
                return Err(contract(format!(
                    "speaker leaves the room: waypoint {:?} outside {:?}",
                    p, room.dims
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub sample_rate: u32,
    /// Samples per location block of a moving source.
    pub block_hop: usize,
    /// Length of the trapezium ramps shared by adjacent blocks.
    pub crossfade: usize,
    pub rir: RirOptions,
}

impl RenderOptions {
    /// Crossfade of one block hop, as in the scene defaults.
    pub fn new(room: &Room, sample_rate: u32, block_hop: usize) -> Self {
        RenderOptions {
            sample_rate,
            block_hop,
            crossfade: block_hop,
            rir: RirOptions::for_room(room, sample_rate),
        }
    }
}

/// Reverberant microphone signals and the direct-path target at the
/// reference (first) microphone.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub reverberant: Vec<Vec<f64>>,
    pub direct: Vec<f64>,
}

fn ramp(u: f64, len: usize) -> f64 {
    if len == 0 {
        return if u >= 0.0 { 1.0 } else { 0.0 };
    }
    ((u + len as f64 / 2.0) / len as f64).clamp(0.0, 1.0)
}

/// Trapezium windows for `n` samples cut into blocks of `hop`. Block `k`
/// is centred on `[k hop, (k+1) hop)` and shares a ramp of `crossfade`
/// samples with each neighbour; each window is returned with its start
/// sample. The windows sum to one at every sample.
pub fn trapezium_windows(n: usize, hop: usize, crossfade: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    if hop == 0 || crossfade > hop {
        return Err(config(format!(
            "crossfade {} must be within (0, hop = {}]",
            crossfade, hop
        )));
    }
    let blocks = n.div_ceil(hop).max(1);
    let half = crossfade.div_ceil(2);
    let mut out = Vec::with_capacity(blocks);
    for k in 0..blocks {
        let (lo, hi) = (k * hop, (k + 1) * hop);
        let start = if k == 0 { 0 } else { lo - half };
        let end = if k + 1 == blocks { n } else { (hi + half).min(n) };
        let w = (start..end)
            .map(|i| {
                let c = i as f64 + 0.5;
                let rise = if k == 0 { 1.0 } else { ramp(c - lo as f64, crossfade) };
                let fall = if k + 1 == blocks {
                    1.0
                } else {
                    1.0 - ramp(c - hi as f64, crossfade)
                };
                rise * fall
            })
            .collect();
        out.push((start, w));
    }
    Ok(out)
}

fn add_at(dst: &mut [f64], start: usize, src: &[f64]) {
    let start = start.min(dst.len());
    for (d, &s) in dst[start..].iter_mut().zip(src) {
        *d += s;
    }
}

fn responses(
    room: &Room,
    beta: f64,
    src: Point,
    mics: &[Point],
    opts: &RenderOptions,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let rirs = mics
        .iter()
        .map(|&m| ism_rir(room, beta, src, m, &opts.rir))
        .collect::<Result<Vec<_>>>()?;
    let direct = ism_rir(
        room,
        beta,
        src,
        mics[0],
        &RirOptions::direct(opts.sample_rate, opts.rir.len),
    )?;
    Ok((rirs, direct))
}

/// Renders `dry` along `traj`. A static source is a single convolution; a
/// moving one is cut into location blocks that are convolved with the RIR
/// of the block centre and crossfaded.
pub fn render_moving(
    dry: &[f64],
    traj: &Trajectory,
    room: &Room,
    mics: &[Point],
    opts: &RenderOptions,
) -> Result<Rendered> {
    if mics.is_empty() {
        return Err(contract("no microphones"));
    }
    traj.validate(room)?;
    let beta = room.reflection()?;
    let n = dry.len();
    if traj.is_static() {
        let (rirs, direct) = responses(room, beta, traj.position(0.0), mics, opts)?;
        let conv = |h: &[f64]| {
            let mut y = fft_convolve(dry, h);
            y.resize(n, 0.0);
            y
        };
        return Ok(Rendered {
            reverberant: rirs.iter().map(|h| conv(h)).collect(),
            direct: conv(&direct),
        });
    }
    render_blocks(dry, traj, room, beta, mics, opts)
}

/// Block-wise rendering, also used for static sources in tests.
pub fn render_blocks(
    dry: &[f64],
    traj: &Trajectory,
    room: &Room,
    beta: f64,
    mics: &[Point],
    opts: &RenderOptions,
) -> Result<Rendered> {
    let n = dry.len();
    let fs = opts.sample_rate as f64;
    let mut rev = vec![vec![0.0; n]; mics.len()];
    let mut direct = vec![0.0; n];
    for (k, (start, w)) in trapezium_windows(n, opts.block_hop, opts.crossfade)?
        .into_iter()
        .enumerate()
    {
        let centre = ((k as f64 + 0.5) * opts.block_hop as f64).min(n as f64) / fs;
        let pos = traj.position(centre);
        room.check_inside(pos, "speaker")?;
        let (rirs, dh) = responses(room, beta, pos, mics, opts)?;
        let seg: Vec<f64> = w.iter().zip(&dry[start..]).map(|(a, b)| a * b).collect();
        for (out, h) in rev.iter_mut().zip(&rirs) {
            add_at(out, start, &fft_convolve(&seg, h));
        }
        add_at(&mut direct, start, &fft_convolve(&seg, &dh));
    }
    Ok(Rendered {
        reverberant: rev,
        direct,
    })
}
