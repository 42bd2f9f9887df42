//! Shoebox room simulation: image-source impulse responses, loop
//! trajectories, moving-source rendering, noise and dataset generation.
//!
//! Everything here runs in `f64`; rendered scenes are handed out as `f32`
//! audio.

pub mod dataset;
pub mod rir;
pub mod source;
pub mod trajectory;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};

pub use dataset::{Manifest, Scene, SceneConfig, SceneGenerator, SceneSpec};
pub use rir::{fft_convolve, ism_rir, RirOptions};
pub use source::{diffuse_noise, mix_noise, snr_db, synthetic_speech};
pub use trajectory::{render_moving, trapezium_windows, RenderOptions, Rendered, Trajectory};

/// Speed of sound, m/s.
pub const SOUND_SPEED: f64 = 343.0;

pub type Point = [f64; 3];

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Shoebox room with a uniform wall absorption set by Sabine's formula.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub dims: Point,
    pub rt60: f64,
}

impl Room {
    pub fn new(dims: Point, rt60: f64) -> Result<Self> {
        if dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(config(format!("room dimensions must be positive, got {:?}", dims)));
        }
        if !(rt60 > 0.0) {
            return Err(config(format!("rt60 must be positive, got {}", rt60)));
        }
        Ok(Room { dims, rt60 })
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Sabine absorption `0.161 V / (rt60 S)`.
    pub fn absorption(&self) -> Result<f64> {
        let alpha = 0.161 * self.volume() / (self.rt60 * self.surface());
        if alpha >= 1.0 {
            return Err(config(format!(
                "rt60 {} s is too short for a {:?} m room (absorption {:.3} >= 1)",
                self.rt60, self.dims, alpha
            )));
        }
        Ok(alpha)
    }

    /// Pressure reflection coefficient `sqrt(1 - alpha)`.
    pub fn reflection(&self) -> Result<f64> {
        Ok((1.0 - self.absorption()?).sqrt())
    }

    /// Sabine reverberation time for a given absorption.
    pub fn sabine_rt60(dims: Point, alpha: f64) -> f64 {
        let r = Room { dims, rt60: 1.0 };
        0.161 * r.volume() / (alpha * r.surface())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.iter().zip(&self.dims).all(|(&v, &d)| v > 0.0 && v < d)
    }

    pub fn check_inside(&self, p: Point, what: &str) -> Result<()> {
        if !self.contains(p) {
            return Err(contract(format!(
                "{} {:?} is not strictly inside the {:?} m room",
                what, p, self.dims
            )));
        }
        Ok(())
    }
}

/// Microphone positions relative to the array centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub name: String,
    pub positions: Vec<Point>,
}

const CHIME3: &str = include_str!("../../configs/chime3_array.toml");

impl ArrayGeometry {
    /// Approximate six-microphone CHiME-3 tablet array.
    pub fn chime3() -> Self {
        toml::from_str(CHIME3).expect("bundled array geometry parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: ArrayGeometry = toml::from_str(text).map_err(|e| crate::Error::Parse(e.to_string()))?;
        if g.positions.is_empty() {
            return Err(config("array geometry has no microphones"));
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the listed microphones, in order. The first becomes the
    /// reference channel.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let positions = idx
            .iter()
            .map(|&i| {
                self.positions
                    .get(i)
                    .copied()
                    .ok_or_else(|| config(format!("microphone {} not in a {}-mic array", i, self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArrayGeometry {
            name: format!("{}{:?}", self.name, idx),
            positions,
        })
    }

    /// Absolute positions for a given centre and rotation about the
    /// vertical axis.
    pub fn place(&self, centre: Point, azimuth: f64) -> Vec<Point> {
        let (s, c) = azimuth.sin_cos();
        self.positions
            .iter()
            .map(|p| {
                [
                    centre[0] + c * p[0] - s * p[1],
                    centre[1] + s * p[0] + c * p[1],
                    centre[2] + p[2],
                ]
            })
            .collect()
    }
}
