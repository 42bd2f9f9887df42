//! Seeded scene generator. Every scene is drawn from its own RNG stream,
//! so scene `i` is the same no matter which other scenes are rendered or in
//! which order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rir::RirOptions;
use super::source::{diffuse_noise, mix_noise, synthetic_speech};
use super::trajectory::{render_moving, RenderOptions, Trajectory};
use super::{distance, ArrayGeometry, Point, Room};
use crate::audio::{read_wav_at, MultichannelAudio};
use crate::error::{config, Error, Result};

/// Sampling ranges and rendering settings for a scene family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Microphones kept from `geometry`; the first is the reference.
    pub mics: Vec<usize>,
    pub geometry: ArrayGeometry,
    pub room_x: [f64; 2],
    pub room_y: [f64; 2],
    pub room_z: [f64; 2],
    pub rt60: [f64; 2],
    pub snr_db: [f64; 2],
    pub speed: [f64; 2],
    /// Probability that a scene has a moving speaker.
    pub moving_fraction: f64,
    pub array_height: [f64; 2],
    pub source_height: [f64; 2],
    /// Location block length for moving sources, seconds.
    pub block_s: f64,
    /// Upper bound on the RIR length, seconds.
    pub max_rir_s: f64,
    /// Reference-channel RMS of every rendered mixture.
    pub level_rms: f64,
    /// Optional folder of mono WAV files used instead of synthetic speech.
    pub speech_dir: Option<PathBuf>,
    /// Optional folder of multichannel WAV noise used instead of diffuse
    /// synthetic noise.
    pub noise_dir: Option<PathBuf>,
}

impl Default for SceneConfig {
    /// Six-microphone scenes with the full room, RT60 and SNR ranges.
    fn default() -> Self {
        SceneConfig {
            sample_rate: 8000,
            duration_s: 4.0,
            mics: (0..6).collect(),
            geometry: ArrayGeometry::chime3(),
            room_x: [4.0, 10.0],
            room_y: [4.0, 10.0],
            room_z: [3.0, 4.0],
            rt60: [0.1, 1.0],
            snr_db: [-5.0, 10.0],
            speed: [0.12, 0.4],
            moving_fraction: 0.5,
            array_height: [1.0, 1.6],
            source_height: [1.2, 1.9],
            block_s: 0.128,
            max_rir_s: 1.0,
            level_rms: 0.05,
            speech_dir: None,
            noise_dir: None,
        }
    }
}

impl SceneConfig {
    /// Two microphones 20 cm apart, RT60 up to 0.3 s, SNR 5 to 15 dB.
    pub fn toy() -> Self {
        SceneConfig {
            mics: vec![0, 2],
            rt60: [0.1, 0.3],
            snr_db: [5.0, 15.0],
            ..Self::default()
        }
    }

    pub fn num_mics(&self) -> usize {
        self.mics.len()
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("room_x", self.room_x),
            ("room_y", self.room_y),
            ("room_z", self.room_z),
            ("rt60", self.rt60),
            ("snr_db", self.snr_db),
            ("speed", self.speed),
            ("array_height", self.array_height),
            ("source_height", self.source_height),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return Err(config(format!("{} range [{}, {}] is empty", name, lo, hi)));
            }
        }
        if self.rt60[0] <= 0.0 || self.room_x[0] <= 1.0 || self.room_y[0] <= 1.0 {
            return Err(config("rt60 must be positive and rooms wider than 1 m"));
        }
        if !(0.0..=1.0).contains(&self.moving_fraction) {
            return Err(config("moving_fraction must be in [0, 1]"));
        }
        if self.duration_s <= 0.0 || self.block_s <= 0.0 || self.max_rir_s <= 0.0 || self.level_rms <= 0.0 {
            return Err(config("duration, block length, RIR length and level must be positive"));
        }
        if self.mics.is_empty() {
            return Err(config("no microphones selected"));
        }
        self.geometry.subset(&self.mics)?;
        Ok(())
    }
}

/// Everything needed to re-render one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub index: u64,
    pub room: Room,
    pub array_centre: Point,
    pub array_azimuth: f64,
    pub mic_positions: Vec<Point>,
    pub trajectory: Trajectory,
    pub moving: bool,
    pub snr_db: f64,
    pub speech_seed: u64,
    pub noise_seed: u64,
    pub speech_file: Option<PathBuf>,
    pub noise_file: Option<PathBuf>,
}

/// A rendered scene: the microphone mixture and the direct-path target at
/// the reference microphone, both at the mixture's normalized level.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub mixture: MultichannelAudio<f32>,
    pub target: MultichannelAudio<f32>,
}

/// Scene list plus the settings and seed it was drawn with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub scenes: Vec<SceneSpec>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("manifest: {}", e)))
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(config(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

/// Repeats `x` to `len` samples, starting at `start`.
fn loop_to(x: &[f64], start: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| x[(start + i) % x.len()]).collect()
}

pub struct SceneGenerator {
    cfg: SceneConfig,
    seed: u64,
    mics: ArrayGeometry,
    speech_files: Vec<PathBuf>,
    noise_files: Vec<PathBuf>,
}

impl SceneGenerator {
    pub fn new(cfg: SceneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mics = cfg.geometry.subset(&cfg.mics)?;
        let speech_files = cfg
            .speech_dir
            .as_deref()
            .map(wav_files)
            .transpose()?
            .unwrap_or_default();
        let noise_files = cfg.noise_dir.as_deref().map(wav_files).transpose()?.unwrap_or_default();
        Ok(SceneGenerator {
            cfg,
            seed,
            mics,
            speech_files,
            noise_files,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Draws the parameters of scene `index`.
    pub fn spec(&self, index: u64) -> Result<SceneSpec> {
        let cfg = &self.cfg;
        let mut rng = self.rng(index);
        for _ in 0..1000 {
            let dims = [
                uniform(&mut rng, cfg.room_x),
                uniform(&mut rng, cfg.room_y),
                uniform(&mut rng, cfg.room_z),
            ];
            let room = Room::new(dims, uniform(&mut rng, cfg.rt60))?;
            if room.absorption().is_err() {
                continue;
            }
            let centre = [
                dims[0] / 2.0 + rng.gen_range(-0.5..0.5),
                dims[1] / 2.0 + rng.gen_range(-0.5..0.5),
                uniform(&mut rng, cfg.array_height).min(dims[2] - 0.3),
            ];
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let mic_positions = self.mics.place(centre, azimuth);
            if mic_positions.iter().any(|&p| !room.contains(p)) {
                continue;
            }
            let Some(mut traj) = sample_loop(&mut rng, &room, centre, cfg.source_height) else {
                continue;
            };
            let moving = rng.gen_bool(cfg.moving_fraction);
            traj.offset = rng.gen_range(0.0..traj.perimeter());
            if moving {
                traj.speed = uniform(&mut rng, cfg.speed);
                traj.direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
            let snr_db = uniform(&mut rng, cfg.snr_db);
            let speech_file = (!self.speech_files.is_empty())
                .then(|| self.speech_files[rng.gen_range(0..self.speech_files.len())].clone());
            let noise_file = (!self.noise_files.is_empty())
                .then(|| self.noise_files[rng.gen_range(0..self.noise_files.len())].clone());
            return Ok(SceneSpec {
                index,
                room,
                array_centre: centre,
                array_azimuth: azimuth,
                mic_positions,
                trajectory: traj,
                moving,
                snr_db,
                speech_seed: rng.gen(),
                noise_seed: rng.gen(),
                speech_file,
                noise_file,
            });
        }
        Err(config("could not place a speaker and array in the sampled rooms"))
    }

    pub fn manifest(&self, count: u64) -> Result<Manifest> {
        Ok(Manifest {
            seed: self.seed,
            config: self.cfg.clone(),
            scenes: (0..count).map(|i| self.spec(i)).collect::<Result<_>>()?,
        })
    }

    fn dry_speech(&self, spec: &SceneSpec, len: usize) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.speech_seed);
        match &spec.speech_file {
            None => Ok(synthetic_speech(&mut rng, len, self.cfg.sample_rate)),
            Some(path) => {
                let a = read_wav_at(path, self.cfg.sample_rate)?;
                let x: Vec<f64> = a.channel(0).iter().map(|&v| v as f64).collect();
                if x.iter().all(|&v| v == 0.0) {
                    return Err(config(format!("{} is silent", path.display())));
                }
                let start = rng.gen_range(0..x.len());
                Ok(loop_to(&x, start, len))
            }
        }
    }

    fn noise(&self, spec: &SceneSpec, len: usize) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        match &spec.noise_file {
            None => diffuse_noise(&mut rng, &spec.mic_positions, len, self.cfg.sample_rate),
            Some(path) => {
                let a = read_wav_at(path, self.cfg.sample_rate)?;
                let m = spec.mic_positions.len();
                if a.channels() < m || a.is_empty() {
                    return Err(config(format!(
                        "noise file {} has {} channels, scenes need {}",
                        path.display(),
                        a.channels(),
                        m
                    )));
                }
                let start = rng.gen_range(0..a.len());
                Ok((0..m)
                    .map(|c| loop_to(&a.channel(c).iter().map(|&v| v as f64).collect::<Vec<_>>(), start, len))
                    .collect())
            }
        }
    }

    /// Renders a scene of `self.config().duration_s` seconds.
    pub fn render(&self, spec: &SceneSpec) -> Result<Scene> {
        self.render_len(spec, self.cfg.samples())
    }

    /// Renders a scene with an explicit length in samples.
    pub fn render_len(&self, spec: &SceneSpec, len: usize) -> Result<Scene> {
        let fs = self.cfg.sample_rate;
        let dry = self.dry_speech(spec, len)?;
        let mut opts = RenderOptions::new(&spec.room, fs, ((self.cfg.block_s * fs as f64).round() as usize).max(1));
        let full = RirOptions::for_room(&spec.room, fs);
        opts.rir.len = full.len.min((self.cfg.max_rir_s * fs as f64).ceil() as usize);
        let r = render_moving(&dry, &spec.trajectory, &spec.room, &spec.mic_positions, &opts)?;
        let noise = self.noise(spec, len)?;
        let (mix, _) = mix_noise(&r.reverberant, &noise, spec.snr_db)?;
        let rms = (mix[0].iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let g = self.cfg.level_rms / rms;
        let to32 = |x: &[f64]| x.iter().map(|&v| (v * g) as f32).collect::<Vec<f32>>();
        Ok(Scene {
            spec: spec.clone(),
            mixture: MultichannelAudio::from_channels(fs, mix.iter().map(|c| to32(c)).collect())?,
            target: MultichannelAudio::from_channels(fs, vec![to32(&r.direct)])?,
        })
    }

    /// Draws and renders scene `index`.
    pub fn scene(&self, index: u64) -> Result<Scene> {
        self.render(&self.spec(index)?)
    }
}

/// Random closed loop of eight waypoints at one height, at least 0.5 m
/// from the walls and from the array centre.
fn sample_loop(rng: &mut impl Rng, room: &Room, array: Point, height: [f64; 2]) -> Option<Trajectory> {
    let margin = 0.5;
    let [lx, ly, lz] = room.dims;
    let rmax = ((lx.min(ly) - 2.0 * margin) / 2.0).min(2.0);
    if rmax < 0.3 {
        return None;
    }
    let r = rng.gen_range(0.3..=rmax);
    let cx = rng.gen_range(margin + r..=lx - margin - r);
    let cy = rng.gen_range(margin + r..=ly - margin - r);
    let z = uniform(rng, height).min(lz - margin);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let waypoints: Vec<Point> = (0..8)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / 8.0;
            let rr = r * rng.gen_range(0.6..1.0);
            [cx + rr * a.cos(), cy + rr * a.sin(), z]
        })
        .collect();
    let traj = Trajectory {
        waypoints,
        speed: 0.0,
        offset: 0.0,
        direction: 1.0,
    };
    let per = traj.perimeter();
    let clear = (0..64).all(|i| {
        let p = traj.at_arc(per * i as f64 / 64.0);
        distance([p[0], p[1], array[2]], array) >= margin
    });
    clear.then_some(traj)
}
