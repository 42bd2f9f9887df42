//! The online SpatialNet: causal input convolution, `L` interleaved
//! cross-band and narrow-band blocks, and an output linear layer that
//! regresses the reference-channel STFT coefficients.
//!
//! Hidden activations are laid out `[B, F, T, H]`, so every narrow-band
//! sequence (one frequency of one utterance) is contiguous.

pub mod checkpoint;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{silu, ConvPadding, Graph, Var};
use crate::blocks::retention::DEFAULT_GAMMAS;
use crate::blocks::{AttentionBlock, AttnState, ConvTail, MambaBlock, SeqKernel, SsmState, TConvFfn};
use crate::error::{config, contract, Result};
use crate::params::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::stft::{Spectrogram, StftConfig};
use crate::tensor::{cast, gemm_strided, Float, MatRef, Tensor};

pub use checkpoint::{Checkpoint, StageMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Msa,
    Retention,
    Mamba,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Msa, Variant::Retention, Variant::Mamba];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Msa => "msa",
            Variant::Retention => "retention",
            Variant::Mamba => "mamba",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msa" => Ok(Variant::Msa),
            "retention" => Ok(Variant::Retention),
            "mamba" => Ok(Variant::Mamba),
            other => Err(config(format!("unknown variant {:?} (msa, retention, mamba)", other))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Model hyperparameters. Serialized alongside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub layers: usize,
    pub mics: usize,
    pub stft: StftConfig,
    /// Time kernel of the input convolution.
    pub input_kernel: usize,
    /// Frequency kernel of the cross-band depthwise convolution.
    pub cross_kernel: usize,
    /// Feature groups of the full-band frequency mixing.
    pub cross_groups: usize,
    pub heads: usize,
    pub msa_window: usize,
    pub gammas: Vec<f64>,
    pub retention_norm: bool,
    pub ffn_expansion: usize,
    pub ffn_kernel: usize,
    pub ssm_state: usize,
    pub ssm_conv: usize,
    pub causal: bool,
    /// Divide each input frame by the running mean reference magnitude and
    /// scale the estimate back (see [`LevelNorm`]).
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// H = 96, L = 8 with six microphones.
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            hidden: 96,
            layers: 8,
            mics: 6,
            stft: StftConfig::default(),
            input_kernel: 5,
            cross_kernel: 5,
            cross_groups: 4,
            heads: 4,
            msa_window: crate::blocks::msa::DEFAULT_WINDOW,
            gammas: DEFAULT_GAMMAS.to_vec(),
            retention_norm: false,
            ffn_expansion: 3,
            ffn_kernel: 5,
            ssm_state: 16,
            ssm_conv: 4,
            causal: true,
            normalize: true,
        }
    }

    /// H = 16, L = 2, two microphones.
    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            hidden: 16,
            layers: 2,
            mics: 2,
            ..Self::new(variant)
        }
    }

    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if !self.causal {
            return Err(config("only the causal model is implemented"));
        }
        if self.hidden == 0 || self.layers == 0 || self.mics == 0 {
            return Err(config("hidden, layers and mics must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.variant == Variant::Retention && self.gammas.len() != self.heads {
            return Err(config(format!("{} decays for {} heads", self.gammas.len(), self.heads)));
        }
        crate::blocks::retention::check_gammas(&self.gammas)?;
        if self.cross_kernel % 2 == 0 {
            return Err(config("cross-band kernel must be odd"));
        }
        for (name, k) in [
            ("input_kernel", self.input_kernel),
            ("cross_kernel", self.cross_kernel),
            ("cross_groups", self.cross_groups),
            ("ffn_expansion", self.ffn_expansion),
            ("ffn_kernel", self.ffn_kernel),
            ("ssm_state", self.ssm_state),
            ("ssm_conv", self.ssm_conv),
        ] {
            if k == 0 {
                return Err(config(format!("{} must be positive", name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 bytes of the SHA-256 of the JSON form.
    pub fn hash(&self) -> [u8; 16] {
        let d = Sha256::digest(self.to_json().as_bytes());
        let mut h = [0u8; 16];
        h.copy_from_slice(&d[..16]);
        h
    }

    /// Analytic multiply-accumulate count of one streaming frame (all bins).
    pub fn macs_per_frame(&self) -> f64 {
        let (f, h) = (self.bins() as f64, self.hidden as f64);
        let g = self.cross_groups as f64;
        let input = 2.0 * self.mics as f64 * self.input_kernel as f64 * h;
        let cross = self.cross_kernel as f64 * h + 2.0 * h * g + g * f + 8.0 * h;
        let narrow = match self.variant {
            Variant::Msa | Variant::Retention => {
                let d = h / self.heads as f64;
                let kernel = match self.variant {
                    Variant::Msa => 2.0 * (self.msa_window as f64 + 1.0) * h,
                    _ => 2.0 * d * h,
                };
                let e = h * self.ffn_expansion as f64;
                4.0 * h * h + kernel + 2.0 * h * e + e * self.ffn_kernel as f64 + 10.0 * h
            }
            Variant::Mamba => {
                let e = 2.0 * h;
                let (n, r) = (self.ssm_state as f64, (self.hidden.div_ceil(16)) as f64);
                let one =
                    h * 2.0 * e + e * self.ssm_conv as f64 + e * (r + 2.0 * n) + r * e + 4.0 * e * n + e * h + 10.0 * h;
                2.0 * one
            }
        };
        f * (input + self.layers as f64 * (cross + narrow) + 2.0 * h)
    }

    /// Analytic FLOPs per second of audio for streaming inference.
    pub fn flops_per_second(&self) -> f64 {
        2.0 * self.macs_per_frame() * self.stft.frames_per_second()
    }
}

/// Per-frame frequency mixing with residual:
/// `x + Unsq(SiLU(FullBand(Sq(LN(FConv(LN(x)))))))`.
#[derive(Clone, Debug)]
pub struct CrossBandBlock {
    pub ln1: LayerNorm,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ln2: LayerNorm,
    pub squeeze: Linear,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
    pub unsqueeze: Linear,
}

impl CrossBandBlock {
    fn new<T: Float>(init: &mut Init<'_, T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (h, k, g, f) = (cfg.hidden, cfg.cross_kernel, cfg.cross_groups, cfg.bins());
        init.scope(name, |init| {
            Ok(CrossBandBlock {
                ln1: LayerNorm::new(init, "ln1", h)?,
                conv_w: init.fan_in("conv.w", &[h, k], k)?,
                conv_b: init.fan_in("conv.b", &[h], k)?,
                ln2: LayerNorm::new(init, "ln2", h)?,
                squeeze: Linear::new(init, "squeeze", h, g, true)?,
                mix_w: init.fan_in("mix.w", &[g, f, f], f)?,
                mix_b: init.fan_in("mix.b", &[g, f], f)?,
                unsqueeze: Linear::new(init, "unsqueeze", g, h, true)?,
            })
        })
    }

    /// `x: [B, F, T, H]`; frames are processed independently.
    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.ln1.forward(p, x)?;
        let h = h.dwconv(&p[self.conv_w], &p[self.conv_b], 1, ConvPadding::Same)?;
        let h = self.squeeze.forward(p, &self.ln2.forward(p, &h)?)?;
        let h = h.band_mix(&p[self.mix_w], &p[self.mix_b])?.silu();
        x.add(&self.unsqueeze.forward(p, &h)?)
    }
}

#[derive(Clone, Debug)]
pub enum NarrowBand {
    Attention { attn: AttentionBlock, ffn: TConvFfn },
    Mamba { first: MambaBlock, second: MambaBlock },
}

impl NarrowBand {
    fn new<T: Float>(init: &mut Init<'_, T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        init.scope(name, |init| {
            Ok(match cfg.variant {
                Variant::Msa | Variant::Retention => {
                    let kernel = match cfg.variant {
                        Variant::Msa => SeqKernel::Msa { window: cfg.msa_window },
                        _ => SeqKernel::Retention {
                            gammas: cfg.gammas.clone(),
                        },
                    };
                    NarrowBand::Attention {
                        attn: AttentionBlock::new(init, "attn", h, cfg.heads, kernel, cfg.retention_norm)?,
                        ffn: TConvFfn::new(init, "ffn", h, cfg.ffn_expansion, cfg.ffn_kernel)?,
                    }
                }
                Variant::Mamba => NarrowBand::Mamba {
                    first: MambaBlock::new(init, "mamba1", h, cfg.ssm_state, cfg.ssm_conv)?,
                    second: MambaBlock::new(init, "mamba2", h, cfg.ssm_state, cfg.ssm_conv)?,
                },
            })
        })
    }

    /// `x: [.., T, H]`; every leading index is an independent sequence.
    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            NarrowBand::Attention { attn, ffn } => ffn.forward(p, &attn.forward(p, x)?),
            NarrowBand::Mamba { first, second } => second.forward(p, &first.forward(p, x)?),
        }
    }

    fn new_state<T: Float>(&self, rows: usize) -> Result<NarrowState<T>> {
        Ok(match self {
            NarrowBand::Attention { attn, ffn } => NarrowState::Attention {
                attn: (0..rows).map(|_| attn.new_state()).collect::<Result<_>>()?,
                ffn: (0..rows).map(|_| ffn.new_state()).collect(),
            },
            NarrowBand::Mamba { first, second } => NarrowState::Mamba {
                first: (0..rows).map(|_| first.new_state()).collect(),
                second: (0..rows).map(|_| second.new_state()).collect(),
            },
        })
    }

    fn step<T: Float>(&self, p: &ParamStore<T>, x: &mut [T], st: &mut NarrowState<T>) -> Result<()> {
        match (self, st) {
            (NarrowBand::Attention { attn, ffn }, NarrowState::Attention { attn: sa, ffn: sf }) => {
                attn.step(p, x, sa)?;
                ffn.step(p, x, sf)
            }
            (NarrowBand::Mamba { first, second }, NarrowState::Mamba { first: s1, second: s2 }) => {
                first.step(p, x, s1)?;
                second.step(p, x, s2)
            }
            _ => Err(contract("narrow-band state does not match the block variant")),
        }
    }
}

/// Streaming state of one narrow-band block, one entry per frequency.
#[derive(Clone, Debug, PartialEq)]
pub enum NarrowState<T> {
    Attention {
        attn: Vec<AttnState<T>>,
        ffn: Vec<ConvTail<T>>,
    },
    Mamba {
        first: Vec<SsmState<T>>,
        second: Vec<SsmState<T>>,
    },
}

impl<T: Float> NarrowState<T> {
    fn reset(&mut self) {
        match self {
            NarrowState::Attention { attn, ffn } => {
                attn.iter_mut().for_each(|s| s.reset());
                ffn.iter_mut().for_each(|s| s.reset());
            }
            NarrowState::Mamba { first, second } => {
                first.iter_mut().chain(second.iter_mut()).for_each(|s| s.reset());
            }
        }
    }

    pub fn scalars(&self) -> usize {
        match self {
            NarrowState::Attention { attn, ffn } => {
                attn.iter().map(|s| s.scalars()).sum::<usize>() + ffn.iter().map(|s| s.len()).sum::<usize>()
            }
            NarrowState::Mamba { first, second } => first.iter().chain(second).map(|s| s.scalars()).sum(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub cross: CrossBandBlock,
    pub narrow: NarrowBand,
}

/// Input level floor of [`LevelNorm`].
pub const LEVEL_FLOOR: f64 = 1e-8;

/// Causal level normalization. The scale of frame `t` is the mean
/// reference-channel magnitude over all bins of frames `0..=t`; inputs are
/// divided by it (floored at [`LEVEL_FLOOR`]) and estimates multiplied by
/// it, so silence maps to silence and the output follows the input level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelNorm<T> {
    sum: T,
    frames: usize,
}

impl<T: Float> Default for LevelNorm<T> {
    fn default() -> Self {
        LevelNorm {
            sum: T::zero(),
            frames: 0,
        }
    }
}

impl<T: Float> LevelNorm<T> {
    /// Consumes the reference-channel bins `(re, im)` of one frame and
    /// returns the frame's scale.
    pub fn push(&mut self, reference: impl Iterator<Item = (T, T)>) -> T {
        let mut acc = T::zero();
        let mut n = 0usize;
        for (re, im) in reference {
            acc += (re * re + im * im).sqrt();
            n += 1;
        }
        self.sum += acc / cast(n.max(1) as f64);
        self.frames += 1;
        self.sum / cast(self.frames as f64)
    }

    /// Scales of every frame of a packed `[F, T, 2M]` utterance.
    pub fn scales(packed: &[T], bins: usize, frames: usize, chans2: usize) -> Vec<T> {
        let mut norm = LevelNorm::default();
        (0..frames)
            .map(|t| {
                norm.push((0..bins).map(|f| {
                    let i = (f * frames + t) * chans2;
                    (packed[i], packed[i + 1])
                }))
            })
            .collect()
    }

    pub fn inverse(scale: T) -> T {
        T::one() / scale.max(cast(LEVEL_FLOOR))
    }
}

/// Full streaming state of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    fingerprint: [u8; 16],
    level: LevelNorm<T>,
    /// Last `input_kernel - 1` packed input frames per frequency.
    input_tail: Vec<T>,
    layers: Vec<NarrowState<T>>,
    frames: usize,
}

impl<T: Float> ModelState<T> {
    /// Returns the state to that of a fresh stream.
    pub fn reset(&mut self) {
        self.input_tail.iter_mut().for_each(|v| *v = T::zero());
        self.layers.iter_mut().for_each(|l| l.reset());
        self.level = LevelNorm::default();
        self.frames = 0;
    }

    /// Frames consumed since creation or the last reset.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn layers(&self) -> &[NarrowState<T>] {
        &self.layers
    }

    /// Scalars held across frames; constant for the life of the stream.
    pub fn scalars(&self) -> usize {
        self.input_tail.len() + self.layers.iter().map(|l| l.scalars()).sum::<usize>() + 2
    }

    pub fn memory_bytes(&self) -> usize {
        self.scalars() * std::mem::size_of::<T>()
    }
}

/// Model weights plus structure. Weights are immutable during inference and
/// can be shared by any number of streams.
#[derive(Clone, Debug)]
pub struct SpatialNet<T: Float = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    input: Linear,
    layers: Vec<Layer>,
    output: Linear,
    fingerprint: OnceLock<[u8; 16]>,
}

impl<T: Float> SpatialNet<T> {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let feat = 2 * cfg.mics * cfg.input_kernel;
        let input = Linear::new(&mut init, "input", feat, cfg.hidden, true)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let layer = init.scope(&format!("layer{}", l), |init| {
                Ok(Layer {
                    cross: CrossBandBlock::new(init, "cross", &cfg)?,
                    narrow: NarrowBand::new(init, "narrow", &cfg)?,
                })
            })?;
            layers.push(layer);
        }
        let output = Linear::new(&mut init, "output", cfg.hidden, 2, true)?;
        Ok(SpatialNet {
            cfg,
            params,
            input,
            layers,
            output,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable weights; existing stream states become invalid.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.fingerprint = OnceLock::new();
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Identity of the configuration and weights; streaming states carry it
    /// so a state cannot be fed to a different model.
    pub fn fingerprint(&self) -> [u8; 16] {
        *self.fingerprint.get_or_init(|| self.compute_fingerprint())
    }

    fn compute_fingerprint(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        h.update(self.cfg.to_json().as_bytes());
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update(T::to_le_bytes_vec(t.data()));
        }
        let d = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&d[..16]);
        out
    }

    /// Input convolution: `[B, F, T, 2M] -> [B, F, T, H]`.
    pub fn encode(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.unfold_time(self.cfg.input_kernel)?
            .linear(&p[self.input.w], self.input.b.map(|b| &p[b]))
    }

    /// Differentiable forward: packed input `[B, F, T, 2M]` to packed
    /// reference-channel estimate `[B, F, T, 2]`.
    pub fn forward_var(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != self.cfg.bins() || sh[3] != 2 * self.cfg.mics {
            return Err(contract(format!(
                "model expects [B, {}, T, {}] input, got {:?}",
                self.cfg.bins(),
                2 * self.cfg.mics,
                sh
            )));
        }
        let mut h = self.encode(p, x)?;
        for layer in &self.layers {
            h = layer.cross.forward(p, &h)?;
            h = layer.narrow.forward(p, &h)?;
        }
        self.output.forward(p, &h)
    }

    fn check_spec(&self, spec: &Spectrogram<T>) -> Result<()> {
        if spec.channels() != self.cfg.mics || spec.bins() != self.cfg.bins() {
            return Err(contract(format!(
                "model expects {} channels and {} bins, got {} channels and {} bins",
                self.cfg.mics,
                self.cfg.bins(),
                spec.channels(),
                spec.bins()
            )));
        }
        if spec.cfg != self.cfg.stft {
            return Err(contract("spectrogram STFT settings differ from the model's"));
        }
        Ok(())
    }

    /// Applies the input side of [`LevelNorm`] to a packed `[F, T, 2M]`
    /// utterance in place and returns the per-frame output scales (all one
    /// when normalization is off).
    pub fn normalize_input(&self, packed: &mut Tensor<T>) -> Result<Vec<T>> {
        let sh = packed.shape().to_vec();
        if sh.len() != 3 || sh[0] != self.cfg.bins() || sh[2] != 2 * self.cfg.mics {
            return Err(contract(format!(
                "expected packed [{}, T, {}], got {:?}",
                self.cfg.bins(),
                2 * self.cfg.mics,
                sh
            )));
        }
        let (f, t, c) = (sh[0], sh[1], sh[2]);
        if !self.cfg.normalize {
            return Ok(vec![T::one(); t]);
        }
        let scales = LevelNorm::scales(packed.data(), f, t, c);
        let inv: Vec<T> = scales.iter().map(|&s| LevelNorm::inverse(s)).collect();
        for (i, row) in packed.data_mut().chunks_exact_mut(c).enumerate() {
            let k = inv[i % t];
            row.iter_mut().for_each(|v| *v = *v * k);
        }
        Ok(scales)
    }

    /// Multiplies a packed `[F, T, 2]` estimate by per-frame scales.
    pub fn rescale_output(y: &mut [T], scales: &[T]) {
        let t = scales.len();
        for (i, pair) in y.chunks_exact_mut(2).enumerate() {
            let s = scales[i % t];
            pair[0] = pair[0] * s;
            pair[1] = pair[1] * s;
        }
    }

    /// Whole-utterance causal forward.
    pub fn forward_offline(&self, spec: &Spectrogram<T>) -> Result<Spectrogram<T>> {
        self.check_spec(spec)?;
        let (f, t) = (spec.bins(), spec.frames());
        let g = Graph::<T>::inference();
        let p = self.params.bind(&g, false);
        let mut packed = spec.pack_real();
        let scales = self.normalize_input(&mut packed)?;
        let x = g.constant(packed.reshape(vec![1, f, t, 2 * self.cfg.mics])?);
        let y = self.forward_var(&p, &x)?;
        let mut y = y.value().clone().reshape(vec![f, t, 2])?;
        Self::rescale_output(y.data_mut(), &scales);
        Spectrogram::unpack_complex(self.cfg.stft, &y)
    }

    pub fn new_state(&self) -> Result<ModelState<T>> {
        let f = self.cfg.bins();
        Ok(ModelState {
            fingerprint: self.fingerprint(),
            level: LevelNorm::default(),
            input_tail: vec![T::zero(); f * (self.cfg.input_kernel - 1) * 2 * self.cfg.mics],
            layers: self
                .layers
                .iter()
                .map(|l| l.narrow.new_state(f))
                .collect::<Result<_>>()?,
            frames: 0,
        })
    }

    /// Checks that `state` was created by this model (same configuration
    /// and weights).
    pub fn check_state(&self, state: &ModelState<T>) -> Result<()> {
        if state.fingerprint != self.fingerprint() {
            return Err(contract("stream state belongs to a different model or checkpoint"));
        }
        Ok(())
    }

    /// Advances one frame. `frame` holds exactly one STFT frame of all
    /// microphones; returns one frame of the single-channel estimate.
    pub fn stream_step(&self, frame: &Spectrogram<T>, state: &mut ModelState<T>) -> Result<Spectrogram<T>> {
        self.check_spec(frame)?;
        if frame.frames() != 1 {
            return Err(contract(format!("stream_step takes one frame, got {}", frame.frames())));
        }
        self.check_state(state)?;
        let f = self.cfg.bins();
        let packed = frame.pack_real();
        let mut out = vec![T::zero(); f * 2];
        self.step_packed(packed.data(), state, &mut out)?;
        Spectrogram::unpack_complex(self.cfg.stft, &Tensor::new(vec![f, 1, 2], out)?)
    }

    /// Packed streaming step without the fingerprint check:
    /// `x: [F, 2M]`, `out: [F, 2]`.
    pub fn step_packed(&self, x: &[T], state: &mut ModelState<T>, out: &mut [T]) -> Result<()> {
        let (f, h, c, k) = (
            self.cfg.bins(),
            self.cfg.hidden,
            2 * self.cfg.mics,
            self.cfg.input_kernel,
        );
        if x.len() != f * c || out.len() != f * 2 {
            return Err(contract(format!("step expects {} inputs and {} outputs", f * c, f * 2)));
        }
        if state.layers.len() != self.layers.len() || state.input_tail.len() != f * (k - 1) * c {
            return Err(contract("stream state does not match the model structure"));
        }
        let scale = if self.cfg.normalize {
            state.level.push((0..f).map(|fi| (x[fi * c], x[fi * c + 1])))
        } else {
            T::one()
        };
        let inv = LevelNorm::inverse(scale);
        let x: Vec<T> = if self.cfg.normalize {
            x.iter().map(|&v| v * inv).collect()
        } else {
            x.to_vec()
        };
        // input convolution from the stored tail
        let mut unfolded = vec![T::zero(); f * k * c];
        for fi in 0..f {
            let tail = &mut state.input_tail[fi * (k - 1) * c..(fi + 1) * (k - 1) * c];
            let u = &mut unfolded[fi * k * c..(fi + 1) * k * c];
            u[..(k - 1) * c].copy_from_slice(tail);
            u[(k - 1) * c..].copy_from_slice(&x[fi * c..(fi + 1) * c]);
            if k > 1 {
                tail.copy_from_slice(&u[c..]);
            }
        }
        let mut hid = vec![T::zero(); f * h];
        self.input.rows(&self.params, &unfolded, &mut hid);
        for (layer, st) in self.layers.iter().zip(state.layers.iter_mut()) {
            self.cross_step(&layer.cross, &mut hid)?;
            layer.narrow.step(&self.params, &mut hid, st)?;
        }
        self.output.rows(&self.params, &hid, out);
        if self.cfg.normalize {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        state.frames += 1;
        Ok(())
    }

    /// Cross-band block on one frame `[F, H]`, in place.
    fn cross_step(&self, blk: &CrossBandBlock, x: &mut [T]) -> Result<()> {
        let p = &self.params;
        let (f, h, g) = (self.cfg.bins(), self.cfg.hidden, self.cfg.cross_groups);
        let k = self.cfg.cross_kernel;
        let mut a = x.to_vec();
        blk.ln1.rows(p, &mut a);
        let (w, b) = (p.get(blk.conv_w).data(), p.get(blk.conv_b).data());
        let mut c = vec![T::zero(); f * h];
        let left = (k - 1) / 2;
        for fi in 0..f {
            let o = &mut c[fi * h..(fi + 1) * h];
            o.copy_from_slice(b);
            for j in 0..k {
                let src = fi as isize + j as isize - left as isize;
                if src < 0 || src >= f as isize {
                    continue;
                }
                let xr = &a[src as usize * h..(src as usize + 1) * h];
                for ch in 0..h {
                    o[ch] += w[ch * k + j] * xr[ch];
                }
            }
        }
        blk.ln2.rows(p, &mut c);
        let mut s = vec![T::zero(); f * g];
        blk.squeeze.rows(p, &c, &mut s);
        let (mw, mb) = (p.get(blk.mix_w).data(), p.get(blk.mix_b).data());
        let mut m = vec![T::zero(); f * g];
        let span = (f - 1) * g + 1;
        for gi in 0..g {
            for fo in 0..f {
                m[fo * g + gi] = mb[gi * f + fo];
            }
            gemm_strided(
                T::one(),
                MatRef::new(&mw[gi * f * f..(gi + 1) * f * f], f, f),
                MatRef::strided(&s[gi..gi + span], f, 1, g as isize, 1),
                T::one(),
                &mut m[gi..gi + span],
                g,
                1,
            );
        }
        m.iter_mut().for_each(|v| *v = silu(*v));
        let mut u = vec![T::zero(); f * h];
        blk.unsqueeze.rows(p, &m, &mut u);
        for (xv, &uv) in x.iter_mut().zip(&u) {
            *xv += uv;
        }
        Ok(())
    }

    /// Streams a whole spectrogram frame by frame from a fresh state.
    pub fn stream_all(&self, spec: &Spectrogram<T>) -> Result<Spectrogram<T>> {
        self.check_spec(spec)?;
        let mut st = self.new_state()?;
        let (f, t, c) = (spec.bins(), spec.frames(), 2 * self.cfg.mics);
        let packed = spec.pack_real();
        let mut out = vec![T::zero(); f * t * 2];
        let mut x = vec![T::zero(); f * c];
        let mut y = vec![T::zero(); f * 2];
        for ti in 0..t {
            for fi in 0..f {
                x[fi * c..(fi + 1) * c].copy_from_slice(&packed.data()[(fi * t + ti) * c..(fi * t + ti + 1) * c]);
            }
            self.step_packed(&x, &mut st, &mut y)?;
            for fi in 0..f {
                out[(fi * t + ti) * 2..(fi * t + ti + 1) * 2].copy_from_slice(&y[fi * 2..(fi + 1) * 2]);
            }
        }
        Spectrogram::unpack_complex(self.cfg.stft, &Tensor::new(vec![f, t, 2], out)?)
    }

    /// Same structure with weights converted to another precision.
    pub fn cast<U: Float>(&self) -> SpatialNet<U> {
        SpatialNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            input: self.input,
            layers: self.layers.clone(),
            output: self.output,
            fingerprint: OnceLock::new(),
        }
    }

    /// Rebuilds the structure for `cfg` around existing named tensors.
    pub fn from_params(cfg: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        let expected = model.params.len();
        if tensors.len() != expected {
            return Err(crate::Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the configuration needs {}",
                tensors.len(),
                expected
            )));
        }
        for (name, t) in tensors {
            model
                .params_mut()
                .set(&name, t)
                .map_err(|e| crate::Error::Checkpoint(format!("tensor {}: {}", name, e)))?;
        }
        Ok(model)
    }
}
