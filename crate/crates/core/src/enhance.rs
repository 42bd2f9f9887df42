//! Running a trained model over recorded audio, either on the whole signal
//! at once or hop by hop.

use std::sync::Arc;

use crate::audio::MultichannelAudio;
use crate::error::{contract, Result};
use crate::model::{ModelState, SpatialNet};
use crate::stft::{Spectrogram, Stft, StreamingAnalyzer, StreamingSynthesizer};
use crate::tensor::Float;

/// Checks that `audio` matches the model's sample rate and microphone count.
pub fn check_input<T: Float>(model: &SpatialNet<T>, audio: &MultichannelAudio<T>) -> Result<()> {
    let cfg = model.config();
    if audio.sample_rate != cfg.stft.sample_rate {
        return Err(contract(format!(
            "input is {} Hz but the model expects {} Hz",
            audio.sample_rate, cfg.stft.sample_rate
        )));
    }
    if audio.channels() != cfg.mics {
        return Err(contract(format!(
            "input has {} channels but the model expects {}",
            audio.channels(),
            cfg.mics
        )));
    }
    Ok(())
}

fn padded<T: Float>(audio: &MultichannelAudio<T>, len: usize) -> Result<MultichannelAudio<T>> {
    let chans = (0..audio.channels())
        .map(|m| {
            let mut c = audio.channel(m).to_vec();
            c.resize(len, T::zero());
            c
        })
        .collect();
    MultichannelAudio::from_channels(audio.sample_rate, chans)
}

/// Whole-signal enhancement. The output is mono and as long as the input.
pub fn enhance_offline<T: Float>(model: &SpatialNet<T>, audio: &MultichannelAudio<T>) -> Result<MultichannelAudio<T>> {
    check_input(model, audio)?;
    let sc = model.config().stft;
    let stft = Stft::new(sc)?;
    let spec = stft.analyze(&padded(audio, sc.padded_len(audio.len()))?)?;
    let out = stft.synthesize(&model.forward_offline(&spec)?)?;
    let mut y = out.into_samples();
    y.truncate(audio.len());
    MultichannelAudio::from_channels(audio.sample_rate, vec![y])
}

/// Hop-by-hop enhancement of one stream.
///
/// Each call to [`StreamEnhancer::push_hop`] consumes one hop of every
/// microphone. Output lags the input by one window: the first call returns
/// nothing, later calls return one hop each, and [`StreamEnhancer::finish`]
/// flushes the remainder.
pub struct StreamEnhancer<'m, T: Float> {
    model: &'m SpatialNet<T>,
    state: ModelState<T>,
    analyzer: StreamingAnalyzer<T>,
    synth: StreamingSynthesizer<T>,
}

impl<'m, T: Float> StreamEnhancer<'m, T> {
    pub fn new(model: &'m SpatialNet<T>) -> Result<Self> {
        let stft = Arc::new(Stft::new(model.config().stft)?);
        Ok(StreamEnhancer {
            model,
            state: model.new_state()?,
            analyzer: StreamingAnalyzer::new(stft.clone(), model.config().mics),
            synth: StreamingSynthesizer::new(stft),
        })
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn push_hop(&mut self, hop: &[Vec<T>]) -> Result<Vec<T>> {
        match self.analyzer.push_hop(hop)? {
            None => Ok(Vec::new()),
            Some(frame) => {
                let y: Spectrogram<T> = self.model.stream_step(&frame, &mut self.state)?;
                Ok(self.synth.push_frame(y.data()))
            }
        }
    }

    pub fn finish(self) -> Vec<T> {
        self.synth.finish()
    }
}

/// Streams `audio` through a [`StreamEnhancer`]; same length and padding
/// as [`enhance_offline`].
pub fn enhance_streaming<T: Float>(
    model: &SpatialNet<T>,
    audio: &MultichannelAudio<T>,
) -> Result<MultichannelAudio<T>> {
    check_input(model, audio)?;
    let sc = model.config().stft;
    let total = sc.padded_len(audio.len());
    let x = padded(audio, total)?;
    let mut enh = StreamEnhancer::new(model)?;
    let mut y = Vec::with_capacity(total);
    for start in (0..total).step_by(sc.hop) {
        let hop: Vec<Vec<T>> = (0..x.channels())
            .map(|m| x.channel(m)[start..start + sc.hop].to_vec())
            .collect();
        y.extend(enh.push_hop(&hop)?);
    }
    y.extend(enh.finish());
    y.truncate(audio.len());
    MultichannelAudio::from_channels(audio.sample_rate, vec![y])
}

/// Wall-clock seconds of each of `frames` consecutive streaming steps on
/// pseudo-random input, the state size before the first and after the last
/// step, and the final state.
#[derive(Clone, Debug)]
pub struct StepTimings<T> {
    pub seconds: Vec<f64>,
    pub state_bytes_start: usize,
    pub state_bytes_end: usize,
    pub state: ModelState<T>,
}

impl<T> StepTimings<T> {
    /// Nearest-rank percentile of the steps `[end - count, end)`.
    pub fn percentile(&self, end: usize, count: usize, p: f64) -> f64 {
        let end = end.min(self.seconds.len());
        let mut w: Vec<f64> = self.seconds[end.saturating_sub(count)..end].to_vec();
        if w.is_empty() {
            return f64::NAN;
        }
        w.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * w.len() as f64).ceil().max(1.0) as usize;
        w[rank.min(w.len()) - 1]
    }
}

pub fn time_steps<T: Float>(model: &SpatialNet<T>, frames: usize, seed: u64) -> Result<StepTimings<T>> {
    use rand::{Rng, SeedableRng};
    let cfg = model.config();
    let (f, c) = (cfg.bins(), 2 * cfg.mics);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // a small pool of frames, cycled
    let pool: Vec<Vec<T>> = (0..16)
        .map(|_| {
            (0..f * c)
                .map(|_| crate::tensor::cast(rng.gen_range(-0.05..0.05)))
                .collect()
        })
        .collect();
    let mut state = model.new_state()?;
    let state_bytes_start = state.memory_bytes();
    let mut out = vec![T::zero(); f * 2];
    let mut seconds = Vec::with_capacity(frames);
    for t in 0..frames {
        let x = &pool[t % pool.len()];
        let t0 = std::time::Instant::now();
        model.step_packed(x, &mut state, &mut out)?;
        seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(StepTimings {
        seconds,
        state_bytes_start,
        state_bytes_end: state.memory_bytes(),
        state,
    })
}
