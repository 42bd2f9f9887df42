//! The training loop: batches of simulated scenes, `-SNR` on synthesized
//! waveforms, clipped Adam(W) updates, per-stage checkpoints and
//! segment-wise evaluation on long held-out scenes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::{Stage, StageKind, StagePlan};
use super::{clip_gradients, lr_schedule, neg_snr_loss, Adam, AdamConfig};
use crate::audio::MultichannelAudio;
use crate::autodiff::Graph;
use crate::error::{config, contract, Error, Result};
use crate::metrics::{finite_db, segmental, si_sdr, Metric};
use crate::model::{Checkpoint, SpatialNet, StageMeta, Variant};
use crate::scene::{Scene, SceneConfig, SceneGenerator};
use crate::stft::Stft;
use crate::tensor::Tensor;

/// Scene indices of the validation and evaluation sets start here, far
/// away from the training indices.
pub const VALID_BASE: u64 = 1 << 40;
pub const EVAL_BASE: u64 = 1 << 41;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Utterances per epoch, the same in every stage.
    pub train_utterances: usize,
    pub valid_utterances: usize,
    pub eval_utterances: usize,
    pub eval_duration_s: f64,
    pub segment_window_s: f64,
    pub segment_hop_s: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub clip: f64,
    /// Decoupled weight decay; `None` uses 0.001 for Mamba and none otherwise.
    pub weight_decay: Option<f64>,
    /// Memory budget of the rendered-scene cache.
    pub cache_mb: usize,
    pub scene: SceneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            train_utterances: 2000,
            valid_utterances: 20,
            eval_utterances: 20,
            eval_duration_s: 64.0,
            segment_window_s: 4.0,
            segment_hop_s: 1.0,
            lr: 0.001,
            lr_decay: 0.99,
            clip: 1.0,
            weight_decay: None,
            cache_mb: 1024,
            scene: SceneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Two-microphone toy scenes, 32 s evaluation signals.
    pub fn toy() -> Self {
        TrainConfig {
            eval_duration_s: 32.0,
            scene: SceneConfig::toy(),
            ..Self::default()
        }
    }

    pub fn adam(&self, variant: Variant) -> AdamConfig {
        let wd = self
            .weight_decay
            .unwrap_or(if variant == Variant::Mamba { 0.001 } else { 0.0 });
        AdamConfig::adamw(wd)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_utterances == 0 {
            return Err(config("batch size and training utterances must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.clip > 0.0) {
            return Err(config("learning rate, decay and clip threshold must be positive"));
        }
        if !(self.segment_window_s > 0.0) || !(self.segment_hop_s > 0.0) {
            return Err(config("segment window and hop must be positive"));
        }
        self.scene.validate()
    }
}

/// One row of the per-epoch CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean SI-SDR on the validation scenes; NaN when there are none.
    pub valid_si_sdr: f64,
}

/// Mean segment-wise SI-SDR of enhanced and unprocessed signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentCurve {
    pub starts_s: Vec<f64>,
    pub enhanced: Vec<f64>,
    pub unprocessed: Vec<f64>,
}

impl SegmentCurve {
    pub fn improvement(&self) -> Vec<f64> {
        self.enhanced
            .iter()
            .zip(&self.unprocessed)
            .map(|(e, u)| e - u)
            .collect()
    }

    /// Improvement averaged over all segments.
    pub fn mean_improvement(&self) -> f64 {
        let d = self.improvement();
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("segment_start_s,enhanced_db,unprocessed_db,improvement_db\n");
        for i in 0..self.starts_s.len() {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                self.starts_s[i],
                self.enhanced[i],
                self.unprocessed[i],
                self.enhanced[i] - self.unprocessed[i]
            )
            .unwrap();
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    /// Global index of the stage's first epoch.
    pub first_epoch: usize,
    /// Model fingerprint before and after the stage; each stage starts
    /// from the previous stage's end.
    pub start_fingerprint: [u8; 16],
    pub end_fingerprint: [u8; 16],
    pub checkpoint: Option<PathBuf>,
    pub curve: Option<SegmentCurve>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageReport>,
    pub init_checkpoint: Option<PathBuf>,
    pub model: SpatialNet<f32>,
    pub history: Vec<StageMeta>,
}

impl TrainReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,stage,lr,mean_loss,valid_si_sdr\n");
        for r in &self.epochs {
            writeln!(
                s,
                "{},{},{:e},{:.6},{:.6}",
                r.epoch, r.stage, r.lr, r.mean_loss, r.valid_si_sdr
            )
            .unwrap();
        }
        s
    }
}

/// Network input and loss target of one scene at one length. The audio is
/// zero-padded to a whole number of frames; `len` is the unpadded length.
struct Example {
    len: usize,
    /// `[F, T, 2M]`.
    features: Tensor<f32>,
    /// Reference-channel target after analysis and synthesis, so that it
    /// shares the edge treatment of the estimate.
    target: Vec<f32>,
    /// Reference-channel mixture, same processing.
    mixture: Vec<f32>,
}

impl Example {
    fn bytes(&self) -> usize {
        4 * (self.features.numel() + self.target.len() + self.mixture.len())
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    gen: SceneGenerator,
    stft: Arc<Stft<f32>>,
    cache: HashMap<(u64, usize), Arc<Example>>,
    cache_bytes: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, stft: crate::stft::StftConfig) -> Result<Self> {
        cfg.validate()?;
        if stft.sample_rate != cfg.scene.sample_rate {
            return Err(config(format!(
                "scene rate {} Hz differs from the model's {} Hz",
                cfg.scene.sample_rate, stft.sample_rate
            )));
        }
        let gen = SceneGenerator::new(cfg.scene.clone(), cfg.seed)?;
        Ok(Trainer {
            cfg,
            gen,
            stft: Arc::new(Stft::new(stft)?),
            cache: HashMap::new(),
            cache_bytes: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &SceneGenerator {
        &self.gen
    }

    fn prepare(&self, scene: &Scene) -> Result<Example> {
        let sc = self.stft.config();
        let len = scene.mixture.len();
        let pad = sc.padded_len(len) - len;
        let padded = |a: &MultichannelAudio<f32>, chans: usize| -> Result<MultichannelAudio<f32>> {
            let cs = (0..chans)
                .map(|m| {
                    let mut c = a.channel(m).to_vec();
                    c.resize(len + pad, 0.0);
                    c
                })
                .collect();
            MultichannelAudio::from_channels(a.sample_rate, cs)
        };
        let roundtrip = |a: &MultichannelAudio<f32>| -> Result<Vec<f32>> {
            Ok(self
                .stft
                .synthesize(&self.stft.analyze(&padded(a, 1)?)?)?
                .into_samples())
        };
        let spec = self.stft.analyze(&padded(&scene.mixture, scene.mixture.channels())?)?;
        Ok(Example {
            len,
            features: spec.pack_real(),
            target: roundtrip(&scene.target)?,
            mixture: roundtrip(&scene.mixture)?,
        })
    }

    /// Renders (or fetches) scene `index` at `len` samples. Examples are
    /// cached until the memory budget is spent; later ones are rendered on
    /// demand.
    fn example(&mut self, index: u64, len: usize) -> Result<Arc<Example>> {
        if let Some(e) = self.cache.get(&(index, len)) {
            return Ok(e.clone());
        }
        let scene = self.gen.render_len(&self.gen.spec(index)?, len)?;
        let ex = Arc::new(self.prepare(&scene)?);
        if self.cache_bytes + ex.bytes() <= self.cfg.cache_mb << 20 {
            self.cache_bytes += ex.bytes();
            self.cache.insert((index, len), ex.clone());
        }
        Ok(ex)
    }

    fn check_model(&self, model: &SpatialNet<f32>) -> Result<()> {
        let mc = model.config();
        if mc.mics != self.cfg.scene.num_mics() {
            return Err(config(format!(
                "model has {} microphones, scenes have {}",
                mc.mics,
                self.cfg.scene.num_mics()
            )));
        }
        if mc.stft != self.stft.config() {
            return Err(config("model and trainer STFT settings differ"));
        }
        Ok(())
    }

    /// Loss and per-parameter gradients of one batch of scenes.
    pub fn loss_and_grads(
        &mut self,
        model: &SpatialNet<f32>,
        indices: &[u64],
        len: usize,
    ) -> Result<(f64, Vec<Tensor<f32>>)> {
        let exs = indices
            .iter()
            .map(|&i| self.example(i, len))
            .collect::<Result<Vec<_>>>()?;
        let fsh = exs[0].features.shape().to_vec();
        let n = exs[0].target.len();
        let (bins, frames) = (fsh[0], fsh[1]);
        let mut feats = Vec::with_capacity(exs.len() * exs[0].features.numel());
        let mut targets = Vec::with_capacity(exs.len() * n);
        let mut out_scale = Vec::with_capacity(exs.len() * bins * frames * 2);
        for e in &exs {
            let mut x = e.features.clone();
            let scales = model.normalize_input(&mut x)?;
            feats.extend_from_slice(x.data());
            targets.extend_from_slice(&e.target);
            for _ in 0..bins {
                for &s in &scales {
                    out_scale.extend_from_slice(&[s, s]);
                }
            }
        }
        let b = exs.len();
        let g = Graph::<f32>::new();
        let p = model.params().bind(&g, true);
        let x = g.constant(Tensor::new(vec![b, bins, frames, fsh[2]], feats)?);
        let y = model.forward_var(&p, &x)?;
        let y = y.mul(&g.constant(Tensor::new(vec![b, bins, frames, 2], out_scale)?))?;
        let est = self.stft.synthesize_var(&y)?;
        let target = g.constant(Tensor::new(vec![b, n], targets)?);
        let loss = neg_snr_loss(&est, &target)?;
        let value = loss.value().data()[0] as f64;
        let mut grads = g.backward(&loss)?;
        let out = model
            .params()
            .ids()
            .map(|id| {
                grads
                    .take(p.var(id))
                    .unwrap_or_else(|| Tensor::zeros(model.params().get(id).shape().to_vec()))
            })
            .collect();
        Ok((value, out))
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(
        &mut self,
        model: &mut SpatialNet<f32>,
        opt: &mut Adam,
        indices: &[u64],
        len: usize,
        lr: f64,
    ) -> Result<f64> {
        let (loss, mut grads) = self.loss_and_grads(model, indices, len)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at step {}",
                loss,
                opt.steps()
            )));
        }
        clip_gradients(model.params(), &mut grads, self.cfg.clip)?;
        opt.step(model.params_mut(), &grads, lr)?;
        Ok(loss)
    }

    fn enhance(&self, model: &SpatialNet<f32>, ex: &Example) -> Result<Vec<f32>> {
        let spec = crate::stft::Spectrogram::unpack_complex(self.stft.config(), &ex.features)?;
        let out = model.forward_offline(&spec)?;
        let mut y = self.stft.synthesize(&out)?.into_samples();
        y.truncate(ex.len);
        Ok(y)
    }

    /// Mean SI-SDR of the enhanced validation scenes at `len` samples.
    pub fn validate_model(&mut self, model: &SpatialNet<f32>, len: usize) -> Result<f64> {
        let n = self.cfg.valid_utterances;
        if n == 0 {
            return Ok(f64::NAN);
        }
        let mut sum = 0.0;
        for i in 0..n as u64 {
            let ex = self.example(VALID_BASE + i, len)?;
            sum += finite_db(si_sdr(&self.enhance(model, &ex)?, &ex.target[..ex.len])?);
        }
        Ok(sum / n as f64)
    }

    /// Segment-wise SI-SDR of the long evaluation scenes, per utterance and
    /// averaged. Evaluation scenes bypass the cache.
    pub fn evaluate_segments(&self, model: &SpatialNet<f32>) -> Result<(SegmentCurve, Vec<SegmentCurve>)> {
        let fs = self.cfg.scene.sample_rate;
        let len = (self.cfg.eval_duration_s * fs as f64).round() as usize;
        let (w, h) = (self.cfg.segment_window_s, self.cfg.segment_hop_s);
        let mut per = Vec::with_capacity(self.cfg.eval_utterances);
        for i in 0..self.cfg.eval_utterances as u64 {
            let scene = self.gen.render_len(&self.gen.spec(EVAL_BASE + i)?, len)?;
            let ex = self.prepare(&scene)?;
            let est = self.enhance(model, &ex)?;
            let target = &ex.target[..ex.len];
            let e = segmental(Metric::SiSdr, &est, target, fs, w, h)?;
            let u = segmental(Metric::SiSdr, &ex.mixture[..ex.len], target, fs, w, h)?;
            per.push(SegmentCurve {
                starts_s: e.starts_s.clone(),
                enhanced: e.scores.iter().map(|&v| finite_db(v)).collect(),
                unprocessed: u.scores.iter().map(|&v| finite_db(v)).collect(),
            });
        }
        let first = per.first().ok_or_else(|| contract("no evaluation utterances"))?;
        let k = per.len() as f64;
        let avg = |f: fn(&SegmentCurve) -> &Vec<f64>| -> Vec<f64> {
            (0..first.starts_s.len())
                .map(|j| per.iter().map(|c| f(c)[j]).sum::<f64>() / k)
                .collect()
        };
        let mean = SegmentCurve {
            starts_s: first.starts_s.clone(),
            enhanced: avg(|c| &c.enhanced),
            unprocessed: avg(|c| &c.unprocessed),
        };
        Ok((mean, per))
    }

    fn write_eval(dir: &Path, mean: &SegmentCurve, per: &[SegmentCurve]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("mean.csv"), mean.to_csv())?;
        for (i, c) in per.iter().enumerate() {
            std::fs::write(dir.join(format!("utt{:03}.csv", i)), c.to_csv())?;
        }
        Ok(())
    }

    /// Runs `plan` from `model`. With `out_dir`, writes `stage0_init.ckpt`,
    /// one `stage{k}_{tag}.ckpt` per stage, `epochs.csv`, and an
    /// `eval_stage{k}_{tag}/` folder of segment-wise CSVs per stage (skipped
    /// when `eval_utterances` is zero).
    pub fn run_plan(
        &mut self,
        model: SpatialNet<f32>,
        plan: &StagePlan,
        out_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        plan.validate(&self.stft.config())?;
        self.check_model(&model)?;
        let mut model = model;
        let mut opt = Adam::new(model.params(), self.cfg.adam(model.config().variant));
        let mut history: Vec<StageMeta> = Vec::new();
        let save = |model: &SpatialNet<f32>, history: &[StageMeta], name: &str| -> Result<Option<PathBuf>> {
            let Some(dir) = out_dir else { return Ok(None) };
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            Checkpoint::new(model.clone(), history.to_vec()).save(&path)?;
            Ok(Some(path))
        };
        let init_checkpoint = save(&model, &history, "stage0_init.ckpt")?;
        log::info!(
            "training {} with plan {}, config {:?}",
            model.config().variant,
            plan,
            self.cfg
        );
        let fs = self.cfg.scene.sample_rate;
        let mut epochs = Vec::new();
        let mut stages = Vec::new();
        let mut epoch = 0usize;
        for (k, stage) in plan.stages.iter().enumerate() {
            if k == 0 && stage.kind == StageKind::LongFinetune {
                log::warn!("plan starts with a fine-tuning stage; it trains from the initial weights");
            }
            let len = stage.samples(fs);
            let start_fingerprint = model.fingerprint();
            let first_epoch = epoch;
            for _ in 0..stage.epochs {
                let lr = lr_schedule(self.cfg.lr, self.cfg.lr_decay, epoch);
                let mut order: Vec<u64> = (0..self.cfg.train_utterances as u64).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(epoch as u64 + 1);
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in order.chunks(self.cfg.batch_size) {
                    total += self.train_step(&mut model, &mut opt, batch, len, lr)? * batch.len() as f64;
                }
                let mean_loss = total / order.len() as f64;
                let valid_si_sdr = self.validate_model(&model, len)?;
                log::info!(
                    "epoch {} {} lr {:.3e} loss {:.3} valid SI-SDR {:.2} dB",
                    epoch,
                    stage,
                    lr,
                    mean_loss,
                    valid_si_sdr
                );
                epochs.push(EpochRecord {
                    epoch,
                    stage: stage.to_string(),
                    lr,
                    mean_loss,
                    valid_si_sdr,
                });
                epoch += 1;
            }
            history.push(StageMeta {
                stage: stage.to_string(),
                epochs: stage.epochs,
                signal_seconds: stage.seconds,
            });
            let tag = format!("stage{}_{}", k + 1, stage.kind.tag());
            let checkpoint = save(&model, &history, &format!("{}.ckpt", tag))?;
            let curve = if self.cfg.eval_utterances > 0 {
                let (mean, per) = self.evaluate_segments(&model)?;
                log::info!("{} mean SI-SDR improvement {:.2} dB", stage, mean.mean_improvement());
                if let Some(dir) = out_dir {
                    Self::write_eval(&dir.join(format!("eval_{}", tag)), &mean, &per)?;
                }
                Some(mean)
            } else {
                None
            };
            stages.push(StageReport {
                stage: *stage,
                first_epoch,
                start_fingerprint,
                end_fingerprint: model.fingerprint(),
                checkpoint,
                curve,
            });
        }
        let report = TrainReport {
            epochs,
            stages,
            init_checkpoint,
            model,
            history,
        };
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("epochs.csv"), report.epochs_csv())?;
        }
        Ok(report)
    }
}
