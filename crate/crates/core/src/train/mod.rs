//! Loss, optimizers, learning-rate schedule, gradient clipping and the
//! staged training loop.

pub mod plan;
pub mod run;

use crate::autodiff::Var;
use crate::error::{contract, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{cast, Float, Tensor};

pub use plan::{Stage, StageKind, StagePlan};
pub use run::{EpochRecord, StageReport, TrainConfig, TrainReport, Trainer};

/// Lowest loss value; a perfect estimate would otherwise reach -inf.
pub const LOSS_FLOOR: f64 = -300.0;

/// Mean over the batch of `-SNR(est, target)` in dB, floored at
/// [`LOSS_FLOOR`]. Both inputs are `[B, N]` waveforms.
pub fn neg_snr_loss<T: Float>(est: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    let sh = est.shape().to_vec();
    if sh.len() != 2 || target.shape() != sh.as_slice() {
        return Err(contract(format!(
            "loss expects two equal [B, N] waveforms, got {:?} and {:?}",
            sh,
            target.shape()
        )));
    }
    let (b, n) = (sh[0], sh[1]);
    let (e, t) = (est.data(), target.data());
    let mut loss = 0.0;
    // per row: residual energy, reference energy, and whether the floor is active
    let mut rows = Vec::with_capacity(b);
    for r in 0..b {
        let (er, tr) = (&e[r * n..(r + 1) * n], &t[r * n..(r + 1) * n]);
        let (mut res, mut refe) = (0.0f64, 0.0f64);
        for (&y, &x) in er.iter().zip(tr) {
            let (y, x) = (y.to_f64().unwrap(), x.to_f64().unwrap());
            res += (x - y) * (x - y);
            refe += x * x;
        }
        if refe == 0.0 {
            return Err(contract(format!("target waveform {} is all zeros", r)));
        }
        let l = if res == 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * (res / refe).log10()
        };
        let floored = l <= LOSS_FLOOR;
        loss += if floored { LOSS_FLOOR } else { l };
        rows.push((res, refe, floored));
    }
    let value = Tensor::scalar(cast(loss / b as f64));
    let (ei, ti) = (est.id(), target.id());
    let (ev, tv) = (est.value_arc(), target.value_arc());
    Ok(Var::custom(&[est, target], value, move |g, s| {
        let k = g[0].to_f64().unwrap() * 10.0 / std::f64::consts::LN_10 / b as f64;
        let (e, t) = (ev.data(), tv.data());
        if let Some(ge) = s.slot(ei) {
            for (r, &(res, _, floored)) in rows.iter().enumerate() {
                if floored {
                    continue;
                }
                for i in r * n..(r + 1) * n {
                    let d = t[i].to_f64().unwrap() - e[i].to_f64().unwrap();
                    ge[i] += cast(-2.0 * k * d / res);
                }
            }
        }
        if let Some(gt) = s.slot(ti) {
            for (r, &(res, refe, floored)) in rows.iter().enumerate() {
                if floored {
                    continue;
                }
                for i in r * n..(r + 1) * n {
                    let x = t[i].to_f64().unwrap();
                    let d = x - e[i].to_f64().unwrap();
                    gt[i] += cast(k * (2.0 * d / res - 2.0 * x / refe));
                }
            }
        }
    }))
}

/// `lr0 * decay^epoch`; epochs count from zero across all stages.
pub fn lr_at(epoch: usize) -> f64 {
    lr_schedule(0.001, 0.99, epoch)
}

pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Result of [`clip_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clip {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient (1 when below the threshold).
    pub scale: f64,
}

/// Rescales all gradients together when their global L2 norm exceeds
/// `threshold`. `grads[i]` belongs to parameter `i` of `params`.
pub fn clip_gradients<T: Float>(params: &ParamStore<T>, grads: &mut [Tensor<T>], threshold: f64) -> Result<Clip> {
    if grads.len() != params.len() {
        return Err(contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut sq = 0.0f64;
    for (id, g) in params.ids().zip(grads.iter()) {
        let mut s = 0.0f64;
        for &v in g.data() {
            let v = v.to_f64().unwrap();
            s += v * v;
        }
        if !s.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {}",
                params.name(id)
            )));
        }
        sq += s;
    }
    let norm = sq.sqrt();
    let scale = if norm > threshold { threshold / norm } else { 1.0 };
    if scale != 1.0 {
        let c: T = cast(scale);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    Ok(Clip { norm, scale })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW) when non-zero.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..Self::default()
        }
    }
}

/// Adam with optional decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new<T: Float>(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`.
    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(contract("optimizer state does not match the parameter set"));
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let p = params.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(contract("gradient and parameter sizes differ"));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].to_f64().unwrap();
                let mut pi = p[i].to_f64().unwrap();
                if weight_decay != 0.0 {
                    pi *= 1.0 - lr * weight_decay;
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pi -= lr * mhat / (vhat.sqrt() + eps);
                p[i] = cast(pi);
            }
        }
        Ok(())
    }
}
