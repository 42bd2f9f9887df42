//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward function on perturbed inputs,
//! so it stays independent of every backward implementation it checks.

use super::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step `h`. The estimate is the Richardson
    /// combination `(4 D(h/2) - D(h)) / 3` of two central differences,
    /// which cancels the `h^2` term and allows a larger, less noisy step.
    pub step: f64,
    /// Maximum number of probed elements per input (evenly strided).
    pub max_probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            max_probes: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<Probe>,
    pub probes: usize,
}

/// Absolute denominator floor per unit of loss magnitude, well above the
/// ~1e-12 * |loss| rounding noise of the extrapolated difference.
const ABS_FLOOR: f64 = 1e-6;

/// Denominator floor relative to the largest gradient over all inputs, for
/// inputs whose true gradient vanishes (a key bias under softmax).
const GLOBAL_FLOOR: f64 = 1e-5;

/// Relative error with a denominator floored at 1e-3 of the tensor's largest
/// numeric gradient, so entries far below the tensor's scale are judged
/// against that scale rather than against their own rounding noise.
fn rel_err(a: f64, n: f64, scale: f64, floor: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-3 * scale).max(floor);
    (a - n).abs() / denom
}

impl GradCheck {
    /// Compares reverse-mode gradients of the scalar `f(inputs)` against
    /// central differences for every input.
    pub fn run(&self, inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>) -> Result<GradReport> {
        let g = Graph::<f64>::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&vars)?;
        if loss.value().numel() != 1 {
            return Err(contract("gradcheck function must return a scalar"));
        }
        let grads = g.backward(&loss)?;
        let floor = ABS_FLOOR * loss.value().item()?.abs().max(1.0);

        let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
            let g = Graph::<f64>::inference();
            let vs: Vec<Var<f64>> = ts.iter().map(|t| g.constant(t.clone())).collect();
            f(&vs)?.value().item()
        };

        let mut report = GradReport {
            max_rel_err: 0.0,
            worst: None,
            probes: 0,
        };
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut probed = Vec::with_capacity(inputs.len());
        for (ii, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let analytic = grads
                .get(&vars[ii])
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; n]);
            let stride = n.div_ceil(self.max_probes.max(1)).max(1);
            let idx: Vec<usize> = (0..n).step_by(stride).collect();
            let mut numeric = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = work[ii].data()[i];
                let mut central = |h: f64| -> Result<f64> {
                    work[ii].data_mut()[i] = orig + h;
                    let up = eval(&work)?;
                    work[ii].data_mut()[i] = orig - h;
                    let down = eval(&work)?;
                    work[ii].data_mut()[i] = orig;
                    Ok((up - down) / (2.0 * h))
                };
                let coarse = central(self.step)?;
                let fine = central(0.5 * self.step)?;
                numeric.push((4.0 * fine - coarse) / 3.0);
            }
            probed.push((analytic, idx, numeric));
        }
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let global = probed.iter().fold(0.0f64, |m, (_, _, num)| m.max(max_abs(num)));
        let floor = floor.max(GLOBAL_FLOOR * global);
        for (ii, (analytic, idx, numeric)) in probed.into_iter().enumerate() {
            let scale = max_abs(&numeric);
            for (&i, &num) in idx.iter().zip(&numeric) {
                let e = rel_err(analytic[i], num, scale, floor);
                report.probes += 1;
                if e > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(e);
                    report.worst = Some(Probe {
                        input: ii,
                        index: i,
                        analytic: analytic[i],
                        numeric: num,
                        rel_err: e,
                    });
                }
            }
        }
        Ok(report)
    }
}

/// Deterministic pseudo-random tensor with entries in `[lo, hi]`.
pub fn sample_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("sample shape")
}

/// Reduces `x` to a scalar with fixed pseudo-random weights, so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(x: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let w = sample_tensor(x.shape(), seed ^ 0x5eed, -1.0, 1.0);
    let wv = x.graph().constant(w);
    Ok(x.mul(&wv)?.sum())
}
