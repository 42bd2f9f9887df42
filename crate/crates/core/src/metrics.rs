//! SNR, SI-SDR and segment-wise scoring.
//!
//! A perfect estimate scores `f64::INFINITY`. CSV export and segment means
//! replace it with [`SENTINEL_DB`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Float;

/// Stand-in for an infinite score in CSV files and averages.
pub const SENTINEL_DB: f64 = 300.0;

pub fn finite_db(x: f64) -> f64 {
    x.min(SENTINEL_DB)
}

fn check<T: Float>(est: &[T], reference: &[T]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(contract(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    if reference.iter().all(|v| v.is_zero()) {
        return Err(contract("reference signal is all zeros"));
    }
    Ok(())
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

/// `10 log10(|ref|^2 / |ref - est|^2)`.
pub fn snr<T: Float>(est: &[T], reference: &[T]) -> Result<f64> {
    check(est, reference)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let (e, r) = (e.to_f64().unwrap(), r.to_f64().unwrap());
        num += r * r;
        den += (r - e) * (r - e);
    }
    Ok(ratio_db(num, den))
}

/// Scale-invariant SDR: projects `est` onto `reference` first.
pub fn si_sdr<T: Float>(est: &[T], reference: &[T]) -> Result<f64> {
    check(est, reference)?;
    let (mut dot, mut rr) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let (e, r) = (e.to_f64().unwrap(), r.to_f64().unwrap());
        dot += e * r;
        rr += r * r;
    }
    let alpha = dot / rr;
    let (mut num, mut den) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let t = alpha * r.to_f64().unwrap();
        let d = t - e.to_f64().unwrap();
        num += t * t;
        den += d * d;
    }
    Ok(ratio_db(num, den))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SiSdr,
    Snr,
}

impl Metric {
    pub fn eval<T: Float>(self, est: &[T], reference: &[T]) -> Result<f64> {
        match self {
            Metric::SiSdr => si_sdr(est, reference),
            Metric::Snr => snr(est, reference),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::SiSdr => "si-sdr",
            Metric::Snr => "snr",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si-sdr" | "sisdr" | "si_sdr" => Ok(Metric::SiSdr),
            "snr" => Ok(Metric::Snr),
            _ => Err(Error::Parse(format!("unknown metric {:?} (si-sdr, snr)", s))),
        }
    }
}

/// Scores of consecutive windows of one signal pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentalScore {
    pub metric: Metric,
    pub window_s: f64,
    pub hop_s: f64,
    pub starts_s: Vec<f64>,
    pub scores: Vec<f64>,
}

impl SegmentalScore {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Mean with infinite scores replaced by [`SENTINEL_DB`].
    pub fn mean(&self) -> f64 {
        self.scores.iter().map(|&s| finite_db(s)).sum::<f64>() / self.scores.len() as f64
    }

    /// `segment_start_s,score_db` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("segment_start_s,score_db\n");
        for (t, v) in self.starts_s.iter().zip(&self.scores) {
            writeln!(s, "{},{:.6}", t, finite_db(*v)).unwrap();
        }
        s
    }

    /// Per-segment mean over several signals of equal length.
    pub fn average(scores: &[SegmentalScore]) -> Result<SegmentalScore> {
        let first = scores.first().ok_or_else(|| contract("no scores to average"))?;
        if scores
            .iter()
            .any(|s| s.starts_s != first.starts_s || s.metric != first.metric)
        {
            return Err(contract("segment grids differ"));
        }
        let n = scores.len() as f64;
        Ok(SegmentalScore {
            scores: (0..first.len())
                .map(|i| scores.iter().map(|s| finite_db(s.scores[i])).sum::<f64>() / n)
                .collect(),
            ..first.clone()
        })
    }
}

/// Applies `metric` to windows of `window_s` seconds every `hop_s`
/// seconds; `floor((n - window) / hop) + 1` segments.
pub fn segmental<T: Float>(
    metric: Metric,
    est: &[T],
    reference: &[T],
    sample_rate: u32,
    window_s: f64,
    hop_s: f64,
) -> Result<SegmentalScore> {
    if est.len() != reference.len() {
        return Err(contract(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let fs = sample_rate as f64;
    let win = (window_s * fs).round() as usize;
    let hop = (hop_s * fs).round() as usize;
    if win == 0 || hop == 0 {
        return Err(contract("segment window and hop must be at least one sample"));
    }
    if est.len() < win {
        return Err(Error::Length {
            needed: win,
            got: est.len(),
        });
    }
    let count = (est.len() - win) / hop + 1;
    let mut starts_s = Vec::with_capacity(count);
    let mut scores = Vec::with_capacity(count);
    for k in 0..count {
        let s = k * hop;
        starts_s.push(s as f64 / fs);
        scores.push(metric.eval(&est[s..s + win], &reference[s..s + win])?);
    }
    Ok(SegmentalScore {
        metric,
        window_s,
        hop_s,
        starts_s,
        scores,
    })
}
