//! Stage plans such as `ST(4s,100e)+LF(32s,5e)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::stft::StftConfig;

/// ST trains on short signals, LF fine-tunes on long ones, LT trains on
/// long signals from scratch. All three run the same loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "ST")]
    Short,
    #[serde(rename = "LF")]
    LongFinetune,
    #[serde(rename = "LT")]
    Long,
}

impl StageKind {
    pub fn tag(self) -> &'static str {
        match self {
            StageKind::Short => "ST",
            StageKind::LongFinetune => "LF",
            StageKind::Long => "LT",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// Training signal length in seconds.
    pub seconds: f64,
    pub epochs: usize,
}

impl Stage {
    pub fn samples(&self, sample_rate: u32) -> usize {
        (self.seconds * sample_rate as f64).round() as usize
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}s,{}e)", self.kind.tag(), self.seconds, self.epochs)
    }
}

/// Ordered training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Rejects empty plans, zero epochs, and stages too short for one STFT
    /// frame.
    pub fn validate(&self, stft: &StftConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config("training plan has no stages"));
        }
        for s in &self.stages {
            if s.epochs == 0 {
                return Err(config(format!("stage {} has no epochs", s)));
            }
            if !(s.seconds > 0.0) || s.samples(stft.sample_rate) < stft.window {
                return Err(config(format!(
                    "stage {} is shorter than one STFT window ({} samples)",
                    s, stft.window
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

fn parse_stage(text: &str) -> Result<Stage> {
    let bad = || Error::Parse(format!("bad stage {:?}, expected e.g. ST(4s,20e)", text));
    let (tag, rest) = text.split_once('(').ok_or_else(bad)?;
    let body = rest.strip_suffix(')').ok_or_else(bad)?;
    let kind = match tag.trim().to_ascii_uppercase().as_str() {
        "ST" => StageKind::Short,
        "LF" => StageKind::LongFinetune,
        "LT" => StageKind::Long,
        _ => return Err(bad()),
    };
    let (secs, epochs) = body.split_once(',').ok_or_else(bad)?;
    let seconds: f64 = secs
        .trim()
        .strip_suffix('s')
        .ok_or_else(bad)?
        .parse()
        .map_err(|_| bad())?;
    let epochs: usize = epochs
        .trim()
        .strip_suffix('e')
        .ok_or_else(bad)?
        .parse()
        .map_err(|_| bad())?;
    Ok(Stage { kind, seconds, epochs })
}

impl FromStr for StagePlan {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(config("training plan has no stages"));
        }
        Ok(StagePlan {
            stages: s.split('+').map(|p| parse_stage(p.trim())).collect::<Result<_>>()?,
        })
    }
}
