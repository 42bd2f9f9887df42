use std::path::PathBuf;

use clap::ValueEnum;
use ospatialnet::model::{Checkpoint, ModelConfig, SpatialNet, Variant};
use ospatialnet::train::{StagePlan, TrainConfig, Trainer};
use ospatialnet::Error;

use crate::io::{must_exist, read_toml_over, write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// H=16, L=2, two microphones.
    Toy,
    /// H=96, L=8, six microphones.
    Full,
}

impl Scale {
    pub fn model(self, variant: Variant) -> ModelConfig {
        match self {
            Scale::Toy => ModelConfig::toy(variant),
            Scale::Full => ModelConfig::new(variant),
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Scale::Toy => TrainConfig::toy(),
            Scale::Full => TrainConfig::default(),
        }
    }

    fn plan(self) -> &'static str {
        match self {
            Scale::Toy => "ST(4s,20e)+LF(16s,3e)",
            Scale::Full => "ST(4s,100e)+LF(32s,5e)",
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    variant: Variant,
    #[arg(long, value_enum, default_value = "toy")]
    scale: Scale,
    /// Stages such as `ST(4s,20e)+LF(16s,3e)`; defaults depend on --scale.
    #[arg(long)]
    plan: Option<String>,
    /// Training settings as TOML, overriding the --scale defaults key by key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model hyperparameters as JSON; replaces the --scale defaults.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training utterances per epoch.
    #[arg(long)]
    utterances: Option<usize>,
    /// Start from the weights of this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output folder for checkpoints and CSVs.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(p) => read_toml_over(p, &args.scale.train())?,
        None => args.scale.train(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = args.utterances {
        cfg.train_utterances = n;
    }
    cfg.validate()?;
    let plan: StagePlan = args.plan.as_deref().unwrap_or(args.scale.plan()).parse()?;
    let model = match (&args.init, &args.model_config) {
        (Some(p), _) => {
            must_exist(p, "checkpoint")?;
            let m = Checkpoint::<f32>::load(p)?.model;
            if m.config().variant != args.variant {
                return Err(Error::Config(format!(
                    "--init checkpoint is {}, --variant is {}",
                    m.config().variant,
                    args.variant
                )));
            }
            m
        }
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p)?;
            let mc: ModelConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?;
            if mc.variant != args.variant {
                return Err(Error::Config(format!(
                    "model config is {}, --variant is {}",
                    mc.variant, args.variant
                )));
            }
            SpatialNet::new(mc, cfg.seed)?
        }
        (None, None) => SpatialNet::new(args.scale.model(args.variant), cfg.seed)?,
    };
    plan.validate(&model.config().stft)?;
    std::fs::create_dir_all(&args.out)?;
    let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    write(&args.out.join("train_config.toml"), &resolved)?;
    write(&args.out.join("model_config.json"), &model.config().to_json())?;
    write(&args.out.join("plan.txt"), &format!("{}\n", plan))?;
    log::info!(
        "plan {}; model {}; {} parameters",
        plan,
        model.config().to_json(),
        model.num_params()
    );
    log::info!("train config:\n{}", resolved);
    let mut trainer = Trainer::new(cfg, model.config().stft)?;
    let report = trainer.run_plan(model, &plan, Some(&args.out))?;
    for s in &report.stages {
        let last = &report.epochs[s.first_epoch + s.stage.epochs - 1];
        println!(
            "{}: final loss {:.3}, valid SI-SDR {:.2} dB{}, checkpoint {}",
            s.stage,
            last.mean_loss,
            last.valid_si_sdr,
            s.curve.as_ref().map_or(String::new(), |c| format!(
                ", eval improvement {:.2} dB",
                c.mean_improvement()
            )),
            s.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string())
        );
    }
    Ok(())
}
