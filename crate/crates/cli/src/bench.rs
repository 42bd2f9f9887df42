use std::fmt::Write as _;
use std::path::PathBuf;

use ospatialnet::enhance::time_steps;
use ospatialnet::model::{Checkpoint, SpatialNet, Variant};
use ospatialnet::Error;
use serde_json::json;

use crate::io::{must_exist, write};
use crate::train::Scale;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Checkpoint to benchmark; otherwise a fresh model of --variant.
    #[arg(long, conflicts_with = "variant")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    variant: Option<Variant>,
    #[arg(long, value_enum, default_value = "full")]
    scale: Scale,
    /// Stream length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Stream positions (seconds) at which latency is reported.
    #[arg(long, value_delimiter = ',', default_value = "8,32,60")]
    at: Vec<f64>,
    /// Steps per latency window, ending at each position.
    #[arg(long, default_value_t = 50)]
    window: usize,
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn run(args: Args, seed: u64) -> Result<(), Error> {
    let model = match (&args.model, args.variant) {
        (Some(p), _) => {
            must_exist(p, "checkpoint")?;
            Checkpoint::<f32>::load(p)?.model
        }
        (None, Some(v)) => SpatialNet::new(args.scale.model(v), seed)?,
        (None, None) => return Err(Error::Config("need --model or --variant".into())),
    };
    let cfg = model.config().clone();
    let fps = cfg.stft.frames_per_second();
    if !(args.duration > 0.0) || args.window == 0 {
        return Err(Error::Config("--duration and --window must be positive".into()));
    }
    if let Some(&bad) = args.at.iter().find(|&&a| !(a > 0.0) || a > args.duration) {
        return Err(Error::Config(format!(
            "position {} s is outside the {} s stream",
            bad, args.duration
        )));
    }
    let frames = (args.duration * fps).ceil() as usize;
    log::info!(
        "benchmarking {} H={} L={} for {} frames",
        cfg.variant,
        cfg.hidden,
        cfg.layers,
        frames
    );
    let t = time_steps(&model, frames, seed)?;
    let hop_ms = 1e3 / fps;
    let flops = cfg.flops_per_second();
    let mean_s = t.seconds.iter().sum::<f64>() / t.seconds.len() as f64;
    let mut text = String::new();
    writeln!(
        text,
        "variant {} ({} parameters), hop {:.1} ms",
        cfg.variant,
        model.num_params(),
        hop_ms
    )
    .unwrap();
    writeln!(
        text,
        "{:>8} {:>9} {:>9} {:>9} {:>9}",
        "at_s", "p50_ms", "p90_ms", "p99_ms", "rtf"
    )
    .unwrap();
    let mut at = Vec::new();
    for &a in &args.at {
        let end = ((a * fps).round() as usize).clamp(1, frames);
        let [p50, p90, p99] = [50.0, 90.0, 99.0].map(|p| t.percentile(end, args.window, p) * 1e3);
        writeln!(
            text,
            "{:>8.1} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            a,
            p50,
            p90,
            p99,
            p50 / hop_ms
        )
        .unwrap();
        at.push(json!({"at_s": a, "p50_ms": p50, "p90_ms": p90, "p99_ms": p99}));
    }
    writeln!(
        text,
        "state memory {} bytes (start {}), constant: {}",
        t.state_bytes_end,
        t.state_bytes_start,
        t.state_bytes_end == t.state_bytes_start
    )
    .unwrap();
    writeln!(
        text,
        "analytic {:.2} GFLOP/s of audio, measured {:.2} GFLOP/s compute",
        flops / 1e9,
        2.0 * cfg.macs_per_frame() / mean_s / 1e9
    )
    .unwrap();
    print!("{}", text);
    if let Some(p) = &args.json {
        let doc = json!({
            "variant": cfg.variant.name(),
            "hidden": cfg.hidden,
            "layers": cfg.layers,
            "params": model.num_params(),
            "frames": frames,
            "hop_ms": hop_ms,
            "latency": at,
            "mean_step_ms": mean_s * 1e3,
            "state_bytes_start": t.state_bytes_start,
            "state_bytes_end": t.state_bytes_end,
            "analytic_flops_per_s": flops,
        });
        write(p, &serde_json::to_string_pretty(&doc).unwrap())?;
    }
    Ok(())
}
