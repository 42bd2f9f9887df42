use std::path::{Path, PathBuf};
use std::time::Instant;

use ospatialnet::audio::{read_wav, write_wav};
use ospatialnet::enhance::{enhance_offline, enhance_streaming};
use ospatialnet::model::{Checkpoint, SpatialNet};
use ospatialnet::Error;

use crate::io::{must_exist, wav_files, Encoding};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input WAV file, or a folder of them.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output WAV file, or a folder when the input is a folder.
    #[arg(long)]
    out: PathBuf,
    /// Process hop by hop with streaming state instead of all at once.
    #[arg(long)]
    stream: bool,
    #[arg(long, value_enum, default_value = "float32")]
    encoding: Encoding,
}

fn one(model: &SpatialNet<f32>, src: &Path, dst: &Path, args: &Args) -> Result<(), Error> {
    let x = read_wav(src)?;
    let t0 = Instant::now();
    let y = if args.stream {
        enhance_streaming(model, &x)
    } else {
        enhance_offline(model, &x)
    }
    .map_err(|e| match e {
        Error::Contract(m) => Error::Contract(format!("{}: {}", src.display(), m)),
        e => e,
    })?;
    let secs = t0.elapsed().as_secs_f64();
    write_wav(dst, &y, args.encoding.into())?;
    log::info!(
        "{} -> {} ({:.2} s audio, {:.2} s compute, RTF {:.3})",
        src.display(),
        dst.display(),
        x.duration_s(),
        secs,
        secs / x.duration_s().max(1e-9)
    );
    Ok(())
}

pub fn run(args: Args) -> Result<(), Error> {
    must_exist(&args.model, "checkpoint")?;
    must_exist(&args.input, "input")?;
    let ckpt = Checkpoint::<f32>::load(&args.model)?;
    let model = ckpt.model;
    let cfg = model.config();
    log::info!(
        "model {} variant={} H={} L={} mics={} {} Hz mode={}",
        args.model.display(),
        cfg.variant,
        cfg.hidden,
        cfg.layers,
        cfg.mics,
        cfg.stft.sample_rate,
        if args.stream { "stream" } else { "offline" }
    );
    if args.input.is_dir() {
        std::fs::create_dir_all(&args.out)?;
        for src in wav_files(&args.input)? {
            let dst = args.out.join(src.file_name().unwrap());
            one(&model, &src, &dst, &args)?;
        }
        Ok(())
    } else {
        if args.out.is_dir() {
            return Err(Error::Config(format!(
                "--out {} is a folder but --in is a file",
                args.out.display()
            )));
        }
        if let Some(d) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d)?;
        }
        one(&model, &args.input, &args.out, &args)
    }
}
