use std::path::PathBuf;

use ospatialnet::audio::write_wav;
use ospatialnet::scene::dataset::{SceneConfig, SceneGenerator};
use ospatialnet::Error;
use rayon::prelude::*;

use crate::io::{read_toml_over, write, Encoding};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Output folder; receives manifest.json, mixture/ and target/.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    count: u64,
    /// Scene settings as TOML, overriding the defaults key by key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Two-microphone toy scenes.
    #[arg(long)]
    toy: bool,
    /// Scene length in seconds (overrides the config).
    #[arg(long)]
    duration: Option<f64>,
    /// Index of the first scene.
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long, value_enum, default_value = "float32")]
    encoding: Encoding,
}

pub fn scene_name(index: u64) -> String {
    format!("scene_{:05}.wav", index)
}

pub fn run(args: Args, seed: u64) -> Result<(), Error> {
    let base = if args.toy {
        SceneConfig::toy()
    } else {
        SceneConfig::default()
    };
    let mut cfg = match &args.config {
        Some(p) => read_toml_over(p, &base)?,
        None => base,
    };
    if let Some(d) = args.duration {
        cfg.duration_s = d;
    }
    cfg.validate()?;
    log::info!("scene config: {}", serde_json::to_string(&cfg).unwrap());
    let gen = SceneGenerator::new(cfg, seed)?;
    let mut manifest = gen.manifest(0)?;
    manifest.scenes = (args.start..args.start + args.count)
        .map(|i| gen.spec(i))
        .collect::<Result<_, _>>()?;
    let (mix_dir, tgt_dir) = (args.out.join("mixture"), args.out.join("target"));
    std::fs::create_dir_all(&mix_dir)?;
    std::fs::create_dir_all(&tgt_dir)?;
    manifest.scenes.par_iter().try_for_each(|spec| -> Result<(), Error> {
        let scene = gen.render(spec)?;
        let name = scene_name(spec.index);
        write_wav(mix_dir.join(&name), &scene.mixture, args.encoding.into())?;
        write_wav(tgt_dir.join(&name), &scene.target, args.encoding.into())?;
        log::debug!(
            "{} moving={} snr={:.1} dB rt60={:.2} s",
            name,
            spec.moving,
            spec.snr_db,
            spec.room.rt60
        );
        Ok(())
    })?;
    write(&args.out.join("manifest.json"), &manifest.to_json())?;
    let moving = manifest.scenes.iter().filter(|s| s.moving).count();
    log::info!(
        "wrote {} scenes ({} moving, {} static) to {}",
        manifest.scenes.len(),
        moving,
        manifest.scenes.len() - moving,
        args.out.display()
    );
    Ok(())
}
