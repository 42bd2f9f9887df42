//! File helpers shared by the subcommands.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use ospatialnet::audio::WavEncoding;
use ospatialnet::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Encoding {
    Pcm16,
    Float32,
}

impl From<Encoding> for WavEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Pcm16 => WavEncoding::Pcm16,
            Encoding::Float32 => WavEncoding::Float32,
        }
    }
}

/// Sorted `.wav` files directly inside `dir`.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

pub fn must_exist(p: &Path, what: &str) -> Result<(), Error> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} {} does not exist", what, p.display()),
        )))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads a TOML file whose keys override those of `base`; nested tables
/// merge key by key.
pub fn read_toml_over<T: serde::Serialize + serde::de::DeserializeOwned>(path: &Path, base: &T) -> Result<T, Error> {
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {}", path.display(), e));
    let text = std::fs::read_to_string(path)?;
    let over: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
    let mut table = toml::Table::try_from(base).map_err(|e| bad(&e))?;
    merge(&mut table, over);
    table.try_into().map_err(|e| bad(&e))
}

pub fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            std::fs::create_dir_all(d)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
