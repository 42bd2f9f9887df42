use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ospatialnet::audio::read_wav;
use ospatialnet::metrics::{finite_db, segmental, Metric, SegmentalScore};
use ospatialnet::scene::Manifest;
use ospatialnet::Error;

use crate::io::{must_exist, wav_files, write};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Enhanced WAV file or folder.
    #[arg(long)]
    est: PathBuf,
    /// Reference WAV file or folder (matched by file name).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Unprocessed mixtures, for improvement over the input.
    #[arg(long)]
    mixture: Option<PathBuf>,
    /// Scene manifest; splits the summary into static and moving scenes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Folder for per-file and summary CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "si-sdr")]
    metric: Metric,
    /// Segment window in seconds.
    #[arg(long, default_value_t = 4.0)]
    window: f64,
    /// Segment hop in seconds.
    #[arg(long, default_value_t = 1.0)]
    hop: f64,
}

struct Row {
    name: String,
    moving: Option<bool>,
    enhanced: f64,
    unprocessed: Option<f64>,
    segments: Option<(SegmentalScore, Option<SegmentalScore>)>,
}

/// First channel of a WAV file.
fn mono(path: &Path) -> Result<(u32, Vec<f32>), Error> {
    let a = read_wav(path)?;
    Ok((a.sample_rate, a.channel(0).to_vec()))
}

/// Scene index from a name such as `scene_00012.wav`.
fn scene_index(name: &str) -> Option<u64> {
    let stem = name.strip_suffix(".wav").unwrap_or(name);
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn pairs(args: &Args) -> Result<Vec<(String, PathBuf, PathBuf, Option<PathBuf>)>, Error> {
    let file = |dir: &Path, name: &str, what: &str| -> Result<PathBuf, Error> {
        let p = dir.join(name);
        must_exist(&p, what)?;
        Ok(p)
    };
    if args.est.is_dir() {
        if !args.reference.is_dir() {
            return Err(Error::Config("--est is a folder, so --ref must be one too".into()));
        }
        wav_files(&args.est)?
            .into_iter()
            .map(|e| {
                let name = e.file_name().unwrap().to_string_lossy().into_owned();
                let r = file(&args.reference, &name, "reference")?;
                let m = args.mixture.as_ref().map(|d| file(d, &name, "mixture")).transpose()?;
                Ok((name, e, r, m))
            })
            .collect()
    } else {
        let name = args
            .est
            .file_name()
            .map_or("est".into(), |n| n.to_string_lossy().into_owned());
        Ok(vec![(
            name,
            args.est.clone(),
            args.reference.clone(),
            args.mixture.clone(),
        )])
    }
}

fn mean(v: impl Iterator<Item = f64>) -> (usize, f64) {
    let (mut n, mut s) = (0, 0.0);
    for x in v {
        n += 1;
        s += finite_db(x);
    }
    (n, if n == 0 { f64::NAN } else { s / n as f64 })
}

pub fn run(args: Args) -> Result<(), Error> {
    must_exist(&args.est, "estimate")?;
    must_exist(&args.reference, "reference")?;
    if let Some(m) = &args.mixture {
        must_exist(m, "mixture")?;
    }
    let moving: Option<HashMap<u64, bool>> = match &args.manifest {
        Some(p) => {
            must_exist(p, "manifest")?;
            let m = Manifest::from_json(&std::fs::read_to_string(p)?)?;
            Some(m.scenes.iter().map(|s| (s.index, s.moving)).collect())
        }
        None => None,
    };
    let metric = args.metric;
    let mut rows = Vec::new();
    for (name, e, r, m) in pairs(&args)? {
        let (fs, est) = mono(&e)?;
        let (fr, reference) = mono(&r)?;
        if fs != fr {
            return Err(Error::Contract(format!(
                "{}: estimate is {} Hz, reference {} Hz",
                name, fs, fr
            )));
        }
        if est.len() != reference.len() {
            return Err(Error::Contract(format!(
                "{}: estimate has {} samples, reference {}",
                name,
                est.len(),
                reference.len()
            )));
        }
        let mix = m.as_deref().map(mono).transpose()?.map(|(_, x)| x);
        if mix.as_ref().is_some_and(|x| x.len() != reference.len()) {
            return Err(Error::Contract(format!(
                "{}: mixture and reference lengths differ",
                name
            )));
        }
        let is_moving = match &moving {
            None => None,
            Some(map) => {
                let idx = scene_index(&name)
                    .ok_or_else(|| Error::Config(format!("{}: no scene index in the file name", name)))?;
                Some(
                    *map.get(&idx)
                        .ok_or_else(|| Error::Config(format!("scene {} is not in the manifest", idx)))?,
                )
            }
        };
        let segments = match segmental(metric, &est, &reference, fs, args.window, args.hop) {
            Ok(s) => Some((
                s,
                mix.as_ref()
                    .map(|x| segmental(metric, x, &reference, fs, args.window, args.hop))
                    .transpose()?,
            )),
            Err(Error::Length { .. }) => {
                log::warn!(
                    "{}: shorter than one {} s segment, whole-signal score only",
                    name,
                    args.window
                );
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(Row {
            enhanced: metric.eval(&est, &reference)?,
            unprocessed: mix.as_ref().map(|x| metric.eval(x, &reference)).transpose()?,
            name,
            moving: is_moving,
            segments,
        });
    }

    let with_mix = rows.iter().all(|r| r.unprocessed.is_some());
    let mut summary = format!(
        "group,count,enhanced_db{}\n",
        if with_mix { ",unprocessed_db,improvement_db" } else { "" }
    );
    println!(
        "{:<8} {:>5} {:>13}{}",
        "group",
        "count",
        format!("{} dB", metric.name()),
        if with_mix { "   unprocessed  improvement" } else { "" }
    );
    let groups: Vec<(&str, Option<bool>)> = if moving.is_some() {
        vec![("static", Some(false)), ("moving", Some(true)), ("all", None)]
    } else {
        vec![("all", None)]
    };
    for (label, want) in groups {
        let sel: Vec<&Row> = rows.iter().filter(|r| want.is_none() || r.moving == want).collect();
        let (n, enh) = mean(sel.iter().map(|r| r.enhanced));
        write!(summary, "{},{},{:.6}", label, n, enh).unwrap();
        print!("{:<8} {:>5} {:>13.2}", label, n, enh);
        if with_mix {
            let (_, unp) = mean(sel.iter().map(|r| r.unprocessed.unwrap()));
            write!(summary, ",{:.6},{:.6}", unp, enh - unp).unwrap();
            print!(" {:>13.2} {:>12.2}", unp, enh - unp);
        }
        summary.push('\n');
        println!();
    }

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let mut per = String::from("file,moving,enhanced_db,unprocessed_db\n");
        for r in &rows {
            writeln!(
                per,
                "{},{},{:.6},{}",
                r.name,
                r.moving.map_or(String::new(), |m| m.to_string()),
                finite_db(r.enhanced),
                r.unprocessed.map_or(String::new(), |u| format!("{:.6}", finite_db(u)))
            )
            .unwrap();
            if let Some((enh, unp)) = &r.segments {
                let stem = r.name.strip_suffix(".wav").unwrap_or(&r.name);
                let text = match unp {
                    None => enh.to_csv(),
                    Some(u) => curve_csv(enh, u),
                };
                write(&out.join("segments").join(format!("{}.csv", stem)), &text)?;
            }
        }
        write(&out.join("files.csv"), &per)?;
        write(&out.join("summary.csv"), &summary)?;
        let enh: Vec<SegmentalScore> = rows
            .iter()
            .filter_map(|r| r.segments.as_ref().map(|s| s.0.clone()))
            .collect();
        if !enh.is_empty() && enh.len() == rows.len() {
            match SegmentalScore::average(&enh) {
                Ok(avg) => {
                    let text = if with_mix {
                        let unp: Vec<SegmentalScore> =
                            rows.iter().filter_map(|r| r.segments.as_ref()?.1.clone()).collect();
                        curve_csv(&avg, &SegmentalScore::average(&unp)?)
                    } else {
                        avg.to_csv()
                    };
                    write(&out.join("segments_mean.csv"), &text)?;
                }
                Err(_) => log::warn!("signals differ in length, no mean segment curve"),
            }
        }
        log::info!("wrote {} file scores to {}", rows.len(), out.display());
    }
    Ok(())
}

fn curve_csv(enh: &SegmentalScore, unp: &SegmentalScore) -> String {
    let mut s = String::from("segment_start_s,enhanced_db,unprocessed_db,improvement_db\n");
    for i in 0..enh.len() {
        let (e, u) = (finite_db(enh.scores[i]), finite_db(unp.scores[i]));
        writeln!(s, "{},{:.6},{:.6},{:.6}", enh.starts_s[i], e, u, e - u).unwrap();
    }
    s
}
