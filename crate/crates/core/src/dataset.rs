//! Line-oriented sequence files.
//!
//! ```text
//! sequence <seed> <config digest> <max_range> <fov> <frame count>
//! frame <timestamp> <point count> <box count>
//! p <range> <azimuth> <doppler> <amplitude>
//! b <cx> <cy> <width> <length> <yaw> <class id> <vx> <vy>
//! ```
//!
//! A file holds zero or more sequences. Floats are written with 17
//! significant digits, which round-trips every `f64` exactly. A dataset
//! directory holds one file per sequence plus `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::{render_scene, GtBox, ObjectClass, PointCloudFrame, RadarPoint, Scene};

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "radar-dataset v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub seed: u64,
    pub digest: String,
    pub max_range: f64,
    pub fov: f64,
    pub frames: Vec<PointCloudFrame>,
}

impl Sequence {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Ok(Sequence {
            seed: scene.seed,
            digest: scene.config.digest(),
            max_range: scene.config.max_range,
            fov: scene.config.fov,
            frames: render_scene(scene)?,
        })
    }
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_sequence(seq: &Sequence) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "sequence {} {} {} {} {}",
        seq.seed,
        seq.digest,
        f(seq.max_range),
        f(seq.fov),
        seq.frames.len()
    )
    .unwrap();
    for fr in &seq.frames {
        writeln!(s, "frame {} {} {}", f(fr.timestamp), fr.points.len(), fr.gt_boxes.len()).unwrap();
        for p in &fr.points {
            writeln!(s, "p {} {} {} {}", f(p.range), f(p.azimuth), f(p.doppler), f(p.amplitude)).unwrap();
        }
        for b in &fr.gt_boxes {
            writeln!(
                s,
                "b {} {} {} {} {} {} {} {}",
                f(b.center[0]),
                f(b.center[1]),
                f(b.width),
                f(b.length),
                f(b.yaw),
                b.class.id(),
                f(b.velocity[0]),
                f(b.velocity[1])
            )
            .unwrap();
        }
    }
    s
}

pub fn write_sequence(path: &Path, seq: &Sequence) -> Result<()> {
    fs::write(path, format_sequence(seq)).map_err(|e| Error::io(path, e))
}

/// Renders every scene and writes `seq_NNNNN.txt` files plus a manifest
/// into `dir` (created if needed). Returns the sequence file paths.
pub fn write_dataset(scenes: &[Scene], dir: &Path, digest: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_MAGIC}\ndigest {digest}\nsequences {}\n", scenes.len());
    let mut paths = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("seq_{i:05}.txt");
        let path = dir.join(&name);
        write_sequence(&path, &Sequence::from_scene(scene)?)?;
        manifest.push_str(&name);
        manifest.push('\n');
        paths.push(path);
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(paths)
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, want: &str) -> Result<(usize, Vec<&'a str>)> {
        match self.iter.next() {
            Some((i, line)) => {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.first() != Some(&want) {
                    return Err(Error::parse(self.path, i + 1, format!("expected `{want}` record, got `{line}`")));
                }
                Ok((i + 1, toks))
            }
            None => Err(Error::parse(self.path, 0, format!("unexpected end of file, expected `{want}` record"))),
        }
    }
}

fn num<T: std::str::FromStr>(path: &Path, rec: usize, toks: &[&str], i: usize) -> Result<T> {
    toks.get(i)
        .ok_or_else(|| Error::parse(path, rec, format!("missing field {i}")))?
        .parse()
        .map_err(|_| Error::parse(path, rec, format!("bad number `{}`", toks[i])))
}

fn finite(path: &Path, rec: usize, toks: &[&str], i: usize) -> Result<f64> {
    let v: f64 = num(path, rec, toks, i)?;
    if !v.is_finite() {
        return Err(Error::parse(path, rec, format!("non-finite value `{}`", toks[i])));
    }
    Ok(v)
}

fn arity(path: &Path, rec: usize, toks: &[&str], n: usize) -> Result<()> {
    if toks.len() != n {
        return Err(Error::parse(path, rec, format!("expected {} fields, got {}", n - 1, toks.len() - 1)));
    }
    Ok(())
}

/// Parses every sequence in `text`; `path` is used for error reports only.
pub fn parse_sequences(path: &Path, text: &str) -> Result<Vec<Sequence>> {
    let mut lines = Lines {
        path,
        iter: text.lines().enumerate().peekable(),
    };
    let mut out = Vec::new();
    while let Some((_, l)) = lines.iter.peek() {
        if l.trim().is_empty() {
            lines.iter.next();
            continue;
        }
        let (rec, h) = lines.next("sequence")?;
        arity(path, rec, &h, 6)?;
        let seed: u64 = num(path, rec, &h, 1)?;
        let digest = h[2].to_string();
        let max_range = finite(path, rec, &h, 3)?;
        let fov = finite(path, rec, &h, 4)?;
        let count: usize = num(path, rec, &h, 5)?;
        let half = fov / 2.0;
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let (rec, fh) = lines.next("frame")?;
            arity(path, rec, &fh, 4)?;
            let timestamp = finite(path, rec, &fh, 1)?;
            let np: usize = num(path, rec, &fh, 2)?;
            let nb: usize = num(path, rec, &fh, 3)?;
            let mut points = Vec::with_capacity(np);
            for _ in 0..np {
                let (rec, t) = lines.next("p")?;
                arity(path, rec, &t, 5)?;
                let p = RadarPoint {
                    range: finite(path, rec, &t, 1)?,
                    azimuth: finite(path, rec, &t, 2)?,
                    doppler: finite(path, rec, &t, 3)?,
                    amplitude: finite(path, rec, &t, 4)?,
                };
                if !(0.0..=max_range).contains(&p.range) {
                    return Err(Error::parse(
                        path,
                        rec,
                        format!("point range {} outside [0, {max_range}]", p.range),
                    ));
                }
                if p.azimuth.abs() > half {
                    return Err(Error::parse(path, rec, format!("point azimuth {} outside the field of view", p.azimuth)));
                }
                if !(p.amplitude > 0.0) {
                    return Err(Error::parse(path, rec, format!("non-positive amplitude {}", p.amplitude)));
                }
                points.push(p);
            }
            let mut gt_boxes = Vec::with_capacity(nb);
            for _ in 0..nb {
                let (rec, t) = lines.next("b")?;
                arity(path, rec, &t, 9)?;
                let class_id: usize = num(path, rec, &t, 6)?;
                let class = ObjectClass::from_id(class_id)
                    .ok_or_else(|| Error::parse(path, rec, format!("unknown class id {class_id}")))?;
                let b = GtBox {
                    center: [finite(path, rec, &t, 1)?, finite(path, rec, &t, 2)?],
                    width: finite(path, rec, &t, 3)?,
                    length: finite(path, rec, &t, 4)?,
                    yaw: finite(path, rec, &t, 5)?,
                    class,
                    velocity: [finite(path, rec, &t, 7)?, finite(path, rec, &t, 8)?],
                };
                if !(b.width > 0.0 && b.length > 0.0) {
                    return Err(Error::parse(path, rec, "box size must be positive"));
                }
                gt_boxes.push(b);
            }
            frames.push(PointCloudFrame {
                timestamp,
                points,
                gt_boxes,
            });
        }
        out.push(Sequence {
            seed,
            digest,
            max_range,
            fov,
            frames,
        });
    }
    Ok(out)
}

pub fn read_sequence_file(path: &Path) -> Result<Vec<Sequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequences(path, &text)
}

/// Sequence file names listed by a dataset manifest.
pub fn read_manifest(dir: &Path) -> Result<(String, Vec<String>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(Error::parse(&path, 1, "bad manifest header"));
    }
    let digest = lines
        .next()
        .and_then(|l| l.strip_prefix("digest "))
        .ok_or_else(|| Error::parse(&path, 2, "missing digest"))?
        .to_string();
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("sequences "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(&path, 3, "missing sequence count"))?;
    let files: Vec<String> = lines.filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    if files.len() != count {
        return Err(Error::parse(
            &path,
            3,
            format!("manifest lists {} files but declares {count}", files.len()),
        ));
    }
    Ok((digest, files))
}

/// Reads a dataset directory (via its manifest) or a single sequence file.
pub fn read_dataset(path: &Path) -> Result<Vec<Sequence>> {
    if path.is_dir() {
        let (_, files) = read_manifest(path)?;
        let mut out = Vec::with_capacity(files.len());
        for name in files {
            out.extend(read_sequence_file(&path.join(name))?);
        }
        Ok(out)
    } else {
        read_sequence_file(path)
    }
}
