//! File formats: ASCII PLY clouds, 16-bit PGM masks, fixed-precision JSON
//! and scene bundle directories.

use nalgebra::Point3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geom::{BrickClass, InstanceMask};
use crate::synth::{GtBox, GtPose, RenderedScene, SceneSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
        move |source| IoError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, msg: impl Into<String>) -> IoError {
        IoError::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}

/// Significant digits kept for floats in JSON output.
pub const JSON_DIGITS: usize = 9;

fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", JSON_DIGITS - 1, x).parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig(n.as_f64().unwrap_or(0.0));
            if let Some(m) = serde_json::Number::from_f64(r) {
                *n = m;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with floats rounded to [`JSON_DIGITS`] significant digits and
/// a trailing newline, so equal inputs give byte-identical text.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let s = to_json_string(value).map_err(|e| IoError::format(path, e.to_string()))?;
    fs::write(path, s).map_err(IoError::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(IoError::io(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::format(path, e.to_string()))
}

/// Writes an ASCII PLY with float `x y z` and, for registered clouds,
/// ushort `u v`.
pub fn write_ply_to(mut w: impl Write, cloud: &PointCloud) -> std::io::Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if cloud.is_registered() {
        writeln!(w, "property ushort u\nproperty ushort v")?;
    }
    writeln!(w, "end_header")?;
    let pixels = cloud.pixels();
    for (i, p) in cloud.points().iter().enumerate() {
        write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
        if let Some(px) = pixels {
            write!(w, " {} {}", px[i][0], px[i][1])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(IoError::io(path))?;
    let mut w = BufWriter::new(f);
    write_ply_to(&mut w, cloud).and_then(|_| w.flush()).map_err(IoError::io(path))
}

/// Reads an ASCII PLY vertex element. `x y z` are required; `u v` are used
/// for pixel registration when present. Other properties are ignored.
pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let f = fs::File::open(path).map_err(IoError::io(path))?;
    read_ply_from(BufReader::new(f)).map_err(|msg| match msg {
        PlyError::Io(e) => IoError::Io { path: path.to_path_buf(), source: e },
        PlyError::Format(m) => IoError::format(path, m),
    })
}

#[derive(Debug)]
pub enum PlyError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for PlyError {
    fn from(e: std::io::Error) -> Self {
        PlyError::Io(e)
    }
}

pub fn read_ply_from(r: impl BufRead) -> Result<PointCloud, PlyError> {
    let fmt = |m: &str| PlyError::Format(m.to_string());
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>, PlyError> { Ok(lines.next().transpose()?) };
    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(fmt("missing 'ply' magic"));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let line = next()?.ok_or_else(|| fmt("header ended early"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(PlyError::Format(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| fmt("bad vertex count"))?);
                } else if count.is_none() {
                    return Err(fmt("only files whose first element is 'vertex' are supported"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(fmt("list properties on vertices are unsupported")),
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(PlyError::Format(format!("unexpected header line {line:?}"))),
        }
    }
    let n = count.ok_or_else(|| fmt("no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(fmt("vertex element lacks x, y or z")),
    };
    let uv = col("u").zip(col("v"));
    let mut points = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(if uv.is_some() { n } else { 0 });
    for k in 0..n {
        let line = next()?.ok_or_else(|| PlyError::Format(format!("expected {n} vertices, found {k}")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != props.len() {
            return Err(PlyError::Format(format!("vertex {k}: expected {} values", props.len())));
        }
        let f = |i: usize| vals[i].parse::<f64>().map_err(|_| PlyError::Format(format!("vertex {k}: bad number")));
        points.push(Point3::new(f(ix)?, f(iy)?, f(iz)?));
        if let Some((iu, iv)) = uv {
            let g = |i: usize| vals[i].parse::<u16>().map_err(|_| PlyError::Format(format!("vertex {k}: bad pixel")));
            pixels.push([g(iu)?, g(iv)?]);
        }
    }
    let cloud = if uv.is_some() { PointCloud::registered(points, pixels) } else { PointCloud::new(points) };
    cloud.map_err(|e| PlyError::Format(e.to_string()))
}

/// Writes labels as a binary 16-bit PGM (big-endian samples).
pub fn write_pgm_to(mut w: impl Write, mask: &InstanceMask) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n65535\n", mask.width(), mask.height())?;
    let mut buf = Vec::with_capacity(mask.labels().len() * 2);
    for &l in mask.labels() {
        buf.extend_from_slice(&l.to_be_bytes());
    }
    w.write_all(&buf)
}

pub fn write_pgm(path: &Path, mask: &InstanceMask) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(IoError::io(path))?;
    let mut w = BufWriter::new(f);
    write_pgm_to(&mut w, mask).and_then(|_| w.flush()).map_err(IoError::io(path))
}

/// Reads a binary PGM label image as `(width, height, labels)`.
pub fn read_pgm(path: &Path) -> Result<(u32, u32, Vec<u16>), IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(IoError::io(path))?;
    parse_pgm(&bytes).map_err(|m| IoError::format(path, m))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(u32, u32, Vec<u16>), String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<u32>().map_err(|_| format!("bad header number {s:?}"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    // exactly one whitespace byte separates the header from the samples
    let start = pos + 1;
    let n = w as usize * h as usize;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if maxval == 0 || maxval > 65535 {
        return Err(format!("bad maxval {maxval}"));
    }
    if bytes.len() < start + need {
        return Err(format!("expected {need} sample bytes, found {}", bytes.len().saturating_sub(start)));
    }
    let data = &bytes[start..start + need];
    let labels = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    Ok((w, h, labels))
}

pub const CLOUD_FILE: &str = "cloud.ply";
pub const MASK_FILE: &str = "mask.pgm";
pub const BOXES_FILE: &str = "boxes.json";
pub const POSES_FILE: &str = "poses.json";
pub const SPEC_FILE: &str = "spec.json";
pub const BUNDLE_FILES: [&str; 5] = [CLOUD_FILE, MASK_FILE, BOXES_FILE, POSES_FILE, SPEC_FILE];

/// Contents of `spec.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub seed: u64,
    /// Instance id to class for every brick.
    pub classes: BTreeMap<u16, BrickClass>,
    pub scene: SceneSpec,
}

/// A scene bundle loaded from disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub spec: BundleSpec,
    pub cloud: PointCloud,
    pub mask: InstanceMask,
    pub boxes: Vec<GtBox>,
    pub poses: Vec<GtPose>,
}

/// Writes the five bundle files into `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, seed: u64, spec: &SceneSpec, scene: &RenderedScene) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(IoError::io(dir))?;
    let p = |f: &str| dir.join(f);
    write_ply(&p(CLOUD_FILE), &scene.cloud)?;
    write_pgm(&p(MASK_FILE), &scene.mask)?;
    write_json(&p(BOXES_FILE), &scene.boxes)?;
    write_json(&p(POSES_FILE), &scene.poses)?;
    let classes = spec.bricks.iter().enumerate().map(|(i, b)| ((i + 1) as u16, b.class_id)).collect();
    write_json(&p(SPEC_FILE), &BundleSpec { seed, classes, scene: spec.clone() })?;
    Ok(BUNDLE_FILES.iter().map(|f| p(f)).collect())
}

/// Loads the mask of a bundle together with its class map.
pub fn read_bundle_mask(dir: &Path) -> Result<(BundleSpec, InstanceMask), IoError> {
    let spec: BundleSpec = read_json(&dir.join(SPEC_FILE))?;
    let mpath = dir.join(MASK_FILE);
    let (w, h, labels) = read_pgm(&mpath)?;
    // classes of ids that never reached the image are harmless but unused
    let present: std::collections::BTreeSet<u16> = labels.iter().copied().filter(|&l| l > 0).collect();
    let classes = spec.classes.iter().filter(|(id, _)| present.contains(id)).map(|(k, v)| (*k, *v)).collect();
    let mask = InstanceMask::new(w, h, labels, classes).map_err(|e| IoError::format(&mpath, e.to_string()))?;
    Ok((spec, mask))
}

pub fn read_bundle(dir: &Path) -> Result<Bundle, IoError> {
    let (spec, mask) = read_bundle_mask(dir)?;
    Ok(Bundle {
        cloud: read_ply(&dir.join(CLOUD_FILE))?,
        boxes: read_json(&dir.join(BOXES_FILE))?,
        poses: read_json(&dir.join(POSES_FILE))?,
        spec,
        mask,
    })
}
