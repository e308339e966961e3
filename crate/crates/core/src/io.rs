//! Text formats and atomic file output.
//!
//! Point clouds: one point per line, `x y z r g b label`, whitespace
//! separated, `#` starts a comment. Predictions: one integer per line.
//! Dataset manifests: `train <file>` / `val <file>` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::voxel::PointCloud;

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

pub fn format_point_cloud(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(pc.len() * 64);
    for i in 0..pc.len() {
        let [x, y, z] = pc.positions[i];
        let [r, g, b] = pc.colors[i];
        writeln!(s, "{x} {y} {z} {r} {g} {b} {}", pc.labels[i]).expect("string write");
    }
    s
}

pub fn parse_point_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in content_lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(ln, format!("expected 7 fields, found {}", f.len())));
        }
        let mut v = [0.0; 6];
        for k in 0..6 {
            v[k] = f[k].parse().map_err(|_| err(ln, format!("'{}' is not a number", f[k])))?;
        }
        let label: i32 = f[6].parse().map_err(|_| err(ln, format!("'{}' is not an integer label", f[6])))?;
        if label < -1 {
            return Err(err(ln, format!("label {label} below -1")));
        }
        if v[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(err(ln, "colors must lie in [0, 1]".into()));
        }
        positions.push([v[0], v[1], v[2]]);
        colors.push([v[3], v[4], v[5]]);
        labels.push(label);
    }
    PointCloud::new(positions, colors, labels).map_err(|e| err(0, e.to_string()))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    parse_point_cloud(&read_text(path)?, path)
}

pub fn write_point_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    write_atomic(path, format_point_cloud(pc).as_bytes())
}

pub fn format_predictions(labels: &[i32]) -> String {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(s, "{l}").expect("string write");
    }
    s
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<i32>> {
    content_lines(text)
        .map(|(ln, l)| {
            l.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                msg: format!("'{l}' is not an integer label"),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest";

    pub fn format(&self) -> String {
        let mut s = String::new();
        for f in &self.train {
            writeln!(s, "train {f}").expect("string write");
        }
        for f in &self.val {
            writeln!(s, "val {f}").expect("string write");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (ln, l) in content_lines(text) {
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                msg: msg.to_string(),
            };
            let (split, file) = l.split_once(char::is_whitespace).ok_or_else(|| err("expected '<split> <file>'"))?;
            let file = file.trim().to_string();
            match split {
                "train" => m.train.push(file),
                "val" => m.val.push(file),
                _ => return Err(err("split must be 'train' or 'val'")),
            }
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(Self::FILE);
        Self::parse(&read_text(&p)?, &p)
    }
}

/// Scenes of one split, loaded in manifest order.
pub fn load_split(dir: &Path, files: &[String]) -> Result<Vec<PointCloud>> {
    files.iter().map(|f| read_point_cloud(&dir.join(f))).collect()
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.txt")
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
