//! Textual point-cloud formats.
//!
//! `xyz`: one point per line, three whitespace-separated reals.
//! `csv`: header line `x,y,z`, then one comma-separated point per line.
//!
//! Both writers use the shortest decimal that round-trips the 64-bit
//! value, so save/load is lossless.

use std::fmt::Write as _;
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Csv,
}

impl CloudFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(CloudFormat::Xyz),
            "csv" => Ok(CloudFormat::Csv),
            other => Err(Error::Config(format!("unknown point-cloud format: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CloudFormat::Xyz => "xyz",
            CloudFormat::Csv => "csv",
        }
    }

    /// Guess from the file extension; defaults to xyz.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => CloudFormat::Csv,
            _ => CloudFormat::Xyz,
        }
    }
}

fn parse_coord(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad coordinate: {s:?}") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite coordinate: {s}") });
    }
    Ok(v)
}

pub fn decode_pointcloud(text: &str, format: CloudFormat) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut lines = text.lines().enumerate();
    if format == CloudFormat::Csv {
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
        if header.trim() != "x,y,z" {
            return Err(Error::Parse { line: 1, msg: format!("expected header x,y,z, got {header:?}") });
        }
    }
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            CloudFormat::Xyz => trimmed.split_whitespace().collect(),
            CloudFormat::Csv => trimmed.split(',').collect(),
        };
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 coordinates, got {}", fields.len()),
            });
        }
        points.push([
            parse_coord(fields[0], line)?,
            parse_coord(fields[1], line)?,
            parse_coord(fields[2], line)?,
        ]);
    }
    PointCloud::new(points)
}

pub fn encode_pointcloud(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::new();
    if format == CloudFormat::Csv {
        out.push_str("x,y,z\n");
    }
    for p in cloud.points() {
        match format {
            CloudFormat::Xyz => writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap(),
            CloudFormat::Csv => writeln!(out, "{},{},{}", p[0], p[1], p[2]).unwrap(),
        }
    }
    out
}

pub fn load_pointcloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    decode_pointcloud(&text, format)
}

pub fn save_pointcloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    std::fs::write(path, encode_pointcloud(cloud, format))
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}
