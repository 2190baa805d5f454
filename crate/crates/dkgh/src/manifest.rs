//! Dataset manifest: `sample_id,image_path,heatmap_path,label,subject_id`.
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};

pub const HEADER: &str = "sample_id,image_path,heatmap_path,label,subject_id";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleManifest {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub heatmap_path: PathBuf,
    pub label: usize,
    pub subject_id: String,
}

/// Parses manifest text. Paths are kept verbatim.
pub fn parse_manifest(text: &str, num_classes: usize, origin: &Path) -> Result<Vec<SampleManifest>> {
    Ok(parse_numbered(text, num_classes, origin)?.into_iter().map(|(_, r)| r).collect())
}

/// Rows paired with their 1-based line numbers.
fn parse_numbered(text: &str, num_classes: usize, origin: &Path) -> Result<Vec<(usize, SampleManifest)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == HEADER => {}
        _ => return Err(Error::parse(origin, Some(1), format!("expected header `{HEADER}`"))),
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim_end_matches('\r');
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::parse(origin, Some(n), format!("expected 5 columns, found {}", cols.len())));
        }
        if cols.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::parse(origin, Some(n), "empty field"));
        }
        let label: usize = cols[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, Some(n), format!("label `{}` is not a non-negative integer", cols[3])))?;
        if label >= num_classes {
            return Err(Error::parse(
                origin,
                Some(n),
                format!("label {label} outside [0, {num_classes})"),
            ));
        }
        let id = cols[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::parse(origin, Some(n), format!("duplicate sample_id `{id}`")));
        }
        out.push((
            n,
            SampleManifest {
                sample_id: id,
                image_path: PathBuf::from(cols[1].trim()),
                heatmap_path: PathBuf::from(cols[2].trim()),
                label,
                subject_id: cols[4].trim().to_string(),
            },
        ));
    }
    Ok(out)
}

/// Reads and validates a manifest; relative paths are resolved and every
/// referenced file must exist.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Vec<SampleManifest>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    for (line, mut row) in parse_numbered(&text, num_classes, path)? {
        for p in [&mut row.image_path, &mut row.heatmap_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::parse(path, Some(line), format!("missing file {}", p.display())));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn render_manifest(rows: &[SampleManifest]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.sample_id,
            r.image_path.display(),
            r.heatmap_path.display(),
            r.label,
            r.subject_id
        )
        .unwrap();
    }
    s
}

pub fn write_manifest(path: &Path, rows: &[SampleManifest]) -> Result<()> {
    fs::write(path, render_manifest(rows)).at(path)
}
