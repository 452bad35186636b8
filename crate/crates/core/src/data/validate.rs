use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use super::{read_manifest, Annotations, ANNOTATIONS, PAIRS};
use crate::error::Result;

/// Findings from scanning a dataset root.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub listed: usize,
    pub decodable: usize,
    /// `(path, reason)` for entries that could not be read.
    pub undecodable: Vec<(String, String)>,
    /// Count of decodable images per `(height, width)`.
    pub sizes: BTreeMap<String, usize>,
    pub annotated: Option<usize>,
    pub annotation_error: Option<String>,
    /// Annotated entries that are not in the manifest.
    pub orphan_annotations: Vec<String>,
    pub pairs: Option<usize>,
    pub missing_flows: Vec<String>,
}

impl ValidationReport {
    /// True when every listed image decodes and any annotations parse.
    pub fn ok(&self) -> bool {
        self.undecodable.is_empty() && self.annotation_error.is_none() && self.listed > 0
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images listed:     {}", self.listed)?;
        writeln!(f, "images decodable:  {}", self.decodable)?;
        for (p, why) in &self.undecodable {
            writeln!(f, "  undecodable: {p}: {why}")?;
        }
        for (size, n) in &self.sizes {
            writeln!(f, "  size {size}: {n}")?;
        }
        match (&self.annotated, &self.annotation_error) {
            (_, Some(e)) => writeln!(f, "annotations:       invalid ({e})")?,
            (Some(n), None) => writeln!(f, "annotations:       {n} entries")?,
            (None, None) => writeln!(f, "annotations:       none")?,
        }
        if !self.orphan_annotations.is_empty() {
            writeln!(f, "  {} annotated entries not in manifest", self.orphan_annotations.len())?;
        }
        if let Some(p) = self.pairs {
            writeln!(f, "frame pairs:       {p} ({} missing flow sidecars)", self.missing_flows.len())?;
        }
        write!(f, "status:            {}", if self.ok() { "ok" } else { "problems found" })
    }
}

/// Scans the manifest, annotations and frame pairs under `root`.
pub fn validate_root(root: &Path) -> Result<ValidationReport> {
    let names = read_manifest(root)?;
    let mut r = ValidationReport { listed: names.len(), ..Default::default() };
    for n in &names {
        match image::image_dimensions(root.join(n)) {
            Ok((w, h)) => {
                r.decodable += 1;
                *r.sizes.entry(format!("{h}x{w}")).or_default() += 1;
            }
            Err(e) => r.undecodable.push((n.clone(), e.to_string())),
        }
    }
    let ann = root.join(ANNOTATIONS);
    if ann.exists() {
        match Annotations::load(&ann) {
            Ok(a) => {
                r.annotated = Some(a.points.len());
                r.orphan_annotations = a.points.keys().filter(|k| !names.contains(k)).cloned().collect();
            }
            Err(e) => r.annotation_error = Some(e.to_string()),
        }
    }
    let pairs = root.join(PAIRS);
    if pairs.exists() {
        let text = std::fs::read_to_string(&pairs)?;
        let mut n = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            n += 1;
            if let Some(flow) = line.split_whitespace().nth(2) {
                if !root.join(flow).exists() {
                    r.missing_flows.push(flow.to_string());
                }
            }
        }
        r.pairs = Some(n);
    }
    Ok(r)
}
