use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    AnnotationRecord, DatasetManifest, Mask, NoduleEntry, NodulePatchPair, Patch, RaterId, Split,
    PATCH_PIXELS,
};
use crate::{Error, Result};

pub const MANIFEST_HEADER: &str =
    "# nodule_id,rater_id,D0_mm,D1_mm,days_between,spacing_mm,path_I0,path_I1,path_Y0,path_Y1,split";

/// Grid file locations, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchFiles {
    pub i0: PathBuf,
    pub i1: PathBuf,
    pub y0: PathBuf,
    pub y1: PathBuf,
}

impl PatchFiles {
    /// Conventional layout under `patches/`.
    pub fn for_nodule(nodule_id: &str) -> Self {
        let p = |suffix: &str| PathBuf::from(format!("patches/{nodule_id}_{suffix}.f32"));
        Self {
            i0: p("I0"),
            i1: p("I1"),
            y0: p("Y0"),
            y1: p("Y1"),
        }
    }
}

/// Reads a raw little-endian 32×32 grid.
pub fn read_f32_grid(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != PATCH_PIXELS * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            PATCH_PIXELS * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_grid(path: &Path, values: &[f32]) -> Result<()> {
    if values.len() != PATCH_PIXELS {
        return Err(Error::InvalidInput(format!(
            "grid needs {PATCH_PIXELS} values, got {}",
            values.len()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Row {
    line: usize,
    rater: RaterId,
    d0: f64,
    d1: f64,
    days: u32,
    spacing: f64,
    files: PatchFiles,
    split: Split,
}

fn parse_row(line_no: usize, line: &str) -> Result<(String, Row)> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let id = fields.first().copied().unwrap_or_default().to_string();
    let bad = |message: String| Error::Manifest {
        line: line_no,
        nodule_id: id.clone(),
        message,
    };
    if fields.len() != 11 {
        return Err(bad(format!("expected 11 fields, found {}", fields.len())));
    }
    if id.is_empty() {
        return Err(bad("empty nodule_id".into()));
    }
    let num = |i: usize, name: &str| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|e| bad(format!("{name} {:?}: {e}", fields[i])))
    };
    let rater = fields[1].parse().map_err(|e: Error| bad(e.to_string()))?;
    let days = fields[4]
        .parse::<u32>()
        .map_err(|e| bad(format!("days_between {:?}: {e}", fields[4])))?;
    let split = fields[10].parse().map_err(|e: Error| bad(e.to_string()))?;
    Ok((
        id.clone(),
        Row {
            line: line_no,
            rater,
            d0: num(2, "D0_mm")?,
            d1: num(3, "D1_mm")?,
            days,
            spacing: num(5, "spacing_mm")?,
            files: PatchFiles {
                i0: fields[6].into(),
                i1: fields[7].into(),
                y0: fields[8].into(),
                y1: fields[9].into(),
            },
            split,
        },
    ))
}

/// Parses a manifest and loads every referenced grid. Paths are resolved
/// against the manifest's directory; all rows of a nodule must agree on
/// interval, spacing, files and split.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));

    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, row) = parse_row(i + 1, line)?;
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(row);
    }

    let mut entries = Vec::with_capacity(order.len());
    let mut split = BTreeMap::new();
    for id in order {
        let group = &rows[&id];
        let first = &group[0];
        for r in &group[1..] {
            if r.split != first.split {
                return Err(Error::Validation(format!(
                    "nodule {id} appears in both {} and {} (line {})",
                    first.split, r.split, r.line
                )));
            }
            if r.days != first.days || r.spacing != first.spacing || r.files != first.files {
                return Err(Error::Manifest {
                    line: r.line,
                    nodule_id: id.clone(),
                    message: "interval, spacing or patch files disagree with earlier rows".into(),
                });
            }
        }
        let load = |rel: &Path| -> Result<Vec<f32>> {
            let full = root.join(rel);
            if !full.is_file() {
                return Err(Error::Manifest {
                    line: first.line,
                    nodule_id: id.clone(),
                    message: format!("missing patch file {}", full.display()),
                });
            }
            read_f32_grid(&full).map_err(|e| Error::Manifest {
                line: first.line,
                nodule_id: id.clone(),
                message: e.to_string(),
            })
        };
        let wrap = |e: Error| Error::Manifest {
            line: first.line,
            nodule_id: id.clone(),
            message: e.to_string(),
        };
        let pair = NodulePatchPair {
            nodule_id: id.clone(),
            i0: Patch::new(load(&first.files.i0)?).map_err(wrap)?,
            i1: Patch::new(load(&first.files.i1)?).map_err(wrap)?,
            y0: Mask::from_binary_values(&load(&first.files.y0)?).map_err(wrap)?,
            y1: Mask::from_binary_values(&load(&first.files.y1)?).map_err(wrap)?,
            spacing_mm: first.spacing,
            days_between: first.days,
        };
        let annotations = group
            .iter()
            .map(|r| {
                AnnotationRecord::new(id.clone(), r.rater, r.d0, r.d1).map_err(|e| Error::Manifest {
                    line: r.line,
                    nodule_id: id.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        split.insert(id.clone(), first.split);
        entries.push(NoduleEntry {
            pair,
            annotations,
            files: first.files.clone(),
        });
    }
    DatasetManifest::new(entries, split)
}

/// Writes the manifest text and every grid file it references.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in manifest.entries() {
        let p = &e.pair;
        if p.nodule_id.contains([',', '\n', '#']) || p.nodule_id.trim() != p.nodule_id {
            return Err(Error::InvalidInput(format!(
                "nodule id {:?} cannot be written to a manifest",
                p.nodule_id
            )));
        }
        write_f32_grid(&root.join(&e.files.i0), p.i0.values())?;
        write_f32_grid(&root.join(&e.files.i1), p.i1.values())?;
        write_f32_grid(&root.join(&e.files.y0), &p.y0.to_values())?;
        write_f32_grid(&root.join(&e.files.y1), &p.y1.to_values())?;
        let split = manifest.split_of(e.id()).unwrap_or(Split::Train);
        for a in &e.annotations {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{},{},{},{},{}",
                p.nodule_id,
                a.rater,
                a.d0_mm,
                a.d1_mm,
                p.days_between,
                p.spacing_mm,
                e.files.i0.display(),
                e.files.i1.display(),
                e.files.y0.display(),
                e.files.y1.display(),
                split
            );
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
