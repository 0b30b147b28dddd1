//! Immutable embedding bundles and their on-disk directory format.
//!
//! A bundle directory holds three files:
//!
//! - `manifest.json`: `schema_version` (1), `dim`, `count`, `dtype` (`"f32le"`), `normalized`.
//! - `embeddings.bin`: `count * dim` little-endian `f32`, row-major.
//! - `records.jsonl`: one object per row with `id`, `row`, `modality`, `label`, `class_truth`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "embeddings.bin";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SCHEMA_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

/// Allowed deviation of a row norm from 1.0 in a bundle flagged `normalized`.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub row: usize,
    pub modality: Modality,
    /// Known-class label; `None` marks an unlabelled sample.
    pub label: Option<String>,
    /// Ground truth, used only for evaluation.
    pub class_truth: Option<String>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, row: usize, modality: Modality) -> Self {
        Self {
            id: id.into(),
            row,
            modality,
            label: None,
            class_truth: None,
        }
    }

    pub fn is_labelled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    dim: usize,
    count: usize,
    dtype: String,
    normalized: bool,
}

/// One broken bundle invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroDim,
    DataLength { expected: usize, actual: usize },
    RecordCount { records: usize, rows: usize },
    NonFinite { row: usize },
    RowOutOfRange { id: String, row: usize },
    DuplicateRow { id: String, row: usize },
    DuplicateId { id: String },
    NotUnitNorm { row: usize, norm: f64 },
    LabelWithoutTruth { id: String },
    LabelTruthMismatch { id: String, label: String, truth: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDim => write!(f, "dim must be positive"),
            Violation::DataLength { expected, actual } => {
                write!(f, "matrix size mismatch: expected {expected} values, found {actual}")
            }
            Violation::RecordCount { records, rows } => {
                write!(f, "{records} records for {rows} rows")
            }
            Violation::NonFinite { row } => write!(f, "non-finite value at row {row}"),
            Violation::RowOutOfRange { id, row } => write!(f, "record {id:?}: row {row} out of range"),
            Violation::DuplicateRow { id, row } => write!(f, "record {id:?}: row {row} already claimed"),
            Violation::DuplicateId { id } => write!(f, "duplicate record id {id:?}"),
            Violation::NotUnitNorm { row, norm } => {
                write!(f, "row {row} has norm {norm:.6} in a normalized bundle")
            }
            Violation::LabelWithoutTruth { id } => write!(f, "record {id:?}: label without class_truth"),
            Violation::LabelTruthMismatch { id, label, truth } => {
                write!(f, "record {id:?}: label {label:?} differs from class_truth {truth:?}")
            }
        }
    }
}

/// A `count x dim` matrix of `f32` vectors with one metadata record per row.
///
/// Bundles never change after construction. Records are kept sorted by row,
/// so `records()[i]` describes `row(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    dim: usize,
    data: Vec<f32>,
    records: Vec<SampleRecord>,
    normalized: bool,
}

impl EmbeddingBundle {
    /// Builds a bundle and checks every invariant.
    pub fn new(dim: usize, data: Vec<f32>, records: Vec<SampleRecord>, normalized: bool) -> Result<Self> {
        let bundle = Self::from_parts_unchecked(dim, data, records, normalized);
        let violations = validate_bundle(&bundle);
        if violations.is_empty() {
            Ok(bundle)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    /// Builds a bundle without invariant checks, for reporting on malformed input.
    pub fn from_parts_unchecked(dim: usize, data: Vec<f32>, mut records: Vec<SampleRecord>, normalized: bool) -> Self {
        records.sort_by_key(|r| r.row);
        Self {
            dim,
            data,
            records,
            normalized,
        }
    }

    /// Builds a bundle from rows, assigning `records[i].row = i`.
    pub fn from_rows(dim: usize, rows: &[Vec<f32>], mut records: Vec<SampleRecord>, normalized: bool) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
            if let Some(rec) = records.get_mut(i) {
                rec.row = i;
            }
        }
        Self::new(dim, data, records, normalized)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.records[i]
    }

    /// Row index of every record id.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.records.iter().map(|r| (r.id.as_str(), r.row)).collect()
    }

    /// New bundle holding the given rows (in the given order), renumbered from 0.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut records = Vec::with_capacity(rows.len());
        for (new_row, &r) in rows.iter().enumerate() {
            data.extend_from_slice(self.row(r));
            let mut rec = self.records[r].clone();
            rec.row = new_row;
            records.push(rec);
        }
        Self::new(self.dim, data, records, self.normalized)
    }

    /// Same vectors, metadata replaced by `f(record)`.
    pub fn map_records(&self, f: impl FnMut(&SampleRecord) -> SampleRecord) -> Result<Self> {
        let records = self.records.iter().map(f).collect();
        Self::new(self.dim, self.data.clone(), records, self.normalized)
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn l2_norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Lists every invariant violation. An empty list means the bundle is valid.
pub fn validate_bundle(b: &EmbeddingBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    if b.dim == 0 {
        out.push(Violation::ZeroDim);
        return out;
    }
    if !b.data.len().is_multiple_of(b.dim) {
        out.push(Violation::DataLength {
            expected: b.data.len().div_ceil(b.dim) * b.dim,
            actual: b.data.len(),
        });
        return out;
    }
    let count = b.count();
    if b.records.len() != count {
        out.push(Violation::RecordCount {
            records: b.records.len(),
            rows: count,
        });
    }
    for (row, v) in b.rows().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite { row });
            continue;
        }
        if b.normalized {
            let norm = l2_norm_f32(v);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                out.push(Violation::NotUnitNorm { row, norm });
            }
        }
    }
    let mut ids = HashSet::new();
    let mut rows = HashSet::new();
    for r in &b.records {
        if !ids.insert(r.id.as_str()) {
            out.push(Violation::DuplicateId { id: r.id.clone() });
        }
        if r.row >= count {
            out.push(Violation::RowOutOfRange {
                id: r.id.clone(),
                row: r.row,
            });
        } else if !rows.insert(r.row) {
            out.push(Violation::DuplicateRow {
                id: r.id.clone(),
                row: r.row,
            });
        }
        if let Some(label) = &r.label {
            match &r.class_truth {
                None => out.push(Violation::LabelWithoutTruth { id: r.id.clone() }),
                Some(truth) if truth != label => out.push(Violation::LabelTruthMismatch {
                    id: r.id.clone(),
                    label: label.clone(),
                    truth: truth.clone(),
                }),
                _ => {}
            }
        }
    }
    out
}

/// Reads a bundle directory, checking only the file structure (manifest and byte length).
pub fn read_bundle_unchecked(path: &Path) -> Result<EmbeddingBundle> {
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, "manifest", e))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            &manifest_path,
            "manifest",
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::format(
            &manifest_path,
            "manifest",
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    if manifest.dim == 0 {
        return Err(Error::format(&manifest_path, "manifest", "dim must be positive"));
    }

    let matrix_path = path.join(MATRIX_FILE);
    let bytes = fs::read(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
    let expected = manifest.count as u64 * manifest.dim as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::MatrixSizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let records_path = path.join(RECORDS_FILE);
    let file = fs::File::open(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut records = Vec::with_capacity(manifest.count);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&records_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&records_path, "record", format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }

    Ok(EmbeddingBundle::from_parts_unchecked(
        manifest.dim,
        data,
        records,
        manifest.normalized,
    ))
}

/// Reads and fully validates a bundle directory.
pub fn load_bundle(path: &Path) -> Result<EmbeddingBundle> {
    let bundle = read_bundle_unchecked(path)?;
    let violations = validate_bundle(&bundle);
    // Surface the most specific error for the common single-cause failures.
    match violations.as_slice() {
        [] => Ok(bundle),
        [Violation::NonFinite { row }, ..] => Err(Error::NonFinite { row: *row }),
        [Violation::DuplicateId { id }, ..] => Err(Error::DuplicateId(id.clone())),
        [Violation::RowOutOfRange { id, row }, ..] => Err(Error::RowOutOfRange {
            id: id.clone(),
            row: *row,
            count: bundle.count(),
        }),
        _ => Err(Error::Invalid(violations)),
    }
}

/// Writes `bundle` as a bundle directory at `path`, creating it if needed.
pub fn write_bundle(bundle: &EmbeddingBundle, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dim: bundle.dim,
        count: bundle.count(),
        dtype: DTYPE.to_string(),
        normalized: bundle.normalized,
    };
    let manifest_path = path.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let matrix_path = path.join(MATRIX_FILE);
    let mut bytes = Vec::with_capacity(bundle.data.len() * 4);
    for x in &bundle.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&matrix_path, bytes).map_err(|e| Error::io(&matrix_path, e))?;

    let records_path = path.join(RECORDS_FILE);
    let file = fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut w = BufWriter::new(file);
    for r in &bundle.records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(&records_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&records_path, e))?;
    Ok(())
}
