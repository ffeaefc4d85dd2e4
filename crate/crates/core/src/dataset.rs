//! Feature matrices, per-image metadata and their on-disk formats.
//!
//! Features are stored as NPY v1.0 arrays (2-D, `<f4` or `<f8`) and metadata
//! as a CSV with the header `image_id,person_id,camera_id`. Every row of a
//! [`FeatureMatrix`] is L2-normalized when it is constructed, so cosine
//! distance reduces to `1 - dot(u, v)` downstream.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use ndarray_npy::{ReadNpyError, ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Person id marking a distractor image.
pub const DISTRACTOR_ID: i64 = -1;
/// Camera id marking an unknown camera; disables camera-based filtering.
pub const UNKNOWN_CAMERA: i32 = -1;

const META_HEADER: [&str; 3] = ["image_id", "person_id", "camera_id"];

/// Dense row-major `f32` matrix whose rows are unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds a matrix from raw row-major values, checking finiteness and
    /// L2-normalizing every row. Original magnitudes are discarded.
    pub fn from_raw(rows: usize, dim: usize, mut values: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::EmptyMatrix { rows, dim });
        }
        if values.len() != rows * dim {
            return Err(Error::LengthMismatch {
                what: "feature values",
                expected: rows * dim,
                found: values.len(),
            });
        }
        for (row, chunk) in values.chunks_exact_mut(dim).enumerate() {
            normalize_row(chunk, row)?;
        }
        Ok(Self { rows, dim, values })
    }

    /// Builds a matrix from `f64` values; they are down-converted to `f32`
    /// before normalization.
    pub fn from_raw_f64(rows: usize, dim: usize, values: &[f64]) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > f32::MAX as f64 {
                return Err(Error::NonFinite {
                    row: i / dim.max(1),
                    col: i % dim.max(1),
                });
            }
        }
        Self::from_raw(rows, dim, values.iter().map(|&v| v as f32).collect())
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::from_raw(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.dim)
    }

    /// Size of the feature payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.values.len() * std::mem::size_of::<f32>()
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::InvalidRow {
                    row: r,
                    rows: self.rows,
                });
            }
            values.extend_from_slice(self.row(r));
        }
        Self::from_raw(rows.len(), self.dim, values)
    }

    fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.rows, self.dim), &self.values)
            .expect("shape matches value count")
    }
}

/// Scales `row` to unit L2 norm in place.
pub(crate) fn normalize_row(row: &mut [f32], index: usize) -> Result<()> {
    let mut sq = 0.0f64;
    for (col, &v) in row.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: index, col });
        }
        sq += (v as f64) * (v as f64);
    }
    let norm = sq.sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNormRow { row: index });
    }
    // Rows already within rounding of unit norm are left untouched so that
    // repeated normalization is a no-op.
    if (norm - 1.0).abs() > 1e-7 {
        for v in row.iter_mut() {
            *v = ((*v as f64) / norm) as f32;
        }
    }
    Ok(())
}

/// Reads a 2-D NPY feature file and L2-normalizes its rows.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads NPY bytes from any reader.
pub fn read_features<R: Read>(mut reader: R) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    match Array2::<f32>::read_npy(bytes.as_slice()) {
        Ok(arr) => {
            let (rows, dim) = arr.dim();
            let values = arr.as_standard_layout().iter().copied().collect();
            FeatureMatrix::from_raw(rows, dim, values)
        }
        Err(ReadNpyError::WrongDescriptor(_)) => match Array2::<f64>::read_npy(bytes.as_slice()) {
            Ok(arr) => {
                log::warn!("64-bit float features down-converted to 32-bit");
                let (rows, dim) = arr.dim();
                let values: Vec<f64> = arr.as_standard_layout().iter().copied().collect();
                FeatureMatrix::from_raw_f64(rows, dim, &values)
            }
            Err(e) => Err(map_npy_error(e)),
        },
        Err(e) => Err(map_npy_error(e)),
    }
}

fn map_npy_error(e: ReadNpyError) -> Error {
    match e {
        ReadNpyError::Io(source) => Error::io("<reader>", source),
        ReadNpyError::WrongNdim(_, actual) => Error::NotTwoDimensional(actual),
        ReadNpyError::WrongDescriptor(d) => Error::UnsupportedElementType(d.to_string()),
        other => Error::MalformedHeader(other.to_string()),
    }
}

/// Writes a matrix as a little-endian `<f4` NPY v1.0 file.
pub fn save_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    features
        .view()
        .write_npy(&mut w)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Identity, camera and stable id of one image, aligned with a feature row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemMeta {
    pub image_id: String,
    pub person_id: i64,
    pub camera_id: i32,
}

impl ItemMeta {
    pub fn new(image_id: impl Into<String>, person_id: i64, camera_id: i32) -> Self {
        Self {
            image_id: image_id.into(),
            person_id,
            camera_id,
        }
    }

    pub fn is_distractor(&self) -> bool {
        self.person_id == DISTRACTOR_ID
    }

    pub fn has_known_camera(&self) -> bool {
        self.camera_id != UNKNOWN_CAMERA
    }
}

/// Reads a metadata CSV file.
pub fn load_meta(path: impl AsRef<Path>) -> Result<Vec<ItemMeta>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_meta(BufReader::new(file))
}

/// Parses metadata CSV from any reader. CRLF and LF line endings are accepted.
pub fn read_meta<R: Read>(reader: R) -> Result<Vec<ItemMeta>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Meta(e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    for name in META_HEADER {
        if !cols.contains(&name) {
            return Err(Error::Meta(format!("missing column {name:?}")));
        }
    }
    if cols != META_HEADER {
        return Err(Error::Meta(format!(
            "header must be exactly {}, found {}",
            META_HEADER.join(","),
            cols.join(",")
        )));
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Meta(e.to_string()))?;
        let line = i + 2;
        let image_id = record.get(0).unwrap_or_default().to_string();
        let person_id = record
            .get(1)
            .unwrap_or_default()
            .parse::<i64>()
            .map_err(|_| Error::Meta(format!("line {line}: non-integer person_id")))?;
        let camera_id = record
            .get(2)
            .unwrap_or_default()
            .parse::<i32>()
            .map_err(|_| Error::Meta(format!("line {line}: non-integer camera_id")))?;
        if !seen.insert(image_id.clone()) {
            return Err(Error::DuplicateImageId(image_id));
        }
        out.push(ItemMeta {
            image_id,
            person_id,
            camera_id,
        });
    }
    Ok(out)
}

/// Writes metadata as CSV with the standard header.
pub fn save_meta(path: impl AsRef<Path>, meta: &[ItemMeta]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Meta(e.to_string());
    w.write_record(META_HEADER).map_err(csv_err)?;
    for m in meta {
        w.write_record([
            m.image_id.as_str(),
            &m.person_id.to_string(),
            &m.camera_id.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Query and gallery features with aligned metadata. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub query_features: FeatureMatrix,
    pub query_meta: Vec<ItemMeta>,
    pub gallery_features: FeatureMatrix,
    pub gallery_meta: Vec<ItemMeta>,
}

impl Dataset {
    /// Assembles and validates a dataset.
    pub fn new(
        query_features: FeatureMatrix,
        query_meta: Vec<ItemMeta>,
        gallery_features: FeatureMatrix,
        gallery_meta: Vec<ItemMeta>,
    ) -> Result<Self> {
        validate(Self {
            query_features,
            query_meta,
            gallery_features,
            gallery_meta,
        })
    }

    /// Loads `query.npy`, `query.csv`, `gallery.npy` and `gallery.csv` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(
            dir.join("query.npy"),
            dir.join("query.csv"),
            dir.join("gallery.npy"),
            dir.join("gallery.csv"),
        )
    }

    pub fn load(
        query_features: impl AsRef<Path>,
        query_meta: impl AsRef<Path>,
        gallery_features: impl AsRef<Path>,
        gallery_meta: impl AsRef<Path>,
    ) -> Result<Self> {
        Self::new(
            load_features(query_features)?,
            load_meta(query_meta)?,
            load_features(gallery_features)?,
            load_meta(gallery_meta)?,
        )
    }

    /// Writes the four standard files into `dir`, creating it if needed.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_features(dir.join("query.npy"), &self.query_features)?;
        save_meta(dir.join("query.csv"), &self.query_meta)?;
        save_features(dir.join("gallery.npy"), &self.gallery_features)?;
        save_meta(dir.join("gallery.csv"), &self.gallery_meta)
    }

    pub fn num_queries(&self) -> usize {
        self.query_features.rows()
    }

    pub fn num_gallery(&self) -> usize {
        self.gallery_features.rows()
    }

    pub fn dim(&self) -> usize {
        self.gallery_features.dim()
    }
}

/// Checks the cross-component invariants of a dataset.
pub fn validate(dataset: Dataset) -> Result<Dataset> {
    if dataset.query_features.dim() != dataset.gallery_features.dim() {
        return Err(Error::DimMismatch {
            expected: dataset.gallery_features.dim(),
            found: dataset.query_features.dim(),
        });
    }
    if dataset.query_meta.len() != dataset.query_features.rows() {
        return Err(Error::LengthMismatch {
            what: "query metadata",
            expected: dataset.query_features.rows(),
            found: dataset.query_meta.len(),
        });
    }
    if dataset.gallery_meta.len() != dataset.gallery_features.rows() {
        return Err(Error::LengthMismatch {
            what: "gallery metadata",
            expected: dataset.gallery_features.rows(),
            found: dataset.gallery_meta.len(),
        });
    }
    Ok(dataset)
}
