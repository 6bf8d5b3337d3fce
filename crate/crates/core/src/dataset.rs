//! Clustered embedding datasets: topology, on-disk format, validation and
//! balanced sampling.
//!
//! A dataset directory holds three files:
//!
//! * `manifest.json` with version `clusterprobe-dataset-v1`, the embedding
//!   dimension, dtype tag `f32le`, the normalization flag, the two binary file
//!   names and the per-split cluster lists;
//! * the image matrix (real and fake rows) as raw little-endian f32, row-major;
//! * the caption matrix in the same encoding.
//!
//! Fake `i` of a cluster was generated from caption `i` of the same cluster.
//!
//! All randomness in this crate comes from `ChaCha8Rng` (`rand_chacha`) seeded
//! with `seed_from_u64`, so sampling is reproducible for a given crate version.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::matrix::{norm_f32, Matrix};

pub const FORMAT_VERSION: &str = "clusterprobe-dataset-v1";
pub const DTYPE_TAG: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FILE: &str = "images.f32";
pub const TEXT_FILE: &str = "texts.f32";

/// Tolerance on row norms for datasets flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;
/// Rows with a smaller norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// One real image, its fakes and the captions that generated them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticCluster {
    pub cluster_id: String,
    pub real_row: usize,
    pub fake_rows: Vec<usize>,
    /// Position `i` is the caption of fake `i`. Empty when the backbone has no
    /// text encoder.
    pub caption_rows: Vec<usize>,
    /// Optional raw caption strings; never used in computation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
}

impl SemanticCluster {
    pub fn new(
        cluster_id: impl Into<String>,
        real_row: usize,
        fake_rows: Vec<usize>,
        caption_rows: Vec<usize>,
    ) -> Self {
        Self {
            cluster_id: cluster_id.into(),
            real_row,
            fake_rows,
            caption_rows,
            captions: None,
        }
    }

    /// Number of fakes.
    pub fn n(&self) -> usize {
        self.fake_rows.len()
    }

    /// N + 1.
    pub fn size(&self) -> usize {
        self.fake_rows.len() + 1
    }

    /// Real row first, then fakes in order.
    pub fn members(&self) -> impl Iterator<Item = (usize, Label)> + '_ {
        std::iter::once((self.real_row, Label::Real))
            .chain(self.fake_rows.iter().map(|&r| (r, Label::Fake)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<SemanticCluster>,
    #[serde(default)]
    pub validation: Vec<SemanticCluster>,
    #[serde(default)]
    pub test: Vec<SemanticCluster>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[SemanticCluster] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &SemanticCluster> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// On-disk manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub dim: usize,
    pub dtype: String,
    pub normalized: bool,
    pub image_file: String,
    pub text_file: String,
    pub splits: Splits,
}

/// Immutable clustered embedding store. Construction validates every
/// invariant, so a value of this type is always consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    images: Matrix<f32>,
    texts: Matrix<f32>,
    splits: Splits,
    normalized: bool,
}

impl EmbeddingDataset {
    pub fn new(
        images: Matrix<f32>,
        texts: Matrix<f32>,
        splits: Splits,
        normalized: bool,
    ) -> Result<Self> {
        let dim = images.cols();
        if texts.cols() != dim && texts.rows() > 0 {
            return Err(Error::shape(format!("text dim {dim}"), texts.cols()));
        }
        let texts = if texts.rows() == 0 {
            Matrix::zeros(0, dim)
        } else {
            texts
        };
        let ds = Self {
            dim,
            images,
            texts,
            splits,
            normalized,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn images(&self) -> &Matrix<f32> {
        &self.images
    }

    pub fn texts(&self) -> &Matrix<f32> {
        &self.texts
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn split(&self, split: Split) -> &[SemanticCluster] {
        self.splits.get(split)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.dim == 0 {
            return Err(ValidationError::Manifest("dim must be positive".into()));
        }
        check_finite(&self.images, "image")?;
        check_finite(&self.texts, "text")?;

        // row -> (cluster_id, is_real)
        let mut owner: HashMap<usize, (&str, bool)> = HashMap::new();
        for c in self.splits.iter() {
            let id = c.cluster_id.as_str();
            if c.fake_rows.is_empty() {
                return Err(ValidationError::EmptyCluster {
                    cluster_id: id.into(),
                });
            }
            if !c.caption_rows.is_empty() && c.caption_rows.len() != c.fake_rows.len() {
                return Err(ValidationError::PairingMismatch {
                    cluster_id: id.into(),
                    fakes: c.fake_rows.len(),
                    captions: c.caption_rows.len(),
                });
            }
            for (row, rows, matrix) in c
                .members()
                .map(|(r, _)| (r, self.images.rows(), "image"))
                .chain(
                    c.caption_rows
                        .iter()
                        .map(|&r| (r, self.texts.rows(), "text")),
                )
            {
                if row >= rows {
                    return Err(ValidationError::IndexOutOfRange {
                        cluster_id: id.into(),
                        matrix,
                        row,
                        rows,
                    });
                }
            }
            let mut seen = HashSet::new();
            for &r in &c.fake_rows {
                if !seen.insert(r) {
                    return Err(ValidationError::DuplicateWithinCluster {
                        cluster_id: id.into(),
                        matrix: "image",
                        row: r,
                    });
                }
            }
            let mut seen = HashSet::new();
            for &r in &c.caption_rows {
                if !seen.insert(r) {
                    return Err(ValidationError::DuplicateWithinCluster {
                        cluster_id: id.into(),
                        matrix: "text",
                        row: r,
                    });
                }
            }
            for (row, label) in c.members() {
                let is_real = label == Label::Real;
                if let Some(&(other, other_real)) = owner.get(&row) {
                    return Err(if other_real != is_real {
                        ValidationError::RealFakeOverlap {
                            cluster_id: id.into(),
                            row,
                        }
                    } else {
                        ValidationError::DuplicateRow {
                            cluster_id: id.into(),
                            row,
                            other: other.into(),
                        }
                    });
                }
                owner.insert(row, (id, is_real));
            }
        }

        if self.normalized {
            for c in self.splits.iter() {
                for (row, _) in c.members() {
                    check_unit(&self.images, "image", row)?;
                }
                for &row in &c.caption_rows {
                    check_unit(&self.texts, "text", row)?;
                }
            }
        }
        Ok(())
    }

    /// All images of a split as (row, label, cluster index), clusters in split
    /// order with the real member first.
    pub fn split_items(&self, split: Split) -> Vec<(usize, Label, usize)> {
        self.split(split)
            .iter()
            .enumerate()
            .flat_map(|(k, c)| c.members().map(move |(r, l)| (r, l, k)))
            .collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: FORMAT_VERSION.into(),
            dim: self.dim,
            dtype: DTYPE_TAG.into(),
            normalized: self.normalized,
            image_file: IMAGE_FILE.into(),
            text_file: TEXT_FILE.into(),
            splits: self.splits.clone(),
        }
    }
}

fn check_finite(m: &Matrix<f32>, matrix: &'static str) -> Result<(), ValidationError> {
    for (row, r) in m.iter_rows().enumerate() {
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(ValidationError::NonFinite { matrix, row, col });
        }
    }
    Ok(())
}

fn check_unit(m: &Matrix<f32>, matrix: &'static str, row: usize) -> Result<(), ValidationError> {
    let norm = norm_f32(m.row(row));
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(ValidationError::NotNormalized { matrix, row, norm });
    }
    Ok(())
}

fn read_matrix(path: &Path, dim: usize) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let row_bytes = 4 * dim;
    if bytes.len() % row_bytes != 0 {
        return Err(ValidationError::SizeMismatch {
            file: path.display().to_string(),
            bytes: bytes.len() as u64,
            dim,
        }
        .into());
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Matrix::from_vec(bytes.len() / row_bytes, dim, data)
}

fn write_matrix(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 4);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| ValidationError::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(ValidationError::Manifest(format!(
            "unsupported version `{}`",
            manifest.version
        ))
        .into());
    }
    if manifest.dtype != DTYPE_TAG {
        return Err(
            ValidationError::Manifest(format!("unsupported dtype `{}`", manifest.dtype)).into(),
        );
    }
    if manifest.dim == 0 {
        return Err(ValidationError::Manifest("dim must be positive".into()).into());
    }
    let images = read_matrix(&dir.join(&manifest.image_file), manifest.dim)?;
    let texts = read_matrix(&dir.join(&manifest.text_file), manifest.dim)?;
    EmbeddingDataset::new(images, texts, manifest.splits, manifest.normalized)
}

/// Writes the manifest and both binaries, creating `dir` if needed.
pub fn save_dataset(dataset: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dataset.manifest();
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    write_matrix(&dir.join(&manifest.image_file), &dataset.images)?;
    write_matrix(&dir.join(&manifest.text_file), &dataset.texts)
}

/// Scales every referenced row to unit Euclidean norm and sets the
/// normalized flag. Unreferenced all-zero rows are left untouched.
pub fn l2_normalize(dataset: &EmbeddingDataset) -> Result<EmbeddingDataset> {
    let mut referenced_images = vec![false; dataset.images.rows()];
    let mut referenced_texts = vec![false; dataset.texts.rows()];
    for c in dataset.splits.iter() {
        for (r, _) in c.members() {
            referenced_images[r] = true;
        }
        for &r in &c.caption_rows {
            referenced_texts[r] = true;
        }
    }
    let images = normalize_rows(&dataset.images, &referenced_images, "image")?;
    let texts = normalize_rows(&dataset.texts, &referenced_texts, "text")?;
    EmbeddingDataset::new(images, texts, dataset.splits.clone(), true)
}

fn normalize_rows(m: &Matrix<f32>, referenced: &[bool], matrix: &'static str) -> Result<Matrix<f32>> {
    let mut out = m.clone();
    for (row, &is_ref) in referenced.iter().enumerate() {
        let norm = norm_f32(m.row(row));
        if norm < MIN_NORM {
            if is_ref {
                return Err(Error::ZeroNorm { matrix, row });
            }
            continue;
        }
        for v in out.row_mut(row) {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(out)
}

/// Each cluster of `split` contributes its real row and one uniformly drawn
/// fake row, in split order.
pub fn balanced_sample(
    dataset: &EmbeddingDataset,
    split: Split,
    seed: u64,
) -> Result<Vec<(usize, Label)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = dataset.split(split);
    let mut out = Vec::with_capacity(2 * clusters.len());
    for c in clusters {
        let pick = rng.random_range(0..c.fake_rows.len());
        out.push((c.real_row, Label::Real));
        out.push((c.fake_rows[pick], Label::Fake));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cluster() -> EmbeddingDataset {
        let images = Matrix::from_vec(
            6,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 3.0, 4.0, -1.0, 0.0, 0.5, 0.5, 2.0, 2.0],
        )
        .unwrap();
        let texts = Matrix::from_vec(4, 2, vec![1.0, 1.0, 2.0, 1.0, 0.0, 3.0, 1.0, -1.0]).unwrap();
        let splits = Splits {
            train: vec![SemanticCluster::new("a", 0, vec![1, 2], vec![0, 1])],
            validation: vec![SemanticCluster::new("b", 3, vec![4, 5], vec![2, 3])],
            test: vec![],
        };
        EmbeddingDataset::new(images, texts, splits, false).unwrap()
    }

    #[test]
    fn round_trip_two_clusters() {
        let ds = two_cluster();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_writes_empty_files() {
        let ds = EmbeddingDataset::new(
            Matrix::zeros(0, 8),
            Matrix::zeros(0, 8),
            Splits::default(),
            true,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(IMAGE_FILE)).unwrap().len(), 0);
        assert_eq!(fs::metadata(dir.path().join(TEXT_FILE)).unwrap().len(), 0);
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(m["splits"]["train"].as_array().unwrap().len(), 0);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn one_cluster_image_file_is_36_bytes() {
        let ds = EmbeddingDataset::new(
            Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap(),
            Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap(),
            Splits {
                train: vec![SemanticCluster::new("c", 0, vec![1, 2], vec![0, 1])],
                ..Default::default()
            },
            false,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(IMAGE_FILE)).unwrap().len(), 36);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let ds = two_cluster();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut manifest = ds.manifest();
        manifest.dim = 4;
        manifest.splits = Splits::default();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        fs::write(dir.path().join(IMAGE_FILE), vec![0u8; 17 * 4]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Validation(e)) => assert_eq!(e.category(), "size_mismatch"),
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn normalize_examples() {
        let ds = two_cluster();
        let n = l2_normalize(&ds).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.images().row(2), &[0.6, 0.8]);
        assert_eq!(n.images().row(0), &[1.0, 0.0]);

        let zero = EmbeddingDataset::new(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Matrix::zeros(0, 2),
            Splits {
                test: vec![SemanticCluster::new("z", 0, vec![1], vec![])],
                ..Default::default()
            },
            false,
        )
        .unwrap();
        assert!(matches!(
            l2_normalize(&zero),
            Err(Error::ZeroNorm { matrix: "image", row: 1 })
        ));
    }

    #[test]
    fn balanced_sample_counts_and_determinism() {
        let ds = two_cluster();
        let a = balanced_sample(&ds, Split::Train, 7).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, balanced_sample(&ds, Split::Train, 7).unwrap());
        assert_eq!(a[0], (0, Label::Real));
        assert!([1, 2].contains(&a[1].0));
    }

    #[test]
    fn single_fake_is_always_chosen() {
        let ds = EmbeddingDataset::new(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Matrix::zeros(0, 2),
            Splits {
                train: vec![SemanticCluster::new("z", 0, vec![1], vec![])],
                ..Default::default()
            },
            false,
        )
        .unwrap();
        for seed in 0..20 {
            assert_eq!(
                balanced_sample(&ds, Split::Train, seed).unwrap(),
                vec![(0, Label::Real), (1, Label::Fake)]
            );
        }
    }

    #[test]
    fn split_names_parse() {
        assert_eq!("validation".parse::<Split>().unwrap(), Split::Validation);
        assert!(matches!("dev".parse::<Split>(), Err(Error::UnknownSplit(_))));
    }
}
