//! Feature spaces: raw backbone embeddings or one of the two learned heads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::disentangle::{project_rows, HeadPair};
use crate::error::{Error, Result};
use crate::matrix::{norm_f32, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSpace {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "s")]
    Semantics,
    #[serde(rename = "t")]
    Style,
}

impl FeatureSpace {
    pub fn tag(self) -> u8 {
        match self {
            FeatureSpace::Raw => 0,
            FeatureSpace::Semantics => 1,
            FeatureSpace::Style => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FeatureSpace::Raw),
            1 => Some(FeatureSpace::Semantics),
            2 => Some(FeatureSpace::Style),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSpace::Raw => "raw",
            FeatureSpace::Semantics => "s",
            FeatureSpace::Style => "t",
        }
    }
}

impl fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(FeatureSpace::Raw),
            "s" | "semantics" => Ok(FeatureSpace::Semantics),
            "t" | "style" => Ok(FeatureSpace::Style),
            other => Err(Error::Probe(format!("unknown feature space `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Images,
    Texts,
}

/// Gathers `rows` of the chosen matrix in the chosen space. Head spaces are
/// projected and unit-normalized; raw rows are returned as stored unless
/// `unit` is set.
pub fn gather(
    dataset: &EmbeddingDataset,
    source: Source,
    rows: &[usize],
    space: FeatureSpace,
    heads: Option<&HeadPair>,
    unit: bool,
) -> Result<Matrix<f64>> {
    let m = match source {
        Source::Images => dataset.images(),
        Source::Texts => dataset.texts(),
    };
    let d = dataset.dim();
    let mut out = Matrix::zeros(rows.len(), d);
    for (i, &r) in rows.iter().enumerate() {
        let src = m.row(r);
        let scale = if unit && space == FeatureSpace::Raw {
            let n = norm_f32(src);
            if n < crate::dataset::MIN_NORM {
                return Err(Error::ZeroNorm {
                    matrix: if source == Source::Images { "image" } else { "text" },
                    row: r,
                });
            }
            1.0 / n
        } else {
            1.0
        };
        for (o, &v) in out.row_mut(i).iter_mut().zip(src) {
            *o = v as f64 * scale;
        }
    }
    match space {
        FeatureSpace::Raw => Ok(out),
        FeatureSpace::Semantics | FeatureSpace::Style => {
            let heads = heads.ok_or_else(|| {
                Error::Probe(format!("space `{space}` needs a trained head pair"))
            })?;
            let head = if space == FeatureSpace::Style {
                &heads.style
            } else {
                &heads.semantics
            };
            project_rows(&head.weights_f64(), &out).map(|p| p.unit)
        }
    }
}
