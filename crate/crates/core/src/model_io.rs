//! Versioned JSON persistence for fitted models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ace::AceModel;
use crate::crcca::CrccaModel;
use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::linear_cca::LinearCcaModel;
use crate::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Linear(LinearCcaModel),
    Crcca(CrccaModel),
    Ace(AceModel),
}

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    model: &'a Model,
}

#[derive(Deserialize)]
struct Header {
    format_version: u32,
}

#[derive(Deserialize)]
struct Envelope {
    #[serde(flatten)]
    model: Model,
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Linear(_) => "linear",
            Model::Crcca(_) => "crcca",
            Model::Ace(_) => "ace",
        }
    }

    /// Representations `(U, V)` of a dataset.
    pub fn transform(&self, data: &PairedDataset) -> Result<(Matrix, Matrix)> {
        match self {
            Model::Linear(m) => m.project(data.x(), data.y()),
            Model::Crcca(m) => m.transform(data),
            Model::Ace(m) => crate::ace::predict_ace(m, data.x(), data.y()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&EnvelopeRef {
            format_version: FORMAT_VERSION,
            model: self,
        })
        .map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("model file: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let env: Envelope =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("model file: {e}")))?;
        Ok(env.model)
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model.to_json()?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Model::from_json(&text)
}
