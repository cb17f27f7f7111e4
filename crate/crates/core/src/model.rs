//! Either model family behind one type, chosen by a bundle's magic bytes.

use std::path::Path;

use faer::Mat;

use crate::attention::{AttentionEncoderModel, ATTENTION_MAGIC};
use crate::codec;
use crate::data::SourceData;
use crate::error::{Error, Result};
use crate::linear::{LinearEncoderModel, LINEAR_MAGIC};

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderModel {
    Linear(LinearEncoderModel),
    Attention(AttentionEncoderModel),
}

impl EncoderModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match bytes.get(..4) {
            Some(m) if m == LINEAR_MAGIC => Ok(Self::Linear(LinearEncoderModel::from_bytes(bytes)?)),
            Some(m) if m == ATTENTION_MAGIC => Ok(Self::Attention(AttentionEncoderModel::from_bytes(bytes)?)),
            _ => Err(Error::Format("not a model bundle".into())),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&codec::read_file(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Linear(_) => "linear",
            Self::Attention(_) => "attention",
        }
    }

    pub fn n_parcels(&self) -> usize {
        match self {
            Self::Linear(m) => m.n_parcels(),
            Self::Attention(m) => m.n_parcels(),
        }
    }

    /// Predictions for one source and the time index of each row.
    pub fn predict_source(&self, source: &SourceData) -> Result<(Vec<usize>, Mat<f64>)> {
        match self {
            Self::Linear(m) => m.predict_source(source),
            Self::Attention(m) => m.predict_source(source),
        }
    }
}
