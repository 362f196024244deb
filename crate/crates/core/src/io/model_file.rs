//! JSON model container with base64 little-endian float payloads.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedding::{ModelState, ProjectionHead};
use crate::error::{Error, Position, Result};
use crate::io::featurizer::SurrogateFeaturizer;

pub const FORMAT_TAG: &str = "ekclip-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Rounds a value to what this precision can store.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadRecord {
    d_out: usize,
    d_in: usize,
    weights: String,
    bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    version: u32,
    precision: Precision,
    joint_dim: usize,
    vision_head: HeadRecord,
    text_head: HeadRecord,
    log_tau: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_featurizer: Option<SurrogateFeaturizer>,
}

/// A model plus the metadata stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: ModelState,
    pub precision: Precision,
    pub text_featurizer: Option<SurrogateFeaturizer>,
}

fn encode_floats<'a>(values: impl Iterator<Item = &'a f64>, precision: Precision) -> String {
    let mut bytes = Vec::new();
    for &v in values {
        match precision {
            Precision::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    STANDARD.encode(bytes)
}

fn decode_floats(text: &str, expected: usize, precision: Precision, field: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::format("model file", Position::Line { line: 1, column: None }, format!("{field}: {msg}"));
    let bytes = STANDARD.decode(text).map_err(|e| bad(format!("invalid base64: {e}")))?;
    let width = precision.width();
    if bytes.len() != expected * width {
        return Err(Error::shape(format!(
            "{field}: payload holds {} bytes, shape needs {}",
            bytes.len(),
            expected * width
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(width)
        .map(|c| match precision {
            Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(values)
}

fn head_record(head: &ProjectionHead, precision: Precision) -> HeadRecord {
    HeadRecord {
        d_out: head.d_out(),
        d_in: head.d_in(),
        weights: encode_floats(head.weights.iter(), precision),
        bias: encode_floats(head.bias.iter(), precision),
    }
}

fn head_from_record(r: &HeadRecord, precision: Precision, name: &str) -> Result<ProjectionHead> {
    let w = decode_floats(&r.weights, r.d_out * r.d_in, precision, &format!("{name}.weights"))?;
    let b = decode_floats(&r.bias, r.d_out, precision, &format!("{name}.bias"))?;
    ProjectionHead::new(
        Array2::from_shape_vec((r.d_out, r.d_in), w).expect("length checked"),
        Array1::from(b),
    )
}

pub fn model_to_json(file: &ModelFile) -> String {
    let record = ModelRecord {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        precision: file.precision,
        joint_dim: file.model.d_joint(),
        vision_head: head_record(&file.model.vision_head, file.precision),
        text_head: head_record(&file.model.text_head, file.precision),
        log_tau: encode_floats(std::iter::once(&file.model.log_tau), Precision::F64),
        text_featurizer: file.text_featurizer,
    };
    serde_json::to_string_pretty(&record).expect("model serializes")
}

/// Parses a model; `expected_joint_dim` enforces the configured joint space.
pub fn model_from_json(text: &str, expected_joint_dim: Option<usize>) -> Result<ModelFile> {
    let record: ModelRecord = serde_json::from_str(text).map_err(|e| {
        Error::format(
            "model file",
            Position::Line {
                line: e.line(),
                column: Some(e.column()),
            },
            e.to_string(),
        )
    })?;
    if record.format != FORMAT_TAG || record.version != FORMAT_VERSION {
        return Err(Error::format(
            "model file",
            Position::Line { line: 1, column: None },
            format!("unsupported format {} v{}", record.format, record.version),
        ));
    }
    let vision = head_from_record(&record.vision_head, record.precision, "vision_head")?;
    let text_head = head_from_record(&record.text_head, record.precision, "text_head")?;
    let log_tau = decode_floats(&record.log_tau, 1, Precision::F64, "log_tau")?[0];
    if vision.d_out() != record.joint_dim || text_head.d_out() != record.joint_dim {
        return Err(Error::shape(format!(
            "heads project to {} and {} but joint_dim is {}",
            vision.d_out(),
            text_head.d_out(),
            record.joint_dim
        )));
    }
    if let Some(d) = expected_joint_dim {
        if d != record.joint_dim {
            return Err(Error::shape(format!(
                "model joint dimension {} does not match configured {d}",
                record.joint_dim
            )));
        }
    }
    Ok(ModelFile {
        model: ModelState::new(vision, text_head, log_tau)?,
        precision: record.precision,
        text_featurizer: record.text_featurizer,
    })
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(file)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>, expected_joint_dim: Option<usize>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text, expected_joint_dim)
}
