// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON bodies of the instrumentation protocol.
//!
//! Tensors travel as base64 of little-endian `f32` bytes, which keeps them
//! bit-exact. `final_logits` uses the same encoding; a plain JSON number
//! array is also accepted when decoding.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use statetrack::model::{ActivationSelector, ActivationTensor, ModelError};

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, ModelError> {
    let bytes = STANDARD.decode(text).map_err(|e| ModelError::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(ModelError::Protocol(format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub selector: ActivationSelector,
    pub shape: Vec<usize>,
    pub values_b64: String,
}

impl WireTensor {
    pub fn from_tensor(t: &ActivationTensor) -> Self {
        WireTensor { selector: t.selector, shape: t.shape.clone(), values_b64: encode_f32(&t.values) }
    }

    pub fn to_tensor(&self) -> Result<ActivationTensor, ModelError> {
        ActivationTensor::new(self.selector, self.shape.clone(), decode_f32(&self.values_b64)?)
    }
}

/// Logits as sent (base64) or as a plain array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireLogits {
    Base64(String),
    Plain(Vec<f32>),
}

impl WireLogits {
    pub fn encode(values: &[f32]) -> Self {
        WireLogits::Base64(encode_f32(values))
    }

    pub fn decode(&self) -> Result<Vec<f32>, ModelError> {
        match self {
            WireLogits::Base64(s) => decode_f32(s),
            WireLogits::Plain(v) => Ok(v.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardRequest {
    pub ids: Vec<u32>,
    #[serde(default)]
    pub capture: Vec<ActivationSelector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardResponse {
    pub final_logits: WireLogits,
    #[serde(default)]
    pub captured: Vec<WireTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRequest {
    pub ids: Vec<u32>,
    pub patches: Vec<WireTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchResponse {
    pub final_logits: WireLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    /// Error code and HTTP status a server should use for a model error.
    pub fn from_model_error(e: &ModelError) -> (u16, ErrorBody) {
        let (status, code) = match e {
            ModelError::InvalidSelector(_) => (400, "invalid_selector"),
            ModelError::ShapeMismatch { .. } => (400, "shape_mismatch"),
            ModelError::EmptySequence => (400, "empty_sequence"),
            ModelError::TokenOutOfRange { .. } => (400, "token_out_of_range"),
            ModelError::Bounds(_) => (413, "sequence_too_long"),
            _ => (500, "internal"),
        };
        (status, ErrorBody { code: code.into(), message: e.to_string() })
    }

    /// Maps a server error back to the closest [`ModelError`].
    pub fn into_model_error(self, status: u16) -> ModelError {
        match self.code.as_str() {
            "invalid_selector" => ModelError::InvalidSelector(self.message),
            "empty_sequence" => ModelError::EmptySequence,
            "sequence_too_long" => ModelError::Bounds(self.message),
            _ => ModelError::Protocol(format!("HTTP {status} {}: {}", self.code, self.message)),
        }
    }
}
