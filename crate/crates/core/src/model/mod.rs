// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented-model contract shared by every experiment.
//!
//! A model exposes tokenization, a forward pass that can capture internal
//! activations, and a forward pass that replaces activations with supplied
//! tensors. Three sites are addressable:
//!
//! | site                | natural shape (`position` absent) | with `position` |
//! |---------------------|-----------------------------------|-----------------|
//! | `ResidualPre`       | `[seq, d_model]`                  | `[d_model]`     |
//! | `HeadOutput`        | `[seq, d_head]`                   | `[d_head]`      |
//! | `AttentionPattern`  | `[seq, seq]` (query x key)        | `[seq]`         |
//!
//! `ResidualPre` is the residual stream entering a layer. `HeadOutput` is a
//! head's value-weighted output before the output projection mixes heads.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synthetic;
pub mod tokenizer;

pub use synthetic::{make_synthetic_model, AnswerPolicy, SyntheticConfig, SyntheticModel};
pub use tokenizer::{Tokenizer, WordTokenizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error("shape mismatch for {selector}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { selector: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("parameter out of bounds: {0}")]
    Bounds(String),
    #[error("tokenizer unavailable: {0}")]
    TokenizerUnavailable(String),
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    ResidualPre,
    HeadOutput,
    AttentionPattern,
}

impl Site {
    pub fn needs_head(self) -> bool {
        !matches!(self, Site::ResidualPre)
    }
}

/// Address of an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivationSelector {
    pub site: Site,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl ActivationSelector {
    pub fn residual(layer: usize, position: Option<usize>) -> Self {
        ActivationSelector { site: Site::ResidualPre, layer, head: None, position }
    }

    pub fn head_output(layer: usize, head: usize, position: Option<usize>) -> Self {
        ActivationSelector { site: Site::HeadOutput, layer, head: Some(head), position }
    }

    pub fn attention(layer: usize, head: usize, position: Option<usize>) -> Self {
        ActivationSelector { site: Site::AttentionPattern, layer, head: Some(head), position }
    }

    /// Checks the selector against a model and sequence length.
    pub fn validate(&self, info: &ModelInfo, seq_len: usize) -> Result<(), ModelError> {
        if self.layer >= info.num_layers {
            return Err(ModelError::InvalidSelector(format!("{self}: layer >= {}", info.num_layers)));
        }
        match (self.site.needs_head(), self.head) {
            (true, None) => return Err(ModelError::InvalidSelector(format!("{self}: head required"))),
            (false, Some(_)) => return Err(ModelError::InvalidSelector(format!("{self}: head not allowed"))),
            (true, Some(h)) if h >= info.num_heads => {
                return Err(ModelError::InvalidSelector(format!("{self}: head >= {}", info.num_heads)))
            }
            _ => {}
        }
        if let Some(p) = self.position {
            if p >= seq_len {
                return Err(ModelError::InvalidSelector(format!("{self}: position >= sequence length {seq_len}")));
            }
        }
        Ok(())
    }

    /// Shape of the tensor this selector addresses.
    pub fn natural_shape(&self, info: &ModelInfo, seq_len: usize) -> Vec<usize> {
        let width = match self.site {
            Site::ResidualPre => info.d_model,
            Site::HeadOutput => info.d_head(),
            Site::AttentionPattern => seq_len,
        };
        match self.position {
            Some(_) => vec![width],
            None => vec![seq_len, width],
        }
    }

    /// Whether this selector's tensor includes the given sequence position.
    pub fn covers(&self, position: usize) -> bool {
        self.position.is_none_or(|p| p == position)
    }
}

impl fmt::Display for ActivationSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let site = match self.site {
            Site::ResidualPre => "resid_pre",
            Site::HeadOutput => "head_out",
            Site::AttentionPattern => "attn",
        };
        write!(f, "L{}.{site}", self.layer)?;
        if let Some(h) = self.head {
            write!(f, ".H{h}")?;
        }
        if let Some(p) = self.position {
            write!(f, "@{p}")?;
        }
        Ok(())
    }
}

/// Activation payload, row-major `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    pub selector: ActivationSelector,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(selector: ActivationSelector, shape: Vec<usize>, values: Vec<f32>) -> Result<Self, ModelError> {
        let t = ActivationTensor { selector, shape, values };
        t.check_len()?;
        Ok(t)
    }

    fn check_len(&self) -> Result<(), ModelError> {
        let n: usize = self.shape.iter().product();
        if n != self.values.len() {
            return Err(ModelError::ShapeMismatch {
                selector: self.selector.to_string(),
                expected: self.shape.clone(),
                got: vec![self.values.len()],
            });
        }
        Ok(())
    }

    /// Validates the payload against the site's natural shape.
    pub fn check(&self, info: &ModelInfo, seq_len: usize) -> Result<(), ModelError> {
        self.selector.validate(info, seq_len)?;
        self.check_len()?;
        let expected = self.selector.natural_shape(info, seq_len);
        if expected != self.shape {
            return Err(ModelError::ShapeMismatch {
                selector: self.selector.to_string(),
                expected,
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Vector at a sequence position (the whole payload when the selector is
    /// already position-specific).
    pub fn at_position(&self, position: usize) -> Option<&[f32]> {
        match self.selector.position {
            Some(p) if p == position => Some(&self.values),
            Some(_) => None,
            None => {
                let width = *self.shape.get(1)?;
                self.values.get(position * width..(position + 1) * width)
            }
        }
    }

    /// Slice covering one position, re-addressed to that position.
    pub fn select_position(&self, position: usize) -> Option<ActivationTensor> {
        let row = self.at_position(position)?.to_vec();
        Some(ActivationTensor {
            selector: ActivationSelector { position: Some(position), ..self.selector },
            shape: vec![row.len()],
            values: row,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl ModelInfo {
    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0 || self.num_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(ModelError::Bounds(format!("model info must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    /// Logits at the last position.
    pub final_logits: Vec<f32>,
    pub captured: Vec<ActivationTensor>,
}

impl ForwardResult {
    pub fn get(&self, selector: &ActivationSelector) -> Option<&ActivationTensor> {
        self.captured.iter().find(|t| t.selector == *selector)
    }
}

/// A model that can be run with activation capture and activation patching.
///
/// Implementations are deterministic and safe to call concurrently.
pub trait InstrumentedModel: Tokenizer + Send + Sync {
    fn info(&self) -> Result<ModelInfo, ModelError>;

    fn detokenize(&self, ids: &[u32]) -> Result<String, ModelError>;

    fn forward(&self, ids: &[u32], capture: &[ActivationSelector]) -> Result<ForwardResult, ModelError>;

    fn forward_with_patch(&self, ids: &[u32], patches: &[ActivationTensor]) -> Result<ForwardResult, ModelError>;
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy decoding. Stops after `max_new_tokens` or once the decoded
/// continuation contains a period or newline.
pub fn greedy_generate<M: InstrumentedModel + ?Sized>(
    model: &M,
    prompt_ids: &[u32],
    max_new_tokens: usize,
) -> Result<(Vec<u32>, String), ModelError> {
    let mut ids = prompt_ids.to_vec();
    let mut generated = Vec::new();
    let mut text = String::new();
    for _ in 0..max_new_tokens {
        let out = model.forward(&ids, &[])?;
        let next = argmax(&out.final_logits).ok_or(ModelError::Protocol("empty logits".into()))? as u32;
        ids.push(next);
        generated.push(next);
        text = model.detokenize(&generated)?;
        if text.contains(['.', '\n']) {
            break;
        }
    }
    Ok((generated, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info() -> ModelInfo {
        ModelInfo { name: "t".into(), num_layers: 2, num_heads: 2, d_model: 8, vocab_size: 10 }
    }

    #[test]
    fn selector_validation() {
        let i = info();
        assert!(ActivationSelector::residual(1, Some(3)).validate(&i, 4).is_ok());
        assert!(ActivationSelector::residual(2, None).validate(&i, 4).is_err());
        assert!(ActivationSelector::residual(0, Some(4)).validate(&i, 4).is_err());
        assert!(ActivationSelector::head_output(0, 2, None).validate(&i, 4).is_err());
        let no_head = ActivationSelector { site: Site::HeadOutput, layer: 0, head: None, position: None };
        assert!(no_head.validate(&i, 4).is_err());
        let extra_head = ActivationSelector { site: Site::ResidualPre, layer: 0, head: Some(0), position: None };
        assert!(extra_head.validate(&i, 4).is_err());
    }

    #[test]
    fn natural_shapes() {
        let i = info();
        assert_eq!(ActivationSelector::residual(0, None).natural_shape(&i, 5), vec![5, 8]);
        assert_eq!(ActivationSelector::head_output(0, 1, None).natural_shape(&i, 5), vec![5, 4]);
        assert_eq!(ActivationSelector::attention(0, 1, Some(4)).natural_shape(&i, 5), vec![5]);
    }

    #[test]
    fn tensor_shape_checks() {
        let i = info();
        let sel = ActivationSelector::residual(0, None);
        assert!(ActivationTensor::new(sel, vec![2, 8], vec![0.0; 15]).is_err());
        let t = ActivationTensor::new(sel, vec![2, 8], (0..16).map(|v| v as f32).collect()).unwrap();
        assert!(t.check(&i, 2).is_ok());
        assert!(matches!(t.check(&i, 3), Err(ModelError::ShapeMismatch { .. })));
        assert_eq!(t.at_position(1).unwrap()[0], 8.0);
        let row = t.select_position(1).unwrap();
        assert_eq!(row.selector.position, Some(1));
        assert!(row.check(&i, 2).is_ok());
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
