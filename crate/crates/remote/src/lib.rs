// SPDX-License-Identifier: MIT OR Apache-2.0

//! Client for models served over the instrumentation HTTP protocol.
//!
//! [`RemoteModel`] implements [`InstrumentedModel`] on top of four
//! endpoints: `GET /v1/info`, `POST /v1/tokenize`, `POST /v1/forward` and
//! `POST /v1/forward_patched`. Calls are blocking and the client may be
//! shared across threads.
//!
//! The protocol has no detokenize endpoint. Detokenization goes through a
//! lexicon built by tokenizing the task vocabulary once, on first use; ids
//! outside it render as `<id:N>`.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use statetrack::model::{
    ActivationSelector, ActivationTensor, ForwardResult, InstrumentedModel, ModelError, ModelInfo, Tokenizer,
    WordTokenizer,
};

pub mod wire;

use wire::{ErrorBody, ForwardRequest, ForwardResponse, PatchRequest, PatchResponse, TokenizeRequest, TokenizeResponse, WireTensor};

/// Environment variable holding the bearer token sent to the endpoint.
pub const TOKEN_ENV: &str = "STATETRACK_TOKEN";

const TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug)]
pub struct RemoteModel {
    base: String,
    client: Client,
    token: Option<String>,
    info: ModelInfo,
    vocabulary: Vec<String>,
    lexicon: OnceLock<HashMap<u32, String>>,
}

impl RemoteModel {
    /// Connects using the token in [`TOKEN_ENV`], if set.
    pub fn connect(endpoint: &str) -> Result<Self, ModelError> {
        Self::connect_with_token(endpoint, std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()))
    }

    pub fn connect_with_token(endpoint: &str, token: Option<String>) -> Result<Self, ModelError> {
        let client = Client::builder()
            .timeout(TIMEOUT)
            .build()
            .map_err(|e| ModelError::EndpointUnreachable(e.to_string()))?;
        let base = endpoint.trim_end_matches('/').to_owned();
        let placeholder = ModelInfo { name: String::new(), num_layers: 0, num_heads: 0, d_model: 0, vocab_size: 0 };
        let vocabulary = (0..WordTokenizer::standard().vocab_size() as u32)
            .map(|i| WordTokenizer::standard().piece(i).to_owned())
            .skip(1)
            .collect();
        let mut model =
            RemoteModel { base, client, token, info: placeholder, vocabulary, lexicon: OnceLock::new() };
        let info: ModelInfo = model.send(model.client.get(model.url("info")))?;
        info.validate()?;
        model.info = info;
        Ok(model)
    }

    /// Replaces the strings used to build the detokenization lexicon.
    pub fn with_vocabulary(mut self, pieces: impl IntoIterator<Item = String>) -> Self {
        self.vocabulary = pieces.into_iter().collect();
        self.lexicon = OnceLock::new();
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ModelError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().map_err(|e| {
            if e.is_connect() || e.is_timeout() {
                ModelError::EndpointUnreachable(format!("{}: {e}", self.base))
            } else {
                ModelError::Protocol(e.to_string())
            }
        })?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| ModelError::Protocol(e.to_string()))?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ErrorBody>(&body) {
                Ok(err) => err.into_model_error(status.as_u16()),
                Err(_) => ModelError::Protocol(format!("HTTP {status}: {}", String::from_utf8_lossy(&body))),
            });
        }
        serde_json::from_slice(&body).map_err(|e| ModelError::Protocol(format!("malformed response: {e}")))
    }

    fn lexicon(&self) -> Result<&HashMap<u32, String>, ModelError> {
        if let Some(l) = self.lexicon.get() {
            return Ok(l);
        }
        let mut map = HashMap::new();
        for piece in &self.vocabulary {
            if let [id] = self.tokenize(piece)?.as_slice() {
                map.entry(*id).or_insert_with(|| piece.clone());
            }
        }
        Ok(self.lexicon.get_or_init(|| map))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        match ids.iter().find(|&&i| i as usize >= self.info.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab_size: self.info.vocab_size }),
            None => Ok(()),
        }
    }
}

impl Tokenizer for RemoteModel {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        let req = self.client.post(self.url("tokenize")).json(&TokenizeRequest { text: text.to_owned() });
        let resp: TokenizeResponse = self.send(req).map_err(|e| match e {
            ModelError::EndpointUnreachable(m) => ModelError::TokenizerUnavailable(m),
            other => other,
        })?;
        Ok(resp.ids)
    }
}

impl InstrumentedModel for RemoteModel {
    fn info(&self) -> Result<ModelInfo, ModelError> {
        Ok(self.info.clone())
    }

    fn detokenize(&self, ids: &[u32]) -> Result<String, ModelError> {
        let lex = self.lexicon()?;
        Ok(ids.iter().map(|id| lex.get(id).cloned().unwrap_or_else(|| format!("<id:{id}>"))).collect())
    }

    fn forward(&self, ids: &[u32], capture: &[ActivationSelector]) -> Result<ForwardResult, ModelError> {
        self.check_ids(ids)?;
        for sel in capture {
            sel.validate(&self.info, ids.len())?;
        }
        let req = self.client.post(self.url("forward")).json(&ForwardRequest { ids: ids.to_vec(), capture: capture.to_vec() });
        let resp: ForwardResponse = self.send(req)?;
        let captured = resp.captured.iter().map(WireTensor::to_tensor).collect::<Result<Vec<_>, _>>()?;
        for t in &captured {
            t.check(&self.info, ids.len())?;
        }
        let final_logits = resp.final_logits.decode()?;
        if final_logits.len() != self.info.vocab_size {
            return Err(ModelError::Protocol(format!(
                "{} logits for a vocabulary of {}",
                final_logits.len(),
                self.info.vocab_size
            )));
        }
        Ok(ForwardResult { final_logits, captured })
    }

    fn forward_with_patch(&self, ids: &[u32], patches: &[ActivationTensor]) -> Result<ForwardResult, ModelError> {
        self.check_ids(ids)?;
        for p in patches {
            p.check(&self.info, ids.len())?;
        }
        let body = PatchRequest { ids: ids.to_vec(), patches: patches.iter().map(WireTensor::from_tensor).collect() };
        let resp: PatchResponse = self.send(self.client.post(self.url("forward_patched")).json(&body))?;
        Ok(ForwardResult { final_logits: resp.final_logits.decode()?, captured: Vec::new() })
    }
}
