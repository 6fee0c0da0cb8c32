// SPDX-License-Identifier: MIT OR Apache-2.0

//! Where model calls go: the in-process synthetic model or a remote server.

use statetrack::model::{InstrumentedModel, ModelInfo, SyntheticConfig, Tokenizer, WordTokenizer};
use statetrack::{Dfa, SyntheticModel};
use statetrack_remote::RemoteModel;

use crate::config::ExperimentConfig;
use crate::RunError;

pub enum Backend {
    /// A fresh synthetic model per automaton; box and fruit prompts need none.
    Synthetic(SyntheticConfig),
    Remote(RemoteModel),
}

impl Backend {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self, RunError> {
        if config.is_synthetic() {
            // Surface bad synthetic settings before any work starts.
            SyntheticModel::new(None, config.synthetic)?;
            Ok(Backend::Synthetic(config.synthetic))
        } else {
            let remote = RemoteModel::connect(&config.model_endpoint)?;
            remote.info()?;
            Ok(Backend::Remote(remote))
        }
    }

    pub fn info(&self) -> Result<ModelInfo, RunError> {
        match self {
            Backend::Synthetic(c) => Ok(SyntheticModel::new(None, *c)?.info()?),
            Backend::Remote(r) => Ok(r.info()?),
        }
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        match self {
            Backend::Synthetic(_) => WordTokenizer::standard(),
            Backend::Remote(r) => r,
        }
    }

    /// Runs `f` against a model that knows `dfa` when it is synthetic.
    pub fn with_model<R>(
        &self,
        dfa: Option<&Dfa>,
        f: impl FnOnce(&dyn InstrumentedModel) -> Result<R, RunError>,
    ) -> Result<R, RunError> {
        match self {
            Backend::Synthetic(c) => f(&SyntheticModel::new(dfa.cloned(), *c)?),
            Backend::Remote(r) => f(r),
        }
    }
}
