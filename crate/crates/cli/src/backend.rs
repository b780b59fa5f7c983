//! Language-model backend selection shared by the CLI and the service.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::ValueEnum;
use irda_core::llm::{HttpLlm, RecordingLlm, ReplayLlm};
use irda_core::{LanguageModel, RuleAwareStub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LlmChoice {
    /// OpenAI-compatible endpoint configured through IRDA_LLM_* variables.
    Http,
    /// Offline rule-aware stub.
    Stub,
    /// Recorded cassette; unknown requests fail.
    Replay,
}

/// With `http`, a cassette path records every exchange; with `replay` it is required.
pub fn build_llm(choice: LlmChoice, cassette: Option<&Path>) -> anyhow::Result<Arc<dyn LanguageModel>> {
    Ok(match (choice, cassette) {
        (LlmChoice::Stub, _) => Arc::new(RuleAwareStub),
        (LlmChoice::Replay, Some(path)) => {
            Arc::new(ReplayLlm::from_path(path).with_context(|| format!("loading cassette {}", path.display()))?)
        }
        (LlmChoice::Replay, None) => bail!("--llm replay needs --cassette"),
        (LlmChoice::Http, None) => Arc::new(HttpLlm::from_env()?),
        (LlmChoice::Http, Some(path)) => Arc::new(RecordingLlm::new(HttpLlm::from_env()?, path)?),
    })
}
