//! Hypothetical document sampling for HyDE and its context-augmented form.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::fan_out;
use crate::llm::{CompletionRequest, Gateway};
use crate::templates::{fill, truncate_tokens, Templates};

pub const CONTEXT_DOC_TOKENS: usize = 128;

/// Prompt family, chosen per dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// TREC DL19/DL20 and other web-search question sets.
    #[default]
    WebSearch,
    SciFact,
    /// TREC-COVID and NFCorpus.
    Scientific,
    Fiqa,
    DbPedia,
    /// TREC News and Robust04.
    News,
}

impl TaskFamily {
    fn key(self) -> &'static str {
        match self {
            TaskFamily::WebSearch => "web_search",
            TaskFamily::SciFact => "scifact",
            TaskFamily::Scientific => "scientific",
            TaskFamily::Fiqa => "fiqa",
            TaskFamily::DbPedia => "dbpedia",
            TaskFamily::News => "news",
        }
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    /// Accepts family names and common dataset names.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "web_search" | "dl19" | "dl20" | "msmarco" => TaskFamily::WebSearch,
            "scifact" => TaskFamily::SciFact,
            "scientific" | "trec_covid" | "covid" | "nfcorpus" => TaskFamily::Scientific,
            "fiqa" => TaskFamily::Fiqa,
            "dbpedia" | "dbpedia_entity" => TaskFamily::DbPedia,
            "news" | "trec_news" | "robust04" => TaskFamily::News,
            _ => return Err(Error::UnknownTemplate(s.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HydeConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub task: TaskFamily,
    /// Cap on initially retrieved documents placed in the prompt for the
    /// context-augmented variant; 0 degrades it to plain HyDE.
    pub context_docs: usize,
}

impl Default for HydeConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            temperature: 0.7,
            max_new_tokens: 512,
            task: TaskFamily::WebSearch,
            context_docs: 20,
        }
    }
}

impl HydeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("hyde n_samples must be at least 1".into()));
        }
        if self.max_new_tokens == 0 || self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "hyde sampling parameters invalid: temperature={}, max_new_tokens={}",
                self.temperature, self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// Zero-context prompt when `context_docs` is empty, otherwise the context
/// form with each document cut to its first 128 tokens, one per line.
pub fn render_hyde_prompt(
    templates: &Templates,
    task: TaskFamily,
    query: &str,
    context_docs: &[&str],
) -> Result<String> {
    if context_docs.is_empty() {
        let template = templates.get(&format!("hyde_{}", task.key()))?;
        return Ok(fill(template, &[("query", query)]));
    }
    let template = templates.get(&format!("hyde_prf_{}", task.key()))?;
    let context = context_docs
        .iter()
        .map(|d| truncate_tokens(d, CONTEXT_DOC_TOKENS))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(fill(template, &[("query", query), ("context", &context)]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Non-empty samples in sample-index order.
    pub docs: Vec<String>,
    pub llm_calls: u64,
    pub dropped: usize,
}

/// Draws `n_samples` independent completions. An empty completion is
/// retried once and then dropped.
pub fn generate_hypothetical_docs(
    gateway: &Gateway,
    templates: &Templates,
    config: &HydeConfig,
    query: &str,
    context_docs: &[&str],
) -> Result<Generation> {
    config.validate()?;
    let request = CompletionRequest {
        prompt: render_hyde_prompt(templates, config.task, query, context_docs)?,
        max_new_tokens: config.max_new_tokens,
        temperature: config.temperature,
        want_first_token_logprobs: false,
        top_logprobs: 1,
    };
    let samples = fan_out(config.n_samples, gateway.parallelism(), |_| -> Result<(Option<String>, u64)> {
        let first = gateway.complete(&request)?;
        if !first.text.trim().is_empty() {
            return Ok((Some(first.text), 1));
        }
        let second = gateway.complete(&request)?;
        Ok(((!second.text.trim().is_empty()).then_some(second.text), 2))
    });

    let mut docs = Vec::with_capacity(config.n_samples);
    let mut llm_calls = 0;
    let mut dropped = 0;
    for (i, sample) in samples.into_iter().enumerate() {
        let (text, calls) = sample?;
        llm_calls += calls;
        match text {
            Some(t) => docs.push(t),
            None => {
                tracing::warn!(sample = i, "hypothetical document empty after retry, dropped");
                dropped += 1;
            }
        }
    }
    if docs.is_empty() {
        return Err(Error::AllSamplesEmpty);
    }
    Ok(Generation {
        docs,
        llm_calls,
        dropped,
    })
}
