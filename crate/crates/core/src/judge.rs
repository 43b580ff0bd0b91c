//! Pointwise relevance judging.
//!
//! The LLM judge turns the first-token logprobs of a positive and a negative
//! answer token into `p = softmax(lp_pos, lp_neg)[pos]`; a document counts as
//! relevant only when `p > 0.5`. Oracle (qrels) and lexical (Jaccard)
//! backends share the same contract for offline runs.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Document, Qrels, Query, RankedList, ScoredDoc};
use crate::error::{Error, Result};
use crate::exec::fan_out;
use crate::llm::{CompletionRequest, Gateway};
use crate::templates::{fill, truncate_tokens, Templates};

pub const DEFAULT_MAX_DOC_TOKENS: usize = 128;
pub const DEFAULT_LEXICAL_THRESHOLD: f64 = 0.15;
/// Penalty below the lowest returned logprob for a designated token that
/// fell outside the returned top-K.
const MISSING_TOKEN_PENALTY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTemplateId {
    #[default]
    Default,
    PointwiseYesNo,
    RgYn,
    RgYnStar,
    RaterGuideline,
}

impl JudgeTemplateId {
    pub fn template_name(self) -> &'static str {
        match self {
            JudgeTemplateId::Default => "judge_default",
            JudgeTemplateId::PointwiseYesNo => "judge_pointwise_yes_no",
            JudgeTemplateId::RgYn => "judge_rg_yn",
            JudgeTemplateId::RgYnStar => "judge_rg_yn_star",
            JudgeTemplateId::RaterGuideline => "judge_rater_guideline",
        }
    }

    /// `(positive, negative)` answer tokens the template asks for.
    pub fn default_tokens(self) -> (&'static str, &'static str) {
        match self {
            JudgeTemplateId::Default | JudgeTemplateId::RaterGuideline => ("1", "0"),
            _ => ("Yes", "No"),
        }
    }
}

impl FromStr for JudgeTemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "default" => JudgeTemplateId::Default,
            "pointwise_yes_no" => JudgeTemplateId::PointwiseYesNo,
            "rg_yn" => JudgeTemplateId::RgYn,
            "rg_yn_star" => JudgeTemplateId::RgYnStar,
            "rater_guideline" => JudgeTemplateId::RaterGuideline,
            other => return Err(Error::UnknownTemplate(other.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgePrompt {
    pub template_id: JudgeTemplateId,
    pub rendered: String,
}

pub fn render_judge_prompt(
    templates: &Templates,
    template_id: JudgeTemplateId,
    query_text: &str,
    doc_text: &str,
    max_doc_tokens: usize,
) -> Result<JudgePrompt> {
    if query_text.trim().is_empty() {
        return Err(Error::PreconditionViolation("judge prompt needs query text".into()));
    }
    let template = templates.get(template_id.template_name())?;
    let doc = truncate_tokens(doc_text, max_doc_tokens);
    Ok(JudgePrompt {
        template_id,
        rendered: fill(template, &[("query", query_text), ("document", &doc)]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub doc_id: String,
    pub p_relevant: f64,
    pub label: bool,
}

impl RelevanceJudgment {
    pub fn new(query_id: &str, doc_id: &str, p_relevant: f64) -> Self {
        Self {
            query_id: query_id.to_owned(),
            doc_id: doc_id.to_owned(),
            p_relevant,
            label: p_relevant > 0.5,
        }
    }
}

/// Candidates judged relevant, by descending `p_relevant` then initial rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevantSet {
    pub query_id: String,
    pub docs: Vec<ScoredDoc>,
}

impl RelevantSet {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmJudgeConfig {
    pub template: JudgeTemplateId,
    pub positive_token: Option<String>,
    pub negative_token: Option<String>,
    pub max_doc_tokens: usize,
    pub top_logprobs: u32,
}

impl Default for LlmJudgeConfig {
    fn default() -> Self {
        Self {
            template: JudgeTemplateId::Default,
            positive_token: None,
            negative_token: None,
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            top_logprobs: 20,
        }
    }
}

impl LlmJudgeConfig {
    pub fn tokens(&self) -> (&str, &str) {
        let (pos, neg) = self.template.default_tokens();
        (
            self.positive_token.as_deref().unwrap_or(pos),
            self.negative_token.as_deref().unwrap_or(neg),
        )
    }
}

pub enum JudgeBackend {
    Llm {
        gateway: Arc<Gateway>,
        templates: Arc<Templates>,
        config: LlmJudgeConfig,
    },
    Oracle(Arc<Qrels>),
    Lexical { threshold: f64 },
}

impl std::fmt::Debug for JudgeBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JudgeBackend::Llm { config, .. } => f.debug_struct("Llm").field("config", config).finish(),
            JudgeBackend::Oracle(q) => f.debug_tuple("Oracle").field(&q.query_count()).finish(),
            JudgeBackend::Lexical { threshold } => {
                f.debug_struct("Lexical").field("threshold", threshold).finish()
            }
        }
    }
}

/// Logprob for `token`, falling back to keys that match after trimming
/// whitespace; several matching variants are combined with log-sum-exp.
fn token_logprob(map: &BTreeMap<String, f64>, token: &str) -> Option<f64> {
    if let Some(&lp) = map.get(token) {
        return Some(lp);
    }
    let variants: Vec<f64> = map
        .iter()
        .filter(|(k, _)| k.trim() == token)
        .map(|(_, &v)| v)
        .collect();
    let max = variants.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (!variants.is_empty()).then(|| max + variants.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Two-token softmax over first-token logprobs, with the missing-token rule.
pub fn relevance_probability(
    logprobs: &BTreeMap<String, f64>,
    positive: &str,
    negative: &str,
) -> Option<f64> {
    let floor = logprobs.values().copied().fold(f64::INFINITY, f64::min) - MISSING_TOKEN_PENALTY;
    let (pos, neg) = match (token_logprob(logprobs, positive), token_logprob(logprobs, negative)) {
        (None, None) => return None,
        (Some(p), None) => (p, floor),
        (None, Some(n)) => (floor, n),
        (Some(p), Some(n)) => (p, n),
    };
    Some(1.0 / (1.0 + (neg - pos).exp()))
}

fn jaccard(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = tokenize(a).into_iter().collect();
    let b: HashSet<String> = tokenize(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

impl JudgeBackend {
    pub fn lexical() -> Self {
        JudgeBackend::Lexical {
            threshold: DEFAULT_LEXICAL_THRESHOLD,
        }
    }

    fn parallelism(&self) -> usize {
        match self {
            JudgeBackend::Llm { gateway, .. } => gateway.parallelism(),
            _ => 1,
        }
    }

    /// Scores one document. The second value is the number of completion
    /// calls issued.
    pub fn score(&self, query: &Query, doc: &Document) -> (Result<RelevanceJudgment>, u64) {
        match self {
            JudgeBackend::Oracle(qrels) => {
                let rel = qrels.relevance(&query.query_id, &doc.doc_id).unwrap_or(0);
                let p = if rel > 0 { 1.0 } else { 0.0 };
                (Ok(RelevanceJudgment::new(&query.query_id, &doc.doc_id, p)), 0)
            }
            JudgeBackend::Lexical { threshold } => {
                let p = if jaccard(&query.text, doc.contents()) >= *threshold { 1.0 } else { 0.0 };
                (Ok(RelevanceJudgment::new(&query.query_id, &doc.doc_id, p)), 0)
            }
            JudgeBackend::Llm {
                gateway,
                templates,
                config,
            } => {
                let prompt = match render_judge_prompt(
                    templates,
                    config.template,
                    &query.text,
                    doc.contents(),
                    config.max_doc_tokens,
                ) {
                    Ok(p) => p,
                    Err(e) => return (Err(e), 0),
                };
                let request = CompletionRequest {
                    prompt: prompt.rendered,
                    max_new_tokens: 1,
                    temperature: 0.0,
                    want_first_token_logprobs: true,
                    top_logprobs: config.top_logprobs,
                };
                let result = gateway.complete(&request).and_then(|resp| {
                    let logprobs = resp.first_token_logprobs.ok_or(Error::LogprobsUnsupported)?;
                    let (pos, neg) = config.tokens();
                    let p = relevance_probability(&logprobs, pos, neg).ok_or_else(|| {
                        Error::JudgeUnavailable {
                            doc_id: doc.doc_id.clone(),
                        }
                    })?;
                    Ok(RelevanceJudgment::new(&query.query_id, &doc.doc_id, p))
                });
                (result, 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDoc {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub relevant: RelevantSet,
    /// One entry per successfully judged candidate, in candidate order.
    pub judgments: Vec<RelevanceJudgment>,
    pub skipped: Vec<SkippedDoc>,
    pub llm_calls: u64,
}

/// Judges every candidate once. Per-document failures are recorded as
/// skipped; the call fails only when every candidate failed.
pub fn judge_candidates(
    backend: &JudgeBackend,
    corpus: &Corpus,
    query: &Query,
    candidates: &RankedList,
) -> Result<JudgeOutcome> {
    let results = fan_out(candidates.len(), backend.parallelism(), |i| {
        let doc_id = &candidates.entries[i].doc_id;
        match corpus.get(doc_id) {
            Some(doc) => backend.score(query, doc),
            None => (Err(Error::UnknownDocId(doc_id.clone())), 0),
        }
    });

    let mut judgments = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    let mut llm_calls = 0;
    for (entry, (result, calls)) in candidates.entries.iter().zip(results) {
        llm_calls += calls;
        match result {
            Ok(j) => judgments.push(j),
            Err(e) => {
                tracing::warn!(query = %query.query_id, doc = %entry.doc_id, error = %e, "skipped judgment");
                skipped.push(SkippedDoc {
                    doc_id: entry.doc_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if judgments.is_empty() && !candidates.is_empty() {
        return Err(Error::AllJudgmentsFailed(query.query_id.clone()));
    }

    let mut relevant: Vec<&RelevanceJudgment> = judgments.iter().filter(|j| j.label).collect();
    // Stable sort keeps candidate rank order among equal probabilities.
    relevant.sort_by(|a, b| b.p_relevant.total_cmp(&a.p_relevant));
    let relevant = RelevantSet {
        query_id: query.query_id.clone(),
        docs: relevant
            .into_iter()
            .map(|j| ScoredDoc {
                doc_id: j.doc_id.clone(),
                score: j.p_relevant,
            })
            .collect(),
    };
    Ok(JudgeOutcome {
        relevant,
        judgments,
        skipped,
        llm_calls,
    })
}
