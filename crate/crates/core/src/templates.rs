//! Prompt templates with `{name}` placeholders.
//!
//! The built-in set is compiled from `templates/*.txt`; a directory of
//! same-named files can override any of them.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

const BUILTIN: &[(&str, &str)] = &[
    ("judge_default", include_str!("../templates/judge_default.txt")),
    ("judge_pointwise_yes_no", include_str!("../templates/judge_pointwise_yes_no.txt")),
    ("judge_rg_yn", include_str!("../templates/judge_rg_yn.txt")),
    ("judge_rg_yn_star", include_str!("../templates/judge_rg_yn_star.txt")),
    ("judge_rater_guideline", include_str!("../templates/judge_rater_guideline.txt")),
    ("hyde_web_search", include_str!("../templates/hyde_web_search.txt")),
    ("hyde_scifact", include_str!("../templates/hyde_scifact.txt")),
    ("hyde_scientific", include_str!("../templates/hyde_scientific.txt")),
    ("hyde_fiqa", include_str!("../templates/hyde_fiqa.txt")),
    ("hyde_dbpedia", include_str!("../templates/hyde_dbpedia.txt")),
    ("hyde_news", include_str!("../templates/hyde_news.txt")),
    ("hyde_prf_web_search", include_str!("../templates/hyde_prf_web_search.txt")),
    ("hyde_prf_scifact", include_str!("../templates/hyde_prf_scifact.txt")),
    ("hyde_prf_scientific", include_str!("../templates/hyde_prf_scientific.txt")),
    ("hyde_prf_fiqa", include_str!("../templates/hyde_prf_fiqa.txt")),
    ("hyde_prf_dbpedia", include_str!("../templates/hyde_prf_dbpedia.txt")),
    ("hyde_prf_news", include_str!("../templates/hyde_prf_news.txt")),
];

#[derive(Debug, Clone)]
pub struct Templates {
    by_name: HashMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            by_name: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end_matches('\n').to_owned()))
                .collect(),
        }
    }
}

impl Templates {
    /// Built-ins overridden by any `<name>.txt` found in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut templates = Self::default();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            templates
                .by_name
                .insert(name.to_owned(), body.trim_end_matches('\n').to_owned());
        }
        Ok(templates)
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        self.by_name
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownTemplate(name.to_owned()))
    }
}

/// Single-pass substitution, so placeholder-like text inside a value is left
/// alone. Unknown `{...}` sequences are copied through.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (v, close))
        });
        match hit {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// First `max_tokens` whitespace-separated tokens, joined by single spaces.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    text.split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}
