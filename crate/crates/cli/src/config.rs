//! Run configuration: one JSON file, paths resolved against its directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use rede_core::corpus::{load_corpus, load_qrels, load_queries, Corpus, Qrels, Query, RecordFormat};
use rede_core::dense::{DenseIndex, Encoder, HashingEncoder, HttpEncoder, Similarity};
use rede_core::judge::{JudgeBackend, LlmJudgeConfig, DEFAULT_LEXICAL_THRESHOLD};
use rede_core::llm::{Gateway, HttpBackend, HttpBackendConfig, MockBackend};
use rede_core::pipeline::{PipelineConfig, Retriever, SearchConfig};
use rede_core::sparse::{Bm25Params, SparseIndex};
use rede_core::templates::Templates;
use rede_core::eval::Gain;
use rede_core::hybrid::FusionConfig;
use rede_core::hyde::HydeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPaths {
    pub vectors: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Hashing { dim: usize },
    Http {
        url: String,
        dim: usize,
        #[serde(default = "default_encoder_timeout")]
        timeout_ms: u64,
    },
}

fn default_encoder_timeout() -> u64 {
    30_000
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Hashing { dim: 256 }
    }
}

impl EncoderSpec {
    pub fn build(&self) -> Result<Box<dyn Encoder>> {
        Ok(match self {
            EncoderSpec::Hashing { dim } => Box::new(HashingEncoder::new(*dim)?),
            EncoderSpec::Http { url, dim, timeout_ms } => {
                Box::new(HttpEncoder::new(url.clone(), *dim, Duration::from_millis(*timeout_ms)))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewaySpec {
    Mock {
        script: PathBuf,
        #[serde(default = "one")]
        parallelism: usize,
    },
    Http {
        #[serde(flatten)]
        backend: HttpBackendConfig,
        #[serde(default = "one")]
        parallelism: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeSpec {
    Llm(LlmJudgeConfig),
    Oracle,
    Lexical {
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

fn default_threshold() -> f64 {
    DEFAULT_LEXICAL_THRESHOLD
}

impl Default for JudgeSpec {
    fn default() -> Self {
        JudgeSpec::Llm(LlmJudgeConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub k: usize,
    pub gain: Gain,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { k: 10, gain: Gain::Linear }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    /// Prebuilt index; built from the corpus when absent.
    pub sparse_index: Option<PathBuf>,
    pub embeddings: Option<EmbeddingPaths>,
    /// Directory of `<name>.txt` files overriding built-in prompts.
    pub templates: Option<PathBuf>,
    pub encoder: EncoderSpec,
    pub gateway: Option<GatewaySpec>,
    pub judge: JudgeSpec,
    pub pipeline: PipelineConfig,
    pub fusion: FusionConfig,
    pub hyde: HydeConfig,
    pub bm25: Bm25Params,
    pub similarity: Similarity,
    pub eval: EvalSpec,
    /// Forwarded to HTTP gateways that accept a sampling seed.
    pub seed: u64,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require(p: &Path, what: &str) -> Result<()> {
    ensure!(p.is_file(), "{what} file not found: {}", p.display());
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.corpus, &mut self.queries, &mut self.qrels, &mut self.sparse_index, &mut self.templates]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        if let Some(e) = &mut self.embeddings {
            resolve(base, &mut e.vectors);
            resolve(base, &mut e.manifest);
        }
        if let Some(GatewaySpec::Mock { script, .. }) = &mut self.gateway {
            resolve(base, script);
        }
    }

    /// Checks that referenced files exist and settings are in range.
    pub fn validate(&self) -> Result<()> {
        for (p, what) in [
            (&self.corpus, "corpus"),
            (&self.queries, "queries"),
            (&self.qrels, "qrels"),
            (&self.sparse_index, "sparse index"),
        ] {
            if let Some(p) = p {
                require(p, what)?;
            }
        }
        if let Some(e) = &self.embeddings {
            require(&e.vectors, "embedding vectors")?;
            require(&e.manifest, "embedding manifest")?;
        }
        if let Some(t) = &self.templates {
            ensure!(t.is_dir(), "templates directory not found: {}", t.display());
        }
        if let Some(GatewaySpec::Mock { script, .. }) = &self.gateway {
            require(script, "mock script")?;
        }
        self.search_config().validate()?;
        self.bm25.validate()?;
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            pipeline: self.pipeline.clone(),
            fusion: self.fusion,
            hyde: self.hyde.clone(),
        }
    }

    pub fn queries_path(&self, flag: Option<&Path>) -> Result<PathBuf> {
        match (flag, &self.queries) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) => Ok(p.clone()),
            (None, None) => bail!("no queries file given (use --queries or set \"queries\" in the config)"),
        }
    }
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    Ok(load_queries(path, RecordFormat::from_path(path))?)
}

/// Owns every resource a search borrows.
pub struct Engine {
    pub corpus: Corpus,
    pub sparse: SparseIndex,
    pub dense: DenseIndex,
    pub encoder: Box<dyn Encoder>,
    pub judge: JudgeBackend,
    pub gateway: Option<Arc<Gateway>>,
    pub templates: Arc<Templates>,
    pub search: SearchConfig,
}

impl Engine {
    pub fn build(config: &RunConfig, gateway_url: Option<&str>) -> Result<Self> {
        config.validate()?;
        let Some(corpus_path) = &config.corpus else {
            bail!("config has no \"corpus\" path");
        };
        let corpus = load_corpus(corpus_path, RecordFormat::from_path(corpus_path))?;
        let sparse = match &config.sparse_index {
            Some(p) => SparseIndex::load(p)?,
            None => SparseIndex::build(&corpus, config.bm25)?,
        };
        let Some(emb) = &config.embeddings else {
            bail!("config has no \"embeddings\" section");
        };
        let dense = DenseIndex::ingest(&emb.vectors, &emb.manifest)?.with_similarity(config.similarity);
        let encoder = config.encoder.build()?;
        ensure!(
            encoder.dim() == dense.dim(),
            "encoder dimension {} does not match embeddings in {} (dim {})",
            encoder.dim(),
            emb.manifest.display(),
            dense.dim()
        );
        let templates = Arc::new(match &config.templates {
            Some(dir) => Templates::with_overrides(dir)?,
            None => Templates::default(),
        });
        let gateway = config
            .gateway
            .as_ref()
            .map(|g| build_gateway(g, gateway_url, config.seed))
            .transpose()?
            .map(Arc::new);
        let judge = match &config.judge {
            JudgeSpec::Llm(judge_config) => {
                let Some(gateway) = &gateway else {
                    bail!("the llm judge needs a \"gateway\" section");
                };
                JudgeBackend::Llm {
                    gateway: gateway.clone(),
                    templates: templates.clone(),
                    config: judge_config.clone(),
                }
            }
            JudgeSpec::Oracle => {
                let Some(p) = &config.qrels else {
                    bail!("the oracle judge needs a \"qrels\" path");
                };
                JudgeBackend::Oracle(Arc::new(load_qrels(p)?))
            }
            JudgeSpec::Lexical { threshold } => JudgeBackend::Lexical { threshold: *threshold },
        };
        Ok(Self {
            corpus,
            sparse,
            dense,
            encoder,
            judge,
            gateway,
            templates,
            search: config.search_config(),
        })
    }

    pub fn retriever(&self) -> Retriever<'_> {
        Retriever {
            corpus: &self.corpus,
            sparse: &self.sparse,
            dense: &self.dense,
            encoder: self.encoder.as_ref(),
            judge: &self.judge,
            gateway: self.gateway.as_deref(),
            templates: &self.templates,
        }
    }
}

fn build_gateway(spec: &GatewaySpec, url_override: Option<&str>, seed: u64) -> Result<Gateway> {
    Ok(match spec {
        GatewaySpec::Mock { script, parallelism } => {
            if url_override.is_some() {
                tracing::debug!("gateway url override ignored for the mock backend");
            }
            Gateway::new(MockBackend::from_script_file(script)?).with_parallelism(*parallelism)
        }
        GatewaySpec::Http { backend, parallelism } => {
            let mut backend = backend.clone();
            if let Some(url) = url_override {
                backend.url = url.to_owned();
            }
            backend.seed = backend.seed.or(Some(seed));
            Gateway::new(HttpBackend::new(backend)).with_parallelism(*parallelism)
        }
    })
}

pub fn load_qrels_file(path: &Path) -> Result<Qrels> {
    Ok(load_qrels(path)?)
}
