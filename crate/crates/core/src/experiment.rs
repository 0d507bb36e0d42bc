//! End-to-end stages over a working directory, and the experiment driver that
//! chains them.
//!
//! ```text
//! <root>/dataset/      prepared split (see corpus::store)
//! <root>/embeddings/   <tag>.jsonl cache, items.bin, embed.config.json
//! <root>/matrices/     semantic.bin, collab.bin, counts.bin and their .config.json
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::artifact::{self, sha256_hex, ArtifactError};
use crate::collab::{build_interaction_matrix, collaborative_similarity, CountScope, SparseInteractionMatrix};
use crate::corpus::{
    self, align_metadata, build_sequences, kcore_filter, leave_one_out_split, CorpusError, DatasetStats, ItemMeta,
    KcoreMode, SplitDataset,
};
use crate::embed::{
    build_item_prompt, embed_items, semantic_similarity, EmbedError, EmbeddingCache, EmbeddingMatrix,
    EmbeddingProviderSpec, DEFAULT_PROMPT_BUDGET,
};
use crate::eval::{locate, summarize, MetricReport, Prediction, UserOutcome};
use crate::http::HttpError;
use crate::matrix::SimilarityMatrix;
use crate::rank::{rank_user, AuditRecord, PromptContext, PromptInfoFlags, RankStrategy, RankerError, RankerSpec};
use crate::retrieval::{retrieve_top_k, HistoryItem, RetrievalConfig, RetrievalError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error("user {user}: {source}")]
    Retrieval { user: usize, source: RetrievalError },
    #[error("cannot read {}: {source}", path.display())]
    Input { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Stale(String),
}

/// Paths of every artifact under one working directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings/items.bin")
    }

    pub fn embed_config(&self) -> PathBuf {
        self.root.join("embeddings/embed.config.json")
    }

    pub fn embed_cache(&self, tag: &str) -> PathBuf {
        self.root.join("embeddings").join(format!("{tag}.jsonl"))
    }

    pub fn semantic(&self) -> PathBuf {
        self.root.join("matrices/semantic.bin")
    }

    pub fn collab(&self) -> PathBuf {
        self.root.join("matrices/collab.bin")
    }

    pub fn counts(&self) -> PathBuf {
        self.root.join("matrices/counts.bin")
    }
}

/// `runs/x.jsonl` -> `runs/x.config.json`: the config stored next to an output.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>, PipelineError> {
    let file = File::open(path).map_err(|source| PipelineError::Input { path: path.to_owned(), source })?;
    Ok(if path.extension().is_some_and(|e| e == "gz") {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

/// Reads raw reviews (and optionally metadata), applies the k-core filter and
/// the leave-one-out split, and writes the dataset directory.
pub fn prepare(
    reviews: &Path,
    metadata: Option<&Path>,
    layout: &Layout,
    k: usize,
    mode: KcoreMode,
) -> Result<DatasetStats, PipelineError> {
    let parsed = corpus::parse_reviews(open_maybe_gz(reviews)?)?;
    if parsed.skipped > 0 {
        warn!("{}: {} malformed review lines skipped", reviews.display(), parsed.skipped);
    }
    let kept = kcore_filter(&parsed.records, k, mode)?;
    let data = leave_one_out_split(build_sequences(&kept))?;
    let meta = match metadata {
        Some(path) => {
            let parsed = corpus::parse_metadata(open_maybe_gz(path)?)?;
            if parsed.skipped > 0 {
                warn!("{}: {} malformed metadata lines skipped", path.display(), parsed.skipped);
            }
            align_metadata(&data.items, parsed.records)
        }
        None => vec![None; data.items.len()],
    };
    corpus::store::write_dataset(&layout.dataset(), &data, &meta)?;
    Ok(corpus::dataset_stats(&data))
}

pub fn load_dataset(layout: &Layout) -> Result<(SplitDataset, Vec<Option<ItemMeta>>), PipelineError> {
    Ok(corpus::store::read_dataset(&layout.dataset())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbedRecord {
    tag: String,
    provider: EmbeddingProviderSpec,
    prompt_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SemanticRecord {
    embeddings: String,
    topk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CollabRecord {
    scope: CountScope,
}

/// Embeds every item's metadata prompt through `spec`, reusing the on-disk
/// cache, and stores the embedding matrix.
pub fn embed(layout: &Layout, spec: &EmbeddingProviderSpec, budget: usize) -> Result<EmbeddingMatrix, PipelineError> {
    let (data, meta) = load_dataset(layout)?;
    let provider = spec.build()?;
    let tag = provider.tag();
    let mut prompts = Vec::new();
    for (item, m) in meta.iter().enumerate() {
        match m.as_ref().map(|m| build_item_prompt(item, m, budget)) {
            Some(Ok(p)) => prompts.push(p),
            Some(Err(e)) => warn!("{e}; it gets a zero embedding"),
            None => warn!("item {item} has no metadata; it gets a zero embedding"),
        }
    }
    let mut cache = EmbeddingCache::open(&layout.embed_cache(&tag), tag.clone())?;
    let matrix = embed_items(&*provider, &prompts, data.items.len(), &mut cache, spec.batch_size, spec.fan_out)?;
    matrix.write(&layout.embeddings())?;
    let record = EmbedRecord { tag, provider: spec.clone(), prompt_budget: budget };
    artifact::write_json(&layout.embed_config(), &record)?;
    Ok(matrix)
}

pub fn build_semantic(layout: &Layout, topk: Option<usize>) -> Result<SimilarityMatrix, PipelineError> {
    artifact::require(&layout.embeddings(), "embed")?;
    let e = EmbeddingMatrix::read(&layout.embeddings())?;
    let matrix = semantic_similarity(&e, topk);
    matrix.write(&layout.semantic())?;
    let record = SemanticRecord { embeddings: e.provider_tag().to_string(), topk };
    artifact::write_json(&sidecar(&layout.semantic()), &record)?;
    Ok(matrix)
}

pub fn build_collab(
    layout: &Layout,
    scope: CountScope,
) -> Result<(SimilarityMatrix, SparseInteractionMatrix), PipelineError> {
    let (data, _) = load_dataset(layout)?;
    let counts = build_interaction_matrix(&data, scope);
    let matrix = collaborative_similarity(&counts);
    counts.write(&layout.counts())?;
    matrix.write(&layout.collab())?;
    artifact::write_json(&sidecar(&layout.collab()), &CollabRecord { scope })?;
    Ok((matrix, counts))
}

/// One user's candidate list, in its current order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub user: usize,
    /// History items shown to rankers, oldest first.
    pub history: Vec<usize>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item: usize,
    pub score: f64,
}

impl RunRecord {
    pub fn items(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.item).collect()
    }
}

pub fn predictions(records: &[RunRecord]) -> Vec<Prediction> {
    records.iter().map(|r| Prediction { user: r.user, items: r.items() }).collect()
}

/// Held-out test item of every user.
pub fn test_items(data: &SplitDataset) -> Vec<usize> {
    data.split.iter().map(|u| u.test.item).collect()
}

/// Candidate retrieval for every user from the train and validation items.
pub fn retrieve_all(
    data: &SplitDataset,
    semantic: &SimilarityMatrix,
    collab: &SimilarityMatrix,
    cfg: &RetrievalConfig,
) -> Result<Vec<RunRecord>, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    if semantic.len() != data.items.len() || collab.len() != data.items.len() {
        return Err(PipelineError::Stale(format!(
            "matrices cover {} / {} items but the dataset has {}; rebuild them with `star build-semantic` and `star build-collab`",
            semantic.len(),
            collab.len(),
            data.items.len()
        )));
    }
    data.split
        .par_iter()
        .map(|u| {
            let history: Vec<HistoryItem> = u
                .input_sequence()
                .iter()
                .map(|i| HistoryItem { item: i.item, rating: i.rating })
                .collect();
            let candidates = retrieve_top_k(u.user, &history, cfg, semantic, collab)
                .map_err(|source| PipelineError::Retrieval { user: u.user, source })?;
            let h = cfg.history_len.map_or(history.len(), |l| l.min(history.len()));
            Ok(RunRecord {
                user: u.user,
                history: history[history.len() - h..].iter().map(|e| e.item).collect(),
                candidates: candidates.iter().map(|c| Candidate { item: c.item, score: c.score }).collect(),
            })
        })
        .collect()
}

/// Ranking settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSection {
    pub strategy: RankStrategy,
    pub ranker: RankerSpec,
    #[serde(default)]
    pub flags: PromptInfoFlags,
}

/// Reranks every record. Users are processed in parallel; the output and the
/// audit trail come back in input order.
pub fn rank_all(
    records: &[RunRecord],
    section: &RankSection,
    truth: &[usize],
    metadata: &[Option<ItemMeta>],
    counts: &SparseInteractionMatrix,
) -> Result<(Vec<RunRecord>, Vec<AuditRecord>), PipelineError> {
    let ranker = section.ranker.build(truth, metadata)?;
    let ctx = PromptContext { metadata, counts, flags: section.flags };
    let ranked: Vec<(RunRecord, Vec<AuditRecord>)> = records
        .par_iter()
        .map(|r| {
            let out = rank_user(r.user, &r.history, &r.items(), &section.strategy, &*ranker, &ctx);
            let score_of = |item: usize| r.candidates.iter().find(|c| c.item == item).map_or(0.0, |c| c.score);
            let candidates = out.items.iter().map(|&item| Candidate { item, score: score_of(item) }).collect();
            (RunRecord { user: r.user, history: r.history.clone(), candidates }, out.audit)
        })
        .collect();
    let fallbacks = ranked.iter().flat_map(|(_, a)| a).filter(|a| a.fallback).count();
    if fallbacks > 0 {
        warn!("{fallbacks} ranker calls fell back to the incoming order");
    }
    let (records, audits): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
    Ok((records, audits.into_iter().flatten().collect()))
}

fn default_ks() -> Vec<usize> {
    vec![5, 10]
}

fn default_embedder() -> EmbeddingProviderSpec {
    EmbeddingProviderSpec::local(0, 256)
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Working directory holding `dataset/` and the derived artifacts.
    pub root: PathBuf,
    #[serde(default = "default_embedder")]
    pub embedder: EmbeddingProviderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_topk: Option<usize>,
    #[serde(default)]
    pub count_scope: CountScope,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankSection>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Where run outputs go. Not part of the fingerprint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            embedder: default_embedder(),
            semantic_topk: None,
            count_scope: CountScope::default(),
            retrieval: RetrievalConfig::default(),
            rank: None,
            ks: default_ks(),
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.retrieval.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive cutoffs".into());
        }
        if self.semantic_topk == Some(0) {
            return bad("semantic top-k must be at least 1".into());
        }
        if let Some(rank) = &self.rank {
            rank.strategy.validate(self.retrieval.k).map_err(PipelineError::Config)?;
            rank.ranker.validate().map_err(PipelineError::Config)?;
        }
        Ok(())
    }

    /// The config as stored in reports: everything except the output path.
    pub fn identity(&self) -> Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut value {
            map.remove("out_dir");
        }
        value
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.identity().to_string().as_bytes())
    }
}

/// Results of one experiment, also written to `out_dir` when set.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricReport,
    pub retrieval: Vec<RunRecord>,
    pub ranked: Option<Vec<RunRecord>>,
    pub audit: Vec<AuditRecord>,
    pub outcomes: Vec<UserOutcome>,
}

fn sidecar_matches<T: for<'de> Deserialize<'de> + PartialEq>(path: &Path, expected: &T) -> bool {
    path.exists() && artifact::read_json::<T>(path).is_ok_and(|found| &found == expected)
}

/// Builds embeddings and matrices that are missing or were made with other
/// settings; existing matching artifacts are reused.
pub fn ensure_artifacts(cfg: &RunConfig) -> Result<(), PipelineError> {
    let layout = Layout::new(&cfg.root);
    artifact::require(&layout.dataset().join("ids.json"), "prepare")?;
    let tag = cfg.embedder.build()?.tag();
    let embed_ok = layout.embeddings().exists()
        && artifact::read_json::<EmbedRecord>(&layout.embed_config())
            .is_ok_and(|r| r.tag == tag && r.provider == cfg.embedder);
    if !embed_ok {
        info!("embedding items with {tag}");
        embed(&layout, &cfg.embedder, DEFAULT_PROMPT_BUDGET)?;
    }
    let semantic = SemanticRecord { embeddings: tag, topk: cfg.semantic_topk };
    if !embed_ok || !layout.semantic().exists() || !sidecar_matches(&sidecar(&layout.semantic()), &semantic) {
        info!("building the semantic matrix");
        build_semantic(&layout, cfg.semantic_topk)?;
    }
    let collab = CollabRecord { scope: cfg.count_scope };
    if !layout.collab().exists() || !layout.counts().exists() || !sidecar_matches(&sidecar(&layout.collab()), &collab)
    {
        info!("building the collaborative matrix");
        build_collab(&layout, cfg.count_scope)?;
    }
    Ok(())
}

/// Retrieval, optional reranking and evaluation for every test user.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutcome, PipelineError> {
    cfg.validate()?;
    ensure_artifacts(cfg)?;
    let layout = Layout::new(&cfg.root);
    let (data, meta) = load_dataset(&layout)?;
    let semantic = SimilarityMatrix::read(&layout.semantic())?;
    let collab = SimilarityMatrix::read(&layout.collab())?;
    let truth = test_items(&data);

    let retrieval = retrieve_all(&data, &semantic, &collab, &cfg.retrieval)?;
    let (ranked, audit) = match &cfg.rank {
        Some(section) => {
            let counts = SparseInteractionMatrix::read(&layout.counts())?;
            let (ranked, audit) = rank_all(&retrieval, section, &truth, &meta, &counts)?;
            (Some(ranked), audit)
        }
        None => (None, Vec::new()),
    };
    let final_records = ranked.as_ref().unwrap_or(&retrieval);
    let outcomes = locate(&predictions(final_records), &truth);
    let mut report = summarize(&outcomes, &cfg.ks);
    report.fingerprint = Some(cfg.fingerprint());
    report.config = Some(cfg.identity());

    if let Some(out) = &cfg.out_dir {
        artifact::write_json(&out.join("config.json"), cfg)?;
        artifact::write_jsonl(&out.join("retrieval.jsonl"), &retrieval)?;
        if let Some(ranked) = &ranked {
            artifact::write_jsonl(&out.join("ranked.jsonl"), ranked)?;
            artifact::write_jsonl(&out.join("ranked.audit.jsonl"), &audit)?;
        }
        artifact::write_json(&out.join("report.json"), &report)?;
        artifact::write_jsonl(&out.join("report.users.jsonl"), &outcomes)?;
    }
    Ok(ExperimentOutcome { report, retrieval, ranked, audit, outcomes })
}

/// Parameter grid for [`sweep`]. Empty axes keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub a: Vec<f64>,
    pub lambda: Vec<f64>,
    pub history_len: Vec<usize>,
    pub k: Vec<usize>,
    pub w: Vec<usize>,
    pub d: Vec<usize>,
    pub include_popularity: Vec<bool>,
    pub include_co_occurrence: Vec<bool>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Cartesian product over the grid, in axis order. Window sizes and
    /// strides only apply when the base strategy is a window, prompt flags
    /// only when the base has a rank section.
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut configs = vec![base.clone()];
        let mut cross = |apply: &dyn Fn(&RunConfig) -> Vec<RunConfig>| {
            configs = configs.iter().flat_map(apply).collect();
        };
        let r = base.retrieval.clone();
        cross(&|c| axis(&self.a, r.a).into_iter().map(|v| with(c, |c| c.retrieval.a = v)).collect());
        cross(&|c| axis(&self.lambda, r.lambda).into_iter().map(|v| with(c, |c| c.retrieval.lambda = v)).collect());
        cross(&|c| {
            let base = c.retrieval.history_len;
            let values: Vec<Option<usize>> =
                if self.history_len.is_empty() { vec![base] } else { self.history_len.iter().map(|&l| Some(l)).collect() };
            values.into_iter().map(|v| with(c, |c| c.retrieval.history_len = v)).collect()
        });
        cross(&|c| axis(&self.k, r.k).into_iter().map(|v| with(c, |c| c.retrieval.k = v)).collect());
        if let Some(RankSection { strategy: RankStrategy::Window { w, d, .. }, .. }) = &base.rank {
            let set_window = |c: &mut RunConfig, nw: Option<usize>, nd: Option<usize>| {
                if let Some(RankSection { strategy: RankStrategy::Window { w, d, .. }, .. }) = &mut c.rank {
                    *w = nw.unwrap_or(*w);
                    *d = nd.unwrap_or(*d);
                }
            };
            cross(&|c| axis(&self.w, *w).into_iter().map(|v| with(c, |c| set_window(c, Some(v), None))).collect());
            cross(&|c| axis(&self.d, *d).into_iter().map(|v| with(c, |c| set_window(c, None, Some(v)))).collect());
        }
        if let Some(RankSection { flags, .. }) = &base.rank {
            let flags = *flags;
            let set_flags = |c: &mut RunConfig, f: &dyn Fn(&mut PromptInfoFlags)| {
                if let Some(section) = &mut c.rank {
                    f(&mut section.flags);
                }
            };
            cross(&|c| {
                axis(&self.include_popularity, flags.include_popularity)
                    .into_iter()
                    .map(|v| with(c, |c| set_flags(c, &|f| f.include_popularity = v)))
                    .collect()
            });
            cross(&|c| {
                axis(&self.include_co_occurrence, flags.include_co_occurrence)
                    .into_iter()
                    .map(|v| with(c, |c| set_flags(c, &|f| f.include_co_occurrence = v)))
                    .collect()
            });
        }
        configs
    }
}

fn with(c: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = c.clone();
    f(&mut c);
    c
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub fingerprint: String,
    pub config: RunConfig,
    pub report: MetricReport,
}

/// Runs every configuration of the grid. When the base has an `out_dir`,
/// each run writes to `<out_dir>/<first 12 hex digits of its fingerprint>`.
/// Configurations that fail validation (such as a window wider than `k`)
/// are skipped with a warning.
pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepEntry>, PipelineError> {
    let mut entries = Vec::new();
    for mut config in grid.expand(base) {
        if let Err(e) = config.validate() {
            warn!("skipping grid point: {e}");
            continue;
        }
        let fingerprint = config.fingerprint();
        if let Some(out) = &base.out_dir {
            config.out_dir = Some(out.join(&fingerprint[..12]));
        }
        info!("running {}", &fingerprint[..12]);
        let outcome = run_experiment(&config)?;
        entries.push(SweepEntry { fingerprint, config, report: outcome.report });
    }
    if let Some(out) = &base.out_dir {
        let index: Vec<Value> = entries
            .iter()
            .map(|e| serde_json::json!({ "fingerprint": e.fingerprint, "config": e.config.identity(), "metrics": e.report.metrics }))
            .collect();
        artifact::write_json(&out.join("sweep.json"), &index)?;
    }
    Ok(entries)
}
