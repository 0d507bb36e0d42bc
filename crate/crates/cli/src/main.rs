mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use log::info;
use serde_json::{json, Value};

use args::*;
use star_core::artifact::{self, sha256_hex};
use star_core::collab::{CountScope, SparseInteractionMatrix};
use star_core::corpus::{self, KcoreMode};
use star_core::embed::ProviderKind;
use star_core::eval::{locate, summarize};
use star_core::experiment::{self, predictions, sidecar, Layout, PipelineError, RankSection, RunConfig, RunRecord, SweepGrid};
use star_core::http::{EndpointSpec, RetryPolicy};
use star_core::matrix::SimilarityMatrix;
use star_core::rank::{PromptInfoFlags, RankStrategy, RankerSpec};

/// Errors that mean the invocation itself was wrong (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|cause| {
        cause.is::<UsageError>()
            || cause.is::<toml::de::Error>()
            || matches!(cause.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare(a) => prepare(config, a),
        Command::Embed(a) => embed(config, a),
        Command::BuildSemantic(a) => build_semantic(config, a),
        Command::BuildCollab(a) => build_collab(config, a),
        Command::Retrieve(a) => retrieve(config, a),
        Command::Rank(a) => rank(config, a),
        Command::Evaluate(a) => evaluate(config, a),
        Command::Stats(a) => stats(a),
        Command::Sweep(a) => sweep(config, a),
    }
}

/// Reads the TOML config file, or the defaults when there is none. A missing
/// `root` means the current directory.
fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::new(".")) };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut table: toml::Table = text.parse().with_context(|| format!("invalid config {}", path.display()))?;
    table.entry("root").or_insert_with(|| toml::Value::String(".".into()));
    let config: RunConfig = table.try_into().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(config)
}

fn with_root(mut config: RunConfig, root: &RootArg) -> RunConfig {
    if let Some(r) = &root.root {
        config.root = r.clone();
    }
    config
}

/// Endpoint from flags over an optional configured one. The token variable
/// defaults to STAR_API_TOKEN when that is set.
fn endpoint(flags: &EndpointArgs, base: Option<&EndpointSpec>) -> Result<EndpointSpec> {
    let url = flags.url.clone().or_else(|| base.map(|b| b.url.clone()));
    let model = flags.model.clone().or_else(|| base.map(|b| b.model.clone()));
    let (Some(url), Some(model)) = (url, model) else {
        return Err(usage("a remote provider needs --url and --model (or an endpoint in the config file)"));
    };
    let token_env = flags
        .token_env
        .clone()
        .or_else(|| base.and_then(|b| b.token_env.clone()))
        .or_else(|| std::env::var_os("STAR_API_TOKEN").map(|_| "STAR_API_TOKEN".to_string()));
    Ok(EndpointSpec {
        url,
        model,
        token_env,
        timeout_secs: base.map_or(60, |b| b.timeout_secs),
        retry: base.map_or_else(RetryPolicy::default, |b| b.retry),
    })
}

fn prepare(config: RunConfig, a: PrepareArgs) -> Result<()> {
    let root = a.out.unwrap_or(config.root);
    let mode = match a.kcore_mode {
        KcoreModeArg::Fixpoint => KcoreMode::Fixpoint,
        KcoreModeArg::SinglePass => KcoreMode::SinglePass,
    };
    if a.kcore == 0 {
        return Err(usage("--kcore must be at least 1"));
    }
    let stats = experiment::prepare(&a.reviews, a.meta.as_deref(), &Layout::new(&root), a.kcore, mode)?;
    println!("{}", stats_table(&stats));
    Ok(())
}

fn embed(config: RunConfig, a: EmbedArgs) -> Result<()> {
    let config = with_root(config, &a.root);
    let mut spec = config.embedder.clone();
    let configured_remote = match &spec.provider {
        ProviderKind::RemoteHttp(e) => Some(e.clone()),
        ProviderKind::LocalDeterministic { .. } => None,
    };
    let provider = a.provider.unwrap_or(if configured_remote.is_some() { ProviderArg::Http } else { ProviderArg::Local });
    spec.provider = match provider {
        ProviderArg::Local => {
            let (seed, dim) = match spec.provider {
                ProviderKind::LocalDeterministic { seed, dim } => (seed, dim),
                ProviderKind::RemoteHttp(_) => (0, 256),
            };
            let dim = a.dim.unwrap_or(dim);
            if dim == 0 {
                return Err(usage("--dim must be at least 1"));
            }
            ProviderKind::LocalDeterministic { seed: a.seed.unwrap_or(seed), dim }
        }
        ProviderArg::Http => ProviderKind::RemoteHttp(endpoint(&a.endpoint, configured_remote.as_ref())?),
    };
    spec.batch_size = a.batch_size.unwrap_or(spec.batch_size).max(1);
    spec.fan_out = a.fan_out.unwrap_or(spec.fan_out).max(1);
    let matrix = experiment::embed(&Layout::new(&config.root), &spec, a.prompt_budget)?;
    println!("embedded {} items ({} dimensions, {})", matrix.len(), matrix.dim(), matrix.provider_tag());
    Ok(())
}

fn build_semantic(config: RunConfig, a: SemanticArgs) -> Result<()> {
    let config = with_root(config, &a.root);
    let topk = a.topk.or(config.semantic_topk);
    if topk == Some(0) {
        return Err(usage("--topk must be at least 1"));
    }
    let m = experiment::build_semantic(&Layout::new(&config.root), topk)?;
    println!("semantic matrix: {} items, {} stored entries", m.len(), m.stored_entries());
    Ok(())
}

fn build_collab(config: RunConfig, a: CollabArgs) -> Result<()> {
    let config = with_root(config, &a.root);
    let scope = match &a.counts {
        Some(s) => s.parse::<CountScope>().map_err(usage)?,
        None => config.count_scope,
    };
    let (m, _) = experiment::build_collab(&Layout::new(&config.root), scope)?;
    println!("collaborative matrix: {} items, {} stored entries", m.len(), m.stored_entries());
    Ok(())
}

fn apply_retrieval_flags(config: &mut RunConfig, f: &RetrievalFlags) -> Result<()> {
    let r = &mut config.retrieval;
    r.a = f.a.unwrap_or(r.a);
    r.lambda = f.lambda.unwrap_or(r.lambda);
    if let Some(h) = &f.history {
        r.history_len = match h.as_str() {
            "all" => None,
            n => Some(n.parse().map_err(|_| usage(format!("--history expects a number or `all`, got `{n}`")))?),
        };
    }
    r.k = f.k.unwrap_or(r.k);
    r.use_ratings |= f.use_ratings;
    r.shuffle_seed = f.shuffle.or(r.shuffle_seed);
    if f.include_seen {
        r.exclude_seen = false;
    }
    r.validate().map_err(|e| usage(e.to_string()))
}

fn read_optional_json(path: &Path) -> Result<Value> {
    Ok(if path.exists() { artifact::read_json(path)? } else { Value::Null })
}

fn retrieve(mut config: RunConfig, a: RetrieveArgs) -> Result<()> {
    config = with_root(config, &a.root);
    apply_retrieval_flags(&mut config, &a.retrieval)?;
    let layout = Layout::new(&config.root);
    artifact::require(&layout.semantic(), "build-semantic")?;
    artifact::require(&layout.collab(), "build-collab")?;
    let (data, _) = experiment::load_dataset(&layout)?;
    let semantic = SimilarityMatrix::read(&layout.semantic())?;
    let collab = SimilarityMatrix::read(&layout.collab())?;
    let records = experiment::retrieve_all(&data, &semantic, &collab, &config.retrieval)?;
    let out = a.out.unwrap_or_else(|| config.root.join("runs/retrieval.jsonl"));
    artifact::write_jsonl(&out, &records)?;
    let stage = json!({
        "root": config.root,
        "embeddings": read_optional_json(&layout.embed_config())?,
        "semantic": read_optional_json(&sidecar(&layout.semantic()))?,
        "collab": read_optional_json(&sidecar(&layout.collab()))?,
        "retrieval": config.retrieval,
    });
    artifact::write_json(&sidecar(&out), &stage)?;
    println!("retrieved {} candidates for {} users -> {}", config.retrieval.k, records.len(), out.display());
    Ok(())
}

fn rank_section(config: &RunConfig, a: &RankArgs) -> Result<RankSection> {
    let base = config.rank.clone();
    let mut strategy = base.as_ref().map_or(RankStrategy::pairwise(), |s| s.strategy);
    let window_flags = a.w.is_some() || a.d.is_some() || a.passes.is_some();
    strategy = match (a.strategy, strategy) {
        (Some(StrategyArg::Selection), RankStrategy::Selection { k_out }) => RankStrategy::Selection { k_out },
        (Some(StrategyArg::Selection), _) => RankStrategy::Selection { k_out: 10 },
        (Some(StrategyArg::Point), _) => RankStrategy::PointWise,
        (Some(StrategyArg::Window), s @ RankStrategy::Window { .. }) => s,
        (None, s @ RankStrategy::Window { .. }) => s,
        (Some(StrategyArg::Window), _) => RankStrategy::pairwise(),
        (None, _) if window_flags => RankStrategy::pairwise(),
        (None, s) => s,
    };
    match &mut strategy {
        RankStrategy::Window { w, d, passes } => {
            *w = a.w.unwrap_or(*w);
            *d = a.d.unwrap_or(*d);
            *passes = a.passes.unwrap_or(*passes);
        }
        RankStrategy::Selection { k_out } => *k_out = a.k_out.unwrap_or(*k_out),
        RankStrategy::PointWise => {}
    }
    if window_flags && !matches!(strategy, RankStrategy::Window { .. }) {
        return Err(usage("--w, --d and --passes only apply to the window strategy"));
    }

    let base_ranker = base.as_ref().map(|s| s.ranker.clone());
    let ranker = match a.ranker {
        None => base_ranker.ok_or_else(|| usage("choose a ranker with --ranker (http, oracle, lexical, noisy, identity)"))?,
        Some(RankerArg::Oracle) => RankerSpec::MockOracle,
        Some(RankerArg::Lexical) => RankerSpec::MockLexical,
        Some(RankerArg::Identity) => RankerSpec::MockIdentity,
        Some(RankerArg::Noisy) => {
            let (p0, seed0) = match base_ranker {
                Some(RankerSpec::MockNoisy { p, seed }) => (Some(p), seed),
                _ => (None, 0),
            };
            let p = a.noise.or(p0).ok_or_else(|| usage("the noisy ranker needs --noise P"))?;
            RankerSpec::MockNoisy { p, seed: a.noise_seed.unwrap_or(seed0) }
        }
        Some(RankerArg::Http) => {
            let (endpoint0, temperature0) = match &base_ranker {
                Some(RankerSpec::RemoteChat { endpoint, temperature }) => (Some(endpoint), *temperature),
                _ => (None, 0.0),
            };
            RankerSpec::RemoteChat {
                endpoint: endpoint(&a.endpoint, endpoint0)?,
                temperature: a.temperature.unwrap_or(temperature0),
            }
        }
    };
    let mut flags = base.map_or_else(PromptInfoFlags::default, |s| s.flags);
    if a.no_coocc {
        flags.include_co_occurrence = false;
    }
    if a.no_popularity {
        flags.include_popularity = false;
    }
    Ok(RankSection { strategy, ranker, flags })
}

fn rank(config: RunConfig, a: RankArgs) -> Result<()> {
    let config = with_root(config, &a.root);
    let section = rank_section(&config, &a)?;
    let input = a.input.clone().unwrap_or_else(|| config.root.join("runs/retrieval.jsonl"));
    let upstream = read_optional_json(&sidecar(&input))?;
    let k = upstream
        .pointer("/retrieval/k")
        .and_then(Value::as_u64)
        .map_or(config.retrieval.k, |k| k as usize);
    section.strategy.validate(k).map_err(usage)?;
    section.ranker.validate().map_err(usage)?;

    artifact::require(&input, "retrieve")?;
    let layout = Layout::new(&config.root);
    artifact::require(&layout.counts(), "build-collab")?;
    let (data, meta) = experiment::load_dataset(&layout)?;
    let counts = SparseInteractionMatrix::read(&layout.counts())?;
    let records: Vec<RunRecord> = artifact::read_jsonl(&input)?;
    let truth = experiment::test_items(&data);
    if let Some(r) = records.iter().find(|r| r.user >= truth.len()) {
        bail!("{}: user {} is not in the dataset; was it retrieved from another root?", input.display(), r.user);
    }
    let (ranked, audit) = experiment::rank_all(&records, &section, &truth, &meta, &counts)?;

    let out = a.out.unwrap_or_else(|| config.root.join("runs/ranked.jsonl"));
    artifact::write_jsonl(&out, &ranked)?;
    let audit_path = out.with_extension("audit.jsonl");
    artifact::write_jsonl(&audit_path, &audit)?;
    let stage = json!({ "upstream": upstream, "rank": section });
    artifact::write_json(&sidecar(&out), &stage)?;
    let fallbacks = audit.iter().filter(|r| r.fallback).count();
    println!(
        "reranked {} users with {} ranker calls ({fallbacks} fallbacks) -> {}",
        ranked.len(),
        audit.len(),
        out.display()
    );
    Ok(())
}

fn evaluate(config: RunConfig, a: EvaluateArgs) -> Result<()> {
    let config = with_root(config, &a.root);
    let ks = a.ks.clone().unwrap_or(config.ks.clone());
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--ks must list positive cutoffs"));
    }
    artifact::require(&a.run, "retrieve")?;
    let (data, _) = experiment::load_dataset(&Layout::new(&config.root))?;
    let records: Vec<RunRecord> = artifact::read_jsonl(&a.run)?;
    let outcomes = locate(&predictions(&records), &experiment::test_items(&data));
    let mut report = summarize(&outcomes, &ks);
    let stage = read_optional_json(&sidecar(&a.run))?;
    if !stage.is_null() {
        report.fingerprint = Some(sha256_hex(stage.to_string().as_bytes()));
        report.config = Some(stage);
    }
    if let Some(detail) = &a.detail {
        artifact::write_jsonl(detail, &outcomes)?;
    }
    match &a.out {
        Some(out) => {
            artifact::write_json(out, &report)?;
            for (k, m) in &report.metrics {
                println!("HR@{k} = {:.4}  NDCG@{k} = {:.4}", m.hr, m.ndcg);
            }
            info!("report written to {}", out.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn stats_table(s: &corpus::DatasetStats) -> String {
    format!(
        "users\titems\tinteractions\tdensity\n{}\t{}\t{}\t{:.4}%",
        s.users, s.items, s.interactions, s.density_percent
    )
}

fn stats(a: StatsArgs) -> Result<()> {
    let dir: PathBuf = if a.data.join("dataset/ids.json").exists() { a.data.join("dataset") } else { a.data.clone() };
    let (data, _) = corpus::store::read_dataset(&dir)?;
    let s = corpus::dataset_stats(&data);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("{}", stats_table(&s));
    }
    Ok(())
}

fn sweep(config: RunConfig, a: SweepArgs) -> Result<()> {
    let mut base = with_root(config, &a.root);
    base.out_dir = Some(a.out.clone());
    let grid = SweepGrid {
        a: a.a,
        lambda: a.lambda,
        history_len: a.history,
        k: a.k,
        w: a.w,
        d: a.d,
        include_popularity: a.popularity,
        include_co_occurrence: a.coocc,
    };
    if base.rank.is_none() && !(grid.w.is_empty() && grid.d.is_empty()) {
        return Err(usage("--w and --d need a [rank] section with a window strategy in the config file"));
    }
    let entries = experiment::sweep(&base, &grid)?;
    if entries.is_empty() {
        return Err(anyhow!("no valid configuration in the grid"));
    }
    for e in &entries {
        let cells: Vec<String> = e
            .report
            .metrics
            .iter()
            .map(|(k, m)| format!("HR@{k}={:.4} NDCG@{k}={:.4}", m.hr, m.ndcg))
            .collect();
        println!("{}  {}", &e.fingerprint[..12], cells.join("  "));
    }
    Ok(())
}
