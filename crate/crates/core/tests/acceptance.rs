//! Acceptance checks, one line per criterion.
//!
//! Run with `cargo test -p star-core --test acceptance`. Criterion 1 needs
//! the public 2014 Amazon review dumps: point STAR_AMAZON_DIR at a directory
//! holding `reviews_<Category>_5.json[.gz]` (or the full `reviews_<Category>.json[.gz]`)
//! for Beauty, Toys_and_Games and Sports_and_Outdoors. Without it the
//! criterion reports SKIPPED.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cosine, random_vector, write_raw, SyntheticSpec};
use star_core::collab::{collaborative_similarity, SparseInteractionMatrix};
use star_core::corpus::{ItemMeta, KcoreMode};
use star_core::embed::{semantic_similarity, EmbeddingMatrix, EmbeddingProviderSpec};
use star_core::eval::{hit_rate_at_k, ndcg_at_k, MetricReport};
use star_core::experiment::{self, run_experiment, Layout, RankSection, RunConfig};
use star_core::matrix::{Relation, SimilarityMatrix};
use star_core::rank::{
    build_rank_prompt, parse_rank_response, point_wise_rank, selection_rank, sliding_window_rank, window_starts,
    ChatMessage, LexicalRanker, NoisyRanker, OracleRanker, PromptContext, PromptInfoFlags, RankRequest, RankStrategy,
    RankTask, Ranker, RankerError, RankerSpec, Role,
};
use star_core::retrieval::{retrieve_top_k, score_item, HistoryItem, RetrievalConfig};

/// Absolute tolerance for score and matrix comparisons.
const TOL: f64 = 1e-9;
/// Density tolerance in percentage points.
const DENSITY_TOL_PP: f64 = 1e-4;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Check = Result<String, String>;

/// Criteria 6 and 7 share the metric reports they produce.
type Criterion = dyn FnOnce(&mut Vec<(String, MetricReport)>) -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

struct RandomInstance {
    embeddings: Vec<Vec<f64>>,
    users_of: Vec<BTreeSet<usize>>,
    semantic: SimilarityMatrix,
    collab: SimilarityMatrix,
    counts: SparseInteractionMatrix,
}

fn random_instance(rng: &mut ChaCha8Rng, max_items: usize, max_users: usize) -> RandomInstance {
    let n = rng.random_range(2..=max_items);
    let m = rng.random_range(1..=max_users);
    let dim = rng.random_range(2..=8);
    let embeddings: Vec<Vec<f64>> = (0..n).map(|_| random_vector(rng, dim, 0.05)).collect();
    let density = rng.random_range(0.02..0.4);
    let mut pairs = Vec::new();
    let mut users_of = vec![BTreeSet::new(); n];
    for (item, users) in users_of.iter_mut().enumerate() {
        for u in 0..m {
            if rng.random_bool(density) {
                pairs.push((item, u));
                users.insert(u);
            }
        }
    }
    let e = EmbeddingMatrix::from_rows(embeddings.clone(), "random").unwrap();
    let counts = SparseInteractionMatrix::from_pairs(n, m, pairs);
    RandomInstance {
        semantic: semantic_similarity(&e, None),
        collab: collaborative_similarity(&counts),
        counts,
        embeddings,
        users_of,
    }
}

impl RandomInstance {
    fn n(&self) -> usize {
        self.embeddings.len()
    }

    /// Collaborative cosine straight from the user sets.
    fn collab_oracle(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.users_of[i], &self.users_of[j]);
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        a.intersection(b).count() as f64 / ((a.len() * b.len()) as f64).sqrt()
    }

    fn semantic_oracle(&self, i: usize, j: usize) -> f64 {
        cosine(&self.embeddings[i], &self.embeddings[j])
    }

    /// Direct evaluation of the retrieval score from raw embeddings and sets.
    fn score_oracle(&self, x: usize, history: &[HistoryItem], cfg: &RetrievalConfig) -> f64 {
        let h = cfg.history_len.map_or(history.len(), |l| l.min(history.len()));
        let mut sum = 0.0;
        for t in 1..=h {
            let s = history[history.len() - t];
            let r = if cfg.use_ratings { s.rating as f64 } else { 1.0 };
            let mix = cfg.a * self.semantic_oracle(x, s.item) + (1.0 - cfg.a) * self.collab_oracle(x, s.item);
            sum += r * cfg.lambda.powi(t as i32) * mix;
        }
        sum / h as f64
    }
}

fn random_history(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> Vec<HistoryItem> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| HistoryItem { item: rng.random_range(0..n), rating: rng.random_range(1..=5) })
        .collect()
}

/// Compares a returned list against an oracle ranking. Items at the same
/// position may differ only if their oracle scores tie within `TOL`.
/// Returns the largest score deviation.
fn compare_rankings(got: &[(usize, f64)], want: &[(usize, f64)], oracle: impl Fn(usize) -> f64) -> Result<f64, String> {
    ensure(got.len() == want.len(), || format!("length {} vs oracle {}", got.len(), want.len()))?;
    let mut worst: f64 = 0.0;
    for (pos, (&(gi, gs), &(wi, _))) in got.iter().zip(want).enumerate() {
        let dev = (gs - oracle(gi)).abs();
        worst = worst.max(dev);
        ensure(dev <= TOL, || format!("item {gi} score {gs} vs oracle {}", oracle(gi)))?;
        ensure(gi == wi || (oracle(gi) - oracle(wi)).abs() <= TOL, || {
            format!("position {pos}: item {gi} vs oracle item {wi}")
        })?;
    }
    let distinct: BTreeSet<usize> = got.iter().map(|g| g.0).collect();
    ensure(distinct.len() == got.len(), || "duplicate candidates".into())?;
    Ok(worst)
}

fn oracle_top_k(n: usize, k: usize, excluded: &BTreeSet<usize>, score: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..n).filter(|i| !excluded.contains(i)).map(|i| (i, score(i))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Prepares a synthetic corpus under `root` and returns the held-out items.
fn prepared_root(root: &Path, spec: &SyntheticSpec) -> Vec<usize> {
    let (reviews, meta) = write_raw(&root.join("raw"), spec);
    experiment::prepare(&reviews, Some(&meta), &Layout::new(root), 5, KcoreMode::Fixpoint).unwrap();
    let (data, _) = experiment::load_dataset(&Layout::new(root)).unwrap();
    experiment::test_items(&data)
}

fn base_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(root);
    cfg.embedder = EmbeddingProviderSpec::local(3, 128);
    cfg.ks = vec![1, 5, 10, 20];
    cfg
}

fn ranked(cfg: &RunConfig, strategy: RankStrategy, ranker: RankerSpec) -> RunConfig {
    let mut c = cfg.clone();
    c.rank = Some(RankSection { strategy, ranker, flags: PromptInfoFlags::default() });
    c
}

// ---------------------------------------------------------------------------
// 1. dataset protocol on the public corpus

struct PublishedCounts {
    name: &'static str,
    users: usize,
    items: usize,
    interactions: usize,
    density: f64,
}

const PUBLISHED_COUNTS: [PublishedCounts; 3] = [
    PublishedCounts { name: "Beauty", users: 22_363, items: 12_101, interactions: 198_502, density: 0.0734 },
    PublishedCounts { name: "Toys_and_Games", users: 19_412, items: 11_924, interactions: 167_597, density: 0.0724 },
    PublishedCounts { name: "Sports_and_Outdoors", users: 35_598, items: 18_357, interactions: 296_337, density: 0.0453 },
];

fn find_dump(dir: &Path, name: &str) -> Option<PathBuf> {
    [
        format!("reviews_{name}_5.json.gz"),
        format!("reviews_{name}_5.json"),
        format!("reviews_{name}.json.gz"),
        format!("reviews_{name}.json"),
    ]
    .into_iter()
    .map(|f| dir.join(f))
    .find(|p| p.exists())
}

fn criterion_1() -> Outcome {
    let Some(dir) = std::env::var_os("STAR_AMAZON_DIR").map(PathBuf::from) else {
        return Outcome::Skipped("STAR_AMAZON_DIR not set; the public review dumps are not available offline".into());
    };
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let mut checked = 0;
    for row in &PUBLISHED_COUNTS {
        let Some(dump) = find_dump(&dir, row.name) else {
            notes.push(format!("{}: no dump", row.name));
            continue;
        };
        checked += 1;
        let mut matched = None;
        let mut last = String::new();
        for mode in [KcoreMode::Fixpoint, KcoreMode::SinglePass] {
            let tmp = tempfile::tempdir().unwrap();
            match experiment::prepare(&dump, None, &Layout::new(tmp.path()), 5, mode) {
                Ok(s) => {
                    last = format!(
                        "{}/{}/{}/{:.4}%",
                        s.users, s.items, s.interactions, s.density_percent
                    );
                    if s.users == row.users
                        && s.items == row.items
                        && s.interactions == row.interactions
                        && (s.density_percent - row.density).abs() <= DENSITY_TOL_PP
                    {
                        matched = Some(mode);
                        break;
                    }
                }
                Err(e) => last = e.to_string(),
            }
        }
        match matched {
            Some(mode) => notes.push(format!("{} {:?} {last}", row.name, mode)),
            None => failures.push(format!(
                "{}: got {last}, want {}/{}/{}/{:.4}%",
                row.name, row.users, row.items, row.interactions, row.density
            )),
        }
    }
    if checked == 0 {
        Outcome::Skipped(format!("no review dumps in {}", dir.display()))
    } else if failures.is_empty() {
        Outcome::Pass(notes.join("; "))
    } else {
        Outcome::Fail(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 2. scoring oracle

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for instance in 0..200 {
        let inst = random_instance(&mut rng, 100, 50);
        let n = inst.n();
        let cfg = RetrievalConfig {
            a: [0.0, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..3)],
            lambda: rng.random_range(0.05..=1.0),
            history_len: if rng.random_bool(0.2) { None } else { Some(rng.random_range(1..=5)) },
            use_ratings: rng.random_bool(0.5),
            k: rng.random_range(1..=25),
            exclude_seen: rng.random_bool(0.8),
            shuffle_seed: None,
        };
        let history = random_history(&mut rng, n, 8);
        let got = retrieve_top_k(0, &history, &cfg, &inst.semantic, &inst.collab).map_err(|e| e.to_string())?;
        let excluded: BTreeSet<usize> =
            if cfg.exclude_seen { history.iter().map(|h| h.item).collect() } else { BTreeSet::new() };
        let oracle = |x: usize| inst.score_oracle(x, &history, &cfg);
        let want = oracle_top_k(n, cfg.k, &excluded, oracle);
        let got: Vec<(usize, f64)> = got.iter().map(|c| (c.item, c.score)).collect();
        worst = worst.max(compare_rankings(&got, &want, oracle).map_err(|e| format!("instance {instance}: {e}"))?);
    }
    Ok(format!("200 instances, max |score - oracle| = {worst:.1e} (tol {TOL:.0e})"))
}

// ---------------------------------------------------------------------------
// 3. matrix properties

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sym: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut worst_cross: f64 = 0.0;
    for instance in 0..100 {
        let inst = random_instance(&mut rng, 50, 40);
        let n = inst.n();
        let m = inst.counts.n_users();
        // dense incidence and Gram matrix, the textbook way
        let dense: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..m).map(|u| if inst.users_of[i].contains(&u) { 1.0 } else { 0.0 }).collect())
            .collect();
        let gram = |i: usize, j: usize| -> f64 { dense[i].iter().zip(&dense[j]).map(|(a, b)| a * b).sum() };
        for i in 0..n {
            let nonzero_e = inst.embeddings[i].iter().any(|&x| x != 0.0);
            let s_diag = inst.semantic.get(i, i);
            ensure(s_diag == if nonzero_e { 1.0 } else { 0.0 }, || {
                format!("instance {instance}: R_S[{i}][{i}] = {s_diag}")
            })?;
            let c_diag = inst.collab.get(i, i);
            ensure(c_diag == if inst.users_of[i].is_empty() { 0.0 } else { 1.0 }, || {
                format!("instance {instance}: R_C[{i}][{i}] = {c_diag}")
            })?;
            for j in 0..n {
                let (s, c) = (inst.semantic.get(i, j), inst.collab.get(i, j));
                ensure((-1.0..=1.0).contains(&s), || format!("R_S[{i}][{j}] = {s} out of range"))?;
                ensure((0.0..=1.0).contains(&c), || format!("R_C[{i}][{j}] = {c} out of range"))?;
                worst_sym = worst_sym
                    .max((s - inst.semantic.get(j, i)).abs())
                    .max((c - inst.collab.get(j, i)).abs());
                if i != j {
                    worst_oracle = worst_oracle.max((s - inst.semantic_oracle(i, j)).abs());
                }
                let g = gram(i, i) * gram(j, j);
                let c_oracle = if g == 0.0 { 0.0 } else { gram(i, j) / g.sqrt() };
                worst_oracle = worst_oracle.max((c - c_oracle).abs());
                let co = inst.counts.co_count(i, j).unwrap() as f64;
                let pop = (inst.counts.popularity(i).unwrap() * inst.counts.popularity(j).unwrap()) as f64;
                worst_cross = worst_cross.max((co * co - c * c * pop).abs() / (1.0 + co * co));
            }
        }
    }
    ensure(worst_sym <= TOL, || format!("asymmetry {worst_sym:.1e}"))?;
    ensure(worst_oracle <= TOL, || format!("deviation from dense oracle {worst_oracle:.1e}"))?;
    ensure(worst_cross <= TOL, || format!("co_count cross-check off by {worst_cross:.1e}"))?;
    Ok(format!(
        "100 instances, asymmetry {worst_sym:.1e}, oracle deviation {worst_oracle:.1e}, co-count identity {worst_cross:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. formula collapse checks

/// Relation wrapper that counts every access.
struct Counting<'a> {
    inner: &'a SimilarityMatrix,
    reads: AtomicUsize,
}

impl<'a> Counting<'a> {
    fn new(inner: &'a SimilarityMatrix) -> Self {
        Self { inner, reads: AtomicUsize::new(0) }
    }

    fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

impl Relation for Counting<'_> {
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn value(&self, row: usize, col: usize) -> f64 {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.inner.value(row, col)
    }

    fn add_column(&self, col: usize, weight: f64, acc: &mut [f64]) {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.inner.add_column(col, weight, acc)
    }
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for instance in 0..100 {
        let inst = random_instance(&mut rng, 80, 30);
        let n = inst.n();
        let history = random_history(&mut rng, n, 6);
        let k = rng.random_range(1..=20);

        // nearest neighbour of the most recent item
        let nn = RetrievalConfig { a: 1.0, lambda: 1.0, history_len: Some(1), use_ratings: false, k, ..Default::default() };
        let got = retrieve_top_k(0, &history, &nn, &inst.semantic, &inst.collab).map_err(|e| e.to_string())?;
        let last = history.last().unwrap().item;
        let seen: BTreeSet<usize> = history.iter().map(|h| h.item).collect();
        let oracle = |x: usize| cosine(&inst.embeddings[x], &inst.embeddings[last]);
        let want = oracle_top_k(n, k, &seen, oracle);
        let got: Vec<(usize, f64)> = got.iter().map(|c| (c.item, c.score)).collect();
        compare_rankings(&got, &want, oracle).map_err(|e| format!("nearest neighbour, instance {instance}: {e}"))?;

        // a = 0 never reads R_S, a = 1 never reads R_C
        for (a, label) in [(0.0, "a=0"), (1.0, "a=1")] {
            let rs = Counting::new(&inst.semantic);
            let rc = Counting::new(&inst.collab);
            let cfg = RetrievalConfig { a, k, ..Default::default() };
            retrieve_top_k(0, &history, &cfg, &rs, &rc).map_err(|e| e.to_string())?;
            score_item(0, &history, &cfg, &rs, &rc).map_err(|e| e.to_string())?;
            let (untouched, used) = if a == 0.0 { (rs.reads(), rc.reads()) } else { (rc.reads(), rs.reads()) };
            ensure(untouched == 0 && used > 0, || {
                format!("{label}: excluded matrix read {untouched} times, used matrix {used} times")
            })?;
        }

        // scaling every rating by c keeps the order and scales the scores
        let cfg = RetrievalConfig { use_ratings: true, k, lambda: rng.random_range(0.1..=1.0), ..Default::default() };
        let base = retrieve_top_k(0, &history, &cfg, &inst.semantic, &inst.collab).map_err(|e| e.to_string())?;
        let base_score = |x: usize| score_item(x, &history, &cfg, &inst.semantic, &inst.collab).unwrap();
        for c in [2u8, 3, 17, 51] {
            let scaled: Vec<HistoryItem> =
                history.iter().map(|h| HistoryItem { item: h.item, rating: h.rating * c }).collect();
            let out = retrieve_top_k(0, &scaled, &cfg, &inst.semantic, &inst.collab).map_err(|e| e.to_string())?;
            let got: Vec<(usize, f64)> = out.iter().map(|x| (x.item, x.score / c as f64)).collect();
            let want: Vec<(usize, f64)> = base.iter().map(|x| (x.item, x.score)).collect();
            compare_rankings(&got, &want, base_score).map_err(|e| format!("rating scale {c}, instance {instance}: {e}"))?;
        }
    }
    Ok("100 instances: nearest-neighbour collapse, untouched matrices at a=0 and a=1, rating scale c in {2,3,17,51}".into())
}

// ---------------------------------------------------------------------------
// 5. ranking algebra

/// Logs every call with the items shown and the reply given.
struct Recording<'a> {
    inner: &'a dyn Ranker,
    calls: Mutex<Vec<(Vec<usize>, String)>>,
}

impl<'a> Recording<'a> {
    fn new(inner: &'a dyn Ranker) -> Self {
        Self { inner, calls: Mutex::new(Vec::new()) }
    }

    fn take(&self) -> Vec<(Vec<usize>, String)> {
        std::mem::take(&mut self.calls.lock().unwrap())
    }
}

impl Ranker for Recording<'_> {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        let reply = self.inner.respond(request)?;
        let items = match &request.task {
            RankTask::Window { items } | RankTask::Selection { items, .. } => items.clone(),
            RankTask::Point { item } => vec![*item],
        };
        self.calls.lock().unwrap().push((items, reply.clone()));
        Ok(reply)
    }
}

/// Ranks window items by a seeded hash of the item index.
struct HashPreference(u64);

impl Ranker for HashPreference {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        let RankTask::Window { items } = &request.task else {
            return Err(RankerError::Other("window requests only".into()));
        };
        let key = |i: usize| (i as u64 ^ self.0).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut ids: Vec<usize> = (1..=items.len()).collect();
        ids.sort_by_key(|&id| std::cmp::Reverse(key(items[id - 1])));
        let body: Vec<String> = ids.iter().map(|i| format!("[{i}]")).collect();
        Ok(format!("{{\"rank\": \"{}\"}}", body.join(" > ")))
    }
}

/// Replies with a random mixture of valid and broken answers.
struct Adversary(Mutex<ChaCha8Rng>);

impl Ranker for Adversary {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        let mut rng = self.0.lock().unwrap();
        let n = match &request.task {
            RankTask::Window { items } | RankTask::Selection { items, .. } => items.len(),
            RankTask::Point { .. } => 1,
        };
        let reply = match rng.random_range(0..9) {
            0 => return Err(RankerError::Other("connection reset".into())),
            1 => String::new(),
            2 => "[1] > [1]".into(),
            3 => format!("[{}] > [1]", n + 3),
            4 => "I prefer the second one".into(),
            5 => r#"{"rank": 5, "score": "high"}"#.into(),
            6 => "{\"score\": 11}".into(),
            7 => {
                let picks: Vec<String> = (0..rng.random_range(1..=n)).map(|_| format!("[{}]", rng.random_range(1..=n))).collect();
                picks.join(" > ")
            }
            _ => {
                let mut ids: Vec<usize> = (1..=n).collect();
                for i in (1..ids.len()).rev() {
                    ids.swap(i, rng.random_range(0..=i));
                }
                let body: Vec<String> = ids.iter().map(|i| format!("[{i}]")).collect();
                format!("{{\"rank\": \"{}\", \"score\": {}}}", body.join(" > "), rng.random_range(0..=10))
            }
        };
        Ok(reply)
    }
}

fn synthetic_metadata(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<ItemMeta>> {
    const WORDS: &[&str] = &["red", "blue", "soft", "bold", "brush", "palette", "case", "kit", "gel", "oil"];
    (0..n)
        .map(|i| {
            let title: Vec<&str> = (0..3).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            Some(ItemMeta {
                item_id: format!("I{i}"),
                title: Some(title.join(" ")),
                categories: vec![vec!["Shop".into(), WORDS[i % WORDS.len()].into()]],
                ..Default::default()
            })
        })
        .collect()
}

/// Textbook adjacent-pair pass: compare positions (i, i+1) from the bottom
/// of the list to the top and apply the returned order.
fn bubble_pass(user: usize, history: &[usize], list: &[usize], ranker: &dyn Ranker, ctx: &PromptContext) -> Vec<usize> {
    let mut list = list.to_vec();
    for i in (0..list.len().saturating_sub(1)).rev() {
        let pair = vec![list[i], list[i + 1]];
        let request = RankRequest {
            user,
            history: history.to_vec(),
            messages: build_rank_prompt(user, history, &pair, ctx),
            task: RankTask::Window { items: pair },
        };
        if let Ok(reply) = ranker.respond(&request) {
            if parse_rank_response(&reply, 2) == Ok(vec![2, 1]) {
                list.swap(i, i + 1);
            }
        }
    }
    list
}

fn is_permutation(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let metadata = synthetic_metadata(&mut rng, n);
    let pairs: Vec<(usize, usize)> = (0..400).map(|_| (rng.random_range(0..n), rng.random_range(0..30))).collect();
    let counts = SparseInteractionMatrix::from_pairs(n, 30, pairs);
    let ctx = PromptContext { metadata: &metadata, counts: &counts, flags: PromptInfoFlags::default() };
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();

    // (i) window {2, 1} against the dedicated pass
    for instance in 0..500 {
        let k = rng.random_range(2..=20);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            pool.swap(i, rng.random_range(0..=i));
        }
        let candidates = &pool[..k];
        let history: Vec<usize> = pool[k..k + 3].to_vec();
        let user = rng.random_range(0..n);
        let seed = rng.random();
        let inner: Box<dyn Ranker> = match instance % 4 {
            0 => Box::new(NoisyRanker::new(truth.clone(), rng.random_range(0.0..1.0), seed)),
            1 => Box::new(LexicalRanker::new(&metadata)),
            2 => Box::new(HashPreference(seed)),
            _ => Box::new(OracleRanker::new(truth.clone())),
        };
        let a = Recording::new(&*inner);
        let window = sliding_window_rank(user, &history, candidates, 2, 1, 1, &a, &ctx);
        let window_calls = a.take();
        let bubble = bubble_pass(user, &history, candidates, &a, &ctx);
        let bubble_calls = a.take();
        ensure(window.items == bubble, || format!("instance {instance}: output differs from the pairwise pass"))?;
        ensure(window_calls == bubble_calls, || format!("instance {instance}: call sequence differs"))?;
    }

    // (ii) permutation safety under garbage replies
    let adversary = Adversary(Mutex::new(ChaCha8Rng::seed_from_u64(55)));
    let mut fallbacks = 0;
    let mut calls = 0;
    for instance in 0..300 {
        let k = rng.random_range(1..=20);
        let candidates: Vec<usize> = (0..k).map(|i| (i * 7 + instance) % n).collect::<BTreeSet<_>>().into_iter().collect();
        let history = [1usize, 2, 3];
        let out = match instance % 3 {
            0 => {
                let w = rng.random_range(2..=20);
                let d = rng.random_range(1..=10);
                sliding_window_rank(0, &history, &candidates, w, d, rng.random_range(1..=2), &adversary, &ctx)
            }
            1 => point_wise_rank(0, &history, &candidates, &adversary, &ctx),
            _ => selection_rank(0, &history, &candidates, rng.random_range(1..=k), &adversary, &ctx),
        };
        ensure(is_permutation(&out.items, &candidates), || {
            format!("instance {instance}: {:?} is not a permutation of {:?}", out.items, candidates)
        })?;
        calls += out.audit.len();
        fallbacks += out.audit.iter().filter(|a| a.fallback).count();
    }
    ensure(fallbacks > 0, || "the adversary never triggered a fallback".into())?;

    // (iii) call counts over the window grid
    let oracle = OracleRanker::new(truth.clone());
    let candidates: Vec<usize> = (0..20).collect();
    let mut grid = Vec::new();
    for (k, w, d) in [(20usize, 2usize, 1usize), (20, 4, 2), (20, 8, 4), (20, 10, 5), (20, 20, 1), (20, 20, 5), (20, 3, 4)] {
        for passes in [1usize, 2] {
            let expected = passes * ((k - w).div_ceil(d) + 1);
            let out = sliding_window_rank(0, &[21, 22], &candidates[..k], w, d, passes, &oracle, &ctx);
            ensure(out.audit.len() == expected, || {
                format!("(k={k}, w={w}, d={d}, passes={passes}): {} calls, expected {expected}", out.audit.len())
            })?;
            ensure(window_starts(k, w, d).len() * passes == expected, || "window_starts disagrees".into())?;
        }
        grid.push(format!("({k},{w},{d})={}", (k - w).div_ceil(d) + 1));
    }
    let point = point_wise_rank(0, &[21], &candidates, &oracle, &ctx);
    ensure(point.audit.len() == candidates.len(), || "point-wise call count".into())?;

    Ok(format!(
        "500 pairwise replays identical; 300 adversarial runs permutation-safe ({fallbacks}/{calls} fallbacks); calls {}",
        grid.join(" ")
    ))
}

// ---------------------------------------------------------------------------
// 6. oracle convergence

fn criterion_6(reports: &mut Vec<(String, MetricReport)>) -> Check {
    let mut lines = Vec::new();
    for seed in [61u64, 62, 63] {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { users: 1000, items: 300, topics: 20, seed, ..Default::default() };
        prepared_root(tmp.path(), &spec);
        let cfg = base_config(tmp.path());
        let retrieval = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let hr20 = retrieval.report.hr(20).unwrap();

        let oracle = run_experiment(&ranked(&cfg, RankStrategy::pairwise(), RankerSpec::MockOracle))
            .map_err(|e| e.to_string())?;
        let hr1 = oracle.report.hr(1).unwrap();
        ensure(hr1 == hr20, || format!("seed {seed}: oracle HR@1 {hr1} != retrieval HR@20 {hr20}"))?;

        let mut noisy_hr1 = Vec::new();
        for p in [0.0, 0.1, 0.3] {
            let run = run_experiment(&ranked(&cfg, RankStrategy::pairwise(), RankerSpec::MockNoisy { p, seed: 17 }))
                .map_err(|e| e.to_string())?;
            if p == 0.0 {
                ensure(run.ranked == oracle.ranked, || format!("seed {seed}: noisy p=0 differs from the oracle"))?;
            }
            noisy_hr1.push(run.report.hr(1).unwrap());
            reports.push((format!("seed {seed} noisy p={p}"), run.report));
        }
        ensure(noisy_hr1.windows(2).all(|w| w[1] <= w[0]), || {
            format!("seed {seed}: HR@1 over p = 0, 0.1, 0.3 is {noisy_hr1:?}, not non-increasing")
        })?;
        ensure(hr20 > 0.0, || format!("seed {seed}: retrieval never finds the held-out item"))?;
        lines.push(format!(
            "seed {seed}: HR@20 {hr20:.3} = oracle HR@1, noisy HR@1 {:.3}/{:.3}/{:.3}",
            noisy_hr1[0], noisy_hr1[1], noisy_hr1[2]
        ));
        reports.push((format!("seed {seed} retrieval"), retrieval.report));
        reports.push((format!("seed {seed} oracle"), oracle.report));
    }
    Ok(format!("1000 users each; {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 7. metrics

fn report_invariants(label: &str, r: &MetricReport) -> Result<(), String> {
    let mut prev_hr = 0.0;
    let mut prev_ndcg = 0.0;
    for (k, m) in &r.metrics {
        ensure(m.ndcg <= m.hr + 1e-12, || format!("{label}: NDCG@{k} {} > HR@{k} {}", m.ndcg, m.hr))?;
        ensure(m.hr >= prev_hr && m.ndcg >= prev_ndcg, || format!("{label}: metrics decrease at K={k}"))?;
        ensure((0.0..=1.0).contains(&m.hr), || format!("{label}: HR@{k} out of range"))?;
        prev_hr = m.hr;
        prev_ndcg = m.ndcg;
    }
    Ok(())
}

fn criterion_7(reports: &[(String, MetricReport)]) -> Check {
    let exact = [
        (hit_rate_at_k(Some(1), 10), 1.0),
        (hit_rate_at_k(Some(11), 10), 0.0),
        (hit_rate_at_k(None, 10), 0.0),
        (ndcg_at_k(Some(1), 10), 1.0),
        (ndcg_at_k(Some(3), 10), 0.5),
        (ndcg_at_k(Some(12), 10), 0.0),
        (ndcg_at_k(Some(2), 10), 1.0 / 3f64.log2()),
    ];
    for (i, (got, want)) in exact.iter().enumerate() {
        ensure(got == want, || format!("closed form {i}: {got} != {want}"))?;
    }

    let tmp = tempfile::tempdir().unwrap();
    prepared_root(tmp.path(), &SyntheticSpec { users: 300, items: 150, seed: 71, ..Default::default() });
    let cfg = base_config(tmp.path());
    let retrieval = run_experiment(&cfg).map_err(|e| e.to_string())?;
    report_invariants("retrieval", &retrieval.report)?;
    let hr20 = retrieval.report.hr(20);
    let strategies = [
        ("pairwise lexical", RankStrategy::pairwise(), RankerSpec::MockLexical),
        ("window 4/2 lexical", RankStrategy::Window { w: 4, d: 2, passes: 1 }, RankerSpec::MockLexical),
        ("point-wise lexical", RankStrategy::PointWise, RankerSpec::MockLexical),
        ("selection oracle", RankStrategy::Selection { k_out: 10 }, RankerSpec::MockOracle),
        ("window 20 noisy", RankStrategy::Window { w: 20, d: 1, passes: 1 }, RankerSpec::MockNoisy { p: 0.5, seed: 1 }),
        ("identity", RankStrategy::pairwise(), RankerSpec::MockIdentity),
    ];
    for (label, strategy, ranker) in strategies {
        let run = run_experiment(&ranked(&cfg, strategy, ranker)).map_err(|e| e.to_string())?;
        report_invariants(label, &run.report)?;
        ensure(run.report.hr(20) == hr20, || format!("{label}: HR@20 changed by ranking"))?;
        if label == "identity" {
            ensure(run.report.metrics == retrieval.report.metrics, || "identity ranker changed the metrics".into())?;
        }
    }
    for (label, r) in reports {
        report_invariants(label, r)?;
    }
    Ok(format!(
        "closed forms exact; NDCG@K <= HR@K on {} reports; HR@20 unchanged by 6 rankings; identity = retrieval",
        reports.len() + 7
    ))
}

// ---------------------------------------------------------------------------
// 8. prompt conformance

fn brush_set_fixture() -> (Vec<Option<ItemMeta>>, SparseInteractionMatrix) {
    let meta = |title: &str, rank: i64, path: &[&str], price: f64| {
        Some(ItemMeta {
            item_id: String::new(),
            title: Some(title.into()),
            description: Some("not shown to rankers".into()),
            categories: vec![path.iter().map(|s| s.to_string()).collect()],
            sales_rank: Some([("Beauty".to_string(), rank)].into_iter().collect()),
            price: Some(price),
            brand: Some("SHANY Cosmetics".into()),
        })
    };
    let mut metadata = vec![None; 3000];
    metadata[1069] = meta(
        "SHANY Professional 13-Piece Cosmetic Brush Set with Pouch, Set of 12 Brushes and 1 Pouch, Red",
        248,
        &["Beauty", "Tools & Accessories", "Makeup Brushes & Tools", "Brushes & Applicators"],
        12.95,
    );
    metadata[2424] = meta(
        "SHANY Eyeshadow Palette, Bold and Bright Collection, Vivid, 120 Color",
        1612,
        &["Beauty", "Makeup", "Eyes", "Eye Shadow"],
        16.99,
    );
    metadata[2856] = meta(
        "SHANY Studio Quality Natural Cosmetic Brush Set with Leather Pouch, 24 Count",
        937,
        &["Beauty", "Tools & Accessories", "Bags & Cases", "Cosmetic Bags"],
        26.99,
    );
    metadata[101] = meta(
        "SHANY Cosmetics Intense Eyes Palette 72 Color Eyeshadow Palette, 17 Ounce",
        181358,
        &["Beauty", "Makeup", "Makeup Sets"],
        26.4,
    );
    metadata[102] = meta(
        "SHANY Cosmetics Carry All Train Case with Makeup and Reusable Aluminum Case, Cameo",
        2439,
        &["Beauty", "Makeup", "Makeup Sets"],
        39.99,
    );
    metadata[103] = meta(
        "SHANY COSMETICS The Masterpiece 7 Layers All-in-One Makeup Set",
        2699,
        &["Beauty", "Makeup", "Makeup Sets"],
        41.89,
    );
    metadata[104] = meta(
        "SHANY Silver Aluminum Makeup Case, 4 Pounds",
        16605,
        &["Beauty", "Tools & Accessories", "Bags & Cases", "Train Cases"],
        59.95,
    );
    // each shared purchase gets its own user, so co-counts are exact
    let shared = [
        (101, [18, 0, 16]),
        (102, [27, 1, 29]),
        (103, [23, 2, 25]),
        (104, [32, 1, 40]),
    ];
    let mut pairs = Vec::new();
    let mut user = 0;
    for (candidate, counts) in shared {
        for (h, n) in [1069, 2424, 2856].into_iter().zip(counts) {
            for _ in 0..n {
                pairs.push((candidate, user));
                pairs.push((h, user));
                user += 1;
            }
        }
    }
    (metadata, SparseInteractionMatrix::from_pairs(3000, user, pairs))
}

fn render(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            format!("=== {role} ===\n{}\n", m.content)
        })
        .collect()
}

fn criterion_8() -> Check {
    let (metadata, counts) = brush_set_fixture();
    let flags = PromptInfoFlags { include_popularity: false, include_co_occurrence: true };
    let ctx = PromptContext { metadata: &metadata, counts: &counts, flags };
    let messages = build_rank_prompt(1656, &[1069, 2424, 2856], &[101, 102, 103, 104], &ctx);
    let roles: Vec<Role> = messages.iter().map(|m| m.role).collect();
    let mut expected_roles = vec![Role::System, Role::User, Role::Assistant];
    for _ in 0..4 {
        expected_roles.extend([Role::User, Role::Assistant]);
    }
    expected_roles.push(Role::User);
    ensure(roles == expected_roles, || format!("turn structure {roles:?}"))?;

    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/rank_prompt_w4.golden");
    let golden = std::fs::read_to_string(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    let got = render(&messages);
    if got != golden {
        let line = got.lines().zip(golden.lines()).position(|(a, b)| a != b).unwrap_or(0);
        return Err(format!(
            "differs from {} at line {}: {:?} vs {:?}",
            golden_path.display(),
            line + 1,
            got.lines().nth(line),
            golden.lines().nth(line)
        ));
    }
    ensure(messages[0].content.starts_with("You are an intelligent assistant that can rank items"), || {
        "system line".into()
    })?;
    ensure(messages[3].content.contains("Number of users who interacted with both this item"), || {
        "co-occurrence line".into()
    })?;
    ensure(messages.last().unwrap().content.contains("\"rank\": \"[] > [] .. > []\""), || {
        "final instruction".into()
    })?;
    let again = build_rank_prompt(1656, &[1069, 2424, 2856], &[101, 102, 103, 104], &ctx);
    ensure(again == messages, || "prompt is not deterministic".into())?;
    Ok(format!("w=4, l=3 transcript matches {} ({} turns)", golden_path.file_name().unwrap().to_string_lossy(), messages.len()))
}

// ---------------------------------------------------------------------------
// 9. replay determinism

fn criterion_9() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("work");
    prepared_root(&root, &SyntheticSpec { users: 250, items: 120, seed: 91, ..Default::default() });
    let mut compared = 0;
    for (label, strategy, ranker) in [
        ("window", RankStrategy::Window { w: 4, d: 2, passes: 2 }, RankerSpec::MockNoisy { p: 0.25, seed: 9 }),
        ("point", RankStrategy::PointWise, RankerSpec::MockLexical),
    ] {
        let mut cfg = ranked(&base_config(&root), strategy, ranker);
        cfg.retrieval.shuffle_seed = Some(5);
        let mut outs = Vec::new();
        for run in 0..2 {
            // start every replay from the bare dataset
            for dir in ["embeddings", "matrices"] {
                let _ = std::fs::remove_dir_all(root.join(dir));
            }
            let out = tmp.path().join(format!("{label}-{run}"));
            cfg.out_dir = Some(out.clone());
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            outs.push(out);
        }
        for file in ["report.json", "ranked.audit.jsonl", "ranked.jsonl", "retrieval.jsonl", "report.users.jsonl"] {
            let a = std::fs::read(outs[0].join(file)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outs[1].join(file)).map_err(|e| e.to_string())?;
            ensure(!a.is_empty() && a == b, || format!("{label}: {file} differs between replays"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} artifacts byte-identical across rebuilt replays (reports and audit logs included)"))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut reports = Vec::new();
    let criteria: Vec<(&str, Box<Criterion>)> = vec![
        ("dataset protocol", Box::new(|_| criterion_1())),
        ("scoring oracle", Box::new(|_| wrap(criterion_2()))),
        ("matrix properties", Box::new(|_| wrap(criterion_3()))),
        ("formula collapse", Box::new(|_| wrap(criterion_4()))),
        ("ranking algebra", Box::new(|_| wrap(criterion_5()))),
        ("oracle convergence", Box::new(|r| wrap(criterion_6(r)))),
        ("metric suite", Box::new(|r| wrap(criterion_7(r)))),
        ("prompt conformance", Box::new(|_| wrap(criterion_8()))),
        ("replay determinism", Box::new(|_| wrap(criterion_9()))),
    ];
    let mut failed = 0;
    for (number, (name, check)) in criteria.into_iter().enumerate() {
        let started = std::time::Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut reports)))
            .unwrap_or_else(|panic| Outcome::Fail(format!("panicked: {}", panic_text(&panic))));
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skipped(d) => ("SKIPPED", d),
        };
        println!("criterion {} [{tag}] {name} ({secs:.1}s): {detail}", number + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn wrap(check: Check) -> Outcome {
    match check {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}

fn panic_text(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
