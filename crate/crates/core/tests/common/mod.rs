//! Synthetic corpora and small helpers shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Topic-structured shop: every item belongs to one topic, every user mostly
/// buys from a favourite topic, and titles share topic words.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a purchase comes from the user's favourite topic.
    pub focus: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { users: 200, items: 120, topics: 8, min_len: 5, max_len: 10, focus: 0.85, seed: 7 }
    }
}

const WORDS: &[&str] = &[
    "matte", "gloss", "shimmer", "velvet", "cedar", "citrus", "amber", "coral", "ivory", "jade", "onyx", "pearl",
    "ruby", "slate", "teal", "umber", "violet", "willow", "azure", "birch", "copper", "dune", "ember", "fern",
];

const NOUNS: &[&str] = &[
    "lipstick", "palette", "brush", "serum", "cleanser", "mask", "lotion", "shampoo", "polish", "kit", "puzzle",
    "racket", "tent", "bottle", "glove", "lantern",
];

/// Raw review and metadata lines in the public dump format.
pub struct RawCorpus {
    pub reviews: String,
    pub metadata: String,
}

pub fn item_asin(i: usize) -> String {
    format!("B{i:07}")
}

pub fn user_id(u: usize) -> String {
    format!("A{u:06}")
}

pub fn generate(spec: &SyntheticSpec) -> RawCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topic_of: Vec<usize> = (0..spec.items).map(|i| i % spec.topics).collect();
    let by_topic: Vec<Vec<usize>> =
        (0..spec.topics).map(|t| (0..spec.items).filter(|&i| topic_of[i] == t).collect()).collect();

    let mut metadata = String::new();
    for (i, &t) in topic_of.iter().enumerate() {
        let noun = NOUNS[t % NOUNS.len()];
        let a = WORDS[(t * 3) % WORDS.len()];
        let b = WORDS[rng.random_range(0..WORDS.len())];
        let record = json!({
            "asin": item_asin(i),
            "title": format!("{a} {b} {noun} {i}"),
            "categories": [["Shop", format!("Topic {t}"), noun]],
            "price": (rng.random_range(100..5000) as f64) / 100.0,
            "salesRank": { "Shop": rng.random_range(1..100_000) },
            "brand": format!("Brand{}", t % 3),
            "description": format!("A {a} {noun} for fans of topic {t}."),
        });
        writeln!(metadata, "{record}").unwrap();
    }

    let mut reviews = String::new();
    for u in 0..spec.users {
        let favourite = rng.random_range(0..spec.topics);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut ts = 1_300_000_000 + rng.random_range(0..1_000_000) as i64;
        let mut bought = Vec::new();
        while bought.len() < len {
            let pool = if rng.random_bool(spec.focus) {
                &by_topic[favourite]
            } else {
                &by_topic[rng.random_range(0..spec.topics)]
            };
            let item = pool[rng.random_range(0..pool.len())];
            if bought.contains(&item) {
                continue;
            }
            bought.push(item);
            ts += rng.random_range(1..100_000) as i64;
            let record = json!({
                "reviewerID": user_id(u),
                "asin": item_asin(item),
                "overall": rng.random_range(1..=5) as f64,
                "unixReviewTime": ts,
                "reviewText": "fine",
            });
            writeln!(reviews, "{record}").unwrap();
        }
    }
    RawCorpus { reviews, metadata }
}

/// Writes `reviews.json` and `meta.json` into `dir` and returns their paths.
pub fn write_raw(dir: &Path, spec: &SyntheticSpec) -> (std::path::PathBuf, std::path::PathBuf) {
    let corpus = generate(spec);
    std::fs::create_dir_all(dir).unwrap();
    let reviews = dir.join("reviews.json");
    let meta = dir.join("meta.json");
    std::fs::write(&reviews, corpus.reviews).unwrap();
    std::fs::write(&meta, corpus.metadata).unwrap();
    (reviews, meta)
}

/// Uniform vector in [-1, 1]^dim; with `zero_prob` an all-zero vector.
pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize, zero_prob: f64) -> Vec<f64> {
    if rng.random_bool(zero_prob) {
        vec![0.0; dim]
    } else {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

/// Plain cosine, written out independently of the library.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}
