//! Seeded synthetic corpora for smoke tests and property checks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CorpusExample;

pub const POOL_A: [&str; 16] = [
    "amber", "birch", "cedar", "delta", "ember", "fjord", "grove", "harbor", "island", "juniper", "kelp", "lagoon",
    "meadow", "nectar", "orchard", "prairie",
];
pub const POOL_B: [&str; 16] = [
    "quartz", "rocket", "signal", "turbine", "uplink", "vector", "widget", "xenon", "yottabyte", "zipper", "boiler",
    "circuit", "dynamo", "engine", "furnace", "gadget",
];
/// Words shared by both classes in the planted-stance corpus.
pub const ANTONYM_POOL: [&str; 16] = [
    "never", "false", "wrong", "denied", "hoax", "fake", "untrue", "bogus", "rejected", "doubt", "myth", "lie",
    "refuted", "nonsense", "disputed", "debunked",
];

fn words(rng: &mut ChaCha8Rng, pool: &[&str], len: usize) -> Vec<String> {
    (0..len).map(|_| pool.choose(rng).expect("nonempty pool").to_string()).collect()
}

fn sentence(rng: &mut ChaCha8Rng, pool: &[&str], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    words(rng, pool, len).join(" ")
}

/// `n` posts alternating between labels 0 and 1. Label-0 posts and comments
/// use only [`POOL_A`], label-1 posts only [`POOL_B`].
pub fn separable_corpus(n: usize, seed: u64) -> Vec<CorpusExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let pool: &[&str] = if label == 0 { &POOL_A } else { &POOL_B };
            let n_sent = rng.random_range(1..=3);
            let n_comm = rng.random_range(3..=5);
            CorpusExample {
                id: format!("sep{i}"),
                label,
                post: (0..n_sent).map(|_| sentence(&mut rng, pool, 4, 8)).collect(),
                comments: (0..n_comm).map(|_| sentence(&mut rng, pool, 3, 6)).collect(),
            }
        })
        .collect()
}

/// A post whose comments are planted as supporting or opposing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedPost {
    pub example: CorpusExample,
    /// `true` for comments built from the post's own tokens.
    pub supporting: Vec<bool>,
}

/// `n` posts with `comments` comments each (at least 2). Half of the
/// comments reuse tokens of the post (planted supporting); the rest draw from
/// [`ANTONYM_POOL`], disjoint from every post (planted opposing). The label
/// follows the post's pool (A → 0, B → 1), so only the supporting comments
/// carry class information. Comment order is shuffled.
pub fn planted_stance_corpus(n: usize, comments: usize, seed: u64) -> Vec<PlantedPost> {
    assert!(comments >= 2, "planted posts need at least two comments");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let pool: &[&str] = if label == 0 { &POOL_A } else { &POOL_B };
            let topic: Vec<&str> = pool.choose_multiple(&mut rng, 5).copied().collect();
            let n_sent = rng.random_range(1..=2);
            let post: Vec<String> = (0..n_sent).map(|_| sentence(&mut rng, &topic, 4, 7)).collect();
            let mut used: Vec<&str> = Vec::new();
            for w in post.iter().flat_map(|s| s.split(' ')) {
                if !used.contains(&w) {
                    used.push(w);
                }
            }
            let mut planted: Vec<(String, bool)> = (0..comments)
                .map(|j| {
                    let supporting = j < comments / 2;
                    let src: &[&str] = if supporting { &used } else { &ANTONYM_POOL };
                    (sentence(&mut rng, src, 3, 6), supporting)
                })
                .collect();
            for j in (1..planted.len()).rev() {
                let k = rng.random_range(0..=j);
                planted.swap(j, k);
            }
            PlantedPost {
                example: CorpusExample {
                    id: format!("stance{i}"),
                    label,
                    post,
                    comments: planted.iter().map(|(c, _)| c.clone()).collect(),
                },
                supporting: planted.iter().map(|(_, s)| *s).collect(),
            }
        })
        .collect()
}

/// Probability that a random supporting comment outscores a random opposing
/// comment of the same post (ties count half). `None` when the post lacks
/// either class.
pub fn within_post_auc(scores: &[f64], supporting: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if supporting[i] && !supporting[j] {
                pairs += 1;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}
