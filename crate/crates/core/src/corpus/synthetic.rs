//! Deterministic synthetic review corpus for tests and offline runs.
//!
//! Every user writes with a private vocabulary mixed with item-specific and
//! shared words, and the rating drives sentiment-bearing words, so that
//! style-sensitive backends and lexicon sentiment produce varied results.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parse_reviews, prepare_instances, CorpusError, FilterConfig, InstanceRecord, RawRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub reviews_per_user: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 40,
            items: 30,
            reviews_per_user: 8,
            seed: 17,
        }
    }
}

const SHARED: &[&str] = &[
    "the", "this", "it", "and", "is", "was", "really", "very", "with", "for", "of", "a", "to", "album",
    "product", "sound", "quality", "time", "one", "would", "again", "just", "my", "i",
];
const POSITIVE: &[&str] = &["great", "love", "excellent", "amazing", "wonderful", "recommend"];
const NEGATIVE: &[&str] = &["bad", "terrible", "disappointing", "awful", "broken", "waste"];
const NEUTRAL: &[&str] = &["okay", "average", "fine", "decent", "ordinary"];
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vo", "pel", "dri", "no", "shi", "gar", "bel", "quo",
];

fn coined_word(rng: &mut ChaCha8Rng) -> String {
    let parts = rng.gen_range(2..=3);
    (0..parts).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

fn review_text(rng: &mut ChaCha8Rng, style: &[String], item_words: &[String], rating: u8) -> String {
    let len = rng.gen_range(24..=60);
    let sentiment: &[&str] = match rating {
        4..=5 => POSITIVE,
        3 => NEUTRAL,
        _ => NEGATIVE,
    };
    (0..len)
        .map(|_| {
            let roll: f64 = rng.gen();
            if roll < 0.35 {
                style.choose(rng).unwrap().clone()
            } else if roll < 0.50 {
                item_words.choose(rng).unwrap().clone()
            } else if roll < 0.60 {
                (*sentiment.choose(rng).unwrap()).to_owned()
            } else {
                (*SHARED.choose(rng).unwrap()).to_owned()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates `users * reviews_per_user` records. Each user reviews distinct
/// items in strictly increasing timestamp order.
pub fn generate(cfg: &SynthConfig) -> Vec<RawRecord> {
    assert!(
        cfg.reviews_per_user <= cfg.items,
        "users cannot review more distinct items than exist"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let item_words: Vec<Vec<String>> = (0..cfg.items)
        .map(|_| (0..6).map(|_| coined_word(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.users * cfg.reviews_per_user);
    for u in 0..cfg.users {
        let style: Vec<String> = (0..10).map(|_| coined_word(&mut rng)).collect();
        let mood: u8 = rng.gen_range(1..=5);
        let mut items: Vec<usize> = (0..cfg.items).collect();
        items.shuffle(&mut rng);
        for (k, &i) in items.iter().take(cfg.reviews_per_user).enumerate() {
            let rating = if rng.gen_bool(0.7) {
                mood
            } else {
                rng.gen_range(1..=5)
            };
            out.push(RawRecord {
                user_id: format!("user{u:03}"),
                item_id: format!("item{i:03}"),
                text: review_text(&mut rng, &style, &item_words[i], rating),
                rating: Some(f64::from(rating)),
                timestamp: 1_600_000_000 + (u * 1000 + k * 10) as i64,
                title: format!("Item {i} {}", item_words[i][0]),
                category: format!("Category {}", i % 4),
                description: item_words[i].join(" "),
                domain: "Synthetic".into(),
            });
        }
    }
    out
}

/// Generated records as line-delimited JSON.
pub fn to_jsonl(records: &[RawRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

/// Instance records for the first `count` surviving users (all when 0),
/// built through the regular parse, filter and instance pipeline.
pub fn instances(cfg: &SynthConfig, n: usize, count: usize) -> Result<Vec<InstanceRecord>, CorpusError> {
    let loaded = parse_reviews(to_jsonl(&generate(cfg)).as_bytes())?;
    let mut prepared = prepare_instances(&loaded, &FilterConfig::default(), 0, cfg.seed, n)?;
    if count > 0 {
        if prepared.records.len() < count {
            return Err(CorpusError::NotEnoughUsers {
                requested: count,
                available: prepared.records.len(),
            });
        }
        prepared.records.truncate(count);
    }
    Ok(prepared.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{filter_corpus, parse_reviews, FilterConfig};

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg), generate(&cfg));
    }

    #[test]
    fn survives_default_filter() {
        let records = generate(&SynthConfig::default());
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let loaded = parse_reviews(text.as_bytes()).unwrap();
        assert!(loaded.diagnostics.is_empty());
        let filtered = filter_corpus(&loaded.corpus, &FilterConfig::default()).unwrap();
        assert_eq!(filtered.users().len(), 40);
    }

    #[test]
    fn instances_have_full_pools() {
        let recs = instances(&SynthConfig::default(), 5, 20).unwrap();
        assert_eq!(recs.len(), 20);
        for r in &recs {
            assert_eq!(r.instance.n(), 5);
            assert!(r.pools.iter().all(|p| p.len() >= crate::corpus::MIN_POOL_SIZE));
            assert!(r
                .pools
                .iter()
                .all(|p| p.reviews.iter().all(|x| x.user_id != r.instance.user_id())));
        }
    }
}
