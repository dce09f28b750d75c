//! Review corpus ingestion: parsing, filtering, user sampling and
//! construction of evaluation instances with their reference pools.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::metrics::{MetricError, SimilarityScorer};
use crate::stats;

/// Reference pools smaller than this violate the corpus guarantee.
pub const MIN_POOL_SIZE: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid filter configuration: {0}")]
    BadFilter(String),
    #[error("requested {requested} users but only {available} are eligible")]
    NotEnoughUsers { requested: usize, available: usize },
    #[error("user {user_id} has {have} reviews, need at least {need}")]
    InsufficientHistory {
        user_id: String,
        have: usize,
        need: usize,
    },
    #[error("target item {0} also appears in the user's history")]
    TargetInHistory(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("reference pool for item {item_id} has {size} reviews, fewer than {MIN_POOL_SIZE}")]
    PoolTooSmall { item_id: String, size: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub user_id: String,
    pub item_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item: Item,
    pub review: Review,
}

/// A user's reviews, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub entries: Vec<HistoryEntry>,
}

impl UserHistory {
    /// Sorts entries by timestamp; equal timestamps keep their given order.
    pub fn new(user_id: impl Into<String>, mut entries: Vec<HistoryEntry>) -> Self {
        entries.sort_by_key(|e| e.review.timestamp);
        Self {
            user_id: user_id.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub history: UserHistory,
    pub target_item: Item,
    pub target_review: Review,
}

impl EvalInstance {
    /// Number of history reviews.
    pub fn n(&self) -> usize {
        self.history.len()
    }

    pub fn user_id(&self) -> &str {
        &self.history.user_id
    }

    /// History entry for the 1-based turn index `k`.
    pub fn entry(&self, k: usize) -> &HistoryEntry {
        &self.history.entries[k - 1]
    }

    /// Item `i_k` for 1-based `k`, where `k = n + 1` is the target item.
    pub fn item(&self, k: usize) -> &Item {
        if k == self.n() + 1 {
            &self.target_item
        } else {
            &self.entry(k).item
        }
    }
}

/// Reviews of one item written by users other than the excluded one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePool {
    pub item_id: String,
    pub reviews: Vec<Review>,
}

impl ReferencePool {
    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }
}

/// One line of the canonical instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub domain: String,
    pub instance: EvalInstance,
    /// Pools for every history item and the target item, sorted by item id.
    pub pools: Vec<ReferencePool>,
}

impl InstanceRecord {
    pub fn pool(&self, item_id: &str) -> Option<&ReferencePool> {
        self.pools.iter().find(|p| p.item_id == item_id)
    }
}

fn string_or_list<'de, D: Deserializer<'de>>(de: D, sep: &str) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Field {
        One(String),
        Many(Vec<String>),
        Null(()),
    }
    Ok(match Field::deserialize(de)? {
        Field::One(s) => s,
        Field::Many(v) => v.join(sep),
        Field::Null(()) => String::new(),
    })
}

fn category_field<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    string_or_list(de, ", ")
}

fn description_field<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    string_or_list(de, " ")
}

/// One input line: a review with its item's metadata attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user_id: String,
    pub item_id: String,
    pub text: String,
    #[serde(default)]
    pub rating: Option<f64>,
    pub timestamp: i64,
    #[serde(default)]
    pub title: String,
    #[serde(default, deserialize_with = "category_field")]
    pub category: String,
    #[serde(default, deserialize_with = "description_field")]
    pub description: String,
    /// Dataset partition (e.g. a product category file); empty means one partition.
    #[serde(default)]
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    /// Domain of each item, from the input records.
    pub domains: BTreeMap<String, String>,
    pub diagnostics: Vec<Diagnostic>,
}

impl LoadedCorpus {
    /// Splits the corpus by domain, preserving review order.
    pub fn by_domain(&self) -> BTreeMap<String, Corpus> {
        let mut out: BTreeMap<String, Corpus> = BTreeMap::new();
        for review in &self.corpus.reviews {
            let domain = self.domains.get(&review.item_id).cloned().unwrap_or_default();
            let part = out.entry(domain).or_default();
            if let Some(item) = self.corpus.items.get(&review.item_id) {
                part.items
                    .entry(item.item_id.clone())
                    .or_insert_with(|| item.clone());
            }
            part.reviews.push(review.clone());
        }
        out
    }
}

/// Reviews in input order plus item metadata keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub reviews: Vec<Review>,
    pub items: BTreeMap<String, Item>,
}

impl Corpus {
    pub fn new(reviews: Vec<Review>, items: impl IntoIterator<Item = Item>) -> Self {
        Self {
            reviews,
            items: items.into_iter().map(|i| (i.item_id.clone(), i)).collect(),
        }
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.reviews.iter().map(|r| r.user_id.as_str()).collect()
    }

    /// Chronological history of one user; items missing from the metadata
    /// table get an id-only record.
    pub fn history_of(&self, user_id: &str) -> UserHistory {
        let entries = self
            .reviews
            .iter()
            .filter(|r| r.user_id == user_id)
            .map(|r| HistoryEntry {
                item: self.items.get(&r.item_id).cloned().unwrap_or_else(|| Item {
                    item_id: r.item_id.clone(),
                    title: String::new(),
                    category: String::new(),
                    description: String::new(),
                }),
                review: r.clone(),
            })
            .collect();
        UserHistory::new(user_id, entries)
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^<>]*>").expect("static pattern"))
}

/// Removes HTML tags, replacing each with a space.
pub fn strip_tags(text: &str) -> String {
    if !text.contains('<') {
        return text.to_owned();
    }
    let stripped = tag_regex().replace_all(text, " ");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn record_to_parts(rec: RawRecord) -> Result<(Review, Item, String), String> {
    if rec.user_id.trim().is_empty() {
        return Err("empty user_id".into());
    }
    if rec.item_id.trim().is_empty() {
        return Err("empty item_id".into());
    }
    let text = strip_tags(&rec.text);
    if text.trim().is_empty() {
        return Err("empty review text".into());
    }
    let rating = match rec.rating {
        None => None,
        Some(r) if r.fract() == 0.0 && (1.0..=5.0).contains(&r) => Some(r as u8),
        Some(r) => return Err(format!("rating {r} outside 1..=5")),
    };
    let review = Review {
        user_id: rec.user_id,
        item_id: rec.item_id.clone(),
        text,
        rating,
        timestamp: rec.timestamp,
    };
    let item = Item {
        item_id: rec.item_id,
        title: rec.title,
        category: rec.category,
        description: strip_tags(&rec.description),
    };
    Ok((review, item, rec.domain))
}

/// Parses line-delimited JSON records. Unparseable lines are skipped and
/// reported with their 1-based line numbers; blank lines are ignored.
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: format!("<line {line_no}>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(record_to_parts);
        match parsed {
            Ok((review, item, domain)) => {
                out.domains.entry(item.item_id.clone()).or_insert(domain);
                out.corpus.items.entry(item.item_id.clone()).or_insert(item);
                out.corpus.reviews.push(review);
            }
            Err(message) => out.diagnostics.push(Diagnostic {
                line: line_no,
                message,
            }),
        }
    }
    Ok(out)
}

pub fn load_reviews(path: &Path) -> Result<LoadedCorpus, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_reviews(BufReader::new(file))
}

/// How review length is measured for the length filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCounter {
    /// Whitespace split after NFKC normalization.
    #[default]
    Whitespace,
    /// The metric tokenizer (alphanumeric runs).
    Word,
}

impl TokenCounter {
    pub fn count(self, text: &str) -> usize {
        match self {
            TokenCounter::Whitespace => text.nfkc().collect::<String>().split_whitespace().count(),
            TokenCounter::Word => crate::metrics::tokenize(text).len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_user_reviews: usize,
    pub min_other_reviews: usize,
    /// Inclusive token-count bounds.
    pub token_min: usize,
    pub token_max: usize,
    pub counter: TokenCounter,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_user_reviews: 6,
            min_other_reviews: 5,
            token_min: 20,
            token_max: 300,
            counter: TokenCounter::Whitespace,
        }
    }
}

/// Applies the length, user and item constraints until nothing changes.
///
/// An item survives when, for every user who reviewed it, the item has at
/// least `min_other_reviews` reviews by other users.
pub fn filter_corpus(corpus: &Corpus, cfg: &FilterConfig) -> Result<Corpus, CorpusError> {
    if cfg.token_min < 1 || cfg.token_min > cfg.token_max {
        return Err(CorpusError::BadFilter(format!(
            "token range [{}, {}]",
            cfg.token_min, cfg.token_max
        )));
    }
    let mut reviews: Vec<Review> = corpus
        .reviews
        .iter()
        .filter(|r| {
            let n = cfg.counter.count(&r.text);
            n >= cfg.token_min && n <= cfg.token_max
        })
        .cloned()
        .collect();

    loop {
        let before = reviews.len();

        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for r in &reviews {
            *per_user.entry(r.user_id.as_str()).or_default() += 1;
        }
        let keep_users: BTreeSet<String> = per_user
            .into_iter()
            .filter(|(_, c)| *c >= cfg.min_user_reviews)
            .map(|(u, _)| u.to_owned())
            .collect();
        reviews.retain(|r| keep_users.contains(&r.user_id));

        let mut per_item: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
        for r in &reviews {
            *per_item
                .entry(r.item_id.as_str())
                .or_default()
                .entry(r.user_id.as_str())
                .or_default() += 1;
        }
        let keep_items: BTreeSet<String> = per_item
            .into_iter()
            .filter(|(_, by_user)| {
                let total: usize = by_user.values().sum();
                let max_single = by_user.values().copied().max().unwrap_or(0);
                total - max_single >= cfg.min_other_reviews
            })
            .map(|(i, _)| i.to_owned())
            .collect();
        reviews.retain(|r| keep_items.contains(&r.item_id));

        if reviews.len() == before {
            break;
        }
    }

    let used: BTreeSet<&str> = reviews.iter().map(|r| r.item_id.as_str()).collect();
    let items = corpus
        .items
        .iter()
        .filter(|(id, _)| used.contains(id.as_str()))
        .map(|(id, item)| (id.clone(), item.clone()))
        .collect();
    Ok(Corpus { reviews, items })
}

/// Draws `k` distinct users uniformly; the result is sorted and depends only
/// on (corpus users, k, seed).
pub fn sample_users(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<String>, CorpusError> {
    let users: Vec<&str> = corpus.users().into_iter().collect();
    if k > users.len() {
        return Err(CorpusError::NotEnoughUsers {
            requested: k,
            available: users.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = index::sample(&mut rng, users.len(), k)
        .into_iter()
        .map(|i| users[i].to_owned())
        .collect();
    picked.sort();
    Ok(picked)
}

/// Holds out the most recent review as the target and keeps the `n`
/// reviews immediately before it as history.
pub fn build_instance(history: &UserHistory, n: usize) -> Result<EvalInstance, CorpusError> {
    let len = history.len();
    if len < n + 1 {
        return Err(CorpusError::InsufficientHistory {
            user_id: history.user_id.clone(),
            have: len,
            need: n + 1,
        });
    }
    let target = &history.entries[len - 1];
    let kept = history.entries[len - 1 - n..len - 1].to_vec();
    if kept.iter().any(|e| e.item.item_id == target.item.item_id) {
        return Err(CorpusError::TargetInHistory(target.item.item_id.clone()));
    }
    Ok(EvalInstance {
        history: UserHistory {
            user_id: history.user_id.clone(),
            entries: kept,
        },
        target_item: target.item.clone(),
        target_review: target.review.clone(),
    })
}

/// All reviews of `item_id` not written by `exclude_user`, without the
/// minimum-size check.
pub fn collect_pool(corpus: &Corpus, item_id: &str, exclude_user: &str) -> ReferencePool {
    ReferencePool {
        item_id: item_id.to_owned(),
        reviews: corpus
            .reviews
            .iter()
            .filter(|r| r.item_id == item_id && r.user_id != exclude_user)
            .cloned()
            .collect(),
    }
}

pub fn reference_pool(
    corpus: &Corpus,
    item_id: &str,
    exclude_user: &str,
) -> Result<ReferencePool, CorpusError> {
    if !corpus.items.contains_key(item_id) && !corpus.reviews.iter().any(|r| r.item_id == item_id) {
        return Err(CorpusError::UnknownItem(item_id.to_owned()));
    }
    let pool = collect_pool(corpus, item_id, exclude_user);
    if pool.len() < MIN_POOL_SIZE {
        return Err(CorpusError::PoolTooSmall {
            item_id: item_id.to_owned(),
            size: pool.len(),
        });
    }
    Ok(pool)
}

/// Builds the instance record for one user: target, history and the pools
/// of every involved item.
pub fn build_record(
    corpus: &Corpus,
    user_id: &str,
    n: usize,
    domain: &str,
) -> Result<InstanceRecord, CorpusError> {
    let instance = build_instance(&corpus.history_of(user_id), n)?;
    let mut item_ids: Vec<&str> = instance
        .history
        .entries
        .iter()
        .map(|e| e.item.item_id.as_str())
        .chain(std::iter::once(instance.target_item.item_id.as_str()))
        .collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let pools = item_ids
        .iter()
        .map(|id| reference_pool(corpus, id, user_id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InstanceRecord {
        instance_id: format!("{}@{}", user_id, instance.target_item.item_id),
        domain: domain.to_owned(),
        instance,
        pools,
    })
}

/// Outcome of [`prepare_instances`].
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub records: Vec<InstanceRecord>,
    /// Sampled users without a valid instance, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Filters each domain separately, samples `sample` users per domain (0 =
/// every surviving user) and builds their instance records.
pub fn prepare_instances(
    loaded: &LoadedCorpus,
    filter: &FilterConfig,
    sample: usize,
    seed: u64,
    n: usize,
) -> Result<Prepared, CorpusError> {
    let mut out = Prepared::default();
    for (domain, part) in loaded.by_domain() {
        let filtered = filter_corpus(&part, filter)?;
        let users = if sample == 0 {
            filtered.users().into_iter().map(str::to_owned).collect()
        } else {
            sample_users(&filtered, sample, seed)?
        };
        for user in users {
            match build_record(&filtered, &user, n, &domain) {
                Ok(rec) => out.records.push(rec),
                Err(e) => out.skipped.push((user, e.to_string())),
            }
        }
    }
    Ok(out)
}

pub fn write_instances<W: std::io::Write>(mut out: W, records: &[InstanceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<InstanceRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One row of the reference-similarity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub domain: String,
    pub instances: usize,
    pub max_mean: f64,
    pub random_mean: f64,
    pub min_mean: f64,
    pub pool_median: f64,
    pub pool_mean: f64,
    pub pool_sd: f64,
}

/// Input to [`dataset_stats`]: a target review and the other users'
/// reviews of the same item.
pub struct StatsEntry<'a> {
    pub domain: &'a str,
    pub target_text: &'a str,
    pub pool: &'a ReferencePool,
}

/// Scores each pool against its target review and reports, per domain and
/// over everything (`"All"`), the mean best, random and worst score and the
/// pool-size median and mean with sample standard deviation.
pub fn dataset_stats(
    entries: &[StatsEntry<'_>],
    scorer: &dyn SimilarityScorer,
    seed: u64,
) -> Result<Vec<StatsRow>, CorpusError> {
    #[derive(Default)]
    struct Acc {
        max: Vec<f64>,
        random: Vec<f64>,
        min: Vec<f64>,
        sizes: Vec<f64>,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<&str, Acc> = BTreeMap::new();
    let mut all = Acc::default();
    for e in entries {
        if e.pool.is_empty() {
            continue;
        }
        let pairs: Vec<(&str, &str)> = e
            .pool
            .reviews
            .iter()
            .map(|r| (r.text.as_str(), e.target_text))
            .collect();
        let scores: Vec<f64> = scorer.score_batch(&pairs)?.iter().map(|s| s.f).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let random = scores[rng.gen_range(0..scores.len())];
        let size = e.pool.len() as f64;
        for acc in [groups.entry(e.domain).or_default(), &mut all] {
            acc.max.push(max);
            acc.min.push(min);
            acc.random.push(random);
            acc.sizes.push(size);
        }
    }
    let row = |domain: &str, a: &Acc| StatsRow {
        domain: domain.to_owned(),
        instances: a.sizes.len(),
        max_mean: stats::mean(&a.max),
        random_mean: stats::mean(&a.random),
        min_mean: stats::mean(&a.min),
        pool_median: stats::median(&a.sizes),
        pool_mean: stats::mean(&a.sizes),
        pool_sd: stats::sample_sd(&a.sizes),
    };
    let mut rows: Vec<StatsRow> = groups.iter().map(|(d, a)| row(d, a)).collect();
    if !all.sizes.is_empty() {
        rows.push(row("All", &all));
    }
    Ok(rows)
}
