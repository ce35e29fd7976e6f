//! Interaction streams: rating-file ingestion, a synthetic long-tailed
//! generator, chronological splitting and batching.
//!
//! There is deliberately no shuffling anywhere; a stream is consumed once, in
//! timestamp order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::embedding::IdKey;
use crate::error::{Error, Result};

/// One stream record. Ids are dense indices after [`IdMap`] remapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    /// 1 iff the rating was above 3.
    pub label: u8,
    /// Seconds; never negative.
    pub timestamp: i64,
}

impl Interaction {
    pub fn user_key(&self) -> IdKey {
        IdKey::user(self.user)
    }

    pub fn item_key(&self) -> IdKey {
        IdKey::item(self.item)
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

/// Binarization rule: like iff rating > 3.
pub fn binarize(rating: f64) -> u8 {
    u8::from(rating > 3.0)
}

/// Dense remapping of raw ids in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    raw: Vec<String>,
    #[serde(skip)]
    dense: HashMap<String, u64>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, raw: &str) -> u64 {
        if let Some(&d) = self.dense.get(raw) {
            return d;
        }
        let d = self.raw.len() as u64;
        self.raw.push(raw.to_owned());
        self.dense.insert(raw.to_owned(), d);
        d
    }

    pub fn get(&self, raw: &str) -> Option<u64> {
        self.dense.get(raw).copied()
    }

    pub fn raw(&self, dense: u64) -> Option<&str> {
        self.raw.get(dense as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Rebuilds the lookup side after deserialization.
    fn reindex(&mut self) {
        self.dense = self
            .raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i as u64))
            .collect();
    }
}

/// Loaded interactions with the id remapping that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
    /// Rows skipped as malformed: `(line, reason)`.
    pub skipped: Vec<(usize, String)>,
}

impl Dataset {
    /// Writes the id mapping as JSON.
    pub fn save_id_maps(&self, path: &Path) -> Result<()> {
        let json = serde_json::json!({ "users": self.users, "items": self.items });
        fs::write(path, serde_json::to_vec_pretty(&json)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_id_maps(path: &Path) -> Result<(IdMap, IdMap)> {
        #[derive(Deserialize)]
        struct Maps {
            users: IdMap,
            items: IdMap,
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut maps: Maps = serde_json::from_slice(&bytes)?;
        maps.users.reindex();
        maps.items.reindex();
        Ok((maps.users, maps.items))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingFormat {
    /// `userId,movieId,rating,timestamp` rows (`::` separators also accepted).
    #[default]
    MovieLens,
    /// `MovieID:` header lines followed by `CustomerID,Rating,YYYY-MM-DD` rows.
    Netflix,
}

/// Fraction of malformed rows above which loading aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.001;

pub fn load(path: &Path, format: RatingFormat) -> Result<Dataset> {
    match format {
        RatingFormat::MovieLens => load_ratings(path),
        RatingFormat::Netflix => load_netflix(path),
    }
}

struct RowSink {
    path: PathBuf,
    data: Dataset,
    rows: usize,
}

impl RowSink {
    fn new(path: &Path) -> Self {
        Self {
            path: path.to_owned(),
            data: Dataset::default(),
            rows: 0,
        }
    }

    fn push(&mut self, line: usize, row: std::result::Result<(String, String, f64, i64), String>) {
        self.rows += 1;
        match row {
            Ok((user, item, rating, timestamp)) => {
                let user = self.data.users.intern(&user);
                let item = self.data.items.intern(&item);
                self.data.interactions.push(Interaction {
                    user,
                    item,
                    label: binarize(rating),
                    timestamp,
                });
            }
            Err(reason) => self.data.skipped.push((line, reason)),
        }
    }

    fn finish(self) -> Result<Dataset> {
        let bad = self.data.skipped.len();
        if bad > 0 && bad as f64 > MAX_MALFORMED_FRACTION * self.rows as f64 {
            let (first_line, first_reason) = self.data.skipped[0].clone();
            return Err(Error::Malformed {
                path: self.path,
                malformed: bad,
                total: self.rows,
                first_line,
                first_reason,
            });
        }
        Ok(self.data)
    }
}

fn parse_rating(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("rating {s:?} is not a number"))?;
    if !r.is_finite() || r < 0.0 {
        return Err(format!("rating {s:?} out of range"));
    }
    Ok(r)
}

fn parse_id(s: &str, what: &str) -> std::result::Result<String, String> {
    let s = s.trim();
    if s.is_empty() {
        Err(format!("empty {what}"))
    } else {
        Ok(s.to_owned())
    }
}

fn parse_movielens_row(line: &str) -> std::result::Result<(String, String, f64, i64), String> {
    let fields: Vec<&str> = if line.contains("::") {
        line.split("::").collect()
    } else {
        line.split(',').collect()
    };
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let timestamp: i64 = fields[3]
        .trim()
        .parse()
        .map_err(|_| format!("timestamp {:?} is not an integer", fields[3]))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok((
        parse_id(fields[0], "user id")?,
        parse_id(fields[1], "item id")?,
        parse_rating(fields[2])?,
        timestamp,
    ))
}

/// A first line that does not parse as a row but contains letters.
fn is_header(line: &str) -> bool {
    parse_movielens_row(line).is_err() && line.chars().any(char::is_alphabetic)
}

/// Reads a MovieLens-layout rating file.
///
/// A leading header line is skipped. Malformed rows are collected in
/// [`Dataset::skipped`]; if they exceed [`MAX_MALFORMED_FRACTION`] of all rows
/// the load fails with the first offending line.
pub fn load_ratings(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sink = RowSink::new(path);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && is_header(line)) {
            continue;
        }
        sink.push(i + 1, parse_movielens_row(line));
    }
    sink.finish()
}

fn netflix_date(s: &str) -> std::result::Result<i64, String> {
    let date = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| format!("date {s:?} is not YYYY-MM-DD"))?;
    let secs = date
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc()
        .timestamp();
    if secs < 0 {
        return Err(format!("date {s:?} precedes the epoch"));
    }
    Ok(secs)
}

/// Reads Netflix-prize rating files: a single file or every file in a
/// directory, in name order.
pub fn load_netflix(path: &Path) -> Result<Dataset> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            if entry.path().is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
    } else {
        files.push(path.to_owned());
    }
    let mut sink = RowSink::new(path);
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut movie: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(id) = line.strip_suffix(':') {
                movie = Some(id.trim().to_owned());
                continue;
            }
            let row = match &movie {
                None => Err("rating row before any movie header".to_owned()),
                Some(m) => {
                    let fields: Vec<&str> = line.split(',').collect();
                    if fields.len() != 3 {
                        Err(format!("expected 3 fields, found {}", fields.len()))
                    } else {
                        (|| {
                            Ok((
                                parse_id(fields[0], "customer id")?,
                                m.clone(),
                                parse_rating(fields[1])?,
                                netflix_date(fields[2])?,
                            ))
                        })()
                    }
                }
            };
            sink.push(i + 1, row);
        }
    }
    sink.finish()
}

/// Rejects streams whose timestamps decrease anywhere.
pub fn check_chronological(interactions: &[Interaction]) -> Result<()> {
    for (i, w) in interactions.windows(2).enumerate() {
        if w[1].timestamp < w[0].timestamp {
            return Err(Error::NonChronological {
                index: i + 1,
                previous: w[0].timestamp,
                timestamp: w[1].timestamp,
            });
        }
    }
    Ok(())
}

/// Stable sort by timestamp, then the first `⌊fraction·N⌋` rows train.
pub fn split_stream(
    interactions: &[Interaction],
    train_fraction: f64,
) -> Result<(Vec<Interaction>, Vec<Interaction>)> {
    if interactions.is_empty() {
        return Err(Error::Empty("interaction stream"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("train_fraction", format!("{train_fraction} not in [0, 1]")));
    }
    let mut sorted = interactions.to_vec();
    sorted.sort_by_key(|x| x.timestamp);
    let cut = (train_fraction * sorted.len() as f64).floor() as usize;
    let test = sorted.split_off(cut);
    Ok((sorted, test))
}

/// Consecutive chunks of `batch_size`; the last may be shorter.
pub fn batch_stream(
    interactions: &[Interaction],
    batch_size: usize,
) -> Result<std::slice::Chunks<'_, Interaction>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be >= 1"));
    }
    Ok(interactions.chunks(batch_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_users: u64,
    pub n_items: u64,
    /// Zipf exponent shared by user and item popularity.
    pub exponent: f64,
    pub n_interactions: usize,
    /// Probability of flipping each label.
    pub noise: f64,
    /// Fraction of the stream after which item popularity ranks are reshuffled.
    pub drift: Option<f64>,
    /// Rank of the planted preference matrix.
    pub rank: usize,
    /// Scale of the per-item bias relative to the low-rank term.
    pub item_bias: f64,
    /// Scale of the per-user bias relative to the low-rank term.
    pub user_bias: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 5_000,
            n_items: 2_000,
            exponent: 1.2,
            n_interactions: 200_000,
            noise: 0.1,
            drift: None,
            rank: 8,
            item_bias: 1.0,
            user_bias: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_interactions == 0 {
            return Err(Error::invalid("synthetic counts", "must all be >= 1"));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::invalid("exponent", format!("{} must be > 0", self.exponent)));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::invalid("noise", format!("{} not in [0, 0.5]", self.noise)));
        }
        if let Some(d) = self.drift {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::invalid("drift", format!("{d} not in [0, 1]")));
            }
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank", "must be >= 1"));
        }
        if !(self.item_bias >= 0.0 && self.user_bias >= 0.0) {
            return Err(Error::invalid("bias scales", "must be >= 0"));
        }
        Ok(())
    }
}

/// Planted preferences: `score(u, i) = ⟨p_u, q_i⟩ + b_u + b_i`, liked iff positive.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    rank: usize,
    users: Vec<f64>,
    items: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
}

impl PlantedModel {
    fn new<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Self {
        let scale = 1.0 / (spec.rank as f64).sqrt().sqrt();
        let mut normal = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        Self {
            rank: spec.rank,
            users: normal(spec.n_users as usize * spec.rank, scale),
            items: normal(spec.n_items as usize * spec.rank, scale),
            user_bias: normal(spec.n_users as usize, spec.user_bias),
            item_bias: normal(spec.n_items as usize, spec.item_bias),
        }
    }

    pub fn score(&self, user: u64, item: u64) -> f64 {
        let (u, i, r) = (user as usize, item as usize, self.rank);
        let dot: f64 = self.users[u * r..(u + 1) * r]
            .iter()
            .zip(&self.items[i * r..(i + 1) * r])
            .map(|(a, b)| a * b)
            .sum();
        dot + self.user_bias[u] + self.item_bias[i]
    }
}

/// Draws a long-tailed interaction stream. Ids are dense; timestamps are
/// strictly increasing.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Interaction>> {
    Ok(generate_synthetic_with_model(spec)?.0)
}

pub fn generate_synthetic_with_model(spec: &SyntheticSpec) -> Result<(Vec<Interaction>, PlantedModel)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = PlantedModel::new(spec, &mut rng);
    let user_zipf = Zipf::new(spec.n_users, spec.exponent)
        .map_err(|e| Error::invalid("exponent", e.to_string()))?;
    let item_zipf = Zipf::new(spec.n_items, spec.exponent)
        .map_err(|e| Error::invalid("exponent", e.to_string()))?;
    // Popularity rank r maps to id perm[r].
    let mut user_perm: Vec<u64> = (0..spec.n_users).collect();
    let mut item_perm: Vec<u64> = (0..spec.n_items).collect();
    user_perm.shuffle(&mut rng);
    item_perm.shuffle(&mut rng);
    let drift_at = spec
        .drift
        .map(|d| (d * spec.n_interactions as f64) as usize);
    let mut timestamp: i64 = 1_000_000_000;
    let mut out = Vec::with_capacity(spec.n_interactions);
    for n in 0..spec.n_interactions {
        if drift_at == Some(n) {
            item_perm.shuffle(&mut rng);
        }
        let user = user_perm[user_zipf.sample(&mut rng) as usize - 1];
        let item = item_perm[item_zipf.sample(&mut rng) as usize - 1];
        let mut label = u8::from(model.score(user, item) > 0.0);
        if spec.noise > 0.0 && rng.gen::<f64>() < spec.noise {
            label ^= 1;
        }
        timestamp += rng.gen_range(1..=60);
        out.push(Interaction {
            user,
            item,
            label,
            timestamp,
        });
    }
    Ok((out, model))
}
