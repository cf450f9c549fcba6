//! Parallel corpora, tokenization and balanced multi-dataset batching.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A source sentence and its translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPair {
    pub source_text: String,
    pub target_text: String,
    pub source_lang: String,
    pub target_lang: String,
    /// Mining confidence, when the corpus carries one (e.g. WikiMatrix).
    pub score: Option<f64>,
}

impl ParallelPair {
    pub fn new(
        source_text: impl Into<String>,
        target_text: impl Into<String>,
        source_lang: impl Into<String>,
        target_lang: impl Into<String>,
    ) -> Result<Self> {
        let pair = ParallelPair {
            source_text: source_text.into(),
            target_text: target_text.into(),
            source_lang: source_lang.into(),
            target_lang: target_lang.into(),
            score: None,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_text.trim().is_empty() || self.target_text.trim().is_empty() {
            return Err(Error::arg("pair text is empty after trimming"));
        }
        for tag in [&self.source_lang, &self.target_lang] {
            if tag.is_empty() || !tag.is_ascii() {
                return Err(Error::arg(format!("invalid language tag {tag:?}")));
            }
        }
        Ok(())
    }

    fn key(&self) -> (&str, &str) {
        (&self.source_text, &self.target_text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub pairs: Vec<ParallelPair>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, pairs: Vec<ParallelPair>) -> Self {
        Dataset {
            name: name.into(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Training datasets plus the pooled hold-out set used for monitoring.
#[derive(Debug, Clone, Default)]
pub struct DatasetRegistry {
    datasets: Vec<Dataset>,
    holdout: Vec<ParallelPair>,
}

impl DatasetRegistry {
    /// Fails on duplicate dataset names or when a hold-out pair also occurs
    /// in a training dataset.
    pub fn new(datasets: Vec<Dataset>, holdout: Vec<ParallelPair>) -> Result<Self> {
        let mut names = HashSet::new();
        for d in &datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::arg(format!("duplicate dataset name {:?}", d.name)));
            }
        }
        let held: HashSet<(&str, &str)> = holdout.iter().map(ParallelPair::key).collect();
        for d in &datasets {
            if let Some(p) = d.pairs.iter().find(|p| held.contains(&p.key())) {
                return Err(Error::arg(format!(
                    "hold-out pair {:?} also present in dataset {:?}",
                    p.source_text, d.name
                )));
            }
        }
        Ok(DatasetRegistry { datasets, holdout })
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn holdout(&self) -> &[ParallelPair] {
        &self.holdout
    }

    pub fn total_pairs(&self) -> usize {
        self.datasets.iter().map(Dataset::len).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutMode {
    /// Sample the hold-out set from the union of all datasets.
    #[default]
    Pooled,
    /// Take the same number of hold-out pairs from every dataset.
    PerDataset,
}

/// Carves a hold-out set out of `datasets` and assembles a registry.
///
/// Training copies of a pair that ended up in the hold-out set (duplicate
/// lines, or the same pair in two corpora) are dropped so the registry
/// invariant holds.
pub fn build_registry(
    datasets: Vec<Dataset>,
    holdout_size: usize,
    mode: HoldoutMode,
    seed: u64,
) -> Result<DatasetRegistry> {
    if holdout_size == 0 {
        return DatasetRegistry::new(datasets, Vec::new());
    }
    let (mut train, holdout) = match mode {
        HoldoutMode::Pooled => {
            let total: usize = datasets.iter().map(Dataset::len).sum();
            if holdout_size >= total {
                return Err(Error::arg(format!(
                    "hold-out size {holdout_size} must be smaller than the pooled corpus of {total} pairs"
                )));
            }
            let mut order: Vec<usize> = (0..total).collect();
            order.shuffle(&mut seed::derived_rng(seed, "holdout"));
            let mut held = vec![false; total];
            for &i in &order[..holdout_size] {
                held[i] = true;
            }
            let mut flags = held.into_iter();
            let mut holdout = Vec::with_capacity(holdout_size);
            let mut train = Vec::with_capacity(datasets.len());
            for d in datasets {
                let mut keep = Vec::with_capacity(d.len());
                for p in d.pairs {
                    if flags.next().unwrap_or(false) {
                        holdout.push(p);
                    } else {
                        keep.push(p);
                    }
                }
                train.push(Dataset::new(d.name, keep));
            }
            (train, holdout)
        }
        HoldoutMode::PerDataset => {
            let mut train = Vec::with_capacity(datasets.len());
            let mut holdout = Vec::new();
            for d in datasets {
                let label = format!("holdout:{}", d.name);
                let (rest, held) = split_holdout(d, holdout_size, seed::derive(seed, &label))?;
                train.push(rest);
                holdout.extend(held);
            }
            (train, holdout)
        }
    };
    let held: HashSet<(String, String)> = holdout
        .iter()
        .map(|p| (p.source_text.clone(), p.target_text.clone()))
        .collect();
    for d in &mut train {
        d.pairs
            .retain(|p| !held.contains(&(p.source_text.clone(), p.target_text.clone())));
    }
    DatasetRegistry::new(train, holdout)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Keep only the first `k` valid pairs.
    pub truncate: Option<usize>,
    /// Dataset name; defaults to the file stem.
    pub name: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Lines dropped because a pair failed validation.
    pub skipped: usize,
}

pub fn load_parallel_tsv(path: &Path, source_lang: &str, target_lang: &str) -> Result<Dataset> {
    load_parallel_tsv_with(path, source_lang, target_lang, &LoadOptions::default())
        .map(|r| r.dataset)
}

/// Reads `source<TAB>target[<TAB>score]` lines; `#` lines are comments.
pub fn load_parallel_tsv_with(
    path: &Path,
    source_lang: &str,
    target_lang: &str,
    opts: &LoadOptions,
) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = opts.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    });
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if opts.truncate.is_some_and(|k| pairs.len() >= k) {
            break;
        }
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "expected at least two tab-separated fields".into(),
            });
        }
        let score = match fields.get(2).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("score {s:?} is not a decimal number"),
            })?),
        };
        match ParallelPair::new(fields[0], fields[1], source_lang, target_lang) {
            Ok(mut p) => {
                p.score = score;
                pairs.push(p);
            }
            Err(_) => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(name));
    }
    Ok(LoadReport {
        dataset: Dataset::new(name, pairs),
        skipped,
    })
}

pub fn write_parallel_tsv(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source_text);
        out.push('\t');
        out.push_str(&p.target_text);
        if let Some(s) = p.score {
            out.push('\t');
            out.push_str(&s.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps pairs whose score is strictly above `min_score`. Passing
/// `f64::NEG_INFINITY` disables the filter, including for unscored pairs.
pub fn filter_by_score(dataset: Dataset, min_score: f64) -> Dataset {
    if min_score == f64::NEG_INFINITY {
        return dataset;
    }
    let pairs = dataset
        .pairs
        .into_iter()
        .filter(|p| p.score.is_some_and(|s| s > min_score))
        .collect();
    Dataset::new(dataset.name, pairs)
}

/// Moves `n` seeded-random pairs out of `dataset`. Both halves keep file
/// order.
pub fn split_holdout(dataset: Dataset, n: usize, seed: u64) -> Result<(Dataset, Vec<ParallelPair>)> {
    if n >= dataset.len() {
        return Err(Error::arg(format!(
            "hold-out size {n} must be smaller than dataset {:?} of size {}",
            dataset.name,
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut held = vec![false; dataset.len()];
    for &i in &order[..n] {
        held[i] = true;
    }
    let mut train = Vec::with_capacity(dataset.len() - n);
    let mut holdout = Vec::with_capacity(n);
    for (p, h) in dataset.pairs.into_iter().zip(held) {
        if h {
            holdout.push(p);
        } else {
            train.push(p);
        }
    }
    Ok((Dataset::new(dataset.name, train), holdout))
}

// ---------------------------------------------------------------------------
// Tokenizer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub n_min: u32,
    pub n_max: u32,
    /// Number of hash buckets `V`; bucket 0 is reserved for empty text.
    pub buckets: u32,
    /// Token cap per sentence, tail truncated. 0 disables the cap.
    pub max_tokens: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            n_min: 1,
            n_max: 4,
            buckets: 1 << 18,
            max_tokens: 256,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 {
            return Err(Error::arg("tokenizer needs at least one bucket"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::arg(format!(
                "invalid n-gram range [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenIds(pub Vec<u32>);

impl TokenIds {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Maps a piece of text to a non-reserved bucket.
pub fn bucket_of(piece: &str, buckets: u32) -> u32 {
    if buckets <= 1 {
        return 0;
    }
    1 + (fnv1a64(piece.as_bytes()) % u64::from(buckets - 1)) as u32
}

/// Lowercases, splits on Unicode whitespace and emits, per word, every
/// character n-gram with `n_min <= n <= n_max` (ascending n, then position)
/// followed by the whole word when the word is not itself one of those
/// n-grams.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> TokenIds {
    let lower = text.to_lowercase();
    let mut ids = Vec::new();
    let cap = config.max_tokens as usize;
    'words: for word in lower.split_whitespace() {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let len = chars.len();
        for n in config.n_min as usize..=config.n_max as usize {
            if n > len {
                break;
            }
            for start in 0..=len - n {
                let from = chars[start].0;
                let to = chars.get(start + n).map_or(word.len(), |c| c.0);
                ids.push(bucket_of(&word[from..to], config.buckets));
                if cap > 0 && ids.len() >= cap {
                    break 'words;
                }
            }
        }
        if len < config.n_min as usize || len > config.n_max as usize {
            ids.push(bucket_of(word, config.buckets));
            if cap > 0 && ids.len() >= cap {
                break;
            }
        }
    }
    if ids.is_empty() {
        ids.push(0);
    }
    TokenIds(ids)
}

// ---------------------------------------------------------------------------
// Balanced sampling

/// One drawn pair and the index (in name order) of the dataset it came from.
#[derive(Debug, Clone, Copy)]
pub struct Draw<'a> {
    pub dataset: usize,
    pub pair: &'a ParallelPair,
}

struct CyclicShuffle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicShuffle {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = CyclicShuffle {
            order: (0..len).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Round-robin sampler over several datasets.
///
/// Datasets are visited in name order, one pair each per round. Every
/// dataset has its own seeded shuffled cycle, so smaller datasets repeat
/// (reshuffled) while the largest one is consumed once per epoch. Cycle
/// state carries over between epochs.
pub struct BalancedSampler<'a> {
    datasets: Vec<&'a Dataset>,
    cycles: Vec<CyclicShuffle>,
    batch_size: usize,
    largest: usize,
}

pub fn balanced_batches(
    registry: &DatasetRegistry,
    batch_size: usize,
    seed: u64,
) -> Result<BalancedSampler<'_>> {
    BalancedSampler::new(registry.datasets(), batch_size, seed)
}

impl<'a> BalancedSampler<'a> {
    pub fn new(datasets: &'a [Dataset], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        let mut by_name: BTreeMap<&str, &Dataset> = BTreeMap::new();
        for d in datasets.iter().filter(|d| !d.is_empty()) {
            by_name.insert(d.name.as_str(), d);
        }
        if by_name.is_empty() {
            return Err(Error::arg("all datasets are empty"));
        }
        let datasets: Vec<&Dataset> = by_name.into_values().collect();
        let cycles = datasets
            .iter()
            .map(|d| CyclicShuffle::new(d.len(), seed::derived_rng(seed, &format!("sampler:{}", d.name))))
            .collect();
        let largest = datasets.iter().map(|d| d.len()).max().unwrap_or(0);
        Ok(BalancedSampler {
            datasets,
            cycles,
            batch_size,
            largest,
        })
    }

    /// Names of the non-empty datasets, in draw order.
    pub fn dataset_names(&self) -> Vec<&str> {
        self.datasets.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn draws_per_epoch(&self) -> usize {
        self.largest * self.datasets.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.draws_per_epoch().div_ceil(self.batch_size)
    }

    /// Batches of the next epoch. The last batch may be short.
    pub fn epoch(&mut self) -> EpochBatches<'_, 'a> {
        let remaining = self.draws_per_epoch();
        EpochBatches {
            sampler: self,
            remaining,
            slot: 0,
        }
    }
}

pub struct EpochBatches<'s, 'a> {
    sampler: &'s mut BalancedSampler<'a>,
    remaining: usize,
    slot: usize,
}

impl<'a> Iterator for EpochBatches<'_, 'a> {
    type Item = Vec<Draw<'a>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let take = self.remaining.min(self.sampler.batch_size);
        let mut batch = Vec::with_capacity(take);
        for _ in 0..take {
            let d = self.slot;
            let idx = self.sampler.cycles[d].next();
            batch.push(Draw {
                dataset: d,
                pair: &self.sampler.datasets[d].pairs[idx],
            });
            self.slot = (self.slot + 1) % self.sampler.datasets.len();
        }
        self.remaining -= take;
        Some(batch)
    }
}
