//! Train/benchmark overlap audit: n-gram lexical metrics over an inverted
//! index, plus cosine screening over externally supplied embedding vectors.
//!
//! Tokenization is fixed for reproducibility: lowercase, split on Unicode
//! whitespace, strip non-alphanumeric characters, drop empty tokens.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ContaminationError {
    #[error("prompt has no {n}-grams (only {tokens} tokens)")]
    EmptyNgrams { n: usize, tokens: usize },
    #[error("vector {index} has dimension {got}, expected {want}")]
    DimensionMismatch { index: usize, got: usize, want: usize },
    #[error("vector {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("no vectors supplied")]
    NoVectors,
}

/// The n-gram orders the audit uses.
pub const NGRAM_ORDERS: [usize; 3] = [5, 8, 13];

/// Containment threshold for the 8-gram flag (inclusive).
pub const FLAG_8GRAM_THRESHOLD: f64 = 0.70;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|chunk| {
            chunk
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn gram_set(tokens: &[String], n: usize) -> HashSet<String> {
    if n == 0 || tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).map(|w| w.join("\u{1f}")).collect()
}

/// Token sequence plus the n-gram sets for the standard orders.
#[derive(Debug, Clone)]
pub struct NGramProfile {
    pub tokens: Vec<String>,
    sets: HashMap<usize, HashSet<String>>,
}

impl NGramProfile {
    pub fn new(text: &str) -> Self {
        let tokens = tokenize(text);
        let sets = NGRAM_ORDERS
            .iter()
            .map(|&n| (n, gram_set(&tokens, n)))
            .collect();
        Self { tokens, sets }
    }

    /// N-gram set for any order (standard orders are precomputed).
    pub fn grams(&self, n: usize) -> HashSet<String> {
        match self.sets.get(&n) {
            Some(set) => set.clone(),
            None => gram_set(&self.tokens, n),
        }
    }

    fn grams_ref(&self, n: usize) -> Option<&HashSet<String>> {
        self.sets.get(&n)
    }
}

/// Symmetric lexical overlap at the 5-gram level; 0 when both sets are
/// empty by convention.
pub fn jaccard5(a: &NGramProfile, b: &NGramProfile) -> f64 {
    let sa = a.grams(5);
    let sb = b.grams(5);
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    let intersection = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - intersection;
    intersection as f64 / union as f64
}

/// Fraction of `a`'s n-grams present in `b` (asymmetric).
pub fn containment(a: &NGramProfile, b: &NGramProfile, n: usize) -> Result<f64, ContaminationError> {
    let sa = a.grams(n);
    if sa.is_empty() {
        return Err(ContaminationError::EmptyNgrams {
            n,
            tokens: a.tokens.len(),
        });
    }
    let sb = b.grams(n);
    let hit = sa.iter().filter(|g| sb.contains(*g)).count();
    Ok(hit as f64 / sa.len() as f64)
}

fn stable_hash(gram: &str) -> u64 {
    let mut hasher = DefaultHasher::new();
    gram.hash(&mut hasher);
    hasher.finish()
}

/// Inverted index from n-gram hash to pool prompt indices; candidate hits
/// are re-verified against the raw n-grams so hash collisions never leak
/// into results.
pub struct PoolIndex {
    profiles: Vec<NGramProfile>,
    by_hash: HashMap<usize, HashMap<u64, Vec<u32>>>,
}

impl PoolIndex {
    pub fn build(texts: &[String]) -> Self {
        let profiles: Vec<NGramProfile> = texts.iter().map(|t| NGramProfile::new(t)).collect();
        let mut by_hash: HashMap<usize, HashMap<u64, Vec<u32>>> = HashMap::new();
        for &n in &NGRAM_ORDERS {
            let index = by_hash.entry(n).or_default();
            for (id, profile) in profiles.iter().enumerate() {
                if let Some(set) = profile.grams_ref(n) {
                    for gram in set {
                        index.entry(stable_hash(gram)).or_default().push(id as u32);
                    }
                }
            }
            for ids in index.values_mut() {
                ids.sort_unstable();
                ids.dedup();
            }
        }
        Self { profiles, by_hash }
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profile(&self, id: usize) -> &NGramProfile {
        &self.profiles[id]
    }

    /// Pool prompts sharing at least one raw n-gram with the query,
    /// in ascending id order.
    pub fn candidates(&self, query: &NGramProfile, n: usize) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        let Some(index) = self.by_hash.get(&n) else {
            return out;
        };
        for gram in query.grams(n).iter() {
            if let Some(ids) = index.get(&stable_hash(gram)) {
                for &id in ids {
                    // collision re-verification against the raw n-gram
                    if self.profiles[id as usize]
                        .grams_ref(n)
                        .map(|s| s.contains(gram))
                        .unwrap_or(false)
                    {
                        out.insert(id);
                    }
                }
            }
        }
        out
    }
}

/// Best match of a benchmark prompt against the pool under one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearestMatch {
    pub pool_index: usize,
    pub value: f64,
}

fn nearest_by<F: Fn(usize) -> f64>(candidates: &BTreeSet<u32>, score: F) -> Option<NearestMatch> {
    let mut best: Option<NearestMatch> = None;
    for &id in candidates {
        let value = score(id as usize);
        // strict > keeps the lowest pool index on ties, independent of order
        if best.map(|b| value > b.value).unwrap_or(true) {
            best = Some(NearestMatch {
                pool_index: id as usize,
                value,
            });
        }
    }
    best
}

/// Maximum 5-gram Jaccard of a benchmark prompt over the pool.
pub fn max_jaccard5(bench: &NGramProfile, pool: &PoolIndex) -> Option<NearestMatch> {
    nearest_by(&pool.candidates(bench, 5), |id| {
        jaccard5(bench, pool.profile(id))
    })
}

/// Maximum n-gram containment of a benchmark prompt over the pool; `None`
/// when the prompt is shorter than n tokens.
pub fn max_containment(
    bench: &NGramProfile,
    pool: &PoolIndex,
    n: usize,
) -> Option<NearestMatch> {
    if bench.grams(n).is_empty() {
        return None;
    }
    let candidates = pool.candidates(bench, n);
    if candidates.is_empty() {
        // no shared n-gram anywhere in the pool
        if pool.is_empty() {
            return None;
        }
        return Some(NearestMatch {
            pool_index: 0,
            value: 0.0,
        });
    }
    nearest_by(&candidates, |id| {
        containment(bench, pool.profile(id), n).unwrap_or(0.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flag8 {
    pub flagged: bool,
    pub max_containment: Option<f64>,
    pub nearest: Option<usize>,
}

/// Flag a benchmark prompt when at least 70% of its 8-grams are contained
/// in any single training prompt (inclusive threshold).
pub fn flag_8gram(bench: &NGramProfile, pool: &PoolIndex) -> Flag8 {
    match max_containment(bench, pool, 8) {
        Some(m) => Flag8 {
            flagged: m.value >= FLAG_8GRAM_THRESHOLD,
            max_containment: Some(m.value),
            nearest: Some(m.pool_index),
        },
        None => Flag8 {
            flagged: false,
            max_containment: None,
            nearest: None,
        },
    }
}

/// True when the benchmark prompt shares an exact 13-gram with any pool prompt.
pub fn collide_13gram(bench: &NGramProfile, pool: &PoolIndex) -> bool {
    !pool.candidates(bench, 13).is_empty()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub max_similarity: f64,
    pub nearest: usize,
    pub flagged: bool,
}

fn normalized(v: &[f64], index: usize) -> Result<Vec<f64>, ContaminationError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ContaminationError::ZeroVector { index });
    }
    if (norm - 1.0).abs() <= 1e-6 {
        Ok(v.to_vec())
    } else {
        Ok(v.iter().map(|x| x / norm).collect())
    }
}

/// Per-benchmark maximum cosine similarity against the pool vectors, with
/// flags at the given threshold. Vectors are normalized defensively.
pub fn cosine_screen(
    bench: &[Vec<f64>],
    pool: &[Vec<f64>],
    threshold: f64,
) -> Result<Vec<CosineRow>, ContaminationError> {
    if bench.is_empty() || pool.is_empty() {
        return Err(ContaminationError::NoVectors);
    }
    let dim = bench[0].len();
    let check_dim = |index: usize, v: &Vec<f64>| {
        if v.len() != dim {
            Err(ContaminationError::DimensionMismatch {
                index,
                got: v.len(),
                want: dim,
            })
        } else {
            Ok(())
        }
    };
    let mut bench_norm = Vec::with_capacity(bench.len());
    for (i, v) in bench.iter().enumerate() {
        check_dim(i, v)?;
        bench_norm.push(normalized(v, i)?);
    }
    let mut pool_norm = Vec::with_capacity(pool.len());
    for (i, v) in pool.iter().enumerate() {
        check_dim(i, v)?;
        pool_norm.push(normalized(v, i)?);
    }

    Ok(bench_norm
        .iter()
        .map(|b| {
            let mut best = f64::NEG_INFINITY;
            let mut nearest = 0;
            for (j, p) in pool_norm.iter().enumerate() {
                let dot: f64 = b.iter().zip(p).map(|(x, y)| x * y).sum();
                if dot > best {
                    best = dot;
                    nearest = j;
                }
            }
            CosineRow {
                max_similarity: best,
                nearest,
                flagged: best >= threshold,
            }
        })
        .collect())
}

/// Per-benchmark lexical audit row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexicalRow {
    pub bench_index: usize,
    pub max_jaccard5: f64,
    pub jaccard5_nearest: Option<usize>,
    pub max_containment5: Option<f64>,
    pub max_containment8: Option<f64>,
    pub flag_8gram: bool,
    pub nearest_8gram: Option<usize>,
    pub collide_13gram: bool,
}

/// Run every lexical metric for each benchmark prompt against the pool.
pub fn audit_lexical(bench_texts: &[String], pool: &PoolIndex) -> Vec<LexicalRow> {
    bench_texts
        .iter()
        .enumerate()
        .map(|(bench_index, text)| {
            let profile = NGramProfile::new(text);
            let jac = max_jaccard5(&profile, pool);
            let c5 = max_containment(&profile, pool, 5);
            let f8 = flag_8gram(&profile, pool);
            LexicalRow {
                bench_index,
                max_jaccard5: jac.map(|m| m.value).unwrap_or(0.0),
                jaccard5_nearest: jac.map(|m| m.pool_index),
                max_containment5: c5.map(|m| m.value),
                max_containment8: f8.max_containment,
                flag_8gram: f8.flagged,
                nearest_8gram: f8.nearest,
                collide_13gram: collide_13gram(&profile, pool),
            }
        })
        .collect()
}
