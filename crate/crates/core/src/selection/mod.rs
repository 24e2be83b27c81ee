//! Demonstration selection: greedy maximal marginal relevance and plain
//! nearest neighbours over text embeddings.
//!
//! The set objective is `mean sim(anchor, s) - lambda * div(S)` with
//! `div` the mean pairwise cosine of the selected items. Greedy
//! construction adds the candidate maximizing the objective of the grown
//! set; exact set maximization is combinatorial and not attempted.

mod embed;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::Demonstration;
use crate::error::{Error, Result};

pub use embed::{CachingEmbedder, Embedder, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};

/// A dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine of the angle between two non-zero vectors of equal dimension.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Embedding(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Embedding("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean pairwise cosine similarity; zero for fewer than two items.
pub fn set_diversity(selected: &[EmbeddingVector]) -> Result<f64> {
    let n = selected.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine_similarity(&selected[i], &selected[j])?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Which text of a demonstration is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Query, steps and answer together.
    #[default]
    AnswerSimilarity,
    /// Query text only.
    QuestionSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    #[default]
    Mmr,
    Knn,
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmr" => Ok(SelectionMethod::Mmr),
            "knn" => Ok(SelectionMethod::Knn),
            other => Err(Error::invalid(format!("unknown selection method `{other}`"))),
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::Mmr => "mmr",
            SelectionMethod::Knn => "knn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub count: usize,
    pub lambda: f64,
    pub mode: SimilarityMode,
    pub method: SelectionMethod,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            count: 5,
            lambda: 0.5,
            mode: SimilarityMode::AnswerSimilarity,
            method: SelectionMethod::Mmr,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("selection count must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "selection lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// The text embedded for a demonstration under `mode`.
pub fn demo_text(demo: &Demonstration, mode: SimilarityMode) -> String {
    match mode {
        SimilarityMode::QuestionSimilarity => demo.query.clone(),
        SimilarityMode::AnswerSimilarity => {
            let mut text = demo.query.clone();
            for step in &demo.steps {
                text.push('\n');
                text.push_str(step);
            }
            text.push('\n');
            text.push_str(&demo.answer);
            text
        }
    }
}

/// The MMR set objective for `subset` (indices into `pool`).
pub fn mmr_objective(anchor: &EmbeddingVector, pool: &[EmbeddingVector], subset: &[usize], lambda: f64) -> Result<f64> {
    if subset.is_empty() {
        return Ok(0.0);
    }
    let mut relevance = 0.0;
    for &i in subset {
        relevance += cosine_similarity(anchor, &pool[i])?;
    }
    let chosen: Vec<EmbeddingVector> = subset.iter().map(|&i| pool[i].clone()).collect();
    Ok(relevance / subset.len() as f64 - lambda * set_diversity(&chosen)?)
}

/// Greedy MMR over precomputed embeddings; returns pool indices in
/// selection order.
pub fn mmr_indices(
    anchor: &EmbeddingVector,
    pool: &[EmbeddingVector],
    count: usize,
    lambda: f64,
) -> Result<Vec<usize>> {
    let n = pool.len();
    let relevance = pool
        .iter()
        .map(|p| cosine_similarity(anchor, p))
        .collect::<Result<Vec<_>>>()?;
    let mut pairwise = vec![0.0; n * n];
    if lambda != 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                let s = cosine_similarity(&pool[i], &pool[j])?;
                pairwise[i * n + j] = s;
                pairwise[j * n + i] = s;
            }
        }
    }

    let target = count.min(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(target);
    let mut taken = vec![false; n];
    let mut rel_sum = 0.0;
    let mut pair_sum = 0.0;
    while chosen.len() < target {
        let size = chosen.len() + 1;
        let pairs = (size * (size - 1) / 2) as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        for c in (0..n).filter(|&c| !taken[c]) {
            let added: f64 = chosen.iter().map(|&s| pairwise[s * n + c]).sum();
            let div = if size < 2 { 0.0 } else { (pair_sum + added) / pairs };
            let score = (rel_sum + relevance[c]) / size as f64 - lambda * div;
            if best.is_none_or(|(_, b, _)| score > b) {
                best = Some((c, score, added));
            }
        }
        let (c, _, added) = best.expect("candidate available while below target");
        taken[c] = true;
        chosen.push(c);
        rel_sum += relevance[c];
        pair_sum += added;
    }
    Ok(chosen)
}

/// Top-`count` pool indices by similarity to the anchor, ties to the
/// lower index.
pub fn knn_indices(anchor: &EmbeddingVector, pool: &[EmbeddingVector], count: usize) -> Result<Vec<usize>> {
    let sims = pool
        .iter()
        .map(|p| cosine_similarity(anchor, p))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(order)
}

fn embed_all(
    anchor: &Demonstration,
    pool: &[Demonstration],
    mode: SimilarityMode,
    embedder: &dyn Embedder,
) -> Result<(EmbeddingVector, Vec<EmbeddingVector>)> {
    let mut texts = Vec::with_capacity(pool.len() + 1);
    texts.push(demo_text(anchor, mode));
    texts.extend(pool.iter().map(|d| demo_text(d, mode)));
    let mut vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Embedding(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let anchor_vec = vectors.remove(0);
    Ok((anchor_vec, vectors))
}

fn pick(pool: &[Demonstration], indices: Vec<usize>) -> Vec<Demonstration> {
    indices.into_iter().map(|i| pool[i].clone()).collect()
}

/// Greedy MMR selection of demonstrations for `anchor`.
pub fn mmr_select(
    anchor: &Demonstration,
    pool: &[Demonstration],
    config: &SelectionConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<Demonstration>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let (a, vectors) = embed_all(anchor, pool, config.mode, embedder)?;
    Ok(pick(pool, mmr_indices(&a, &vectors, config.count, config.lambda)?))
}

/// Nearest-neighbour selection of demonstrations for `anchor`.
pub fn knn_select(
    anchor: &Demonstration,
    pool: &[Demonstration],
    config: &SelectionConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<Demonstration>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let (a, vectors) = embed_all(anchor, pool, config.mode, embedder)?;
    Ok(pick(pool, knn_indices(&a, &vectors, config.count)?))
}

/// Dispatches on `config.method`.
pub fn select(
    anchor: &Demonstration,
    pool: &[Demonstration],
    config: &SelectionConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<Demonstration>> {
    match config.method {
        SelectionMethod::Mmr => mmr_select(anchor, pool, config, embedder),
        SelectionMethod::Knn => knn_select(anchor, pool, config, embedder),
    }
}
