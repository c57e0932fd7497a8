//! Token distribution providers that stand in for a language model.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CompensatedSum, Distribution, TokenId, Vocabulary};

/// Source of next-token distributions.
///
/// Implementations must be deterministic in `context`.
pub trait DistributionProvider: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution>;
}

impl<P: DistributionProvider + ?Sized> DistributionProvider for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        (**self).next_distribution(context)
    }
}

impl<P: DistributionProvider + ?Sized> DistributionProvider for Box<P> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        (**self).next_distribution(context)
    }
}

/// Queries `provider` and checks the result covers its vocabulary.
pub fn next_distribution<P: DistributionProvider + ?Sized>(
    provider: &P,
    context: &[TokenId],
) -> Result<Distribution> {
    let dist = provider.next_distribution(context).map_err(|e| match e {
        Error::Provider(_) => e,
        other => Error::Provider(other.to_string()),
    })?;
    if dist.len() != provider.vocab_size() {
        return Err(Error::Provider(format!(
            "returned {} probabilities for a vocabulary of {}",
            dist.len(),
            provider.vocab_size()
        )));
    }
    Ok(dist)
}

/// Fixed sequence of distributions; the step used is `context.len()` modulo
/// the table length.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    steps: Vec<Distribution>,
}

impl TableModel {
    pub fn new(steps: Vec<Distribution>) -> Result<Self> {
        let first = steps.first().ok_or_else(|| {
            Error::InvalidParameter("table model needs at least one step".into())
        })?;
        let n = first.len();
        if let Some(bad) = steps.iter().find(|d| d.len() != n) {
            return Err(Error::SizeMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Ok(Self { steps })
    }

    /// Same distribution at every step.
    pub fn constant(dist: Distribution) -> Self {
        Self { steps: vec![dist] }
    }

    pub fn steps(&self) -> &[Distribution] {
        &self.steps
    }
}

impl DistributionProvider for TableModel {
    fn vocab_size(&self) -> usize {
        self.steps[0].len()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        Ok(self.steps[context.len() % self.steps.len()].clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: Vec<(TokenId, u64)>,
}

/// Fixed-order n-gram model with additive smoothing:
/// `p(t | ctx) = (count(ctx, t) + lambda) / (count(ctx) + lambda * N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    lambda: f64,
    vocab: Vocabulary,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

impl NGramModel {
    /// Counts every `order`-length window inside each corpus sequence.
    pub fn train(
        corpus: &[Vec<TokenId>],
        order: usize,
        lambda: f64,
        vocab: Vocabulary,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("n-gram order must be at least 1".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must be a finite value >= 0, got {lambda}"
            )));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut raw: HashMap<Vec<TokenId>, HashMap<TokenId, u64>> = HashMap::new();
        for seq in corpus {
            for &t in seq {
                vocab.check(t)?;
            }
            for window in seq.windows(order) {
                let (ctx, next) = window.split_at(order - 1);
                *raw.entry(ctx.to_vec()).or_default().entry(next[0]).or_default() += 1;
            }
        }
        let counts = raw
            .into_iter()
            .map(|(ctx, next)| (ctx, Self::pack(next)))
            .collect();
        Ok(Self {
            order,
            lambda,
            vocab,
            counts,
        })
    }

    fn pack(next: HashMap<TokenId, u64>) -> ContextCounts {
        let mut next: Vec<(TokenId, u64)> = next.into_iter().filter(|&(_, c)| c > 0).collect();
        next.sort_unstable();
        ContextCounts {
            total: next.iter().map(|&(_, c)| c).sum(),
            next,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Number of distinct contexts with at least one observation.
    pub fn context_count(&self) -> usize {
        self.counts.len()
    }

    /// Same counts with a different smoothing constant.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must be a finite value >= 0, got {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            ..self.clone()
        })
    }

    fn context_key<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        let keep = (self.order - 1).min(context.len());
        &context[context.len() - keep..]
    }

    pub fn to_file(&self) -> ModelFile {
        let mut counts: Vec<CountEntry> = self
            .counts
            .iter()
            .map(|(ctx, c)| CountEntry {
                context: ctx.iter().map(|t| t.0).collect(),
                next: c.next.iter().map(|&(t, n)| (t.0, n)).collect(),
            })
            .collect();
        counts.sort_by(|a, b| a.context.cmp(&b.context));
        ModelFile::Ngram {
            order: self.order,
            lambda: self.lambda,
            vocab_size: self.vocab.size(),
            labels: self.vocab.labels().map(<[String]>::to_vec),
            counts,
        }
    }
}

impl DistributionProvider for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        let n = self.vocab.size();
        let key = self.context_key(context);
        let seen = self.counts.get(key);
        let total = seen.map_or(0, |c| c.total) as f64;
        let denom = total + self.lambda * n as f64;
        if denom <= 0.0 {
            return Err(Error::Provider(format!(
                "context {key:?} was never observed and smoothing is zero"
            )));
        }
        let mut probs = vec![self.lambda / denom; n];
        if let Some(c) = seen {
            for &(t, count) in &c.next {
                probs[t.index()] = (count as f64 + self.lambda) / denom;
            }
        }
        let mut sum = CompensatedSum::default();
        probs.iter().for_each(|&p| sum.add(p));
        let sum = sum.value();
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Distribution::new(probs)
    }
}

/// Keeps the `k` most likely tokens (ties to the lower id), zeroes the rest
/// and renormalizes.
pub fn top_k_truncate(dist: &Distribution, k: usize) -> Result<Distribution> {
    let n = dist.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "top-k needs 1 <= k <= {n}, got {k}"
        )));
    }
    if k == n {
        return Ok(dist.clone());
    }
    let probs = dist.probs();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut mass = CompensatedSum::default();
    for &i in &idx[..k] {
        out[i] = probs[i];
        mass.add(probs[i]);
    }
    let mass = mass.value();
    if mass <= 0.0 {
        return Err(Error::AllZeroTopK);
    }
    out.iter_mut().for_each(|p| *p /= mass);
    Distribution::new(out)
}

/// Provider adapter that exposes only the top-`k` tokens of its inner model.
#[derive(Debug, Clone)]
pub struct TopK<P> {
    inner: P,
    k: usize,
}

impl<P: DistributionProvider> TopK<P> {
    pub fn new(inner: P, k: usize) -> Result<Self> {
        if k == 0 || k > inner.vocab_size() {
            return Err(Error::InvalidParameter(format!(
                "top-k needs 1 <= k <= {}, got {k}",
                inner.vocab_size()
            )));
        }
        Ok(Self { inner, k })
    }
}

impl<P: DistributionProvider> DistributionProvider for TopK<P> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        top_k_truncate(&self.inner.next_distribution(context)?, self.k)
    }
}

/// One observed context and its successor counts, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEntry {
    pub context: Vec<u32>,
    pub next: Vec<(u32, u64)>,
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelFile {
    Ngram {
        order: usize,
        lambda: f64,
        vocab_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Vec<String>>,
        counts: Vec<CountEntry>,
    },
    Table {
        vocab_size: usize,
        steps: Vec<Vec<f64>>,
    },
}

/// A provider loaded from a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    NGram(NGramModel),
    Table(TableModel),
}

impl Model {
    pub fn from_file(file: ModelFile) -> Result<Self> {
        match file {
            ModelFile::Ngram {
                order,
                lambda,
                vocab_size,
                labels,
                counts,
            } => {
                let vocab = match labels {
                    Some(l) if l.len() != vocab_size => {
                        return Err(Error::LabelCountMismatch {
                            size: vocab_size,
                            labels: l.len(),
                        })
                    }
                    Some(l) => Vocabulary::with_labels(l)?,
                    None => Vocabulary::new(vocab_size)?,
                };
                if order == 0 {
                    return Err(Error::ModelFormat("order must be at least 1".into()));
                }
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::ModelFormat(format!("invalid lambda {lambda}")));
                }
                let mut map = HashMap::with_capacity(counts.len());
                for entry in counts {
                    if entry.context.len() != order - 1 {
                        return Err(Error::ModelFormat(format!(
                            "context {:?} does not have length {}",
                            entry.context,
                            order - 1
                        )));
                    }
                    let ctx: Vec<TokenId> = entry.context.into_iter().map(TokenId).collect();
                    let mut next = HashMap::new();
                    for &t in ctx.iter() {
                        vocab.check(t)?;
                    }
                    for (t, c) in entry.next {
                        vocab.check(TokenId(t))?;
                        *next.entry(TokenId(t)).or_insert(0) += c;
                    }
                    map.insert(ctx, NGramModel::pack(next));
                }
                Ok(Model::NGram(NGramModel {
                    order,
                    lambda,
                    vocab,
                    counts: map,
                }))
            }
            ModelFile::Table { vocab_size, steps } => {
                let steps = steps
                    .into_iter()
                    .map(Distribution::new)
                    .collect::<Result<Vec<_>>>()?;
                let table = TableModel::new(steps)?;
                if table.vocab_size() != vocab_size {
                    return Err(Error::SizeMismatch {
                        expected: vocab_size,
                        got: table.vocab_size(),
                    });
                }
                Ok(Model::Table(table))
            }
        }
    }

    pub fn to_file(&self) -> ModelFile {
        match self {
            Model::NGram(m) => m.to_file(),
            Model::Table(t) => ModelFile::Table {
                vocab_size: t.vocab_size(),
                steps: t.steps.iter().map(|d| d.probs().to_vec()).collect(),
            },
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(json).map_err(|e| Error::ModelFormat(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("model file serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn labels(&self) -> Option<&[String]> {
        match self {
            Model::NGram(m) => m.vocab.labels(),
            Model::Table(_) => None,
        }
    }
}

impl DistributionProvider for Model {
    fn vocab_size(&self) -> usize {
        match self {
            Model::NGram(m) => m.vocab_size(),
            Model::Table(t) => t.vocab_size(),
        }
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        match self {
            Model::NGram(m) => m.next_distribution(context),
            Model::Table(t) => t.next_distribution(context),
        }
    }
}

/// Whitespace-tokenized text: distinct words get dense ids in order of first
/// appearance, and each non-empty line is one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    labels: Vec<String>,
    sequences: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ids: HashMap<&str, TokenId> = HashMap::new();
        let mut labels = Vec::new();
        let mut sequences = Vec::new();
        for line in text.lines() {
            let seq: Vec<TokenId> = line
                .split_whitespace()
                .map(|w| {
                    *ids.entry(w).or_insert_with(|| {
                        labels.push(w.to_string());
                        TokenId(labels.len() as u32 - 1)
                    })
                })
                .collect();
            if !seq.is_empty() {
                sequences.push(seq);
            }
        }
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { labels, sequences })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::with_labels(self.labels.clone()).expect("corpus has at least one word")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn train(&self, order: usize, lambda: f64) -> Result<NGramModel> {
        NGramModel::train(&self.sequences, order, lambda, self.vocab())
    }
}

/// Bundled prose used by the harness when no corpus is supplied.
pub const DEFAULT_CORPUS: &str = include_str!("../data/corpus.txt");

/// Order and smoothing of the harness's default provider.
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_LAMBDA: f64 = 0.1;

pub fn default_corpus() -> Corpus {
    Corpus::from_text(DEFAULT_CORPUS).expect("bundled corpus is non-empty")
}

/// Order-3 model over the bundled corpus with `lambda = 0.1`.
pub fn default_model() -> NGramModel {
    default_corpus()
        .train(DEFAULT_ORDER, DEFAULT_LAMBDA)
        .expect("bundled corpus trains")
}
