//! Experiment harness: preservation checks, calibration, detectability,
//! resilience, gamma sweeps and timing.
//!
//! Every trial draws its own seeds from the master seed, so results are
//! reproducible bit for bit and independent of how trials are scheduled.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cipher::{derive_seed, permutation_from_seed, TextureKey, CIPHER_ENCODING_VERSION};
use crate::detector::{DetectionReport, Detector, DetectorConfig, TailMode, ThresholdMode};
use crate::error::{Error, Result};
use crate::generator::{generate, generate_unwatermarked, GenerationConfig};
use crate::lm::{default_corpus, Corpus, DistributionProvider, Model, TopK, DEFAULT_LAMBDA, DEFAULT_ORDER};
use crate::reweight::{dip_reweight, ReweightStrategy};
use crate::robustness::{attack, AttackMode, AttackSpec};
use crate::types::{CompensatedSum, Distribution, Permutation, SecretKey, TokenId, Vocabulary, WatermarkParams};

/// Independent seed for item `index` of stream `tag`.
pub fn split_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((tag.len() as u32).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
}

/// Calls `f` with every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[TokenId])) {
    let mut items: Vec<TokenId> = (0..n as u32).map(TokenId).collect();
    let mut c = vec![0usize; n];
    f(&items);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            f(&items);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Largest entrywise gap between `dist` and the average of its reweights
/// over all `N!` orderings.
pub fn preserve_exact(alpha: f64, dist: &Distribution) -> Result<f64> {
    let n = dist.len();
    if n > 8 {
        return Err(Error::InvalidParameter(format!(
            "exhaustive enumeration is capped at 8 tokens, got {n}"
        )));
    }
    let mut sums = vec![CompensatedSum::default(); n];
    let mut count = 0u64;
    let mut failure = None;
    for_each_permutation(n, |order| {
        if failure.is_some() {
            return;
        }
        let theta = Permutation::new(order.to_vec()).expect("enumerated orders are bijections");
        match dip_reweight(dist, &theta, alpha) {
            Ok(w) => {
                for ((s, &p), &q) in sums.iter_mut().zip(w.probs()).zip(dist.probs()) {
                    s.add(p - q);
                }
                count += 1;
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // Deviations are summed rather than values, so an unchanged
    // distribution reports exactly zero.
    Ok(sums
        .iter()
        .map(|s| (s.value() / count as f64).abs())
        .fold(0.0, f64::max))
}

/// Total-variation distance between `dist` and the average of its reweights
/// under ciphers drawn from random texture keys.
pub fn preserve_mc(alpha: f64, dist: &Distribution, samples: usize, rng_seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be at least 1".into()));
    }
    let n = dist.len();
    let key = SecretKey::from_bytes(split_seed(rng_seed, "preserve-key", 0).to_le_bytes().repeat(2))?;
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut sums = vec![CompensatedSum::default(); n];
    for _ in 0..samples {
        let tk = TextureKey::new(vec![TokenId(rng.random()), TokenId(rng.random())])?;
        let theta = permutation_from_seed(derive_seed(&key, &tk), n);
        let w = dip_reweight(dist, &theta, alpha)?;
        for (s, &p) in sums.iter_mut().zip(w.probs()) {
            s.add(p);
        }
    }
    let avg: Vec<f64> = sums.iter().map(|s| s.value() / samples as f64).collect();
    Ok(0.5 * avg.iter().zip(dist.probs()).map(|(a, p)| (a - p).abs()).sum::<f64>())
}

/// Area under the ROC curve for `positives` scored above `negatives`,
/// integrating the empirical curve by trapezoids over every distinct
/// threshold. Ties between the two classes contribute half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return f64::NAN;
    }
    let mut scored: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / np, fp as f64 / nn);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

/// One line of a results table. Fields that do not apply are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub trials: usize,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub tpr: Option<f64>,
    pub fnr: Option<f64>,
    pub auc: Option<f64>,
    pub mean_phi: Option<f64>,
    pub mean_green_ratio: Option<f64>,
    pub wall_time_s: Option<f64>,
    /// Experiment-specific scalar, such as a preservation error.
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(label: impl Into<String>, trials: usize) -> Self {
        Self {
            label: label.into(),
            trials,
            ..Self::default()
        }
    }

    /// Sets FPR and TNR from a false-positive count.
    pub fn with_false_positives(mut self, count: usize, total: usize) -> Self {
        let fpr = count as f64 / total as f64;
        self.fpr = Some(fpr);
        self.tnr = Some(1.0 - fpr);
        self
    }

    /// Sets TPR and FNR from a true-positive count.
    pub fn with_true_positives(mut self, count: usize, total: usize) -> Self {
        let tpr = count as f64 / total as f64;
        self.tpr = Some(tpr);
        self.fnr = Some(1.0 - tpr);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub experiment: Experiment,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric table serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    PreserveExact,
    PreserveMc,
    Calibrate,
    Detectability,
    Resilience,
    GammaSweep,
    Timing,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::PreserveExact,
        Experiment::PreserveMc,
        Experiment::Calibrate,
        Experiment::Detectability,
        Experiment::Resilience,
        Experiment::GammaSweep,
        Experiment::Timing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::PreserveExact => "preserve_exact",
            Experiment::PreserveMc => "preserve_mc",
            Experiment::Calibrate => "calibrate",
            Experiment::Detectability => "detectability",
            Experiment::Resilience => "resilience",
            Experiment::GammaSweep => "gamma_sweep",
            Experiment::Timing => "timing",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// Shared settings for experiments that generate and detect sequences.
#[derive(Debug, Clone)]
pub struct Harness {
    /// Key for every trial. When absent each trial draws its own key from
    /// the master seed, which is the setting the null guarantees refer to.
    pub key: Option<SecretKey>,
    /// `gamma` and `window` for detection; `window` also for generation.
    pub params: WatermarkParams,
    /// Inclusive range sequence lengths are drawn from.
    pub length_range: (usize, usize),
    pub rng_seed: u64,
}

impl Harness {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            key: None,
            params: WatermarkParams::default(),
            length_range: (255, 265),
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let (lo, hi) = self.length_range;
        if lo < 2 || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "length range {lo}..={hi} must be nonempty and start at 2 or more"
            )));
        }
        Ok(())
    }

    fn length(&self, tag: &str, trial: u64) -> usize {
        let mut rng = ChaCha20Rng::seed_from_u64(split_seed(self.rng_seed, tag, trial));
        rng.random_range(self.length_range.0..=self.length_range.1)
    }

    /// The secret key used for trial `trial`.
    pub fn key_for(&self, trial: u64) -> SecretKey {
        match &self.key {
            Some(key) => key.clone(),
            None => {
                let bytes: Vec<u8> = (0..4)
                    .flat_map(|part| split_seed(self.rng_seed, &format!("key/{part}"), trial).to_le_bytes())
                    .collect();
                SecretKey::from_bytes(bytes).expect("derived keys are 32 bytes")
            }
        }
    }

    fn detector(&self, vocab_size: usize, mode: ThresholdMode, trial: u64) -> Result<Detector> {
        let mut config = DetectorConfig::new(self.key_for(trial), vocab_size);
        config.params = self.params;
        config.threshold_mode = mode;
        Detector::new(config)
    }

    /// Reports for a corpus, scoring sequence `i` with trial `i`'s key.
    pub fn detect_corpus(
        &self,
        vocab_size: usize,
        mode: ThresholdMode,
        corpus: &[Vec<TokenId>],
    ) -> Result<Vec<DetectionReport>> {
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, seq)| self.detector(vocab_size, mode, i as u64)?.detect(seq))
            .collect()
    }

    /// `trials` sequences from `provider`, watermarked with `strategy` when
    /// given. The stream `tag` keeps corpora from different roles apart.
    pub fn corpus<P: DistributionProvider + ?Sized>(
        &self,
        provider: &P,
        strategy: Option<ReweightStrategy>,
        trials: usize,
        tag: &str,
    ) -> Result<Vec<Vec<TokenId>>> {
        self.validate()?;
        (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let length = self.length(tag, t);
                let rng_seed = split_seed(self.rng_seed, &format!("{tag}/sample"), t);
                match strategy {
                    None => generate_unwatermarked(provider, length, &[], rng_seed),
                    Some(strategy) => {
                        let config = GenerationConfig {
                            params: self.params,
                            strategy,
                            key: self.key_for(t),
                            length,
                            prompt: Vec::new(),
                            rng_seed,
                        };
                        generate(provider, &config).map(|trace| trace.tokens)
                    }
                }
            })
            .collect()
    }
}

fn detect_all(detector: &Detector, corpus: &[Vec<TokenId>]) -> Result<Vec<DetectionReport>> {
    detector.detect_batch(corpus).into_iter().collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (CompensatedSum::default(), 0usize);
    for v in values {
        sum.add(v);
        n += 1;
    }
    sum.value() / n as f64
}

fn check_trials(trials: usize, min: usize) -> Result<()> {
    if trials < min {
        return Err(Error::InvalidParameter(format!(
            "experiment needs at least {min} trials, got {trials}"
        )));
    }
    Ok(())
}

fn check_fpr(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("nominal FPR must lie in (0, 1), got {q}")));
    }
    Ok(())
}

type PValueColumn = (&'static str, fn(&DetectionReport) -> f64);

/// False-positive rates on unwatermarked text at each nominal level, for
/// the KL-bound p-value, the exact binomial p-value and the z-test.
pub fn calibrate<P: DistributionProvider + ?Sized>(
    provider: &P,
    harness: &Harness,
    trials: usize,
    nominal: &[f64],
) -> Result<MetricTable> {
    check_trials(trials, 100)?;
    nominal.iter().try_for_each(|&q| check_fpr(q))?;
    let corpus = harness.corpus(provider, None, trials, "null")?;
    let reports = harness.detect_corpus(provider.vocab_size(), ThresholdMode::Fixed(0.0), &corpus)?;
    let mean_phi = mean(reports.iter().map(|r| r.phi));
    let mut rows = Vec::new();
    for &q in nominal {
        let stats: [PValueColumn; 3] = [
            ("dipmark-kl", |r| r.p_kl),
            ("dipmark-exact", |r| r.p_exact),
            ("z-test", |r| r.p_z_baseline),
        ];
        for (name, p) in stats {
            let hits = reports.iter().filter(|r| p(r) <= q).count();
            let mut row = MetricRow::new(format!("{name}@{q}"), trials).with_false_positives(hits, trials);
            row.mean_phi = Some(mean_phi);
            row.value = Some(q);
            rows.push(row);
        }
    }
    Ok(MetricTable {
        experiment: Experiment::Calibrate,
        rows,
    })
}

/// The two operating points reported by [`detectability`]:
/// `sqrt(ln(1/q) / (2m))` for `q` = 0.1 and 0.01.
pub const DETECTABILITY_LEVELS: [f64; 2] = [0.1, 0.01];

/// Error rates of each strategy at the small-deviation thresholds, plus
/// mean statistics of its watermarked corpus.
pub fn detectability<P: DistributionProvider + ?Sized>(
    provider: &P,
    harness: &Harness,
    strategies: &[ReweightStrategy],
    trials: usize,
) -> Result<MetricTable> {
    check_trials(trials, 1)?;
    let null = harness.corpus(provider, None, trials, "null")?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        strategy.validate()?;
        let marked = harness.corpus(provider, Some(strategy), trials, "marked")?;
        for q in DETECTABILITY_LEVELS {
            let mode = ThresholdMode::Fpr { target: q, mode: TailMode::Approx };
            let pos = harness.detect_corpus(provider.vocab_size(), mode, &marked)?;
            let neg = harness.detect_corpus(provider.vocab_size(), mode, &null)?;
            let tp = pos.iter().filter(|r| r.decision).count();
            let fp = neg.iter().filter(|r| r.decision).count();
            let mut row = MetricRow::new(format!("{strategy}@{q}"), trials)
                .with_false_positives(fp, trials)
                .with_true_positives(tp, trials);
            row.mean_phi = Some(mean(pos.iter().map(|r| r.phi)));
            row.mean_green_ratio = Some(mean(pos.iter().map(|r| r.green_count as f64 / r.scored as f64)));
            row.value = Some(q);
            rows.push(row);
        }
    }
    Ok(MetricTable {
        experiment: Experiment::Detectability,
        rows,
    })
}

/// ROC AUC of `phi` separating attacked watermarked text from unwatermarked
/// text, at edit budget 0 and each entry of `epsilons`.
pub fn resilience<P: DistributionProvider + ?Sized>(
    provider: &P,
    harness: &Harness,
    strategy: ReweightStrategy,
    epsilons: &[f64],
    mode: AttackMode,
    trials: usize,
) -> Result<MetricTable> {
    check_trials(trials, 1)?;
    strategy.validate()?;
    let vocab = Vocabulary::new(provider.vocab_size())?;
    let null = harness.corpus(provider, None, trials, "null")?;
    let marked = harness.corpus(provider, Some(strategy), trials, "marked")?;
    let scoring = ThresholdMode::Fixed(0.0);
    let neg: Vec<f64> = harness
        .detect_corpus(provider.vocab_size(), scoring, &null)?
        .iter()
        .map(|r| r.phi)
        .collect();
    let mut budgets = vec![0.0];
    budgets.extend(epsilons.iter().copied().filter(|&e| e != 0.0));
    let mut rows = Vec::new();
    for eps in budgets {
        let pos = marked
            .par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let spec = AttackSpec {
                    mode,
                    epsilon: eps,
                    rng_seed: split_seed(harness.rng_seed, "attack", i as u64),
                };
                let attacked = attack(seq, &spec, &vocab)?;
                if attacked.len() < 2 {
                    return Ok(f64::NEG_INFINITY);
                }
                let detector = harness.detector(provider.vocab_size(), scoring, i as u64)?;
                Ok(detector.detect(&attacked)?.phi)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut row = MetricRow::new(format!("{strategy}/{mode}@{eps}"), trials);
        row.auc = Some(roc_auc(&pos, &neg));
        row.mean_phi = Some(mean(pos.iter().copied().filter(|p| p.is_finite())));
        row.value = Some(eps);
        rows.push(row);
    }
    Ok(MetricTable {
        experiment: Experiment::Resilience,
        rows,
    })
}

/// Mean `phi` and green ratio of one watermarked corpus scored at each
/// `gamma` in `grid`.
pub fn gamma_sweep<P: DistributionProvider + ?Sized>(
    provider: &P,
    harness: &Harness,
    strategy: ReweightStrategy,
    grid: &[f64],
    trials: usize,
) -> Result<MetricTable> {
    check_trials(trials, 1)?;
    strategy.validate()?;
    if let Some(&g) = grid.iter().find(|&&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::InvalidParameter(format!("gamma grid values must lie in (0, 1), got {g}")));
    }
    let marked = harness.corpus(provider, Some(strategy), trials, "marked")?;
    let mut rows = Vec::new();
    for &gamma in grid {
        let mut h = harness.clone();
        h.params.gamma = gamma;
        let reports = h.detect_corpus(provider.vocab_size(), ThresholdMode::Fixed(0.0), &marked)?;
        let mut row = MetricRow::new(format!("{strategy}@gamma={gamma}"), trials);
        row.mean_phi = Some(mean(reports.iter().map(|r| r.phi)));
        row.mean_green_ratio = Some(mean(reports.iter().map(|r| r.green_count as f64 / r.scored as f64)));
        row.value = Some(gamma);
        rows.push(row);
    }
    Ok(MetricTable {
        experiment: Experiment::GammaSweep,
        rows,
    })
}

/// Wall time to detect `trials` watermarked sequences in one batch, and
/// the first one alone. All sequences share one key.
pub fn timing<P: DistributionProvider + ?Sized>(
    provider: &P,
    harness: &Harness,
    strategy: ReweightStrategy,
    trials: usize,
) -> Result<MetricTable> {
    let harness = Harness {
        key: Some(harness.key_for(0)),
        ..harness.clone()
    };
    let marked = harness.corpus(provider, Some(strategy), trials, "marked")?;
    let detector = harness.detector(
        provider.vocab_size(),
        ThresholdMode::Fpr { target: 0.01, mode: TailMode::Exact },
        0,
    )?;
    let mut rows = Vec::new();
    if let Some(first) = marked.first() {
        let start = Instant::now();
        detector.detect(first)?;
        let mut row = MetricRow::new("single", 1);
        row.wall_time_s = Some(start.elapsed().as_secs_f64());
        rows.push(row);
    }
    let start = Instant::now();
    let reports = detect_all(&detector, &marked)?;
    let mut row = MetricRow::new("batch", trials);
    row.wall_time_s = Some(start.elapsed().as_secs_f64());
    if !reports.is_empty() {
        row.mean_phi = Some(mean(reports.iter().map(|r| r.phi)));
        row = row.with_true_positives(reports.iter().filter(|r| r.decision).count(), trials);
    }
    rows.push(row);
    Ok(MetricTable {
        experiment: Experiment::Timing,
        rows,
    })
}

/// Where an experiment's token distributions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// N-gram model over the bundled corpus, or over `corpus` when given.
    Ngram {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        corpus: Option<PathBuf>,
    },
    /// A model file.
    Model { path: PathBuf },
    /// Uniform over `vocab_size` tokens.
    Uniform { vocab_size: usize },
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Ngram {
            order: DEFAULT_ORDER,
            lambda: DEFAULT_LAMBDA,
            corpus: None,
        }
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn DistributionProvider>> {
        Ok(match self {
            ProviderSpec::Ngram { order, lambda, corpus } => {
                let corpus = match corpus {
                    Some(path) => Corpus::load(path)?,
                    None => default_corpus(),
                };
                Box::new(corpus.train(*order, *lambda)?)
            }
            ProviderSpec::Model { path } => Box::new(Model::load(path)?),
            ProviderSpec::Uniform { vocab_size } => Box::new(crate::lm::TableModel::constant(
                Distribution::uniform(*vocab_size)?,
            )),
        })
    }
}

/// A complete, serializable experiment description. Every field except
/// `experiment` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub trials: usize,
    pub rng_seed: u64,
    pub provider: ProviderSpec,
    pub top_k: Option<usize>,
    pub strategies: Vec<ReweightStrategy>,
    /// Hex secret key shared by all trials; per-trial keys when absent.
    pub key: Option<String>,
    pub gamma: f64,
    pub window: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub nominal_fpr: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub attack_mode: AttackMode,
    pub gammas: Vec<f64>,
    /// Preservation experiments: reweight quantile, distribution and sample
    /// count.
    pub alpha: f64,
    pub dist: Vec<f64>,
    pub samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Detectability,
            trials: 500,
            rng_seed: 0,
            provider: ProviderSpec::default(),
            top_k: None,
            strategies: vec![ReweightStrategy::Dip { alpha: 0.45 }],
            key: None,
            gamma: 0.5,
            window: 1,
            min_len: 255,
            max_len: 265,
            nominal_fpr: vec![0.1, 0.01],
            epsilons: vec![0.1, 0.2, 0.3],
            attack_mode: AttackMode::Substitute,
            gammas: (1..10).map(|i| i as f64 / 10.0).collect(),
            alpha: 0.45,
            dist: vec![0.5, 0.3, 0.15, 0.05],
            samples: 100_000,
        }
    }
}

impl ExperimentConfig {
    pub fn for_experiment(experiment: Experiment) -> Self {
        Self {
            experiment,
            ..Self::default()
        }
    }

    pub fn harness(&self) -> Result<Harness> {
        let mut h = Harness::new(self.rng_seed);
        if let Some(hex) = &self.key {
            h.key = Some(SecretKey::from_hex(hex)?);
        }
        h.params = WatermarkParams::new(0.45, self.gamma, self.window)?;
        h.length_range = (self.min_len, self.max_len);
        h.validate()?;
        Ok(h)
    }

    fn strategy(&self) -> Result<ReweightStrategy> {
        self.strategies
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidParameter("at least one strategy is required".into()))
    }

    pub fn run(&self) -> Result<MetricTable> {
        check_trials(self.trials, 1)?;
        let table = |row: MetricRow| MetricTable {
            experiment: self.experiment,
            rows: vec![row],
        };
        match self.experiment {
            Experiment::PreserveExact => {
                let dist = Distribution::new(self.dist.clone())?;
                let mut row = MetricRow::new(format!("dip:alpha={}", self.alpha), 1);
                row.value = Some(preserve_exact(self.alpha, &dist)?);
                return Ok(table(row));
            }
            Experiment::PreserveMc => {
                let dist = Distribution::new(self.dist.clone())?;
                let mut row = MetricRow::new(format!("dip:alpha={}", self.alpha), self.samples);
                row.value = Some(preserve_mc(self.alpha, &dist, self.samples, self.rng_seed)?);
                return Ok(table(row));
            }
            _ => {}
        }
        let base = self.provider.build()?;
        let provider: Box<dyn DistributionProvider> = match self.top_k {
            Some(k) => Box::new(TopK::new(base, k)?),
            None => base,
        };
        let harness = self.harness()?;
        match self.experiment {
            Experiment::Calibrate => calibrate(&*provider, &harness, self.trials, &self.nominal_fpr),
            Experiment::Detectability => detectability(&*provider, &harness, &self.strategies, self.trials),
            Experiment::Resilience => resilience(
                &*provider,
                &harness,
                self.strategy()?,
                &self.epsilons,
                self.attack_mode,
                self.trials,
            ),
            Experiment::GammaSweep => gamma_sweep(&*provider, &harness, self.strategy()?, &self.gammas, self.trials),
            Experiment::Timing => timing(&*provider, &harness, self.strategy()?, self.trials),
            Experiment::PreserveExact | Experiment::PreserveMc => unreachable!("handled above"),
        }
    }
}

/// Run record written next to the metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub rng_seed: u64,
    pub version: String,
    pub cipher_encoding: String,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            rng_seed: config.rng_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            cipher_encoding: CIPHER_ENCODING_VERSION.to_string(),
        }
    }
}

/// The three output files as `(name, contents)` pairs.
pub fn render_outputs(config: &ExperimentConfig, table: &MetricTable) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("metrics.csv", table.to_csv()?),
        ("metrics.json", table.to_json()),
        (
            "manifest.json",
            serde_json::to_string_pretty(&Manifest::new(config)).expect("manifest serializes"),
        ),
    ])
}

/// Writes `metrics.csv`, `metrics.json` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, table: &MetricTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, contents) in render_outputs(config, table)? {
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TableModel;

    #[test]
    fn heap_enumerates_every_ordering_once() {
        let mut seen = std::collections::HashSet::new();
        for_each_permutation(5, |p| {
            assert!(seen.insert(p.to_vec()));
        });
        assert_eq!(seen.len(), 120);
        let mut count = 0;
        for_each_permutation(0, |_| count += 1);
        assert_eq!(count, 1);
    }

    #[test]
    fn preserve_exact_examples() {
        let d = Distribution::new(vec![0.99, 0.01]).unwrap();
        assert!(preserve_exact(0.5, &d).unwrap() < 1e-15);
        let d = Distribution::new(vec![0.2, 0.45, 0.35]).unwrap();
        assert!(preserve_exact(0.3, &d).unwrap() < 1e-12);
        assert_eq!(preserve_exact(0.0, &d).unwrap(), 0.0);
    }

    #[test]
    fn preserve_mc_examples() {
        let d = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!(preserve_mc(0.45, &d, 100_000, 1).unwrap() < 0.005);
        let weights: Vec<f64> = (1..=100).map(|i| (i as f64).sqrt()).collect();
        let d = Distribution::from_weights(&weights).unwrap();
        assert!(preserve_mc(0.45, &d, 100_000, 2).unwrap() < 0.01);
    }

    #[test]
    fn auc_trapezoid() {
        assert_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0], &[3.0, 4.0]), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
        // Mann-Whitney: pairs (pos > neg) + half ties.
        let pos = [0.9, 0.4, 0.4, 0.7, 0.1];
        let neg = [0.4, 0.2, 0.8, 0.0];
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        assert!((roc_auc(&pos, &neg) - wins / 20.0).abs() < 1e-15);
    }

    #[test]
    fn rates_are_complementary() {
        for total in 1..300 {
            for count in 0..=total {
                let row = MetricRow::new("x", total)
                    .with_false_positives(count, total)
                    .with_true_positives(total - count, total);
                assert_eq!(row.fpr.unwrap() + row.tnr.unwrap(), 1.0);
                assert_eq!(row.tpr.unwrap() + row.fnr.unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn split_seeds_differ() {
        assert_ne!(split_seed(1, "a", 0), split_seed(1, "a", 1));
        assert_ne!(split_seed(1, "a", 0), split_seed(1, "b", 0));
        assert_ne!(split_seed(1, "a", 0), split_seed(2, "a", 0));
        assert_eq!(split_seed(1, "a", 0), split_seed(1, "a", 0));
    }

    fn small_harness(seed: u64) -> Harness {
        let mut h = Harness::new(seed);
        h.length_range = (40, 50);
        h
    }

    #[test]
    fn experiments_are_reproducible() {
        let provider = TableModel::constant(Distribution::uniform(64).unwrap());
        let h = small_harness(7);
        let dip = ReweightStrategy::Dip { alpha: 0.45 };
        let a = detectability(&provider, &h, &[dip], 30).unwrap();
        let b = detectability(&provider, &h, &[dip], 30).unwrap();
        assert_eq!(a, b);
        let c = detectability(&provider, &small_harness(8), &[dip], 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_has_no_signal() {
        let provider = TableModel::constant(Distribution::uniform(64).unwrap());
        let h = small_harness(3);
        let table = gamma_sweep(&provider, &h, ReweightStrategy::Identity, &[0.25, 0.5, 0.75], 200).unwrap();
        for row in &table.rows {
            assert!(row.mean_phi.unwrap().abs() < 0.02, "{row:?}");
        }
    }

    #[test]
    fn calibrate_requires_trials() {
        let provider = TableModel::constant(Distribution::uniform(8).unwrap());
        let h = small_harness(0);
        assert!(calibrate(&provider, &h, 0, &[0.1]).is_err());
        assert!(calibrate(&provider, &h, 100, &[1.5]).is_err());
        let t = calibrate(&provider, &h, 100, &[0.1]).unwrap();
        assert_eq!(t.rows.len(), 3);
    }

    #[test]
    fn config_round_trip_and_outputs() {
        let mut cfg = ExperimentConfig::for_experiment(Experiment::PreserveExact);
        cfg.alpha = 0.3;
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let sparse: ExperimentConfig = serde_json::from_str(r#"{"experiment":"timing","trials":3}"#).unwrap();
        assert_eq!(sparse.trials, 3);
        assert_eq!(sparse.gamma, 0.5);

        let table = cfg.run().unwrap();
        assert!(table.rows[0].value.unwrap() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &cfg, &table).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("label,trials,fpr,tnr,tpr,fnr,auc"));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["cipher_encoding"], CIPHER_ENCODING_VERSION);
        assert_eq!(manifest["config"]["alpha"], 0.3);
    }

    #[test]
    fn experiment_names_parse() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }
}
