//! Single-pass watermark detection.
//!
//! Every position after the first is scored: its texture key is rebuilt from
//! the preceding tokens, the cipher is rederived, and the token counts as
//! green when its rank is at least `ceil(gamma * N)`. Under the null the
//! green count of `m` scored positions is `Binomial(m, 1 - gamma_eff)` with
//! `gamma_eff = ceil(gamma * N) / N`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cipher::{derive_seed, rank_at_least, CipherSeed, TextureKey};
use crate::error::{Error, Result};
use crate::stats::{binomial_sf, kl_bernoulli, normal_sf};
use crate::types::{effective_gamma, red_list_len, SecretKey, TokenId, WatermarkParams};

/// How an FPR target is turned into a threshold on the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailMode {
    /// Chernoff bound `exp(-m KL)`.
    Kl,
    /// Exact binomial tail.
    Exact,
    /// Small-deviation form `exp(-2 m t^2)` of the bound.
    Approx,
}

impl fmt::Display for TailMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailMode::Kl => "kl",
            TailMode::Exact => "exact",
            TailMode::Approx => "approx",
        })
    }
}

impl FromStr for TailMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(TailMode::Kl),
            "exact" => Ok(TailMode::Exact),
            "approx" => Ok(TailMode::Approx),
            other => Err(Error::InvalidParameter(format!(
                "unknown tail mode {other:?} (expected kl, exact or approx)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Detect when `phi > z`.
    Fixed(f64),
    /// Detect when `phi` reaches the smallest threshold whose tail is at most
    /// `target` under the null.
    Fpr { target: f64, mode: TailMode },
}

impl ThresholdMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdMode::Fixed(z) if z.is_nan() => {
                Err(Error::InvalidParameter("threshold must not be NaN".into()))
            }
            ThresholdMode::Fpr { target, .. } if !(target > 0.0 && target < 1.0) => Err(
                Error::InvalidParameter(format!("target FPR must lie in (0, 1), got {target}")),
            ),
            _ => Ok(()),
        }
    }

    /// The threshold on `phi` for `m` scored positions.
    pub fn threshold(&self, m: usize, gamma_eff: f64) -> f64 {
        match *self {
            ThresholdMode::Fixed(z) => z,
            ThresholdMode::Fpr { target, mode } => threshold_for_fpr(m, gamma_eff, target, mode),
        }
    }

    fn accepts(&self, phi: f64, threshold: f64) -> bool {
        match self {
            ThresholdMode::Fixed(_) => phi > threshold,
            ThresholdMode::Fpr { .. } => phi >= threshold,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub key: SecretKey,
    /// Only `gamma` and `window` are used.
    pub params: WatermarkParams,
    pub threshold_mode: ThresholdMode,
    pub vocab_size: usize,
}

impl DetectorConfig {
    pub fn new(key: SecretKey, vocab_size: usize) -> Self {
        Self {
            key,
            params: WatermarkParams::default(),
            threshold_mode: ThresholdMode::Fpr {
                target: 0.01,
                mode: TailMode::Exact,
            },
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.threshold_mode.validate()?;
        if self.vocab_size == 0 {
            return Err(Error::EmptyVocabulary);
        }
        Ok(())
    }

    pub fn gamma_eff(&self) -> f64 {
        effective_gamma(self.params.gamma, self.vocab_size)
    }

    fn red_len(&self) -> usize {
        red_list_len(self.params.gamma, self.vocab_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scored: usize,
    pub green_count: usize,
    pub phi: f64,
    pub p_kl: f64,
    pub p_exact: f64,
    pub z_baseline: f64,
    pub p_z_baseline: f64,
    pub threshold: f64,
    pub decision: bool,
}

/// `L_G / m - (1 - gamma_eff)`.
pub fn phi_statistic(m: usize, green: usize, gamma_eff: f64) -> f64 {
    green as f64 / m as f64 - (1.0 - gamma_eff)
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Chernoff bound on `P[L_G >= green]`; 1 at or below the null mean.
pub fn p_value_kl(m: usize, green: usize, gamma_eff: f64) -> f64 {
    let observed = green as f64 / m as f64;
    let q = 1.0 - gamma_eff;
    if observed <= q {
        return 1.0;
    }
    clamp_p((-(m as f64) * kl_bernoulli(observed, q)).exp())
}

/// `P[Binomial(m, 1 - gamma_eff) >= green]`.
pub fn p_value_exact(m: usize, green: usize, gamma_eff: f64) -> f64 {
    clamp_p(binomial_sf(m as u64, green as u64, 1.0 - gamma_eff))
}

/// Normal-approximation z-score and its upper tail. For `gamma` outside
/// `(0, 1)` the score is undefined and `(0, 1)` is returned.
pub fn z_test_baseline(m: usize, green: usize, gamma: f64) -> (f64, f64) {
    if !(gamma > 0.0 && gamma < 1.0) || m == 0 {
        return (0.0, 1.0);
    }
    let m = m as f64;
    let z = (green as f64 - (1.0 - gamma) * m) / (m * gamma * (1.0 - gamma)).sqrt();
    (z, clamp_p(normal_sf(z)))
}

/// Smallest green count in `0..=m` whose exact tail is at most `target`, or
/// `m + 1` when none is.
pub fn min_green_count_exact(m: usize, gamma_eff: f64, target: f64) -> usize {
    let p = 1.0 - gamma_eff;
    let (mut lo, mut hi) = (0usize, m + 1);
    // Invariant: the answer lies in lo..=hi; the tail is nonincreasing in k.
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if binomial_sf(m as u64, mid as u64, p) <= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Smallest `t` such that `phi >= t` has null probability at most
/// `target` under the chosen tail.
///
/// When no attainable `phi` qualifies the result is `(m + 1) / m - (1 -
/// gamma_eff)`, one step past the largest possible value.
pub fn threshold_for_fpr(m: usize, gamma_eff: f64, target: f64, mode: TailMode) -> f64 {
    let q = 1.0 - gamma_eff;
    let unreachable = phi_statistic(m, m + 1, gamma_eff);
    match mode {
        TailMode::Approx => ((1.0 / target).ln() / (2.0 * m as f64)).sqrt(),
        TailMode::Exact => phi_statistic(m, min_green_count_exact(m, gamma_eff, target), gamma_eff),
        TailMode::Kl => {
            let bound = |t: f64| {
                let p = (t + q).min(1.0);
                (-(m as f64) * kl_bernoulli(p, q)).exp()
            };
            if bound(gamma_eff) > target {
                return unreachable;
            }
            let (mut lo, mut hi) = (0.0f64, gamma_eff);
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if bound(mid) <= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    }
}

/// Cipher seeds for positions `start..context.len()`, each keyed by the
/// up-to-`window` tokens before it.
pub fn texture_seeds(
    key: &SecretKey,
    context: &[TokenId],
    start: usize,
    window: usize,
) -> Result<Vec<CipherSeed>> {
    if start == 0 {
        return Err(Error::NoContext);
    }
    (start..context.len())
        .map(|i| {
            let tk = TextureKey::new(context[i - window.min(i)..i].to_vec())?;
            Ok(derive_seed(key, &tk))
        })
        .collect()
}

/// Stateless detector for one configuration.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    red_len: usize,
    gamma_eff: f64,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            red_len: config.red_len(),
            gamma_eff: config.gamma_eff(),
            config,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn gamma_eff(&self) -> f64 {
        self.gamma_eff
    }

    fn check(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() < 2 {
            return Err(Error::SequenceTooShort { len: tokens.len() });
        }
        let n = self.config.vocab_size;
        match tokens.iter().find(|t| t.index() >= n) {
            Some(t) => Err(Error::OutOfVocab { id: t.0, size: n }),
            None => Ok(()),
        }
    }

    fn seed_at(&self, tokens: &[TokenId], i: usize) -> CipherSeed {
        let tk = TextureKey::new(tokens[i - self.config.params.window.min(i)..i].to_vec())
            .expect("scored positions have context");
        derive_seed(&self.config.key, &tk)
    }

    fn is_green(&self, seed: CipherSeed, token: TokenId) -> bool {
        rank_at_least(seed, self.config.vocab_size, token, self.red_len)
    }

    /// Green flag for every scored position (the second token onward).
    pub fn green_flags(&self, tokens: &[TokenId]) -> Result<Vec<bool>> {
        self.check(tokens)?;
        Ok((1..tokens.len())
            .map(|i| self.is_green(self.seed_at(tokens, i), tokens[i]))
            .collect())
    }

    /// `(m, L_G)`.
    pub fn green_count(&self, tokens: &[TokenId]) -> Result<(usize, usize)> {
        let flags = self.green_flags(tokens)?;
        Ok((flags.len(), flags.iter().filter(|&&g| g).count()))
    }

    /// Full report for precomputed counts.
    pub fn report(&self, m: usize, green: usize) -> DetectionReport {
        let g = self.gamma_eff;
        let phi = phi_statistic(m, green, g);
        let (z, p_z) = z_test_baseline(m, green, g);
        let threshold = self.config.threshold_mode.threshold(m, g);
        DetectionReport {
            scored: m,
            green_count: green,
            phi,
            p_kl: p_value_kl(m, green, g),
            p_exact: p_value_exact(m, green, g),
            z_baseline: z,
            p_z_baseline: p_z,
            threshold,
            decision: self.config.threshold_mode.accepts(phi, threshold),
        }
    }

    pub fn detect(&self, tokens: &[TokenId]) -> Result<DetectionReport> {
        let (m, green) = self.green_count(tokens)?;
        Ok(self.report(m, green))
    }

    /// Detects every sequence independently, in parallel.
    pub fn detect_batch(&self, batch: &[Vec<TokenId>]) -> Vec<Result<DetectionReport>> {
        batch.par_iter().map(|t| self.detect(t)).collect()
    }

    /// A memoizing view for scoring many related sequences, such as edits of
    /// one text.
    pub fn cached(&self) -> CachedDetector<'_> {
        CachedDetector {
            detector: self,
            memo: HashMap::new(),
        }
    }
}

/// Detector that remembers the green status of each (cipher, token) pair.
pub struct CachedDetector<'a> {
    detector: &'a Detector,
    memo: HashMap<(CipherSeed, TokenId), bool>,
}

impl CachedDetector<'_> {
    pub fn green_count(&mut self, tokens: &[TokenId]) -> Result<(usize, usize)> {
        self.detector.check(tokens)?;
        let mut green = 0;
        for i in 1..tokens.len() {
            let seed = self.detector.seed_at(tokens, i);
            let d = self.detector;
            let hit = *self
                .memo
                .entry((seed, tokens[i]))
                .or_insert_with(|| d.is_green(seed, tokens[i]));
            green += usize::from(hit);
        }
        Ok((tokens.len() - 1, green))
    }

    pub fn detect(&mut self, tokens: &[TokenId]) -> Result<DetectionReport> {
        let (m, green) = self.green_count(tokens)?;
        Ok(self.detector.report(m, green))
    }
}

pub fn green_count(tokens: &[TokenId], config: &DetectorConfig) -> Result<(usize, usize)> {
    Detector::new(config.clone())?.green_count(tokens)
}

pub fn detect(tokens: &[TokenId], config: &DetectorConfig) -> Result<DetectionReport> {
    Detector::new(config.clone())?.detect(tokens)
}
