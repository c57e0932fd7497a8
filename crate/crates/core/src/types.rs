//! Value types shared across the toolkit.
//!
//! Tokens are dense integer ids `0..N`; string tokenization happens outside
//! this crate. Every type here is an immutable value once constructed, and
//! each constructor enforces the type's invariants.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries in `[-CLAMP_WINDOW, 0)` are treated as floating-point dust.
pub const CLAMP_WINDOW: f64 = 1e-12;

/// Absolute tolerance on the total mass of a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Index of a token in the vocabulary.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
#[repr(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Converts raw ids into token ids.
pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

/// The token set: a size and optional display labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    labels: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyVocabulary);
        }
        if size > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "vocabulary size {size} exceeds the 32-bit id space"
            )));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut vocab = Self::new(labels.len())?;
        vocab.labels = Some(labels);
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, id: TokenId) -> Option<&str> {
        self.labels
            .as_ref()
            .and_then(|l| l.get(id.index()))
            .map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.size
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(Error::OutOfVocab {
                id: id.0,
                size: self.size,
            })
        }
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates a probability vector.
    ///
    /// Entries in `[-1e-12, 0)` are clamped to zero, after which the vector is
    /// renormalized. Anything more negative is rejected, as is a total mass
    /// more than `1e-9` away from one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        let mut probs = probs;
        let mut clamped = false;
        for (index, p) in probs.iter_mut().enumerate() {
            if p.is_nan() || *p < -CLAMP_WINDOW {
                return Err(Error::NegativeProbability { index, value: *p });
            }
            if *p < 0.0 {
                *p = 0.0;
                clamped = true;
            }
        }
        let sum = compensated_sum(probs.iter().copied());
        if sum.is_nan() || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::NotNormalized { sum });
        }
        if clamped {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    /// Builds a distribution from non-negative weights by dividing by their sum.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| w.is_nan() || **w < 0.0)
        {
            return Err(Error::NegativeProbability { index, value });
        }
        let total = compensated_sum(weights.iter().copied());
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::NotNormalized { sum: total });
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDistribution);
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn point_mass(n: usize, token: TokenId) -> Result<Self> {
        if token.index() >= n {
            return Err(Error::OutOfVocab {
                id: token.0,
                size: n,
            });
        }
        let mut probs = vec![0.0; n];
        probs[token.index()] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    /// Token with the largest probability; ties go to the lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Total-variation distance to another distribution of the same length.
    pub fn total_variation(&self, other: &Distribution) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::SizeMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        Distribution::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Neumaier-compensated summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Running sum with Neumaier error compensation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// An ordering of the vocabulary: `order[i]` is the token at rank `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Permutation {
    order: Vec<TokenId>,
}

impl Permutation {
    pub fn new(order: Vec<TokenId>) -> Result<Self> {
        let len = order.len();
        let mut seen = vec![false; len];
        for t in &order {
            match seen.get_mut(t.index()) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::InvalidPermutation { len }),
            }
        }
        Ok(Self { order })
    }

    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        Self::new(tokens(ids))
    }

    pub(crate) fn from_order_unchecked(order: Vec<TokenId>) -> Self {
        debug_assert!(Self::new(order.clone()).is_ok());
        Self { order }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n as u32).map(TokenId).collect(),
        }
    }

    pub fn order(&self) -> &[TokenId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The permutation `q` with `q[p[i]] = i`; maps a token id to its rank.
    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![TokenId(0); self.order.len()];
        for (rank, t) in self.order.iter().enumerate() {
            inv[t.index()] = TokenId(rank as u32);
        }
        Permutation { order: inv }
    }

    /// Same tokens in the opposite order.
    pub fn reversed(&self) -> Permutation {
        let mut order = self.order.clone();
        order.reverse();
        Permutation { order }
    }

    /// Rank of `token` in this ordering (linear scan).
    pub fn rank_of(&self, token: TokenId) -> Option<usize> {
        self.order.iter().position(|&t| t == token)
    }
}

impl<'de> Deserialize<'de> for Permutation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let order = Vec::<TokenId>::deserialize(d)?;
        Permutation::new(order).map_err(serde::de::Error::custom)
    }
}

/// Minimum accepted secret-key length in bytes.
pub const MIN_KEY_BYTES: usize = 16;

/// Opaque watermark key.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SecretKey {
    bytes: Vec<u8>,
}

impl SecretKey {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.len() < MIN_KEY_BYTES {
            return Err(Error::KeyTooShort(bytes.len()));
        }
        Ok(Self { bytes })
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let s = s.trim();
        let s = s.strip_prefix("0x").unwrap_or(s);
        let bytes = hex::decode(s).map_err(|e| Error::InvalidKeyHex(e.to_string()))?;
        Self::from_bytes(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(<{} bytes>)", self.bytes.len())
    }
}

/// Watermark operating parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkParams {
    /// Reweight quantile.
    pub alpha: f64,
    /// Red/green separator: the first `ceil(gamma * N)` ranks are red.
    pub gamma: f64,
    /// Texture-key length in tokens.
    pub window: usize,
}

impl WatermarkParams {
    pub fn new(alpha: f64, gamma: f64, window: usize) -> Result<Self> {
        let params = Self {
            alpha,
            gamma,
            window,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        check_gamma(self.gamma)?;
        if self.window == 0 {
            return Err(Error::InvalidParameter("window must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for WatermarkParams {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            gamma: 0.5,
            window: 1,
        }
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// Number of red ranks, `ceil(gamma * n)`.
///
/// Products within `1e-9` (relative) of an integer snap to it, so that
/// e.g. `0.3 * 10` gives 3 rather than 4.
pub fn red_list_len(gamma: f64, n: usize) -> usize {
    let x = gamma * n as f64;
    let nearest = x.round();
    let r = if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (r.max(0.0) as usize).min(n)
}

/// `ceil(gamma * n) / n`: the red fraction actually realized on `n` tokens.
pub fn effective_gamma(gamma: f64, n: usize) -> f64 {
    red_list_len(gamma, n) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validate_distribution_examples() {
        assert_eq!(Distribution::new(vec![0.5, 0.5]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(Distribution::new(vec![1.0]).unwrap().probs(), &[1.0]);
        assert!(matches!(
            Distribution::new(vec![0.6, 0.3]),
            Err(Error::NotNormalized { .. })
        ));
        assert_eq!(Distribution::new(vec![]), Err(Error::EmptyDistribution));
    }

    #[test]
    fn validate_distribution_clamps_dust() {
        let d = Distribution::new(vec![1.0 + 5e-13, -5e-13]).unwrap();
        assert_eq!(d.probs()[1], 0.0);
        assert!((d.probs()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(
            Distribution::new(vec![1.1, -0.1]),
            Err(Error::NegativeProbability { index: 1, .. })
        ));
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn permutation_inverse_examples() {
        let inv = |ids: &[u32]| Permutation::from_ids(ids).unwrap().inverse();
        assert_eq!(inv(&[0, 1, 2]), Permutation::from_ids(&[0, 1, 2]).unwrap());
        assert_eq!(inv(&[2, 0, 1]), Permutation::from_ids(&[1, 2, 0]).unwrap());
        assert_eq!(inv(&[1, 0]), Permutation::from_ids(&[1, 0]).unwrap());
    }

    #[test]
    fn permutation_rejects_non_bijections() {
        assert!(Permutation::from_ids(&[0, 0]).is_err());
        assert!(Permutation::from_ids(&[0, 2]).is_err());
        assert!(Permutation::from_ids(&[]).is_ok());
    }

    #[test]
    fn secret_key_length() {
        assert_eq!(SecretKey::from_bytes(vec![0u8; 15]), Err(Error::KeyTooShort(15)));
        let k = SecretKey::from_hex("00112233445566778899aabbccddeeff").unwrap();
        assert_eq!(k.as_bytes().len(), 16);
        assert_eq!(k.to_hex(), "00112233445566778899aabbccddeeff");
        assert!(SecretKey::from_hex("zz112233445566778899aabbccddeeff").is_err());
    }

    #[test]
    fn params_validation() {
        assert!(WatermarkParams::new(0.45, 0.5, 1).is_ok());
        assert!(WatermarkParams::new(1.0, 0.0, 3).is_ok());
        assert!(WatermarkParams::new(1.1, 0.5, 1).is_err());
        assert!(WatermarkParams::new(0.5, 1.0, 1).is_err());
        assert!(WatermarkParams::new(0.5, 0.5, 0).is_err());
    }

    #[test]
    fn red_list_len_snaps_to_integers() {
        assert_eq!(red_list_len(0.3, 10), 3);
        assert_eq!(red_list_len(0.5, 7), 4);
        assert_eq!(red_list_len(0.0, 7), 0);
        assert_eq!(red_list_len(0.999, 10), 10);
        assert_eq!(red_list_len(0.1, 3), 1);
        assert!((effective_gamma(0.5, 7) - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn vocabulary_invariants() {
        assert_eq!(Vocabulary::new(0), Err(Error::EmptyVocabulary));
        let v = Vocabulary::with_labels(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.label(TokenId(1)), Some("b"));
        assert!(v.check(TokenId(2)).is_err());
    }

    fn arb_permutation() -> impl Strategy<Value = Permutation> {
        (1usize..40)
            .prop_flat_map(|n| Just((0..n as u32).collect::<Vec<_>>()).prop_shuffle())
            .prop_map(|ids| Permutation::from_ids(&ids).unwrap())
    }

    proptest! {
        #[test]
        fn inverse_is_involution(p in arb_permutation()) {
            let q = p.inverse();
            for (i, t) in p.order().iter().enumerate() {
                prop_assert_eq!(q.order()[t.index()].index(), i);
            }
            prop_assert_eq!(q.inverse(), p);
        }

        #[test]
        fn validate_is_idempotent(weights in prop::collection::vec(0.0f64..10.0, 1..50)) {
            prop_assume!(weights.iter().sum::<f64>() > 1e-6);
            let d = Distribution::from_weights(&weights).unwrap();
            let again = Distribution::new(d.probs().to_vec()).unwrap();
            prop_assert_eq!(again, d);
        }
    }
}
