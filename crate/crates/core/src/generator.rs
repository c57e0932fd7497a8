//! The watermarked generation loop.
//!
//! At every step the most recent `window` tokens of prompt plus output form
//! the texture key. A key seen before in the same run falls back to plain
//! sampling from the provider; a fresh key derives the step's cipher and
//! samples from the reweighted distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cipher::{derive_seed, extract_texture_key, permutation_from_seed, HistoryLog, TextureKey};
use crate::error::{Error, Result};
use crate::lm::{next_distribution, DistributionProvider};
use crate::reweight::ReweightStrategy;
use crate::types::{Distribution, SecretKey, TokenId, WatermarkParams};

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub params: WatermarkParams,
    pub strategy: ReweightStrategy,
    pub key: SecretKey,
    /// Number of tokens to generate.
    pub length: usize,
    pub prompt: Vec<TokenId>,
    /// Seeds the sampling randomness only; ciphers depend on `key` alone.
    pub rng_seed: u64,
}

impl GenerationConfig {
    pub fn new(key: SecretKey, strategy: ReweightStrategy, length: usize) -> Self {
        Self {
            params: WatermarkParams::default(),
            strategy,
            key,
            length,
            prompt: Vec::new(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.strategy.validate()?;
        if self.length == 0 {
            return Err(Error::InvalidParameter("length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Audit record for one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `None` only when there was no context at all.
    pub texture_key: Option<TextureKey>,
    /// The step was sampled from the unmodified distribution.
    pub repeated: bool,
    /// Hex cipher seed, present for watermarked steps.
    pub cipher_digest: Option<String>,
    pub original_dist_hash: String,
    pub watermarked_dist_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<TokenId>,
    pub step_records: Vec<StepRecord>,
}

impl GenerationTrace {
    /// Steps that were sampled from a reweighted distribution.
    pub fn watermarked_steps(&self) -> usize {
        self.step_records.iter().filter(|r| !r.repeated).count()
    }
}

/// Short fingerprint of a distribution: the first 16 hex digits of the
/// SHA-256 of its little-endian `f64` entries.
pub fn distribution_hash(dist: &Distribution) -> String {
    let mut hasher = Sha256::new();
    for p in dist.probs() {
        hasher.update(p.to_le_bytes());
    }
    let mut digest = hex::encode(hasher.finalize());
    digest.truncate(16);
    digest
}

/// Inverse-CDF draw. Zero-probability tokens are never returned.
pub fn sample<R: Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return TokenId(i as u32);
        }
    }
    TokenId(last as u32)
}

pub fn generate<P: DistributionProvider + ?Sized>(
    provider: &P,
    config: &GenerationConfig,
) -> Result<GenerationTrace> {
    config.validate()?;
    let n = provider.vocab_size();
    for &t in &config.prompt {
        if t.index() >= n {
            return Err(Error::OutOfVocab { id: t.0, size: n });
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed);
    let mut history = HistoryLog::new();
    let mut context = config.prompt.clone();
    let mut tokens = Vec::with_capacity(config.length);
    let mut step_records = Vec::with_capacity(config.length);
    let identity = config.strategy.is_identity();

    for _ in 0..config.length {
        let original = next_distribution(provider, &context)?;
        let original_hash = distribution_hash(&original);
        let texture_key = if context.is_empty() {
            None
        } else {
            Some(extract_texture_key(&context, context.len(), config.params.window)?)
        };
        let fresh = match &texture_key {
            Some(tk) => !history.check_and_insert(tk),
            None => false,
        };

        let (token, record) = if fresh && !identity {
            let tk = texture_key.expect("fresh steps have a texture key");
            let seed = derive_seed(&config.key, &tk);
            let theta = permutation_from_seed(seed, n);
            let watermarked = config.strategy.apply(&original, &theta)?;
            let token = sample(&watermarked, &mut rng);
            let record = StepRecord {
                texture_key: Some(tk),
                repeated: false,
                cipher_digest: Some(seed.to_hex()),
                original_dist_hash: original_hash,
                watermarked_dist_hash: distribution_hash(&watermarked),
            };
            (token, record)
        } else {
            let token = sample(&original, &mut rng);
            let cipher_digest = match (&texture_key, fresh) {
                (Some(tk), true) => Some(derive_seed(&config.key, tk).to_hex()),
                _ => None,
            };
            let record = StepRecord {
                texture_key,
                repeated: !fresh,
                cipher_digest,
                watermarked_dist_hash: original_hash.clone(),
                original_dist_hash: original_hash,
            };
            (token, record)
        };
        context.push(token);
        tokens.push(token);
        step_records.push(record);
    }
    Ok(GenerationTrace {
        tokens,
        step_records,
    })
}

/// Plain ancestral sampling with no cipher and no history.
pub fn generate_unwatermarked<P: DistributionProvider + ?Sized>(
    provider: &P,
    length: usize,
    prompt: &[TokenId],
    rng_seed: u64,
) -> Result<Vec<TokenId>> {
    if length == 0 {
        return Err(Error::InvalidParameter("length must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut context = prompt.to_vec();
    for _ in 0..length {
        let dist = next_distribution(provider, &context)?;
        context.push(sample(&dist, &mut rng));
    }
    Ok(context.split_off(prompt.len()))
}
