//! Keyed derivation of the per-step cipher: a permutation of the vocabulary.
//!
//! The derivation is normative so that a detector written elsewhere can
//! recompute a generator's ciphers bit for bit:
//!
//! 1. The texture key is encoded as its length (`u32`, little endian)
//!    followed by each token id (`u32`, little endian).
//! 2. `seed = SHA-256(key || 0x01 || encoding)`.
//! 3. The seed keys a ChaCha20 keystream (20 rounds, zero nonce, block
//!    counter starting at 0). Each draw consumes the next 8 keystream bytes
//!    as a little-endian `u64`.
//! 4. Starting from the identity order `[0, 1, .., N-1]`, for `i` from `N-1`
//!    down to `1`: draw `j` uniformly from `0..=i` and swap positions `i` and
//!    `j`. A draw `w` is rejected when `w >= floor(2^64 / (i+1)) * (i+1)`,
//!    otherwise `j = w mod (i+1)`.
//!
//! A 256-bit seed cannot index all `N!` orderings once `N` exceeds 57, so
//! uniformity over permutations holds up to the keystream's distinguishing
//! advantage.

use std::collections::HashSet;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Permutation, SecretKey, TokenId};

/// Identifies the cipher derivation above. Detectors should refuse output
/// produced under a different string.
pub const CIPHER_ENCODING_VERSION: &str =
    "dipmark-cipher/1 sha256(key|0x01|u32le-len|u32le-ids) chacha20 fisher-yates-u64-reject";

const DOMAIN_SEPARATOR: u8 = 0x01;

/// The window of context tokens that seeds one step's cipher, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextureKey {
    tokens: Vec<TokenId>,
}

impl TextureKey {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::NoContext);
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Canonical, prefix-free byte encoding.
    pub fn encode(&self) -> Vec<u8> {
        encode_texture(&self.tokens)
    }
}

fn encode_texture(tokens: &[TokenId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tokens.len());
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.0.to_le_bytes());
    }
    out
}

/// Takes the `min(window, position)` tokens immediately before `position`.
///
/// Near the start of a sequence the key is shorter than `window`; it is not
/// padded.
pub fn extract_texture_key(
    context: &[TokenId],
    position: usize,
    window: usize,
) -> Result<TextureKey> {
    if window == 0 {
        return Err(Error::InvalidParameter("window must be at least 1".into()));
    }
    if position == 0 {
        return Err(Error::NoContext);
    }
    if position > context.len() {
        return Err(Error::InvalidParameter(format!(
            "position {position} is past the end of a context of length {}",
            context.len()
        )));
    }
    let start = position - window.min(position);
    TextureKey::new(context[start..position].to_vec())
}

/// SHA-256 digest that seeds the keystream.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CipherSeed(pub [u8; 32]);

impl CipherSeed {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for CipherSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CipherSeed({})", self.to_hex())
    }
}

pub fn derive_seed(key: &SecretKey, tk: &TextureKey) -> CipherSeed {
    derive_seed_raw(key, tk.tokens())
}

fn derive_seed_raw(key: &SecretKey, tokens: &[TokenId]) -> CipherSeed {
    let mut hasher = Sha256::new();
    hasher.update(key.as_bytes());
    hasher.update([DOMAIN_SEPARATOR]);
    hasher.update((tokens.len() as u32).to_le_bytes());
    for t in tokens {
        hasher.update(t.0.to_le_bytes());
    }
    CipherSeed(hasher.finalize().into())
}

/// The ChaCha20 word stream keyed by a cipher seed.
pub struct KeyStream {
    rng: ChaCha20Rng,
}

impl KeyStream {
    pub fn new(seed: CipherSeed) -> Self {
        Self {
            rng: ChaCha20Rng::from_seed(seed.0),
        }
    }

    /// Next 8 keystream bytes as a little-endian word.
    #[inline]
    pub fn next_word(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw from `0..bound` by rejection on 64-bit words.
    #[inline]
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let limit = (1u128 << 64) / bound as u128 * bound as u128;
        loop {
            let w = self.next_word();
            if (w as u128) < limit {
                return w % bound;
            }
        }
    }
}

pub fn permutation_from_seed(seed: CipherSeed, n: usize) -> Permutation {
    let mut order: Vec<TokenId> = (0..n as u32).map(TokenId).collect();
    let mut stream = KeyStream::new(seed);
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    Permutation::from_order_unchecked(order)
}

/// Rank of `token` in `permutation_from_seed(seed, n)` without building it.
///
/// Replays the same swaps while tracking only where `token` currently sits,
/// so it needs O(1) memory and the same keystream draws.
pub fn rank_from_seed(seed: CipherSeed, n: usize, token: TokenId) -> usize {
    let mut pos = token.index();
    debug_assert!(pos < n);
    let mut stream = KeyStream::new(seed);
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        if pos == i {
            pos = j;
        } else if pos == j {
            pos = i;
        }
    }
    pos
}

/// Whether `token`'s rank in `permutation_from_seed(seed, n)` is at least
/// `threshold`.
///
/// The shuffle fixes position `i` at step `i`, so once the walk passes
/// below `threshold` without fixing `token` its rank must be lower and the
/// remaining draws can be skipped.
pub fn rank_at_least(seed: CipherSeed, n: usize, token: TokenId, threshold: usize) -> bool {
    if threshold == 0 {
        return true;
    }
    if threshold >= n {
        return false;
    }
    let mut pos = token.index();
    debug_assert!(pos < n);
    let mut stream = KeyStream::new(seed);
    for i in (threshold.max(1)..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        if pos == i || pos == j {
            pos = if pos == i { j } else { i };
            if pos == i {
                return true;
            }
        }
    }
    false
}

/// A secret key bound to the derivation above.
#[derive(Debug, Clone)]
pub struct Cipher {
    key: SecretKey,
}

impl Cipher {
    pub fn new(key: SecretKey) -> Self {
        Self { key }
    }

    pub fn key(&self) -> &SecretKey {
        &self.key
    }

    pub fn seed(&self, tk: &TextureKey) -> CipherSeed {
        derive_seed(&self.key, tk)
    }

    pub fn permutation(&self, tk: &TextureKey, n: usize) -> Permutation {
        permutation_from_seed(self.seed(tk), n)
    }

    /// Rank of `token` in the cipher for the given texture tokens.
    pub fn rank(&self, texture: &[TokenId], n: usize, token: TokenId) -> usize {
        rank_from_seed(derive_seed_raw(&self.key, texture), n, token)
    }
}

/// Texture keys already used during one generation run.
#[derive(Debug, Clone, Default)]
pub struct HistoryLog {
    seen: HashSet<Vec<u8>>,
}

impl HistoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if `tk` was already present; otherwise records it and
    /// returns `false`.
    pub fn check_and_insert(&mut self, tk: &TextureKey) -> bool {
        !self.seen.insert(tk.encode())
    }

    pub fn contains(&self, tk: &TextureKey) -> bool {
        self.seen.contains(&tk.encode())
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn clear(&mut self) {
        self.seen.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::tokens;
    use proptest::prelude::*;

    fn key(byte: u8) -> SecretKey {
        SecretKey::from_bytes(vec![byte; 32]).unwrap()
    }

    fn tk(ids: &[u32]) -> TextureKey {
        TextureKey::new(tokens(ids)).unwrap()
    }

    #[test]
    fn extract_examples() {
        let ctx = tokens(&[5, 7, 9]);
        assert_eq!(extract_texture_key(&ctx, 3, 2).unwrap(), tk(&[7, 9]));
        assert_eq!(extract_texture_key(&ctx, 1, 5).unwrap(), tk(&[5]));
        assert_eq!(extract_texture_key(&tokens(&[4]), 1, 1).unwrap(), tk(&[4]));
        assert_eq!(extract_texture_key(&ctx, 0, 1), Err(Error::NoContext));
        assert!(extract_texture_key(&ctx, 4, 1).is_err());
        assert!(extract_texture_key(&ctx, 2, 0).is_err());
    }

    #[test]
    fn seeds_are_deterministic_and_key_dependent() {
        let k = key(1);
        assert_eq!(derive_seed(&k, &tk(&[7])), derive_seed(&k, &tk(&[7])));
        assert_ne!(derive_seed(&k, &tk(&[7])), derive_seed(&k, &tk(&[8])));
        assert_ne!(derive_seed(&k, &tk(&[7])), derive_seed(&key(2), &tk(&[7])));
    }

    #[test]
    fn seed_matches_direct_hash() {
        let k = key(0xab);
        let mut bytes = vec![0xabu8; 32];
        bytes.push(0x01);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&400u32.to_le_bytes());
        let expected: [u8; 32] = Sha256::digest(&bytes).into();
        assert_eq!(derive_seed(&k, &tk(&[3, 400])).0, expected);
    }

    #[test]
    fn encoding_is_prefix_free() {
        assert_eq!(tk(&[3, 4]).encode(), vec![2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_ne!(tk(&[3, 4]).encode()[..8], tk(&[3]).encode()[..]);
    }

    #[test]
    fn keystream_matches_chacha20_zero_key_vector() {
        // First keystream block of ChaCha20 under the all-zero key and nonce.
        let mut s = KeyStream::new(CipherSeed([0; 32]));
        assert_eq!(s.next_word(), 0x903d_f1a0_ade0_b876);
        assert_eq!(s.next_word(), 0x28bd_8653_e56a_5d40);
        assert_eq!(s.next_word(), 0x1aed_8da0_b819_d2bd);
    }

    #[test]
    fn small_permutations() {
        let seed = derive_seed(&key(3), &tk(&[1]));
        assert_eq!(permutation_from_seed(seed, 1), Permutation::identity(1));
        assert_eq!(permutation_from_seed(seed, 0).len(), 0);
    }

    #[test]
    fn history_log_examples() {
        let mut h = HistoryLog::new();
        assert!(!h.check_and_insert(&tk(&[3])));
        assert!(h.check_and_insert(&tk(&[3])));
        assert!(!h.check_and_insert(&tk(&[3, 4])));
        assert!(!h.check_and_insert(&tk(&[4])));
        assert_eq!(h.len(), 3);
        h.clear();
        assert!(h.is_empty());
    }

    #[test]
    fn two_token_permutations_are_balanced() {
        let k = key(9);
        let flipped = (0..100_000u32)
            .filter(|&i| {
                permutation_from_seed(derive_seed(&k, &tk(&[i])), 2).order()[0] == TokenId(1)
            })
            .count();
        let freq = flipped as f64 / 1e5;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn distinct_keys_give_distinct_permutations() {
        let mut seen = HashSet::new();
        for i in 0..10_000u32 {
            let k = SecretKey::from_bytes([i.to_le_bytes(), [7; 4], [8; 4], [9; 4]].concat())
                .unwrap();
            let p = permutation_from_seed(derive_seed(&k, &tk(&[i % 17, i % 5])), 20);
            assert!(seen.insert(p));
        }
    }

    proptest! {
        #[test]
        fn rank_agrees_with_full_permutation(
            seed in prop::array::uniform32(any::<u8>()),
            n in 1usize..300,
            token in 0u32..300,
        ) {
            let token = TokenId(token % n as u32);
            let p = permutation_from_seed(CipherSeed(seed), n);
            prop_assert_eq!(rank_from_seed(CipherSeed(seed), n, token), p.rank_of(token).unwrap());
        }

        #[test]
        fn rank_threshold_agrees_with_rank(
            seed in prop::array::uniform32(any::<u8>()),
            n in 1usize..200,
            token in 0u32..200,
            threshold in 0usize..210,
        ) {
            let token = TokenId(token % n as u32);
            let rank = rank_from_seed(CipherSeed(seed), n, token);
            prop_assert_eq!(rank_at_least(CipherSeed(seed), n, token, threshold), rank >= threshold);
        }

        #[test]
        fn permutation_is_bijection(seed in prop::array::uniform32(any::<u8>()), n in 0usize..500) {
            let p = permutation_from_seed(CipherSeed(seed), n);
            prop_assert!(Permutation::new(p.order().to_vec()).is_ok());
        }
    }
}
