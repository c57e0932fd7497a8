//! Reweight strategies: maps from (token distribution, cipher) to a
//! watermarked token distribution.
//!
//! The quantile strategies lay the probabilities out on `[0, 1]` in cipher
//! order and push mass toward the end of the ordering. With cumulative mass
//! `S_i` over the first `i` ranks:
//!
//! * single quantile: `F(i) = max(S_i - alpha, 0) / (1 - alpha)`
//! * distribution preserving: `F(i) = max(S_i - alpha, 0) + max(S_i - (1 - alpha), 0)`
//!
//! and the token at rank `i` receives `F(i) - F(i-1)`. The second form is
//! `(1 - alpha) * P^alpha + alpha * P^(1-alpha)` written without divisions;
//! averaged over all orderings it returns the input distribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::types::{check_gamma, red_list_len, CompensatedSum, Distribution, Permutation, CLAMP_WINDOW};

/// A reweight strategy and its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReweightStrategy {
    Identity,
    /// Single-quantile reweight.
    PwAlpha { alpha: f64 },
    /// Distribution-preserving reweight.
    Dip { alpha: f64 },
    /// Red/green soft watermark with green bias `delta`.
    Soft { gamma: f64, delta: f64 },
}

impl ReweightStrategy {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidStrategy(msg));
        match *self {
            ReweightStrategy::Identity => Ok(()),
            ReweightStrategy::PwAlpha { alpha } | ReweightStrategy::Dip { alpha } => {
                if (0.0..=1.0).contains(&alpha) {
                    Ok(())
                } else {
                    bad(format!("alpha must lie in [0, 1], got {alpha}"))
                }
            }
            ReweightStrategy::Soft { gamma, delta } => {
                check_gamma(gamma).map_err(|e| Error::InvalidStrategy(e.to_string()))?;
                if delta >= 0.0 && delta.is_finite() {
                    Ok(())
                } else {
                    bad(format!("delta must be a finite value >= 0, got {delta}"))
                }
            }
        }
    }

    pub fn apply(&self, dist: &Distribution, theta: &Permutation) -> Result<Distribution> {
        apply(self, dist, theta)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ReweightStrategy::Identity)
    }
}

impl fmt::Display for ReweightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReweightStrategy::Identity => write!(f, "identity"),
            ReweightStrategy::PwAlpha { alpha } => write!(f, "pw:alpha={alpha}"),
            ReweightStrategy::Dip { alpha } => write!(f, "dip:alpha={alpha}"),
            ReweightStrategy::Soft { gamma, delta } => write!(f, "soft:gamma={gamma},delta={delta}"),
        }
    }
}

impl FromStr for ReweightStrategy {
    type Err = Error;

    /// Parses `identity`, `dip:alpha=A`, `pw:alpha=A` or `soft:gamma=G,delta=D`.
    fn from_str(s: &str) -> Result<Self> {
        let invalid = || Error::InvalidStrategy(s.to_string());
        let s = s.trim();
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k.trim(), r.trim()),
            None => (s, ""),
        };
        let mut alpha = None;
        let mut gamma = None;
        let mut delta = None;
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once('=').ok_or_else(invalid)?;
            let value: f64 = value.trim().parse().map_err(|_| invalid())?;
            let slot = match name.trim() {
                "alpha" => &mut alpha,
                "gamma" => &mut gamma,
                "delta" => &mut delta,
                _ => return Err(invalid()),
            };
            if slot.replace(value).is_some() {
                return Err(invalid());
            }
        }
        let strategy = match kind {
            "identity" if rest.is_empty() => ReweightStrategy::Identity,
            "dip" if gamma.is_none() && delta.is_none() => ReweightStrategy::Dip {
                alpha: alpha.ok_or_else(invalid)?,
            },
            "pw" if gamma.is_none() && delta.is_none() => ReweightStrategy::PwAlpha {
                alpha: alpha.ok_or_else(invalid)?,
            },
            "soft" if alpha.is_none() => ReweightStrategy::Soft {
                gamma: gamma.ok_or_else(invalid)?,
                delta: delta.ok_or_else(invalid)?,
            },
            _ => return Err(invalid()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl Serialize for ReweightStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ReweightStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn check_sizes(dist: &Distribution, theta: &Permutation) -> Result<()> {
    if dist.len() != theta.len() {
        return Err(Error::SizeMismatch {
            expected: dist.len(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Assigns `cdf(S_i) - cdf(S_{i-1})` to the token at rank `i`.
fn reweight_by_cdf(
    dist: &Distribution,
    theta: &Permutation,
    cdf: impl Fn(f64) -> f64,
) -> Result<Distribution> {
    check_sizes(dist, theta)?;
    let probs = dist.probs();
    let mut out = vec![0.0; probs.len()];
    let mut cumulative = CompensatedSum::default();
    let mut prev = cdf(0.0);
    for &t in theta.order() {
        cumulative.add(probs[t.index()]);
        let f = cdf(cumulative.value());
        out[t.index()] = f - prev;
        prev = f;
    }
    finish(out)
}

/// Clamps dust-level negatives and renormalizes.
fn finish(mut out: Vec<f64>) -> Result<Distribution> {
    for (index, p) in out.iter_mut().enumerate() {
        if *p < 0.0 {
            if *p < -CLAMP_WINDOW {
                return Err(Error::NegativeProbability { index, value: *p });
            }
            *p = 0.0;
        }
    }
    let mut total = CompensatedSum::default();
    out.iter().for_each(|&p| total.add(p));
    let total = total.value();
    if total > 0.0 && total != 1.0 {
        out.iter_mut().for_each(|p| *p /= total);
    }
    Distribution::new(out)
}

/// Single-quantile reweight: mass in `[0, alpha]` of the cipher ordering is
/// removed and the rest is scaled by `1 / (1 - alpha)`.
pub fn pw_alpha(dist: &Distribution, theta: &Permutation, alpha: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Err(Error::DegenerateAlpha);
    }
    check_sizes(dist, theta)?;
    if alpha == 0.0 {
        return Ok(dist.clone());
    }
    let scale = 1.0 / (1.0 - alpha);
    reweight_by_cdf(dist, theta, |s| (s - alpha).max(0.0) * scale)
}

/// Distribution-preserving reweight.
pub fn dip_reweight(dist: &Distribution, theta: &Permutation, alpha: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    check_sizes(dist, theta)?;
    if alpha == 0.0 || alpha == 1.0 {
        return Ok(dist.clone());
    }
    let upper = 1.0 - alpha;
    reweight_by_cdf(dist, theta, |s| (s - alpha).max(0.0) + (s - upper).max(0.0))
}

/// Red/green soft watermark: green tokens (ranks `ceil(gamma*N)..N` of the
/// cipher) have their probability multiplied by `e^delta` before
/// renormalizing.
pub fn soft_reweight(
    dist: &Distribution,
    theta: &Permutation,
    gamma: f64,
    delta: f64,
) -> Result<Distribution> {
    check_sizes(dist, theta)?;
    check_gamma(gamma)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be a finite value >= 0, got {delta}"
        )));
    }
    if delta == 0.0 {
        return Ok(dist.clone());
    }
    let boost = delta.exp();
    let probs = dist.probs();
    let red = red_list_len(gamma, probs.len());
    let mut out = probs.to_vec();
    for &t in &theta.order()[red..] {
        out[t.index()] *= boost;
    }
    let mut total = CompensatedSum::default();
    out.iter().for_each(|&p| total.add(p));
    let total = total.value();
    out.iter_mut().for_each(|p| *p /= total);
    Distribution::new(out)
}

pub fn apply(
    strategy: &ReweightStrategy,
    dist: &Distribution,
    theta: &Permutation,
) -> Result<Distribution> {
    match *strategy {
        ReweightStrategy::Identity => {
            check_sizes(dist, theta)?;
            Ok(dist.clone())
        }
        ReweightStrategy::PwAlpha { alpha } => pw_alpha(dist, theta, alpha),
        ReweightStrategy::Dip { alpha } => dip_reweight(dist, theta, alpha),
        ReweightStrategy::Soft { gamma, delta } => soft_reweight(dist, theta, gamma, delta),
    }
}

/// Total probability that `dist` assigns to the green ranks of `theta`.
pub fn green_mass(dist: &Distribution, theta: &Permutation, gamma: f64) -> f64 {
    let red = red_list_len(gamma, theta.len());
    theta.order()[red..]
        .iter()
        .map(|&t| dist.prob(t))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TokenId;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn perm(ids: &[u32]) -> Permutation {
        Permutation::from_ids(ids).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    /// All permutations of `0..n` by Heap's algorithm.
    fn all_permutations(n: usize) -> Vec<Permutation> {
        fn heap(k: usize, a: &mut Vec<u32>, out: &mut Vec<Permutation>) {
            if k <= 1 {
                out.push(Permutation::from_ids(a).unwrap());
                return;
            }
            for i in 0..k {
                heap(k - 1, a, out);
                if k.is_multiple_of(2) {
                    a.swap(i, k - 1);
                } else {
                    a.swap(0, k - 1);
                }
            }
        }
        let mut a: Vec<u32> = (0..n as u32).collect();
        let mut out = Vec::new();
        heap(n, &mut a, &mut out);
        out
    }

    #[test]
    fn pw_alpha_examples() {
        let theta = perm(&[0, 1, 2]);
        let out = pw_alpha(&dist(&[0.2, 0.5, 0.3]), &theta, 0.5).unwrap();
        assert_close(out.probs(), &[0.0, 0.4, 0.6], 1e-15);
        let d = dist(&[0.1, 0.6, 0.3]);
        assert_eq!(pw_alpha(&d, &perm(&[2, 0, 1]), 0.0).unwrap(), d);
        let out = pw_alpha(&dist(&[1.0, 0.0]), &perm(&[0, 1]), 0.5).unwrap();
        assert_close(out.probs(), &[1.0, 0.0], 0.0);
        assert_eq!(pw_alpha(&d, &theta, 1.0), Err(Error::DegenerateAlpha));
    }

    #[test]
    fn dip_examples() {
        let out = dip_reweight(&dist(&[0.2, 0.5, 0.3]), &perm(&[0, 1, 2]), 0.3).unwrap();
        assert_close(out.probs(), &[0.0, 0.4, 0.6], 1e-15);

        let p = dist(&[0.99, 0.01]);
        let ab = dip_reweight(&p, &perm(&[0, 1]), 0.5).unwrap();
        let ba = dip_reweight(&p, &perm(&[1, 0]), 0.5).unwrap();
        assert_close(ab.probs(), &[0.98, 0.02], 1e-15);
        // theta order (b, a) receives (0, 1).
        assert_close(ba.probs(), &[1.0, 0.0], 1e-15);
        let avg: Vec<f64> = (0..2).map(|i| 0.5 * (ab.probs()[i] + ba.probs()[i])).collect();
        assert_close(&avg, &[0.99, 0.01], 1e-15);

        let d = dist(&[0.1, 0.6, 0.3]);
        assert_eq!(dip_reweight(&d, &perm(&[1, 2, 0]), 0.0).unwrap(), d);
    }

    #[test]
    fn soft_examples() {
        let p = dist(&[0.99, 0.01]);
        // theta = (b, a) with gamma = 0.5: b is red, a is green.
        let out = soft_reweight(&p, &perm(&[1, 0]), 0.5, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((out.probs()[0] - e * 0.99 / (e * 0.99 + 0.01)).abs() < 1e-15);
        assert!((out.probs()[0] - 0.99630).abs() < 1e-5);
        assert_eq!(soft_reweight(&p, &perm(&[1, 0]), 0.5, 0.0).unwrap(), p);

        for delta in [0.5, 1.0, 1.5, 2.0] {
            let a_green = soft_reweight(&p, &perm(&[1, 0]), 0.5, delta).unwrap();
            let a_red = soft_reweight(&p, &perm(&[0, 1]), 0.5, delta).unwrap();
            let avg = 0.5 * (a_green.probs()[0] + a_red.probs()[0]);
            assert!(avg < 0.99, "delta {delta}: {avg}");
        }
    }

    #[test]
    fn apply_dispatch() {
        let u = Distribution::uniform(2).unwrap();
        let theta = perm(&[0, 1]);
        assert_eq!(apply(&ReweightStrategy::Identity, &u, &theta).unwrap(), u);
        // F(1) = max(0.5 - 0.45, 0) + max(0.5 - 0.55, 0) = 0.05
        let out = apply(&ReweightStrategy::Dip { alpha: 0.45 }, &u, &theta).unwrap();
        assert_close(out.probs(), &[0.05, 0.95], 1e-15);
        let soft = ReweightStrategy::Soft { gamma: 0.5, delta: 0.0 };
        assert_eq!(apply(&soft, &u, &theta).unwrap(), u);
        assert!(apply(&ReweightStrategy::Identity, &u, &perm(&[0, 1, 2])).is_err());
    }

    #[test]
    fn parse_and_display() {
        let cases = [
            ("identity", ReweightStrategy::Identity),
            ("dip:alpha=0.45", ReweightStrategy::Dip { alpha: 0.45 }),
            ("pw:alpha=0.45", ReweightStrategy::PwAlpha { alpha: 0.45 }),
            ("soft:gamma=0.5,delta=1.5", ReweightStrategy::Soft { gamma: 0.5, delta: 1.5 }),
        ];
        for (text, strategy) in cases {
            assert_eq!(text.parse::<ReweightStrategy>().unwrap(), strategy);
            assert_eq!(strategy.to_string(), text);
        }
        for bad in ["dip", "dip:alpha=2", "soft:gamma=0.5", "soft:gamma=1,delta=1", "dip:beta=1", "foo"] {
            assert!(bad.parse::<ReweightStrategy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exact_preservation_small_vocabularies() {
        let d = dist(&[0.05, 0.15, 0.3, 0.1, 0.25, 0.15]);
        for alpha in [0.1, 0.3, 0.45, 0.5, 0.77] {
            let perms = all_permutations(6);
            let mut avg = vec![0.0; 6];
            for theta in &perms {
                let w = dip_reweight(&d, theta, alpha).unwrap();
                avg.iter_mut().zip(w.probs()).for_each(|(a, p)| *a += p);
            }
            avg.iter_mut().for_each(|a| *a /= perms.len() as f64);
            assert_close(&avg, d.probs(), 1e-12);
        }
    }

    #[test]
    fn single_quantile_alone_does_not_preserve() {
        let d = dist(&[0.7, 0.2, 0.1]);
        let perms = all_permutations(3);
        let mut avg = [0.0; 3];
        for theta in &perms {
            let w = pw_alpha(&d, theta, 0.4).unwrap();
            avg.iter_mut().zip(w.probs()).for_each(|(a, p)| *a += p / 6.0);
        }
        assert!((avg[0] - 0.7).abs() > 1e-3);
    }

    fn arb_case() -> impl Strategy<Value = (Distribution, Permutation, f64)> {
        (1usize..64)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0.0f64..1.0, n),
                    Just((0..n as u32).collect::<Vec<_>>()).prop_shuffle(),
                    0.0f64..=1.0,
                )
            })
            .prop_filter_map("zero mass", |(w, ids, alpha)| {
                let d = Distribution::from_weights(&w).ok()?;
                Some((d, Permutation::from_ids(&ids).unwrap(), alpha))
            })
    }

    proptest! {
        #[test]
        fn outputs_are_valid((d, theta, alpha) in arb_case(), gamma in 0.0f64..0.99, delta in 0.0f64..4.0) {
            let strategies = [
                ReweightStrategy::Identity,
                ReweightStrategy::Dip { alpha },
                ReweightStrategy::PwAlpha { alpha: alpha.min(0.999) },
                ReweightStrategy::Soft { gamma, delta },
            ];
            for s in strategies {
                let out = s.apply(&d, &theta).unwrap();
                prop_assert!(out.probs().iter().all(|&p| p >= 0.0));
                prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn reverse_pair_identity((d, theta, alpha) in arb_case()) {
            let fwd = dip_reweight(&d, &theta, alpha).unwrap();
            let rev = dip_reweight(&d, &theta.reversed(), alpha).unwrap();
            for i in 0..d.len() {
                prop_assert!((fwd.probs()[i] + rev.probs()[i] - 2.0 * d.probs()[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn symmetric_in_alpha((d, theta, alpha) in arb_case()) {
            let a = dip_reweight(&d, &theta, alpha).unwrap();
            let b = dip_reweight(&d, &theta, 1.0 - alpha).unwrap();
            for i in 0..d.len() {
                prop_assert!((a.probs()[i] - b.probs()[i]).abs() <= 1e-15);
            }
        }

        #[test]
        fn green_mass_is_promoted((d, theta, alpha) in arb_case(), gamma in 0.0f64..0.999) {
            let w = dip_reweight(&d, &theta, alpha).unwrap();
            prop_assert!(green_mass(&w, &theta, gamma) >= green_mass(&d, &theta, gamma) - 1e-12);
        }

        #[test]
        fn point_mass_is_fixed(n in 1usize..30, tok in 0u32..30, alpha in 0.0f64..=1.0, seed in any::<u64>()) {
            let tok = TokenId(tok % n as u32);
            let d = Distribution::point_mass(n, tok).unwrap();
            let mut ids: Vec<u32> = (0..n as u32).collect();
            ids.rotate_left((seed % n as u64) as usize);
            let theta = Permutation::from_ids(&ids).unwrap();
            let out = dip_reweight(&d, &theta, alpha).unwrap();
            prop_assert!((out.prob(tok) - 1.0).abs() < 1e-15);
        }
    }
}
