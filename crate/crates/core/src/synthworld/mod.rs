//! Deterministic synthetic translation world.
//!
//! Three pairs own disjoint 512-token source ranges starting at id 4. Every
//! pair translates into one shared 512-token target range through a fixed
//! seeded bijection.

mod corrupt;
mod dataset;
mod oracle;

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minimetric::{Tag, NUM_SPECIAL};
use crate::rng::{derive_seed, rng};

pub use corrupt::{corrupt, fifteen_percent_ops, replay, Edit};
pub use dataset::{build_distill_set, labeled_dataset, read_jsonl, write_jsonl, DistillSet, K_HYPOTHESES};
pub use oracle::{align, oracle_score, tag_weight, AlignOp, OracleLabel};

pub const PAIR_VOCAB: u32 = 512;
pub const TARGET_BASE: u32 = NUM_SPECIAL as u32 + 3 * PAIR_VOCAB;
pub const DEFAULT_LENGTHS: RangeInclusive<usize> = 4..=24;
pub const DEFAULT_SEVERITY: RangeInclusive<usize> = 0..=6;
const BIJECTION_SEED: u64 = 0x00b1_7ec7_10a5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pair {
    #[serde(rename = "de-en")]
    DeEn,
    #[serde(rename = "ru-en")]
    RuEn,
    #[serde(rename = "zh-en")]
    ZhEn,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::DeEn, Pair::RuEn, Pair::ZhEn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Pair::DeEn => "de-en",
            Pair::RuEn => "ru-en",
            Pair::ZhEn => "zh-en",
        }
    }

    pub fn source_base(self) -> u32 {
        NUM_SPECIAL as u32 + self as u32 * PAIR_VOCAB
    }

    /// The pair whose source range contains `token`.
    pub fn of_source_token(token: u32) -> Option<Pair> {
        let off = token.checked_sub(NUM_SPECIAL as u32)?;
        Pair::ALL.get((off / PAIR_VOCAB) as usize).copied()
    }

    /// Maps one source token to its target token.
    pub fn translate_token(self, token: u32) -> Result<u32> {
        let base = self.source_base();
        if !(base..base + PAIR_VOCAB).contains(&token) {
            return Err(Error::InvalidExample(format!(
                "token {token} is outside the {} source range",
                self.label()
            )));
        }
        Ok(TARGET_BASE + permutations()[self.index()][(token - base) as usize])
    }

    pub fn translate(self, src: &[u32]) -> Result<Vec<u32>> {
        src.iter().map(|&t| self.translate_token(t)).collect()
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Pair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pair::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::config(format!("unknown pair {s:?}; expected de-en, ru-en or zh-en")))
    }
}

fn permutations() -> &'static [Vec<u32>; 3] {
    static PERMS: OnceLock<[Vec<u32>; 3]> = OnceLock::new();
    PERMS.get_or_init(|| {
        Pair::ALL.map(|p| {
            let mut perm: Vec<u32> = (0..PAIR_VOCAB).collect();
            perm.shuffle(&mut rng(derive_seed(BIJECTION_SEED, p as u64)));
            perm
        })
    })
}

pub fn random_target_token<R: Rng>(r: &mut R) -> u32 {
    TARGET_BASE + r.random_range(0..PAIR_VOCAB)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub pair: Pair,
    pub src: Vec<u32>,
    #[serde(rename = "ref")]
    pub reference: Vec<u32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub pair: Pair,
    pub src: Vec<u32>,
    #[serde(rename = "ref")]
    pub reference: Vec<u32>,
    pub mt: Vec<u32>,
    pub score: f32,
    pub tags: Vec<Tag>,
    pub seed: u64,
    /// Edits that turned the reference into `mt`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recipe: Vec<Edit>,
}

impl LabeledExample {
    pub fn validate(&self) -> Result<()> {
        if self.tags.len() != self.mt.len() {
            return Err(Error::InvalidExample(format!(
                "{} tags for {} translation tokens",
                self.tags.len(),
                self.mt.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidExample(format!("score {} outside [0,1]", self.score)));
        }
        Ok(())
    }
}

/// Parallel examples for one pair, each derived from `(seed, pair, index)`.
pub fn gen_corpus(
    pair: Pair,
    size: usize,
    lengths: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<ParallelExample>> {
    if size == 0 {
        return Err(Error::config("corpus size must be at least 1"));
    }
    if lengths.is_empty() || *lengths.start() == 0 {
        return Err(Error::config("length range must be nonempty and start at 1 or more"));
    }
    let pair_seed = derive_seed(seed, pair as u64);
    let base = pair.source_base();
    (0..size)
        .map(|i| {
            let ex_seed = derive_seed(pair_seed, i as u64);
            let mut r = rng(ex_seed);
            let len = r.random_range(lengths.clone());
            let src: Vec<u32> = (0..len).map(|_| base + r.random_range(0..PAIR_VOCAB)).collect();
            let reference = pair.translate(&src)?;
            Ok(ParallelExample {
                pair,
                src,
                reference,
                seed: ex_seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn pair_labels_round_trip() {
        for p in Pair::ALL {
            assert_eq!(p.label().parse::<Pair>().unwrap(), p);
        }
        assert!(matches!("en-fr".parse::<Pair>(), Err(Error::Config(_))));
    }

    #[test]
    fn bijection_is_a_permutation() {
        for p in Pair::ALL {
            let base = p.source_base();
            let mut out: Vec<u32> = (base..base + PAIR_VOCAB).map(|t| p.translate_token(t).unwrap()).collect();
            out.sort_unstable();
            assert_eq!(out, (TARGET_BASE..TARGET_BASE + PAIR_VOCAB).collect::<Vec<_>>());
            assert!(p.translate_token(base + PAIR_VOCAB).is_err());
        }
        assert_ne!(Pair::DeEn.translate_token(4).unwrap(), Pair::RuEn.translate_token(516).unwrap());
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = gen_corpus(Pair::RuEn, 1, DEFAULT_LENGTHS, 5).unwrap();
        let b = gen_corpus(Pair::RuEn, 1, DEFAULT_LENGTHS, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_corpus(Pair::RuEn, 1, DEFAULT_LENGTHS, 6).unwrap());
        assert!(gen_corpus(Pair::RuEn, 0, DEFAULT_LENGTHS, 5).is_err());
    }

    #[test]
    fn corpus_respects_bijection_and_ranges() {
        for p in Pair::ALL {
            for ex in gen_corpus(p, 300, DEFAULT_LENGTHS, 11).unwrap() {
                assert!((4..=24).contains(&ex.src.len()));
                assert_eq!(ex.reference.len(), ex.src.len());
                for (s, r) in ex.src.iter().zip(&ex.reference) {
                    assert_eq!(Pair::of_source_token(*s), Some(p));
                    assert_eq!(p.translate_token(*s).unwrap(), *r);
                }
            }
        }
    }

    #[test]
    fn token_histogram_is_uniform() {
        let corpus = gen_corpus(Pair::ZhEn, 10_000, DEFAULT_LENGTHS, 2024).unwrap();
        let mut counts = vec![0u64; PAIR_VOCAB as usize];
        let base = Pair::ZhEn.source_base();
        for ex in &corpus {
            for t in &ex.src {
                counts[(t - base) as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / PAIR_VOCAB as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((PAIR_VOCAB - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }
}
