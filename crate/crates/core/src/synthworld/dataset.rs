use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use rand::Rng;

use super::{corrupt, oracle_score, LabeledExample, Pair, ParallelExample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

/// Hypotheses generated per surviving parallel example.
pub const K_HYPOTHESES: usize = 4;
const PERCENTILE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillSet {
    pub examples: Vec<LabeledExample>,
    /// Stage-one filter threshold per pair present in the corpus.
    pub thresholds: Vec<(Pair, f32)>,
    pub survivors: usize,
    pub duplicates_removed: usize,
}

/// Nearest-rank percentile: the value at 1-based rank `⌈p·n⌉` of the sorted scores.
pub(crate) fn nearest_rank(scores: &[f32], p: f64) -> f32 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// Filter, corrupt and label a parallel corpus.
///
/// Stage one keeps examples whose reference-free score of the raw reference
/// reaches the per-pair percentile. Stage two draws [`K_HYPOTHESES`]
/// corruptions per survivor with edit counts uniform over `severity`. Stage
/// three labels them against the reference and drops exact duplicates.
pub fn build_distill_set(
    corpus: &[ParallelExample],
    severity: RangeInclusive<usize>,
    seed: u64,
) -> Result<DistillSet> {
    if corpus.is_empty() {
        return Err(Error::config("corpus is empty"));
    }
    if severity.is_empty() {
        return Err(Error::config("severity range is empty"));
    }
    let raw: Vec<f32> = corpus
        .iter()
        .map(|ex| oracle_score(&ex.src, &ex.reference, None).map(|l| l.score))
        .collect::<Result<_>>()?;

    let mut thresholds = Vec::new();
    let mut keep = vec![false; corpus.len()];
    for pair in Pair::ALL {
        let idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].pair == pair).collect();
        if idx.is_empty() {
            continue;
        }
        let scores: Vec<f32> = idx.iter().map(|&i| raw[i]).collect();
        let t = nearest_rank(&scores, PERCENTILE);
        for &i in &idx {
            keep[i] = raw[i] >= t;
        }
        thresholds.push((pair, t));
    }
    let survivors: Vec<&ParallelExample> =
        corpus.iter().zip(&keep).filter(|(_, k)| **k).map(|(e, _)| e).collect();
    if survivors.is_empty() {
        return Err(Error::Pipeline(format!("no example passed the filter; thresholds {thresholds:?}")));
    }

    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(survivors.len() * K_HYPOTHESES);
    let mut duplicates_removed = 0;
    for (s, ex) in survivors.iter().enumerate() {
        for k in 0..K_HYPOTHESES {
            let ex_seed = derive_seed(seed, (s * K_HYPOTHESES + k) as u64);
            let n_ops = rng(ex_seed).random_range(severity.clone());
            let (mt, recipe) = corrupt(&ex.reference, n_ops, derive_seed(ex_seed, 1));
            if !seen.insert((ex.src.clone(), ex.reference.clone(), mt.clone())) {
                duplicates_removed += 1;
                continue;
            }
            let label = oracle_score(&ex.src, &mt, Some(&ex.reference))?;
            examples.push(LabeledExample {
                pair: ex.pair,
                src: ex.src.clone(),
                reference: ex.reference.clone(),
                mt,
                score: label.score,
                tags: label.tags,
                seed: ex_seed,
                recipe,
            });
        }
    }
    Ok(DistillSet {
        examples,
        thresholds,
        survivors: survivors.len(),
        duplicates_removed,
    })
}

/// Exactly `size` labeled examples split evenly over `pairs` (earlier pairs
/// take the remainder), each pair built by its own corpus and pipeline run.
pub fn labeled_dataset(
    pairs: &[Pair],
    size: usize,
    lengths: RangeInclusive<usize>,
    severity: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if pairs.is_empty() || size == 0 {
        return Err(Error::config("need at least one pair and one example"));
    }
    let mut out = Vec::with_capacity(size);
    for (i, &pair) in pairs.iter().enumerate() {
        let want = size / pairs.len() + usize::from(i < size % pairs.len());
        if want == 0 {
            continue;
        }
        // Headroom for duplicate removal.
        let per = want.div_ceil(K_HYPOTHESES);
        let corpus = super::gen_corpus(pair, per + per / 10 + 8, lengths.clone(), seed)?;
        let mut set = build_distill_set(&corpus, severity.clone(), derive_seed(seed, 0x6c61_6200 + pair as u64))?;
        if set.examples.len() < want {
            return Err(Error::Pipeline(format!(
                "{pair}: only {} examples after deduplication, {want} requested",
                set.examples.len()
            )));
        }
        set.examples.truncate(want);
        out.extend(set.examples);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut out: W, examples: &[LabeledExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads one example per nonblank line, validating each.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?;
        ex.validate()
            .map_err(|e| Error::InvalidExample(format!("line {}: {e}", n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{gen_corpus, DEFAULT_LENGTHS, DEFAULT_SEVERITY};
    use super::*;
    use crate::minimetric::Tag;

    fn corpus() -> Vec<ParallelExample> {
        Pair::ALL
            .iter()
            .flat_map(|&p| gen_corpus(p, 60, DEFAULT_LENGTHS, 3).unwrap())
            .collect()
    }

    #[test]
    fn balanced_sizes() {
        let d = labeled_dataset(&Pair::ALL, 100, DEFAULT_LENGTHS, DEFAULT_SEVERITY, 3).unwrap();
        assert_eq!(d.len(), 100);
        let counts: Vec<usize> = Pair::ALL.iter().map(|&p| d.iter().filter(|e| e.pair == p).count()).collect();
        assert_eq!(counts, vec![34, 33, 33]);
        assert_eq!(d, labeled_dataset(&Pair::ALL, 100, DEFAULT_LENGTHS, DEFAULT_SEVERITY, 3).unwrap());
        assert!(labeled_dataset(&[], 10, DEFAULT_LENGTHS, DEFAULT_SEVERITY, 3).is_err());
    }

    #[test]
    fn nearest_rank_percentile() {
        let scores: Vec<f32> = (1..=100).map(|i| i as f32 / 100.0).collect();
        let t = nearest_rank(&scores, 0.95);
        assert_eq!(t, 0.95);
        assert_eq!(scores.iter().filter(|&&s| s >= t).count(), 6);
        assert_eq!(nearest_rank(&[0.3], 0.95), 0.3);
    }

    #[test]
    fn pipeline_contract() {
        let set = build_distill_set(&corpus(), DEFAULT_SEVERITY, 8).unwrap();
        assert_eq!(set.thresholds.len(), 3);
        assert_eq!(set.survivors, 180);
        assert_eq!(set.examples.len() + set.duplicates_removed, 180 * K_HYPOTHESES);
        let mut triples = HashSet::new();
        for ex in &set.examples {
            ex.validate().unwrap();
            assert!(triples.insert((&ex.src, &ex.reference, &ex.mt)));
            if ex.recipe.is_empty() {
                assert_eq!(ex.mt, ex.reference);
                assert_eq!(ex.score, 1.0);
                assert!(ex.tags.iter().all(|&t| t == Tag::NoError));
            }
        }
        assert!(set.examples.iter().any(|e| e.recipe.is_empty()));
        assert!(set.examples.iter().any(|e| e.score < 0.5));
    }

    #[test]
    fn serialization_is_deterministic() {
        let c = corpus();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_jsonl(&mut a, &build_distill_set(&c, DEFAULT_SEVERITY, 1).unwrap().examples).unwrap();
        write_jsonl(&mut b, &build_distill_set(&c, DEFAULT_SEVERITY, 1).unwrap().examples).unwrap();
        assert_eq!(a, b);
        let back = read_jsonl(a.as_slice()).unwrap();
        let mut again = Vec::new();
        write_jsonl(&mut again, &back).unwrap();
        assert_eq!(again, a);
        let first = String::from_utf8(a).unwrap();
        let line = first.lines().next().unwrap();
        for key in ["\"pair\"", "\"src\"", "\"ref\"", "\"mt\"", "\"score\"", "\"tags\"", "\"seed\""] {
            assert!(line.contains(key), "{line}");
        }
    }

    #[test]
    fn rejects_bad_records() {
        let bad = r#"{"pair":"de-en","src":[4],"ref":[1540],"mt":[1540],"score":1.0,"tags":[],"seed":0}"#;
        assert!(matches!(read_jsonl(bad.as_bytes()), Err(Error::InvalidExample(_))));
        assert!(matches!(read_jsonl("{".as_bytes()), Err(Error::Input(_))));
        assert!(build_distill_set(&[], DEFAULT_SEVERITY, 0).is_err());
    }
}
