use super::Pair;
use crate::error::{Error, Result};
use crate::minimetric::Tag;

/// One step of a hypothesis-to-reference alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignOp {
    Match,
    Sub,
    /// Reference token missing from the hypothesis.
    Del,
    /// Hypothesis token absent from the reference.
    Ins,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleLabel {
    pub score: f32,
    pub tags: Vec<Tag>,
}

pub fn tag_weight(tag: Tag) -> u32 {
    match tag {
        Tag::NoError => 0,
        Tag::Minor => 1,
        Tag::Major => 5,
        Tag::Critical => 10,
    }
}

/// Minimum-cost alignment with unit costs, backtraced with the preference
/// match > sub > del > ins. Operations are returned in sequence order.
pub fn align(hyp: &[u32], reference: &[u32]) -> Vec<AlignOp> {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut d = vec![0u32; (n + 1) * w];
    for (j, v) in d[..w].iter_mut().enumerate() {
        *v = j as u32;
    }
    for i in 1..=n {
        d[i * w] = i as u32;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + u32::from(hyp[i - 1] != reference[j - 1]);
            let del = d[i * w + j - 1] + 1;
            let ins = d[(i - 1) * w + j] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == reference[j - 1];
            let diag = d[(i - 1) * w + j - 1];
            if same && diag == here {
                ops.push(AlignOp::Match);
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                ops.push(AlignOp::Sub);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(AlignOp::Del);
            j -= 1;
        } else {
            ops.push(AlignOp::Ins);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Scores `hyp` against `reference`, or against the bijection of `src` when
/// no reference is given.
pub fn oracle_score(src: &[u32], hyp: &[u32], reference: Option<&[u32]>) -> Result<OracleLabel> {
    if hyp.is_empty() {
        return Err(Error::InvalidExample("empty hypothesis".into()));
    }
    let derived;
    let target = match reference {
        Some(r) if !r.is_empty() => r,
        _ => {
            let first = *src.first().ok_or_else(|| {
                Error::InvalidExample("no reference and no source to derive one from".into())
            })?;
            let pair = Pair::of_source_token(first)
                .ok_or_else(|| Error::InvalidExample(format!("token {first} belongs to no pair")))?;
            derived = pair.translate(src)?;
            &derived
        }
    };

    let mut tags = vec![Tag::NoError; hyp.len()];
    let mut mark = |i: usize, t: Tag| tags[i] = tags[i].max(t);
    let mut h = 0;
    for op in align(hyp, target) {
        match op {
            AlignOp::Match => h += 1,
            AlignOp::Sub => {
                mark(h, Tag::Major);
                h += 1;
            }
            AlignOp::Ins => {
                mark(h, Tag::Critical);
                h += 1;
            }
            AlignOp::Del => mark(h.min(hyp.len() - 1), Tag::Minor),
        }
    }
    let penalty: u32 = tags.iter().map(|&t| tag_weight(t)).sum();
    let score = (1.0 - penalty as f64 / (5.0 * target.len() as f64)).clamp(0.0, 1.0);
    Ok(OracleLabel {
        score: score as f32,
        tags,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{corrupt, gen_corpus, Edit, DEFAULT_LENGTHS};
    use super::*;
    use proptest::prelude::*;

    fn reference10() -> Vec<u32> {
        (1540..1550).collect()
    }

    #[test]
    fn identical_hypothesis() {
        let r = reference10();
        let l = oracle_score(&[], &r, Some(&r)).unwrap();
        assert_eq!(l.score, 1.0);
        assert!(l.tags.iter().all(|&t| t == Tag::NoError));
    }

    #[test]
    fn one_substitution() {
        let r = reference10();
        let mut h = r.clone();
        h[4] = 1700;
        let l = oracle_score(&[], &h, Some(&r)).unwrap();
        assert!((l.score as f64 - 0.9).abs() < 1e-7);
        assert_eq!(l.tags.iter().filter(|&&t| t == Tag::Major).count(), 1);
        assert_eq!(l.tags[4], Tag::Major);
    }

    #[test]
    fn deletion_marks_following_token() {
        let r = reference10();
        let h: Vec<u32> = r.iter().copied().filter(|&t| t != 1543).collect();
        let l = oracle_score(&[], &h, Some(&r)).unwrap();
        assert_eq!(l.tags[3], Tag::Minor);
        assert_eq!(l.tags.iter().filter(|&&t| t != Tag::NoError).count(), 1);
        // Deleting the final token marks the preceding one.
        let l = oracle_score(&[], &r[..9], Some(&r)).unwrap();
        assert_eq!(l.tags[8], Tag::Minor);
        assert!((l.score as f64 - (1.0 - 1.0 / 50.0)).abs() < 1e-7);
    }

    #[test]
    fn insertion_is_critical() {
        let r = reference10();
        let mut h = r.clone();
        h.insert(0, 1800);
        let l = oracle_score(&[], &h, Some(&r)).unwrap();
        assert_eq!(l.tags[0], Tag::Critical);
        assert!((l.score as f64 - 0.8).abs() < 1e-7);
    }

    #[test]
    fn all_substituted_scores_zero() {
        let r = reference10();
        let h: Vec<u32> = (1800..1810).collect();
        assert_eq!(oracle_score(&[], &h, Some(&r)).unwrap().score, 0.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(oracle_score(&[], &[1540], None).is_err());
        assert!(oracle_score(&[], &[1540], Some(&[])).is_err());
        assert!(oracle_score(&[4], &[], Some(&[1540])).is_err());
    }

    #[test]
    fn reference_free_matches_reference_based() {
        for ex in gen_corpus(Pair::DeEn, 50, DEFAULT_LENGTHS, 1).unwrap() {
            let (h, _) = corrupt(&ex.reference, 3, ex.seed);
            assert_eq!(
                oracle_score(&ex.src, &h, None).unwrap(),
                oracle_score(&ex.src, &h, Some(&ex.reference)).unwrap()
            );
        }
    }

    #[test]
    fn tie_order_prefers_substitution() {
        // [a, b] vs [c]: one sub plus one ins or del; sub is taken first from the end.
        let ops = align(&[7, 8], &[9]);
        assert_eq!(ops, vec![AlignOp::Ins, AlignOp::Sub]);
    }

    #[test]
    fn mean_score_falls_with_severity() {
        let corpus = gen_corpus(Pair::RuEn, 1000, DEFAULT_LENGTHS, 77).unwrap();
        let mut means = Vec::new();
        for s in 0..=6 {
            let total: f64 = corpus
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let (h, _) = corrupt(&ex.reference, s, crate::rng::derive_seed(s as u64, i as u64));
                    oracle_score(&ex.src, &h, Some(&ex.reference)).unwrap().score as f64
                })
                .sum();
            means.push(total / corpus.len() as f64);
        }
        for s in 0..6 {
            assert!(means[s + 1] < means[s], "{means:?}");
        }
    }

    /// Number of distinct minimum-cost alignments.
    fn count_alignments(hyp: &[u32], r: &[u32]) -> u64 {
        let (n, m) = (hyp.len(), r.len());
        let mut d = vec![vec![0u32; m + 1]; n + 1];
        let mut c = vec![vec![0u64; m + 1]; n + 1];
        for i in 0..=n {
            for j in 0..=m {
                if i == 0 && j == 0 {
                    c[0][0] = 1;
                    continue;
                }
                let mut best = u32::MAX;
                let mut ways = 0;
                let mut offer = |cost: u32, w: u64| {
                    if cost < best {
                        best = cost;
                        ways = w;
                    } else if cost == best {
                        ways += w;
                    }
                };
                if i > 0 && j > 0 {
                    offer(d[i - 1][j - 1] + u32::from(hyp[i - 1] != r[j - 1]), c[i - 1][j - 1]);
                }
                if i > 0 {
                    offer(d[i - 1][j] + 1, c[i - 1][j]);
                }
                if j > 0 {
                    offer(d[i][j - 1] + 1, c[i][j - 1]);
                }
                d[i][j] = best;
                c[i][j] = ways;
            }
        }
        c[n][m]
    }

    /// Tags implied by following each token through the edit trace.
    fn trace_tags(reference: &[u32], trace: &[Edit]) -> (Vec<Tag>, u32) {
        // Provenance per live token: severity so far and a pending-deletion flag.
        let mut tags: Vec<Tag> = vec![Tag::NoError; reference.len()];
        let mut pending_end = false;
        let mut cost = 0;
        for e in trace {
            match *e {
                Edit::Replace { pos, .. } => {
                    tags[pos] = tags[pos].max(Tag::Major);
                    cost += 1;
                }
                Edit::Insert { pos, .. } => {
                    tags.insert(pos, Tag::Critical);
                    cost += 1;
                }
                Edit::Swap { pos } => {
                    tags.swap(pos, pos + 1);
                    tags[pos] = tags[pos].max(Tag::Major);
                    tags[pos + 1] = tags[pos + 1].max(Tag::Major);
                    cost += 2;
                }
                Edit::Drop { pos } => {
                    tags.remove(pos);
                    if pos < tags.len() {
                        tags[pos] = tags[pos].max(Tag::Minor);
                    } else {
                        pending_end = true;
                    }
                    cost += 1;
                }
            }
        }
        if pending_end {
            let last = tags.len() - 1;
            tags[last] = tags[last].max(Tag::Minor);
        }
        (tags, cost)
    }

    proptest! {
        #[test]
        fn tags_reconstruct_single_edit_severity(len in 2usize..24, seed: u64) {
            let reference: Vec<u32> = (0..len as u32).map(|i| 1540 + i).collect();
            let (hyp, trace) = corrupt(&reference, 1, seed);
            let (want, cost) = trace_tags(&reference, &trace);
            let ops = align(&hyp, &reference);
            let distance = ops.iter().filter(|&&o| o != AlignOp::Match).count() as u32;
            if count_alignments(&hyp, &reference) == 1 && distance == cost {
                let got = oracle_score(&[], &hyp, Some(&reference)).unwrap();
                let sum = |t: &[Tag]| t.iter().map(|&x| tag_weight(x)).sum::<u32>();
                prop_assert_eq!(sum(&got.tags), sum(&want));
            }
        }

        #[test]
        fn tags_reconstruct_multi_edit_severity(len in 4usize..24, n_ops in 1usize..4, seed: u64) {
            let reference: Vec<u32> = (0..len as u32).map(|i| 1540 + i).collect();
            let (hyp, trace) = corrupt(&reference, n_ops, seed);
            let (want, cost) = trace_tags(&reference, &trace);
            let ops = align(&hyp, &reference);
            let distance = ops.iter().filter(|&&o| o != AlignOp::Match).count() as u32;
            if count_alignments(&hyp, &reference) == 1 && distance == cost {
                let got = oracle_score(&[], &hyp, Some(&reference)).unwrap();
                prop_assert_eq!(got.tags, want);
            }
        }

        #[test]
        fn score_in_unit_interval(len in 1usize..24, n_ops in 0usize..30, seed: u64) {
            let reference: Vec<u32> = (0..len as u32).map(|i| 1540 + i).collect();
            let (hyp, _) = corrupt(&reference, n_ops, seed);
            let l = oracle_score(&[], &hyp, Some(&reference)).unwrap();
            prop_assert!((0.0..=1.0).contains(&l.score));
            prop_assert_eq!(l.tags.len(), hyp.len());
        }
    }
}
