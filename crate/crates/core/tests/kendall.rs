use mlab_core::eval::{discordant_pairs, kendall_tau, mean_std, seed_average, EvalMode, EvalReport, PairResult, TauVariant};
use mlab_core::rng::rng;
use mlab_core::synthworld::Pair;
use mlab_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Quadratic pair count straight from the definition.
fn brute(x: &[f64], y: &[f64]) -> (u64, f64) {
    let n = x.len();
    let (mut agree, mut disc) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            if (x[i] - x[j]) * (y[i] - y[j]) < 0.0 {
                disc += 1;
            } else {
                agree += 1;
            }
        }
    }
    (disc, (agree as f64 - disc as f64) / (agree + disc) as f64)
}

fn permutations(n: usize) -> Vec<Vec<f64>> {
    fn go(rest: &mut Vec<f64>, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            cur.push(v);
            go(rest, cur, out);
            cur.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    go(&mut (0..n).map(|v| v as f64).collect(), &mut Vec::new(), &mut out);
    out
}

#[test]
fn one_swap_of_three() {
    assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0], TauVariant::TieAgree).unwrap(), 1.0 / 3.0);
}

#[test]
fn every_permutation_up_to_six() {
    for n in 2..=6 {
        let perms = permutations(n);
        for x in &perms {
            for y in &perms {
                let (d, tau) = brute(x, y);
                assert_eq!(discordant_pairs(x, y), d);
                assert_eq!(kendall_tau(x, y, TauVariant::TieAgree).unwrap(), tau, "{x:?} {y:?}");
            }
        }
    }
}

#[test]
fn random_tie_free_vectors() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let n = r.random_range(2..=512);
        let mut x: Vec<f64> = (0..n).map(|i| i as f64 + r.random_range(0.0..0.5)).collect();
        let mut y: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 4.0).collect();
        x.shuffle(&mut r);
        y.shuffle(&mut r);
        let (d, tau) = brute(&x, &y);
        assert_eq!(discordant_pairs(&x, &y), d);
        assert!((kendall_tau(&x, &y, TauVariant::TieAgree).unwrap() - tau).abs() < 1e-12);
        // Without ties tau-b coincides with the plain coefficient.
        assert!((kendall_tau(&x, &y, TauVariant::TauB).unwrap() - tau).abs() < 1e-12);
    }
}

#[test]
fn tied_vectors_match_brute_force() {
    let mut r = rng(12);
    for _ in 0..300 {
        let n = r.random_range(2..80);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
        assert_eq!(discordant_pairs(&x, &y), brute(&x, &y).0);
    }
}

fn report(taus: &[(Pair, f64)], seed: u64) -> EvalReport {
    EvalReport {
        schema_version: 1,
        mode: EvalMode::WithReference,
        seeds: vec![seed],
        pairs: taus
            .iter()
            .map(|&(pair, tau)| PairResult { pair, n: 10, tau, tau_b: Some(tau) })
            .collect(),
        average_tau: taus.iter().map(|t| t.1).sum::<f64>() / taus.len() as f64,
        average_tau_b: None,
        skipped: Vec::new(),
    }
}

#[test]
fn seed_averaging() {
    let a = report(&[(Pair::DeEn, 0.5), (Pair::RuEn, 0.7)], 1);
    let b = report(&[(Pair::DeEn, 0.7), (Pair::RuEn, 0.9)], 2);
    let c = report(&[(Pair::DeEn, 0.6), (Pair::RuEn, 0.8)], 3);
    let avg = seed_average(&[a.clone(), b, c]).unwrap();
    assert!((avg.pairs[0].mean_tau - 0.6).abs() < 1e-12);
    assert!((avg.pairs[0].std_tau - 0.1).abs() < 1e-12);
    assert!((avg.average_tau - 0.7).abs() < 1e-12);
    assert_eq!(avg.seeds, vec![1, 2, 3]);

    let single = seed_average(std::slice::from_ref(&a)).unwrap();
    assert_eq!(single.pairs[0].std_tau, 0.0);
    assert_eq!(mean_std(&[2.0]), (2.0, 0.0));

    let other = report(&[(Pair::ZhEn, 0.1), (Pair::RuEn, 0.2)], 4);
    assert!(matches!(seed_average(&[a.clone(), other]), Err(Error::Config(_))));
    let mut free = a.clone();
    free.mode = EvalMode::ReferenceFree;
    assert!(seed_average(&[a, free]).is_err());
    assert!(seed_average(&[]).is_err());
}

proptest! {
    #[test]
    fn monotone_maps_preserve_tau(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..60)
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let t = kendall_tau(&x, &y, TauVariant::TieAgree).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| v * 3.0 + 1.0).collect();
        let fy: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        prop_assert_eq!(kendall_tau(&fx, &fy, TauVariant::TieAgree).unwrap(), t);
        prop_assert_eq!(kendall_tau(&y, &x, TauVariant::TieAgree).unwrap(), t);
    }

    #[test]
    fn reversal_negates_tau(
        perm in Just((0..40).map(|v| v as f64).collect::<Vec<f64>>()).prop_shuffle(),
    ) {
        let x: Vec<f64> = (0..40).map(|v| v as f64).collect();
        let neg: Vec<f64> = perm.iter().map(|v| -v).collect();
        let t = kendall_tau(&x, &perm, TauVariant::TieAgree).unwrap();
        let tn = kendall_tau(&x, &neg, TauVariant::TieAgree).unwrap();
        prop_assert!((t + tn).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&t));
    }
}
