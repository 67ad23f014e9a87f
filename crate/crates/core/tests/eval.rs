use isg_core::eval::*;
use rand::Rng;

mod common;
use common::*;

#[test]
fn pcc_matches_direct_formula() {
    assert!((pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 9.0 / 84f64.sqrt()).abs() < 1e-12);
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.random_range(2..40);
        let (x, y) = (random_vec(&mut r, n), random_vec(&mut r, n));
        let v = pcc(&x, &y).unwrap();
        assert!((v - pcc_direct(&x, &y)).abs() < 1e-12, "seed {seed}");
        assert!((-1.0..=1.0).contains(&v));
    }
}

#[test]
fn pcc_invariances() {
    for seed in 0..100 {
        let mut r = rng(seed + 1000);
        let n = r.random_range(3..30);
        let (x, y) = (random_vec(&mut r, n), random_vec(&mut r, n));
        let base = pcc(&x, &y).unwrap();
        let a = r.random_range(0.01..50.0);
        let b = r.random_range(-100.0..100.0);
        let affine: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        assert!((pcc(&affine, &y).unwrap() - base).abs() < 1e-12, "seed {seed}");
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pcc(&neg, &y).unwrap() + base).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn auc_matches_pair_counting() {
    for seed in 0..100 {
        let mut r = rng(seed + 2000);
        let n = r.random_range(2..40);
        // coarse grid of scores so ties occur
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 / 4.0).collect();
        let mut l: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        l[0] = true;
        l[1] = false;
        let v = auc(&s, &l).unwrap();
        assert!((v - auc_pairs(&s, &l)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn auc_monotone_and_complement() {
    for seed in 0..100 {
        let mut r = rng(seed + 3000);
        let n = r.random_range(2..30);
        let s: Vec<f64> = (0..n).map(|i| i as f64 + r.random_range(0.0..0.5)).collect();
        let mut l: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        l[n - 1] = !l[0];
        let base = auc(&s, &l).unwrap();
        let warped: Vec<f64> = s.iter().map(|v| v.powi(3) + 2.0 * v.exp()).collect();
        assert_eq!(auc(&warped, &l).unwrap(), base);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((auc(&neg, &l).unwrap() + base - 1.0).abs() < 1e-12);
    }
}

#[test]
fn kfold_partitions() {
    for k in 2..7 {
        let ids: Vec<String> = (0..23).map(|i| format!("s{i}")).collect();
        let f = kfold_split(&ids, k, 42).unwrap();
        assert_eq!(f.folds.len(), 23);
        let sizes = f.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<&str> = (0..k).flat_map(|i| f.members(i)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 23);
        let mut shuffled = ids.clone();
        shuffled.reverse();
        assert_eq!(kfold_split(&shuffled, k, 42).unwrap(), f);
    }
}

fn labels(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| vec![r.random_range(0.0..5.0), r.random_range(0.0..5.0)]).collect()
}

#[test]
fn probe_recovers_a_linear_relation() {
    let y = labels(30, 1);
    let x: Vec<Vec<f64>> = y.iter().map(|v| vec![v[0], v[1], 0.0, 0.0]).collect();
    let rep = feature_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert!(rep.mean_pcc > 0.99, "{}", rep.mean_pcc);
    assert_eq!(rep.predictions.len(), 30);
}

#[test]
fn probe_degenerate_cases() {
    let y = labels(20, 2);
    let same = vec![vec![1.0, 2.0, 3.0]; 20];
    assert!(matches!(feature_probe(&same, &y, &ProbeConfig::default()), Err(EvalError::ConstantInput)));
    let mut r = rng(3);
    let x: Vec<Vec<f64>> = (0..20).map(|_| random_vec(&mut r, 3)).collect();
    let rep = feature_probe(&x, &y, &ProbeConfig { epochs: 0, ..ProbeConfig::default() }).unwrap();
    assert!(rep.mean_pcc.is_finite());
    assert!(matches!(feature_probe(&[], &[], &ProbeConfig::default()), Err(EvalError::EmptyDataset)));
    assert!(matches!(
        feature_probe(&x[..6], &y[..6], &ProbeConfig::default()),
        Err(EvalError::TooFewSlides { .. })
    ));
}
