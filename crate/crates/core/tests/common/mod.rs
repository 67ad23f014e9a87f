#![allow(dead_code)]

use isg_core::diff::Tensor;
use isg_core::dual_attn::FusionParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let mut off = 0;
    for (i, (&x, &n)) in idx.iter().zip(t.shape()).enumerate() {
        assert!(x < n, "index {i}");
        off = off * n + x;
    }
    t.data()[off]
}

/// Explicit loops over positions and channels.
pub fn local_oracle(f: &[f64], r: &Tensor, p: &FusionParams) -> Vec<f64> {
    let s = r.shape()[0];
    let d = f.len();
    let mut out = vec![0.0; s * s * d];
    for y in 0..s {
        for x in 0..s {
            let pos = y * s + x;
            let mut q = 0.0;
            for j in 0..d {
                q += at(&p.wq, &[pos, j]) * f[j];
            }
            let mut av = vec![0.0; d];
            for c in 0..d {
                let (mut k, mut v) = (0.0, 0.0);
                for j in 0..d {
                    k += at(r, &[y, x, j]) * at(&p.wk, &[j, c]);
                    v += at(r, &[y, x, j]) * at(&p.wv, &[j, c]);
                }
                av[c] = sigmoid(q * k) * v;
            }
            for c in 0..d {
                let mut o = 0.0;
                for j in 0..d {
                    o += av[j] * at(&p.wr, &[j, c]);
                }
                out[pos * d + c] = o;
            }
        }
    }
    out
}

pub fn global_oracle(f: &[f64], r: &Tensor, p: &FusionParams) -> Vec<f64> {
    let s = r.shape()[0];
    let d = f.len();
    let scores: Vec<f64> = (0..s * s)
        .map(|pos| (0..d).map(|j| at(&p.wz, &[pos, j]) * f[j]).sum())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let mut pooled = vec![0.0; d];
    for y in 0..s {
        for x in 0..s {
            let w = e[y * s + x] / total;
            for c in 0..d {
                let pv: f64 = (0..d).map(|j| at(r, &[y, x, j]) * at(&p.wp, &[j, c])).sum();
                pooled[c] += w * pv;
            }
        }
    }
    (0..d)
        .map(|c| (0..d).map(|j| pooled[j] * at(&p.wf, &[j, c])).sum())
        .collect()
}

pub fn random_case(seed: u64) -> (Vec<f64>, Tensor, FusionParams) {
    let mut r = rng(seed);
    let s = r.random_range(2..=4);
    let d = r.random_range(3..=8);
    let f: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let cube = Tensor::uniform(&[s, s, d], -1.0, 1.0, &mut r);
    let p = FusionParams::random(s, d, 0.7, &mut r);
    (f, cube, p)
}

/// Between-class variance from its definition, class means computed from
/// scratch for every candidate.
pub fn exhaustive_otsu(hist: &[u64; 256]) -> u8 {
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0] as u8;
    }
    let mut best = (0usize, -1.0f64);
    for t in 0..256 {
        let lower: Vec<usize> = (0..t).collect();
        let upper: Vec<usize> = (t..256).collect();
        let weight = |r: &[usize]| r.iter().map(|&i| hist[i] as f64).sum::<f64>();
        let (w0, w1) = (weight(&lower), weight(&upper));
        let var = if w0 == 0.0 || w1 == 0.0 {
            0.0
        } else {
            let mean = |r: &[usize], w: f64| r.iter().map(|&i| i as f64 * hist[i] as f64).sum::<f64>() / w;
            let d = mean(&lower, w0) - mean(&upper, w1);
            w0 / total * w1 / total * d * d
        };
        if var > best.1 {
            best = (t, var);
        }
    }
    best.0 as u8
}

/// Covariance over the product of standard deviations, written out directly.
pub fn pcc_direct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn auc_pairs(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            den += 1.0;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-3.0..3.0)).collect()
}

