//! Independent reference implementations used by the integration tests.
//! They favour obviousness over speed and share no code with the library.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Partition as a set of sets, for order-free comparison.
pub fn canon<T: Ord + Clone>(p: &[Vec<T>]) -> BTreeSet<BTreeSet<T>> {
    p.iter().map(|b| b.iter().cloned().collect()).collect()
}

/// Round-simulating RAC: every round recomputes each centroid from its
/// members, finds each cluster's nearest neighbour (ties to the lowest id,
/// where a cluster's id is its smallest member) and merges the mutual pairs
/// above `lambda`.
pub fn brute_force_rac(rows: &[Vec<f64>], m: usize, lambda: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
    loop {
        let k = clusters.len();
        if k < 2 {
            return clusters;
        }
        let centroids: Vec<Vec<f64>> = clusters
            .iter()
            .map(|c| {
                let mut s = vec![0.0; m];
                for &r in c {
                    for t in 0..m {
                        s[t] += rows[r][t];
                    }
                }
                s.iter().map(|x| x / c.len() as f64).collect()
            })
            .collect();
        let id = |i: usize| *clusters[i].iter().min().unwrap();
        let mut nn = vec![(usize::MAX, f64::NEG_INFINITY); k];
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let s = naive_cos(&centroids[i], &centroids[j]);
                let (bj, bs) = nn[i];
                if s > bs || (s == bs && id(j) < id(bj)) {
                    nn[i] = (j, s);
                }
            }
        }
        let mut merged = vec![false; k];
        let mut next = Vec::new();
        for i in 0..k {
            let (j, s) = nn[i];
            if i < j && nn[j].0 == i && s > lambda {
                let mut c = clusters[i].clone();
                c.extend(&clusters[j]);
                c.sort_unstable();
                next.push(c);
                merged[i] = true;
                merged[j] = true;
            }
        }
        if next.is_empty() {
            return clusters;
        }
        for i in 0..k {
            if !merged[i] {
                next.push(clusters[i].clone());
            }
        }
        clusters = next;
    }
}

/// Mann-Whitney AUROC by comparing every positive with every negative.
pub fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn direct_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Pairwise (precision, recall, f1) by enumerating every document pair of
/// two label vectors.
pub fn enumerate_prf(pred: &[usize], gold: &[usize]) -> (f64, f64, f64) {
    let (mut tp, mut ps, mut gs) = (0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let p = pred[i] == pred[j];
            let g = gold[i] == gold[j];
            ps += p as u64;
            gs += g as u64;
            tp += (p && g) as u64;
        }
    }
    let precision = if ps == 0 { if gs == 0 { 1.0 } else { 0.0 } } else { tp as f64 / ps as f64 };
    let recall = if gs == 0 { if ps == 0 { 1.0 } else { 0.0 } } else { tp as f64 / gs as f64 };
    let f1 = if precision == 0.0 || recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

pub fn blocks(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out.into_iter().filter(|b| !b.is_empty()).collect()
}

/// Relational similarity by a double loop over ordered pairs.
pub fn brute_force_relsim(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in 0..x.len() {
        for t in 0..x.len() {
            if s != t {
                xs.push(naive_cos(&x[s], &x[t]));
                ys.push(naive_cos(&y[s], &y[t]));
            }
        }
    }
    direct_pearson(&xs, &ys)
}

/// Random orthogonal matrix (rows) by Gram-Schmidt.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &q {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for t in 0..d {
                v[t] -= p * b[t];
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.iter().map(|x| x / n).collect());
        }
    }
    q
}

pub fn apply(q: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Central-difference gradient, written out independently of the library.
pub fn central_difference(f: &dyn Fn(&[Vec<f64>]) -> f64, rows: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut g = vec![vec![0.0; rows[0].len()]; rows.len()];
    let mut w = rows.to_vec();
    for i in 0..rows.len() {
        for k in 0..rows[i].len() {
            w[i][k] = rows[i][k] + h;
            let up = f(&w);
            w[i][k] = rows[i][k] - h;
            let down = f(&w);
            w[i][k] = rows[i][k];
            g[i][k] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Largest |a - n| / max(|a|, |n|, floor) over all entries.
pub fn rel_err(a: &[Vec<f64>], n: &[Vec<f64>], floor: f64) -> f64 {
    let mut e: f64 = 0.0;
    for (ra, rn) in a.iter().zip(n) {
        for (x, y) in ra.iter().zip(rn) {
            e = e.max((x - y).abs() / x.abs().max(y.abs()).max(floor));
        }
    }
    e
}
