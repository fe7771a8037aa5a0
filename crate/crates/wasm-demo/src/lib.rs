//! Browser bindings for three small interactive experiments. Each exported
//! function returns a flat `Float64Array`; the layouts are documented per
//! function and decoded by `www/index.html`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use mrlrac::loss::{self, LossBatch, LossPair, LossTarget};
use mrlrac::metrics::pairwise_prf;
use mrlrac::rac::{levelwise_rac, rac};
use mrlrac::synth::{sample_hierarchy, HierarchyShape};
use mrlrac::{EmbeddingMatrix, LossConfig, PrefixScheme, SimilarityLabel};

/// Points scattered around `groups` evenly spaced directions in the plane,
/// each at a random radius. Clustering uses cosine, so only the angle counts.
///
/// Layout: `[x, y, cluster]` per point, then the cluster count.
pub fn circle_clusters(seed: u64, n: usize, groups: usize, spread: f64, lambda: f64) -> Result<Vec<f64>, String> {
    if groups == 0 || n == 0 {
        return Err("need at least one point and one group".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let centre = (i % groups) as f64 * std::f64::consts::TAU / groups as f64;
        let a = centre + spread * rng.gen_range(-1.0..1.0);
        let r = rng.gen_range(0.35..1.0);
        points.push((r * a.cos(), r * a.sin()));
    }
    // padded to the four dimensions a prefix ladder needs
    let rows: Vec<Vec<f64>> = points.iter().map(|&(x, y)| vec![x, y, 0.0, 0.0]).collect();
    let matrix = EmbeddingMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..n).collect();
    let partition = rac(&matrix, &all, 4, lambda).map_err(|e| e.to_string())?;
    let mut label = vec![0usize; n];
    for (k, block) in partition.iter().enumerate() {
        for &i in block {
            label[i] = k;
        }
    }
    let mut out: Vec<f64> = points.iter().zip(&label).flat_map(|(&(x, y), &k)| [x, y, k as f64]).collect();
    out.push(partition.len() as f64);
    Ok(out)
}

/// Samples a 3 x 3 x 3 hierarchy at the given noise and rebuilds it.
///
/// Layout: F1 per layer, predicted cluster count per layer, gold cluster
/// count per layer.
pub fn planted_recovery(seed: u64, noise: f64, lambdas: [f64; 3]) -> Result<Vec<f64>, String> {
    let shape = HierarchyShape { noise, ..HierarchyShape::default() };
    let (matrix, gold) = sample_hierarchy(seed, shape).map_err(|e| e.to_string())?;
    let scheme = PrefixScheme::canonical(shape.d, lambdas).map_err(|e| e.to_string())?;
    let tree = levelwise_rac(&matrix, &scheme).map_err(|e| e.to_string())?;
    let mut f1 = Vec::new();
    for (l, g) in gold.iter().enumerate() {
        f1.push(pairwise_prf(&tree.partition(l), g).map_err(|e| e.to_string())?.f1);
    }
    let predicted = tree.layers.iter().map(|layer| layer.len() as f64);
    let counts = gold.iter().map(|g| g.len() as f64);
    Ok(f1.into_iter().chain(predicted).chain(counts).collect())
}

/// Loss components of one fixed random batch at `steps` temperatures spaced
/// log-uniformly between `tau_lo` and `tau_hi`.
///
/// Layout: `[tau, cos, contrastive, angle]` per step.
pub fn loss_curve(seed: u64, docs: usize, tau_lo: f64, tau_hi: f64, steps: usize) -> Result<Vec<f64>, String> {
    if !(tau_lo > 0.0 && tau_hi > tau_lo && steps >= 2 && docs >= 2) {
        return Err("need 0 < tau_lo < tau_hi, at least two steps and two documents".into());
    }
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first: Vec<Vec<f64>> = (0..docs).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let second: Vec<Vec<f64>> =
        first.iter().map(|r| r.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect()).collect();
    let pairs: Vec<LossPair> = (0..docs)
        .map(|k| {
            let label = SimilarityLabel::ALL[rng.gen_range(0..4)];
            LossPair::new(k, (k + 1) % docs, LossTarget::Label(label))
        })
        .collect();
    let mut out = Vec::with_capacity(4 * steps);
    for s in 0..steps {
        let tau = tau_lo * (tau_hi / tau_lo).powf(s as f64 / (steps - 1) as f64);
        let config = LossConfig::new(tau).map_err(|e| e.to_string())?;
        let batch = LossBatch::from_views(first.clone(), second.clone(), pairs.clone(), d, config)
            .map_err(|e| e.to_string())?;
        let parts = loss::AngieParts::compute(&batch).map_err(|e| e.to_string())?;
        out.extend([tau, parts.cos.value, parts.contrast.value, parts.angle.value]);
    }
    Ok(out)
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = circleClusters)]
pub fn circle_clusters_js(seed: u32, n: u32, groups: u32, spread: f64, lambda: f64) -> Result<Vec<f64>, JsError> {
    js(circle_clusters(seed as u64, n as usize, groups as usize, spread, lambda))
}

#[wasm_bindgen(js_name = plantedRecovery)]
pub fn planted_recovery_js(seed: u32, noise: f64, l1: f64, l2: f64, l3: f64) -> Result<Vec<f64>, JsError> {
    js(planted_recovery(seed as u64, noise, [l1, l2, l3]))
}

#[wasm_bindgen(js_name = lossCurve)]
pub fn loss_curve_js(seed: u32, docs: u32, tau_lo: f64, tau_hi: f64, steps: u32) -> Result<Vec<f64>, JsError> {
    js(loss_curve(seed as u64, docs as usize, tau_lo, tau_hi, steps as usize))
}
