//! Seeded generators for planted clusterings and random loss batches.
//!
//! The planted generators check their own cosine margins: a generated set is
//! only returned if RAC at the suggested thresholds provably recovers the
//! planted groups, whatever the merge sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{kink_margin, LossBatch, LossPair, LossTarget};
use crate::model::{EmbeddingMatrix, LossConfig, SimilarityLabel};

/// Samples closer to an angle-objective kink than this are excluded from
/// gradient checks.
pub const KINK_MARGIN: f64 = 1e-3;

/// Bounds on centroid cosines for one layer of a planted clustering.
///
/// `intra_lower` bounds from below the cosine between centroids of any two
/// subsets of the same planted group; `inter_upper` bounds from above the
/// cosine between centroids of subsets of different groups. Both are taken
/// over groups that share a parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMargin {
    pub m: usize,
    pub lambda: f64,
    pub intra_lower: f64,
    pub inter_upper: f64,
}

impl LayerMargin {
    pub fn separates(&self) -> bool {
        self.inter_upper < self.lambda && self.lambda < self.intra_lower
    }
}

/// Computes [`LayerMargin`] for `groups` (lists of rows) that are siblings.
///
/// With every row norm in `[r_min, r_max]`, every same-group cosine at least
/// `c` and every cross-group dot at most `t`, a centroid of same-group rows
/// has squared norm at least `c r_min^2`, so subset-centroid cosines are at
/// least `c (r_min / r_max)^2` within a group and at most `t / (c r_min^2)`
/// across groups.
pub fn sibling_margin(matrix: &EmbeddingMatrix, groups: &[Vec<usize>], m: usize, lambda: f64) -> LayerMargin {
    let rows: Vec<usize> = groups.iter().flatten().copied().collect();
    let norms: Vec<f64> = rows.iter().map(|&r| linalg::norm(matrix.prefix(r, m))).collect();
    let r_min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let r_max = norms.iter().copied().fold(0.0, f64::max);
    let mut c = 1.0f64;
    let mut t = f64::NEG_INFINITY;
    for (gi, g) in groups.iter().enumerate() {
        for (k, &a) in g.iter().enumerate() {
            for &b in &g[k + 1..] {
                let cos = linalg::cosine(matrix.prefix(a, m), matrix.prefix(b, m)).unwrap_or(0.0);
                c = c.min(cos);
            }
            for h in &groups[gi + 1..] {
                for &b in h {
                    t = t.max(linalg::dot(matrix.prefix(a, m), matrix.prefix(b, m)));
                }
            }
        }
    }
    let c = c.max(0.0);
    let intra_lower = c * (r_min / r_max).powi(2);
    let inter_upper = if groups.len() < 2 {
        f64::NEG_INFINITY
    } else if c == 0.0 {
        f64::INFINITY
    } else {
        t.max(0.0) / (c * r_min * r_min)
    };
    LayerMargin { m, lambda, intra_lower, inter_upper }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `k` random orthonormal vectors of length `dim` (Gram-Schmidt).
fn orthonormal(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(k <= dim, "{k} orthonormal vectors do not fit in {dim} dimensions");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p = linalg::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if linalg::norm(&v) > 1e-6 {
            linalg::normalize_in_place(&mut v);
            basis.push(v);
        }
    }
    basis
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("doc{i:05}")).collect()
}

/// A flat planted clustering.
#[derive(Debug, Clone)]
pub struct PlantedPartition {
    pub matrix: EmbeddingMatrix,
    pub groups: Vec<Vec<usize>>,
    pub margin: LayerMargin,
}

/// `groups` orthonormal centres with `per_group` noisy copies each. Fails if
/// the margins do not separate at `lambda`.
pub fn planted_partition(
    seed: u64,
    groups: usize,
    per_group: usize,
    d: usize,
    noise: f64,
    lambda: f64,
) -> Result<PlantedPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = orthonormal(&mut rng, groups, d);
    let mut data = Vec::with_capacity(groups * per_group * d);
    for c in &centres {
        for _ in 0..per_group {
            data.extend(c.iter().map(|x| x + noise * gaussian(&mut rng)));
        }
    }
    let matrix = EmbeddingMatrix::new(d, data, ids(groups * per_group))?;
    let planted: Vec<Vec<usize>> = (0..groups).map(|g| (g * per_group..(g + 1) * per_group).collect()).collect();
    let margin = sibling_margin(&matrix, &planted, d, lambda);
    if !margin.separates() {
        return Err(Error::InvalidMatrix(format!("planted margins do not separate: {margin:?}")));
    }
    Ok(PlantedPartition { matrix, groups: planted, margin })
}

/// Shape of a planted three-layer hierarchy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyShape {
    pub themes: usize,
    pub topics: usize,
    pub stories: usize,
    pub docs: usize,
    pub d: usize,
    pub noise: f64,
}

impl Default for HierarchyShape {
    fn default() -> Self {
        Self { themes: 3, topics: 3, stories: 3, docs: 10, d: 16, noise: 0.02 }
    }
}

/// A planted hierarchy with its gold layers and verified margins.
#[derive(Debug, Clone)]
pub struct PlantedHierarchy {
    pub matrix: EmbeddingMatrix,
    /// Gold partitions, coarsest first.
    pub layers: Vec<Vec<Vec<usize>>>,
    pub lambdas: [f64; 3],
    pub margins: Vec<LayerMargin>,
}

/// Thresholds the hierarchy generator is built for.
pub const HIERARCHY_LAMBDAS: [f64; 3] = [0.5, 0.75, 0.75];

/// Themes differ in the first quarter of the dimensions, topics additionally
/// in the second quarter and stories in the second half. Sibling groups have
/// centroid cosine near 0 (themes) or 1/2 (topics, stories) before noise.
///
/// Returns the matrix and the gold partitions, coarsest first, without
/// checking that they are recoverable.
pub fn sample_hierarchy(seed: u64, shape: HierarchyShape) -> Result<(EmbeddingMatrix, Vec<Vec<Vec<usize>>>)> {
    let HierarchyShape { themes, topics, stories, docs, d, noise } = shape;
    if d == 0 || d % 4 != 0 || themes > d / 4 || topics > d / 4 || stories > d / 2 {
        return Err(Error::InvalidMatrix(format!("hierarchy {shape:?} does not fit in {d} dimensions")));
    }
    let (q, h) = (d / 4, d / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theme_vecs = orthonormal(&mut rng, themes, q);
    let mut data = Vec::new();
    let mut layers = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut row = 0;
    for t in &theme_vecs {
        let topic_vecs = orthonormal(&mut rng, topics, q);
        let mut theme_rows = Vec::new();
        for p in &topic_vecs {
            let story_vecs = orthonormal(&mut rng, stories, h);
            let mut topic_rows = Vec::new();
            for s in &story_vecs {
                let story_rows: Vec<usize> = (row..row + docs).collect();
                for _ in 0..docs {
                    let base = t.iter().chain(p).copied().chain(s.iter().map(|x| x * std::f64::consts::SQRT_2));
                    let v: Vec<f64> = base.map(|x| x + noise * gaussian(&mut rng)).collect();
                    data.extend(v);
                }
                row += docs;
                topic_rows.extend(&story_rows);
                layers[2].push(story_rows);
            }
            theme_rows.extend(&topic_rows);
            layers[1].push(topic_rows);
        }
        layers[0].push(theme_rows);
    }
    Ok((EmbeddingMatrix::new(d, data, ids(row))?, layers))
}

/// [`sample_hierarchy`] with every sibling group checked to separate at
/// [`HIERARCHY_LAMBDAS`].
pub fn planted_hierarchy(seed: u64, shape: HierarchyShape) -> Result<PlantedHierarchy> {
    let (matrix, layers) = sample_hierarchy(seed, shape)?;
    let d = shape.d;
    let all: Vec<usize> = (0..matrix.n()).collect();
    let ms = [d / 4, d / 2, d];
    let mut margins = Vec::new();
    for l in 0..3 {
        let parents = if l == 0 { vec![all.clone()] } else { layers[l - 1].clone() };
        for parent in &parents {
            let children: Vec<Vec<usize>> =
                layers[l].iter().filter(|g| parent.contains(&g[0])).cloned().collect();
            let margin = sibling_margin(&matrix, &children, ms[l], HIERARCHY_LAMBDAS[l]);
            if !margin.separates() {
                return Err(Error::InvalidMatrix(format!("layer {} margins do not separate: {margin:?}", l + 1)));
            }
            margins.push(margin);
        }
    }
    Ok(PlantedHierarchy { matrix, layers, lambdas: HIERARCHY_LAMBDAS, margins })
}

/// Random batch of `2 * docs` rows: two noisy views of `docs` documents,
/// paired as mutual positives, plus `docs` labelled pairs between
/// neighbouring documents.
pub fn random_loss_batch(seed: u64, docs: usize, d: usize, config: LossConfig) -> Result<LossBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first: Vec<Vec<f64>> = (0..docs).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let second: Vec<Vec<f64>> =
        first.iter().map(|r| r.iter().map(|x| x + rng.gen_range(-0.2..0.2)).collect()).collect();
    let pairs = (0..docs)
        .map(|k| {
            let label = SimilarityLabel::ALL[rng.gen_range(0..4)];
            LossPair::new(k, (k + 1) % docs, LossTarget::Label(label))
        })
        .collect();
    LossBatch::from_views(first, second, pairs, d, config)
}

/// First batch from the seed sequence `seed, seed + 1, ...` whose kink margin
/// at every prefix is at least [`KINK_MARGIN`]. Returns the batch and the
/// number of rejected samples.
pub fn kink_free_loss_batch(
    seed: u64,
    docs: usize,
    d: usize,
    prefixes: &[usize],
    config: LossConfig,
) -> Result<(LossBatch, usize)> {
    for skipped in 0..10_000 {
        let b = random_loss_batch(seed.wrapping_add(skipped as u64), docs, d, config)?;
        if kink_margin(&b, prefixes) >= KINK_MARGIN {
            return Ok((b, skipped));
        }
    }
    Err(Error::InvalidBatch("no kink-free sample found".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = orthonormal(&mut rng, 4, 6);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((linalg::dot(&b[i], &b[j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planted_partition_margins() {
        let p = planted_partition(1, 4, 10, 16, 0.01, 0.5).unwrap();
        assert_eq!(p.matrix.n(), 40);
        assert!(p.margin.intra_lower > 0.9 && p.margin.inter_upper < 0.2, "{:?}", p.margin);
        assert!(planted_partition(1, 4, 10, 16, 2.0, 0.5).is_err());
    }

    #[test]
    fn hierarchy_shape_and_margins() {
        let h = planted_hierarchy(7, HierarchyShape::default()).unwrap();
        assert_eq!(h.matrix.n(), 270);
        assert_eq!(h.layers.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 9, 27]);
        assert_eq!(h.margins.len(), 1 + 3 + 9);
        assert!(h.margins.iter().all(LayerMargin::separates));
    }

    #[test]
    fn hierarchy_rejects_bad_shapes() {
        let shape = HierarchyShape { themes: 5, ..Default::default() };
        assert!(planted_hierarchy(0, shape).is_err());
        assert!(planted_hierarchy(0, HierarchyShape { d: 10, ..Default::default() }).is_err());
    }

    #[test]
    fn kink_free_batches_clear_the_margin() {
        let (b, _) = kink_free_loss_batch(5, 4, 16, &[4, 8, 16], LossConfig::default()).unwrap();
        assert_eq!(b.rows().len(), 8);
        assert!(kink_margin(&b, &[4, 8, 16]) >= KINK_MARGIN);
    }
}
