//! Reciprocal agglomerative clustering (RAC) at a single prefix and the
//! level-wise driver that builds the theme / topic / story hierarchy.
//!
//! One round finds every pair of clusters that are each other's nearest
//! neighbour under centroid cosine, and merges the pairs whose similarity
//! exceeds the threshold. Neighbour ties are broken by the lowest cluster id,
//! and a merged cluster keeps the smaller of the two ids, so the whole process
//! is deterministic. Reciprocal pairs are disjoint, which makes the merges of
//! one round independent of the order in which they are applied.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{EmbeddingMatrix, PrefixScheme};

/// A cluster of matrix rows with its size-weighted centroid at the working
/// prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    members: Vec<usize>,
    centroid: Vec<f64>,
}

impl Cluster {
    pub fn singleton(id: usize, row: usize, values: &[f64]) -> Self {
        Self { id, members: vec![row], centroid: values.to_vec() }
    }

    /// Cluster of `members` with centroid at prefix `m` computed from `matrix`.
    pub fn from_members(id: usize, mut members: Vec<usize>, matrix: &EmbeddingMatrix, m: usize) -> Self {
        members.sort_unstable();
        let mut centroid = vec![0.0; m];
        for &r in &members {
            for (c, x) in centroid.iter_mut().zip(matrix.prefix(r, m)) {
                *c += x;
            }
        }
        let n = members.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= n);
        Self { id, members, centroid }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn centroid(&self) -> &[f64] {
        &self.centroid
    }

    /// Union of two clusters; the centroid is the size-weighted mean.
    pub fn merged(&self, other: &Cluster) -> Cluster {
        let (na, nb) = (self.size() as f64, other.size() as f64);
        let centroid = weighted_mean(&self.centroid, na, &other.centroid, nb);
        let mut members = self.members.clone();
        members.extend_from_slice(&other.members);
        members.sort_unstable();
        Cluster { id: self.id.min(other.id), members, centroid }
    }
}

fn weighted_mean(a: &[f64], na: f64, b: &[f64], nb: f64) -> Vec<f64> {
    let n = na + nb;
    a.iter().zip(b).map(|(x, y)| (na * x + nb * y) / n).collect()
}

/// Unit-norm copy of `v`. Every similarity in this module is a dot product of
/// two such vectors, so all code paths agree bit-for-bit.
fn unit(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    linalg::normalize_in_place(&mut u);
    u
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Neighbor {
    id: usize,
    sim: f64,
}

impl Neighbor {
    const NONE: Neighbor = Neighbor { id: usize::MAX, sim: f64::NEG_INFINITY };

    /// Total order: higher similarity first, then lower id.
    fn beats(&self, other: &Neighbor) -> bool {
        match self.sim.partial_cmp(&other.sim).unwrap_or(Ordering::Equal) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.id < other.id,
        }
    }
}

fn check_prefix(clusters: &[Cluster], m: usize) -> Result<()> {
    for c in clusters {
        if m == 0 || m > c.centroid.len() {
            return Err(Error::DimOutOfRange { m, d: c.centroid.len() });
        }
        if linalg::norm(&c.centroid[..m]) == 0.0 {
            return Err(Error::ZeroPrefixNorm { row: c.members[0], m });
        }
    }
    Ok(())
}

/// Nearest neighbour of cluster `k` by centroid cosine at prefix `m`.
/// Returns the index into `clusters` and the similarity.
pub fn nearest_neighbor(clusters: &[Cluster], k: usize, m: usize) -> Result<(usize, f64)> {
    if clusters.len() < 2 {
        return Err(Error::SingleCluster);
    }
    check_prefix(clusters, m)?;
    let units: Vec<Vec<f64>> = clusters.iter().map(|c| unit(&c.centroid[..m])).collect();
    let (idx, nb) = nearest_in(&units, clusters, k);
    Ok((idx, nb.sim))
}

fn nearest_in(units: &[Vec<f64>], clusters: &[Cluster], k: usize) -> (usize, Neighbor) {
    let mut best = Neighbor::NONE;
    let mut best_idx = usize::MAX;
    for (j, c) in clusters.iter().enumerate() {
        if j == k {
            continue;
        }
        let cand = Neighbor { id: c.id, sim: linalg::dot(&units[k], &units[j]) };
        if cand.beats(&best) {
            best = cand;
            best_idx = j;
        }
    }
    (best_idx, best)
}

/// Every pair of clusters that are each other's nearest neighbour, as
/// `(i, j)` indices into `clusters` with `i < j`.
pub fn find_rnn_pairs(clusters: &[Cluster], m: usize) -> Result<Vec<(usize, usize)>> {
    Ok(rnn_pairs_with_sim(clusters, m)?.into_iter().map(|(i, j, _)| (i, j)).collect())
}

fn rnn_pairs_with_sim(clusters: &[Cluster], m: usize) -> Result<Vec<(usize, usize, f64)>> {
    if clusters.len() < 2 {
        return Err(Error::SingleCluster);
    }
    check_prefix(clusters, m)?;
    let units: Vec<Vec<f64>> = clusters.iter().map(|c| unit(&c.centroid[..m])).collect();
    let nn: Vec<(usize, Neighbor)> = (0..clusters.len()).map(|k| nearest_in(&units, clusters, k)).collect();
    Ok((0..clusters.len())
        .filter_map(|i| {
            let (j, nb) = nn[i];
            (i < j && nn[j].0 == i).then_some((i, j, nb.sim))
        })
        .collect())
}

/// Merges the given disjoint index pairs, in the order given. Unmerged
/// clusters are carried over; the result is sorted by cluster id.
pub fn merge_pairs(clusters: &[Cluster], pairs: &[(usize, usize)]) -> Vec<Cluster> {
    let mut slots: Vec<Option<Cluster>> = clusters.iter().cloned().map(Some).collect();
    for &(i, j) in pairs {
        let a = slots[i].take().expect("pairs must be disjoint");
        let b = slots[j].take().expect("pairs must be disjoint");
        slots[i.min(j)] = Some(a.merged(&b));
    }
    let mut out: Vec<Cluster> = slots.into_iter().flatten().collect();
    out.sort_by_key(|c| c.id);
    out
}

/// One RAC round: merge every reciprocal pair whose centroid similarity is
/// strictly above `lambda`. Returns the new clusters and the merge count.
pub fn merge_round(clusters: &[Cluster], m: usize, lambda: f64) -> Result<(Vec<Cluster>, usize)> {
    if clusters.len() < 2 {
        return Ok((clusters.to_vec(), 0));
    }
    let pairs: Vec<(usize, usize)> =
        rnn_pairs_with_sim(clusters, m)?.into_iter().filter(|p| p.2 > lambda).map(|(i, j, _)| (i, j)).collect();
    Ok((merge_pairs(clusters, &pairs), pairs.len()))
}

/// How the engine finds nearest neighbours after each round. Every strategy
/// produces the same partition; they differ only in time and memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NnStrategy {
    /// Keep a dense similarity matrix while the cluster count is at most
    /// `cache_limit`; above it keep an exact top-`list_len` neighbour list per
    /// cluster and recompute dot products when a list runs dry.
    Auto { cache_limit: usize, list_len: usize },
    /// Track only the nearest neighbour and rescan with fresh dot products
    /// whenever it is invalidated.
    Recompute,
    /// Dense similarity matrix from the start.
    Dense,
}

impl Default for NnStrategy {
    fn default() -> Self {
        NnStrategy::Auto { cache_limit: 2048, list_len: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RacOptions {
    pub strategy: NnStrategy,
}

/// Dense similarity matrix over engine slots.
struct SimCache {
    k: usize,
    sims: Vec<f64>,
}

impl SimCache {
    fn get(&self, i: usize, j: usize) -> f64 {
        self.sims[i * self.k + j]
    }
}

/// Best-first list of at most `cap` neighbours under [`Neighbor::beats`].
///
/// Invariant kept by the engine: every active cluster not in the list ranks
/// below every entry of the list.
#[derive(Debug, Clone, Default)]
struct TopList {
    items: Vec<Neighbor>,
}

impl TopList {
    fn offer(&mut self, cand: Neighbor, cap: usize) {
        if self.items.len() == cap && !cand.beats(self.items.last().expect("cap > 0")) {
            return;
        }
        let pos = self.items.iter().position(|x| cand.beats(x)).unwrap_or(self.items.len());
        self.items.insert(pos, cand);
        self.items.truncate(cap);
    }

    /// Inserts a candidate only if it ranks above the current last entry, so
    /// unseen clusters below the list stay below it.
    fn offer_bounded(&mut self, cand: Neighbor, cap: usize) {
        match self.items.last() {
            Some(last) if cand.beats(last) => self.offer(cand, cap),
            _ => {}
        }
    }

    fn merge(mut self, other: TopList, cap: usize) -> TopList {
        for x in other.items {
            self.offer(x, cap);
        }
        self
    }

    fn first(&self) -> Neighbor {
        self.items.first().copied().unwrap_or(Neighbor::NONE)
    }
}

/// Incremental RAC state over slots `0..k`. Slot `s` initially holds the
/// cluster with id `s`; a merged cluster lives in the smaller slot.
struct Engine {
    m: usize,
    k: usize,
    members: Vec<Vec<usize>>,
    mean: Vec<f64>,
    unit: Vec<f64>,
    alive: Vec<bool>,
    active: Vec<usize>,
    lists: Vec<TopList>,
    list_len: usize,
    cache: Option<SimCache>,
    cache_limit: usize,
}

const BLOCK: usize = 64;

impl Engine {
    fn new(matrix: &EmbeddingMatrix, groups: Vec<Vec<usize>>, m: usize, strategy: NnStrategy) -> Result<Self> {
        if m == 0 || m > matrix.d() {
            return Err(Error::DimOutOfRange { m, d: matrix.d() });
        }
        let k = groups.len();
        let mut mean = vec![0.0; k * m];
        let mut unit = vec![0.0; k * m];
        for (s, g) in groups.iter().enumerate() {
            let c = Cluster::from_members(s, g.clone(), matrix, m);
            if linalg::norm(c.centroid()) == 0.0 {
                return Err(Error::ZeroPrefixNorm { row: g[0], m });
            }
            mean[s * m..(s + 1) * m].copy_from_slice(c.centroid());
            unit[s * m..(s + 1) * m].copy_from_slice(&self::unit(c.centroid()));
        }
        let (list_len, cache_limit) = match strategy {
            NnStrategy::Auto { cache_limit, list_len } => (list_len.max(1), cache_limit),
            NnStrategy::Recompute => (1, 0),
            NnStrategy::Dense => (1, usize::MAX),
        };
        Ok(Self {
            m,
            k,
            members: groups,
            mean,
            unit,
            alive: vec![true; k],
            active: (0..k).collect(),
            lists: vec![TopList::default(); k],
            list_len,
            cache: None,
            cache_limit,
        })
    }

    fn unit_of(&self, s: usize) -> &[f64] {
        &self.unit[s * self.m..(s + 1) * self.m]
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        linalg::dot(self.unit_of(i), self.unit_of(j))
    }

    fn sim(&self, i: usize, j: usize) -> f64 {
        match &self.cache {
            Some(c) => c.get(i, j),
            None => self.dot(i, j),
        }
    }

    /// Fills the dense cache, computing each unordered pair once.
    fn build_cache(&mut self) {
        let k = self.k;
        let mut sims = vec![0.0; k * k];
        let active = &self.active;
        let pos_rows: Vec<(usize, Vec<f64>)> = (0..active.len())
            .into_par_iter()
            .map(|a| {
                let i = active[a];
                (i, active[a + 1..].iter().map(|&j| self.dot(i, j)).collect())
            })
            .collect();
        for (a, (i, row)) in pos_rows.into_iter().enumerate() {
            for (&j, s) in active[a + 1..].iter().zip(row) {
                sims[i * k + j] = s;
                sims[j * k + i] = s;
            }
        }
        self.cache = Some(SimCache { k, sims });
    }

    /// Similarities of slot `i` to every active slot, in `active` order.
    fn row(&self, i: usize) -> Vec<f64> {
        self.active.iter().map(|&j| self.sim(i, j)).collect()
    }

    fn top_from_row(&self, i: usize, row: &[f64]) -> TopList {
        let mut list = TopList::default();
        for (&j, &s) in self.active.iter().zip(row) {
            if j != i {
                list.offer(Neighbor { id: j, sim: s }, self.list_len);
            }
        }
        list
    }

    fn rescan(&self, i: usize) -> TopList {
        let mut list = TopList::default();
        for &j in &self.active {
            if j != i {
                list.offer(Neighbor { id: j, sim: self.sim(i, j) }, self.list_len);
            }
        }
        list
    }

    /// Neighbour lists for every active slot. Each dot product is computed
    /// once and offered to both endpoints; partial lists are merged, which is
    /// order-independent because the lists are exact top sets under a total
    /// order.
    fn full_scan(&mut self) {
        if self.cache.is_some() {
            let lists: Vec<TopList> = self.active.par_iter().map(|&i| self.rescan(i)).collect();
            for (&i, l) in self.active.iter().zip(lists) {
                self.lists[i] = l;
            }
            return;
        }
        let active = &self.active;
        let na = active.len();
        let cap = self.list_len;
        let lists = (0..na.div_ceil(BLOCK))
            .into_par_iter()
            .fold(
                || vec![TopList::default(); na],
                |mut acc, b| {
                    let lo = b * BLOCK;
                    let hi = (lo + BLOCK).min(na);
                    for jlo in (lo..na).step_by(BLOCK) {
                        let jhi = (jlo + BLOCK).min(na);
                        for a in lo..hi {
                            let i = active[a];
                            let ui = self.unit_of(i);
                            for c in jlo.max(a + 1)..jhi {
                                let j = active[c];
                                let s = linalg::dot(ui, self.unit_of(j));
                                acc[a].offer(Neighbor { id: j, sim: s }, cap);
                                acc[c].offer(Neighbor { id: i, sim: s }, cap);
                            }
                        }
                    }
                    acc
                },
            )
            .reduce(
                || vec![TopList::default(); na],
                |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y, cap)).collect(),
            );
        for (&i, l) in active.iter().zip(lists) {
            self.lists[i] = l;
        }
    }

    fn nn(&self, s: usize) -> Neighbor {
        self.lists[s].first()
    }

    /// Runs one round. Returns the number of merges applied.
    fn round(&mut self, lambda: f64) -> usize {
        if self.active.len() < 2 {
            return 0;
        }
        let pairs: Vec<(usize, usize)> = self
            .active
            .iter()
            .filter_map(|&i| {
                let nb = self.nn(i);
                (nb.id != usize::MAX && i < nb.id && self.nn(nb.id).id == i && nb.sim > lambda).then_some((i, nb.id))
            })
            .collect();
        if pairs.is_empty() {
            return 0;
        }
        let m = self.m;
        let mut involved = vec![false; self.k];
        let mut changed = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            let (ni, nj) = (self.members[i].len() as f64, self.members[j].len() as f64);
            let merged = weighted_mean(&self.mean[i * m..(i + 1) * m], ni, &self.mean[j * m..(j + 1) * m], nj);
            let u = unit(&merged);
            self.mean[i * m..(i + 1) * m].copy_from_slice(&merged);
            self.unit[i * m..(i + 1) * m].copy_from_slice(&u);
            let moved = std::mem::take(&mut self.members[j]);
            self.members[i].extend(moved);
            self.members[i].sort_unstable();
            self.alive[j] = false;
            self.lists[j] = TopList::default();
            involved[i] = true;
            involved[j] = true;
            changed.push(i);
        }
        self.active.retain(|&s| self.alive[s]);

        if self.active.len() <= self.cache_limit {
            if self.cache.is_none() {
                self.build_cache();
            } else {
                self.refresh_cache(&changed);
            }
        }

        // drop neighbours that merged; lists that run dry are rescanned
        let cap = self.list_len;
        for &s in &self.active {
            if !involved[s] {
                self.lists[s].items.retain(|nb| !involved[nb.id]);
            }
        }

        let pos: Vec<usize> = {
            let mut p = vec![usize::MAX; self.k];
            for (a, &s) in self.active.iter().enumerate() {
                p[s] = a;
            }
            p
        };
        for chunk in changed.chunks(256) {
            let rows: Vec<Vec<f64>> = chunk.par_iter().map(|&c| self.row(c)).collect();
            let tops: Vec<TopList> = chunk.par_iter().zip(&rows).map(|(&c, r)| self.top_from_row(c, r)).collect();
            for (&c, t) in chunk.iter().zip(tops) {
                self.lists[c] = t;
            }
            let active = &self.active;
            let offers: Vec<(usize, TopList)> = active
                .par_iter()
                .filter(|&&s| !involved[s] && !self.lists[s].items.is_empty())
                .map(|&s| {
                    let mut l = self.lists[s].clone();
                    for (&c, r) in chunk.iter().zip(&rows) {
                        l.offer_bounded(Neighbor { id: c, sim: r[pos[s]] }, cap);
                    }
                    (s, l)
                })
                .collect();
            for (s, l) in offers {
                self.lists[s] = l;
            }
        }

        let dry: Vec<usize> = self.active.iter().copied().filter(|&s| self.lists[s].items.is_empty()).collect();
        let fresh: Vec<TopList> = dry.par_iter().map(|&s| self.rescan(s)).collect();
        for (s, l) in dry.into_iter().zip(fresh) {
            self.lists[s] = l;
        }
        pairs.len()
    }

    fn refresh_cache(&mut self, changed: &[usize]) {
        let Some(mut cache) = self.cache.take() else { return };
        let k = self.k;
        let rows: Vec<(usize, Vec<f64>)> =
            changed.par_iter().map(|&i| (i, self.active.iter().map(|&j| self.dot(i, j)).collect())).collect();
        for (i, row) in rows {
            for (&j, s) in self.active.iter().zip(row) {
                cache.sims[i * k + j] = s;
                cache.sims[j * k + i] = s;
            }
        }
        self.cache = Some(cache);
    }

    fn run(&mut self, lambda: f64) {
        if self.active.len() <= self.cache_limit {
            self.build_cache();
        }
        self.full_scan();
        while self.round(lambda) > 0 {}
        debug_assert!(self.max_similarity() <= lambda || self.active.len() < 2);
    }

    fn max_similarity(&self) -> f64 {
        self.active.iter().map(|&s| self.nn(s).sim).fold(f64::NEG_INFINITY, f64::max)
    }

    fn partition(&self) -> Vec<Vec<usize>> {
        self.active.iter().map(|&s| self.members[s].clone()).collect()
    }

    fn clusters(&self) -> Vec<Cluster> {
        let m = self.m;
        self.active
            .iter()
            .map(|&s| Cluster { id: s, members: self.members[s].clone(), centroid: self.mean[s * m..(s + 1) * m].to_vec() })
            .collect()
    }
}

fn sorted_rows(rows: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut rows = rows.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if let Some(&r) = rows.last() {
        if r >= n {
            return Err(Error::RowOutOfRange { row: r, n });
        }
    }
    Ok(rows)
}

/// RAC over `rows` of `matrix` at prefix `m`, starting from singletons.
/// Returns the final partition, each block sorted, blocks ordered by their
/// smallest row.
pub fn rac(matrix: &EmbeddingMatrix, rows: &[usize], m: usize, lambda: f64) -> Result<Vec<Vec<usize>>> {
    rac_with(matrix, rows, m, lambda, RacOptions::default())
}

pub fn rac_with(
    matrix: &EmbeddingMatrix,
    rows: &[usize],
    m: usize,
    lambda: f64,
    options: RacOptions,
) -> Result<Vec<Vec<usize>>> {
    let rows = sorted_rows(rows, matrix.n())?;
    let groups = rows.into_iter().map(|r| vec![r]).collect();
    Ok(rac_from_groups(matrix, groups, m, lambda, options)?.0)
}

/// RAC starting from an existing grouping. Group `g` gets cluster id `g`, so
/// callers should order groups by smallest member for a stable tie-break.
fn rac_from_groups(
    matrix: &EmbeddingMatrix,
    groups: Vec<Vec<usize>>,
    m: usize,
    lambda: f64,
    options: RacOptions,
) -> Result<(Vec<Vec<usize>>, Vec<Cluster>)> {
    if groups.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut engine = Engine::new(matrix, groups, m, options.strategy)?;
    engine.run(lambda);
    Ok((engine.partition(), engine.clusters()))
}

/// Largest centroid cosine between any two blocks of `partition` at prefix
/// `m`, by exhaustive comparison. `None` for fewer than two blocks.
pub fn max_centroid_similarity(matrix: &EmbeddingMatrix, partition: &[Vec<usize>], m: usize) -> Option<f64> {
    let units: Vec<Vec<f64>> = partition
        .iter()
        .enumerate()
        .map(|(i, p)| unit(Cluster::from_members(i, p.clone(), matrix, m).centroid()))
        .collect();
    let mut best: Option<f64> = None;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let s = linalg::dot(&units[i], &units[j]);
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
    }
    best
}

/// Order in which the levels of a scheme are combined into a hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierarchyMode {
    /// Cluster all rows at the first prefix, then re-cluster the rows of each
    /// cluster from singletons at the next prefix, and so on.
    #[default]
    TopDown,
    /// Cluster rows at the first prefix, then continue merging the resulting
    /// clusters with centroids recomputed at the next prefix. Each level
    /// coarsens the previous one, so the last level becomes the top layer.
    CentroidHandoff,
}

/// One cluster of a hierarchy layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCluster {
    pub id: usize,
    pub parent: Option<usize>,
    /// Sorted row indices.
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<(String, f64)>>,
}

/// Layers of nested partitions, coarsest first: themes, topics, stories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub n: usize,
    pub layers: Vec<Vec<TreeCluster>>,
}

impl ClusterTree {
    /// Builds a tree from nested partitions (coarsest first). Parents are
    /// inferred; ids are assigned per layer in order of smallest member.
    pub fn from_partitions(n: usize, partitions: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let mut layers: Vec<Vec<TreeCluster>> = Vec::with_capacity(partitions.len());
        for (l, mut part) in partitions.into_iter().enumerate() {
            for b in part.iter_mut() {
                b.sort_unstable();
            }
            part.sort_by_key(|b| b.first().copied());
            let owner = layers.last().map(|prev| owner_of(n, prev));
            let mut layer = Vec::with_capacity(part.len());
            for (id, members) in part.into_iter().enumerate() {
                let parent = match &owner {
                    Some(o) => {
                        let p = o[*members.first().ok_or_else(|| Error::InvalidTree("empty cluster".into()))?];
                        Some(p.ok_or_else(|| Error::InvalidTree(format!("layer {l} covers a row its parent layer does not")))?)
                    }
                    None => None,
                };
                layer.push(TreeCluster { id, parent, members, keywords: None });
            }
            layers.push(layer);
        }
        let tree = Self { n, layers };
        tree.validate()?;
        Ok(tree)
    }

    /// Checks that every layer partitions `0..n` and nests in its parent.
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let mut seen = vec![false; self.n];
            for c in layer {
                if c.members.is_empty() {
                    return Err(Error::InvalidTree(format!("layer {l} cluster {} is empty", c.id)));
                }
                for &r in &c.members {
                    if r >= self.n || seen[r] {
                        return Err(Error::InvalidTree(format!("layer {l} is not a partition at row {r}")));
                    }
                    seen[r] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::InvalidTree(format!("layer {l} does not cover every row")));
            }
            if l == 0 {
                if layer.iter().any(|c| c.parent.is_some()) {
                    return Err(Error::InvalidTree("top layer cluster has a parent".into()));
                }
                continue;
            }
            let prev = &self.layers[l - 1];
            let owner = owner_of(self.n, prev);
            for c in layer {
                let Some(p) = c.parent else {
                    return Err(Error::InvalidTree(format!("layer {l} cluster {} has no parent", c.id)));
                };
                if c.members.iter().any(|&r| owner[r] != Some(p)) {
                    return Err(Error::InvalidTree(format!("layer {l} cluster {} is not nested in {p}", c.id)));
                }
            }
        }
        Ok(())
    }

    /// Partition of layer `l` as member lists.
    pub fn partition(&self, l: usize) -> Vec<Vec<usize>> {
        self.layers[l].iter().map(|c| c.members.clone()).collect()
    }

    pub fn cluster(&self, layer: usize, id: usize) -> Option<&TreeCluster> {
        self.layers.get(layer)?.iter().find(|c| c.id == id)
    }

    /// Ids of the clusters in layer `layer + 1` whose parent is `id`.
    pub fn children(&self, layer: usize, id: usize) -> Vec<usize> {
        self.layers
            .get(layer + 1)
            .map(|next| next.iter().filter(|c| c.parent == Some(id)).map(|c| c.id).collect())
            .unwrap_or_default()
    }
}

fn owner_of(n: usize, layer: &[TreeCluster]) -> Vec<Option<usize>> {
    let mut owner = vec![None; n];
    for c in layer {
        for &r in &c.members {
            if r < n {
                owner[r] = Some(c.id);
            }
        }
    }
    owner
}

/// Level-wise RAC over every row of `matrix`.
pub fn levelwise_rac(matrix: &EmbeddingMatrix, scheme: &PrefixScheme) -> Result<ClusterTree> {
    levelwise_rac_with(matrix, scheme, HierarchyMode::TopDown, RacOptions::default())
}

pub fn levelwise_rac_with(
    matrix: &EmbeddingMatrix,
    scheme: &PrefixScheme,
    mode: HierarchyMode,
    options: RacOptions,
) -> Result<ClusterTree> {
    scheme.validate_for(matrix.d())?;
    let all: Vec<usize> = (0..matrix.n()).collect();
    let mut partitions: Vec<Vec<Vec<usize>>> = Vec::with_capacity(scheme.levels().len());
    match mode {
        HierarchyMode::TopDown => {
            let mut parents = vec![all];
            for level in scheme.levels() {
                let mut layer = Vec::new();
                for parent in &parents {
                    layer.extend(rac_with(matrix, parent, level.m, level.lambda, options)?);
                }
                layer.sort_by_key(|b| b[0]);
                parents = layer.clone();
                partitions.push(layer);
            }
        }
        HierarchyMode::CentroidHandoff => {
            let mut groups: Vec<Vec<usize>> = all.into_iter().map(|r| vec![r]).collect();
            for level in scheme.levels() {
                groups.sort_by_key(|b| b[0]);
                let (part, _) = rac_from_groups(matrix, groups, level.m, level.lambda, options)?;
                partitions.push(part.clone());
                groups = part;
            }
            partitions.reverse();
        }
    }
    ClusterTree::from_partitions(matrix.n(), partitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PrefixLevel, SimilarityLabel};

    fn matrix(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn singletons(m: &EmbeddingMatrix, p: usize) -> Vec<Cluster> {
        (0..m.n()).map(|i| Cluster::singleton(i, i, m.prefix(i, p))).collect()
    }

    #[test]
    fn two_clusters_are_mutual_neighbors() {
        let m = matrix(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let c = singletons(&m, 4);
        assert_eq!(nearest_neighbor(&c, 0, 4).unwrap().0, 1);
        assert_eq!(nearest_neighbor(&c, 1, 4).unwrap().0, 0);
        assert_eq!(find_rnn_pairs(&c, 4).unwrap(), vec![(0, 1)]);
        assert_eq!(nearest_neighbor(&c[..1], 0, 4), Err(Error::SingleCluster));
    }

    #[test]
    fn nearest_by_direct_cosine() {
        // c1 at cos 0.9 from c0, c2 at cos 0.5
        let s = |c: f64| vec![c, (1.0 - c * c).sqrt(), 0.0, 0.0];
        let m = matrix(&[vec![1.0, 0.0, 0.0, 0.0], s(0.5), s(0.9)]);
        let c = singletons(&m, 4);
        let (j, sim) = nearest_neighbor(&c, 0, 4).unwrap();
        assert_eq!(j, 2);
        assert!((sim - 0.9).abs() < 1e-12);
    }

    #[test]
    fn tie_goes_to_lower_id() {
        let m = matrix(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, -1.0, 0.0, 0.0]]);
        let c = singletons(&m, 4);
        assert_eq!(nearest_neighbor(&c, 0, 4).unwrap().0, 1);
    }

    #[test]
    fn two_tight_pairs() {
        let m = matrix(&[
            vec![1.0, 0.05, 0.0, 0.0],
            vec![1.0, -0.05, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.05],
            vec![0.0, 0.0, 1.0, -0.05],
        ]);
        assert_eq!(find_rnn_pairs(&singletons(&m, 4), 4).unwrap(), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn chain_gives_single_pair() {
        // cos(a,b) = 0.6, cos(b,c) = 0.9, cos(a,c) below both
        let a = vec![1.0, 0.0, 0.0, 0.0];
        let b = vec![0.6, 0.8, 0.0, 0.0];
        let theta_b = 0.8f64.atan2(0.6);
        let theta_c = theta_b + 0.9f64.acos();
        let c = vec![theta_c.cos(), theta_c.sin(), 0.0, 0.0];
        let m = matrix(&[a, b, c]);
        let cl = singletons(&m, 4);
        assert_eq!(nearest_neighbor(&cl, 0, 4).unwrap().0, 1);
        assert_eq!(nearest_neighbor(&cl, 1, 4).unwrap().0, 2);
        assert_eq!(nearest_neighbor(&cl, 2, 4).unwrap().0, 1);
        assert_eq!(find_rnn_pairs(&cl, 4).unwrap(), vec![(1, 2)]);
    }

    #[test]
    fn merge_round_examples() {
        let same = matrix(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]]);
        let (out, n) = merge_round(&singletons(&same, 4), 4, 0.5).unwrap();
        assert_eq!(n, 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].size(), 2);
        assert_eq!(out[0].centroid(), &[1.0, 2.0, 3.0, 4.0]);

        let orth = matrix(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let (out, n) = merge_round(&singletons(&orth, 4), 4, 0.5).unwrap();
        assert_eq!((out.len(), n), (2, 0));
    }

    #[test]
    fn merged_centroid_is_size_weighted() {
        let a = Cluster { id: 0, members: vec![0, 1, 2], centroid: vec![1.0, 0.0] };
        let b = Cluster { id: 3, members: vec![3], centroid: vec![0.0, 4.0] };
        let c = a.merged(&b);
        assert_eq!(c.id, 0);
        assert_eq!(c.size(), 4);
        assert_eq!(c.centroid(), &[0.75, 1.0]);
    }

    #[test]
    fn rac_single_row() {
        let m = matrix(&[vec![1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(rac(&m, &[0], 4, 0.5).unwrap(), vec![vec![0]]);
    }

    #[test]
    fn all_paths_agree_and_stop_below_threshold() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..8).map(|_| next()).collect()).collect();
        let m = matrix(&rows);
        let all: Vec<usize> = (0..60).collect();
        for lambda in [-0.2, 0.2, 0.5, 0.8] {
            let a = rac_with(&m, &all, 8, lambda, RacOptions { strategy: NnStrategy::Recompute }).unwrap();
            let b = rac_with(&m, &all, 8, lambda, RacOptions { strategy: NnStrategy::Dense }).unwrap();
            let c = rac_with(&m, &all, 8, lambda, RacOptions { strategy: NnStrategy::Auto { cache_limit: 20, list_len: 3 } }).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
            if let Some(s) = max_centroid_similarity(&m, &a, 8) {
                assert!(s <= lambda + 1e-12, "{s} > {lambda}");
            }
        }
    }

    #[test]
    fn levelwise_identical_rows_one_cluster_each_layer() {
        let m = matrix(&vec![vec![0.5, 1.0, -1.0, 2.0, 0.1, 0.2, 0.3, 0.4]; 5]);
        let scheme = PrefixScheme::canonical(8, [0.5, 0.5, 0.5]).unwrap();
        let t = levelwise_rac(&m, &scheme).unwrap();
        assert!(t.layers.iter().all(|l| l.len() == 1));
    }

    #[test]
    fn unreachable_threshold_gives_singletons() {
        let m = matrix(&vec![vec![0.5, 1.0, -1.0, 2.0, 0.1, 0.2, 0.3, 0.4]; 5]);
        let scheme = PrefixScheme::canonical(8, [1.0, 1.0, 1.0]).unwrap();
        let t = levelwise_rac(&m, &scheme).unwrap();
        assert!(t.layers.iter().all(|l| l.len() == 5));
    }

    #[test]
    fn centroid_handoff_layers_nest() {
        let rows: Vec<Vec<f64>> = (0..24).map(|i| (0..8).map(|k| ((i * 7 + k * 3) as f64).sin()).collect()).collect();
        let m = matrix(&rows);
        let scheme = PrefixScheme::new(vec![
            PrefixLevel { m: 2, lambda: 0.9, positive_from: SimilarityLabel::SomewhatDissimilar },
            PrefixLevel { m: 4, lambda: 0.5, positive_from: SimilarityLabel::SomewhatSimilar },
            PrefixLevel { m: 8, lambda: 0.2, positive_from: SimilarityLabel::VerySimilar },
        ])
        .unwrap();
        let t = levelwise_rac_with(&m, &scheme, HierarchyMode::CentroidHandoff, RacOptions::default()).unwrap();
        t.validate().unwrap();
        assert!(t.layers[0].len() <= t.layers[1].len());
        assert!(t.layers[1].len() <= t.layers[2].len());
    }

    #[test]
    fn tree_validation_catches_broken_nesting() {
        let mut t = ClusterTree::from_partitions(4, vec![vec![vec![0, 1], vec![2, 3]], vec![vec![0], vec![1], vec![2, 3]]]).unwrap();
        assert_eq!(t.children(0, 0), vec![0, 1]);
        t.layers[1][2].parent = Some(0);
        assert!(t.validate().is_err());
        assert!(ClusterTree::from_partitions(3, vec![vec![vec![0, 1]]]).is_err());
        assert!(ClusterTree::from_partitions(4, vec![vec![vec![0, 1], vec![2, 3]], vec![vec![0, 2], vec![1], vec![3]]]).is_err());
    }
}
