//! Evaluation: Pearson correlation, tie-aware AUROC, pairwise clustering
//! precision / recall / F1, relational similarity between two row-aligned
//! embedding sets, and threshold tuning.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ksum};
use crate::model::{prefix_cosine, EmbeddingMatrix, LabeledPair, SimilarityLabel};
use crate::rac;

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::ZeroVariance);
    }
    let n = xs.len() as f64;
    let mx = ksum(xs.iter().copied()) / n;
    let my = ksum(ys.iter().copied()) / n;
    let sxy = ksum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = ksum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let syy = ksum(ys.iter().map(|y| (y - my) * (y - my)));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // u counts half-wins as 1 and full wins as 2 so it stays integral
    let mut u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        u += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// The three ordinal cuts used to binarise pair labels for AUROC.
pub const AUROC_CUTS: [SimilarityLabel; 3] =
    [SimilarityLabel::SomewhatDissimilar, SimilarityLabel::SomewhatSimilar, SimilarityLabel::VerySimilar];

/// AUROC of prefix cosine at each cut (positives = label at or above the
/// cut). Pairs carrying continuous scores are ignored. A cut with a single
/// class maps to `None`.
pub fn auroc_at_levels(
    pairs: &[LabeledPair],
    matrix: &EmbeddingMatrix,
    m: usize,
) -> Result<BTreeMap<SimilarityLabel, Option<f64>>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for p in pairs {
        let Some(label) = p.target.label() else { continue };
        scores.push(pair_cosine(matrix, p, m)?);
        labels.push(label);
    }
    let mut out = BTreeMap::new();
    for cut in AUROC_CUTS {
        let bin: Vec<bool> = labels.iter().map(|&l| l >= cut).collect();
        let v = match auroc(&scores, &bin) {
            Ok(v) => Some(v),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        out.insert(cut, v);
    }
    Ok(out)
}

/// Prefix cosine of the two documents of a pair.
pub fn pair_cosine(matrix: &EmbeddingMatrix, pair: &LabeledPair, m: usize) -> Result<f64> {
    let a = matrix.index_of(&pair.id_a).ok_or_else(|| Error::UnknownDocumentId(vec![pair.id_a.clone()]))?;
    let b = matrix.index_of(&pair.id_b).ok_or_else(|| Error::UnknownDocumentId(vec![pair.id_b.clone()]))?;
    prefix_cosine(matrix, a, b, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From pair counts. With no predicted-same pairs precision is 1 when
    /// there are no gold-same pairs either and 0 otherwise; recall mirrors
    /// this. F1 is 0 whenever precision or recall is 0.
    pub fn from_counts(tp: u64, predicted: u64, gold: u64) -> Self {
        let precision = if predicted == 0 {
            if gold == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            if predicted == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / gold as f64
        };
        let f1 = if precision == 0.0 || recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn choose2(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Pairwise precision, recall and F1 of a predicted partition against a gold
/// partition of the same documents.
pub fn pairwise_prf<T: Eq + Hash + Clone>(predicted: &[Vec<T>], gold: &[Vec<T>]) -> Result<Prf> {
    let mut gold_of: HashMap<&T, usize> = HashMap::new();
    for (g, block) in gold.iter().enumerate() {
        for doc in block {
            if gold_of.insert(doc, g).is_some() {
                return Err(Error::MismatchedDocumentSets);
            }
        }
    }
    let mut seen = 0usize;
    let mut tp = 0u64;
    let mut predicted_same = 0u64;
    let mut check: HashMap<&T, ()> = HashMap::new();
    for block in predicted {
        let mut counts: HashMap<usize, u64> = HashMap::new();
        for doc in block {
            let g = *gold_of.get(doc).ok_or(Error::MismatchedDocumentSets)?;
            if check.insert(doc, ()).is_some() {
                return Err(Error::MismatchedDocumentSets);
            }
            *counts.entry(g).or_default() += 1;
            seen += 1;
        }
        predicted_same += choose2(block.len() as u64);
        tp += counts.values().map(|&c| choose2(c)).sum::<u64>();
    }
    if seen != gold_of.len() {
        return Err(Error::MismatchedDocumentSets);
    }
    let gold_same = gold.iter().map(|b| choose2(b.len() as u64)).sum();
    Ok(Prf::from_counts(tp, predicted_same, gold_same))
}

/// Pearson correlation between the intra-set cosine similarities of two
/// row-aligned embedding sets, over every ordered pair of distinct rows.
pub fn relational_similarity(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64> {
    if x.n() != y.n() {
        return Err(Error::LengthMismatch(x.n(), y.n()));
    }
    let n = x.n();
    if n < 3 {
        return Err(Error::TooFewSeeds(n));
    }
    let units = |m: &EmbeddingMatrix| -> Vec<Vec<f64>> {
        (0..m.n())
            .map(|i| {
                let mut r = m.row(i).to_vec();
                linalg::normalize_in_place(&mut r);
                r
            })
            .collect()
    };
    let (ux, uy) = (units(x), units(y));
    let cos_pair = |s: usize, t: usize| (linalg::dot(&ux[s], &ux[t]), linalg::dot(&uy[s], &uy[t]));
    // two passes over the implicit list, reduced per source row in order
    let count = (n * (n - 1)) as f64;
    let sums: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let it = (0..n).filter(|&t| t != s).map(|t| cos_pair(s, t));
            let (a, b): (Vec<f64>, Vec<f64>) = it.unzip();
            (ksum(a), ksum(b))
        })
        .collect();
    let mx = ksum(sums.iter().map(|p| p.0)) / count;
    let my = ksum(sums.iter().map(|p| p.1)) / count;
    let moments: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut acc = [linalg::CompensatedSum::new(); 3];
            for t in (0..n).filter(|&t| t != s) {
                let (a, b) = cos_pair(s, t);
                let (da, db) = (a - mx, b - my);
                acc[0].add(da * db);
                acc[1].add(da * da);
                acc[2].add(db * db);
            }
            [acc[0].value(), acc[1].value(), acc[2].value()]
        })
        .collect();
    let sxy = ksum(moments.iter().map(|m| m[0]));
    let sxx = ksum(moments.iter().map(|m| m[1]));
    let syy = ksum(moments.iter().map(|m| m[2]));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Inclusive arithmetic grid `lo, lo + step, ..., <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        let g = Self { lo, hi, step };
        g.values()?;
        Ok(g)
    }

    /// Grid points. Each is computed as `lo + i * step` to avoid drift.
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.hi >= self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::EmptyGrid);
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| self.lo + i as f64 * self.step).collect())
    }
}

/// Outcome of a threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub lambda: f64,
    pub f1: f64,
}

/// F1 of the rule "positive iff score > lambda" against binary labels.
pub fn threshold_f1(scores: &[f64], labels: &[bool], lambda: f64) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > lambda, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Picks the grid value with the highest F1; ties go to the smallest value.
pub fn best_threshold(scores: &[f64], labels: &[bool], grid: &Grid) -> Result<Tuned> {
    if !labels.iter().any(|&l| l) {
        return Err(Error::SingleClass);
    }
    let values = grid.values()?;
    let f1s: Vec<f64> = values.par_iter().map(|&lambda| threshold_f1(scores, labels, lambda)).collect();
    let mut best = Tuned { lambda: values[0], f1: f1s[0] };
    for (&lambda, &f1) in values.iter().zip(&f1s).skip(1) {
        if f1 > best.f1 {
            best = Tuned { lambda, f1 };
        }
    }
    Ok(best)
}

/// Ordinal-labelled pairs as (cosine at prefix `m`, label >= `cut`).
pub fn binarized_scores(
    matrix: &EmbeddingMatrix,
    pairs: &[LabeledPair],
    m: usize,
    cut: SimilarityLabel,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let Some(l) = p.target.label() else { continue };
        scores.push(pair_cosine(matrix, p, m)?);
        labels.push(l >= cut);
    }
    Ok((scores, labels))
}

/// Threshold search for level `level` (1, 2 or 3): labels are binarised with
/// that level's default cut and pairs classified as positive when their
/// prefix cosine exceeds the threshold.
pub fn tune_lambda(
    matrix: &EmbeddingMatrix,
    pairs: &[LabeledPair],
    m: usize,
    level: usize,
    grid: &Grid,
) -> Result<Tuned> {
    let cut = level_cut(level)?;
    grid.values()?;
    let (scores, labels) = binarized_scores(matrix, pairs, m, cut)?;
    best_threshold(&scores, &labels, grid)
}

pub fn level_cut(level: usize) -> Result<SimilarityLabel> {
    crate::model::DEFAULT_CUTS
        .get(level.wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::InvalidScheme(format!("level {level} is not 1, 2 or 3")))
}

/// Threshold search where each candidate is scored by running RAC over the
/// documents referenced by `pairs` and predicting a pair positive when both
/// documents land in the same cluster.
pub fn tune_lambda_by_clustering(
    matrix: &EmbeddingMatrix,
    pairs: &[LabeledPair],
    m: usize,
    level: usize,
    grid: &Grid,
) -> Result<Tuned> {
    let cut = level_cut(level)?;
    let values = grid.values()?;
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for p in pairs {
        let Some(l) = p.target.label() else { continue };
        let a = matrix.index_of(&p.id_a).ok_or_else(|| Error::UnknownDocumentId(vec![p.id_a.clone()]))?;
        let b = matrix.index_of(&p.id_b).ok_or_else(|| Error::UnknownDocumentId(vec![p.id_b.clone()]))?;
        idx.push((a, b));
        labels.push(l >= cut);
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::SingleClass);
    }
    let mut rows: Vec<usize> = idx.iter().flat_map(|&(a, b)| [a, b]).collect();
    rows.sort_unstable();
    rows.dedup();
    let mut best: Option<Tuned> = None;
    for lambda in values {
        let part = rac::rac(matrix, &rows, m, lambda)?;
        let mut block = vec![usize::MAX; matrix.n()];
        for (k, b) in part.iter().enumerate() {
            for &r in b {
                block[r] = k;
            }
        }
        // same cluster scores 1 against a threshold of 0.5
        let scores: Vec<f64> = idx.iter().map(|&(a, b)| if block[a] == block[b] { 1.0 } else { 0.0 }).collect();
        let f1 = threshold_f1(&scores, &labels, 0.5);
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(Tuned { lambda, f1 });
        }
    }
    best.ok_or(Error::EmptyGrid)
}

/// Pairwise clustering scores of one hierarchy layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPrf {
    pub layer: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Collected evaluation results. Undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub pearson: Option<f64>,
    /// Keyed by cut code: "SD", "SS", "VS".
    pub auroc: BTreeMap<String, Option<f64>>,
    pub pairwise: Vec<LayerPrf>,
    pub relsim: BTreeMap<String, Option<f64>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

impl EvalReport {
    /// True when every metric present is undefined.
    pub fn all_undefined(&self) -> bool {
        let values = std::iter::once(self.pearson)
            .chain(self.auroc.values().copied())
            .chain(self.pairwise.iter().flat_map(|l| [l.precision, l.recall, l.f1]))
            .chain(self.relsim.values().copied());
        values.into_iter().all(|v| v.is_none())
    }

    /// `metric,key,value` rows with six decimals; undefined values print `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        out.push_str(&format!("pearson,,{}\n", fmt_value(self.pearson)));
        for (k, v) in &self.auroc {
            out.push_str(&format!("auroc,>={k},{}\n", fmt_value(*v)));
        }
        for l in &self.pairwise {
            out.push_str(&format!("precision,layer{},{}\n", l.layer, fmt_value(l.precision)));
            out.push_str(&format!("recall,layer{},{}\n", l.layer, fmt_value(l.recall)));
            out.push_str(&format!("f1,layer{},{}\n", l.layer, fmt_value(l.f1)));
        }
        for (k, v) in &self.relsim {
            out.push_str(&format!("relsim,{k},{}\n", fmt_value(*v)));
        }
        out
    }

    /// Pretty JSON. Values are the six-decimal CSV strings read back, so
    /// both reports agree digit for digit.
    pub fn to_json(&self) -> String {
        let r = |v: Option<f64>| v.map(|x| format!("{x:.6}").parse::<f64>().expect("formatted float parses"));
        let rounded = EvalReport {
            pearson: r(self.pearson),
            auroc: self.auroc.iter().map(|(k, v)| (k.clone(), r(*v))).collect(),
            pairwise: self
                .pairwise
                .iter()
                .map(|l| LayerPrf { layer: l.layer, precision: r(l.precision), recall: r(l.recall), f1: r(l.f1) })
                .collect(),
            relsim: self.relsim.iter().map(|(k, v)| (k.clone(), r(*v))).collect(),
            warnings: self.warnings.clone(),
        };
        let mut s = serde_json::to_string_pretty(&rounded).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Pair-based report: Pearson between prefix cosine and the pair grades
/// (ordinal index or score) and AUROC at each cut. Undefined metrics are
/// recorded with a warning. Unknown document ids are an error.
pub fn evaluate_pairs(matrix: &EmbeddingMatrix, pairs: &[LabeledPair], m: usize) -> Result<EvalReport> {
    crate::model::validate_dataset(matrix, pairs)?;
    let mut report = EvalReport::default();
    let cos: Vec<f64> = pairs.iter().map(|p| pair_cosine(matrix, p, m)).collect::<Result<_>>()?;
    let grades: Vec<f64> = pairs.iter().map(|p| p.target.value()).collect();
    report.pearson = match pearson(&cos, &grades) {
        Ok(v) => Some(v),
        Err(e) => {
            report.warnings.push(format!("pearson undefined: {e}"));
            None
        }
    };
    for (cut, v) in auroc_at_levels(pairs, matrix, m)? {
        if v.is_none() {
            report.warnings.push(format!("auroc >={} undefined: only one class present", cut.code()));
        }
        report.auroc.insert(cut.code().to_string(), v);
    }
    Ok(report)
}

/// Pairwise P/R/F1 of every layer of `predicted` against the same layer of
/// `gold`, matched by document id. Layers beyond the shallower tree are
/// skipped with a warning.
pub fn evaluate_trees(
    gold: &rac::ClusterTree,
    gold_ids: &[String],
    predicted: &rac::ClusterTree,
    predicted_ids: &[String],
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let depth = gold.layers.len().min(predicted.layers.len());
    if gold.layers.len() != predicted.layers.len() {
        report.warnings.push(format!(
            "gold has {} layers, prediction has {}; comparing the first {depth}",
            gold.layers.len(),
            predicted.layers.len()
        ));
    }
    let named = |tree: &rac::ClusterTree, ids: &[String], l: usize| -> Vec<Vec<String>> {
        tree.layers[l].iter().map(|c| c.members.iter().map(|&r| ids[r].clone()).collect()).collect()
    };
    for l in 0..depth {
        let prf = pairwise_prf(&named(predicted, predicted_ids, l), &named(gold, gold_ids, l))?;
        report.pairwise.push(LayerPrf {
            layer: l + 1,
            precision: Some(prf.precision),
            recall: Some(prf.recall),
            f1: Some(prf.f1),
        });
    }
    Ok(report)
}
