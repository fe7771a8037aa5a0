//! Reference kernels for the ranking, contrastive and angle objectives and
//! their nested-prefix composite. Every kernel returns the loss value together
//! with the analytic gradient with respect to every row of the batch.
//!
//! A batch is a set of rows (embeddings) plus labelled pairs that index into
//! the rows. Only the first `prefix` components of each row take part; the
//! gradient is zero beyond the prefix.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum};
use crate::model::{LossConfig, PrefixScheme, SimilarityLabel};

/// Label attached to a pair inside a loss batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossTarget {
    Label(SimilarityLabel),
    /// Already binarised (or any real-valued grade).
    Binary(f64),
}

impl LossTarget {
    fn rank(&self) -> f64 {
        match *self {
            LossTarget::Label(l) => l.ordinal() as f64,
            LossTarget::Binary(y) => y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub a: usize,
    pub b: usize,
    pub target: LossTarget,
}

impl LossPair {
    pub fn new(a: usize, b: usize, target: LossTarget) -> Self {
        Self { a, b, target }
    }
}

/// How the per-component complex ratios are reduced to one angle difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleAggregation {
    /// Sum of absolute real and imaginary parts.
    #[default]
    SumAbs,
    /// `SumAbs` divided by the number of complex components.
    MeanAbs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    rows: Vec<Vec<f64>>,
    pairs: Vec<LossPair>,
    prefix: usize,
    tau: f64,
    positives: Vec<BTreeSet<usize>>,
    aggregation: AngleAggregation,
}

impl LossBatch {
    /// Builds a batch without positives. Use [`LossBatch::mark_positive`] or
    /// [`LossBatch::from_views`] before evaluating the contrastive term.
    pub fn new(rows: Vec<Vec<f64>>, pairs: Vec<LossPair>, prefix: usize, config: LossConfig) -> Result<Self> {
        LossConfig::new(config.tau)?;
        if prefix == 0 {
            return Err(Error::InvalidBatch("prefix length 0".into()));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() < prefix) {
            return Err(Error::InvalidBatch(format!("row {i} has {} components, prefix is {prefix}", r.len())));
        }
        if let Some(r) = rows.iter().flatten().find(|x| !x.is_finite()) {
            return Err(Error::InvalidBatch(format!("non-finite value {r}")));
        }
        for (k, p) in pairs.iter().enumerate() {
            if p.a >= rows.len() || p.b >= rows.len() {
                return Err(Error::InvalidBatch(format!("pair {k} indexes past {} rows", rows.len())));
            }
        }
        let positives = vec![BTreeSet::new(); rows.len()];
        Ok(Self { rows, pairs, prefix, tau: config.tau, positives, aggregation: AngleAggregation::default() })
    }

    /// Two encodings of the same documents: row `i` of `first` and row `i` of
    /// `second` become mutual positives. Pairs index the first view.
    pub fn from_views(
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        pairs: Vec<LossPair>,
        prefix: usize,
        config: LossConfig,
    ) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::LengthMismatch(first.len(), second.len()));
        }
        let n = first.len();
        let mut rows = first;
        rows.extend(second);
        let mut batch = Self::new(rows, pairs, prefix, config)?;
        for i in 0..n {
            batch.mark_positive(i, i + n)?;
        }
        Ok(batch)
    }

    /// Marks rows `i` and `j` as mutual positives.
    pub fn mark_positive(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.rows.len();
        if i >= n || j >= n {
            return Err(Error::RowOutOfRange { row: i.max(j), n });
        }
        if i == j {
            return Err(Error::InvalidBatch(format!("row {i} cannot be its own positive")));
        }
        self.positives[i].insert(j);
        self.positives[j].insert(i);
        Ok(())
    }

    pub fn with_aggregation(mut self, aggregation: AngleAggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    /// Same batch at a different prefix length.
    pub fn with_prefix(&self, prefix: usize) -> Result<Self> {
        if prefix == 0 || self.rows.iter().any(|r| r.len() < prefix) {
            return Err(Error::InvalidBatch(format!("prefix {prefix} exceeds row length")));
        }
        Ok(Self { prefix, ..self.clone() })
    }

    /// Same batch with different rows of the same shape.
    pub fn with_rows(&self, rows: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(rows.len(), self.rows.len());
        Self { rows, ..self.clone() }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn pairs(&self) -> &[LossPair] {
        &self.pairs
    }

    pub fn prefix(&self) -> usize {
        self.prefix
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn positives(&self, row: usize) -> &BTreeSet<usize> {
        &self.positives[row]
    }

    pub fn aggregation(&self) -> AngleAggregation {
        self.aggregation
    }

    fn zero_grad(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| vec![0.0; r.len()]).collect()
    }

    fn slice(&self, row: usize) -> &[f64] {
        &self.rows[row][..self.prefix]
    }

    fn check_nonzero(&self, row: usize) -> Result<()> {
        if linalg::norm(self.slice(row)) == 0.0 {
            return Err(Error::ZeroPrefixNorm { row, m: self.prefix });
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to every input row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

impl LossResult {
    fn zeros_like(batch: &LossBatch) -> Self {
        Self { value: 0.0, grad: batch.zero_grad() }
    }

    /// Element-wise accumulation of another result of the same shape.
    pub fn accumulate(&mut self, other: &LossResult) {
        self.value += other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            for (x, y) in g.iter_mut().zip(o) {
                *x += y;
            }
        }
    }
}

/// `log(1 + sum_{p,q : rank_p > rank_q} exp((x_q - x_p) / tau))` together with
/// its derivative with respect to each `x`.
fn ranking_softplus(x: &[f64], ranks: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let n = x.len();
    let mut terms = Vec::new();
    for p in 0..n {
        for q in 0..n {
            if ranks[p] > ranks[q] {
                terms.push((p, q, (x[q] - x[p]) / tau));
            }
        }
    }
    let mut dx = vec![0.0; n];
    if terms.is_empty() {
        return (0.0, dx);
    }
    let shift = terms.iter().map(|t| t.2).fold(0.0f64, f64::max);
    let mut denom = CompensatedSum::new();
    denom.add((-shift).exp());
    for t in &terms {
        denom.add((t.2 - shift).exp());
    }
    let denom = denom.value();
    let value = shift + denom.ln();
    for &(p, q, z) in &terms {
        let w = (z - shift).exp() / denom / tau;
        dx[q] += w;
        dx[p] -= w;
    }
    (value, dx)
}

fn check_pairs(batch: &LossBatch) -> Result<()> {
    if batch.pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for p in &batch.pairs {
        batch.check_nonzero(p.a)?;
        batch.check_nonzero(p.b)?;
    }
    Ok(())
}

/// Cosine ranking objective over every pair of pairs whose labels differ.
pub fn cos_objective(batch: &LossBatch) -> Result<LossResult> {
    check_pairs(batch)?;
    let cos: Vec<f64> = batch
        .pairs
        .iter()
        .map(|p| linalg::dot(batch.slice(p.a), batch.slice(p.b)) / (linalg::norm(batch.slice(p.a)) * linalg::norm(batch.slice(p.b))))
        .collect();
    let ranks: Vec<f64> = batch.pairs.iter().map(|p| p.target.rank()).collect();
    let (value, dcos) = ranking_softplus(&cos, &ranks, batch.tau);
    let mut out = LossResult { value, grad: batch.zero_grad() };
    for (p, &w) in batch.pairs.iter().zip(&dcos) {
        if w != 0.0 {
            add_cosine_grad(batch, &mut out.grad, p.a, p.b, w);
        }
    }
    Ok(out)
}

fn add_cosine_grad(batch: &LossBatch, grad: &mut [Vec<f64>], a: usize, b: usize, w: f64) {
    let m = batch.prefix;
    let mut ga = vec![0.0; m];
    let mut gb = vec![0.0; m];
    linalg::cosine_grad_into(batch.slice(a), batch.slice(b), w, &mut ga, &mut gb);
    for k in 0..m {
        grad[a][k] += ga[k];
        grad[b][k] += gb[k];
    }
}

/// In-batch contrastive objective. Every row is an anchor; its positives come
/// from the batch's positive map and the denominator runs over every other
/// row.
pub fn contrastive_objective(batch: &LossBatch) -> Result<LossResult> {
    let n = batch.rows.len();
    if n < 2 {
        return Err(Error::EmptyBatch);
    }
    if let Some(i) = (0..n).find(|&i| batch.positives[i].is_empty()) {
        return Err(Error::AnchorWithoutPositive(i));
    }
    for i in 0..n {
        batch.check_nonzero(i)?;
    }
    let norms: Vec<f64> = (0..n).map(|i| linalg::norm(batch.slice(i))).collect();
    let cos = |i: usize, j: usize| linalg::dot(batch.slice(i), batch.slice(j)) / (norms[i] * norms[j]);
    let tau = batch.tau;
    let mut total = CompensatedSum::new();
    let mut out = LossResult::zeros_like(batch);
    for i in 0..n {
        let logits: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, cos(i, j) / tau)).collect();
        let shift = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let all: f64 = logits.iter().map(|l| (l.1 - shift).exp()).collect::<CompensatedSum>().value();
        let pos: f64 = logits
            .iter()
            .filter(|l| batch.positives[i].contains(&l.0))
            .map(|l| (l.1 - shift).exp())
            .collect::<CompensatedSum>()
            .value();
        total.add(all.ln() - pos.ln());
        for &(j, l) in &logits {
            let e = (l - shift).exp();
            let mut w = e / all;
            if batch.positives[i].contains(&j) {
                w -= e / pos;
            }
            add_cosine_grad(batch, &mut out.grad, i, j, w / tau);
        }
    }
    out.value = total.value();
    Ok(out)
}

/// Raw real and imaginary parts of the element-wise complex ratio before
/// normalisation, plus the normaliser `1 / (|u| |v|)`.
fn complex_parts(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let h = u.len() / 2;
    let (a, b) = u.split_at(h);
    let (c, d) = v.split_at(h);
    let re: Vec<f64> = (0..h).map(|k| a[k] * c[k] + b[k] * d[k]).collect();
    let im: Vec<f64> = (0..h).map(|k| b[k] * c[k] - a[k] * d[k]).collect();
    (re, im, 1.0 / (linalg::norm(u) * linalg::norm(v)))
}

fn aggregation_scale(agg: AngleAggregation, m: usize) -> f64 {
    match agg {
        AngleAggregation::SumAbs => 1.0,
        AngleAggregation::MeanAbs => 2.0 / m as f64,
    }
}

/// Angle difference of the first `m` components of `u` and `v` in complex
/// space.
///
/// The prefix is split into real (first half) and imaginary (second half)
/// parts. The element-wise ratio `u_k / v_k` is formed with the whole-slice
/// norm `|v|^2` as denominator and rescaled by `|v| / |u|`; the result is the
/// sum of absolute real and imaginary parts, so `angle_delta(u, k u) = 1` for
/// any `k > 0`.
pub fn angle_delta(u: &[f64], v: &[f64], m: usize) -> Result<f64> {
    angle_delta_with(u, v, m, AngleAggregation::SumAbs)
}

pub fn angle_delta_with(u: &[f64], v: &[f64], m: usize, agg: AngleAggregation) -> Result<f64> {
    if m > u.len() || m > v.len() || m == 0 {
        return Err(Error::DimOutOfRange { m, d: u.len().min(v.len()) });
    }
    if !m.is_multiple_of(2) {
        return Err(Error::OddPrefix(m));
    }
    let (u, v) = (&u[..m], &v[..m]);
    if linalg::norm(u) == 0.0 {
        return Err(Error::ZeroPrefixNorm { row: 0, m });
    }
    if linalg::norm(v) == 0.0 {
        return Err(Error::ZeroPrefixNorm { row: 1, m });
    }
    let (re, im, scale) = complex_parts(u, v);
    let s: f64 = re.iter().chain(&im).map(|x| x.abs()).collect::<CompensatedSum>().value();
    Ok(s * scale * aggregation_scale(agg, m))
}

/// Gradient of the angle difference, accumulated with weight `w`.
fn angle_delta_grad_into(u: &[f64], v: &[f64], w: f64, agg: AngleAggregation, gu: &mut [f64], gv: &mut [f64]) -> f64 {
    let m = u.len();
    let h = m / 2;
    let (a, b) = u.split_at(h);
    let (c, d) = v.split_at(h);
    let (re, im, scale) = complex_parts(u, v);
    let agg_scale = aggregation_scale(agg, m);
    let s: f64 = re.iter().chain(&im).map(|x| x.abs()).collect::<CompensatedSum>().value();
    let delta = s * scale * agg_scale;
    let nu2 = linalg::dot(u, u);
    let nv2 = linalg::dot(v, v);
    // d(delta) = scale * agg * dS - delta * (u / |u|^2 du + v / |v|^2 dv)
    let f = w * scale * agg_scale;
    for k in 0..h {
        let sr = sign(re[k]);
        let si = sign(im[k]);
        gu[k] += f * (sr * c[k] - si * d[k]);
        gu[h + k] += f * (sr * d[k] + si * c[k]);
        gv[k] += f * (sr * a[k] + si * b[k]);
        gv[h + k] += f * (sr * b[k] - si * a[k]);
    }
    for k in 0..m {
        gu[k] -= w * delta * u[k] / nu2;
        gv[k] -= w * delta * v[k] / nv2;
    }
    delta
}

/// Sign with `sign(0) = 0`, the subgradient used at the `|.|` kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Angle ranking objective: like [`cos_objective`] with the negated angle
/// difference as the score.
pub fn angle_objective(batch: &LossBatch) -> Result<LossResult> {
    if !batch.prefix.is_multiple_of(2) {
        return Err(Error::OddPrefix(batch.prefix));
    }
    check_pairs(batch)?;
    let agg = batch.aggregation;
    let neg_delta: Vec<f64> = batch
        .pairs
        .iter()
        .map(|p| angle_delta_with(batch.slice(p.a), batch.slice(p.b), batch.prefix, agg).map(|x| -x))
        .collect::<Result<_>>()?;
    let ranks: Vec<f64> = batch.pairs.iter().map(|p| p.target.rank()).collect();
    let (value, dscore) = ranking_softplus(&neg_delta, &ranks, batch.tau);
    let mut out = LossResult { value, grad: batch.zero_grad() };
    let m = batch.prefix;
    for (p, &w) in batch.pairs.iter().zip(&dscore) {
        if w == 0.0 {
            continue;
        }
        let mut gu = vec![0.0; m];
        let mut gv = vec![0.0; m];
        angle_delta_grad_into(batch.slice(p.a), batch.slice(p.b), -w, agg, &mut gu, &mut gv);
        for k in 0..m {
            out.grad[p.a][k] += gu[k];
            out.grad[p.b][k] += gv[k];
        }
    }
    Ok(out)
}

/// The three components of the combined objective, kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct AngieParts {
    pub cos: LossResult,
    pub contrast: LossResult,
    pub angle: LossResult,
}

impl AngieParts {
    pub fn compute(batch: &LossBatch) -> Result<Self> {
        Ok(Self {
            cos: cos_objective(batch)?,
            contrast: contrastive_objective(batch)?,
            angle: angle_objective(batch)?,
        })
    }

    pub fn total(&self) -> LossResult {
        let mut out = self.cos.clone();
        out.accumulate(&self.contrast);
        out.accumulate(&self.angle);
        out
    }
}

/// Sum of the cosine, contrastive and angle objectives.
pub fn angie_loss(batch: &LossBatch) -> Result<LossResult> {
    Ok(AngieParts::compute(batch)?.total())
}

/// Per-level combined losses of the nested objective. Level `l` evaluates
/// [`angie_loss`] at prefix `m_l` with labels binarised by that level's cut.
pub fn mrl_loss_levels(batch: &LossBatch, scheme: &PrefixScheme) -> Result<Vec<LossResult>> {
    let full = scheme.full_dim();
    if let Some((i, r)) = batch.rows.iter().enumerate().find(|(_, r)| r.len() != full) {
        return Err(Error::InvalidBatch(format!("row {i} has {} components, scheme expects {full}", r.len())));
    }
    scheme
        .levels()
        .iter()
        .map(|level| {
            let mut view = batch.with_prefix(level.m)?;
            for (k, p) in view.pairs.iter_mut().enumerate() {
                let LossTarget::Label(l) = p.target else {
                    return Err(Error::NonOrdinalLabel(k));
                };
                p.target = LossTarget::Binary(level.binarize(l));
            }
            angie_loss(&view)
        })
        .collect()
}

/// Nested-prefix objective: the sum over levels of [`mrl_loss_levels`].
pub fn mrl_loss(batch: &LossBatch, scheme: &PrefixScheme) -> Result<LossResult> {
    let mut out = LossResult::zeros_like(batch);
    for level in mrl_loss_levels(batch, scheme)? {
        out.accumulate(&level);
    }
    Ok(out)
}

/// Central-difference gradient of `loss` at `rows`.
pub fn finite_difference_grad<F>(loss: F, rows: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    assert!(step > 0.0, "step must be positive");
    let mut work = rows.to_vec();
    let mut grad: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for i in 0..rows.len() {
        for k in 0..rows[i].len() {
            let x = rows[i][k];
            work[i][k] = x + step;
            let up = loss(&work);
            work[i][k] = x - step;
            let down = loss(&work);
            work[i][k] = x;
            grad[i][k] = (up - down) / (2.0 * step);
        }
    }
    grad
}

/// Smallest magnitude of any normalised real or imaginary part over every
/// pair at the given prefixes. Samples with a small value sit near a kink of
/// the angle objective, where finite differences are not meaningful.
pub fn kink_margin(batch: &LossBatch, prefixes: &[usize]) -> f64 {
    let mut margin = f64::INFINITY;
    for &m in prefixes {
        for p in &batch.pairs {
            let (re, im, scale) = complex_parts(&batch.rows[p.a][..m], &batch.rows[p.b][..m]);
            for x in re.iter().chain(&im) {
                margin = margin.min(x.abs() * scale);
            }
        }
    }
    margin
}

/// Largest element-wise relative error between two gradients. Entries where
/// both magnitudes are below `floor` are compared relative to `floor`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
