//! Domain types shared by the loss kernels, the clustering driver and the
//! evaluation code.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Four-grade ordinal similarity of a document pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SimilarityLabel {
    #[serde(rename = "VD", alias = "Very Dissimilar")]
    VeryDissimilar = 0,
    #[serde(rename = "SD", alias = "Somewhat Dissimilar")]
    SomewhatDissimilar = 1,
    #[serde(rename = "SS", alias = "Somewhat Similar")]
    SomewhatSimilar = 2,
    #[serde(rename = "VS", alias = "Very Similar")]
    VerySimilar = 3,
}

impl SimilarityLabel {
    pub const ALL: [SimilarityLabel; 4] = [
        SimilarityLabel::VeryDissimilar,
        SimilarityLabel::SomewhatDissimilar,
        SimilarityLabel::SomewhatSimilar,
        SimilarityLabel::VerySimilar,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Two-letter code used in pair files.
    pub fn code(self) -> &'static str {
        match self {
            SimilarityLabel::VeryDissimilar => "VD",
            SimilarityLabel::SomewhatDissimilar => "SD",
            SimilarityLabel::SomewhatSimilar => "SS",
            SimilarityLabel::VerySimilar => "VS",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityLabel::VeryDissimilar => "Very Dissimilar",
            SimilarityLabel::SomewhatDissimilar => "Somewhat Dissimilar",
            SimilarityLabel::SomewhatSimilar => "Somewhat Similar",
            SimilarityLabel::VerySimilar => "Very Similar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.code() == s || l.name() == s)
    }
}

impl fmt::Display for SimilarityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense row-major matrix of document embeddings with an id per row.
///
/// Values are held in f64 regardless of the storage precision on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    lang: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    pub fn new(d: usize, data: Vec<f64>, ids: Vec<String>) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::InvalidMatrix(format!(
                "dimension {d} must be a positive multiple of 4"
            )));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::InvalidMatrix(format!(
                "{} values do not fill rows of width {d}",
                data.len()
            )));
        }
        let n = data.len() / d;
        if ids.len() != n {
            return Err(Error::InvalidMatrix(format!("{} ids for {n} rows", ids.len())));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        for (r, row) in data.chunks_exact(d).enumerate() {
            if row.iter().all(|&x| x == 0.0) {
                return Err(Error::InvalidMatrix(format!("row {r} ({}) is all zeros", ids[r])));
            }
        }
        let mut index = HashMap::with_capacity(n);
        for (r, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), r).is_some() {
                return Err(Error::InvalidMatrix(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { n, d, data, ids, index, lang: None })
    }

    /// Builds a matrix from rows, naming them `"0"`, `"1"`, ...
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(d, rows.concat(), ids)
    }

    pub fn with_lang(mut self, lang: Vec<String>) -> Result<Self> {
        if lang.len() != self.n {
            return Err(Error::InvalidMatrix(format!("{} language tags for {} rows", lang.len(), self.n)));
        }
        self.lang = Some(lang);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn lang(&self) -> Option<&[String]> {
        self.lang.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// First `m` components of row `i`.
    pub fn prefix(&self, i: usize, m: usize) -> &[f64] {
        &self.row(i)[..m]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::RowOutOfRange { row: i, n: self.n });
        }
        Ok(())
    }
}

/// Cosine similarity of the first `m` components of rows `i` and `j`, each
/// prefix renormalised independently.
pub fn prefix_cosine(matrix: &EmbeddingMatrix, i: usize, j: usize, m: usize) -> Result<f64> {
    if m == 0 || m > matrix.d() {
        return Err(Error::DimOutOfRange { m, d: matrix.d() });
    }
    matrix.check_row(i)?;
    matrix.check_row(j)?;
    let a = matrix.prefix(i, m);
    let b = matrix.prefix(j, m);
    if linalg::norm(a) == 0.0 {
        return Err(Error::ZeroPrefixNorm { row: i, m });
    }
    if linalg::norm(b) == 0.0 {
        return Err(Error::ZeroPrefixNorm { row: j, m });
    }
    Ok(linalg::cosine(a, b).expect("norms checked"))
}

/// One rung of the nested-dimension ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixLevel {
    /// Prefix length.
    pub m: usize,
    /// Merge threshold on centroid cosine.
    pub lambda: f64,
    /// Smallest label treated as a positive at this level.
    pub positive_from: SimilarityLabel,
}

impl PrefixLevel {
    pub fn binarize(&self, label: SimilarityLabel) -> f64 {
        if label >= self.positive_from {
            1.0
        } else {
            0.0
        }
    }
}

/// Default positive cut for the canonical levels 1, 2, 3.
pub const DEFAULT_CUTS: [SimilarityLabel; 3] = [
    SimilarityLabel::SomewhatDissimilar,
    SimilarityLabel::SomewhatSimilar,
    SimilarityLabel::VerySimilar,
];

/// Binarises an ordinal label with the default rule of level 1, 2 or 3.
///
/// Level 1 keeps everything but VD, level 2 keeps SS and VS, level 3 keeps
/// only VS.
pub fn binarize_label(label: SimilarityLabel, level: usize) -> f64 {
    assert!((1..=3).contains(&level), "level must be 1, 2 or 3");
    if label >= DEFAULT_CUTS[level - 1] {
        1.0
    } else {
        0.0
    }
}

/// Nested prefix lengths with per-level thresholds and binarisation cuts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixScheme {
    levels: Vec<PrefixLevel>,
}

impl PrefixScheme {
    pub fn new(levels: Vec<PrefixLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidScheme("no levels".into()));
        }
        for w in levels.windows(2) {
            if w[1].m <= w[0].m {
                return Err(Error::InvalidScheme(format!(
                    "prefix lengths must increase strictly ({} then {})",
                    w[0].m, w[1].m
                )));
            }
        }
        for l in &levels {
            if l.m == 0 {
                return Err(Error::InvalidScheme("prefix length 0".into()));
            }
            if !(-1.0..=1.0).contains(&l.lambda) {
                return Err(Error::InvalidScheme(format!("lambda {} outside [-1, 1]", l.lambda)));
            }
        }
        Ok(Self { levels })
    }

    /// The canonical ladder `d/4, d/2, d` with the default binarisation cuts.
    pub fn canonical(d: usize, lambdas: [f64; 3]) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::InvalidScheme(format!("dimension {d} is not a positive multiple of 4")));
        }
        let ms = [d / 4, d / 2, d];
        Self::new(
            (0..3)
                .map(|i| PrefixLevel { m: ms[i], lambda: lambdas[i], positive_from: DEFAULT_CUTS[i] })
                .collect(),
        )
    }

    pub fn levels(&self) -> &[PrefixLevel] {
        &self.levels
    }

    pub fn full_dim(&self) -> usize {
        self.levels.last().expect("non-empty").m
    }

    /// Checks the scheme against a matrix of dimension `d`.
    pub fn validate_for(&self, d: usize) -> Result<()> {
        if self.full_dim() != d {
            return Err(Error::InvalidScheme(format!(
                "last prefix {} does not equal dimension {d}",
                self.full_dim()
            )));
        }
        Ok(())
    }
}

/// Target of a labelled pair: an ordinal grade or a continuous score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairTarget {
    Label(SimilarityLabel),
    Score(f64),
}

impl PairTarget {
    /// Numeric value used for correlation: the ordinal index or the score.
    pub fn value(&self) -> f64 {
        match *self {
            PairTarget::Label(l) => l.ordinal() as f64,
            PairTarget::Score(s) => s,
        }
    }

    pub fn label(&self) -> Option<SimilarityLabel> {
        match *self {
            PairTarget::Label(l) => Some(l),
            PairTarget::Score(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub id_a: String,
    pub id_b: String,
    pub target: PairTarget,
}

impl LabeledPair {
    pub fn new(id_a: impl Into<String>, id_b: impl Into<String>, target: PairTarget) -> Result<Self> {
        let (id_a, id_b) = (id_a.into(), id_b.into());
        if id_a == id_b {
            return Err(Error::SelfPair(id_a));
        }
        if let PairTarget::Score(s) = target {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidBatch(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(Self { id_a, id_b, target })
    }

    pub fn labeled(id_a: impl Into<String>, id_b: impl Into<String>, label: SimilarityLabel) -> Result<Self> {
        Self::new(id_a, id_b, PairTarget::Label(label))
    }

    /// Order-independent key.
    pub fn unordered_key(&self) -> (String, String) {
        if self.id_a <= self.id_b {
            (self.id_a.clone(), self.id_b.clone())
        } else {
            (self.id_b.clone(), self.id_a.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
}

impl LossConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTemperature(tau));
        }
        Ok(Self { tau })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.05 }
    }
}

/// Summary of a pair set checked against a matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetReport {
    pub label_counts: BTreeMap<SimilarityLabel, usize>,
    pub score_count: usize,
    /// Unordered pairs that occur more than once, each listed once.
    pub duplicate_pairs: Vec<(String, String)>,
}

/// Checks that every pair resolves against `matrix` and collects label
/// statistics. Duplicate pairs are reported, not rejected.
pub fn validate_dataset(matrix: &EmbeddingMatrix, pairs: &[LabeledPair]) -> Result<DatasetReport> {
    let mut missing = BTreeSet::new();
    for p in pairs {
        for id in [&p.id_a, &p.id_b] {
            if matrix.index_of(id).is_none() {
                missing.insert(id.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnknownDocumentId(missing.into_iter().collect()));
    }
    let mut report = DatasetReport::default();
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for p in pairs {
        match p.target {
            PairTarget::Label(l) => *report.label_counts.entry(l).or_default() += 1,
            PairTarget::Score(_) => report.score_count += 1,
        }
        *seen.entry(p.unordered_key()).or_default() += 1;
    }
    report.duplicate_pairs = seen.into_iter().filter(|(_, c)| *c > 1).map(|(k, _)| k).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use SimilarityLabel::*;

    fn matrix(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn label_order_and_names() {
        assert!(VeryDissimilar < SomewhatDissimilar);
        assert!(SomewhatDissimilar < SomewhatSimilar);
        assert!(SomewhatSimilar < VerySimilar);
        assert_eq!(VerySimilar.to_string(), "Very Similar");
        assert_eq!(SimilarityLabel::parse("SD"), Some(SomewhatDissimilar));
        assert_eq!(SimilarityLabel::parse("Somewhat Similar"), Some(SomewhatSimilar));
        let json = serde_json::to_string(&VeryDissimilar).unwrap();
        assert_eq!(json, "\"VD\"");
    }

    #[test]
    fn prefix_cosine_identity_and_antipode() {
        let u = vec![0.3, -1.2, 4.0, 0.5, 2.0, -0.7, 0.1, 0.9];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let m = matrix(&[u.clone(), u, neg]);
        for p in [1, 2, 4, 8] {
            assert!((prefix_cosine(&m, 0, 1, p).unwrap() - 1.0).abs() < 1e-12);
            assert!((prefix_cosine(&m, 0, 2, p).unwrap() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_cosine_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 16;
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = matrix(&rows);
        let p = d / 2;
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (&rows[i][..p], &rows[j][..p]);
                let mut ab = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                for k in 0..p {
                    ab += a[k] * b[k];
                    aa += a[k] * a[k];
                    bb += b[k] * b[k];
                }
                let want = ab / (aa.sqrt() * bb.sqrt());
                assert!((prefix_cosine(&m, i, j, p).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_cosine_errors() {
        let m = matrix(&[vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(prefix_cosine(&m, 0, 1, 2), Err(Error::ZeroPrefixNorm { row: 0, m: 2 }));
        assert_eq!(prefix_cosine(&m, 0, 1, 5), Err(Error::DimOutOfRange { m: 5, d: 4 }));
        assert!(matches!(prefix_cosine(&m, 0, 9, 4), Err(Error::RowOutOfRange { .. })));
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize_label(VerySimilar, 1), 1.0);
        assert_eq!(binarize_label(SomewhatDissimilar, 2), 0.0);
        assert_eq!(binarize_label(VeryDissimilar, 3), 0.0);
        assert_eq!(binarize_label(SomewhatDissimilar, 1), 1.0);
        assert_eq!(binarize_label(SomewhatSimilar, 2), 1.0);
        assert_eq!(binarize_label(SomewhatSimilar, 3), 0.0);
    }

    #[test]
    fn binarize_is_monotone_and_tightens_with_level() {
        for a in SimilarityLabel::ALL {
            for b in SimilarityLabel::ALL {
                if a <= b {
                    for l in 1..=3 {
                        assert!(binarize_label(a, l) <= binarize_label(b, l));
                    }
                }
            }
            assert!(binarize_label(a, 1) >= binarize_label(a, 2));
            assert!(binarize_label(a, 2) >= binarize_label(a, 3));
        }
    }

    #[test]
    fn matrix_invariants_enforced() {
        assert!(EmbeddingMatrix::new(3, vec![1.0; 3], vec!["a".into()]).is_err());
        assert!(EmbeddingMatrix::new(4, vec![1.0, f64::NAN, 0.0, 0.0], vec!["a".into()]).is_err());
        assert!(EmbeddingMatrix::new(4, vec![0.0; 4], vec!["a".into()]).is_err());
        assert!(EmbeddingMatrix::new(4, vec![1.0; 8], vec!["a".into(), "a".into()]).is_err());
        assert!(EmbeddingMatrix::new(4, vec![1.0; 8], vec!["a".into(), "b".into()]).is_ok());
    }

    #[test]
    fn scheme_validation() {
        let s = PrefixScheme::canonical(16, [0.5, 0.6, 0.7]).unwrap();
        assert_eq!(s.levels().iter().map(|l| l.m).collect::<Vec<_>>(), vec![4, 8, 16]);
        assert!(s.validate_for(16).is_ok());
        assert!(s.validate_for(32).is_err());
        assert!(PrefixScheme::canonical(16, [0.5, 1.5, 0.7]).is_err());
        let bad = vec![
            PrefixLevel { m: 8, lambda: 0.0, positive_from: VerySimilar },
            PrefixLevel { m: 8, lambda: 0.0, positive_from: VerySimilar },
        ];
        assert!(PrefixScheme::new(bad).is_err());
    }

    #[test]
    fn loss_config_rejects_non_positive_tau() {
        assert_eq!(LossConfig::default().tau, 0.05);
        assert!(LossConfig::new(0.0).is_err());
        assert!(LossConfig::new(-1.0).is_err());
        assert!(LossConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn validate_dataset_histogram() {
        let m = EmbeddingMatrix::new(4, vec![1.0; 16], ["a", "b", "c", "d"].map(String::from).to_vec()).unwrap();
        let pairs = vec![
            LabeledPair::labeled("a", "b", VeryDissimilar).unwrap(),
            LabeledPair::labeled("a", "c", SomewhatDissimilar).unwrap(),
            LabeledPair::labeled("b", "c", SomewhatSimilar).unwrap(),
            LabeledPair::labeled("c", "d", VerySimilar).unwrap(),
            LabeledPair::new("a", "d", PairTarget::Score(0.25)).unwrap(),
        ];
        let r = validate_dataset(&m, &pairs).unwrap();
        assert_eq!(r.label_counts.len(), 4);
        assert!(r.label_counts.values().all(|&c| c == 1));
        assert_eq!(r.score_count, 1);
        assert!(r.duplicate_pairs.is_empty());
    }

    #[test]
    fn validate_dataset_unknown_id_fails() {
        let m = EmbeddingMatrix::new(4, vec![1.0; 8], vec!["a".into(), "b".into()]).unwrap();
        let pairs = vec![LabeledPair::labeled("a", "zz", VerySimilar).unwrap()];
        assert_eq!(validate_dataset(&m, &pairs), Err(Error::UnknownDocumentId(vec!["zz".into()])));
    }

    #[test]
    fn validate_dataset_reports_unordered_duplicates_once() {
        let m = EmbeddingMatrix::new(4, vec![1.0; 8], vec!["a".into(), "b".into()]).unwrap();
        let pairs = vec![
            LabeledPair::labeled("a", "b", VerySimilar).unwrap(),
            LabeledPair::labeled("b", "a", VerySimilar).unwrap(),
        ];
        let r = validate_dataset(&m, &pairs).unwrap();
        assert_eq!(r.duplicate_pairs, vec![("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn self_pair_rejected() {
        assert!(LabeledPair::labeled("a", "a", VerySimilar).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetric_and_scale_invariant(
                a in proptest::collection::vec(-10.0f64..10.0, 8),
                b in proptest::collection::vec(-10.0f64..10.0, 8),
                s in 0.01f64..100.0,
                m in 1usize..=8,
            ) {
                prop_assume!(linalg::norm(&a[..m]) > 1e-6 && linalg::norm(&b[..m]) > 1e-6);
                let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
                let mat = matrix(&[a, b, scaled]);
                let ij = prefix_cosine(&mat, 0, 1, m).unwrap();
                let ji = prefix_cosine(&mat, 1, 0, m).unwrap();
                prop_assert_eq!(ij.to_bits(), ji.to_bits());
                let sj = prefix_cosine(&mat, 2, 1, m).unwrap();
                prop_assert!((ij - sj).abs() <= 1e-12);
            }
        }
    }
}
