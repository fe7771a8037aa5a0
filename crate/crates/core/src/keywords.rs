//! Class-based TF-IDF keywords for every layer of a cluster tree.
//!
//! Each cluster is one "class document". The weight of term `t` in class `c`
//! is `tf(t, c) * ln(1 + A / f(t))`, where `tf` is the count of `t` in `c`
//! divided by the token count of `c`, `f(t)` is the count of `t` over all
//! classes and `A` is the average token count per class.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rac::ClusterTree;

/// Small English stopword list used when no file is given.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her", "his", "how", "if", "in", "into",
    "is", "it", "its", "more", "most", "no", "not", "of", "on", "or", "other", "our", "out", "over", "said", "she",
    "so", "some", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "to", "up", "was",
    "we", "were", "what", "when", "which", "who", "will", "with", "would", "you",
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    stopwords: HashSet<String>,
    min_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_STOPWORDS.iter().map(|s| s.to_string()))
    }
}

impl Tokenizer {
    pub fn new<I: IntoIterator<Item = String>>(stopwords: I) -> Self {
        Self { stopwords: stopwords.into_iter().map(|s| s.to_lowercase()).collect(), min_len: 2 }
    }

    /// Parses a stopword file: one term per line, blank lines ignored.
    pub fn from_stopword_text(text: &str) -> Self {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from))
    }

    /// Lowercases, splits on any non-alphanumeric character and drops short
    /// tokens and stopwords.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .filter(|t| t.chars().count() >= self.min_len && !self.stopwords.contains(t))
            .collect()
    }
}

/// Term counts of one class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassDocument {
    pub class_id: usize,
    pub counts: BTreeMap<String, u64>,
    /// Ids of the texts or child classes pooled into this class.
    pub sources: Vec<String>,
}

impl ClassDocument {
    pub fn from_tokens<I: IntoIterator<Item = String>>(class_id: usize, tokens: I) -> Self {
        let mut doc = Self { class_id, ..Default::default() };
        doc.add_tokens(tokens);
        doc
    }

    pub fn add_tokens<I: IntoIterator<Item = String>>(&mut self, tokens: I) {
        for t in tokens {
            *self.counts.entry(t).or_default() += 1;
        }
    }

    pub fn absorb(&mut self, other: &ClassDocument) {
        for (t, c) in &other.counts {
            *self.counts.entry(t.clone()).or_default() += c;
        }
    }

    pub fn token_count(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Per-class term weights. Terms absent from a class are absent from its map
/// (weight 0).
pub fn class_tf_idf(classes: &[ClassDocument]) -> Result<Vec<BTreeMap<String, f64>>> {
    let total: u64 = classes.iter().map(ClassDocument::token_count).sum();
    if classes.is_empty() || total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let avg = total as f64 / classes.len() as f64;
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for c in classes {
        for (t, n) in &c.counts {
            *freq.entry(t.as_str()).or_default() += n;
        }
    }
    Ok(classes
        .iter()
        .map(|c| {
            let len = c.token_count() as f64;
            c.counts
                .iter()
                .map(|(t, &n)| {
                    let tf = n as f64 / len;
                    (t.clone(), tf * (1.0 + avg / freq[t.as_str()] as f64).ln())
                })
                .collect()
        })
        .collect())
}

/// Highest-weighted `k` terms, ties broken by term.
pub fn top_k(weights: &BTreeMap<String, f64>, k: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = weights.iter().map(|(t, w)| (t.clone(), *w)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// Annotates every cluster of `tree` with its top-`k` terms.
///
/// The bottom layer's class documents are the texts of each cluster's
/// members; every layer above pools the class documents of its children.
/// `ids[r]` is the document id of row `r`. Fails with
/// [`Error::MissingText`] if a bottom-layer cluster has no member with text.
pub fn hierarchy_keywords(
    tree: &ClusterTree,
    ids: &[String],
    texts: &HashMap<String, String>,
    tokenizer: &Tokenizer,
    k: usize,
) -> Result<ClusterTree> {
    tree.validate()?;
    if ids.len() != tree.n {
        return Err(Error::InvalidTree(format!("{} ids for {} rows", ids.len(), tree.n)));
    }
    let Some(bottom) = tree.layers.last() else {
        return Ok(tree.clone());
    };
    let mut missing: Vec<String> = Vec::new();
    for c in bottom {
        if c.members.iter().all(|&r| !texts.contains_key(&ids[r])) {
            missing.extend(c.members.iter().map(|&r| ids[r].clone()));
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingText(missing));
    }
    let tokens: Vec<Option<Vec<String>>> =
        ids.par_iter().map(|id| texts.get(id).map(|t| tokenizer.tokenize(t))).collect();

    let depth = tree.layers.len();
    let mut docs: Vec<Vec<ClassDocument>> = vec![Vec::new(); depth];
    docs[depth - 1] = bottom
        .iter()
        .map(|c| {
            let mut d = ClassDocument { class_id: c.id, ..Default::default() };
            for &r in &c.members {
                if let Some(t) = &tokens[r] {
                    d.add_tokens(t.iter().cloned());
                    d.sources.push(ids[r].clone());
                }
            }
            d
        })
        .collect();
    for l in (0..depth - 1).rev() {
        let below: HashMap<usize, &ClassDocument> = docs[l + 1].iter().map(|d| (d.class_id, d)).collect();
        let layer: Vec<ClassDocument> = tree.layers[l]
            .iter()
            .map(|c| {
                let mut d = ClassDocument { class_id: c.id, ..Default::default() };
                for child in tree.children(l, c.id) {
                    d.absorb(below[&child]);
                    d.sources.push(format!("{}:{child}", l + 1));
                }
                d
            })
            .collect();
        docs[l] = layer;
    }

    let mut out = tree.clone();
    for (l, layer_docs) in docs.iter().enumerate() {
        let weights = match class_tf_idf(layer_docs) {
            Ok(w) => w,
            Err(Error::EmptyCorpus) => vec![BTreeMap::new(); layer_docs.len()],
            Err(e) => return Err(e),
        };
        for (c, w) in out.layers[l].iter_mut().zip(&weights) {
            c.keywords = Some(top_k(w, k));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: usize, words: &[&str]) -> ClassDocument {
        ClassDocument::from_tokens(id, words.iter().map(|s| s.to_string()))
    }

    #[test]
    fn tokenize_strips_punctuation() {
        let t = Tokenizer::default();
        assert_eq!(t.tokenize("FIFA, Blatter; officials!"), vec!["fifa", "blatter", "officials"]);
        assert!(t.tokenize("").is_empty());
        assert_eq!(t.tokenize("a I x the of"), Vec::<String>::new());
    }

    #[test]
    fn tokenize_mixed_script() {
        let t = Tokenizer::default();
        let got = t.tokenize("Präsident Müller – встреча в Москве; 東京 2024, São-Paulo!");
        let want = ["präsident", "müller", "встреча", "москве", "東京", "2024", "são", "paulo"];
        assert_eq!(got, want);
    }

    #[test]
    fn custom_stopwords() {
        let t = Tokenizer::from_stopword_text("fifa\n\nBlatter\n");
        assert_eq!(t.tokenize("FIFA, Blatter; officials!"), vec!["officials"]);
    }

    #[test]
    fn single_class_ranks_by_frequency() {
        let c = doc(0, &["b", "a", "b", "c", "b", "a"]);
        let w = class_tf_idf(&[c]).unwrap();
        let top: Vec<String> = top_k(&w[0], 3).into_iter().map(|x| x.0).collect();
        assert_eq!(top, vec!["b", "a", "c"]);
        // A = 6, f(b) = 3
        assert!((w[0]["b"] - 0.5 * (1.0f64 + 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_hand_computed() {
        // class 0: rare x1, common y1; class 1: common y1, z2 z2
        let c0 = doc(0, &["rare", "common"]);
        let c1 = doc(1, &["common", "zed", "zed"]);
        let w = class_tf_idf(&[c0, c1]).unwrap();
        let a = 2.5;
        assert!((w[0]["rare"] - 0.5 * (1.0f64 + a / 1.0).ln()).abs() < 1e-12);
        assert!((w[0]["common"] - 0.5 * (1.0f64 + a / 2.0).ln()).abs() < 1e-12);
        assert!((w[1]["zed"] - (2.0 / 3.0) * (1.0f64 + a / 2.0).ln()).abs() < 1e-12);
        assert!(w[0]["rare"] > w[0]["common"]);
        assert!(!w[0].contains_key("zed"));
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(class_tf_idf(&[]), Err(Error::EmptyCorpus));
        assert_eq!(class_tf_idf(&[ClassDocument::default()]), Err(Error::EmptyCorpus));
    }

    #[test]
    fn top_k_ties_are_lexicographic_and_truncate() {
        let w: BTreeMap<String, f64> = [("b", 1.0), ("a", 1.0), ("c", 2.0)].iter().map(|(t, w)| (t.to_string(), *w)).collect();
        assert_eq!(top_k(&w, 10).into_iter().map(|x| x.0).collect::<Vec<_>>(), vec!["c", "a", "b"]);
        assert_eq!(top_k(&w, 1).len(), 1);
    }
}
