//! File formats: binary embedding files with an id sidecar, JSON-lines pair
//! and text files, TOML run configuration and tree JSON.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Grid;
use crate::model::{EmbeddingMatrix, LabeledPair, LossConfig, PairTarget, PrefixLevel, PrefixScheme, SimilarityLabel};
use crate::rac::{ClusterTree, HierarchyMode, TreeCluster};

pub const MAGIC: &[u8; 4] = b"MRL1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| {
        Error::Format(format!("{}: invalid UTF-8 at byte offset {}", path.display(), e.utf8_error().valid_up_to()))
    })
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io_err(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    // temp files are created owner-only; keep the target's mode or use 0644
    let perms = match fs::metadata(path) {
        Ok(m) => m.permissions(),
        Err(_) => default_permissions(),
    };
    tmp.as_file().set_permissions(perms).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

#[cfg(unix)]
fn default_permissions() -> fs::Permissions {
    use std::os::unix::fs::PermissionsExt;
    fs::Permissions::from_mode(0o644)
}

#[cfg(not(unix))]
fn default_permissions() -> fs::Permissions {
    let mut p = fs::metadata(".").map(|m| m.permissions()).expect("current directory is readable");
    p.set_readonly(false);
    p
}

/// Serialises a matrix as `MRL1`, version, n, d (little-endian `u32`) and
/// the row-major values as little-endian `f32`.
pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.n() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.d() as u32).to_le_bytes());
    for &x in matrix.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses an embedding file. `ids` gives one id per row; `None` numbers the
/// rows. `source` is used in error messages.
pub fn decode_embeddings(bytes: &[u8], ids: Option<Vec<String>>, source: &str) -> Result<EmbeddingMatrix> {
    let fail = |offset: usize, msg: String| Error::Format(format!("{source}: byte offset {offset}: {msg}"));
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}, expected \"MRL1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(fail(4, format!("unsupported format version {version}")));
    }
    let n = u32_at(bytes, 8) as usize;
    let d = u32_at(bytes, 12) as usize;
    let expected = (n as u128) * (d as u128) * 4 + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        let at = (bytes.len() as u128).min(expected) as usize;
        return Err(fail(at, format!("expected {expected} bytes for n = {n}, d = {d}, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(n * d);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(fail(HEADER_LEN + 4 * k, format!("non-finite value at row {}, column {}", k / d, k % d)));
        }
        data.push(x as f64);
    }
    let ids = match ids {
        Some(ids) => {
            if ids.len() != n {
                return Err(Error::Format(format!("{source}: ids file has {} lines, expected {n}", ids.len())));
            }
            ids
        }
        None => (0..n).map(|i| i.to_string()).collect(),
    };
    EmbeddingMatrix::new(d, data, ids).map_err(|e| Error::Format(format!("{source}: {e}")))
}

/// One id per line. A trailing newline is allowed; blank lines are not.
pub fn parse_ids(text: &str, source: &str) -> Result<Vec<String>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for (k, line) in body.split('\n').enumerate() {
        let id = line.strip_suffix('\r').unwrap_or(line);
        if id.is_empty() {
            return Err(Error::Format(format!("{source}: line {}: empty id", k + 1)));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn read_embeddings(path: &Path, ids_path: Option<&Path>) -> Result<EmbeddingMatrix> {
    let ids = match ids_path {
        Some(p) => Some(parse_ids(&read_text(p)?, &p.display().to_string())?),
        None => None,
    };
    decode_embeddings(&read_bytes(path)?, ids, &path.display().to_string())
}

pub fn write_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path, &encode_embeddings(matrix))
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    id_a: String,
    id_b: String,
    label: Option<String>,
    score: Option<f64>,
}

#[derive(Serialize)]
struct PairOut<'a> {
    id_a: &'a str,
    id_b: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

/// Parses a JSON-lines pairs file. Blank lines are skipped.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<LabeledPair>> {
    let mut pairs = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Format(format!("{source}: line {}: {msg}", k + 1));
        let raw: PairLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let target = match (raw.label, raw.score) {
            (Some(l), None) => PairTarget::Label(
                SimilarityLabel::parse(&l).ok_or_else(|| fail(format!("unknown label {l:?}")))?,
            ),
            (None, Some(s)) => PairTarget::Score(s),
            _ => return Err(fail("exactly one of \"label\" and \"score\" is required".into())),
        };
        pairs.push(LabeledPair::new(raw.id_a, raw.id_b, target).map_err(|e| fail(e.to_string()))?);
    }
    Ok(pairs)
}

pub fn format_pairs(pairs: &[LabeledPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let (label, score) = match p.target {
            PairTarget::Label(l) => (Some(l.code()), None),
            PairTarget::Score(s) => (None, Some(s)),
        };
        let line = PairOut { id_a: &p.id_a, id_b: &p.id_b, label, score };
        out.push_str(&serde_json::to_string(&line).expect("pair serialises"));
        out.push('\n');
    }
    out
}

pub fn read_pairs(path: &Path) -> Result<Vec<LabeledPair>> {
    parse_pairs(&read_text(path)?, &path.display().to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextLine {
    id: String,
    text: String,
}

/// Parses a JSON-lines texts file of `{"id": ..., "text": ...}` records.
/// A repeated id is an error.
pub fn parse_texts(text: &str, source: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Format(format!("{source}: line {}: {msg}", k + 1));
        let raw: TextLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if out.insert(raw.id.clone(), raw.text).is_some() {
            return Err(fail(format!("duplicate id {:?}", raw.id)));
        }
    }
    Ok(out)
}

fn default_tau() -> f64 {
    LossConfig::default().tau
}

fn default_top_k() -> usize {
    10
}

/// Every tunable of a run, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One threshold per level, coarsest first.
    pub lambdas: Vec<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Prefix lengths; defaults to `d/4, d/2, d`.
    #[serde(default)]
    pub levels: Option<Vec<usize>>,
    /// Smallest label counted as positive at each level; defaults to
    /// `SD, SS, VS`.
    #[serde(default)]
    pub cuts: Option<Vec<SimilarityLabel>>,
    #[serde(default)]
    pub hierarchy: HierarchyMode,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("{source}: {e}")))?;
        cfg.validate().map_err(|e| Error::Format(format!("{source}: {e}")))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    fn validate(&self) -> Result<()> {
        LossConfig::new(self.tau)?;
        if self.lambdas.is_empty() {
            return Err(Error::InvalidScheme("no lambdas".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(-1.0..=1.0).contains(*l)) {
            return Err(Error::InvalidScheme(format!("lambda {l} outside [-1, 1]")));
        }
        let k = self.lambdas.len();
        for (name, len) in [("levels", self.levels.as_ref().map(Vec::len)), ("cuts", self.cuts.as_ref().map(Vec::len))] {
            if let Some(len) = len {
                if len != k {
                    return Err(Error::InvalidScheme(format!("{len} {name} for {k} lambdas")));
                }
            }
        }
        if k != 3 && (self.levels.is_none() || self.cuts.is_none()) {
            return Err(Error::InvalidScheme(format!("{k} levels need explicit prefix lengths and cuts")));
        }
        if let Some(g) = &self.grid {
            g.values()?;
        }
        if self.top_k == 0 {
            return Err(Error::InvalidScheme("top_k must be positive".into()));
        }
        Ok(())
    }

    /// The prefix scheme for embeddings of dimension `d`.
    pub fn scheme(&self, d: usize) -> Result<PrefixScheme> {
        let scheme = match (&self.levels, &self.cuts) {
            (None, None) => PrefixScheme::canonical(d, [self.lambdas[0], self.lambdas[1], self.lambdas[2]])?,
            _ => {
                let ms = match &self.levels {
                    Some(ms) => ms.clone(),
                    None => vec![d / 4, d / 2, d],
                };
                let cuts = self.cuts.clone().unwrap_or_else(|| crate::model::DEFAULT_CUTS.to_vec());
                PrefixScheme::new(
                    ms.iter()
                        .zip(&self.lambdas)
                        .zip(cuts)
                        .map(|((&m, &lambda), positive_from)| PrefixLevel { m, lambda, positive_from })
                        .collect(),
                )?
            }
        };
        scheme.validate_for(d)?;
        Ok(scheme)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { tau: self.tau }
    }
}

/// Replaces `lambdas[level - 1]` in a TOML document, keeping the rest of the
/// text (comments, ordering) intact.
pub fn patch_lambda(text: &str, level: usize, value: f64, source: &str) -> Result<String> {
    let mut doc: toml_edit::DocumentMut = text.parse().map_err(|e| Error::Format(format!("{source}: {e}")))?;
    let arr = doc
        .get_mut("lambdas")
        .and_then(|v| v.as_array_mut())
        .ok_or_else(|| Error::Format(format!("{source}: no lambdas array")))?;
    if level == 0 || level > arr.len() {
        return Err(Error::Format(format!("{source}: no lambda for level {level}")));
    }
    let decor = arr.get(level - 1).map(|v| v.decor().clone());
    arr.replace(level - 1, value);
    if let (Some(decor), Some(v)) = (decor, arr.get_mut(level - 1)) {
        *v.decor_mut() = decor;
    }
    let out = doc.to_string();
    RunConfig::parse(&out, source)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeywordOut {
    term: String,
    weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterOut {
    cluster_id: usize,
    parent_id: Option<usize>,
    member_ids: Vec<String>,
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keywords: Option<Vec<KeywordOut>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerOut {
    layer: usize,
    name: String,
    clusters: Vec<ClusterOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeOut {
    documents: Vec<String>,
    layers: Vec<LayerOut>,
}

fn layer_name(depth: usize, l: usize) -> String {
    match (depth, l) {
        (3, 0) => "theme".into(),
        (3, 1) => "topic".into(),
        (3, 2) => "story".into(),
        _ => format!("level{}", l + 1),
    }
}

/// Cluster order inside each layer of a tree file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterOrder {
    ById,
    /// Largest first, ties by id.
    BySize,
}

/// Tree JSON. `ids[r]` is the document id of row `r`. The tree is validated
/// first; a tree that fails is reported as [`Error::InvalidTree`].
pub fn tree_to_json(tree: &ClusterTree, ids: &[String], order: ClusterOrder) -> Result<String> {
    tree.validate()?;
    if ids.len() != tree.n {
        return Err(Error::InvalidTree(format!("{} ids for {} rows", ids.len(), tree.n)));
    }
    let depth = tree.layers.len();
    let layers = tree
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut clusters: Vec<&TreeCluster> = layer.iter().collect();
            match order {
                ClusterOrder::ById => clusters.sort_by_key(|c| c.id),
                ClusterOrder::BySize => clusters.sort_by(|a, b| b.members.len().cmp(&a.members.len()).then(a.id.cmp(&b.id))),
            }
            LayerOut {
                layer: l + 1,
                name: layer_name(depth, l),
                clusters: clusters
                    .into_iter()
                    .map(|c| ClusterOut {
                        cluster_id: c.id,
                        parent_id: c.parent,
                        member_ids: c.members.iter().map(|&r| ids[r].clone()).collect(),
                        size: c.members.len(),
                        keywords: c.keywords.as_ref().map(|k| {
                            k.iter().map(|(term, weight)| KeywordOut { term: term.clone(), weight: *weight }).collect()
                        }),
                    })
                    .collect(),
            }
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&TreeOut { documents: ids.to_vec(), layers })
        .map_err(|e| Error::InvalidTree(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses and validates tree JSON. Returns the tree and the document ids in
/// row order.
pub fn tree_from_json(text: &str, source: &str) -> Result<(ClusterTree, Vec<String>)> {
    let fail = |msg: String| Error::Format(format!("{source}: {msg}"));
    let raw: TreeOut = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
    let mut index = HashMap::with_capacity(raw.documents.len());
    for (r, id) in raw.documents.iter().enumerate() {
        if index.insert(id.as_str(), r).is_some() {
            return Err(fail(format!("duplicate document id {id:?}")));
        }
    }
    let mut layers = Vec::with_capacity(raw.layers.len());
    for (l, layer) in raw.layers.iter().enumerate() {
        if layer.layer != l + 1 {
            return Err(fail(format!("layer {} listed in position {}", layer.layer, l + 1)));
        }
        let mut out = Vec::with_capacity(layer.clusters.len());
        for c in &layer.clusters {
            if c.size != c.member_ids.len() {
                return Err(fail(format!(
                    "layer {} cluster {}: size {} but {} member ids",
                    l + 1,
                    c.cluster_id,
                    c.size,
                    c.member_ids.len()
                )));
            }
            let mut members = Vec::with_capacity(c.member_ids.len());
            for id in &c.member_ids {
                let r = index
                    .get(id.as_str())
                    .ok_or_else(|| fail(format!("layer {} cluster {}: unknown id {id:?}", l + 1, c.cluster_id)))?;
                members.push(*r);
            }
            members.sort_unstable();
            out.push(TreeCluster {
                id: c.cluster_id,
                parent: c.parent_id,
                members,
                keywords: c.keywords.as_ref().map(|k| k.iter().map(|k| (k.term.clone(), k.weight)).collect()),
            });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(c) = out.iter().find(|c| !seen.insert(c.id)) {
            return Err(fail(format!("layer {} repeats cluster id {}", l + 1, c.id)));
        }
        out.sort_by_key(|c| c.id);
        layers.push(out);
    }
    let tree = ClusterTree { n: raw.documents.len(), layers };
    tree.validate().map_err(|e| fail(e.to_string()))?;
    Ok((tree, raw.documents))
}

pub fn read_tree(path: &Path) -> Result<(ClusterTree, Vec<String>)> {
    tree_from_json(&read_text(path)?, &path.display().to_string())
}
