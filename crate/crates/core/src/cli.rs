//! Command-line surface. [`run`] parses arguments, executes one command and
//! returns the process exit code: 0 on success, 1 when a loss check fails,
//! 2 for input errors and 3 when an internal invariant is violated.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::io::{self, ClusterOrder, RunConfig};
use crate::keywords::{hierarchy_keywords, Tokenizer};
use crate::loss::{self, LossBatch, LossResult};
use crate::metrics::{self, EvalReport, Grid};
use crate::model::{LossConfig, PrefixScheme};
use crate::rac::{self, RacOptions};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "mrlrac", version, about = "Level-wise RAC hierarchies, evaluation metrics and loss-kernel checks")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, env = "MRL_THREADS", default_value_t = 0, global = true)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the theme / topic / story tree and write it as JSON.
    Cluster(ClusterArgs),
    /// Score embeddings against labelled pairs, or a predicted tree against a gold tree.
    Eval(EvalArgs),
    /// Pick the threshold of one level that maximises validation F1.
    Tune(TuneArgs),
    /// Relational similarity of two row-aligned embedding files.
    Relsim(RelsimArgs),
    /// Check analytic loss gradients against finite differences.
    LossCheck(LossCheckArgs),
    /// Annotate every cluster of a tree with c-TF-IDF keywords.
    Keywords(KeywordsArgs),
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Binary embedding file.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Document ids, one per line.
    #[arg(long)]
    pub ids: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output tree JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires_all = ["ids", "pairs"])]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// JSON-lines labelled pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Prefix length used for cosines (default: full dimension).
    #[arg(long)]
    pub prefix: Option<usize>,
    /// Gold and predicted tree JSON files.
    #[arg(long, num_args = 2, value_names = ["GOLD", "PRED"])]
    pub tree: Option<Vec<PathBuf>>,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also write the JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TuneMode {
    /// Classify each pair by thresholding its cosine.
    Pairwise,
    /// Run RAC per candidate and score same-cluster predictions.
    Cluster,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub ids: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Level to tune: 1, 2 or 3.
    #[arg(long)]
    pub level: usize,
    /// Candidate grid as lo:hi:step (default: the config's grid).
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<Grid>,
    /// Prefix length (default: the level's prefix from the config, or d/4, d/2, d).
    #[arg(long)]
    pub prefix: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Store the tuned threshold in the config file.
    #[arg(long, requires = "config")]
    pub write: bool,
    #[arg(long, value_enum, default_value_t = TuneMode::Pairwise)]
    pub mode: TuneMode,
}

#[derive(Debug, Args)]
pub struct RelsimArgs {
    #[arg(long)]
    pub embeddings_a: PathBuf,
    #[arg(long)]
    pub embeddings_b: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    /// Documents per batch; each appears in two views, so a batch has 2n rows.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of kink-free batches to check; seeds run seed, seed + 1, ...
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct KeywordsArgs {
    #[arg(long)]
    pub tree: PathBuf,
    /// JSON-lines {"id": ..., "text": ...} records.
    #[arg(long)]
    pub texts: PathBuf,
    /// Keywords per cluster (default: the config's top_k, else 10).
    #[arg(long)]
    pub k: Option<usize>,
    /// Stopword file, one term per line (default: the config's list, else a
    /// built-in English list).
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Run configuration supplying top_k and stopwords.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output tree JSON (default: rewrite --tree in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err("expected lo:hi:step".into());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    Ok(Grid { lo: v[0], hi: v[1], step: v[2] })
}

/// Outcome of a failed command.
#[derive(Debug)]
pub enum Failure {
    Input(Error),
    Check(String),
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Check(_) => 1,
            Failure::Input(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(e) => write!(f, "{e}"),
            Failure::Check(m) => write!(f, "{m}"),
            Failure::Internal(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.code()
        }
    }
}

fn execute(cli: &Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> CmdResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Failure::Internal(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Cluster(a) => cmd_cluster(a, out),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Tune(a) => cmd_tune(a, out),
        Command::Relsim(a) => cmd_relsim(a, out),
        Command::LossCheck(a) => cmd_loss_check(a, out),
        Command::Keywords(a) => cmd_keywords(a, out),
    })
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) -> CmdResult {
    out.write_fmt(text).map_err(|e| Failure::Input(Error::Io(format!("stdout: {e}"))))
}

/// Serialises and writes a tree; a tree that fails validation is an
/// internal error, not an input error.
fn write_tree(path: &Path, tree: &rac::ClusterTree, ids: &[String], order: ClusterOrder) -> CmdResult {
    let json = io::tree_to_json(tree, ids, order).map_err(|e| Failure::Internal(e.to_string()))?;
    io::tree_from_json(&json, &path.display().to_string()).map_err(|e| Failure::Internal(e.to_string()))?;
    io::write_atomic(path, json.as_bytes())?;
    Ok(())
}

fn cmd_cluster(a: &ClusterArgs, out: &mut dyn Write) -> CmdResult {
    let matrix = io::read_embeddings(&a.embeddings, Some(&a.ids))?;
    let cfg = RunConfig::read(&a.config)?;
    let scheme = cfg.scheme(matrix.d())?;
    let tree = rac::levelwise_rac_with(&matrix, &scheme, cfg.hierarchy, RacOptions::default())?;
    write_tree(&a.out, &tree, matrix.ids(), ClusterOrder::ById)?;
    for (l, layer) in tree.layers.iter().enumerate() {
        say(out, format_args!("layer {}: {} clusters\n", l + 1, layer.len()))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    if a.embeddings.is_none() && a.tree.is_none() {
        return Err(Error::Format("eval needs --embeddings/--ids/--pairs or --tree GOLD PRED".into()).into());
    }
    let mut report = EvalReport::default();
    if let (Some(emb), Some(ids), Some(pairs)) = (&a.embeddings, &a.ids, &a.pairs) {
        let matrix = io::read_embeddings(emb, Some(ids))?;
        let pairs = io::read_pairs(pairs)?;
        let m = a.prefix.unwrap_or(matrix.d());
        report = metrics::evaluate_pairs(&matrix, &pairs, m)?;
    }
    if let Some(paths) = &a.tree {
        let (gold, gold_ids) = io::read_tree(&paths[0])?;
        let (pred, pred_ids) = io::read_tree(&paths[1])?;
        let t = metrics::evaluate_trees(&gold, &gold_ids, &pred, &pred_ids)?;
        report.pairwise = t.pairwise;
        report.warnings.extend(t.warnings);
    }
    for w in &report.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let csv = report.to_csv();
    match &a.csv {
        Some(p) => io::write_atomic(p, csv.as_bytes())?,
        None => say(out, format_args!("{csv}"))?,
    }
    if let Some(p) = &a.json {
        io::write_atomic(p, report.to_json().as_bytes())?;
    }
    if report.all_undefined() {
        return Err(Error::Format("every metric is undefined".into()).into());
    }
    Ok(())
}

fn cmd_tune(a: &TuneArgs, out: &mut dyn Write) -> CmdResult {
    let matrix = io::read_embeddings(&a.embeddings, Some(&a.ids))?;
    let pairs = io::read_pairs(&a.pairs)?;
    crate::model::validate_dataset(&matrix, &pairs)?;
    let cfg = match &a.config {
        Some(p) => Some(RunConfig::read(p)?),
        None => None,
    };
    let grid = a.grid.or(cfg.as_ref().and_then(|c| c.grid)).ok_or(Error::EmptyGrid)?;
    let cut = metrics::level_cut(a.level)?;
    let m = match (a.prefix, &cfg) {
        (Some(m), _) => m,
        (None, Some(c)) => c.scheme(matrix.d())?.levels()[a.level - 1].m,
        (None, None) => [matrix.d() / 4, matrix.d() / 2, matrix.d()][a.level - 1],
    };
    let tuned = match a.mode {
        TuneMode::Pairwise => metrics::tune_lambda(&matrix, &pairs, m, a.level, &grid)?,
        TuneMode::Cluster => metrics::tune_lambda_by_clustering(&matrix, &pairs, m, a.level, &grid)?,
    };
    say(out, format_args!("level {} (positives >= {}, prefix {m})\n", a.level, cut.code()))?;
    say(out, format_args!("lambda {:.6}\nf1 {:.6}\n", tuned.lambda, tuned.f1))?;
    if a.write {
        let path = a.config.as_ref().expect("clap requires --config");
        let text = io::read_text(path)?;
        let patched = io::patch_lambda(&text, a.level, round6(tuned.lambda), &path.display().to_string())?;
        io::write_atomic(path, patched.as_bytes())?;
    }
    Ok(())
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn cmd_relsim(a: &RelsimArgs, out: &mut dyn Write) -> CmdResult {
    let x = io::read_embeddings(&a.embeddings_a, None)?;
    let y = io::read_embeddings(&a.embeddings_b, None)?;
    let r = metrics::relational_similarity(&x, &y)?;
    say(out, format_args!("{r:.3}\n"))
}

fn check_one(
    name: &str,
    batch: &LossBatch,
    f: &dyn Fn(&LossBatch) -> crate::error::Result<LossResult>,
) -> crate::error::Result<(String, f64)> {
    let analytic = f(batch)?;
    let numeric = loss::finite_difference_grad(
        |rows| f(&batch.with_rows(rows.to_vec())).map(|r| r.value).unwrap_or(f64::NAN),
        batch.rows(),
        FD_STEP,
    );
    Ok((name.to_string(), loss::max_relative_error(&analytic.grad, &numeric, GRAD_FLOOR)))
}

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-6;
/// Gradient entries smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Gradient check of every objective on one batch. Returns (objective,
/// max relative error) rows.
pub fn gradient_check(batch: &LossBatch, scheme: &PrefixScheme) -> crate::error::Result<Vec<(String, f64)>> {
    Ok(vec![
        check_one("cos", batch, &loss::cos_objective)?,
        check_one("contrastive", batch, &loss::contrastive_objective)?,
        check_one("angle", batch, &loss::angle_objective)?,
        check_one("angie", batch, &loss::angie_loss)?,
        check_one("mrl", batch, &|b| loss::mrl_loss(b, scheme))?,
    ])
}

fn cmd_loss_check(a: &LossCheckArgs, out: &mut dyn Write) -> CmdResult {
    if a.dim % 2 == 1 {
        return Err(Error::OddPrefix(a.dim).into());
    }
    if a.n < 2 {
        return Err(Error::InvalidBatch("need at least 2 documents".into()).into());
    }
    let config = LossConfig::new(a.tau)?;
    let scheme = PrefixScheme::canonical(a.dim, [0.0; 3])?;
    let prefixes: Vec<usize> = scheme.levels().iter().map(|l| l.m).collect();
    let (mut checked, mut skipped, mut failed) = (0, 0, 0);
    say(out, format_args!("{:<8} {:<12} {:<12} {:>12}  status\n", "seed", "objective", "rows", "max_rel_err"))?;
    // draw seeds until `samples` batches clear the kink margin
    let mut seed = a.seed;
    while checked < a.samples {
        if skipped > 100 * a.samples.max(1) {
            return Err(Failure::Check(format!("no kink-free batch after {skipped} draws")));
        }
        let batch = synth::random_loss_batch(seed, a.n, a.dim, config)?;
        let margin = loss::kink_margin(&batch, &prefixes);
        if margin < synth::KINK_MARGIN {
            skipped += 1;
            say(out, format_args!("{seed:<8} {:<12} {:<12} {:>12}  skipped (kink margin {margin:.1e})\n", "-", batch.rows().len(), "-"))?;
            seed = seed.wrapping_add(1);
            continue;
        }
        checked += 1;
        for (name, e) in gradient_check(&batch, &scheme)? {
            let ok = e <= a.tolerance;
            if !ok {
                failed += 1;
            }
            let status = if ok { "pass" } else { "FAIL" };
            say(out, format_args!("{seed:<8} {name:<12} {:<12} {e:>12.3e}  {status}\n", batch.rows().len()))?;
        }
        seed = seed.wrapping_add(1);
    }
    say(out, format_args!("checked {checked}, skipped {skipped}, failed {failed}\n"))?;
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient check(s) above tolerance {:e}", a.tolerance)));
    }
    Ok(())
}

fn cmd_keywords(a: &KeywordsArgs, out: &mut dyn Write) -> CmdResult {
    let (tree, ids) = io::read_tree(&a.tree)?;
    let texts = io::parse_texts(&io::read_text(&a.texts)?, &a.texts.display().to_string())?;
    let cfg = a.config.as_deref().map(RunConfig::read).transpose()?;
    // a relative stopword path in the config is relative to the config file
    let cfg_stopwords = cfg.as_ref().and_then(|c| c.stopwords.as_ref()).map(|p| {
        let base = a.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(""));
        base.join(p)
    });
    let tokenizer = match a.stopwords.clone().or(cfg_stopwords) {
        Some(p) => Tokenizer::from_stopword_text(&io::read_text(&p)?),
        None => Tokenizer::default(),
    };
    let k = a.k.or(cfg.as_ref().map(|c| c.top_k)).unwrap_or(10);
    if k == 0 {
        return Err(Error::Format("--k must be positive".into()).into());
    }
    let annotated = hierarchy_keywords(&tree, &ids, &texts, &tokenizer, k)?;
    let path = a.out.as_ref().unwrap_or(&a.tree);
    write_tree(path, &annotated, &ids, ClusterOrder::BySize)?;
    for (l, layer) in annotated.layers.iter().enumerate() {
        let mut clusters: Vec<_> = layer.iter().collect();
        clusters.sort_by(|x, y| y.members.len().cmp(&x.members.len()).then(x.id.cmp(&y.id)));
        for c in clusters {
            let words: Vec<&str> = c.keywords.iter().flatten().map(|(t, _)| t.as_str()).collect();
            say(out, format_args!("layer {} cluster {} ({} articles): {}\n", l + 1, c.id, c.members.len(), words.join(", ")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:0.25").unwrap(), Grid { lo: 0.0, hi: 1.0, step: 0.25 });
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("a:1:2").is_err());
    }

    #[test]
    fn help_exits_zero() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["mrlrac", "--help"], &mut o, &mut e), 0);
        assert!(String::from_utf8(o).unwrap().contains("loss-check"));
    }

    #[test]
    fn unknown_flag_is_input_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["mrlrac", "relsim", "--nope"], &mut o, &mut e), 2);
    }
}
