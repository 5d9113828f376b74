//! Command implementations behind the `dhk` binary. Every command is a plain
//! function so that tests can drive it without spawning a process.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dhk_core::grouptriplet::DistanceMeasure;
use dhk_core::hierarchy::{cavitation_tree, LabelTree, NodeId, TreeError, WeightScheme};
use dhk_core::hkloss::{Aggregation, ScoreVector};
use dhk_core::inference::{infer_path, MetricsReport};
use dhk_core::signal::{
    encode_cache, featurize, flip_labels, format_dataset, parse_dataset, parse_record, sliding_window,
    spectrogram, synth_dataset, FeatureSpec, SignalError, SignalStream, WindowFn, SYNTH_SAMPLE_RATE,
};
use dhk_core::trainer::{
    decode_checkpoint, encode_checkpoint, evaluate, forward, randomized_gradient_check, train, GradCheckReport,
    Network, Objective, Sample, TrainConfig, TrainError, TrainHistory,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const TRAIN_FRACTION: f64 = 0.8;
pub const GRAD_CHECK_LIMIT: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("config field `{field}`: {reason}")]
    ConfigParse { field: String, reason: String },
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::ConfigParse { .. } => 1,
            CliError::Io { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig { field, reason } => CliError::ConfigParse { field: field.into(), reason },
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

/// Loads a tree file, or the built-in cavitation tree when no path is given.
pub fn load_tree(path: Option<&Path>) -> Result<LabelTree> {
    match path {
        None => Ok(cavitation_tree()),
        Some(p) => LabelTree::parse(&read_text(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
    }
}

pub fn load_dataset(tree: &LabelTree, path: &Path) -> Result<Vec<SignalStream>> {
    let text = read_text(path)?;
    let records = parse_dataset(tree, &text, SYNTH_SAMPLE_RATE)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(records.into_iter().map(|r| r.stream).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub features: FeatureSpec,
    pub tree: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub noise_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            features: FeatureSpec::default(),
            tree: None,
            data: None,
            out: None,
            noise_ratio: 0.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::ConfigParse { field: field.into(), reason: format!("{value:?}: {e}") })
}

fn config_err(field: &str, reason: impl Into<String>) -> CliError {
    CliError::ConfigParse { field: field.into(), reason: reason.into() }
}

pub fn parse_objective(v: &str) -> Result<Objective> {
    match v {
        "bce" => Ok(Objective::Bce),
        "ht" => Ok(Objective::Ht),
        "fht" => Ok(Objective::Fht),
        "dhk" => Ok(Objective::Dhk),
        _ => Err(config_err("loss", format!("{v:?} is not one of bce, ht, fht, dhk"))),
    }
}

pub fn parse_weights(v: &str) -> Result<WeightScheme> {
    match v {
        "none" => Ok(WeightScheme::None),
        "nhw" => Ok(WeightScheme::Nhw),
        "phw" => Ok(WeightScheme::Phw),
        _ => Err(config_err("weights", format!("{v:?} is not one of none, nhw, phw"))),
    }
}

/// Sets `mode` while keeping any previously configured smoothing strength.
pub fn parse_mode(v: &str, current: Aggregation) -> Result<Aggregation> {
    let beta = match current {
        Aggregation::Smooth { beta } => beta,
        Aggregation::Hard => DEFAULT_BETA,
    };
    match v {
        "hard" => Ok(Aggregation::Hard),
        "smooth" => Ok(Aggregation::Smooth { beta }),
        _ => Err(config_err("mode", format!("{v:?} is not one of hard, smooth"))),
    }
}

pub const DEFAULT_BETA: f64 = 50.0;

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut beta: Option<f64> = None;
        let mut mode: Option<String> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| config_err(&format!("line {}", k + 1), format!("expected `key = value`, got {line:?}")))?;
            let t = &mut cfg.train;
            let f = &mut cfg.features;
            match key {
                "tree" => cfg.tree = Some(base.join(value)),
                "data" => cfg.data = Some(base.join(value)),
                "out" => cfg.out = Some(base.join(value)),
                "seed" => t.seed = parse_num(key, value)?,
                "loss" => t.objective = parse_objective(value)?,
                "weights" => t.weights = parse_weights(value)?,
                "mode" => mode = Some(value.to_string()),
                "beta" => beta = Some(parse_num(key, value)?),
                "gamma" => t.gamma = parse_num(key, value)?,
                "m_eps" => t.m_eps = parse_num(key, value)?,
                "alpha" => t.alpha = parse_num(key, value)?,
                "distance" => {
                    t.distance = match value {
                        "cosine" => DistanceMeasure::Cosine,
                        "euclidean" => DistanceMeasure::Euclidean,
                        _ => return Err(config_err(key, format!("{value:?} is not one of cosine, euclidean"))),
                    }
                }
                "lr0" => t.lr0 = parse_num(key, value)?,
                "beta1" => t.betas.0 = parse_num(key, value)?,
                "beta2" => t.betas.1 = parse_num(key, value)?,
                "adam_eps" => t.adam_eps = parse_num(key, value)?,
                "epochs" => t.epochs = parse_num(key, value)?,
                "batch_size" => t.batch_size = parse_num(key, value)?,
                "restart_period" => t.restart_period = parse_num(key, value)?,
                "hidden" => {
                    t.hidden = value
                        .split(',')
                        .map(|w| parse_num(key, w.trim()))
                        .collect::<Result<Vec<usize>>>()?
                }
                "window" => f.window = parse_num(key, value)?,
                "step" => f.step = parse_num(key, value)?,
                "stft_window" => f.stft_window = parse_num(key, value)?,
                "stft_hop" => f.stft_hop = parse_num(key, value)?,
                "window_fn" => {
                    f.window_fn = match value {
                        "hann" => WindowFn::Hann,
                        "rect" => WindowFn::Rect,
                        _ => return Err(config_err(key, format!("{value:?} is not one of hann, rect"))),
                    }
                }
                "bands" => f.bands = parse_num(key, value)?,
                "noise_ratio" => cfg.noise_ratio = parse_num(key, value)?,
                _ => return Err(config_err(key, "unknown key")),
            }
        }
        if let Some(b) = beta {
            cfg.train.aggregation = Aggregation::Smooth { beta: b };
        }
        if let Some(m) = mode {
            cfg.train.aggregation = parse_mode(&m, cfg.train.aggregation)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&read_text(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.features.validate().map_err(|e| config_err("features", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(config_err("noise_ratio", format!("{} is outside [0, 1]", self.noise_ratio)));
        }
        Ok(())
    }
}

/// Seeded 80/20 split that keeps each leaf's streams in the same proportion.
/// Returns (train, test) stream indices in ascending order.
pub fn stratified_split(streams: &[SignalStream], leaves: &[NodeId], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for &leaf in leaves {
        let mut idx: Vec<usize> = (0..streams.len()).filter(|&i| streams[i].leaf == leaf).collect();
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * TRAIN_FRACTION).round() as usize;
        let n_train = if idx.len() > 1 { n_train.clamp(1, idx.len() - 1) } else { idx.len() };
        tr.extend_from_slice(&idx[..n_train]);
        te.extend_from_slice(&idx[n_train..]);
    }
    tr.sort_unstable();
    te.sort_unstable();
    (tr, te)
}

pub fn to_samples(streams: &[SignalStream], features: &FeatureSpec) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in streams {
        for f in featurize(s, features)? {
            out.push(Sample { features: f, leaf: s.leaf });
        }
    }
    Ok(out)
}

pub struct Experiment {
    pub network: Network,
    pub history: TrainHistory,
    pub train_metrics: MetricsReport,
    pub test_metrics: MetricsReport,
}

/// Split, inject label noise into the training part, featurize, train and
/// evaluate on the clean held-out part.
pub fn run_experiment(tree: &LabelTree, streams: &[SignalStream], cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    if streams.is_empty() {
        return Err(CliError::Validation("dataset is empty".into()));
    }
    let (tr, te) = stratified_split(streams, tree.leaves(), cfg.train.seed);
    let train_streams: Vec<SignalStream> = tr.iter().map(|&i| streams[i].clone()).collect();
    let test_streams: Vec<SignalStream> = te.iter().map(|&i| streams[i].clone()).collect();
    let noisy = flip_labels(&train_streams, cfg.noise_ratio, tree.leaves(), cfg.train.seed.wrapping_add(1))?;
    let train_samples = to_samples(&noisy, &cfg.features)?;
    let test_samples = to_samples(&test_streams, &cfg.features)?;
    let eval = if test_samples.is_empty() { None } else { Some(test_samples.as_slice()) };
    let (network, history) = train(tree, &train_samples, eval, &cfg.train)?;
    let train_metrics = evaluate(&network, tree, &train_samples)?;
    let test_metrics = if test_samples.is_empty() {
        train_metrics.clone()
    } else {
        evaluate(&network, tree, &test_samples)?
    };
    Ok(Experiment { network, history, train_metrics, test_metrics })
}

pub fn cmd_gen_data(
    tree_path: Option<&Path>,
    per_leaf: usize,
    length: usize,
    snr_db: f64,
    seed: u64,
    out: &Path,
) -> Result<usize> {
    let tree = load_tree(tree_path)?;
    let streams = synth_dataset(&tree, per_leaf, length, snr_db, seed)?;
    write_file(out, format_dataset(&tree, &streams)?)?;
    Ok(streams.len())
}

pub const MODEL_FILE: &str = "model.dhkm";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.txt";

/// Trains from a run config and writes the checkpoint, history table and the
/// held-out metrics into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<MetricsReport> {
    let tree = load_tree(cfg.tree.as_deref())?;
    let data = cfg.data.as_deref().ok_or_else(|| config_err("data", "no dataset path given"))?;
    let out = cfg.out.as_deref().ok_or_else(|| config_err("out", "no output directory given"))?;
    let streams = load_dataset(&tree, data)?;
    let exp = run_experiment(&tree, &streams, cfg)?;
    ensure_dir(out)?;
    write_file(&out.join(MODEL_FILE), encode_checkpoint(&exp.network, &cfg.features))?;
    write_file(&out.join(HISTORY_FILE), exp.history.to_csv())?;
    write_file(&out.join(METRICS_FILE), exp.test_metrics.to_text())?;
    Ok(exp.test_metrics)
}

fn load_model(tree: &LabelTree, path: &Path) -> Result<(Network, FeatureSpec)> {
    let (net, spec) = decode_checkpoint(&read_bytes(path)?)?;
    if net.out_dim() != tree.num_scored() {
        return Err(CliError::Validation(format!(
            "checkpoint head has {} outputs but the tree has {} non-root nodes",
            net.out_dim(),
            tree.num_scored()
        )));
    }
    Ok((net, spec))
}

/// Evaluates a checkpoint on a dataset; writes `metrics.txt` and
/// `metrics.json` when an output directory is given.
pub fn cmd_eval(model: &Path, data: &Path, tree_path: Option<&Path>, out: Option<&Path>) -> Result<MetricsReport> {
    let tree = load_tree(tree_path)?;
    let (net, spec) = load_model(&tree, model)?;
    let streams = load_dataset(&tree, data)?;
    if streams.is_empty() {
        return Err(CliError::Validation(format!("{}: dataset is empty", data.display())));
    }
    let report = evaluate(&net, &tree, &to_samples(&streams, &spec)?)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join(METRICS_FILE), report.to_text())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
        write_file(&dir.join("metrics.json"), json + "\n")?;
    }
    Ok(report)
}

/// Predicts the path of one dataset record. Scores are averaged over the
/// record's sliding windows.
pub fn cmd_infer(model: &Path, tree_path: Option<&Path>, record: &str, line_no: usize) -> Result<String> {
    let tree = load_tree(tree_path)?;
    let (net, spec) = load_model(&tree, model)?;
    let rec = parse_record(&tree, record, line_no, SYNTH_SAMPLE_RATE)?;
    let feats = featurize(&rec.stream, &spec)?;
    let mut mean = vec![0.0; tree.num_scored()];
    for f in &feats {
        let out = forward(&net, f)?;
        for (m, s) in mean.iter_mut().zip(out.scores.as_slice()) {
            *m += s / feats.len() as f64;
        }
    }
    let scores = ScoreVector::new(mean).map_err(|e| CliError::Internal(e.to_string()))?;
    let pred = infer_path(&tree, &scores).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut out = String::new();
    let _ = writeln!(out, "record: {}", rec.id);
    let _ = writeln!(out, "leaf: {}", tree.name(pred.leaf)?);
    let _ = writeln!(out, "path_score: {:.6}", pred.path_score);
    for &v in &pred.path {
        let depth = tree.depth(v)?;
        match v.score_index() {
            None => {
                let _ = writeln!(out, "{}{} (root)", "  ".repeat(depth), tree.name(v)?);
            }
            Some(i) => {
                let _ = writeln!(out, "{}{} {:.6}", "  ".repeat(depth), tree.name(v)?, scores.as_slice()[i]);
            }
        }
    }
    Ok(out)
}

/// Randomized smooth-mode gradient check. Returns the report and whether the
/// worst relative error is within [`GRAD_CHECK_LIMIT`].
pub fn cmd_grad_check(trials: usize, seed: u64, aggregation: Aggregation) -> Result<(GradCheckReport, bool)> {
    if trials == 0 {
        return Err(CliError::Validation("trials must be at least 1".into()));
    }
    let report = randomized_gradient_check(trials, seed, aggregation)?;
    let ok = report.checked > 0 && report.max_rel_error < GRAD_CHECK_LIMIT;
    Ok((report, ok))
}

pub fn cmd_tree_show(tree_path: Option<&Path>) -> Result<String> {
    let tree = load_tree(tree_path)?;
    let mut out = String::new();
    let _ = writeln!(out, "H: {}", tree.height());
    let _ = writeln!(out, "nodes: {}", tree.len());
    let _ = writeln!(out, "leaves: {}", tree.leaves().len());
    let mut stack = vec![tree.root()];
    while let Some(v) = stack.pop() {
        let depth = tree.depth(v)?;
        let marker = if tree.is_leaf(v) { " [leaf]" } else { "" };
        let _ = writeln!(out, "{}{} (depth {depth}){marker}", "  ".repeat(depth), tree.name(v)?);
        stack.extend(tree.children(v)?.iter().rev());
    }
    let names = tree
        .leaves()
        .iter()
        .map(|&l| tree.name(l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let _ = writeln!(out, "psi:\t{}", names.join("\t"));
    let mut max = 0;
    for (&a, name) in tree.leaves().iter().zip(&names) {
        let row = tree
            .leaves()
            .iter()
            .map(|&b| tree.tree_distance(a, b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        max = max.max(row.iter().copied().max().unwrap_or(0));
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{name}\t{}", cells.join("\t"));
    }
    let _ = writeln!(out, "max_psi: {max}");
    Ok(out)
}

/// Writes one spectrogram cache file per sliding window of every record.
pub fn cmd_preprocess(data: &Path, tree_path: Option<&Path>, spec: &FeatureSpec, out: &Path) -> Result<usize> {
    spec.validate()?;
    let tree = load_tree(tree_path)?;
    let text = read_text(data)?;
    let records = parse_dataset(&tree, &text, SYNTH_SAMPLE_RATE)
        .map_err(|e| CliError::Validation(format!("{}: {e}", data.display())))?;
    ensure_dir(out)?;
    let mut index = String::from("file\tleaf\tframes\tbins\n");
    let mut written = 0;
    for r in &records {
        for (k, w) in sliding_window(&r.stream, spec.window, spec.step)?.iter().enumerate() {
            let s = spectrogram(w, spec)?;
            let file = format!("{}_{k}.dhks", r.id);
            write_file(&out.join(&file), encode_cache(&s))?;
            let _ = writeln!(index, "{file}\t{}\t{}\t{}", tree.name(r.stream.leaf)?, s.frames(), s.bins());
            written += 1;
        }
    }
    write_file(&out.join("index.tsv"), index)?;
    Ok(written)
}

/// Per-class accuracy lines for quick terminal output.
pub fn summarize(report: &MetricsReport) -> String {
    let mut out = format!("accuracy: {:.4}\nf1: {:.4}\n", report.accuracy, report.f1);
    let by: &BTreeMap<String, f64> = &report.per_class_accuracy;
    for (k, v) in by {
        let _ = writeln!(out, "  {k}: {v:.4}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overrides_defaults_and_resolves_paths() {
        let text = "# run\nloss = fht  # no triplets\nweights = nhw\nbeta = 20\nhidden = 8, 4\ndata = d.tsv\n";
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.train.objective, Objective::Fht);
        assert_eq!(cfg.train.weights, WeightScheme::Nhw);
        assert_eq!(cfg.train.aggregation, Aggregation::Smooth { beta: 20.0 });
        assert_eq!(cfg.train.hidden, vec![8, 4]);
        assert_eq!(cfg.data.as_deref(), Some(Path::new("/base/d.tsv")));
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn mode_keeps_beta_regardless_of_key_order() {
        let a = RunConfig::parse("mode = smooth\nbeta = 7\n", Path::new(".")).unwrap();
        let b = RunConfig::parse("beta = 7\nmode = smooth\n", Path::new(".")).unwrap();
        assert_eq!(a.train.aggregation, b.train.aggregation);
        let hard = RunConfig::parse("beta = 7\nmode = hard\n", Path::new(".")).unwrap();
        assert_eq!(hard.train.aggregation, Aggregation::Hard);
        assert_eq!(parse_mode("smooth", Aggregation::Hard).unwrap(), Aggregation::Smooth { beta: DEFAULT_BETA });
    }

    #[test]
    fn config_errors_name_the_field() {
        let field = |text: &str| match RunConfig::parse(text, Path::new(".")) {
            Err(CliError::ConfigParse { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("epochs = many\n"), "epochs");
        assert_eq!(field("loss = mse\n"), "loss");
        assert_eq!(field("noise_ratio = 1.5\n"), "noise_ratio");
        assert_eq!(field("alpha = -1\n"), "alpha");
        assert_eq!(field("just words\n"), "line 1");
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(CliError::Validation(String::new()).exit_code(), 1);
        assert_eq!(config_err("x", "y").exit_code(), 1);
        assert_eq!(CliError::Io { path: "p".into(), reason: String::new() }.exit_code(), 2);
        assert_eq!(CliError::Internal(String::new()).exit_code(), 3);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let tree = cavitation_tree();
        let streams = synth_dataset(&tree, 10, 512, 20.0, 0).unwrap();
        let (tr, te) = stratified_split(&streams, tree.leaves(), 4);
        assert_eq!((tr.len(), te.len()), (40, 10));
        for &leaf in tree.leaves() {
            assert_eq!(te.iter().filter(|&&i| streams[i].leaf == leaf).count(), 2);
        }
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(stratified_split(&streams, tree.leaves(), 4), (tr, te));
    }
}
