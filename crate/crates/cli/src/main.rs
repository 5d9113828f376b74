use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dhk_cli::{
    cmd_eval, cmd_gen_data, cmd_grad_check, cmd_infer, cmd_preprocess, cmd_train, cmd_tree_show, load_tree,
    parse_mode, parse_objective, parse_weights, summarize, CliError, RunConfig,
};
use dhk_core::hkloss::Aggregation;

#[derive(Parser)]
#[command(name = "dhk", version, about = "Hierarchical fault-intensity diagnosis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical signal dataset.
    GenData {
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        per_leaf: usize,
        #[arg(long, default_value_t = 4096)]
        length: usize,
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write spectrogram caches for every sliding window of a dataset.
    Preprocess {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; flags override values from the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["bce", "ht", "fht", "dhk"])]
        loss: Option<String>,
        #[arg(long, value_parser = ["none", "nhw", "phw"])]
        weights: Option<String>,
        #[arg(long, value_parser = ["hard", "smooth"])]
        mode: Option<String>,
        #[arg(long)]
        noise_ratio: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the root-to-leaf path of one dataset record.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tree: Option<PathBuf>,
        /// 1-based record line in the dataset file.
        #[arg(long, default_value_t = 1)]
        line: usize,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = ["hard", "smooth"], default_value = "smooth")]
        mode: String,
    },
    /// Print a tree with depths, leaf markers and pairwise leaf distances.
    TreeShow {
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Print the canonical edge list instead.
        #[arg(long)]
        edges: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { tree, per_leaf, length, snr, seed, out } => {
            let n = cmd_gen_data(tree.as_deref(), per_leaf, length, snr, seed, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Preprocess { config, tree, data, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let tree = tree.or(cfg.tree);
            let n = cmd_preprocess(&data, tree.as_deref(), &cfg.features, &out)?;
            println!("wrote {n} spectrograms to {}", out.display());
        }
        Command::Train { config, tree, data, out, seed, loss, weights, mode, noise_ratio } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.tree = tree.or(cfg.tree);
            cfg.data = data.or(cfg.data);
            cfg.out = out.or(cfg.out);
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(l) = loss {
                cfg.train.objective = parse_objective(&l)?;
            }
            if let Some(w) = weights {
                cfg.train.weights = parse_weights(&w)?;
            }
            if let Some(m) = mode {
                cfg.train.aggregation = parse_mode(&m, cfg.train.aggregation)?;
            }
            if let Some(r) = noise_ratio {
                cfg.noise_ratio = r;
            }
            cfg.validate()?;
            let report = cmd_train(&cfg)?;
            print!("{}", summarize(&report));
        }
        Command::Eval { model, data, tree, out } => {
            let report = cmd_eval(&model, &data, tree.as_deref(), out.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Infer { model, data, tree, line } => {
            let text = std::fs::read_to_string(&data)
                .map_err(|e| CliError::Io { path: data.clone(), reason: e.to_string() })?;
            let record = text
                .lines()
                .nth(line.saturating_sub(1))
                .filter(|_| line >= 1)
                .ok_or_else(|| CliError::Validation(format!("{}: no record on line {line}", data.display())))?;
            print!("{}", cmd_infer(&model, tree.as_deref(), record, line)?);
        }
        Command::GradCheck { trials, seed, mode } => {
            let agg = parse_mode(&mode, Aggregation::Smooth { beta: dhk_cli::DEFAULT_BETA })?;
            let (report, ok) = cmd_grad_check(trials, seed, agg)?;
            print!("{}", report.to_text());
            if !ok {
                return Err(CliError::Internal(format!(
                    "max relative error {:.3e} exceeds {:.0e}",
                    report.max_rel_error,
                    dhk_cli::GRAD_CHECK_LIMIT
                )));
            }
        }
        Command::TreeShow { tree, edges } => {
            if edges {
                print!("{}", load_tree(tree.as_deref())?.to_edge_text());
            } else {
                print!("{}", cmd_tree_show(tree.as_deref())?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
