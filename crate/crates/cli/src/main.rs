//! `clear-audit`: run the latent-space rating audit pipeline stage by stage.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clear_core::latent::Metric;

#[derive(Parser, Debug)]
#[command(name = "clear-audit", version, about = "Contrastive latent-space audit of building energy ratings")]
struct Cli {
    /// JSON config; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, fanned out to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DirArgs {
    /// Working directory holding inputs and outputs.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Records CSV (default `<dir>/records.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Schema JSON (default `<dir>/schema.json`).
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Fine,
    Coarse,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Mlp,
    Forest,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic building stock with known corruptions.
    Synth {
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        building_types: Option<usize>,
        #[arg(long)]
        label_noise: Option<f64>,
        #[arg(long)]
        feature_noise: Option<f64>,
        #[arg(long)]
        score_noise: Option<f64>,
    },
    /// Split records, fit the preprocessing state on the training part and encode every record.
    Preprocess {
        #[command(flatten)]
        io: DirArgs,
        #[arg(long)]
        iqr_multiplier: Option<f64>,
        #[arg(long)]
        val_frac: Option<f64>,
        #[arg(long)]
        test_frac: Option<f64>,
    },
    /// Rank source columns by random-forest importance and keep the top ones.
    SelectFeatures {
        #[command(flatten)]
        io: DirArgs,
        /// Number of columns to keep.
        #[arg(long)]
        top: Option<usize>,
        /// File of column names never to keep, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        n_trees: Option<usize>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        min_leaf: Option<usize>,
    },
    /// Contrastive pretraining of the encoder on the training partition.
    Pretrain {
        #[command(flatten)]
        io: DirArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        corruption: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Encode every record into the latent space.
    Embed {
        #[command(flatten)]
        io: DirArgs,
    },
    /// PCA projection of the embeddings for plotting.
    Project {
        #[command(flatten)]
        io: DirArgs,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
        components: u8,
    },
    /// Nearest labelled neighbours of one record.
    Neighbors {
        #[command(flatten)]
        io: DirArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Flag records whose latent neighbours carry distant ratings.
    Audit {
        #[command(flatten)]
        io: DirArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        /// Feature tables written for this many of the most divergent flagged records.
        #[arg(long, default_value_t = 10)]
        tables: usize,
    },
    /// Supervised rating baseline evaluated on the test partition.
    Baseline {
        #[command(flatten)]
        io: DirArgs,
        #[arg(long, value_enum, default_value = "both")]
        granularity: GranularityArg,
        #[arg(long, value_enum, default_value = "mlp")]
        model: ModelArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Bundle audit summary, evaluation metrics and detection scores into one JSON.
    Report {
        #[command(flatten)]
        io: DirArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = config::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth { out, n, building_types, label_noise, feature_noise, score_noise } => {
            let s = &mut config.synth;
            s.n_rows = n.unwrap_or(s.n_rows);
            s.n_building_types = building_types.unwrap_or(s.n_building_types);
            s.label_noise_rate = label_noise.unwrap_or(s.label_noise_rate);
            s.feature_corruption_rate = feature_noise.unwrap_or(s.feature_corruption_rate);
            s.score_noise = score_noise.unwrap_or(s.score_noise);
            commands::synth(&out, &config)
        }
        Command::Preprocess { io, iqr_multiplier, val_frac, test_frac } => {
            config.iqr_multiplier = iqr_multiplier.unwrap_or(config.iqr_multiplier);
            if val_frac.is_some() || test_frac.is_some() {
                let s = &mut config.split;
                s.val_frac = val_frac.unwrap_or(s.val_frac);
                s.test_frac = test_frac.unwrap_or(s.test_frac);
                s.train_frac = 1.0 - s.val_frac - s.test_frac;
            }
            commands::preprocess(&layout(&io), &config)
        }
        Command::SelectFeatures { io, top, exclude, n_trees, max_depth, min_leaf } => {
            config.top_features = top.unwrap_or(config.top_features);
            let f = &mut config.forest;
            f.n_trees = n_trees.unwrap_or(f.n_trees);
            f.max_depth = max_depth.unwrap_or(f.max_depth);
            f.min_leaf = min_leaf.unwrap_or(f.min_leaf);
            commands::select_features(&layout(&io), &config, exclude.as_deref())
        }
        Command::Pretrain { io, epochs, batch_size, lr, corruption, temperature } => {
            let s = &mut config.scarf;
            s.epochs = epochs.unwrap_or(s.epochs);
            s.batch_size = batch_size.unwrap_or(s.batch_size);
            s.learning_rate = lr.unwrap_or(s.learning_rate);
            s.corruption_rate = corruption.unwrap_or(s.corruption_rate);
            s.temperature = temperature.unwrap_or(s.temperature);
            commands::pretrain(&layout(&io), &config)
        }
        Command::Embed { io } => commands::embed(&layout(&io)),
        Command::Project { io, components } => commands::project(&layout(&io), usize::from(components)),
        Command::Neighbors { io, id, k, metric } => {
            let k = k.unwrap_or(config.audit.k);
            let metric = metric.map_or(config.audit.metric, Metric::from);
            commands::neighbors(&layout(&io), &id, k, metric)
        }
        Command::Audit { io, k, threshold, radius, metric, tables } => {
            let a = &mut config.audit;
            a.k = k.unwrap_or(a.k);
            a.spread_threshold = threshold.unwrap_or(a.spread_threshold);
            a.radius = radius.or(a.radius);
            a.metric = metric.map_or(a.metric, Metric::from);
            commands::audit(&layout(&io), &config, tables)
        }
        Command::Baseline { io, granularity, model, epochs, lr } => {
            let c = &mut config.classifier;
            c.epochs = epochs.unwrap_or(c.epochs);
            c.learning_rate = lr.unwrap_or(c.learning_rate);
            commands::baseline(&layout(&io), &config, granularity, model)
        }
        Command::Report { io } => commands::report(&layout(&io)),
    }
}

fn layout(io: &DirArgs) -> config::Layout {
    config::Layout::new(&io.dir, io.data.clone(), io.schema.clone())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLEAR_AUDIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
