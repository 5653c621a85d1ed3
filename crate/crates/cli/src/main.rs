use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsagcl_core::config::ExperimentConfig;
use fedsagcl_core::experiment::{aggregate_seeds, read_runs, run_experiment, summary_csv};
use fedsagcl_core::graph::{generate_sbm, load_graph, save_graph, SbmConfig};
use fedsagcl_core::partition::{modularity, Partitioner};
use fedsagcl_core::Error;

/// Log filter variable, e.g. `FEDSAGCL_LOG=debug`.
const LOG_ENV: &str = "FEDSAGCL_LOG";

#[derive(Parser)]
#[command(name = "fedsagcl", version, about = "Semi-asynchronous federated graph learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config (TOML, or JSON by extension).
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize the stored runs in a directory.
    Summarize {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Partition a graph file and print `<node> <client>` lines.
    Partition {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "louvain")]
        method: String,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a stochastic block model graph file.
    GenSbm {
        /// Comma-separated block sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = 0.1)]
        intra: f64,
        #[arg(long, default_value_t = 0.005)]
        inter: f64,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn run(config: PathBuf) -> Result<(), Failure> {
    // Anything that goes wrong before the config is in hand is the user's config.
    let cfg = ExperimentConfig::from_path(&config).map_err(Failure::Config)?;
    log::info!("config {} hash {}", config.display(), cfg.hash());
    let result = run_experiment(&cfg)?;
    print!("{}", summary_csv(&result.summary));
    Ok(())
}

fn summarize(dir: PathBuf, target: Option<f64>) -> Result<(), Failure> {
    if let Some(t) = target {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Failure::Config(Error::Config {
                key: "target".into(),
                message: "must lie in (0, 1]".into(),
            }));
        }
    }
    let runs = read_runs(&dir)?;
    if runs.is_empty() {
        return Err(Failure::Runtime(Error::Validation(format!("no runs found in {}", dir.display()))));
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "run,final_mean_acc,trips_to_target")?;
    for r in &runs {
        let trips = match target.map(|t| r.trips_to_target(t)) {
            Some(Some(n)) => n.to_string(),
            Some(None) => "NOT_REACHED".into(),
            None => String::new(),
        };
        writeln!(out, "{},{},{trips}", r.name, r.final_mean_acc())?;
    }
    // Runs are grouped by the name before `_seed`.
    let mut groups: Vec<(&str, Vec<&fedsagcl_core::experiment::StoredRun>)> = Vec::new();
    for r in &runs {
        let key = r.name.split("_seed").next().unwrap_or(&r.name);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    writeln!(out)?;
    writeln!(out, "group,metric,mean,half_width,seeds")?;
    for (key, members) in groups {
        let finals: Vec<f64> = members.iter().map(|r| r.final_mean_acc()).collect();
        let mut rows = vec![aggregate_seeds("final_mean_acc", &finals)?];
        if let Some(t) = target {
            let reached: Vec<f64> = members.iter().filter_map(|r| r.trips_to_target(t)).map(|n| n as f64).collect();
            if !reached.is_empty() {
                rows.push(aggregate_seeds("trips_to_target", &reached)?);
            }
            if reached.len() < members.len() {
                log::warn!("{key}: {} of {} runs never reached {t}", members.len() - reached.len(), members.len());
            }
        }
        for row in rows {
            writeln!(out, "{key},{},{},{},{}", row.metric, row.mean, row.half_width, row.seeds)?;
        }
    }
    Ok(())
}

fn partition(input: PathBuf, method: &str, clients: usize, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    let partitioner: Partitioner = method.parse()?;
    let g = load_graph(&input)?;
    let a = partitioner.run(&g, clients, seed)?;
    log::info!(
        "{} nodes into {} clients, sizes {:?}, cut edges {}, modularity {:.4}",
        g.node_count(),
        a.num_clients(),
        a.sizes(),
        a.cut_edges(&g),
        modularity(&g, a.client_of())
    );
    let mut text = String::new();
    for (v, c) in a.client_of().iter().enumerate() {
        text.push_str(&format!("{v} {c}\n"));
    }
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => run(config),
        Command::Summarize { dir, target } => summarize(dir, target),
        Command::Partition { input, method, clients, seed, out } => partition(input, &method, clients, seed, out),
        Command::GenSbm { blocks, intra, inter, features, noise, seed, out } => {
            let cfg = SbmConfig {
                block_sizes: blocks,
                intra_prob: intra,
                inter_prob: inter,
                feature_dim: features,
                feature_noise: noise,
                seed,
            };
            generate_sbm(&cfg).and_then(|g| {
                log::info!("{} nodes, {} edges -> {}", g.node_count(), g.edge_count(), out.display());
                save_graph(&g, &out)
            }).map_err(Failure::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
