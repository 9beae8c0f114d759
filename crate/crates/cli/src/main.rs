use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use cstp::bench::{run_bench, write_csv, BenchPlan};
use cstp::causal_graph::{hybrid, write_matrices_csv};
use cstp::datagen::{gen_scm, ScmConfig};
use cstp::dataset_io::{read_dataset, write_dataset};
use cstp::train::{
    attribute, chronological_split, evaluate, train, write_history_file, Metrics, PreparedData, TrainConfig,
};
use cstp::{checkpoint, CstpError};

#[derive(Parser)]
#[command(name = "cstp", version, about = "Multi-modal causal spatio-temporal forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic confounded dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its best checkpoint and history CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History CSV path (default: <out>.history.csv).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Report validation and test metrics of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Time the temporal encoders over a sweep of sequence lengths.
    Bench {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the node attribution matrix and the blended graph.
    Attrib {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset shapes, split sizes and observation counts.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, error: e.into() })
    }

    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| {
            let error: anyhow::Error = e.into();
            // Bad arguments discovered deep in the library are still usage errors.
            let code = match error.downcast_ref::<CstpError>() {
                Some(CstpError::InvalidArgument(_)) => 1,
                _ => 2,
            };
            Failure { code, error }
        })
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("CSTP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| anyhow!("CSTP_THREADS must be a positive integer, got {v:?}"))
            .usage(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(anyhow!("{what} {} does not exist", path.display())).usage()
    }
}

fn format_metrics(label: &str, m: &Metrics) -> String {
    let mape = m
        .mape
        .map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}%"));
    format!(
        "{label}: MAE={:.6} RMSE={:.6} MAPE={mape} (excluded {} of {})",
        m.mae, m.rmse, m.mape_excluded, m.count
    )
}

fn prepared(data_dir: &Path, config: &TrainConfig) -> Result<PreparedData, Failure> {
    require_file(data_dir, "dataset directory")?;
    let data = read_dataset(data_dir).data()?;
    PreparedData::new(&data, config.t_in, config.s_out, config.text_vocab).data()
}

fn report_split(state: &cstp::train::TrainState, prep: &PreparedData) -> Result<(), Failure> {
    for (label, range) in [("val", prep.split.val.clone()), ("test", prep.split.test.clone())] {
        match evaluate(state, prep, range) {
            Ok(m) => println!("{}", format_metrics(label, &m)),
            Err(e) => println!("{label}: not evaluated ({e})"),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { config, out } => {
            require_file(&config, "config")?;
            let cfg = ScmConfig::load(&config).usage()?;
            let data = gen_scm(&cfg).data()?;
            write_dataset(&out, &data).data()?;
            println!(
                "wrote {} nodes x {} steps, {} text and {} image observations to {}",
                data.series.nodes(),
                data.series.len(),
                data.text.len(),
                data.images.len(),
                out.display()
            );
        }
        Command::Train { data, config, out, history } => {
            require_file(&config, "config")?;
            let mut cfg = TrainConfig::load(&config).usage()?;
            cfg.threads = threads()?;
            let prep = prepared(&data, &cfg)?;
            let outcome = train(&prep, &cfg).data()?;
            checkpoint::save(&out, &outcome.best).data()?;
            let history = history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.csv");
                PathBuf::from(p)
            });
            write_history_file(&history, &outcome.history).data()?;
            println!(
                "trained {} epoch(s), best at epoch {}; checkpoint {}, history {}",
                outcome.history.len(),
                outcome.best.epoch,
                out.display(),
                history.display()
            );
            report_split(&outcome.best, &prep)?;
        }
        Command::Eval { data, ckpt } => {
            require_file(&ckpt, "checkpoint")?;
            let state = checkpoint::load(&ckpt).data()?;
            let mut prep = prepared(&data, &state.config)?;
            prep.set_norm(state.norm.clone()).data()?;
            report_split(&state, &prep)?;
        }
        Command::Bench { plan, out } => {
            require_file(&plan, "plan")?;
            let plan = BenchPlan::load(&plan).usage()?;
            let report = run_bench(&plan).data()?;
            let f = File::create(&out)
                .with_context(|| format!("creating {}", out.display()))
                .data()?;
            write_csv(BufWriter::new(f), &report).data()?;
            for (e, s) in &report.slopes {
                println!("{}: log-log slope in T = {s:.3}", e.name());
            }
        }
        Command::Attrib { data, ckpt, out } => {
            require_file(&ckpt, "checkpoint")?;
            let mut state = checkpoint::load(&ckpt).data()?;
            state.config.threads = threads()?;
            let mut prep = prepared(&data, &state.config)?;
            prep.set_norm(state.norm.clone()).data()?;
            let model = state.model().data()?;
            let att = attribute(&model, &state.params, &prep, &state.a_hat().data()?, &state.config, state.config.seed)
                .data()?;
            let blended = hybrid(&state.graph.prior, &att.normalized, state.config.lambda).data()?;
            let f = File::create(&out)
                .with_context(|| format!("creating {}", out.display()))
                .data()?;
            write_matrices_csv(BufWriter::new(f), &[("shap", &att.normalized), ("hybrid", &blended)]).data()?;
            println!("wrote attribution for {} nodes to {}", prep.nodes(), out.display());
        }
        Command::Inspect { data } => {
            require_file(&data, "dataset directory")?;
            let ds = read_dataset(&data).data()?;
            let s = &ds.series;
            println!("nodes: {}", s.nodes());
            println!("steps: {}", s.len());
            println!("channels: {}", s.channels());
            println!("text observations: {}", ds.text.len());
            println!("image observations: {}", ds.images.len());
            if let Some([h, w, c]) = ds.image_shape() {
                println!("image shape: {h}x{w}x{c}");
            }
            println!("confounder trace: {}", if ds.s_true.is_some() { "present" } else { "absent" });
            let cfg = TrainConfig::default();
            match chronological_split(s.len(), cfg.t_in + cfg.s_out) {
                Ok(sp) => println!(
                    "split (train/val/test): {}/{}/{}",
                    sp.train.len(),
                    sp.val.len(),
                    sp.test.len()
                ),
                Err(e) => println!("split: unavailable ({e})"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
