//! The `fmtc` command line: `gen`, `run` and `eval`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::out_of_sample;
use crate::error::{FmtcError, Result};
use crate::graph::DataMatrix;
use crate::io::{
    generate_synthetic, load_client_csv, load_labels, read_csv_matrix, read_json, split_indices,
    write_json, write_labels, write_matrix_csv, write_trace, RunConfig, SyntheticSpec,
};
use crate::metrics::{accuracy, nmi, rand_index, LabelVector};
use crate::orchestrator::fit_with_labels;

/// k-means restarts used for the final labels.
pub const RESTARTS: usize = 10;

#[derive(Debug, Parser)]
#[command(
    name = "fmtc",
    version,
    about = "Federated multi-task spectral clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-blob benchmark plus a starter config.
    Gen(GenArgs),
    /// Fit a model from a JSON config and write model, trace and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a fitted model on its training and held-out samples.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Model directory; defaults to `<output_dir>/model`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    features: usize,
    #[arg(long, default_value_t = 60)]
    samples: usize,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.0)]
    mean_shift: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Train/test row indices of one client.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    /// Absent when fewer than two samples are scored.
    pub ri: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClientReport {
    pub client: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub in_sample: Option<Scores>,
    pub out_of_sample: Option<Scores>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub clients: Vec<ClientReport>,
    pub mean_in_sample_acc: Option<f64>,
    pub mean_out_of_sample_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rounds: usize,
    pub converged: bool,
    pub fit_time_ms: f64,
    pub final_objective: Option<f64>,
    pub final_primal_residual: Option<f64>,
    #[serde(flatten)]
    pub eval: EvalReport,
}

fn scores(pred: Vec<usize>, truth: &LabelVector) -> Result<Option<Scores>> {
    if truth.is_empty() {
        return Ok(None);
    }
    let pred = LabelVector::new(pred);
    let ri = if truth.len() >= 2 {
        Some(rand_index(&pred, truth)?)
    } else {
        None
    };
    Ok(Some(Scores {
        acc: accuracy(&pred, truth)?,
        nmi: nmi(&pred, truth)?,
        ri,
    }))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

struct Client {
    x: DataMatrix,
    labels: Option<LabelVector>,
}

fn load_clients(cfg: &RunConfig) -> Result<Vec<Client>> {
    cfg.data_paths
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let lp = cfg.label_paths.as_ref().map(|l| l[t].as_path());
            let (x, labels) = load_client_csv(p, lp)?;
            Ok(Client { x, labels })
        })
        .collect()
}

fn model_file(dir: &Path, stem: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{t}.{ext}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FmtcError::io(dir, e))
}

fn evaluate(
    clients: &[Client],
    splits: &[ClientSplit],
    train_pred: &[Vec<usize>],
    w: &[DMatrix<f64>],
    centroids: &[DMatrix<f64>],
) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(clients.len());
    for (t, c) in clients.iter().enumerate() {
        let split = &splits[t];
        let (mut is, mut oos) = (None, None);
        if let Some(labels) = &c.labels {
            is = scores(train_pred[t].clone(), &labels.select(&split.train))?;
            if !split.test.is_empty() {
                let pred = out_of_sample(&c.x.select_rows(&split.test), &w[t], &centroids[t])?;
                oos = scores(pred, &labels.select(&split.test))?;
            }
        }
        reports.push(ClientReport {
            client: t,
            train_samples: split.train.len(),
            test_samples: split.test.len(),
            in_sample: is,
            out_of_sample: oos,
        });
    }
    Ok(EvalReport {
        mean_in_sample_acc: mean(reports.iter().filter_map(|r| r.in_sample.map(|s| s.acc))),
        mean_out_of_sample_acc: mean(
            reports
                .iter()
                .filter_map(|r| r.out_of_sample.map(|s| s.acc)),
        ),
        clients: reports,
    })
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        clients: args.clients,
        clusters: args.clusters,
        features: args.features,
        samples: args.samples,
        separation: args.separation,
        mean_shift: args.mean_shift,
        seed: args.seed,
    };
    let data = generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    let mut data_paths = Vec::new();
    let mut label_paths = Vec::new();
    for (t, (x, y)) in data.iter().enumerate() {
        let xp = PathBuf::from(format!("client_{t}.csv"));
        let yp = PathBuf::from(format!("labels_{t}.txt"));
        write_matrix_csv(&args.out.join(&xp), x.values())?;
        write_labels(&args.out.join(&yp), y.values())?;
        data_paths.push(xp);
        label_paths.push(yp);
    }
    let mut cfg = RunConfig::new(data_paths, PathBuf::from("out"));
    cfg.label_paths = Some(label_paths);
    cfg.hyper.clusters = args.clusters;
    cfg.hyper.seed = args.seed;
    let path = args.out.join("config.json");
    fs::write(&path, cfg.to_json_string()? + "\n").map_err(|e| FmtcError::io(&path, e))?;
    Ok(())
}

fn cmd_run(config: &Path) -> Result<RunMetrics> {
    let cfg = RunConfig::load(config)?;
    let clients = load_clients(&cfg)?;
    let splits: Vec<ClientSplit> = clients
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let (train, test) = split_indices(
                c.x.rows(),
                cfg.test_fraction,
                cfg.hyper.seed.wrapping_add(t as u64),
            );
            ClientSplit { train, test }
        })
        .collect();
    let train: Vec<DataMatrix> = clients
        .iter()
        .zip(&splits)
        .map(|(c, s)| DataMatrix::new(c.x.select_rows(&s.train)))
        .collect::<Result<_>>()?;
    let train_labels: Option<Vec<LabelVector>> = clients
        .iter()
        .zip(&splits)
        .map(|(c, s)| c.labels.as_ref().map(|l| l.select(&s.train)))
        .collect();

    let started = Instant::now();
    let model = fit_with_labels(&train, train_labels.as_deref(), &cfg.hyper)?;
    let fit_time_ms = started.elapsed().as_secs_f64() * 1e3;
    let km = model.cluster(RESTARTS)?;

    let model_dir = cfg.output_dir.join("model");
    create_dir(&model_dir)?;
    for (t, k) in km.iter().enumerate() {
        write_matrix_csv(&model_file(&model_dir, "W", t, "csv"), model.w(t))?;
        write_matrix_csv(&model_file(&model_dir, "F", t, "csv"), model.f(t))?;
        write_matrix_csv(&model_file(&model_dir, "centroids", t, "csv"), &k.centroids)?;
        write_labels(&model_file(&model_dir, "labels", t, "txt"), &k.labels)?;
    }
    write_json(&model_dir.join("split.json"), &splits)?;
    write_trace(&cfg.output_dir.join("trace.jsonl"), model.trace())?;

    let w: Vec<DMatrix<f64>> = (0..model.num_clients())
        .map(|t| model.w(t).clone())
        .collect();
    let centroids: Vec<DMatrix<f64>> = km.iter().map(|k| k.centroids.clone()).collect();
    let pred: Vec<Vec<usize>> = km.into_iter().map(|k| k.labels).collect();
    let last = model.trace().last();
    let metrics = RunMetrics {
        rounds: model.trace().len(),
        converged: model.converged(),
        fit_time_ms,
        final_objective: last.map(|r| r.objective),
        final_primal_residual: last.map(|r| r.primal_residual),
        eval: evaluate(&clients, &splits, &pred, &w, &centroids)?,
    };
    write_json(&cfg.output_dir.join("metrics.json"), &metrics)?;
    log::info!(
        "{} rounds, converged = {}, {:.1} ms",
        metrics.rounds,
        metrics.converged,
        fit_time_ms
    );
    Ok(metrics)
}

fn cmd_eval(config: &Path, model: Option<&Path>) -> Result<EvalReport> {
    let cfg = RunConfig::load(config)?;
    if cfg.label_paths.is_none() {
        return Err(FmtcError::Config(
            "eval needs label_paths in the config".into(),
        ));
    }
    let clients = load_clients(&cfg)?;
    let dir = model.map_or_else(|| cfg.output_dir.join("model"), Path::to_path_buf);
    let splits: Vec<ClientSplit> = read_json(&dir.join("split.json"))?;
    if splits.len() != clients.len() {
        return Err(FmtcError::DimensionMismatch(format!(
            "model has {} clients, config lists {}",
            splits.len(),
            clients.len()
        )));
    }
    let mut w = Vec::new();
    let mut centroids = Vec::new();
    let mut pred = Vec::new();
    for (t, split) in splits.iter().enumerate() {
        w.push(read_csv_matrix(&model_file(&dir, "W", t, "csv"))?);
        centroids.push(read_csv_matrix(&model_file(&dir, "centroids", t, "csv"))?);
        let p = load_labels(&model_file(&dir, "labels", t, "txt"))?;
        if p.len() != split.train.len() {
            return Err(FmtcError::DimensionMismatch(format!(
                "client {t}: {} stored labels for {} training samples",
                p.len(),
                split.train.len()
            )));
        }
        pred.push(p.values().to_vec());
    }
    evaluate(&clients, &splits, &pred, &w, &centroids)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Run { config } => cmd_run(&config).map(|_| ()),
        Command::Eval { config, model } => {
            let report = cmd_eval(&config, model.as_deref())?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| FmtcError::Internal(e.to_string()))?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| FmtcError::io("<stdout>", e))
        }
    }
}

/// Parses `argv` and runs the subcommand. Returns the process exit code;
/// failures print one diagnostic line to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("tip:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("fmtc: {}", line.join(" ").trim_start_matches("error: "));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fmtc: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_skip_ri_for_single_sample() {
        let s = scores(vec![0], &LabelVector::new(vec![1]))
            .unwrap()
            .unwrap();
        assert_eq!(s.acc, 1.0);
        assert_eq!(s.ri, None);
        assert!(scores(vec![], &LabelVector::new(vec![])).unwrap().is_none());
    }

    #[test]
    fn bad_flag_exits_nonzero() {
        assert_eq!(cli_main(["fmtc", "run", "--bogus"]), 2);
        assert_eq!(cli_main(["fmtc", "--help"]), 0);
    }

    #[test]
    fn mean_of_nothing_is_none() {
        assert_eq!(mean(std::iter::empty()), None);
        assert_eq!(mean([1.0, 2.0].into_iter()), Some(1.5));
    }
}
