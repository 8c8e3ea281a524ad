//! Command-line front end: ingest trips, build the station graph, train,
//! evaluate, forecast, and export plot data. Exit codes: 0 success,
//! 1 usage/config error, 2 data error, 3 numerical failure.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stflow::artifact::{self, RunManifest};
use stflow::checkpoint::Checkpoint;
use stflow::config::RunConfig;
use stflow::error::{Error, Result};
use stflow::graph::{distance_matrix, gaussian_adjacency, normalize, PropagationOperator};
use stflow::ingest::{
    self, parse_timestamp, parse_trips, traffic_stats, IngestReport, RegistryBuilder,
    StationRegistry, TrafficBuilder, TrafficTensor,
};
use stflow::pipeline::{
    baseline_historical_average, baseline_persistence, evaluate, export_predictions, fit_normalizer,
    forecast_at, split_by_time, train, WindowedDataset,
};
use stflow::stgcn::ModelParams;

#[derive(Parser)]
#[command(
    name = "stflow",
    about = "Bike-share traffic forecasting with a spatio-temporal graph convolutional model",
    version
)]
struct Cli {
    /// Configuration file (flat `key = value`, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the raw trip CSV into a registry, traffic tensor, and stats.
    Ingest(IngestArgs),
    /// Build the distance matrix and propagation operator from a registry.
    BuildGraph(BuildGraphArgs),
    /// Train the model; writes a checkpoint and the epoch history.
    Train(TrainArgs),
    /// Score a checkpoint on the holdout split, with baselines.
    Evaluate(CheckpointArg),
    /// Forecast the next bins from history ending at a timestamp.
    Predict(PredictArgs),
    /// Export plot-ready CSV data (traffic figures; plus prediction
    /// figures when a checkpoint is given).
    ExportPlots(ExportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Trip CSV path; defaults to the configured `data.trips_csv`.
    #[arg(long)]
    trips: Option<PathBuf>,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Registry CSV; defaults to `<out>/registry.csv`.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Kernel bandwidth in km^2, or `auto`.
    #[arg(long)]
    sigma_sq: Option<String>,
    /// Sparsity threshold in [0, 1).
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Restrict to the k busiest stations (0 keeps all).
    #[arg(long)]
    top_stations: Option<usize>,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint path; defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Forecast start, `YYYY-MM-DD HH:MM:SS` on a 30-minute edge.
    #[arg(long)]
    at: String,
}

#[derive(Args)]
struct ExportArgs {
    /// Optional checkpoint for the prediction figures.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    match cli.command {
        Command::Ingest(args) => cmd_ingest(&config, &args),
        Command::BuildGraph(args) => cmd_build_graph(&config, &args),
        Command::Train(args) => cmd_train(&config, &args),
        Command::Evaluate(args) => cmd_evaluate(&config, &args),
        Command::Predict(args) => cmd_predict(&config, &args),
        Command::ExportPlots(args) => cmd_export_plots(&config, &args),
    }
}

struct OutPaths {
    dir: PathBuf,
}

impl OutPaths {
    fn new(config: &RunConfig) -> Self {
        OutPaths {
            dir: config.out_dir.clone(),
        }
    }
    fn registry(&self) -> PathBuf {
        self.dir.join("registry.csv")
    }
    fn traffic_bin(&self) -> PathBuf {
        self.dir.join("traffic.bin")
    }
    fn traffic_csv(&self) -> PathBuf {
        self.dir.join("traffic.csv")
    }
    fn ingest_report(&self) -> PathBuf {
        self.dir.join("ingest_report.txt")
    }
    fn distance_bin(&self) -> PathBuf {
        self.dir.join("distance.bin")
    }
    fn distance_csv(&self) -> PathBuf {
        self.dir.join("distance.csv")
    }
    fn propagation_bin(&self) -> PathBuf {
        self.dir.join("propagation.bin")
    }
    fn propagation_csv(&self) -> PathBuf {
        self.dir.join("propagation.csv")
    }
    fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
    fn metrics_txt(&self) -> PathBuf {
        self.dir.join("metrics.txt")
    }
    fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    fn forecast(&self) -> PathBuf {
        self.dir.join("forecast.csv")
    }
    fn predictions(&self) -> PathBuf {
        self.dir.join("predictions.csv")
    }
    fn plots(&self, name: &str) -> PathBuf {
        self.dir.join("plots").join(name)
    }
    fn manifest(&self, command: &str) -> PathBuf {
        self.dir.join(format!("manifest-{command}.json"))
    }
}

fn cmd_ingest(config: &RunConfig, args: &IngestArgs) -> Result<()> {
    let trips_path = args.trips.clone().unwrap_or_else(|| config.trips_csv.clone());
    let out = OutPaths::new(config);

    // Pass 1: station registry (a single sequential reduction).
    let mut report = IngestReport::default();
    let mut builder = RegistryBuilder::new();
    let file = File::open(&trips_path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", trips_path.display())))?;
    for trip in parse_trips(BufReader::new(file), &mut report)? {
        builder.add(&trip?);
    }
    let registry = builder.finish()?;

    // Pass 2: traffic aggregation over the configured range.
    let mut report2 = IngestReport::default();
    let mut traffic_builder = TrafficBuilder::new(&registry, config.range_start, config.range_end)?;
    let file = File::open(&trips_path)?;
    for trip in parse_trips(BufReader::new(file), &mut report2)? {
        traffic_builder.add(&trip?)?;
    }
    let traffic = traffic_builder.finish();
    debug_assert_eq!(report, report2);

    artifact::write_registry(&out.registry(), &registry)?;
    artifact::write_traffic(&out.traffic_bin(), &traffic)?;
    artifact::write_traffic_csv(&out.traffic_csv(), &traffic)?;
    artifact::write_ingest_report(&out.ingest_report(), &report)?;

    let stats = traffic_stats(&traffic)?;
    artifact::write_per_step_stats(&out.plots("fig1_per_step_mean.csv"), &traffic, &stats)?;
    artifact::write_per_station_stats(&out.plots("fig2_per_station_mean.csv"), &registry, &stats)?;
    artifact::write_histogram(&out.plots("fig2_histogram.csv"), &stats.histogram)?;

    let mut manifest = RunManifest::new("ingest", &config.hash(), config.seed);
    manifest.record_input(&trips_path)?;
    manifest.write(&out.manifest("ingest"))?;

    println!(
        "ingest: {} rows read, {} kept, {} stations, {} bins, total traffic {}",
        report.rows_read,
        report.rows_kept,
        registry.len(),
        traffic.t_bins(),
        traffic.total()
    );
    Ok(())
}

/// Resolve the kernel bandwidth: explicit value or the squared off-diagonal
/// distance spread.
fn resolve_sigma_sq(config_sigma: Option<f64>, d: &stflow::graph::DistanceMatrix) -> f64 {
    config_sigma.unwrap_or_else(|| {
        let s = d.off_diagonal_std();
        if s > 0.0 {
            s * s
        } else {
            1.0
        }
    })
}

fn cmd_build_graph(config: &RunConfig, args: &BuildGraphArgs) -> Result<()> {
    let out = OutPaths::new(config);
    let registry_path = args.registry.clone().unwrap_or_else(|| out.registry());
    let registry = artifact::read_registry(&registry_path)?;

    let sigma_override = match args.sigma_sq.as_deref() {
        None => config.sigma_sq,
        Some("auto") => None,
        Some(v) => Some(v.parse().map_err(|_| {
            Error::Config(format!("--sigma-sq: cannot parse {v:?} (want a number or `auto`)"))
        })?),
    };
    let epsilon = args.epsilon.unwrap_or(config.epsilon);

    let d = distance_matrix(&registry);
    let sigma_sq = resolve_sigma_sq(sigma_override, &d);
    let adjacency = gaussian_adjacency(&d, sigma_sq, epsilon)?;
    let operator = normalize(&adjacency);

    artifact::write_distance_matrix(&out.distance_bin(), &d)?;
    artifact::write_matrix_csv(&out.distance_csv(), d.n(), d.values())?;
    artifact::write_propagation(&out.propagation_bin(), &operator)?;
    artifact::write_matrix_csv(&out.propagation_csv(), operator.n(), operator.values())?;

    let mut manifest = RunManifest::new("build-graph", &config.hash(), config.seed);
    manifest.record_input(&registry_path)?;
    manifest.write(&out.manifest("build-graph"))?;

    let edges = adjacency.values().iter().filter(|&&w| w > 0.0).count() / 2;
    println!(
        "build-graph: {} stations, sigma_sq {:.6}, epsilon {}, {} edges",
        registry.len(),
        sigma_sq,
        epsilon,
        edges
    );
    Ok(())
}

/// Load traffic and registry, apply the busiest-station restriction, and
/// rebuild the propagation operator the model will use.
fn load_model_inputs(
    config: &RunConfig,
    out: &OutPaths,
    top_stations: usize,
) -> Result<(TrafficTensor, StationRegistry, PropagationOperator, f64)> {
    let traffic = artifact::read_traffic(&out.traffic_bin())?;
    let registry = artifact::read_registry(&out.registry())?;
    if traffic.n_stations() != registry.len() {
        return Err(Error::Data(format!(
            "traffic tensor covers {} stations, registry has {}",
            traffic.n_stations(),
            registry.len()
        )));
    }
    let (traffic, registry) = if top_stations > 0 && top_stations < registry.len() {
        let keep = traffic.top_stations(top_stations);
        (traffic.select_stations(&keep)?, registry.subset(&keep)?)
    } else {
        (traffic, registry)
    };
    let d = distance_matrix(&registry);
    let sigma_sq = resolve_sigma_sq(config.sigma_sq, &d);
    let operator = normalize(&gaussian_adjacency(&d, sigma_sq, config.epsilon)?);
    Ok((traffic, registry, operator, sigma_sq))
}

fn cmd_train(config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let out = OutPaths::new(config);
    let top_stations = args.top_stations.unwrap_or(config.top_stations);
    let (traffic, registry, operator, sigma_sq) = load_model_inputs(config, &out, top_stations)?;

    let model_config = config.model_config(registry.len());
    model_config.validate()?;
    let dataset = WindowedDataset::new(&traffic, config.history_steps, config.horizon_steps)?;
    let splits = split_by_time(&dataset, &config.split_spec())?;
    let normalizer = fit_normalizer(&dataset, &splits.train)?;
    let opts = config.train_options();

    let outcome = train(&model_config, &opts, &dataset, &splits, &normalizer, &operator)?;

    let checkpoint = Checkpoint {
        model: model_config,
        normalizer,
        sigma_sq,
        epsilon: config.epsilon,
        top_stations,
        registry_fingerprint: registry.fingerprint(),
        precision: opts.precision,
        params: outcome.params.to_flat_f64(),
    };
    checkpoint.save(&out.checkpoint())?;
    artifact::write_history(&out.history(), &outcome.history)?;

    let mut manifest = RunManifest::new("train", &config.hash(), config.seed);
    manifest.record_input(&out.traffic_bin())?;
    manifest.record_input(&out.registry())?;
    manifest.write(&out.manifest("train"))?;

    println!(
        "train: {} stations, {} epochs ({}), best val loss {:.6} at epoch {}, final val loss {:.6}",
        registry.len(),
        outcome.history.len(),
        if outcome.stopped_early { "early stop" } else { "full run" },
        outcome.best_val_loss,
        outcome.best_epoch,
        outcome.final_val_loss,
    );
    Ok(())
}

/// Load everything evaluate/predict/export need around a checkpoint, and
/// verify the station-order fingerprint.
#[allow(clippy::type_complexity)]
fn load_checkpoint_world(
    out: &OutPaths,
    checkpoint_path: Option<&Path>,
) -> Result<(
    Checkpoint,
    ModelParams<f64>,
    TrafficTensor,
    StationRegistry,
    PropagationOperator,
)> {
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.checkpoint());
    let checkpoint = Checkpoint::load(&path)?;

    let traffic = artifact::read_traffic(&out.traffic_bin())?;
    let registry = artifact::read_registry(&out.registry())?;
    let (traffic, registry) =
        if checkpoint.top_stations > 0 && checkpoint.top_stations < registry.len() {
            let keep = traffic.top_stations(checkpoint.top_stations);
            (traffic.select_stations(&keep)?, registry.subset(&keep)?)
        } else {
            (traffic, registry)
        };
    checkpoint.verify_registry(&registry)?;

    let d = distance_matrix(&registry);
    let operator = normalize(&gaussian_adjacency(&d, checkpoint.sigma_sq, checkpoint.epsilon)?);
    let params: ModelParams<f64> = checkpoint.model_params()?;
    Ok((checkpoint, params, traffic, registry, operator))
}

fn cmd_evaluate(config: &RunConfig, args: &CheckpointArg) -> Result<()> {
    let out = OutPaths::new(config);
    let (checkpoint, params, traffic, _registry, operator) =
        load_checkpoint_world(&out, args.checkpoint.as_deref())?;

    let dataset = WindowedDataset::new(
        &traffic,
        checkpoint.model.history_steps,
        checkpoint.model.horizon_steps,
    )?;
    let splits = split_by_time(&dataset, &config.split_spec())?;
    let report = evaluate(
        &params,
        &checkpoint.model,
        &operator,
        &dataset,
        &splits.test,
        &checkpoint.normalizer,
        config.batch_size,
    )?;
    artifact::write_metrics(&out.metrics_txt(), &out.metrics_csv(), &report)?;

    let persistence = baseline_persistence(&dataset, &splits.test)?;
    artifact::write_metrics(
        &out.dir.join("baseline_persistence.txt"),
        &out.dir.join("baseline_persistence.csv"),
        &persistence,
    )?;
    let historical = baseline_historical_average(&dataset, &splits)?;
    artifact::write_metrics(
        &out.dir.join("baseline_historical.txt"),
        &out.dir.join("baseline_historical.csv"),
        &historical,
    )?;

    let mut manifest = RunManifest::new("evaluate", &config.hash(), config.seed);
    manifest.record_input(&out.traffic_bin())?;
    manifest.record_input(&out.registry())?;
    manifest.write(&out.manifest("evaluate"))?;

    println!(
        "evaluate: mae {:.4}, rmse {:.4}, masked mape {:.2}% (persistence mae {:.4}, historical mae {:.4})",
        report.mae, report.rmse, report.mape_masked, persistence.mae, historical.mae
    );
    Ok(())
}

fn cmd_predict(config: &RunConfig, args: &PredictArgs) -> Result<()> {
    let out = OutPaths::new(config);
    let (checkpoint, params, traffic, registry, operator) =
        load_checkpoint_world(&out, args.checkpoint.checkpoint.as_deref())?;
    let at = parse_timestamp(&args.at).map_err(|e| Error::Config(format!("--at: {e}")))?;

    let values = forecast_at(
        &params,
        &checkpoint.model,
        &operator,
        &traffic,
        &checkpoint.normalizer,
        at,
    )?;
    let n = registry.len();
    let mut rows = Vec::with_capacity(values.len());
    for h in 0..checkpoint.model.horizon_steps {
        let ts = at + h as i64 * ingest::BIN_SECONDS;
        for s in 0..n {
            rows.push((ts, registry.station(s).id.clone(), values[h * n + s]));
        }
    }
    artifact::write_forecast(&out.forecast(), &rows)?;

    let mut manifest = RunManifest::new("predict", &config.hash(), config.seed);
    manifest.record_input(&out.traffic_bin())?;
    manifest.record_input(&out.registry())?;
    manifest.write(&out.manifest("predict"))?;

    println!(
        "predict: {} stations x {} steps from {}",
        n, checkpoint.model.horizon_steps, args.at
    );
    Ok(())
}

fn cmd_export_plots(config: &RunConfig, args: &ExportArgs) -> Result<()> {
    let out = OutPaths::new(config);
    let traffic = artifact::read_traffic(&out.traffic_bin())?;
    let registry = artifact::read_registry(&out.registry())?;

    let stats = traffic_stats(&traffic)?;
    artifact::write_per_step_stats(&out.plots("fig1_per_step_mean.csv"), &traffic, &stats)?;
    artifact::write_per_station_stats(&out.plots("fig2_per_station_mean.csv"), &registry, &stats)?;
    artifact::write_histogram(&out.plots("fig2_histogram.csv"), &stats.histogram)?;

    let d = distance_matrix(&registry);
    artifact::write_matrix_csv(&out.plots("fig4_distance.csv"), d.n(), d.values())?;

    let mut manifest = RunManifest::new("export-plots", &config.hash(), config.seed);
    manifest.record_input(&out.traffic_bin())?;
    manifest.record_input(&out.registry())?;

    if let Some(ckpt_path) = &args.checkpoint {
        let (checkpoint, params, traffic, registry, operator) =
            load_checkpoint_world(&out, Some(ckpt_path))?;
        let dataset = WindowedDataset::new(
            &traffic,
            checkpoint.model.history_steps,
            checkpoint.model.horizon_steps,
        )?;
        let splits = split_by_time(&dataset, &config.split_spec())?;
        let table = export_predictions(
            &params,
            &checkpoint.model,
            &operator,
            &dataset,
            &splits.test,
            &checkpoint.normalizer,
            config.batch_size,
        )?;
        artifact::write_predictions(&out.predictions(), &table, &registry)?;
        artifact::write_per_step_comparison(
            &out.plots("fig5_per_step_comparison.csv"),
            &table.per_step_series(),
        )?;
        artifact::write_per_station_comparison(
            &out.plots("fig6_per_station_comparison.csv"),
            &table.per_station_series(),
            &registry,
        )?;
        let (hist_true, hist_pred) =
            table.per_station_histograms(ingest::STATS_HIST_WIDTH);
        artifact::write_comparison_histograms(
            &out.plots("fig6_histograms.csv"),
            &hist_true,
            &hist_pred,
        )?;
        manifest.record_input(ckpt_path)?;
        println!(
            "export-plots: traffic figures plus prediction figures over {} test samples",
            splits.test.len()
        );
    } else {
        println!("export-plots: traffic figures (no checkpoint given)");
    }
    manifest.write(&out.manifest("export-plots"))?;
    Ok(())
}

