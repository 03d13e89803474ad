use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use iml3d::analysis::{self, DiceColumn};
use iml3d::interaction_log::{read_events, read_periods, EventLog, INACTIVITY_THRESHOLD};
use iml3d::metrics::DEFAULT_BANDWIDTH;
use iml3d::server::client::Client;
use iml3d::server::{http, Pacing, Server, ServerConfig, Service};
use iml3d::sim_annotator::{
    load_dataset, make_synthetic_dataset, read_report, run_session, save_dataset, DatasetDirs, OracleConfig,
};
use iml3d::{Error, Result, Voxel};

/// Interactive corrective-annotation training for 3D segmentation.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML file with `[server]`, `[oracle]`, `[synth]` and `[http]` tables.
    /// Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training server.
    Serve(ServeArgs),
    /// Run the oracle annotator over a dataset.
    Simulate(SimulateArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Per-image dice with a running mean and standard deviation.
    AnalyzeDice(DiceArgs),
    /// Per-image annotation durations from an event log.
    AnalyzeDurations(DurationArgs),
    /// Mean-dose deviation with a Gaussian running mean and band percentages.
    AnalyzeDose(DoseArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Server root holding `data/volumes` and the other working directories.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `free` or `lockstep`.
    #[arg(long)]
    pacing: Option<String>,
    /// Poll `annotations/incoming` every this many seconds.
    #[arg(long)]
    watch: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset root written by `synth`. Without it a dataset is generated
    /// from the `[synth]` settings.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Where the report, timings and event log go.
    #[arg(long)]
    out: PathBuf,
    /// Use a running server instead of an in-process one. Its data
    /// directory must already hold the dataset's volumes.
    #[arg(long)]
    server: Option<String>,
    /// Root for the in-process server (default `<out>/server`).
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    epochs_per_image: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "oracle")]
    session: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    /// `x,y,z`
    #[arg(long, value_parser = parse_dims)]
    dims: Option<Voxel>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiceArgs {
    /// Session report CSV.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = analysis::DICE_WINDOW)]
    window: usize,
    /// `pred_corrected` or `corrected_truth`.
    #[arg(long, default_value = "pred_corrected")]
    column: DiceColumn,
}

#[derive(Args)]
struct DurationArgs {
    #[arg(long)]
    events: PathBuf,
    /// CSV of `start,stop` annotation periods; the whole log otherwise.
    #[arg(long)]
    periods: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = INACTIVITY_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct DoseArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    bandwidth: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    server: ServerConfig,
    oracle: OracleConfig,
    synth: SynthConfig,
    http: HttpConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SynthConfig {
    n: usize,
    dims: Voxel,
    seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 40,
            dims: [64, 64, 64],
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct HttpConfig {
    addr: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8000".into(),
        }
    }
}

fn parse_dims(s: &str) -> std::result::Result<Voxel, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("'{s}' needs three sizes"))
}

fn parse_pacing(s: &str) -> Result<Pacing> {
    match s {
        "free" => Ok(Pacing::Free),
        "lockstep" => Ok(Pacing::Lockstep),
        _ => Err(Error::Config(format!("pacing '{s}' is neither free nor lockstep"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn serve(mut cfg: FileConfig, args: ServeArgs) -> Result<()> {
    if let Some(root) = args.root {
        cfg.server.root = root;
    }
    if let Some(seed) = args.seed {
        cfg.server.seed = seed;
    }
    if let Some(p) = args.pacing {
        cfg.server.pacing = parse_pacing(&p)?;
    }
    let addr = args.addr.unwrap_or(cfg.http.addr);
    let server = Server::open(cfg.server)?;
    log::info!(
        "serving {} volumes from {}",
        server.volume_ids()?.len(),
        server.layout().root.display()
    );
    if let Some(secs) = args.watch {
        server.watch_incoming(Duration::from_secs_f64(secs));
    }
    http::serve_forever(server, addr)
}

fn simulate(mut cfg: FileConfig, args: SimulateArgs) -> Result<()> {
    if let Some(f) = args.fraction {
        cfg.oracle.correction_fraction = f;
    }
    if let Some(k) = args.epochs_per_image {
        cfg.oracle.epochs_per_image = k;
    }
    if let Some(seed) = args.seed {
        cfg.oracle.seed = seed;
        cfg.server.seed = seed;
    }
    cfg.oracle.validate()?;
    let cases = match &args.dataset {
        Some(dir) => load_dataset(&DatasetDirs::under(dir))?,
        None => make_synthetic_dataset(cfg.synth.n, cfg.synth.dims, cfg.synth.seed)?,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Malformed(format!("{}: {e}", args.out.display())))?;
    let report = match &args.server {
        Some(url) => {
            let client = Client::new(url.clone());
            client.wait_ready(Duration::from_secs(10))?;
            run_session(&cases, &client, &cfg.oracle, &args.session)?
        }
        None => {
            let root = args.root.clone().unwrap_or_else(|| args.out.join("server"));
            std::fs::create_dir_all(&root).map_err(|e| Error::Malformed(format!("{}: {e}", root.display())))?;
            cfg.server.root = root;
            cfg.server.pacing = Pacing::Lockstep;
            let server = Server::open(cfg.server)?;
            for c in &cases {
                server.register_volume(&c.volume)?;
            }
            let report = run_session(&cases, &server, &cfg.oracle, &args.session);
            server.shutdown()?;
            report?
        }
    };
    report.write_csv(args.out.join("report.csv"))?;
    report.write_timings_csv(args.out.join("timings.csv"))?;
    let log_path = args.out.join("events.log");
    let _ = std::fs::remove_file(&log_path);
    let mut log = EventLog::open(&log_path)?;
    for e in &report.events {
        log.record(e)?;
    }
    let n = report.rows.len();
    let k = (n / 4).clamp(1, 10);
    println!("images: {n}");
    println!(
        "mean dice(pred, corrected): first {k} {:.4}, last {k} {:.4}",
        report.mean_over(0..k, |r| r.dice_pred_corrected),
        report.mean_over(n - k..n, |r| r.dice_pred_corrected)
    );
    println!(
        "mean annotated voxels: first {k} {:.1}, last {k} {:.1}",
        report.mean_over(0..k, |r| r.annotated_voxels as f64),
        report.mean_over(n - k..n, |r| r.annotated_voxels as f64)
    );
    println!("wrote {}", args.out.join("report.csv").display());
    Ok(())
}

fn synth(cfg: FileConfig, args: SynthArgs) -> Result<()> {
    let n = args.n.unwrap_or(cfg.synth.n);
    let dims = args.dims.unwrap_or(cfg.synth.dims);
    let seed = args.seed.unwrap_or(cfg.synth.seed);
    let cases = make_synthetic_dataset(n, dims, seed)?;
    save_dataset(&cases, &DatasetDirs::under(&args.out))?;
    println!("wrote {n} cases of {dims:?} to {}", args.out.display());
    Ok(())
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn analyze_dice(args: DiceArgs) -> Result<()> {
    let rows = analysis::dice_series(&read_report(&args.report)?, args.column, args.window)?;
    print_written(&analysis::write_dice(&args.out, "dice", &rows)?);
    Ok(())
}

fn analyze_durations(args: DurationArgs) -> Result<()> {
    let events = read_events(&args.events)?;
    let periods = args.periods.as_ref().map(read_periods).transpose()?;
    let rows = analysis::duration_series(&events, periods.as_deref(), args.threshold)?;
    if let Some((first, last)) = analysis::first_last_means(&rows, 10) {
        println!("mean duration: first 10 {first:.1} s, last 10 {last:.1} s");
    }
    print_written(&analysis::write_durations(&args.out, "durations", &rows)?);
    Ok(())
}

fn analyze_dose(args: DoseArgs) -> Result<()> {
    let rows = analysis::dose_series(&read_report(&args.report)?, args.bandwidth)?;
    let diffs: Vec<f64> = rows.iter().map(|r| r.abs_diff).collect();
    let bands = analysis::dose_bands(&diffs);
    let mut written = analysis::write_dose(&args.out, "dose", &rows)?.to_vec();
    written.extend(analysis::write_dose_bands(&args.out, "dose_bands", &bands)?);
    print_written(&written);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve(a) => serve(cfg, a),
        Command::Simulate(a) => simulate(cfg, a),
        Command::Synth(a) => synth(cfg, a),
        Command::AnalyzeDice(a) => analyze_dice(a),
        Command::AnalyzeDurations(a) => analyze_durations(a),
        Command::AnalyzeDose(a) => analyze_dose(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
