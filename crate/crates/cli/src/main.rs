use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use descentlab::oracle;
use descentlab::sweep::{self, ConfigError, SweepConfig, SweepError};

mod plot;

const DATA_DIR_ENV: &str = "DESCENTLAB_DATA_DIR";

/// MNIST training files and their decompressed sizes in bytes.
const MNIST_FILES: [(&str, u64); 4] = [
    ("train-images-idx3-ubyte", 47_040_016),
    ("train-labels-idx1-ubyte", 60_008),
    ("t10k-images-idx3-ubyte", 7_840_016),
    ("t10k-labels-idx1-ubyte", 10_008),
];

#[derive(Parser, Debug)]
#[command(name = "descent-lab", version, about = "Double-descent sweeps for random-feature ridge models and MLPs")]
struct Cli {
    /// Log progress to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random-feature sweep (feature, anchor or lambda experiment).
    FeatureSweep(SweepArgs),
    /// Neural-network width sweep (reuse or scratch experiment).
    NnSweep(SweepArgs),
    /// Run the oracle checks on small random instances.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit a gnuplot script and a per-capacity mean CSV for a sweep CSV.
    Plot {
        csv: PathBuf,
        /// Parameter count at which to draw the threshold line; read from
        /// the companion summary JSON when omitted.
        #[arg(long)]
        threshold: Option<f64>,
        /// Directory for the emitted files (defaults to the CSV's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download and decompress the MNIST IDX files from an explicit base URL.
    FetchData {
        /// Base URL holding `<name>.gz` for each IDX file.
        #[arg(long)]
        url: String,
        /// Destination directory (defaults to the data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let result = match cli.command {
        Command::FeatureSweep(args) => run_sweep_command(&args, false),
        Command::NnSweep(args) => run_sweep_command(&args, true),
        Command::OracleCheck { seed } => oracle_check(seed),
        Command::Plot { csv, threshold, out } => plot::emit(&csv, threshold, out.as_deref())
            .map(|paths| paths.iter().for_each(|p| println!("{}", p.display())))
            .map_err(Failure::from),
        Command::FetchData { url, out } => fetch_data(&url, &out.unwrap_or_else(data_dir)).map_err(Failure::Run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(args: &SweepArgs) -> Result<SweepConfig, Failure> {
    let mut cfg = SweepConfig::from_file(&args.config)?;
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("output_dir={}", out.display()));
    }
    if let Some(jobs) = args.jobs {
        overrides.push(format!("jobs={jobs}"));
    }
    cfg.apply_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_sweep_command(args: &SweepArgs, nn: bool) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    if cfg.experiment.is_nn() != nn {
        let cmd = if nn { "nn-sweep" } else { "feature-sweep" };
        return Err(Failure::Config(format!("experiment '{}' cannot run under {cmd}", cfg.experiment)));
    }
    let dataset = cfg.load_dataset(&data_dir()).map_err(|e| Failure::Run(e.to_string()))?;
    info!(
        "{}: {} train / {} test samples, P = {}, K = {}",
        cfg.experiment,
        dataset.split.train.len(),
        dataset.split.test.len(),
        dataset.input_dim(),
        dataset.classes
    );
    let points = sweep::run_sweep(&cfg, &dataset)?;

    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Failure::Run(format!("cannot create {}: {e}", out_dir.display())))?;
    let stem = sweep::output_stem(&cfg);
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let json_path = out_dir.join(format!("{stem}.summary.json"));
    let cfg_path = out_dir.join(format!("{stem}.cfg"));
    sweep::write_csv(&csv_path, &points)?;
    sweep::write_summary_json(&json_path, &points, dataset.split.train.len(), dataset.classes)?;
    fs::write(&cfg_path, cfg.render()).map_err(|e| Failure::Run(format!("cannot write {}: {e}", cfg_path.display())))?;
    for p in [&csv_path, &json_path, &cfg_path] {
        println!("{}", p.display());
    }

    let failed = points.iter().filter(|p| !p.is_ok()).count();
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} of {} points failed; see the status column", points.len())));
    }
    Ok(())
}

fn oracle_check(seed: u64) -> Result<(), Failure> {
    let report = oracle::run_oracle_suite(seed);
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Failure::Run(format!("{failed} oracle checks failed")))
    }
}

fn fetch_data(base: &str, dest: &Path) -> Result<(), String> {
    fs::create_dir_all(dest).map_err(|e| format!("cannot create {}: {e}", dest.display()))?;
    for (name, size) in MNIST_FILES {
        let url = format!("{}/{name}.gz", base.trim_end_matches('/'));
        info!("fetching {url}");
        let resp = ureq::get(&url).call().map_err(|e| format!("{url}: {e}"))?;
        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(resp.into_reader())
            .read_to_end(&mut raw)
            .map_err(|e| format!("{url}: {e}"))?;
        if raw.len() as u64 != size {
            return Err(format!("{name}: expected {size} bytes, got {}", raw.len()));
        }
        let path = dest.join(name);
        fs::write(&path, &raw).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}
