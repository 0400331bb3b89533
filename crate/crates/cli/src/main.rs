//! `bnshift`: data generation, training, evaluation, BN diagnostics, and the experiment matrix.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnshift::batchnorm::EvalStats;
use bnshift::datagen::{generate, DomainSpec, GenConfig, Split};
use bnshift::diagnostics::{export, layer_kdes};
use bnshift::model::Model;
use bnshift::training::{
    diagnostic_batch, metrics_csv, run_experiment, run_matrix, sha256_hex, stats_divergence, write_with_provenance, EvalOptions, ExperimentSpec,
    MatrixConfig, Provenance, Registry, DIAGNOSTIC_BATCH,
};
use bnshift::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

/// Marker written into every output directory this tool creates.
const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Parser, Debug)]
#[command(name = "bnshift", version, about = "Batch-normalization domain-shift toolkit")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic domains into DIR/<domain>/.
    GenData(GenDataArgs),
    /// Train one experiment.
    Train(TrainArgs),
    /// Score a checkpoint on one split of the registered domains.
    Eval(EvalArgs),
    /// Compare BN-layer output distributions of two models or statistics regimes on one batch.
    Diagnose(DiagnoseArgs),
    /// Run a matrix of experiments and write the consolidated table.
    Matrix(MatrixArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Comma-separated domain TOML files.
    #[arg(long, value_delimiter = ',', required = true)]
    domains: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generation settings (TOML); its keys override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_enum)]
    input_norm: Option<NormArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Standardize,
    Raw,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment TOML; its keys override the flags below.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint to fine-tune.
    #[arg(long)]
    init: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Statistics regimes, e.g. `tr,tt8,tt64`.
    #[arg(long, value_delimiter = ',', default_value = "tr")]
    stats: Vec<EvalStats>,
    /// Domains to score; all registered domains when omitted.
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shuffle records with this seed before forming TT batches.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long, default_value = "eval")]
    experiment: String,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    model_a: PathBuf,
    /// Defaults to model A, so that only the statistics regimes differ.
    #[arg(long)]
    model_b: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Domain whose training images form the batch.
    #[arg(long)]
    domain: String,
    #[arg(long, default_value = "tr")]
    stats_a: EvalStats,
    #[arg(long, default_value = "tt16")]
    stats_b: EvalStats,
    #[arg(long, default_value_t = DIAGNOSTIC_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = bnshift::diagnostics::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = 256)]
    kde_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    /// Matrix TOML; its `seed` overrides the flag.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Diverged(_) => 4,
        _ => 3,
    }
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Inserts flag values for keys the config file leaves unset.
fn fill_from_flags(table: &mut toml::Table, flags: Vec<(&str, Option<toml::Value>)>) {
    for (key, value) in flags {
        if let Some(v) = value {
            table.entry(key.to_string()).or_insert(v);
        }
    }
}

fn int(v: u64) -> Result<toml::Value> {
    i64::try_from(v).map(toml::Value::Integer).map_err(|_| Error::Config(format!("{v} does not fit a TOML integer")))
}

/// Builds `out` in a sibling temporary directory and swaps it in on success.
/// An existing `out` is replaced only if it is empty or was written by this tool.
fn atomic_dir(out: &Path, prov: &Provenance, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        let empty = fs::read_dir(out)?.next().is_none();
        if !empty && !out.join(PROVENANCE_FILE).is_file() {
            return Err(Error::Config(format!("{} exists and was not written by bnshift; refusing to replace it", out.display())));
        }
    }
    let name = out.file_name().ok_or_else(|| Error::Config(format!("invalid output directory {}", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    fs::write(tmp.join(PROVENANCE_FILE), serde_json::to_string_pretty(prov).map_err(Error::from)? + "\n")?;
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&tmp, out)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut table = match &a.config {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    fill_from_flags(
        &mut table,
        vec![
            ("image_size", a.image_size.map(|s| int(s as u64)).transpose()?),
            (
                "input_norm",
                a.input_norm.map(|n| {
                    toml::Value::String(match n {
                        NormArg::Standardize => "standardize".into(),
                        NormArg::Raw => "raw".into(),
                    })
                }),
            ),
        ],
    );
    let cfg: GenConfig = table.clone().try_into().map_err(|e| Error::Config(format!("generation config: {e}")))?;
    let mut domains = Vec::new();
    let mut digest_input = toml::to_string(&table).unwrap_or_default();
    for p in &a.domains {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        domains.push(DomainSpec::from_toml(&text)?);
        digest_input.push_str(&text);
    }
    let prov = Provenance::new(a.seed, sha256_hex(digest_input.as_bytes()));
    atomic_dir(&a.out, &prov, |dir| {
        for d in &domains {
            info!("generating domain {}", d.name);
            generate(d, &cfg, a.seed)?.save(&dir.join(&d.name))?;
        }
        Ok(())
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut table = read_table(&a.config)?;
    fill_from_flags(
        &mut table,
        vec![
            ("seed", a.seed.map(int).transpose()?),
            ("epochs", a.epochs.map(|e| int(e as u64)).transpose()?),
            ("init", a.init.clone().map(toml::Value::String)),
        ],
    );
    let spec: ExperimentSpec = table.try_into().map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    spec.validate()?;
    let reg = Registry::load_dir(&a.data)?;
    let init = spec.init.as_deref().map(|p| Model::load(Path::new(p))).transpose()?;
    let result = run_experiment(&spec, &reg, init.as_ref())?;
    let prov = Provenance::new(spec.seed, spec.digest());
    atomic_dir(&a.out, &prov, |dir| result.write(dir))
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let reg = Registry::load_dir(&a.data)?;
    let domains: Vec<usize> = if a.domains.is_empty() {
        (0..reg.datasets.len()).collect()
    } else {
        a.domains.iter().map(|d| reg.index(d)).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for &stats in &a.stats {
        let opts = EvalOptions { split: a.split.into(), stats, resamples: a.bootstrap, seed: a.seed, shuffle: a.shuffle_seed };
        for &d in &domains {
            rows.push(bnshift::training::evaluate(&model, &reg, d, &a.experiment, &opts)?);
        }
    }
    let csv = metrics_csv(&rows);
    match &a.out {
        Some(path) => {
            let args = format!("{:?}|{:?}|{:?}|{}|{:?}", a.split, a.stats, a.domains, a.bootstrap, a.shuffle_seed);
            let digest = sha256_hex(&[fs::read(&a.model)?, args.into_bytes()].concat());
            write_with_provenance(path, csv.as_bytes(), &Provenance::new(a.seed, digest))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let model_a = Model::load(&a.model_a)?;
    let model_b = match &a.model_b {
        Some(p) => Model::load(p)?,
        None => model_a.clone(),
    };
    let reg = Registry::load_dir(&a.data)?;
    let d = reg.index(&a.domain)?;
    let batch = diagnostic_batch(&reg, d, a.batch, a.seed)?;
    let (profile, ta, tb) = if a.model_b.is_none() {
        stats_divergence(&model_a, &batch, a.stats_a, a.stats_b, a.bins)?
    } else {
        let trace = |m: &Model, s| {
            let mut m = m.clone();
            m.set_eval(s);
            bnshift::batchnorm::tap_activations(&m, &batch)
        };
        let (ta, tb) = (trace(&model_a, a.stats_a)?, trace(&model_b, a.stats_b)?);
        (bnshift::diagnostics::layer_divergence(&ta, &tb, a.bins)?, ta, tb)
    };
    let kdes = layer_kdes(&ta, &tb, a.kde_points)?;
    let args = format!("{}|{:?}|{}|{}|{}|{}|{}", a.domain, a.model_b, a.stats_a, a.stats_b, a.batch, a.bins, a.kde_points);
    let prov = Provenance::new(a.seed, sha256_hex(&[fs::read(&a.model_a)?, args.into_bytes()].concat()));
    atomic_dir(&a.out, &prov, |dir| export(dir, &profile, &kdes))
}

fn matrix(a: MatrixArgs) -> Result<()> {
    let mut table = read_table(&a.config)?;
    fill_from_flags(&mut table, vec![("seed", a.seed.map(int).transpose()?)]);
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = MatrixConfig::from_toml(&text)?;
    let reg = Registry::load_dir(&a.data)?;
    let result = run_matrix(&cfg, &reg)?;
    let prov = Provenance::new(cfg.seed, cfg.digest());
    atomic_dir(&a.out, &prov, |dir| result.write(dir, &cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Matrix(a) => matrix(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
