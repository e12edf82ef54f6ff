use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use longmix::io::{self, AllocProbBlock, ClassificationRow, FitManifest};
use longmix::marglik::{MarglikMethod, MarglikOptions};
use longmix::model::{validate_dataset, Dataset, ModelConfig, TimeUnit, ValidatedDataset};
use longmix::ped::{self, OptimismOptions, PedRecord};
use longmix::postprocess::{self, ProbBackend};
use longmix::rng::derive_seed;
use longmix::sampler::{run_chain, ChainSample, McmcConfig};
use longmix::simulate::{self, SimSetting};
use longmix::{Error, Result};

#[derive(Parser)]
#[command(
    name = "longmix",
    version,
    about = "Clustering of mixed-type longitudinal data with a mixture GLMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one chain, relabel it and store the draws.
    Fit(FitArgs),
    /// Classify subjects from a stored fit.
    Classify(ClassifyArgs),
    /// Penalized expected deviance over a range of K.
    Ped(PedArgs),
    /// Generate a synthetic dataset with known clusters.
    Simulate(SimulateArgs),
    /// Posterior summaries and mean curves of a stored fit.
    Summary(SummaryArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "months")]
    time_unit: TimeUnitArg,
}

#[derive(Args, Clone)]
struct ChainArgs {
    #[arg(long, default_value_t = 10_000)]
    keep: usize,
    #[arg(long, default_value_t = 100)]
    thin: usize,
    #[arg(long, default_value_t = 1000)]
    burnin: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "laplace")]
    marglik: MarglikMethod,
    #[arg(long, default_value_t = 2000)]
    mc_draws: usize,
}

impl ChainArgs {
    fn config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            keep: self.keep,
            thin: self.thin,
            burnin: self.burnin,
            seed,
            marglik: MarglikOptions {
                method: self.marglik,
                mc_draws: self.mc_draws,
                seed,
            },
            ..McmcConfig::default()
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TimeUnitArg {
    Months,
    Days,
}

impl From<TimeUnitArg> for TimeUnit {
    fn from(u: TimeUnitArg) -> Self {
        match u {
            TimeUnitArg::Months => TimeUnit::Months,
            TimeUnitArg::Days => TimeUnit::Days,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "K")]
    k: usize,
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Withhold assignments whose HPD lower limit does not exceed the threshold.
    #[arg(long)]
    defer: bool,
    #[arg(long, default_value = "marginal")]
    backend: ProbBackend,
}

#[derive(Args)]
struct PedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Inclusive range such as `1..4`.
    #[arg(long = "K-range", value_parser = parse_range)]
    k_range: (usize, usize),
    #[command(flatten)]
    chain: ChainArgs,
    /// Pairs of draws used for the optimism (all when omitted).
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    setting: String,
    /// Cluster sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// One set of visit times per subject shared by all markers.
    #[arg(long)]
    shared_times: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummaryArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Number of time points of the mean curves.
    #[arg(long, default_value_t = 50)]
    grid: usize,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got '{s}'"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.trim().trim_start_matches('=').parse().map_err(|e| format!("{e}"))?;
    if a == 0 || b < a {
        return Err(format!("empty or invalid range '{s}'"));
    }
    Ok((a, b))
}

fn load_data(args: &DataArgs) -> Result<(ModelConfig, ValidatedDataset)> {
    let model = io::read_model(&args.model)?;
    let obs = io::read_long_csv(&args.data, args.time_unit.into())?;
    let ds = validate_dataset(&Dataset::from_config(&model, obs))?;
    Ok((model, ds))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn buffered(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn threads() -> usize {
    rayon::current_num_threads()
}

fn fit(args: &FitArgs, argv: &[String]) -> Result<()> {
    let (model, ds) = load_data(&args.data)?;
    let config = args.chain.config(args.chain.seed);
    let mut chain = run_chain(&ds, args.k, &model.prior, &config)?;
    let relabel = postprocess::relabel_chain(&mut chain)?;
    create_dir(&args.out)?;
    io::write_params_csv(buffered(&args.out.join("params.csv"))?, &chain, &ds.layout)?;
    io::write_allocprob(
        buffered(&args.out.join("allocprob.bin"))?,
        &AllocProbBlock::from_chain(&chain),
    )?;
    io::write_long_csv(&args.out.join("data.csv"), &ds.to_dataset().observations)?;
    io::write_json(&args.out.join("model.json"), &model)?;
    let manifest = FitManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: argv.to_vec(),
        data_file: "data.csv".into(),
        model_file: "model.json".into(),
        time_unit: TimeUnit::Months,
        k: args.k,
        n_subjects: ds.n_subjects(),
        n_observations: ds.n_observations(),
        q: ds.layout.q,
        kept: chain.m(),
        seed: args.chain.seed,
        config: chain.config.clone(),
        prior: chain.prior.clone(),
        marglik: chain.config.marglik.method,
        acceptance: chain.acceptance.clone(),
        proposal_log_scales_after_burnin: chain.scales_after_burnin.clone(),
        relabel_rounds: relabel.rounds,
        relabel_converged: relabel.converged,
        threads: threads(),
    };
    io::write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Reloads a fit directory written by `fit`.
fn load_fit(dir: &Path) -> Result<(FitManifest, ValidatedDataset, ChainSample)> {
    let manifest: FitManifest = io::read_json(&dir.join("manifest.json"))?;
    let model = io::read_model(&dir.join(&manifest.model_file))?;
    let obs = io::read_long_csv(&dir.join(&manifest.data_file), TimeUnit::Months)?;
    let ds = validate_dataset(&Dataset::from_config(&model, obs))?;
    let (_, draws) = io::read_params_csv(File::open(dir.join("params.csv"))?, &ds.layout, manifest.k)?;
    let block = io::read_allocprob(std::io::BufReader::new(File::open(dir.join("allocprob.bin"))?))?;
    if block.n != ds.n_subjects() || block.k != manifest.k || block.m != draws.len() {
        return Err(Error::Dimension(format!(
            "allocprob.bin holds N = {}, K = {}, M = {} but the fit has N = {}, K = {}, M = {}",
            block.n,
            block.k,
            block.m,
            ds.n_subjects(),
            manifest.k,
            draws.len()
        )));
    }
    let m = draws.len();
    let chain = ChainSample {
        k: manifest.k,
        n_subjects: ds.n_subjects(),
        q: ds.layout.q,
        draws,
        alloc_probs: block.to_draw_matrices(),
        random_effects: None,
        acceptance: manifest.acceptance.clone(),
        config: manifest.config.clone(),
        prior: manifest.prior.clone(),
        scales_after_burnin: manifest.proposal_log_scales_after_burnin.clone(),
        scales_at_end: Vec::new(),
        permutations: vec![(0..manifest.k).collect(); m],
    };
    Ok((manifest, ds, chain))
}

fn classify(args: &ClassifyArgs) -> Result<()> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Validation(format!("level {} outside (0, 1)", args.level)));
    }
    let (_, ds, chain) = load_fit(&args.fit)?;
    let probs = postprocess::posterior_component_probs(&chain, &ds, args.backend, &chain.config.marglik)?;
    let argmax = postprocess::classify(&probs.pi_hat);
    let deferred = postprocess::classify_thresholded(&probs, args.level, args.threshold)?;
    let rows: Vec<ClassificationRow> = (0..ds.n_subjects())
        .map(|i| ClassificationRow {
            subject: &ds.subjects[i].id,
            pi_hat: &probs.pi_hat[i],
            hpd: &deferred[i].hpd,
            assignment: argmax[i],
            deferred: args.defer.then_some(&deferred[i]),
        })
        .collect();
    io::write_classification(buffered(&args.fit.join("classification.csv"))?, chain.k, &rows)?;
    Ok(())
}

fn ped_command(args: &PedArgs, argv: &[String]) -> Result<()> {
    let (model, ds) = load_data(&args.data)?;
    create_dir(&args.out)?;
    let mut records: Vec<PedRecord> = Vec::new();
    for k in args.k_range.0..=args.k_range.1 {
        let cfg_a = args.chain.config(derive_seed(args.chain.seed, k as u64, 0));
        let cfg_b = args.chain.config(derive_seed(args.chain.seed, k as u64, 1));
        let (a, b) = rayon::join(
            || run_chain(&ds, k, &model.prior, &cfg_a),
            || run_chain(&ds, k, &model.prior, &cfg_b),
        );
        let (a, b) = (a?, b?);
        let oopts = OptimismOptions {
            replicates: 1,
            max_pairs: args.max_pairs,
            seed: derive_seed(args.chain.seed, k as u64, 2),
        };
        records.push(ped::ped(&a, &b, &ds, &a.config.marglik, &oopts)?);
    }
    let selected = ped::select_k(&records).ok();
    io::write_ped_csv(buffered(&args.out.join("ped.csv"))?, &records, selected)?;
    io::write_json(
        &args.out.join("manifest.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": argv,
            "k_range": [args.k_range.0, args.k_range.1],
            "seed": args.chain.seed,
            "chain_seeds": (args.k_range.0..=args.k_range.1)
                .map(|k| [derive_seed(args.chain.seed, k as u64, 0), derive_seed(args.chain.seed, k as u64, 1)])
                .collect::<Vec<_>>(),
            "config": args.chain.config(args.chain.seed),
            "prior_overrides": model.prior,
            "max_pairs": args.max_pairs,
            "selected_k": selected,
            "records": records,
            "threads": threads(),
        }),
    )?;
    Ok(())
}

fn simulate_command(args: &SimulateArgs, argv: &[String]) -> Result<()> {
    let mut setting = SimSetting::preset(&args.setting, args.sizes.clone(), args.seed)?;
    setting.shared_times = args.shared_times;
    let sim = simulate::simulate_dataset(&setting)?;
    let ds = validate_dataset(&sim.dataset)?;
    create_dir(&args.out)?;
    io::write_long_csv(&args.out.join("data.csv"), &sim.dataset.observations)?;
    io::write_json(&args.out.join("model.json"), &simulate::three_marker_config())?;
    io::write_truth_csv(
        buffered(&args.out.join("truth.csv"))?,
        &sim.subject_ids,
        &sim.truth,
        &sim.b,
        &ds.layout.effect_names,
    )?;
    io::write_json(
        &args.out.join("manifest.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": argv,
            "setting": args.setting,
            "sizes": args.sizes,
            "seed": args.seed,
            "shared_times": args.shared_times,
            "weights": setting.weights,
            "means": setting.means,
            "covariances": setting.covs.iter().map(|c| c.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "sigma1": setting.sigma1,
            "alpha3": setting.alpha3,
            "law": setting.law,
        }),
    )?;
    Ok(())
}

fn summary_command(args: &SummaryArgs) -> Result<()> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Validation(format!("level {} outside (0, 1)", args.level)));
    }
    let (_, ds, chain) = load_fit(&args.fit)?;
    let summary = postprocess::summarize(&chain, &ds, args.level)?;
    io::write_json(&args.fit.join("summary.json"), &summary)?;
    let (psi, theta) = ped::posterior_mean_plugin(&chain)?;
    let grid = postprocess::time_grid(&ds, args.grid);
    let curves = postprocess::mean_curves(&ds, &psi, &theta, &grid);
    io::write_curves_csv(buffered(&args.fit.join("curves.csv"))?, &curves)?;
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Validation(_) => "validation",
        Error::Domain { .. } => "domain",
        Error::Dimension(_) => "dimension",
        Error::Method(_) => "method",
        Error::Numerical(_) => "numerical",
        Error::Chain { .. } => "chain",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::Chain { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = std::env::var("LONGMIX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            // ignore failure: a pool may already exist in embedding contexts
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => fit(a, &argv),
        Command::Classify(a) => classify(a),
        Command::Ped(a) => ped_command(a, &argv),
        Command::Simulate(a) => simulate_command(a, &argv),
        Command::Summary(a) => summary_command(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}
