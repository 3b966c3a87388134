//! `jmflex` command-line interface: fit, simulate, export and summarize.

use clap::{Args, Parser, Subcommand};
use jmflex::estimation::{
    dic, initial_state, posterior_mean, posterior_mode, summarize, summarize_average_slope,
    summarize_draws,
};
use jmflex::io::{
    export_effects, load_config, load_dataset, read_chain, read_json, write_chain, write_effects,
    write_json, write_simulation, FitStatus, GridSpec, ModeDoc, RunConfig, RunManifest, SummaryDoc,
};
use jmflex::simulation::{simulate, SimSetting};
use jmflex::{Error, JointModel64, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable overriding the number of worker threads.
const WORKERS_ENV: &str = "JMFLEX_WORKERS";
const DEFAULT_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

#[derive(Parser)]
#[command(name = "jmflex", version, about = "Bayesian flexible additive joint models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a joint model: posterior mode, then MCMC.
    Fit(FitArgs),
    /// Generate a dataset from one of the simulation settings.
    Simulate(SimulateArgs),
    /// Export pointwise posterior summaries of an effect curve.
    Export(ExportArgs),
    /// Summarise a chain file.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    surv: PathBuf,
    #[arg(long)]
    long: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `mcmc.rng_seed` of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after the posterior mode; no chain is written.
    #[arg(long)]
    mode_only: bool,
    /// Restarts with seed+1 after a non-concave block.
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    /// Leave per-subject random effects out of the chain and mode files.
    #[arg(long)]
    omit_random_effects: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    setting: u8,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    keep: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    fit_dir: PathBuf,
    /// `alpha` or `lambda`.
    #[arg(long)]
    predictor: String,
    /// `lower,upper,n`.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    chain: PathBuf,
    /// Comma-separated quantile probabilities.
    #[arg(long, default_value = "0.025,0.5,0.975")]
    quantiles: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = workers().and_then(|_| match cli.command {
        Command::Fit(a) => run_fit(&a),
        Command::Simulate(a) => run_simulate(&a),
        Command::Export(a) => run_export(&a),
        Command::Summarize(a) => run_summarize(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
        Error::Numerical { .. } | Error::NonConcaveBlock { .. } | Error::Domain(_) | Error::Dimension(_) => 3,
    }
}

/// Worker count from the environment; all work runs as one chain, so any
/// valid value yields the same sequential run.
fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn parse_probs(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad quantile probability `{p}`")))
        })
        .collect()
}

fn run_fit(a: &FitArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.mcmc.rng_seed = seed;
    }
    let seed = cfg.mcmc.rng_seed;
    let data = load_dataset(&a.surv, &a.long)?;
    let model = JointModel64::build(&cfg.model, &data)?;
    std::fs::create_dir_all(&a.out)?;
    let hash = cfg.hash();
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    let mut manifest = RunManifest::new(hash.clone(), seed, absolute(&a.surv), absolute(&a.long));
    let manifest_path = a.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let mut restarts = 0;
    loop {
        match fit_once(&model, &cfg, &hash, seed + restarts as u64, restarts > 0, a) {
            Ok(()) => break,
            Err(e @ Error::NonConcaveBlock { .. }) if restarts < a.restarts => {
                eprintln!("{}", serde_json::json!({ "restart": restarts + 1, "cause": e.to_string() }));
                restarts += 1;
                manifest.advance(FitStatus::Restarted { restarts })?;
                write_json(&manifest_path, &manifest)?;
            }
            Err(e) => {
                manifest.advance(FitStatus::Failed {
                    restarts,
                    error: e.to_string(),
                })?;
                write_json(&manifest_path, &manifest)?;
                return Err(e);
            }
        }
    }
    if restarts == 0 {
        manifest.advance(FitStatus::Converged)?;
    } else {
        manifest.finish();
    }
    write_json(&manifest_path, &manifest)
}

fn fit_once(model: &JointModel64, cfg: &RunConfig, hash: &str, seed: u64, jitter: bool, a: &FitArgs) -> Result<()> {
    let start = initial_state(model, jitter.then_some((seed, cfg.mode.restart_jitter)));
    let fit = posterior_mode(model, start, &cfg.mode)?;
    write_json(
        &a.out.join("mode.json"),
        &ModeDoc::new(model, &fit, hash, seed, a.omit_random_effects),
    )?;
    if a.mode_only {
        return Ok(());
    }
    let mut mcmc = cfg.mcmc.clone();
    mcmc.rng_seed = seed;
    let chain = posterior_mean(model, fit.state, &mcmc)?;
    write_chain(&a.out.join("chain.csv"), &chain, model, hash, a.omit_random_effects)?;
    let mut scalars = summarize(&chain, &DEFAULT_PROBS)?;
    if a.omit_random_effects {
        let omitted: Vec<String> = model
            .blocks
            .iter()
            .filter(|b| b.per_subject.is_some())
            .map(|b| format!("{}[", b.name))
            .collect();
        scalars.retain(|s| !omitted.iter().any(|o| s.name.starts_with(o)));
    }
    scalars.push(summarize_average_slope(&chain, model, &DEFAULT_PROBS)?);
    let acceptance: BTreeMap<String, f64> = chain
        .layout
        .iter()
        .zip(&chain.acceptance)
        .map(|(l, &r)| (l.name.clone(), r))
        .collect();
    let doc = SummaryDoc {
        config_hash: hash.to_string(),
        draws: chain.len(),
        acceptance,
        flagged_iterations: chain.flagged_iterations,
        dic: dic(&chain, model)?,
        scalars,
    };
    write_json(&a.out.join("summary.json"), &doc)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let setting = SimSetting::new(a.setting, a.n, a.keep, a.seed);
    setting.validate()?;
    let sim = simulate(&setting)?;
    write_simulation(&sim, &a.out)
}

fn run_export(a: &ExportArgs) -> Result<()> {
    let grid: GridSpec = a.grid.parse()?;
    let manifest: RunManifest = read_json(&a.fit_dir.join("manifest.json"))?;
    let cfg = load_config(&a.fit_dir.join("config.toml"))?;
    let chain_path = a.fit_dir.join("chain.csv");
    if !chain_path.exists() {
        return Err(Error::Usage(format!("{} holds no chain; rerun fit without --mode-only", a.fit_dir.display())));
    }
    let chain = read_chain(&chain_path)?;
    if cfg.hash() != manifest.config_hash || chain.config_hash != manifest.config_hash {
        return Err(Error::Usage("config, manifest and chain come from different runs".into()));
    }
    let data = load_dataset(&manifest.surv_path, &manifest.long_path)?;
    let model = JointModel64::build(&cfg.model, &data)?;
    let points = export_effects(&model, &chain, &a.predictor, &grid)?;
    write_effects(&a.out, &points, &manifest.config_hash)
}

fn run_summarize(a: &SummarizeArgs) -> Result<()> {
    let probs = parse_probs(&a.quantiles)?;
    let chain = read_chain(&a.chain)?;
    let mut names = Vec::new();
    for (block, draws) in &chain.blocks {
        let width = draws.first().map_or(0, Vec::len);
        names.extend((0..width).map(|k| (block.clone(), k)));
    }
    let draws: Vec<Vec<f64>> = (0..chain.n_draws())
        .map(|d| names.iter().map(|(b, k)| chain.blocks[b][d][*k]).collect())
        .collect();
    let labels: Vec<String> = names.iter().map(|(b, k)| format!("{b}[{k}]")).collect();
    let scalars = summarize_draws(&labels, &draws, &probs)?;
    let doc = serde_json::json!({ "config_hash": chain.config_hash, "draws": chain.n_draws(), "scalars": scalars });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
