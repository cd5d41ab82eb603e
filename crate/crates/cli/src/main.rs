use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use mrmm::data::{load_csv, save_csv, CovariateSpec, SequenceDataset};
use mrmm::runner::{self, IsiChainOutput, Manifest, Persistence, RunConfig, RunMeta, Schedule, TransChainOutput};
use mrmm::select::write_scores_csv;
use mrmm::sim::{generate, scenario, ReferenceParameters, Truth};
use mrmm::{Error, Result};

#[derive(Parser)]
#[command(name = "mrmm", version, about = "Bayesian Markov renewal mixed models for syllable sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the syllable transition model.
    FitTrans(Common),
    /// Fit the inter-syllable interval mixture model.
    FitIsi(Common),
    /// Score a grid of component counts by LPML and WAIC.
    SelectK(Common),
    /// Simulate a dataset and its truth sidecar.
    Simulate(Common),
    /// Rebuild summaries from the checkpoints in an output directory.
    Summarize(Common),
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Input CSV (or, for summarize, a run directory).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "mrmm-out")]
    output_dir: PathBuf,
    /// JSON run configuration or a previous run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated component counts.
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    #[arg(long)]
    scenario: Option<String>,
    /// Continue from the checkpoints in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

/// Config and input after applying defaults, the config file and flags.
fn resolve(c: &Common) -> Result<(RunConfig, Option<PathBuf>)> {
    let mut config = RunConfig::default();
    let mut input = None;
    if let Some(path) = &c.config {
        if !path.exists() {
            return Err(Error::MissingFile(path.clone()));
        }
        let v: Value = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        let is_manifest = v.get("command").is_some() && v.get("config").is_some();
        if is_manifest {
            config = serde_json::from_value(v["config"].clone())?;
            input = v.get("input").and_then(|i| serde_json::from_value(i.clone()).ok()).flatten();
        } else {
            config = serde_json::from_value(v)?;
        }
    }
    if let Some(i) = &c.input {
        input = Some(i.clone());
    }
    if let Some(x) = c.seed {
        config.seed = x;
    }
    if let Some(x) = c.iters {
        config.iterations = x;
    }
    if let Some(x) = c.burn_in {
        config.burn_in = x;
    }
    if let Some(x) = c.thin {
        config.thin = x;
    }
    if let Some(x) = c.chains {
        config.chains = x;
    }
    if let Some(x) = c.k {
        config.k = x;
    }
    if let Some(x) = &c.k_grid {
        config.k_grid = x.clone();
    }
    if let Some(x) = &c.scenario {
        config.scenario = Some(x.clone());
    }
    config.validate()?;
    Ok((config, input))
}

fn load_input(input: &Option<PathBuf>) -> Result<(PathBuf, SequenceDataset)> {
    let path = input.clone().ok_or_else(|| Error::InvalidConfig("--input is required".into()))?;
    let ds = load_csv(&path, &CovariateSpec::default_schema())?;
    Ok((path, ds))
}

fn persistence(c: &Common) -> Persistence {
    Persistence { output_dir: Some(c.output_dir.clone()), resume: c.resume, stop_after: c.stop_after }
}

fn print_rhat(rhat: &[(String, f64)]) {
    for (name, r) in rhat {
        println!("R-hat {name}: {r:.4}");
    }
}

struct ManifestParts {
    command: &'static str,
    input: Option<PathBuf>,
    config: RunConfig,
    n_records: usize,
    started: Instant,
}

impl ManifestParts {
    fn finish(self, outputs: Vec<String>, warnings: Vec<String>, r_hat: Vec<(String, f64)>) -> Manifest {
        Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            input: self.input,
            config: self.config,
            n_records: self.n_records,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs,
            warnings,
            r_hat,
            scores: None,
            recommended_k: None,
        }
    }
}

fn stopped(dir: &Path) {
    println!("stopped early; checkpoints in {} (rerun with --resume)", dir.join("checkpoints").display());
}

fn fit_trans(c: &Common) -> Result<()> {
    let started = Instant::now();
    let (config, input) = resolve(c)?;
    let (path, ds) = load_input(&input)?;
    let fit = runner::fit_trans(&ds, &config, &persistence(c))?;
    if !fit.completed() {
        stopped(&c.output_dir);
        return Ok(());
    }
    let schedule = config.schedule();
    let (files, rhat) = runner::write_trans_outputs(&c.output_dir, &fit.meta, &schedule, &fit.outputs())?;
    print_rhat(&rhat);
    let mut warnings = fit.warnings.clone();
    warnings.extend(fit.chains.iter().flat_map(|ch| ch.warnings.iter().cloned()));
    let parts = ManifestParts { command: "fit-trans", input: Some(path), config, n_records: fit.meta.n_records, started };
    runner::write_manifest(&c.output_dir, &parts.finish(files, warnings, rhat))
}

fn fit_isi(c: &Common) -> Result<()> {
    let started = Instant::now();
    let (config, input) = resolve(c)?;
    let (path, ds) = load_input(&input)?;
    let fit = runner::fit_isi(&ds, config.k, &config, &persistence(c))?;
    if !fit.completed() {
        stopped(&c.output_dir);
        return Ok(());
    }
    let schedule = config.schedule();
    let (mut files, rhat) = runner::write_isi_outputs(&c.output_dir, &fit.meta, &schedule, &fit.outputs())?;
    print_rhat(&rhat);
    let score = fit.score(1)?;
    println!("K = {}: LPML {:.4}, WAIC {:.4} (p_WAIC {:.4})", score.k, score.lpml, score.waic, score.p_waic);
    write_scores_csv(&[score], BufWriter::new(File::create(c.output_dir.join("scores.csv"))?))?;
    files.push("scores.csv".into());
    let warnings = fit.chains.iter().flat_map(|ch| ch.warnings.iter().cloned()).collect();
    let parts = ManifestParts { command: "fit-isi", input: Some(path), config, n_records: fit.meta.n_records, started };
    let mut manifest = parts.finish(files, warnings, rhat);
    manifest.scores = Some(vec![score]);
    runner::write_manifest(&c.output_dir, &manifest)
}

fn select_k(c: &Common) -> Result<()> {
    let started = Instant::now();
    let (config, input) = resolve(c)?;
    let (path, ds) = load_input(&input)?;
    let (scores, rec) = runner::select_k(&ds, &config)?;
    fs::create_dir_all(&c.output_dir)?;
    write_scores_csv(&scores, BufWriter::new(File::create(c.output_dir.join("scores.csv"))?))?;
    for s in &scores {
        println!("K = {}: LPML {:.4}, WAIC {:.4}", s.k, s.lpml, s.waic);
    }
    match rec {
        Some(k) => println!("recommended K = {k}"),
        None => println!("no recommendation (no finite LPML)"),
    }
    let parts = ManifestParts { command: "select-k", input: Some(path), config, n_records: ds.n_transitions(), started };
    let mut manifest = parts.finish(vec!["scores.csv".into()], Vec::new(), Vec::new());
    manifest.scores = Some(scores);
    manifest.recommended_k = rec;
    runner::write_manifest(&c.output_dir, &manifest)
}

fn simulate(c: &Common) -> Result<()> {
    let started = Instant::now();
    let (config, _) = resolve(c)?;
    let reference = match &config.reference {
        Some(p) => ReferenceParameters::load(p)?,
        None => ReferenceParameters::bundled(),
    };
    let label = config.scenario.clone().unwrap_or_else(|| "C".to_string());
    let spec = scenario(&label, &reference, config.design.clone())?;
    let ds = generate(&spec, config.seed)?;
    fs::create_dir_all(&c.output_dir)?;
    save_csv(&ds, &c.output_dir.join("data.csv"))?;
    let truth = Truth { seed: config.seed, spec, n_transitions: ds.n_transitions() };
    let mut w = BufWriter::new(File::create(c.output_dir.join("truth.json"))?);
    serde_json::to_writer_pretty(&mut w, &truth)?;
    drop(w);
    println!("scenario {label}: {} sequences, {} transitions", ds.sequences.len(), ds.n_transitions());
    let parts = ManifestParts { command: "simulate", input: None, config, n_records: ds.n_transitions(), started };
    runner::write_manifest(&c.output_dir, &parts.finish(vec!["data.csv".into(), "truth.json".into()], Vec::new(), Vec::new()))
}

fn summarize(c: &Common) -> Result<()> {
    let dir = c.input.clone().unwrap_or_else(|| c.output_dir.clone());
    let first = runner::checkpoint_path(&dir, 0);
    let kind = runner::checkpoint_kind(&first)?;
    let (files, rhat) = match kind.as_str() {
        "trans" => {
            let (meta, schedule, outs): (RunMeta, Schedule, Vec<TransChainOutput>) = runner::load_checkpoint_outputs(&dir)?;
            runner::write_trans_outputs(&c.output_dir, &meta, &schedule, &outs.iter().collect::<Vec<_>>())?
        }
        "isi" => {
            let (meta, schedule, outs): (RunMeta, Schedule, Vec<IsiChainOutput>) = runner::load_checkpoint_outputs(&dir)?;
            runner::write_isi_outputs(&c.output_dir, &meta, &schedule, &outs.iter().collect::<Vec<_>>())?
        }
        other => return Err(Error::CheckpointMismatch(format!("unknown checkpoint kind `{other}`"))),
    };
    print_rhat(&rhat);
    println!("wrote {}", files.join(", "));
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("Usage", first));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::FitTrans(c) => fit_trans(c),
        Command::FitIsi(c) => fit_isi(c),
        Command::SelectK(c) => select_k(c),
        Command::Simulate(c) => simulate(c),
        Command::Summarize(c) => summarize(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
