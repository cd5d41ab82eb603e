//! Chain scheduling, checkpoints and result files for both samplers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::de::{DeserializeOwned, IgnoredAny};
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSpec, SequenceDataset, SYLLABLE_LABELS};
use crate::dist::{RngSnapshot, RngStream};
use crate::error::{Error, Result};
use crate::isi::{IsiData, IsiHyperParams, IsiModel, IsiModelState, IsiOptions};
use crate::kmeans::kmeans_1d;
use crate::select::{recommend_k, DensityAccumulator, SelectionScore};
use crate::sim::SequenceDesign;
use crate::summary::{
    self, cluster_count_posterior, coefficient_summary, component_summary, mean_coefficients, mean_mixture_tables,
    population_transition_means, ClusterCountPosterior, IsiDraw, TransDraw,
};
use crate::trans::{floor_probabilities_vec, TransData, TransHyperParams, TransModel, TransModelState, TransOptions};

/// Run settings shared by every subcommand. Missing JSON fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub k: usize,
    pub k_grid: Vec<usize>,
    /// Relative LPML tolerance for the model-selection plateau.
    pub plateau: f64,
    pub min_draws: usize,
    /// Transition hyper-parameters; data-driven defaults when absent.
    pub trans_hyper: Option<TransHyperParams>,
    pub isi_hyper: IsiHyperParams,
    pub trans_options: TransOptions,
    pub isi_options: IsiOptions,
    pub scenario: Option<String>,
    pub design: SequenceDesign,
    /// Reference parameter file for `simulate`; the bundled reference when absent.
    pub reference: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 10_000,
            burn_in: 2_000,
            thin: 5,
            chains: 4,
            seed: 1,
            checkpoint_every: 500,
            k: 4,
            k_grid: vec![2, 3, 4, 5, 6, 8, 10],
            plateau: 0.001,
            min_draws: 100,
            trans_hyper: None,
            isi_hyper: IsiHyperParams::default(),
            trans_options: TransOptions::default(),
            isi_options: IsiOptions::default(),
            scenario: None,
            design: SequenceDesign::default(),
            reference: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.burn_in >= self.iterations {
            return bad("burn_in must be smaller than iterations");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.chains == 0 {
            return bad("at least one chain is required");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.k == 0 || self.k_grid.contains(&0) {
            return bad("component counts must be positive");
        }
        if !(self.plateau >= 0.0) {
            return bad("plateau tolerance must be non-negative");
        }
        Ok(())
    }

    pub fn kept_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { iterations: self.iterations, burn_in: self.burn_in, thin: self.thin, seed: self.seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Schedule {
    /// Whether sweep `t` (1-based) is kept.
    pub fn keeps(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in) % self.thin == 0
    }
}

/// A model that can be run as a resumable chain.
pub trait ChainSampler: Clone + Send + Sync {
    type State: Clone + Serialize + DeserializeOwned + Send;
    type Output: Clone + Serialize + DeserializeOwned + Send;

    fn kind(&self) -> &'static str;
    fn new_output(&self) -> Self::Output;
    fn init(&self, rng: &mut RngStream) -> Result<(Self::State, Vec<String>)>;
    fn sweep(&self, s: &mut Self::State, rng: &mut RngStream) -> Result<()>;
    fn record(&self, iteration: usize, s: &Self::State, keep: bool, out: &mut Self::Output) -> Result<()>;
    fn hyper(&self) -> serde_json::Value;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransTraceRow {
    pub iteration: usize,
    pub k: Vec<usize>,
    pub alpha_fixed: f64,
    pub alpha_rand: f64,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransChainOutput {
    pub trace: Vec<TransTraceRow>,
    pub draws: Vec<TransDraw>,
}

impl ChainSampler for TransModel {
    type State = TransModelState;
    type Output = TransChainOutput;

    fn kind(&self) -> &'static str {
        "trans"
    }

    fn new_output(&self) -> TransChainOutput {
        TransChainOutput { trace: Vec::new(), draws: Vec::new() }
    }

    fn init(&self, rng: &mut RngStream) -> Result<(TransModelState, Vec<String>)> {
        TransModel::init(self, rng)
    }

    fn sweep(&self, s: &mut TransModelState, rng: &mut RngStream) -> Result<()> {
        TransModel::sweep(self, s, rng)
    }

    fn record(&self, iteration: usize, s: &TransModelState, keep: bool, out: &mut TransChainOutput) -> Result<()> {
        out.trace.push(TransTraceRow {
            iteration,
            k: s.k(),
            alpha_fixed: s.alpha_fixed,
            alpha_rand: s.alpha_rand,
            log_likelihood: self.log_likelihood(s),
        });
        if keep {
            out.draws.push(TransDraw::from_state(self, s));
        }
        Ok(())
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::to_value(&self.hyper).expect("hyper-parameters serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiTraceRow {
    pub iteration: usize,
    /// Component shapes and rates in canonical (increasing mean) order.
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
    pub k: Vec<usize>,
    pub alpha_fixed: f64,
    pub alpha_rand: f64,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiChainOutput {
    pub trace: Vec<IsiTraceRow>,
    pub draws: Vec<IsiDraw>,
    pub densities: DensityAccumulator,
}

impl ChainSampler for IsiModel {
    type State = IsiModelState;
    type Output = IsiChainOutput;

    fn kind(&self) -> &'static str {
        "isi"
    }

    fn new_output(&self) -> IsiChainOutput {
        IsiChainOutput {
            trace: Vec::new(),
            draws: Vec::new(),
            densities: DensityAccumulator::new(self.data.records.len()),
        }
    }

    fn init(&self, rng: &mut RngStream) -> Result<(IsiModelState, Vec<String>)> {
        let mut m = self.clone();
        let out = IsiModel::init(&mut m, rng)?;
        if m.hyper != self.hyper {
            return Err(Error::InvalidConfig("lambda00 must be resolved before running chains".into()));
        }
        Ok(out)
    }

    fn sweep(&self, s: &mut IsiModelState, rng: &mut RngStream) -> Result<()> {
        IsiModel::sweep(self, s, rng)
    }

    fn record(&self, iteration: usize, s: &IsiModelState, keep: bool, out: &mut IsiChainOutput) -> Result<()> {
        let mut dens = Vec::with_capacity(self.data.records.len());
        self.record_log_densities(s, &mut dens);
        let order = summary::canonical_order(&s.components);
        out.trace.push(IsiTraceRow {
            iteration,
            shape: order.iter().map(|&o| s.components[o].shape).collect(),
            rate: order.iter().map(|&o| s.components[o].rate).collect(),
            k: s.cluster_counts(),
            alpha_fixed: s.alpha_fixed,
            alpha_rand: s.alpha_rand,
            log_likelihood: dens.iter().sum(),
        });
        if keep {
            out.densities.push(&dens);
            out.draws.push(IsiDraw::from_state(self, s));
        }
        Ok(())
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::to_value(&self.hyper).expect("hyper-parameters serialize")
    }
}

impl IsiModel {
    /// Sets `λ₀₀` to the k-means cluster proportions, once for all chains.
    pub fn resolve_lambda00(&mut self, rng: &mut RngStream) -> Result<()> {
        if self.hyper.lambda00.is_none() {
            let xs: Vec<f64> = self.data.records.iter().map(|r| r.x).collect();
            let km = kmeans_1d(&xs, self.k, 100, rng)?;
            let n = xs.len() as f64;
            self.hyper.lambda00 = Some(floor_probabilities_vec(km.sizes().iter().map(|&c| c as f64 / n).collect()));
        }
        Ok(())
    }
}

/// Dataset metadata stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub covariates: Vec<CovariateSpec>,
    pub mouse_labels: Vec<String>,
    pub n_records: usize,
}

impl RunMeta {
    pub fn of(ds: &SequenceDataset) -> Self {
        RunMeta { covariates: ds.covariates.clone(), mouse_labels: ds.mouse_labels.clone(), n_records: ds.n_transitions() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<S, O> {
    pub kind: String,
    pub chain: usize,
    pub sweep: usize,
    pub completed: bool,
    pub schedule: Schedule,
    pub meta: RunMeta,
    pub hyper: serde_json::Value,
    pub rng: RngSnapshot,
    pub warnings: Vec<String>,
    pub output: O,
    pub state: S,
}

pub fn checkpoint_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("chain{}.json", chain + 1))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, value)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let r = std::io::BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

#[derive(Clone, Debug)]
pub struct ChainResult<S, O> {
    pub chain: usize,
    pub state: S,
    pub output: O,
    pub warnings: Vec<String>,
    pub completed: bool,
}

/// Where and how a chain persists itself.
#[derive(Clone, Debug, Default)]
pub struct Persistence {
    pub output_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop once this many sweeps have been run in total (for interruption tests).
    pub stop_after: Option<usize>,
}

pub fn run_chain<M: ChainSampler>(model: &M, config: &RunConfig, meta: &RunMeta, chain: usize, persist: &Persistence) -> Result<ChainResult<M::State, M::Output>> {
    let schedule = config.schedule();
    let path = persist.output_dir.as_ref().map(|d| checkpoint_path(d, chain));
    let hyper = model.hyper();

    let resumed = match (&path, persist.resume) {
        (Some(p), true) if p.exists() => {
            let cp: Checkpoint<M::State, M::Output> = read_json(p)?;
            if cp.kind != model.kind() || cp.schedule != schedule || cp.chain != chain || cp.hyper != hyper {
                return Err(Error::CheckpointMismatch(format!("{} was written by a different run", p.display())));
            }
            Some(cp)
        }
        _ => None,
    };
    let (mut state, mut rng, mut output, warnings, start) = match resumed {
        Some(cp) => (cp.state, RngStream::restore(&cp.rng)?, cp.output, cp.warnings, cp.sweep),
        None => {
            let mut rng = RngStream::new(config.seed, chain as u64);
            let (state, warnings) = model.init(&mut rng)?;
            (state, rng, model.new_output(), warnings, 0)
        }
    };

    let save = |sweep: usize, state: &M::State, rng: &RngStream, output: &M::Output, warnings: &[String]| -> Result<()> {
        if let Some(p) = &path {
            let cp = Checkpoint {
                kind: model.kind().to_string(),
                chain,
                sweep,
                completed: sweep == schedule.iterations,
                schedule,
                meta: meta.clone(),
                hyper: hyper.clone(),
                rng: rng.snapshot(),
                warnings: warnings.to_vec(),
                output,
                state,
            };
            write_json_atomic(p, &cp)?;
        }
        Ok(())
    };

    let mut t = start;
    while t < schedule.iterations {
        if persist.stop_after.is_some_and(|s| t >= s) {
            save(t, &state, &rng, &output, &warnings)?;
            return Ok(ChainResult { chain, state, output, warnings, completed: false });
        }
        model.sweep(&mut state, &mut rng)?;
        t += 1;
        model.record(t, &state, schedule.keeps(t), &mut output)?;
        if t % config.checkpoint_every == 0 && t < schedule.iterations {
            save(t, &state, &rng, &output, &warnings)?;
        }
        if t % 1000 == 0 {
            info!("{} chain {}: sweep {t}/{}", model.kind(), chain + 1, schedule.iterations);
        }
    }
    save(t, &state, &rng, &output, &warnings)?;
    Ok(ChainResult { chain, state, output, warnings, completed: true })
}

/// Worker count: one per chain, capped by `MRMM_THREADS` when set.
pub fn worker_count(chains: usize) -> usize {
    let cap = std::env::var("MRMM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(chains, |c| c.min(chains)).max(1)
}

pub fn run_chains<M: ChainSampler>(model: &M, config: &RunConfig, meta: &RunMeta, persist: &Persistence) -> Result<Vec<ChainResult<M::State, M::Output>>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(config.chains))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| (0..config.chains).into_par_iter().map(|c| run_chain(model, config, meta, c, persist)).collect())
}

pub fn build_trans_model(ds: &SequenceDataset, config: &RunConfig) -> Result<(TransModel, Vec<String>)> {
    let (hyper, warnings) = match &config.trans_hyper {
        Some(h) => (h.clone(), Vec::new()),
        None => TransHyperParams::for_dataset(ds)?,
    };
    for w in &warnings {
        warn!("{w}");
    }
    Ok((TransModel::new(TransData::from_dataset(ds), hyper, config.trans_options)?, warnings))
}

pub fn build_isi_model(ds: &SequenceDataset, k: usize, config: &RunConfig) -> Result<IsiModel> {
    let mut model = IsiModel::new(IsiData::from_dataset(ds), k, config.isi_hyper.clone(), config.isi_options)?;
    model.resolve_lambda00(&mut RngStream::new(config.seed, u64::MAX))?;
    Ok(model)
}

pub struct TransFit {
    pub model: TransModel,
    pub meta: RunMeta,
    pub chains: Vec<ChainResult<TransModelState, TransChainOutput>>,
    pub warnings: Vec<String>,
}

pub struct IsiFit {
    pub model: IsiModel,
    pub meta: RunMeta,
    pub chains: Vec<ChainResult<IsiModelState, IsiChainOutput>>,
}

impl TransFit {
    pub fn completed(&self) -> bool {
        self.chains.iter().all(|c| c.completed)
    }

    pub fn outputs(&self) -> Vec<&TransChainOutput> {
        self.chains.iter().map(|c| &c.output).collect()
    }
}

impl IsiFit {
    pub fn completed(&self) -> bool {
        self.chains.iter().all(|c| c.completed)
    }

    pub fn outputs(&self) -> Vec<&IsiChainOutput> {
        self.chains.iter().map(|c| &c.output).collect()
    }

    pub fn score(&self, min_draws: usize) -> Result<SelectionScore> {
        let mut acc = DensityAccumulator::new(self.meta.n_records);
        for c in &self.chains {
            acc.merge(&c.output.densities)?;
        }
        SelectionScore::from_accumulator(self.model.k, &acc, min_draws)
    }
}

pub fn fit_trans(ds: &SequenceDataset, config: &RunConfig, persist: &Persistence) -> Result<TransFit> {
    let (model, warnings) = build_trans_model(ds, config)?;
    let meta = RunMeta::of(ds);
    let chains = run_chains(&model, config, &meta, persist)?;
    Ok(TransFit { model, meta, chains, warnings })
}

pub fn fit_isi(ds: &SequenceDataset, k: usize, config: &RunConfig, persist: &Persistence) -> Result<IsiFit> {
    let model = build_isi_model(ds, k, config)?;
    let meta = RunMeta::of(ds);
    let chains = run_chains(&model, config, &meta, persist)?;
    Ok(IsiFit { model, meta, chains })
}

/// Fits every `K` of the grid and scores it.
pub fn select_k(ds: &SequenceDataset, config: &RunConfig) -> Result<(Vec<SelectionScore>, Option<usize>)> {
    let mut grid = config.k_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty K grid".into()));
    }
    if grid.len() == 1 {
        let fit = fit_isi(ds, grid[0], config, &Persistence::default())?;
        let score = fit.score(config.min_draws)?;
        return Ok((vec![score], Some(grid[0])));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &k in &grid {
        let fit = fit_isi(ds, k, config, &Persistence::default())?;
        let s = fit.score(config.min_draws)?;
        info!("K = {k}: LPML {:.3}, WAIC {:.3}", s.lpml, s.waic);
        scores.push(s);
    }
    let rec = recommend_k(&scores, config.plateau);
    Ok((scores, rec))
}

/// Pooled summaries of transition-model chains.
pub struct TransSummary {
    pub k_posteriors: Vec<ClusterCountPosterior>,
    pub transition_means: Vec<summary::MatrixSummary>,
    pub coefficients_last: Vec<summary::CoefficientRow>,
    pub coefficients_mean: Vec<summary::CoefficientRow>,
}

pub fn summarize_trans(meta: &RunMeta, outputs: &[&TransChainOutput]) -> Result<TransSummary> {
    let draws: Vec<TransDraw> = outputs.iter().flat_map(|o| o.draws.iter().cloned()).collect();
    if draws.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let k_posteriors = meta
        .covariates
        .iter()
        .enumerate()
        .map(|(j, c)| cluster_count_posterior(&draws.iter().map(|d| d.k[j]).collect::<Vec<_>>(), c.d()))
        .collect::<Result<_>>()?;
    let to_vecs = |pi: &[crate::trans::Row]| pi.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let last = &outputs[0].draws.last().ok_or(Error::EmptyTrace)?.pi0;
    let per_draw: Vec<Vec<Vec<f64>>> = draws.iter().map(|d| to_vecs(&d.pi0)).collect();
    Ok(TransSummary {
        k_posteriors,
        transition_means: population_transition_means(&draws)?,
        coefficients_last: coefficient_summary(&to_vecs(last))?,
        coefficients_mean: coefficient_summary(&mean_coefficients(&per_draw)?)?,
    })
}

pub struct IsiSummary {
    pub k_posteriors: Vec<ClusterCountPosterior>,
    pub fixed_tables: summary::LevelTables,
    pub population_tables: summary::LevelTables,
    pub last_tables: summary::LevelTables,
    pub components: Vec<summary::ComponentSummary>,
    pub coefficients_last: Vec<summary::CoefficientRow>,
    pub coefficients_mean: Vec<summary::CoefficientRow>,
}

/// Covariates of the interval model: the exogenous ones plus the preceding syllable.
pub fn isi_covariates(meta: &RunMeta) -> Vec<CovariateSpec> {
    let mut c = meta.covariates.clone();
    c.push(CovariateSpec::preceding_syllable());
    c
}

pub fn summarize_isi(meta: &RunMeta, outputs: &[&IsiChainOutput]) -> Result<IsiSummary> {
    let draws: Vec<IsiDraw> = outputs.iter().flat_map(|o| o.draws.iter().cloned()).collect();
    if draws.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let covs = isi_covariates(meta);
    let k_posteriors = covs
        .iter()
        .enumerate()
        .map(|(j, c)| cluster_count_posterior(&draws.iter().map(|d| d.k[j]).collect::<Vec<_>>(), c.d()))
        .collect::<Result<_>>()?;
    let (fixed_tables, population_tables) = mean_mixture_tables(&draws)?;
    let last_draw = outputs[0].draws.last().ok_or(Error::EmptyTrace)?;
    let last = &last_draw.pi0;
    let per_draw: Vec<Vec<Vec<f64>>> = draws.iter().map(|d| d.pi0.clone()).collect();
    Ok(IsiSummary {
        k_posteriors,
        fixed_tables,
        population_tables,
        last_tables: last_draw.fixed_tables.clone(),
        components: component_summary(&draws)?,
        coefficients_last: coefficient_summary(last)?,
        coefficients_mean: coefficient_summary(&mean_coefficients(&per_draw)?)?,
    })
}

fn csv_file(dir: &Path, name: &str, files: &mut Vec<String>) -> Result<BufWriter<File>> {
    files.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn write_trace_csv<R, F>(path: &Path, header: &[String], rows: &[R], to_fields: F) -> Result<()>
where
    F: Fn(&R) -> Vec<String>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    for r in rows {
        w.write_record(to_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Named scalar series per chain, post burn-in.
type Series = Vec<(String, Vec<Vec<f64>>)>;

fn diagnostics_csv(path: &Path, series: &Series) -> Result<Vec<(String, f64)>> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["statistic", "mean", "sd", "ess", "geweke_z_max_abs", "r_hat"])?;
    let mut rhats = Vec::new();
    for (name, chains) in series {
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        if pooled.is_empty() {
            continue;
        }
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let sd = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let ess: f64 = chains.iter().map(|c| summary::effective_sample_size(c)).sum();
        let gz = chains.iter().map(|c| summary::geweke_z(c).abs()).fold(0.0, f64::max);
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let rh = summary::r_hat(&refs);
        w.write_record([name.clone(), fmt_f(mean), fmt_f(sd), fmt_f(ess), fmt_f(gz), fmt_f(rh)])?;
        rhats.push((name.clone(), rh));
    }
    w.flush()?;
    Ok(rhats)
}

fn trans_series(meta: &RunMeta, outputs: &[&TransChainOutput], burn_in: usize) -> Series {
    let post = |o: &&TransChainOutput| o.trace.iter().filter(|r| r.iteration > burn_in).cloned().collect::<Vec<_>>();
    let rows: Vec<Vec<TransTraceRow>> = outputs.iter().map(post).collect();
    let mut s: Series = Vec::new();
    for (j, c) in meta.covariates.iter().enumerate() {
        s.push((format!("k_{}", c.name), rows.iter().map(|r| r.iter().map(|x| x.k[j] as f64).collect()).collect()));
    }
    s.push(("alpha_fixed".into(), rows.iter().map(|r| r.iter().map(|x| x.alpha_fixed).collect()).collect()));
    s.push(("alpha_rand".into(), rows.iter().map(|r| r.iter().map(|x| x.alpha_rand).collect()).collect()));
    s.push(("log_likelihood".into(), rows.iter().map(|r| r.iter().map(|x| x.log_likelihood).collect()).collect()));
    s
}

fn isi_series(covs: &[CovariateSpec], outputs: &[&IsiChainOutput], burn_in: usize) -> Series {
    let rows: Vec<Vec<IsiTraceRow>> =
        outputs.iter().map(|o| o.trace.iter().filter(|r| r.iteration > burn_in).cloned().collect()).collect();
    let k = rows.iter().flatten().next().map_or(0, |r| r.shape.len());
    let mut s: Series = Vec::new();
    for j in 0..k {
        s.push((format!("shape_{}", j + 1), rows.iter().map(|r| r.iter().map(|x| x.shape[j]).collect()).collect()));
        s.push((format!("rate_{}", j + 1), rows.iter().map(|r| r.iter().map(|x| x.rate[j]).collect()).collect()));
    }
    for (j, c) in covs.iter().enumerate() {
        s.push((format!("k_{}", c.name), rows.iter().map(|r| r.iter().map(|x| x.k[j] as f64).collect()).collect()));
    }
    s.push(("alpha_fixed".into(), rows.iter().map(|r| r.iter().map(|x| x.alpha_fixed).collect()).collect()));
    s.push(("alpha_rand".into(), rows.iter().map(|r| r.iter().map(|x| x.alpha_rand).collect()).collect()));
    s.push(("log_likelihood".into(), rows.iter().map(|r| r.iter().map(|x| x.log_likelihood).collect()).collect()));
    s
}

/// Files written for a finished transition fit; returns the file names and R-hat values.
pub fn write_trans_outputs(dir: &Path, meta: &RunMeta, schedule: &Schedule, outputs: &[&TransChainOutput]) -> Result<(Vec<String>, Vec<(String, f64)>)> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut header = vec!["iteration".to_string()];
    header.extend(meta.covariates.iter().map(|c| format!("k_{}", c.name)));
    header.extend(["alpha_fixed", "alpha_rand", "log_likelihood"].map(String::from));
    for (c, o) in outputs.iter().enumerate() {
        let name = format!("trace_chain{}.csv", c + 1);
        write_trace_csv(&dir.join(&name), &header, &o.trace, |r| {
            let mut f = vec![r.iteration.to_string()];
            f.extend(r.k.iter().map(|k| k.to_string()));
            f.extend([fmt_f(r.alpha_fixed), fmt_f(r.alpha_rand), fmt_f(r.log_likelihood)]);
            f
        })?;
        files.push(name);
    }
    let s = summarize_trans(meta, outputs)?;
    let names: Vec<String> = meta.covariates.iter().map(|c| c.name.clone()).collect();
    summary::write_k_posterior_csv(&names, &s.k_posteriors, csv_file(dir, "k_posterior.csv", &mut files)?)?;
    summary::write_transition_means_csv(&meta.covariates, &s.transition_means, csv_file(dir, "transition_means.csv", &mut files)?)?;
    let labels: Vec<String> = SYLLABLE_LABELS.iter().map(|l| format!("pi0_{l}")).collect();
    summary::write_coefficients_csv(
        &labels,
        &[("last_draw", &s.coefficients_last), ("trace_mean", &s.coefficients_mean)],
        csv_file(dir, "coefficients.csv", &mut files)?,
    )?;
    files.push("diagnostics.csv".into());
    let rhat = diagnostics_csv(&dir.join("diagnostics.csv"), &trans_series(meta, outputs, schedule.burn_in))?;
    Ok((files, rhat))
}

pub fn write_isi_outputs(dir: &Path, meta: &RunMeta, schedule: &Schedule, outputs: &[&IsiChainOutput]) -> Result<(Vec<String>, Vec<(String, f64)>)> {
    fs::create_dir_all(dir)?;
    let covs = isi_covariates(meta);
    let mut files = Vec::new();
    let k = outputs.iter().flat_map(|o| o.trace.first()).next().map_or(0, |r| r.shape.len());
    let mut header = vec!["iteration".to_string()];
    header.extend((1..=k).map(|j| format!("shape_{j}")));
    header.extend((1..=k).map(|j| format!("rate_{j}")));
    header.extend(covs.iter().map(|c| format!("k_{}", c.name)));
    header.extend(["alpha_fixed", "alpha_rand", "log_likelihood"].map(String::from));
    for (c, o) in outputs.iter().enumerate() {
        let name = format!("trace_chain{}.csv", c + 1);
        write_trace_csv(&dir.join(&name), &header, &o.trace, |r| {
            let mut f = vec![r.iteration.to_string()];
            f.extend(r.shape.iter().map(|&x| fmt_f(x)));
            f.extend(r.rate.iter().map(|&x| fmt_f(x)));
            f.extend(r.k.iter().map(|k| k.to_string()));
            f.extend([fmt_f(r.alpha_fixed), fmt_f(r.alpha_rand), fmt_f(r.log_likelihood)]);
            f
        })?;
        files.push(name);
    }
    let s = summarize_isi(meta, outputs)?;
    let names: Vec<String> = covs.iter().map(|c| c.name.clone()).collect();
    summary::write_k_posterior_csv(&names, &s.k_posteriors, csv_file(dir, "k_posterior.csv", &mut files)?)?;
    let tables: Vec<(&str, &summary::LevelTables)> =
        vec![("trace_mean_fixed", &s.fixed_tables), ("trace_mean_population", &s.population_tables), ("last_draw_fixed", &s.last_tables)];
    summary::write_mixture_csv(&covs, &tables, csv_file(dir, "mixture_probs.csv", &mut files)?)?;
    summary::write_components_csv(&s.components, csv_file(dir, "components.csv", &mut files)?)?;
    let labels: Vec<String> = (1..=k).map(|j| format!("pi0_component{j}")).collect();
    summary::write_coefficients_csv(
        &labels,
        &[("last_draw", &s.coefficients_last), ("trace_mean", &s.coefficients_mean)],
        csv_file(dir, "coefficients.csv", &mut files)?,
    )?;
    files.push("diagnostics.csv".into());
    let rhat = diagnostics_csv(&dir.join("diagnostics.csv"), &isi_series(&covs, outputs, schedule.burn_in))?;
    Ok((files, rhat))
}

/// Run manifest written next to the outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub input: Option<PathBuf>,
    pub config: RunConfig,
    pub n_records: usize,
    pub wall_time_secs: f64,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub r_hat: Vec<(String, f64)>,
    pub scores: Option<Vec<SelectionScore>>,
    pub recommended_k: Option<usize>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.flush()?;
    Ok(())
}

/// Kind recorded in a checkpoint file, without parsing the rest.
pub fn checkpoint_kind(path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Head {
        kind: String,
    }
    Ok(read_json::<Head>(path)?.kind)
}

pub fn load_checkpoint_outputs<O: DeserializeOwned>(dir: &Path) -> Result<(RunMeta, Schedule, Vec<O>)> {
    let mut chain = 0;
    let mut outputs = Vec::new();
    let mut head = None;
    loop {
        let p = checkpoint_path(dir, chain);
        if !p.exists() {
            break;
        }
        let cp: Checkpoint<IgnoredAny, O> = read_json(&p)?;
        if !cp.completed {
            return Err(Error::CheckpointMismatch(format!("{} is incomplete; resume the run first", p.display())));
        }
        head.get_or_insert((cp.meta, cp.schedule));
        outputs.push(cp.output);
        chain += 1;
    }
    let (meta, schedule) = head.ok_or_else(|| Error::MissingFile(checkpoint_path(dir, 0)))?;
    Ok((meta, schedule, outputs))
}
