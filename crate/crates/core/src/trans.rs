//! Gibbs sampler for the mixed-effects Markov model of syllable transitions.
//!
//! Transition probabilities for a record of mouse `i` whose covariate levels
//! fall in clusters `h` are `π₀ λ_h(·|prev) + (1 − π₀) λ⁽ⁱ⁾(·|prev)`, with both
//! components centered on a shared `λ₀(·|prev)`. The partition of each
//! covariate's levels is sampled level by level with the fixed effects
//! integrated out.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flatten, mixed_radix_index, mixed_radix_levels, FlatRecord, SequenceDataset, N_SYLLABLES};
use crate::dist::{
    sample_bernoulli, sample_beta, sample_dirichlet_into, sample_gamma, sample_multinomial_index,
};
use crate::error::{Error, Result};
use crate::partition::{calibrate_partition_concentration, combo_map, Partition};
use crate::special::ln_gamma;

pub type Row = [f64; N_SYLLABLES];
pub type Matrix = [Row; N_SYLLABLES];

const ZERO_MATRIX: Matrix = [[0.0; N_SYLLABLES]; N_SYLLABLES];

/// Compact transition record: mouse, exogenous level cell, and the two syllables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransRecord {
    pub mouse: u32,
    /// Mixed-radix index of the exogenous covariate levels.
    pub cell: u32,
    pub prev: u8,
    pub cur: u8,
    /// True when `prev` is the `cur` of the preceding record.
    pub continues: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransData {
    pub n_mice: usize,
    /// Level counts of the exogenous covariates.
    pub dims: Vec<usize>,
    pub records: Vec<TransRecord>,
}

impl TransData {
    pub fn from_dataset(ds: &SequenceDataset) -> Self {
        TransData::from_records(&flatten(ds), ds.covariate_dims(), ds.n_mice())
    }

    pub fn from_records(records: &[FlatRecord], dims: Vec<usize>, n_mice: usize) -> Self {
        let mut out = Vec::with_capacity(records.len());
        let mut last_seq = None;
        for r in records {
            out.push(TransRecord {
                mouse: r.mouse as u32,
                cell: mixed_radix_index(&dims, &r.covariates) as u32,
                prev: r.prev.index() as u8,
                cur: r.cur.index() as u8,
                continues: last_seq == Some(r.sequence),
            });
            last_seq = Some(r.sequence);
        }
        TransData { n_mice, dims, records: out }
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell_levels(&self, cell: usize) -> Vec<usize> {
        mixed_radix_levels(&self.dims, cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransHyperParams {
    pub alpha00: f64,
    /// Global syllable frequencies centering `λ₀`.
    pub lambda00: Row,
    /// Symmetric Dirichlet concentration of `μ_j`, one per covariate.
    pub alpha_partition: Vec<f64>,
    /// Beta prior `(a₀, a₁)` of `π₀⁽ⁱ⁾`.
    pub beta_pi: (f64, f64),
    /// Gamma prior `(shape, rate)` of the fixed-effect concentration.
    pub gamma_alpha_fixed: (f64, f64),
    /// Gamma prior `(shape, rate)` of the random-effect concentration.
    pub gamma_alpha_rand: (f64, f64),
}

impl TransHyperParams {
    /// Defaults: `α₀₀ = 1`, `λ₀₀` the observed syllable frequencies, each
    /// `α_j` calibrated to a prior single-cluster probability of 1/2, all
    /// other hyper-parameters 1. Returns calibration warnings alongside.
    pub fn for_dataset(ds: &SequenceDataset) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        let mut alpha_partition = Vec::new();
        for spec in &ds.covariates {
            let c = calibrate_partition_concentration(spec.d(), 0.5)?;
            if !c.exact {
                warnings.push(format!(
                    "covariate `{}`: prior P(k = 1) = 1/2 is unattainable with {} levels; using alpha = {:.4} (P = {:.4})",
                    spec.name,
                    spec.d(),
                    c.alpha,
                    c.single_cluster_probability
                ));
            }
            alpha_partition.push(c.alpha);
        }
        let hyper = TransHyperParams {
            alpha00: 1.0,
            lambda00: floor_probabilities(ds.syllable_frequencies()),
            alpha_partition,
            beta_pi: (1.0, 1.0),
            gamma_alpha_fixed: (1.0, 1.0),
            gamma_alpha_rand: (1.0, 1.0),
        };
        Ok((hyper, warnings))
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let ok = positive(self.alpha00)
            && self.lambda00.iter().all(|&x| positive(x))
            && (self.lambda00.iter().sum::<f64>() - 1.0).abs() < 1e-8
            && self.alpha_partition.iter().all(|&x| positive(x))
            && positive(self.beta_pi.0)
            && positive(self.beta_pi.1)
            && positive(self.gamma_alpha_fixed.0)
            && positive(self.gamma_alpha_fixed.1)
            && positive(self.gamma_alpha_rand.0)
            && positive(self.gamma_alpha_rand.1);
        if !ok {
            return Err(Error::InvalidConfig("transition hyper-parameters must be positive; lambda00 must be a probability vector".into()));
        }
        if self.alpha_partition.len() != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} partition concentrations, got {}",
                dims.len(),
                self.alpha_partition.len()
            )));
        }
        Ok(())
    }

    /// Population weight of the fixed effect once the random effects are integrated out.
    pub fn population_pi0(&self) -> f64 {
        self.beta_pi.0 / (self.beta_pi.0 + self.beta_pi.1)
    }
}

/// Floors zero frequencies at 1e-6 and renormalizes.
pub(crate) fn floor_probabilities<const N: usize>(mut p: [f64; N]) -> [f64; N] {
    for x in p.iter_mut() {
        *x = x.max(1e-6);
    }
    let total: f64 = p.iter().sum();
    p.map(|x| x / total)
}

pub(crate) fn floor_probabilities_vec(mut p: Vec<f64>) -> Vec<f64> {
    for x in p.iter_mut() {
        *x = x.max(1e-6);
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransOptions {
    /// Redraw both effect components after the concentration and `λ₀`
    /// updates, which integrate them out. Needed for an exactly invariant
    /// chain; off by default to follow the published step order.
    pub refresh_after_hyper: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransModelState {
    pub partitions: Vec<Partition>,
    /// Label probabilities per covariate, length `d_j`.
    pub mu: Vec<Vec<f64>>,
    pub lambda0: Matrix,
    /// Fixed effects per cluster combination (mixed radix over `k_j`).
    pub lambda_fixed: Vec<Matrix>,
    /// Random effects per mouse.
    pub lambda_rand: Vec<Matrix>,
    /// `π₀⁽ⁱ⁾(prev)` per mouse.
    pub pi0: Vec<Row>,
    /// Per-record indicator of the random-effect component.
    pub v: Vec<bool>,
    pub alpha_fixed: f64,
    pub alpha_rand: f64,
}

impl TransModelState {
    pub fn cluster_dims(&self) -> Vec<usize> {
        self.partitions.iter().map(Partition::k).collect()
    }

    pub fn k(&self) -> Vec<usize> {
        self.cluster_dims()
    }

    /// Cluster combination index of each exogenous level cell.
    pub fn cell_to_combo(&self, dims: &[usize]) -> Vec<usize> {
        combo_map(&self.partitions, dims)
    }

    /// Checks every structural and probabilistic invariant.
    pub fn check_invariants(&self, data: &TransData) -> Result<()> {
        let fail = |m: String| Err(Error::Domain(m));
        let rows_ok = |m: &Matrix| m.iter().all(|r| row_ok(r));
        if self.partitions.len() != data.dims.len() {
            return fail("partition count mismatch".into());
        }
        for (p, &d) in self.partitions.iter().zip(&data.dims) {
            if p.d() != d || p.k() == 0 || p.k() > d || *p != Partition::from_labels(p.labels()) {
                return fail(format!("partition {:?} not canonical", p.labels()));
            }
        }
        let n_combo: usize = self.cluster_dims().iter().product();
        if self.lambda_fixed.len() != n_combo {
            return fail(format!("{} fixed effects for {} occupied combinations", self.lambda_fixed.len(), n_combo));
        }
        if !rows_ok(&self.lambda0) || !self.lambda_fixed.iter().all(rows_ok) || !self.lambda_rand.iter().all(rows_ok) {
            return fail("probability row invalid".into());
        }
        if self.lambda_rand.len() != data.n_mice || self.pi0.len() != data.n_mice {
            return fail("per-mouse parameter count mismatch".into());
        }
        if !self.pi0.iter().flatten().all(|&p| p > 0.0 && p < 1.0) {
            return fail("pi0 outside (0, 1)".into());
        }
        for (mu, &d) in self.mu.iter().zip(&data.dims) {
            if mu.len() != d || !vec_ok(mu) {
                return fail("mu invalid".into());
            }
        }
        if !(self.alpha_fixed > 0.0 && self.alpha_fixed.is_finite() && self.alpha_rand > 0.0 && self.alpha_rand.is_finite()) {
            return fail("concentration not positive".into());
        }
        if self.v.len() != data.records.len() {
            return fail("indicator count mismatch".into());
        }
        Ok(())
    }
}

pub(crate) fn vec_ok(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-10
}

fn row_ok(r: &Row) -> bool {
    vec_ok(r)
}

/// Totals produced by the auxiliary-variable step.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryTables {
    /// `v(cur | prev)`: table counts summed over fixed and random groups.
    pub tables: Matrix,
    pub v_fixed: f64,
    pub s_fixed: f64,
    pub log_r_fixed: f64,
    pub v_rand: f64,
    pub s_rand: f64,
    pub log_r_rand: f64,
}

/// Number of occupied tables among `n` customers of a Chinese restaurant
/// with concentration `c`: `Σ_ℓ Bernoulli(c / (ℓ − 1 + c))`.
pub(crate) fn sample_tables<R: Rng + ?Sized>(rng: &mut R, n: u64, c: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut m = 1.0;
    for l in 2..=n {
        if rng.random::<f64>() < c / ((l - 1) as f64 + c) {
            m += 1.0;
        }
    }
    m
}

fn dirichlet_row<R: Rng + ?Sized>(rng: &mut R, conc: &Row) -> Result<Row> {
    let mut out = [0.0; N_SYLLABLES];
    sample_dirichlet_into(rng, conc, &mut out)?;
    Ok(out)
}

/// `ln B(c + n) − ln B(c)` for one Dirichlet-multinomial row, with
/// `ln Γ(cᵢ)` and `ln Γ(Σc)` precomputed.
#[inline]
fn dm_row(conc: &Row, ln_g_conc: &Row, conc_sum: f64, ln_g_sum: f64, n: &Row) -> f64 {
    let total: f64 = n.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in 0..N_SYLLABLES {
        if n[y] > 0.0 {
            acc += ln_gamma(conc[y] + n[y]) - ln_g_conc[y];
        }
    }
    acc - (ln_gamma(conc_sum + total) - ln_g_sum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransModel {
    pub data: TransData,
    pub hyper: TransHyperParams,
    pub options: TransOptions,
}

impl TransModel {
    pub fn new(data: TransData, hyper: TransHyperParams, options: TransOptions) -> Result<Self> {
        hyper.validate(&data.dims)?;
        if data.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDataset("covariate with no levels".into()));
        }
        for r in &data.records {
            if r.mouse as usize >= data.n_mice || r.cell as usize >= data.n_cells() {
                return Err(Error::InvalidDataset("record index out of range".into()));
            }
        }
        Ok(TransModel { data, hyper, options })
    }

    /// Empirical start: every level its own cluster, effects at observed
    /// conditional frequencies (rows with no data fall back to `λ₀₀`),
    /// `π₀ = 0.8`, `μ` uniform, concentrations at their prior means, and the
    /// indicators drawn from their full conditional.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(TransModelState, Vec<String>)> {
        let data = &self.data;
        let mut warnings = Vec::new();
        let mut by_cell = vec![ZERO_MATRIX; data.n_cells()];
        let mut by_mouse = vec![ZERO_MATRIX; data.n_mice];
        for r in &data.records {
            by_cell[r.cell as usize][r.prev as usize][r.cur as usize] += 1.0;
            by_mouse[r.mouse as usize][r.prev as usize][r.cur as usize] += 1.0;
        }
        let empirical = |counts: &Matrix, what: &str, warnings: &mut Vec<String>| -> Matrix {
            let mut m = ZERO_MATRIX;
            for prev in 0..N_SYLLABLES {
                let total: f64 = counts[prev].iter().sum();
                if total > 0.0 {
                    for y in 0..N_SYLLABLES {
                        m[prev][y] = counts[prev][y] / total;
                    }
                } else {
                    warnings.push(format!("EmptyConditional: no transitions from `{}` in {what}; using lambda00", crate::data::SYLLABLE_LABELS[prev]));
                    m[prev] = self.hyper.lambda00;
                }
            }
            m
        };
        let lambda_fixed = by_cell
            .iter()
            .enumerate()
            .map(|(c, m)| empirical(m, &format!("covariate cell {:?}", data.cell_levels(c)), &mut warnings))
            .collect();
        let lambda_rand = by_mouse
            .iter()
            .enumerate()
            .map(|(i, m)| empirical(m, &format!("mouse {i}"), &mut warnings))
            .collect();
        for w in &warnings {
            warn!("{w}");
        }
        let mut state = TransModelState {
            partitions: data.dims.iter().map(|&d| Partition::singletons(d)).collect(),
            mu: data.dims.iter().map(|&d| vec![1.0 / d as f64; d]).collect(),
            lambda0: [self.hyper.lambda00; N_SYLLABLES],
            lambda_fixed,
            lambda_rand,
            pi0: vec![[0.8; N_SYLLABLES]; data.n_mice],
            v: vec![false; data.records.len()],
            alpha_fixed: self.hyper.gamma_alpha_fixed.0 / self.hyper.gamma_alpha_fixed.1,
            alpha_rand: self.hyper.gamma_alpha_rand.0 / self.hyper.gamma_alpha_rand.1,
        };
        self.step_v(&mut state, rng)?;
        Ok((state, warnings))
    }

    fn fixed_counts_by_cell(&self, s: &TransModelState) -> Vec<Matrix> {
        let mut counts = vec![ZERO_MATRIX; self.data.n_cells()];
        for (r, &v) in self.data.records.iter().zip(&s.v) {
            if !v {
                counts[r.cell as usize][r.prev as usize][r.cur as usize] += 1.0;
            }
        }
        counts
    }

    fn fixed_counts_by_combo(&self, s: &TransModelState) -> Vec<Matrix> {
        let c2c = s.cell_to_combo(&self.data.dims);
        let n_combo: usize = s.cluster_dims().iter().product();
        let mut counts = vec![ZERO_MATRIX; n_combo];
        for (cell, m) in self.fixed_counts_by_cell(s).iter().enumerate() {
            add_matrix(&mut counts[c2c[cell]], m);
        }
        counts
    }

    fn rand_counts(&self, s: &TransModelState) -> Vec<Matrix> {
        let mut counts = vec![ZERO_MATRIX; self.data.n_mice];
        for (r, &v) in self.data.records.iter().zip(&s.v) {
            if v {
                counts[r.mouse as usize][r.prev as usize][r.cur as usize] += 1.0;
            }
        }
        counts
    }

    /// Collapsed log marginal of the fixed-effect counts under raw labels
    /// (labels of covariate `j` may range over `0..d_j`).
    fn collapsed_log_marginal(&self, s: &TransModelState, labels: &[Vec<usize>], level_counts: &[Matrix]) -> f64 {
        let dims = &self.data.dims;
        let n_combo: usize = dims.iter().product();
        let mut pooled = vec![ZERO_MATRIX; n_combo];
        let mut clusters = vec![0; dims.len()];
        for (cell, m) in level_counts.iter().enumerate() {
            let levels = mixed_radix_levels(dims, cell);
            for (j, &l) in levels.iter().enumerate() {
                clusters[j] = labels[j][l];
            }
            add_matrix(&mut pooled[mixed_radix_index(dims, &clusters)], m);
        }
        let a = s.alpha_fixed;
        let mut total = 0.0;
        for prev in 0..N_SYLLABLES {
            let conc: Row = s.lambda0[prev].map(|x| a * x);
            let ln_g: Row = conc.map(ln_gamma);
            let sum: f64 = conc.iter().sum();
            let ln_g_sum = ln_gamma(sum);
            for m in &pooled {
                total += dm_row(&conc, &ln_g, sum, ln_g_sum, &m[prev]);
            }
        }
        total
    }

    /// Step 1: per-level Gibbs update of each covariate's cluster labels with
    /// the fixed effects integrated out, then canonical relabeling (with `μ`
    /// permuted alongside) and a fresh draw of the fixed effects for the new
    /// cluster combinations.
    pub fn step_partition_labels<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        let level_counts = self.fixed_counts_by_cell(s);
        let mut labels: Vec<Vec<usize>> = s.partitions.iter().map(|p| p.labels().to_vec()).collect();
        let mut logp = Vec::new();
        let mut weights = Vec::new();
        for j in 0..self.data.dims.len() {
            let d = self.data.dims[j];
            for level in 0..d {
                logp.clear();
                for h in 0..d {
                    labels[j][level] = h;
                    let lm = s.mu[j][h].ln();
                    logp.push(if lm == f64::NEG_INFINITY {
                        lm
                    } else {
                        lm + self.collapsed_log_marginal(s, &labels, &level_counts)
                    });
                }
                let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                weights.clear();
                weights.extend(logp.iter().map(|&l| (l - max).exp()));
                labels[j][level] = sample_multinomial_index(rng, &weights)?;
            }
            let mut raw = s.partitions[j].clone();
            for (l, &h) in labels[j].iter().enumerate() {
                raw.set_raw(l, h);
            }
            let map = raw.canonicalize();
            s.mu[j] = permute_mu(&s.mu[j], &map);
            labels[j] = raw.labels().to_vec();
            s.partitions[j] = raw;
        }
        self.step_lambda_fixed(s, rng)
    }

    /// Step 2: `μ_j ~ Dir(α_j + n_j(h))`.
    pub fn step_mu<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        for (j, p) in s.partitions.iter().enumerate() {
            let d = p.d();
            let mut conc = vec![self.hyper.alpha_partition[j]; d];
            for &l in p.labels() {
                conc[l] += 1.0;
            }
            sample_dirichlet_into(rng, &conc, &mut s.mu[j])?;
        }
        Ok(())
    }

    /// Step 3: fixed- or random-effect indicator of each transition.
    pub fn step_v<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        let c2c = s.cell_to_combo(&self.data.dims);
        for (idx, r) in self.data.records.iter().enumerate() {
            let (m, prev, cur) = (r.mouse as usize, r.prev as usize, r.cur as usize);
            let pi0 = s.pi0[m][prev];
            let w0 = pi0 * s.lambda_fixed[c2c[r.cell as usize]][prev][cur];
            let w1 = (1.0 - pi0) * s.lambda_rand[m][prev][cur];
            let total = w0 + w1;
            if !(total > 0.0) {
                return Err(Error::Domain(format!("transition record {idx} has zero probability under both components")));
            }
            s.v[idx] = sample_bernoulli(rng, w1 / total)?;
        }
        Ok(())
    }

    /// Step 4: `π₀⁽ⁱ⁾(prev) ~ Beta(a₀ + n₀, a₁ + n₁)`.
    pub fn step_pi<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        let mut n = vec![[[0.0f64; 2]; N_SYLLABLES]; self.data.n_mice];
        for (r, &v) in self.data.records.iter().zip(&s.v) {
            n[r.mouse as usize][r.prev as usize][v as usize] += 1.0;
        }
        let (a0, a1) = self.hyper.beta_pi;
        for (pi, counts) in s.pi0.iter_mut().zip(&n) {
            for prev in 0..N_SYLLABLES {
                pi[prev] = clamp_open_unit(sample_beta(rng, a0 + counts[prev][0], a1 + counts[prev][1])?);
            }
        }
        Ok(())
    }

    /// Step 5: `λ⁽ⁱ⁾(·|prev) ~ Dir(α⁽⁰⁾ λ₀(·|prev) + n⁽ⁱ⁾(·|prev))` over `v = 1` records.
    pub fn step_lambda_rand<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        let counts = self.rand_counts(s);
        for (lam, n) in s.lambda_rand.iter_mut().zip(&counts) {
            for prev in 0..N_SYLLABLES {
                let conc: Row = std::array::from_fn(|y| s.alpha_rand * s.lambda0[prev][y] + n[prev][y]);
                lam[prev] = dirichlet_row(rng, &conc)?;
            }
        }
        Ok(())
    }

    /// Step 6: `λ_h(·|prev) ~ Dir(α₀ λ₀(·|prev) + n_h(·|prev))` over `v = 0` records.
    pub fn step_lambda_fixed<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        let counts = self.fixed_counts_by_combo(s);
        s.lambda_fixed.resize(counts.len(), ZERO_MATRIX);
        for (lam, n) in s.lambda_fixed.iter_mut().zip(&counts) {
            for prev in 0..N_SYLLABLES {
                let conc: Row = std::array::from_fn(|y| s.alpha_fixed * s.lambda0[prev][y] + n[prev][y]);
                lam[prev] = dirichlet_row(rng, &conc)?;
            }
        }
        Ok(())
    }

    /// Steps 7–8: table counts, the auxiliary `r`, `s` draws, and the two
    /// concentration updates.
    pub fn step_auxiliary_and_concentrations<R: Rng + ?Sized>(
        &self,
        s: &mut TransModelState,
        rng: &mut R,
    ) -> Result<AuxiliaryTables> {
        let fixed = self.fixed_counts_by_combo(s);
        let rand = self.rand_counts(s);
        let mut out = AuxiliaryTables {
            tables: ZERO_MATRIX,
            v_fixed: 0.0,
            s_fixed: 0.0,
            log_r_fixed: 0.0,
            v_rand: 0.0,
            s_rand: 0.0,
            log_r_rand: 0.0,
        };
        let accumulate = |groups: &[Matrix], alpha: f64, v: &mut f64, sa: &mut f64, lr: &mut f64, tables: &mut Matrix, rng: &mut R| -> Result<()> {
            for g in groups {
                for prev in 0..N_SYLLABLES {
                    let mut n_row = 0.0;
                    for y in 0..N_SYLLABLES {
                        let n = g[prev][y];
                        n_row += n;
                        let m = sample_tables(rng, n as u64, alpha * s.lambda0[prev][y]);
                        tables[prev][y] += m;
                        *v += m;
                    }
                    if n_row > 0.0 {
                        *lr += sample_beta(rng, alpha + 1.0, n_row)?.ln();
                        if sample_bernoulli(rng, n_row / (n_row + alpha))? {
                            *sa += 1.0;
                        }
                    }
                }
            }
            Ok(())
        };
        let mut tables = ZERO_MATRIX;
        let (mut vf, mut sf, mut lrf) = (0.0, 0.0, 0.0);
        accumulate(&fixed, s.alpha_fixed, &mut vf, &mut sf, &mut lrf, &mut tables, rng)?;
        let (mut vr, mut sr, mut lrr) = (0.0, 0.0, 0.0);
        accumulate(&rand, s.alpha_rand, &mut vr, &mut sr, &mut lrr, &mut tables, rng)?;
        out.tables = tables;
        out.v_fixed = vf;
        out.s_fixed = sf;
        out.log_r_fixed = lrf;
        out.v_rand = vr;
        out.s_rand = sr;
        out.log_r_rand = lrr;

        let (a, b) = self.hyper.gamma_alpha_fixed;
        s.alpha_fixed = sample_gamma(rng, a + vf - sf, b - lrf)?;
        let (a, b) = self.hyper.gamma_alpha_rand;
        s.alpha_rand = sample_gamma(rng, a + vr - sr, b - lrr)?;
        Ok(out)
    }

    /// Step 9: `λ₀(·|prev) ~ Dir(α₀₀ λ₀₀ + v(·|prev))`.
    pub fn step_lambda0<R: Rng + ?Sized>(&self, s: &mut TransModelState, aux: &AuxiliaryTables, rng: &mut R) -> Result<()> {
        for prev in 0..N_SYLLABLES {
            let conc: Row = std::array::from_fn(|y| self.hyper.alpha00 * self.hyper.lambda00[y] + aux.tables[prev][y]);
            s.lambda0[prev] = dirichlet_row(rng, &conc)?;
        }
        Ok(())
    }

    /// One full sweep, steps 1 through 9 in order.
    pub fn sweep<R: Rng + ?Sized>(&self, s: &mut TransModelState, rng: &mut R) -> Result<()> {
        self.step_partition_labels(s, rng)?;
        self.step_mu(s, rng)?;
        self.step_v(s, rng)?;
        self.step_pi(s, rng)?;
        self.step_lambda_rand(s, rng)?;
        self.step_lambda_fixed(s, rng)?;
        let aux = self.step_auxiliary_and_concentrations(s, rng)?;
        self.step_lambda0(s, &aux, rng)?;
        if self.options.refresh_after_hyper {
            self.step_lambda_rand(s, rng)?;
            self.step_lambda_fixed(s, rng)?;
        }
        Ok(())
    }

    /// Log likelihood of the observed transitions with indicators summed out.
    pub fn log_likelihood(&self, s: &TransModelState) -> f64 {
        let c2c = s.cell_to_combo(&self.data.dims);
        self.data
            .records
            .iter()
            .map(|r| {
                let (m, prev, cur) = (r.mouse as usize, r.prev as usize, r.cur as usize);
                let pi0 = s.pi0[m][prev];
                (pi0 * s.lambda_fixed[c2c[r.cell as usize]][prev][cur] + (1.0 - pi0) * s.lambda_rand[m][prev][cur]).ln()
            })
            .sum()
    }

    /// Population transition matrix of every exogenous level cell with the
    /// random effects integrated out: `π̄₀ λ_h + (1 − π̄₀) λ₀`.
    pub fn population_matrices(&self, s: &TransModelState) -> Vec<Matrix> {
        let pi0 = self.hyper.population_pi0();
        s.cell_to_combo(&self.data.dims)
            .iter()
            .map(|&c| {
                let mut m = ZERO_MATRIX;
                for prev in 0..N_SYLLABLES {
                    for y in 0..N_SYLLABLES {
                        m[prev][y] = pi0 * s.lambda_fixed[c][prev][y] + (1.0 - pi0) * s.lambda0[prev][y];
                    }
                }
                m
            })
            .collect()
    }

    /// Draws every parameter from the prior. Partition labels are drawn from
    /// `μ_j` and relabeled canonically; the indicators are left empty.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TransModelState> {
        let h = &self.hyper;
        let alpha_fixed = sample_gamma(rng, h.gamma_alpha_fixed.0, h.gamma_alpha_fixed.1)?;
        let alpha_rand = sample_gamma(rng, h.gamma_alpha_rand.0, h.gamma_alpha_rand.1)?;
        let mut lambda0 = ZERO_MATRIX;
        let base: Row = h.lambda00.map(|x| h.alpha00 * x);
        for row in lambda0.iter_mut() {
            *row = dirichlet_row(rng, &base)?;
        }
        let mut partitions = Vec::new();
        let mut mus = Vec::new();
        for (j, &d) in self.data.dims.iter().enumerate() {
            let mut mu = vec![0.0; d];
            sample_dirichlet_into(rng, &vec![h.alpha_partition[j]; d], &mut mu)?;
            let mut raw = Partition::from_labels(&vec![0; d]);
            for l in 0..d {
                raw.set_raw(l, sample_multinomial_index(rng, &mu)?);
            }
            let map = raw.canonicalize();
            mus.push(permute_mu(&mu, &map));
            partitions.push(raw);
        }
        let n_combo: usize = partitions.iter().map(Partition::k).product();
        let draw_matrix = |alpha: f64, rng: &mut R| -> Result<Matrix> {
            let mut m = ZERO_MATRIX;
            for prev in 0..N_SYLLABLES {
                m[prev] = dirichlet_row(rng, &lambda0[prev].map(|x| alpha * x))?;
            }
            Ok(m)
        };
        let lambda_fixed = (0..n_combo).map(|_| draw_matrix(alpha_fixed, rng)).collect::<Result<_>>()?;
        let lambda_rand = (0..self.data.n_mice).map(|_| draw_matrix(alpha_rand, rng)).collect::<Result<_>>()?;
        let mut pi0 = vec![[0.0; N_SYLLABLES]; self.data.n_mice];
        for p in pi0.iter_mut().flatten() {
            *p = clamp_open_unit(sample_beta(rng, h.beta_pi.0, h.beta_pi.1)?);
        }
        Ok(TransModelState {
            partitions,
            mu: mus,
            lambda0,
            lambda_fixed,
            lambda_rand,
            pi0,
            v: Vec::new(),
            alpha_fixed,
            alpha_rand,
        })
    }

    /// Regenerates indicators and following syllables of every record given
    /// the parameters. Sequence starts keep their preceding syllable;
    /// continuing records take it from the regenerated predecessor.
    pub fn simulate_records<R: Rng + ?Sized>(&self, s: &mut TransModelState, data: &mut TransData, rng: &mut R) -> Result<()> {
        let c2c = s.cell_to_combo(&data.dims);
        s.v.resize(data.records.len(), false);
        let mut last_cur = 0u8;
        for (idx, r) in data.records.iter_mut().enumerate() {
            if r.continues {
                r.prev = last_cur;
            }
            let (m, prev) = (r.mouse as usize, r.prev as usize);
            let v = sample_bernoulli(rng, 1.0 - s.pi0[m][prev])?;
            let row = if v { &s.lambda_rand[m][prev] } else { &s.lambda_fixed[c2c[r.cell as usize]][prev] };
            r.cur = sample_multinomial_index(rng, row)? as u8;
            s.v[idx] = v;
            last_cur = r.cur;
        }
        Ok(())
    }
}

fn add_matrix(acc: &mut Matrix, m: &Matrix) {
    for (a, b) in acc.iter_mut().zip(m) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Keeps a Beta draw strictly inside (0, 1).
pub(crate) fn clamp_open_unit(p: f64) -> f64 {
    p.clamp(f64::EPSILON * 0.5, 1.0 - f64::EPSILON * 0.5)
}

/// Reorders `μ` after relabeling: used labels move to their new positions,
/// unused ones fill the remaining slots in their old order.
pub(crate) fn permute_mu(mu: &[f64], map: &[Option<usize>]) -> Vec<f64> {
    let d = mu.len();
    let mut out = vec![f64::NAN; d];
    let mut unused = Vec::new();
    for (old, &m) in mu.iter().enumerate() {
        match map.get(old).copied().flatten() {
            Some(new) => out[new] = m,
            None => unused.push(m),
        }
    }
    let mut it = unused.into_iter();
    for o in out.iter_mut() {
        if o.is_nan() {
            *o = it.next().expect("label count matches");
        }
    }
    out
}
