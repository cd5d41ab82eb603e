//! Gibbs sampler for the mixed-effects gamma mixture of inter-syllable intervals.
//!
//! Each interval is modeled on `τ̃ = ln(1 + τ)` by a `K`-component gamma
//! mixture whose weights combine a fixed effect shared by the records in one
//! cluster triple (genotype, context, preceding syllable) with a
//! mouse-specific random effect. Cluster structure of the three covariates
//! is explored with split/merge moves.

use std::borrow::Cow;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flatten, mixed_radix_index, mixed_radix_levels, FlatRecord, SequenceDataset, N_SYLLABLES};
use crate::dist::{
    log_gamma_density_unchecked, sample_bernoulli, sample_beta, sample_dirichlet_into, sample_gamma,
    sample_multinomial_index, GammaParams,
};
use crate::error::{Error, Result};
use crate::kmeans::kmeans_1d;
use crate::partition::{combo_map, set_partitions, split_merge_step, AcceptanceRule, MoveOutcome, Partition};
use crate::special::{digamma, ln_gamma, log_sum_exp, trigamma, EULER_GAMMA};
use crate::trans::{clamp_open_unit, floor_probabilities_vec, sample_tables, vec_ok};

/// Log-weight below which a record is considered to have underflowed.
pub const UNDERFLOW_LOG_WEIGHT: f64 = -700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiRecord {
    pub mouse: u32,
    /// Mixed-radix index of (exogenous covariates…, preceding syllable).
    pub cell: u32,
    /// `τ̃ = ln(1 + τ)`.
    pub x: f64,
    pub ln_x: f64,
}

impl IsiRecord {
    pub fn new(mouse: usize, cell: usize, x: f64) -> Self {
        IsiRecord { mouse: mouse as u32, cell: cell as u32, x, ln_x: x.ln() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiData {
    pub n_mice: usize,
    /// Level counts: the exogenous covariates followed by the preceding syllable.
    pub dims: Vec<usize>,
    pub records: Vec<IsiRecord>,
}

impl IsiData {
    pub fn from_dataset(ds: &SequenceDataset) -> Self {
        IsiData::from_records(&flatten(ds), &ds.covariate_dims(), ds.n_mice())
    }

    pub fn from_records(records: &[FlatRecord], covariate_dims: &[usize], n_mice: usize) -> Self {
        let mut dims = covariate_dims.to_vec();
        dims.push(N_SYLLABLES);
        let records = records
            .iter()
            .map(|r| {
                let mut levels = r.covariates.clone();
                levels.push(r.prev.index());
                IsiRecord::new(r.mouse, mixed_radix_index(&dims, &levels), r.log_isi)
            })
            .collect();
        IsiData { n_mice, dims, records }
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell_levels(&self, cell: usize) -> Vec<usize> {
        mixed_radix_levels(&self.dims, cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiHyperParams {
    pub alpha00: f64,
    /// Centering of `λ₀`; resolved to the k-means cluster proportions at
    /// initialization when absent.
    pub lambda00: Option<Vec<f64>>,
    /// Beta prior `(a₀, a₁)` of `π₀⁽ⁱ⁾(k)`.
    pub beta_pi: (f64, f64),
    /// Gamma prior `(shape, rate)` of the component shapes `α_k`.
    pub gamma_shape_prior: (f64, f64),
    /// Gamma prior `(shape, rate)` of the component rates `β_k`.
    pub gamma_rate_prior: (f64, f64),
    pub gamma_alpha_fixed: (f64, f64),
    pub gamma_alpha_rand: (f64, f64),
    pub fp_tolerance: f64,
    pub fp_max_iters: usize,
}

impl Default for IsiHyperParams {
    fn default() -> Self {
        IsiHyperParams {
            alpha00: 1.0,
            lambda00: None,
            beta_pi: (1.0, 1.0),
            gamma_shape_prior: (1.0, 1.0),
            gamma_rate_prior: (1.0, 1.0),
            gamma_alpha_fixed: (1.0, 1.0),
            gamma_alpha_rand: (1.0, 1.0),
            fp_tolerance: 1e-8,
            fp_max_iters: 50,
        }
    }
}

impl IsiHyperParams {
    pub fn validate(&self, k: usize) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let pair = |p: (f64, f64)| positive(p.0) && positive(p.1);
        let ok = positive(self.alpha00)
            && pair(self.beta_pi)
            && pair(self.gamma_shape_prior)
            && pair(self.gamma_rate_prior)
            && pair(self.gamma_alpha_fixed)
            && pair(self.gamma_alpha_rand)
            && positive(self.fp_tolerance)
            && self.fp_max_iters > 0;
        if !ok {
            return Err(Error::InvalidConfig("interval hyper-parameters must be positive".into()));
        }
        if let Some(l) = &self.lambda00 {
            if l.len() != k || !vec_ok(l) || l.iter().any(|&x| x <= 0.0) {
                return Err(Error::InvalidConfig(format!("lambda00 must be a positive probability vector of length {k}")));
            }
        }
        Ok(())
    }

    pub fn population_pi0(&self) -> f64 {
        self.beta_pi.0 / (self.beta_pi.0 + self.beta_pi.1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcentrationUpdate {
    /// `α ~ Ga(a + K − 1, b + γ + ln n)`.
    #[default]
    West,
    /// Table counts with the `r`, `s` auxiliaries, as in the transition sampler.
    Auxiliary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMeasureUpdate {
    /// `λ₀ ~ Dir(α₀₀/K + m₀)` with tables from the fixed-effect counts only.
    #[default]
    Paper,
    /// `λ₀ ~ Dir(α₀₀ λ₀₀ + m_fixed + m_rand)`.
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeUpdate {
    /// Draw `α_k` from the fixed-point gamma approximation, then `β_k` conjugately.
    #[default]
    Miller,
    /// Use the approximation as an independence proposal for `α_k` at fixed
    /// mean `α_k/β_k`, accepted by Metropolis–Hastings against the exact
    /// conditional, then `β_k` conjugately.
    MillerCorrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsiOptions {
    pub split_merge: AcceptanceRule,
    pub concentration: ConcentrationUpdate,
    pub base_measure: BaseMeasureUpdate,
    pub shape: ShapeUpdate,
    /// One `π₀⁽ⁱ⁾` per mouse instead of one per component, so that the
    /// mixture weights are normalized by construction.
    pub shared_pi: bool,
    /// Redraw both effect components after the concentration and `λ₀` updates.
    pub refresh_after_hyper: bool,
}

impl Default for IsiOptions {
    /// Published updates, with one `π` per mouse.
    fn default() -> Self {
        IsiOptions {
            split_merge: AcceptanceRule::default(),
            concentration: ConcentrationUpdate::default(),
            base_measure: BaseMeasureUpdate::default(),
            shape: ShapeUpdate::default(),
            shared_pi: true,
            refresh_after_hyper: false,
        }
    }
}

impl IsiOptions {
    /// Every correction enabled: the chain leaves the joint posterior exactly invariant.
    pub fn exact() -> Self {
        IsiOptions {
            split_merge: AcceptanceRule::MetropolisHastings,
            concentration: ConcentrationUpdate::Auxiliary,
            base_measure: BaseMeasureUpdate::Exact,
            shape: ShapeUpdate::MillerCorrected,
            shared_pi: true,
            refresh_after_hyper: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiModelState {
    pub components: Vec<GammaParams>,
    pub partitions: Vec<Partition>,
    pub lambda0: Vec<f64>,
    /// Fixed effects per cluster triple.
    pub lambda_fixed: Vec<Vec<f64>>,
    pub lambda_rand: Vec<Vec<f64>>,
    /// `π₀⁽ⁱ⁾(k)` per mouse.
    pub pi0: Vec<Vec<f64>>,
    pub z: Vec<usize>,
    pub v: Vec<bool>,
    pub alpha_fixed: f64,
    pub alpha_rand: f64,
}

impl IsiModelState {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.partitions.iter().map(Partition::k).collect()
    }

    pub fn cell_to_combo(&self, dims: &[usize]) -> Vec<usize> {
        combo_map(&self.partitions, dims)
    }

    /// `P⁽ⁱ⁾(k)` for one cluster triple and mouse, unnormalized.
    pub fn raw_weights(&self, combo: usize, mouse: usize) -> Vec<f64> {
        let (lf, lr, pi) = (&self.lambda_fixed[combo], &self.lambda_rand[mouse], &self.pi0[mouse]);
        (0..self.k()).map(|k| pi[k] * lf[k] + (1.0 - pi[k]) * lr[k]).collect()
    }

    /// Mixture weights of one cluster triple and mouse, normalized.
    pub fn weights(&self, combo: usize, mouse: usize) -> Vec<f64> {
        let mut w = self.raw_weights(combo, mouse);
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    pub fn check_invariants(&self, data: &IsiData) -> Result<()> {
        let fail = |m: String| Err(Error::Domain(m));
        let k = self.k();
        if k == 0 || self.components.iter().any(|c| !(c.shape > 0.0 && c.rate > 0.0 && c.shape.is_finite() && c.rate.is_finite())) {
            return fail("component parameters must be positive".into());
        }
        if self.partitions.len() != data.dims.len() {
            return fail("partition count mismatch".into());
        }
        for (p, &d) in self.partitions.iter().zip(&data.dims) {
            if p.d() != d || p.k() == 0 || *p != Partition::from_labels(p.labels()) {
                return fail("partition not canonical".into());
            }
        }
        let n_combo: usize = self.cluster_counts().iter().product();
        let ok = |v: &Vec<f64>| v.len() == k && vec_ok(v);
        if self.lambda_fixed.len() != n_combo || !self.lambda_fixed.iter().all(ok) {
            return fail("fixed effects invalid".into());
        }
        if self.lambda_rand.len() != data.n_mice || !self.lambda_rand.iter().all(ok) || !ok(&self.lambda0) {
            return fail("random effects or base measure invalid".into());
        }
        if self.pi0.len() != data.n_mice || !self.pi0.iter().all(|p| p.len() == k && p.iter().all(|&x| x > 0.0 && x < 1.0)) {
            return fail("pi0 invalid".into());
        }
        if self.z.len() != data.records.len() || self.v.len() != data.records.len() || self.z.iter().any(|&z| z >= k) {
            return fail("latent allocations invalid".into());
        }
        if !(self.alpha_fixed > 0.0 && self.alpha_rand > 0.0 && self.alpha_fixed.is_finite() && self.alpha_rand.is_finite()) {
            return fail("concentrations invalid".into());
        }
        Ok(())
    }
}

/// Gamma approximation to the conditional of a gamma shape at fixed mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MillerApproximation {
    pub shape: f64,
    pub rate: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fixed-point gamma approximation of `p(a | x₁..xₙ, μ)` for
/// `xᵢ ~ Ga(a, a/μ)` and prior `a ~ Ga(a₀, b₀)`, from the sufficient
/// statistics `S = Σ xᵢ` and `R = Σ ln xᵢ`.
pub fn miller_approximation(n: f64, s: f64, r: f64, mu: f64, prior: (f64, f64), tol: f64, max_iter: usize) -> MillerApproximation {
    let (a0, b0) = prior;
    let t = s / mu - r + n * mu.ln() - n;
    let mut a_shape = a0 + n / 2.0;
    let mut b_rate = b0 + t;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let a = (a_shape / b_rate).clamp(1e-6, 1e6);
        a_shape = a0 - n * a + n * a * a * trigamma(a);
        b_rate = b0 + (a_shape - a0) / a - n * a.ln() + n * digamma(a) + t;
        if !(a_shape > 0.0 && b_rate > 0.0 && a_shape.is_finite() && b_rate.is_finite()) {
            return MillerApproximation { shape: a_shape, rate: b_rate, iterations, converged: false };
        }
        if (a / (a_shape / b_rate) - 1.0).abs() < tol {
            return MillerApproximation { shape: a_shape, rate: b_rate, iterations, converged: true };
        }
    }
    MillerApproximation { shape: a_shape, rate: b_rate, iterations, converged: false }
}

/// Log of the exact conditional of a gamma shape `a` at fixed mean `μ`,
/// up to a constant: `Ga(a; a₀, b₀) · Ga(a/μ; c, d) · a · Π Ga(xᵢ | a, a/μ)`.
pub fn shape_conditional_log_density(a: f64, n: f64, s: f64, r: f64, mu: f64, shape_prior: (f64, f64), rate_prior: (f64, f64)) -> f64 {
    let beta = a / mu;
    let prior_a = (shape_prior.0 - 1.0) * a.ln() - shape_prior.1 * a;
    let prior_b = (rate_prior.0 - 1.0) * beta.ln() - rate_prior.1 * beta;
    let lik = n * (a * beta.ln() - ln_gamma(a)) + (a - 1.0) * r - beta * s;
    prior_a + prior_b + a.ln() + lik
}

/// Table counts and auxiliaries for the concentration and base-measure updates.
#[derive(Clone, Debug, PartialEq)]
pub struct IsiTables {
    pub m_fixed: Vec<f64>,
    pub m_rand: Vec<f64>,
    pub s_fixed: f64,
    pub log_r_fixed: f64,
    pub s_rand: f64,
    pub log_r_rand: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiModel {
    pub data: IsiData,
    pub k: usize,
    pub hyper: IsiHyperParams,
    pub options: IsiOptions,
}

impl IsiModel {
    pub fn new(data: IsiData, k: usize, hyper: IsiHyperParams, options: IsiOptions) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        hyper.validate(k)?;
        if data.records.is_empty() {
            return Err(Error::InvalidDataset("no interval records".into()));
        }
        for r in &data.records {
            if !(r.x > 0.0 && r.x.is_finite()) {
                return Err(Error::Domain("transformed intervals must be positive".into()));
            }
            if r.mouse as usize >= data.n_mice || r.cell as usize >= data.n_cells() {
                return Err(Error::InvalidDataset("record index out of range".into()));
            }
        }
        Ok(IsiModel { data, k, hyper, options })
    }

    /// `λ₀₀`, uniform until resolved by [`init`](Self::init).
    pub fn lambda00(&self) -> Cow<'_, [f64]> {
        match &self.hyper.lambda00 {
            Some(l) => Cow::Borrowed(l),
            None => Cow::Owned(vec![1.0 / self.k as f64; self.k]),
        }
    }

    /// k-means start. Resolves `λ₀₀` to the cluster proportions if unset.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(IsiModelState, Vec<String>)> {
        let k = self.k;
        let data = &self.data;
        let xs: Vec<f64> = data.records.iter().map(|r| r.x).collect();
        let km = kmeans_1d(&xs, k, 100, rng)?;
        let sizes = km.sizes();
        let mut warnings = Vec::new();
        if self.hyper.lambda00.is_none() {
            let n = xs.len() as f64;
            self.hyper.lambda00 = Some(floor_probabilities_vec(sizes.iter().map(|&c| c as f64 / n).collect()));
        }
        let lambda00 = self.lambda00().into_owned();

        let mut components = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<f64> = km.assignments.iter().zip(&xs).filter(|(&a, _)| a == c).map(|(_, &x)| x).collect();
            let n = members.len() as f64;
            let mean = if n > 0.0 { members.iter().sum::<f64>() / n } else { 0.0 };
            let var = if n > 0.0 { members.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n } else { 0.0 };
            if members.len() < 2 || !(var > 0.0) {
                warnings.push(format!("DegenerateCluster({}): {} points; using shape 1, rate 1/mean", c + 1, members.len()));
                let rate = if mean > 0.0 { 1.0 / mean } else { 1.0 };
                components.push(GammaParams { shape: 1.0, rate });
            } else {
                components.push(GammaParams { shape: mean * mean / var, rate: mean / var });
            }
        }

        let mut by_cell = vec![vec![0.0; k]; data.n_cells()];
        let mut by_mouse = vec![vec![0.0; k]; data.n_mice];
        for (r, &z) in data.records.iter().zip(&km.assignments) {
            by_cell[r.cell as usize][z] += 1.0;
            by_mouse[r.mouse as usize][z] += 1.0;
        }
        let empirical = |counts: &Vec<f64>| -> Vec<f64> {
            let total: f64 = counts.iter().sum();
            if total > 0.0 {
                counts.iter().map(|c| c / total).collect()
            } else {
                lambda00.clone()
            }
        };
        let empty_cells = by_cell.iter().filter(|c| c.iter().sum::<f64>() == 0.0).count();
        if empty_cells > 0 {
            warnings.push(format!("EmptyConditional: {empty_cells} covariate cells without intervals start at lambda00"));
        }
        for w in &warnings {
            warn!("{w}");
        }
        let mut state = IsiModelState {
            components,
            partitions: data.dims.iter().map(|&d| Partition::singletons(d)).collect(),
            lambda0: lambda00.clone(),
            lambda_fixed: by_cell.iter().map(empirical).collect(),
            lambda_rand: by_mouse.iter().map(empirical).collect(),
            pi0: vec![vec![0.8; k]; data.n_mice],
            z: km.assignments,
            v: vec![false; data.records.len()],
            alpha_fixed: self.hyper.gamma_alpha_fixed.0 / self.hyper.gamma_alpha_fixed.1,
            alpha_rand: self.hyper.gamma_alpha_rand.0 / self.hyper.gamma_alpha_rand.1,
        };
        self.step_v(&mut state, rng)?;
        Ok((state, warnings))
    }

    fn component_constants(s: &IsiModelState) -> Vec<f64> {
        s.components.iter().map(|c| c.shape * c.rate.ln() - ln_gamma(c.shape)).collect()
    }

    /// `ln P⁽ⁱ⁾(k)` for every (combo, mouse) pair, flattened combo-major.
    fn log_weight_table(s: &IsiModelState, normalize: bool) -> Vec<f64> {
        let k = s.k();
        let n_mice = s.lambda_rand.len();
        let mut out = Vec::with_capacity(s.lambda_fixed.len() * n_mice * k);
        for c in 0..s.lambda_fixed.len() {
            for m in 0..n_mice {
                let w = if normalize { s.weights(c, m) } else { s.raw_weights(c, m) };
                out.extend(w.iter().map(|x| x.ln()));
            }
        }
        out
    }

    /// Step 1: component allocation of every record.
    pub fn step_z<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<()> {
        let k = s.k();
        let c2c = s.cell_to_combo(&self.data.dims);
        let consts = Self::component_constants(s);
        let lw = Self::log_weight_table(s, false);
        let n_mice = self.data.n_mice;
        let mut logp = vec![0.0; k];
        let mut w = vec![0.0; k];
        for (idx, r) in self.data.records.iter().enumerate() {
            let base = (c2c[r.cell as usize] * n_mice + r.mouse as usize) * k;
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                let c = &s.components[j];
                logp[j] = lw[base + j] + consts[j] + (c.shape - 1.0) * r.ln_x - c.rate * r.x;
                max = max.max(logp[j]);
            }
            if !(max >= UNDERFLOW_LOG_WEIGHT) {
                return Err(Error::AllWeightsUnderflow { record: idx });
            }
            for j in 0..k {
                w[j] = (logp[j] - max).exp();
            }
            s.z[idx] = sample_multinomial_index(rng, &w)?;
        }
        Ok(())
    }

    /// Step 2: fixed- or random-effect indicator given the component.
    pub fn step_v<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<()> {
        let c2c = s.cell_to_combo(&self.data.dims);
        for (idx, r) in self.data.records.iter().enumerate() {
            let (m, z) = (r.mouse as usize, s.z[idx]);
            let pi0 = s.pi0[m][z];
            let w0 = pi0 * s.lambda_fixed[c2c[r.cell as usize]][z];
            let w1 = (1.0 - pi0) * s.lambda_rand[m][z];
            let total = w0 + w1;
            if !(total > 0.0) {
                return Err(Error::Domain(format!("interval record {idx} has zero weight under both effects")));
            }
            s.v[idx] = sample_bernoulli(rng, w1 / total)?;
        }
        Ok(())
    }

    /// Step 3: `π₀⁽ⁱ⁾(k) ~ Beta(a₀ + n₀⁽ⁱ⁾(k), a₁ + n₁⁽ⁱ⁾(k))`, or one Beta per
    /// mouse on the totals when `π` is shared across components.
    pub fn step_pi<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<()> {
        let k = s.k();
        let mut n = vec![vec![[0.0f64; 2]; k]; self.data.n_mice];
        for ((r, &z), &v) in self.data.records.iter().zip(&s.z).zip(&s.v) {
            n[r.mouse as usize][z][v as usize] += 1.0;
        }
        let (a0, a1) = self.hyper.beta_pi;
        for (pi, counts) in s.pi0.iter_mut().zip(&n) {
            if self.options.shared_pi {
                let n0: f64 = counts.iter().map(|c| c[0]).sum();
                let n1: f64 = counts.iter().map(|c| c[1]).sum();
                let p = clamp_open_unit(sample_beta(rng, a0 + n0, a1 + n1)?);
                pi.iter_mut().for_each(|x| *x = p);
            } else {
                for j in 0..k {
                    pi[j] = clamp_open_unit(sample_beta(rng, a0 + counts[j][0], a1 + counts[j][1])?);
                }
            }
        }
        Ok(())
    }

    fn fixed_counts(&self, s: &IsiModelState, partitions: &[Partition]) -> Vec<Vec<f64>> {
        let c2c = combo_map(partitions, &self.data.dims);
        let n_combo: usize = partitions.iter().map(Partition::k).product();
        let mut counts = vec![vec![0.0; s.k()]; n_combo];
        for ((r, &z), &v) in self.data.records.iter().zip(&s.z).zip(&s.v) {
            if !v {
                counts[c2c[r.cell as usize]][z] += 1.0;
            }
        }
        counts
    }

    fn rand_counts(&self, s: &IsiModelState) -> Vec<Vec<f64>> {
        let mut counts = vec![vec![0.0; s.k()]; self.data.n_mice];
        for ((r, &z), &v) in self.data.records.iter().zip(&s.z).zip(&s.v) {
            if v {
                counts[r.mouse as usize][z] += 1.0;
            }
        }
        counts
    }

    /// Step 4: `λ⁽ⁱ⁾ ~ Dir(α⁽⁰⁾ λ₀ + n⁽ⁱ⁾)` over `v = 1` records.
    pub fn step_lambda_rand<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<()> {
        let counts = self.rand_counts(s);
        let mut conc = vec![0.0; s.k()];
        for (lam, n) in s.lambda_rand.iter_mut().zip(&counts) {
            for j in 0..conc.len() {
                conc[j] = s.alpha_rand * s.lambda0[j] + n[j];
            }
            sample_dirichlet_into(rng, &conc, lam)?;
        }
        Ok(())
    }

    /// Step 5: `λ_g ~ Dir(α₀ λ₀ + n_g)` over `v = 0` records, per cluster triple.
    pub fn step_lambda_fixed<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<()> {
        let counts = self.fixed_counts(s, &s.partitions);
        let k = s.k();
        s.lambda_fixed.resize(counts.len(), vec![0.0; k]);
        let mut conc = vec![0.0; k];
        for (lam, n) in s.lambda_fixed.iter_mut().zip(&counts) {
            for j in 0..k {
                conc[j] = s.alpha_fixed * s.lambda0[j] + n[j];
            }
            lam.resize(k, 0.0);
            sample_dirichlet_into(rng, &conc, lam)?;
        }
        Ok(())
    }

    fn draw_tables<R: Rng + ?Sized>(&self, s: &IsiModelState, rng: &mut R) -> Result<IsiTables> {
        let k = s.k();
        let mut out = IsiTables {
            m_fixed: vec![0.0; k],
            m_rand: vec![0.0; k],
            s_fixed: 0.0,
            log_r_fixed: 0.0,
            s_rand: 0.0,
            log_r_rand: 0.0,
        };
        let groups = [(self.fixed_counts(s, &s.partitions), s.alpha_fixed), (self.rand_counts(s), s.alpha_rand)];
        for (which, (counts, alpha)) in groups.iter().enumerate() {
            let (m, sa, lr) = if which == 0 {
                (&mut out.m_fixed, &mut out.s_fixed, &mut out.log_r_fixed)
            } else {
                (&mut out.m_rand, &mut out.s_rand, &mut out.log_r_rand)
            };
            for g in counts {
                let mut total = 0.0;
                for j in 0..k {
                    total += g[j];
                    m[j] += sample_tables(rng, g[j] as u64, alpha * s.lambda0[j]);
                }
                if total > 0.0 {
                    *lr += sample_beta(rng, alpha + 1.0, total)?.ln();
                    if sample_bernoulli(rng, total / (total + alpha))? {
                        *sa += 1.0;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Step 6: both concentrations. Returns the table counts when they were drawn.
    pub fn step_concentrations<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<Option<IsiTables>> {
        let (af, ar) = (self.hyper.gamma_alpha_fixed, self.hyper.gamma_alpha_rand);
        match self.options.concentration {
            ConcentrationUpdate::West => {
                let extra = self.k as f64 - 1.0;
                let rate_shift = EULER_GAMMA + (self.data.records.len() as f64).ln();
                s.alpha_fixed = sample_gamma(rng, af.0 + extra, af.1 + rate_shift)?;
                s.alpha_rand = sample_gamma(rng, ar.0 + extra, ar.1 + rate_shift)?;
                Ok(None)
            }
            ConcentrationUpdate::Auxiliary => {
                let t = self.draw_tables(s, rng)?;
                let vf: f64 = t.m_fixed.iter().sum();
                let vr: f64 = t.m_rand.iter().sum();
                s.alpha_fixed = sample_gamma(rng, af.0 + vf - t.s_fixed, af.1 - t.log_r_fixed)?;
                s.alpha_rand = sample_gamma(rng, ar.0 + vr - t.s_rand, ar.1 - t.log_r_rand)?;
                Ok(Some(t))
            }
        }
    }

    /// Step 7: base measure `λ₀`.
    pub fn step_lambda0<R: Rng + ?Sized>(&self, s: &mut IsiModelState, tables: Option<&IsiTables>, rng: &mut R) -> Result<()> {
        let k = s.k();
        let mut conc = vec![0.0; k];
        match self.options.base_measure {
            BaseMeasureUpdate::Paper => {
                let counts = self.fixed_counts(s, &s.partitions);
                let mut m0 = vec![0.0; k];
                for g in &counts {
                    for j in 0..k {
                        m0[j] += sample_tables(rng, g[j] as u64, s.alpha_fixed * s.lambda0[j]);
                    }
                }
                for j in 0..k {
                    conc[j] = self.hyper.alpha00 / k as f64 + m0[j];
                }
            }
            BaseMeasureUpdate::Exact => {
                let drawn;
                let t = match tables {
                    Some(t) => t,
                    None => {
                        drawn = self.draw_tables(s, rng)?;
                        &drawn
                    }
                };
                let l00 = self.lambda00();
                for j in 0..k {
                    conc[j] = self.hyper.alpha00 * l00[j] + t.m_fixed[j] + t.m_rand[j];
                }
            }
        }
        sample_dirichlet_into(rng, &conc, &mut s.lambda0)
    }

    /// Step 8: component shapes and rates. Returns the fixed-point result per
    /// nonempty component.
    pub fn step_gamma_params<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<Vec<Option<MillerApproximation>>> {
        let k = s.k();
        let mut n = vec![0.0; k];
        let mut sum = vec![0.0; k];
        let mut sum_ln = vec![0.0; k];
        for (r, &z) in self.data.records.iter().zip(&s.z) {
            n[z] += 1.0;
            sum[z] += r.x;
            sum_ln[z] += r.ln_x;
        }
        let h = &self.hyper;
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            if n[j] == 0.0 {
                s.components[j] = GammaParams {
                    shape: sample_gamma(rng, h.gamma_shape_prior.0, h.gamma_shape_prior.1)?,
                    rate: sample_gamma(rng, h.gamma_rate_prior.0, h.gamma_rate_prior.1)?,
                };
                out.push(None);
                continue;
            }
            let cur = s.components[j];
            let mu = cur.shape / cur.rate;
            let approx = miller_approximation(n[j], sum[j], sum_ln[j], mu, h.gamma_shape_prior, h.fp_tolerance, h.fp_max_iters);
            let shape = match self.options.shape {
                ShapeUpdate::Miller => {
                    if approx.converged {
                        sample_gamma(rng, approx.shape, approx.rate)?
                    } else {
                        warn!("FixedPointDiverged({}): keeping shape {:.4}", j + 1, cur.shape);
                        cur.shape
                    }
                }
                ShapeUpdate::MillerCorrected => {
                    // the rate prior at β = a/μ has the same form as the shape prior
                    let (c, d) = h.gamma_rate_prior;
                    let prior = (h.gamma_shape_prior.0 + c, h.gamma_shape_prior.1 + d / mu);
                    let fitted = miller_approximation(n[j], sum[j], sum_ln[j], mu, prior, h.fp_tolerance, h.fp_max_iters);
                    let (qa, qb) = if fitted.converged {
                        (fitted.shape, fitted.rate)
                    } else {
                        let t = sum[j] / mu - sum_ln[j] + n[j] * mu.ln() - n[j];
                        (h.gamma_shape_prior.0 + n[j] / 2.0, h.gamma_shape_prior.1 + t.max(1e-12))
                    };
                    let prop = sample_gamma(rng, qa, qb)?;
                    let target = |a: f64| {
                        shape_conditional_log_density(a, n[j], sum[j], sum_ln[j], mu, h.gamma_shape_prior, h.gamma_rate_prior)
                    };
                    let q = |a: f64| (qa - 1.0) * a.ln() - qb * a;
                    let log_ratio = target(prop) - target(cur.shape) + q(cur.shape) - q(prop);
                    if (1.0 - rng.random::<f64>()).ln() < log_ratio {
                        prop
                    } else {
                        cur.shape
                    }
                }
            };
            let rate = sample_gamma(rng, h.gamma_rate_prior.0 + shape * n[j], h.gamma_rate_prior.1 + sum[j])?;
            s.components[j] = GammaParams { shape, rate };
            out.push(Some(approx));
        }
        Ok(out)
    }

    /// Collapsed log marginal of the fixed-effect counts under `partitions`.
    pub fn collapsed_log_marginal(&self, s: &IsiModelState, partitions: &[Partition]) -> f64 {
        let k = s.k();
        let conc: Vec<f64> = s.lambda0.iter().map(|l| s.alpha_fixed * l).collect();
        let ln_g: Vec<f64> = conc.iter().map(|&c| ln_gamma(c)).collect();
        let conc_sum: f64 = conc.iter().sum();
        let ln_g_sum = ln_gamma(conc_sum);
        let mut total = 0.0;
        for g in self.fixed_counts(s, partitions) {
            let n: f64 = g.iter().sum();
            if n == 0.0 {
                continue;
            }
            for j in 0..k {
                if g[j] > 0.0 {
                    total += ln_gamma(conc[j] + g[j]) - ln_g[j];
                }
            }
            total -= ln_gamma(conc_sum + n) - ln_g_sum;
        }
        total
    }

    /// Step 9: one split/merge attempt per covariate, then a fresh draw of
    /// the fixed effects for the resulting cluster triples.
    pub fn step_partitions<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<Vec<MoveOutcome>> {
        let mut outcomes = Vec::with_capacity(s.partitions.len());
        for r in 0..s.partitions.len() {
            let mut current = s.partitions[r].clone();
            let mut candidate = s.partitions.clone();
            let outcome = split_merge_step(rng, &mut current, self.options.split_merge, |p| {
                candidate[r] = p.clone();
                self.collapsed_log_marginal(s, &candidate)
            })?;
            s.partitions[r] = current;
            outcomes.push(outcome);
        }
        self.step_lambda_fixed(s, rng)?;
        Ok(outcomes)
    }

    /// One full sweep, steps 1 through 9 in order.
    pub fn sweep<R: Rng + ?Sized>(&self, s: &mut IsiModelState, rng: &mut R) -> Result<()> {
        self.step_z(s, rng)?;
        self.step_v(s, rng)?;
        self.step_pi(s, rng)?;
        self.step_lambda_rand(s, rng)?;
        self.step_lambda_fixed(s, rng)?;
        let tables = self.step_concentrations(s, rng)?;
        self.step_lambda0(s, tables.as_ref(), rng)?;
        if self.options.refresh_after_hyper {
            self.step_lambda_rand(s, rng)?;
            self.step_lambda_fixed(s, rng)?;
        }
        self.step_gamma_params(s, rng)?;
        self.step_partitions(s, rng)?;
        Ok(())
    }

    /// Per-record log mixture density of `τ̃` under the mouse-specific weights.
    pub fn record_log_densities(&self, s: &IsiModelState, out: &mut Vec<f64>) {
        let k = s.k();
        let c2c = s.cell_to_combo(&self.data.dims);
        let consts = Self::component_constants(s);
        let lw = Self::log_weight_table(s, true);
        let n_mice = self.data.n_mice;
        let mut terms = vec![0.0; k];
        out.clear();
        for r in &self.data.records {
            let base = (c2c[r.cell as usize] * n_mice + r.mouse as usize) * k;
            for j in 0..k {
                let c = &s.components[j];
                terms[j] = lw[base + j] + consts[j] + (c.shape - 1.0) * r.ln_x - c.rate * r.x;
            }
            out.push(log_sum_exp(&terms));
        }
    }

    pub fn log_likelihood(&self, s: &IsiModelState) -> f64 {
        let mut d = Vec::new();
        self.record_log_densities(s, &mut d);
        d.iter().sum()
    }

    /// Log mixture density at `x = τ̃` for a mouse and a level cell.
    pub fn mixture_log_density(&self, s: &IsiModelState, x: f64, cell: usize, mouse: usize) -> Result<f64> {
        let combo = s.cell_to_combo(&self.data.dims)[cell];
        mixture_log_density(x, &s.components, &s.weights(combo, mouse))
    }

    /// Population mixture weights of a level cell: `π̄₀ λ_g + (1 − π̄₀) λ₀`.
    pub fn population_weights(&self, s: &IsiModelState, cell: usize) -> Vec<f64> {
        let combo = s.cell_to_combo(&self.data.dims)[cell];
        let pi0 = self.hyper.population_pi0();
        s.lambda_fixed[combo].iter().zip(&s.lambda0).map(|(f, b)| pi0 * f + (1.0 - pi0) * b).collect()
    }

    pub fn population_log_density(&self, s: &IsiModelState, x: f64, cell: usize) -> Result<f64> {
        mixture_log_density(x, &s.components, &self.population_weights(s, cell))
    }

    /// Draws all parameters from the prior, with partitions uniform over set
    /// partitions. Allocations are left empty.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<IsiModelState> {
        let h = &self.hyper;
        let k = self.k;
        let components = (0..k)
            .map(|_| {
                Ok(GammaParams {
                    shape: sample_gamma(rng, h.gamma_shape_prior.0, h.gamma_shape_prior.1)?,
                    rate: sample_gamma(rng, h.gamma_rate_prior.0, h.gamma_rate_prior.1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha_fixed = sample_gamma(rng, h.gamma_alpha_fixed.0, h.gamma_alpha_fixed.1)?;
        let alpha_rand = sample_gamma(rng, h.gamma_alpha_rand.0, h.gamma_alpha_rand.1)?;
        let l00 = self.lambda00();
        let mut lambda0 = vec![0.0; k];
        sample_dirichlet_into(rng, &l00.iter().map(|x| h.alpha00 * x).collect::<Vec<_>>(), &mut lambda0)?;
        let partitions: Vec<Partition> = self
            .data
            .dims
            .iter()
            .map(|&d| {
                let all = set_partitions(d);
                all[rng.random_range(0..all.len())].clone()
            })
            .collect();
        let n_combo: usize = partitions.iter().map(Partition::k).product();
        let mut draw = |alpha: f64| -> Result<Vec<f64>> {
            let mut out = vec![0.0; k];
            sample_dirichlet_into(rng, &lambda0.iter().map(|x| alpha * x).collect::<Vec<_>>(), &mut out)?;
            Ok(out)
        };
        let lambda_fixed = (0..n_combo).map(|_| draw(alpha_fixed)).collect::<Result<Vec<_>>>()?;
        let lambda_rand = (0..self.data.n_mice).map(|_| draw(alpha_rand)).collect::<Result<Vec<_>>>()?;
        let mut pi0 = vec![vec![0.0; k]; self.data.n_mice];
        for p in pi0.iter_mut() {
            if self.options.shared_pi {
                let x = clamp_open_unit(sample_beta(rng, h.beta_pi.0, h.beta_pi.1)?);
                p.iter_mut().for_each(|y| *y = x);
            } else {
                for y in p.iter_mut() {
                    *y = clamp_open_unit(sample_beta(rng, h.beta_pi.0, h.beta_pi.1)?);
                }
            }
        }
        Ok(IsiModelState {
            components,
            partitions,
            lambda0,
            lambda_fixed,
            lambda_rand,
            pi0,
            z: Vec::new(),
            v: Vec::new(),
            alpha_fixed,
            alpha_rand,
        })
    }

    /// Regenerates `(z, v, τ̃)` for every record of `data` given the
    /// parameters, drawing `(z, v)` jointly with weight `π_v(z) λ_v(z)`.
    pub fn simulate_records<R: Rng + ?Sized>(&self, s: &mut IsiModelState, data: &mut IsiData, rng: &mut R) -> Result<()> {
        let k = s.k();
        let c2c = s.cell_to_combo(&data.dims);
        s.z.resize(data.records.len(), 0);
        s.v.resize(data.records.len(), false);
        let mut w = vec![0.0; 2 * k];
        for (idx, r) in data.records.iter_mut().enumerate() {
            let m = r.mouse as usize;
            let lf = &s.lambda_fixed[c2c[r.cell as usize]];
            for j in 0..k {
                w[j] = s.pi0[m][j] * lf[j];
                w[k + j] = (1.0 - s.pi0[m][j]) * s.lambda_rand[m][j];
            }
            let pick = sample_multinomial_index(rng, &w)?;
            let (z, v) = (pick % k, pick >= k);
            let c = s.components[z];
            let x = sample_gamma(rng, c.shape, c.rate)?;
            *r = IsiRecord { mouse: r.mouse, cell: r.cell, x, ln_x: x.ln() };
            s.z[idx] = z;
            s.v[idx] = v;
        }
        Ok(())
    }
}

/// `ln Σ_k w_k Ga(x | α_k, β_k)`.
pub fn mixture_log_density(x: f64, components: &[GammaParams], weights: &[f64]) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("mixture density argument must be positive, got {x}")));
    }
    let ln_x = x.ln();
    let terms: Vec<f64> = components
        .iter()
        .zip(weights)
        .map(|(c, &w)| w.ln() + log_gamma_density_unchecked(ln_x, x, c.shape, c.rate))
        .collect();
    Ok(log_sum_exp(&terms))
}
