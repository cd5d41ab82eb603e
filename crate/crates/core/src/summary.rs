//! Posterior summaries: cluster-count posteriors, population transition
//! means, mixture tables, coefficient spread and chain diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{mixed_radix_levels, CovariateSpec, N_SYLLABLES, SYLLABLE_LABELS};
use crate::dist::GammaParams;
use crate::error::{Error, Result};
use crate::isi::{IsiModel, IsiModelState};
use crate::trans::{Matrix, Row, TransModel, TransModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCountPosterior {
    /// `probabilities[k − 1] = P̂(k)` for `k = 1..=d`.
    pub probabilities: Vec<f64>,
    pub p_greater_than_one: f64,
}

pub fn cluster_count_posterior(ks: &[usize], d: usize) -> Result<ClusterCountPosterior> {
    if ks.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut counts = vec![0usize; d.max(1)];
    for &k in ks {
        if k == 0 || k > counts.len() {
            return Err(Error::Domain(format!("cluster count {k} outside 1..={d}")));
        }
        counts[k - 1] += 1;
    }
    let n = ks.len() as f64;
    let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let p_greater_than_one = 1.0 - probabilities[0];
    Ok(ClusterCountPosterior { probabilities, p_greater_than_one })
}

/// One kept draw of the transition model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransDraw {
    pub k: Vec<usize>,
    /// Population transition matrix per exogenous level cell.
    pub population: Vec<Matrix>,
    pub pi0: Vec<Row>,
}

impl TransDraw {
    pub fn from_state(model: &TransModel, s: &TransModelState) -> Self {
        TransDraw { k: s.k(), population: model.population_matrices(s), pi0: s.pi0.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub mean: Matrix,
    pub sd: Matrix,
}

/// Element-wise mean and standard deviation of the population matrices.
pub fn population_transition_means(draws: &[TransDraw]) -> Result<Vec<MatrixSummary>> {
    let first = draws.first().ok_or(Error::EmptyTrace)?;
    let n = draws.len() as f64;
    let zero = [[0.0; N_SYLLABLES]; N_SYLLABLES];
    let mut out = vec![MatrixSummary { mean: zero, sd: zero }; first.population.len()];
    for (c, o) in out.iter_mut().enumerate() {
        for a in 0..N_SYLLABLES {
            for b in 0..N_SYLLABLES {
                let mean = draws.iter().map(|d| d.population[c][a][b]).sum::<f64>() / n;
                let var = draws.iter().map(|d| (d.population[c][a][b] - mean).powi(2)).sum::<f64>() / n;
                o.mean[a][b] = mean;
                o.sd[a][b] = var.sqrt();
            }
        }
    }
    Ok(out)
}

/// Per-covariate, per-level `K`-vectors.
pub type LevelTables = Vec<Vec<Vec<f64>>>;

/// One kept draw of the interval model, components in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsiDraw {
    pub k: Vec<usize>,
    pub components: Vec<GammaParams>,
    /// `order[j]` is the sampler index of canonical component `j`.
    pub order: Vec<usize>,
    /// Fixed-effect mixture probabilities per covariate level.
    pub fixed_tables: LevelTables,
    /// Population mixture probabilities per covariate level.
    pub population_tables: LevelTables,
    pub pi0: Vec<Vec<f64>>,
    pub alpha_fixed: f64,
    pub alpha_rand: f64,
}

/// Component indices sorted by increasing mean `α/β`.
pub fn canonical_order(components: &[GammaParams]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..components.len()).collect();
    order.sort_by(|&a, &b| components[a].mean().total_cmp(&components[b].mean()).then(a.cmp(&b)));
    order
}

/// Mixture tables per covariate level: the uniform average over the other
/// covariates' level cells of a per-cell weight vector.
pub fn level_tables(dims: &[usize], per_cell: &[Vec<f64>]) -> LevelTables {
    let k = per_cell.first().map_or(0, Vec::len);
    let mut out: LevelTables = dims.iter().map(|&d| vec![vec![0.0; k]; d]).collect();
    for (cell, w) in per_cell.iter().enumerate() {
        let levels = mixed_radix_levels(dims, cell);
        for (r, &l) in levels.iter().enumerate() {
            for j in 0..k {
                out[r][l][j] += w[j];
            }
        }
    }
    let total: usize = dims.iter().product();
    for (r, &d) in dims.iter().enumerate() {
        let share = (total / d) as f64;
        for row in out[r].iter_mut() {
            row.iter_mut().for_each(|x| *x /= share);
        }
    }
    out
}

fn permute(v: &[f64], order: &[usize]) -> Vec<f64> {
    order.iter().map(|&o| v[o]).collect()
}

impl IsiDraw {
    pub fn from_state(model: &IsiModel, s: &IsiModelState) -> Self {
        let order = canonical_order(&s.components);
        let (fixed, population) = isi_cell_weights(model, s, Some(&order));
        IsiDraw {
            k: s.cluster_counts(),
            components: order.iter().map(|&o| s.components[o]).collect(),
            fixed_tables: level_tables(&model.data.dims, &fixed),
            population_tables: level_tables(&model.data.dims, &population),
            pi0: s.pi0.iter().map(|p| permute(p, &order)).collect(),
            order,
            alpha_fixed: s.alpha_fixed,
            alpha_rand: s.alpha_rand,
        }
    }
}

/// Fixed-effect and population weights per level cell, optionally reordered.
pub fn isi_cell_weights(model: &IsiModel, s: &IsiModelState, order: Option<&[usize]>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c2c = s.cell_to_combo(&model.data.dims);
    let identity: Vec<usize> = (0..s.k()).collect();
    let order = order.unwrap_or(&identity);
    let fixed = c2c.iter().map(|&c| permute(&s.lambda_fixed[c], order)).collect();
    let population = (0..c2c.len()).map(|cell| permute(&model.population_weights(s, cell), order)).collect();
    (fixed, population)
}

/// Trace-averaged mixture tables `(fixed, population)`.
pub fn mean_mixture_tables(draws: &[IsiDraw]) -> Result<(LevelTables, LevelTables)> {
    let first = draws.first().ok_or(Error::EmptyTrace)?;
    let n = draws.len() as f64;
    let average = |get: &dyn Fn(&IsiDraw) -> &LevelTables| -> LevelTables {
        let mut acc = get(first).clone();
        for t in acc.iter_mut().flatten() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        for d in draws {
            for (a, b) in acc.iter_mut().flatten().zip(get(d).iter().flatten()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y / n;
                }
            }
        }
        acc
    };
    Ok((average(&|d| &d.fixed_tables), average(&|d| &d.population_tables)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub shape_mean: f64,
    pub shape_sd: f64,
    pub rate_mean: f64,
    pub rate_sd: f64,
}

pub fn component_summary(draws: &[IsiDraw]) -> Result<Vec<ComponentSummary>> {
    let first = draws.first().ok_or(Error::EmptyTrace)?;
    let n = draws.len() as f64;
    Ok((0..first.components.len())
        .map(|j| {
            let stats = |f: &dyn Fn(&GammaParams) -> f64| {
                let mean = draws.iter().map(|d| f(&d.components[j])).sum::<f64>() / n;
                let var = draws.iter().map(|d| (f(&d.components[j]) - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            };
            let (shape_mean, shape_sd) = stats(&|c| c.shape);
            let (rate_mean, rate_sd) = stats(&|c| c.rate);
            ComponentSummary { shape_mean, shape_sd, rate_mean, rate_sd }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation across mice.
    pub sd: f64,
}

/// Spread across mice of each coordinate of `π₀⁽ⁱ⁾`.
pub fn coefficient_summary(per_mouse: &[Vec<f64>]) -> Result<Vec<CoefficientRow>> {
    let first = per_mouse.first().ok_or(Error::EmptyTrace)?;
    let n = per_mouse.len() as f64;
    Ok((0..first.len())
        .map(|j| {
            let xs = per_mouse.iter().map(|p| p[j]);
            let mean = xs.clone().sum::<f64>() / n;
            let var = xs.clone().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let min = xs.clone().fold(f64::INFINITY, f64::min);
            let max = xs.fold(f64::NEG_INFINITY, f64::max);
            let sd = if min == max { 0.0 } else { var.sqrt() };
            CoefficientRow { min, max, mean, sd }
        })
        .collect())
}

/// Per-mouse coefficients averaged over draws.
pub fn mean_coefficients(draws: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = draws.first().ok_or(Error::EmptyTrace)?;
    let n = draws.len() as f64;
    let mut acc: Vec<Vec<f64>> = first.iter().map(|p| vec![0.0; p.len()]).collect();
    for d in draws {
        for (a, p) in acc.iter_mut().zip(d) {
            for (x, y) in a.iter_mut().zip(p) {
                *x += y / n;
            }
        }
    }
    Ok(acc)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Effective sample size by Geyer's initial monotone positive sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let (mean, var) = mean_var(x);
    if !(var > 0.0) {
        return n as f64;
    }
    let acov = |lag: usize| x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / n as f64;
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = (acov(2 * m) + acov(2 * m + 1)) / var;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        m += 1;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Variance of the sample mean estimated from non-overlapping batch means
/// with batch size `⌊√n⌋`.
pub fn batch_means_variance(x: &[f64]) -> f64 {
    let n = x.len();
    let b = ((n as f64).sqrt() as usize).max(1);
    let a = n / b;
    if a < 2 {
        return mean_var(x).1 / n as f64;
    }
    let means: Vec<f64> = (0..a).map(|i| x[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let (_, v) = mean_var(&means);
    v * a as f64 / (a as f64 - 1.0) / a as f64
}

/// Geweke convergence z-score comparing the first 10% with the last 50%.
pub fn geweke_z(x: &[f64]) -> f64 {
    let n = x.len();
    let a = &x[..n / 10];
    let b = &x[n - n / 2..];
    if a.len() < 2 || b.len() < 2 {
        return f64::NAN;
    }
    let se2 = batch_means_variance(a) + batch_means_variance(b);
    let diff = mean_var(a).0 - mean_var(b).0;
    if se2 > 0.0 {
        diff / se2.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Potential scale reduction factor across chains of equal length.
pub fn r_hat(chains: &[&[f64]]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let stats: Vec<(f64, f64)> = chains
        .iter()
        .map(|c| {
            let (mean, var) = mean_var(&c[..n]);
            (mean, var * n as f64 / (n as f64 - 1.0))
        })
        .collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m as f64;
    let b = n as f64 * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    if !(w > 0.0) {
        return if b > 0.0 { f64::INFINITY } else { 1.0 };
    }
    (((n as f64 - 1.0) / n as f64 * w + b / n as f64) / w).sqrt()
}

pub fn write_k_posterior_csv<W: Write>(names: &[String], posteriors: &[ClusterCountPosterior], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "k", "probability", "p_k_gt_1"])?;
    for (name, p) in names.iter().zip(posteriors) {
        for (i, &prob) in p.probabilities.iter().enumerate() {
            w.write_record([name.clone(), (i + 1).to_string(), prob.to_string(), p.p_greater_than_one.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_transition_means_csv<W: Write>(covariates: &[CovariateSpec], summaries: &[MatrixSummary], writer: W) -> Result<()> {
    let dims: Vec<usize> = covariates.iter().map(CovariateSpec::d).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = covariates.iter().map(|c| c.name.clone()).collect();
    header.extend(["from", "to", "mean", "sd"].map(String::from));
    w.write_record(&header)?;
    for (cell, s) in summaries.iter().enumerate() {
        let levels = mixed_radix_levels(&dims, cell);
        for a in 0..N_SYLLABLES {
            for b in 0..N_SYLLABLES {
                let mut row: Vec<String> = levels.iter().zip(covariates).map(|(&l, c)| c.levels[l].clone()).collect();
                row.extend([SYLLABLE_LABELS[a].to_string(), SYLLABLE_LABELS[b].to_string(), s.mean[a][b].to_string(), s.sd[a][b].to_string()]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format mixture tables: `source` names the table (e.g. `trace_mean_fixed`).
pub fn write_mixture_csv<W: Write>(covariates: &[CovariateSpec], tables: &[(&str, &LevelTables)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["source", "covariate", "level", "component", "probability"])?;
    for (source, t) in tables {
        for (spec, levels) in covariates.iter().zip(t.iter()) {
            for (l, row) in levels.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    w.write_record([source.to_string(), spec.name.clone(), spec.levels[l].clone(), (j + 1).to_string(), p.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_coefficients_csv<W: Write>(labels: &[String], tables: &[(&str, &[CoefficientRow])], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["source", "coefficient", "min", "max", "mean", "sd"])?;
    for (source, rows) in tables {
        for (label, r) in labels.iter().zip(rows.iter()) {
            w.write_record([source.to_string(), label.clone(), r.min.to_string(), r.max.to_string(), r.mean.to_string(), r.sd.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_components_csv<W: Write>(rows: &[ComponentSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["component", "shape_mean", "shape_sd", "rate_mean", "rate_sd"])?;
    for (j, r) in rows.iter().enumerate() {
        w.write_record([(j + 1).to_string(), r.shape_mean.to_string(), r.shape_sd.to_string(), r.rate_mean.to_string(), r.rate_sd.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_counts() {
        let p = cluster_count_posterior(&[2, 2, 2], 3).unwrap();
        assert_eq!(p.probabilities, vec![0.0, 1.0, 0.0]);
        assert_eq!(p.p_greater_than_one, 1.0);
        let p = cluster_count_posterior(&[1, 2, 3, 3], 3).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(cluster_count_posterior(&[], 2), Err(Error::EmptyTrace)));
    }

    #[test]
    fn coefficient_population_sd() {
        let rows = coefficient_summary(&[vec![0.2], vec![0.8]]).unwrap();
        assert!((rows[0].mean - 0.5).abs() < 1e-15);
        assert!((rows[0].sd - 0.3).abs() < 1e-12);
        assert_eq!((rows[0].min, rows[0].max), (0.2, 0.8));
        let same = coefficient_summary(&[vec![0.4], vec![0.4], vec![0.4]]).unwrap();
        assert_eq!(same[0].sd, 0.0);
    }

    #[test]
    fn level_tables_average_other_axes() {
        // dims (2, 2): cells (0,0), (0,1), (1,0), (1,1)
        let per_cell = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![0.5, 0.5]];
        let t = level_tables(&[2, 2], &per_cell);
        assert_eq!(t[0][0], vec![0.5, 0.5]);
        assert_eq!(t[0][1], vec![0.5, 0.5]);
        assert_eq!(t[1][0], vec![0.75, 0.25]);
        assert_eq!(t[1][1], vec![0.25, 0.75]);
    }

    #[test]
    fn canonical_order_by_mean() {
        let c = [GammaParams { shape: 10.0, rate: 1.0 }, GammaParams { shape: 1.0, rate: 1.0 }, GammaParams { shape: 4.0, rate: 2.0 }];
        assert_eq!(canonical_order(&c), vec![1, 2, 0]);
    }

    #[test]
    fn ess_of_independent_and_sticky_series() {
        let mut rng = crate::dist::RngStream::new(1, 0);
        use rand::Rng;
        let iid: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 3500.0 && ess < 6500.0, "{ess}");
        let mut ar = vec![0.0];
        for _ in 1..5000 {
            let last = *ar.last().unwrap();
            ar.push(0.95 * last + rng.random::<f64>() - 0.5);
        }
        assert!(effective_sample_size(&ar) < 500.0);
        assert!(geweke_z(&iid).abs() < 4.0);
    }

    #[test]
    fn r_hat_detects_separated_chains() {
        let a: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        assert!(r_hat(&[&a, &a]) < 1.01);
        assert!(r_hat(&[&a, &b]) > 2.0);
    }

    #[test]
    fn transition_means_of_single_draw() {
        let m = [[0.25; N_SYLLABLES]; N_SYLLABLES];
        let d = TransDraw { k: vec![1], population: vec![m], pi0: vec![] };
        let s = population_transition_means(&[d]).unwrap();
        assert_eq!(s[0].mean, m);
        assert_eq!(s[0].sd, [[0.0; N_SYLLABLES]; N_SYLLABLES]);
    }
}
