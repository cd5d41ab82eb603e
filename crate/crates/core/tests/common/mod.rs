#![allow(dead_code)]

use mrmm::data::N_SYLLABLES;
use mrmm::dist::{GammaParams, RngStream};
use mrmm::isi::{IsiData, IsiHyperParams, IsiModel, IsiModelState, IsiOptions, IsiRecord};
use mrmm::partition::Partition;
use mrmm::trans::{Matrix, TransData, TransHyperParams, TransModel, TransModelState, TransOptions, TransRecord};
use rand::Rng;

pub fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{j−1} e^{−2 j² λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as usize % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS p-value with the Stephens small-sample correction.
pub fn ks_pvalue<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Standard error of the mean of a correlated series from `n_batches` batch means.
pub fn batch_se(x: &[f64], n_batches: usize) -> f64 {
    let b = x.len() / n_batches;
    let means: Vec<f64> = (0..n_batches).map(|i| x[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64).collect();
    (mean_var(&means).1 / n_batches as f64).sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `ln B(c + n) − ln B(c)` for a Dirichlet-multinomial count vector.
pub fn dm_log_marginal(conc: &[f64], counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n == 0.0 {
        return 0.0;
    }
    let c: f64 = conc.iter().sum();
    conc.iter().zip(counts).map(|(a, x)| ln_gamma(a + x) - ln_gamma(*a)).sum::<f64>() - (ln_gamma(c + n) - ln_gamma(c))
}

pub fn mixed_radix(dims: &[usize], levels: &[usize]) -> usize {
    levels.iter().zip(dims).fold(0, |acc, (&l, &d)| acc * d + l)
}

pub fn levels_of(dims: &[usize], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (o, &d) in out.iter_mut().zip(dims).rev() {
        *o = idx % d;
        idx /= d;
    }
    out
}

pub fn trans_hyper(n_cov: usize) -> TransHyperParams {
    TransHyperParams {
        alpha00: 1.3,
        lambda00: [0.3, 0.2, 0.35, 0.15],
        alpha_partition: vec![1.0; n_cov],
        beta_pi: (1.5, 2.0),
        gamma_alpha_fixed: (2.0, 1.0),
        gamma_alpha_rand: (2.0, 1.5),
    }
}

/// Random transition records for `n_mice` mice over level cells of `dims`,
/// arranged in short sequences.
pub fn trans_records<R: Rng>(rng: &mut R, dims: &[usize], n_mice: usize, n: usize) -> Vec<TransRecord> {
    let n_cells: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut prev = 0u8;
    for i in 0..n {
        let continues = i % 6 != 0;
        if !continues {
            prev = rng.random_range(0..N_SYLLABLES as u8);
        }
        let cur = rng.random_range(0..N_SYLLABLES as u8);
        out.push(TransRecord {
            mouse: (i / 6 % n_mice) as u32,
            cell: (i / 6 % n_cells) as u32,
            prev,
            cur,
            continues,
        });
        prev = cur;
    }
    out
}

pub fn trans_toy(seed: u64, dims: &[usize], n_mice: usize, n: usize, options: TransOptions) -> (TransModel, TransModelState) {
    let mut r = rng(seed);
    let data = TransData { n_mice, dims: dims.to_vec(), records: trans_records(&mut r, dims, n_mice, n) };
    let model = TransModel::new(data, trans_hyper(dims.len()), options).unwrap();
    let mut s = model.sample_prior(&mut r).unwrap();
    s.v = (0..n).map(|i| i % 3 == 1).collect();
    (model, s)
}

/// Fixed-effect counts per cluster combination, recomputed from scratch.
pub fn trans_fixed_counts(model: &TransModel, s: &TransModelState) -> Vec<Matrix> {
    let dims = &model.data.dims;
    let kdims: Vec<usize> = s.partitions.iter().map(Partition::k).collect();
    let n_combo: usize = kdims.iter().product();
    let mut out = vec![[[0.0; N_SYLLABLES]; N_SYLLABLES]; n_combo];
    for (r, &v) in model.data.records.iter().zip(&s.v) {
        if v {
            continue;
        }
        let levels = levels_of(dims, r.cell as usize);
        let clusters: Vec<usize> = levels.iter().zip(&s.partitions).map(|(&l, p)| p.label(l)).collect();
        out[mixed_radix(&kdims, &clusters)][r.prev as usize][r.cur as usize] += 1.0;
    }
    out
}

pub fn isi_hyper(k: usize) -> IsiHyperParams {
    let raw: Vec<f64> = (0..k).map(|j| 1.0 + j as f64).collect();
    let total: f64 = raw.iter().sum();
    IsiHyperParams {
        alpha00: 2.0,
        lambda00: Some(raw.iter().map(|x| x / total).collect()),
        beta_pi: (1.5, 2.5),
        gamma_shape_prior: (20.0, 4.0),
        gamma_rate_prior: (10.0, 2.0),
        gamma_alpha_fixed: (2.0, 1.0),
        gamma_alpha_rand: (3.0, 2.0),
        ..IsiHyperParams::default()
    }
}

pub fn isi_toy(seed: u64, dims: &[usize], n_mice: usize, n: usize, k: usize, options: IsiOptions) -> (IsiModel, IsiModelState) {
    let mut r = rng(seed);
    let n_cells: usize = dims.iter().product();
    let records: Vec<IsiRecord> = (0..n)
        .map(|i| IsiRecord::new(i % n_mice, (i / n_mice) % n_cells, 0.2 + 2.0 * r.random::<f64>()))
        .collect();
    let data = IsiData { n_mice, dims: dims.to_vec(), records };
    let model = IsiModel::new(data, k, isi_hyper(k), options).unwrap();
    let mut s = model.sample_prior(&mut r).unwrap();
    s.z = (0..n).map(|i| (i * 7 + i / 3) % k).collect();
    s.v = (0..n).map(|i| i % 4 == 2).collect();
    s.components = (0..k).map(|j| GammaParams { shape: 3.0 + j as f64, rate: 2.0 + j as f64 }).collect();
    (model, s)
}

/// Fixed-effect counts per cluster combination, recomputed from scratch.
pub fn isi_fixed_counts(model: &IsiModel, s: &IsiModelState) -> Vec<Vec<f64>> {
    let dims = &model.data.dims;
    let kdims: Vec<usize> = s.partitions.iter().map(Partition::k).collect();
    let n_combo: usize = kdims.iter().product();
    let mut out = vec![vec![0.0; model.k]; n_combo];
    for ((r, &z), &v) in model.data.records.iter().zip(&s.z).zip(&s.v) {
        if v {
            continue;
        }
        let levels = levels_of(dims, r.cell as usize);
        let clusters: Vec<usize> = levels.iter().zip(&s.partitions).map(|(&l, p)| p.label(l)).collect();
        out[mixed_radix(&kdims, &clusters)][z] += 1.0;
    }
    out
}

/// Exact log collapsed marginal of the fixed-effect counts of a toy with a
/// single covariate under `p`.
pub fn isi_partition_log_marginal(model: &IsiModel, s: &IsiModelState, p: &Partition) -> f64 {
    let mut t = s.clone();
    t.partitions = vec![p.clone()];
    let conc: Vec<f64> = s.lambda0.iter().map(|l| s.alpha_fixed * l).collect();
    isi_fixed_counts(model, &t).iter().map(|c| dm_log_marginal(&conc, c)).sum()
}
