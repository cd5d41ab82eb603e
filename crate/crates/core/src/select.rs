//! LPML and WAIC from per-record posterior log densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::log_sum_exp;

/// Kept draws of per-record log densities, one row per draw.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogDensityTrace {
    n_records: usize,
    draws: Vec<Vec<f64>>,
}

impl LogDensityTrace {
    pub fn new(n_records: usize) -> Self {
        LogDensityTrace { n_records, draws: Vec::new() }
    }

    pub fn push(&mut self, log_f: Vec<f64>) -> Result<()> {
        if log_f.len() != self.n_records {
            return Err(Error::Domain(format!("expected {} log densities, got {}", self.n_records, log_f.len())));
        }
        self.draws.push(log_f);
        Ok(())
    }

    /// Appends the draws of `other`.
    pub fn extend(&mut self, other: &LogDensityTrace) -> Result<()> {
        if other.n_records != self.n_records {
            return Err(Error::Domain("record counts differ".into()));
        }
        self.draws.extend(other.draws.iter().cloned());
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    fn column(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[i]).collect()
    }

    fn check(&self, min_draws: usize) -> Result<()> {
        if self.draws.len() < min_draws.max(1) {
            return Err(Error::InsufficientDraws { required: min_draws.max(1), available: self.draws.len() });
        }
        Ok(())
    }

    /// `−Σᵢ ln mean_s(1/fᵢ⁽ˢ⁾)`.
    pub fn lpml(&self, min_draws: usize) -> Result<f64> {
        self.check(min_draws)?;
        let ln_s = (self.draws.len() as f64).ln();
        let mut total = 0.0;
        let mut col = Vec::with_capacity(self.draws.len());
        for i in 0..self.n_records {
            col.clear();
            col.extend(self.draws.iter().map(|d| -d[i]));
            total -= log_sum_exp(&col) - ln_s;
        }
        Ok(total)
    }

    /// `(WAIC, p_WAIC)` with `p_WAIC = 2 Σᵢ [ln mean f − mean ln f]`.
    pub fn waic(&self, min_draws: usize) -> Result<(f64, f64)> {
        self.check(min_draws)?;
        let s = self.draws.len() as f64;
        let (mut lppd, mut p) = (0.0, 0.0);
        for i in 0..self.n_records {
            let col = self.column(i);
            let log_mean = log_sum_exp(&col) - s.ln();
            let mean_log = col.iter().sum::<f64>() / s;
            lppd += log_mean;
            p += 2.0 * (log_mean - mean_log);
        }
        Ok((-2.0 * (lppd - p), p))
    }

    /// Streaming summary of the same draws.
    pub fn accumulator(&self) -> DensityAccumulator {
        let mut acc = DensityAccumulator::new(self.n_records);
        for d in &self.draws {
            acc.push(d);
        }
        acc
    }
}

/// Running per-record sums for LPML and WAIC in `O(records)` memory:
/// log-sum-exp of `ln f` and of `−ln f`, and the plain sum of `ln f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityAccumulator {
    n_draws: usize,
    lse_log_f: Vec<f64>,
    lse_neg_log_f: Vec<f64>,
    sum_log_f: Vec<f64>,
}

fn lse_add(acc: f64, x: f64) -> f64 {
    if acc == f64::NEG_INFINITY {
        return x;
    }
    if x == f64::NEG_INFINITY {
        return acc;
    }
    let (hi, lo) = if acc >= x { (acc, x) } else { (x, acc) };
    hi + (lo - hi).exp().ln_1p()
}

impl DensityAccumulator {
    pub fn new(n_records: usize) -> Self {
        DensityAccumulator {
            n_draws: 0,
            lse_log_f: vec![f64::NEG_INFINITY; n_records],
            lse_neg_log_f: vec![f64::NEG_INFINITY; n_records],
            sum_log_f: vec![0.0; n_records],
        }
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn n_records(&self) -> usize {
        self.sum_log_f.len()
    }

    pub fn push(&mut self, log_f: &[f64]) {
        assert_eq!(log_f.len(), self.sum_log_f.len(), "record count mismatch");
        for (i, &l) in log_f.iter().enumerate() {
            self.lse_log_f[i] = lse_add(self.lse_log_f[i], l);
            self.lse_neg_log_f[i] = lse_add(self.lse_neg_log_f[i], -l);
            self.sum_log_f[i] += l;
        }
        self.n_draws += 1;
    }

    /// Pools the draws of another chain.
    pub fn merge(&mut self, other: &DensityAccumulator) -> Result<()> {
        if other.n_records() != self.n_records() {
            return Err(Error::Domain("record counts differ".into()));
        }
        for i in 0..self.n_records() {
            self.lse_log_f[i] = lse_add(self.lse_log_f[i], other.lse_log_f[i]);
            self.lse_neg_log_f[i] = lse_add(self.lse_neg_log_f[i], other.lse_neg_log_f[i]);
            self.sum_log_f[i] += other.sum_log_f[i];
        }
        self.n_draws += other.n_draws;
        Ok(())
    }

    fn check(&self, min_draws: usize) -> Result<()> {
        if self.n_draws < min_draws.max(1) {
            return Err(Error::InsufficientDraws { required: min_draws.max(1), available: self.n_draws });
        }
        Ok(())
    }

    pub fn lpml(&self, min_draws: usize) -> Result<f64> {
        self.check(min_draws)?;
        let ln_s = (self.n_draws as f64).ln();
        Ok(-self.lse_neg_log_f.iter().map(|&l| l - ln_s).sum::<f64>())
    }

    pub fn waic(&self, min_draws: usize) -> Result<(f64, f64)> {
        self.check(min_draws)?;
        let s = self.n_draws as f64;
        let (mut lppd, mut p) = (0.0, 0.0);
        for (&lse, &sum) in self.lse_log_f.iter().zip(&self.sum_log_f) {
            let log_mean = lse - s.ln();
            lppd += log_mean;
            p += 2.0 * (log_mean - sum / s);
        }
        Ok((-2.0 * (lppd - p), p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub k: usize,
    pub lpml: f64,
    pub waic: f64,
    pub p_waic: f64,
    pub n_draws_used: usize,
}

impl SelectionScore {
    pub fn from_accumulator(k: usize, acc: &DensityAccumulator, min_draws: usize) -> Result<Self> {
        let lpml = acc.lpml(min_draws)?;
        let (waic, p_waic) = acc.waic(min_draws)?;
        Ok(SelectionScore { k, lpml, waic, p_waic, n_draws_used: acc.n_draws() })
    }
}

/// Smallest `K` whose LPML is within `plateau · |max LPML|` of the maximum.
pub fn recommend_k(scores: &[SelectionScore], plateau: f64) -> Option<usize> {
    let max = scores.iter().map(|s| s.lpml).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let tol = plateau * max.abs();
    scores.iter().filter(|s| s.lpml >= max - tol).map(|s| s.k).min()
}

pub fn write_scores_csv<W: std::io::Write>(scores: &[SelectionScore], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["K", "lpml", "waic", "p_waic"])?;
    for s in scores {
        w.write_record([s.k.to_string(), s.lpml.to_string(), s.waic.to_string(), s.p_waic.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rows: &[&[f64]]) -> LogDensityTrace {
        let mut t = LogDensityTrace::new(rows[0].len());
        for r in rows {
            t.push(r.to_vec()).unwrap();
        }
        t
    }

    #[test]
    fn constant_density() {
        let c: f64 = 0.3;
        let t = trace(&[&[c.ln(), c.ln()], &[c.ln(), c.ln()], &[c.ln(), c.ln()]]);
        assert!((t.lpml(1).unwrap() - 2.0 * c.ln()).abs() < 1e-14);
        let (waic, p) = t.waic(1).unwrap();
        assert!(p.abs() < 1e-14);
        assert!((waic + 2.0 * 2.0 * c.ln()).abs() < 1e-13);
    }

    #[test]
    fn two_draw_hand_example() {
        // densities (1, e) for one record: log f = (0, 1)
        let t = trace(&[&[0.0], &[1.0]]);
        let e = std::f64::consts::E;
        let want = -((1.0 + 1.0 / e) / 2.0).ln();
        assert!((t.lpml(1).unwrap() - want).abs() < 1e-14);
        let log_mean = ((1.0 + e) / 2.0).ln();
        let p = 2.0 * (log_mean - 0.5);
        let (waic, pw) = t.waic(1).unwrap();
        assert!((pw - p).abs() < 1e-14);
        assert!((waic + 2.0 * (log_mean - p)).abs() < 1e-14);
    }

    #[test]
    fn single_draw_single_record() {
        let t = trace(&[&[-1.7]]);
        assert!((t.lpml(1).unwrap() + 1.7).abs() < 1e-15);
    }

    #[test]
    fn accumulator_matches_matrix() {
        let rows: Vec<Vec<f64>> = (0..50).map(|s| (0..7).map(|i| -((s * 7 + i) % 13) as f64 * 0.37).collect()).collect();
        let mut t = LogDensityTrace::new(7);
        for r in &rows {
            t.push(r.clone()).unwrap();
        }
        let acc = t.accumulator();
        assert!((acc.lpml(1).unwrap() - t.lpml(1).unwrap()).abs() < 1e-10);
        let (a, b) = (acc.waic(1).unwrap(), t.waic(1).unwrap());
        assert!((a.0 - b.0).abs() < 1e-10 && (a.1 - b.1).abs() < 1e-10);

        let mut first = DensityAccumulator::new(7);
        let mut second = DensityAccumulator::new(7);
        for (s, r) in rows.iter().enumerate() {
            if s < 20 { first.push(r) } else { second.push(r) }
        }
        first.merge(&second).unwrap();
        assert!((first.lpml(1).unwrap() - t.lpml(1).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn insufficient_draws() {
        let t = trace(&[&[0.0]]);
        assert!(matches!(t.lpml(100), Err(Error::InsufficientDraws { required: 100, available: 1 })));
        assert!(LogDensityTrace::new(3).waic(0).is_err());
    }

    #[test]
    fn recommendation_rule() {
        let s = |k, lpml| SelectionScore { k, lpml, waic: 0.0, p_waic: 0.0, n_draws_used: 100 };
        let scores = [s(2, -1200.0), s(3, -1100.0), s(4, -1000.5), s(5, -1000.0)];
        assert_eq!(recommend_k(&scores, 0.001), Some(4));
        assert_eq!(recommend_k(&[s(1, -5.0)], 0.001), Some(1));
        assert_eq!(recommend_k(&[], 0.001), None);
    }
}
