//! Seeded random streams, samplers and log densities shared by both samplers.
//!
//! Every sampler works in log space where it matters: gamma variates are drawn
//! as logarithms so that Dirichlet and Beta draws with tiny concentrations do
//! not collapse to exact zeros before normalization.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::ln_gamma;

/// A ChaCha20 stream identified by `(seed, stream_id)`.
///
/// Streams with the same pair replay the same draws; distinct stream ids on
/// the same seed are disjoint ChaCha nonces.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream_id: u64,
    /// Word offset into the stream, as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(snapshot: &RngSnapshot) -> Result<Self> {
        let pos: u128 = snapshot
            .word_pos
            .parse()
            .map_err(|_| Error::CheckpointMismatch(format!("bad rng position `{}`", snapshot.word_pos)))?;
        let mut rng = RngStream::new(snapshot.seed, snapshot.stream_id);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Gamma distribution in shape/rate form: density ∝ x^(α-1) e^(-βx).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        check_positive(shape, "gamma shape")?;
        check_positive(rate, "gamma rate")?;
        Ok(GammaParams { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }
}

fn check_positive(x: f64, what: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive and finite, got {x}")))
    }
}

/// Uniform on (0, 1], safe to take the logarithm of.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Logarithm of a Gamma(shape, 1) variate. Shapes below one are boosted:
/// G(a) = G(a + 1) · U^(1/a).
pub fn log_gamma_variate<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("validated shape");
        let x: f64 = g.sample(rng);
        if x > 0.0 {
            return x.ln();
        }
        // Marsaglia–Tsang never returns zero for shape ≥ 1, but be defensive.
        return f64::MIN_POSITIVE.ln();
    }
    log_gamma_variate(rng, shape + 1.0) + open_unit(rng).ln() / shape
}

pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    check_positive(shape, "gamma shape")?;
    check_positive(rate, "gamma rate")?;
    for _ in 0..64 {
        let x = (log_gamma_variate(rng, shape) - rate.ln()).exp();
        if x > 0.0 && x.is_finite() {
            return Ok(x);
        }
    }
    Ok(f64::MIN_POSITIVE)
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    check_positive(a, "beta parameter a")?;
    check_positive(b, "beta parameter b")?;
    let la = log_gamma_variate(rng, a);
    let lb = log_gamma_variate(rng, b);
    // x = Ga / (Ga + Gb) = 1 / (1 + exp(lb - la))
    Ok(1.0 / (1.0 + (lb - la).exp()))
}

pub fn sample_bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("bernoulli probability {p} outside [0, 1]")));
    }
    Ok(rng.random::<f64>() < p)
}

/// Draws from a Dirichlet distribution into `out`.
///
/// Entries are floored at the smallest positive normal double so that the
/// draw can itself serve as a concentration vector later on.
pub fn sample_dirichlet_into<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64], out: &mut [f64]) -> Result<()> {
    assert_eq!(concentration.len(), out.len(), "dirichlet output length mismatch");
    if concentration.is_empty() {
        return Err(Error::Domain("empty dirichlet concentration".into()));
    }
    if concentration.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::NonPositiveConcentration);
    }
    if concentration.len() == 1 {
        out[0] = 1.0;
        return Ok(());
    }
    let mut max = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(concentration) {
        *o = log_gamma_variate(rng, a);
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = (*o / total).max(f64::MIN_POSITIVE);
    }
    Ok(())
}

pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; concentration.len()];
    sample_dirichlet_into(rng, concentration, &mut out)?;
    Ok(out)
}

/// Index drawn with probability proportional to `weights` (need not be normalized).
pub fn sample_multinomial_index<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Domain(format!("invalid categorical weight {w}")));
        }
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::Domain("categorical weights sum to zero".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Index drawn with probability proportional to `exp(log_weights)`.
///
/// Returns `None` when every weight is `-∞` or the largest log weight is below
/// `floor` (used to flag pathological underflow).
pub fn sample_log_categorical<R: Rng + ?Sized>(
    rng: &mut R,
    log_weights: &[f64],
    scratch: &mut Vec<f64>,
    floor: f64,
) -> Option<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > floor) {
        return None;
    }
    scratch.clear();
    scratch.extend(log_weights.iter().map(|&l| (l - max).exp()));
    sample_multinomial_index(rng, scratch).ok()
}

pub fn log_gamma_density(x: f64, p: GammaParams) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("gamma density argument must be positive, got {x}")));
    }
    check_positive(p.shape, "gamma shape")?;
    check_positive(p.rate, "gamma rate")?;
    Ok(log_gamma_density_unchecked(x.ln(), x, p.shape, p.rate))
}

/// Gamma log density from precomputed `ln x`; no argument checks.
#[inline]
pub fn log_gamma_density_unchecked(ln_x: f64, x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * ln_x - rate * x
}

/// `Σ lnΓ(aᵢ) − lnΓ(Σ aᵢ)`.
pub fn log_multivariate_beta(concentration: &[f64]) -> Result<f64> {
    if concentration.is_empty() || concentration.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::NonPositiveConcentration);
    }
    Ok(log_multivariate_beta_unchecked(concentration))
}

#[inline]
pub fn log_multivariate_beta_unchecked(concentration: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut acc = 0.0;
    for &a in concentration {
        acc += ln_gamma(a);
        total += a;
    }
    acc - ln_gamma(total)
}

/// Log Beta density for `x ∈ (0, 1)`.
pub fn log_beta_density(x: f64, a: f64, b: f64) -> f64 {
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

/// Log Dirichlet density of a probability vector.
pub fn log_dirichlet_density(x: &[f64], concentration: &[f64]) -> f64 {
    let mut acc = -log_multivariate_beta_unchecked(concentration);
    for (&xi, &a) in x.iter().zip(concentration) {
        acc += (a - 1.0) * xi.ln();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(7, 0);
        let mut b = RngStream::new(7, 0);
        let mut c = RngStream::new(7, 1);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn snapshot_restores_position() {
        let mut a = RngStream::new(11, 3);
        for _ in 0..37 {
            a.next_u32();
        }
        let snap = a.snapshot();
        let mut b = RngStream::restore(&snap).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn dirichlet_edge_cases() {
        let mut rng = RngStream::new(1, 0);
        assert_eq!(sample_dirichlet(&mut rng, &[3.0]).unwrap(), vec![1.0]);
        let x = sample_dirichlet(&mut rng, &[1e9, 1e9]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-3);
        assert!(matches!(sample_dirichlet(&mut rng, &[1.0, 0.0]), Err(Error::NonPositiveConcentration)));
        let tiny = sample_dirichlet(&mut rng, &[1e-4, 1e-4, 1e-4]).unwrap();
        assert!((tiny.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tiny.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dirichlet_mean() {
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let x = sample_dirichlet(&mut rng, &[2.0, 1.0, 1.0]).unwrap();
            for (a, v) in acc.iter_mut().zip(&x) {
                *a += v;
            }
        }
        for (a, want) in acc.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a / n as f64 - want).abs() < 0.01);
        }
    }

    #[test]
    fn gamma_mean_and_small_shape() {
        let mut rng = RngStream::new(3, 0);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample_gamma(&mut rng, 3.0, 2.0).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() / 1.5 < 0.02);
        let small: f64 = (0..n).map(|_| sample_gamma(&mut rng, 0.3, 1.0).unwrap()).sum::<f64>() / n as f64;
        assert!((small - 0.3).abs() < 0.01);
        assert!(sample_gamma(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_discrete_draws() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..1000 {
            assert!(sample_bernoulli(&mut rng, 1.0).unwrap());
            assert!(!sample_bernoulli(&mut rng, 0.0).unwrap());
            assert_eq!(sample_multinomial_index(&mut rng, &[0.0, 1.0, 0.0]).unwrap(), 1);
        }
        assert!(sample_bernoulli(&mut rng, 1.5).is_err());
    }

    #[test]
    fn log_categorical_flags_underflow() {
        let mut rng = RngStream::new(5, 0);
        let mut scratch = Vec::new();
        assert_eq!(sample_log_categorical(&mut rng, &[-800.0, -900.0], &mut scratch, -700.0), None);
        assert_eq!(sample_log_categorical(&mut rng, &[-800.0, f64::NEG_INFINITY], &mut scratch, f64::NEG_INFINITY), Some(0));
    }

    #[test]
    fn gamma_density_values() {
        assert_relative_eq!(log_gamma_density(1.0, GammaParams::new(1.0, 1.0).unwrap()).unwrap(), -1.0, max_relative = 1e-14);
        let want = (1.5f64.powi(3) * 4.0 * (-3.0f64).exp() / 2.0).ln();
        assert_relative_eq!(log_gamma_density(2.0, GammaParams::new(3.0, 1.5).unwrap()).unwrap(), want, max_relative = 1e-13);
        assert!(log_gamma_density(0.0, GammaParams::new(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn multivariate_beta_values() {
        assert!(log_multivariate_beta(&[1.0, 1.0]).unwrap().abs() < 1e-14);
        assert_relative_eq!(log_multivariate_beta(&[2.0, 3.0]).unwrap(), (1.0f64 / 12.0).ln(), max_relative = 1e-13);
        assert_relative_eq!(log_multivariate_beta(&[1.0; 4]).unwrap(), -(6.0f64).ln(), max_relative = 1e-13);
        assert!(log_multivariate_beta(&[1.0, -1.0]).is_err());
    }
}
