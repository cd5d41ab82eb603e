//! Forward simulation of syllable sequences with intervals, including the
//! three recovery scenarios for interval covariate effects.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{mixed_radix_index, CovariateSpec, Sequence, SequenceDataset, SyllableCode, N_SYLLABLES};
use crate::dist::{sample_dirichlet_into, sample_gamma, sample_multinomial_index, GammaParams, RngStream};
use crate::error::{Error, Result};
use crate::trans::{vec_ok, Matrix, Row};

/// Population-level parameters that scenarios are derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParameters {
    /// Exogenous covariates (genotype first, then context).
    pub covariates: Vec<CovariateSpec>,
    pub first_syllable: Row,
    /// Transition matrix per (genotype, context) cell.
    pub transitions: Vec<Matrix>,
    pub components: Vec<GammaParams>,
    /// Mixture weights per (genotype, context, preceding syllable) cell.
    pub mixture: Vec<Vec<f64>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

impl ReferenceParameters {
    /// Synthetic stand-in for fitted parameters: balanced syllable use, mild
    /// genotype and context shifts in the transition matrices, four
    /// well-separated gamma components on the log scale, and additive
    /// covariate effects on the mixture logits.
    pub fn bundled() -> Self {
        let center: Matrix = [
            [0.40, 0.20, 0.25, 0.15],
            [0.20, 0.40, 0.25, 0.15],
            [0.15, 0.20, 0.45, 0.20],
            [0.15, 0.15, 0.30, 0.40],
        ];
        let mut transitions = Vec::new();
        for g in 0..2 {
            for c in 0..3 {
                let mut m = center;
                for (prev, row) in m.iter_mut().enumerate() {
                    // wild type repeats more, moving mass from the next syllable
                    if g == 1 {
                        row[prev] += 0.05;
                        row[(prev + 1) % N_SYLLABLES] -= 0.05;
                    }
                    // contexts shift mass between simple and down-jump syllables
                    match c {
                        1 => {
                            row[2] -= 0.04;
                            row[0] += 0.04;
                        }
                        2 => {
                            row[2] += 0.04;
                            row[3] -= 0.04;
                        }
                        _ => {}
                    }
                }
                transitions.push(m);
            }
        }
        let components = [(0.15, 14.0), (0.5, 39.0), (1.0, 69.0), (1.7, 113.0)]
            .iter()
            .map(|&(mean, shape)| GammaParams { shape, rate: shape / mean })
            .collect();
        let genotype = [[0.8, -0.4, 0.0, -0.4], [-0.8, 0.4, 0.0, 0.4]];
        let context = [[0.6, 0.0, -0.6, 0.0], [-0.6, 0.6, 0.0, 0.0], [0.0, -0.6, 0.6, 0.0]];
        let prev = [[0.7, 0.0, 0.0, -0.7], [-0.7, 0.7, 0.0, 0.0], [0.0, -0.7, 0.7, 0.0], [0.0, 0.0, -0.7, 0.7]];
        let mut mixture = Vec::new();
        for g in &genotype {
            for c in &context {
                for p in &prev {
                    let logits: Vec<f64> = (0..4).map(|k| g[k] + c[k] + p[k]).collect();
                    mixture.push(softmax(&logits));
                }
            }
        }
        ReferenceParameters {
            covariates: CovariateSpec::default_schema(),
            first_syllable: [0.2, 0.25, 0.35, 0.2],
            transitions,
            components,
            mixture,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.covariates.iter().map(CovariateSpec::d).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        let dims = self.dims();
        let n_cells: usize = dims.iter().product();
        if self.covariates.len() != 2 {
            return bad("expected two exogenous covariates (genotype, context)");
        }
        if !vec_ok(&self.first_syllable) {
            return bad("first-syllable probabilities invalid");
        }
        if self.transitions.len() != n_cells || !self.transitions.iter().flatten().all(|r| vec_ok(r)) {
            return bad("transition matrices invalid");
        }
        let k = self.components.len();
        if k == 0 || self.components.iter().any(|c| !(c.shape > 0.0 && c.rate > 0.0)) {
            return bad("gamma components invalid");
        }
        if self.mixture.len() != n_cells * N_SYLLABLES || !self.mixture.iter().all(|w| w.len() == k && vec_ok(w)) {
            return bad("mixture weights invalid");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let r: ReferenceParameters = serde_json::from_reader(std::fs::File::open(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

/// Layout of the simulated recordings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDesign {
    pub n_mice: usize,
    /// Mice `0..n_mutant` carry the first genotype level.
    pub n_mutant: usize,
    pub sequences_per_mouse: usize,
    /// Mean syllable count per sequence (at least 2).
    pub mean_length: f64,
    /// Negative-binomial size of the excess length over 2.
    pub length_dispersion: f64,
}

impl Default for SequenceDesign {
    fn default() -> Self {
        SequenceDesign { n_mice: 18, n_mutant: 10, sequences_per_mouse: 40, mean_length: 120.0, length_dispersion: 4.0 }
    }
}

impl SequenceDesign {
    /// About 8k transitions: the reference layout with short sequences.
    pub fn desk() -> Self {
        SequenceDesign { mean_length: 12.0, ..SequenceDesign::default() }
    }
}

/// Per-mouse random effects drawn around the population parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub concentration: f64,
    /// Weight of the population component.
    pub pi0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub reference: ReferenceParameters,
    pub design: SequenceDesign,
    pub random_effects: Option<RandomEffects>,
    /// True interval cluster counts for (genotype, context, preceding syllable).
    pub truth_k: Option<Vec<usize>>,
    pub scenario: Option<String>,
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        self.reference.validate()?;
        let d = &self.design;
        if d.n_mice == 0 || d.n_mutant > d.n_mice || d.sequences_per_mouse == 0 {
            return Err(Error::InvalidSpec("mouse and sequence counts must be positive".into()));
        }
        if !(d.mean_length >= 2.0 && d.length_dispersion > 0.0) {
            return Err(Error::InvalidSpec("mean length must be at least 2 and dispersion positive".into()));
        }
        if let Some(re) = self.random_effects {
            if !(re.concentration > 0.0 && re.pi0 > 0.0 && re.pi0 <= 1.0) {
                return Err(Error::InvalidSpec("random-effect settings out of range".into()));
            }
        }
        Ok(())
    }
}

/// Mouse-level mixing of population and random-effect parameters.
struct MouseParams {
    transitions: Vec<Matrix>,
    mixture: Vec<Vec<f64>>,
}

fn mouse_params<R: Rng + ?Sized>(spec: &GenerativeSpec, rng: &mut R) -> Result<MouseParams> {
    let r = &spec.reference;
    let Some(re) = spec.random_effects else {
        return Ok(MouseParams { transitions: r.transitions.clone(), mixture: r.mixture.clone() });
    };
    let n = r.transitions.len() as f64;
    let mut base_t = [[0.0; N_SYLLABLES]; N_SYLLABLES];
    for m in &r.transitions {
        for (a, row) in m.iter().enumerate() {
            for (b, &p) in row.iter().enumerate() {
                base_t[a][b] += p / n;
            }
        }
    }
    let mut rand_t = [[0.0; N_SYLLABLES]; N_SYLLABLES];
    for (a, row) in rand_t.iter_mut().enumerate() {
        sample_dirichlet_into(rng, &base_t[a].map(|p| re.concentration * p), row)?;
    }
    let k = r.components.len();
    let mut base_w = vec![0.0; k];
    for w in &r.mixture {
        for j in 0..k {
            base_w[j] += w[j] / r.mixture.len() as f64;
        }
    }
    let mut rand_w = vec![0.0; k];
    sample_dirichlet_into(rng, &base_w.iter().map(|p| re.concentration * p).collect::<Vec<_>>(), &mut rand_w)?;
    let transitions = r
        .transitions
        .iter()
        .map(|m| {
            let mut out = *m;
            for a in 0..N_SYLLABLES {
                for b in 0..N_SYLLABLES {
                    out[a][b] = re.pi0 * m[a][b] + (1.0 - re.pi0) * rand_t[a][b];
                }
            }
            out
        })
        .collect();
    let mixture = r
        .mixture
        .iter()
        .map(|w| w.iter().zip(&rand_w).map(|(p, q)| re.pi0 * p + (1.0 - re.pi0) * q).collect())
        .collect();
    Ok(MouseParams { transitions, mixture })
}

/// `2 + NegBin(mean − 2, size)` via a Poisson–gamma mixture.
fn sample_length<R: Rng + ?Sized>(rng: &mut R, mean: f64, size: f64) -> Result<usize> {
    let excess = mean - 2.0;
    if excess <= 0.0 {
        return Ok(2);
    }
    let rate = sample_gamma(rng, size, size / excess)?;
    let extra: f64 = Poisson::new(rate).map_err(|e| Error::Domain(e.to_string()))?.sample(rng);
    Ok(2 + extra as usize)
}

/// Simulates a dataset. Each sequence draws from its own RNG substream of
/// `seed`, so output does not depend on generation order.
pub fn generate(spec: &GenerativeSpec, seed: u64) -> Result<SequenceDataset> {
    spec.validate()?;
    let r = &spec.reference;
    let d = &spec.design;
    let dims = r.dims();
    let mut sequences = Vec::with_capacity(d.n_mice * d.sequences_per_mouse);
    for mouse in 0..d.n_mice {
        let mut mouse_rng = RngStream::new(seed, 1 + mouse as u64);
        let params = mouse_params(spec, &mut mouse_rng)?;
        let genotype = if mouse < d.n_mutant { 0 } else { 1.min(dims[0] - 1) };
        for s in 0..d.sequences_per_mouse {
            let mut rng = RngStream::new(seed, ((1 + mouse as u64) << 32) | s as u64);
            let context = s % dims[1];
            let cell = mixed_radix_index(&dims, &[genotype, context]);
            let len = sample_length(&mut rng, d.mean_length, d.length_dispersion)?;
            let mut syllables = Vec::with_capacity(len);
            let mut isis = Vec::with_capacity(len - 1);
            let mut y = sample_multinomial_index(&mut rng, &r.first_syllable)?;
            syllables.push(SyllableCode::new(y)?);
            for _ in 1..len {
                let w = &params.mixture[cell * N_SYLLABLES + y];
                let comp = r.components[sample_multinomial_index(&mut rng, w)?];
                let x = sample_gamma(&mut rng, comp.shape, comp.rate)?;
                isis.push(x.exp_m1().max(f64::MIN_POSITIVE));
                y = sample_multinomial_index(&mut rng, &params.transitions[cell][y])?;
                syllables.push(SyllableCode::new(y)?);
            }
            sequences.push(Sequence { mouse, covariates: vec![genotype, context], syllables, isis });
        }
    }
    let labels = (1..=d.n_mice).map(|i| format!("m{i:02}")).collect();
    SequenceDataset::new(r.covariates.clone(), labels, sequences)
}

/// Builds recovery scenario `A`, `B` or `C` from reference parameters.
///
/// A: interval mixture weights identical in every cell, truth `(1, 1, 1)`.
/// B: weights vary with genotype and context only, truth `(2, 3, 1)`.
/// C: the reference weights unchanged, truth `(2, 3, 4)`.
pub fn scenario(label: &str, reference: &ReferenceParameters, design: SequenceDesign) -> Result<GenerativeSpec> {
    reference.validate()?;
    let mut r = reference.clone();
    let n_cells = r.transitions.len();
    let truth = match label.to_ascii_uppercase().as_str() {
        "A" => {
            let row = r.mixture[0].clone();
            r.mixture.iter_mut().for_each(|w| *w = row.clone());
            vec![1, 1, 1]
        }
        "B" => {
            for cell in 0..n_cells {
                let row = r.mixture[cell * N_SYLLABLES].clone();
                for y in 1..N_SYLLABLES {
                    r.mixture[cell * N_SYLLABLES + y] = row.clone();
                }
            }
            vec![2, 3, 1]
        }
        "C" => vec![2, 3, 4],
        _ => return Err(Error::UnknownScenario(label.to_string())),
    };
    Ok(GenerativeSpec {
        reference: r,
        design,
        random_effects: None,
        truth_k: Some(truth),
        scenario: Some(label.to_ascii_uppercase()),
    })
}

/// Sidecar recording everything needed to score a recovery run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub spec: GenerativeSpec,
    pub n_transitions: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(design_len: f64) -> GenerativeSpec {
        let design = SequenceDesign { n_mice: 4, n_mutant: 2, sequences_per_mouse: 6, mean_length: design_len, length_dispersion: 4.0 };
        scenario("C", &ReferenceParameters::bundled(), design).unwrap()
    }

    #[test]
    fn bundled_reference_is_valid() {
        let r = ReferenceParameters::bundled();
        r.validate().unwrap();
        assert_eq!(r.mixture.len(), 24);
    }

    #[test]
    fn scenarios_set_truth_and_structure() {
        let r = ReferenceParameters::bundled();
        let a = scenario("A", &r, SequenceDesign::desk()).unwrap();
        assert_eq!(a.truth_k, Some(vec![1, 1, 1]));
        assert!(a.reference.mixture.iter().all(|w| *w == a.reference.mixture[0]));
        let b = scenario("b", &r, SequenceDesign::desk()).unwrap();
        assert_eq!(b.truth_k, Some(vec![2, 3, 1]));
        for cell in 0..6 {
            let rows = &b.reference.mixture[cell * 4..cell * 4 + 4];
            assert!(rows.iter().all(|w| *w == rows[0]));
        }
        assert_ne!(b.reference.mixture[0], b.reference.mixture[4]);
        assert_eq!(scenario("C", &r, SequenceDesign::desk()).unwrap().truth_k, Some(vec![2, 3, 4]));
        assert!(matches!(scenario("D", &r, SequenceDesign::desk()), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let spec = small(12.0);
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&spec, 4).unwrap());
        a.validate().unwrap();
        assert!(a.sequences.iter().all(|s| s.syllables.len() >= 2));
    }

    #[test]
    fn identity_transitions_give_constant_sequences() {
        let mut spec = small(10.0);
        for m in spec.reference.transitions.iter_mut() {
            for (a, row) in m.iter_mut().enumerate() {
                *row = [0.0; 4];
                row[a] = 1.0;
            }
        }
        let ds = generate(&spec, 1).unwrap();
        for s in &ds.sequences {
            assert!(s.syllables.iter().all(|&y| y == s.syllables[0]));
        }
    }

    #[test]
    fn desk_scale_size() {
        let spec = scenario("C", &ReferenceParameters::bundled(), SequenceDesign::desk()).unwrap();
        let n = generate(&spec, 11).unwrap().n_transitions();
        assert!((6500..9500).contains(&n), "{n}");
    }

    #[test]
    fn random_effects_flag_changes_data() {
        let mut spec = small(12.0);
        let plain = generate(&spec, 5).unwrap();
        spec.random_effects = Some(RandomEffects { concentration: 20.0, pi0: 0.7 });
        let perturbed = generate(&spec, 5).unwrap();
        assert_ne!(plain, perturbed);
        perturbed.validate().unwrap();
    }
}
