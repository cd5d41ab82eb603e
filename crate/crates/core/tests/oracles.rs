mod common;

use approx::assert_relative_eq;
use mrmm::data::{transition_counts, N_SYLLABLES};
use mrmm::dist::{log_gamma_density, GammaParams};
use mrmm::isi::{miller_approximation, IsiOptions};
use mrmm::partition::{split_merge_step, AcceptanceRule, MoveKind, Partition};
use mrmm::select::{recommend_k, SelectionScore};
use mrmm::sim::{generate, GenerativeSpec, ReferenceParameters, SequenceDesign};
use mrmm::trans::{TransData, TransModel, TransOptions, TransRecord};
use rand::Rng;

use common::*;

fn identical_level_toy(d: usize) -> (TransModel, mrmm::trans::TransModelState) {
    let profile = [0u8, 0, 1, 0, 2, 3, 0, 1];
    let mut records = Vec::new();
    for level in 0..d {
        for (i, &cur) in profile.iter().enumerate() {
            records.push(TransRecord { mouse: 0, cell: level as u32, prev: (i % 2) as u8, cur, continues: false });
        }
    }
    let data = TransData { n_mice: 1, dims: vec![d], records };
    let model = TransModel::new(data, trans_hyper(1), TransOptions::default()).unwrap();
    let mut s = model.sample_prior(&mut rng(1)).unwrap();
    s.v = vec![false; model.data.records.len()];
    s.alpha_fixed = 1.2;
    s.mu = vec![vec![1.0 / d as f64; d]];
    (model, s)
}

fn pooled_and_separate(model: &TransModel, s: &mrmm::trans::TransModelState) -> (f64, f64) {
    let marginal = |labels: &[usize]| -> f64 {
        let k = labels.iter().max().unwrap() + 1;
        let mut counts = vec![[[0.0; N_SYLLABLES]; N_SYLLABLES]; k];
        for r in &model.data.records {
            counts[labels[r.cell as usize]][r.prev as usize][r.cur as usize] += 1.0;
        }
        let mut total = 0.0;
        for c in &counts {
            for prev in 0..N_SYLLABLES {
                let conc: Vec<f64> = s.lambda0[prev].iter().map(|l| s.alpha_fixed * l).collect();
                total += dm_log_marginal(&conc, &c[prev]);
            }
        }
        total
    };
    (marginal(&[0, 0]), marginal(&[0, 1]))
}

#[test]
fn coincident_label_probability_matches_enumeration() {
    let (model, mut s) = identical_level_toy(2);
    let (pooled, separate) = pooled_and_separate(&model, &s);
    let exact = 1.0 / (1.0 + (separate - pooled).exp());
    let mut r = rng(2);
    let n = 200_000;
    let mut hits = Vec::with_capacity(n);
    for _ in 0..n {
        model.step_partition_labels(&mut s, &mut r).unwrap();
        hits.push((s.partitions[0].k() == 1) as u8 as f64);
    }
    let freq = hits.iter().sum::<f64>() / n as f64;
    let se = batch_se(&hits, 100);
    assert!((freq - exact).abs() < 4.0 * se, "freq {freq} exact {exact} se {se}");
}

#[test]
fn merge_is_accepted_at_least_as_often_as_split_for_identical_levels() {
    // ten records, five per level, with identical counts
    let k = 3;
    let (mut model, mut s) = isi_toy(3, &[2], 1, 10, k, IsiOptions::default());
    for (i, rec) in model.data.records.iter_mut().enumerate() {
        rec.cell = (i / 5) as u32;
    }
    s.z = (0..10).map(|i| [0, 0, 1, 2, 0][i % 5]).collect();
    s.v = vec![false; 10];
    let pooled = isi_partition_log_marginal(&model, &s, &Partition::single_cluster(2));
    let separate = isi_partition_log_marginal(&model, &s, &Partition::singletons(2));
    assert!(pooled >= separate, "pooling identical counts lowered the marginal: {pooled} < {separate}");
    let p_merge = (pooled - separate).exp().min(1.0);
    let p_split = (separate - pooled).exp().min(1.0);
    assert!(p_merge >= p_split);

    let mut r = rng(4);
    let n = 100_000;
    let (mut split, mut merge) = (0.0, 0.0);
    for _ in 0..n {
        let mut p = Partition::single_cluster(2);
        let o = split_merge_step(&mut r, &mut p, AcceptanceRule::LikelihoodRatio, |q| isi_partition_log_marginal(&model, &s, q)).unwrap();
        assert_eq!(o.kind, Some(MoveKind::Split));
        split += o.accepted as u8 as f64;
        let mut p = Partition::singletons(2);
        let o = split_merge_step(&mut r, &mut p, AcceptanceRule::LikelihoodRatio, |q| isi_partition_log_marginal(&model, &s, q)).unwrap();
        assert_eq!(o.kind, Some(MoveKind::Merge));
        merge += o.accepted as u8 as f64;
    }
    let (split, merge) = (split / n as f64, merge / n as f64);
    assert!((split - p_split).abs() < 0.005 && (merge - p_merge).abs() < 0.005, "split {split}/{p_split} merge {merge}/{p_merge}");
    assert!(merge >= split);
}

#[test]
fn transition_indicator_matches_hand_computation() {
    let (model, mut s) = trans_toy(5, &[2], 2, 6, TransOptions::default());
    let first = model.data.records[0];
    let (m, prev, cur) = (first.mouse as usize, first.prev as usize, first.cur as usize);
    s.pi0[m][prev] = 0.3;
    let combo = s.cell_to_combo(&model.data.dims)[first.cell as usize];
    s.lambda_fixed[combo][prev] = [0.1, 0.2, 0.3, 0.4];
    s.lambda_rand[m][prev] = [0.4, 0.3, 0.2, 0.1];
    let w0 = 0.3 * [0.1, 0.2, 0.3, 0.4][cur];
    let w1 = 0.7 * [0.4, 0.3, 0.2, 0.1][cur];
    let expected = w1 / (w0 + w1);
    let mut r = rng(6);
    let n = 100_000;
    let mut ones = 0.0;
    for _ in 0..n {
        model.step_v(&mut s, &mut r).unwrap();
        ones += s.v[0] as u8 as f64;
    }
    let freq = ones / n as f64;
    let se = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((freq - expected).abs() < 4.0 * se, "{freq} vs {expected}");
}

#[test]
fn pi_posterior_mean_with_ten_fixed_records() {
    let (mut model, mut s) = trans_toy(7, &[2], 1, 10, TransOptions::default());
    model.hyper.beta_pi = (1.0, 1.0);
    for r in model.data.records.iter_mut() {
        r.prev = 2;
        r.continues = false;
    }
    s.v = vec![false; 10];
    let mut r = rng(8);
    let n = 100_000;
    let mut sum = 0.0;
    let mut untouched = 0.0;
    for _ in 0..n {
        model.step_pi(&mut s, &mut r).unwrap();
        sum += s.pi0[0][2];
        untouched += s.pi0[0][0];
    }
    // Beta(11, 1) and, for a row without records, the Beta(1, 1) prior
    assert!((sum / n as f64 - 11.0 / 12.0).abs() < 0.002);
    assert!((untouched / n as f64 - 0.5).abs() < 0.005);
}

#[test]
fn equal_weights_at_the_density_crossing_split_evenly() {
    let (mut model, mut s) = isi_toy(9, &[1], 1, 1, 2, IsiOptions::default());
    s.components = vec![GammaParams { shape: 2.0, rate: 4.0 }, GammaParams { shape: 6.0, rate: 4.0 }];
    let diff = |x: f64| log_gamma_density(x, s.components[0]).unwrap() - log_gamma_density(x, s.components[1]).unwrap();
    let (mut lo, mut hi) = (0.5, 1.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if diff(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    model.data.records[0] = mrmm::isi::IsiRecord::new(0, 0, x);
    s.lambda_fixed = vec![vec![0.5, 0.5]];
    s.lambda_rand = vec![vec![0.5, 0.5]];
    let mut r = rng(10);
    let n = 100_000;
    let mut first = 0.0;
    for _ in 0..n {
        model.step_z(&mut s, &mut r).unwrap();
        first += (s.z[0] == 0) as u8 as f64;
    }
    assert!((first / n as f64 - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
}

#[test]
fn miller_approximation_for_500_points() {
    let mut r = rng(11);
    let xs: Vec<f64> = (0..500).map(|_| mrmm::dist::sample_gamma(&mut r, 3.0, 2.0).unwrap()).collect();
    let (n, s, lr) = (500.0, xs.iter().sum::<f64>(), xs.iter().map(|x| x.ln()).sum::<f64>());
    let mu = 1.5;
    let a = miller_approximation(n, s, lr, mu, (1.0, 1.0), 1e-10, 50);
    assert!(a.converged && a.iterations <= 10);
    let log_p = |x: f64| -x + n * (x * (x / mu).ln() - ln_gamma(x)) + (x - 1.0) * lr - x / mu * s;
    let peak = log_p(a.shape / a.rate);
    let f = |x: f64| (log_p(x) - peak).exp();
    let (lo, hi) = (0.5, 8.0);
    let z = simpson(f, lo, hi, 40_000);
    let mean = simpson(|x| x * f(x), lo, hi, 40_000) / z;
    let var = simpson(|x| x * x * f(x), lo, hi, 40_000) / z - mean * mean;
    assert_relative_eq!(a.shape / a.rate, mean, max_relative = 0.02);
    assert_relative_eq!(a.shape / (a.rate * a.rate), var, max_relative = 0.02);
}

#[test]
fn gamma_density_integrates_to_one() {
    let p = GammaParams { shape: 2.5, rate: 4.0 };
    let integral = simpson(|x| if x == 0.0 { 0.0 } else { log_gamma_density(x, p).unwrap().exp() }, 0.0, 20.0, 200_000);
    assert!((integral - 1.0).abs() < 1e-6, "{integral}");
}

fn uniform_reference(components: Vec<GammaParams>) -> ReferenceParameters {
    let mut r = ReferenceParameters::bundled();
    let base = r.transitions[0];
    r.transitions.iter_mut().for_each(|m| *m = base);
    let k = components.len();
    r.components = components;
    r.mixture.iter_mut().for_each(|w| *w = vec![1.0 / k as f64; k]);
    r
}

#[test]
fn single_component_simulation_recovers_gamma_mean() {
    let reference = uniform_reference(vec![GammaParams { shape: 3.0, rate: 2.0 }]);
    let spec = GenerativeSpec { reference, design: SequenceDesign::default(), random_effects: None, truth_k: None, scenario: None };
    let ds = generate(&spec, 12).unwrap();
    let records = mrmm::data::flatten(&ds);
    assert!(records.len() > 50_000);
    let mean = records.iter().map(|r| r.log_isi).sum::<f64>() / records.len() as f64;
    assert_relative_eq!(mean, 1.5, max_relative = 0.02);
}

#[test]
fn simulated_transition_frequencies_match_the_generating_matrix() {
    let reference = uniform_reference(ReferenceParameters::bundled().components);
    let target = reference.transitions[0];
    let design = SequenceDesign { sequences_per_mouse: 50, ..SequenceDesign::default() };
    let spec = GenerativeSpec { reference, design, random_effects: None, truth_k: None, scenario: None };
    let ds = generate(&spec, 13).unwrap();
    assert!(ds.n_transitions() >= 100_000);
    let counts = transition_counts(&ds, &[]).unwrap();
    let cell = &counts.cells[0];
    for prev in 0..N_SYLLABLES {
        let total: u64 = cell[prev].iter().sum();
        for cur in 0..N_SYLLABLES {
            let freq = cell[prev][cur] as f64 / total as f64;
            assert!((freq - target[prev][cur]).abs() < 0.01, "({prev}, {cur}): {freq} vs {}", target[prev][cur]);
        }
    }
}

#[test]
fn single_k_grid_recommends_that_k() {
    let s = SelectionScore { k: 1, lpml: -120.0, waic: 240.0, p_waic: 1.0, n_draws_used: 10 };
    assert_eq!(recommend_k(&[s], 0.001), Some(1));
}

#[test]
fn dirichlet_multinomial_marginal_matches_enumeration() {
    // P(counts) for a Dirichlet-multinomial sequence equals the product of
    // Pólya-urn predictive probabilities
    let mut r = rng(14);
    for _ in 0..20 {
        let conc: Vec<f64> = (0..4).map(|_| 0.1 + 3.0 * r.random::<f64>()).collect();
        let seq: Vec<usize> = (0..12).map(|_| r.random_range(0..4)).collect();
        let mut counts = vec![0.0; 4];
        let mut log_p = 0.0;
        let total: f64 = conc.iter().sum();
        for (t, &y) in seq.iter().enumerate() {
            log_p += ((conc[y] + counts[y]) / (total + t as f64)).ln();
            counts[y] += 1.0;
        }
        assert_relative_eq!(dm_log_marginal(&conc, &counts), log_p, max_relative = 1e-10);
    }
}
