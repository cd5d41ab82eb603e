mod common;

use mrmm::data::{read_csv, write_csv, CovariateSpec};
use mrmm::dist::{sample_dirichlet, GammaParams};
use mrmm::isi::IsiOptions;
use mrmm::partition::{log_proposal_probability, set_partitions, Partition};
use mrmm::select::LogDensityTrace;
use mrmm::sim::{generate, scenario, ReferenceParameters, SequenceDesign};
use mrmm::special::{digamma, ln_gamma};
use mrmm::summary::level_tables;
use mrmm::trans::TransOptions;
use proptest::prelude::*;
use rand::Rng;

use common::{isi_toy, rng, trans_toy};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn canonical_labels_are_idempotent(raw in prop::collection::vec(0usize..6, 1..9)) {
        let p = Partition::from_labels(&raw);
        let distinct: std::collections::BTreeSet<_> = raw.iter().collect();
        prop_assert_eq!(p.k(), distinct.len());
        prop_assert_eq!(Partition::from_labels(p.labels()), p.clone());
        for a in 0..raw.len() {
            for b in 0..raw.len() {
                prop_assert_eq!(p.same_cluster(a, b), raw[a] == raw[b]);
            }
        }
        let mut first_seen = 0;
        for &l in p.labels() {
            prop_assert!(l <= first_seen);
            if l == first_seen {
                first_seen += 1;
            }
        }
    }

    #[test]
    fn dirichlet_draws_sum_to_one(conc in prop::collection::vec(1e-3f64..50.0, 2..12), seed in any::<u64>()) {
        let x = sample_dirichlet(&mut rng(seed), &conc).unwrap();
        prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ln_gamma_matches_reference(x in 1e-6f64..1e4) {
        let expected = statrs::function::gamma::ln_gamma(x);
        prop_assert!((ln_gamma(x) - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn digamma_recurrence(x in 1e-3f64..1e3) {
        prop_assert!((digamma(x + 1.0) - digamma(x) - 1.0 / x).abs() <= 1e-10 * (1.0 / x).max(1.0));
    }

    #[test]
    fn level_table_rows_sum_to_one(d1 in 1usize..4, d2 in 1usize..4, k in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let per_cell: Vec<Vec<f64>> = (0..d1 * d2).map(|_| sample_dirichlet(&mut r, &vec![1.0; k]).unwrap()).collect();
        for table in level_tables(&[d1, d2], &per_cell) {
            for row in table {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p_waic_is_nonnegative(rows in prop::collection::vec(prop::collection::vec(-20.0f64..5.0, 6), 2..40)) {
        let mut trace = LogDensityTrace::new(6);
        for r in &rows {
            trace.push(r.clone()).unwrap();
        }
        let (waic, p) = trace.waic(1).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert!(waic.is_finite());
        let (waic_acc, p_acc) = trace.accumulator().waic(1).unwrap();
        prop_assert!((waic - waic_acc).abs() <= 1e-8 * waic.abs().max(1.0));
        prop_assert!((p - p_acc).abs() <= 1e-8 * p.max(1.0));
    }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn proposal_probabilities_sum_to_one(d in 1usize..6) {
        let all = set_partitions(d);
        for from in &all {
            let total: f64 = all.iter().map(|to| log_proposal_probability(from, to).exp()).sum();
            let has_move = d > 1;
            prop_assert!((total - if has_move { 1.0 } else { 0.0 }).abs() < 1e-12, "{:?}: {}", from, total);
        }
    }

    #[test]
    fn mixture_density_is_permutation_invariant(seed in any::<u64>(), k in 2usize..5) {
        let (model, s) = isi_toy(seed, &[2, 3], 3, 60, k, IsiOptions::default());
        let mut r = rng(seed ^ 1);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let mut t = s.clone();
        let apply = |v: &Vec<f64>| perm.iter().map(|&p| v[p]).collect::<Vec<f64>>();
        t.components = perm.iter().map(|&p| s.components[p]).collect();
        t.lambda0 = apply(&s.lambda0);
        t.lambda_fixed = s.lambda_fixed.iter().map(apply).collect();
        t.lambda_rand = s.lambda_rand.iter().map(apply).collect();
        t.pi0 = s.pi0.iter().map(apply).collect();
        let before = model.log_likelihood(&s);
        let after = model.log_likelihood(&t);
        prop_assert!((before - after).abs() <= 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000, n_mice in 2usize..5, spm in 1usize..4) {
        let design = SequenceDesign { n_mice, n_mutant: 1, sequences_per_mouse: spm, mean_length: 6.0, length_dispersion: 3.0 };
        let spec = scenario("C", &ReferenceParameters::bundled(), design).unwrap();
        let ds = generate(&spec, seed).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CovariateSpec::default_schema()).unwrap();
        prop_assert_eq!(back.sequences.len(), ds.sequences.len());
        for (a, b) in back.sequences.iter().zip(&ds.sequences) {
            prop_assert_eq!(&a.syllables, &b.syllables);
            prop_assert_eq!(&a.covariates, &b.covariates);
            prop_assert_eq!(a.isis.len(), b.isis.len());
            for (x, y) in a.isis.iter().zip(&b.isis) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs());
            }
        }
    }

    #[test]
    fn trans_sweeps_keep_invariants(seed in any::<u64>(), d1 in 1usize..4, d2 in 1usize..4, n_mice in 1usize..4) {
        let (model, mut s) = trans_toy(seed, &[d1, d2], n_mice, 72, TransOptions::default());
        let mut r = rng(seed ^ 7);
        for _ in 0..5 {
            model.sweep(&mut s, &mut r).unwrap();
            prop_assert!(s.check_invariants(&model.data).is_ok());
        }
    }

    #[test]
    fn isi_sweeps_keep_invariants(seed in any::<u64>(), d in 1usize..4, k in 1usize..5, exact in any::<bool>()) {
        let options = if exact { IsiOptions::exact() } else { IsiOptions::default() };
        let (model, mut s) = isi_toy(seed, &[d, 2], 2, 80, k, options);
        let mut r = rng(seed ^ 9);
        for _ in 0..5 {
            model.sweep(&mut s, &mut r).unwrap();
            prop_assert!(s.check_invariants(&model.data).is_ok());
            prop_assert!(s.components.iter().all(|c: &GammaParams| c.shape > 0.0 && c.rate > 0.0));
        }
    }
}
