//! Partitions of covariate levels and the split/merge move.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A clustering of `d` covariate levels. Labels are `0..k`, numbered in
/// order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Every level in its own cluster.
    pub fn singletons(d: usize) -> Self {
        Partition { labels: (0..d).collect(), k: d }
    }

    pub fn single_cluster(d: usize) -> Self {
        Partition { labels: vec![0; d], k: if d == 0 { 0 } else { 1 } }
    }

    /// Builds a partition from arbitrary labels, relabeling canonically.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut p = Partition { labels: labels.to_vec(), k: 0 };
        p.canonicalize();
        p
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, level: usize) -> usize {
        self.labels[level]
    }

    pub fn d(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Levels belonging to cluster `c`, in increasing order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.d()).filter(|&l| self.labels[l] == c).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Sets one label without relabeling. Labels may exceed `k` until
    /// [`canonicalize`](Self::canonicalize) is called.
    pub(crate) fn set_raw(&mut self, level: usize, label: usize) {
        self.labels[level] = label;
    }

    /// Relabels in order of first appearance. Returns `map` with
    /// `map[old] = Some(new)` for every old label that is still used.
    pub fn canonicalize(&mut self) -> Vec<Option<usize>> {
        let max = self.labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut map = vec![None; max];
        let mut next = 0;
        for l in self.labels.iter_mut() {
            let new = *map[*l].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            *l = new;
        }
        self.k = next;
        map
    }

    pub fn same_cluster(&self, a: usize, b: usize) -> bool {
        self.labels[a] == self.labels[b]
    }

    /// Clusters with at least two levels.
    pub fn splittable(&self) -> Vec<usize> {
        self.sizes().iter().enumerate().filter(|(_, &s)| s >= 2).map(|(c, _)| c).collect()
    }
}

/// Mixed-radix cluster-combination index of every level cell, where cells
/// are mixed radix over `dims` and combinations over the cluster counts.
pub fn combo_map(partitions: &[Partition], dims: &[usize]) -> Vec<usize> {
    let kd: Vec<usize> = partitions.iter().map(Partition::k).collect();
    let n: usize = dims.iter().product();
    let mut clusters = vec![0; dims.len()];
    (0..n)
        .map(|cell| {
            let levels = crate::data::mixed_radix_levels(dims, cell);
            for (j, (&l, p)) in levels.iter().zip(partitions).enumerate() {
                clusters[j] = p.label(l);
            }
            crate::data::mixed_radix_index(&kd, &clusters)
        })
        .collect()
}

/// All set partitions of `d` elements (restricted growth strings), in
/// lexicographic order of their canonical label vectors.
pub fn set_partitions(d: usize) -> Vec<Partition> {
    let mut out = Vec::new();
    if d == 0 {
        out.push(Partition::singletons(0));
        return out;
    }
    let mut labels = vec![0usize; d];
    loop {
        out.push(Partition::from_labels(&labels));
        // advance the restricted growth string
        let mut i = d - 1;
        loop {
            if i == 0 {
                return out;
            }
            let max_prefix = labels[..i].iter().copied().max().unwrap_or(0);
            if labels[i] <= max_prefix {
                labels[i] += 1;
                for l in labels[i + 1..].iter_mut() {
                    *l = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// How a split/merge proposal is accepted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// Accept when `log L(proposed) − log L(current) > log u`.
    #[default]
    LikelihoodRatio,
    /// Full Metropolis–Hastings with the proposal ratio, targeting a
    /// uniform prior over set partitions.
    MetropolisHastings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveKind {
    Split,
    Merge,
}

/// Outcome of one split/merge attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct MoveOutcome {
    pub kind: Option<MoveKind>,
    pub accepted: bool,
}

fn split_probability(k: usize, d: usize) -> f64 {
    if d <= 1 {
        0.0
    } else if k == 1 {
        1.0
    } else if k >= d {
        0.0
    } else {
        0.5
    }
}

fn merge_probability(k: usize, d: usize) -> f64 {
    if d <= 1 || k <= 1 {
        0.0
    } else if k >= d {
        1.0
    } else {
        0.5
    }
}

/// True when every cluster of `fine` lies inside a cluster of `coarse`.
fn refines(fine: &Partition, coarse: &Partition) -> bool {
    let d = fine.d();
    (0..d).all(|a| (0..a).all(|b| !fine.same_cluster(a, b) || coarse.same_cluster(a, b)))
}

/// Log proposal probability of reaching `to` from `from` in one move.
pub fn log_proposal_probability(from: &Partition, to: &Partition) -> f64 {
    let d = from.d();
    let (k, k2) = (from.k(), to.k());
    if k2 == k + 1 {
        if !refines(to, from) {
            return f64::NEG_INFINITY;
        }
        // the split cluster is the one whose members are separated in `to`
        let Some(c) = (0..k).find(|&c| {
            let mem = from.members(c);
            mem.iter().any(|&l| !to.same_cluster(l, mem[0]))
        }) else {
            return f64::NEG_INFINITY;
        };
        let size = from.members(c).len();
        let n_split = from.splittable().len() as f64;
        let n_bip = ((1u64 << (size - 1)) - 1) as f64;
        split_probability(k, d).ln() - n_split.ln() - n_bip.ln()
    } else if k2 + 1 == k && refines(from, to) {
        let pairs = (k * (k - 1) / 2) as f64;
        merge_probability(k, d).ln() - pairs.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Proposes a split or merge of `current`.
pub fn propose<R: Rng + ?Sized>(rng: &mut R, current: &Partition) -> Option<(MoveKind, Partition)> {
    let d = current.d();
    let k = current.k();
    let ps = split_probability(k, d);
    let pm = merge_probability(k, d);
    if ps == 0.0 && pm == 0.0 {
        return None;
    }
    let split = if pm == 0.0 {
        true
    } else if ps == 0.0 {
        false
    } else {
        rng.random::<f64>() < 0.5
    };
    let mut labels = current.labels().to_vec();
    if split {
        let candidates = current.splittable();
        let c = candidates[rng.random_range(0..candidates.len())];
        let members = current.members(c);
        let m = members.len();
        // nonempty bipartitions with the first member fixed on the original side:
        // mask over the other m−1 members, excluding the all-zero mask
        let n_bip = (1u64 << (m - 1)) - 1;
        let mask = rng.random_range(1..=n_bip);
        for (bit, &level) in members[1..].iter().enumerate() {
            if mask >> bit & 1 == 1 {
                labels[level] = k;
            }
        }
        Some((MoveKind::Split, Partition::from_labels(&labels)))
    } else {
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        for l in labels.iter_mut() {
            if *l == b {
                *l = a;
            }
        }
        Some((MoveKind::Merge, Partition::from_labels(&labels)))
    }
}

/// One split/merge attempt on `current` using a collapsed log marginal.
pub fn split_merge_step<R, F>(
    rng: &mut R,
    current: &mut Partition,
    rule: AcceptanceRule,
    mut log_marginal: F,
) -> Result<MoveOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&Partition) -> f64,
{
    let Some((kind, proposed)) = propose(rng, current) else {
        return Ok(MoveOutcome { kind: None, accepted: false });
    };
    let cur_ll = log_marginal(current);
    let new_ll = log_marginal(&proposed);
    if cur_ll.is_nan() || new_ll.is_nan() {
        return Err(Error::Domain("collapsed marginal likelihood is NaN".into()));
    }
    let mut log_ratio = new_ll - cur_ll;
    if rule == AcceptanceRule::MetropolisHastings {
        log_ratio += log_proposal_probability(&proposed, current) - log_proposal_probability(current, &proposed);
    }
    let log_u = (1.0 - rng.random::<f64>()).ln();
    let accepted = log_ratio > log_u;
    if accepted {
        *current = proposed;
    }
    Ok(MoveOutcome { kind: Some(kind), accepted })
}

/// Probability that all levels share one cluster when labels are drawn
/// i.i.d. from `μ ~ Dir(α, …, α)` over `d` labels, by enumerating every
/// label assignment.
pub fn prior_single_cluster_probability(d: usize, alpha: f64) -> f64 {
    use crate::special::ln_gamma;
    if d <= 1 {
        return 1.0;
    }
    let total = (d as u64).pow(d as u32);
    let base = ln_gamma(d as f64 * alpha) - ln_gamma(d as f64 * alpha + d as f64);
    let ln_g_alpha = ln_gamma(alpha);
    let mut prob = 0.0;
    let mut counts = vec![0usize; d];
    for code in 0..total {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut x = code;
        for _ in 0..d {
            counts[(x % d as u64) as usize] += 1;
            x /= d as u64;
        }
        if counts.iter().filter(|&&c| c > 0).count() != 1 {
            continue;
        }
        let lp: f64 = base + counts.iter().map(|&c| ln_gamma(alpha + c as f64) - ln_g_alpha).sum::<f64>();
        prob += lp.exp();
    }
    prob
}

/// Result of calibrating a partition concentration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    pub single_cluster_probability: f64,
    /// False when the target is unattainable and the nearest attainable value was used.
    pub exact: bool,
}

/// Finds `α` with prior probability of a single cluster equal to `target`.
///
/// The probability is decreasing in `α`; its infimum is `d^(1−d)`. For `d = 2`
/// the infimum is exactly 1/2, so a target of 1/2 is unattainable; the value
/// with probability `target + slack` is returned instead and flagged inexact.
pub fn calibrate_partition_concentration(d: usize, target: f64) -> Result<Calibration> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidConfig(format!("calibration target {target} must lie in (0, 1)")));
    }
    if d > 6 {
        return Err(Error::InvalidConfig(format!("exact calibration enumerates d^d assignments; d = {d} is too large")));
    }
    if d <= 1 {
        return Ok(Calibration { alpha: 1.0, single_cluster_probability: 1.0, exact: true });
    }
    const SLACK: f64 = 1e-3;
    let floor = (d as f64).powi(1 - d as i32);
    let (goal, exact) = if target > floor { (target, true) } else { (floor + SLACK, false) };
    let f = |a: f64| prior_single_cluster_probability(d, a) - goal;
    let (mut lo, mut hi) = (1e-8_f64, 1.0_f64);
    while f(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidConfig("calibration failed to bracket the root".into()));
        }
    }
    // bisection on log α
    for _ in 0..200 {
        let mid = (lo.ln() * 0.5 + hi.ln() * 0.5).exp();
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-10 {
            break;
        }
    }
    let alpha = (lo * hi).sqrt();
    Ok(Calibration { alpha, single_cluster_probability: prior_single_cluster_probability(d, alpha), exact })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::RngStream;
    use std::collections::HashMap;

    #[test]
    fn canonicalize_orders_by_first_appearance() {
        let mut p = Partition::from_labels(&[2, 2, 0, 5]);
        assert_eq!(p.labels(), &[0, 0, 1, 2]);
        assert_eq!(p.k(), 3);
        p.set_raw(3, 0);
        let map = p.canonicalize();
        assert_eq!(p.k(), 2);
        assert_eq!(map, vec![Some(0), Some(1)]);
    }

    #[test]
    fn bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52];
        for (d, &b) in bell.iter().enumerate() {
            let parts = set_partitions(d);
            assert_eq!(parts.len(), b, "d = {d}");
            let mut uniq = parts.clone();
            uniq.dedup();
            assert_eq!(uniq.len(), b);
        }
    }

    #[test]
    fn boundary_moves_are_forced() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..200 {
            let (k1, _) = propose(&mut rng, &Partition::single_cluster(3)).unwrap();
            assert_eq!(k1, MoveKind::Split);
            let (k2, _) = propose(&mut rng, &Partition::singletons(3)).unwrap();
            assert_eq!(k2, MoveKind::Merge);
        }
        assert!(propose(&mut rng, &Partition::singletons(1)).is_none());
    }

    #[test]
    fn proposal_probabilities_normalize() {
        for d in 2..=5 {
            let all = set_partitions(d);
            for from in &all {
                let total: f64 = all.iter().map(|to| log_proposal_probability(from, to).exp()).sum();
                assert!((total - 1.0).abs() < 1e-12, "d = {d}, from {:?}: {total}", from.labels());
            }
        }
    }

    #[test]
    fn empirical_proposals_match_probabilities() {
        let mut rng = RngStream::new(10, 0);
        let from = Partition::from_labels(&[0, 0, 0, 1]);
        let n = 100_000;
        let mut freq: HashMap<Partition, usize> = HashMap::new();
        for _ in 0..n {
            let (_, to) = propose(&mut rng, &from).unwrap();
            *freq.entry(to).or_default() += 1;
        }
        for (to, c) in freq {
            let p = log_proposal_probability(&from, &to).exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn single_cluster_probability_closed_form() {
        for &a in &[0.1, 0.5, 1.0, 3.0] {
            assert!((prior_single_cluster_probability(2, a) - (a + 1.0) / (2.0 * a + 1.0)).abs() < 1e-12);
            let p3 = 3.0 * a * (a + 1.0) * (a + 2.0) / (3.0 * a * (3.0 * a + 1.0) * (3.0 * a + 2.0));
            assert!((prior_single_cluster_probability(3, a) - p3).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration() {
        let c3 = calibrate_partition_concentration(3, 0.5).unwrap();
        assert!(c3.exact);
        assert!((c3.single_cluster_probability - 0.5).abs() < 1e-8);
        assert!((c3.alpha - 0.3616).abs() < 1e-3);
        let c2 = calibrate_partition_concentration(2, 0.5).unwrap();
        assert!(!c2.exact);
        assert!((c2.single_cluster_probability - 0.501).abs() < 1e-8);
        assert_eq!(calibrate_partition_concentration(1, 0.5).unwrap().alpha, 1.0);
    }
}
