//! One-dimensional k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Cluster centers in ascending order.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centers.len()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

fn nearest(centers: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, &m) in centers.iter().enumerate() {
        let d = (x - m).abs();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Lloyd iterations from k-means++ seeds, at most `max_iter` of them.
/// Ties go to the lowest-index center, so duplicate seeds leave clusters empty.
pub fn kmeans_1d<R: Rng + ?Sized>(x: &[f64], k: usize, max_iter: usize, rng: &mut R) -> Result<KMeans> {
    if x.is_empty() || k == 0 {
        return Err(Error::InvalidDataset("k-means needs at least one point and one cluster".into()));
    }
    let mut centers = Vec::with_capacity(k);
    centers.push(x[rng.random_range(0..x.len())]);
    let mut d2: Vec<f64> = x.iter().map(|&v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = x.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..x.len())
        };
        let c = x[pick];
        centers.push(c);
        for (d, &v) in d2.iter_mut().zip(x) {
            *d = d.min((v - c).powi(2));
        }
    }

    let mut assignments: Vec<usize> = x.iter().map(|&v| nearest(&centers, v)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &v) in assignments.iter().zip(x) {
            sums[a] += v;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        let mut changed = false;
        for (a, &v) in assignments.iter_mut().zip(x) {
            let n = nearest(&centers, v);
            if n != *a {
                *a = n;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    Ok(KMeans {
        centers: order.iter().map(|&c| centers[c]).collect(),
        assignments: assignments.iter().map(|&a| rank[a]).collect(),
        iterations,
    })
}
