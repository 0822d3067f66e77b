//! Reference implementations the acceptance and integration tests compare
//! against. They share no code with the library beyond `Tensor`.
#![allow(dead_code)]

use diveq::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive scan: index of the first minimum.
pub fn brute_nearest(z: &[f64], codewords: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for j in 1..codewords.len() {
        if sq(z, &codewords[j]) < sq(z, &codewords[best]) {
            best = j;
        }
    }
    best
}

/// Mean squared distance to the nearest centroid.
pub fn hard_distortion(data: &Tensor, centroids: &[Vec<f64>]) -> f64 {
    data.iter_rows()
        .map(|r| sq(r, &centroids[brute_nearest(r, centroids)]))
        .sum::<f64>()
        / data.rows() as f64
}

/// Lloyd's algorithm from `k` random data rows, iterated until the
/// assignment stops changing.
pub fn lloyd(data: &Tensor, k: usize, seed: u64) -> (Vec<Vec<f64>>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = sample(&mut rng, data.rows(), k)
        .into_iter()
        .map(|i| data.row(i).to_vec())
        .collect();
    let d = data.cols();
    let mut assignment = vec![usize::MAX; data.rows()];
    for _ in 0..10_000 {
        let next: Vec<usize> = data.iter_rows().map(|r| brute_nearest(r, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in data.iter_rows().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let dist = hard_distortion(data, &centroids);
    (centroids, dist)
}

/// Best of `restarts` Lloyd runs.
pub fn lloyd_best(data: &Tensor, k: usize, restarts: u64) -> f64 {
    (0..restarts).map(|s| lloyd(data, k, s).1).fold(f64::INFINITY, f64::min)
}
