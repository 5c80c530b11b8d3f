use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::digamma::digamma_unchecked;
use crate::exec::{self, Execution};

const JITTER_SCALE: f64 = 1e-10;

/// Adds uniform noise in `±1e-10·std(column)` to break ties. The noise stream
/// is a pure function of `(seed, key)`.
pub fn jitter_column(column: &[f64], seed: u64, key: u64) -> Vec<f64> {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let amp = JITTER_SCALE * var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, key));
    column
        .iter()
        .map(|&v| v + amp * rng.random_range(-1.0..1.0))
        .collect()
}

fn mix(seed: u64, key: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// KSG estimator 1: ψ(k) + ψ(N) − ⟨ψ(n_y + 1) + ψ(n_x + 1)⟩.
///
/// `eps_i` is the Chebyshev distance from point i to its k-th neighbour in
/// the joint (y, x) space; `n_y` and `n_x` count points strictly inside
/// `eps_i` in each marginal, excluding i itself.
pub(super) fn ksg1(y: &[f64], x: &[Vec<f64>], k: usize, exec: Execution) -> f64 {
    let n = y.len();
    let terms: Vec<f64> = exec::map_range(n, exec, |i| {
        let mut dy = Vec::with_capacity(n - 1);
        let mut dx = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            dy.push((y[i] - y[j]).abs());
            let mut m = 0.0f64;
            for col in x {
                let d = (col[i] - col[j]).abs();
                if d > m {
                    m = d;
                }
            }
            dx.push(m);
        }
        let mut joint: Vec<f64> = dy.iter().zip(&dx).map(|(a, b)| a.max(*b)).collect();
        let (_, kth, _) = joint.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let eps = *kth;
        let ny = dy.iter().filter(|&&d| d < eps).count();
        let nx = dx.iter().filter(|&&d| d < eps).count();
        digamma_unchecked(ny as f64 + 1.0) + digamma_unchecked(nx as f64 + 1.0)
    });
    // Sequential sum keeps the result independent of the execution policy.
    let mean = terms.iter().sum::<f64>() / n as f64;
    digamma_unchecked(k as f64) + digamma_unchecked(n as f64) - mean
}
