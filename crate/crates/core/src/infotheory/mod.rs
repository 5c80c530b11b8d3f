//! Mutual information between a real target and a set of real feature columns.
//!
//! The estimator is Kraskov–Stögbauer–Grassberger variant 1 under the
//! Chebyshev norm, with exact brute-force neighbour search. Every column,
//! the target included, is standardized to unit variance before jittering so
//! that no coordinate dominates the max-norm neighbourhoods. All values are
//! in nats. Conditional MI is built from two joint estimates with the chain
//! rule `I(Y; F, g) − I(Y; F)`.

mod digamma;
mod ksg;

use serde::{Deserialize, Serialize};

pub use digamma::digamma;
pub use ksg::jitter_column;

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Neighbour count used throughout the search unless configured otherwise.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Estimate clamped at zero.
    pub value_nats: f64,
    /// Estimate before clamping (may be slightly negative).
    pub raw_nats: f64,
    pub k_neighbors: usize,
    pub n_samples: usize,
    pub jitter_seed: u64,
}

impl MiEstimate {
    fn new(raw: f64, k: usize, n: usize, seed: u64) -> Self {
        MiEstimate {
            value_nats: raw.max(0.0),
            raw_nats: raw,
            k_neighbors: k,
            n_samples: n,
            jitter_seed: seed,
        }
    }
}

/// `I(y; f)` where `f` holds `d ≥ 1` columns.
pub fn mi(y: &[f64], f: &[&[f64]], k: usize, seed: u64) -> Result<MiEstimate> {
    mi_with(y, f, k, seed, Execution::default())
}

/// As [`mi`], with an explicit execution policy. Both policies return
/// bit-identical results.
pub fn mi_with(
    y: &[f64],
    f: &[&[f64]],
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<MiEstimate> {
    validate(y, f, k)?;
    let n = y.len();
    let y_j = jitter_column(&standardize(y), seed, 0);
    let cols: Vec<Vec<f64>> = f
        .iter()
        .enumerate()
        .map(|(i, c)| jitter_column(&standardize(c), seed, i as u64 + 1))
        .collect();
    let raw = ksg::ksg1(&y_j, &cols, k, exec);
    let est = MiEstimate::new(raw, k, n, seed);
    log::debug!(
        "mi k={} n={} d={} raw={:.6} clamped={:.6}",
        k,
        n,
        f.len(),
        est.raw_nats,
        est.value_nats
    );
    Ok(est)
}

/// `I(y; f_new | f_set)` via `I(y; [f_set | f_new]) − I(y; f_set)`, clamped at
/// zero. An empty conditioning set reduces to `mi(y, [f_new])`.
pub fn cmi(
    y: &[f64],
    f_new: &[f64],
    f_set: &[&[f64]],
    k: usize,
    seed: u64,
) -> Result<MiEstimate> {
    cmi_with(y, f_new, f_set, k, seed, Execution::default())
}

pub fn cmi_with(
    y: &[f64],
    f_new: &[f64],
    f_set: &[&[f64]],
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<MiEstimate> {
    if f_set.is_empty() {
        return mi_with(y, &[f_new], k, seed, exec);
    }
    let mut joint_cols: Vec<&[f64]> = f_set.to_vec();
    joint_cols.push(f_new);
    let joint = mi_with(y, &joint_cols, k, seed, exec)?;
    let base = mi_with(y, f_set, k, seed, exec)?;
    let raw = joint.value_nats - base.value_nats;
    Ok(MiEstimate::new(raw, k, y.len(), seed))
}

/// Centres and scales to unit population variance. Constant columns are
/// only centred.
fn standardize(column: &[f64]) -> Vec<f64> {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let sd = (column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { sd } else { 1.0 };
    column.iter().map(|v| (v - mean) / scale).collect()
}

fn validate(y: &[f64], f: &[&[f64]], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if f.is_empty() {
        return Err(Error::InvalidInput(
            "feature matrix must have at least one column".into(),
        ));
    }
    let n = y.len();
    for (i, c) in f.iter().enumerate() {
        if c.len() != n {
            return Err(Error::InvalidInput(format!(
                "length mismatch: target has {n} rows, column {i} has {}",
                c.len()
            )));
        }
    }
    if n < 4 * k {
        return Err(Error::InvalidInput(format!(
            "need at least 4k = {} samples, got {n}",
            4 * k
        )));
    }
    let finite = y.iter().all(|v| v.is_finite()) && f.iter().all(|c| c.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::InvalidInput("non-finite value in MI input".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn independent_normals_near_zero() {
        let y = normals(2000, 1);
        let f = normals(2000, 2);
        let est = mi(&y, &[&f], 3, 7).unwrap();
        assert!(est.value_nats <= 0.05, "{est:?}");
        assert!(est.value_nats >= 0.0);
    }

    #[test]
    fn duplicated_coordinate_matches_single() {
        let x = normals(2000, 3);
        let noise = normals(2000, 4);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + 0.7 * b).collect();
        let one = mi(&y, &[&x], 3, 11).unwrap().value_nats;
        let two = mi(&y, &[&x, &x], 3, 11).unwrap().value_nats;
        assert!((one - two).abs() <= 0.02, "{one} vs {two}");
    }

    #[test]
    fn cmi_empty_set_is_mi() {
        let x = normals(300, 5);
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 0.1).collect();
        let a = cmi(&y, &x, &[], 3, 9).unwrap();
        let b = mi(&y, &[&x], 3, 9).unwrap();
        assert_eq!(a.value_nats.to_bits(), b.value_nats.to_bits());
        assert_eq!(a.raw_nats.to_bits(), b.raw_nats.to_bits());
    }

    #[test]
    fn symmetric_in_one_dimension() {
        let x = normals(1500, 12);
        let e = normals(1500, 13);
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let fwd = mi(&y, &[&x], 3, 1).unwrap().value_nats;
        let back = mi(&x, &[&y], 3, 1).unwrap().value_nats;
        assert!((fwd - back).abs() <= 1e-9, "{fwd} vs {back}");
    }

    #[test]
    fn invariant_to_column_scale() {
        let x = normals(600, 14);
        let z = normals(600, 15);
        let e = normals(600, 16);
        let y: Vec<f64> = x.iter().zip(&z).zip(&e).map(|((a, b), c)| a + b + 0.5 * c).collect();
        let base = mi(&y, &[&x, &z], 3, 2).unwrap().value_nats;
        let ys: Vec<f64> = y.iter().map(|v| 0.01 * v + 3.0).collect();
        let xs: Vec<f64> = x.iter().map(|v| 40.0 * v).collect();
        let scaled = mi(&ys, &[&xs, &z], 3, 2).unwrap().value_nats;
        assert!((base - scaled).abs() <= 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let x = normals(800, 21);
        let z = normals(800, 22);
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a * b + a).collect();
        let s = mi_with(&y, &[&x, &z], 4, 5, Execution::Sequential).unwrap();
        let p = mi_with(&y, &[&x, &z], 4, 5, Execution::Parallel).unwrap();
        assert_eq!(s.raw_nats.to_bits(), p.raw_nats.to_bits());
    }

    #[test]
    fn constant_feature_carries_nothing() {
        let y = normals(400, 30);
        let c = vec![5.0; 400];
        let est = mi(&y, &[&c], 3, 0).unwrap();
        assert!(est.value_nats < 0.02, "{est:?}");
    }

    #[test]
    fn input_errors() {
        let y = vec![0.0; 20];
        let short = vec![0.0; 19];
        assert!(mi(&y, &[&short], 3, 0).is_err());
        assert!(mi(&y[..11], &[&short[..11]], 3, 0).is_err());
        assert!(mi(&y, &[], 3, 0).is_err());
        let mut bad = vec![0.5; 20];
        bad[3] = f64::NAN;
        assert!(mi(&y, &[&bad], 3, 0).is_err());
        assert!(mi(&y[..12], &[&bad[4..16]], 3, 0).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn never_negative_and_deterministic(
                data in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 16..120),
                seed in 0u64..1000,
            ) {
                let y: Vec<f64> = data.iter().map(|p| p.0).collect();
                let f: Vec<f64> = data.iter().map(|p| p.1).collect();
                let a = mi(&y, &[&f], 3, seed).unwrap();
                let b = mi(&y, &[&f], 3, seed).unwrap();
                prop_assert!(a.value_nats >= 0.0);
                prop_assert_eq!(a.raw_nats.to_bits(), b.raw_nats.to_bits());
            }
        }
    }
}
