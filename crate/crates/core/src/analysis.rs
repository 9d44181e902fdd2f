//! How likely a random mini-batch is to contain a hard negative.
//!
//! For a query in a batch of `M` independently drawn pairs, the other `M - 1`
//! pairs are the negatives. If each lands outside the top percentile of the
//! query's ranking with probability `q`, none of them is that hard with
//! probability `q^(M-1)`.
//!
//! For `q = 0.9`, `0.9^43 ≈ 0.0108` is still above 1%, so the smallest batch
//! with a miss probability strictly below 1% is 45. For `q = 0.999` the 1%
//! threshold is 4604 and the 0.1% threshold is 6906.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("q must lie in (0, 1), got {q}")))
    }
}

/// `q^(m-1)`; a batch of one has no negatives and always misses.
pub fn miss_probability(q: f64, m: u64) -> Result<f64> {
    check_q(q)?;
    if m == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    Ok(powu(q, m - 1))
}

fn powu(q: f64, e: u64) -> f64 {
    match i32::try_from(e) {
        Ok(e) => q.powi(e),
        Err(_) => q.powf(e as f64),
    }
}

/// Smallest batch size `M` with `q^(M-1) < eps`.
pub fn min_batch_for(q: f64, eps: f64) -> Result<u64> {
    check_q(q)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Contract(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    let guess = 1.0 + (eps.ln() / q.ln()).ceil();
    let mut m = if guess.is_finite() && guess >= 1.0 {
        guess as u64
    } else {
        1
    };
    // The logarithms can be off by one ulp near an integer boundary.
    while miss_probability(q, m)? >= eps {
        m += 1;
    }
    while m > 1 && miss_probability(q, m - 1)? < eps {
        m -= 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub probability: f64,
    /// Binomial standard error `√(p̂(1-p̂)/trials)`.
    pub stderr: f64,
    pub trials: u64,
}

const SHARD: u64 = 4096;

/// Estimates the miss probability by drawing `m - 1` uniform variates per
/// trial and counting trials in which none exceeds `q`.
///
/// Trials are split into fixed-size shards; shard `i` uses the ChaCha8 stream
/// `i` of `seed`, so the estimate does not depend on the thread count.
pub fn monte_carlo_miss(q: f64, m: u64, trials: u64, seed: u64) -> Result<MonteCarloEstimate> {
    check_q(q)?;
    if m == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if trials < 1000 {
        return Err(Error::Contract(format!(
            "at least 1000 trials are required, got {trials}"
        )));
    }
    let shards = trials.div_ceil(SHARD);
    let misses: u64 = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let count = SHARD.min(trials - shard * SHARD);
            (0..count)
                .filter(|_| (1..m).all(|_| rng.random::<f64>() < q))
                .count() as u64
        })
        .sum();
    let p = misses as f64 / trials as f64;
    Ok(MonteCarloEstimate {
        probability: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product(q: f64, m: u64) -> f64 {
        (1..m).fold(1.0, |acc, _| acc * q)
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(miss_probability(0.9, 2).unwrap(), 0.9);
        assert_eq!(miss_probability(0.9, 1).unwrap(), 1.0);
        let p44 = miss_probability(0.9, 44).unwrap();
        let p45 = miss_probability(0.9, 45).unwrap();
        assert!((p44 - product(0.9, 44)).abs() < 1e-15);
        assert!((p45 - product(0.9, 45)).abs() < 1e-15);
        assert!((p44 - 0.010_77).abs() < 1e-5, "{p44}");
        assert!((p45 - 0.009_70).abs() < 1e-5, "{p45}");
    }

    #[test]
    fn thresholds() {
        assert_eq!(min_batch_for(0.9, 0.01).unwrap(), 45);
        assert_eq!(min_batch_for(0.999, 0.01).unwrap(), 4604);
        assert_eq!(min_batch_for(0.999, 0.001).unwrap(), 6906);
        // 0.5^1 = 0.5 is not strictly below 0.5.
        assert_eq!(min_batch_for(0.5, 0.5).unwrap(), 3);
    }

    #[test]
    fn thresholds_are_exact_boundaries() {
        for q in [0.1, 0.5, 0.75, 0.9, 0.99, 0.999] {
            for eps in [0.9, 0.5, 0.1, 0.01, 0.001] {
                let m = min_batch_for(q, eps).unwrap();
                assert!(miss_probability(q, m).unwrap() < eps);
                if m > 1 {
                    assert!(miss_probability(q, m - 1).unwrap() >= eps);
                }
            }
        }
    }

    #[test]
    fn monotonicity() {
        for m in 1..200 {
            assert!(miss_probability(0.9, m + 1).unwrap() < miss_probability(0.9, m).unwrap());
        }
        for m in 2..50 {
            assert!(miss_probability(0.8, m).unwrap() < miss_probability(0.81, m).unwrap());
        }
    }

    #[test]
    fn contract_errors() {
        assert!(miss_probability(1.0, 3).is_err());
        assert!(miss_probability(0.5, 0).is_err());
        assert!(min_batch_for(0.9, 0.0).is_err());
        assert!(monte_carlo_miss(0.9, 2, 10, 0).is_err());
    }

    #[test]
    fn simulation_agrees_with_closed_form() {
        for (q, m) in [(0.9, 2), (0.9, 45)] {
            let est = monte_carlo_miss(q, m, 100_000, 17).unwrap();
            let p = miss_probability(q, m).unwrap();
            let sigma = (p * (1.0 - p) / 100_000.0).sqrt();
            assert!(
                (est.probability - p).abs() <= 3.0 * sigma,
                "{q} {m}: {est:?} vs {p}"
            );
        }
        assert_eq!(monte_carlo_miss(0.9, 1, 5000, 3).unwrap().probability, 1.0);
    }

    #[test]
    fn simulation_is_thread_count_independent() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| monte_carlo_miss(0.9, 10, 50_000, 8).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
