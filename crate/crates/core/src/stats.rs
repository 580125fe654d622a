//! Bootstrap spread of hit rates and cross-pathology aggregation.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Pathology;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("cannot bootstrap an empty outcome list")]
    EmptyOutcomes,
    #[error("cannot average an empty set of rates")]
    EmptyRates,
    #[error("replicates must be at least 1")]
    NoReplicates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub n: usize,
    pub rate: f64,
    pub bootstrap_std: f64,
    pub random_baseline: f64,
}

/// Mean of each bootstrap replicate. Replicate `i` resamples `n` indices with
/// replacement from stream `i` of the seeded generator, so replicates are
/// independent of evaluation order.
pub fn bootstrap_replicate_means(outcomes: &[bool], cfg: &StatsConfig) -> Result<Vec<f64>, StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::EmptyOutcomes);
    }
    if cfg.replicates == 0 {
        return Err(StatsError::NoReplicates);
    }
    let n = outcomes.len();
    Ok((0..cfg.replicates)
        .map(|i| {
            let mut g = rng::indexed(cfg.seed, i as u64);
            let hits = (0..n).filter(|_| outcomes[g.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect())
}

/// Population standard deviation of the replicate means.
pub fn bootstrap_std(outcomes: &[bool], cfg: &StatsConfig) -> Result<f64, StatsError> {
    let means = bootstrap_replicate_means(outcomes, cfg)?;
    Ok(population_std(&means))
}

pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.max(0.0).sqrt()
}

/// Unweighted mean over the pathologies present, correctly rounded from the
/// exact rational sum, so equal rates average to exactly themselves.
pub fn macro_average(rates: &BTreeMap<Pathology, f64>) -> Result<f64, StatsError> {
    if rates.is_empty() {
        return Err(StatsError::EmptyRates);
    }
    exact_mean(rates.values().copied()).ok_or(StatsError::EmptyRates)
}

pub(crate) fn exact_mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = BigRational::zero();
    let mut n = 0u64;
    for x in xs {
        sum += BigRational::from_float(x)?;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    (sum / BigRational::from_integer(BigInt::from(n))).to_f64()
}
