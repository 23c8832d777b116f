//! M/M/1 waiting-time simulation used as the benchmark regression target.
//!
//! The regression function is the steady-state mean time in queue of an
//! M/M/1 queue with unit arrival rate as a function of the service rate
//! `x > 1`, `f0(x) = 1 / (x (x - 1))`. Responses are averages of the first
//! `customers` waiting times of a queue started empty and idle.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Dataset;
use crate::max_affine::Domain;

/// Name recorded in dataset metadata.
pub const GENERATOR: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64(seed), stream = point index";

/// Service-rate range of the benchmark.
pub const DEFAULT_DOMAIN: (f64, f64) = (1.2, 1.3);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueConfig {
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub num_customers: usize,
    pub seed: u64,
    /// Independent stream of the generator; distinct design points use distinct streams.
    pub stream: u64,
}

impl QueueConfig {
    pub fn new(service_rate: f64, num_customers: usize, seed: u64) -> Result<Self> {
        let config = QueueConfig { arrival_rate: 1.0, service_rate, num_customers, seed, stream: 0 };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return Err(Error::invalid(format!("arrival rate must be positive, got {}", self.arrival_rate)));
        }
        if !(self.service_rate.is_finite() && self.service_rate > self.arrival_rate) {
            return Err(Error::invalid(format!(
                "service rate {} must exceed arrival rate {}",
                self.service_rate, self.arrival_rate
            )));
        }
        if self.num_customers == 0 {
            return Err(Error::invalid("need at least one customer"));
        }
        Ok(())
    }
}

/// Steady-state mean time in queue, `1 / (x (x - 1))`.
pub fn true_f0(x: f64) -> Result<f64> {
    if !(x > 1.0 && x.is_finite()) {
        return Err(Error::invalid(format!("f0 is defined for x > 1, got {x}")));
    }
    Ok(1.0 / (x * (x - 1.0)))
}

/// Derivative of [`true_f0`], `-(2x - 1) / (x (x - 1))^2`.
pub fn grad_true_f0(x: f64) -> Result<f64> {
    let f = true_f0(x)?;
    Ok(-(2.0 * x - 1.0) * f * f)
}

fn exponential<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

/// Average of the first `num_customers` waiting times via the Lindley
/// recursion `W_{k+1} = max(0, W_k + S_k - A_k)`, `W_1 = 0`.
pub fn simulate_mean_wait(config: &QueueConfig) -> Result<f64> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream);
    let mut wait = 0.0;
    let mut total = 0.0;
    for _ in 1..config.num_customers {
        let service = exponential(&mut rng, config.service_rate);
        let interarrival = exponential(&mut rng, config.arrival_rate);
        wait = f64::max(0.0, wait + service - interarrival);
        total += wait;
    }
    Ok(total / config.num_customers as f64)
}

/// Midpoint grid `a + (b - a)(i - 1)/n + (b - a)/(2n)`, `i = 1..n`.
pub fn design_points(n: usize, a: f64, b: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one design point"));
    }
    Domain::new(a, b, 1)?;
    let h = (b - a) / n as f64;
    Ok((0..n).map(|i| a + h * i as f64 + h / 2.0).collect())
}

/// Seed for replication `index` derived from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// Provenance written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub customers: usize,
    pub generator: String,
    pub n: usize,
    pub domain: [f64; 2],
}

impl DatasetMeta {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Simulated M/M/1 dataset on the design grid of `[1.2, 1.3]`; point `i`
/// uses generator stream `i` of `seed`.
pub fn generate_dataset(n: usize, customers: usize, seed: u64) -> Result<(Dataset, DatasetMeta)> {
    let (a, b) = DEFAULT_DOMAIN;
    let xs = design_points(n, a, b)?;
    let ys = xs
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut config = QueueConfig::new(x, customers, seed)?;
            config.stream = i as u64;
            simulate_mean_wait(&config)
        })
        .collect::<Result<Vec<f64>>>()?;
    let data = Dataset::from_1d(&xs, &ys, a, b)?;
    let meta = DatasetMeta { seed, customers, generator: GENERATOR.to_string(), n, domain: [a, b] };
    Ok((data, meta))
}
