//! Synthetic benchmark with an exponentially decaying label density.
//!
//! Bin `b` of `bins` equal-width label bins receives a share of `n`
//! proportional to `ratio^b` (at least one sample). Labels are uniform inside
//! their bin and the two features are `y / hi` and `y^2 / hi^2` plus Gaussian
//! noise, where `hi` is the top of the label range.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n: usize,
    pub bins: usize,
    pub ratio: f64,
    pub label_min: f64,
    pub label_max: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            bins: 12,
            ratio: 0.55,
            label_min: 0.0,
            label_max: 12.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.n < self.bins {
            return Err(Error::InvalidConfig(format!(
                "benchmark needs n >= bins >= 1 (n {}, bins {})",
                self.n, self.bins
            )));
        }
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!("ratio {} must be positive", self.ratio)));
        }
        if !(self.label_min < self.label_max) || !self.label_max.is_finite() || !self.label_min.is_finite() {
            return Err(Error::InvalidConfig("label range must be finite with min < max".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Per-bin sample counts.
    pub fn counts(&self) -> Vec<usize> {
        let weights: Vec<f64> = (0..self.bins).map(|b| self.ratio.powi(b as i32)).collect();
        let total: f64 = weights.iter().sum();
        weights
            .iter()
            .map(|w| ((self.n as f64 * w / total).round() as usize).max(1))
            .collect()
    }
}

pub fn generate(cfg: &BenchConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, stream::BENCH);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let width = (cfg.label_max - cfg.label_min) / cfg.bins as f64;
    let hi = cfg.label_max.abs().max(cfg.label_min.abs());
    let mut features = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for (b, &count) in cfg.counts().iter().enumerate() {
        let lo = cfg.label_min + b as f64 * width;
        for _ in 0..count {
            let y = lo + width * rng.random::<f64>();
            features.push(vec![
                y / hi + noise.sample(&mut rng),
                y * y / (hi * hi) + noise.sample(&mut rng),
            ]);
            labels.push(y);
        }
    }
    Dataset::from_parts(features, labels)?.with_names(vec!["x0".into(), "x1".into()], "y".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_decay() {
        let c = BenchConfig::default().counts();
        assert_eq!(c.len(), 12);
        assert!(c.windows(2).all(|w| w[1] <= w[0]));
        assert!(c[0] > 100 && *c.last().unwrap() < 20);
    }

    #[test]
    fn deterministic_and_in_range() {
        let cfg = BenchConfig {
            n: 200,
            ..BenchConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert!(a.labels().iter().all(|&y| (0.0..12.0).contains(&y)));
        assert_eq!(a.feature_dim(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = BenchConfig {
            bins: 0,
            ..BenchConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
