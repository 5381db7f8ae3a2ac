use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::Batch;
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionClass {
    /// `y = w . x`
    Linear,
    /// `y = (w . x)^2 / d`
    Quadratic,
    /// `y = c`, independent of `x`
    Constant,
}

impl std::str::FromStr for FunctionClass {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(FunctionClass::Linear),
            "quadratic" => Ok(FunctionClass::Quadratic),
            "constant" => Ok(FunctionClass::Constant),
            _ => Err(crate::Error::UnknownName {
                kind: "function class",
                name: s.to_string(),
                available: "linear, quadratic, constant".into(),
            }),
        }
    }
}

/// One draw from a function class.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub class: FunctionClass,
    pub weights: Vec<f64>,
    pub offset: f64,
}

impl Task {
    /// Noiseless value at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum();
        match self.class {
            FunctionClass::Linear => lin,
            FunctionClass::Quadratic => lin * lin / self.weights.len() as f64,
            FunctionClass::Constant => self.offset,
        }
    }
}

/// Seeded stream of tasks and their standard-normal inputs.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    class: FunctionClass,
    dim: usize,
    noise_std: f64,
    rng: ChaCha8Rng,
}

impl TaskSampler {
    pub fn new(class: FunctionClass, dim: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            class,
            dim,
            noise_std: noise_std.max(0.0),
            rng: rng::seeded(seed, stream::TASKS),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn class(&self) -> FunctionClass {
        self.class
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn task(&mut self) -> Task {
        let weights = (0..self.dim).map(|_| self.normal()).collect();
        let offset = self.normal();
        Task {
            class: self.class,
            weights,
            offset,
        }
    }

    /// `n` fresh inputs with noisy labels.
    pub fn points(&mut self, task: &Task, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..self.dim).map(|_| self.normal()).collect())
            .collect();
        let ys = xs
            .iter()
            .map(|x| task.eval(x) + self.noise_std * self.normal())
            .collect();
        (xs, ys)
    }

    pub fn batch(&mut self, size: usize, points: usize) -> Batch {
        let mut xs = Vec::with_capacity(size);
        let mut ys = Vec::with_capacity(size);
        for _ in 0..size {
            let task = self.task();
            let (x, y) = self.points(&task, points);
            xs.push(x);
            ys.push(y);
        }
        Batch { xs, ys }
    }
}
