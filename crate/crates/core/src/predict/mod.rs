//! In-context predictors.
//!
//! Every predictor implements [`ContextPredictor`] and is constructed by name
//! through [`PredictorRegistry`]. [`ChunkEnsemble`] wraps any predictor whose
//! input width is fixed.

mod external;
mod linear;
mod registry;

pub use external::{ExternalConfig, ExternalPredictor, PromptRecord, ResponseRecord};
pub use linear::{ols_fit, ridge_fit, LinearFit, OlsGlobal, Ridge, DEFAULT_RIDGE_LAMBDA};
pub use registry::{PredictorEnv, PredictorFactory, PredictorRegistry, PredictorSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::ContextSet;

/// Which feature representation a predictor consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Raw,
    Transformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub context: Vec<(Vec<f64>, f64)>,
    pub query: Vec<f64>,
}

impl Prompt {
    pub fn new(context: Vec<(Vec<f64>, f64)>, query: Vec<f64>) -> Self {
        Self { context, query }
    }

    pub fn from_context(ctx: &ContextSet, repr: Representation) -> Self {
        match repr {
            Representation::Transformed => Self {
                context: ctx.items.iter().map(|i| (i.features.clone(), i.label)).collect(),
                query: ctx.query.clone(),
            },
            Representation::Raw => Self {
                context: ctx.items.iter().map(|i| (i.raw.clone(), i.label)).collect(),
                query: ctx.query_raw.clone(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.context.iter().map(|(_, y)| *y)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.query.len();
        for (x, y) in &self.context {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
            if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: 0, col: 0 });
            }
        }
        Ok(())
    }

    /// Restricts every feature vector to `[start, start + width)`, padding
    /// with zeros past the end.
    fn chunk(&self, start: usize, width: usize) -> Prompt {
        let cut = |x: &[f64]| -> Vec<f64> {
            (start..start + width)
                .map(|j| x.get(j).copied().unwrap_or(0.0))
                .collect()
        };
        Prompt {
            context: self.context.iter().map(|(x, y)| (cut(x), *y)).collect(),
            query: cut(&self.query),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_chunk: Option<Vec<f64>>,
    pub predictor: String,
}

impl Prediction {
    pub fn new(value: f64, predictor: impl Into<String>) -> Self {
        Self {
            value,
            per_chunk: None,
            predictor: predictor.into(),
        }
    }
}

pub trait ContextPredictor: Send + Sync {
    fn name(&self) -> &str;

    fn representation(&self) -> Representation {
        Representation::Transformed
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction>;

    /// Predicts a batch in order. Predictors with per-call setup cost (such
    /// as a child process) override this.
    fn predict_batch(&self, prompts: &[Prompt]) -> Result<Vec<Prediction>> {
        prompts.iter().map(|p| self.predict(p)).collect()
    }
}

/// Mean of the context labels.
#[derive(Debug, Default, Clone, Copy)]
pub struct Average;

impl ContextPredictor for Average {
    fn name(&self) -> &str {
        "average"
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction> {
        Ok(Prediction::new(predict_average(prompt)?, self.name()))
    }
}

pub fn predict_average(prompt: &Prompt) -> Result<f64> {
    if prompt.context.is_empty() {
        return Err(Error::InvalidConfig(
            "averaging predictor needs a non-empty context".into(),
        ));
    }
    Ok(prompt.labels().sum::<f64>() / prompt.context.len() as f64)
}

/// Splits features into contiguous chunks of a fixed width, predicts on each
/// chunk with the labels unchanged, and averages.
pub struct ChunkEnsemble {
    base: Box<dyn ContextPredictor>,
    width: usize,
    name: String,
}

impl ChunkEnsemble {
    pub fn new(base: Box<dyn ContextPredictor>, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("chunk width must be at least 1".into()));
        }
        let name = format!("{}+chunk{}", base.name(), width);
        Ok(Self { base, width, name })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_chunks(&self, dim: usize) -> usize {
        dim.div_ceil(self.width).max(1)
    }

    fn combine(&self, per_chunk: Vec<f64>) -> Prediction {
        let value = per_chunk.iter().sum::<f64>() / per_chunk.len() as f64;
        Prediction {
            value,
            per_chunk: Some(per_chunk),
            predictor: self.name.clone(),
        }
    }
}

impl ContextPredictor for ChunkEnsemble {
    fn name(&self) -> &str {
        &self.name
    }

    fn representation(&self) -> Representation {
        self.base.representation()
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(prompt))?.remove(0))
    }

    fn predict_batch(&self, prompts: &[Prompt]) -> Result<Vec<Prediction>> {
        // prompts narrower than the width go to the base predictor untouched
        let mut out: Vec<Option<Prediction>> = vec![None; prompts.len()];
        let narrow: Vec<usize> = (0..prompts.len())
            .filter(|&i| prompts[i].dim() <= self.width)
            .collect();
        if !narrow.is_empty() {
            let batch: Vec<Prompt> = narrow.iter().map(|&i| prompts[i].clone()).collect();
            for (i, p) in narrow.iter().zip(self.base.predict_batch(&batch)?) {
                out[*i] = Some(Prediction {
                    value: p.value,
                    per_chunk: Some(vec![p.value]),
                    predictor: self.name.clone(),
                });
            }
        }

        let wide: Vec<usize> = (0..prompts.len())
            .filter(|&i| prompts[i].dim() > self.width)
            .collect();
        if !wide.is_empty() {
            let mut chunks = Vec::new();
            let mut owners = Vec::new();
            for &i in &wide {
                for c in 0..self.num_chunks(prompts[i].dim()) {
                    chunks.push(prompts[i].chunk(c * self.width, self.width));
                    owners.push(i);
                }
            }
            let preds = self.base.predict_batch(&chunks)?;
            let mut per: Vec<Vec<f64>> = vec![Vec::new(); prompts.len()];
            for (owner, p) in owners.into_iter().zip(preds) {
                per[owner].push(p.value);
            }
            for &i in &wide {
                out[i] = Some(self.combine(std::mem::take(&mut per[i])));
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every prompt predicted")).collect())
    }
}
