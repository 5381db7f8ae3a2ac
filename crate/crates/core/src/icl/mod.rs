//! A small decoder transformer trained from scratch to do in-context
//! regression on synthetic function classes.

mod checkpoint;
mod model;
mod sampler;

pub use checkpoint::{
    checkpoint_manifest, load_checkpoint, read_checkpoint, save_checkpoint,
    save_checkpoint_with_manifest, write_checkpoint, write_checkpoint_with_manifest,
};
pub use model::{
    loss_mse, random_batch, AdamState, Batch, IclConfig, IclModel, Layout, TensorInfo,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, INIT_STD,
};
pub use sampler::{FunctionClass, Task, TaskSampler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::{predict_average, ridge_fit, ContextPredictor, Prediction, Prompt,
    DEFAULT_RIDGE_LAMBDA};

pub fn init_model(cfg: IclConfig) -> Result<IclModel> {
    IclModel::init(cfg)
}

pub fn train_step(model: &mut IclModel, batch: &Batch, lr: f64) -> Result<f64> {
    model.train_step(batch, lr)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: IclModel,
    /// Loss at every step, before that step's update.
    pub losses: Vec<f64>,
    /// Parameter snapshots every `steps / 10` steps, tagged with the step.
    pub checkpoints: Vec<(usize, Vec<f64>)>,
}

/// Trains for `cfg.steps` Adam steps, each on a fresh batch of
/// `cfg.batch_size` tasks with `cfg.max_context + 1` points.
pub fn train(cfg: &IclConfig, sampler: &mut TaskSampler) -> Result<TrainOutcome> {
    train_with_progress(cfg, sampler, |_, _| {})
}

pub fn train_with_progress(
    cfg: &IclConfig,
    sampler: &mut TaskSampler,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if sampler.dim() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim,
            found: sampler.dim(),
        });
    }
    let mut model = IclModel::init(cfg.clone())?;
    let every = (cfg.steps / 10).max(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 0..cfg.steps {
        let batch = sampler.batch(cfg.batch_size, cfg.max_context + 1);
        let loss = model
            .train_step(&batch, cfg.learning_rate)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
        losses.push(loss);
        progress(step, loss);
        if (step + 1) % every == 0 {
            checkpoints.push((step + 1, model.params.clone()));
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        checkpoints,
    })
}

/// Query error at one context length, averaged over fresh tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncontextPoint {
    pub k: usize,
    pub model_mse: f64,
    pub average_mse: f64,
    pub ridge_mse: f64,
}

/// Error of the query prediction against the noiseless task value, for the
/// model, the label average, and ridge regression on the same tasks. With an
/// empty context the baselines predict 0.
pub fn evaluate_incontext(
    model: &IclModel,
    sampler: &mut TaskSampler,
    context_lengths: &[usize],
    tasks_per_point: usize,
) -> Result<Vec<IncontextPoint>> {
    if tasks_per_point == 0 {
        return Err(Error::InvalidConfig("tasks_per_point must be positive".into()));
    }
    let mut out = Vec::with_capacity(context_lengths.len());
    for &k in context_lengths {
        if k > model.config.max_context {
            return Err(Error::SequenceTooLong {
                len: k,
                max: model.config.max_context,
            });
        }
        let (mut m_err, mut a_err, mut r_err) = (0.0, 0.0, 0.0);
        for _ in 0..tasks_per_point {
            let task = sampler.task();
            let (xs, ys) = sampler.points(&task, k + 1);
            let target = task.eval(&xs[k]);
            let context: Vec<(Vec<f64>, f64)> =
                xs[..k].iter().cloned().zip(ys[..k].iter().copied()).collect();
            let pm = model.predict_query(&context, &xs[k])?;
            let prompt = Prompt::new(context, xs[k].clone());
            let pa = if k == 0 { 0.0 } else { predict_average(&prompt)? };
            let pr = if k == 0 {
                0.0
            } else {
                let refs: Vec<&[f64]> = xs[..k].iter().map(Vec::as_slice).collect();
                ridge_fit(&refs, &ys[..k], DEFAULT_RIDGE_LAMBDA)?.eval(&xs[k])
            };
            m_err += (pm - target).powi(2);
            a_err += (pa - target).powi(2);
            r_err += (pr - target).powi(2);
        }
        let n = tasks_per_point as f64;
        out.push(IncontextPoint {
            k,
            model_mse: m_err / n,
            average_mse: a_err / n,
            ridge_mse: r_err / n,
        });
    }
    Ok(out)
}

/// Uses a trained transformer as a context predictor. Prompts narrower than
/// the model's input width are zero-padded.
pub struct IclPredictor {
    model: IclModel,
}

impl IclPredictor {
    pub fn new(model: IclModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &IclModel {
        &self.model
    }

    fn pad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.model.config.input_dim;
        if x.len() > d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        let mut v = x.to_vec();
        v.resize(d, 0.0);
        Ok(v)
    }
}

impl ContextPredictor for IclPredictor {
    fn name(&self) -> &str {
        "icl"
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction> {
        prompt.validate()?;
        let context = prompt
            .context
            .iter()
            .map(|(x, y)| Ok((self.pad(x)?, *y)))
            .collect::<Result<Vec<_>>>()?;
        let value = self.model.predict_query(&context, &self.pad(&prompt.query)?)?;
        Ok(Prediction::new(value, self.name()))
    }
}
