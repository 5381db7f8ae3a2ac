use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Average, ChunkEnsemble, ContextPredictor, ExternalConfig, ExternalPredictor, OlsGlobal, Ridge,
    DEFAULT_RIDGE_LAMBDA,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::icl::{load_checkpoint, IclPredictor};

fn default_name() -> String {
    "average".to_string()
}

fn default_lambda() -> f64 {
    DEFAULT_RIDGE_LAMBDA
}

/// Which predictor to build and its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
    /// Fixed model input width; wider prompts are chunk-ensembled.
    #[serde(default)]
    pub chunk_width: Option<usize>,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self::named(default_name())
    }
}

impl PredictorSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            checkpoint: None,
            external: None,
            chunk_width: None,
        }
    }
}

/// What factories may read while building a predictor.
pub struct PredictorEnv<'a> {
    pub train: &'a Dataset,
}

pub type PredictorFactory =
    Arc<dyn Fn(&PredictorSpec, &PredictorEnv<'_>) -> Result<Box<dyn ContextPredictor>> + Send + Sync>;

/// Name-keyed predictor constructors, kept in registration order.
pub struct PredictorRegistry {
    entries: Vec<(String, PredictorFactory)>,
}

impl PredictorRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("average", Arc::new(|_, _| Ok(Box::new(Average))));
        reg.register(
            "ridge",
            Arc::new(|spec, _| {
                Ok(Box::new(Ridge {
                    lambda: spec.ridge_lambda,
                }))
            }),
        );
        reg.register("ols", Arc::new(|_, env| Ok(Box::new(OlsGlobal::fit(env.train)?))));
        reg.register(
            "icl",
            Arc::new(|spec, _| {
                let path = spec.checkpoint.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("predictor `icl` needs a checkpoint path".into())
                })?;
                let model = load_checkpoint(path)?;
                let width = spec.chunk_width.unwrap_or(model.config.input_dim);
                Ok(Box::new(ChunkEnsemble::new(
                    Box::new(IclPredictor::new(model)),
                    width,
                )?))
            }),
        );
        reg.register(
            "external",
            Arc::new(|spec, _| {
                let cfg = spec.external.clone().ok_or_else(|| {
                    Error::InvalidConfig("predictor `external` needs an [external] config".into())
                })?;
                let width = spec.chunk_width.or(cfg.input_dim);
                let inner: Box<dyn ContextPredictor> = Box::new(ExternalPredictor::new(cfg)?);
                Ok(match width {
                    Some(w) => Box::new(ChunkEnsemble::new(inner, w)?),
                    None => inner,
                })
            }),
        );
        reg
    }

    pub fn register(&mut self, name: &str, factory: PredictorFactory) {
        match self.entries.iter().position(|(n, _)| n == name) {
            Some(i) => self.entries[i].1 = factory,
            None => self.entries.push((name.to_string(), factory)),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Builds the named predictor. For predictors other than `icl` and
    /// `external`, a `chunk_width` on the [`PredictorSpec`] wraps the result in a
    /// [`ChunkEnsemble`].
    pub fn build(&self, spec: &PredictorSpec, env: &PredictorEnv<'_>) -> Result<Box<dyn ContextPredictor>> {
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(&spec.name))
            .ok_or_else(|| Error::UnknownName {
                kind: "predictor",
                name: spec.name.clone(),
                available: self.names().join(", "),
            })?;
        let p = factory(spec, env)?;
        let wraps_itself = matches!(spec.name.as_str(), "icl" | "external");
        match spec.chunk_width {
            Some(w) if !wraps_itself => Ok(Box::new(ChunkEnsemble::new(p, w)?)),
            _ => Ok(p),
        }
    }
}

impl Default for PredictorRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
