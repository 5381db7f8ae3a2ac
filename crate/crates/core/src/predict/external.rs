//! Bridge to an in-context model running in a child process.
//!
//! Requests go to the child's stdin as one JSON object per line,
//! `{"context": [[[x...], y], ...], "query": [x...]}`, and the child answers
//! each with one line `{"prediction": v}` on stdout, in order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ContextPredictor, Prediction, Prompt};
use crate::error::{Error, Result};
use crate::fsutil;

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    /// Fixed input width of the model; wider prompts are chunk-ensembled.
    #[serde(default)]
    pub input_dim: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl ExternalConfig {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            args: Vec::new(),
            workdir: None,
            input_dim: None,
            timeout_secs: default_timeout(),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub context: Vec<(Vec<f64>, f64)>,
    pub query: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub prediction: f64,
}

impl From<&Prompt> for PromptRecord {
    fn from(p: &Prompt) -> Self {
        Self {
            context: p.context.clone(),
            query: p.query.clone(),
        }
    }
}

pub struct ExternalPredictor {
    config: ExternalConfig,
}

impl ExternalPredictor {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if !(config.timeout_secs > 0.0) {
            return Err(Error::InvalidConfig("external timeout must be positive".into()));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn spawn(&self) -> Result<Child> {
        let mut cmd = Command::new(&self.config.command);
        cmd.args(&self.config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.config.workdir {
            cmd.current_dir(dir);
        }
        cmd.spawn().map_err(|e| Error::io(&self.config.command, e))
    }
}

fn child_failure(child: &mut Child, stderr: thread::JoinHandle<String>) -> Option<Error> {
    let status = child.wait().ok()?;
    let diag = stderr.join().unwrap_or_default();
    if status.success() {
        None
    } else {
        Some(Error::ChildExit {
            status: status.to_string(),
            stderr: diag.trim().to_string(),
        })
    }
}

impl ContextPredictor for ExternalPredictor {
    fn name(&self) -> &str {
        "external"
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(prompt))?.remove(0))
    }

    fn predict_batch(&self, prompts: &[Prompt]) -> Result<Vec<Prediction>> {
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let mut child = self.spawn()?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");

        let stderr = thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr_pipe.read_to_string(&mut s);
            s
        });
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut out = Vec::with_capacity(prompts.len());
        for (i, prompt) in prompts.iter().enumerate() {
            let line_no = i + 1;
            let mut request = serde_json::to_string(&PromptRecord::from(prompt))
                .map_err(|e| Error::Numerical(format!("cannot encode prompt: {e}")))?;
            request.push('\n');
            if stdin.write_all(request.as_bytes()).and_then(|_| stdin.flush()).is_err() {
                drop(stdin);
                return Err(child_failure(&mut child, stderr).unwrap_or(Error::Protocol {
                    line: line_no,
                    msg: "child closed its input".into(),
                }));
            }
            let line = match rx.recv_timeout(timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => {
                    return Err(Error::Protocol {
                        line: line_no,
                        msg: e.to_string(),
                    })
                }
                Err(RecvTimeoutError::Timeout) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Timeout(timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    drop(stdin);
                    return Err(child_failure(&mut child, stderr).unwrap_or(Error::Protocol {
                        line: line_no,
                        msg: "child closed its output before responding".into(),
                    }));
                }
            };
            let resp: ResponseRecord =
                serde_json::from_str(line.trim()).map_err(|e| Error::Protocol {
                    line: line_no,
                    msg: format!("malformed response `{}`: {e}", line.trim()),
                })?;
            out.push(Prediction::new(resp.prediction, self.name()));
        }
        drop(stdin);
        if let Some(err) = child_failure(&mut child, stderr) {
            return Err(err);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_wire_shape() {
        let p = Prompt::new(vec![(vec![1.0, 2.5], 3.0)], vec![0.1, -4.0]);
        let s = serde_json::to_string(&PromptRecord::from(&p)).unwrap();
        assert_eq!(s, r#"{"context":[[[1.0,2.5],3.0]],"query":[0.1,-4.0]}"#);
        let back: PromptRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back.context, p.context);
    }

    #[test]
    fn response_rejects_strings() {
        assert!(serde_json::from_str::<ResponseRecord>(r#"{"prediction": "x"}"#).is_err());
        let r: ResponseRecord = serde_json::from_str(r#"{"prediction": 2.5}"#).unwrap();
        assert_eq!(r.prediction, 2.5);
    }

    #[test]
    fn config_defaults() {
        let c: ExternalConfig = toml::from_str("command = \"python3\"\n").unwrap();
        assert_eq!(c.timeout_secs, 30.0);
        assert!(c.args.is_empty());
    }
}
