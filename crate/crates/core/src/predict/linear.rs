use nalgebra::{DMatrix, DVector};

use super::{ContextPredictor, Prediction, Prompt, Representation};
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;
const RIDGE_RETRIES: usize = 3;

/// Affine model `w . x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub rank_deficient: bool,
}

impl LinearFit {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercept
    }
}

/// Centered design matrix, centered targets, feature means, target mean.
fn centered(xs: &[&[f64]], ys: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>, Vec<f64>, f64)> {
    let n = xs.len();
    if n == 0 || n != ys.len() {
        return Err(Error::InvalidConfig(
            "linear fit needs matching, non-empty inputs".into(),
        ));
    }
    let d = xs[0].len();
    let mut means = vec![0.0; d];
    for x in xs {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        for (m, v) in means.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let a = DMatrix::from_fn(n, d, |i, j| xs[i][j] - means[j]);
    let b = DVector::from_iterator(n, ys.iter().map(|y| y - y_mean));
    Ok((a, b, means, y_mean))
}

/// Ridge regression with an unpenalized intercept, solved through the
/// normal equations with a Cholesky factorization. On factorization failure
/// the penalty is multiplied by 10, up to three times.
pub fn ridge_fit(xs: &[&[f64]], ys: &[f64], lambda: f64) -> Result<LinearFit> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge lambda {lambda} must be positive")));
    }
    let (a, b, means, y_mean) = centered(xs, ys)?;
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * b;
    let d = gram.nrows();
    let mut lam = lambda;
    for attempt in 0..=RIDGE_RETRIES {
        let mut m = gram.clone();
        for i in 0..d {
            m[(i, i)] += lam;
        }
        if let Some(chol) = m.cholesky() {
            let w = chol.solve(&rhs);
            if w.iter().all(|v| v.is_finite()) {
                let weights: Vec<f64> = w.iter().copied().collect();
                let intercept = y_mean - weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
                return Ok(LinearFit {
                    weights,
                    intercept,
                    rank_deficient: false,
                });
            }
        }
        if attempt < RIDGE_RETRIES {
            log::warn!("ridge factorization failed at lambda {lam:e}; retrying with {:e}", lam * 10.0);
            lam *= 10.0;
        }
    }
    Err(Error::Numerical(format!(
        "ridge normal equations are not positive definite even at lambda {lam:e}; \
         the context is too ill-conditioned"
    )))
}

/// Least squares with intercept. Rank-deficient designs get the
/// minimum-norm solution from the SVD pseudo-inverse.
pub fn ols_fit(xs: &[&[f64]], ys: &[f64]) -> Result<LinearFit> {
    let (a, b, means, y_mean) = centered(xs, ys)?;
    let d = a.ncols();
    let rows = a.nrows();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * (rows.max(d) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let rank_deficient = rank < d;
    if rank_deficient {
        log::warn!("least squares design has rank {rank} < {d}; using the minimum-norm solution");
    }
    let w = svd
        .solve(&b, eps)
        .map_err(|e| Error::Numerical(format!("least squares solve failed: {e}")))?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearFit {
        weights,
        intercept,
        rank_deficient,
    })
}

/// Ridge regression fit on the prompt's own context.
#[derive(Debug, Clone, Copy)]
pub struct Ridge {
    pub lambda: f64,
}

impl Default for Ridge {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_RIDGE_LAMBDA,
        }
    }
}

impl ContextPredictor for Ridge {
    fn name(&self) -> &str {
        "ridge"
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction> {
        prompt.validate()?;
        let xs: Vec<&[f64]> = prompt.context.iter().map(|(x, _)| x.as_slice()).collect();
        let ys: Vec<f64> = prompt.labels().collect();
        let fit = ridge_fit(&xs, &ys, self.lambda)?;
        Ok(Prediction::new(fit.eval(&prompt.query), self.name()))
    }
}

/// One global least-squares fit over a training pool; ignores the context.
#[derive(Debug, Clone)]
pub struct OlsGlobal {
    fit: LinearFit,
}

impl OlsGlobal {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let xs: Vec<&[f64]> = train.samples().iter().map(|s| s.features.as_slice()).collect();
        Ok(Self {
            fit: ols_fit(&xs, &train.labels())?,
        })
    }

    pub fn linear(&self) -> &LinearFit {
        &self.fit
    }

    pub fn predict_query(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.fit.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.fit.weights.len(),
                found: query.len(),
            });
        }
        Ok(self.fit.eval(query))
    }
}

impl ContextPredictor for OlsGlobal {
    fn name(&self) -> &str {
        "ols"
    }

    fn representation(&self) -> Representation {
        Representation::Raw
    }

    fn predict(&self, prompt: &Prompt) -> Result<Prediction> {
        Ok(Prediction::new(self.predict_query(&prompt.query)?, self.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(xs: &[Vec<f64>]) -> Vec<&[f64]> {
        xs.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn ridge_exact_line() {
        let xs = vec![vec![1.0], vec![2.0]];
        let fit = ridge_fit(&refs(&xs), &[2.0, 4.0], 1e-12).unwrap();
        for q in [-3.0, 0.0, 5.5] {
            assert!((fit.eval(&[q]) - 2.0 * q).abs() < 1e-6);
        }
    }

    #[test]
    fn ridge_same_x_gives_mean() {
        let xs = vec![vec![1.0, 2.0]; 4];
        let ys = [1.0, 2.0, 6.0, 7.0];
        let fit = ridge_fit(&refs(&xs), &ys, 1e-3).unwrap();
        assert!(fit.weights.iter().all(|w| *w == 0.0));
        assert!((fit.eval(&[9.0, -3.0]) - 4.0).abs() < 1e-12);
        // independent route: the minimum-norm least-squares solution agrees
        let ols = ols_fit(&refs(&xs), &ys).unwrap();
        assert!((ols.eval(&[9.0, -3.0]) - fit.eval(&[9.0, -3.0])).abs() < 1e-12);
    }

    #[test]
    fn ridge_huge_lambda_gives_mean() {
        let xs = vec![vec![0.0], vec![1.0], vec![5.0]];
        let fit = ridge_fit(&refs(&xs), &[3.0, 1.0, 8.0], 1e12).unwrap();
        assert!((fit.eval(&[100.0]) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn ridge_rejects_nonpositive_lambda() {
        let xs = vec![vec![0.0]];
        assert!(ridge_fit(&refs(&xs), &[1.0], 0.0).is_err());
    }

    #[test]
    fn ols_exact_recovery() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x[0] + 0.5 * x[1]).collect();
        let ds = Dataset::from_parts(xs.clone(), ys.clone()).unwrap();
        let ols = OlsGlobal::fit(&ds).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((ols.predict_query(x).unwrap() - y).abs() < 1e-9);
        }
        assert!(!ols.linear().rank_deficient);
    }

    #[test]
    fn ols_single_sample_is_constant() {
        let ds = Dataset::from_parts(vec![vec![1.0, 2.0]], vec![4.5]).unwrap();
        for q in [[0.0, 0.0], [10.0, -3.0]] {
            assert_eq!(OlsGlobal::fit(&ds).unwrap().predict_query(&q).unwrap(), 4.5);
        }
    }

    #[test]
    fn ols_rank_deficient_flagged() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let ys: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let fit = ols_fit(&refs(&xs), &ys).unwrap();
        assert!(fit.rank_deficient);
        // minimum norm splits the weight as 1:2
        assert!((fit.weights[1] - 2.0 * fit.weights[0]).abs() < 1e-9);
        assert!((fit.eval(&[3.0, 6.0]) - 3.0).abs() < 1e-9);
    }
}
