//! Mean, sample standard deviation and Student-t confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Two-sided 95% critical value of Student's t with `df` degrees of freedom.
pub fn t_critical_95(df: usize) -> Result<f64> {
    let t =
        StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numeric(format!("t distribution with df={df}: {e}")))?;
    Ok(t.inverse_cdf(0.975))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample (n − 1) standard deviation; `None` when n < 2.
    pub std: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Set when n < 2: only the mean is meaningful.
    pub insufficient_n: bool,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Metric("aggregate of zero values".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {v} in aggregate")));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Ok(Self {
                n,
                values: values.to_vec(),
                mean,
                std: None,
                ci_half_width: None,
                ci_low: None,
                ci_high: None,
                insufficient_n: true,
            });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        let half = t_critical_95(n - 1)? * std / (n as f64).sqrt();
        Ok(Self {
            n,
            values: values.to_vec(),
            mean,
            std: Some(std),
            ci_half_width: Some(half),
            ci_low: Some(mean - half),
            ci_high: Some(mean + half),
            insufficient_n: false,
        })
    }
}
