use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Bootstrap,
    Randomization,
}

impl FromStr for TestMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(Self::Bootstrap),
            "randomization" | "permutation" => Ok(Self::Randomization),
            _ => Err(Error::Config(format!(
                "unknown test method `{s}` (bootstrap|randomization)"
            ))),
        }
    }
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bootstrap => "bootstrap",
            Self::Randomization => "randomization",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub method: TestMethod,
    pub n: usize,
    pub iters: usize,
    /// mean(A − B)
    pub observed_diff: f64,
    pub p_value: f64,
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Paired test on per-item scores.
///
/// Randomization: fraction of random sign flips of the differences whose
/// |mean| reaches the observed |mean|. Bootstrap: fraction of resamples of
/// the pairs whose mean difference does not share the observed sign.
pub fn paired_test(a: &[f64], b: &[f64], method: TestMethod, iters: usize, rng: &mut Rng) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired test on {} vs {} scores",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Metric(format!(
            "insufficient n: paired test needs ≥ 2 items, got {}",
            a.len()
        )));
    }
    if iters == 0 {
        return Err(Error::Config("paired test needs iters ≥ 1".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed = mean(d.iter().copied(), n);
    let tol = 1e-12 * observed.abs().max(1.0);
    let hits = match method {
        TestMethod::Randomization => (0..iters)
            .filter(|_| {
                let m = mean(d.iter().map(|&x| if rng.bernoulli(0.5) { -x } else { x }), n);
                m.abs() >= observed.abs() - tol
            })
            .count(),
        TestMethod::Bootstrap if observed == 0.0 => iters,
        TestMethod::Bootstrap => (0..iters)
            .filter(|_| {
                let m = mean((0..n).map(|_| d[rng.below(n)]), n);
                m * observed.signum() <= 0.0
            })
            .count(),
    };
    Ok(PairedTest {
        method,
        n,
        iters,
        observed_diff: observed,
        p_value: hits as f64 / iters as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arms() -> (Vec<f64>, Vec<f64>) {
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = b.iter().map(|x| x + 100.0).collect();
        (a, b)
    }

    #[test]
    fn identical_arms_p_one() {
        let (a, _) = arms();
        for m in [TestMethod::Randomization, TestMethod::Bootstrap] {
            let t = paired_test(&a, &a, m, 1000, &mut Rng::new(7)).unwrap();
            assert_eq!(t.p_value, 1.0);
        }
    }

    #[test]
    fn shifted_arms_significant() {
        let (a, b) = arms();
        for m in [TestMethod::Randomization, TestMethod::Bootstrap] {
            let t = paired_test(&a, &b, m, 10_000, &mut Rng::new(7)).unwrap();
            assert!(t.p_value < 0.001, "{m}: {}", t.p_value);
            assert!((t.observed_diff - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_is_not_significant() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 1.3).sin()).collect();
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 2.9).cos()).collect();
        let t = paired_test(&a, &b, TestMethod::Randomization, 5000, &mut Rng::new(1)).unwrap();
        assert!(t.p_value > 0.05, "{}", t.p_value);
    }

    #[test]
    fn guards() {
        let mut rng = Rng::new(0);
        let err = paired_test(&[1.0], &[0.0], TestMethod::Randomization, 10, &mut rng).unwrap_err();
        assert!(err.to_string().contains("insufficient n"));
        assert!(matches!(
            paired_test(&[1.0, 2.0], &[0.0], TestMethod::Bootstrap, 10, &mut rng),
            Err(Error::Contract(_))
        ));
        assert!("tukey".parse::<TestMethod>().is_err());
    }

    #[test]
    fn seeded_runs_repeat() {
        let (a, b) = arms();
        let b2: Vec<f64> = b.iter().zip(&a).map(|(x, y)| if x > &0.0 { *y } else { *x }).collect();
        let t1 = paired_test(&a, &b2, TestMethod::Bootstrap, 500, &mut Rng::new(3)).unwrap();
        let t2 = paired_test(&a, &b2, TestMethod::Bootstrap, 500, &mut Rng::new(3)).unwrap();
        assert_eq!(t1, t2);
    }
}
