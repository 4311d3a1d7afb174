use serde::{Deserialize, Serialize};

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; NaN when `n < 2`.
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            f64::NAN
        } else {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Estimate { mean, stderr, n }
    }

    /// `(self - other) / sqrt(se_self^2 + se_other^2)`.
    pub fn z_versus(&self, other: &Estimate) -> f64 {
        let diff = self.mean - other.mean;
        let combined = (self.stderr * self.stderr + other.stderr * other.stderr).sqrt();
        if combined == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        } else {
            diff / combined
        }
    }

    /// `self.mean <= other.mean + slack * combined stderr`.
    pub fn at_most(&self, other: &Estimate, slack: f64) -> bool {
        self.z_versus(other) <= slack
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_known_samples() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        // sample variance 5/3
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(Estimate::from_samples(&[1.0]).stderr.is_nan());
    }

    #[test]
    fn z_is_antisymmetric() {
        let a = Estimate { mean: 3.0, stderr: 0.3, n: 10 };
        let b = Estimate { mean: 1.0, stderr: 0.4, n: 10 };
        assert!((a.z_versus(&b) - 4.0).abs() < 1e-12);
        assert_eq!(a.z_versus(&b), -b.z_versus(&a));
        assert_eq!(a.z_versus(&a), 0.0);
    }
}
