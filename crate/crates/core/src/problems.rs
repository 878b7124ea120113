//! Smooth lower-bounded objectives and unbiased stochastic gradient oracles.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kernel::{RealVec, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    /// `f(x) = ½ Σ λ_i x_i²` with all `λ_i > 0`.
    QuadraticDiag { lambda: Vec<f64> },
    /// `f(x) = Σ (x_i² + cos x_i − 1)`. Each coordinate has curvature
    /// `2 − cos x_i ∈ [1, 3]`, so `L = 3` and the unique minimizer is 0.
    QuadraticCosine { d: usize },
}

impl Objective {
    pub fn quadratic_diag(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::Empty("eigenvalue vector"));
        }
        if let Some(bad) = lambda.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(config_err!("quadratic-diag eigenvalues must be positive and finite, got {bad}"));
        }
        Ok(Objective::QuadraticDiag { lambda })
    }

    pub fn quadratic_cosine(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(config_err!("dimension must be positive"));
        }
        Ok(Objective::QuadraticCosine { d })
    }

    /// The one-dimensional hard-instance objective `½x²`.
    pub fn half_square() -> Self {
        Objective::QuadraticDiag { lambda: alloc::vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::QuadraticDiag { lambda } => lambda.len(),
            Objective::QuadraticCosine { d } => *d,
        }
    }

    pub fn smoothness(&self) -> f64 {
        match self {
            Objective::QuadraticDiag { lambda } => lambda.iter().copied().fold(0.0, f64::max),
            Objective::QuadraticCosine { .. } => 3.0,
        }
    }

    /// Attained infimum.
    pub fn f_star(&self) -> f64 {
        0.0
    }

    pub fn id(&self) -> &'static str {
        match self {
            Objective::QuadraticDiag { .. } => "quadratic-diag",
            Objective::QuadraticCosine { .. } => "quadratic-cosine",
        }
    }

    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Objective::QuadraticDiag { lambda } => {
                0.5 * lambda.iter().zip(x).map(|(l, xi)| l * xi * xi).sum::<f64>()
            }
            Objective::QuadraticCosine { .. } => {
                x.iter().map(|xi| xi * xi + libm::cos(*xi) - 1.0).sum()
            }
        }
    }

    pub(crate) fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Objective::QuadraticDiag { lambda } => {
                for ((o, l), xi) in out.iter_mut().zip(lambda).zip(x) {
                    *o = l * xi;
                }
            }
            Objective::QuadraticCosine { .. } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = 2.0 * xi - libm::sin(*xi);
                }
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.value_unchecked(x))
    }

    pub fn grad(&self, x: &[f64]) -> Result<RealVec> {
        self.check_dim(x)?;
        let mut out = alloc::vec![0.0; x.len()];
        self.grad_into(x, &mut out);
        RealVec::new(out)
    }

    /// Returns `(f(x), ∇f(x))`.
    pub fn eval(&self, x: &RealVec) -> Result<(f64, RealVec)> {
        Ok((self.value(x)?, self.grad(x)?))
    }

    /// Shifted objective `f̄ = f − f* + 1 ≥ 1`.
    pub fn fbar(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value(x)? - self.f_star() + 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    Zero,
    /// Independent `N(0, σ²)` per coordinate.
    Gaussian { sigma: f64 },
    /// `ξ = ±A` with probability `1/(2A²)` each, `0` otherwise. Unit variance
    /// for every `A ≥ 1`.
    ThreePoint { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    objective: Objective,
    noise: Noise,
}

impl Oracle {
    pub fn new(objective: Objective, noise: Noise) -> Result<Self> {
        match noise {
            Noise::Zero => {}
            Noise::Gaussian { sigma } => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(config_err!("gaussian sigma must be finite and >= 0, got {sigma}"));
                }
            }
            Noise::ThreePoint { amplitude } => {
                if objective.dim() != 1 {
                    return Err(config_err!(
                        "three-point noise requires d = 1, got d = {}",
                        objective.dim()
                    ));
                }
                if !(amplitude.is_finite() && amplitude >= 1.0) {
                    return Err(config_err!("three-point amplitude must be >= 1, got {amplitude}"));
                }
            }
        }
        Ok(Self { objective, noise })
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    /// Bound `C` on `E‖g − ∇f(x)‖²`.
    pub fn variance_bound(&self) -> f64 {
        match self.noise {
            Noise::Zero => 0.0,
            Noise::Gaussian { sigma } => self.dim() as f64 * sigma * sigma,
            Noise::ThreePoint { .. } => 1.0,
        }
    }

    /// Writes `g = ∇f(x) + ξ` into `out`. Draw cost per call: zero noise
    /// consumes nothing, gaussian two words per coordinate, three-point one
    /// word.
    #[inline]
    pub(crate) fn sample_into(&self, x: &[f64], stream: &mut RngStream, out: &mut [f64]) {
        self.objective.grad_into(x, out);
        self.add_noise(stream, out);
    }

    #[inline]
    pub(crate) fn add_noise(&self, stream: &mut RngStream, out: &mut [f64]) {
        match self.noise {
            Noise::Zero => {}
            Noise::Gaussian { sigma } => {
                for o in out.iter_mut() {
                    *o += sigma * stream.std_gaussian();
                }
            }
            Noise::ThreePoint { amplitude } => {
                out[0] += three_point(amplitude, stream.uniform01());
            }
        }
    }

    pub fn sample_gradient(&self, x: &RealVec, stream: &mut RngStream) -> Result<RealVec> {
        self.objective.check_dim(x)?;
        let mut out = alloc::vec![0.0; x.len()];
        self.sample_into(x, stream, &mut out);
        RealVec::new(out)
    }
}

/// Maps a uniform draw to the three-point law: `u < 1/(2A²)` gives `+A`,
/// `u < 1/A²` gives `−A`, otherwise `0`.
#[inline]
pub fn three_point(amplitude: f64, u: f64) -> f64 {
    let half = 0.5 / (amplitude * amplitude);
    if u < half {
        amplitude
    } else if u < 2.0 * half {
        -amplitude
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::stage;

    #[test]
    fn quadratic_diag_examples() {
        let f = Objective::half_square();
        let (v, g) = f.eval(&RealVec::new(alloc::vec![0.0]).unwrap()).unwrap();
        assert_eq!((v, g[0]), (0.0, 0.0));
        let (v, g) = f.eval(&RealVec::new(alloc::vec![1.0]).unwrap()).unwrap();
        assert_eq!((v, g[0]), (0.5, 1.0));
    }

    #[test]
    fn quadratic_cosine_minimum() {
        let f = Objective::quadratic_cosine(1).unwrap();
        let (v, g) = f.eval(&RealVec::new(alloc::vec![0.0]).unwrap()).unwrap();
        assert_eq!((v, g[0]), (0.0, 0.0));
        assert_eq!(f.smoothness(), 3.0);
    }

    #[test]
    fn dimension_mismatch() {
        let f = Objective::quadratic_cosine(2).unwrap();
        assert!(matches!(
            f.value(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn three_point_validation() {
        let two_d = Objective::quadratic_cosine(2).unwrap();
        assert!(Oracle::new(two_d, Noise::ThreePoint { amplitude: 2.0 }).is_err());
        assert!(Oracle::new(Objective::half_square(), Noise::ThreePoint { amplitude: 0.5 }).is_err());
        let o = Oracle::new(Objective::half_square(), Noise::ThreePoint { amplitude: 3.0 }).unwrap();
        assert_eq!(o.variance_bound(), 1.0);
    }

    #[test]
    fn zero_noise_returns_exact_gradient() {
        let f = Objective::quadratic_diag(alloc::vec![2.0, 0.5]).unwrap();
        let o = Oracle::new(f, Noise::Zero).unwrap();
        let x = RealVec::new(alloc::vec![1.5, -4.0]).unwrap();
        let mut s = RngStream::derive(1, 0, stage::NOISE);
        let g = o.sample_gradient(&x, &mut s).unwrap();
        assert_eq!(g.as_slice(), &[3.0, -2.0]);
        assert_eq!(s.counter(), 0);
    }

    #[test]
    fn three_point_map() {
        assert_eq!(three_point(2.0, 0.0), 2.0);
        assert_eq!(three_point(2.0, 0.124), 2.0);
        assert_eq!(three_point(2.0, 0.125), -2.0);
        assert_eq!(three_point(2.0, 0.2499), -2.0);
        assert_eq!(three_point(2.0, 0.25), 0.0);
    }
}
