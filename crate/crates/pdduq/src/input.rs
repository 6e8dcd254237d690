//! Random input vectors: independent marginals, densities, samplers, and the
//! transforms between physical space and the standardized space in which the
//! orthonormal bases live.

use std::fmt;
use std::sync::Arc;

use statrs::function::erf::{erf_inv, erfc};
use thiserror::Error;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("dimension mismatch: input has {expected} variables, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid marginal parameters: {0}")]
    InvalidParameters(String),
    #[error("quantile argument {0} outside the open interval (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("custom marginal density does not integrate to 1 (got {0})")]
    NotNormalized(f64),
    #[error("custom marginal requires a finite or semi-infinite support")]
    UnsupportedSupport,
    #[error("marginal kind cannot be standardized for the requested operation: {0}")]
    UnsupportedStandardization(String),
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Standard normal distribution function, accurate in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal quantile. A Newton step on top of the inverse error
/// function keeps the round trip through [`normal_cdf`] below 1e-12.
pub fn normal_inv_cdf(u: f64) -> f64 {
    let mut z = SQRT_2 * erf_inv(2.0 * u - 1.0);
    for _ in 0..2 {
        let err = normal_cdf(z) - u;
        let d = normal_pdf(z);
        if d > 0.0 {
            z -= err / d;
        }
    }
    z
}

/// A user-supplied marginal defined by a density callback on a finite or
/// semi-infinite support. The distribution function is built at construction
/// by adaptive panel quadrature and evaluated by local Gauss panels on demand.
pub struct CustomMarginal {
    density: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    support: (f64, f64),
    /// panel boundaries in physical coordinates with accumulated mass
    knots: Vec<(f64, f64)>,
}

impl fmt::Debug for CustomMarginal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMarginal")
            .field("support", &self.support)
            .field("panels", &(self.knots.len() - 1))
            .finish()
    }
}

/// 15-point Gauss-Legendre nodes/weights on [-1, 1], used for panel quadrature.
const GL15: [(f64, f64); 15] = [
    (-0.9879925180204854, 0.030753241996117268),
    (-0.9372733924007060, 0.070366047488108124),
    (-0.8482065834104272, 0.107159220467171935),
    (-0.7244177313601701, 0.139570677926154314),
    (-0.5709721726085388, 0.166269205816993934),
    (-0.3941513470775634, 0.186161000015562211),
    (-0.2011940939974345, 0.198431485327111576),
    (0.0, 0.202578241925561273),
    (0.2011940939974345, 0.198431485327111576),
    (0.3941513470775634, 0.186161000015562211),
    (0.5709721726085388, 0.166269205816993934),
    (0.7244177313601701, 0.139570677926154314),
    (0.8482065834104272, 0.107159220467171935),
    (0.9372733924007060, 0.070366047488108124),
    (0.9879925180204854, 0.030753241996117268),
];

fn gauss_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    GL15.iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

impl CustomMarginal {
    /// Builds the marginal, refining the panel subdivision of the support until
    /// the accumulated distribution is stable to 1e-12 per panel, then checks
    /// normalization to 1e-10.
    pub fn new<F>(density: F, support: (f64, f64)) -> Result<Arc<Self>, InputError>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let (lo, hi) = support;
        if lo >= hi || (lo.is_infinite() && hi.is_infinite()) {
            return Err(InputError::UnsupportedSupport);
        }
        // map support to t in (0,1)
        let to_x = |t: f64| -> f64 {
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => lo + (hi - lo) * t,
                (true, false) => lo + t / (1.0 - t),
                (false, true) => hi - (1.0 - t) / t,
                (false, false) => unreachable!(),
            }
        };
        let jacobian = |t: f64| -> f64 {
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => hi - lo,
                (true, false) => 1.0 / ((1.0 - t) * (1.0 - t)),
                (false, true) => 1.0 / (t * t),
                (false, false) => unreachable!(),
            }
        };
        let g = |t: f64| density(to_x(t)) * jacobian(t);

        // adaptive bisection in t-space
        let mut stack = vec![(1e-12, 1.0 - 1e-12)];
        let mut panels: Vec<(f64, f64, f64)> = Vec::new();
        while let Some((a, b)) = stack.pop() {
            let whole = gauss_panel(&g, a, b);
            let mid = 0.5 * (a + b);
            let split = gauss_panel(&g, a, mid) + gauss_panel(&g, mid, b);
            if (whole - split).abs() <= 1e-13 && (b - a) < 0.05 {
                panels.push((a, b, split));
            } else if b - a < 1e-10 {
                panels.push((a, b, split));
            } else {
                stack.push((mid, b));
                stack.push((a, mid));
            }
        }
        panels.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
        let total: f64 = panels.iter().map(|p| p.2).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(InputError::NotNormalized(total));
        }
        let mut knots = Vec::with_capacity(panels.len() + 1);
        let mut acc = 0.0;
        knots.push((to_x(panels[0].0), 0.0));
        for &(_, b, mass) in &panels {
            acc += mass;
            knots.push((to_x(b), acc.min(1.0)));
        }
        knots.last_mut().unwrap().1 = 1.0;
        Ok(Arc::new(Self {
            density: Box::new(density),
            support,
            knots,
        }))
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.support.0 || x > self.support.1 {
            0.0
        } else {
            (self.density)(x).max(0.0)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.knots[0].0 {
            return 0.0;
        }
        if x >= self.knots.last().unwrap().0 {
            return 1.0;
        }
        let i = match self
            .knots
            .binary_search_by(|k| k.0.partial_cmp(&x).unwrap())
        {
            Ok(i) => return self.knots[i].1,
            Err(i) => i - 1,
        };
        let (x0, f0) = self.knots[i];
        (f0 + gauss_panel(&|t| self.pdf(t), x0, x)).clamp(0.0, 1.0)
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let i = self
            .knots
            .partition_point(|k| k.1 < u)
            .clamp(1, self.knots.len() - 1);
        let (mut lo, mut hi) = (self.knots[i - 1].0, self.knots[i].0);
        // bisection to machine-level bracketing; density may vanish locally
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Marginal distribution of one input variable, in physical units.
#[derive(Debug, Clone)]
pub enum MarginalSpec {
    /// Uniform on the interval `(a, b)`.
    Uniform { a: f64, b: f64 },
    /// Gaussian with the given mean and standard deviation.
    Gaussian { mean: f64, sd: f64 },
    /// Lognormal stored in underlying-Gaussian form: `ln X ~ N(mu_g, sigma_g^2)`.
    Lognormal { mu_g: f64, sigma_g: f64 },
    /// Density-callback marginal on a finite or semi-infinite support.
    Custom(Arc<CustomMarginal>),
}

impl MarginalSpec {
    pub fn uniform(a: f64, b: f64) -> Result<Self, InputError> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(InputError::InvalidParameters(format!(
                "uniform requires finite a < b, got a={a}, b={b}"
            )));
        }
        Ok(Self::Uniform { a, b })
    }

    pub fn gaussian(mean: f64, sd: f64) -> Result<Self, InputError> {
        if !(sd > 0.0) || !mean.is_finite() || !sd.is_finite() {
            return Err(InputError::InvalidParameters(format!(
                "gaussian requires finite mean and sd > 0, got mean={mean}, sd={sd}"
            )));
        }
        Ok(Self::Gaussian { mean, sd })
    }

    pub fn lognormal(mu_g: f64, sigma_g: f64) -> Result<Self, InputError> {
        if !(sigma_g > 0.0) || !mu_g.is_finite() || !sigma_g.is_finite() {
            return Err(InputError::InvalidParameters(format!(
                "lognormal requires finite mu_g and sigma_g > 0, got mu_g={mu_g}, sigma_g={sigma_g}"
            )));
        }
        Ok(Self::Lognormal { mu_g, sigma_g })
    }

    /// Lognormal from its physical mean and coefficient of variation:
    /// `sigma_g^2 = ln(1 + cov^2)`, `mu_g = ln(mean) - sigma_g^2 / 2`.
    pub fn lognormal_mean_cov(mean: f64, cov: f64) -> Result<Self, InputError> {
        if !(mean > 0.0) || !(cov > 0.0) {
            return Err(InputError::InvalidParameters(format!(
                "lognormal requires mean > 0 and cov > 0, got mean={mean}, cov={cov}"
            )));
        }
        let sigma_g2 = (1.0 + cov * cov).ln();
        Ok(Self::Lognormal {
            mu_g: mean.ln() - 0.5 * sigma_g2,
            sigma_g: sigma_g2.sqrt(),
        })
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            Self::Uniform { a, b } => (*a, *b),
            Self::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Lognormal { .. } => (0.0, f64::INFINITY),
            Self::Custom(c) => c.support(),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Self::Uniform { a, b } => {
                if x >= *a && x <= *b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            Self::Gaussian { mean, sd } => normal_pdf((x - mean) / sd) / sd,
            Self::Lognormal { mu_g, sigma_g } => {
                if x <= 0.0 {
                    0.0
                } else {
                    normal_pdf((x.ln() - mu_g) / sigma_g) / (x * sigma_g)
                }
            }
            Self::Custom(c) => c.pdf(x),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Uniform { a, b } => ((x - a) / (b - a)).clamp(0.0, 1.0),
            Self::Gaussian { mean, sd } => normal_cdf((x - mean) / sd),
            Self::Lognormal { mu_g, sigma_g } => {
                if x <= 0.0 {
                    0.0
                } else {
                    normal_cdf((x.ln() - mu_g) / sigma_g)
                }
            }
            Self::Custom(c) => c.cdf(x),
        }
    }

    /// Quantile function; strictly increasing on (0, 1).
    pub fn inverse_cdf(&self, u: f64) -> Result<f64, InputError> {
        if !(u > 0.0 && u < 1.0) {
            return Err(InputError::QuantileOutOfRange(u));
        }
        Ok(match self {
            Self::Uniform { a, b } => a + (b - a) * u,
            Self::Gaussian { mean, sd } => mean + sd * normal_inv_cdf(u),
            Self::Lognormal { mu_g, sigma_g } => (mu_g + sigma_g * normal_inv_cdf(u)).exp(),
            Self::Custom(c) => c.inverse_cdf(u),
        })
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Uniform { a, b } => 0.5 * (a + b),
            Self::Gaussian { mean, .. } => *mean,
            Self::Lognormal { mu_g, sigma_g } => (mu_g + 0.5 * sigma_g * sigma_g).exp(),
            Self::Custom(c) => {
                let mut m = 0.0;
                for w in c.knots.windows(2) {
                    m += gauss_panel(&|x| x * c.pdf(x), w[0].0, w[1].0);
                }
                m
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Uniform { a, b } => (b - a) * (b - a) / 12.0,
            Self::Gaussian { sd, .. } => sd * sd,
            Self::Lognormal { mu_g, sigma_g } => {
                let s2 = sigma_g * sigma_g;
                (s2.exp() - 1.0) * (2.0 * mu_g + s2).exp()
            }
            Self::Custom(c) => {
                let m = self.mean();
                let mut v = 0.0;
                for w in c.knots.windows(2) {
                    v += gauss_panel(&|x| (x - m) * (x - m) * c.pdf(x), w[0].0, w[1].0);
                }
                v
            }
        }
    }

    /// The standardized counterpart in which the orthonormal basis is built:
    /// uniform maps to uniform(0,1), gaussian and lognormal map to the standard
    /// gaussian, custom marginals are their own standard space.
    pub fn standardized(&self) -> MarginalSpec {
        match self {
            Self::Uniform { .. } => Self::Uniform { a: 0.0, b: 1.0 },
            Self::Gaussian { .. } | Self::Lognormal { .. } => Self::Gaussian { mean: 0.0, sd: 1.0 },
            Self::Custom(c) => Self::Custom(Arc::clone(c)),
        }
    }

    /// True when the standardized space is the standard gaussian.
    pub fn gaussian_standardizable(&self) -> bool {
        matches!(self, Self::Gaussian { .. } | Self::Lognormal { .. })
    }

    /// Physical coordinate to standardized coordinate.
    pub fn to_standard(&self, x: f64) -> f64 {
        match self {
            Self::Uniform { a, b } => (x - a) / (b - a),
            Self::Gaussian { mean, sd } => (x - mean) / sd,
            Self::Lognormal { mu_g, sigma_g } => (x.ln() - mu_g) / sigma_g,
            Self::Custom(_) => x,
        }
    }

    /// Standardized coordinate back to physical coordinate.
    pub fn from_standard(&self, z: f64) -> f64 {
        match self {
            Self::Uniform { a, b } => a + (b - a) * z,
            Self::Gaussian { mean, sd } => mean + sd * z,
            Self::Lognormal { mu_g, sigma_g } => (mu_g + sigma_g * z).exp(),
            Self::Custom(_) => z,
        }
    }
}

/// An independent random vector: the joint density is the product of marginals.
#[derive(Debug, Clone)]
pub struct RandomInput {
    marginals: Vec<MarginalSpec>,
}

impl RandomInput {
    pub fn new(marginals: Vec<MarginalSpec>) -> Result<Self, InputError> {
        if marginals.is_empty() {
            return Err(InputError::InvalidParameters(
                "input requires at least one marginal".into(),
            ));
        }
        Ok(Self { marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginal(&self, i: usize) -> &MarginalSpec {
        &self.marginals[i]
    }

    pub fn marginals(&self) -> &[MarginalSpec] {
        &self.marginals
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), InputError> {
        if x.len() != self.dim() {
            return Err(InputError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Joint density at a physical point; zero outside the support.
    pub fn density(&self, x: &[f64]) -> Result<f64, InputError> {
        self.check_dim(x)?;
        Ok(self
            .marginals
            .iter()
            .zip(x)
            .map(|(m, &xi)| m.pdf(xi))
            .product())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.mean()).collect()
    }

    pub fn to_standard(&self, x: &[f64]) -> Result<Vec<f64>, InputError> {
        self.check_dim(x)?;
        Ok(self
            .marginals
            .iter()
            .zip(x)
            .map(|(m, &xi)| m.to_standard(xi))
            .collect())
    }

    pub fn from_standard(&self, z: &[f64]) -> Result<Vec<f64>, InputError> {
        self.check_dim(z)?;
        Ok(self
            .marginals
            .iter()
            .zip(z)
            .map(|(m, &zi)| m.from_standard(zi))
            .collect())
    }

    /// True when every marginal standardizes to the standard gaussian.
    pub fn gaussian_standardizable(&self) -> bool {
        self.marginals.iter().all(|m| m.gaussian_standardizable())
    }
}


/// Serializable description of a marginal for config files and surrogate
/// files. Lognormal accepts either underlying-gaussian parameters or a
/// (mean, cov) pair; custom marginals have no wire form.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MarginalDesc {
    Uniform {
        a: f64,
        b: f64,
    },
    Gaussian {
        mean: f64,
        sd: f64,
    },
    Lognormal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu_g: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_g: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cov: Option<f64>,
    },
}

impl MarginalDesc {
    pub fn to_spec(&self) -> Result<MarginalSpec, InputError> {
        match self {
            Self::Uniform { a, b } => MarginalSpec::uniform(*a, *b),
            Self::Gaussian { mean, sd } => MarginalSpec::gaussian(*mean, *sd),
            Self::Lognormal {
                mu_g,
                sigma_g,
                mean,
                cov,
            } => match (mu_g, sigma_g, mean, cov) {
                (Some(m), Some(s), None, None) => MarginalSpec::lognormal(*m, *s),
                (None, None, Some(m), Some(c)) => MarginalSpec::lognormal_mean_cov(*m, *c),
                _ => Err(InputError::InvalidParameters(
                    "lognormal takes either (mu_g, sigma_g) or (mean, cov)".into(),
                )),
            },
        }
    }

    pub fn from_spec(spec: &MarginalSpec) -> Result<Self, InputError> {
        Ok(match spec {
            MarginalSpec::Uniform { a, b } => Self::Uniform { a: *a, b: *b },
            MarginalSpec::Gaussian { mean, sd } => Self::Gaussian {
                mean: *mean,
                sd: *sd,
            },
            MarginalSpec::Lognormal { mu_g, sigma_g } => Self::Lognormal {
                mu_g: Some(*mu_g),
                sigma_g: Some(*sigma_g),
                mean: None,
                cov: None,
            },
            MarginalSpec::Custom(_) => {
                return Err(InputError::UnsupportedStandardization(
                    "custom marginals have no serialized form".into(),
                ))
            }
        })
    }
}
