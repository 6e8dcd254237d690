//! Measure-consistent orthonormal polynomial bases and Gauss quadrature rules.
//!
//! Built-in marginals use closed-form three-term recurrences (probabilists'
//! Hermite for the standard gaussian, shifted Legendre for uniform(0,1));
//! custom marginals go through the Stieltjes procedure on a dense composite
//! discretization of their support. Gauss rules come from the symmetric
//! tridiagonal (Jacobi matrix) eigenproblem.

use crate::input::MarginalSpec;
use crate::linalg::tridiag_eigen;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrthoError {
    #[error("polynomial order {got} exceeds constructed max order {max}")]
    OrderExceedsMax { got: usize, max: usize },
    #[error("gauss rule size {got} outside supported range 1..={max}")]
    RuleSizeOutOfRange { got: usize, max: usize },
    #[error("recurrence construction detected moment divergence: {0}")]
    MomentDivergence(String),
    #[error("eigensolve failed while building the gauss rule: {0}")]
    EigenFailure(String),
}

/// Three-term recurrence coefficients of the monic orthogonal polynomials:
/// `p_{k+1} = (x - alpha_k) p_k - beta_k p_{k-1}` with `beta_0` the total mass.
#[derive(Debug, Clone)]
pub struct Recurrence {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Recurrence {
    /// Probabilists' Hermite: alpha_k = 0, beta_k = k.
    pub fn hermite(max_order: usize) -> Self {
        let n = max_order + 1;
        Self {
            alpha: vec![0.0; n],
            beta: std::iter::once(1.0).chain((1..n).map(|k| k as f64)).collect(),
        }
    }

    /// Legendre shifted to [0, 1]: alpha_k = 1/2, beta_k = k^2 / (4 (4k^2 - 1)).
    pub fn shifted_legendre(max_order: usize) -> Self {
        let n = max_order + 1;
        Self {
            alpha: vec![0.5; n],
            beta: std::iter::once(1.0)
                .chain((1..n).map(|k| {
                    let k2 = (k * k) as f64;
                    k2 / (4.0 * (4.0 * k2 - 1.0))
                }))
                .collect(),
        }
    }

    pub fn max_order(&self) -> usize {
        self.alpha.len() - 1
    }
}

/// Orthonormal polynomial basis for one (standardized) marginal.
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    marginal: MarginalSpec,
    recurrence: Recurrence,
}

/// Nodes and weights of a measure-consistent Gauss rule; weights sum to one.
#[derive(Debug, Clone)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

impl OrthonormalBasis {
    /// Builds the basis for `marginal` standardized to its reference space.
    /// Gaussian and lognormal marginals share the Hermite basis, uniform maps
    /// to shifted Legendre, custom densities go through the Stieltjes procedure.
    pub fn build(marginal: &MarginalSpec, max_order: usize) -> Result<Self, OrthoError> {
        let standardized = marginal.standardized();
        let recurrence = match &standardized {
            MarginalSpec::Gaussian { .. } => Recurrence::hermite(max_order),
            MarginalSpec::Uniform { .. } => Recurrence::shifted_legendre(max_order),
            MarginalSpec::Lognormal { .. } => unreachable!("standardizes to gaussian"),
            MarginalSpec::Custom(_) => stieltjes_recurrence(&standardized, max_order)?,
        };
        Ok(Self {
            marginal: standardized,
            recurrence,
        })
    }

    /// Basis directly from a recurrence; used by tests to cross-check Stieltjes.
    pub fn from_recurrence(marginal: MarginalSpec, recurrence: Recurrence) -> Self {
        Self {
            marginal: marginal.standardized(),
            recurrence,
        }
    }

    pub fn max_order(&self) -> usize {
        self.recurrence.max_order()
    }

    pub fn marginal(&self) -> &MarginalSpec {
        &self.marginal
    }

    pub fn recurrence(&self) -> &Recurrence {
        &self.recurrence
    }

    /// Evaluates the orthonormal polynomial of order `j` at `x` via the
    /// normalized three-term recurrence; `psi_0 = 1` exactly.
    pub fn eval(&self, j: usize, x: f64) -> Result<f64, OrthoError> {
        let max = self.max_order();
        if j > max {
            return Err(OrthoError::OrderExceedsMax { got: j, max });
        }
        let mut prev = 0.0;
        let mut cur = 1.0;
        for k in 0..j {
            let next = ((x - self.recurrence.alpha[k]) * cur
                - self.recurrence.beta[k].sqrt() * prev)
                / self.recurrence.beta[k + 1].sqrt();
            prev = cur;
            cur = next;
        }
        Ok(cur)
    }

    /// Evaluates orders `0..=up_to` at once; the engines use this on hot paths.
    pub fn eval_all(&self, up_to: usize, x: f64) -> Result<Vec<f64>, OrthoError> {
        let max = self.max_order();
        if up_to > max {
            return Err(OrthoError::OrderExceedsMax { got: up_to, max });
        }
        let mut out = Vec::with_capacity(up_to + 1);
        out.push(1.0);
        if up_to == 0 {
            return Ok(out);
        }
        let mut prev = 0.0;
        let mut cur = 1.0;
        for k in 0..up_to {
            let next = ((x - self.recurrence.alpha[k]) * cur
                - self.recurrence.beta[k].sqrt() * prev)
                / self.recurrence.beta[k + 1].sqrt();
            prev = cur;
            cur = next;
            out.push(cur);
        }
        Ok(out)
    }

    /// The `n`-point Gauss rule of the basis measure: nodes are eigenvalues of
    /// the n-by-n Jacobi matrix, weights the squared first eigenvector rows.
    pub fn gauss_rule(&self, n: usize) -> Result<GaussRule, OrthoError> {
        let max = self.max_order();
        if n == 0 || n > max {
            return Err(OrthoError::RuleSizeOutOfRange { got: n, max });
        }
        let diag: Vec<f64> = self.recurrence.alpha[..n].to_vec();
        let offdiag: Vec<f64> = (1..n).map(|k| self.recurrence.beta[k].sqrt()).collect();
        let (mut nodes, vectors) = tridiag_eigen(&diag, &offdiag).map_err(OrthoError::EigenFailure)?;
        // snap eigensolve noise at the symmetry center to an exact zero so
        // anchored grids share cut-plane points bit-for-bit
        let scale = nodes.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for x in nodes.iter_mut() {
            if x.abs() <= 1e-13 * scale {
                *x = 0.0;
            }
        }
        let beta0 = self.recurrence.beta[0];
        let weights: Vec<f64> = (0..n).map(|k| beta0 * vectors[k] * vectors[k]).collect();
        Ok(GaussRule { nodes, weights })
    }
}

/// Discretized Stieltjes procedure: dense composite Gauss panels over the
/// support, doubling resolution until the recurrence coefficients stabilize.
fn stieltjes_recurrence(marginal: &MarginalSpec, max_order: usize) -> Result<Recurrence, OrthoError> {
    let mut panels = 1024usize;
    let mut prev: Option<Recurrence> = None;
    loop {
        let rec = discrete_stieltjes(marginal, max_order, panels)?;
        if let Some(p) = &prev {
            let mut delta: f64 = 0.0;
            for k in 0..=max_order {
                delta = delta.max((rec.alpha[k] - p.alpha[k]).abs());
                delta = delta.max((rec.beta[k] - p.beta[k]).abs() / p.beta[k].max(1e-300));
            }
            if delta <= 1e-12 {
                return Ok(rec);
            }
        }
        prev = Some(rec);
        panels *= 2;
        if panels > 16384 {
            return Ok(prev.unwrap());
        }
    }
}

fn discrete_stieltjes(
    marginal: &MarginalSpec,
    max_order: usize,
    panels: usize,
) -> Result<Recurrence, OrthoError> {
    // map support to t in (0,1); gaussian tails clipped where the mass is
    // negligible relative to the highest moment used
    let (lo, hi) = marginal.support();
    let (lo, hi) = (lo.max(-15.0e3), hi.min(15.0e3));
    let (lo, hi) = match marginal {
        MarginalSpec::Gaussian { mean, sd } => (mean - 15.0 * sd, mean + 15.0 * sd),
        _ => (lo, hi),
    };
    let to_x = |t: f64| -> f64 {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => lo + (hi - lo) * t,
            (true, false) => lo + t / (1.0 - t),
            (false, true) => hi - (1.0 - t) / t,
            (false, false) => unreachable!(),
        }
    };
    let jac = |t: f64| -> f64 {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => hi - lo,
            (true, false) => 1.0 / ((1.0 - t) * (1.0 - t)),
            (false, true) => 1.0 / (t * t),
            (false, false) => unreachable!(),
        }
    };

    // 4-point Gauss-Legendre per panel
    const GL4_X: [f64; 4] = [
        -0.8611363115940526,
        -0.33998104358485626,
        0.33998104358485626,
        0.8611363115940526,
    ];
    const GL4_W: [f64; 4] = [
        0.34785484513745385,
        0.6521451548625461,
        0.6521451548625461,
        0.34785484513745385,
    ];
    let mut xs = Vec::with_capacity(4 * panels);
    let mut ws = Vec::with_capacity(4 * panels);
    let eps = 1e-12;
    for p in 0..panels {
        let a = eps + (1.0 - 2.0 * eps) * p as f64 / panels as f64;
        let b = eps + (1.0 - 2.0 * eps) * (p + 1) as f64 / panels as f64;
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for q in 0..4 {
            let t = mid + half * GL4_X[q];
            let x = to_x(t);
            let w = GL4_W[q] * half * marginal.pdf(x) * jac(t);
            if w > 0.0 {
                xs.push(x);
                ws.push(w);
            }
        }
    }

    let n = xs.len();
    let mut alpha = vec![0.0; max_order + 1];
    let mut beta = vec![0.0; max_order + 1];
    let mut p_prev = vec![0.0; n];
    let mut p_cur = vec![1.0; n];
    let mass: f64 = ws.iter().sum();
    beta[0] = mass;
    let mut norm_cur = mass;
    for k in 0..=max_order {
        let mut xp = 0.0;
        for i in 0..n {
            xp += ws[i] * xs[i] * p_cur[i] * p_cur[i];
        }
        alpha[k] = xp / norm_cur;
        if k == max_order {
            break;
        }
        let beta_k = if k == 0 { 0.0 } else { beta[k] };
        let mut norm_next = 0.0;
        for i in 0..n {
            let next = (xs[i] - alpha[k]) * p_cur[i] - beta_k * p_prev[i];
            p_prev[i] = p_cur[i];
            p_cur[i] = next;
            norm_next += ws[i] * next * next;
        }
        if !norm_next.is_finite() || norm_next <= 0.0 {
            return Err(OrthoError::MomentDivergence(format!(
                "inner product degenerated at order {}",
                k + 1
            )));
        }
        beta[k + 1] = norm_next / norm_cur;
        norm_cur = norm_next;
    }
    Ok(Recurrence { alpha, beta })
}
