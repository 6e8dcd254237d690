//! Built-in verification models, a small symmetric eigensolver, and a
//! line-oriented subprocess protocol for user simulators.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::input::{MarginalSpec, RandomInput};
use crate::linalg::jacobi_eigen_sym;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model evaluation failed: {0}")]
    Eval(String),
    #[error("model returned a non-finite output at {point:?}")]
    NonFinite { point: Vec<f64> },
    #[error("matrix is not symmetric to 1e-12")]
    NotSymmetric,
    #[error("eigensolver failed: {0}")]
    Eigen(String),
    #[error("external model timed out after {0:?}")]
    Timeout(Duration),
    #[error("external model sent a malformed response: {0}")]
    Malformed(String),
    #[error("external model process failed: {0}")]
    Process(String),
}

/// An evaluatable model: pure and deterministic in physical coordinates,
/// with one or more outputs (eigenvalue models return all three at once).
pub trait Model: Send + Sync {
    fn dim(&self) -> usize;
    fn outputs(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ModelError>;
}

/// Wraps a scalar closure as a single-output model.
pub struct ScalarFnModel<F> {
    dim: usize,
    f: F,
}

impl<F> ScalarFnModel<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Model for ScalarFnModel<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn outputs(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let y = (self.f)(x);
        if !y.is_finite() {
            return Err(ModelError::NonFinite { point: x.to_vec() });
        }
        Ok(vec![y])
    }
}

/// Normalized product polynomial in N standard-uniform variables:
/// `prod_i (3 x_i^5 / i + 1)` divided by its expectation so the mean is one.
pub struct Example1 {
    n: usize,
    normalizer: f64,
}

impl Example1 {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let normalizer = (1..=n).map(|i| 1.0 + 0.5 / i as f64).product();
        Self { n, normalizer }
    }

    pub fn standard_input(&self) -> RandomInput {
        RandomInput::new(
            (0..self.n)
                .map(|_| MarginalSpec::uniform(0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Closed-form variance `prod_i (25 / (11 (1+2i)^2) + 1) - 1`.
    pub fn exact_variance(n: usize) -> f64 {
        (1..=n)
            .map(|i| 25.0 / (11.0 * ((1 + 2 * i) as f64).powi(2)) + 1.0)
            .product::<f64>()
            - 1.0
    }
}

impl Model for Example1 {
    fn dim(&self) -> usize {
        self.n
    }

    fn outputs(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut acc = 1.0;
        for (i, &xi) in x.iter().enumerate() {
            acc *= 3.0 / (i as f64 + 1.0) * xi.powi(5) + 1.0;
        }
        Ok(vec![acc / self.normalizer])
    }
}

/// Eigendecomposition of a 3x3 symmetric matrix: ascending eigenvalues and
/// orthonormal eigenvectors as columns. Cyclic Jacobi rotations underneath.
pub fn symmetric_eig3(a: &[[f64; 3]; 3]) -> Result<([f64; 3], [[f64; 3]; 3]), ModelError> {
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(1.0);
    for i in 0..3 {
        for j in (i + 1)..3 {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * scale {
                return Err(ModelError::NotSymmetric);
            }
        }
    }
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    let (l, v) = jacobi_eigen_sym(flat, 3).map_err(ModelError::Eigen)?;
    let mut vectors = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            vectors[r][c] = v[r * 3 + c];
        }
    }
    Ok(([l[0], l[1], l[2]], vectors))
}

/// Three-degree-of-freedom undamped spring-mass system with random masses
/// `mu_i X_i` (i = 1..3) and spring stiffnesses `mu_{i+3} X_{i+3}` (i = 1..6).
/// Outputs the three generalized eigenvalues in ascending order.
pub struct SpringMassSystem {
    scales: [f64; 9],
}

impl Default for SpringMassSystem {
    fn default() -> Self {
        // unit masses and stiffnesses except the sixth spring at 3.0
        Self {
            scales: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 3.0],
        }
    }
}

impl SpringMassSystem {
    pub fn new(scales: [f64; 9]) -> Self {
        Self { scales }
    }

    /// The paper's random input: nine independent lognormals, mean 1, cov 0.3.
    pub fn standard_input() -> RandomInput {
        RandomInput::new(
            (0..9)
                .map(|_| MarginalSpec::lognormal_mean_cov(1.0, 0.3).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Assembled stiffness matrix; the pattern couples masses 1-2, 2-3 and 1-3.
    pub fn stiffness(&self, x: &[f64]) -> [[f64; 3]; 3] {
        let k: Vec<f64> = (0..6).map(|i| self.scales[i + 3] * x[i + 3]).collect();
        [
            [k[0] + k[3] + k[5], -k[3], -k[5]],
            [-k[3], k[3] + k[4] + k[1], -k[4]],
            [-k[5], -k[4], k[4] + k[2] + k[5]],
        ]
    }

    pub fn masses(&self, x: &[f64]) -> [f64; 3] {
        [
            self.scales[0] * x[0],
            self.scales[1] * x[1],
            self.scales[2] * x[2],
        ]
    }

    /// Solves `K phi = lambda M phi` by the symmetric reduction
    /// `M^{-1/2} K M^{-1/2}`; eigenvalues ascending.
    pub fn eigenvalues(&self, x: &[f64]) -> Result<[f64; 3], ModelError> {
        let m = self.masses(x);
        if m.iter().any(|&v| v <= 0.0) {
            return Err(ModelError::Eval(format!("non-positive mass from input {x:?}")));
        }
        let k = self.stiffness(x);
        let s = [1.0 / m[0].sqrt(), 1.0 / m[1].sqrt(), 1.0 / m[2].sqrt()];
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = k[i][j] * s[i] * s[j];
            }
        }
        let (l, _) = symmetric_eig3(&a)?;
        Ok(l)
    }
}

impl Model for SpringMassSystem {
    fn dim(&self) -> usize {
        9
    }

    fn outputs(&self) -> usize {
        3
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.eigenvalues(x)?.to_vec())
    }
}

// ---------------------------------------------------------------------------
// External model protocol
// ---------------------------------------------------------------------------

/// Child-process model speaking a line-oriented text protocol:
/// the child announces `PDDUQ 1 <N> <M>` on startup, then answers each
/// request line of N space-separated decimals with one line of M decimals.
pub struct ExternalModel {
    command: Vec<String>,
    dim: usize,
    outputs: usize,
    timeout: Duration,
    pool: Mutex<VecDeque<Worker>>,
    available: Condvar,
    spawned: Mutex<usize>,
    pool_size: usize,
}

struct Worker {
    child: Child,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &[String], dim: usize, outputs: usize, timeout: Duration) -> Result<Self, ModelError> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| ModelError::Process(format!("failed to spawn {:?}: {e}", command[0])))?;
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut worker = Self { child, lines: rx };
        let hello = worker.read_line(timeout)?;
        let expect = format!("PDDUQ 1 {dim} {outputs}");
        if hello.trim() != expect {
            let _ = worker.child.kill();
            return Err(ModelError::Malformed(format!(
                "handshake mismatch: expected {expect:?}, got {hello:?}"
            )));
        }
        Ok(worker)
    }

    fn read_line(&mut self, timeout: Duration) -> Result<String, ModelError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ModelError::Process(format!("read error: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(ModelError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                let status = self
                    .child
                    .try_wait()
                    .ok()
                    .flatten()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "stream closed".into());
                Err(ModelError::Process(status))
            }
        }
    }

    fn request(&mut self, x: &[f64], outputs: usize, timeout: Duration) -> Result<Vec<f64>, ModelError> {
        let mut line = String::with_capacity(x.len() * 24);
        for (i, v) in x.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v:.17e}"));
        }
        line.push('\n');
        self.child
            .stdin
            .as_mut()
            .expect("stdin piped")
            .write_all(line.as_bytes())
            .map_err(|e| ModelError::Process(format!("write error: {e}")))?;
        let response = self.read_line(timeout)?;
        let values: Vec<f64> = response
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::Malformed(response.clone()))?;
        if values.len() != outputs {
            return Err(ModelError::Malformed(format!(
                "expected {outputs} values, got {} in {response:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { point: x.to_vec() });
        }
        Ok(values)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl ExternalModel {
    pub fn new(
        command: Vec<String>,
        dim: usize,
        outputs: usize,
        timeout: Duration,
        pool_size: usize,
    ) -> Result<Self, ModelError> {
        if command.is_empty() {
            return Err(ModelError::Process("empty command line".into()));
        }
        let model = Self {
            command,
            dim,
            outputs,
            timeout,
            pool: Mutex::new(VecDeque::new()),
            available: Condvar::new(),
            spawned: Mutex::new(0),
            pool_size: pool_size.max(1),
        };
        // fail fast on a broken command or handshake
        let worker = Worker::spawn(&model.command, dim, outputs, timeout)?;
        model.pool.lock().unwrap().push_back(worker);
        *model.spawned.lock().unwrap() = 1;
        Ok(model)
    }

    fn checkout(&self) -> Result<Worker, ModelError> {
        let mut pool = self.pool.lock().unwrap();
        loop {
            if let Some(w) = pool.pop_front() {
                return Ok(w);
            }
            let mut spawned = self.spawned.lock().unwrap();
            if *spawned < self.pool_size {
                *spawned += 1;
                drop(spawned);
                drop(pool);
                return Worker::spawn(&self.command, self.dim, self.outputs, self.timeout);
            }
            drop(spawned);
            pool = self.available.wait(pool).unwrap();
        }
    }

    fn checkin(&self, worker: Worker) {
        self.pool.lock().unwrap().push_back(worker);
        self.available.notify_one();
    }

    fn replace_worker(&self) {
        // the broken worker was dropped (killing the child); spawn a successor
        match Worker::spawn(&self.command, self.dim, self.outputs, self.timeout) {
            Ok(w) => self.checkin(w),
            Err(_) => {
                let mut spawned = self.spawned.lock().unwrap();
                *spawned -= 1;
                self.available.notify_one();
            }
        }
    }
}

impl Model for ExternalModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn outputs(&self) -> usize {
        self.outputs
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut worker = self.checkout()?;
        match worker.request(x, self.outputs, self.timeout) {
            Ok(values) => {
                self.checkin(worker);
                Ok(values)
            }
            Err(e) => {
                drop(worker);
                self.replace_worker();
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn example1_normalization_and_values() {
        let m = Example1::new(1);
        // E[3 x^5 + 1] = 3/2, so y(0) = 2/3
        assert_abs_diff_eq!(m.eval(&[0.0]).unwrap()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(Example1::exact_variance(1), 25.0 / 99.0, epsilon = 1e-15);
        assert_abs_diff_eq!(Example1::exact_variance(5), 0.497493, epsilon = 1e-6);
        let mut prev = 0.0;
        for n in 1..=8 {
            let v = Example1::exact_variance(n);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn example1_quadrature_mean_is_one() {
        for n in 1..=6usize {
            let model = Example1::new(n);
            let input = model.standard_input();
            let basis =
                crate::orthopoly::OrthonormalBasis::build(input.marginal(0), 8).unwrap();
            let rule = basis.gauss_rule(6).unwrap();
            // tensor quadrature of the product function factorizes
            let mut mean = 1.0;
            for i in 0..n {
                let fi: f64 = rule.integrate(|x| 3.0 / (i as f64 + 1.0) * x.powi(5) + 1.0);
                mean *= fi;
            }
            mean /= (1..=n).map(|i| 1.0 + 0.5 / i as f64).product::<f64>();
            assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-10);
        }
    }

    /// Oracle: roots of the characteristic cubic of a 3x3 symmetric matrix by
    /// the trigonometric method.
    fn cubic_eigen_oracle(a: &[[f64; 3]; 3]) -> [f64; 3] {
        let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
        let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let l1 = q + 2.0 * p * phi.cos();
        let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let l2 = 3.0 * q - l1 - l3;
        let mut l = [l1, l2, l3];
        l.sort_by(|x, y| x.partial_cmp(y).unwrap());
        l
    }

    #[test]
    fn spring_mass_mean_point_eigenvalues() {
        let sys = SpringMassSystem::default();
        let ones = [1.0; 9];
        let k = sys.stiffness(&ones);
        assert_eq!(k[0][0], 5.0);
        assert_eq!(k[0][2], -3.0);
        let oracle = cubic_eigen_oracle(&k);
        let l = sys.eigenvalues(&ones).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(l[i], oracle[i], epsilon = 1e-10);
        }
        // the mean-point spectrum is exactly (1, 4, 8)
        assert_abs_diff_eq!(l[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(l[1], 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(l[2], 8.0, epsilon = 1e-10);
    }

    #[test]
    fn spring_mass_stiffness_relations_and_scaling() {
        let sys = SpringMassSystem::default();
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.2 + 1.6 * ((state >> 11) as f64 / (1u64 << 53) as f64)
        };
        for _ in 0..1000 {
            let x: Vec<f64> = (0..9).map(|_| next()).collect();
            let k = sys.stiffness(&x);
            // symbolic relations of the assembled pattern (scale 3.0 on spring 6)
            assert_eq!(k[0][1], -x[6]);
            assert_eq!(k[0][2], -3.0 * x[8]);
            assert_eq!(k[1][2], -x[7]);
            assert_eq!(k[0][0], x[3] + x[6] + 3.0 * x[8]);
            assert_eq!(k[1][1], x[6] + x[7] + x[4]);
            assert_eq!(k[2][2], x[7] + x[5] + 3.0 * x[8]);
            // mass scaling: masses times c scales eigenvalues by 1/c
            let l = sys.eigenvalues(&x).unwrap();
            let mut scaled = x.clone();
            for m in scaled.iter_mut().take(3) {
                *m *= 2.0;
            }
            let l2 = sys.eigenvalues(&scaled).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(l2[i], l[i] / 2.0, epsilon = 1e-10 * l[i].abs());
            }
        }
    }

    #[test]
    fn eigenvalue_ordering_is_continuous() {
        let sys = SpringMassSystem::default();
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.4 + 1.2 * ((state >> 11) as f64 / (1u64 << 53) as f64)
        };
        for _ in 0..200 {
            let x: Vec<f64> = (0..9).map(|_| next()).collect();
            let l = sys.eigenvalues(&x).unwrap();
            let mut xp = x.clone();
            for v in xp.iter_mut() {
                *v += 1e-9;
            }
            let lp = sys.eigenvalues(&xp).unwrap();
            for i in 0..3 {
                assert!((lp[i] - l[i]).abs() <= 1e-6 * l[i].abs());
            }
        }
    }

    #[test]
    fn symmetric_eig3_basics() {
        let (l, _) = symmetric_eig3(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(l, [1.0, 1.0, 1.0]);
        let (l, v) = symmetric_eig3(&[[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(l, [1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(v[1][0].abs(), 1.0, epsilon = 1e-12);
        assert!(symmetric_eig3(&[[1.0, 0.5, 0.0], [0.4, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }
}
