//! Low-discrepancy Sobol sequences and quasi Monte Carlo estimation of PDD
//! expansion coefficients.
//!
//! Direction numbers come from a bundled text table (rows `d s a m_1..m_s`,
//! one per dimension starting at d = 2; dimension 1 is the van der Corput
//! sequence). The generator uses the plain binary construction, so a fixed
//! (dimension, offset, count) triple yields bit-identical points.

use thiserror::Error;

use crate::input::{InputError, RandomInput};
use crate::models::{Model, ModelError};
use crate::orthopoly::{OrthoError, OrthonormalBasis};
use crate::pdd::{CoefficientStore, MultiIndex, SubsetIndex};
use crate::quad::{CoefficientEngine, EngineError};

/// Direction numbers shipped with the crate (dimensions up to 128).
pub const BUNDLED_DIRECTIONS: &str = include_str!("../assets/sobol-directions.txt");

const BITS: usize = 32;

#[derive(Debug, Error)]
pub enum QmcError {
    #[error("requested dimension {got} exceeds the direction table ({max} dimensions)")]
    DimensionTooLarge { got: usize, max: usize },
    #[error("direction table parse error at line {line}: {message}")]
    TableParse { line: usize, message: String },
    #[error("model evaluation failed at sample {index}: {source}")]
    Model {
        index: u64,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
}

/// A Sobol-type low-discrepancy sequence in `(0,1)^N`. The initial all-zero
/// point is skipped by construction, so every emitted coordinate is a strictly
/// interior multiple of 2^-32.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    directions: Vec<[u32; BITS]>,
    offset: u64,
    emitted: u64,
}

impl SobolSequence {
    /// Sequence over the bundled direction table.
    pub fn new(dim: usize, offset: u64) -> Result<Self, QmcError> {
        Self::from_table_str(BUNDLED_DIRECTIONS, dim, offset)
    }

    /// Sequence from a user-provided direction table (see the bundled file
    /// for the row format).
    pub fn from_table_str(table: &str, dim: usize, offset: u64) -> Result<Self, QmcError> {
        let rows = parse_direction_table(table)?;
        if dim == 0 || dim > rows.len() + 1 {
            return Err(QmcError::DimensionTooLarge {
                got: dim,
                max: rows.len() + 1,
            });
        }
        let mut directions = Vec::with_capacity(dim);
        // dimension 1: van der Corput in base 2
        let mut vdc = [0u32; BITS];
        for (i, v) in vdc.iter_mut().enumerate() {
            *v = 1u32 << (31 - i);
        }
        directions.push(vdc);
        for row in rows.iter().take(dim.saturating_sub(1)) {
            directions.push(direction_vector(row));
        }
        Ok(Self {
            directions,
            offset,
            emitted: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// The next point of the sequence.
    pub fn next_point(&mut self) -> Vec<f64> {
        // index skips the all-zero point at k = 0
        let k = self.offset + self.emitted + 1;
        self.emitted += 1;
        self.directions
            .iter()
            .map(|v| {
                let mut acc = 0u32;
                let mut bits = k;
                let mut b = 0usize;
                while bits != 0 && b < BITS {
                    if bits & 1 == 1 {
                        acc ^= v[b];
                    }
                    bits >>= 1;
                    b += 1;
                }
                acc as f64 / (1u64 << 32) as f64
            })
            .collect()
    }
}

struct TableRow {
    s: usize,
    a: u32,
    m: Vec<u32>,
}

fn parse_direction_table(table: &str) -> Result<Vec<TableRow>, QmcError> {
    let mut rows = Vec::new();
    for (line_no, line) in table.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('d') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |tok: &str| -> Result<u64, QmcError> {
            tok.parse::<u64>().map_err(|e| QmcError::TableParse {
                line: line_no + 1,
                message: format!("{tok:?}: {e}"),
            })
        };
        if fields.len() < 4 {
            return Err(QmcError::TableParse {
                line: line_no + 1,
                message: "expected `d s a m_1..m_s`".into(),
            });
        }
        let d = parse(fields[0])? as usize;
        let s = parse(fields[1])? as usize;
        let a = parse(fields[2])? as u32;
        let m: Vec<u32> = fields[3..]
            .iter()
            .map(|t| parse(t).map(|v| v as u32))
            .collect::<Result<_, _>>()?;
        if m.len() != s {
            return Err(QmcError::TableParse {
                line: line_no + 1,
                message: format!("dimension {d}: expected {s} initial numbers, got {}", m.len()),
            });
        }
        for (i, &mi) in m.iter().enumerate() {
            if mi % 2 == 0 || mi >= 1u32 << (i + 1) {
                return Err(QmcError::TableParse {
                    line: line_no + 1,
                    message: format!("m_{} = {mi} must be odd and below 2^{}", i + 1, i + 1),
                });
            }
        }
        if d != rows.len() + 2 {
            return Err(QmcError::TableParse {
                line: line_no + 1,
                message: format!("rows must be consecutive dimensions, expected d={}", rows.len() + 2),
            });
        }
        rows.push(TableRow { s, a, m });
    }
    Ok(rows)
}

fn direction_vector(row: &TableRow) -> [u32; BITS] {
    let s = row.s;
    let mut v = [0u32; BITS];
    for i in 0..s.min(BITS) {
        v[i] = row.m[i] << (31 - i);
    }
    for i in s..BITS {
        let j = i - s;
        v[i] = v[j] ^ (v[j] >> s);
        for k in 0..(s - 1) {
            if (row.a >> k) & 1 == 1 {
                v[i] ^= v[j + 1 + k];
            }
        }
    }
    v
}

/// Estimates the constant term and the requested coefficients by averaging
/// `y(x^k) psi_{u,j}(x_u^k)` over one shared low-discrepancy point set. The
/// model is evaluated exactly once per sample.
pub fn estimate_coeffs_qmc(
    model: &dyn Model,
    input: &RandomInput,
    bases: &[OrthonormalBasis],
    targets: &[(SubsetIndex, MultiIndex)],
    samples: u64,
    seq: &mut SobolSequence,
) -> Result<CoefficientStore, QmcError> {
    let mut engine = QmcPointEngine::from_sobol(model, input, bases, samples, seq)?;
    let mut store = CoefficientStore::new(engine.mean(0).map_err(engine_to_qmc)?);
    for (u, j) in targets {
        let c = engine.coefficient(0, u, j).map_err(engine_to_qmc)?;
        store.insert(u.clone(), j.clone(), c);
    }
    store.set_eval_count(engine.eval_count());
    Ok(store)
}

fn engine_to_qmc(e: EngineError) -> QmcError {
    match e {
        EngineError::Model(m) => QmcError::Model {
            index: 0,
            source: m,
        },
        EngineError::Ortho(o) => QmcError::Ortho(o),
        EngineError::Input(i) => QmcError::Input(i),
        other => QmcError::Model {
            index: 0,
            source: ModelError::Eval(other.to_string()),
        },
    }
}

/// Sampling-based coefficient engine over a fixed point set: every target
/// shares the same samples, and raising the target set reuses the stored
/// model values. Also drives the pseudo-random comparison path in tests.
pub struct QmcPointEngine {
    outputs: usize,
    samples: u64,
    values: Vec<f64>,
    psi: Vec<Vec<f64>>,
    orders: usize,
    n_vars: usize,
}

impl QmcPointEngine {
    pub fn from_sobol(
        model: &dyn Model,
        input: &RandomInput,
        bases: &[OrthonormalBasis],
        samples: u64,
        seq: &mut SobolSequence,
    ) -> Result<Self, QmcError> {
        let points: Vec<Vec<f64>> = (0..samples).map(|_| seq.next_point()).collect();
        Self::from_uniform_points(model, input, bases, &points)
    }

    /// Builds the engine from explicit uniform samples in `(0,1)^N`.
    pub fn from_uniform_points(
        model: &dyn Model,
        input: &RandomInput,
        bases: &[OrthonormalBasis],
        points: &[Vec<f64>],
    ) -> Result<Self, QmcError> {
        let n = input.dim();
        let outputs = model.outputs();
        let orders = bases.iter().map(|b| b.max_order()).min().unwrap_or(0);
        let mut values = Vec::with_capacity(points.len() * outputs);
        let mut psi = vec![Vec::with_capacity(points.len() * (orders + 1)); n];
        for (k, point) in points.iter().enumerate() {
            let mut z = Vec::with_capacity(n);
            for (i, &ui) in point.iter().enumerate() {
                let std = input.marginal(i).standardized();
                z.push(std.inverse_cdf(ui)?);
            }
            let x = input.from_standard(&z)?;
            let y = model.eval(&x).map_err(|source| QmcError::Model {
                index: k as u64,
                source,
            })?;
            values.extend(y);
            for i in 0..n {
                psi[i].extend(bases[i].eval_all(orders, z[i])?);
            }
        }
        Ok(Self {
            outputs,
            samples: points.len() as u64,
            values,
            psi,
            orders,
            n_vars: n,
        })
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

impl CoefficientEngine for QmcPointEngine {
    fn outputs(&self) -> usize {
        self.outputs
    }

    fn mean(&mut self, output: usize) -> Result<f64, EngineError> {
        if output >= self.outputs {
            return Err(EngineError::OutputOutOfRange {
                got: output,
                outputs: self.outputs,
            });
        }
        let mut acc = 0.0;
        for k in 0..self.samples as usize {
            acc += self.values[k * self.outputs + output];
        }
        Ok(acc / self.samples as f64)
    }

    fn coefficient(
        &mut self,
        output: usize,
        u: &SubsetIndex,
        j: &MultiIndex,
    ) -> Result<f64, EngineError> {
        if output >= self.outputs {
            return Err(EngineError::OutputOutOfRange {
                got: output,
                outputs: self.outputs,
            });
        }
        if j.max_order() as usize > self.orders {
            return Err(EngineError::Ortho(OrthoError::OrderExceedsMax {
                got: j.max_order() as usize,
                max: self.orders,
            }));
        }
        let stride = self.orders + 1;
        let mut acc = 0.0;
        for k in 0..self.samples as usize {
            let mut f = self.values[k * self.outputs + output];
            for (p, &var) in u.members().iter().enumerate() {
                debug_assert!((var as usize) < self.n_vars);
                f *= self.psi[var as usize][k * stride + j.orders()[p] as usize];
            }
            acc += f;
        }
        Ok(acc / self.samples as f64)
    }

    fn eval_count(&self) -> u64 {
        self.samples
    }

    fn max_order(&self) -> u32 {
        self.orders as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::MarginalSpec;
    use crate::models::ScalarFnModel;
    use approx::assert_abs_diff_eq;

    /// Independent oracle for dimension 1: the base-2 radical inverse.
    fn van_der_corput(k: u64) -> f64 {
        (k as u32).reverse_bits() as f64 / (1u64 << 32) as f64
    }

    #[test]
    fn first_dimension_is_van_der_corput() {
        let mut seq = SobolSequence::new(1, 0).unwrap();
        assert_abs_diff_eq!(seq.next_point()[0], 0.5);
        let mut seq = SobolSequence::new(1, 0).unwrap();
        for k in 1..=2048u64 {
            assert_eq!(seq.next_point()[0], van_der_corput(k), "k = {k}");
        }
    }

    #[test]
    fn low_dimension_prefix_values() {
        // plain binary indexing: point k x-ors direction numbers over the set
        // bits of k, so coordinate 1 follows the radical inverse of k itself
        let mut seq = SobolSequence::new(2, 0).unwrap();
        let expect = [(0.5, 0.5), (0.25, 0.75), (0.75, 0.25), (0.125, 0.625)];
        for (x1, x2) in expect {
            let p = seq.next_point();
            assert_abs_diff_eq!(p[0], x1);
            assert_abs_diff_eq!(p[1], x2);
        }
    }

    #[test]
    fn equidistribution_means_up_to_dim_100() {
        let dim = 100;
        let mut seq = SobolSequence::new(dim, 0).unwrap();
        let mut mean = vec![0.0; dim];
        let n = 4096;
        for _ in 0..n {
            let p = seq.next_point();
            for (m, v) in mean.iter_mut().zip(&p) {
                *m += v;
            }
        }
        for (i, m) in mean.iter().enumerate() {
            let m = m / n as f64;
            assert!((m - 0.5).abs() <= 0.01, "coordinate {i} mean {m}");
        }
        assert!(matches!(
            SobolSequence::new(1000, 0),
            Err(QmcError::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn product_integral_over_unit_cube() {
        let mut seq = SobolSequence::new(4, 0).unwrap();
        let n = 1u64 << 14;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += seq.next_point().iter().product::<f64>();
        }
        assert_abs_diff_eq!(acc / n as f64, 1.0 / 16.0, epsilon = 1e-4);
    }

    #[test]
    fn points_are_interior_and_deterministic() {
        let run = || -> Vec<Vec<f64>> {
            let mut seq = SobolSequence::new(8, 1000).unwrap();
            (0..256).map(|_| seq.next_point()).collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    fn gaussian_setup(n: usize) -> (RandomInput, Vec<OrthonormalBasis>) {
        let input = RandomInput::new(
            (0..n)
                .map(|_| MarginalSpec::gaussian(0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap();
        let bases = input
            .marginals()
            .iter()
            .map(|m| OrthonormalBasis::build(m, 8).unwrap())
            .collect();
        (input, bases)
    }

    #[test]
    fn constant_model_mean_is_exact() {
        let (input, bases) = gaussian_setup(3);
        let model = ScalarFnModel::new(3, |_| 3.0);
        let mut seq = SobolSequence::new(3, 0).unwrap();
        let u = SubsetIndex::new(vec![0]).unwrap();
        let j = MultiIndex::new(vec![1], 1).unwrap();
        let store = estimate_coeffs_qmc(
            &model,
            &input,
            &bases,
            &[(u.clone(), j.clone())],
            4096,
            &mut seq,
        )
        .unwrap();
        assert_eq!(store.y_empty, 3.0);
        assert_eq!(store.eval_count(), 4096);
        assert!(store.get(&u, &j).unwrap().abs() < 5e-3);
    }

    #[test]
    fn orthonormal_projection_recovers_unit_coefficient() {
        let (input, bases) = gaussian_setup(2);
        let model = ScalarFnModel::new(2, |x: &[f64]| x[0]);
        let mut seq = SobolSequence::new(2, 0).unwrap();
        let u = SubsetIndex::new(vec![0]).unwrap();
        let j = MultiIndex::new(vec![1], 1).unwrap();
        let store =
            estimate_coeffs_qmc(&model, &input, &bases, &[(u.clone(), j.clone())], 8192, &mut seq)
                .unwrap();
        assert!((store.get(&u, &j).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn estimator_is_linear_in_the_model() {
        let (input, bases) = gaussian_setup(2);
        let m1 = ScalarFnModel::new(2, |x: &[f64]| x[0] * x[0] + x[1]);
        let m2 = ScalarFnModel::new(2, |x: &[f64]| (x[1] * 0.5).sin());
        let combined = ScalarFnModel::new(2, |x: &[f64]| {
            2.0 * (x[0] * x[0] + x[1]) - 3.0 * (x[1] * 0.5).sin()
        });
        let targets: Vec<(SubsetIndex, MultiIndex)> = vec![
            (
                SubsetIndex::new(vec![0]).unwrap(),
                MultiIndex::new(vec![2], 1).unwrap(),
            ),
            (
                SubsetIndex::new(vec![0, 1]).unwrap(),
                MultiIndex::new(vec![1, 1], 2).unwrap(),
            ),
        ];
        let run = |model: &dyn Model| {
            let mut seq = SobolSequence::new(2, 0).unwrap();
            estimate_coeffs_qmc(model, &input, &bases, &targets, 1024, &mut seq).unwrap()
        };
        let s1 = run(&m1);
        let s2 = run(&m2);
        let sc = run(&combined);
        for (u, j) in &targets {
            let lhs = sc.get(u, j).unwrap();
            let rhs = 2.0 * s1.get(u, j).unwrap() - 3.0 * s2.get(u, j).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            sc.y_empty,
            2.0 * s1.y_empty - 3.0 * s2.y_empty,
            epsilon = 1e-12
        );
    }

    #[test]
    fn model_failure_reports_sample_index() {
        let (input, bases) = gaussian_setup(1);
        let model = ScalarFnModel::new(1, |x: &[f64]| {
            if x[0] > 1.0 {
                f64::NAN
            } else {
                x[0]
            }
        });
        let mut seq = SobolSequence::new(1, 0).unwrap();
        let err = estimate_coeffs_qmc(&model, &input, &bases, &[], 64, &mut seq).unwrap_err();
        match err {
            QmcError::Model { index, .. } => assert!(index < 64),
            other => panic!("unexpected error {other}"),
        }
    }
}
