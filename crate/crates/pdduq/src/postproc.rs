//! Monte Carlo resampling of surrogates and original models for output
//! distributions, plus convergence-study sweeps over tolerance settings.
//!
//! Sampling uses a counter-based generator (ChaCha8) with one substream per
//! block, so results are bit-reproducible for a given 64-bit seed at any
//! thread count.

use std::io::Write;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::input::{InputError, RandomInput};
use crate::models::{Model, ModelError};
use crate::pdd::{PddError, SurrogateModel};

const BLOCK: u64 = 65_536;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("model evaluation failed at sample {index}: {source}")]
    Model {
        index: u64,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Pdd(#[from] PddError),
}

/// Histogram with Freedman-Diaconis bin widths; masses sum to one.
#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

/// Aggregated Monte Carlo output distribution: moments, a sorted quantile
/// table, and a histogram.
#[derive(Debug, Clone, Serialize)]
pub struct McsSummary {
    pub samples: u64,
    pub seed: u64,
    pub mean: f64,
    pub variance: f64,
    /// (cumulative probability, value) pairs, probabilities increasing.
    pub quantiles: Vec<(f64, f64)>,
    pub histogram: Histogram,
}

impl McsSummary {
    fn from_values(mut values: Vec<f64>, seed: u64) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let table_len = values.len().min(2049);
        let mut quantiles = Vec::with_capacity(table_len);
        for k in 0..table_len {
            let p = if table_len == 1 {
                1.0
            } else {
                k as f64 / (table_len - 1) as f64
            };
            let idx = ((p * (values.len() - 1) as f64).round() as usize).min(values.len() - 1);
            quantiles.push((p, values[idx]));
        }
        let histogram = freedman_diaconis(&values);
        Self {
            samples: values.len() as u64,
            seed,
            mean,
            variance,
            quantiles,
            histogram,
        }
    }

    /// Empirical distribution function interpolated from the quantile table.
    pub fn cdf(&self, x: f64) -> f64 {
        let q = &self.quantiles;
        if x < q[0].1 {
            return 0.0;
        }
        if x >= q[q.len() - 1].1 {
            return 1.0;
        }
        let mut lo = 0usize;
        let mut hi = q.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if q[mid].1 <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (p0, v0) = q[lo];
        let (p1, v1) = q[hi];
        if v1 > v0 {
            p0 + (p1 - p0) * (x - v0) / (v1 - v0)
        } else {
            p0
        }
    }
}

/// Largest vertical distance between two empirical distribution functions,
/// evaluated over both quantile tables.
pub fn ks_distance(a: &McsSummary, b: &McsSummary) -> f64 {
    let mut d: f64 = 0.0;
    for (_, v) in a.quantiles.iter().chain(b.quantiles.iter()) {
        d = d.max((a.cdf(*v) - b.cdf(*v)).abs());
    }
    d
}

fn freedman_diaconis(sorted: &[f64]) -> Histogram {
    let n = sorted.len();
    let lo = sorted[0];
    let hi = sorted[n - 1];
    let q1 = sorted[(0.25 * (n - 1) as f64).round() as usize];
    let q3 = sorted[(0.75 * (n - 1) as f64).round() as usize];
    let iqr = q3 - q1;
    let width = 2.0 * iqr / (n as f64).cbrt();
    if !(width > 0.0) || hi <= lo {
        return Histogram {
            edges: vec![lo, hi.max(lo)],
            masses: vec![1.0],
        };
    }
    let bins = (((hi - lo) / width).ceil() as usize).clamp(1, 4096);
    let mut edges = Vec::with_capacity(bins + 1);
    for k in 0..=bins {
        edges.push(lo + (hi - lo) * k as f64 / bins as f64);
    }
    let mut masses = vec![0.0; bins];
    let unit = 1.0 / n as f64;
    for &v in sorted {
        let mut b = ((v - lo) / (hi - lo) * bins as f64) as usize;
        if b >= bins {
            b = bins - 1;
        }
        masses[b] += unit;
    }
    Histogram { edges, masses }
}

/// Uniform deviate strictly inside (0, 1) from the raw generator stream.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn block_ranges(samples: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < samples {
        let len = BLOCK.min(samples - start);
        out.push((start, len));
        start += len;
    }
    out
}

/// Samples the surrogate (never the original model) under the input law and
/// aggregates the output distribution. Deterministic per seed.
pub fn embedded_mcs(
    surrogate: &SurrogateModel,
    samples: u64,
    seed: u64,
) -> Result<McsSummary, PostprocError> {
    if samples == 0 {
        return Err(PostprocError::NoSamples);
    }
    let n = surrogate.input().dim();
    let standard: Vec<_> = surrogate
        .input()
        .marginals()
        .iter()
        .map(|m| m.standardized())
        .collect();
    let blocks = block_ranges(samples);
    let values: Vec<Vec<f64>> = blocks
        .par_iter()
        .enumerate()
        .map(|(block_idx, &(_, len))| -> Result<Vec<f64>, PostprocError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(block_idx as u64);
            let mut z = vec![0.0; n];
            let mut out = Vec::with_capacity(len as usize);
            for _ in 0..len {
                for (zi, m) in z.iter_mut().zip(&standard) {
                    *zi = m.inverse_cdf(open_unit(&mut rng))?;
                }
                out.push(surrogate.evaluate(&z)?);
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    Ok(McsSummary::from_values(values.concat(), seed))
}

/// Crude Monte Carlo against the original model: one summary per output.
/// Consumes exactly `samples` model evaluations.
pub fn crude_mcs(
    model: &dyn Model,
    input: &RandomInput,
    samples: u64,
    seed: u64,
) -> Result<Vec<McsSummary>, PostprocError> {
    if samples == 0 {
        return Err(PostprocError::NoSamples);
    }
    let n = input.dim();
    let outputs = model.outputs();
    let blocks = block_ranges(samples);
    let values: Vec<Vec<Vec<f64>>> = blocks
        .par_iter()
        .enumerate()
        .map(
            |(block_idx, &(start, len))| -> Result<Vec<Vec<f64>>, PostprocError> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(block_idx as u64);
                let mut x = vec![0.0; n];
                let mut out = vec![Vec::with_capacity(len as usize); outputs];
                for k in 0..len {
                    for (xi, m) in x.iter_mut().zip(input.marginals()) {
                        *xi = m.inverse_cdf(open_unit(&mut rng))?;
                    }
                    let y = model.eval(&x).map_err(|source| PostprocError::Model {
                        index: start + k,
                        source,
                    })?;
                    for (o, v) in y.into_iter().enumerate() {
                        out[o].push(v);
                    }
                }
                Ok(out)
            },
        )
        .collect::<Result<_, _>>()?;
    let mut summaries = Vec::with_capacity(outputs);
    for o in 0..outputs {
        let mut all = Vec::with_capacity(samples as usize);
        for block in &values {
            all.extend_from_slice(&block[o]);
        }
        summaries.push(McsSummary::from_values(all, seed));
    }
    Ok(summaries)
}

/// One row of a convergence sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub tolerance: f64,
    pub rel_error: f64,
    pub coefficient_count: u128,
    pub eval_count: u64,
    pub method: String,
}

/// Sweep outcome with the reference the errors were measured against.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub reference_variance: f64,
    pub reference_label: String,
    pub rows: Vec<SweepRow>,
}

/// Output of one sweep run, reported by the caller-supplied runner.
pub struct SweepRun {
    pub variance: f64,
    pub coefficient_count: u128,
    pub eval_count: u64,
    pub method: String,
}

/// Runs the supplied campaign once per tolerance and records the relative
/// variance error against the declared reference.
pub fn tolerance_sweep<E, F>(
    tolerances: &[f64],
    reference_variance: f64,
    reference_label: &str,
    mut run: F,
) -> Result<SweepResult, E>
where
    F: FnMut(f64) -> Result<SweepRun, E>,
{
    let mut rows = Vec::with_capacity(tolerances.len());
    for &tol in tolerances {
        let out = run(tol)?;
        rows.push(SweepRow {
            tolerance: tol,
            rel_error: (out.variance - reference_variance).abs() / reference_variance,
            coefficient_count: out.coefficient_count,
            eval_count: out.eval_count,
            method: out.method,
        });
    }
    Ok(SweepResult {
        reference_variance,
        reference_label: reference_label.to_string(),
        rows,
    })
}

pub fn write_cdf_csv<W: Write>(summary: &McsSummary, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "value,cumulative_probability")?;
    for (p, v) in &summary.quantiles {
        writeln!(out, "{v},{p}")?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(summary: &McsSummary, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "left_edge,right_edge,mass")?;
    let h = &summary.histogram;
    for (k, mass) in h.masses.iter().enumerate() {
        writeln!(out, "{},{},{mass}", h.edges[k], h.edges[k + 1])?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(sweep: &SweepResult, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "tolerance,rel_error,coefficient_count,eval_count,method")?;
    for row in &sweep.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.tolerance, row.rel_error, row.coefficient_count, row.eval_count, row.method
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::MarginalSpec;
    use crate::models::ScalarFnModel;
    use crate::orthopoly::OrthonormalBasis;
    use crate::pdd::{CoefficientStore, MultiIndex, SubsetIndex};

    fn gaussian_surrogate(coeffs: &[(Vec<u32>, Vec<u32>, f64)], y_empty: f64) -> SurrogateModel {
        let n = 3;
        let input = RandomInput::new(
            (0..n)
                .map(|_| MarginalSpec::gaussian(0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap();
        let bases: Vec<_> = input
            .marginals()
            .iter()
            .map(|m| OrthonormalBasis::build(m, 6).unwrap())
            .collect();
        let mut store = CoefficientStore::new(y_empty);
        for (u, j, c) in coeffs {
            store.insert(
                SubsetIndex::new(u.clone()).unwrap(),
                MultiIndex::new(j.clone(), u.len()).unwrap(),
                *c,
            );
        }
        SurrogateModel::new(store, bases, input).unwrap()
    }

    #[test]
    fn constant_surrogate_collapses() {
        let surrogate = gaussian_surrogate(&[], 4.25);
        let mcs = embedded_mcs(&surrogate, 5000, 7).unwrap();
        assert_eq!(mcs.mean, 4.25);
        assert_eq!(mcs.variance, 0.0);
        assert_eq!(mcs.histogram.masses.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn embedded_mean_and_variance_match_the_expansion() {
        // y = 2 + psi1(x1) + 0.5 psi2(x2): mean 2, variance 1.25
        let surrogate = gaussian_surrogate(
            &[
                (vec![0], vec![1], 1.0),
                (vec![1], vec![2], 0.5),
            ],
            2.0,
        );
        let l = 200_000u64;
        let mcs = embedded_mcs(&surrogate, l, 42).unwrap();
        let se_mean = (mcs.variance / l as f64).sqrt();
        assert!((mcs.mean - 2.0).abs() <= 4.0 * se_mean, "mean {}", mcs.mean);
        // sample-variance standard error from the fourth central moment
        let m4_proxy = 3.0 * mcs.variance * mcs.variance;
        let se_var = ((m4_proxy + 2.0 * mcs.variance * mcs.variance) / l as f64).sqrt();
        assert!(
            (mcs.variance - 1.25).abs() <= 5.0 * se_var,
            "variance {}",
            mcs.variance
        );
    }

    #[test]
    fn quantiles_monotone_and_histogram_mass_one() {
        let surrogate = gaussian_surrogate(&[(vec![0], vec![1], 1.0)], 0.0);
        let mcs = embedded_mcs(&surrogate, 40_000, 3).unwrap();
        for w in mcs.quantiles.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        assert!((mcs.histogram.masses.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(mcs.histogram.masses.len() > 4);
    }

    #[test]
    fn crude_mcs_linear_gaussian_sum() {
        let n = 4;
        let input = RandomInput::new(
            (0..n)
                .map(|_| MarginalSpec::gaussian(0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap();
        let model = ScalarFnModel::new(n, |x: &[f64]| x.iter().sum());
        let mcs = crude_mcs(&model, &input, 400_000, 11).unwrap();
        assert_eq!(mcs.len(), 1);
        assert!((mcs[0].variance - n as f64).abs() / n as f64 <= 0.01);
        assert!(mcs[0].mean.abs() <= 0.02);
    }

    #[test]
    fn seed_determinism_bitwise() {
        let surrogate = gaussian_surrogate(&[(vec![0], vec![1], 2.0)], 1.0);
        let a = embedded_mcs(&surrogate, 100_000, 99).unwrap();
        let b = embedded_mcs(&surrogate, 100_000, 99).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());
        assert_eq!(a.quantiles, b.quantiles);
        let c = embedded_mcs(&surrogate, 100_000, 100).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn ks_distance_detects_shift() {
        let base = gaussian_surrogate(&[(vec![0], vec![1], 1.0)], 0.0);
        let shifted = gaussian_surrogate(&[(vec![0], vec![1], 1.0)], 0.5);
        let a = embedded_mcs(&base, 50_000, 5).unwrap();
        let b = embedded_mcs(&base, 50_000, 6).unwrap();
        let c = embedded_mcs(&shifted, 50_000, 7).unwrap();
        assert!(ks_distance(&a, &b) <= 0.02);
        assert!(ks_distance(&a, &c) > 0.15);
    }

    #[test]
    fn sweep_rows_and_empty_list() {
        let sweep = tolerance_sweep::<std::convert::Infallible, _>(&[], 1.0, "closed form", |_| {
            unreachable!()
        })
        .unwrap();
        assert!(sweep.rows.is_empty());
        let sweep = tolerance_sweep::<std::convert::Infallible, _>(
            &[1e-2, 1e-3],
            2.0,
            "closed form",
            |tol| {
                Ok(SweepRun {
                    variance: 2.0 * (1.0 + tol),
                    coefficient_count: 10,
                    eval_count: 100,
                    method: "adaptive-full".into(),
                })
            },
        )
        .unwrap();
        assert_eq!(sweep.rows.len(), 2);
        assert!((sweep.rows[0].rel_error - 1e-2).abs() < 1e-15);
        let mut csv = Vec::new();
        write_sweep_csv(&sweep, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }
}
