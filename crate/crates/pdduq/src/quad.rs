//! Dimension-reduction integration of expansion coefficients: signed sums of
//! at-most-R-dimensional integrals anchored at a reference point, evaluated on
//! full tensor grids or on the nested extended fully symmetric interpolatory
//! (FSI) sparse grid for gaussian measures.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use thiserror::Error;

use crate::input::{InputError, RandomInput};
use crate::models::{Model, ModelError};
use crate::orthopoly::{GaussRule, OrthoError, OrthonormalBasis};
use crate::pdd::{
    binomial_i64, subsets_of_cardinality, CoefficientStore, MultiIndex, PddError, SubsetIndex,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Pdd(#[from] PddError),
    #[error("target order {order} exceeds the exactness of the {n_v}-point rule (degree {max})")]
    OrderTooHigh { order: u32, n_v: usize, max: u32 },
    #[error("sparse-grid level {0} exceeds the computed generator range (max 4)")]
    LevelTooHigh(u32),
    #[error("sparse-grid engine requires gaussian-standardizable marginals")]
    NotGaussianStandardizable,
    #[error("output index {got} out of range for a model with {outputs} outputs")]
    OutputOutOfRange { got: usize, outputs: usize },
}

/// Signed layer coefficients `(-1)^i C(N-R+i-1, i)` of the dimension-reduction
/// sum, for layers i = 0..R (layer i holds the subsets of size R - i).
pub fn dimred_weights(n_vars: usize, r: usize) -> Vec<(usize, i64)> {
    assert!(r <= n_vars);
    (0..=r)
        .map(|i| {
            let sign = if i % 2 == 0 { 1 } else { -1 };
            let a = (n_vars - r) as i64 + i as i64 - 1;
            (i, sign * binomial_i64(a, i as u32))
        })
        .collect()
}

/// The member subsets and signed weights of a dimension-reduction plan at a
/// fixed reference point (standardized coordinates). Zero-weight layers are
/// dropped before any grid is built.
#[derive(Debug, Clone)]
pub struct DimRedPlan {
    pub r: usize,
    pub reference_std: Vec<f64>,
    pub layers: Vec<(f64, Vec<SubsetIndex>)>,
}

impl DimRedPlan {
    pub fn new(n_vars: usize, r: usize, reference_std: Vec<f64>) -> Result<Self, PddError> {
        let mut layers = Vec::new();
        for (i, coeff) in dimred_weights(n_vars, r) {
            if coeff == 0 {
                continue;
            }
            let card = r - i;
            let subsets = if card == 0 {
                Vec::new()
            } else {
                subsets_of_cardinality(n_vars, card)
                    .into_iter()
                    .map(SubsetIndex::new)
                    .collect::<Result<Vec<_>, _>>()?
            };
            layers.push((coeff as f64, subsets));
        }
        Ok(Self {
            r,
            reference_std,
            layers,
        })
    }
}

/// Rounds to 12 significant digits; shared cut-plane points collide on purpose.
pub(crate) fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(11 - magnitude);
    (x * scale).round() / scale
}

fn cache_key(x: &[f64]) -> Vec<u64> {
    x.iter()
        .map(|&v| {
            let r = round_sig(v);
            // normalize the sign of zero so -0.0 and 0.0 collide
            if r == 0.0 {
                0u64
            } else {
                r.to_bits()
            }
        })
        .collect()
}

/// Physical-coordinate-keyed cache of model values: a model point is evaluated
/// at most once per campaign; the counter tracks actual model calls.
pub struct EvalCache {
    map: Mutex<HashMap<Vec<u64>, Vec<f64>>>,
    evals: AtomicU64,
}

impl Default for EvalCache {
    fn default() -> Self {
        Self::new()
    }
}

impl EvalCache {
    pub fn new() -> Self {
        Self {
            map: Mutex::new(HashMap::new()),
            evals: AtomicU64::new(0),
        }
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    /// Evaluates the model at every physical point, reusing cached values and
    /// running misses in parallel. Output order matches the input order.
    pub fn eval_batch(
        &self,
        model: &dyn Model,
        points: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let keys: Vec<Vec<u64>> = points.iter().map(|p| cache_key(p)).collect();
        let mut results: Vec<Option<Vec<f64>>> = vec![None; points.len()];
        let mut misses: Vec<usize> = Vec::new();
        {
            let map = self.map.lock().unwrap();
            for (i, key) in keys.iter().enumerate() {
                if let Some(v) = map.get(key) {
                    results[i] = Some(v.clone());
                } else {
                    misses.push(i);
                }
            }
        }
        // dedup misses that share a key within this batch
        let mut first_for_key: HashMap<&[u64], usize> = HashMap::new();
        let mut unique: Vec<usize> = Vec::new();
        for &i in &misses {
            if first_for_key.insert(&keys[i], i).is_none() {
                unique.push(i);
            }
        }
        let fresh: Vec<(usize, Vec<f64>)> = unique
            .par_iter()
            .map(|&i| model.eval(&points[i]).map(|v| (i, v)))
            .collect::<Result<Vec<_>, _>>()?;
        self.evals.fetch_add(fresh.len() as u64, Ordering::Relaxed);
        {
            let mut map = self.map.lock().unwrap();
            for (i, v) in &fresh {
                map.insert(keys[*i].clone(), v.clone());
            }
        }
        for &i in &misses {
            if results[i].is_none() {
                let map = self.map.lock().unwrap();
                results[i] = map.get(&keys[i]).cloned();
            }
        }
        Ok(results.into_iter().map(|r| r.expect("filled")).collect())
    }
}

/// Estimation backend shared by the adaptive loop and the one-shot helpers.
pub trait CoefficientEngine {
    fn outputs(&self) -> usize;
    /// The constant term `y_empty` for one output.
    fn mean(&mut self, output: usize) -> Result<f64, EngineError>;
    /// One expansion coefficient for one output.
    fn coefficient(
        &mut self,
        output: usize,
        u: &SubsetIndex,
        j: &MultiIndex,
    ) -> Result<f64, EngineError>;
    /// Original-model evaluations consumed so far.
    fn eval_count(&self) -> u64;
    /// The largest per-variable order this engine can resolve.
    fn max_order(&self) -> u32;
}

fn mixed_radix_unrank(mut idx: usize, card: usize, radix: usize, out: &mut [usize]) {
    for slot in out.iter_mut().take(card).rev() {
        *slot = idx % radix;
        idx /= radix;
    }
}

// ---------------------------------------------------------------------------
// Full-grid engine
// ---------------------------------------------------------------------------

/// Dimension-reduction integration on per-subset tensor grids of an n_v-point
/// measure-consistent Gauss rule per variable.
pub struct FullGridEngine<'m> {
    model: &'m dyn Model,
    input: RandomInput,
    plan: DimRedPlan,
    n_v: usize,
    rules: Vec<GaussRule>,
    psi: Vec<Vec<Vec<f64>>>,
    cache: EvalCache,
    grids: HashMap<SubsetIndex, Vec<f64>>,
    tables: HashMap<(SubsetIndex, SubsetIndex, usize), Vec<f64>>,
    sums: HashMap<(SubsetIndex, usize), f64>,
    order_cap: u32,
}

impl<'m> FullGridEngine<'m> {
    /// `reference` is a physical-space anchor; defaults to the input mean.
    pub fn new(
        model: &'m dyn Model,
        input: &RandomInput,
        bases: &[OrthonormalBasis],
        r: usize,
        n_v: usize,
        reference: Option<Vec<f64>>,
    ) -> Result<Self, EngineError> {
        let reference_std = input.to_standard(&reference.unwrap_or_else(|| input.mean()))?;
        let plan = DimRedPlan::new(input.dim(), r, reference_std)?;
        let mut rules = Vec::with_capacity(input.dim());
        let mut psi = Vec::with_capacity(input.dim());
        let mut order_cap = u32::MAX;
        for basis in bases.iter().take(input.dim()) {
            let rule = basis.gauss_rule(n_v)?;
            let cap = basis.max_order().min(2 * n_v - 1);
            order_cap = order_cap.min(cap as u32);
            let mut per_node = Vec::with_capacity(n_v);
            for &x in rule.nodes() {
                per_node.push(basis.eval_all(cap, x)?);
            }
            psi.push(per_node);
            rules.push(rule);
        }
        Ok(Self {
            model,
            input: input.clone(),
            plan,
            n_v,
            rules,
            psi,
            cache: EvalCache::new(),
            grids: HashMap::new(),
            tables: HashMap::new(),
            sums: HashMap::new(),
            order_cap,
        })
    }

    fn ensure_grid(&mut self, v: &SubsetIndex) -> Result<(), EngineError> {
        if self.grids.contains_key(v) {
            return Ok(());
        }
        let card = v.cardinality();
        let total = self.n_v.pow(card as u32);
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; card];
        for flat in 0..total {
            mixed_radix_unrank(flat, card, self.n_v, &mut idx);
            let mut z = self.plan.reference_std.clone();
            for (p, &var) in v.members().iter().enumerate() {
                z[var as usize] = self.rules[var as usize].nodes()[idx[p]];
            }
            points.push(self.input.from_standard(&z)?);
        }
        let values = self.cache.eval_batch(self.model, &points)?;
        let outputs = self.model.outputs();
        let mut flat_values = Vec::with_capacity(total * outputs);
        for v in values {
            flat_values.extend(v);
        }
        self.grids.insert(v.clone(), flat_values);
        Ok(())
    }

    /// Marginal table over the u-face of the v-grid: all grid weights folded
    /// in, complement dimensions summed out.
    fn table(
        &mut self,
        v: &SubsetIndex,
        u: &SubsetIndex,
        output: usize,
    ) -> Result<&Vec<f64>, EngineError> {
        let key = (v.clone(), u.clone(), output);
        if !self.tables.contains_key(&key) {
            self.ensure_grid(v)?;
            let card = v.cardinality();
            let outputs = self.model.outputs();
            let values = &self.grids[v];
            let u_pos: Vec<usize> = u
                .members()
                .iter()
                .map(|m| v.members().iter().position(|x| x == m).unwrap())
                .collect();
            let mut table = vec![0.0; self.n_v.pow(u.cardinality() as u32)];
            let total = self.n_v.pow(card as u32);
            let mut idx = vec![0usize; card];
            for flat in 0..total {
                mixed_radix_unrank(flat, card, self.n_v, &mut idx);
                let mut w = 1.0;
                for (p, &var) in v.members().iter().enumerate() {
                    w *= self.rules[var as usize].weights()[idx[p]];
                }
                let mut flat_u = 0usize;
                for &p in &u_pos {
                    flat_u = flat_u * self.n_v + idx[p];
                }
                table[flat_u] += w * values[flat * outputs + output];
            }
            self.tables.insert(key.clone(), table);
        }
        Ok(&self.tables[&key])
    }

    fn grid_sum(&mut self, v: &SubsetIndex, output: usize) -> Result<f64, EngineError> {
        let key = (v.clone(), output);
        if let Some(&s) = self.sums.get(&key) {
            return Ok(s);
        }
        self.ensure_grid(v)?;
        let card = v.cardinality();
        let outputs = self.model.outputs();
        let values = &self.grids[v];
        let total = self.n_v.pow(card as u32);
        let mut idx = vec![0usize; card];
        let mut acc = 0.0;
        for flat in 0..total {
            mixed_radix_unrank(flat, card, self.n_v, &mut idx);
            let mut w = 1.0;
            for (p, &var) in v.members().iter().enumerate() {
                w *= self.rules[var as usize].weights()[idx[p]];
            }
            acc += w * values[flat * outputs + output];
        }
        self.sums.insert(key, acc);
        Ok(acc)
    }

    fn check_output(&self, output: usize) -> Result<(), EngineError> {
        if output >= self.model.outputs() {
            return Err(EngineError::OutputOutOfRange {
                got: output,
                outputs: self.model.outputs(),
            });
        }
        Ok(())
    }

    /// Writes every subset grid as CSV rows `subset,weight,x_1,...,x_N`
    /// (standardized coordinates, anchor coordinates included).
    pub fn write_grid_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "subset,weight,coordinates")?;
        for (_, subsets) in &self.plan.layers {
            for v in subsets {
                let card = v.cardinality();
                let total = self.n_v.pow(card as u32);
                let mut idx = vec![0usize; card];
                for flat in 0..total {
                    mixed_radix_unrank(flat, card, self.n_v, &mut idx);
                    let mut z = self.plan.reference_std.clone();
                    let mut w = 1.0;
                    for (p, &var) in v.members().iter().enumerate() {
                        z[var as usize] = self.rules[var as usize].nodes()[idx[p]];
                        w *= self.rules[var as usize].weights()[idx[p]];
                    }
                    let coords: Vec<String> = z.iter().map(|c| format!("{c}")).collect();
                    writeln!(out, "\"{v}\",{w},{}", coords.join(" "))?;
                }
            }
        }
        Ok(())
    }
}

impl CoefficientEngine for FullGridEngine<'_> {
    fn outputs(&self) -> usize {
        self.model.outputs()
    }

    fn mean(&mut self, output: usize) -> Result<f64, EngineError> {
        self.check_output(output)?;
        let layers = self.plan.layers.clone();
        let mut acc = 0.0;
        for (coeff, subsets) in &layers {
            if subsets.is_empty() {
                let c_phys = self.input.from_standard(&self.plan.reference_std)?;
                let y = self.cache.eval_batch(self.model, &[c_phys])?;
                acc += coeff * y[0][output];
            } else {
                for v in subsets {
                    acc += coeff * self.grid_sum(v, output)?;
                }
            }
        }
        Ok(acc)
    }

    fn coefficient(
        &mut self,
        output: usize,
        u: &SubsetIndex,
        j: &MultiIndex,
    ) -> Result<f64, EngineError> {
        self.check_output(output)?;
        if j.max_order() > self.order_cap {
            return Err(EngineError::OrderTooHigh {
                order: j.max_order(),
                n_v: self.n_v,
                max: self.order_cap,
            });
        }
        let layers = self.plan.layers.clone();
        let card_u = u.cardinality();
        let mut acc = 0.0;
        for (coeff, subsets) in &layers {
            for v in subsets {
                if v.cardinality() < card_u || !u.is_subset_of(v) {
                    continue;
                }
                let table = self.table(v, u, output)?.clone();
                let mut idx = vec![0usize; card_u];
                let mut inner = 0.0;
                for (flat, t) in table.iter().enumerate() {
                    mixed_radix_unrank(flat, card_u, self.n_v, &mut idx);
                    let mut psi = 1.0;
                    for (p, &var) in u.members().iter().enumerate() {
                        psi *= self.psi[var as usize][idx[p]][j.orders()[p] as usize];
                    }
                    inner += t * psi;
                }
                acc += coeff * inner;
            }
        }
        Ok(acc)
    }

    fn eval_count(&self) -> u64 {
        self.cache.eval_count()
    }

    fn max_order(&self) -> u32 {
        self.order_cap
    }
}

/// Total full-grid evaluation budget `L_FG = sum_i sum_{|v|=R-i} n_v^{|v|}`;
/// with caching the engine consumes strictly fewer calls when subsets share
/// cut faces.
pub fn fullgrid_eval_budget(n_vars: usize, r: usize, n_v: usize) -> u128 {
    (0..=r)
        .map(|i| {
            crate::pdd::binomial_u128(n_vars, r - i) * (n_v as u128).pow((r - i) as u32)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Extended fully symmetric interpolatory (FSI) sparse grid
// ---------------------------------------------------------------------------

/// Generators of the extended rule: the 3-point Gauss-Hermite rule {0, sqrt 3}
/// extended by the three roots of `4 z^3 - 105 z^2 + 630 z - 315` (z = a^2),
/// in ascending order. Frozen values validated by the exactness tests.
pub const FSI_GENERATORS: [f64; 5] = [
    0.0,
    1.732_050_807_568_877_2,
    0.741_095_349_994_540_8,
    2.861_279_576_057_058_1,
    4.184_956_017_672_731_9,
];

/// Measure constants `a_i` of the weight recursion for the standard gaussian;
/// `a_2 = 0` is what prunes entire orbits from the extended rule.
pub const FSI_A_CONSTANTS: [f64; 5] = [1.0, 1.0, 0.0, 6.0, 7.583_141_219_131_264_7];

pub const FSI_MAX_LEVEL: u32 = 4;

/// Weights below this magnitude are treated as the construction's exact zeros.
const FSI_ZERO: f64 = 1e-12;

/// All distinct partitions `p_1 >= ... >= p_d >= 0` with `sum p <= level`.
pub fn fsi_partitions(level: u32, d: usize) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, maxv: u32, remaining: u32, d: usize, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == d {
            out.push(prefix.clone());
            return;
        }
        let cap = maxv.min(remaining);
        for v in (0..=cap).rev() {
            prefix.push(v);
            rec(prefix, v, remaining - v, d, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), level, level, d, &mut out);
    out
}

/// The weight attached to one partition orbit at the given level: the
/// alternating sum over interior corrections, halved once per nonzero entry.
pub fn fsi_weight(partition: &[u32], level: u32) -> Result<f64, EngineError> {
    if level > FSI_MAX_LEVEL || partition.iter().any(|&p| p > FSI_MAX_LEVEL) {
        return Err(EngineError::LevelTooHigh(level));
    }
    let norm: u32 = partition.iter().sum();
    if norm > level {
        return Ok(0.0);
    }
    let budget = level - norm;
    let nonzero = partition.iter().filter(|&&p| p > 0).count() as i32;

    fn rec(partition: &[u32], r: usize, remaining: u32, acc: f64, total: &mut f64) {
        if r == partition.len() {
            *total += acc;
            return;
        }
        for k in 0..=remaining {
            let idx = (k + partition[r]) as usize;
            let mut denom = 1.0;
            for j in 0..=idx {
                if j != partition[r] as usize {
                    denom *= FSI_GENERATORS[partition[r] as usize].powi(2)
                        - FSI_GENERATORS[j].powi(2);
                }
            }
            rec(
                partition,
                r + 1,
                remaining - k,
                acc * FSI_A_CONSTANTS[idx] / denom,
                total,
            );
        }
    }
    let mut total = 0.0;
    rec(partition, 0, budget, 1.0, &mut total);
    Ok(total * 2f64.powi(-nonzero))
}

fn distinct_permutations(p: &[u32]) -> Vec<Vec<u32>> {
    let mut sorted = p.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    loop {
        out.push(sorted.iter().rev().copied().collect());
        // next lexicographic permutation of `sorted`
        let n = sorted.len();
        let mut i = n.saturating_sub(1);
        while i > 0 && sorted[i - 1] >= sorted[i] {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        let mut j = n - 1;
        while sorted[j] <= sorted[i - 1] {
            j -= 1;
        }
        sorted.swap(i - 1, j);
        sorted[i..].reverse();
    }
}

/// Points (standardized gaussian coordinates) and current-level weights of the
/// d-dimensional rule: for each nonzero-weight partition, all permutations and
/// sign combinations over nonzero generators.
pub fn fsi_rule(d: usize, level: u32) -> Result<Vec<(Vec<f64>, f64)>, EngineError> {
    let mut out = Vec::new();
    for partition in fsi_partitions(level, d) {
        let w = fsi_weight(&partition, level)?;
        if w.abs() <= FSI_ZERO {
            continue;
        }
        for perm in distinct_permutations(&partition) {
            let nonzero: Vec<usize> = (0..d)
                .filter(|&i| FSI_GENERATORS[perm[i] as usize] != 0.0)
                .collect();
            for signs in 0..(1u32 << nonzero.len()) {
                let mut point: Vec<f64> =
                    perm.iter().map(|&q| FSI_GENERATORS[q as usize]).collect();
                for (b, &i) in nonzero.iter().enumerate() {
                    if (signs >> b) & 1 == 1 {
                        point[i] = -point[i];
                    }
                }
                out.push((point, w));
            }
        }
    }
    Ok(out)
}

/// The nested point set through the given level: every point that carries a
/// nonzero weight at this or any lower level. Raising the level reuses all of
/// these evaluations.
pub fn fsi_nested_points(d: usize, level: u32) -> Result<Vec<Vec<f64>>, EngineError> {
    let mut seen: std::collections::BTreeSet<Vec<u64>> = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for l in 0..=level {
        for (point, _) in fsi_rule(d, l)? {
            let key = cache_key(&point);
            if seen.insert(key) {
                out.push(point);
            }
        }
    }
    Ok(out)
}

/// Grid kinds reported by [`grid_point_count`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    FullGrid,
    SparseFsi,
}

/// Number of integration points of a |v|-dimensional rule exact to total
/// degree 2l-1: `l^{|v|}` for the full grid, the nested point-set size for the
/// extended FSI rule (level l-1).
pub fn grid_point_count(kind: GridKind, dim: usize, l: u32) -> Result<u128, EngineError> {
    match kind {
        GridKind::FullGrid => Ok((l as u128).pow(dim as u32)),
        GridKind::SparseFsi => {
            if l == 0 || l > FSI_MAX_LEVEL + 1 {
                return Err(EngineError::LevelTooHigh(l));
            }
            Ok(fsi_nested_points(dim, l - 1)?.len() as u128)
        }
    }
}

/// Dimension-reduction integration on nested FSI sparse grids; requires every
/// marginal to standardize to the standard gaussian.
pub struct FsiEngine<'m> {
    model: &'m dyn Model,
    input: RandomInput,
    plan: DimRedPlan,
    level: u32,
    bases: Vec<OrthonormalBasis>,
    cache: EvalCache,
    grids: HashMap<SubsetIndex, (Vec<(Vec<f64>, f64)>, Vec<f64>)>,
}

impl<'m> FsiEngine<'m> {
    pub fn new(
        model: &'m dyn Model,
        input: &RandomInput,
        bases: &[OrthonormalBasis],
        r: usize,
        level: u32,
        reference: Option<Vec<f64>>,
    ) -> Result<Self, EngineError> {
        if !input.gaussian_standardizable() {
            return Err(EngineError::NotGaussianStandardizable);
        }
        if level > FSI_MAX_LEVEL {
            return Err(EngineError::LevelTooHigh(level));
        }
        let reference_std = input.to_standard(&reference.unwrap_or_else(|| input.mean()))?;
        let plan = DimRedPlan::new(input.dim(), r, reference_std)?;
        Ok(Self {
            model,
            input: input.clone(),
            plan,
            level,
            bases: bases.to_vec(),
            cache: EvalCache::new(),
            grids: HashMap::new(),
        })
    }

    fn ensure_grid(&mut self, v: &SubsetIndex) -> Result<(), EngineError> {
        if self.grids.contains_key(v) {
            return Ok(());
        }
        let rule = fsi_rule(v.cardinality(), self.level)?;
        let mut points = Vec::with_capacity(rule.len());
        for (coords, _) in &rule {
            let mut z = self.plan.reference_std.clone();
            for (p, &var) in v.members().iter().enumerate() {
                z[var as usize] = coords[p];
            }
            points.push(self.input.from_standard(&z)?);
        }
        let values = self.cache.eval_batch(self.model, &points)?;
        let outputs = self.model.outputs();
        let mut flat = Vec::with_capacity(values.len() * outputs);
        for v in values {
            flat.extend(v);
        }
        self.grids.insert(v.clone(), (rule, flat));
        Ok(())
    }

    pub fn write_grid_csv<W: Write>(&mut self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "subset,weight,coordinates")?;
        let subsets: Vec<SubsetIndex> = self
            .plan
            .layers
            .iter()
            .flat_map(|(_, s)| s.iter().cloned())
            .collect();
        for v in subsets {
            if self.ensure_grid(&v).is_err() {
                continue;
            }
            let (rule, _) = &self.grids[&v];
            for (coords, w) in rule {
                let mut z = self.plan.reference_std.clone();
                for (p, &var) in v.members().iter().enumerate() {
                    z[var as usize] = coords[p];
                }
                let line: Vec<String> = z.iter().map(|c| format!("{c}")).collect();
                writeln!(out, "\"{v}\",{w},{}", line.join(" "))?;
            }
        }
        Ok(())
    }
}

impl CoefficientEngine for FsiEngine<'_> {
    fn outputs(&self) -> usize {
        self.model.outputs()
    }

    fn mean(&mut self, output: usize) -> Result<f64, EngineError> {
        if output >= self.model.outputs() {
            return Err(EngineError::OutputOutOfRange {
                got: output,
                outputs: self.model.outputs(),
            });
        }
        let layers = self.plan.layers.clone();
        let outputs = self.model.outputs();
        let mut acc = 0.0;
        for (coeff, subsets) in &layers {
            if subsets.is_empty() {
                let c_phys = self.input.from_standard(&self.plan.reference_std)?;
                let y = self.cache.eval_batch(self.model, &[c_phys])?;
                acc += coeff * y[0][output];
            }
            for v in subsets {
                self.ensure_grid(v)?;
                let (rule, values) = &self.grids[v];
                let mut inner = 0.0;
                for (k, (_, w)) in rule.iter().enumerate() {
                    inner += w * values[k * outputs + output];
                }
                acc += coeff * inner;
            }
        }
        Ok(acc)
    }

    fn coefficient(
        &mut self,
        output: usize,
        u: &SubsetIndex,
        j: &MultiIndex,
    ) -> Result<f64, EngineError> {
        if output >= self.model.outputs() {
            return Err(EngineError::OutputOutOfRange {
                got: output,
                outputs: self.model.outputs(),
            });
        }
        let max_degree = self.max_order();
        if j.max_order() > max_degree {
            return Err(EngineError::OrderTooHigh {
                order: j.max_order(),
                n_v: (self.level + 1) as usize,
                max: max_degree,
            });
        }
        let layers = self.plan.layers.clone();
        let outputs = self.model.outputs();
        let card_u = u.cardinality();
        let mut acc = 0.0;
        for (coeff, subsets) in &layers {
            for v in subsets {
                if v.cardinality() < card_u || !u.is_subset_of(v) {
                    continue;
                }
                self.ensure_grid(v)?;
                let (rule, values) = &self.grids[v];
                let u_pos: Vec<usize> = u
                    .members()
                    .iter()
                    .map(|m| v.members().iter().position(|x| x == m).unwrap())
                    .collect();
                let mut inner = 0.0;
                for (k, (coords, w)) in rule.iter().enumerate() {
                    let mut psi = 1.0;
                    for (p, &pos) in u_pos.iter().enumerate() {
                        let var = u.members()[p] as usize;
                        psi *= self.bases[var]
                            .eval(j.orders()[p] as usize, coords[pos])
                            .map_err(EngineError::Ortho)?;
                    }
                    inner += w * psi * values[k * outputs + output];
                }
                acc += coeff * inner;
            }
        }
        Ok(acc)
    }

    fn eval_count(&self) -> u64 {
        self.cache.eval_count()
    }

    fn max_order(&self) -> u32 {
        let basis_cap = self.bases.iter().map(|b| b.max_order() as u32).min().unwrap_or(0);
        (2 * self.level + 1).min(basis_cap)
    }
}

// ---------------------------------------------------------------------------
// One-shot estimation helpers
// ---------------------------------------------------------------------------

/// Estimates the requested coefficients and the constant term with full-grid
/// dimension-reduction integration (scalar output models).
pub fn estimate_coeffs_fullgrid(
    model: &dyn Model,
    input: &RandomInput,
    bases: &[OrthonormalBasis],
    targets: &[(SubsetIndex, MultiIndex)],
    r: usize,
    n_v: usize,
    reference: Option<Vec<f64>>,
) -> Result<CoefficientStore, EngineError> {
    let mut engine = FullGridEngine::new(model, input, bases, r, n_v, reference)?;
    store_from_engine(&mut engine, targets)
}

/// Estimates the requested coefficients with the nested sparse-grid engine.
pub fn estimate_coeffs_fsi(
    model: &dyn Model,
    input: &RandomInput,
    bases: &[OrthonormalBasis],
    targets: &[(SubsetIndex, MultiIndex)],
    r: usize,
    level: u32,
    reference: Option<Vec<f64>>,
) -> Result<CoefficientStore, EngineError> {
    let mut engine = FsiEngine::new(model, input, bases, r, level, reference)?;
    store_from_engine(&mut engine, targets)
}

fn store_from_engine(
    engine: &mut dyn CoefficientEngine,
    targets: &[(SubsetIndex, MultiIndex)],
) -> Result<CoefficientStore, EngineError> {
    let mut store = CoefficientStore::new(engine.mean(0)?);
    for (u, j) in targets {
        let c = engine.coefficient(0, u, j)?;
        store.insert(u.clone(), j.clone(), c);
    }
    store.set_eval_count(engine.eval_count());
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::MarginalSpec;
    use crate::models::ScalarFnModel;
    use approx::assert_abs_diff_eq;

    fn gaussian_input(n: usize) -> RandomInput {
        RandomInput::new(
            (0..n)
                .map(|_| MarginalSpec::gaussian(0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn bases_for(input: &RandomInput, order: usize) -> Vec<OrthonormalBasis> {
        input
            .marginals()
            .iter()
            .map(|m| OrthonormalBasis::build(m, order).unwrap())
            .collect()
    }

    #[test]
    fn dimred_weight_examples() {
        assert_eq!(dimred_weights(4, 0), vec![(0, 1)]);
        let w = dimred_weights(5, 1);
        assert_eq!(w, vec![(0, 1), (1, -4)]);
        // R = N keeps only the full-dimensional layer
        let w = dimred_weights(3, 3);
        assert_eq!(w[0], (0, 1));
        assert!(w[1..].iter().all(|&(_, c)| c == 0));
    }

    #[test]
    fn constant_function_reproduced_for_all_plans() {
        for n in 1..=6usize {
            for r in 0..=3.min(n) {
                let input = gaussian_input(n);
                let bases = bases_for(&input, 4);
                let model = ScalarFnModel::new(n, |_| 7.0);
                let mut engine =
                    FullGridEngine::new(&model, &input, &bases, r, 2, None).unwrap();
                assert_abs_diff_eq!(engine.mean(0).unwrap(), 7.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fullgrid_mean_odd_function_is_zero() {
        let input = gaussian_input(2);
        let bases = bases_for(&input, 4);
        let model = ScalarFnModel::new(2, |x: &[f64]| x[0] + x[1]);
        let mut engine = FullGridEngine::new(&model, &input, &bases, 1, 4, None).unwrap();
        assert_abs_diff_eq!(engine.mean(0).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn univariate_reduction_misses_interaction() {
        // R=1 cannot see the bivariate coefficient of x1*x2: estimates zero
        let input = gaussian_input(2);
        let bases = bases_for(&input, 4);
        let model = ScalarFnModel::new(2, |x: &[f64]| x[0] * x[1]);
        let u12 = SubsetIndex::new(vec![0, 1]).unwrap();
        let j11 = MultiIndex::new(vec![1, 1], 2).unwrap();
        let mut engine = FullGridEngine::new(&model, &input, &bases, 1, 4, None).unwrap();
        assert_abs_diff_eq!(engine.coefficient(0, &u12, &j11).unwrap(), 0.0, epsilon = 1e-14);
        // R=2 recovers it exactly: C = 1 for psi_1 psi_1 = x1 x2
        let mut engine = FullGridEngine::new(&model, &input, &bases, 2, 4, None).unwrap();
        assert_abs_diff_eq!(engine.coefficient(0, &u12, &j11).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn product_polynomial_coefficients_match_analytic() {
        // y = (1 + psi1 + 0.5 psi2)(1 + 0.25 psi1) has coefficients equal to
        // products of the univariate factors when R = N
        let input = gaussian_input(2);
        let bases = bases_for(&input, 6);
        let b = bases.clone();
        let model = ScalarFnModel::new(2, move |x: &[f64]| {
            (1.0 + b[0].eval(1, x[0]).unwrap() + 0.5 * b[0].eval(2, x[0]).unwrap())
                * (1.0 + 0.25 * b[1].eval(1, x[1]).unwrap())
        });
        let mut engine = FullGridEngine::new(&model, &input, &bases, 2, 5, None).unwrap();
        assert_abs_diff_eq!(engine.mean(0).unwrap(), 1.0, epsilon = 1e-12);
        let cases = [
            (vec![0u32], vec![1u32], 1.0),
            (vec![0], vec![2], 0.5),
            (vec![1], vec![1], 0.25),
        ];
        for (u, j, expect) in cases {
            let card = u.len();
            let c = engine
                .coefficient(
                    0,
                    &SubsetIndex::new(u).unwrap(),
                    &MultiIndex::new(j, card).unwrap(),
                )
                .unwrap();
            assert_abs_diff_eq!(c, expect, epsilon = 1e-11);
        }
        let c = engine
            .coefficient(
                0,
                &SubsetIndex::new(vec![0, 1]).unwrap(),
                &MultiIndex::new(vec![2, 1], 2).unwrap(),
            )
            .unwrap();
        assert_abs_diff_eq!(c, 0.125, epsilon = 1e-11);
    }

    #[test]
    fn eval_budget_and_cache_accounting() {
        let input = gaussian_input(3);
        let bases = bases_for(&input, 4);
        let model = ScalarFnModel::new(3, |x: &[f64]| x[0] * x[0] + x[1] - x[2]);
        let mut engine = FullGridEngine::new(&model, &input, &bases, 2, 3, None).unwrap();
        let _ = engine.mean(0).unwrap();
        for members in subsets_of_cardinality(3, 1) {
            let u = SubsetIndex::new(members).unwrap();
            let j = MultiIndex::new(vec![1], 1).unwrap();
            let _ = engine.coefficient(0, &u, &j).unwrap();
        }
        let budget = fullgrid_eval_budget(3, 2, 3);
        // subsets share cut faces through the anchor: strictly fewer calls
        assert!(engine.eval_count() < budget as u64);
        assert!(engine.eval_count() > 0);
    }

    #[test]
    fn fsi_weight_base_cases() {
        assert_abs_diff_eq!(fsi_weight(&[0], 0).unwrap(), 1.0);
        // 3-point Gauss-Hermite weights at level 1
        assert_abs_diff_eq!(fsi_weight(&[0], 1).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fsi_weight(&[1], 1).unwrap(), 1.0 / 6.0, epsilon = 1e-15);
        // weights sum to one at every level (integrates the constant)
        for level in 0..=FSI_MAX_LEVEL {
            let total: f64 = fsi_rule(1, level)
                .unwrap()
                .iter()
                .map(|(_, w)| *w)
                .sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fsi_one_dimensional_exactness() {
        let gaussian_moment = |d: u32| -> f64 {
            if d % 2 == 1 {
                0.0
            } else {
                (1..=d as usize).step_by(2).map(|k| k as f64).product()
            }
        };
        for level in 0..=FSI_MAX_LEVEL {
            let rule = fsi_rule(1, level).unwrap();
            for d in 0..=(2 * level + 1) {
                let est: f64 = rule
                    .iter()
                    .map(|(p, w)| w * p[0].powi(d as i32))
                    .sum();
                let exact = gaussian_moment(d);
                let scale: f64 = rule
                    .iter()
                    .map(|(p, w)| w.abs() * p[0].abs().powi(d as i32))
                    .sum::<f64>()
                    .max(1.0);
                assert!(
                    (est - exact).abs() <= 1e-10 * scale,
                    "level {level} moment {d}: {est} vs {exact}"
                );
            }
        }
        // the 7-point level-3 rule already integrates x^6 = 15
        let rule = fsi_rule(1, 3).unwrap();
        let est: f64 = rule.iter().map(|(p, w)| w * p[0].powi(6)).sum();
        assert_abs_diff_eq!(est, 15.0, epsilon = 1e-9);
    }

    #[test]
    fn fsi_level_zero_is_single_anchor_point() {
        for d in 1..=4usize {
            let rule = fsi_rule(d, 0).unwrap();
            assert_eq!(rule.len(), 1);
            assert!(rule[0].0.iter().all(|&c| c == 0.0));
            assert_abs_diff_eq!(rule[0].1, 1.0);
        }
    }

    #[test]
    fn fsi_two_dimensional_nested_counts() {
        // cumulative nested totals per level
        let expect = [1usize, 5, 9, 17, 37];
        for (level, &count) in expect.iter().enumerate() {
            assert_eq!(
                fsi_nested_points(2, level as u32).unwrap().len(),
                count,
                "level {level}"
            );
        }
    }

    #[test]
    fn fsi_nestedness_by_coordinate_containment() {
        for d in 1..=4usize {
            let mut prev: Option<std::collections::BTreeSet<Vec<u64>>> = None;
            for level in 0..=FSI_MAX_LEVEL {
                let set: std::collections::BTreeSet<Vec<u64>> = fsi_nested_points(d, level)
                    .unwrap()
                    .iter()
                    .map(|p| cache_key(p))
                    .collect();
                if let Some(p) = prev {
                    assert!(p.is_subset(&set), "dim {d} level {level}");
                }
                prev = Some(set);
            }
        }
    }

    #[test]
    fn grid_point_count_tables() {
        // full grid row (Table 1a shape): l^|v|
        assert_eq!(grid_point_count(GridKind::FullGrid, 4, 3).unwrap(), 81);
        assert_eq!(
            grid_point_count(GridKind::FullGrid, 10, 5).unwrap(),
            9_765_625
        );
        // extended FSI rule (Table 1c))
        assert_eq!(grid_point_count(GridKind::SparseFsi, 3, 3).unwrap(), 19);
        assert_eq!(grid_point_count(GridKind::SparseFsi, 2, 2).unwrap(), 5);
        assert_eq!(grid_point_count(GridKind::SparseFsi, 10, 5).unwrap(), 5301);
        assert!(grid_point_count(GridKind::SparseFsi, 2, 6).is_err());
    }

    #[test]
    fn fsi_engine_matches_fullgrid_on_smooth_model() {
        let input = gaussian_input(3);
        let bases = bases_for(&input, 6);
        let model = ScalarFnModel::new(3, |x: &[f64]| {
            (0.1 * x[0]).exp() + 0.5 * x[1] * x[1] * x[2] + x[0] * x[2]
        });
        // matched exactness: level 3 (degree 7) vs 4-point rule (degree 7)
        let mut fg = FullGridEngine::new(&model, &input, &bases, 3, 4, None).unwrap();
        let mut fsi = FsiEngine::new(&model, &input, &bases, 3, 3, None).unwrap();
        assert_abs_diff_eq!(
            fg.mean(0).unwrap(),
            fsi.mean(0).unwrap(),
            epsilon = 1e-6
        );
        for (u, j) in [
            (vec![0u32], vec![1u32]),
            (vec![1], vec![2]),
            (vec![0, 2], vec![1, 1]),
            (vec![1, 2], vec![2, 1]),
        ] {
            let card = u.len();
            let u = SubsetIndex::new(u).unwrap();
            let j = MultiIndex::new(j, card).unwrap();
            assert_abs_diff_eq!(
                fg.coefficient(0, &u, &j).unwrap(),
                fsi.coefficient(0, &u, &j).unwrap(),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn fsi_requires_gaussian_standardizable_input() {
        let input = RandomInput::new(vec![MarginalSpec::uniform(0.0, 1.0).unwrap()]).unwrap();
        let bases = bases_for(&input, 4);
        let model = ScalarFnModel::new(1, |x: &[f64]| x[0]);
        assert!(matches!(
            FsiEngine::new(&model, &input, &bases, 1, 2, None),
            Err(EngineError::NotGaussianStandardizable)
        ));
    }

    #[test]
    fn round_sig_collides_cut_plane_points() {
        let a = 0.1 + 0.2; // 0.30000000000000004
        let b = 0.3;
        assert_eq!(round_sig(a).to_bits(), round_sig(b).to_bits());
        assert_eq!(cache_key(&[0.0]), cache_key(&[-0.0]));
    }
}
