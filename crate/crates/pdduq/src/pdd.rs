//! The PDD data model: variable subsets, multi-indices, coefficient stores,
//! surrogate evaluation and second-moment statistics, coefficient counting,
//! plus reference ANOVA/anchored decompositions used to verify the theory on
//! small problems.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::{InputError, MarginalDesc, RandomInput};
use crate::orthopoly::{OrthoError, OrthonormalBasis};

#[derive(Debug, Error)]
pub enum PddError {
    #[error("subset must be non-empty with strictly increasing members, got {0:?}")]
    BadSubset(Vec<u32>),
    #[error("multi-index {orders:?} invalid for subset of size {card}: entries must be >= 1")]
    BadMultiIndex { orders: Vec<u32>, card: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("reference decomposition supports at most {max} variables, got {got}")]
    ReferenceTooLarge { max: usize, got: usize },
    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error("surrogate file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("surrogate file format error: {0}")]
    Format(String),
}

/// A non-empty subset of variable indices (zero-based), strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubsetIndex(Vec<u32>);

impl SubsetIndex {
    pub fn new(mut members: Vec<u32>) -> Result<Self, PddError> {
        members.sort_unstable();
        if members.is_empty() || members.windows(2).any(|w| w[0] == w[1]) {
            return Err(PddError::BadSubset(members));
        }
        Ok(Self(members))
    }

    pub fn members(&self) -> &[u32] {
        &self.0
    }

    pub fn cardinality(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, var: u32) -> bool {
        self.0.binary_search(&var).is_ok()
    }

    pub fn is_subset_of(&self, other: &SubsetIndex) -> bool {
        self.0.iter().all(|v| other.contains(*v))
    }
}

impl fmt::Display for SubsetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}

/// Per-subset polynomial orders, one entry (>= 1) per subset member.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(orders: Vec<u32>, cardinality: usize) -> Result<Self, PddError> {
        if orders.len() != cardinality || orders.iter().any(|&j| j == 0) {
            return Err(PddError::BadMultiIndex {
                orders,
                card: cardinality,
            });
        }
        Ok(Self(orders))
    }

    pub fn orders(&self) -> &[u32] {
        &self.0
    }

    /// Infinity norm: the largest per-variable order.
    pub fn max_order(&self) -> u32 {
        *self.0.iter().max().unwrap()
    }
}

/// Sparse map from (subset, multi-index) to the expansion coefficient, plus
/// the constant term. Deterministic (ordered) iteration keeps variance sums
/// and serialized output reproducible.
#[derive(Debug, Clone, Default)]
pub struct CoefficientStore {
    pub y_empty: f64,
    entries: BTreeMap<(SubsetIndex, MultiIndex), f64>,
    eval_count: u64,
}

impl CoefficientStore {
    pub fn new(y_empty: f64) -> Self {
        Self {
            y_empty,
            entries: BTreeMap::new(),
            eval_count: 0,
        }
    }

    pub fn insert(&mut self, u: SubsetIndex, j: MultiIndex, value: f64) {
        debug_assert_eq!(u.cardinality(), j.orders().len());
        self.entries.insert((u, j), value);
    }

    pub fn remove(&mut self, u: &SubsetIndex, j: &MultiIndex) -> Option<f64> {
        self.entries.remove(&(u.clone(), j.clone()))
    }

    pub fn get(&self, u: &SubsetIndex, j: &MultiIndex) -> Option<f64> {
        self.entries.get(&(u.clone(), j.clone())).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(SubsetIndex, MultiIndex), &f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn set_eval_count(&mut self, n: u64) {
        self.eval_count = n;
    }

    /// Subsets present in the store, each with its largest retained order.
    pub fn retained_subsets(&self) -> BTreeMap<SubsetIndex, u32> {
        let mut out: BTreeMap<SubsetIndex, u32> = BTreeMap::new();
        for ((u, j), _) in &self.entries {
            let e = out.entry(u.clone()).or_insert(0);
            *e = (*e).max(j.max_order());
        }
        out
    }

    /// Sum of squared coefficients belonging to one subset.
    pub fn subset_mass(&self, u: &SubsetIndex) -> f64 {
        self.entries
            .iter()
            .filter(|((uu, _), _)| uu == u)
            .map(|(_, c)| c * c)
            .sum()
    }

    /// Approximate variance: the sum of squares of all stored coefficients.
    pub fn variance(&self) -> f64 {
        self.entries.values().map(|c| c * c).sum()
    }

    /// The largest polynomial order retained by any entry, 0 for empty stores.
    pub fn max_retained_order(&self) -> u32 {
        self.entries
            .keys()
            .map(|(_, j)| j.max_order())
            .max()
            .unwrap_or(0)
    }
}

/// Number of coefficients in an S-variate, m-th order truncated expansion:
/// `sum_{k=0..S} C(N,k) m^k`.
pub fn count_truncated(n_vars: usize, s: usize, m: u32) -> u128 {
    (0..=s.min(n_vars))
        .map(|k| binomial_u128(n_vars, k) * (m as u128).pow(k as u32))
        .sum()
}

/// Number of coefficients held by an adaptive store, constant term included.
pub fn count_adaptive(store: &CoefficientStore) -> u128 {
    1 + store.len() as u128
}

/// Mean-squared truncation bound when component variances decay like
/// `c * q^{-|u|}`: `c * sum_{s=S+1..N} C(N,s) q^{-s}`.
pub fn truncation_error_bound(n_vars: usize, c_const: f64, q_rate: f64, s: usize) -> f64 {
    assert!(q_rate > 1.0 && c_const > 0.0);
    ((s + 1)..=n_vars)
        .map(|k| binomial_u128(n_vars, k) as f64 * q_rate.powi(-(k as i32)))
        .sum::<f64>()
        * c_const
}

pub(crate) fn binomial_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for t in 1..=k {
        out = out * (n - k + t) as u128 / t as u128;
    }
    out
}

/// Signed binomial C(a, k) for integer a >= -1, as used by the
/// dimension-reduction layer weights.
pub(crate) fn binomial_i64(a: i64, k: u32) -> i64 {
    let mut num: i64 = 1;
    for t in 1..=k as i64 {
        num *= a - (k as i64) + t;
        num /= t;
    }
    num
}

/// All subsets of `{0..n-1}` of the given cardinality, in lexicographic order.
pub(crate) fn subsets_of_cardinality(n: usize, k: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        if k == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    let mut cur: Vec<u32> = (0..k as u32).collect();
    loop {
        out.push(cur.clone());
        // advance combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < (n - k + i) as u32 {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// All multi-indices over `card` variables with entries in 1..=m and
/// infinity-norm exactly m (the order-m shell).
pub(crate) fn shell_multi_indices(card: usize, m: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![1u32; card];
    loop {
        if cur.iter().any(|&j| j == m) {
            out.push(cur.clone());
        }
        let mut i = card;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < m {
                cur[i] += 1;
                for j in cur.iter_mut().skip(i + 1) {
                    *j = 1;
                }
                break;
            }
        }
    }
}

/// A PDD surrogate: a coefficient store together with the per-variable bases
/// and the input it was built for. Evaluation happens in standardized space.
pub struct SurrogateModel {
    store: CoefficientStore,
    bases: Vec<OrthonormalBasis>,
    input: RandomInput,
    terms: Vec<(Vec<u32>, Vec<u32>, f64)>,
    order_by_var: Vec<usize>,
}

impl SurrogateModel {
    pub fn new(
        store: CoefficientStore,
        bases: Vec<OrthonormalBasis>,
        input: RandomInput,
    ) -> Result<Self, PddError> {
        if bases.len() != input.dim() {
            return Err(PddError::Dimension(format!(
                "{} bases for {} input variables",
                bases.len(),
                input.dim()
            )));
        }
        let mut order_by_var = vec![0usize; input.dim()];
        let mut terms = Vec::with_capacity(store.len());
        for ((u, j), &c) in store.iter() {
            for (p, &var) in u.members().iter().enumerate() {
                if var as usize >= input.dim() {
                    return Err(PddError::Dimension(format!(
                        "store references variable {var} beyond input dimension {}",
                        input.dim()
                    )));
                }
                order_by_var[var as usize] =
                    order_by_var[var as usize].max(j.orders()[p] as usize);
            }
            terms.push((u.members().to_vec(), j.orders().to_vec(), c));
        }
        Ok(Self {
            store,
            bases,
            input,
            terms,
            order_by_var,
        })
    }

    pub fn store(&self) -> &CoefficientStore {
        &self.store
    }

    pub fn input(&self) -> &RandomInput {
        &self.input
    }

    pub fn bases(&self) -> &[OrthonormalBasis] {
        &self.bases
    }

    /// Surrogate value at a standardized point.
    pub fn evaluate(&self, z: &[f64]) -> Result<f64, PddError> {
        if z.len() != self.input.dim() {
            return Err(PddError::Dimension(format!(
                "point has {} coordinates, input has {}",
                z.len(),
                self.input.dim()
            )));
        }
        // per-variable basis values up to the largest order used
        let mut psi: Vec<Vec<f64>> = Vec::with_capacity(z.len());
        for (i, &zi) in z.iter().enumerate() {
            psi.push(self.bases[i].eval_all(self.order_by_var[i], zi)?);
        }
        let mut acc = self.store.y_empty;
        for (u, j, c) in &self.terms {
            let mut prod = *c;
            for (p, &var) in u.iter().enumerate() {
                prod *= psi[var as usize][j[p] as usize];
            }
            acc += prod;
        }
        Ok(acc)
    }

    /// Surrogate value at a physical point.
    pub fn evaluate_physical(&self, x: &[f64]) -> Result<f64, PddError> {
        let z = self.input.to_standard(x)?;
        self.evaluate(&z)
    }

    /// The expansion mean: exactly the constant term.
    pub fn mean(&self) -> f64 {
        self.store.y_empty
    }

    /// The expansion variance: the sum of squared coefficients.
    pub fn variance(&self) -> f64 {
        self.store.variance()
    }

    pub fn save_json(&self, path: &Path) -> Result<(), PddError> {
        let wire = SurrogateWire::try_from(self)?;
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &wire)
            .map_err(|e| PddError::Format(e.to_string()))?;
        writeln!(f)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, PddError> {
        let text = std::fs::read_to_string(path)?;
        let wire: SurrogateWire =
            serde_json::from_str(&text).map_err(|e| PddError::Format(e.to_string()))?;
        wire.into_model()
    }
}

/// On-disk surrogate format: the constant term plus one record per entry,
/// with enough input metadata to rebuild the bases. Variable indices are
/// zero-based; floats round-trip exactly through the shortest decimal form.
#[derive(Serialize, Deserialize)]
struct SurrogateWire {
    format: String,
    version: u32,
    input: Vec<MarginalDesc>,
    max_order: usize,
    y_empty: f64,
    eval_count: u64,
    entries: Vec<WireEntry>,
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    u: Vec<u32>,
    j: Vec<u32>,
    c: f64,
}

impl TryFrom<&SurrogateModel> for SurrogateWire {
    type Error = PddError;

    fn try_from(model: &SurrogateModel) -> Result<Self, PddError> {
        let input = model
            .input
            .marginals()
            .iter()
            .map(MarginalDesc::from_spec)
            .collect::<Result<Vec<_>, _>>()?;
        let entries = model
            .store
            .iter()
            .map(|((u, j), &c)| WireEntry {
                u: u.members().to_vec(),
                j: j.orders().to_vec(),
                c,
            })
            .collect();
        Ok(Self {
            format: "pdduq-surrogate".into(),
            version: 1,
            input,
            max_order: model.bases.iter().map(|b| b.max_order()).max().unwrap_or(0),
            y_empty: model.store.y_empty,
            eval_count: model.store.eval_count(),
            entries,
        })
    }
}

impl SurrogateWire {
    fn into_model(self) -> Result<SurrogateModel, PddError> {
        if self.format != "pdduq-surrogate" || self.version != 1 {
            return Err(PddError::Format(format!(
                "unsupported surrogate format {}/{}",
                self.format, self.version
            )));
        }
        let marginals = self
            .input
            .iter()
            .map(|d| d.to_spec())
            .collect::<Result<Vec<_>, _>>()?;
        let input = RandomInput::new(marginals)?;
        let mut store = CoefficientStore::new(self.y_empty);
        store.set_eval_count(self.eval_count);
        let mut needed = 1usize;
        for e in self.entries {
            let u = SubsetIndex::new(e.u)?;
            let card = u.cardinality();
            let j = MultiIndex::new(e.j, card)?;
            needed = needed.max(j.max_order() as usize);
            store.insert(u, j, e.c);
        }
        let order = self.max_order.max(needed);
        let bases = input
            .marginals()
            .iter()
            .map(|m| OrthonormalBasis::build(m, order))
            .collect::<Result<Vec<_>, _>>()?;
        SurrogateModel::new(store, bases, input)
    }
}

// ---------------------------------------------------------------------------
// Reference decompositions on small tensor grids (verification only, N <= 4)
// ---------------------------------------------------------------------------

const REFERENCE_MAX_DIM: usize = 4;

/// ANOVA component-function tables on a tensor grid in standardized space.
pub struct AddDecomposition {
    nodes: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    pub y_empty: f64,
    pub tables: BTreeMap<SubsetIndex, Vec<f64>>,
    grid_values: Vec<f64>,
}

fn mixed_radix_unrank(mut idx: usize, radices: &[usize], out: &mut [usize]) {
    for (i, &r) in radices.iter().enumerate().rev() {
        out[i] = idx % r;
        idx /= r;
    }
}

impl AddDecomposition {
    /// Grid nodes of variable `i`.
    pub fn nodes(&self, i: usize) -> &[f64] {
        &self.nodes[i]
    }

    /// Component variance E[y_u^2] by tensor quadrature over the table.
    pub fn component_variance(&self, u: &SubsetIndex) -> f64 {
        let table = &self.tables[u];
        let radices: Vec<usize> = u.members().iter().map(|&v| self.nodes[v as usize].len()).collect();
        let mut idx = vec![0usize; radices.len()];
        let mut acc = 0.0;
        for (flat, t) in table.iter().enumerate() {
            mixed_radix_unrank(flat, &radices, &mut idx);
            let mut w = 1.0;
            for (p, &var) in u.members().iter().enumerate() {
                w *= self.weights[var as usize][idx[p]];
            }
            acc += w * t * t;
        }
        acc
    }

    /// Quadrature mean of component `u` (zero for exact ANOVA components).
    pub fn component_mean(&self, u: &SubsetIndex) -> f64 {
        let table = &self.tables[u];
        let radices: Vec<usize> = u.members().iter().map(|&v| self.nodes[v as usize].len()).collect();
        let mut idx = vec![0usize; radices.len()];
        let mut acc = 0.0;
        for (flat, t) in table.iter().enumerate() {
            mixed_radix_unrank(flat, &radices, &mut idx);
            let mut w = 1.0;
            for (p, &var) in u.members().iter().enumerate() {
                w *= self.weights[var as usize][idx[p]];
            }
            acc += w * t;
        }
        acc
    }

    /// Quadrature inner product of two distinct component functions.
    pub fn component_inner_product(&self, u: &SubsetIndex, v: &SubsetIndex) -> f64 {
        let n = self.nodes.len();
        let radices: Vec<usize> = (0..n).map(|i| self.nodes[i].len()).collect();
        let total: usize = radices.iter().product();
        let mut idx = vec![0usize; n];
        let mut acc = 0.0;
        for flat in 0..total {
            mixed_radix_unrank(flat, &radices, &mut idx);
            let mut w = 1.0;
            for i in 0..n {
                w *= self.weights[i][idx[i]];
            }
            acc += w * self.component_value(u, &idx) * self.component_value(v, &idx);
        }
        acc
    }

    fn component_value(&self, u: &SubsetIndex, idx: &[usize]) -> f64 {
        let table = &self.tables[u];
        let mut flat = 0usize;
        for &var in u.members() {
            flat = flat * self.nodes[var as usize].len() + idx[var as usize];
        }
        table[flat]
    }

    /// Value of the S-variate truncation at a full-grid index.
    fn truncated_value(&self, s: usize, idx: &[usize]) -> f64 {
        let mut acc = self.y_empty;
        for u in self.tables.keys() {
            if u.cardinality() <= s {
                acc += self.component_value(u, idx);
            }
        }
        acc
    }

    /// Mean-squared error of the S-variate truncation, by full-grid quadrature.
    pub fn truncation_mse(&self, s: usize) -> f64 {
        let n = self.nodes.len();
        let radices: Vec<usize> = (0..n).map(|i| self.nodes[i].len()).collect();
        let total: usize = radices.iter().product();
        let mut idx = vec![0usize; n];
        let mut acc = 0.0;
        for flat in 0..total {
            mixed_radix_unrank(flat, &radices, &mut idx);
            let mut w = 1.0;
            for i in 0..n {
                w *= self.weights[i][idx[i]];
            }
            let diff = self.grid_values[flat] - self.truncated_value(s, &idx);
            acc += w * diff * diff;
        }
        acc
    }
}

/// Builds the ANOVA decomposition of `model` (physical-space callback) on a
/// per-variable Gauss grid of the given order. Restricted to small N; this
/// path exists to verify theory, not to scale.
pub fn add_decompose<F>(
    model: &F,
    input: &RandomInput,
    quad_order: usize,
) -> Result<AddDecomposition, PddError>
where
    F: Fn(&[f64]) -> f64,
{
    let n = input.dim();
    if n > REFERENCE_MAX_DIM {
        return Err(PddError::ReferenceTooLarge {
            max: REFERENCE_MAX_DIM,
            got: n,
        });
    }
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let basis = OrthonormalBasis::build(input.marginal(i), quad_order)?;
        let rule = basis.gauss_rule(quad_order)?;
        nodes.push(rule.nodes().to_vec());
        weights.push(rule.weights().to_vec());
    }
    let radices: Vec<usize> = (0..n).map(|i| nodes[i].len()).collect();
    let total: usize = radices.iter().product();
    let mut grid_values = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut z = vec![0.0; n];
    for flat in 0..total {
        mixed_radix_unrank(flat, &radices, &mut idx);
        for i in 0..n {
            z[i] = nodes[i][idx[i]];
        }
        let x = input.from_standard(&z)?;
        grid_values.push(model(&x));
    }

    // y_empty
    let mut y_empty = 0.0;
    for flat in 0..total {
        mixed_radix_unrank(flat, &radices, &mut idx);
        let mut w = 1.0;
        for i in 0..n {
            w *= weights[i][idx[i]];
        }
        y_empty += w * grid_values[flat];
    }

    let mut decomposition = AddDecomposition {
        nodes,
        weights,
        y_empty,
        tables: BTreeMap::new(),
        grid_values,
    };

    for card in 1..=n {
        for members in subsets_of_cardinality(n, card) {
            let u = SubsetIndex::new(members)?;
            let sub_radices: Vec<usize> = u
                .members()
                .iter()
                .map(|&v| decomposition.nodes[v as usize].len())
                .collect();
            let sub_total: usize = sub_radices.iter().product();
            let mut table = vec![0.0; sub_total];
            let mut sub_idx = vec![0usize; card];
            let mut full_idx = vec![0usize; n];
            for (flat_sub, entry) in table.iter_mut().enumerate() {
                mixed_radix_unrank(flat_sub, &sub_radices, &mut sub_idx);
                // conditional mean over the complement
                let mut acc = 0.0;
                for flat in 0..decomposition.grid_values.len() {
                    mixed_radix_unrank(flat, &radices, &mut full_idx);
                    if u.members()
                        .iter()
                        .enumerate()
                        .any(|(p, &v)| full_idx[v as usize] != sub_idx[p])
                    {
                        continue;
                    }
                    let mut w = 1.0;
                    for i in 0..n {
                        if !u.contains(i as u32) {
                            w *= decomposition.weights[i][full_idx[i]];
                        }
                    }
                    acc += w * decomposition.grid_values[flat];
                }
                // subtract lower-order components on the matching coordinates
                let mut lower = decomposition.y_empty;
                for (v, table_v) in &decomposition.tables {
                    if v.is_subset_of(&u) && v != &u {
                        let mut flat_v = 0usize;
                        for &var in v.members() {
                            let p = u.members().iter().position(|&m| m == var).unwrap();
                            flat_v = flat_v * decomposition.nodes[var as usize].len() + sub_idx[p];
                        }
                        lower += table_v[flat_v];
                    }
                }
                *entry = acc - lower;
            }
            decomposition.tables.insert(u, table);
        }
    }
    Ok(decomposition)
}

/// Truncated anchored (cut) decomposition at a reference point: the surrogate
/// reproduces `y` exactly on the cut hyperplanes through `c` up to dimension S.
pub struct RddSurrogate<'a, F> {
    model: &'a F,
    c: Vec<f64>,
    s: usize,
}

impl<'a, F> RddSurrogate<'a, F>
where
    F: Fn(&[f64]) -> f64,
{
    pub fn new(model: &'a F, reference_point: Vec<f64>, s: usize) -> Self {
        Self {
            model,
            c: reference_point,
            s,
        }
    }

    /// Evaluates the truncation as the signed sum of cut-plane evaluations:
    /// `sum_{i=0..S} (-1)^i C(N-S+i-1, i) sum_{|v|=S-i} y(x_v, c_{-v})`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let n = self.c.len();
        assert_eq!(x.len(), n);
        let mut acc = 0.0;
        let mut point = vec![0.0; n];
        for i in 0..=self.s {
            let coeff = if i % 2 == 0 { 1.0 } else { -1.0 }
                * binomial_i64((n - self.s) as i64 + i as i64 - 1, i as u32) as f64;
            if coeff == 0.0 {
                continue;
            }
            for v in subsets_of_cardinality(n, self.s - i) {
                point.copy_from_slice(&self.c);
                for &var in &v {
                    point[var as usize] = x[var as usize];
                }
                acc += coeff * (self.model)(&point);
            }
        }
        acc
    }
}

/// Second-moment errors of the S-variate ANOVA and anchored truncations,
/// together with the bracketing bounds on the expected anchored error.
#[derive(Debug, Clone, Copy)]
pub struct Theorem1Check {
    pub e_sa: f64,
    pub expected_e_sr: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Theorem1Check {
    pub fn holds(&self, slack: f64) -> bool {
        self.lower <= self.expected_e_sr + slack && self.expected_e_sr <= self.upper + slack
    }
}

/// Computes the ANOVA truncation error, the expected anchored-truncation error
/// over a random reference point, and the bracketing bounds
/// `2^{S+1} e_SA <= E[e_SR] <= [1 + sum_k C(N-S+k-1,k)^2 C(N,S-k)] e_SA`.
/// Quadrature order doubles until the check values stabilize to 1e-6.
pub fn check_theorem1<F>(model: &F, input: &RandomInput, s: usize) -> Result<Theorem1Check, PddError>
where
    F: Fn(&[f64]) -> f64,
{
    let n = input.dim();
    if n > 3 {
        return Err(PddError::ReferenceTooLarge { max: 3, got: n });
    }
    if s >= n {
        return Err(PddError::Dimension(format!("requires S < N, got S={s}, N={n}")));
    }
    let mut prev: Option<Theorem1Check> = None;
    for order in [8usize, 16, 24] {
        let check = theorem1_at_order(model, input, s, order)?;
        if let Some(p) = prev {
            let scale = p.expected_e_sr.abs().max(p.e_sa.abs());
            let tol = 1e-6 * scale + 1e-12;
            if (check.expected_e_sr - p.expected_e_sr).abs() <= tol
                && (check.e_sa - p.e_sa).abs() <= tol
            {
                return Ok(check);
            }
        }
        prev = Some(check);
    }
    Err(PddError::QuadratureNonConvergence(
        "expected anchored error did not stabilize by order 24".into(),
    ))
}

fn theorem1_at_order<F>(
    model: &F,
    input: &RandomInput,
    s: usize,
    order: usize,
) -> Result<Theorem1Check, PddError>
where
    F: Fn(&[f64]) -> f64,
{
    let n = input.dim();
    let decomposition = add_decompose(model, input, order)?;
    let e_sa = decomposition.truncation_mse(s);

    // expected anchored error: both x and c run over the same tensor grid
    let radices: Vec<usize> = (0..n).map(|i| decomposition.nodes(i).len()).collect();
    let total: usize = radices.iter().product();
    let mut idx_x = vec![0usize; n];
    let mut idx_c = vec![0usize; n];
    let mut zx = vec![0.0; n];
    let mut zc = vec![0.0; n];
    let mut expected = 0.0;
    for flat_c in 0..total {
        mixed_radix_unrank(flat_c, &radices, &mut idx_c);
        let mut wc = 1.0;
        for i in 0..n {
            zc[i] = decomposition.nodes(i)[idx_c[i]];
            wc *= decomposition.weights[i][idx_c[i]];
        }
        let c_phys = input.from_standard(&zc)?;
        let anchored = RddSurrogate::new(model, c_phys, s);
        let mut inner = 0.0;
        for flat_x in 0..total {
            mixed_radix_unrank(flat_x, &radices, &mut idx_x);
            let mut wx = 1.0;
            for i in 0..n {
                zx[i] = decomposition.nodes(i)[idx_x[i]];
                wx *= decomposition.weights[i][idx_x[i]];
            }
            let x_phys = input.from_standard(&zx)?;
            let diff = decomposition.grid_values[flat_x] - anchored.evaluate(&x_phys);
            inner += wx * diff * diff;
        }
        expected += wc * inner;
    }

    let lower = 2f64.powi(s as i32 + 1) * e_sa;
    let mut factor = 1.0;
    for k in 0..=s {
        let b1 = binomial_i64((n - s) as i64 + k as i64 - 1, k as u32) as f64;
        factor += b1 * b1 * binomial_u128(n, s - k) as f64;
    }
    Ok(Theorem1Check {
        e_sa,
        expected_e_sr: expected,
        lower,
        upper: factor * e_sa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::MarginalSpec;
    use approx::assert_abs_diff_eq;

    fn unit_square(n: usize) -> RandomInput {
        RandomInput::new(
            (0..n)
                .map(|_| MarginalSpec::uniform(0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(count_truncated(5, 0, 7), 1);
        assert_eq!(count_truncated(5, 2, 5), 276);
        assert_eq!(count_truncated(100, 2, 1), 5051);
        assert_eq!(count_truncated(9, 3, 5), 11446);
        let mut store = CoefficientStore::new(0.0);
        assert_eq!(count_adaptive(&store), 1);
        for k in 1..=10u32 {
            store.insert(
                SubsetIndex::new(vec![0]).unwrap(),
                MultiIndex::new(vec![k], 1).unwrap(),
                1.0,
            );
        }
        assert_eq!(count_adaptive(&store), 11);
    }

    #[test]
    fn truncation_bound_examples() {
        assert_eq!(truncation_error_bound(3, 1.0, 2.0, 3), 0.0);
        assert_abs_diff_eq!(truncation_error_bound(3, 1.0, 2.0, 1), 0.875, epsilon = 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=4 {
            let b = truncation_error_bound(4, 2.0, 3.0, s);
            assert!(b <= prev);
            prev = b;
        }
        // exact-tail verification when sigma_u^2 = c q^{-|u|} exactly
        let (n, c, q, s) = (4usize, 0.7, 2.5f64, 1usize);
        let direct: f64 = (s + 1..=n)
            .map(|k| binomial_u128(n, k) as f64 * c * q.powi(-(k as i32)))
            .sum();
        assert_abs_diff_eq!(truncation_error_bound(n, c, q, s), direct, epsilon = 1e-15);
    }

    #[test]
    fn store_basics_and_surrogate_eval() {
        let input = RandomInput::new(vec![MarginalSpec::gaussian(0.0, 1.0).unwrap()]).unwrap();
        let basis = OrthonormalBasis::build(input.marginal(0), 4).unwrap();
        let store = CoefficientStore::new(3.5);
        let model = SurrogateModel::new(store, vec![basis.clone()], input.clone()).unwrap();
        assert_eq!(model.evaluate(&[0.123]).unwrap(), 3.5);
        assert_eq!(model.mean(), 3.5);

        let mut store = CoefficientStore::new(1.0);
        store.insert(
            SubsetIndex::new(vec![0]).unwrap(),
            MultiIndex::new(vec![1], 1).unwrap(),
            2.0,
        );
        assert_abs_diff_eq!(store.variance(), 4.0);
        let model = SurrogateModel::new(store, vec![basis], input).unwrap();
        // psi_1(x) = x for the standard gaussian
        assert_abs_diff_eq!(model.evaluate(&[1.5]).unwrap(), 1.0 + 2.0 * 1.5, epsilon = 1e-14);
    }

    #[test]
    fn exact_pdd_of_quadratic_matches_function() {
        // y(x) = (1 + psi1(x1) + 0.5 psi2(x1)) (1 - 0.25 psi1(x2)) on gaussians,
        // coefficients from a 10-point tensor quadrature oracle
        let input = RandomInput::new(vec![
            MarginalSpec::gaussian(0.0, 1.0).unwrap(),
            MarginalSpec::gaussian(0.0, 1.0).unwrap(),
        ])
        .unwrap();
        let bases: Vec<_> = (0..2)
            .map(|i| OrthonormalBasis::build(input.marginal(i), 10).unwrap())
            .collect();
        let f = |x: &[f64]| {
            let b0 = &bases;
            (1.0 + b0[0].eval(1, x[0]).unwrap() + 0.5 * b0[0].eval(2, x[0]).unwrap())
                * (1.0 - 0.25 * b0[1].eval(1, x[1]).unwrap())
        };
        let rule: Vec<_> = (0..2).map(|i| bases[i].gauss_rule(10).unwrap()).collect();
        let mut store = CoefficientStore::new(0.0);
        let mut y_empty = 0.0;
        for (i, &xi) in rule[0].nodes().iter().enumerate() {
            for (k, &xk) in rule[1].nodes().iter().enumerate() {
                y_empty += rule[0].weights()[i] * rule[1].weights()[k] * f(&[xi, xk]);
            }
        }
        store.y_empty = y_empty;
        for (u, orders) in [
            (vec![0u32], vec![(1u32,), (2,), (3,)]),
            (vec![1u32], vec![(1,), (2,), (3,)]),
        ] {
            for (j,) in orders {
                let mut c = 0.0;
                for (i, &xi) in rule[0].nodes().iter().enumerate() {
                    for (k, &xk) in rule[1].nodes().iter().enumerate() {
                        let x = [xi, xk];
                        let psi = bases[u[0] as usize].eval(j as usize, x[u[0] as usize]).unwrap();
                        c += rule[0].weights()[i] * rule[1].weights()[k] * f(&x) * psi;
                    }
                }
                if c.abs() > 1e-13 {
                    store.insert(
                        SubsetIndex::new(u.clone()).unwrap(),
                        MultiIndex::new(vec![j], 1).unwrap(),
                        c,
                    );
                }
            }
        }
        for (j1, j2) in [(1u32, 1u32), (1, 2), (2, 1), (2, 2)] {
            let mut c = 0.0;
            for (i, &xi) in rule[0].nodes().iter().enumerate() {
                for (k, &xk) in rule[1].nodes().iter().enumerate() {
                    let psi = bases[0].eval(j1 as usize, xi).unwrap()
                        * bases[1].eval(j2 as usize, xk).unwrap();
                    c += rule[0].weights()[i] * rule[1].weights()[k] * f(&[xi, xk]) * psi;
                }
            }
            if c.abs() > 1e-13 {
                store.insert(
                    SubsetIndex::new(vec![0, 1]).unwrap(),
                    MultiIndex::new(vec![j1, j2], 2).unwrap(),
                    c,
                );
            }
        }
        let surrogate = SurrogateModel::new(store, bases.clone(), input).unwrap();
        let mut state = 0x853C49E6748FEA9Bu64;
        for _ in 0..100 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let z1 = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 4.0;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let z2 = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 4.0;
            assert_abs_diff_eq!(
                surrogate.evaluate(&[z1, z2]).unwrap(),
                f(&[z1, z2]),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn add_decomposition_of_separable_functions() {
        let input = unit_square(2);
        // additive function: no interaction component
        let add = add_decompose(&|x: &[f64]| x[0] + x[1], &input, 8).unwrap();
        assert_abs_diff_eq!(add.y_empty, 1.0, epsilon = 1e-12);
        let u1 = SubsetIndex::new(vec![0]).unwrap();
        let u12 = SubsetIndex::new(vec![0, 1]).unwrap();
        for (i, &node) in add.nodes(0).iter().enumerate() {
            assert_abs_diff_eq!(add.tables[&u1][i], node - 0.5, epsilon = 1e-12);
        }
        assert!(add.tables[&u12].iter().all(|v| v.abs() < 1e-12));

        // product function: y_empty = 1/4, interaction (x1-1/2)(x2-1/2)
        let prod = add_decompose(&|x: &[f64]| x[0] * x[1], &input, 8).unwrap();
        assert_abs_diff_eq!(prod.y_empty, 0.25, epsilon = 1e-12);
        let n0 = prod.nodes(0).to_vec();
        let n1 = prod.nodes(1).to_vec();
        for (i, &a) in n0.iter().enumerate() {
            for (k, &b) in n1.iter().enumerate() {
                let flat = i * n1.len() + k;
                assert_abs_diff_eq!(
                    prod.tables[&u12][flat],
                    (a - 0.5) * (b - 0.5),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn add_components_zero_mean_and_orthogonal() {
        let input = unit_square(3);
        let model = |x: &[f64]| {
            1.0 + x[0].powi(3) + 2.0 * x[1] * x[2] + x[0] * x[1] * x[2] + 0.3 * x[2].powi(2)
        };
        let add = add_decompose(&model, &input, 8).unwrap();
        let subsets: Vec<_> = add.tables.keys().cloned().collect();
        for u in &subsets {
            assert!(
                add.component_mean(u).abs() <= 1e-9,
                "component {u} mean nonzero"
            );
        }
        for (a, u) in subsets.iter().enumerate() {
            for v in subsets.iter().skip(a + 1) {
                assert!(
                    add.component_inner_product(u, v).abs() <= 1e-9,
                    "components {u} and {v} not orthogonal"
                );
            }
        }
    }

    #[test]
    fn rdd_examples() {
        // S = 0: constant y(c)
        let f = |x: &[f64]| x[0] * x[1];
        let rdd0 = RddSurrogate::new(&f, vec![0.5, 0.5], 0);
        assert_abs_diff_eq!(rdd0.evaluate(&[0.2, 0.9]), 0.25);

        // additive function reproduced exactly by S = 1
        let g = |x: &[f64]| x[0] + x[1];
        let rdd1 = RddSurrogate::new(&g, vec![0.3, 0.8], 1);
        assert_abs_diff_eq!(rdd1.evaluate(&[0.2, 0.9]), 1.1, epsilon = 1e-14);

        // hand-applied recursion for the product function
        let rdd1 = RddSurrogate::new(&f, vec![0.5, 0.5], 1);
        let expect = 0.2 * 0.5 + 0.5 * 0.8 - 0.25;
        assert_abs_diff_eq!(rdd1.evaluate(&[0.2, 0.8]), expect, epsilon = 1e-14);

        // cut-plane reproduction: exact whenever x shares N-S coordinates with c
        let h = |x: &[f64]| (1.0 + x[0] * x[0]) * (x[1] - 0.2) * (2.0 + x[2]);
        let c = vec![0.4, 0.6, 0.3];
        let rdd = RddSurrogate::new(&h, c.clone(), 1);
        let on_cut = [0.9, 0.6, 0.3];
        assert_abs_diff_eq!(rdd.evaluate(&on_cut), h(&on_cut), epsilon = 1e-13);
    }

    #[test]
    fn theorem1_additive_is_exact() {
        let input = unit_square(2);
        let check = check_theorem1(&|x: &[f64]| 2.0 * x[0] - x[1], &input, 1).unwrap();
        assert_abs_diff_eq!(check.e_sa, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(check.expected_e_sr, 0.0, epsilon = 1e-12);
        assert!(check.holds(1e-9));
    }

    #[test]
    fn theorem1_product_three_variables() {
        let input = unit_square(3);
        let f = |x: &[f64]| x[0] * x[1] * x[2];
        for s in [1usize, 2] {
            let check = check_theorem1(&f, &input, s).unwrap();
            // closed-form ANOVA errors for the product of three uniforms
            let expect_e_sa = if s == 1 { 10.0 / 1728.0 } else { 1.0 / 1728.0 };
            assert_abs_diff_eq!(check.e_sa, expect_e_sa, epsilon = 1e-10);
            assert_abs_diff_eq!(check.lower, 2f64.powi(s as i32 + 1) * check.e_sa, epsilon = 1e-15);
            assert!(
                check.holds(1e-9),
                "S={s}: lower={} E={} upper={}",
                check.lower,
                check.expected_e_sr,
                check.upper
            );
        }
        // remark: univariate anchored truncation is at least four times worse
        let check = check_theorem1(&f, &input, 1).unwrap();
        assert_abs_diff_eq!(check.lower / check.e_sa, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn subset_and_multiindex_validation() {
        assert!(SubsetIndex::new(vec![]).is_err());
        assert!(SubsetIndex::new(vec![1, 1]).is_err());
        assert_eq!(SubsetIndex::new(vec![3, 1]).unwrap().members(), &[1, 3]);
        assert!(MultiIndex::new(vec![1, 0], 2).is_err());
        assert!(MultiIndex::new(vec![1], 2).is_err());
        assert_eq!(MultiIndex::new(vec![2, 5], 2).unwrap().max_order(), 5);
    }

    #[test]
    fn shell_enumeration() {
        assert_eq!(shell_multi_indices(1, 3), vec![vec![3]]);
        let shell = shell_multi_indices(2, 2);
        assert_eq!(shell, vec![vec![1, 2], vec![2, 1], vec![2, 2]]);
        assert_eq!(shell_multi_indices(3, 2).len(), 8 - 1);
        assert_eq!(shell_multi_indices(2, 5).len(), 25 - 16);
    }

    #[test]
    fn surrogate_json_round_trip() {
        let input = RandomInput::new(vec![
            MarginalSpec::uniform(0.0, 1.0).unwrap(),
            MarginalSpec::lognormal_mean_cov(1.0, 0.3).unwrap(),
        ])
        .unwrap();
        let bases: Vec<_> = (0..2)
            .map(|i| OrthonormalBasis::build(input.marginal(i), 6).unwrap())
            .collect();
        let mut store = CoefficientStore::new(0.123456789012345678);
        store.set_eval_count(42);
        store.insert(
            SubsetIndex::new(vec![0]).unwrap(),
            MultiIndex::new(vec![3], 1).unwrap(),
            -1.0 / 3.0,
        );
        store.insert(
            SubsetIndex::new(vec![0, 1]).unwrap(),
            MultiIndex::new(vec![1, 2], 2).unwrap(),
            7.25e-13,
        );
        let model = SurrogateModel::new(store, bases, input).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surrogate.json");
        model.save_json(&path).unwrap();
        let loaded = SurrogateModel::load_json(&path).unwrap();
        assert_eq!(loaded.store().y_empty.to_bits(), model.store().y_empty.to_bits());
        assert_eq!(loaded.store().eval_count(), 42);
        assert_eq!(loaded.store().len(), 2);
        for ((u, j), c) in model.store().iter() {
            assert_eq!(loaded.store().get(u, j).unwrap().to_bits(), c.to_bits());
        }
        let z = [0.37, -0.81];
        assert_abs_diff_eq!(
            loaded.evaluate(&z).unwrap(),
            model.evaluate(&z).unwrap(),
            epsilon = 0.0
        );
    }
}
