//! Global sensitivity indices and the unified adaptive-sparse construction:
//! rank component functions per cardinality, grow polynomial orders while the
//! incremental sensitivity exceeds the tolerance, retain components whose
//! total sensitivity earns their keep, and compute the constant term last.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::pdd::{
    count_adaptive, count_truncated, shell_multi_indices, subsets_of_cardinality,
    CoefficientStore, MultiIndex, PddError, SubsetIndex,
};
use crate::quad::{CoefficientEngine, EngineError};

#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error("invalid adaptive configuration: {0}")]
    BadConfig(String),
    #[error("running variance is zero; sensitivity indices are undefined (constant model?)")]
    UndefinedSensitivity,
    #[error(
        "ranking of {cardinality}-variate components did not converge by order {max_order}"
    )]
    RankingNotConverged { cardinality: usize, max_order: u32 },
    #[error("evaluation budget exhausted: {evals} model calls against a budget of {budget}")]
    BudgetExceeded { evals: u64, budget: u64 },
    #[error("running variance lost consistency with the store: {incremental} vs {derived}")]
    StateInconsistent { incremental: f64, derived: f64 },
    #[error("engine failure while processing subset {subset} at order {order}: {source}")]
    Engine {
        subset: String,
        order: u32,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Pdd(#[from] PddError),
}

/// Which candidate lists are re-ranked between order increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingScheme {
    /// Every same-cardinality component is re-ranked at each order.
    Full,
    /// The candidate list is truncated at the first entry failing the
    /// variance-contribution tolerance and never revisited.
    Reduced,
}

/// Ranking convergence test: the pseudocode counts the fraction of unchanged
/// positions against the tolerance, the prose bounds the fraction changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingConvergence {
    /// Converged when `unchanged / ranked >= eps3`.
    FractionUnchanged,
    /// Converged when `changed / previously_ranked <= eps3`.
    DiscrepancyRatio,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveConfig {
    /// Degree-of-interaction cap; `s = N` makes the run fully adaptive.
    pub s: usize,
    /// Variance-contribution tolerance on the total sensitivity index.
    pub eps1: f64,
    /// Incremental-contribution tolerance on the sensitivity increment.
    pub eps2: f64,
    /// Ranking convergence tolerance in [0, 1].
    pub eps3: f64,
    pub ranking: RankingScheme,
    pub convergence: RankingConvergence,
    /// Hard cap on any polynomial order; reaching it is reported, not silent.
    pub max_order: u32,
    /// Optional hard cap on model evaluations for the whole run.
    pub max_evals: Option<u64>,
}

impl AdaptiveConfig {
    pub fn new(s: usize, eps1: f64, eps2: f64, eps3: f64) -> Self {
        Self {
            s,
            eps1,
            eps2,
            eps3,
            ranking: RankingScheme::Full,
            convergence: RankingConvergence::FractionUnchanged,
            max_order: 16,
            max_evals: None,
        }
    }

    pub fn validate(&self, n_vars: usize) -> Result<(), AdaptiveError> {
        if self.s == 0 || self.s > n_vars {
            return Err(AdaptiveError::BadConfig(format!(
                "interaction cap s={} outside 1..={n_vars}",
                self.s
            )));
        }
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(v >= 0.0) {
                return Err(AdaptiveError::BadConfig(format!(
                    "{name}={v} must be non-negative"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.eps3) {
            return Err(AdaptiveError::BadConfig(format!(
                "eps3={} must lie in [0, 1]",
                self.eps3
            )));
        }
        if self.max_order == 0 {
            return Err(AdaptiveError::BadConfig("max_order must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the decision trace; rendered one-per-line in the audit log.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum AuditEvent {
    RankingIteration {
        cardinality: usize,
        order: u32,
        unchanged: usize,
        ranked: usize,
        converged: bool,
    },
    RankingCut {
        subset: Vec<u32>,
        g_value: f64,
    },
    ShellAdded {
        subset: Vec<u32>,
        order: u32,
        g_value: f64,
        dg_value: Option<f64>,
        sigma2: f64,
    },
    ShellRemoved {
        subset: Vec<u32>,
        order: u32,
        dg_value: f64,
    },
    GrowthStopped {
        subset: Vec<u32>,
        final_order: u32,
        g_value: f64,
    },
    SubsetRetained {
        subset: Vec<u32>,
        order: u32,
        g_value: f64,
    },
    SubsetDropped {
        subset: Vec<u32>,
        g_value: f64,
    },
    CardinalityExit {
        cardinality: usize,
        at_subset: Vec<u32>,
    },
    OrderCapReached {
        subset: Vec<u32>,
        cap: u32,
    },
}

impl fmt::Display for AuditEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn subset(s: &[u32]) -> String {
            let inner: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            format!("{{{}}}", inner.join(","))
        }
        match self {
            Self::RankingIteration {
                cardinality,
                order,
                unchanged,
                ranked,
                converged,
            } => write!(
                f,
                "rank card={cardinality} order={order} unchanged={unchanged}/{ranked} converged={converged}"
            ),
            Self::RankingCut { subset: u, g_value } => {
                write!(f, "cut {} g={g_value:.6e}", subset(u))
            }
            Self::ShellAdded {
                subset: u,
                order,
                g_value,
                dg_value,
                sigma2,
            } => {
                write!(
                    f,
                    "shell {} m={order} g={g_value:.6e} dg={} sigma2={sigma2:.6e}",
                    subset(u),
                    dg_value.map_or("-".into(), |d| format!("{d:.6e}")),
                )
            }
            Self::ShellRemoved {
                subset: u,
                order,
                dg_value,
            } => write!(f, "unshell {} m={order} dg={dg_value:.6e}", subset(u)),
            Self::GrowthStopped {
                subset: u,
                final_order,
                g_value,
            } => write!(f, "stop {} m={final_order} g={g_value:.6e}", subset(u)),
            Self::SubsetRetained {
                subset: u,
                order,
                g_value,
            } => write!(f, "retain {} m={order} g={g_value:.6e}", subset(u)),
            Self::SubsetDropped { subset: u, g_value } => {
                write!(f, "drop {} g={g_value:.6e}", subset(u))
            }
            Self::CardinalityExit {
                cardinality,
                at_subset,
            } => write!(f, "exit card={cardinality} at={}", subset(at_subset)),
            Self::OrderCapReached { subset: u, cap } => {
                write!(f, "order-cap {} cap={cap}", subset(u))
            }
        }
    }
}

/// One retained component function in the report.
#[derive(Debug, Clone, Serialize)]
pub struct RetainedSubset {
    pub subset: Vec<u32>,
    pub order: u32,
    pub g_value: f64,
    pub coefficients: usize,
}

/// Machine-readable summary of one adaptive run (one output).
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub output: usize,
    pub s: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub ranking: RankingScheme,
    pub mean: f64,
    pub variance: f64,
    pub eval_count: u64,
    pub retained: Vec<RetainedSubset>,
    pub coefficient_count: u128,
    pub m_max: u32,
    pub truncated_count_at_m_max: u128,
    pub warnings: Vec<String>,
}

/// The products of one adaptive run.
pub struct AdaptiveOutcome {
    pub store: CoefficientStore,
    pub report: RunReport,
    pub audit: Vec<AuditEvent>,
}

/// Total sensitivity index of subset `u` at order `m_u` against the running
/// variance held by the store.
pub fn sensitivity_index(
    store: &CoefficientStore,
    u: &SubsetIndex,
    m_u: u32,
) -> Result<f64, AdaptiveError> {
    let sigma2 = store.variance();
    if sigma2 <= 0.0 {
        return Err(AdaptiveError::UndefinedSensitivity);
    }
    let mass: f64 = store
        .iter()
        .filter(|((uu, j), _)| uu == u && j.max_order() <= m_u)
        .map(|(_, c)| c * c)
        .sum();
    Ok(mass / sigma2)
}

/// Relative change of the sensitivity index when the order grows to `m_u`.
pub fn sensitivity_increment(
    store: &CoefficientStore,
    u: &SubsetIndex,
    m_u: u32,
) -> Result<f64, AdaptiveError> {
    if m_u < 2 {
        return Err(AdaptiveError::BadConfig(
            "sensitivity increment requires m_u >= 2".into(),
        ));
    }
    let g_prev = sensitivity_index(store, u, m_u - 1)?;
    let g_cur = sensitivity_index(store, u, m_u)?;
    if g_prev == 0.0 {
        // zero base: no new mass means settled, fresh mass means keep growing
        return Ok(if g_cur == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((g_cur - g_prev) / g_prev)
}

struct LoopState<'e> {
    engine: &'e mut dyn CoefficientEngine,
    output: usize,
    store: CoefficientStore,
    sigma2: f64,
    orders: BTreeMap<SubsetIndex, u32>,
    audit: Vec<AuditEvent>,
    warnings: Vec<String>,
    max_evals: Option<u64>,
}

impl LoopState<'_> {
    fn check_budget(&self) -> Result<(), AdaptiveError> {
        if let Some(budget) = self.max_evals {
            let evals = self.engine.eval_count();
            if evals > budget {
                return Err(AdaptiveError::BudgetExceeded { evals, budget });
            }
        }
        Ok(())
    }

    fn add_shell(&mut self, u: &SubsetIndex, m: u32) -> Result<(), AdaptiveError> {
        for orders in shell_multi_indices(u.cardinality(), m) {
            let j = MultiIndex::new(orders, u.cardinality())?;
            let c = self
                .engine
                .coefficient(self.output, u, &j)
                .map_err(|source| AdaptiveError::Engine {
                    subset: u.to_string(),
                    order: m,
                    source,
                })?;
            self.store.insert(u.clone(), j, c);
            self.sigma2 += c * c;
        }
        self.orders.insert(u.clone(), m);
        self.check_budget()
    }

    fn remove_shell(&mut self, u: &SubsetIndex, m: u32) -> Result<(), AdaptiveError> {
        for orders in shell_multi_indices(u.cardinality(), m) {
            let j = MultiIndex::new(orders, u.cardinality())?;
            if let Some(c) = self.store.remove(u, &j) {
                self.sigma2 -= c * c;
            }
        }
        self.orders.insert(u.clone(), m - 1);
        Ok(())
    }

    fn drop_subset(&mut self, u: &SubsetIndex) {
        let keys: Vec<MultiIndex> = self
            .store
            .iter()
            .filter(|((uu, _), _)| uu == u)
            .map(|((_, j), _)| j.clone())
            .collect();
        for j in keys {
            if let Some(c) = self.store.remove(u, &j) {
                self.sigma2 -= c * c;
            }
        }
        self.orders.remove(u);
    }

    fn g_value(&self, u: &SubsetIndex) -> Result<f64, AdaptiveError> {
        if self.sigma2 <= 0.0 {
            return Err(AdaptiveError::UndefinedSensitivity);
        }
        Ok(self.store.subset_mass(u) / self.sigma2)
    }

    /// Running variance must re-derive from the store at every checkpoint.
    fn check_consistency(&mut self) -> Result<(), AdaptiveError> {
        let derived = self.store.variance();
        let scale = derived.abs().max(self.sigma2.abs()).max(1e-300);
        if (derived - self.sigma2).abs() / scale > 1e-9 {
            return Err(AdaptiveError::StateInconsistent {
                incremental: self.sigma2,
                derived,
            });
        }
        // keep the accumulated value exactly re-derivable from here on
        self.sigma2 = derived;
        Ok(())
    }
}

/// Runs the adaptive-sparse construction for one model output on top of any
/// coefficient engine. Cardinalities are processed in increasing order; the
/// constant term is computed last.
pub fn run_adaptive(
    engine: &mut dyn CoefficientEngine,
    n_vars: usize,
    output: usize,
    config: &AdaptiveConfig,
) -> Result<AdaptiveOutcome, AdaptiveError> {
    config.validate(n_vars)?;
    // orders are bounded by both the configured cap and what the engine can
    // actually resolve at its quadrature exactness
    let order_cap = config.max_order.min(engine.max_order());
    let mut state = LoopState {
        engine,
        output,
        store: CoefficientStore::new(0.0),
        sigma2: 0.0,
        orders: BTreeMap::new(),
        audit: Vec::new(),
        warnings: Vec::new(),
        max_evals: config.max_evals,
    };
    let mut retained_vars: BTreeSet<u32> = BTreeSet::new();

    for cardinality in 1..=config.s {
        let pool: Vec<u32> = if cardinality == 1 || config.ranking == RankingScheme::Full {
            (0..n_vars as u32).collect()
        } else {
            retained_vars.iter().copied().collect()
        };
        if pool.len() < cardinality {
            continue;
        }
        let candidates: Vec<SubsetIndex> = subsets_of_cardinality(pool.len(), cardinality)
            .into_iter()
            .map(|picks| {
                SubsetIndex::new(picks.into_iter().map(|i| pool[i as usize]).collect())
            })
            .collect::<Result<_, _>>()?;

        // ranking phase: grow all candidates in lockstep until the order
        // stabilizes the ranking
        let mut ranked = candidates;
        let mut previous: Option<Vec<SubsetIndex>> = None;
        let mut order = 0u32;
        loop {
            order += 1;
            if order > order_cap {
                return Err(AdaptiveError::RankingNotConverged {
                    cardinality,
                    max_order: order_cap,
                });
            }
            for u in &ranked {
                state.add_shell(u, order)?;
            }
            let mut scored: Vec<(SubsetIndex, f64)> = ranked
                .iter()
                .map(|u| state.g_value(u).map(|g| (u.clone(), g)))
                .collect::<Result<_, _>>()?;
            // rank on a quantized key so quadrature noise on exactly-zero
            // components cannot reshuffle the order between iterations;
            // the tolerance criteria below still see the raw values
            let rank_key = |g: f64| {
                if g < 1e-15 {
                    0.0
                } else {
                    crate::quad::round_sig(g)
                }
            };
            scored.sort_by(|a, b| {
                rank_key(b.1)
                    .partial_cmp(&rank_key(a.1))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            if config.ranking == RankingScheme::Reduced {
                let keep = scored.iter().take_while(|(_, g)| *g > config.eps1).count();
                for (u, g) in scored.split_off(keep) {
                    state.audit.push(AuditEvent::RankingCut {
                        subset: u.members().to_vec(),
                        g_value: g,
                    });
                    state.drop_subset(&u);
                }
            }
            let current: Vec<SubsetIndex> = scored.into_iter().map(|(u, _)| u).collect();
            if let Some(prev) = &previous {
                if current.is_empty() {
                    state.audit.push(AuditEvent::RankingIteration {
                        cardinality,
                        order,
                        unchanged: 0,
                        ranked: 0,
                        converged: true,
                    });
                    ranked = current;
                    break;
                }
                let unchanged = current
                    .iter()
                    .zip(prev.iter())
                    .filter(|(a, b)| a == b)
                    .count();
                let converged = match config.convergence {
                    RankingConvergence::FractionUnchanged => {
                        unchanged as f64 / current.len() as f64 >= config.eps3
                    }
                    RankingConvergence::DiscrepancyRatio => {
                        (prev.len() - unchanged.min(prev.len())) as f64 / prev.len() as f64
                            <= config.eps3
                    }
                };
                state.audit.push(AuditEvent::RankingIteration {
                    cardinality,
                    order,
                    unchanged,
                    ranked: current.len(),
                    converged,
                });
                if converged {
                    ranked = current;
                    break;
                }
            }
            previous = Some(current.clone());
            ranked = current;
        }

        // adaptivity phase: grow each ranked component until the incremental
        // sensitivity falls to eps2, then apply the retention criterion
        for (position, u) in ranked.iter().enumerate() {
            let mut m_u = state.orders[u];
            let mut g_prev = state.g_value(u)?;
            loop {
                if m_u + 1 > order_cap {
                    state.audit.push(AuditEvent::OrderCapReached {
                        subset: u.members().to_vec(),
                        cap: order_cap,
                    });
                    state
                        .warnings
                        .push(format!("order cap {order_cap} reached for {u}"));
                    break;
                }
                m_u += 1;
                state.add_shell(u, m_u)?;
                let g_cur = state.g_value(u)?;
                let dg = if g_prev > 0.0 {
                    (g_cur - g_prev) / g_prev
                } else if g_cur == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                state.audit.push(AuditEvent::ShellAdded {
                    subset: u.members().to_vec(),
                    order: m_u,
                    g_value: g_cur,
                    dg_value: Some(dg),
                    sigma2: state.sigma2,
                });
                if dg <= config.eps2 {
                    state.remove_shell(u, m_u)?;
                    state.audit.push(AuditEvent::ShellRemoved {
                        subset: u.members().to_vec(),
                        order: m_u,
                        dg_value: dg,
                    });
                    m_u -= 1;
                    break;
                }
                g_prev = g_cur;
            }
            // trim trailing ranking-phase shells that fail the increment
            // criterion; the variance-independent mass ratio bounds the
            // logged increment from above, so passed shells are never cut
            while m_u >= 2 {
                let shell_mass: f64 = state
                    .store
                    .iter()
                    .filter(|((uu, j), _)| uu == u && j.max_order() == m_u)
                    .map(|(_, c)| c * c)
                    .sum();
                let cum_mass: f64 = state
                    .store
                    .iter()
                    .filter(|((uu, j), _)| uu == u && j.max_order() < m_u)
                    .map(|(_, c)| c * c)
                    .sum();
                let ratio = if cum_mass > 0.0 {
                    shell_mass / cum_mass
                } else if shell_mass == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                if ratio <= config.eps2 {
                    state.remove_shell(u, m_u)?;
                    state.audit.push(AuditEvent::ShellRemoved {
                        subset: u.members().to_vec(),
                        order: m_u,
                        dg_value: ratio,
                    });
                    m_u -= 1;
                } else {
                    break;
                }
            }
            let g_final = state.g_value(u)?;
            state.audit.push(AuditEvent::GrowthStopped {
                subset: u.members().to_vec(),
                final_order: m_u,
                g_value: g_final,
            });
            if g_final <= config.eps1 {
                state.audit.push(AuditEvent::SubsetDropped {
                    subset: u.members().to_vec(),
                    g_value: g_final,
                });
                state.drop_subset(u);
                for rest in ranked.iter().skip(position + 1) {
                    let g = state.g_value(rest).unwrap_or(0.0);
                    state.audit.push(AuditEvent::SubsetDropped {
                        subset: rest.members().to_vec(),
                        g_value: g,
                    });
                    state.drop_subset(rest);
                }
                state.audit.push(AuditEvent::CardinalityExit {
                    cardinality,
                    at_subset: u.members().to_vec(),
                });
                break;
            }
            state.audit.push(AuditEvent::SubsetRetained {
                subset: u.members().to_vec(),
                order: m_u,
                g_value: g_final,
            });
            retained_vars.extend(u.members().iter().copied());
        }
        state.check_consistency()?;
    }

    // the constant term comes last
    let y_empty = state
        .engine
        .mean(output)
        .map_err(|source| AdaptiveError::Engine {
            subset: "{}".into(),
            order: 0,
            source,
        })?;
    state.store.y_empty = y_empty;
    state.store.set_eval_count(state.engine.eval_count());
    state.check_budget()?;
    state.check_consistency()?;

    let m_max = state.store.max_retained_order();
    let coefficient_count = count_adaptive(&state.store);
    let truncated_count_at_m_max = count_truncated(n_vars, config.s, m_max);
    if coefficient_count > truncated_count_at_m_max {
        return Err(AdaptiveError::BadConfig(format!(
            "retained {coefficient_count} coefficients, exceeding the truncated bound \
             {truncated_count_at_m_max} at m_max={m_max}"
        )));
    }

    let retained = state
        .store
        .retained_subsets()
        .into_iter()
        .map(|(u, order)| {
            let g_value = state.store.subset_mass(&u) / state.store.variance().max(1e-300);
            let coefficients = state
                .store
                .iter()
                .filter(|((uu, _), _)| *uu == u)
                .count();
            RetainedSubset {
                subset: u.members().to_vec(),
                order,
                g_value,
                coefficients,
            }
        })
        .collect();

    let report = RunReport {
        output,
        s: config.s,
        eps1: config.eps1,
        eps2: config.eps2,
        eps3: config.eps3,
        ranking: config.ranking,
        mean: y_empty,
        variance: state.store.variance(),
        eval_count: state.store.eval_count(),
        retained,
        coefficient_count,
        m_max,
        truncated_count_at_m_max,
        warnings: state.warnings,
    };
    Ok(AdaptiveOutcome {
        store: state.store,
        report,
        audit: state.audit,
    })
}

/// Builds a classical truncated expansion: every subset up to cardinality S,
/// every multi-index up to order m. The companion baseline for sweep studies.
pub fn run_truncated(
    engine: &mut dyn CoefficientEngine,
    n_vars: usize,
    output: usize,
    s: usize,
    m: u32,
) -> Result<CoefficientStore, AdaptiveError> {
    let mut store = CoefficientStore::new(0.0);
    for cardinality in 1..=s.min(n_vars) {
        for members in subsets_of_cardinality(n_vars, cardinality) {
            let u = SubsetIndex::new(members)?;
            for order in 1..=m {
                for orders in shell_multi_indices(cardinality, order) {
                    let j = MultiIndex::new(orders, cardinality)?;
                    let c = engine
                        .coefficient(output, &u, &j)
                        .map_err(|source| AdaptiveError::Engine {
                            subset: u.to_string(),
                            order,
                            source,
                        })?;
                    store.insert(u.clone(), j, c);
                }
            }
        }
    }
    store.y_empty = engine
        .mean(output)
        .map_err(|source| AdaptiveError::Engine {
            subset: "{}".into(),
            order: 0,
            source,
        })?;
    store.set_eval_count(engine.eval_count());
    Ok(store)
}
