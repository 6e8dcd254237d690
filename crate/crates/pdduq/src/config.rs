//! Campaign configuration files, campaign execution, and run manifests.
//!
//! A campaign is described by one TOML document (see `docs/config-schema.md`
//! in the repository root); unknown keys are rejected. The same configuration
//! plus the same seed reproduces every numeric output bit for bit, and the
//! manifest records a digest of each emitted file to make that checkable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptive::{
    run_adaptive, run_truncated, AdaptiveConfig, AdaptiveError, RankingConvergence, RankingScheme,
    RunReport,
};
use crate::input::{InputError, MarginalDesc, RandomInput};
use crate::models::{Example1, ExternalModel, Model, ModelError, SpringMassSystem};
use crate::orthopoly::{OrthoError, OrthonormalBasis};
use crate::pdd::{count_adaptive, PddError, SurrogateModel};
use crate::postproc::{
    crude_mcs, embedded_mcs, tolerance_sweep, write_cdf_csv, write_histogram_csv, write_sweep_csv,
    McsSummary, PostprocError, SweepResult, SweepRun,
};
use crate::qmc::{QmcError, QmcPointEngine, SobolSequence};
use crate::quad::{CoefficientEngine, EngineError, FsiEngine, FullGridEngine, GridKind};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error(transparent)]
    Pdd(#[from] PddError),
    #[error(transparent)]
    Qmc(#[from] QmcError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CampaignError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable process exit codes: 2 config, 4 budget, 3 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Parse(_) => 2,
            Self::Adaptive(AdaptiveError::BudgetExceeded { .. }) => 4,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    pub method: MethodConfig,
    pub engine: EngineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcs: Option<McsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub marginals: Vec<MarginalDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_order: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_v: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_point: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub max_evals: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McsConfig {
    pub kind: String,
    pub samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub tolerances: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_truncated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated_max_m: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_dump: Option<bool>,
}

pub fn parse_config(text: &str) -> Result<CampaignConfig, CampaignError> {
    toml::from_str(text).map_err(|e| CampaignError::Parse(e.to_string()))
}

/// Applies `--set key=value` overrides onto the raw document: dotted keys
/// address nested tables, values parse as TOML fragments (strings fall back
/// to literal strings).
pub fn apply_overrides(text: &str, sets: &[(String, String)]) -> Result<String, CampaignError> {
    let mut doc: toml::Value = text
        .parse()
        .map_err(|e: toml::de::Error| CampaignError::Parse(e.to_string()))?;
    for (key, value) in sets {
        let parsed: toml::Value = match format!("x = {value}").parse::<toml::Value>() {
            Ok(toml::Value::Table(t)) => t.get("x").cloned().unwrap(),
            _ => toml::Value::String(value.clone()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let mut cursor = &mut doc;
        for part in &parts[..parts.len() - 1] {
            let table = cursor.as_table_mut().ok_or_else(|| {
                CampaignError::config(key, format!("`{part}` does not address a table"))
            })?;
            cursor = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = cursor.as_table_mut().ok_or_else(|| {
            CampaignError::config(key, "path does not address a table".to_string())
        })?;
        table.insert(parts[parts.len() - 1].to_string(), parsed);
    }
    toml::to_string(&doc).map_err(|e| CampaignError::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    AdaptiveFull,
    AdaptivePartial,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    FullGrid,
    SparseFsi,
    Qmc,
}

/// A validated campaign with the model instantiated and bases built.
pub struct ResolvedCampaign {
    pub config: CampaignConfig,
    pub model: Box<dyn Model>,
    pub input: RandomInput,
    pub bases: Vec<OrthonormalBasis>,
    pub method: MethodKind,
    pub engine: EngineKind,
    pub adaptive: Option<AdaptiveConfig>,
    pub truncated: Option<(usize, u32)>,
    pub max_order: u32,
}

impl ResolvedCampaign {
    pub fn outputs(&self) -> usize {
        self.model.outputs()
    }
}

pub fn resolve(config: CampaignConfig) -> Result<ResolvedCampaign, CampaignError> {
    let model: Box<dyn Model> = match config.model.kind.as_str() {
        "example1" => {
            let dim = config
                .model
                .dim
                .ok_or_else(|| CampaignError::config("model.dim", "example1 requires `dim`"))?;
            if dim == 0 {
                return Err(CampaignError::config("model.dim", "must be at least 1"));
            }
            Box::new(Example1::new(dim))
        }
        "springmass" => Box::new(SpringMassSystem::default()),
        "external" => {
            let command = config.model.command.clone().ok_or_else(|| {
                CampaignError::config("model.command", "external model requires `command`")
            })?;
            let dim = config.model.dim.ok_or_else(|| {
                CampaignError::config("model.dim", "external model requires `dim`")
            })?;
            let outputs = config.model.outputs.unwrap_or(1);
            let timeout = Duration::from_secs_f64(config.model.timeout_seconds.unwrap_or(30.0));
            let pool = config.model.pool.unwrap_or(1);
            Box::new(ExternalModel::new(command, dim, outputs, timeout, pool)?)
        }
        other => {
            return Err(CampaignError::config(
                "model.kind",
                format!("unknown model `{other}` (expected example1, springmass or external)"),
            ))
        }
    };

    let input = match (&config.input, config.model.kind.as_str()) {
        (Some(cfg), _) => {
            let marginals = cfg
                .marginals
                .iter()
                .map(|d| d.to_spec())
                .collect::<Result<Vec<_>, _>>()?;
            RandomInput::new(marginals)?
        }
        (None, "example1") => Example1::new(model.dim()).standard_input(),
        (None, "springmass") => SpringMassSystem::standard_input(),
        (None, _) => {
            return Err(CampaignError::config(
                "input.marginals",
                "external models require explicit marginals",
            ))
        }
    };
    if input.dim() != model.dim() {
        return Err(CampaignError::config(
            "input.marginals",
            format!(
                "{} marginals declared for a model of dimension {}",
                input.dim(),
                model.dim()
            ),
        ));
    }

    let method = match config.method.kind.as_str() {
        "adaptive-full" => MethodKind::AdaptiveFull,
        "adaptive-partial" => MethodKind::AdaptivePartial,
        "truncated" => MethodKind::Truncated,
        other => {
            return Err(CampaignError::config(
                "method.kind",
                format!(
                    "unknown method `{other}` (expected adaptive-full, adaptive-partial or truncated)"
                ),
            ))
        }
    };
    let engine = match config.engine.kind.as_str() {
        "fullgrid" => EngineKind::FullGrid,
        "sparse-fsi" => EngineKind::SparseFsi,
        "qmc" => EngineKind::Qmc,
        other => {
            return Err(CampaignError::config(
                "engine.kind",
                format!("unknown engine `{other}` (expected fullgrid, sparse-fsi or qmc)"),
            ))
        }
    };

    // engine parameter checks happen here, not mid-run
    match engine {
        EngineKind::FullGrid => {
            let r = config
                .engine
                .r
                .ok_or_else(|| CampaignError::config("engine.r", "fullgrid requires `r`"))?;
            if r > input.dim() {
                return Err(CampaignError::config(
                    "engine.r",
                    format!("reduction order {r} exceeds dimension {}", input.dim()),
                ));
            }
            let n_v = config
                .engine
                .n_v
                .ok_or_else(|| CampaignError::config("engine.n_v", "fullgrid requires `n_v`"))?;
            if n_v == 0 {
                return Err(CampaignError::config("engine.n_v", "must be at least 1"));
            }
        }
        EngineKind::SparseFsi => {
            config
                .engine
                .r
                .ok_or_else(|| CampaignError::config("engine.r", "sparse-fsi requires `r`"))?;
            let level = config.engine.level.ok_or_else(|| {
                CampaignError::config("engine.level", "sparse-fsi requires `level`")
            })?;
            if level > crate::quad::FSI_MAX_LEVEL {
                return Err(CampaignError::config(
                    "engine.level",
                    format!("level {level} exceeds the generator range {}", crate::quad::FSI_MAX_LEVEL),
                ));
            }
            if !input.gaussian_standardizable() {
                return Err(CampaignError::config(
                    "engine.kind",
                    "sparse-fsi requires gaussian-standardizable marginals",
                ));
            }
        }
        EngineKind::Qmc => {
            let samples = config
                .engine
                .samples
                .ok_or_else(|| CampaignError::config("engine.samples", "qmc requires `samples`"))?;
            if samples == 0 {
                return Err(CampaignError::config("engine.samples", "must be at least 1"));
            }
        }
    }
    if let Some(point) = &config.engine.reference_point {
        if point.len() != input.dim() {
            return Err(CampaignError::config(
                "engine.reference_point",
                format!("expected {} coordinates, got {}", input.dim(), point.len()),
            ));
        }
    }

    let max_order = config.method.max_order.unwrap_or(16);
    let mut adaptive = None;
    let mut truncated = None;
    match method {
        MethodKind::Truncated => {
            let s = config
                .method
                .s
                .ok_or_else(|| CampaignError::config("method.s", "truncated requires `s`"))?;
            let m = config
                .method
                .m
                .ok_or_else(|| CampaignError::config("method.m", "truncated requires `m`"))?;
            if s == 0 || s > input.dim() {
                return Err(CampaignError::config(
                    "method.s",
                    format!("must lie in 1..={}", input.dim()),
                ));
            }
            if m == 0 {
                return Err(CampaignError::config("method.m", "must be at least 1"));
            }
            truncated = Some((s, m));
        }
        MethodKind::AdaptiveFull | MethodKind::AdaptivePartial => {
            let s = if method == MethodKind::AdaptiveFull {
                input.dim()
            } else {
                config.method.s.ok_or_else(|| {
                    CampaignError::config("method.s", "adaptive-partial requires `s`")
                })?
            };
            let mut field = "method.eps1";
            let check = |field: &str, v: Option<f64>| -> Result<f64, CampaignError> {
                let v = v.ok_or_else(|| CampaignError::config(field, "required"))?;
                if !(v >= 0.0) {
                    return Err(CampaignError::config(
                        field,
                        format!("{v} must be non-negative"),
                    ));
                }
                Ok(v)
            };
            let eps1 = check(field, config.method.eps1)?;
            field = "method.eps2";
            let eps2 = check(field, config.method.eps2)?;
            let eps3 = config.method.eps3.unwrap_or(0.9);
            if !(0.0..=1.0).contains(&eps3) {
                return Err(CampaignError::config(
                    "method.eps3",
                    format!("{eps3} must lie in [0, 1]"),
                ));
            }
            let mut cfg = AdaptiveConfig::new(s, eps1, eps2, eps3);
            cfg.max_order = max_order;
            cfg.ranking = match config.method.ranking.as_deref() {
                None | Some("full") => RankingScheme::Full,
                Some("reduced") => RankingScheme::Reduced,
                Some(other) => {
                    return Err(CampaignError::config(
                        "method.ranking",
                        format!("unknown ranking `{other}` (expected full or reduced)"),
                    ))
                }
            };
            cfg.convergence = match config.method.convergence.as_deref() {
                None | Some("fraction-unchanged") => RankingConvergence::FractionUnchanged,
                Some("discrepancy-ratio") => RankingConvergence::DiscrepancyRatio,
                Some(other) => {
                    return Err(CampaignError::config(
                        "method.convergence",
                        format!(
                            "unknown convergence `{other}` (expected fraction-unchanged or discrepancy-ratio)"
                        ),
                    ))
                }
            };
            cfg.max_evals = config.budget.as_ref().map(|b| b.max_evals);
            adaptive = Some(cfg);
        }
    }

    if let Some(mcs) = &config.mcs {
        if !matches!(mcs.kind.as_str(), "embedded" | "crude") {
            return Err(CampaignError::config(
                "mcs.kind",
                format!("unknown kind `{}` (expected embedded or crude)", mcs.kind),
            ));
        }
        if mcs.samples == 0 {
            return Err(CampaignError::config("mcs.samples", "must be at least 1"));
        }
    }

    let bases = input
        .marginals()
        .iter()
        .map(|m| OrthonormalBasis::build(m, max_order as usize))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ResolvedCampaign {
        config,
        model,
        input,
        bases,
        method,
        engine,
        adaptive,
        truncated,
        max_order,
    })
}

// ---------------------------------------------------------------------------
// Campaign execution
// ---------------------------------------------------------------------------

enum AnyEngine<'m> {
    Full(FullGridEngine<'m>),
    Fsi(FsiEngine<'m>),
    Qmc(QmcPointEngine),
}

impl AnyEngine<'_> {
    fn as_dyn(&mut self) -> &mut dyn CoefficientEngine {
        match self {
            Self::Full(e) => e,
            Self::Fsi(e) => e,
            Self::Qmc(e) => e,
        }
    }
}

fn build_engine<'m>(campaign: &ResolvedCampaign, model: &'m dyn Model) -> Result<AnyEngine<'m>, CampaignError> {
    let cfg = &campaign.config.engine;
    let reference = cfg.reference_point.clone();
    Ok(match campaign.engine {
        EngineKind::FullGrid => AnyEngine::Full(FullGridEngine::new(
            model,
            &campaign.input,
            &campaign.bases,
            cfg.r.unwrap(),
            cfg.n_v.unwrap(),
            reference,
        )?),
        EngineKind::SparseFsi => AnyEngine::Fsi(FsiEngine::new(
            model,
            &campaign.input,
            &campaign.bases,
            cfg.r.unwrap(),
            cfg.level.unwrap(),
            reference,
        )?),
        EngineKind::Qmc => {
            let mut seq = SobolSequence::new(campaign.input.dim(), cfg.offset.unwrap_or(0))?;
            AnyEngine::Qmc(QmcPointEngine::from_sobol(
                model,
                &campaign.input,
                &campaign.bases,
                cfg.samples.unwrap(),
                &mut seq,
            )?)
        }
    })
}

/// Everything a build campaign produces for one output.
pub struct BuildRun {
    pub surrogate: SurrogateModel,
    pub report: RunReport,
    pub audit_lines: Vec<String>,
}

pub struct BuildArtifacts {
    pub runs: Vec<BuildRun>,
    pub eval_count: u64,
}

/// Runs the configured construction once per model output over one shared
/// engine (so model evaluations are reused across outputs).
pub fn run_build(campaign: &ResolvedCampaign) -> Result<BuildArtifacts, CampaignError> {
    let model = campaign.model.as_ref();
    let mut engine = build_engine(campaign, model)?;
    let outputs = campaign.outputs();
    let mut runs = Vec::with_capacity(outputs);
    for output in 0..outputs {
        let (store, report, audit_lines) = match campaign.method {
            MethodKind::AdaptiveFull | MethodKind::AdaptivePartial => {
                let outcome = run_adaptive(
                    engine.as_dyn(),
                    campaign.input.dim(),
                    output,
                    campaign.adaptive.as_ref().unwrap(),
                )?;
                let lines = outcome.audit.iter().map(|e| e.to_string()).collect();
                (outcome.store, outcome.report, lines)
            }
            MethodKind::Truncated => {
                let (s, m) = campaign.truncated.unwrap();
                let store = run_truncated(engine.as_dyn(), campaign.input.dim(), output, s, m)?;
                let report = RunReport {
                    output,
                    s,
                    eps1: 0.0,
                    eps2: 0.0,
                    eps3: 0.0,
                    ranking: RankingScheme::Full,
                    mean: store.y_empty,
                    variance: store.variance(),
                    eval_count: store.eval_count(),
                    retained: Vec::new(),
                    coefficient_count: count_adaptive(&store),
                    m_max: m,
                    truncated_count_at_m_max: crate::pdd::count_truncated(
                        campaign.input.dim(),
                        s,
                        m,
                    ),
                    warnings: Vec::new(),
                };
                (store, report, Vec::new())
            }
        };
        let surrogate =
            SurrogateModel::new(store, campaign.bases.clone(), campaign.input.clone())?;
        runs.push(BuildRun {
            surrogate,
            report,
            audit_lines,
        });
    }
    Ok(BuildArtifacts {
        runs,
        eval_count: engine.as_dyn().eval_count(),
    })
}

/// Runs the configured Monte Carlo study: embedded resampling of a surrogate
/// file, or crude sampling of the original model.
pub fn run_mcs(
    campaign: &ResolvedCampaign,
    surrogates: &[SurrogateModel],
) -> Result<Vec<McsSummary>, CampaignError> {
    let mcs = campaign
        .config
        .mcs
        .as_ref()
        .ok_or_else(|| CampaignError::config("mcs", "missing [mcs] section"))?;
    let seed = campaign.config.seed;
    Ok(match mcs.kind.as_str() {
        "embedded" => surrogates
            .iter()
            .map(|s| embedded_mcs(s, mcs.samples, seed))
            .collect::<Result<Vec<_>, _>>()?,
        _ => crude_mcs(campaign.model.as_ref(), &campaign.input, mcs.samples, seed)?,
    })
}

/// Reference variance for sweep studies: the closed form where one exists,
/// otherwise a fully converged high-order run.
pub fn reference_variance(campaign: &ResolvedCampaign) -> Result<(f64, String), CampaignError> {
    let label = campaign
        .config
        .sweep
        .as_ref()
        .and_then(|s| s.reference.clone())
        .unwrap_or_else(|| {
            if campaign.config.model.kind == "example1" {
                "analytic".into()
            } else {
                "high-order".into()
            }
        });
    match label.as_str() {
        "analytic" => {
            if campaign.config.model.kind != "example1" {
                return Err(CampaignError::config(
                    "sweep.reference",
                    "analytic reference only exists for example1",
                ));
            }
            Ok((
                Example1::exact_variance(campaign.model.dim()),
                "analytic".into(),
            ))
        }
        "high-order" => {
            let model = campaign.model.as_ref();
            let mut engine = build_engine(campaign, model)?;
            let dyn_engine = engine.as_dyn();
            let cap = campaign.max_order.min(dyn_engine.max_order());
            let store = run_truncated(dyn_engine, campaign.input.dim(), 0, campaign.input.dim().min(4), cap)?;
            Ok((store.variance(), "high-order".into()))
        }
        other => Err(CampaignError::config(
            "sweep.reference",
            format!("unknown reference `{other}`"),
        )),
    }
}

/// One adaptive run per tolerance (fresh engine each, so every row is
/// independently replayable), plus optional truncated baselines.
pub fn run_sweep(campaign: &ResolvedCampaign) -> Result<SweepResult, CampaignError> {
    let sweep_cfg = campaign
        .config
        .sweep
        .as_ref()
        .ok_or_else(|| CampaignError::config("sweep", "missing [sweep] section"))?;
    let (reference, label) = reference_variance(campaign)?;
    let template = campaign.adaptive.clone().ok_or_else(|| {
        CampaignError::config("method.kind", "sweep requires an adaptive method")
    })?;
    let model = campaign.model.as_ref();
    let method_name = match (campaign.method, template.ranking) {
        (MethodKind::AdaptiveFull, RankingScheme::Full) => "adaptive-full",
        (MethodKind::AdaptiveFull, RankingScheme::Reduced) => "adaptive-full-reduced",
        (_, RankingScheme::Full) => "adaptive-partial",
        (_, RankingScheme::Reduced) => "adaptive-partial-reduced",
    };
    let mut result = tolerance_sweep(
        &sweep_cfg.tolerances,
        reference,
        &label,
        |tol| -> Result<SweepRun, CampaignError> {
            let mut engine = build_engine(campaign, model)?;
            let mut cfg = template.clone();
            cfg.eps1 = tol;
            cfg.eps2 = tol;
            let outcome = run_adaptive(engine.as_dyn(), campaign.input.dim(), 0, &cfg)?;
            Ok(SweepRun {
                variance: outcome.report.variance,
                coefficient_count: outcome.report.coefficient_count,
                eval_count: engine.as_dyn().eval_count(),
                method: method_name.into(),
            })
        },
    )?;
    if sweep_cfg.include_truncated.unwrap_or(false) {
        let max_m = sweep_cfg.truncated_max_m.unwrap_or(6);
        for s in 1..=campaign.input.dim() {
            for m in 1..=max_m {
                let mut engine = build_engine(campaign, model)?;
                let store = run_truncated(engine.as_dyn(), campaign.input.dim(), 0, s, m)?;
                result.rows.push(crate::postproc::SweepRow {
                    tolerance: 0.0,
                    rel_error: (store.variance() - reference).abs() / reference,
                    coefficient_count: count_adaptive(&store),
                    eval_count: engine.as_dyn().eval_count(),
                    method: format!("truncated s={s} m={m}"),
                });
            }
        }
    }
    Ok(result)
}

/// Table 1-style grid-size report.
pub fn grid_info(kind: GridKind, dims: &[usize], levels: &[u32]) -> Result<Vec<(usize, u32, u128)>, CampaignError> {
    let mut rows = Vec::new();
    for &d in dims {
        for &l in levels {
            rows.push((d, l, crate::quad::grid_point_count(kind, d, l)?));
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Inventory of one campaign invocation: resolved config, tool version, wall
/// time, evaluation counters, and a digest per emitted file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub wall_seconds: f64,
    pub eval_counts: BTreeMap<String, u64>,
    pub config: CampaignConfig,
    pub outputs: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(config: &CampaignConfig) -> Self {
        Self {
            tool: "pdduq".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            wall_seconds: 0.0,
            eval_counts: BTreeMap::new(),
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    /// Records a file that was just written under the output directory.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<(), CampaignError> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let digest = Sha256::digest(&bytes);
        self.outputs.push(ManifestEntry {
            path: name.to_string(),
            sha256: format!("{digest:x}"),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CampaignError> {
        let path = dir.join("manifest.json");
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        serde_json::to_writer_pretty(&mut f, self)
            .map_err(|e| CampaignError::Parse(e.to_string()))?;
        writeln!(f).map_err(io_err(&path))?;
        Ok(())
    }
}

/// Writes a JSON value with a trailing newline and records it in the manifest.
pub fn write_json_artifact<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    manifest: &mut RunManifest,
) -> Result<(), CampaignError> {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CampaignError::Parse(e.to_string()))?;
    writeln!(f).map_err(io_err(&path))?;
    manifest.record(dir, name)
}

/// Writes MCS distribution artifacts (CDF and histogram CSVs) for one output.
pub fn write_mcs_artifacts(
    dir: &Path,
    output: usize,
    summary: &McsSummary,
    manifest: &mut RunManifest,
) -> Result<(), CampaignError> {
    let cdf_name = format!("cdf-{output}.csv");
    let path = dir.join(&cdf_name);
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    write_cdf_csv(summary, &mut f).map_err(io_err(&path))?;
    manifest.record(dir, &cdf_name)?;

    let hist_name = format!("histogram-{output}.csv");
    let path = dir.join(&hist_name);
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    write_histogram_csv(summary, &mut f).map_err(io_err(&path))?;
    manifest.record(dir, &hist_name)
}

/// Writes the sweep CSV artifact.
pub fn write_sweep_artifact(
    dir: &Path,
    sweep: &SweepResult,
    manifest: &mut RunManifest,
) -> Result<(), CampaignError> {
    let path = dir.join("sweep.csv");
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    write_sweep_csv(sweep, &mut f).map_err(io_err(&path))?;
    manifest.record(dir, "sweep.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    const EX1: &str = r#"
seed = 7
[model]
kind = "example1"
dim = 3
[method]
kind = "adaptive-full"
eps1 = 1e-6
eps2 = 1e-6
eps3 = 0.9
[engine]
kind = "fullgrid"
r = 3
n_v = 6
"#;

    #[test]
    fn parse_resolve_and_run_small_build() {
        let config = parse_config(EX1).unwrap();
        let campaign = resolve(config).unwrap();
        assert_eq!(campaign.outputs(), 1);
        let artifacts = run_build(&campaign).unwrap();
        assert_eq!(artifacts.runs.len(), 1);
        let report = &artifacts.runs[0].report;
        assert!((report.mean - 1.0).abs() < 1e-10);
        let exact = crate::models::Example1::exact_variance(3);
        assert!((report.variance - exact).abs() / exact < 1e-5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_field_names() {
        let err = parse_config("[model]\nkind = \"example1\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));

        let mut text = EX1.to_string();
        text = text.replace("eps1 = 1e-6", "eps1 = -1e-6");
        let err = match resolve(parse_config(&text).unwrap()) {
            Err(e) => e,
            Ok(_) => panic!("expected a config error"),
        };
        assert!(err.to_string().contains("method.eps1"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sparse_fsi_rejects_uniform_input_at_validation() {
        let text = EX1.replace(
            "kind = \"fullgrid\"\nr = 3\nn_v = 6",
            "kind = \"sparse-fsi\"\nr = 3\nlevel = 2",
        );
        let err = match resolve(parse_config(&text).unwrap()) {
            Err(e) => e,
            Ok(_) => panic!("expected a config error"),
        };
        assert!(err.to_string().contains("gaussian-standardizable"), "{err}");
    }

    #[test]
    fn overrides_traverse_dotted_paths() {
        let merged = apply_overrides(
            EX1,
            &[
                ("method.eps1".into(), "1e-4".into()),
                ("output.dir".into(), "\"results\"".into()),
            ],
        )
        .unwrap();
        let config = parse_config(&merged).unwrap();
        assert_eq!(config.method.eps1, Some(1e-4));
        assert_eq!(config.output.unwrap().dir.unwrap(), "results");
    }

    #[test]
    fn config_round_trips_losslessly() {
        let config = parse_config(EX1).unwrap();
        let text = toml::to_string(&config).unwrap();
        let again = parse_config(&text).unwrap();
        assert_eq!(
            serde_json::to_string(&config).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn truncated_build_counts_match_closed_form() {
        let text = EX1.replace(
            "kind = \"adaptive-full\"\neps1 = 1e-6\neps2 = 1e-6\neps3 = 0.9",
            "kind = \"truncated\"\ns = 2\nm = 3",
        );
        let campaign = resolve(parse_config(&text).unwrap()).unwrap();
        let artifacts = run_build(&campaign).unwrap();
        assert_eq!(
            artifacts.runs[0].report.coefficient_count,
            crate::pdd::count_truncated(3, 2, 3)
        );
    }
}
