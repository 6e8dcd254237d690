//! Command-line driver: build surrogates, resample them, run tolerance
//! sweeps, and print grid-size tables.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pdduq::config::{
    self, apply_overrides, parse_config, resolve, write_json_artifact, write_mcs_artifacts,
    write_sweep_artifact, CampaignError, ResolvedCampaign, RunManifest,
};
use pdduq::pdd::SurrogateModel;
use pdduq::quad::GridKind;

#[derive(Parser)]
#[command(name = "pdduq", version, about = "Adaptive-sparse PDD uncertainty quantification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Campaign configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. `--set method.eps1=1e-5`.
    #[arg(long = "set", value_parser = parse_set)]
    set: Vec<(String, String)>,
    /// Output directory (defaults to `[output].dir` or the current directory).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap for parallel model evaluation.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a PDD surrogate and write surrogate/report/manifest files.
    Build(CommonArgs),
    /// Monte Carlo distributions: embedded (surrogate) or crude (model).
    Mcs {
        #[command(flatten)]
        common: CommonArgs,
        /// Surrogate file for embedded resampling; defaults to the files a
        /// build wrote into the output directory.
        #[arg(long)]
        surrogate: Vec<PathBuf>,
    },
    /// One adaptive run per tolerance; writes plot-ready sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated tolerance list overriding `[sweep].tolerances`.
        #[arg(long, value_delimiter = ',')]
        tolerances: Vec<f64>,
    },
    /// Integration-point counts per grid kind, dimension, and level.
    Gridinfo {
        /// `fullgrid` or `fsi`.
        #[arg(long)]
        kind: String,
        /// Dimensions |v| to report.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9,10")]
        dims: Vec<usize>,
        /// Levels l to report (exact to total degree 2l-1).
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        levels: Vec<u32>,
    },
}

fn parse_set(arg: &str) -> Result<(String, String), String> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| format!("`{arg}` is not of the form key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(common) => run_build_cmd(common),
        Command::Mcs { common, surrogate } => run_mcs_cmd(common, surrogate),
        Command::Sweep { common, tolerances } => run_sweep_cmd(common, tolerances),
        Command::Gridinfo { kind, dims, levels } => run_gridinfo_cmd(&kind, &dims, &levels),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_campaign(common: &CommonArgs) -> Result<(ResolvedCampaign, PathBuf), CampaignError> {
    let text = std::fs::read_to_string(&common.config).map_err(|source| CampaignError::Io {
        path: common.config.clone(),
        source,
    })?;
    let mut sets = common.set.clone();
    if let Some(seed) = common.seed {
        sets.push(("seed".into(), seed.to_string()));
    }
    let merged = apply_overrides(&text, &sets)?;
    let config = parse_config(&merged)?;
    if let Some(threads) = common.threads.or(config.threads) {
        // ignore failures from double initialization in the same process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let out_dir = common
        .output
        .clone()
        .or_else(|| {
            config
                .output
                .as_ref()
                .and_then(|o| o.dir.as_ref())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|source| CampaignError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let campaign = resolve(config)?;
    Ok((campaign, out_dir))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CampaignError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|source| CampaignError::Io { path, source })
}

fn run_build_cmd(common: CommonArgs) -> Result<(), CampaignError> {
    let started = Instant::now();
    let (campaign, out_dir) = load_campaign(&common)?;
    let artifacts = config::run_build(&campaign)?;
    let mut manifest = RunManifest::new(&campaign.config);
    manifest
        .eval_counts
        .insert("build".into(), artifacts.eval_count);

    let mut reports = Vec::new();
    for run in &artifacts.runs {
        let surrogate_name = format!("surrogate-{}.json", run.report.output);
        run.surrogate.save_json(&out_dir.join(&surrogate_name))?;
        manifest.record(&out_dir, &surrogate_name)?;
        if !run.audit_lines.is_empty() {
            let audit_name = format!("audit-{}.log", run.report.output);
            write_text(&out_dir, &audit_name, &(run.audit_lines.join("\n") + "\n"))?;
            manifest.record(&out_dir, &audit_name)?;
        }
        reports.push(&run.report);
        println!(
            "output {}: mean {:.6e}, variance {:.6e}, {} coefficients, {} model calls",
            run.report.output,
            run.report.mean,
            run.report.variance,
            run.report.coefficient_count,
            artifacts.eval_count,
        );
    }
    write_json_artifact(&out_dir, "report.json", &reports, &mut manifest)?;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&out_dir)?;
    Ok(())
}

fn run_mcs_cmd(common: CommonArgs, surrogate_paths: Vec<PathBuf>) -> Result<(), CampaignError> {
    let started = Instant::now();
    let (campaign, out_dir) = load_campaign(&common)?;
    let embedded = campaign
        .config
        .mcs
        .as_ref()
        .map(|m| m.kind == "embedded")
        .unwrap_or(false);
    let surrogates: Vec<SurrogateModel> = if embedded {
        let paths = if surrogate_paths.is_empty() {
            (0..campaign.outputs())
                .map(|o| out_dir.join(format!("surrogate-{o}.json")))
                .collect()
        } else {
            surrogate_paths
        };
        paths
            .iter()
            .map(|p| SurrogateModel::load_json(p))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let summaries = config::run_mcs(&campaign, &surrogates)?;

    let mut manifest = RunManifest::new(&campaign.config);
    let samples = campaign.config.mcs.as_ref().map(|m| m.samples).unwrap_or(0);
    manifest.eval_counts.insert(
        "mcs".into(),
        if embedded {
            0
        } else {
            samples * summaries.len().max(1) as u64 / summaries.len().max(1) as u64
        },
    );
    for (o, summary) in summaries.iter().enumerate() {
        write_mcs_artifacts(&out_dir, o, summary, &mut manifest)?;
        println!(
            "output {o}: mean {:.6e}, variance {:.6e} ({} samples)",
            summary.mean, summary.variance, summary.samples
        );
    }
    write_json_artifact(&out_dir, "moments.json", &summaries, &mut manifest)?;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&out_dir)?;
    Ok(())
}

fn run_sweep_cmd(common: CommonArgs, tolerances: Vec<f64>) -> Result<(), CampaignError> {
    let started = Instant::now();
    let (mut campaign, out_dir) = load_campaign(&common)?;
    if !tolerances.is_empty() {
        match campaign.config.sweep.as_mut() {
            Some(sweep) => sweep.tolerances = tolerances,
            None => {
                campaign.config.sweep = Some(config::SweepConfig {
                    tolerances,
                    reference: None,
                    include_truncated: None,
                    truncated_max_m: None,
                })
            }
        }
    }
    let sweep = config::run_sweep(&campaign)?;
    let mut manifest = RunManifest::new(&campaign.config);
    write_sweep_artifact(&out_dir, &sweep, &mut manifest)?;
    for row in &sweep.rows {
        println!(
            "{:<24} tol={:<9.3e} rel_error={:.6e} coefficients={} evals={}",
            row.method, row.tolerance, row.rel_error, row.coefficient_count, row.eval_count
        );
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&out_dir)?;
    Ok(())
}

fn run_gridinfo_cmd(kind: &str, dims: &[usize], levels: &[u32]) -> Result<(), CampaignError> {
    let kind = match kind {
        "fullgrid" => GridKind::FullGrid,
        "fsi" | "sparse-fsi" => GridKind::SparseFsi,
        other => {
            return Err(CampaignError::Config {
                field: "kind".into(),
                message: format!("unknown grid kind `{other}` (expected fullgrid or fsi)"),
            })
        }
    };
    let rows = config::grid_info(kind, dims, levels)?;
    print!("{:>4}", "l");
    for d in dims {
        print!("{:>12}", format!("|v|={d}"));
    }
    println!();
    for &l in levels {
        print!("{l:>4}");
        for &d in dims {
            let count = rows
                .iter()
                .find(|(dd, ll, _)| *dd == d && *ll == l)
                .map(|(_, _, c)| *c)
                .unwrap();
            print!("{count:>12}");
        }
        println!();
    }
    Ok(())
}
