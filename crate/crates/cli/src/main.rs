use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use distill_core::pipeline::{manifest::resolve, EvalReport, Layout, Pipeline, PipelineConfig, Stage, StageReport, DEFAULT_CONFIG};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "distill", version, about = "Self-supervised foreground/background segmentation from a text-conditioned denoiser")]
struct Cli {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Manifest path; defaults to `<general.output>/manifest.ndjson`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Overrides `general.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `general.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Recompute stages even when their cache key matches.
    #[arg(long, global = true)]
    stage_force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan an image directory into a new manifest.
    Ingest {
        #[arg(long)]
        source: PathBuf,
        /// flat, cub or bbox.
        #[arg(long, default_value = "flat")]
        layout: String,
    },
    /// Importance maps and preliminary masks.
    Prelim,
    /// Fine-tune the toy denoiser on object and background prompts.
    Finetune,
    /// Inpaint-difference refinement and the crop-flip ablation.
    Refine,
    /// Generate the synthetic labeled set.
    Synth,
    /// Train the segmentation networks.
    Segtrain,
    /// Score every mask source and print the aggregate block.
    Eval,
    /// Render the procedural shapes dataset and write its manifest.
    Toyset,
    /// Toy set (if no manifest exists) and then every stage.
    RunAll,
    /// Print the default config file.
    DefaultConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.general.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.general.workers = w;
    }
    Ok(cfg)
}

fn log_report(r: &StageReport) {
    let state = if r.cached { "cached" } else { "done" };
    log::info!("{}: {state}, {} flagged records", r.stage.name(), r.flagged);
}

fn print_aggregate(p: &Pipeline) -> Result<()> {
    let m = p.load_manifest()?;
    let Some(path) = m.header.files.get("eval_json") else { return Ok(()) };
    let path = resolve(p.root(), path);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    print!("{}", report.aggregate_text());
    Ok(())
}

/// Returns the number of flagged records after the command.
fn run(cli: &Cli) -> Result<usize> {
    if let Command::DefaultConfig = cli.command {
        print!("{DEFAULT_CONFIG}");
        return Ok(0);
    }
    let p = Pipeline::new(load_config(cli)?, cli.manifest.clone(), cli.stage_force)?;
    let stage = match &cli.command {
        Command::Ingest { source, layout } => {
            let m = p.ingest(source, layout.parse::<Layout>()?)?;
            log::info!("ingested {} records into {}", m.records.len(), p.manifest_path().display());
            return Ok(m.flagged());
        }
        Command::Toyset => {
            let m = p.toyset()?;
            log::info!("wrote {} toy records to {}", m.records.len(), p.manifest_path().display());
            return Ok(0);
        }
        Command::RunAll => {
            let reports = p.run_all()?;
            reports.iter().for_each(log_report);
            print_aggregate(&p)?;
            return Ok(reports.last().map_or(0, |r| r.flagged));
        }
        Command::Prelim => Stage::Prelim,
        Command::Finetune => Stage::Finetune,
        Command::Refine => Stage::Refine,
        Command::Synth => Stage::Synth,
        Command::Segtrain => Stage::Segtrain,
        Command::Eval => Stage::Eval,
        Command::DefaultConfig => unreachable!(),
    };
    let report = p.run(stage)?;
    log_report(&report);
    if stage == Stage::Eval {
        print_aggregate(&p)?;
    }
    Ok(report.flagged)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            log::warn!("{n} records carry flags; see the manifest");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
