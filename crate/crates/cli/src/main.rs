//! `d3r`: data generation, training, evaluation and the comparison
//! experiments for the dual-domain density extractor.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 a check that ran but
//! did not pass.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use d3r_core::harness::{self, ExperimentConfig, VIZ_CELL_PX};
use d3r_core::io::write_json;
use d3r_core::kernels::KernelFamily;
use d3r_core::model::Family;
use d3r_core::scenes::{write_dataset, Split};

#[derive(Parser)]
#[command(name = "d3r", version, about = "Dual-domain density extractor harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (packed images, annotations, manifest).
    GenData(GenDataArgs),
    /// Train one model and write its loss curve, checkpoint and report.
    Train(RunArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and evaluate every kernel family on the same data.
    Ablate(RunArgs),
    /// Compare the gabor dual-domain model against the spatial-only baseline.
    CompareConvergence(RunArgs),
    /// Finite-difference gradient checks for every block.
    Gradcheck(GradcheckArgs),
    /// Render a kernel bank as a PGM grid.
    VizKernels(VizArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and D3R_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn parse_kernel_family(s: &str) -> std::result::Result<KernelFamily, String> {
    s.parse::<KernelFamily>().map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_env();
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.family {
            cfg.family = v;
        }
        if let Some(v) = self.n_train {
            cfg.n_train = v;
        }
        if let Some(v) = self.n_val {
            cfg.n_val = v;
        }
        if let Some(v) = &self.data {
            cfg.data_dir = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    /// gabor, fourier or haar.
    #[arg(value_parser = parse_kernel_family)]
    family: KernelFamily,
    #[arg(long, default_value = "kernels.pgm")]
    out: PathBuf,
    #[arg(long, default_value_t = VIZ_CELL_PX)]
    cell_px: usize,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
}

enum Outcome {
    Done,
    CheckFailed,
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = a.cfg.resolve()?;
            let dir = cfg.data_dir.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
            let m = write_dataset(&cfg.scenes, cfg.n_train, cfg.n_val, &dir)?;
            println!("wrote {} train / {} val scenes to {} (dataset {})", m.n_train, m.n_val, dir.display(), m.dataset_hash);
        }
        Command::Train(a) => {
            let cfg = a.cfg.resolve()?;
            let r = harness::train(&cfg)?;
            println!(
                "{}: final train DRFL {:.4e}, val DRFL {:.4e}, mae {:.4e}, peak recall {:.3}; outputs in {}",
                r.family,
                r.epochs.last().map(|e| e.train_drfl).unwrap_or(f64::NAN),
                r.final_val.drfl,
                r.final_val.density.mae,
                r.final_val.density.peak_recall,
                cfg.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let cfg = a.cfg.resolve()?;
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let r = harness::evaluate(&a.checkpoint, split, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.resolve()?;
            let t = harness::ablate(&cfg)?;
            print!("{}", t.to_text());
        }
        Command::CompareConvergence(a) => {
            let cfg = a.cfg.resolve()?;
            let o = harness::compare_convergence(&cfg)?;
            let r = &o.report;
            println!(
                "gabor val DRFL {:.4e} vs baseline {:.4e}; mae {:.4e} vs {:.4e}; peak recall {:.4} vs {:.4}; crossing epoch {:?}",
                r.dual.final_val_drfl,
                r.baseline.final_val_drfl,
                r.dual.mae,
                r.baseline.mae,
                r.dual.peak_recall,
                r.baseline.peak_recall,
                r.dual.crossing_epoch
            );
            if !r.pass {
                println!("FAIL: dual-domain model did not beat the baseline on every criterion");
                return Ok(Outcome::CheckFailed);
            }
            println!("PASS");
        }
        Command::Gradcheck(a) => {
            let r = harness::gradcheck_suite()?;
            print!("{}", r.to_text());
            if let Some(p) = a.json {
                write_json(&p, &r)?;
            }
            if !r.pass {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::VizKernels(a) => {
            refuse_overwrite(&a.out, a.force)?;
            let m = harness::viz_kernels(a.family, a.cell_px, &a.out)?;
            info!("manifest {:?}", m);
            println!(
                "wrote {} ({}×{} px, {} angles × {} scales)",
                a.out.display(),
                m.width,
                m.height,
                m.n_groups,
                m.n_scales
            );
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
