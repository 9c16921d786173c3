//! Command-line pipeline: synth → train → infer → evaluate → report.
//!
//! Every command is deterministic given its arguments — rerunning a whole
//! recipe with the same seeds reproduces every output file byte for byte.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod evaluate;
mod report;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unlearn3d::error::{Error, Result};
use unlearn3d::manifest::DatasetManifest;
use unlearn3d::synth::{domain_spec_ladder, write_dataset, SplitCounts};
use unlearn3d::volume::rescale_unit;
use unlearn3d::{nifti, trainer, RunConfig};

#[derive(Parser)]
#[command(name = "unlearn3d", version, about = "Domain-unlearning segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset with a manifest.
    Synth {
        /// Number of domains (appearance interpolates between the two
        /// built-in extremes).
        #[arg(long, default_value_t = 2)]
        domains: usize,
        /// Cases per domain, split ~3:1:1 into train/val/test.
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Cubic volume edge length in voxels.
        #[arg(long, default_value_t = 32)]
        shape: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (must be empty unless --force).
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a run from a TOML config and a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory: events.jsonl, latest.ckpt, best.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (config file must match it).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment every .nii volume in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of input volumes (*.nii).
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory for binary masks, one per input, same file names.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against reference masks, case by case.
    Evaluate {
        /// Directory of predicted masks (*.nii).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference masks; cases pair by file name.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Output stem: writes <stem>.csv and <stem>.json.
        #[arg(long)]
        out: PathBuf,
        /// Lesion-matching IoU threshold.
        #[arg(long, default_value_t = 0.05)]
        t_iou: f64,
        /// Bootstrap resamples for the aggregate confidence intervals.
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
        /// Seed for the bootstrap resampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarise a run: stage-accuracy table, method comparison tables,
    /// and accuracy/loss plots.
    Report {
        /// Event log written by `train`.
        #[arg(long)]
        events: PathBuf,
        /// Output directory for tables, plots, and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation reports to compare, as name=path.json (repeatable);
        /// the first method is the comparison baseline.
        #[arg(long = "metrics", value_name = "NAME=PATH", value_parser = report::parse_method_arg)]
        metrics: Vec<(String, PathBuf)>,
        /// Significance level for the Bonferroni-adjusted tests.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { domains, n, shape, seed, out, force } => {
            cmd_synth(domains, n, shape, seed, &out, force)
        }
        Command::Train { config, manifest, out, resume } => {
            cmd_train(&config, &manifest, &out, resume.as_deref())
        }
        Command::Infer { ckpt, input, out } => cmd_infer(&ckpt, &input, &out),
        Command::Evaluate { pred, reference, out, t_iou, resamples, seed } => {
            evaluate::cmd_evaluate(&pred, &reference, &out, t_iou, resamples, seed)
        }
        Command::Report { events, out, metrics, alpha } => {
            report::cmd_report(&events, &out, &metrics, alpha)
        }
    }
}

fn cmd_synth(
    domains: usize,
    n: usize,
    shape: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<()> {
    let val = (n / 5).max(1);
    if n < 2 * val + 1 {
        return Err(Error::TooFewCases { what: "cases per domain", needed: 3, got: n });
    }
    let counts = SplitCounts { train: n - 2 * val, val, test: val };
    if !force && out.is_dir() {
        let occupied = fs::read_dir(out).map_err(|e| Error::file(out, e))?.next().is_some();
        if occupied {
            return Err(Error::format(
                out,
                "output directory is not empty (pass --force to write anyway)",
            ));
        }
    }
    let specs = domain_spec_ladder(domains)?;
    let manifest = write_dataset(out, &specs, counts, [shape, shape, shape], seed)?;
    println!(
        "wrote {} cases ({} domains x {} train / {} val / {} test) to {}",
        manifest.entries().len(),
        domains,
        counts.train,
        counts.val,
        counts.test,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    manifest_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::from_toml_path(config)?;
    let manifest = DatasetManifest::load_csv(manifest_path)?;
    let outcome = trainer::train(&cfg, &manifest, out, resume)?;
    let c = &outcome.checkpoint;
    println!(
        "trained {} epochs; best val DSC {:.4} at epoch {}; artifacts in {}",
        c.epoch,
        c.best_val_dsc,
        c.best_epoch,
        out.display()
    );
    Ok(())
}

/// Sorted `*.nii` file names in a directory.
fn nii_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.ends_with(".nii").then_some(name)
        })
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_infer(ckpt_path: &Path, input: &Path, out: &Path) -> Result<()> {
    let ckpt = trainer::load_checkpoint(ckpt_path)?;
    let names = nii_files(input)?;
    if names.is_empty() {
        return Err(Error::format(input, "no .nii volumes found"));
    }
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    for name in &names {
        let image = rescale_unit(&nifti::read_image(&input.join(name))?)?;
        let mask = trainer::infer_volume(&ckpt.net, &image, ckpt.config.patch_size)?;
        nifti::write_mask(&out.join(name), &mask)?;
    }
    println!("segmented {} volumes into {}", names.len(), out.display());
    Ok(())
}
