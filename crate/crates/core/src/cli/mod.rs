//! `mkor` command line: inject, simulate, reconstruct, evaluate, run, audit.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::conv::ConvPlan;
use crate::attack::fc::DecouplingMap;
use crate::datasets::netpbm::{extension, read_image, write_image};
use crate::datasets::{load_image_folder, make_batch, LabeledImage};
use crate::error::{MkorError, Result};
use crate::fl::pipeline::{build, inject, prepare_batch, reconstruct, Injected, ReconstructionReport, Timings};
use crate::fl::{audit, client_update_with_stats, ClientStats};
use crate::metrics::{score_batch, BatchScore};
use crate::nn::build_model;
use crate::nn::io::{load_gradients, load_params, save_gradients, save_params};
use crate::tensor::Tensor;

pub use config::{DatasetSource, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "mkor",
    about = "Gradient inversion lab: malicious parameters, client simulation, reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set batch_size=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-sample gradients.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write malicious parameters, the reference parameters and the decoding maps.
    Inject(ConfigArgs),
    /// Compute one client's summed gradient on a batch.
    Simulate(ConfigArgs),
    /// Recover one image per present class from the gradient file.
    Reconstruct(ConfigArgs),
    /// Score reconstructions against ground truth.
    Evaluate {
        /// Directory of `<label>.pgm|ppm` reconstructions.
        #[arg(long)]
        recon: PathBuf,
        /// Directory of `<label>/<name>.pgm|ppm` ground-truth images.
        #[arg(long)]
        truth: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// inject, simulate, reconstruct and evaluate in one go.
    Run(ConfigArgs),
    /// Compare received parameters with a reference and report suspicious layers.
    Audit {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        received: PathBuf,
        /// client.json written by `simulate`, for the gradient-dominance check.
        #[arg(long)]
        client: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// What `simulate` records about the batch for the later steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub labels: Vec<usize>,
    /// (height, width, channels) of the ground-truth images.
    pub native: [usize; 3],
}

pub const PARAMS_FILE: &str = "params.mkor";
pub const REFERENCE_FILE: &str = "reference.mkor";
pub const GRADIENTS_FILE: &str = "gradients.mkor";
pub const FC_MAP_FILE: &str = "fc_map.json";
pub const CONV_PLAN_FILE: &str = "conv_plan.json";
pub const BATCH_FILE: &str = "batch.json";
pub const CLIENT_FILE: &str = "client.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCORE_FILE: &str = "score.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const TRUTH_DIR: &str = "truth";
pub const RECON_DIR: &str = "recon";
pub const RECON_INPUT_DIR: &str = "recon_input";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| MkorError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| MkorError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MkorError::format(path, e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MkorError::io(dir, e))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

pub fn cmd_inject(cfg: &RunConfig) -> Result<Injected> {
    let attack = cfg.attack_config();
    let (spec, params) = build(&attack)?;
    let injected = inject(&spec, &params, &attack)?;
    let out = &cfg.out_dir;
    ensure_dir(out)?;
    save_params(out.join(PARAMS_FILE), &injected.params)?;
    save_params(out.join(REFERENCE_FILE), &params)?;
    write_json(&out.join(FC_MAP_FILE), &injected.fc_map)?;
    let plan_path = out.join(CONV_PLAN_FILE);
    match &injected.conv_plan {
        Some(p) => write_json(&plan_path, p)?,
        None if plan_path.exists() => std::fs::remove_file(&plan_path).map_err(|e| MkorError::io(&plan_path, e))?,
        None => {}
    }
    Ok(injected)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(Vec<LabeledImage>, ClientStats)> {
    let spec = build_model(&cfg.model_config())?;
    let out = &cfg.out_dir;
    let params = load_params(out.join(PARAMS_FILE))?;
    params.check_layout(&spec)?;
    let data = cfg.load_dataset()?;
    let batch = make_batch(&data, &cfg.batch_spec())?;
    let inputs = prepare_batch(&batch, &spec)?;
    let attack = cfg.attack_config();
    let (grad, stats) = client_update_with_stats(&spec, &params, &inputs, &attack.defense, cfg.threads)?;
    save_gradients(out.join(GRADIENTS_FILE), &grad)?;
    let truth = out.join(TRUTH_DIR);
    if truth.exists() {
        std::fs::remove_dir_all(&truth).map_err(|e| MkorError::io(&truth, e))?;
    }
    for (i, item) in batch.iter().enumerate() {
        let dir = truth.join(item.label.to_string());
        ensure_dir(&dir)?;
        write_image(dir.join(format!("{:04}.{}", i, extension(&item.image))), &item.image)?;
    }
    let first = batch[0].image.shape();
    write_json(
        &out.join(BATCH_FILE),
        &BatchRecord {
            labels: batch.iter().map(|b| b.label).collect(),
            native: [first[0], first[1], first[2]],
        },
    )?;
    write_json(&out.join(CLIENT_FILE), &stats)?;
    Ok((batch, stats))
}

pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<(Vec<(usize, Tensor<f32>)>, ReconstructionReport, f64)> {
    let spec = build_model(&cfg.model_config())?;
    let out = &cfg.out_dir;
    let grad = load_gradients(out.join(GRADIENTS_FILE))?;
    if !grad.grads.layout.same_shape(&spec.layout) {
        return Err(MkorError::LayoutMismatch(
            "gradient file does not match the configured model".into(),
        ));
    }
    let fc_map: DecouplingMap = read_json(&out.join(FC_MAP_FILE))?;
    let plan_path = out.join(CONV_PLAN_FILE);
    let conv_plan: Option<ConvPlan> = if plan_path.exists() {
        Some(read_json(&plan_path)?)
    } else {
        None
    };
    let batch_path = out.join(BATCH_FILE);
    let native = if batch_path.exists() {
        let record: BatchRecord = read_json(&batch_path)?;
        Some((record.native[0], record.native[1]))
    } else {
        None
    };
    let reference = match &cfg.calibration_reference {
        Some(p) => Some(read_image(p)?),
        None => None,
    };
    let t = Instant::now();
    let (images, report) = reconstruct(
        &spec,
        &fc_map,
        conv_plan.as_ref(),
        &grad,
        &cfg.attack_config().reconstruct,
        native,
        reference.as_ref(),
    )?;
    let secs = t.elapsed().as_secs_f64();
    let recon = out.join(RECON_DIR);
    if recon.exists() {
        std::fs::remove_dir_all(&recon).map_err(|e| MkorError::io(&recon, e))?;
    }
    ensure_dir(&recon)?;
    let [ih, iw, _] = spec.input_shape;
    let upscaled = native.is_some_and(|n| n != (ih, iw));
    let recon_input = out.join(RECON_INPUT_DIR);
    if recon_input.exists() {
        std::fs::remove_dir_all(&recon_input).map_err(|e| MkorError::io(&recon_input, e))?;
    }
    for (label, image) in &images {
        write_image(recon.join(format!("{}.{}", label, extension(image))), image)?;
        if upscaled {
            ensure_dir(&recon_input)?;
            let big = crate::datasets::upscale_bilinear(image, ih, iw)?;
            write_image(recon_input.join(format!("{}.{}", label, extension(&big))), &big)?;
        }
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok((images, report, secs))
}

/// Score `<recon>/<label>.p?m` against `<truth>/<label>/*.p?m`.
pub fn cmd_evaluate(recon: &Path, truth: &Path) -> Result<BatchScore> {
    let truth_set = load_image_folder(truth)?;
    if truth_set.is_empty() {
        return Err(MkorError::InvalidConfig(format!(
            "no ground-truth images under {}",
            truth.display()
        )));
    }
    if !recon.is_dir() {
        return Err(MkorError::InvalidConfig(format!(
            "{} is not a directory",
            recon.display()
        )));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(recon)
        .map_err(|e| MkorError::io(recon, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut recoveries = Vec::new();
    for p in entries {
        let ext = p.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("pgm") | Some("ppm")) {
            continue;
        }
        let Some(label) = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        recoveries.push((label, read_image(&p)?));
    }
    recoveries.sort_by_key(|r| r.0);
    if recoveries.is_empty() {
        return Err(MkorError::InvalidConfig(format!(
            "no reconstructions under {}",
            recon.display()
        )));
    }
    let channels = truth_set[0].image.shape()[2];
    if recoveries.iter().any(|(_, im)| im.shape()[2] != channels) {
        return Err(MkorError::ShapeMismatch(
            "reconstructions and ground truth differ in channels".into(),
        ));
    }
    if !recoveries.iter().any(|(l, _)| truth_set.iter().any(|t| t.label == *l)) {
        return Err(MkorError::InvalidConfig(format!(
            "{} and {} share no class",
            recon.display(),
            truth.display()
        )));
    }
    score_batch(&recoveries, &truth_set)
}

pub fn cmd_run(cfg: &RunConfig) -> Result<ReconstructionReport> {
    let t0 = Instant::now();
    cmd_inject(cfg)?;
    let t1 = Instant::now();
    cmd_simulate(cfg)?;
    let t2 = Instant::now();
    let (_, mut report, secs) = cmd_reconstruct(cfg)?;
    let out = &cfg.out_dir;
    let score = cmd_evaluate(&out.join(RECON_DIR), &out.join(TRUTH_DIR))?;
    write_json(&out.join(SCORE_FILE), &score)?;
    report.score = Some(score);
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(
        &out.join(TIMINGS_FILE),
        &Timings {
            inject_secs: (t1 - t0).as_secs_f64(),
            gradient_secs: (t2 - t1).as_secs_f64(),
            reconstruct_secs: secs,
        },
    )?;
    Ok(report)
}

pub fn cmd_audit(reference: &Path, received: &Path, client: Option<&Path>) -> Result<crate::fl::AuditReport> {
    let reference = load_params(reference)?;
    let received = load_params(received)?;
    let norms = match client {
        Some(p) => Some(read_json::<ClientStats>(p)?.sample_norms),
        None => None,
    };
    audit(&reference, &received, norms.as_deref())
}

fn print_score(score: &BatchScore) {
    println!(
        "classes {}  max/avg SSIM {:.4} / {:.4}  max/avg PSNR {:.2} / {:.2}",
        score.per_class.len(),
        score.max_ssim,
        score.avg_ssim,
        score.max_psnr,
        score.avg_psnr
    );
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inject(args) => {
            let cfg = load_config(&args)?;
            let injected = cmd_inject(&cfg)?;
            println!(
                "wrote {} ({} classes decoupled{})",
                cfg.out_dir.join(PARAMS_FILE).display(),
                injected.fc_map.chains.len(),
                if injected.conv_plan.is_some() {
                    ", conv plan"
                } else {
                    ""
                }
            );
        }
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            let (batch, stats) = cmd_simulate(&cfg)?;
            println!(
                "wrote {} (batch {}, mean loss {:.4}, clipped {})",
                cfg.out_dir.join(GRADIENTS_FILE).display(),
                batch.len(),
                stats.mean_loss,
                stats.clipped
            );
        }
        Command::Reconstruct(args) => {
            let cfg = load_config(&args)?;
            let (images, report, secs) = cmd_reconstruct(&cfg)?;
            println!(
                "recovered {} classes in {:.2}s, {} absent",
                images.len(),
                secs,
                report.absent.len()
            );
        }
        Command::Evaluate { recon, truth, out } => {
            let score = cmd_evaluate(&recon, &truth)?;
            print_score(&score);
            if let Some(o) = out {
                write_json(&o, &score)?;
            }
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let report = cmd_run(&cfg)?;
            if let Some(s) = &report.score {
                print_score(s);
            }
            for w in &report.warnings {
                println!("warning: {}", w);
            }
        }
        Command::Audit {
            reference,
            received,
            client,
            out,
        } => {
            let report = cmd_audit(&reference, &received, client.as_deref())?;
            println!(
                "peak modified fraction {:.4}, {} flags",
                report.peak_modified_fraction,
                report.flags.len()
            );
            for f in &report.flags {
                println!("flag: {}", f);
            }
            if let Some(o) = out {
                write_json(&o, &report)?;
            }
        }
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}
