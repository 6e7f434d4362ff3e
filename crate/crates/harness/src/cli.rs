//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mstok_core::attention::build_mask;
use mstok_core::checks::{end_to_end_check, run_op_cases, tiny_config, END_TO_END_TOLERANCE, OP_TOLERANCE};
use mstok_core::latentlab::{analyze, load_latents, save_latents, token_vectors};
use mstok_core::numerics::no_grad;
use mstok_core::pyramid::ScaleSchedule;
use mstok_core::tokenizer::{load_checkpoint, Mode, TokenizerModel};
use mstok_core::{Error, Result, Tensor};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{save_ppm, Dataset, Image};
use crate::experiment::{compare, summarize, summary_json};
use crate::metrics::psnr;
use crate::train::{load_dataset, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "mstok", version, about = "Multi-scale ViT image tokenizer: training, reconstruction and latent analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key=value` configuration file (`#` comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a tokenizer; prints one JSON object per logging interval
    Train {
        #[command(flatten)]
        common: Common,
        /// Write the final evaluation report here as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reconstruct every .ppm in a folder at every scale
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Uniformity statistics of an HLAT latent dump
    AnalyzeLatent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the decoder attention mask as rows of 0/1
    DumpMask {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the operation library and a tiny model
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train single-scale and multi-scale arms per seed and print medians
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Write per-token latent means of a folder (or the synthetic set) as HLAT
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder of .ppm images; synthetic images when omitted
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schedule(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::UndefinedMetrics(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Format { .. } | Error::Shape(_) | Error::Dimension { .. } | Error::Index { .. } => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "error: {e}");
            if code == EXIT_USAGE {
                let _ = writeln!(err, "run `mstok --help` for usage");
            }
            code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train { common, report } => {
            let cfg = common.load()?;
            let data = load_dataset(&cfg)?;
            let outcome = train(&cfg, &data, out)?;
            let summary = json!({ "initial": outcome.initial.to_json(), "final": outcome.last.to_json() });
            if let Some(p) = report {
                fs::write(p, serde_json::to_string_pretty(&summary).expect("serializable"))?;
            }
            writeln!(
                err,
                "trained {} steps: eval L1 {:.4} -> {:.4}, PSNR {:.2} dB, checkpoint {}",
                outcome.steps,
                outcome.initial.l1,
                outcome.last.l1,
                outcome.last.psnr,
                cfg.checkpoint.display()
            )?;
            Ok(EXIT_OK)
        }
        Command::Reconstruct { common, checkpoint, input, output } => {
            common.load()?;
            let model = load_checkpoint::<f32>(&checkpoint)?;
            reconstruct_folder(&model, &input, &output, out)?;
            Ok(EXIT_OK)
        }
        Command::AnalyzeLatent { common, input, output } => {
            let cfg = common.load()?;
            let vectors = load_latents(&input)?;
            let s = analyze(&vectors, &cfg.kde())?;
            let report = json!({
                "density_cv": s.density_cv,
                "gini": s.gini,
                "norm_entropy": s.norm_entropy,
                "n_points": s.n_points,
                "grid_size": s.grid_size,
                "bandwidth": s.bandwidth,
            });
            match output {
                Some(p) => fs::write(p, format!("{report}\n"))?,
                None => writeln!(out, "{report}")?,
            }
            Ok(EXIT_OK)
        }
        Command::DumpMask { common } => {
            let cfg = RunConfig::parse(common.config.as_deref(), &common.set)?;
            // the mask depends only on the grids, so the top grid serves as base
            let scales = &cfg.model.scales;
            let base = scales.last().copied().ok_or_else(|| Error::Config("scales is empty".into()))?;
            let mask = build_mask(&ScaleSchedule::new(base, scales)?, cfg.model.regime);
            write!(out, "{}", mask.to_text())?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seed } => {
            let mut worst = 0.0f64;
            for (name, report) in run_op_cases(seed)? {
                writeln!(out, "{name} {:.3e}", report.max_rel_error)?;
                worst = worst.max(report.max_rel_error);
            }
            let e2e = end_to_end_check(&tiny_config(), seed, None)?;
            writeln!(out, "end_to_end {:.3e} (bound {END_TO_END_TOLERANCE:e})", e2e.max_rel_error)?;
            writeln!(out, "max_rel_error {worst:.3e}")?;
            if worst < OP_TOLERANCE && e2e.max_rel_error < END_TO_END_TOLERANCE {
                Ok(EXIT_OK)
            } else {
                Err(Error::Numeric(format!("gradient check failed: ops {worst:e}, end-to-end {:e}", e2e.max_rel_error)))
            }
        }
        Command::Compare { common, seeds } => {
            let cfg = common.load()?;
            let c = compare(&cfg, &seeds, out)?;
            let (single, multi) = (summarize(&c.single), summarize(&c.multi));
            writeln!(out, "{}", json!({ "median_single": summary_json(&single), "median_multi": summary_json(&multi) }))?;
            Ok(EXIT_OK)
        }
        Command::ExportLatents { common, checkpoint, input, output } => {
            let cfg = common.load()?;
            let model = load_checkpoint::<f32>(&checkpoint)?;
            let data = match input {
                Some(dir) => Dataset::from_dir(&dir, model.config.image_size)?,
                None => Dataset::synthetic(cfg.synthetic_images, model.config.image_size, model.config.seed),
            };
            let mut vectors = Vec::new();
            let idx: Vec<usize> = (0..data.len()).collect();
            no_grad(|| -> Result<()> {
                for chunk in idx.chunks(cfg.batch_size.max(1)) {
                    vectors.extend(token_vectors(&model.latent_for_generation(&data.batch(chunk))?));
                }
                Ok(())
            })?;
            save_latents(&vectors, &output)?;
            writeln!(out, "{}", json!({ "vectors": vectors.len(), "dim": model.config.latent_dim, "output": output.display().to_string() }))?;
            Ok(EXIT_OK)
        }
    }
}

/// Writes `<stem>_s<level>_<side>px.ppm` for every scale of every input image
/// and prints one JSON line per image. `psnr` scores the model output and
/// `psnr_saved` the 8-bit file written for it.
pub fn reconstruct_folder(model: &TokenizerModel<f32>, input: &Path, output: &Path, out: &mut dyn Write) -> Result<()> {
    let data = Dataset::from_dir(input, model.config.image_size)?;
    fs::create_dir_all(output)?;
    no_grad(|| -> Result<()> {
        for (img, path) in data.images.iter().zip(&data.paths) {
            let stem = path.as_ref().and_then(|p| p.file_stem()).map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let x = img.to_tensor();
            let rec = model.reconstruct(&x, Mode::Eval)?;
            let mut files = Vec::new();
            for (level, o) in rec.outputs.iter().enumerate() {
                let side = o.shape()[3];
                let file = output.join(format!("{stem}_s{level}_{side}px.ppm"));
                save_ppm(&Image::from_tensor(o)?, &file)?;
                files.push(file.display().to_string());
            }
            let top = rec.outputs.last().expect("top level");
            let line = json!({
                "input": stem,
                "psnr": psnr(top.data(), &img.data)?,
                "psnr_saved": psnr(&quantize(top), &img.data)?,
                "outputs": files,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    })
}

/// The values a saved PPM reproduces: 8-bit rounding of `[-1, 1]` data.
fn quantize(t: &Tensor<f32>) -> Vec<f32> {
    t.data()
        .iter()
        .map(|&v| {
            let b = ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0);
            (b / 127.5 - 1.0) as f32
        })
        .collect()
}

pub fn main_exit() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
