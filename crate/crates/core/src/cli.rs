//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::attention::{cross_attention_map, export_attention};
use crate::checkpoint::load_model;
use crate::data::io::{read_ppm, write_binary_pgm, write_pgm};
use crate::data::{Dataset, SceneKind};
use crate::error::{Error, Result};
use crate::gradcheck::{model_grad_check, ModelCheck};
use crate::metrics::{evaluate_dataset, EvalMode};
use crate::tiling::{infer_full, label_gray};
use crate::train::{ablate_decoder, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "mtlseg", version, about = "Multi-task segmentation toolkit")]
struct Cli {
    /// RNG seed (overrides config files where relevant).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value = "crop")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run tiled inference with this patch size instead of whole images.
        #[arg(long)]
        tiled: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tiled prediction on one large image.
    InferTile {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        /// Merged label map as gray PGM.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-task skeleton masks.
        #[arg(long)]
        skeletons: Option<PathBuf>,
    },
    /// Dump a cross-task attention map as PGM.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Querying task, 1-based.
        #[arg(long)]
        task: usize,
        /// Query pixel as `row,col`.
        #[arg(long)]
        pixel: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train with and without cross-task attention and compare.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Format { .. } | Error::Io { .. } | Error::Dimension(_) => EXIT_DATA,
        Error::Config(_) | Error::Argument(_) | Error::Params(_) => EXIT_USAGE,
    }
}

fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("pixel must be row,col, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

fn train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut say = |s: &str| {
        let _ = writeln!(out, "{s}");
    };
    match cli.cmd {
        Command::GenData {
            kind,
            count,
            size,
            out: dir,
        } => {
            let kind = SceneKind::parse(&kind)?;
            let ds = Dataset::generate(kind, count, size, cli.seed.unwrap_or(0))?;
            ds.save(&dir)?;
            say(&format!("samples={} dir={}", ds.len(), dir.display()));
        }
        Command::Train {
            config,
            data,
            out: dir,
            iterations,
        } => {
            let mut cfg = train_config(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(d) = dir {
                cfg.out = Some(d);
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if cfg.out.is_none() {
                cfg.out = Some(PathBuf::from("."));
            }
            let data = cfg
                .data
                .clone()
                .ok_or_else(|| Error::config("no dataset: set `data` or pass --data"))?;
            let ds = Dataset::load(&data)?;
            let outcome = train(&cfg, &ds, &mut say)?;
            let report = evaluate_dataset(&outcome.model, &outcome.store, &ds, EvalMode::Direct)?;
            for line in report.to_key_values().lines() {
                say(&format!("final.train.{line}"));
            }
        }
        Command::Eval {
            ckpt,
            data,
            tiled,
            out: file,
        } => {
            let (model, store) = load_model(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let mode = tiled.map_or(EvalMode::Direct, EvalMode::Tiled);
            let report = evaluate_dataset(&model, &store, &ds, mode)?;
            let text = report.to_key_values();
            if let Some(f) = file {
                std::fs::write(&f, &text).map_err(|e| Error::io(&f, e))?;
            }
            say(text.trim_end());
        }
        Command::InferTile {
            ckpt,
            image,
            patch,
            out: file,
            skeletons,
        } => {
            let (model, store) = load_model(&ckpt)?;
            let img = read_ppm(&image)?;
            let pred = infer_full(&model, &store, &img, patch)?;
            let m = &pred.merged;
            write_pgm(&file, m.height, m.width, &label_gray(m, model.tasks()))?;
            if let Some(dir) = skeletons {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (t, s) in pred.skeletons.iter().enumerate() {
                    write_binary_pgm(&dir.join(format!("skeleton_{}.pgm", t + 1)), s)?;
                }
            }
            say(&format!(
                "height={} width={} out={}",
                m.height,
                m.width,
                file.display()
            ));
        }
        Command::AttnDump {
            ckpt,
            image,
            task,
            pixel,
            out: file,
        } => {
            if task == 0 {
                return Err(Error::Argument("--task is 1-based".into()));
            }
            let (model, store) = load_model(&ckpt)?;
            let img = read_ppm(&image)?;
            let map = cross_attention_map(&model, &store, &img, task - 1, parse_pixel(&pixel)?)?;
            export_attention(&file, &map)?;
            say(&format!("out={}", file.display()));
        }
        Command::Gradcheck {
            size,
            per_param,
            tol,
        } => {
            let check = ModelCheck {
                size,
                per_param,
                ..ModelCheck::default()
            };
            let (r, names) = model_grad_check(cli.seed.unwrap_or(1), check)?;
            let worst = r.worst.map_or("-".to_string(), |w| names[w.0].clone());
            say(&format!(
                "coords={} max_rel_err={:e} worst={worst} tol={tol:e}",
                r.coords_checked, r.max_rel_err
            ));
            if !(r.max_rel_err <= tol) {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:e} > {tol:e}",
                    r.max_rel_err
                )));
            }
        }
        Command::Ablate {
            config,
            data,
            eval,
            mut seeds,
            out: dir,
        } => {
            let mut cfg = train_config(&config)?;
            if dir.is_some() {
                cfg.out = dir;
            }
            if let Some(s) = cli.seed {
                seeds = vec![s];
            }
            let tr = Dataset::load(&data)?;
            let ev = Dataset::load(&eval)?;
            let ab = ablate_decoder(&cfg, &tr, &ev, &seeds, &mut say)?;
            let table = ab.table();
            say(table.trim_end());
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
