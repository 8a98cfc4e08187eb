//! Loss, training loop and decoder ablation.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_model;
use crate::data::io::content_lines;
use crate::data::Dataset;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{evaluate_dataset, EvalMode, MetricsReport};
use crate::model::{image_tensor, Model, ModelConfig};
use crate::optim::{adamw_step, poly_lr, OptimState};
use crate::params::ParamStore;
use crate::raster::Mask;
use crate::tensor::Tensor;

/// RNG stream used for sample order, disjoint from the init streams.
const SHUFFLE_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub encoder: String,
    pub channels: usize,
    pub tasks: usize,
    pub cross_attention: bool,
    pub cross_reduction: usize,
    pub decoder_heads: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Save a checkpoint every this many iterations; 0 saves only the
    /// final one.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 2,
            base_lr: 6e-5,
            poly_power: 1.0,
            weight_decay: 0.01,
            seed: 0,
            encoder: "t0".into(),
            channels: 16,
            tasks: 2,
            cross_attention: true,
            cross_reduction: 1,
            decoder_heads: 1,
            data: None,
            out: None,
            checkpoint_interval: 0,
            log_interval: 100,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("line {line}: bad value {v:?} for {key}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (at, line) in content_lines(text) {
            let n = text[..at].matches('\n').count() + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {n}: expected key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "iterations" => cfg.iterations = parse_value(k, v, n)?,
                "batch_size" => cfg.batch_size = parse_value(k, v, n)?,
                "lr" | "base_lr" => cfg.base_lr = parse_value(k, v, n)?,
                "poly_power" => cfg.poly_power = parse_value(k, v, n)?,
                "weight_decay" => cfg.weight_decay = parse_value(k, v, n)?,
                "seed" => cfg.seed = parse_value(k, v, n)?,
                "encoder" => cfg.encoder = v.to_string(),
                "channels" => cfg.channels = parse_value(k, v, n)?,
                "tasks" => cfg.tasks = parse_value(k, v, n)?,
                "cross_attention" => cfg.cross_attention = parse_value(k, v, n)?,
                "cross_reduction" => cfg.cross_reduction = parse_value(k, v, n)?,
                "decoder_heads" => cfg.decoder_heads = parse_value(k, v, n)?,
                "data" => cfg.data = Some(PathBuf::from(v)),
                "out" => cfg.out = Some(PathBuf::from(v)),
                "checkpoint_interval" => cfg.checkpoint_interval = parse_value(k, v, n)?,
                "log_interval" => cfg.log_interval = parse_value(k, v, n)?,
                _ => return Err(Error::config(format!("line {n}: unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::config(
                "iterations, batch_size and log_interval must be positive",
            ));
        }
        if !(self.base_lr > 0.0) || !(self.poly_power > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "need lr > 0, poly_power > 0, weight_decay >= 0",
            ));
        }
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: EncoderConfig::by_name(&self.encoder)?,
            decoder: DecoderConfig {
                heads: self.decoder_heads,
                cross_reduction: self.cross_reduction,
                cross_attention: self.cross_attention,
                ..DecoderConfig::new(self.channels, self.tasks)
            },
        })
    }
}

/// Sum over tasks of the mean per-pixel two-class cross-entropy. Returns
/// the total and the per-task terms.
pub fn mtl_loss<T: crate::Real>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &[Mask],
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Argument(format!(
            "{} logit maps for {} label masks",
            logits.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (t, (&l, m)) in logits.iter().zip(labels).enumerate() {
        if !m.is_binary() {
            return Err(Error::Argument(format!(
                "labels for task {t} are not binary"
            )));
        }
        terms.push(g.cross_entropy(l, &m.data)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    /// Batch-mean total loss before the update.
    pub loss: f64,
    pub task_losses: Vec<f64>,
    pub elapsed_ms: u128,
}

impl LogRecord {
    pub fn to_line(&self, task_names: &[String]) -> String {
        let mut s = format!(
            "iter={} lr={:e} loss={:.6}",
            self.iteration, self.lr, self.loss
        );
        for (n, l) in task_names.iter().zip(&self.task_losses) {
            let _ = write!(s, " loss.{n}={l:.6}");
        }
        let _ = write!(s, " elapsed_ms={}", self.elapsed_ms);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    /// Batch-mean total loss of every iteration.
    pub losses: Vec<f64>,
    /// Schedule value after the last update (the poly endpoint).
    pub final_lr: f64,
}

impl RunLog {
    /// Mean loss over iterations `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub log: RunLog,
}

struct Prepared {
    image: Tensor<f32>,
    labels: Vec<Mask>,
}

fn write_line(file: &mut Option<File>, path: &Path, line: &str) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains a fresh model on `ds`. Log lines go to `sink` and, when
/// `cfg.out` is set, to `out/run.log` next to the checkpoints.
pub fn train(cfg: &TrainConfig, ds: &Dataset, sink: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if ds.tasks.len() != cfg.tasks {
        return Err(Error::config(format!(
            "config expects {} tasks, dataset has {}",
            cfg.tasks,
            ds.tasks.len()
        )));
    }
    let mcfg = cfg.model_config()?;
    let (model, mut store) = Model::build::<f32>(&mcfg, cfg.seed)?;
    let names: Vec<String> = ds.tasks.iter().map(|t| t.name.clone()).collect();

    let data: Vec<Prepared> = (0..ds.len())
        .map(|i| {
            Ok(Prepared {
                image: image_tensor(&ds.samples[i].image)?,
                labels: ds.training_labels(i),
            })
        })
        .collect::<Result<_>>()?;

    let log_path = cfg.out.as_ref().map(|d| d.join("run.log"));
    let mut log_file = match (&cfg.out, &log_path) {
        (Some(dir), Some(lp)) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(File::create(lp).map_err(|e| Error::io(lp, e))?)
        }
        _ => None,
    };
    let log_path = log_path.unwrap_or_default();

    let shapes: Vec<&[usize]> = store.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = OptimState::new(
        &shapes,
        cfg.base_lr,
        cfg.weight_decay,
        cfg.iterations,
        cfg.poly_power,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut log = RunLog::default();
    let start = Instant::now();
    let param_names = store.names().to_vec();

    for it in 0..cfg.iterations {
        let mut grads: Vec<Tensor<f32>> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut loss_sum = 0.0;
        let mut task_sums = vec![0.0; cfg.tasks];
        let step = (|| -> Result<()> {
            for _ in 0..cfg.batch_size {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                let s = &data[order.pop().expect("refilled above")];
                let mut g = Graph::new();
                let p = store.attach(&mut g, true);
                let x = g.input(s.image.clone());
                let out = model.forward(&mut g, &p, x)?;
                let (loss, terms) = mtl_loss(&mut g, &out.logits, &s.labels)?;
                loss_sum += g.value(loss).data()[0] as f64;
                for (acc, &t) in task_sums.iter_mut().zip(&terms) {
                    *acc += g.value(t).data()[0] as f64;
                }
                let gr = g.backward(loss)?;
                for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                    if let Some(gv) = gr.get(v) {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let inv = 1.0 / cfg.batch_size as f32;
            for gt in &mut grads {
                for v in gt.data_mut() {
                    *v *= inv;
                }
            }
            let mut next = store.clone();
            adamw_step(next.tensors_mut(), &grads, &mut opt, Some(&param_names))?;
            if let Some(bad) = next.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {} became non-finite",
                    bad.0
                )));
            }
            store = next;
            Ok(())
        })();
        if let Err(e) = step {
            if let (Error::Numeric(msg), Some(dir)) = (&e, &cfg.out) {
                let p = dir.join("last_good.ckpt");
                save_model(&p, &mcfg, &store)?;
                return Err(Error::Numeric(format!(
                    "{msg} at iteration {it}; last good weights in {}",
                    p.display()
                )));
            }
            return Err(e);
        }
        let bs = cfg.batch_size as f64;
        let loss = loss_sum / bs;
        log.losses.push(loss);
        if it % cfg.log_interval == 0 || it + 1 == cfg.iterations {
            let rec = LogRecord {
                iteration: it,
                lr: poly_lr(it, cfg.iterations, cfg.base_lr, cfg.poly_power),
                loss,
                task_losses: task_sums.iter().map(|v| v / bs).collect(),
                elapsed_ms: start.elapsed().as_millis(),
            };
            let line = rec.to_line(&names);
            sink(&line);
            write_line(&mut log_file, &log_path, &line)?;
            log.records.push(rec);
        }
        if let Some(dir) = &cfg.out {
            let done = it + 1;
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
                save_model(&dir.join(format!("iter_{done:06}.ckpt")), &mcfg, &store)?;
            }
        }
    }
    log.final_lr = opt.current_lr();
    let tail = format!(
        "done iterations={} final_lr={:e}",
        cfg.iterations, log.final_lr
    );
    sink(&tail);
    write_line(&mut log_file, &log_path, &tail)?;
    if let Some(dir) = &cfg.out {
        save_model(&dir.join("last.ckpt"), &mcfg, &store)?;
    }
    Ok(TrainOutcome { model, store, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mtl,
    SingleTask,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mtl => "mtl",
            Variant::SingleTask => "single-task",
        }
    }
}

pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub report: MetricsReport,
    pub outcome: TrainOutcome,
}

pub struct Ablation {
    pub runs: Vec<AblationRun>,
}

impl Ablation {
    /// Mean segmentation IoU of `task` over the seeds of `variant`.
    pub fn mean_iou(&self, variant: Variant, task: usize) -> f64 {
        self.mean(variant, |r| r.tasks[task].seg.score().iou)
    }

    pub fn mean_f1(&self, variant: Variant, task: usize) -> f64 {
        self.mean(variant, |r| r.tasks[task].seg.score().f1)
    }

    fn mean(&self, variant: Variant, f: impl Fn(&MetricsReport) -> f64) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| f(&r.report))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// One row per variant: seed-averaged F1 and IoU per task.
    pub fn table(&self) -> String {
        let first = &self.runs[0].report;
        let mut s = format!("variant\t{}\n", first.tsv_header());
        for v in [Variant::SingleTask, Variant::Mtl] {
            let cells: Vec<String> = (0..first.tasks.len())
                .flat_map(|t| {
                    [
                        format!("{:.4}", self.mean_f1(v, t)),
                        format!("{:.4}", self.mean_iou(v, t)),
                    ]
                })
                .collect();
            let _ = writeln!(s, "{}\t{}", v.name(), cells.join("\t"));
        }
        s
    }
}

/// Trains the decoder with and without cross-task attention for every
/// seed, then evaluates each model on `eval`.
pub fn ablate_decoder(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval: &Dataset,
    seeds: &[u64],
    sink: &mut dyn FnMut(&str),
) -> Result<Ablation> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for variant in [Variant::Mtl, Variant::SingleTask] {
            let c = TrainConfig {
                seed,
                cross_attention: variant == Variant::Mtl,
                out: cfg
                    .out
                    .as_ref()
                    .map(|d| d.join(format!("{}-seed{seed}", variant.name()))),
                ..cfg.clone()
            };
            sink(&format!("ablate variant={} seed={seed}", variant.name()));
            let outcome = train(&c, train_set, sink)?;
            let report = evaluate_dataset(&outcome.model, &outcome.store, eval, EvalMode::Direct)?;
            runs.push(AblationRun {
                variant,
                seed,
                params: outcome.store.numel(),
                report,
                outcome,
            });
        }
    }
    Ok(Ablation { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let c = TrainConfig::parse("# run\niterations = 10\nlr=1e-3 # fast\nseed = 7\n").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.base_lr, 1e-3);
        assert_eq!(c.seed, 7);
        assert_eq!(c.batch_size, 2);
        let e = TrainConfig::parse("iterations = 10\nlearning_rate = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(TrainConfig::parse("iterations = 0\n").is_err());
    }

    #[test]
    fn uniform_logits_cost_ln2_per_task() {
        let mut g = Graph::<f64>::new();
        let l1 = g.input(Tensor::zeros(&[2, 2, 2]));
        let l2 = g.input(Tensor::zeros(&[2, 2, 2]));
        let m = Mask::from_raw(2, 2, vec![0, 1, 1, 0]).unwrap();
        let (total, _) = mtl_loss(&mut g, &[l1, l2], &[m.clone(), m.clone()]).unwrap();
        assert!((g.value(total).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        let bad = Mask::from_raw(2, 2, vec![0, 2, 1, 0]).unwrap();
        assert!(mtl_loss(&mut g, &[l1, l2], &[m, bad]).is_err());
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_f64(&[1, 2, 2], &[20.0, -20.0, -20.0, 20.0]).unwrap());
        let m = Mask::from_raw(1, 2, vec![0, 1]).unwrap();
        let (total, _) = mtl_loss(&mut g, &[l], &[m]).unwrap();
        assert!(g.value(total).data()[0] < 1e-15);
    }
}
