//! Segmentation F1/IoU and distance-tolerant detection F1.

use std::fmt::Write as _;

use crate::data::{label_targets, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::raster::Mask;
use crate::skeleton::skeletonize;
use crate::tiling::{infer_full, priority_labels};

/// Detection tolerance in pixels.
pub const DETECTION_TOLERANCE: f64 = 3.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl SegCounts {
    pub fn add(&mut self, o: SegCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn score(&self) -> SegScore {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fp + self.fn_ == 0 {
            return SegScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                iou: 1.0,
                empty: true,
            };
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        SegScore {
            precision,
            recall,
            f1: harmonic(precision, recall),
            iou: tp / (tp + fp + fn_),
            empty: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Neither prediction nor ground truth contains the class; scored as
    /// perfect agreement.
    pub empty: bool,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_extent(a: &Mask, b: &Mask) -> Result<()> {
    if a.same_extent(b) {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "prediction is {}x{}, ground truth {}x{}",
            a.height, a.width, b.height, b.width
        )))
    }
}

/// Pixel counts for `class` in two label rasters.
pub fn seg_counts(pred: &Mask, gt: &Mask, class: u8) -> Result<SegCounts> {
    check_extent(pred, gt)?;
    let mut c = SegCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

pub fn seg_metrics(pred: &Mask, gt: &Mask, class: u8) -> Result<SegScore> {
    Ok(seg_counts(pred, gt, class)?.score())
}

const FAR: f64 = 1e30;

/// Squared distance transform of a sampled function, in place.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel. Pixels of an empty mask get a huge value.
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (h, w) = (m.height, m.width);
    let mut grid: Vec<f64> = m
        .data
        .iter()
        .map(|&v| if v != 0 { 0.0 } else { FAR })
        .collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetCounts {
    /// Predicted pixels within tolerance of ground truth.
    pub tp: u64,
    pub fp: u64,
    /// Ground-truth pixels farther than tolerance from any prediction.
    pub fn_: u64,
    pub pred: u64,
    pub gt: u64,
}

impl DetCounts {
    pub fn add(&mut self, o: DetCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.pred += o.pred;
        self.gt += o.gt;
    }

    pub fn score(&self) -> DetScore {
        if self.pred == 0 && self.gt == 0 {
            return DetScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                empty: true,
                recall_undefined: false,
            };
        }
        let precision = ratio(self.tp as f64, self.pred as f64);
        let recall = ratio((self.gt - self.fn_) as f64, self.gt as f64);
        DetScore {
            precision,
            recall,
            f1: harmonic(precision, recall),
            empty: false,
            recall_undefined: self.gt == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub empty: bool,
    /// Ground truth is empty while predictions are not; recall is
    /// reported as 0.
    pub recall_undefined: bool,
}

pub fn detection_counts(pred: &Mask, gt: &Mask, d: f64) -> Result<DetCounts> {
    check_extent(pred, gt)?;
    let d2 = d * d;
    let to_gt = squared_distance_transform(gt);
    let to_pred = squared_distance_transform(pred);
    let mut c = DetCounts::default();
    for i in 0..pred.data.len() {
        if pred.data[i] != 0 {
            c.pred += 1;
            if to_gt[i] <= d2 {
                c.tp += 1;
            }
        }
        if gt.data[i] != 0 {
            c.gt += 1;
            if to_pred[i] > d2 {
                c.fn_ += 1;
            }
        }
    }
    c.fp = c.pred - c.tp;
    Ok(c)
}

/// Detection precision/recall/F1 of two skeletons at tolerance `d`.
pub fn detection_f1(pred_skel: &Mask, gt_skel: &Mask, d: f64) -> Result<DetScore> {
    Ok(detection_counts(pred_skel, gt_skel, d)?.score())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub name: String,
    pub thin: bool,
    /// Against training-style ground truth (dilated for thin tasks).
    pub seg: SegCounts,
    /// Thin tasks only: against the raw 1-px ground truth.
    pub seg_raw: Option<SegCounts>,
    /// Thin tasks only: skeleton detection counts.
    pub det: Option<DetCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub tasks: Vec<TaskReport>,
}

impl MetricsReport {
    pub fn new(tasks: &[TaskSpec]) -> Self {
        MetricsReport {
            samples: 0,
            tasks: tasks
                .iter()
                .map(|t| TaskReport {
                    name: t.name.clone(),
                    thin: t.thin,
                    seg: SegCounts::default(),
                    seg_raw: t.thin.then(SegCounts::default),
                    det: t.thin.then(DetCounts::default),
                })
                .collect(),
        }
    }

    /// Adds one sample given per-task predicted masks and the raw ground
    /// truth masks. Overlapping predictions are resolved by task priority.
    pub fn accumulate(&mut self, tasks: &[TaskSpec], pred: &[Mask], gt: &[Mask]) -> Result<()> {
        if pred.len() != tasks.len() || gt.len() != tasks.len() {
            return Err(Error::Argument(format!(
                "{} tasks, {} predictions, {} ground-truth masks",
                tasks.len(),
                pred.len(),
                gt.len()
            )));
        }
        self.accumulate_labels(tasks, &priority_labels(pred)?, gt)
    }

    /// As [`accumulate`](Self::accumulate) with an already merged label
    /// raster (label `t + 1` for task `t`).
    pub fn accumulate_labels(
        &mut self,
        tasks: &[TaskSpec],
        pred: &Mask,
        gt: &[Mask],
    ) -> Result<()> {
        let gt_labels = priority_labels(&label_targets(tasks, gt))?;
        let raw_labels = priority_labels(gt)?;
        for (t, rep) in self.tasks.iter_mut().enumerate() {
            let class = t as u8 + 1;
            rep.seg.add(seg_counts(pred, &gt_labels, class)?);
            if let Some(raw) = rep.seg_raw.as_mut() {
                raw.add(seg_counts(pred, &raw_labels, class)?);
            }
            if let Some(det) = rep.det.as_mut() {
                let skel = skeletonize(&pred.class_mask(class));
                det.add(detection_counts(&skel, &gt[t], DETECTION_TOLERANCE)?);
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("samples={}\n", self.samples);
        let seg = |s: &mut String, pre: &str, c: &SegCounts| {
            let sc = c.score();
            let _ = writeln!(s, "{pre}.precision={:.6}", sc.precision);
            let _ = writeln!(s, "{pre}.recall={:.6}", sc.recall);
            let _ = writeln!(s, "{pre}.f1={:.6}", sc.f1);
            let _ = writeln!(s, "{pre}.iou={:.6}", sc.iou);
            let _ = writeln!(
                s,
                "{pre}.tp={}\n{pre}.fp={}\n{pre}.fn={}",
                c.tp, c.fp, c.fn_
            );
            if sc.empty {
                let _ = writeln!(s, "{pre}.empty=true");
            }
        };
        for t in &self.tasks {
            seg(&mut s, &format!("{}.seg", t.name), &t.seg);
            if let Some(r) = &t.seg_raw {
                seg(&mut s, &format!("{}.seg_raw", t.name), r);
            }
            if let Some(d) = &t.det {
                let sc = d.score();
                let pre = format!("{}.det", t.name);
                let _ = writeln!(s, "{pre}.precision={:.6}", sc.precision);
                let _ = writeln!(s, "{pre}.recall={:.6}", sc.recall);
                let _ = writeln!(s, "{pre}.f1={:.6}", sc.f1);
                let _ = writeln!(
                    s,
                    "{pre}.tp={}\n{pre}.fp={}\n{pre}.fn={}",
                    d.tp, d.fp, d.fn_
                );
                if sc.empty {
                    let _ = writeln!(s, "{pre}.empty=true");
                }
                if sc.recall_undefined {
                    let _ = writeln!(s, "{pre}.recall_undefined=true");
                }
            }
        }
        s
    }

    pub fn tsv_header(&self) -> String {
        self.tasks
            .iter()
            .flat_map(|t| [format!("{}_f1", t.name), format!("{}_iou", t.name)])
            .collect::<Vec<_>>()
            .join("\t")
    }

    /// Segmentation F1 and IoU per task, tab-separated.
    pub fn tsv_row(&self) -> String {
        self.tasks
            .iter()
            .flat_map(|t| {
                let s = t.seg.score();
                [format!("{:.4}", s.f1), format!("{:.4}", s.iou)]
            })
            .collect::<Vec<_>>()
            .join("\t")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Whole sample through the model at once.
    Direct,
    /// Overlapping patches of this size, merged by priority.
    Tiled(usize),
}

pub fn evaluate_dataset(
    model: &Model,
    store: &ParamStore<f32>,
    ds: &Dataset,
    mode: EvalMode,
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    if ds.tasks.len() != model.tasks() {
        return Err(Error::Argument(format!(
            "dataset has {} tasks, model {}",
            ds.tasks.len(),
            model.tasks()
        )));
    }
    let mut report = MetricsReport::new(&ds.tasks);
    for s in &ds.samples {
        let labels = match mode {
            EvalMode::Direct => priority_labels(&model.predict(store, &s.image)?)?,
            EvalMode::Tiled(p) => infer_full(model, store, &s.image, p)?.merged,
        };
        report.accumulate_labels(&ds.tasks, &labels, &s.masks)?;
    }
    Ok(report)
}
