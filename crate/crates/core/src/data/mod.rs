//! Synthetic correlated-task datasets and their on-disk format.
//!
//! A dataset directory holds, per sample stem, `<stem>.ppm`,
//! `<stem>.task<k>.pgm` and `<stem>.meta`, plus a `manifest.txt`:
//!
//! ```text
//! # comment
//! task line thin
//! task gap thin
//! sample s0000
//! ```

pub mod crop;
pub mod io;
pub mod leaf;
pub mod morph;
pub mod texture;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

pub use crop::{gen_crop_scene, CropSceneParams};
pub use leaf::{gen_leaf_scene, LeafSceneParams};
pub use morph::{dilate_mask, THIN_LABEL_ELEMENT};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    /// One binary mask per task, in task order.
    pub masks: Vec<Mask>,
    pub meta: Vec<(String, String)>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    /// Thin structures are dilated for training and segmentation scoring
    /// and skeletonized for detection scoring.
    pub thin: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Crop,
    Leaf,
}

impl SceneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(SceneKind::Crop),
            "leaf" => Ok(SceneKind::Leaf),
            other => Err(Error::Argument(format!(
                "unknown scene kind {other:?} (expected crop or leaf)"
            ))),
        }
    }

    pub fn tasks(self) -> Vec<TaskSpec> {
        let (names, thin) = match self {
            SceneKind::Crop => (crop::TASKS, true),
            SceneKind::Leaf => (leaf::TASKS, false),
        };
        names
            .iter()
            .map(|n| TaskSpec {
                name: n.to_string(),
                thin,
            })
            .collect()
    }

    /// One random scene. The scene's own seed is drawn from `rng`.
    pub fn generate(self, size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        match self {
            SceneKind::Crop => gen_crop_scene(&CropSceneParams::random(size, size, rng)),
            SceneKind::Leaf => gen_leaf_scene(&LeafSceneParams::random(size, size, rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskSpec>,
    pub stems: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `count` square scenes of side `size`, fully determined by `seed`.
    pub fn generate(kind: SceneKind, count: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            samples.push(kind.generate(size, &mut rng)?);
        }
        Ok(Dataset {
            tasks: kind.tasks(),
            stems: (0..count).map(|i| format!("s{i:04}")).collect(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Training targets: thin tasks dilated with the 6×6 element.
    pub fn training_labels(&self, i: usize) -> Vec<Mask> {
        label_targets(&self.tasks, &self.samples[i].masks)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (stem, s) in self.stems.iter().zip(&self.samples) {
            io::write_sample(dir, stem, s)?;
        }
        let mp = dir.join(MANIFEST);
        fs::write(&mp, format_manifest(&self.tasks, &self.stems)).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST);
        let bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format(&mp, e.utf8_error().valid_up_to(), "not UTF-8"))?;
        let (tasks, stems) = parse_manifest(&text, &mp)?;
        let samples = stems
            .iter()
            .map(|s| io::read_sample(dir, s, tasks.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            tasks,
            stems,
            samples,
        })
    }
}

pub fn label_targets(tasks: &[TaskSpec], masks: &[Mask]) -> Vec<Mask> {
    tasks
        .iter()
        .zip(masks)
        .map(|(t, m)| {
            if t.thin {
                dilate_mask(m, THIN_LABEL_ELEMENT)
            } else {
                m.clone()
            }
        })
        .collect()
}

pub fn format_manifest(tasks: &[TaskSpec], stems: &[String]) -> String {
    let mut s = String::from("# mtlseg dataset\n");
    for t in tasks {
        s.push_str(&format!(
            "task {}{}\n",
            t.name,
            if t.thin { " thin" } else { "" }
        ));
    }
    for st in stems {
        s.push_str(&format!("sample {st}\n"));
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<(Vec<TaskSpec>, Vec<String>)> {
    let mut tasks = Vec::new();
    let mut stems = Vec::new();
    for (at, line) in io::content_lines(text) {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("task"), Some(name), flag, None) => {
                let thin = match flag {
                    None => false,
                    Some("thin") => true,
                    Some(f) => {
                        return Err(Error::format(path, at, format!("unknown task flag {f:?}")))
                    }
                };
                tasks.push(TaskSpec {
                    name: name.to_string(),
                    thin,
                });
            }
            (Some("sample"), Some(stem), None, None) => {
                if stem.contains(['/', '\\']) {
                    return Err(Error::format(
                        path,
                        at,
                        "sample stem contains a path separator",
                    ));
                }
                stems.push(stem.to_string());
            }
            _ => {
                return Err(Error::format(
                    path,
                    at,
                    format!("unrecognized line {line:?}"),
                ))
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::format(
            path,
            text.len(),
            "manifest declares no tasks",
        ));
    }
    if stems.is_empty() {
        return Err(Error::format(path, text.len(), "manifest lists no samples"));
    }
    Ok((tasks, stems))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(SceneKind::Crop, 3, 64, 7).unwrap();
        let b = Dataset::generate(SceneKind::Crop, 3, 64, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples[0], a.samples[1]);
        let c = Dataset::generate(SceneKind::Leaf, 2, 64, 7).unwrap();
        assert_eq!(c.tasks[1].name, "defoliation");
    }

    #[test]
    fn manifest_round_trip() {
        let tasks = SceneKind::Crop.tasks();
        let stems = vec!["a".to_string(), "b".to_string()];
        let text = format_manifest(&tasks, &stems);
        assert_eq!(
            parse_manifest(&text, Path::new("m")).unwrap(),
            (tasks, stems)
        );
        assert!(parse_manifest("task x\nsample a b\n", Path::new("m")).is_err());
        assert!(parse_manifest("sample a\n", Path::new("m")).is_err());
    }
}
