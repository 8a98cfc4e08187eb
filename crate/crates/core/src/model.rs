//! Encoder + multi-task decoder as one model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoder, DecoderConfig, TaskBranches};
use crate::encoder::{check_input_extent, Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::AttentionTrace;
use crate::params::{Bound, Init, ParamStore};
use crate::raster::{Mask, RgbImage};
use crate::tensor::{Real, Tensor};

/// Per-channel normalization applied to 8-bit RGB input.
const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Desk-scale default: T0 encoder, `c = 16`, two tasks.
    pub fn desk(tasks: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::t0(),
            decoder: DecoderConfig::new(16, tasks),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub fused: Var,
    pub initial: TaskBranches,
    pub refined: TaskBranches,
    /// Per task `[h, w, 2]`.
    pub logits: Vec<Var>,
    pub attention: Vec<AttentionTrace>,
}

impl Model {
    /// Builds the model and its randomly initialized parameters. Encoder,
    /// decoder and cross-attention weights come from separate seeded
    /// streams, so two configs differing only in `cross_attention` share
    /// every other weight.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut enc_rng = stream(seed, 1);
        let mut dec_rng = stream(seed, 2);
        let mut cross_rng = stream(seed, 3);
        let encoder = Encoder::new(&mut Init::new(&mut store, &mut enc_rng), &config.encoder)?;
        // Two initializers cannot borrow the store at once; build the
        // cross projections into a side store and append.
        let mut cross_store = ParamStore::new();
        let decoder = {
            let mut dec_init = Init::new(&mut store, &mut dec_rng);
            let mut cross_init = Init::new(&mut cross_store, &mut cross_rng);
            Decoder::new(
                &mut dec_init,
                &mut cross_init,
                &config.decoder,
                config.encoder.embed_dims,
            )?
        };
        let decoder = rebase_cross(decoder, &mut store, cross_store)?;
        Ok((
            Model {
                config: config.clone(),
                encoder,
                decoder,
            },
            store,
        ))
    }

    /// Full forward pass on a normalized `[h, w, 3]` image node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<ModelOutput> {
        let mut attention = Vec::new();
        let pyramid = self.encoder.encode(g, p, image, &mut attention)?;
        let fused = self.decoder.fuse_mlp_layer(g, p, &pyramid)?;
        let initial = self.decoder.task_branch_init(g, p, fused)?;
        let refined = self
            .decoder
            .multitask_block(g, p, &initial, &mut attention)?;
        let logits = self.decoder.predict_heads(g, p, &refined, 4)?;
        Ok(ModelOutput {
            pyramid,
            fused,
            initial,
            refined,
            logits,
            attention,
        })
    }

    /// Per-task binary masks for one image (inference only).
    pub fn predict(&self, store: &ParamStore<f32>, image: &RgbImage) -> Result<Vec<Mask>> {
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let x = g.input(image_tensor(image)?);
        let out = self.forward(&mut g, &p, x)?;
        out.logits
            .iter()
            .map(|&l| argmax_mask(g.value(l), image.height, image.width))
            .collect()
    }

    pub fn tasks(&self) -> usize {
        self.config.decoder.tasks
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Moves cross-projection parameters from their side store into `store`,
/// remapping the decoder's ids.
fn rebase_cross<T: Real>(
    mut decoder: Decoder,
    store: &mut ParamStore<T>,
    side: ParamStore<T>,
) -> Result<Decoder> {
    let mut remap = Vec::with_capacity(side.len());
    for (name, t) in side.iter() {
        remap.push(store.insert(name, t.clone())?);
    }
    if let Some(cross) = decoder.cross.as_mut() {
        for cp in cross.iter_mut() {
            let fix = |id: &mut crate::params::ParamId| *id = remap[id.index()];
            fix(&mut cp.norm.gain);
            fix(&mut cp.norm.bias);
            for lin in [&mut cp.q, &mut cp.k, &mut cp.v] {
                fix(&mut lin.weight);
                fix(&mut lin.bias);
            }
            if let Some(sr) = cp.reduce.as_mut() {
                fix(&mut sr.proj.weight);
                fix(&mut sr.proj.bias);
                fix(&mut sr.norm.gain);
                fix(&mut sr.norm.bias);
            }
        }
    }
    Ok(decoder)
}

/// Converts 8-bit RGB to a normalized `[h, w, 3]` tensor.
pub fn image_tensor<T: Real>(image: &RgbImage) -> Result<Tensor<T>> {
    check_input_extent(image.height, image.width)?;
    let data = image
        .data
        .chunks_exact(3)
        .flat_map(|px| {
            (0..3).map(move |c| T::from_f64((px[c] as f64 / 255.0 - RGB_MEAN[c]) / RGB_STD[c]))
        })
        .collect();
    Tensor::new(&[image.height, image.width, 3], data)
}

/// Argmax over the last axis of `[h, w, 2]` logits. Ties go to class 0.
pub fn argmax_mask<T: Real>(logits: &Tensor<T>, h: usize, w: usize) -> Result<Mask> {
    if logits.shape() != [h, w, 2] {
        return Err(Error::dim(format!(
            "expected [{h}, {w}, 2] logits, got {:?}",
            logits.shape()
        )));
    }
    let data = logits
        .data()
        .chunks_exact(2)
        .map(|px| (px[1] > px[0]) as u8)
        .collect();
    Mask::from_raw(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_share_non_cross_weights() {
        let cfg = ModelConfig::desk(2);
        let mut single = cfg.clone();
        single.decoder.cross_attention = false;
        let (m, a) = Model::build::<f32>(&cfg, 5).unwrap();
        let (_, b) = Model::build::<f32>(&single, 5).unwrap();
        for (name, t) in b.iter() {
            assert_eq!(a.by_name(name).unwrap(), t, "{name}");
        }
        let cross: usize = m
            .decoder
            .cross_param_ids()
            .iter()
            .map(|&id| a.get(id).len())
            .sum();
        assert_eq!(a.numel() - b.numel(), cross);
        assert!(cross > 0);
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let t = Tensor::<f32>::new(&[1, 3, 2], vec![0.5, 0.5, 0.0, 1.0, 2.0, -1.0]).unwrap();
        assert_eq!(argmax_mask(&t, 1, 3).unwrap().data, vec![0, 1, 0]);
    }
}
