use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{BnMode, PixelRef};
use super::model::{loss_and_grad, PixelNet};
use super::optim::{Optimizer, OptimizerConfig};
use super::tensor::Tensor;
use super::NetError;
use crate::volume::{brain_mask, normalize_zero_mean_unit_std, LabelVolume, Mask, Modality, ModalityStack};

/// Maps a BraTS label {0, 1, 2, 4} to a class index {0..3}.
pub fn label_to_class(label: u8) -> u8 {
    match label {
        4 => 3,
        l => l,
    }
}

pub fn class_to_label(class: u8) -> u8 {
    match class {
        3 => 4,
        c => c,
    }
}

/// One axial slice prepared for the network: normalized modalities (C×H×W),
/// class indices and brain mask (H×W).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSlice {
    pub subject: String,
    pub z: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub classes: Vec<u8>,
    pub mask: Vec<bool>,
}

impl TrainingSlice {
    /// Left-right mirror (reverses columns).
    pub fn flipped(&self) -> Self {
        fn flip<T: Copy>(v: &[T], w: usize) -> Vec<T> {
            v.chunks_exact(w).flat_map(|r| r.iter().rev().copied()).collect()
        }
        Self {
            image: flip(&self.image, self.w),
            classes: flip(&self.classes, self.w),
            mask: flip(&self.mask, self.w),
            ..self.clone()
        }
    }
}

/// Normalized modalities of a stack in `Modality::ALL` order, plus the brain mask.
/// Returns `None` for the data when the brain mask is empty.
pub fn normalized_channels(stack: &ModalityStack) -> Result<(Mask, Option<Vec<Vec<f32>>>), NetError> {
    let mask = brain_mask(stack);
    if mask.is_empty() {
        return Ok((mask, None));
    }
    let mut out = Vec::with_capacity(4);
    for m in Modality::ALL {
        let vol = stack
            .get(m)
            .ok_or_else(|| NetError::Data(format!("subject {}: missing modality {m}", stack.subject_id())))?;
        let norm = normalize_zero_mean_unit_std(vol, &mask)
            .map_err(|e| NetError::Data(format!("subject {}: {m}: {e}", stack.subject_id())))?;
        out.push(norm.into_data());
    }
    Ok((mask, Some(out)))
}

/// Cuts a subject into axial slices, dropping slices with no brain voxels.
pub fn prepare_slices(stack: &ModalityStack, labels: &LabelVolume) -> Result<Vec<TrainingSlice>, NetError> {
    if labels.grid() != stack.grid() {
        return Err(NetError::Shape("labels and modalities have different grids".into()));
    }
    let [nx, ny, nz] = stack.grid().dims;
    let (mask, channels) = normalized_channels(stack)?;
    let Some(channels) = channels else { return Ok(Vec::new()) };
    let plane = nx * ny;
    let mut slices = Vec::new();
    for z in 0..nz {
        let range = z * plane..(z + 1) * plane;
        let m = &mask.data()[range.clone()];
        if !m.iter().any(|&b| b) {
            continue;
        }
        let mut image = Vec::with_capacity(channels.len() * plane);
        for ch in &channels {
            image.extend(ch[range.clone()].iter().map(|&v| v as f64));
        }
        slices.push(TrainingSlice {
            subject: stack.subject_id().to_string(),
            z,
            channels: channels.len(),
            // rows run along y, columns along x
            h: ny,
            w: nx,
            image,
            classes: labels.data()[range].iter().map(|&l| label_to_class(l)).collect(),
            mask: m.to_vec(),
        });
    }
    Ok(slices)
}

/// Chooses training pixels for one image.
pub trait PixelSampler {
    /// Returns `n` (row, col) coordinates inside the mask.
    fn sample(&self, classes: &[u8], mask: &[bool], width: usize, n: usize, rng: &mut dyn rand::RngCore)
        -> Result<Vec<(usize, usize)>, NetError>;
}

/// Uniform over in-mask pixels; with replacement only when the mask holds
/// fewer than `n` pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSampler;

impl PixelSampler for UniformSampler {
    fn sample(
        &self,
        _classes: &[u8],
        mask: &[bool],
        width: usize,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<(usize, usize)>, NetError> {
        let inside: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
        if inside.is_empty() {
            return Err(NetError::Data("cannot sample pixels from an empty mask".into()));
        }
        let picks: Vec<usize> = if inside.len() >= n {
            index::sample(rng, inside.len(), n).into_iter().map(|i| inside[i]).collect()
        } else {
            (0..n).map(|_| inside[rng.random_range(0..inside.len())]).collect()
        };
        Ok(picks.into_iter().map(|i| (i / width, i % width)).collect())
    }
}

pub fn sample_training_pixels<R: Rng>(
    classes: &[u8],
    mask: &[bool],
    width: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, NetError> {
    UniformSampler.sample(classes, mask, width, n, rng)
}

/// A minibatch of images with the sampled pixels and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor,
    pub pixel_coords: Vec<Vec<(f64, f64)>>,
    pub labels: Vec<Vec<usize>>,
}

impl SampleBatch {
    pub fn pixel_refs(&self) -> Vec<PixelRef> {
        self.pixel_coords
            .iter()
            .enumerate()
            .flat_map(|(image, coords)| coords.iter().map(move |&(row, col)| PixelRef { image, row, col }))
            .collect()
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }

    /// Stacks slices and samples `n` pixels from each.
    pub fn from_slices<R: Rng>(
        slices: &[&TrainingSlice],
        n: usize,
        sampler: &dyn PixelSampler,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let first = slices.first().ok_or_else(|| NetError::Data("empty batch".into()))?;
        let (c, h, w) = (first.channels, first.h, first.w);
        let mut data = Vec::with_capacity(slices.len() * c * h * w);
        let mut coords = Vec::with_capacity(slices.len());
        let mut labels = Vec::with_capacity(slices.len());
        for s in slices {
            if (s.channels, s.h, s.w) != (c, h, w) {
                return Err(NetError::Shape("slices in a batch must share their shape".into()));
            }
            data.extend_from_slice(&s.image);
            let px = sampler.sample(&s.classes, &s.mask, w, n, rng)?;
            labels.push(px.iter().map(|&(r, cc)| s.classes[r * w + cc] as usize).collect());
            coords.push(px.into_iter().map(|(r, cc)| (r as f64, cc as f64)).collect());
        }
        Ok(Self {
            images: Tensor::new(vec![slices.len(), c, h, w], data)?,
            pixel_coords: coords,
            labels,
        })
    }
}

/// One forward/backward/update cycle. Returns the batch loss before the update.
pub fn train_step(net: &mut PixelNet, opt: &mut Optimizer, batch: &SampleBatch) -> Result<f64, NetError> {
    let pixels = batch.pixel_refs();
    let cache = net.forward(&batch.images, &pixels, BnMode::Train)?;
    let (loss, grad) = loss_and_grad(&cache, &batch.flat_labels())?;
    if !loss.is_finite() {
        let name = cache.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(NetError::NonFinite(name));
    }
    net.zero_grad();
    net.backward(&cache, &grad, false);
    net.update_bn_stats(&cache);
    let mut params = net.params_mut();
    opt.step(&mut params);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_pixels")]
    pub pixels_per_image: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_flip")]
    pub flip_augment: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_pixels() -> usize {
    2000
}
fn default_batch() -> usize {
    10
}
fn default_epochs() -> usize {
    20
}
fn default_flip() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pixels_per_image: default_pixels(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            optimizer: OptimizerConfig::default(),
            flip_augment: default_flip(),
            seed: 0,
        }
    }
}

/// Epoch-level training driver with its own seeded RNG.
pub struct Trainer {
    pub net: PixelNet,
    opt: Optimizer,
    rng: ChaCha8Rng,
    config: TrainConfig,
    sampler: Box<dyn PixelSampler + Send + Sync>,
}

impl Trainer {
    pub fn new(net: PixelNet, config: TrainConfig) -> Self {
        Self {
            opt: Optimizer::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f5a_3b1e),
            net,
            config,
            sampler: Box::new(UniformSampler),
        }
    }

    pub fn with_sampler(mut self, sampler: Box<dyn PixelSampler + Send + Sync>) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One shuffled pass over `slices`; returns the mean batch loss.
    pub fn train_epoch(&mut self, slices: &[TrainingSlice]) -> Result<f64, NetError> {
        if slices.is_empty() {
            return Err(NetError::Data("no training slices".into()));
        }
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size.max(1)) {
            let flipped: Vec<TrainingSlice>;
            let refs: Vec<&TrainingSlice> = if self.config.flip_augment {
                flipped = chunk
                    .iter()
                    .map(|&i| if self.rng.random_bool(0.5) { slices[i].flipped() } else { slices[i].clone() })
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &slices[i]).collect()
            };
            let batch = SampleBatch::from_slices(&refs, self.config.pixels_per_image, self.sampler.as_ref(), &mut self.rng)?;
            total += train_step(&mut self.net, &mut self.opt, &batch)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

/// Labels every brain voxel slice by slice (batch norm in eval mode); voxels
/// outside the brain mask are 0.
pub fn predict_volume(net: &PixelNet, stack: &ModalityStack) -> Result<LabelVolume, NetError> {
    if !net.bn_ready() {
        return Err(NetError::Untrained(
            "batch-norm running statistics are uninitialized; train the model first".into(),
        ));
    }
    let grid = stack.grid();
    let [nx, ny, nz] = grid.dims;
    let (mask, channels) = normalized_channels(stack)?;
    let Some(channels) = channels else { return Ok(LabelVolume::zeros(grid)) };
    let plane = nx * ny;
    let per_slice: Vec<Vec<u8>> = (0..nz)
        .into_par_iter()
        .map(|z| -> Result<Vec<u8>, NetError> {
            let range = z * plane..(z + 1) * plane;
            let m = &mask.data()[range.clone()];
            let mut out = vec![0u8; plane];
            let pixels: Vec<PixelRef> = m
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| PixelRef { image: 0, row: (i / nx) as f64, col: (i % nx) as f64 })
                .collect();
            if pixels.is_empty() {
                return Ok(out);
            }
            let mut image = Vec::with_capacity(channels.len() * plane);
            for ch in &channels {
                image.extend(ch[range.clone()].iter().map(|&v| v as f64));
            }
            let input = Tensor::new(vec![1, channels.len(), ny, nx], image)?;
            let logits = net.predict_logits(&input, &pixels)?;
            for (p, row) in pixels.iter().zip(logits.values().chunks_exact(4)) {
                let class = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                out[p.row as usize * nx + p.col as usize] = class_to_label(class as u8);
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    let data = per_slice.concat();
    LabelVolume::new(grid, data).map_err(|e| NetError::Data(e.to_string()))
}
