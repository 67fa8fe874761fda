//! Sample construction, augmentation, the two training loops and
//! reference-frame scoring.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Video;
use crate::error::{DgtError, Result};
use crate::fisher::{self, FisherDiag};
use crate::metrics;
use crate::micronet::{self, AdamWConfig, AdamWState, NetworkParams, ParamScope, Sample, Trainable};
use crate::tensor::Tensor;

/// Optimisation schedule shared by both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_pretrain: f32,
    /// Node training during base building; `lr_pretrain` when unset.
    pub lr_node: Option<f32>,
    pub lr_grow: f32,
    pub epochs_root: usize,
    pub epochs_node: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub few_shot_k: usize,
    pub seed: u64,
    /// Probability of a random crop per sample and epoch.
    pub crop_prob: f32,
    /// Smallest crop side as a fraction of the frame.
    pub crop_min: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-5,
            lr_node: None,
            lr_grow: 1e-4,
            epochs_root: 50,
            epochs_node: 10,
            batch_size: 16,
            weight_decay: 0.05,
            few_shot_k: 5,
            seed: 0,
            crop_prob: 0.5,
            crop_min: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DgtError::Config(m.into()));
        if !(self.lr_pretrain > 0.0 && self.lr_grow > 0.0 && self.lr_node.is_none_or(|l| l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.epochs_root == 0 || self.epochs_node == 0 || self.batch_size == 0 || self.few_shot_k == 0 {
            return bad("epochs, batch_size and few_shot_k must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.crop_prob) || !(self.crop_min > 0.0 && self.crop_min <= 1.0) {
            return bad("crop_prob must lie in [0, 1] and crop_min in (0, 1]");
        }
        Ok(())
    }

    pub fn node_lr(&self) -> f32 {
        self.lr_node.unwrap_or(self.lr_pretrain)
    }

    pub(crate) fn adamw(&self, lr: f32) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Fisher estimation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    /// Label draws per input.
    pub n_samples: usize,
    /// Off disables the importance mask on updates of existing nodes.
    pub weighting: bool,
    pub accumulate: AccumulateRule,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            n_samples: 1,
            weighting: true,
            accumulate: AccumulateRule::Max,
        }
    }
}

/// How a node's importance combines with a new estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulateRule {
    #[default]
    Max,
}

/// 64-bit mixer used to derive sub-seeds.
pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn name_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// One sample per labelled frame and object, conditioned on the reference
/// frame and that object's reference mask.
pub fn video_samples(video: &Video) -> Result<Vec<Sample>> {
    let ref_masks = video.reference_masks()?;
    let mut out = Vec::new();
    for t in video.labelled_frames() {
        let masks = video.masks[t].as_ref().expect("labelled frame");
        for (k, gt) in masks.iter().enumerate() {
            out.push(Sample {
                frame: video.frames[t].clone(),
                ref_frame: video.reference_frame().clone(),
                ref_mask: ref_masks[k].clone(),
                gt: gt.clone(),
            });
        }
    }
    Ok(out)
}

fn crop_channel(t: &Tensor, c: usize, win: (u32, u32, u32, u32), filter: FilterType) -> Vec<f32> {
    let (_, h, w) = t.chw();
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, t.channel(c).to_vec()).expect("plane size");
    let (x0, y0, cw, ch) = win;
    let sub = imageops::crop_imm(&img, x0, y0, cw, ch).to_image();
    imageops::resize(&sub, w as u32, h as u32, filter).into_raw()
}

fn crop_tensor(t: &Tensor, win: (u32, u32, u32, u32), filter: FilterType) -> Tensor {
    let (c, h, w) = t.chw();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        data.extend(crop_channel(t, ch, win, filter));
    }
    Tensor::from_raw(vec![c, h, w], data)
}

/// Same random window on all four tensors, scaled back to full size
/// (bilinear for frames, nearest for masks).
pub fn random_crop(sample: &Sample, min_ratio: f32, rng: &mut impl Rng) -> Sample {
    let (_, h, w) = sample.frame.chw();
    let r = rng.random_range(min_ratio..=1.0);
    let cw = ((w as f32 * r).round() as u32).clamp(1, w as u32);
    let ch = ((h as f32 * r).round() as u32).clamp(1, h as u32);
    let x0 = rng.random_range(0..=w as u32 - cw);
    let y0 = rng.random_range(0..=h as u32 - ch);
    let win = (x0, y0, cw, ch);
    Sample {
        frame: crop_tensor(&sample.frame, win, FilterType::Triangle),
        ref_frame: crop_tensor(&sample.ref_frame, win, FilterType::Triangle),
        ref_mask: crop_tensor(&sample.ref_mask, win, FilterType::Nearest),
        gt: crop_tensor(&sample.gt, win, FilterType::Nearest),
    }
}

/// Loss trace of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub first_loss: f32,
    pub last_loss: f32,
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(DgtError::validation("training needs at least one sample"));
    }
    Ok(())
}

/// Joint training of every parameter tensor.
pub fn train_all(params: &mut NetworkParams, samples: &[Sample], lr: f32, epochs: usize, cfg: &TrainConfig, seed: u64) -> Result<TrainStats> {
    check_samples(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamWState::new();
    let opt = cfg.adamw(lr);
    let mut stats = TrainStats {
        steps: 0,
        first_loss: f32::NAN,
        last_loss: f32::NAN,
    };
    for _ in 0..epochs {
        for batch in epoch_batches(samples.len(), cfg.batch_size, &mut rng) {
            let inputs: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    if rng.random::<f32>() < cfg.crop_prob {
                        random_crop(&samples[i], cfg.crop_min, &mut rng)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let (loss, grads) = micronet::backward_with(params, &inputs, Trainable::all())?;
            if !grads.is_finite() {
                return Err(DgtError::Invariant("non-finite gradient during training".into()));
            }
            micronet::apply_update(params, &grads, &mut state, &opt, Trainable::all(), None)?;
            if stats.steps == 0 {
                stats.first_loss = loss;
            }
            stats.last_loss = loss;
            stats.steps += 1;
        }
    }
    Ok(stats)
}

/// Trains decoder blocks `start..L` with the shared body fixed. With
/// `importance`, every step is scaled by `1 - F` per coordinate.
#[allow(clippy::too_many_arguments)]
pub fn train_suffix(
    params: &mut NetworkParams,
    samples: &[Sample],
    start: usize,
    lr: f32,
    epochs: usize,
    cfg: &TrainConfig,
    importance: Option<&FisherDiag>,
    seed: u64,
) -> Result<TrainStats> {
    check_samples(samples)?;
    let factors = importance.map(FisherDiag::update_factors).transpose()?;
    let mask = match (importance, &factors) {
        (Some(f), Some(fs)) => {
            if f.scope != ParamScope::DecoderFrom(start) {
                return Err(DgtError::validation(format!("fisher scope {:?} does not match block {start}", f.scope)));
            }
            Some(f.update_mask(params, fs)?)
        }
        _ => None,
    };
    let trainable = Trainable::decoder_suffix(start);
    let plain: Vec<Tensor> = samples
        .iter()
        .map(|s| micronet::encode_context(params, &s.frame, &s.ref_frame, &s.ref_mask))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamWState::new();
    let opt = cfg.adamw(lr);
    let mut stats = TrainStats {
        steps: 0,
        first_loss: f32::NAN,
        last_loss: f32::NAN,
    };
    for _ in 0..epochs {
        for batch in epoch_batches(samples.len(), cfg.batch_size, &mut rng) {
            let mut feats = Vec::with_capacity(batch.len());
            for &i in &batch {
                if rng.random::<f32>() < cfg.crop_prob {
                    let s = random_crop(&samples[i], cfg.crop_min, &mut rng);
                    let f = micronet::encode_context(params, &s.frame, &s.ref_frame, &s.ref_mask)?;
                    feats.push((f, s.gt));
                } else {
                    feats.push((plain[i].clone(), samples[i].gt.clone()));
                }
            }
            let pairs: Vec<(&Tensor, &Tensor)> = feats.iter().map(|(f, g)| (f, g)).collect();
            let (loss, grads) = micronet::features_batch_grads(params, &pairs, start, false)?;
            if !grads.is_finite() {
                return Err(DgtError::Invariant("non-finite gradient during training".into()));
            }
            micronet::apply_update(params, &grads, &mut state, &opt, trainable, mask.as_ref())?;
            if stats.steps == 0 {
                stats.first_loss = loss;
            }
            stats.last_loss = loss;
            stats.steps += 1;
        }
    }
    Ok(stats)
}

/// Normalized importance of blocks `start..L` on the given samples.
pub fn estimate_importance(params: &NetworkParams, samples: &[Sample], start: usize, n_samples: usize, seed: u64) -> Result<FisherDiag> {
    let feats: Vec<Tensor> = samples
        .iter()
        .map(|s| micronet::encode_context(params, &s.frame, &s.ref_frame, &s.ref_mask))
        .collect::<Result<_>>()?;
    let raw = fisher::estimate_fisher_from_features(params, &feats, n_samples, start, seed)?;
    Ok(fisher::normalize(&raw))
}

/// Max-accumulates `new` into `old`, or takes `new` if there is none.
pub fn merge_importance(old: Option<&FisherDiag>, new: FisherDiag) -> Result<FisherDiag> {
    match old {
        Some(o) => fisher::accumulate(o, &new),
        None => Ok(new),
    }
}

fn object_mask(labels: &Tensor, k: usize) -> Tensor {
    let id = (k + 1) as f32;
    labels.map(|v| if v == id { 1.0 } else { 0.0 })
}

/// Mean boundary F over objects of frame `t`, segmented from the reference.
pub fn frame_score(params: &NetworkParams, video: &Video, t: usize, tolerance: usize) -> Result<f64> {
    let gts = video.masks[t]
        .as_ref()
        .ok_or_else(|| DgtError::validation(format!("frame {t} of `{}` has no label", video.id)))?;
    let pred = micronet::forward_multi_object(params, &video.frames[t], video.reference_frame(), video.reference_masks()?)?;
    let mut sum = 0.0;
    for (k, gt) in gts.iter().enumerate() {
        sum += metrics::boundary_f(&object_mask(&pred.labels, k), gt, tolerance)?;
    }
    Ok(sum / gts.len() as f64)
}

/// Node-selection score: the reference frame segmented with itself as
/// reference.
pub fn reference_score(params: &NetworkParams, video: &Video, tolerance: usize) -> Result<f64> {
    frame_score(params, video, video.reference_index, tolerance)
}

/// Mean F over labelled frames other than the reference (the reference
/// alone if nothing else is labelled).
pub fn evaluate_video(params: &NetworkParams, video: &Video, tolerance: usize) -> Result<f64> {
    let frames: Vec<usize> = video.labelled_frames().into_iter().skip(1).collect();
    if frames.is_empty() {
        return reference_score(params, video, tolerance);
    }
    let mut sum = 0.0;
    for &t in &frames {
        sum += frame_score(params, video, t, tolerance)?;
    }
    Ok(sum / frames.len() as f64)
}

pub(crate) fn tolerance_for(video: &Video) -> usize {
    let (_, h, w) = video.frames[0].chw();
    metrics::default_tolerance(h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::NetConfig;
    use crate::taskgen::{generate_domain, DomainSpec};

    fn clip() -> Video {
        generate_domain(&DomainSpec::davislike(), 1, 4).unwrap().remove(0).video
    }

    #[test]
    fn crop_keeps_masks_binary_and_shapes() {
        let v = clip();
        let s = &video_samples(&v).unwrap()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let c = random_crop(s, 0.8, &mut rng);
            assert_eq!(c.frame.shape(), s.frame.shape());
            assert!(c.gt.is_binary() && c.ref_mask.is_binary());
            assert!(c.frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let full = random_crop(s, 1.0, &mut rng);
        assert!(full.gt.bitwise_eq(&s.gt));
    }

    #[test]
    fn samples_cover_frames_and_objects() {
        let v = clip();
        let n = video_samples(&v).unwrap().len();
        assert_eq!(n, v.labelled_frames().len() * v.num_objects());
        assert_eq!(video_samples(&v.with_shots(1).unwrap()).unwrap().len(), v.num_objects());
    }

    #[test]
    fn suffix_training_leaves_prefix_alone_and_lowers_loss() {
        let v = clip();
        let samples = video_samples(&v).unwrap();
        let mut p = NetworkParams::init(&NetConfig::default(), 5).unwrap();
        let before = p.clone();
        let cfg = TrainConfig {
            crop_prob: 0.0,
            ..TrainConfig::default()
        };
        let stats = train_suffix(&mut p, &samples, 2, 3e-3, 8, &cfg, None, 1).unwrap();
        assert!(stats.last_loss < stats.first_loss, "{stats:?}");
        assert!(p.shared == before.shared);
        assert!(p.decoder[..2] == before.decoder[..2]);
        assert!(p.decoder[2] != before.decoder[2]);
    }

    #[test]
    fn full_importance_freezes_the_suffix() {
        let v = clip();
        let samples = video_samples(&v).unwrap();
        let mut p = NetworkParams::init(&NetConfig::default(), 6).unwrap();
        let ones = FisherDiag::zeros(&p, ParamScope::DecoderFrom(1));
        let ones = FisherDiag::new(ones.scope, ones.tensors.iter().map(|t| t.map(|_| 1.0)).collect(), true).unwrap();
        let before = p.clone();
        train_suffix(&mut p, &samples, 1, 1e-2, 2, &TrainConfig::default(), Some(&ones), 2).unwrap();
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn scores_are_in_unit_range() {
        let v = clip();
        let p = NetworkParams::init(&NetConfig::default(), 7).unwrap();
        let tol = tolerance_for(&v);
        for s in [reference_score(&p, &v, tol).unwrap(), evaluate_video(&p, &v, tol).unwrap()] {
            assert!((0.0..=1.0).contains(&s));
        }
    }
}
