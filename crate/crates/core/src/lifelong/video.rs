use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::tensor::Tensor;

/// A labelled clip. `masks[t]` is `None` for unlabelled frames, otherwise
/// one binary `1 x H x W` mask per object (same object order on every frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub frames: Vec<Tensor>,
    pub masks: Vec<Option<Vec<Tensor>>>,
    pub reference_index: usize,
    pub domain_tag: String,
}

impl Video {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(DgtError::validation(format!("video `{}` needs at least 2 frames", self.id)));
        }
        if self.masks.len() != self.frames.len() {
            return Err(DgtError::dimension(
                format!("{}.masks", self.id),
                self.frames.len(),
                self.masks.len(),
            ));
        }
        let shape = self.frames[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(DgtError::dimension(format!("{}.frames[0]", self.id), "3xHxW", self.frames[0].shape_string()));
        }
        let mask_shape = [1, shape[1], shape[2]];
        let mut objects = None;
        for (t, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            f.expect_shape(&format!("{}.frames[{t}]", self.id), &shape)?;
            if let Some(m) = m {
                if m.is_empty() {
                    return Err(DgtError::validation(format!("video `{}` frame {t} has an empty object list", self.id)));
                }
                if *objects.get_or_insert(m.len()) != m.len() {
                    return Err(DgtError::validation(format!("video `{}` changes object count at frame {t}", self.id)));
                }
                for (k, mk) in m.iter().enumerate() {
                    mk.expect_shape(&format!("{}.masks[{t}][{k}]", self.id), &mask_shape)?;
                    if !mk.is_binary() {
                        return Err(DgtError::validation(format!("mask {k} of frame {t} in `{}` is not binary", self.id)));
                    }
                }
            }
        }
        self.reference_masks()?;
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_objects(&self) -> usize {
        self.masks.iter().flatten().next().map_or(0, Vec::len)
    }

    pub fn reference_frame(&self) -> &Tensor {
        &self.frames[self.reference_index]
    }

    pub fn reference_masks(&self) -> Result<&[Tensor]> {
        self.masks
            .get(self.reference_index)
            .and_then(|m| m.as_deref())
            .ok_or_else(|| DgtError::validation(format!("video `{}` has no mask on its reference frame", self.id)))
    }

    /// Indices of labelled frames, reference frame first.
    pub fn labelled_frames(&self) -> Vec<usize> {
        let mut out = vec![self.reference_index];
        out.extend((0..self.frames.len()).filter(|&t| t != self.reference_index && self.masks[t].is_some()));
        out
    }

    /// Copy keeping only the first `shots` labelled frames' masks.
    pub fn with_shots(&self, shots: usize) -> Result<Video> {
        let labelled = self.labelled_frames();
        if shots == 0 || shots > labelled.len() {
            return Err(DgtError::validation(format!(
                "video `{}` has {} labelled frames, {shots} requested",
                self.id,
                labelled.len()
            )));
        }
        let keep = &labelled[..shots];
        let mut v = self.clone();
        for (t, m) in v.masks.iter_mut().enumerate() {
            if !keep.contains(&t) {
                *m = None;
            }
        }
        Ok(v)
    }

    /// Label map of frame `t` (0 background, k for object k).
    pub fn label_map(&self, t: usize) -> Option<Tensor> {
        let masks = self.masks[t].as_ref()?;
        let mut out = Tensor::zeros(masks[0].shape());
        for (k, m) in masks.iter().enumerate() {
            for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
                if v > 0.0 {
                    *o = (k + 1) as f32;
                }
            }
        }
        Some(out)
    }
}

/// Records which video's data may be touched; reads of any other video are
/// logged as violations.
#[derive(Debug, Default)]
pub struct AccessGuard {
    current: RefCell<Option<String>>,
    violations: RefCell<Vec<String>>,
    reads: RefCell<usize>,
}

impl AccessGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&self, video: &str) {
        *self.current.borrow_mut() = Some(video.to_string());
    }

    pub fn leave(&self) {
        *self.current.borrow_mut() = None;
    }

    /// Hands out `video` if it is the one currently open.
    pub fn read<'a>(&self, video: &'a Video) -> &'a Video {
        *self.reads.borrow_mut() += 1;
        if self.current.borrow().as_deref() != Some(video.id.as_str()) {
            self.violations.borrow_mut().push(video.id.clone());
        }
        video
    }

    pub fn violations(&self) -> Vec<String> {
        self.violations.borrow().clone()
    }

    pub fn reads(&self) -> usize {
        *self.reads.borrow()
    }
}
