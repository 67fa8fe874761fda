//! Micro encoder/decoder segmentation network with hand-written gradients.

mod network;
mod ops;
mod optim;
mod params;

pub use network::{
    backward, backward_with, bce_loss, combine_object_probs, decode, encode_context, features_batch_grads, features_loss_and_grads,
    forward_multi_object, forward_segment, pass_counts, reset_pass_counts, sample_loss_and_grads, MultiObjectPrediction,
    PassCounts, Sample, BCE_EPS,
};
pub use optim::{apply_update, AdamWConfig, AdamWState, UpdateMask};
pub use params::{
    ConvLayer, DecoderBlock, Gradients, NetConfig, NetworkParams, ParamGroup, ParamScope, SharedParams, Trainable,
};

use crate::error::{DgtError, Result};

/// Replaces decoder blocks `[start_index, L)` with deep copies of `blocks`.
pub fn swap_decoder_blocks(params: &mut NetworkParams, blocks: &[DecoderBlock], start_index: usize) -> Result<()> {
    let l = params.num_blocks();
    if blocks.is_empty() || start_index + blocks.len() != l {
        return Err(DgtError::validation(format!(
            "decoder blocks must form a suffix ending at block {}; got {} blocks from {start_index}",
            l - 1,
            blocks.len()
        )));
    }
    for (offset, block) in blocks.iter().enumerate() {
        let target = start_index + offset;
        if block.index != target {
            return Err(DgtError::validation(format!(
                "block with index {} cannot replace decoder block {target}",
                block.index
            )));
        }
        let current = &params.decoder[target];
        for (a, b) in current.tensors().iter().zip(block.tensors()) {
            b.expect_shape(&format!("decoder.{target}"), a.shape())?;
        }
    }
    for (offset, block) in blocks.iter().enumerate() {
        params.decoder[start_index + offset] = block.clone();
    }
    Ok(())
}
