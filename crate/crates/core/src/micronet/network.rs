//! Forward evaluation and exact reverse-mode gradients of the micro-network.
//!
//! Data flow for one object:
//!
//! ```text
//! frame ──► encoder_cur (stride-2 convs) ─────────────┐ cur
//! ref_frame, ref_mask ──► encoder_ref ──► align ──► concat ──► combiner ──► gate g
//!                                                     decoder input = cur * (1 + g)
//! decoder blocks (conv, conv, upsample x2) ──► 1x1 head ──► sigmoid
//! ```
//!
//! Reference features are gated after every pooling stage with the
//! average-pooled reference mask: `f + f * pool(mask)`.

use std::cell::Cell;

use crate::error::{DgtError, Result};
use crate::tensor::Tensor;

use super::ops::{self, ConvTrace};
use super::params::{DecoderBlock, Gradients, NetworkParams, ParamGroup, SharedParams, Trainable};

/// Clamp applied to probabilities inside the cross-entropy.
pub const BCE_EPS: f32 = 1e-7;

thread_local! {
    static ENCODER_PASSES: Cell<usize> = const { Cell::new(0) };
    static DECODER_PASSES: Cell<usize> = const { Cell::new(0) };
}

/// Per-thread counts of current-frame encoder and decoder evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCounts {
    pub encoder: usize,
    pub decoder: usize,
}

pub fn pass_counts() -> PassCounts {
    PassCounts {
        encoder: ENCODER_PASSES.with(Cell::get),
        decoder: DECODER_PASSES.with(Cell::get),
    }
}

pub fn reset_pass_counts() {
    ENCODER_PASSES.with(|c| c.set(0));
    DECODER_PASSES.with(|c| c.set(0));
}

fn bump(counter: &'static std::thread::LocalKey<Cell<usize>>) {
    counter.with(|c| c.set(c.get() + 1));
}

/// One supervised example: predict `gt` on `frame` given the labelled
/// reference frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frame: Tensor,
    pub ref_frame: Tensor,
    pub ref_mask: Tensor,
    pub gt: Tensor,
}

struct ConvAct {
    trace: ConvTrace,
    out: Tensor,
}

fn conv_relu(layer: &super::params::ConvLayer, x: &Tensor) -> ConvAct {
    let (mut out, trace) = ops::conv_forward(layer, x);
    ops::relu_inplace(&mut out);
    ConvAct { trace, out }
}

struct RefBlock {
    c1: ConvAct,
    c2: ConvAct,
    pool_arg: Vec<u32>,
    gate: Tensor,
}

struct ExtraPool {
    arg: Vec<u32>,
    in_shape: (usize, usize, usize),
}

struct RefTrace {
    blocks: Vec<RefBlock>,
    extra: Vec<ExtraPool>,
    align: ConvAct,
}

struct CombineTrace {
    cur: Tensor,
    c1: ConvAct,
    c2_trace: ConvTrace,
    gate: Tensor,
}

struct BlockTrace {
    c1: ConvAct,
    c2: ConvAct,
}

struct DecodeTrace {
    blocks: Vec<BlockTrace>,
    head: ConvTrace,
}

fn encode_current(shared: &SharedParams, frame: &Tensor) -> (Tensor, Vec<ConvAct>) {
    bump(&ENCODER_PASSES);
    let mut acts: Vec<ConvAct> = Vec::with_capacity(shared.encoder_cur.len());
    for layer in &shared.encoder_cur {
        let input = acts.last().map_or(frame, |a| &a.out);
        let act = conv_relu(layer, input);
        acts.push(act);
    }
    (acts.last().expect("encoder has stages").out.clone(), acts)
}

fn encode_reference(shared: &SharedParams, ref_frame: &Tensor, ref_mask: &Tensor, target_hw: (usize, usize)) -> (Tensor, RefTrace) {
    let n_blocks = (shared.encoder_ref.len() - 1) / 2;
    let mut x = ref_frame.clone();
    let mut mask = ref_mask.clone();
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let c1 = conv_relu(&shared.encoder_ref[2 * b], &x);
        let c2 = conv_relu(&shared.encoder_ref[2 * b + 1], &c1.out);
        let (mut pooled, pool_arg) = ops::max_pool2(&c2.out);
        mask = ops::avg_pool2(&mask);
        ops::gate_with_mask(&mut pooled, &mask);
        blocks.push(RefBlock {
            c1,
            c2,
            pool_arg,
            gate: mask.clone(),
        });
        x = pooled;
    }
    let mut extra = Vec::new();
    while x.chw().1 > target_hw.0 {
        let in_shape = x.chw();
        let (p, arg) = ops::max_pool2(&x);
        extra.push(ExtraPool { arg, in_shape });
        x = p;
    }
    let align = conv_relu(shared.encoder_ref.last().expect("alignment conv"), &x);
    (align.out.clone(), RefTrace { blocks, extra, align })
}

fn combine(shared: &SharedParams, cur: &Tensor, reference: &Tensor) -> (Tensor, CombineTrace) {
    let cat = ops::concat_channels(cur, reference);
    let c1 = conv_relu(&shared.combiner[0], &cat);
    let (gate, c2_trace) = ops::conv_forward(&shared.combiner[1], &c1.out);
    let mut out = cur.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(gate.data()) {
        *o += *o * g;
    }
    (
        out,
        CombineTrace {
            cur: cur.clone(),
            c1,
            c2_trace,
            gate,
        },
    )
}

fn decode_traced(decoder: &[DecoderBlock], head: &super::params::ConvLayer, x: &Tensor) -> (Tensor, DecodeTrace) {
    bump(&DECODER_PASSES);
    let mut blocks: Vec<BlockTrace> = Vec::with_capacity(decoder.len());
    let mut up = x.clone();
    for block in decoder {
        let c1 = conv_relu(&block.conv1, &up);
        let c2 = conv_relu(&block.conv2, &c1.out);
        up = ops::upsample2(&c2.out);
        blocks.push(BlockTrace { c1, c2 });
    }
    let (mut logits, head_trace) = ops::conv_forward(head, &up);
    logits.data_mut().iter_mut().for_each(|v| *v = ops::sigmoid(*v));
    (logits, DecodeTrace { blocks, head: head_trace })
}

fn check_inputs(params: &NetworkParams, frame: &Tensor, ref_frame: &Tensor) -> Result<()> {
    let cfg = &params.config;
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DgtError::dimension("frame", "3xHxW", frame.shape_string()));
    }
    let f = cfg.downsample();
    if !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
        return Err(DgtError::dimension(
            "frame",
            format!("spatial size divisible by {f}"),
            frame.shape_string(),
        ));
    }
    ref_frame.expect_shape("ref_frame", s)?;
    Ok(())
}

fn check_mask(name: &str, mask: &Tensor, frame: &Tensor) -> Result<()> {
    let (_, h, w) = frame.chw();
    mask.expect_shape(name, &[1, h, w])?;
    if !mask.is_binary() {
        return Err(DgtError::validation(format!("`{name}` must be binary (values 0 or 1)")));
    }
    Ok(())
}

/// Decoder input features for one object: encoders plus combining module.
pub fn encode_context(params: &NetworkParams, frame: &Tensor, ref_frame: &Tensor, ref_mask: &Tensor) -> Result<Tensor> {
    check_inputs(params, frame, ref_frame)?;
    check_mask("ref_mask", ref_mask, frame)?;
    let (cur, _) = encode_current(&params.shared, frame);
    Ok(context_from_current(params, &cur, ref_frame, ref_mask))
}

fn context_from_current(params: &NetworkParams, cur: &Tensor, ref_frame: &Tensor, ref_mask: &Tensor) -> Tensor {
    let (_, h, w) = cur.chw();
    let (reference, _) = encode_reference(&params.shared, ref_frame, ref_mask, (h, w));
    combine(&params.shared, cur, &reference).0
}

/// Mask probabilities from precomputed decoder input features.
pub fn decode(params: &NetworkParams, features: &Tensor) -> Tensor {
    decode_traced(&params.decoder, &params.shared.head, features).0
}

/// Per-pixel foreground probabilities, shape `1 x H x W`, values in (0, 1).
pub fn forward_segment(params: &NetworkParams, frame: &Tensor, ref_frame: &Tensor, ref_mask: &Tensor) -> Result<Tensor> {
    let features = encode_context(params, frame, ref_frame, ref_mask)?;
    let probs = decode(params, &features);
    probs.ensure_finite("forward_segment output")?;
    Ok(probs)
}

/// Output of [`forward_multi_object`].
#[derive(Debug, Clone)]
pub struct MultiObjectPrediction {
    /// `1 x H x W` label map; 0 is background, `k` is object `k` (1-based).
    pub labels: Tensor,
    pub probs: Vec<Tensor>,
}

/// Label map for several objects; the current frame is encoded once and the
/// decoder runs once per reference mask.
pub fn forward_multi_object(
    params: &NetworkParams,
    frame: &Tensor,
    ref_frame: &Tensor,
    ref_masks: &[Tensor],
) -> Result<MultiObjectPrediction> {
    check_inputs(params, frame, ref_frame)?;
    if ref_masks.is_empty() {
        return Err(DgtError::validation("at least one reference mask is required"));
    }
    for (i, m) in ref_masks.iter().enumerate() {
        check_mask(&format!("ref_masks[{i}]"), m, frame)?;
    }
    let (_, h, w) = frame.chw();
    for px in 0..h * w {
        if ref_masks.iter().filter(|m| m.data()[px] > 0.0).count() > 1 {
            return Err(DgtError::validation(format!("reference masks overlap at pixel {px}")));
        }
    }
    let (cur, _) = encode_current(&params.shared, frame);
    let probs: Vec<Tensor> = ref_masks
        .iter()
        .map(|m| decode(params, &context_from_current(params, &cur, ref_frame, m)))
        .collect();
    Ok(MultiObjectPrediction {
        labels: combine_object_probs(&probs),
        probs,
    })
}

/// Per pixel: 1-based argmax over objects if its probability is >= 0.5,
/// else background. Ties go to the lower object index.
pub fn combine_object_probs(probs: &[Tensor]) -> Tensor {
    let n = probs[0].len();
    let mut labels = Tensor::zeros(probs[0].shape());
    for px in 0..n {
        let mut best = 0usize;
        let mut best_p = f32::NEG_INFINITY;
        for (k, p) in probs.iter().enumerate() {
            if p.data()[px] > best_p {
                best_p = p.data()[px];
                best = k;
            }
        }
        if best_p >= 0.5 {
            labels.data_mut()[px] = (best + 1) as f32;
        }
    }
    labels
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<f32> {
    gt.expect_shape("gt", pred.shape())?;
    Ok(bce_and_logit_grad(pred, gt, false).0)
}

fn bce_and_logit_grad(pred: &Tensor, gt: &Tensor, want_grad: bool) -> (f32, Option<Tensor>) {
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = want_grad.then(|| Tensor::zeros(pred.shape()));
    for (i, (&p, &y)) in pred.data().iter().zip(gt.data()).enumerate() {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
        let y64 = y as f64;
        loss -= y64 * pc.ln() + (1.0 - y64) * (1.0 - pc).ln();
        if let Some(g) = grad.as_mut() {
            if p > BCE_EPS && p < 1.0 - BCE_EPS {
                g.data_mut()[i] = ((p as f64 - y64) / n) as f32;
            }
        }
    }
    ((loss / n) as f32, grad)
}

/// Gradient slots in canonical order, mirroring `NetworkParams::tensors`.
struct GradSlots {
    enc_cur: usize,
    enc_ref: usize,
    combiner: usize,
    decoder: usize,
    head: usize,
}

impl GradSlots {
    fn new(params: &NetworkParams) -> Self {
        let s = &params.shared;
        let enc_cur = 0;
        let enc_ref = enc_cur + 2 * s.encoder_cur.len();
        let combiner = enc_ref + 2 * s.encoder_ref.len();
        let decoder = combiner + 2 * s.combiner.len();
        let head = decoder + 4 * params.decoder.len();
        Self {
            enc_cur,
            enc_ref,
            combiner,
            decoder,
            head,
        }
    }
}

fn put(grads: &mut Gradients, slot: usize, gw: Tensor, gb: Tensor) {
    grads.tensors[slot] = gw;
    grads.tensors[slot + 1] = gb;
}

/// Backpropagates `dlogits` through head and decoder. Returns the gradient
/// with respect to the decoder input when `need_input` is set.
fn decoder_backward(
    params: &NetworkParams,
    trace: &DecodeTrace,
    dprobs_logit: &Tensor,
    trainable: Trainable,
    need_input: bool,
    grads: &mut Gradients,
    slots: &GradSlots,
) -> Option<Tensor> {
    let l = params.decoder.len();
    let stop = if need_input { 0 } else { trainable.decoder_from.min(l) };
    let need_head_input = stop < l || need_input;
    let (g_up, gw, gb) = ops::conv_backward(&params.shared.head, &trace.head, dprobs_logit, need_head_input);
    if trainable.allows(ParamGroup::Head) {
        put(grads, slots.head, gw, gb);
    }
    let mut g = g_up?;
    for b in (stop..l).rev() {
        let block = &params.decoder[b];
        let bt = &trace.blocks[b];
        let mut g2 = ops::upsample2_backward(&g);
        ops::relu_backward(&mut g2, &bt.c2.out);
        let (g1, gw2, gb2) = ops::conv_backward(&block.conv2, &bt.c2.trace, &g2, true);
        let mut g1 = g1.expect("requested");
        ops::relu_backward(&mut g1, &bt.c1.out);
        let need_prev = b > stop || need_input;
        let (g0, gw1, gb1) = ops::conv_backward(&block.conv1, &bt.c1.trace, &g1, need_prev);
        if trainable.allows(ParamGroup::Decoder(b)) {
            let base = slots.decoder + 4 * b;
            put(grads, base, gw1, gb1);
            put(grads, base + 2, gw2, gb2);
        }
        {
            let t = g0?;
            g = t
        }
    }
    need_input.then_some(g)
}

/// Loss and gradients for one sample, restricted to `trainable` tensors
/// (all other gradient slots stay zero).
pub fn sample_loss_and_grads(params: &NetworkParams, sample: &Sample, trainable: Trainable) -> Result<(f32, Gradients)> {
    check_inputs(params, &sample.frame, &sample.ref_frame)?;
    check_mask("ref_mask", &sample.ref_mask, &sample.frame)?;
    let (_, h, w) = sample.frame.chw();
    sample.gt.expect_shape("gt", &[1, h, w])?;

    let shared = &params.shared;
    let slots = GradSlots::new(params);
    let mut grads = params.zeros_like();

    let (cur, cur_acts) = encode_current(shared, &sample.frame);
    let (_, ch, cw) = cur.chw();
    let (reference, ref_trace) = encode_reference(shared, &sample.ref_frame, &sample.ref_mask, (ch, cw));
    let (x, comb) = combine(shared, &cur, &reference);
    let (probs, dec) = decode_traced(&params.decoder, &shared.head, &x);
    let (loss, dlogit) = bce_and_logit_grad(&probs, &sample.gt, true);
    let dlogit = dlogit.expect("requested");

    let body = trainable.any_shared_body();
    let gx = decoder_backward(params, &dec, &dlogit, trainable, body, &mut grads, &slots);
    let Some(gx) = gx else {
        return Ok((loss, grads));
    };

    // combiner: out = cur * (1 + gate)
    let mut g_cur = gx.clone();
    for (gc, &gt) in g_cur.data_mut().iter_mut().zip(comb.gate.data()) {
        *gc *= 1.0 + gt;
    }
    let mut g_gate = gx;
    for (gg, &c) in g_gate.data_mut().iter_mut().zip(comb.cur.data()) {
        *gg *= c;
    }
    let (g_h, gw, gb) = ops::conv_backward(&shared.combiner[1], &comb.c2_trace, &g_gate, true);
    if trainable.combiner {
        put(&mut grads, slots.combiner + 2, gw, gb);
    }
    let mut g_h = g_h.expect("requested");
    ops::relu_backward(&mut g_h, &comb.c1.out);
    let (g_cat, gw, gb) = ops::conv_backward(&shared.combiner[0], &comb.c1.trace, &g_h, trainable.encoders);
    if trainable.combiner {
        put(&mut grads, slots.combiner, gw, gb);
    }
    let Some(g_cat) = g_cat else {
        return Ok((loss, grads));
    };
    let (g_cur_from_cat, g_ref) = ops::split_channels(&g_cat, cur.chw().0);
    g_cur.add_scaled(&g_cur_from_cat, 1.0);

    // reference encoder
    let n_ref = shared.encoder_ref.len();
    let mut g = g_ref;
    ops::relu_backward(&mut g, &ref_trace.align.out);
    let (gi, gw, gb) = ops::conv_backward(&shared.encoder_ref[n_ref - 1], &ref_trace.align.trace, &g, true);
    put(&mut grads, slots.enc_ref + 2 * (n_ref - 1), gw, gb);
    g = gi.expect("requested");
    for pool in ref_trace.extra.iter().rev() {
        g = ops::max_pool2_backward(&g, &pool.arg, pool.in_shape);
    }
    for (b, blk) in ref_trace.blocks.iter().enumerate().rev() {
        ops::gate_with_mask(&mut g, &blk.gate);
        g = ops::max_pool2_backward(&g, &blk.pool_arg, blk.c2.out.chw());
        ops::relu_backward(&mut g, &blk.c2.out);
        let (gi, gw, gb) = ops::conv_backward(&shared.encoder_ref[2 * b + 1], &blk.c2.trace, &g, true);
        put(&mut grads, slots.enc_ref + 2 * (2 * b + 1), gw, gb);
        g = gi.expect("requested");
        ops::relu_backward(&mut g, &blk.c1.out);
        let (gi, gw, gb) = ops::conv_backward(&shared.encoder_ref[2 * b], &blk.c1.trace, &g, b > 0);
        put(&mut grads, slots.enc_ref + 2 * (2 * b), gw, gb);
        if let Some(t) = gi {
            g = t;
        }
    }

    // current-frame encoder
    let mut g = g_cur;
    for (i, act) in cur_acts.iter().enumerate().rev() {
        ops::relu_backward(&mut g, &act.out);
        let (gi, gw, gb) = ops::conv_backward(&shared.encoder_cur[i], &act.trace, &g, i > 0);
        put(&mut grads, slots.enc_cur + 2 * i, gw, gb);
        if let Some(t) = gi {
            g = t;
        }
    }
    Ok((loss, grads))
}

/// Loss and decoder-suffix gradients from cached decoder input features.
/// Only blocks `>= decoder_from` (and the head, if `head` is set) receive
/// gradients.
pub fn features_loss_and_grads(
    params: &NetworkParams,
    features: &Tensor,
    gt: &Tensor,
    decoder_from: usize,
    head: bool,
) -> (f32, Gradients) {
    let slots = GradSlots::new(params);
    let mut grads = params.zeros_like();
    let (probs, dec) = decode_traced(&params.decoder, &params.shared.head, features);
    let (loss, dlogit) = bce_and_logit_grad(&probs, gt, true);
    let trainable = Trainable {
        head,
        ..Trainable::decoder_suffix(decoder_from)
    };
    decoder_backward(params, &dec, &dlogit.expect("requested"), trainable, false, &mut grads, &slots);
    (loss, grads)
}

/// Batch mean of [`features_loss_and_grads`] over `(features, gt)` pairs.
pub fn features_batch_grads(
    params: &NetworkParams,
    batch: &[(&Tensor, &Tensor)],
    decoder_from: usize,
    head: bool,
) -> Result<(f32, Gradients)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(DgtError::validation("backward needs a non-empty batch"));
    }
    let per_sample: Vec<(f32, Gradients)> = batch
        .par_iter()
        .map(|(f, gt)| features_loss_and_grads(params, f, gt, decoder_from, head))
        .collect();
    Ok(mean_of(per_sample))
}

/// Batch-mean loss and gradients of every parameter tensor.
pub fn backward(params: &NetworkParams, batch: &[Sample]) -> Result<(f32, Gradients)> {
    backward_with(params, batch, Trainable::all())
}

pub fn backward_with(params: &NetworkParams, batch: &[Sample], trainable: Trainable) -> Result<(f32, Gradients)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(DgtError::validation("backward needs a non-empty batch"));
    }
    let shape = batch[0].frame.shape();
    if let Some(bad) = batch.iter().position(|s| s.frame.shape() != shape) {
        return Err(DgtError::dimension(format!("batch[{bad}].frame"), batch[0].frame.shape_string(), batch[bad].frame.shape_string()));
    }
    let per_sample: Vec<(f32, Gradients)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(params, s, trainable))
        .collect::<Result<_>>()?;
    Ok(mean_of(per_sample))
}

/// Averages per-sample results in their original order.
fn mean_of(per_sample: Vec<(f32, Gradients)>) -> (f32, Gradients) {
    let n = per_sample.len();
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    let mut loss64 = loss as f64;
    for (l, g) in iter {
        loss64 += l as f64;
        grads.add_assign(&g);
    }
    loss = (loss64 / n as f64) as f32;
    grads.scale(1.0 / n as f32);
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::params::NetConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(seed: u64, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = Tensor::from_fn(&[3, h, w], |_| rng.random());
        let ref_frame = Tensor::from_fn(&[3, h, w], |_| rng.random());
        let mask = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            if (y as isize - h as isize / 2).abs() < 8 && (x as isize - w as isize / 2).abs() < 10 {
                1.0
            } else {
                0.0
            }
        });
        (frame, ref_frame, mask)
    }

    #[test]
    fn output_shape_and_range() {
        let p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        let (f, r, m) = inputs(0, 48, 64);
        let out = forward_segment(&p, &f, &r, &m).unwrap();
        assert_eq!(out.shape(), &[1, 48, 64]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn resolution_contract_for_other_sizes() {
        let p = NetworkParams::init(&NetConfig::default(), 1).unwrap();
        for (h, w) in [(16, 16), (32, 48), (64, 32)] {
            let (f, r, m) = inputs(2, h, w);
            assert_eq!(forward_segment(&p, &f, &r, &m).unwrap().shape(), &[1, h, w]);
        }
        let (f, r, _) = inputs(2, 40, 64);
        let m = Tensor::zeros(&[1, 40, 64]);
        assert!(matches!(forward_segment(&p, &f, &r, &m), Err(DgtError::Dimension { .. })));
    }

    #[test]
    fn shape_errors_name_the_tensor() {
        let p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        let (f, _, m) = inputs(0, 48, 64);
        let bad_ref = Tensor::zeros(&[3, 32, 64]);
        match forward_segment(&p, &f, &bad_ref, &m) {
            Err(DgtError::Dimension { tensor, .. }) => assert_eq!(tensor, "ref_frame"),
            other => panic!("unexpected {other:?}"),
        }
        let mut soft = m.clone();
        soft.data_mut()[0] = 0.5;
        assert!(matches!(forward_segment(&p, &f, &f, &soft), Err(DgtError::Validation(_))));
    }

    #[test]
    fn zero_mask_gating_is_identity() {
        let p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        let (_, r, _) = inputs(4, 48, 64);
        let zero = Tensor::zeros(&[1, 48, 64]);
        let (gated, trace) = encode_reference(&p.shared, &r, &zero, (3, 4));
        assert!(trace.blocks.iter().all(|b| b.gate.data().iter().all(|&g| g == 0.0)));
        // Recompute without any gating.
        let mut x = r.clone();
        for b in 0..3 {
            let c1 = conv_relu(&p.shared.encoder_ref[2 * b], &x);
            let c2 = conv_relu(&p.shared.encoder_ref[2 * b + 1], &c1.out);
            x = ops::max_pool2(&c2.out).0;
        }
        x = ops::max_pool2(&x).0;
        let plain = conv_relu(&p.shared.encoder_ref[6], &x).out;
        assert!(gated.bitwise_eq(&plain));
    }

    #[test]
    fn zero_combiner_gate_passes_current_features() {
        let mut p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        p.shared.combiner[1].weight.fill(0.0);
        p.shared.combiner[1].bias.fill(0.0);
        let (f, r, m) = inputs(5, 48, 64);
        let (cur, _) = encode_current(&p.shared, &f);
        let (reference, _) = encode_reference(&p.shared, &r, &m, (3, 4));
        let (out, _) = combine(&p.shared, &cur, &reference);
        assert!(out.bitwise_eq(&cur));
    }

    #[test]
    fn zero_head_gives_ln2() {
        let mut p = NetworkParams::init(&NetConfig::default(), 3).unwrap();
        p.shared.head.weight.fill(0.0);
        p.shared.head.bias.fill(0.0);
        let (f, r, m) = inputs(6, 48, 64);
        let s = Sample {
            frame: f,
            ref_frame: r,
            ref_mask: m.clone(),
            gt: m,
        };
        let (loss, _) = backward(&p, &[s]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_examples() {
        let half = Tensor::full(&[1, 2, 2], 0.5);
        let gt = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((bce_loss(&half, &gt).unwrap() - std::f32::consts::LN_2).abs() < 1e-5);
        let perfect = gt.clone();
        let l = bce_loss(&perfect, &gt).unwrap();
        assert!(l > 0.0 && (l - 1e-7).abs() < 5e-8, "{l}");
        let pred = Tensor::new(vec![2], vec![0.9, 0.2]).unwrap();
        let gt = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((bce_loss(&pred, &gt).unwrap() as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.1643).abs() < 1e-4);
        assert!(bce_loss(&pred, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        assert!(matches!(backward(&p, &[]), Err(DgtError::Validation(_))));
    }

    #[test]
    fn duplicated_sample_gives_same_gradients() {
        let p = NetworkParams::init(&NetConfig::default(), 7).unwrap();
        let (f, r, m) = inputs(8, 48, 64);
        let s = Sample {
            frame: f,
            ref_frame: r,
            ref_mask: m.clone(),
            gt: m,
        };
        let (l1, g1) = backward(&p, std::slice::from_ref(&s)).unwrap();
        let (l2, g2) = backward(&p, &[s.clone(), s]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        let (f, r, m) = inputs(0, 48, 64);
        let a = forward_segment(&p, &f, &r, &m).unwrap();
        let b = forward_segment(&p, &f, &r, &m).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn multi_object_reuses_encoder() {
        let p = NetworkParams::init(&NetConfig::default(), 0).unwrap();
        let (f, r, _) = inputs(1, 48, 64);
        let masks: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(&[1, 48, 64], |i| if (i % 64) / 20 == k { 1.0 } else { 0.0 }))
            .collect();
        reset_pass_counts();
        let out = forward_multi_object(&p, &f, &r, &masks).unwrap();
        assert_eq!(pass_counts(), PassCounts { encoder: 1, decoder: 3 });
        assert!(out.labels.data().iter().all(|&v| (0.0..=3.0).contains(&v) && v.fract() == 0.0));

        let single = forward_multi_object(&p, &f, &r, &masks[..1]).unwrap();
        let direct = forward_segment(&p, &f, &r, &masks[0]).unwrap().threshold(0.5);
        assert!(single.labels.bitwise_eq(&direct));

        let overlapping = vec![masks[0].clone(), masks[0].clone()];
        assert!(matches!(forward_multi_object(&p, &f, &r, &overlapping), Err(DgtError::Validation(_))));
    }

    #[test]
    fn label_combination_rule() {
        let a = Tensor::new(vec![1, 1, 3], vec![0.9, 0.3, 0.6]).unwrap();
        let b = Tensor::new(vec![1, 1, 3], vec![0.7, 0.4, 0.8]).unwrap();
        let labels = combine_object_probs(&[a, b]);
        assert_eq!(labels.data(), &[1.0, 0.0, 2.0]);
    }
}
