//! Diagonal Fisher information and the importance-weighted update
//! `phi <- phi - lr * (1 - F) * grad`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::micronet::{self, Gradients, NetworkParams, ParamScope, Sample, Trainable, UpdateMask};
use crate::tensor::Tensor;

/// Non-negative per-parameter importance over the tensors selected by
/// `scope` (canonical order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub scope: ParamScope,
    pub tensors: Vec<Tensor>,
    pub normalized: bool,
}

impl FisherDiag {
    pub fn new(scope: ParamScope, tensors: Vec<Tensor>, normalized: bool) -> Result<Self> {
        if tensors.iter().any(|t| t.data().iter().any(|&v| !v.is_finite() || v < 0.0)) {
            return Err(DgtError::validation("fisher entries must be finite and non-negative"));
        }
        if normalized && tensors.iter().any(|t| t.data().iter().any(|&v| v > 1.0)) {
            return Err(DgtError::validation("normalized fisher entries must lie in [0, 1]"));
        }
        Ok(Self {
            scope,
            tensors,
            normalized,
        })
    }

    /// All-zero importance (full plasticity) shaped like `scope` of `params`.
    pub fn zeros(params: &NetworkParams, scope: ParamScope) -> Self {
        let all = params.tensors();
        Self {
            scope,
            tensors: all[params.scope_range(scope)].iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            normalized: true,
        }
    }

    pub fn num_entries(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn check_against(&self, params: &NetworkParams) -> Result<std::ops::Range<usize>> {
        let range = params.scope_range(self.scope);
        let all = params.named_tensors();
        if range.len() != self.tensors.len() {
            return Err(DgtError::dimension("fisher", format!("{} tensors", range.len()), self.tensors.len()));
        }
        for ((name, p), f) in all[range.clone()].iter().zip(&self.tensors) {
            f.expect_shape(name, p.shape())?;
        }
        Ok(range)
    }

    /// `1 - F` per coordinate, for masking optimizer deltas.
    pub fn update_factors(&self) -> Result<Vec<Tensor>> {
        if !self.normalized {
            return Err(DgtError::validation("update weighting needs a normalized fisher"));
        }
        Ok(self.tensors.iter().map(|t| t.map(|f| 1.0 - f)).collect())
    }

    pub fn update_mask<'a>(&self, params: &NetworkParams, factors: &'a [Tensor]) -> Result<UpdateMask<'a>> {
        let range = self.check_against(params)?;
        Ok(UpdateMask {
            start: range.start,
            factors,
        })
    }
}

fn content_seed(seed: u64, tensors: &[&Tensor]) -> u64 {
    // FNV-1a over the bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for t in tensors {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

fn sample_labels(probs: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    probs.map(|p| if rng.random::<f32>() < p { 1.0 } else { 0.0 })
}

struct Accumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl Accumulator {
    fn new(params: &NetworkParams, range: &std::ops::Range<usize>) -> Self {
        let all = params.tensors();
        Self {
            sums: all[range.clone()].iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            count: 0,
        }
    }

    /// Adds the squared log-likelihood gradient. `grads` is the gradient of the
    /// pixel-mean cross-entropy against sampled labels, i.e. `-grad(log P) / n`.
    fn add(&mut self, grads: &Gradients, range: &std::ops::Range<usize>, n_pixels: usize) {
        let scale = n_pixels as f64;
        for (acc, g) in self.sums.iter_mut().zip(&grads.tensors[range.clone()]) {
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                let d = v as f64 * scale;
                *a += d * d;
            }
        }
        self.count += 1;
    }

    fn finish(self, params: &NetworkParams, scope: ParamScope, range: &std::ops::Range<usize>) -> FisherDiag {
        let all = params.tensors();
        let n = self.count.max(1) as f64;
        let tensors = all[range.clone()]
            .iter()
            .zip(self.sums)
            .map(|((_, t), s)| Tensor::from_raw(t.shape().to_vec(), s.into_iter().map(|v| (v / n) as f32).collect()))
            .collect();
        FisherDiag {
            scope,
            tensors,
            normalized: false,
        }
    }
}

fn trainable_for(scope: ParamScope) -> Trainable {
    match scope {
        ParamScope::All => Trainable::all(),
        ParamScope::DecoderFrom(d) => Trainable::decoder_suffix(d),
    }
}

/// Monte-Carlo diagonal Fisher of the pixelwise Bernoulli output model,
/// averaged over inputs and `n_samples` label draws per input. Draws are
/// seeded from the input content, so repeated inputs contribute identically.
pub fn estimate_fisher(
    params: &NetworkParams,
    inputs: &[Sample],
    n_samples: usize,
    scope: ParamScope,
    seed: u64,
) -> Result<FisherDiag> {
    if inputs.is_empty() {
        return Err(DgtError::validation("fisher estimation needs at least one input"));
    }
    if n_samples == 0 {
        return Err(DgtError::validation("n_samples must be >= 1"));
    }
    let range = params.scope_range(scope);
    let trainable = trainable_for(scope);
    let mut acc = Accumulator::new(params, &range);
    for s in inputs {
        let probs = micronet::forward_segment(params, &s.frame, &s.ref_frame, &s.ref_mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(content_seed(seed, &[&s.frame, &s.ref_frame, &s.ref_mask]));
        for _ in 0..n_samples {
            let y = sample_labels(&probs, &mut rng);
            let drawn = Sample {
                gt: y,
                ..s.clone()
            };
            let (_, g) = micronet::sample_loss_and_grads(params, &drawn, trainable)?;
            acc.add(&g, &range, probs.len());
        }
    }
    Ok(acc.finish(params, scope, &range))
}

/// Same estimate for decoder blocks `>= start`, from cached decoder inputs.
pub fn estimate_fisher_from_features(
    params: &NetworkParams,
    features: &[Tensor],
    n_samples: usize,
    start: usize,
    seed: u64,
) -> Result<FisherDiag> {
    if features.is_empty() {
        return Err(DgtError::validation("fisher estimation needs at least one input"));
    }
    if n_samples == 0 {
        return Err(DgtError::validation("n_samples must be >= 1"));
    }
    let scope = ParamScope::DecoderFrom(start);
    let range = params.scope_range(scope);
    let mut acc = Accumulator::new(params, &range);
    for f in features {
        let probs = micronet::decode(params, f);
        let mut rng = ChaCha8Rng::seed_from_u64(content_seed(seed, &[f]));
        for _ in 0..n_samples {
            let y = sample_labels(&probs, &mut rng);
            let (_, g) = micronet::features_loss_and_grads(params, f, &y, start, false);
            acc.add(&g, &range, probs.len());
        }
    }
    Ok(acc.finish(params, scope, &range))
}

/// Global min-max scaling of all entries to [0, 1]; a constant input maps to
/// all zeros.
pub fn normalize(f: &FisherDiag) -> FisherDiag {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for t in &f.tensors {
        for &v in t.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    let tensors = f
        .tensors
        .iter()
        .map(|t| {
            if range > 0.0 && range.is_finite() {
                t.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
            } else {
                Tensor::zeros(t.shape())
            }
        })
        .collect();
    FisherDiag {
        scope: f.scope,
        tensors,
        normalized: true,
    }
}

/// Elementwise maximum of two normalized estimates over the same scope.
pub fn accumulate(node: &FisherDiag, new: &FisherDiag) -> Result<FisherDiag> {
    if !node.normalized || !new.normalized {
        return Err(DgtError::validation("only normalized fisher estimates can be accumulated"));
    }
    if node.scope != new.scope || node.tensors.len() != new.tensors.len() {
        return Err(DgtError::dimension("fisher", format!("{:?}", node.scope), format!("{:?}", new.scope)));
    }
    let mut tensors = Vec::with_capacity(node.tensors.len());
    for (i, (a, b)) in node.tensors.iter().zip(&new.tensors).enumerate() {
        b.expect_shape(&format!("fisher[{i}]"), a.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x.max(y)).collect();
        tensors.push(Tensor::from_raw(a.shape().to_vec(), data));
    }
    Ok(FisherDiag {
        scope: node.scope,
        tensors,
        normalized: true,
    })
}

/// Plain gradient step damped by importance: `phi -= lr * (1 - F) * g` on
/// the tensors covered by `f`.
pub fn weighted_update(params: &mut NetworkParams, grads: &Gradients, f: &FisherDiag, lr: f32) -> Result<()> {
    if !f.normalized {
        return Err(DgtError::validation("weighted update needs a normalized fisher"));
    }
    grads.check_congruent(params)?;
    let range = f.check_against(params)?;
    let mut all = params.tensors_mut();
    for (k, i) in range.enumerate() {
        let imp = f.tensors[k].data();
        let g = grads.tensors[i].data();
        for (j, p) in all[i].1.data_mut().iter_mut().enumerate() {
            let step = lr * (1.0 - imp[j]) * g[j];
            if step != 0.0 {
                *p -= step;
            }
        }
    }
    Ok(())
}

/// `sum_i F_i * delta_i^2`.
pub fn kl_quadratic_form(f: &FisherDiag, delta: &[Tensor]) -> Result<f64> {
    if delta.len() != f.tensors.len() {
        return Err(DgtError::dimension("delta", format!("{} tensors", f.tensors.len()), delta.len()));
    }
    let mut total = 0.0f64;
    for (i, (ft, d)) in f.tensors.iter().zip(delta).enumerate() {
        d.expect_shape(&format!("delta[{i}]"), ft.shape())?;
        total += ft
            .data()
            .iter()
            .zip(d.data())
            .map(|(&a, &b)| a as f64 * b as f64 * b as f64)
            .sum::<f64>();
    }
    Ok(total)
}
