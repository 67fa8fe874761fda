use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::tensor::Tensor;

/// Channel layout and input resolution of the micro segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// One stride-2 stage per entry.
    pub encoder_channels: Vec<usize>,
    /// Two convolutions and a max-pool per entry.
    pub reference_channels: Vec<usize>,
    pub combiner_channels: usize,
    /// One decoder block per entry; its length is `L`.
    pub decoder_channels: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            reference_channels: vec![8, 16, 32],
            combiner_channels: 64,
            decoder_channels: vec![64, 32, 16, 8],
            width: 64,
            height: 48,
        }
    }
}

impl NetConfig {
    pub fn num_blocks(&self) -> usize {
        self.decoder_channels.len()
    }

    /// Spatial reduction factor of the current-frame encoder.
    pub fn downsample(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DgtError::Config(m));
        if self.decoder_channels.is_empty() {
            return bad("decoder needs at least one block".into());
        }
        if self.encoder_channels.len() != self.decoder_channels.len() {
            return bad(format!(
                "encoder has {} stride-2 stages but decoder has {} upsampling blocks",
                self.encoder_channels.len(),
                self.decoder_channels.len()
            ));
        }
        if self.reference_channels.is_empty() || self.reference_channels.len() > self.encoder_channels.len() {
            return bad("reference encoder needs between 1 and L pooling blocks".into());
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.reference_channels)
            .chain(&self.decoder_channels)
            .chain(std::iter::once(&self.combiner_channels));
        if all.into_iter().any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        let f = self.downsample();
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(f) || !self.height.is_multiple_of(f) {
            return bad(format!(
                "resolution {}x{} must be a positive multiple of {f}",
                self.width, self.height
            ));
        }
        Ok(())
    }
}

/// One same-padded convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `out_ch x in_ch x k x k`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[2].is_multiple_of(2) {
            return Err(DgtError::dimension("conv weight", "O x C x k x k with odd k", weight.shape_string()));
        }
        bias.expect_shape("conv bias", &[s[0]])?;
        if stride == 0 {
            return Err(DgtError::validation("conv stride must be >= 1"));
        }
        Ok(Self { weight, bias, stride })
    }

    /// He-uniform initialization over the fan-in; zero bias.
    pub fn he_uniform(rng: &mut impl Rng, out_ch: usize, in_ch: usize, k: usize, stride: usize) -> Self {
        let fan_in = (in_ch * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[out_ch, in_ch, k, k], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Two 3x3 convolutions followed by nearest-neighbour x2 upsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub index: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl DecoderBlock {
    pub const UPSAMPLE: usize = 2;

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv1.weight, &self.conv1.bias, &self.conv2.weight, &self.conv2.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }

    pub fn bitwise_eq(&self, other: &DecoderBlock) -> bool {
        self.index == other.index && self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Parameters shared by every network generated from a tree: both encoders,
/// the combining module and the 1x1 output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub encoder_cur: Vec<ConvLayer>,
    /// Two convolutions per pooling block, then the 1x1 channel-alignment conv.
    pub encoder_ref: Vec<ConvLayer>,
    pub combiner: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl SharedParams {
    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.encoder_cur
            .iter()
            .chain(&self.encoder_ref)
            .chain(&self.combiner)
            .chain(std::iter::once(&self.head))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(ConvLayer::num_params).sum()
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    EncoderCur,
    EncoderRef,
    Combiner,
    Decoder(usize),
    Head,
}

/// A contiguous selection of parameter tensors in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    All,
    /// Decoder blocks `[start, L)`.
    DecoderFrom(usize),
}

/// Which groups an optimizer step may modify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoders: bool,
    pub combiner: bool,
    pub head: bool,
    /// First trainable decoder block; `L` freezes the whole decoder.
    pub decoder_from: usize,
}

impl Trainable {
    pub fn all() -> Self {
        Self {
            encoders: true,
            combiner: true,
            head: true,
            decoder_from: 0,
        }
    }

    pub fn decoder_suffix(start: usize) -> Self {
        Self {
            encoders: false,
            combiner: false,
            head: false,
            decoder_from: start,
        }
    }

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::EncoderCur | ParamGroup::EncoderRef => self.encoders,
            ParamGroup::Combiner => self.combiner,
            ParamGroup::Head => self.head,
            ParamGroup::Decoder(i) => i >= self.decoder_from,
        }
    }

    /// Whether anything upstream of the decoder needs gradients.
    pub fn any_shared_body(&self) -> bool {
        self.encoders || self.combiner
    }
}

/// All trainable parameters of the micro-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub shared: SharedParams,
    pub decoder: Vec<DecoderBlock>,
}

impl NetworkParams {
    /// Seeded He-uniform initialization.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder_cur = Vec::new();
        let mut c = 3;
        for &o in &config.encoder_channels {
            encoder_cur.push(ConvLayer::he_uniform(&mut rng, o, c, 3, 2));
            c = o;
        }
        let cur_out = c;
        let mut encoder_ref = Vec::new();
        let mut c = 3;
        for &o in &config.reference_channels {
            encoder_ref.push(ConvLayer::he_uniform(&mut rng, o, c, 3, 1));
            encoder_ref.push(ConvLayer::he_uniform(&mut rng, o, o, 3, 1));
            c = o;
        }
        encoder_ref.push(ConvLayer::he_uniform(&mut rng, cur_out, c, 1, 1));
        let m = config.combiner_channels;
        let combiner = vec![
            ConvLayer::he_uniform(&mut rng, m, 2 * cur_out, 3, 1),
            ConvLayer::he_uniform(&mut rng, cur_out, m, 3, 1),
        ];
        let mut decoder = Vec::new();
        let mut c = cur_out;
        for (index, &o) in config.decoder_channels.iter().enumerate() {
            decoder.push(DecoderBlock {
                index,
                conv1: ConvLayer::he_uniform(&mut rng, o, c, 3, 1),
                conv2: ConvLayer::he_uniform(&mut rng, o, o, 3, 1),
            });
            c = o;
        }
        let head = ConvLayer::he_uniform(&mut rng, 1, c, 1, 1);
        Ok(Self {
            config: config.clone(),
            shared: SharedParams {
                encoder_cur,
                encoder_ref,
                combiner,
                head,
            },
            decoder,
        })
    }

    pub fn from_parts(config: NetConfig, shared: SharedParams, decoder: Vec<DecoderBlock>) -> Result<Self> {
        let p = Self { config, shared, decoder };
        p.validate()?;
        Ok(p)
    }

    pub fn num_blocks(&self) -> usize {
        self.decoder.len()
    }

    /// Checks the layer shapes against `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::init(&self.config, 0)?;
        let ours: Vec<_> = self.named_tensors();
        let theirs: Vec<_> = reference.named_tensors();
        if ours.len() != theirs.len() {
            return Err(DgtError::dimension(
                "network parameters",
                format!("{} tensors", theirs.len()),
                ours.len(),
            ));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            a.expect_shape(name, b.shape())?;
        }
        for (i, b) in self.decoder.iter().enumerate() {
            if b.index != i {
                return Err(DgtError::validation(format!("decoder block at position {i} has index {}", b.index)));
            }
        }
        Ok(())
    }

    /// Tensors in canonical order with their group.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Tensor)> {
        let s = &self.shared;
        let mut out = Vec::new();
        for l in &s.encoder_cur {
            out.push((ParamGroup::EncoderCur, &l.weight));
            out.push((ParamGroup::EncoderCur, &l.bias));
        }
        for l in &s.encoder_ref {
            out.push((ParamGroup::EncoderRef, &l.weight));
            out.push((ParamGroup::EncoderRef, &l.bias));
        }
        for l in &s.combiner {
            out.push((ParamGroup::Combiner, &l.weight));
            out.push((ParamGroup::Combiner, &l.bias));
        }
        for b in &self.decoder {
            for t in b.tensors() {
                out.push((ParamGroup::Decoder(b.index), t));
            }
        }
        out.push((ParamGroup::Head, &s.head.weight));
        out.push((ParamGroup::Head, &s.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let s = &mut self.shared;
        let mut out = Vec::new();
        for l in &mut s.encoder_cur {
            out.push((ParamGroup::EncoderCur, &mut l.weight));
            out.push((ParamGroup::EncoderCur, &mut l.bias));
        }
        for l in &mut s.encoder_ref {
            out.push((ParamGroup::EncoderRef, &mut l.weight));
            out.push((ParamGroup::EncoderRef, &mut l.bias));
        }
        for l in &mut s.combiner {
            out.push((ParamGroup::Combiner, &mut l.weight));
            out.push((ParamGroup::Combiner, &mut l.bias));
        }
        for b in &mut self.decoder {
            let idx = b.index;
            for t in b.tensors_mut() {
                out.push((ParamGroup::Decoder(idx), t));
            }
        }
        out.push((ParamGroup::Head, &mut s.head.weight));
        out.push((ParamGroup::Head, &mut s.head.bias));
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut names = Vec::new();
        let s = &self.shared;
        for (i, _) in s.encoder_cur.iter().enumerate() {
            names.push(format!("encoder_cur.{i}.weight"));
            names.push(format!("encoder_cur.{i}.bias"));
        }
        for (i, _) in s.encoder_ref.iter().enumerate() {
            names.push(format!("encoder_ref.{i}.weight"));
            names.push(format!("encoder_ref.{i}.bias"));
        }
        for (i, _) in s.combiner.iter().enumerate() {
            names.push(format!("combiner.{i}.weight"));
            names.push(format!("combiner.{i}.bias"));
        }
        for b in &self.decoder {
            for part in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"] {
                names.push(format!("decoder.{}.{part}", b.index));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names.into_iter().zip(self.tensors().into_iter().map(|(_, t)| t)).collect()
    }

    /// Canonical index range covered by `scope`.
    pub fn scope_range(&self, scope: ParamScope) -> std::ops::Range<usize> {
        let total = self.tensors().len();
        match scope {
            ParamScope::All => 0..total,
            ParamScope::DecoderFrom(start) => {
                let dec0 = 2 * (self.shared.encoder_cur.len() + self.shared.encoder_ref.len() + self.shared.combiner.len());
                dec0 + 4 * start.min(self.decoder.len())..dec0 + 4 * self.decoder.len()
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.shared.num_params() + self.decoder.iter().map(DecoderBlock::num_params).sum::<usize>()
    }

    pub fn bitwise_eq(&self, other: &NetworkParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.bitwise_eq(y))
    }

    /// Zero-valued tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One tensor per parameter tensor of a [`NetworkParams`], canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn check_congruent(&self, params: &NetworkParams) -> Result<()> {
        let p = params.named_tensors();
        if p.len() != self.tensors.len() {
            return Err(DgtError::dimension("gradients", format!("{} tensors", p.len()), self.tensors.len()));
        }
        for ((name, t), g) in p.iter().zip(&self.tensors) {
            g.expect_shape(name, t.shape())?;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
