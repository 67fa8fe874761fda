//! Shared helpers for integration tests, including an independent f64
//! re-implementation of the segmentation network used as a gradient oracle.
#![allow(dead_code)]

pub mod mutations;

use dgt_core::micronet::{NetworkParams, Sample};
use dgt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    pub stride: usize,
}

/// Feature map `(c, h, w, data)`.
#[derive(Clone)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = t.chw();
        Map {
            c,
            h,
            w,
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }
}

/// Every conv layer of the network in canonical parameter order, so layer `j`
/// owns parameter tensors `2j` (weight) and `2j + 1` (bias).
#[derive(Clone)]
pub struct RefNet {
    pub layers: Vec<Layer>,
    pub n_cur: usize,
    pub n_ref: usize,
    pub n_comb: usize,
    pub n_blocks: usize,
}

impl RefNet {
    pub fn from_params(p: &NetworkParams) -> Self {
        let s = &p.shared;
        let mut layers = Vec::new();
        let mut push = |l: &dgt_core::micronet::ConvLayer| {
            let sh = l.weight.shape();
            layers.push(Layer {
                w: l.weight.data().iter().map(|&v| v as f64).collect(),
                b: l.bias.data().iter().map(|&v| v as f64).collect(),
                out_ch: sh[0],
                in_ch: sh[1],
                k: sh[2],
                stride: l.stride,
            });
        };
        s.encoder_cur.iter().for_each(&mut push);
        s.encoder_ref.iter().for_each(&mut push);
        s.combiner.iter().for_each(&mut push);
        for b in &p.decoder {
            push(&b.conv1);
            push(&b.conv2);
        }
        push(&s.head);
        RefNet {
            layers,
            n_cur: s.encoder_cur.len(),
            n_ref: s.encoder_ref.len(),
            n_comb: s.combiner.len(),
            n_blocks: p.decoder.len(),
        }
    }

    /// Mutable access to parameter tensor `t` in canonical order.
    pub fn tensor_mut(&mut self, t: usize) -> &mut Vec<f64> {
        let l = &mut self.layers[t / 2];
        if t.is_multiple_of(2) {
            &mut l.w
        } else {
            &mut l.b
        }
    }

    pub fn forward(&self, frame: &Map, ref_frame: &Map, ref_mask: &Map) -> Map {
        let mut x = frame.clone();
        for l in &self.layers[..self.n_cur] {
            x = relu(conv(l, &x));
        }
        let cur = x;
        let refl = &self.layers[self.n_cur..self.n_cur + self.n_ref];
        let mut r = ref_frame.clone();
        let mut m = ref_mask.clone();
        for b in 0..(self.n_ref - 1) / 2 {
            r = relu(conv(&refl[2 * b], &r));
            r = relu(conv(&refl[2 * b + 1], &r));
            r = max_pool(&r);
            m = avg_pool(&m);
            for c in 0..r.c {
                for i in 0..r.h * r.w {
                    r.d[c * r.h * r.w + i] *= 1.0 + m.d[i];
                }
            }
        }
        while r.h > cur.h {
            r = max_pool(&r);
        }
        r = relu(conv(&refl[self.n_ref - 1], &r));
        let comb = &self.layers[self.n_cur + self.n_ref..self.n_cur + self.n_ref + self.n_comb];
        let mut cat = cur.clone();
        cat.c += r.c;
        cat.d.extend_from_slice(&r.d);
        let g = conv(&comb[1], &relu(conv(&comb[0], &cat)));
        let mut x = cur.clone();
        for (v, gv) in x.d.iter_mut().zip(&g.d) {
            *v *= 1.0 + gv;
        }
        let dec0 = self.n_cur + self.n_ref + self.n_comb;
        for b in 0..self.n_blocks {
            x = relu(conv(&self.layers[dec0 + 2 * b], &x));
            x = relu(conv(&self.layers[dec0 + 2 * b + 1], &x));
            x = upsample(&x);
        }
        let mut out = conv(self.layers.last().unwrap(), &x);
        out.d.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        out
    }

    pub fn loss(&self, s: &Sample) -> f64 {
        let p = self.forward(
            &Map::from_tensor(&s.frame),
            &Map::from_tensor(&s.ref_frame),
            &Map::from_tensor(&s.ref_mask),
        );
        bce(&p.d, s.gt.data())
    }
}

pub fn bce(p: &[f64], y: &[f32]) -> f64 {
    let eps = dgt_core::micronet::BCE_EPS as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = p.clamp(eps, 1.0 - eps);
            let y = y as f64;
            -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}

pub fn conv(l: &Layer, x: &Map) -> Map {
    assert_eq!(l.in_ch, x.c);
    let pad = (l.k / 2) as isize;
    let oh = (x.h + 2 * pad as usize - l.k) / l.stride + 1;
    let ow = (x.w + 2 * pad as usize - l.k) / l.stride + 1;
    let mut d = vec![0.0; l.out_ch * oh * ow];
    for o in 0..l.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = l.b[o];
                for i in 0..l.in_ch {
                    for ky in 0..l.k {
                        for kx in 0..l.k {
                            let iy = (oy * l.stride + ky) as isize - pad;
                            let ix = (ox * l.stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += l.w[((o * l.in_ch + i) * l.k + ky) * l.k + kx] * x.at(i, iy as usize, ix as usize);
                        }
                    }
                }
                d[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Map { c: l.out_ch, h: oh, w: ow, d }
}

pub fn relu(mut x: Map) -> Map {
    x.d.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn max_pool(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut d = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                    .fold(f64::NEG_INFINITY, f64::max);
                d.push(v);
            }
        }
    }
    Map { c: x.c, h, w, d }
}

pub fn avg_pool(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut d = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                    .sum();
                d.push(s / 4.0);
            }
        }
    }
    Map { c: x.c, h, w, d }
}

pub fn upsample(x: &Map) -> Map {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut d = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                d.push(x.at(c, y / 2, xx / 2));
            }
        }
    }
    Map { c: x.c, h, w, d }
}

fn disc(h: usize, w: usize, cy: isize, cx: isize, r2: isize) -> Tensor {
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        if (y - cy).pow(2) + (x - cx).pow(2) <= r2 {
            1.0
        } else {
            0.0
        }
    })
}

/// Random frames with a disc-shaped reference mask and a shifted disc target.
pub fn random_sample(seed: u64, h: usize, w: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Tensor::from_fn(&[3, h, w], |_| rng.random());
    let ref_frame = Tensor::from_fn(&[3, h, w], |_| rng.random());
    let cy = rng.random_range(4..h - 4) as isize;
    let cx = rng.random_range(4..w - 4) as isize;
    Sample {
        frame,
        ref_frame,
        ref_mask: disc(h, w, cy, cx, 36),
        gt: disc(h, w, cy + 1, cx + 2, 36),
    }
}
