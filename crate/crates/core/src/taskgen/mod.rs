//! Seeded synthetic video domains and PNG folder datasets.

mod folder;
mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::lifelong::Video;
use crate::tensor::Tensor;

pub use folder::{load_folder_dataset, write_folder_dataset};
pub use raster::Geometry;
use raster::{reflect, UNIT16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Every object is annotated separately.
    MultiObject,
    /// All moving objects share one foreground label.
    ChangeDetection,
    /// Only the topmost object is annotated; the rest are distractors.
    SingleObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipses,
    Rectangles,
    Polygons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    PerlinNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Circular,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub task_kind: TaskKind,
    pub shape_family: ShapeFamily,
    pub background: Background,
    pub motion: Motion,
    pub noise_std: f32,
    pub object_count_range: (usize, usize),
    pub frames_per_video: usize,
    /// `(width, height)`.
    pub resolution: (usize, usize),
    pub background_tint: [f32; 3],
    pub object_tint: [f32; 3],
    /// Per-frame whole-scene shift of up to this many pixels.
    #[serde(default)]
    pub camera_jitter: i64,
}

impl DomainSpec {
    /// Several tracked ellipses over a greenish value-noise backdrop.
    pub fn ytlike() -> Self {
        Self {
            name: "ytlike".into(),
            task_kind: TaskKind::MultiObject,
            shape_family: ShapeFamily::Ellipses,
            background: Background::PerlinNoise,
            motion: Motion::Circular,
            noise_std: 0.03,
            object_count_range: (2, 3),
            frames_per_video: 8,
            resolution: (64, 48),
            background_tint: [0.25, 0.55, 0.3],
            object_tint: [0.9, 0.45, 0.3],
            camera_jitter: 0,
        }
    }

    /// Moving rectangles on a gray gradient with camera shake.
    pub fn cdlike() -> Self {
        Self {
            name: "cdlike".into(),
            task_kind: TaskKind::ChangeDetection,
            shape_family: ShapeFamily::Rectangles,
            background: Background::Gradient,
            motion: Motion::Linear,
            noise_std: 0.04,
            object_count_range: (1, 3),
            frames_per_video: 8,
            resolution: (64, 48),
            background_tint: [0.5, 0.5, 0.5],
            object_tint: [0.15, 0.15, 0.18],
            camera_jitter: 2,
        }
    }

    /// One annotated polygon (plus a possible distractor) on a flat blue field.
    pub fn davislike() -> Self {
        Self {
            name: "davislike".into(),
            task_kind: TaskKind::SingleObject,
            shape_family: ShapeFamily::Polygons,
            background: Background::Flat,
            motion: Motion::Linear,
            noise_std: 0.02,
            object_count_range: (1, 2),
            frames_per_video: 8,
            resolution: (64, 48),
            background_tint: [0.2, 0.3, 0.65],
            object_tint: [0.85, 0.8, 0.35],
            camera_jitter: 0,
        }
    }

    /// Random-walking ellipses over purple noise, kept out of tree building.
    pub fn heldout() -> Self {
        Self {
            name: "heldout".into(),
            task_kind: TaskKind::SingleObject,
            shape_family: ShapeFamily::Ellipses,
            background: Background::PerlinNoise,
            motion: Motion::RandomWalk,
            noise_std: 0.03,
            object_count_range: (1, 2),
            frames_per_video: 8,
            resolution: (64, 48),
            background_tint: [0.55, 0.25, 0.55],
            object_tint: [0.3, 0.85, 0.85],
            camera_jitter: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ytlike" => Ok(Self::ytlike()),
            "cdlike" => Ok(Self::cdlike()),
            "davislike" => Ok(Self::davislike()),
            "heldout" => Ok(Self::heldout()),
            other => Err(DgtError::Config(format!("unknown domain preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.resolution;
        if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
            return Err(DgtError::validation(format!(
                "domain `{}`: resolution {w}x{h} must be positive multiples of 16",
                self.name
            )));
        }
        if self.frames_per_video < 2 {
            return Err(DgtError::validation(format!("domain `{}`: need at least 2 frames per video", self.name)));
        }
        let (lo, hi) = self.object_count_range;
        if lo == 0 || lo > hi || hi > 8 {
            return Err(DgtError::validation(format!(
                "domain `{}`: object_count_range ({lo}, {hi}) must satisfy 1 <= min <= max <= 8",
                self.name
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_std) {
            return Err(DgtError::validation(format!("domain `{}`: noise_std must lie in [0, 0.5]", self.name)));
        }
        let tints = self.background_tint.iter().chain(&self.object_tint);
        if tints.clone().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(DgtError::validation(format!("domain `{}`: tints must lie in [0, 1]", self.name)));
        }
        if !(0..=4).contains(&self.camera_jitter) {
            return Err(DgtError::validation(format!("domain `{}`: camera_jitter must lie in 0..=4", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedVideo {
    pub video: Video,
    pub seed: u64,
    pub spec: DomainSpec,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn video_seed(spec: &DomainSpec, seed: u64, index: usize) -> u64 {
    let name = spec
        .name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    mix(mix(seed ^ name).wrapping_add(index as u64))
}

struct Object {
    geometry: Geometry,
    color: [f32; 3],
    /// Centre per frame, world coordinates.
    path: Vec<(i64, i64)>,
}

fn sample_geometry(rng: &mut ChaCha8Rng, family: ShapeFamily) -> Geometry {
    match family {
        ShapeFamily::Ellipses => Geometry::Ellipse {
            rx: rng.random_range(5..=10),
            ry: rng.random_range(4..=8),
        },
        ShapeFamily::Rectangles => Geometry::Rect {
            half_w: rng.random_range(4..=9),
            half_h: rng.random_range(3..=7),
        },
        ShapeFamily::Polygons => {
            let k = rng.random_range(4..=6);
            let start = rng.random_range(0..16usize);
            // spread vertices so consecutive directions stay under 180 degrees apart
            let dirs: Vec<usize> = (0..k).map(|i| (start + i * 16 / k + rng.random_range(0..2)) % 16).collect();
            let radii: Vec<i64> = (0..k).map(|_| rng.random_range(7..=11)).collect();
            Geometry::polygon(&dirs, &radii)
        }
    }
}

fn sample_path(rng: &mut ChaCha8Rng, motion: Motion, frames: usize, bounds: ((i64, i64), (i64, i64))) -> Vec<(i64, i64)> {
    let ((x_lo, x_hi), (y_lo, y_hi)) = bounds;
    let x0 = rng.random_range(x_lo..=x_hi);
    let y0 = rng.random_range(y_lo..=y_hi);
    match motion {
        Motion::Linear => {
            let vx = rng.random_range(-3..=3);
            let vy = rng.random_range(-2..=2);
            (0..frames as i64)
                .map(|t| (reflect(x0 + vx * t, x_lo, x_hi), reflect(y0 + vy * t, y_lo, y_hi)))
                .collect()
        }
        Motion::Circular => {
            let r = rng.random_range(3..=8);
            let phase = rng.random_range(0..16usize);
            let step = if rng.random::<bool>() { 1 } else { 15 };
            (0..frames)
                .map(|t| {
                    let (c, s) = UNIT16[(phase + t * step) % 16];
                    (
                        reflect(x0 + r * c / 64, x_lo, x_hi),
                        reflect(y0 + r * s / 64, y_lo, y_hi),
                    )
                })
                .collect()
        }
        Motion::RandomWalk => {
            let (mut x, mut y) = (x0, y0);
            (0..frames)
                .map(|t| {
                    if t > 0 {
                        x = (x + rng.random_range(-2..=2)).clamp(x_lo, x_hi);
                        y = (y + rng.random_range(-2..=2)).clamp(y_lo, y_hi);
                    }
                    (x, y)
                })
                .collect()
        }
    }
}

/// Value noise on an 8-pixel lattice, smoothly interpolated, in `[0, 1]`.
struct ValueNoise {
    cols: usize,
    grid: Vec<f32>,
}

const CELL: i64 = 8;
const NOISE_PAD: i64 = 16;

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Self {
        let cols = (w as i64 + 2 * NOISE_PAD) as usize / CELL as usize + 2;
        let rows = (h as i64 + 2 * NOISE_PAD) as usize / CELL as usize + 2;
        Self {
            cols,
            grid: (0..cols * rows).map(|_| rng.random()).collect(),
        }
    }

    fn at(&self, x: i64, y: i64) -> f32 {
        let (x, y) = (x + NOISE_PAD, y + NOISE_PAD);
        let (gx, gy) = ((x / CELL) as usize, (y / CELL) as usize);
        let fx = (x % CELL) as f32 / CELL as f32;
        let fy = (y % CELL) as f32 / CELL as f32;
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(fx), s(fy));
        let g = |cx: usize, cy: usize| self.grid[cy * self.cols + cx];
        let top = g(gx, gy) * (1.0 - sx) + g(gx + 1, gy) * sx;
        let bottom = g(gx, gy + 1) * (1.0 - sx) + g(gx + 1, gy + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Irwin-Hall: twelve uniforms have unit variance around 6
    (0..12).map(|_| rng.random::<f32>()).sum::<f32>() - 6.0
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(spec: &DomainSpec, rng: &mut ChaCha8Rng, id: String) -> Option<Video> {
    let (w, h) = spec.resolution;
    let (wi, hi) = (w as i64, h as i64);
    let frames_n = spec.frames_per_video;
    let (lo, hi_count) = spec.object_count_range;
    let n_obj = rng.random_range(lo..=hi_count);
    let noise = ValueNoise::new(rng, w, h);
    let objects: Vec<Object> = (0..n_obj)
        .map(|_| {
            let geometry = sample_geometry(rng, spec.shape_family);
            let (ex, ey) = geometry.extent();
            let mut color = spec.object_tint;
            for c in &mut color {
                *c = (*c + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0);
            }
            let bounds = ((ex.min(wi / 2 - 1), (wi - 1 - ex).max(wi / 2)), (ey.min(hi / 2 - 1), (hi - 1 - ey).max(hi / 2)));
            let path = sample_path(rng, spec.motion, frames_n, bounds);
            Object { geometry, color, path }
        })
        .collect();
    let jitter: Vec<(i64, i64)> = (0..frames_n)
        .map(|t| {
            if spec.camera_jitter == 0 || t == 0 {
                (0, 0)
            } else {
                let j = spec.camera_jitter;
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            }
        })
        .collect();
    let tint_b = [
        spec.background_tint[0] * 0.6,
        spec.background_tint[1] * 0.6,
        spec.background_tint[2] * 0.6,
    ];

    let annotated = match spec.task_kind {
        TaskKind::MultiObject => n_obj,
        TaskKind::ChangeDetection | TaskKind::SingleObject => 1,
    };
    let mut frames = Vec::with_capacity(frames_n);
    let mut masks = Vec::with_capacity(frames_n);
    for (t, &(jx, jy)) in jitter.iter().enumerate().take(frames_n) {
        let mut img = vec![0.0f32; 3 * w * h];
        let mut label = vec![0u8; w * h];
        for y in 0..hi {
            for x in 0..wi {
                let (wx, wy) = (x + jx, y + jy);
                let px = (y * wi + x) as usize;
                let mut rgb = match spec.background {
                    Background::Flat => spec.background_tint,
                    Background::Gradient => {
                        let s = ((wx + wy) as f32 / (wi + hi - 2) as f32).clamp(0.0, 1.0);
                        std::array::from_fn(|c| spec.background_tint[c] * (1.0 - s) + tint_b[c] * s)
                    }
                    Background::PerlinNoise => {
                        let n = noise.at(wx, wy);
                        std::array::from_fn(|c| spec.background_tint[c] * (0.6 + 0.8 * n))
                    }
                };
                // later objects are drawn on top
                let mut owner = None;
                for (k, o) in objects.iter().enumerate() {
                    let (cx, cy) = o.path[t];
                    if o.geometry.contains(wx - cx, wy - cy) {
                        owner = Some(k);
                    }
                }
                if let Some(k) = owner {
                    rgb = objects[k].color;
                    label[px] = match spec.task_kind {
                        TaskKind::MultiObject => k as u8 + 1,
                        TaskKind::ChangeDetection => 1,
                        TaskKind::SingleObject => u8::from(k == n_obj - 1),
                    };
                }
                for c in 0..3 {
                    img[c * w * h + px] = rgb[c];
                }
            }
        }
        if spec.noise_std > 0.0 {
            for v in &mut img {
                *v += spec.noise_std * gaussian(rng);
            }
        }
        img.iter_mut().for_each(|v| *v = quantize(*v));
        frames.push(Tensor::from_fn(&[3, h, w], |i| img[i]));
        let per_object: Vec<Tensor> = (1..=annotated as u8)
            .map(|k| Tensor::from_fn(&[1, h, w], |i| if label[i] == k { 1.0 } else { 0.0 }))
            .collect();
        masks.push(Some(per_object));
    }
    // every annotated object must be visible on the reference frame
    let min_px = 12.0;
    if masks[0].as_ref()?.iter().any(|m| m.sum() < min_px) {
        return None;
    }
    Some(Video {
        id,
        frames,
        masks,
        reference_index: 0,
        domain_tag: spec.name.clone(),
    })
}

/// `n_videos` clips of one domain; video `i` depends only on `(spec, seed, i)`.
pub fn generate_domain(spec: &DomainSpec, n_videos: usize, seed: u64) -> Result<Vec<GeneratedVideo>> {
    spec.validate()?;
    if n_videos == 0 {
        return Err(DgtError::validation("n_videos must be at least 1"));
    }
    (0..n_videos)
        .into_par_iter()
        .map(|i| {
            let vseed = video_seed(spec, seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(vseed);
            for _ in 0..64 {
                if let Some(video) = render(spec, &mut rng, format!("{}_{i:03}", spec.name)) {
                    return Ok(GeneratedVideo {
                        video,
                        seed: vseed,
                        spec: spec.clone(),
                    });
                }
            }
            Err(DgtError::validation(format!(
                "domain `{}` could not place visible objects; enlarge the resolution",
                spec.name
            )))
        })
        .collect()
}

/// Mean-colour histogram (4 bins per channel) over all frames of a video.
pub fn color_histogram(video: &Video) -> Vec<f64> {
    let mut hist = vec![0.0f64; 64];
    let mut n = 0.0;
    for f in &video.frames {
        let (_, h, w) = f.chw();
        let d = f.data();
        for px in 0..h * w {
            let bin = |c: usize| ((d[c * h * w + px] * 4.0) as usize).min(3);
            hist[bin(0) * 16 + bin(1) * 4 + bin(2)] += 1.0;
            n += 1.0;
        }
    }
    hist.iter_mut().for_each(|v| *v /= n);
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for spec in [DomainSpec::ytlike(), DomainSpec::cdlike(), DomainSpec::davislike()] {
            let a = generate_domain(&spec, 3, 11).unwrap();
            let b = generate_domain(&spec, 3, 11).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(x.video.frames.iter().zip(&y.video.frames).all(|(p, q)| p.bitwise_eq(q)));
                assert_eq!(x.video.masks, y.video.masks);
            }
            let c = generate_domain(&spec, 1, 12).unwrap();
            assert_ne!(a[0].video.frames[0], c[0].video.frames[0]);
        }
    }

    #[test]
    fn task_kinds_shape_the_labels() {
        let yt = generate_domain(&DomainSpec::ytlike(), 4, 1).unwrap();
        for g in &yt {
            let v = &g.video;
            v.validate().unwrap();
            assert!((2..=3).contains(&v.num_objects()));
            // per-object masks never overlap
            for m in v.masks.iter().flatten() {
                for px in 0..m[0].len() {
                    assert!(m.iter().map(|o| o.data()[px]).sum::<f32>() <= 1.0);
                }
            }
        }
        for g in generate_domain(&DomainSpec::cdlike(), 4, 1).unwrap() {
            assert_eq!(g.video.num_objects(), 1);
            g.video.validate().unwrap();
        }
        for g in generate_domain(&DomainSpec::davislike(), 4, 1).unwrap() {
            assert_eq!(g.video.num_objects(), 1);
        }
    }

    #[test]
    fn frames_are_byte_quantized() {
        let g = &generate_domain(&DomainSpec::davislike(), 1, 3).unwrap()[0];
        for f in &g.video.frames {
            assert!(f.data().iter().all(|&v| ((v * 255.0).round() / 255.0).to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = DomainSpec::ytlike();
        s.resolution = (60, 48);
        assert!(generate_domain(&s, 1, 0).is_err());
        let mut s = DomainSpec::ytlike();
        s.frames_per_video = 1;
        assert!(s.validate().is_err());
        assert!(generate_domain(&DomainSpec::ytlike(), 0, 0).is_err());
    }

    #[test]
    fn histogram_classifier_separates_domains() {
        let specs = [DomainSpec::ytlike(), DomainSpec::cdlike(), DomainSpec::davislike()];
        let mut correct = 0;
        let mut total = 0;
        for seed in 0..3 {
            let sets: Vec<Vec<GeneratedVideo>> = specs.iter().map(|s| generate_domain(s, 10, seed).unwrap()).collect();
            let centroids: Vec<Vec<f64>> = sets
                .iter()
                .map(|set| {
                    let mut c = vec![0.0; 64];
                    for g in &set[..5] {
                        for (a, b) in c.iter_mut().zip(color_histogram(&g.video)) {
                            *a += b / 5.0;
                        }
                    }
                    c
                })
                .collect();
            for (label, set) in sets.iter().enumerate() {
                for g in &set[5..] {
                    let h = color_histogram(&g.video);
                    let dist = |c: &Vec<f64>| c.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let pred = (0..3).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                    correct += usize::from(pred == label);
                    total += 1;
                }
            }
        }
        assert!(correct as f64 / total as f64 >= 0.95, "{correct}/{total}");
    }
}
