//! `<video>/frames/NNNNN.png` + `<video>/masks/NNNNN.png` datasets. Mask PNGs
//! are 8-bit gray; 0 is background and each distinct nonzero value one object.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::lifelong::Video;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct VideoMeta {
    domain_tag: String,
    reference_index: usize,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_folder_dataset(videos: &[Video], dir: &Path) -> Result<()> {
    for v in videos {
        v.validate()?;
        let root = dir.join(&v.id);
        fs::create_dir_all(root.join("frames"))?;
        fs::create_dir_all(root.join("masks"))?;
        for (t, f) in v.frames.iter().enumerate() {
            let (_, h, w) = f.chw();
            let d = f.data();
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let px = y as usize * w + x as usize;
                Rgb([to_byte(d[px]), to_byte(d[h * w + px]), to_byte(d[2 * h * w + px])])
            });
            img.save(root.join("frames").join(format!("{t:05}.png")))?;
            if let Some(labels) = v.label_map(t) {
                let l = labels.data();
                let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([l[y as usize * w + x as usize] as u8]));
                img.save(root.join("masks").join(format!("{t:05}.png")))?;
            }
        }
        let meta = VideoMeta {
            domain_tag: v.domain_tag.clone(),
            reference_index: v.reference_index,
        };
        fs::write(root.join("video.json"), serde_json::to_string_pretty(&meta).expect("plain data"))?;
    }
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn load_video(root: &Path, resolution: Option<(usize, usize)>) -> Result<Video> {
    let id = root
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DgtError::validation(format!("bad video directory {}", root.display())))?
        .to_string();
    let frame_paths = sorted_pngs(&root.join("frames"))?;
    if frame_paths.is_empty() {
        return Err(DgtError::validation(format!("video `{id}` has no frames")));
    }
    let meta: Option<VideoMeta> = match fs::read_to_string(root.join("video.json")) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| DgtError::validation(format!("{id}/video.json: {e}")))?),
        Err(_) => None,
    };
    let mut frames = Vec::new();
    let mut raw_masks: Vec<Option<GrayImage>> = Vec::new();
    for p in &frame_paths {
        let mut rgb = image::open(p)?.to_rgb8();
        let mask_path = root.join("masks").join(p.file_name().expect("listed file"));
        let mut mask = if mask_path.exists() {
            let m = image::open(&mask_path)?.to_luma8();
            if m.dimensions() != rgb.dimensions() {
                return Err(DgtError::dimension(
                    mask_path.display().to_string(),
                    format!("{}x{}", rgb.width(), rgb.height()),
                    format!("{}x{}", m.width(), m.height()),
                ));
            }
            Some(m)
        } else {
            None
        };
        if let Some((w, h)) = resolution {
            if rgb.dimensions() != (w as u32, h as u32) {
                rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
                mask = mask.map(|m| image::imageops::resize(&m, w as u32, h as u32, FilterType::Nearest));
            }
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.into_raw();
        frames.push(Tensor::from_fn(&[3, h, w], |i| {
            let (c, px) = (i / (h * w), i % (h * w));
            raw[px * 3 + c] as f32 / 255.0
        }));
        raw_masks.push(mask);
    }
    let labels: BTreeSet<u8> = raw_masks.iter().flatten().flat_map(|m| m.as_raw().iter().copied()).filter(|&v| v != 0).collect();
    let masks = raw_masks
        .iter()
        .map(|m| {
            m.as_ref().map(|m| {
                let (w, h) = (m.width() as usize, m.height() as usize);
                let raw = m.as_raw();
                labels
                    .iter()
                    .map(|&l| Tensor::from_fn(&[1, h, w], |i| if raw[i] == l { 1.0 } else { 0.0 }))
                    .collect::<Vec<_>>()
            })
        })
        .map(|m| m.filter(|objs| !objs.is_empty()))
        .collect();
    let (domain_tag, reference_index) = meta.map_or((String::new(), 0), |m| (m.domain_tag, m.reference_index));
    let video = Video {
        id,
        frames,
        masks,
        reference_index,
        domain_tag,
    };
    if reference_index >= video.frames.len() || video.masks[reference_index].is_none() {
        return Err(DgtError::validation(format!("video `{}` has no mask for its reference frame", video.id)));
    }
    video.validate()?;
    Ok(video)
}

/// Loads every video directory under `path`, sorted by name. Frames are
/// resized bilinearly and masks by nearest neighbour when `resolution`
/// (width, height) differs from the files.
pub fn load_folder_dataset(path: &Path, resolution: Option<(usize, usize)>) -> Result<Vec<Video>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DgtError::validation(format!("no video folders under {}", path.display())));
    }
    dirs.iter().map(|d| load_video(d, resolution)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_domain, DomainSpec};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let videos: Vec<Video> = generate_domain(&DomainSpec::ytlike(), 2, 4)
            .unwrap()
            .into_iter()
            .map(|g| g.video)
            .collect();
        write_folder_dataset(&videos, dir.path()).unwrap();
        let back = load_folder_dataset(dir.path(), None).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in videos.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.domain_tag, b.domain_tag);
            assert_eq!(a.num_frames(), b.num_frames());
            assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.bitwise_eq(y)));
            for t in 0..a.num_frames() {
                assert_eq!(a.label_map(t), b.label_map(t));
            }
        }
    }

    fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let img: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([f(x, y)]));
        img.save(path).unwrap();
    }

    fn write_rgb(path: &Path, w: u32, h: u32) {
        let img: RgbImage = ImageBuffer::from_fn(w, h, |x, _| Rgb([x as u8, 10, 20]));
        img.save(path).unwrap();
    }

    #[test]
    fn distinct_values_are_objects() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("clip");
        fs::create_dir_all(v.join("frames")).unwrap();
        fs::create_dir_all(v.join("masks")).unwrap();
        for t in 0..2 {
            write_rgb(&v.join("frames").join(format!("{t:05}.png")), 32, 16);
        }
        write_gray(&v.join("masks/00000.png"), 32, 16, |x, _| match x {
            0..=5 => 7,
            6..=9 => 255,
            _ => 0,
        });
        let videos = load_folder_dataset(dir.path(), None).unwrap();
        assert_eq!(videos[0].num_frames(), 2);
        assert_eq!(videos[0].num_objects(), 2);
        assert!(videos[0].masks[1].is_none());

        let resized = load_folder_dataset(dir.path(), Some((64, 32))).unwrap();
        assert_eq!(resized[0].frames[0].shape(), &[3, 32, 64]);
        assert!(resized[0].masks[0].as_ref().unwrap()[0].is_binary());
    }

    #[test]
    fn reference_mask_required_and_sizes_checked() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("clip");
        fs::create_dir_all(v.join("frames")).unwrap();
        fs::create_dir_all(v.join("masks")).unwrap();
        for t in 0..2 {
            write_rgb(&v.join("frames").join(format!("{t:05}.png")), 32, 16);
        }
        write_gray(&v.join("masks/00001.png"), 32, 16, |_, _| 1);
        assert!(load_folder_dataset(dir.path(), None).is_err());
        write_gray(&v.join("masks/00000.png"), 16, 16, |_, _| 1);
        assert!(matches!(load_folder_dataset(dir.path(), None), Err(DgtError::Dimension { .. })));
    }
}
