//! Region (Jaccard) and contour (boundary F) accuracy, plus the
//! sequential-learning aggregates over a score matrix.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::tensor::Tensor;

fn plane(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [n] => (1, *n),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    gt.expect_shape("gt", pred.shape())?;
    if !pred.is_binary() {
        return Err(DgtError::validation("prediction mask must be binary"));
    }
    if !gt.is_binary() {
        return Err(DgtError::validation("ground-truth mask must be binary"));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.0, g > 0.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Default contour tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Foreground pixels with at least one 4-neighbour that is background.
/// Pixels outside the image count as background.
pub fn boundary_map(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Dilation by a Euclidean disc of radius `r`.
fn dilate(map: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !map[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Contour F-measure with a pixel tolerance.
///
/// Both masks empty scores 1. An empty prediction against a non-empty
/// ground truth (or vice versa) scores 0.
pub fn boundary_f(pred: &Tensor, gt: &Tensor, tolerance_px: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = plane(pred);
    let pm: Vec<bool> = pred.data().iter().map(|&v| v > 0.0).collect();
    let gm: Vec<bool> = gt.data().iter().map(|&v| v > 0.0).collect();
    let pb = boundary_map(&pm, h, w);
    let gb = boundary_map(&gm, h, w);
    let n_p = pb.iter().filter(|&&b| b).count();
    let n_g = gb.iter().filter(|&&b| b).count();
    if n_p == 0 && n_g == 0 {
        return Ok(1.0);
    }
    if n_p == 0 || n_g == 0 {
        return Ok(0.0);
    }
    let gd = dilate(&gb, h, w, tolerance_px);
    let pd = dilate(&pb, h, w, tolerance_px);
    let matched_p = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let matched_g = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let precision = matched_p as f64 / n_p as f64;
    let recall = matched_g as f64 / n_g as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Mean of region and contour accuracy.
pub fn j_and_f(pred: &Tensor, gt: &Tensor, tolerance_px: usize) -> Result<f64> {
    Ok(0.5 * (jaccard(pred, gt)? + boundary_f(pred, gt, tolerance_px)?))
}

/// How forgetting is averaged over the training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMode {
    /// `CF_v = 1/v * sum_{i<=v} (F_vv - F_iv)`, the printed index range.
    Literal,
    /// `CF_v = 1/(N-v+1) * sum_{i>=v} (F_vv - F_iv)`: degradation of video
    /// `v` over every later training step.
    #[default]
    Retrospective,
}

impl std::str::FromStr for CfMode {
    type Err = DgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(CfMode::Literal),
            "retrospective" => Ok(CfMode::Retrospective),
            other => Err(DgtError::Config(format!("unknown cf mode `{other}`"))),
        }
    }
}

/// `F_{v,i}`: score of video `i` after training on `v` videos (0-based
/// indices here). Entries with `i <= v` are required; entries above the
/// diagonal are optional pre-training evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub video_ids: Vec<String>,
    entries: Vec<Vec<Option<f64>>>,
}

impl ScoreMatrix {
    pub fn new(video_ids: Vec<String>) -> Self {
        let n = video_ids.len();
        Self {
            video_ids,
            entries: vec![vec![None; n]; n],
        }
    }

    /// Builds from explicit rows; `rows[v][i]`.
    pub fn from_rows(video_ids: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n = video_ids.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(DgtError::dimension("score matrix", format!("{n}x{n}"), "ragged rows"));
        }
        let m = Self { video_ids, entries: rows };
        for row in &m.entries {
            for v in row.iter().flatten() {
                if !(0.0..=1.0).contains(v) {
                    return Err(DgtError::validation(format!("score {v} outside [0, 1]")));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }

    pub fn set(&mut self, step: usize, video: usize, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(DgtError::validation(format!("score {score} outside [0, 1]")));
        }
        self.entries[step][video] = Some(score);
        Ok(())
    }

    pub fn get(&self, step: usize, video: usize) -> Option<f64> {
        self.entries.get(step).and_then(|r| r.get(video)).copied().flatten()
    }

    fn require(&self, step: usize, video: usize) -> Result<f64> {
        self.get(step, video)
            .ok_or_else(|| DgtError::validation(format!("score matrix entry F[{},{}] is missing", step + 1, video + 1)))
    }

    pub fn is_lower_complete(&self) -> bool {
        (0..self.len()).all(|v| (0..=v).all(|i| self.get(v, i).is_some()))
    }

    /// CSV with one row per training step and one column per video; empty
    /// cells are undefined entries.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step");
        for id in &self.video_ids {
            s.push(',');
            s.push_str(id);
        }
        s.push('\n');
        for (v, row) in self.entries.iter().enumerate() {
            let _ = write!(s, "{}", v + 1);
            for e in row {
                s.push(',');
                if let Some(x) = e {
                    let _ = write!(s, "{x:.6}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| DgtError::validation("empty score matrix csv"))?;
        let ids: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            let row = line
                .split(',')
                .skip(1)
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>()
                            .map(Some)
                            .map_err(|e| DgtError::validation(format!("bad score `{c}`: {e}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(ids, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-step means `F_v` and their average `F`.
pub fn f_aggregate(m: &ScoreMatrix) -> Result<(Vec<f64>, f64)> {
    let n = m.len();
    if n == 0 {
        return Err(DgtError::validation("empty score matrix"));
    }
    let mut per_step = Vec::with_capacity(n);
    for v in 0..n {
        let mut sum = 0.0;
        for i in 0..=v {
            sum += m.require(v, i)?;
        }
        per_step.push(sum / (v + 1) as f64);
    }
    let overall = per_step.iter().sum::<f64>() / n as f64;
    Ok((per_step, overall))
}

/// Per-video forgetting `CF_v` and their average `CF`.
pub fn cf_aggregate(m: &ScoreMatrix, mode: CfMode) -> Result<(Vec<f64>, f64)> {
    let n = m.len();
    if n == 0 {
        return Err(DgtError::validation("empty score matrix"));
    }
    let mut per_video = Vec::with_capacity(n);
    for v in 0..n {
        let diag = m.require(v, v)?;
        let steps: Vec<usize> = match mode {
            CfMode::Literal => (0..=v).collect(),
            CfMode::Retrospective => (v..n).collect(),
        };
        let mut sum = 0.0;
        for &i in &steps {
            sum += diag - m.require(i, v)?;
        }
        per_video.push(sum / steps.len() as f64);
    }
    let overall = per_video.iter().sum::<f64>() / n as f64;
    Ok((per_video, overall))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = t(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &t(&[0.0, 0.0, 1.0, 1.0])).unwrap(), 0.0);
        let j = jaccard(&a, &t(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((j - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard(&t(&[0.0; 4]), &t(&[0.0; 4])).unwrap(), 1.0);
        assert!(jaccard(&a, &t(&[1.0; 3])).is_err());
    }

    #[test]
    fn boundary_f_examples() {
        let gt = Tensor::from_fn(&[1, 16, 16], |i| if (4..10).contains(&(i / 16)) && (3..12).contains(&(i % 16)) { 1.0 } else { 0.0 });
        assert_eq!(boundary_f(&gt, &gt, 1).unwrap(), 1.0);
        let empty = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(boundary_f(&empty, &gt, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&gt, &empty, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(default_tolerance(48, 64), 1);
        assert_eq!(default_tolerance(480, 854), 8);
    }

    #[test]
    fn j_and_f_is_mean() {
        let gt = Tensor::from_fn(&[1, 8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 });
        let pred = Tensor::from_fn(&[1, 8, 8], |i| if i % 8 < 5 { 1.0 } else { 0.0 });
        let jf = j_and_f(&pred, &gt, 1).unwrap();
        let expect = 0.5 * (jaccard(&pred, &gt).unwrap() + boundary_f(&pred, &gt, 1).unwrap());
        assert_eq!(jf, expect);
        assert_eq!(j_and_f(&gt, &gt, 0).unwrap(), 1.0);
    }

    fn worked() -> ScoreMatrix {
        ScoreMatrix::from_rows(
            vec!["a".into(), "b".into()],
            vec![vec![Some(0.9), None], vec![Some(0.8), Some(0.85)]],
        )
        .unwrap()
    }

    #[test]
    fn f_aggregate_examples() {
        let (fv, f) = f_aggregate(&worked()).unwrap();
        assert!((fv[0] - 0.9).abs() < 1e-12 && (fv[1] - 0.825).abs() < 1e-12);
        assert!((f - 0.8625).abs() < 1e-12);

        let one = ScoreMatrix::from_rows(vec!["a".into()], vec![vec![Some(0.7)]]).unwrap();
        assert_eq!(f_aggregate(&one).unwrap().1, 0.7);

        let c = ScoreMatrix::from_rows(vec!["a".into(), "b".into(), "c".into()], vec![vec![Some(0.4); 3]; 3]).unwrap();
        assert!((f_aggregate(&c).unwrap().1 - 0.4).abs() < 1e-12);

        let incomplete = ScoreMatrix::from_rows(vec!["a".into(), "b".into()], vec![vec![Some(0.9), None], vec![None, Some(0.8)]]).unwrap();
        assert!(f_aggregate(&incomplete).is_err());
    }

    #[test]
    fn cf_aggregate_examples() {
        let (cfv, cf) = cf_aggregate(&worked(), CfMode::Retrospective).unwrap();
        assert!((cfv[0] - 0.05).abs() < 1e-12 && cfv[1].abs() < 1e-12);
        assert!((cf - 0.025).abs() < 1e-12);

        assert!(cf_aggregate(&worked(), CfMode::Literal).is_err());
        let mut m = worked();
        m.set(0, 1, 0.65).unwrap();
        let (cfv, _) = cf_aggregate(&m, CfMode::Literal).unwrap();
        assert!((cfv[1] - 0.10).abs() < 1e-12);

        let flat = ScoreMatrix::from_rows(
            vec!["a".into(), "b".into()],
            vec![vec![Some(0.6), None], vec![Some(0.6), Some(0.9)]],
        )
        .unwrap();
        assert_eq!(cf_aggregate(&flat, CfMode::Retrospective).unwrap().1, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let m = worked();
        let back = ScoreMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.to_csv().lines().next().unwrap(), "step,a,b");
    }
}
