//! Base building, growing and test-time segmentation over a [`DgtTree`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::log::{Action, RunLog};
use super::train::{self, mix, name_hash, FisherConfig, TrainConfig};
use super::{AccessGuard, Video};
use crate::error::{DgtError, Result};
use crate::micronet::{self, NetworkParams};
use crate::tensor::Tensor;
use crate::tree::{DgtTree, NodeId, Phase};

/// Training and importance settings for the lifelong phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifelongConfig {
    pub train: TrainConfig,
    pub fisher: FisherConfig,
}

impl LifelongConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.fisher.n_samples == 0 {
            return Err(DgtError::Config("fisher.n_samples must be positive".into()));
        }
        Ok(())
    }
}

fn node_seed(cfg: &LifelongConfig, node: NodeId, video: &str, salt: u64) -> u64 {
    mix(mix(cfg.train.seed ^ salt) ^ mix(node.0) ^ name_hash(video))
}

fn score_at(tree: &DgtTree, id: NodeId, video: &Video) -> Result<f64> {
    train::reference_score(&tree.generate_network(id)?, video, train::tolerance_for(video))
}

/// Trains shared parameters and root blocks jointly on `videos`, stores
/// them, estimates the root importance and freezes the shared body. All
/// videos are assigned to the root.
pub fn pretrain_root(tree: &mut DgtTree, videos: &[Video], cfg: &LifelongConfig) -> Result<RunLog> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(DgtError::validation("pretraining needs at least one video"));
    }
    if tree.len() != 1 || tree.shared_frozen() {
        return Err(DgtError::State("pretraining needs a fresh root-only tree".into()));
    }
    let mut samples = Vec::new();
    for v in videos {
        v.validate()?;
        samples.extend(train::video_samples(v)?);
    }
    let root = tree.root();
    let mut params = tree.generate_network(root)?;
    let t = &cfg.train;
    train::train_all(&mut params, &samples, t.lr_pretrain, t.epochs_root, t, mix(t.seed ^ 0x5052))?;
    tree.set_shared(&params)?;
    tree.freeze_shared();
    let imp = train::estimate_importance(&params, &samples, 0, cfg.fisher.n_samples, mix(t.seed ^ 0x4649))?;
    tree.set_fisher(root, Some(imp))?;
    for v in videos {
        tree.assign_video(root, &v.id)?;
    }
    let mut log = RunLog::new();
    log.record(tree, root, None, Action::Pretrained, None, None)?;
    Ok(log)
}

/// One row of a growth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub step: usize,
    pub video: String,
    pub node: String,
    pub full_params: usize,
    pub inference_params: usize,
    pub num_nodes: usize,
}

/// Output of [`sequential_build`].
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub log: RunLog,
    /// `(depth, DOT)` after each depth pass.
    pub snapshots: Vec<(usize, String)>,
    /// Growth rows per depth pass, one per handled video.
    pub growth: Vec<(usize, Vec<GrowthRow>)>,
}

pub fn growth_csv(rows: &[GrowthRow]) -> String {
    let mut s = String::from("step,video,node,full_params,inference_params,num_nodes\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.video, r.node, r.full_params, r.inference_params, r.num_nodes
        );
    }
    s
}

/// Called after each video of the root pass with the tree and the video id.
pub type VideoHook<'a> = &'a mut dyn FnMut(&DgtTree, &str) -> Result<()>;

/// Coarse-to-fine clustering of the root's videos into child nodes, one
/// video at a time, level by level.
pub fn sequential_build(
    tree: &mut DgtTree,
    videos: &[Video],
    cfg: &LifelongConfig,
    guard: &AccessGuard,
    mut hook: Option<VideoHook<'_>>,
) -> Result<BuildReport> {
    cfg.validate()?;
    if !tree.shared_frozen() {
        return Err(DgtError::State("sequential building needs a pretrained tree".into()));
    }
    let by_id: HashMap<&str, &Video> = videos.iter().map(|v| (v.id.as_str(), v)).collect();
    let order: HashMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let mut report = BuildReport::default();
    let mut level = vec![tree.root()];
    let mut depth = 0;
    while !level.is_empty() {
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for &sub in &level {
            let mut ids: Vec<String> = tree
                .node(sub)?
                .videos
                .iter()
                .filter(|v| by_id.contains_key(v.as_str()))
                .cloned()
                .collect();
            ids.sort_by_key(|v| order[v.as_str()]);
            for id in &ids {
                handle_video(tree, sub, by_id[id.as_str()], cfg, guard, &mut report.log)?;
                let (full, inference) = tree.param_count();
                let owner = tree.owner_of(id).expect("assigned");
                rows.push(GrowthRow {
                    step: rows.len() + 1,
                    video: id.clone(),
                    node: tree.path_name(owner)?,
                    full_params: full,
                    inference_params: inference,
                    num_nodes: tree.len(),
                });
                if depth == 0 {
                    if let Some(h) = hook.as_mut() {
                        h(tree, id)?;
                    }
                }
            }
            prune_children(tree, sub, &by_id, &order, guard, &mut report.log)?;
            for &c in &tree.node(sub)?.children {
                let n = tree.node(c)?;
                let own = n.videos.iter().filter(|v| by_id.contains_key(v.as_str())).count();
                if own > 1 && n.depth < tree.max_depth() {
                    next.push(c);
                }
            }
        }
        report.snapshots.push((depth, crate::tree::to_dot(tree)?));
        report.growth.push((depth, rows));
        level = next;
        depth += 1;
    }
    tree.check_invariants()?;
    Ok(report)
}

fn handle_video(tree: &mut DgtTree, sub: NodeId, video: &Video, cfg: &LifelongConfig, guard: &AccessGuard, log: &mut RunLog) -> Result<()> {
    guard.enter(&video.id);
    let video = guard.read(video);
    let result = handle_video_inner(tree, sub, video, cfg, log);
    guard.leave();
    result
}

fn handle_video_inner(tree: &mut DgtTree, sub: NodeId, video: &Video, cfg: &LifelongConfig, log: &mut RunLog) -> Result<()> {
    let t = &cfg.train;
    let samples = train::video_samples(video)?;
    let tol = train::tolerance_for(video);
    let s_sub = score_at(tree, sub, video)?;
    let children = tree.node(sub)?.children.clone();
    let scores: Vec<f64> = children
        .par_iter()
        .map(|&c| score_at(tree, c, video))
        .collect::<Result<_>>()?;
    let mut best: Option<(NodeId, f64)> = None;
    for (&c, &s) in children.iter().zip(&scores) {
        if s > s_sub && best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    match best {
        None => {
            if tree.node(sub)?.depth >= tree.max_depth() {
                return log.record(tree, sub, Some(&video.id), Action::Assigned, Some(s_sub), Some(s_sub));
            }
            let c = tree.instantiate_child(sub, Phase::Base)?;
            let depth = tree.node(c)?.depth;
            let mut params = tree.generate_network(c)?;
            let seed = node_seed(cfg, c, &video.id, 1);
            train::train_suffix(&mut params, &samples, depth, t.node_lr(), t.epochs_node, t, None, seed)?;
            tree.store_trained_blocks(c, &params)?;
            let imp = train::estimate_importance(&params, &samples, depth, cfg.fisher.n_samples, seed)?;
            tree.set_fisher(c, Some(imp))?;
            tree.move_video(sub, c, &video.id)?;
            let post = train::reference_score(&params, video, tol)?;
            log.record(tree, c, Some(&video.id), Action::NewChild, Some(s_sub), Some(post))
        }
        Some((c, s_c)) => {
            tree.move_video(sub, c, &video.id)?;
            let depth = tree.node(c)?.depth;
            let saved = tree.generate_network(c)?;
            let mut params = saved.clone();
            let importance = if cfg.fisher.weighting { tree.node(c)?.fisher.clone() } else { None };
            let seed = node_seed(cfg, c, &video.id, 2);
            train::train_suffix(&mut params, &samples, depth, t.node_lr(), t.epochs_node, t, importance.as_ref(), seed)?;
            let post = train::reference_score(&params, video, tol)?;
            if post < s_sub {
                tree.move_video(c, sub, &video.id)?;
                return log.record(tree, sub, Some(&video.id), Action::Removed, Some(s_c), Some(post));
            }
            tree.store_trained_blocks(c, &params)?;
            let new = train::estimate_importance(&params, &samples, depth, cfg.fisher.n_samples, seed)?;
            let merged = train::merge_importance(tree.node(c)?.fisher.as_ref(), new)?;
            tree.set_fisher(c, Some(merged))?;
            log.record(tree, c, Some(&video.id), Action::Updated, Some(s_c), Some(post))
        }
    }
}

/// Drops leaf children whose mean reference score over their videos is
/// below the sub-root's on the same videos. Videos are read one at a time.
fn prune_children(
    tree: &mut DgtTree,
    sub: NodeId,
    by_id: &HashMap<&str, &Video>,
    order: &HashMap<&str, usize>,
    guard: &AccessGuard,
    log: &mut RunLog,
) -> Result<()> {
    for c in tree.node(sub)?.children.clone() {
        let node = tree.node(c)?;
        if !node.is_leaf() {
            continue;
        }
        let mut ids: Vec<&str> = node.videos.iter().map(String::as_str).filter(|v| by_id.contains_key(v)).collect();
        if ids.is_empty() {
            continue;
        }
        ids.sort_by_key(|v| order[v]);
        let (child_net, sub_net) = (tree.generate_network(c)?, tree.generate_network(sub)?);
        let (mut a, mut b) = (0.0, 0.0);
        for id in &ids {
            guard.enter(id);
            let v = guard.read(by_id[id]);
            let tol = train::tolerance_for(v);
            let r = train::reference_score(&child_net, v, tol).and_then(|x| Ok((x, train::reference_score(&sub_net, v, tol)?)));
            guard.leave();
            let (x, y) = r?;
            a += x;
            b += y;
        }
        let n = ids.len() as f64;
        if a / n < b / n {
            tree.discard_leaf(c)?;
            log.record(tree, sub, None, Action::Discarded, Some(b / n), Some(a / n))?;
        }
    }
    Ok(())
}

/// Result of [`grow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowOutcome {
    pub node: NodeId,
    /// Node returned by the search (the parent when a child was created).
    pub selected: NodeId,
    pub created: bool,
    pub pre_score: f64,
    pub post_score: f64,
    /// Set when training lowered the node's reference score.
    pub flagged: bool,
    pub shots_used: usize,
}

/// Adds a new video using only its first `shots` labelled frames.
pub fn grow(tree: &mut DgtTree, video: &Video, cfg: &LifelongConfig, shots: usize, guard: &AccessGuard) -> Result<(GrowOutcome, RunLog)> {
    cfg.validate()?;
    if !tree.shared_frozen() {
        return Err(DgtError::State("growing needs a pretrained tree".into()));
    }
    guard.enter(&video.id);
    let v = guard.read(video);
    let result = grow_inner(tree, v, cfg, shots);
    guard.leave();
    result
}

fn grow_inner(tree: &mut DgtTree, video: &Video, cfg: &LifelongConfig, shots: usize) -> Result<(GrowOutcome, RunLog)> {
    video.validate()?;
    if let Some(n) = tree.owner_of(&video.id) {
        return Err(DgtError::validation(format!("video `{}` already belongs to node {n}", video.id)));
    }
    let v = video.with_shots(shots)?;
    let t = &cfg.train;
    let tol = train::tolerance_for(&v);
    let samples = train::video_samples(&v)?;
    let (selected, _) = tree.greedy_search(|_, p| Ok(train::reference_score(p, &v, tol)? as f32))?;
    let pre = score_at(tree, selected, &v)?;
    let mut log = RunLog::new();
    let leaf = tree.node(selected)?.is_leaf();
    let (node, action, importance) = if leaf {
        let imp = if cfg.fisher.weighting { tree.node(selected)?.fisher.clone() } else { None };
        (selected, Action::Assigned, imp)
    } else {
        (tree.instantiate_child(selected, Phase::Grow)?, Action::NewChild, None)
    };
    tree.assign_video(node, &v.id)?;
    let depth = tree.node(node)?.depth;
    let mut params = tree.generate_network(node)?;
    let seed = node_seed(cfg, node, &v.id, 3);
    train::train_suffix(&mut params, &samples, depth, t.lr_grow, t.epochs_node, t, importance.as_ref(), seed)?;
    tree.store_trained_blocks(node, &params)?;
    let new = train::estimate_importance(&params, &samples, depth, cfg.fisher.n_samples, seed)?;
    let merged = train::merge_importance(tree.node(node)?.fisher.as_ref(), new)?;
    tree.set_fisher(node, Some(merged))?;
    let post = train::reference_score(&params, &v, tol)?;
    log.record(tree, node, Some(&v.id), action, Some(pre), Some(post))?;
    Ok((
        GrowOutcome {
            node,
            selected,
            created: !leaf,
            pre_score: pre,
            post_score: post,
            flagged: post < pre,
            shots_used: v.labelled_frames().len(),
        },
        log,
    ))
}

/// Predictions for one video.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub node: NodeId,
    pub selection_score: f64,
    /// One label map per frame (0 background, `k` object `k`).
    pub labels: Vec<Tensor>,
    /// Wall time per frame in milliseconds.
    pub frame_ms: Vec<f64>,
}

/// Node for `video`, chosen once from its reference frame.
pub fn select_node(tree: &DgtTree, video: &Video) -> Result<(NodeId, NetworkParams, f64)> {
    video.reference_masks()?;
    let tol = train::tolerance_for(video);
    let (node, s) = tree.greedy_search(|_, p| Ok(train::reference_score(p, video, tol)? as f32))?;
    Ok((node, tree.generate_network(node)?, s as f64))
}

/// Selects a node once and predicts every frame with its network.
pub fn segment_video(tree: &DgtTree, video: &Video) -> Result<Segmentation> {
    let (node, params, s) = select_node(tree, video)?;
    let refs = video.reference_masks()?;
    let mut labels = Vec::with_capacity(video.num_frames());
    let mut frame_ms = Vec::with_capacity(video.num_frames());
    for f in &video.frames {
        let start = Instant::now();
        let pred = micronet::forward_multi_object(&params, f, video.reference_frame(), refs)?;
        frame_ms.push(start.elapsed().as_secs_f64() * 1e3);
        labels.push(pred.labels);
    }
    Ok(Segmentation {
        node,
        selection_score: s,
        labels,
        frame_ms,
    })
}

/// Test-time score of a video: node selection once, then mean F over its
/// labelled non-reference frames.
pub fn evaluate_with_tree(tree: &DgtTree, video: &Video) -> Result<(NodeId, f64)> {
    let (node, params, _) = select_node(tree, video)?;
    Ok((node, train::evaluate_video(&params, video, train::tolerance_for(video))?))
}
