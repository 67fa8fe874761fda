//! Sequential multi-dataset training with a score matrix filled after every
//! video.

use serde::{Deserialize, Serialize};

use super::build::{self, BuildReport, GrowOutcome, LifelongConfig};
use super::log::{Action, RunLog};
use super::train::{self, mix, name_hash};
use super::{AccessGuard, Video};
use crate::error::{DgtError, Result};
use crate::metrics::ScoreMatrix;
use crate::tree::DgtTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Tree building on the first dataset, growing on the rest.
    #[default]
    Dgt,
    /// One network whose whole decoder is fine-tuned on every video in turn.
    Monolithic,
}

impl std::str::FromStr for ProtocolMode {
    type Err = DgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgt" => Ok(Self::Dgt),
            "monolithic" => Ok(Self::Monolithic),
            other => Err(DgtError::Config(format!("unknown protocol mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub matrix: ScoreMatrix,
    pub log: RunLog,
    pub build: Option<BuildReport>,
    pub grown: Vec<GrowOutcome>,
}

fn fill_row(tree: &DgtTree, all: &[&Video], step: usize, upper: bool, matrix: &mut ScoreMatrix) -> Result<()> {
    let n = if upper { all.len() } else { step + 1 };
    for (i, v) in all.iter().enumerate().take(n) {
        let (_, f) = build::evaluate_with_tree(tree, v)?;
        matrix.set(step, i, f)?;
    }
    Ok(())
}

/// Trains on `datasets` in order. A tree whose shared body is not yet
/// frozen is first pretrained on the first dataset. Row `v` of the matrix
/// holds the scores of videos `0..=v` right after video `v` was learnt.
pub fn run_sequential_protocol(
    tree: &mut DgtTree,
    datasets: &[Vec<Video>],
    cfg: &LifelongConfig,
    mode: ProtocolMode,
    guard: &AccessGuard,
) -> Result<ProtocolOutput> {
    run_protocol_with(tree, datasets, cfg, mode, guard, false)
}

/// As [`run_sequential_protocol`]; with `upper` every row also scores the
/// videos not trained yet, which the literal forgetting mode reads.
pub fn run_protocol_with(
    tree: &mut DgtTree,
    datasets: &[Vec<Video>],
    cfg: &LifelongConfig,
    mode: ProtocolMode,
    guard: &AccessGuard,
    upper: bool,
) -> Result<ProtocolOutput> {
    cfg.validate()?;
    if datasets.is_empty() || datasets.iter().any(Vec::is_empty) {
        return Err(DgtError::validation("every dataset needs at least one video"));
    }
    let all: Vec<&Video> = datasets.iter().flatten().collect();
    let mut ids: Vec<String> = all.iter().map(|v| v.id.clone()).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(DgtError::validation("video ids must be unique across datasets"));
    }
    let mut matrix = ScoreMatrix::new(all.iter().map(|v| v.id.clone()).collect());
    let mut log = RunLog::new();
    if !tree.shared_frozen() {
        log.extend(build::pretrain_root(tree, &datasets[0], cfg)?);
    }
    let mut out = ProtocolOutput {
        matrix: ScoreMatrix::new(Vec::new()),
        log: RunLog::new(),
        build: None,
        grown: Vec::new(),
    };
    let mut step = 0;
    match mode {
        ProtocolMode::Dgt => {
            let first = &datasets[0];
            let (start, rest) = if tree.len() == 1 {
                let last = first.len() - 1;
                let mut hook = |t: &DgtTree, id: &str| -> Result<()> {
                    let pos = first.iter().position(|v| v.id == id).expect("video of the dataset");
                    if pos < last {
                        fill_row(t, &all, pos, upper, &mut matrix)?;
                    }
                    Ok(())
                };
                let report = build::sequential_build(tree, first, cfg, guard, Some(&mut hook))?;
                fill_row(tree, &all, last, upper, &mut matrix)?;
                log.extend(report.log.clone());
                out.build = Some(report);
                (first.len(), &datasets[1..])
            } else {
                (0, datasets)
            };
            step += start;
            for v in rest.iter().flatten() {
                let shots = v.labelled_frames().len();
                let (outcome, l) = build::grow(tree, v, cfg, shots, guard)?;
                log.extend(l);
                out.grown.push(outcome);
                fill_row(tree, &all, step, upper, &mut matrix)?;
                step += 1;
            }
        }
        ProtocolMode::Monolithic => {
            if tree.len() != 1 {
                return Err(DgtError::State("the monolithic baseline needs a root-only tree".into()));
            }
            let root = tree.root();
            let t = &cfg.train;
            for (d, dataset) in datasets.iter().enumerate() {
                let lr = if d == 0 { t.node_lr() } else { t.lr_grow };
                for v in dataset {
                    guard.enter(&v.id);
                    let video = guard.read(v);
                    let samples = train::video_samples(video);
                    guard.leave();
                    let mut params = tree.generate_network(root)?;
                    let seed = mix(mix(t.seed ^ 4) ^ name_hash(&v.id));
                    train::train_suffix(&mut params, &samples?, 0, lr, t.epochs_node, t, None, seed)?;
                    tree.store_trained_blocks(root, &params)?;
                    if tree.owner_of(&v.id).is_none() {
                        tree.assign_video(root, &v.id)?;
                    }
                    log.record(tree, root, Some(&v.id), Action::Updated, None, None)?;
                    fill_row(tree, &all, step, upper, &mut matrix)?;
                    step += 1;
                }
            }
        }
    }
    if !matrix.is_lower_complete() {
        return Err(DgtError::Invariant("score matrix is missing entries".into()));
    }
    out.matrix = matrix;
    out.log = log;
    Ok(out)
}
