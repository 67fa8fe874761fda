//! The `dgt` experiment runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{GrayImage, Luma};

use crate::config::{ExperimentConfig, Role};
use crate::error::{DgtError, Result};
use crate::lifelong::{self, AccessGuard, LifelongConfig, ProtocolMode, RunLog, Video};
use crate::metrics::{self, CfMode, ScoreMatrix};
use crate::micronet::NetworkParams;
use crate::tensor::Tensor;
use crate::tree::{self, DgtTree};

#[derive(Debug, Parser)]
#[command(name = "dgt", version, about = "Lifelong video object segmentation with a growing decoder tree")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the generated domains as PNG folder datasets.
    GenTasks(Common),
    /// Train the shared body and root blocks on the train domains.
    Pretrain(Common),
    /// Pretrain (unless a checkpoint is given) and build the base tree.
    BuildBase(Common),
    /// Add the grow domains to a built tree.
    Grow(Common),
    /// Per-video metrics and latency on the test domains.
    Eval(Common),
    /// Write the tree topology as DOT or JSON.
    ExportTree {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "dot")]
        format: ExportFormat,
    },
    /// Write predicted label maps for the test domains.
    Segment(Common),
    /// Sequential training over the train domains with a score matrix.
    RunProtocol {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dgt")]
        mode: ProtocolMode,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExportFormat {
    Dot,
    Json,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub cf_mode: Option<CfMode>,
    /// Tree checkpoint to read; defaults to `<out>/tree.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    checkpoint: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<Run> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.shots {
            cfg.shots = Some(k);
        }
        if let Some(m) = self.cf_mode {
            cfg.eval.cf_mode = m;
        }
        if let Some(o) = &self.out {
            cfg.output.directory = o.clone();
        }
        cfg.validate()?;
        let out = cfg.output.directory.clone();
        fs::create_dir_all(&out)?;
        let checkpoint = self.checkpoint.clone().unwrap_or_else(|| out.join("tree.json"));
        Ok(Run { cfg, out, checkpoint })
    }
}

fn init_threads(cfg: &ExperimentConfig) -> Result<()> {
    let env = match std::env::var("DGT_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| DgtError::Config(format!("DGT_THREADS=`{v}` is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = env.or(cfg.threads) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks(c) => gen_tasks(&c.resolve()?),
        Command::Pretrain(c) => pretrain(&c.resolve()?),
        Command::BuildBase(c) => build_base(&c.resolve()?, c.checkpoint.is_some()),
        Command::Grow(c) => grow(&c.resolve()?),
        Command::Eval(c) => eval(&c.resolve()?),
        Command::ExportTree { common, format } => export_tree(&common.resolve()?, format),
        Command::Segment(c) => segment(&c.resolve()?),
        Command::RunProtocol { common, mode } => run_protocol(&common.resolve()?, mode),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenTasks(c) | Command::Pretrain(c) | Command::BuildBase(c) | Command::Grow(c) | Command::Eval(c) | Command::Segment(c) => {
            ExperimentConfig::load(&c.config).and_then(|cfg| init_threads(&cfg))
        }
        Command::ExportTree { common, .. } | Command::RunProtocol { common, .. } => {
            ExperimentConfig::load(&common.config).and_then(|cfg| init_threads(&cfg))
        }
    }
    .and_then(|_| run(cli));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn flat(datasets: Vec<Vec<Video>>) -> Vec<Video> {
    datasets.into_iter().flatten().collect()
}

fn train_videos(cfg: &ExperimentConfig) -> Result<Vec<Video>> {
    let v = flat(cfg.datasets(Role::Train)?);
    if v.is_empty() {
        return Err(DgtError::validation("no domain has role `train`"));
    }
    Ok(v)
}

fn fresh_tree(cfg: &ExperimentConfig) -> Result<DgtTree> {
    DgtTree::from_params(cfg.tree_config(), NetworkParams::init(&cfg.network, cfg.seed)?)
}

fn load_tree(run: &Run) -> Result<DgtTree> {
    let t = tree::load(&run.checkpoint)?;
    if *t.net_config() != run.cfg.network {
        return Err(DgtError::Config("checkpoint network differs from the configured one".into()));
    }
    Ok(t)
}

fn gen_tasks(run: &Run) -> Result<()> {
    let dir = run.out.join("tasks");
    for (i, d) in run.cfg.domains.iter().enumerate() {
        if d.folder.is_some() {
            continue;
        }
        let videos = run.cfg.domain_videos(i)?;
        let name = run.cfg.domain_spec(d)?.name;
        let target = dir.join(&name);
        fs::create_dir_all(&target)?;
        crate::taskgen::write_folder_dataset(&videos, &target)?;
        println!("{name}: {} videos", videos.len());
    }
    Ok(())
}

fn pretrain(run: &Run) -> Result<()> {
    let videos = train_videos(&run.cfg)?;
    let mut t = fresh_tree(&run.cfg)?;
    let log = lifelong::pretrain_root(&mut t, &videos, &run.cfg.lifelong())?;
    tree::save(&t, &run.checkpoint)?;
    write(&run.out.join("pretrain_log.jsonl"), &log.to_jsonl())?;
    println!("pretrained on {} videos -> {}", videos.len(), run.checkpoint.display());
    Ok(())
}

fn build_base(run: &Run, from_checkpoint: bool) -> Result<()> {
    let videos = train_videos(&run.cfg)?;
    let cfg = run.cfg.lifelong();
    let mut log = RunLog::new();
    let mut t = if from_checkpoint {
        load_tree(run)?
    } else {
        let mut t = fresh_tree(&run.cfg)?;
        log.extend(lifelong::pretrain_root(&mut t, &videos, &cfg)?);
        t
    };
    let guard = AccessGuard::new();
    let report = lifelong::sequential_build(&mut t, &videos, &cfg, &guard, None)?;
    for (depth, dot) in &report.snapshots {
        write(&run.out.join(format!("snapshot_depth{depth}.dot")), dot)?;
    }
    for (depth, rows) in &report.growth {
        write(&run.out.join(format!("growth_depth{depth}.csv")), &lifelong::growth_csv(rows))?;
    }
    log.extend(report.log);
    write(&run.out.join("build_log.jsonl"), &log.to_jsonl())?;
    tree::save(&t, &run.out.join("tree.json"))?;
    let (full, inference) = t.param_count();
    println!("{} nodes, {full} stored parameters, {inference} per inference", t.len());
    Ok(())
}

fn grow(run: &Run) -> Result<()> {
    let mut t = load_tree(run)?;
    let videos = flat(run.cfg.datasets(Role::Grow)?);
    if videos.is_empty() {
        return Err(DgtError::validation("no domain has role `grow`"));
    }
    let shots = run.cfg.shots.unwrap_or(run.cfg.train.few_shot_k);
    let cfg = run.cfg.lifelong();
    let guard = AccessGuard::new();
    let mut log = RunLog::new();
    let mut csv = String::from("video,node,path,created,pre_score,post_score,flagged,shots_used\n");
    for v in &videos {
        let (o, l) = lifelong::grow(&mut t, v, &cfg, shots, &guard)?;
        log.extend(l);
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{},{}",
            v.id,
            o.node,
            t.path_name(o.node)?,
            o.created,
            o.pre_score,
            o.post_score,
            o.flagged,
            o.shots_used
        );
    }
    write(&run.out.join("grown.csv"), &csv)?;
    write(&run.out.join("grow_log.jsonl"), &log.to_jsonl())?;
    tree::save(&t, &run.out.join("tree.json"))?;
    println!("grew {} videos with {shots} shots; tree has {} nodes", videos.len(), t.len());
    Ok(())
}

fn eval_videos(cfg: &ExperimentConfig) -> Result<Vec<Video>> {
    for role in [Role::Test, Role::Grow, Role::Train] {
        let v = flat(cfg.datasets(role)?);
        if !v.is_empty() {
            return Ok(v);
        }
    }
    Err(DgtError::validation("no domains configured"))
}

/// Mean region and contour accuracy over the labelled non-reference frames
/// and objects; the reference frame alone when nothing else is labelled.
pub fn video_metrics(labels: &[Tensor], video: &Video, tolerance: usize) -> Result<(f64, f64)> {
    let mut frames: Vec<usize> = video
        .labelled_frames()
        .into_iter()
        .filter(|&t| t != video.reference_index)
        .collect();
    if frames.is_empty() {
        frames.push(video.reference_index);
    }
    let (mut j, mut f, mut n) = (0.0, 0.0, 0.0);
    for t in frames {
        let gts = video.masks[t].as_ref().expect("labelled frame");
        for (k, gt) in gts.iter().enumerate() {
            let pred = labels[t].map(|l| if l == (k + 1) as f32 { 1.0 } else { 0.0 });
            j += metrics::jaccard(&pred, gt)?;
            f += metrics::boundary_f(&pred, gt, tolerance)?;
            n += 1.0;
        }
    }
    Ok((j / n, f / n))
}

/// `(mean, p95)` of per-frame times.
pub fn latency_summary(ms: &[f64]) -> (f64, f64) {
    if ms.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = ms.to_vec();
    s.sort_by(f64::total_cmp);
    let p95 = s[((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    (s.iter().sum::<f64>() / s.len() as f64, p95)
}

fn eval(run: &Run) -> Result<()> {
    let t = load_tree(run)?;
    let videos = eval_videos(&run.cfg)?;
    let mut csv = String::from("video,domain,node,path,J,F,JF\n");
    let mut times = Vec::new();
    let (mut jm, mut fm) = (0.0, 0.0);
    for v in &videos {
        let seg = lifelong::segment_video(&t, v)?;
        let (_, h, w) = v.frames[0].chw();
        let tol = run.cfg.eval.tolerance_px.unwrap_or_else(|| metrics::default_tolerance(h, w));
        let (j, f) = video_metrics(&seg.labels, v, tol)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{j:.6},{f:.6},{:.6}",
            v.id,
            v.domain_tag,
            seg.node,
            t.path_name(seg.node)?,
            0.5 * (j + f)
        );
        times.extend(seg.frame_ms);
        jm += j / videos.len() as f64;
        fm += f / videos.len() as f64;
    }
    write(&run.out.join("metrics.csv"), &csv)?;
    let (mean, p95) = latency_summary(&times);
    write(
        &run.out.join("latency.csv"),
        &format!("frames,nodes,mean_ms,p95_ms\n{},{},{mean:.4},{p95:.4}\n", times.len(), t.len()),
    )?;
    println!("{} videos: J {jm:.4} F {fm:.4} J&F {:.4}", videos.len(), 0.5 * (jm + fm));
    println!("latency per frame: mean {mean:.3} ms, p95 {p95:.3} ms");
    let matrix = run.out.join("score_matrix.csv");
    if matrix.exists() {
        let m = ScoreMatrix::from_csv(&fs::read_to_string(&matrix)?)?;
        report_aggregates(&m, run)?;
    }
    Ok(())
}

/// Writes `aggregates.csv` and `per_step.csv` for both forgetting modes.
pub fn aggregates_csv(m: &ScoreMatrix) -> Result<(String, String)> {
    let (fv, f) = metrics::f_aggregate(m)?;
    let (lit_v, lit) = metrics::cf_aggregate(m, CfMode::Literal)?;
    let (ret_v, ret) = metrics::cf_aggregate(m, CfMode::Retrospective)?;
    let agg = format!("cf_mode,F,CF\nliteral,{f:.6},{lit:.6}\nretrospective,{f:.6},{ret:.6}\n");
    let mut steps = String::from("step,video,F_v,CF_literal,CF_retrospective\n");
    for v in 0..m.len() {
        let _ = writeln!(steps, "{v},{},{:.6},{:.6},{:.6}", m.video_ids[v], fv[v], lit_v[v], ret_v[v]);
    }
    Ok((agg, steps))
}

fn report_aggregates(m: &ScoreMatrix, run: &Run) -> Result<()> {
    let (agg, steps) = aggregates_csv(m)?;
    write(&run.out.join("aggregates.csv"), &agg)?;
    write(&run.out.join("per_step.csv"), &steps)?;
    let (_, f) = metrics::f_aggregate(m)?;
    let (_, cf) = metrics::cf_aggregate(m, run.cfg.eval.cf_mode)?;
    println!("F {f:.4} CF {cf:.4} ({:?})", run.cfg.eval.cf_mode);
    Ok(())
}

fn export_tree(run: &Run, format: ExportFormat) -> Result<()> {
    let t = load_tree(run)?;
    let path = match format {
        ExportFormat::Dot => run.out.join("tree.dot"),
        ExportFormat::Json => run.out.join("topology.json"),
    };
    match format {
        ExportFormat::Dot => t.export_dot(&path)?,
        ExportFormat::Json => t.export_json(&path)?,
    }
    println!("{}", path.display());
    Ok(())
}

fn segment(run: &Run) -> Result<()> {
    let t = load_tree(run)?;
    let videos = eval_videos(&run.cfg)?;
    let mut csv = String::from("video,node,path,selection_score\n");
    for v in &videos {
        let seg = lifelong::segment_video(&t, v)?;
        let dir = run.out.join("segment").join(&v.id);
        fs::create_dir_all(&dir)?;
        for (i, l) in seg.labels.iter().enumerate() {
            let (_, h, w) = l.chw();
            let d = l.data();
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([d[y as usize * w + x as usize] as u8]));
            img.save(dir.join(format!("{i:05}.png")))?;
        }
        let _ = writeln!(csv, "{},{},{},{:.6}", v.id, seg.node, t.path_name(seg.node)?, seg.selection_score);
    }
    write(&run.out.join("segment.csv"), &csv)?;
    println!("segmented {} videos", videos.len());
    Ok(())
}

fn run_protocol(run: &Run, mode: ProtocolMode) -> Result<()> {
    let datasets = run.cfg.datasets(Role::Train)?;
    if datasets.is_empty() {
        return Err(DgtError::validation("no domain has role `train`"));
    }
    let cfg: LifelongConfig = run.cfg.lifelong();
    let mut t = fresh_tree(&run.cfg)?;
    let guard = AccessGuard::new();
    let out = lifelong::run_protocol_with(&mut t, &datasets, &cfg, mode, &guard, true)?;
    out.matrix.write_csv(&run.out.join("score_matrix.csv"))?;
    write(&run.out.join("protocol_log.jsonl"), &out.log.to_jsonl())?;
    if let Some(b) = &out.build {
        for (depth, rows) in &b.growth {
            write(&run.out.join(format!("growth_depth{depth}.csv")), &lifelong::growth_csv(rows))?;
        }
    }
    tree::save(&t, &run.out.join("tree.json"))?;
    report_aggregates(&out.matrix, run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p95_picks_the_nearest_rank() {
        let ms: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(latency_summary(&ms), (10.5, 19.0));
        assert_eq!(latency_summary(&[3.0]), (3.0, 3.0));
    }

    #[test]
    fn bad_arguments_exit_with_validation_code() {
        assert_eq!(main_with(["dgt", "eval"]), 1);
        assert_eq!(main_with(["dgt", "frobnicate"]), 1);
        assert_eq!(main_with(["dgt", "--help"]), 0);
        assert_eq!(main_with(["dgt", "eval", "--config", "/nonexistent/x.toml"]), 2);
    }

    #[test]
    fn perfect_labels_score_one() {
        let v = crate::taskgen::generate_domain(&crate::taskgen::DomainSpec::ytlike(), 1, 2)
            .unwrap()
            .remove(0)
            .video;
        let labels: Vec<Tensor> = (0..v.num_frames())
            .map(|t| v.label_map(t).unwrap_or_else(|| Tensor::zeros(&[1, 48, 64])))
            .collect();
        assert_eq!(video_metrics(&labels, &v, 1).unwrap(), (1.0, 1.0));
    }
}
