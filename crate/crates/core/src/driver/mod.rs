//! Command drivers: dataset generation, per-fold meta-training, method
//! evaluation, the rank-iteration sweep, and the 1-shot study. The CLI
//! binary is a thin argv wrapper around these.

pub mod report;
pub mod svg;

pub use report::{mean_std, ReportRow, RunReport, REPORT_COLUMNS};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::engine::{predict_query, run_method, AdaptConfig, AdaptTrace, Method};
use crate::episodes::{
    dataset, replicate_support, BaseEpisodeStream, ClassTable, Dataset, DatasetConfig, Episode,
    GenConfig, GenSummary,
};
use crate::error::{Error, Result};
use crate::lora::LoraTargetHost;
use crate::loss::FocalConfig;
use crate::metrics::{background_iou, miou};
use crate::refnet::{meta_train, MetaTrainConfig, ModelConfig, ModelState};
use crate::util::mix_seed;

fn gen_config(cfg: &RunConfig) -> GenConfig {
    GenConfig {
        image_size: cfg.dataset.image_size,
        noise: cfg.dataset.noise,
        distractors_max: cfg.dataset.distractors_max,
        query_policy: cfg.dataset.query_policy,
        ..GenConfig::default()
    }
}

fn model_config(cfg: &RunConfig, fold: usize) -> ModelConfig {
    ModelConfig {
        variant: cfg.model.variant,
        channels: cfg.model.channels,
        feature_dim: cfg.model.feature_dim,
        blocks: cfg.model.blocks,
        stride: cfg.model.stride,
        patch_size: cfg.model.patch_size,
        image_size: cfg.dataset.image_size,
        seed: mix_seed(&[cfg.model.seed, fold as u64]),
    }
}

fn loss_config(cfg: &RunConfig) -> FocalConfig {
    FocalConfig { gamma: cfg.eval.gamma, weight_mode: cfg.eval.weight_mode }
}

fn adapt_config(cfg: &RunConfig, method: Method) -> AdaptConfig {
    AdaptConfig {
        method,
        iterations: cfg.eval.iterations,
        rank: cfg.eval.rank,
        alpha: cfg.eval.alpha,
        learning_rate: cfg.eval.lr,
        select: cfg.eval.select,
        support_gradients: cfg.eval.support_gradients,
        loss: loss_config(cfg),
        seed: mix_seed(&[cfg.dataset.seed, method as u64]),
        track_iteration_miou: false,
    }
}

pub fn checkpoint_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("fold{}", fold))
}

// ---------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct GenOutcome {
    pub summary: GenSummary,
    pub table: String,
}

pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<GenOutcome> {
    let ds_cfg = DatasetConfig::standard(
        cfg.dataset.seed,
        gen_config(cfg),
        cfg.dataset.cells.clone(),
        cfg.dataset.episodes_per_fold,
        cfg.dataset.runs,
    );
    let summary = dataset::generate(&cfg.dataset.dir, &ds_cfg, force)?;
    let table = summary.table(&ClassTable::standard());
    Ok(GenOutcome { summary, table })
}

// ---------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct MetaOutcome {
    /// Per fold: (fold index, per-step losses, checkpoint directory).
    pub folds: Vec<(usize, Vec<f64>, PathBuf)>,
}

pub fn cmd_meta_train(cfg: &RunConfig) -> Result<MetaOutcome> {
    let ds = Dataset::open(&cfg.dataset.dir)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut folds = Vec::new();
    for &fold in &cfg.eval.folds {
        let split = ds.fold_split(fold)?;
        let stream = BaseEpisodeStream::new(
            split,
            ds.class_table().clone(),
            gen_config(cfg),
            cfg.meta.n_way,
            cfg.meta.k_shot,
            mix_seed(&[cfg.meta.seed, fold as u64]),
        );
        if !stream.audit_pools() {
            return Err(Error::Contract {
                op: "meta_train",
                detail: format!("fold {} base/novel pools overlap", fold),
            });
        }
        let mut model = ModelState::init(model_config(cfg, fold))?;
        let mt = MetaTrainConfig { steps: cfg.meta.steps, lr: cfg.meta.lr, loss: loss_config(cfg) };
        let losses = meta_train(&mut model, stream, &mt)?;

        let ckpt = checkpoint_dir(&cfg.out_dir, fold);
        model.save_checkpoint(&ckpt)?;

        let mut csv = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", i, l);
        }
        std::fs::write(cfg.out_dir.join(format!("meta_loss_fold{}.csv", fold)), csv)?;
        folds.push((fold, losses, ckpt));
    }
    Ok(MetaOutcome { folds })
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub run: usize,
    pub miou: f64,
    pub bg_iou: f64,
    pub wall_ms: f64,
    pub trace: AdaptTrace,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    episode_id: String,
    method: Method,
    fold: usize,
    run: usize,
    rank: usize,
    iterations: usize,
    per_pass_loss: Vec<f64>,
    per_iteration_miou: Vec<f64>,
    wall_ms_per_pass: Vec<f64>,
    replicated: bool,
    miou: f64,
    bg_iou: f64,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: RunReport,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub trace_path: PathBuf,
}

/// Evaluate one episode under one method; adapter/optimizer state is
/// created fresh inside `run_method`, so episodes are independent.
pub fn eval_episode(
    model: &ModelState,
    episode: &Episode,
    acfg: &AdaptConfig,
) -> Result<EpisodeOutcome> {
    let started = Instant::now();
    let (adapted, trace) = run_method(model, episode, acfg)?;
    let (mask, _) = predict_query(&adapted, episode)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let classes = episode.local_classes();
    Ok(EpisodeOutcome {
        episode_id: episode.id.clone(),
        run: 0,
        miou: miou(&mask, &episode.query.1, &classes)?,
        bg_iou: background_iou(&mask, &episode.query.1)?,
        wall_ms,
        trace,
    })
}

/// Evaluate a method over per-run episode lists, fanning episodes out
/// across worker threads and merging deterministically by index.
fn eval_method_runs(
    model: &ModelState,
    runs: &[Vec<Episode>],
    acfg: &AdaptConfig,
) -> Result<Vec<Vec<EpisodeOutcome>>> {
    runs.iter()
        .enumerate()
        .map(|(run_idx, episodes)| {
            let outcomes: Result<Vec<EpisodeOutcome>> = episodes
                .par_iter()
                .map(|ep| eval_episode(model, ep, acfg))
                .collect();
            let mut outcomes = outcomes?;
            for o in &mut outcomes {
                o.run = run_idx;
            }
            Ok(outcomes)
        })
        .collect()
}

fn load_runs(ds: &Dataset, cfg: &RunConfig, fold: usize) -> Result<Vec<Vec<Episode>>> {
    let all = ds.load_episodes(fold, cfg.eval.n_way, cfg.eval.k_shot)?;
    let mut runs: Vec<Vec<Episode>> = vec![Vec::new(); cfg.eval.runs];
    for ep_rec in ds.episode_records(fold, cfg.eval.n_way, cfg.eval.k_shot)? {
        if ep_rec.run < cfg.eval.runs {
            if let Some(ep) = all.iter().find(|e| e.id == ep_rec.id) {
                if runs[ep_rec.run].len() < cfg.eval.episodes {
                    runs[ep_rec.run].push(ep.clone());
                }
            }
        }
    }
    for (i, r) in runs.iter().enumerate() {
        if r.len() < cfg.eval.episodes {
            return Err(Error::Data(format!(
                "fold {} run {} has {} episodes, eval wants {}",
                fold,
                i,
                r.len(),
                cfg.eval.episodes
            )));
        }
    }
    Ok(runs)
}

fn trainable_for(model: &ModelState, cfg: &RunConfig, method: Method) -> Result<(usize, f64)> {
    let total = model.total_param_count() as f64;
    match method {
        Method::Vanilla => Ok((0, 0.0)),
        Method::DecoderFt => {
            let count: usize = model
                .decoder_param_ids()
                .iter()
                .map(|id| model.store.get(*id).value.numel())
                .sum();
            Ok((count, 100.0 * count as f64 / total))
        }
        Method::Tap => {
            let targets = model.lora_targets(model.cfg.variant.default_policy())?;
            let count: usize = targets.iter().map(|t| cfg.eval.rank * (t.m + t.n)).sum();
            Ok((count, 100.0 * count as f64 / total))
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let ds = Dataset::open(&cfg.dataset.dir)?;
    if !ds.has_cell(cfg.eval.n_way, cfg.eval.k_shot) {
        return Err(Error::Data(format!(
            "dataset lacks the {}x{} cell; regenerate with it in dataset.cells",
            cfg.eval.n_way, cfg.eval.k_shot
        )));
    }
    // Deltas are always taken against vanilla, so vanilla always runs.
    let mut methods = vec![Method::Vanilla];
    for m in &cfg.eval.methods {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let trace_path = cfg.out_dir.join("trace.jsonl");
    let mut trace_file = std::fs::File::create(&trace_path)?;

    let mut rows = Vec::new();
    for &fold in &cfg.eval.folds {
        let model = ModelState::load_checkpoint(&checkpoint_dir(&cfg.out_dir, fold))?;
        let runs = load_runs(&ds, cfg, fold)?;

        let mut vanilla_mean = 0.0;
        for &method in &methods {
            let acfg = adapt_config(cfg, method);
            let per_run = eval_method_runs(&model, &runs, &acfg)?;

            let run_means: Vec<f64> = per_run
                .iter()
                .map(|outs| outs.iter().map(|o| o.miou).sum::<f64>() / outs.len() as f64)
                .collect();
            let (miou_mean, miou_std) = mean_std(&run_means);
            let all: Vec<&EpisodeOutcome> = per_run.iter().flatten().collect();
            let bg_mean = all.iter().map(|o| o.bg_iou).sum::<f64>() / all.len() as f64;
            let wall_mean = all.iter().map(|o| o.wall_ms).sum::<f64>() / all.len() as f64;

            for o in &all {
                let rec = TraceRecord {
                    episode_id: o.episode_id.clone(),
                    method,
                    fold,
                    run: o.run,
                    rank: o.trace.rank,
                    iterations: o.trace.iterations,
                    per_pass_loss: o.trace.passes.iter().map(|p| p.loss).collect(),
                    per_iteration_miou: o.trace.iteration_miou.clone(),
                    wall_ms_per_pass: o.trace.passes.iter().map(|p| p.wall_ms).collect(),
                    replicated: o.trace.replicated,
                    miou: o.miou,
                    bg_iou: o.bg_iou,
                };
                let line = serde_json::to_string(&rec)
                    .map_err(|e| Error::Data(format!("trace encode: {}", e)))?;
                writeln!(trace_file, "{}", line)?;
            }

            if method == Method::Vanilla {
                vanilla_mean = miou_mean;
            }
            let (trainable, pct) = trainable_for(&model, cfg, method)?;
            rows.push(ReportRow {
                method,
                fold,
                n_way: cfg.eval.n_way,
                k_shot: cfg.eval.k_shot,
                rank: if method == Method::Tap { cfg.eval.rank } else { 0 },
                iterations: if method == Method::Vanilla { 0 } else { cfg.eval.iterations },
                miou_mean,
                miou_std,
                delta_vs_vanilla: (method != Method::Vanilla).then(|| miou_mean - vanilla_mean),
                bg_iou_mean: bg_mean,
                trainable_params: trainable,
                trainable_pct: pct,
                wall_ms_per_episode: wall_mean,
            });
        }
    }

    let report = RunReport { config: cfg.to_flat_string(), rows };
    let (csv_path, json_path) = report.write(&cfg.out_dir)?;
    Ok(EvalOutcome { report, csv_path, json_path, trace_path })
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

/// Pinned sweep CSV schema.
pub const SWEEP_COLUMNS: [&str; 4] = ["rank", "iteration", "mean_miou", "status"];
pub const PARAMS_COLUMNS: [&str; 4] = ["rank", "trainable_params", "pct_of_total", "legal"];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub rank: usize,
    pub iteration: usize,
    pub mean_miou: Option<f64>,
    pub status: &'static str,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
    pub params_path: PathBuf,
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    let ds = Dataset::open(&cfg.dataset.dir)?;
    let fold = cfg.sweep.fold;
    let model = ModelState::load_checkpoint(&checkpoint_dir(&cfg.out_dir, fold))?;
    let all = ds.load_episodes(fold, cfg.eval.n_way, cfg.eval.k_shot)?;
    if all.len() < cfg.sweep.episodes {
        return Err(Error::Data(format!(
            "sweep wants {} episodes, fold {} cell has {}",
            cfg.sweep.episodes,
            fold,
            all.len()
        )));
    }
    let episodes: Vec<Episode> = all.into_iter().take(cfg.sweep.episodes).collect();

    let targets = model.lora_targets(model.cfg.variant.default_policy())?;
    let min_dim = targets.iter().map(|t| t.m.min(t.n)).min().unwrap_or(0);
    let total = model.total_param_count() as f64;
    let t_iters = cfg.sweep.iterations;

    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &rank in &cfg.sweep.ranks {
        if rank > min_dim {
            // Skipped with a warning row per iteration so the grid stays
            // rectangular.
            for t in 0..=t_iters {
                rows.push(SweepRow {
                    rank,
                    iteration: t,
                    mean_miou: None,
                    status: "skipped_rank_exceeds_min_dim",
                });
            }
            continue;
        }
        let acfg = AdaptConfig {
            method: Method::Tap,
            iterations: t_iters,
            rank,
            track_iteration_miou: true,
            ..adapt_config(cfg, Method::Tap)
        };
        let outcomes: Result<Vec<EpisodeOutcome>> = episodes
            .par_iter()
            .map(|ep| eval_episode(&model, ep, &acfg))
            .collect();
        let outcomes = outcomes?;
        let mut points = Vec::with_capacity(t_iters + 1);
        for t in 0..=t_iters {
            let mean = outcomes
                .iter()
                .map(|o| o.trace.iteration_miou[t])
                .sum::<f64>()
                / outcomes.len() as f64;
            rows.push(SweepRow { rank, iteration: t, mean_miou: Some(mean), status: "ok" });
            points.push((t as f64, mean));
        }
        series.push((format!("r={}", rank), points));
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = SWEEP_COLUMNS.join(",");
    csv.push('\n');
    for r in &rows {
        let miou = r.mean_miou.map(|m| format!("{:.6}", m)).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{}", r.rank, r.iteration, miou, r.status);
    }
    let csv_path = cfg.out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;

    let mut params = PARAMS_COLUMNS.join(",");
    params.push('\n');
    for &rank in &cfg.sweep.ranks {
        let count: usize = targets.iter().map(|t| rank * (t.m + t.n)).sum();
        let _ = writeln!(
            params,
            "{},{},{:.4},{}",
            rank,
            count,
            100.0 * count as f64 / total,
            rank <= min_dim
        );
    }
    let params_path = cfg.out_dir.join("params.csv");
    std::fs::write(&params_path, params)?;

    let svg = svg::line_chart("query mIoU by rank over adaptation iterations", &series);
    let svg_path = cfg.out_dir.join("sweep.svg");
    std::fs::write(&svg_path, svg)?;

    Ok(SweepOutcome { rows, csv_path, svg_path, params_path })
}

// ---------------------------------------------------------------------
// 1-shot study
// ---------------------------------------------------------------------

pub const ONESHOT_COLUMNS: [&str; 4] = ["k_shot", "iteration", "mean_miou", "replicated"];

#[derive(Debug, Clone)]
pub struct OneshotRow {
    pub k_shot: usize,
    pub iteration: usize,
    pub mean_miou: f64,
    pub replicated: bool,
}

#[derive(Debug)]
pub struct OneshotOutcome {
    pub rows: Vec<OneshotRow>,
    pub csv_path: PathBuf,
}

pub fn cmd_oneshot_study(cfg: &RunConfig) -> Result<OneshotOutcome> {
    let ds = Dataset::open(&cfg.dataset.dir)?;
    let fold = cfg.oneshot.fold;
    let n = cfg.oneshot.n_way;
    for k in [1usize, 2] {
        if !ds.has_cell(n, k) {
            return Err(Error::Data(format!(
                "1-shot study needs the {}x{} cell; regenerate with it in dataset.cells",
                n, k
            )));
        }
    }
    let model = ModelState::load_checkpoint(&checkpoint_dir(&cfg.out_dir, fold))?;
    let t_iters = cfg.oneshot.iterations;

    let mut rows = Vec::new();
    for k in [1usize, 2] {
        let all = ds.load_episodes(fold, n, k)?;
        if all.len() < cfg.oneshot.episodes {
            return Err(Error::Data(format!(
                "1-shot study wants {} episodes, fold {} {}x{} cell has {}",
                cfg.oneshot.episodes,
                fold,
                n,
                k,
                all.len()
            )));
        }
        let episodes: Vec<Episode> = all
            .into_iter()
            .take(cfg.oneshot.episodes)
            .map(|ep| {
                if k == 1 {
                    // The workaround: duplicate the lone support pair so a
                    // context remains once one copy plays pseudo-query.
                    replicate_support(&ep, 2)
                } else {
                    Ok(ep)
                }
            })
            .collect::<Result<_>>()?;

        let acfg = AdaptConfig {
            method: Method::Tap,
            iterations: t_iters,
            track_iteration_miou: true,
            ..adapt_config(cfg, Method::Tap)
        };
        let outcomes: Result<Vec<EpisodeOutcome>> = episodes
            .par_iter()
            .map(|ep| eval_episode(&model, ep, &acfg))
            .collect();
        let outcomes = outcomes?;
        let replicated = outcomes.iter().all(|o| o.trace.replicated);
        for t in 0..=t_iters {
            let mean = outcomes
                .iter()
                .map(|o| o.trace.iteration_miou[t])
                .sum::<f64>()
                / outcomes.len() as f64;
            rows.push(OneshotRow { k_shot: k, iteration: t, mean_miou: mean, replicated });
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = ONESHOT_COLUMNS.join(",");
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:.6},{}", r.k_shot, r.iteration, r.mean_miou, r.replicated);
    }
    let csv_path = cfg.out_dir.join("oneshot.csv");
    std::fs::write(&csv_path, csv)?;

    Ok(OneshotOutcome { rows, csv_path })
}
