//! The data, train, sample and eval commands. Each writes its outputs plus
//! the resolved config under its own subdirectory of the output root.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sugar_core::datapipe::prompt::Prompt;
use sugar_core::datapipe::world::{random_center, render_subject_at, Motion, SubjectSpec, BACKGROUNDS};
use sugar_core::datapipe::{
    generate_real_set, read_dataset, run_pipeline, write_dataset, Origin, PipelineReport, Triplet,
};
use sugar_core::metrics::{evaluate_run, BlockMatcher, Embedders, MetricReport, RunEvaluation};
use sugar_core::model::SugarModel;
use sugar_core::numerics::{derive_seed, load_tensors, save_tensors, Rng, Tensor};
use sugar_core::sampler::{sample_many, EvalStats, SampleRequest, StepTrace};
use sugar_core::training::{prepare_examples, run_strategy, TrainData, TrainOutcome};

use crate::config::RunConfig;
use crate::grid::write_frame_grid;
use crate::CliError;

pub const DATASET_DIR: &str = "dataset";
pub const TRAIN_DIR: &str = "train";
pub const SAMPLES_DIR: &str = "samples";
pub const EVAL_DIR: &str = "eval";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.sgt";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_ROWS_FILE: &str = "metrics.jsonl";

const MODEL_INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 0;

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| CliError::output(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        let line = serde_json::to_string(r).map_err(sugar_core::Error::from)?;
        writeln!(w, "{line}").map_err(|e| CliError::output(path, e))?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

/// Creates `dir` and records the resolved config in it.
pub(crate) fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json())
}

pub fn dataset_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.dataset.clone().unwrap_or_else(|| out.join(DATASET_DIR))
}

pub fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.checkpoint.clone().unwrap_or_else(|| out.join(TRAIN_DIR).join(FINAL_CHECKPOINT))
}

pub fn samples_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.samples.clone().unwrap_or_else(|| out.join(SAMPLES_DIR))
}

/// Builds the synthetic triplets with the generate-and-filter pipeline, adds
/// `pipeline.n_real` real-video stand-ins and writes both with the report.
pub fn cmd_data(cfg: &RunConfig, out: &Path) -> Result<PipelineReport, CliError> {
    let dir = out.join(DATASET_DIR);
    echo_config(cfg, &dir)?;
    let (mut triplets, report) = run_pipeline(&cfg.pipeline, cfg.seed)?;
    triplets.extend(generate_real_set(cfg.pipeline.n_real, cfg.pipeline.frames, cfg.seed)?);
    write_dataset(&dir, &triplets, Some(&report))?;
    Ok(report)
}

/// Trains on `triplets` into `dir`; the final model is also saved as
/// `final.sgt`.
pub(crate) fn train_into(cfg: &RunConfig, triplets: &[Triplet], dir: &Path) -> Result<TrainOutcome, CliError> {
    let (real, synth): (Vec<Triplet>, Vec<Triplet>) = triplets.iter().cloned().partition(|t| t.origin == Origin::Real);
    let model = SugarModel::new(cfg.model, &mut Rng::new(derive_seed(cfg.seed, MODEL_INIT_STREAM)))?;
    let real = prepare_examples(&real, &model)?;
    let synth = prepare_examples(&synth, &model)?;
    let sched = cfg.schedule.build()?;
    let data = TrainData { real: &real, synth: &synth };
    let outcome = run_strategy(
        &cfg.strategy,
        model,
        &data,
        &sched,
        &cfg.dropout,
        derive_seed(cfg.seed, TRAIN_STREAM),
        Some(dir),
    )?;
    outcome.model.save(dir.join(FINAL_CHECKPOINT))?;
    Ok(outcome)
}

/// Trains on the dataset under `paths.dataset` (default `<out>/dataset`).
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    let dir = out.join(TRAIN_DIR);
    echo_config(cfg, &dir)?;
    let triplets = read_dataset(&dataset_dir(cfg, out))?;
    train_into(cfg, &triplets, &dir)
}

/// A held-out conditioning input: a rendered subject on a named background
/// with a rigid-motion prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub subject: Tensor,
    pub identity: Tensor,
    pub prompt: String,
}

pub fn probes(n: usize, seed: u64) -> Result<Vec<Probe>, CliError> {
    let mut rng = Rng::new(derive_seed(seed, PROBE_STREAM));
    (0..n)
        .map(|_| {
            let spec = SubjectSpec::random(&mut rng);
            let bg = rng.choose(&BACKGROUNDS);
            let motion = *rng.choose(&Motion::RIGID);
            let (subject, identity) = render_subject_at(&spec, random_center(&mut rng), bg.rgb)?;
            let prompt = Prompt { background: Some(bg.name.to_string()), ..Prompt::plain(&spec.label, motion) };
            Ok(Probe { subject, identity, prompt: prompt.render() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub prompt: String,
    pub seed: u64,
    /// Tensor container with `video`, `subject` and `identity`.
    pub tensors: String,
    pub grid: String,
    pub evals: EvalStats,
    pub trace: Vec<StepTrace>,
}

/// Samples one clip per probe with `model` and writes grids, tensors and
/// `samples.jsonl` into `dir`.
pub(crate) fn sample_into(cfg: &RunConfig, model: &SugarModel, dir: &Path) -> Result<Vec<SampleRow>, CliError> {
    if model.config() != &cfg.model {
        return Err(CliError::Config(format!(
            "checkpoint model config differs from the run config: {:?} vs {:?}",
            model.config(),
            cfg.model
        )));
    }
    let sched = cfg.schedule.build()?;
    let ps = probes(cfg.sampling.n_samples, cfg.sampling.seed)?;
    let reqs: Vec<SampleRequest> = ps
        .iter()
        .enumerate()
        .map(|(i, p)| SampleRequest {
            identity: p.identity.clone(),
            prompt: p.prompt.clone(),
            guidance: cfg.guidance,
            steps: cfg.sampling.steps,
            seed: derive_seed(cfg.sampling.seed, 1 + i as u64),
        })
        .collect();
    let outs = sample_many(model, &reqs, &sched)?;
    let mut rows = Vec::with_capacity(outs.len());
    for (i, ((p, req), o)) in ps.iter().zip(&reqs).zip(outs).enumerate() {
        let tensors = format!("sample_{i:03}.sgt");
        let grid = format!("sample_{i:03}.png");
        let entries = [("video", &o.video), ("subject", &p.subject), ("identity", &p.identity)]
            .into_iter()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect();
        save_tensors(dir.join(&tensors), &entries)?;
        write_frame_grid(&o.video, &dir.join(&grid))?;
        rows.push(SampleRow {
            index: i,
            prompt: p.prompt.clone(),
            seed: req.seed,
            tensors,
            grid,
            evals: o.evals,
            trace: o.trace,
        });
    }
    write_jsonl(&dir.join(SAMPLES_FILE), &rows)?;
    Ok(rows)
}

/// Samples from the checkpoint under `paths.checkpoint` (default
/// `<out>/train/final.sgt`).
pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<Vec<SampleRow>, CliError> {
    let dir = out.join(SAMPLES_DIR);
    echo_config(cfg, &dir)?;
    let model = SugarModel::load(checkpoint_path(cfg, out))?;
    sample_into(cfg, &model, &dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub index: usize,
    pub prompt: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: MetricReport,
    /// Mean metrics under the results-table column names.
    pub table: serde_json::Map<String, serde_json::Value>,
}

fn read_samples(dir: &Path) -> Result<Vec<SampleRow>, CliError> {
    let path = dir.join(SAMPLES_FILE);
    let f = fs::File::open(&path).map_err(|e| sugar_core::Error::Io { path: path.clone(), source: e })?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| sugar_core::Error::Io { path: path.clone(), source: e })?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line).map_err(sugar_core::Error::from)?);
        }
    }
    if rows.is_empty() {
        return Err(sugar_core::Error::Data(format!("{} lists no samples", path.display())).into());
    }
    Ok(rows)
}

/// Scores the samples listed in `samples_dir` and writes per-video rows and
/// the mean into `dir`.
pub(crate) fn eval_into(samples: &Path, dir: &Path) -> Result<(RunEvaluation, MetricSummary), CliError> {
    let rows = read_samples(samples)?;
    let (mut videos, mut subjects, mut prompts) = (vec![], vec![], vec![]);
    for r in &rows {
        let path = samples.join(&r.tensors);
        let mut ts = load_tensors(&path)?;
        let mut take = |k: &str| {
            ts.remove(k)
                .ok_or_else(|| sugar_core::Error::Format { path: path.clone(), reason: format!("missing tensor {k}") })
        };
        videos.push(take("video")?);
        subjects.push(take("subject")?);
        prompts.push(r.prompt.clone());
    }
    let eval = evaluate_run(&videos, &subjects, &prompts, &Embedders::default(), &BlockMatcher::default())?;
    let metric_rows: Vec<MetricRow> = rows
        .iter()
        .zip(&eval.per_video)
        .map(|(r, m)| MetricRow { index: r.index, prompt: r.prompt.clone(), metrics: *m })
        .collect();
    write_jsonl(&dir.join(METRICS_ROWS_FILE), &metric_rows)?;
    let summary = MetricSummary { count: rows.len(), mean: eval.mean, table: eval.mean.table_row() };
    let text = serde_json::to_string_pretty(&summary).map_err(sugar_core::Error::from)?;
    write_text(&dir.join(METRICS_FILE), &text)?;
    Ok((eval, summary))
}

/// Scores the samples under `paths.samples` (default `<out>/samples`).
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<MetricSummary, CliError> {
    let dir = out.join(EVAL_DIR);
    echo_config(cfg, &dir)?;
    Ok(eval_into(&samples_dir(cfg, out), &dir)?.1)
}
