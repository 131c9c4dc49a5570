//! Ablation sweeps: the cross product of the configured axes, one summary
//! row per cell.
//!
//! Cells that differ only in sampling settings share one trained model and
//! the sampling seed, so their rows are paired comparisons. A training group
//! is seeded from the run seed and the index of its first cell.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sugar_core::datapipe::read_dataset;
use sugar_core::metrics::MetricReport;
use sugar_core::model::{AttentionDesign, SugarModel};
use sugar_core::numerics::derive_seed;
use sugar_core::sampler::DropSet;
use sugar_core::training::StrategyKind;

use crate::commands::{
    create_dir, dataset_dir, echo_config, eval_into, sample_into, train_into, write_jsonl, write_text,
};
use crate::commands::{EVAL_DIR, FINAL_CHECKPOINT, SAMPLES_DIR};
use crate::config::{DataAxis, DropAxis, GuidancePoint, RunConfig, SweepConfig};
use crate::CliError;

pub const ABLATE_DIR: &str = "ablate";
pub const TABLE_FILE: &str = "table.json";
pub const TABLE_ROWS_FILE: &str = "table.jsonl";

/// One point of the sweep with every axis resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub design: AttentionDesign,
    pub strategy: StrategyKind,
    pub data: DataAxis,
    pub drop: DropAxis,
    pub guidance: GuidancePoint,
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Cross product in design, strategy, data, drop, guidance order (guidance
/// varies fastest). An empty sweep yields the base config as one cell.
pub fn expand_cells(cfg: &RunConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let base_drop = match cfg.guidance.drop_set {
        DropSet::None => DropAxis::None,
        DropSet::FineOnly => DropAxis::FineOnly,
        DropSet::FineAndCoarse => DropAxis::FineAndCoarse,
    };
    let base_data = if cfg.strategy.image_stage2 { DataAxis::Image } else { DataAxis::Video };
    let base_guidance = GuidancePoint { omega_t: cfg.guidance.omega_t, omega_i: cfg.guidance.omega_i };
    let mut cells = Vec::new();
    for &design in &or_base(&s.designs, cfg.model.design) {
        for &strategy in &or_base(&s.strategies, cfg.strategy.kind) {
            for &data in &or_base(&s.data, base_data) {
                for &drop in &or_base(&s.drop, base_drop) {
                    for &guidance in &or_base(&s.guidance, base_guidance) {
                        cells.push(Cell { index: cells.len(), design, strategy, data, drop, guidance });
                    }
                }
            }
        }
    }
    cells
}

/// The plain run config of a cell, before its seed and paths are assigned.
fn cell_config(base: &RunConfig, cell: &Cell) -> Result<RunConfig, CliError> {
    let mut c = base.clone();
    c.model.design = cell.design;
    c.strategy.kind = cell.strategy;
    c.strategy.image_stage2 = cell.data == DataAxis::Image;
    c.guidance = base.guidance_with_drop(cell.drop);
    c.guidance.omega_t = cell.guidance.omega_t;
    c.guidance.omega_i = cell.guidance.omega_i;
    if cell.drop == DropAxis::TrainedWithoutDropping {
        c.dropout.p_fine = 0.0;
        c.dropout.p_coarse = 0.0;
    }
    c.sweep = SweepConfig::default();
    c.resolve().map_err(|e| match e {
        CliError::Core(inner) => CliError::Config(format!("cell {}: {inner}", cell.index)),
        other => other,
    })
}

fn training_key(c: &RunConfig) -> String {
    serde_json::to_string(&(&c.model, &c.strategy, &c.dropout)).expect("training settings serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub cell: usize,
    pub design: String,
    pub strategy: StrategyKind,
    pub data: DataAxis,
    pub drop: DropAxis,
    pub omega_t: f64,
    pub omega_i: f64,
    pub t_bar: usize,
    /// Seed of the run that produced the cell's model.
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub trained: bool,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

struct Group {
    first: usize,
    seed: u64,
    checkpoint: PathBuf,
    trained: bool,
    model: Option<SugarModel>,
}

/// Runs every cell: trains each distinct training setting once (reusing
/// `paths.checkpoint` when the setting matches the base config), then
/// samples and scores each cell. Writes `table.json` and `table.jsonl`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblateRow>, CliError> {
    let root = out.join(ABLATE_DIR);
    echo_config(cfg, &root)?;
    let cells = expand_cells(cfg);
    let configs = cells.iter().map(|c| cell_config(cfg, c)).collect::<Result<Vec<_>, _>>()?;

    let base_key = training_key(cfg);
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for (cell, c) in cells.iter().zip(&configs) {
        let key = training_key(c);
        groups.entry(key.clone()).or_insert_with(|| match (&cfg.paths.checkpoint, key == base_key) {
            (Some(ckpt), true) => {
                Group { first: cell.index, seed: cfg.seed, checkpoint: ckpt.clone(), trained: false, model: None }
            }
            _ => Group {
                first: cell.index,
                seed: derive_seed(cfg.seed, cell.index as u64),
                checkpoint: root.join(format!("train_{:03}", cell.index)).join(FINAL_CHECKPOINT),
                trained: true,
                model: None,
            },
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cfg.sweep.workers)))?;

    let needs_data = groups.values().any(|g| g.trained);
    let triplets = if needs_data { read_dataset(&dataset_dir(cfg, out))? } else { Vec::new() };
    let first_config = |g: &Group| -> RunConfig { RunConfig { seed: g.seed, ..configs[g.first].clone() } };

    pool.install(|| {
        groups.par_iter_mut().try_for_each(|(_, g)| -> Result<(), CliError> {
            let model = if g.trained {
                let dir = g.checkpoint.parent().expect("group checkpoint has a directory").to_path_buf();
                let run = first_config(g);
                echo_config(&run, &dir)?;
                train_into(&run, &triplets, &dir)?.model
            } else {
                SugarModel::load(&g.checkpoint)?
            };
            g.model = Some(model);
            Ok(())
        })
    })?;

    let rows = pool.install(|| {
        cells
            .par_iter()
            .zip(configs.par_iter())
            .map(|(cell, c)| -> Result<AblateRow, CliError> {
                let g = &groups[&training_key(c)];
                let dir = root.join("cells").join(format!("{:03}", cell.index));
                let mut run = c.clone();
                run.seed = g.seed;
                run.paths.checkpoint = Some(g.checkpoint.clone());
                run.paths.samples = Some(dir.join(SAMPLES_DIR));
                echo_config(&run, &dir)?;
                let samples = dir.join(SAMPLES_DIR);
                create_dir(&samples)?;
                sample_into(&run, g.model.as_ref().expect("group model loaded"), &samples)?;
                let eval = dir.join(EVAL_DIR);
                create_dir(&eval)?;
                let (_, summary) = eval_into(&samples, &eval)?;
                Ok(AblateRow {
                    cell: cell.index,
                    design: cell.design.to_string(),
                    strategy: cell.strategy,
                    data: cell.data,
                    drop: cell.drop,
                    omega_t: cell.guidance.omega_t,
                    omega_i: cell.guidance.omega_i,
                    t_bar: run.guidance.t_bar,
                    seed: g.seed,
                    checkpoint: g.checkpoint.clone(),
                    trained: g.trained,
                    metrics: summary.mean,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    write_jsonl(&root.join(TABLE_ROWS_FILE), &rows)?;
    let text = serde_json::to_string_pretty(&rows).map_err(sugar_core::Error::from)?;
    write_text(&root.join(TABLE_FILE), &text)?;
    Ok(rows)
}
