//! Noise-prediction training with condition dropout, real/synthetic mixing
//! and the single-stage and two-stage strategies.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::datapipe::prompt::parse_prompt;
pub use crate::datapipe::{Origin, Triplet};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::embed::{ConditionEncoder, ConditionTokens};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::model::{patchify, Conditions, SugarModel};
use crate::numerics::{adam_step, AdamConfig, AdamState, Rng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub p_fine: f64,
    pub p_coarse: f64,
    pub p_text: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { p_fine: 0.5, p_coarse: 0.2, p_text: 0.2 }
    }
}

impl DropoutConfig {
    pub fn none() -> Self {
        DropoutConfig { p_fine: 0.0, p_coarse: 0.0, p_text: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_fine, self.p_coarse, self.p_text] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probabilities must be in [0, 1]: {self:?}")));
            }
        }
        Ok(())
    }
}

/// Replaces each condition stream by the null embedding with its own
/// probability. Draws happen in fine, coarse, text order.
pub fn apply_condition_dropout<'a>(c: Conditions<'a>, cfg: &DropoutConfig, rng: &mut Rng) -> Conditions<'a> {
    let keep = |x: Option<&'a Tensor>, p: f64, rng: &mut Rng| if rng.bernoulli(p) { None } else { x };
    let fine = keep(c.fine, cfg.p_fine, rng);
    let coarse = keep(c.coarse, cfg.p_coarse, rng);
    let text = keep(c.text, cfg.p_text, rng);
    Conditions { fine, coarse, text }
}

/// Each slot comes from `synth` with probability `p`, else from `real`,
/// uniformly within the chosen set.
pub fn sample_batch<'a, T>(real: &'a [T], synth: &'a [T], p: f64, n: usize, rng: &mut Rng) -> Result<Vec<&'a T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mixing probability {p} outside [0, 1]")));
    }
    if p > 0.0 && synth.is_empty() {
        return Err(Error::Data(format!("synthetic set is empty but p = {p}")));
    }
    if p < 1.0 && real.is_empty() {
        return Err(Error::Data(format!("real set is empty but p = {p}")));
    }
    Ok((0..n).map(|_| if rng.bernoulli(p) { rng.choose(synth) } else { rng.choose(real) }).collect())
}

/// [`sample_batch`] with read counters per set.
#[derive(Debug)]
pub struct MixSampler<'a, T> {
    real: &'a [T],
    synth: &'a [T],
    pub real_reads: usize,
    pub synth_reads: usize,
}

impl<'a, T: HasOrigin> MixSampler<'a, T> {
    pub fn new(real: &'a [T], synth: &'a [T]) -> Self {
        MixSampler { real, synth, real_reads: 0, synth_reads: 0 }
    }

    pub fn sample(&mut self, p: f64, n: usize, rng: &mut Rng) -> Result<Vec<&'a T>> {
        let batch = sample_batch(self.real, self.synth, p, n, rng)?;
        for t in &batch {
            match t.origin() {
                Origin::Real => self.real_reads += 1,
                Origin::Synthetic => self.synth_reads += 1,
            }
        }
        Ok(batch)
    }
}

pub trait HasOrigin {
    fn origin(&self) -> Origin;
}

impl HasOrigin for Triplet {
    fn origin(&self) -> Origin {
        self.origin
    }
}

/// A triplet in model space: patchified clean video and condition tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Tensor,
    pub cond: ConditionTokens,
    pub origin: Origin,
}

impl HasOrigin for Example {
    fn origin(&self) -> Origin {
        self.origin
    }
}

impl Example {
    pub fn from_triplet(t: &Triplet, enc: &ConditionEncoder, patch: usize) -> Result<Example> {
        t.validate()?;
        let prompt = parse_prompt(&t.prompt)?;
        Ok(Example { x0: patchify(&t.video, patch)?, cond: enc.encode(&t.identity, &prompt)?, origin: t.origin })
    }

    /// Keeps one frame of the target.
    pub fn single_frame(&self, k: usize) -> Result<Example> {
        let &[f, p, d] = self.x0.shape() else { unreachable!("x0 is [F,P,D]") };
        if k >= f {
            return Err(Error::Data(format!("frame {k} of a {f}-frame clip")));
        }
        let data = self.x0.data()[k * p * d..(k + 1) * p * d].to_vec();
        Ok(Example { x0: Tensor::new(vec![1, p, d], data)?, ..self.clone() })
    }
}

pub fn prepare_examples(triplets: &[Triplet], model: &SugarModel) -> Result<Vec<Example>> {
    use rayon::prelude::*;
    let cfg = model.config();
    let enc = ConditionEncoder::for_model(cfg)?;
    triplets.par_iter().map(|t| Example::from_triplet(t, &enc, cfg.patch_size)).collect()
}

/// Adam over every unfrozen parameter of a store.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Optimizer { cfg, states: BTreeMap::new() }
    }

    /// Applies accumulated gradients; parameters without a gradient buffer
    /// see a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = params.names().filter(|n| !params.is_frozen(n)).map(str::to_string).collect();
        for n in names {
            let p = params.get_mut(&n).expect("listed above");
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
            let st = self.states.entry(n).or_insert_with(|| AdamState::new(g.len()));
            adam_step(p.data_mut(), &g, st, &self.cfg)?;
        }
        Ok(())
    }
}

/// One optimizer step on a batch. Each sample draws its own timestep, noise
/// and condition dropout; the loss is the batch mean of per-sample MSE.
pub fn train_step(
    model: &mut SugarModel,
    batch: &[&Example],
    sched: &NoiseSchedule,
    opt: &mut Optimizer,
    dropout: &DropoutConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, true);
    let mut total = None;
    for ex in batch {
        let t = rng.below(sched.len());
        let eps = Tensor::from_fn(ex.x0.shape(), |_| rng.normal());
        let x_t = q_sample(&ex.x0, t, &eps, sched)?;
        let c = Conditions { fine: Some(&ex.cond.fine), coarse: Some(&ex.cond.coarse), text: Some(&ex.cond.text) };
        let c = apply_condition_dropout(c, dropout, rng);
        let x = tape.constant(&x_t);
        let cv = [c.fine, c.coarse, c.text].map(|o| o.map(|v| tape.constant(v)));
        let out = model.forward_on_tape(&mut tape, &b, x, t, cv)?;
        let target = tape.constant(&eps);
        let l = tape.mse_loss(out, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = tape.data(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "train_step loss" });
    }
    let grads = tape.backward(loss)?;
    let params = model.params_mut();
    params.zero_grad();
    params.accumulate(&grads, &b)?;
    opt.step(params)?;
    params.zero_grad();
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Mix,
    Ts,
    Tsf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Synthetic-sampling probability of a single-stage run.
    pub p: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stage 2 trains on one random frame of each synthetic video.
    pub image_stage2: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::Tsf,
            p: 0.5,
            stage1_steps: 1000,
            stage2_steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            image_stage2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub name: &'static str,
    pub steps: usize,
    pub p: f64,
    pub freeze_first_half: bool,
    pub single_frame_synth: bool,
}

impl StrategyConfig {
    pub fn mix(p: f64, steps: usize) -> Self {
        StrategyConfig { kind: StrategyKind::Mix, p, stage1_steps: steps, stage2_steps: 0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p = {} outside [0, 1]", self.p)));
        }
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if self.image_stage2 && self.kind == StrategyKind::Mix {
            return Err(Error::Config("single-frame stage 2 needs a two-stage strategy".into()));
        }
        for s in self.stages() {
            if s.steps == 0 {
                return Err(Error::Config(format!("stage {} has zero steps", s.name)));
            }
        }
        Ok(())
    }

    /// A single-stage run spends the combined step budget of both stages.
    pub fn stages(&self) -> Vec<StagePlan> {
        match self.kind {
            StrategyKind::Mix => vec![StagePlan {
                name: "mix",
                steps: self.stage1_steps + self.stage2_steps,
                p: self.p,
                freeze_first_half: false,
                single_frame_synth: false,
            }],
            StrategyKind::Ts | StrategyKind::Tsf => vec![
                StagePlan {
                    name: "stage1",
                    steps: self.stage1_steps,
                    p: 0.0,
                    freeze_first_half: false,
                    single_frame_synth: false,
                },
                StagePlan {
                    name: "stage2",
                    steps: self.stage2_steps,
                    p: 0.5,
                    freeze_first_half: self.kind == StrategyKind::Tsf,
                    single_frame_synth: self.image_stage2,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub p: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct StageCheckpoint {
    pub stage: &'static str,
    pub params: ParamStore,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SugarModel,
    pub checkpoints: Vec<StageCheckpoint>,
    pub log: Vec<LogRow>,
    pub real_reads: usize,
    pub synth_reads: usize,
}

/// Training inputs shared by every stage.
pub struct TrainData<'a> {
    pub real: &'a [Example],
    pub synth: &'a [Example],
}

/// Runs every stage of a strategy. Batches are assembled on a producer
/// thread, at most two ahead of the optimizer. With `out`, each stage's
/// checkpoint and the JSONL log are written there.
pub fn run_strategy(
    cfg: &StrategyConfig,
    mut model: SugarModel,
    data: &TrainData<'_>,
    sched: &NoiseSchedule,
    dropout: &DropoutConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dropout.validate()?;
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let root = Rng::new(seed);
    let mut outcome_log = Vec::new();
    let mut checkpoints = Vec::new();
    let (mut real_reads, mut synth_reads) = (0, 0);
    let mut global = 0usize;

    for (si, stage) in cfg.stages().into_iter().enumerate() {
        if stage.freeze_first_half {
            model.freeze_first_half()?;
        }
        let single;
        let synth: &[Example] = if stage.single_frame_synth {
            let mut r = root.fork(1_000 + si as u64);
            single = data.synth.iter().map(|e| e.single_frame(r.below(e.x0.shape()[0]))).collect::<Result<Vec<_>>>()?;
            &single
        } else {
            data.synth
        };
        let mut sampler = MixSampler::new(data.real, synth);
        // smoke-check the sets before spawning the producer
        sample_batch(data.real, synth, stage.p, 0, &mut Rng::new(0))?;
        let mut opt = Optimizer::new(AdamConfig { lr: cfg.lr, ..Default::default() });
        let batch_root = root.fork(2 * si as u64);
        let step_root = root.fork(2 * si as u64 + 1);

        let rows = std::thread::scope(|scope| -> Result<Vec<LogRow>> {
            let (tx, rx) = sync_channel::<Result<Vec<&Example>>>(2);
            let sampler = &mut sampler;
            let producer = scope.spawn(move || {
                for step in 0..stage.steps {
                    let batch = sampler.sample(stage.p, cfg.batch_size, &mut batch_root.fork(step as u64));
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            let mut rows = Vec::with_capacity(stage.steps);
            for step in 0..stage.steps {
                let batch = rx.recv().map_err(|_| Error::Data("batch producer stopped".into()))??;
                let loss = train_step(&mut model, &batch, sched, &mut opt, dropout, &mut step_root.fork(step as u64))?;
                rows.push(LogRow { step: global + step, stage: stage.name.to_string(), loss, p: stage.p, lr: cfg.lr });
            }
            drop(rx);
            producer.join().expect("batch producer panicked");
            Ok(rows)
        })?;
        real_reads += sampler.real_reads;
        synth_reads += sampler.synth_reads;
        global += stage.steps;

        if let Some((f, p)) = log_file.as_mut() {
            for r in &rows {
                serde_json::to_writer(&mut *f, r)?;
                f.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
            }
        }
        outcome_log.extend(rows);
        let path = match out {
            Some(dir) => {
                let p = dir.join(format!("{}.sgt", stage.name));
                model.save(&p)?;
                Some(p)
            }
            None => None,
        };
        checkpoints.push(StageCheckpoint { stage: stage.name, params: model.params().clone(), path });
    }
    Ok(TrainOutcome { model, checkpoints, log: outcome_log, real_reads, synth_reads })
}

/// Mean loss over the first `window` log rows.
pub fn window_mean(log: &[LogRow], start: usize, window: usize) -> f64 {
    let rows = &log[start.min(log.len())..(start + window).min(log.len())];
    rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64
}
