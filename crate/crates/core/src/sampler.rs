//! Guided DDIM sampling with separate identity and text guidance scales and
//! timestep-gated dropping of identity embeddings.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::prompt::parse_prompt;
use crate::datapipe::world::{CHANNELS, SIZE};
use crate::diffusion::{predict_x0, NoiseSchedule};
use crate::embed::{ConditionEncoder, ConditionTokens};
use crate::error::{Error, Result};
use crate::model::{Conditions, EpsPredictor, SugarModel};
use crate::numerics::{Rng, Tensor};

/// Which guidance term is nested inside the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceVariant {
    /// `u + ω_I(full − text_only) + ω_T(text_only − u)`
    IdentityInner,
    /// `u + ω_T(full − id_only) + ω_I(id_only − u)`
    #[default]
    TextInner,
}

/// Identity embeddings replaced by their nulls at `t >= t_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSet {
    #[default]
    None,
    FineOnly,
    FineAndCoarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub omega_i: f64,
    pub omega_t: f64,
    pub variant: GuidanceVariant,
    pub t_bar: usize,
    pub drop_set: DropSet,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega_i: 7.5,
            omega_t: 7.5,
            variant: GuidanceVariant::TextInner,
            t_bar: 1000,
            drop_set: DropSet::None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.omega_i >= 0.0 && self.omega_t >= 0.0) || !self.omega_i.is_finite() || !self.omega_t.is_finite() {
            return Err(Error::Config(format!("guidance scales must be finite and >= 0: {self:?}")));
        }
        if self.t_bar > timesteps {
            return Err(Error::Config(format!("t_bar {} exceeds T = {timesteps}", self.t_bar)));
        }
        Ok(())
    }

    /// Which identity slots are nulled at timestep `t`.
    pub fn dropped(&self, t: usize) -> (bool, bool) {
        if t < self.t_bar {
            return (false, false);
        }
        match self.drop_set {
            DropSet::None => (false, false),
            DropSet::FineOnly => (true, false),
            DropSet::FineAndCoarse => (true, true),
        }
    }
}

/// Model-evaluation counters. `requested` counts guidance terms including
/// memo hits; `executed` counts forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalStats {
    pub requested: usize,
    pub executed: usize,
}

/// Which condition slots are present in a guidance term.
type Key = (bool, bool, bool);

/// Guided noise estimate. Terms are memoized on their slot pattern, so
/// terms that coincide after dropping cost one forward pass.
pub fn guided_eps(
    model: &dyn EpsPredictor,
    x_t: &Tensor,
    t: usize,
    cond: &ConditionTokens,
    cfg: &GuidanceConfig,
    stats: &mut EvalStats,
) -> Result<Tensor> {
    let (drop_fine, drop_coarse) = cfg.dropped(t);
    let mut memo: HashMap<Key, Tensor> = HashMap::new();
    let mut term = |identity: bool, text: bool, stats: &mut EvalStats| -> Result<Tensor> {
        stats.requested += 1;
        let key = (identity && !drop_fine, identity && !drop_coarse, text);
        if let Some(e) = memo.get(&key) {
            return Ok(e.clone());
        }
        let c = Conditions {
            fine: key.0.then_some(&cond.fine),
            coarse: key.1.then_some(&cond.coarse),
            text: key.2.then_some(&cond.text),
        };
        let e = model.predict_eps(x_t, t, &c)?;
        stats.executed += 1;
        memo.insert(key, e.clone());
        Ok(e)
    };

    let u = term(false, false, stats)?;
    if cfg.omega_i == 0.0 && cfg.omega_t == 0.0 {
        return Ok(u);
    }
    let full = term(true, true, stats)?;
    let text_only = term(false, true, stats)?;
    let id_only = term(true, false, stats)?;
    let (wi, wt) = (cfg.omega_i, cfg.omega_t);
    let (u, full, text_only, id_only) = (u.data(), full.data(), text_only.data(), id_only.data());
    let out: Vec<f64> = match cfg.variant {
        GuidanceVariant::IdentityInner => {
            (0..u.len()).map(|i| u[i] + wi * (full[i] - text_only[i]) + wt * (text_only[i] - u[i])).collect()
        }
        GuidanceVariant::TextInner => {
            (0..u.len()).map(|i| u[i] + wt * (full[i] - id_only[i]) + wi * (id_only[i] - u[i])).collect()
        }
    };
    Tensor::new(x_t.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub t: usize,
    pub fine_null: bool,
    pub coarse_null: bool,
    pub text_null: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    /// Identity image, `[16, 16, 3]`.
    pub identity: Tensor,
    pub prompt: String,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleRequest {
    fn default() -> Self {
        SampleRequest {
            identity: Tensor::zeros(&[SIZE, SIZE, CHANNELS]),
            prompt: String::new(),
            guidance: GuidanceConfig::default(),
            steps: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub video: Tensor,
    pub trace: Vec<StepTrace>,
    pub evals: EvalStats,
}

/// DDIM from pure noise of shape `[F, 16, 16, 3]`. The clean-sample estimate
/// is clipped to `[-1, 1]` at every step.
pub fn sample_tokens(
    model: &dyn EpsPredictor,
    cond: &ConditionTokens,
    frames: usize,
    guidance: &GuidanceConfig,
    steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    guidance.validate(sched.len())?;
    if frames == 0 {
        return Err(Error::Config("cannot sample a zero-frame video".into()));
    }
    let ts = sched.ddim_timesteps(steps)?;
    let mut rng = Rng::new(seed);
    let mut x = Tensor::from_fn(&[frames, SIZE, SIZE, CHANNELS], |_| rng.normal());
    let mut trace = Vec::with_capacity(ts.len());
    let mut evals = EvalStats::default();
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(model, &x, t, cond, guidance, &mut evals)?;
        let (fine_null, coarse_null) = guidance.dropped(t);
        trace.push(StepTrace { step: i, t, fine_null, coarse_null, text_null: false });
        let x0 = predict_x0(&x, t, &eps, sched)?.map(|v| v.clamp(-1.0, 1.0));
        x = match ts.get(i + 1) {
            Some(&tp) => {
                let ab = sched.alpha_bars()[tp];
                x0.axpby(ab.sqrt(), &eps, (1.0 - ab).sqrt())?
            }
            None => x0,
        };
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "sample" });
        }
    }
    Ok(SampleOutput { video: x, trace, evals })
}

/// Encodes the request's identity image and prompt, then samples a clip of
/// the model's frame count.
pub fn sample(model: &SugarModel, req: &SampleRequest, sched: &NoiseSchedule) -> Result<SampleOutput> {
    if req.steps == 0 {
        return Err(Error::Config("sampler steps must be >= 1".into()));
    }
    let enc = ConditionEncoder::for_model(model.config())?;
    let cond = enc.encode(&req.identity, &parse_prompt(&req.prompt)?)?;
    sample_tokens(model, &cond, model.config().layout.frames, &req.guidance, req.steps, req.seed, sched)
}

/// Independent requests against one model, in parallel.
pub fn sample_many(model: &SugarModel, reqs: &[SampleRequest], sched: &NoiseSchedule) -> Result<Vec<SampleOutput>> {
    reqs.par_iter().map(|r| sample(model, r, sched)).collect()
}
