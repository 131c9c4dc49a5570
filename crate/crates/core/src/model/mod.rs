//! The denoising transformer.
//!
//! Identity, text and video tokens are projected to a shared width,
//! concatenated, conditioned on the timestep and passed through pre-LN
//! blocks under a selective attention mask. Only video tokens are decoded.

mod mask;
mod params;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use mask::{build_mask, AttentionDesign, Group, GroupMatrix, SelectiveMask, TokenLayout};
pub use params::{Bindings, ParamStore};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::numerics::{load_tensors, save_tensors, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layout: TokenLayout,
    pub layers: usize,
    pub heads: usize,
    pub d_fine: usize,
    pub d_coarse: usize,
    pub d_text: usize,
    pub design: AttentionDesign,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layout: TokenLayout::default(),
            layers: 4,
            heads: 4,
            d_fine: 64,
            d_coarse: 8,
            d_text: 16,
            design: AttentionDesign::B,
            image_size: 16,
            patch_size: 4,
            channels: 3,
            mlp_ratio: 4,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let l = &self.layout;
        if self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers, heads and mlp_ratio must be >= 1".into()));
        }
        self.schedule.build()?;
        if !l.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", l.d_model, self.heads)));
        }
        if self.d_fine == 0 || self.d_coarse == 0 || self.d_text == 0 || self.channels == 0 {
            return Err(Error::Config("embedding widths and channels must be >= 1".into()));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        let p = (self.image_size / self.patch_size).pow(2);
        if p != l.tokens_per_frame {
            return Err(Error::Config(format!("tokens_per_frame {} but patches give {p}", l.tokens_per_frame)));
        }
        SelectiveMask::new(self.design)?;
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Pixel shape `[F, H, W, C]` of a video this model denoises.
    pub fn video_shape(&self) -> [usize; 4] {
        [self.layout.frames, self.image_size, self.image_size, self.channels]
    }
}

/// Condition inputs for one forward pass; `None` selects the learned null.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditions<'a> {
    pub fine: Option<&'a Tensor>,
    pub coarse: Option<&'a Tensor>,
    pub text: Option<&'a Tensor>,
}

/// Anything that predicts noise for a pixel-space video `[F, H, W, C]`.
pub trait EpsPredictor: Sync {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Conditions<'_>) -> Result<Tensor>;
}

/// `[F, H, W, C]` → `[F, P, patch·patch·C]`, patches in raster order.
pub fn patchify(video: &Tensor, patch: usize) -> Result<Tensor> {
    let &[f, h, w, c] = video.shape() else {
        return Err(Error::shape("patchify", format!("expected [F,H,W,C], got {:?}", video.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", format!("{h}x{w} not divisible by {patch}")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = video.data();
    let mut out = vec![0.0; src.len()];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / patch) * pw + x / patch;
                let within = ((y % patch) * patch + x % patch) * c;
                let s = ((fi * h + y) * w + x) * c;
                let d = (fi * ph * pw + tok) * pd + within;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(vec![f, ph * pw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, size: usize, channels: usize) -> Result<Tensor> {
    let &[f, p, pd] = tokens.shape() else {
        return Err(Error::shape("unpatchify", format!("expected [F,P,D], got {:?}", tokens.shape())));
    };
    if patch == 0 || !size.is_multiple_of(patch) || p != (size / patch).pow(2) || pd != patch * patch * channels {
        return Err(Error::shape("unpatchify", format!("{:?} vs size {size} patch {patch}", tokens.shape())));
    }
    let pw = size / patch;
    let src = tokens.data();
    let mut out = vec![0.0; src.len()];
    for fi in 0..f {
        for y in 0..size {
            for x in 0..size {
                let tok = (y / patch) * pw + x / patch;
                let within = ((y % patch) * patch + x % patch) * channels;
                let d = ((fi * size + y) * size + x) * channels;
                let s = (fi * p + tok) * pd + within;
                out[d..d + channels].copy_from_slice(&src[s..s + channels]);
            }
        }
    }
    Tensor::new(vec![f, size, size, channels], out)
}

/// Sinusoidal features of a timestep, length `d`.
pub fn timestep_features(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[d], |i| {
        if i >= 2 * half {
            return 0.0;
        }
        let k = (i % half) as f64;
        let freq = (-(10_000f64).ln() * k / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    frozen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SugarModel {
    config: ModelConfig,
    params: ParamStore,
    timesteps: usize,
}

impl SugarModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.layout.d_model;
        let l = &config.layout;
        let hidden = d * config.mlp_ratio;
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, name: &str, inp: usize, out: usize, std: f64, rng: &mut Rng| {
            p.insert(format!("{name}.weight"), Tensor::randn(&[inp, out], std, rng));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        linear(&mut p, "proj_fine", config.d_fine, d, fan(config.d_fine), rng);
        linear(&mut p, "proj_coarse", config.d_coarse, d, fan(config.d_coarse), rng);
        linear(&mut p, "proj_text", config.d_text, d, fan(config.d_text), rng);
        linear(&mut p, "proj_video", config.patch_dim(), d, fan(config.patch_dim()), rng);
        linear(&mut p, "time_embed", d, d, fan(d), rng);
        p.insert("null_fine", Tensor::randn(&[l.n_fine, config.d_fine], 0.02, rng));
        p.insert("null_coarse", Tensor::randn(&[l.n_coarse, config.d_coarse], 0.02, rng));
        p.insert("null_text", Tensor::randn(&[l.n_text, config.d_text], 0.02, rng));
        p.insert("pos_patch", Tensor::randn(&[l.tokens_per_frame, d], 1.0, rng));
        p.insert("pos_frame", Tensor::randn(&[l.frames, d], 0.1, rng));
        if l.n_fine != l.tokens_per_frame {
            p.insert("pos_fine", Tensor::randn(&[l.n_fine, d], 0.1, rng));
        }
        for i in 0..config.layers {
            let b = format!("blocks.{i}");
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{b}.{ln}.gain"), Tensor::full(&[d], 1.0));
                p.insert(format!("{b}.{ln}.bias"), Tensor::zeros(&[d]));
            }
            // wk starts equal to wq so tokens sharing a position code attend to each other
            let wq = Tensor::randn(&[d, d], fan(d), rng);
            for w in ["wq", "wk"] {
                p.insert(format!("{b}.attn.{w}.weight"), wq.clone());
                p.insert(format!("{b}.attn.{w}.bias"), Tensor::zeros(&[d]));
            }
            for w in ["wv", "wo"] {
                linear(&mut p, &format!("{b}.attn.{w}"), d, d, fan(d), rng);
            }
            linear(&mut p, &format!("{b}.mlp.fc1"), d, hidden, fan(d), rng);
            linear(&mut p, &format!("{b}.mlp.fc2"), hidden, d, fan(hidden), rng);
        }
        p.insert("head.ln.gain", Tensor::full(&[d], 1.0));
        p.insert("head.ln.bias", Tensor::zeros(&[d]));
        p.insert("head.mod.weight", Tensor::zeros(&[d, 2 * d + 1]));
        p.insert("head.mod.bias", Tensor::zeros(&[2 * d + 1]));
        linear(&mut p, "head", d, config.patch_dim(), 0.01, rng);
        let timesteps = config.schedule.build()?.len();
        Ok(SugarModel { config, params: p, timesteps })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_design(&mut self, design: AttentionDesign) -> Result<()> {
        SelectiveMask::new(design)?;
        self.config.design = design;
        Ok(())
    }

    /// Noise prediction in token space: `x_t` is `[F, P, patch_dim]` with
    /// `1 <= F <= frames`.
    pub fn forward(&self, x_t: &Tensor, t: usize, cond: &Conditions<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t);
        let c = [cond.fine, cond.coarse, cond.text].map(|o| o.map(|t| tape.constant(t)));
        let out = self.forward_on_tape(&mut tape, &b, x, t, c)?;
        Ok(tape.value(out))
    }

    /// Records the forward pass; `cond` holds fine, coarse and text inputs.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x_t: Var,
        t: usize,
        cond: [Option<Var>; 3],
    ) -> Result<Var> {
        let cfg = &self.config;
        let l = &cfg.layout;
        let d = l.d_model;
        let &[frames, p, pd] = tape.shape(x_t) else {
            return Err(Error::shape("forward", format!("x_t must be [F,P,D], got {:?}", tape.shape(x_t))));
        };
        if frames == 0 || frames > l.frames || p != l.tokens_per_frame || pd != cfg.patch_dim() {
            return Err(Error::shape(
                "forward",
                format!("x_t {:?} incompatible with layout {l:?} and patch dim {}", tape.shape(x_t), cfg.patch_dim()),
            ));
        }
        if t >= self.timesteps {
            return Err(Error::Config(format!("timestep {t} outside [0, {})", self.timesteps)));
        }

        let streams =
            [("fine", l.n_fine, cfg.d_fine), ("coarse", l.n_coarse, cfg.d_coarse), ("text", l.n_text, cfg.d_text)];
        let mut parts = Vec::with_capacity(4);
        for ((name, n, width), given) in streams.into_iter().zip(cond) {
            let input = match given {
                Some(v) => {
                    if tape.shape(v) != [n, width] {
                        return Err(Error::shape(
                            "forward",
                            format!("{name} embedding {:?}, expected [{n}, {width}]", tape.shape(v)),
                        ));
                    }
                    v
                }
                None => b.get(&format!("null_{name}"))?,
            };
            let mut tokens = linear(tape, b, &format!("proj_{name}"), input)?;
            if name == "fine" {
                // a fine grid aligned with the patch grid shares its positions
                let pos = if n == p { "pos_patch" } else { "pos_fine" };
                tokens = tape.add(tokens, b.get(pos)?)?;
            }
            parts.push(tokens);
        }
        let n_vid = frames * p;
        let x_flat = tape.reshape(x_t, &[n_vid, pd])?;
        let video = linear(tape, b, "proj_video", x_flat)?;
        let pos = self.video_positions(tape, b, frames)?;
        parts.push(tape.add(video, pos)?);
        let mut h = tape.concat(&parts, 0)?;

        let tf = tape.constant(&timestep_features(t, d));
        let tf = tape.reshape(tf, &[1, d])?;
        let temb = linear(tape, b, "time_embed", tf)?;
        h = tape.add_row(h, temb)?;

        let mask = tape.constant(&build_mask(cfg.design, &l.with_frames(frames))?);
        for i in 0..cfg.layers {
            h = self.block(tape, b, i, h, mask)?;
        }

        let vid = tape.slice(h, 0, l.n_condition(), n_vid)?;
        let vid = tape.layer_norm(vid, b.get("head.ln.gain")?, b.get("head.ln.bias")?)?;
        // timestep-dependent scale, shift and x_t skip gate; all zero at init
        let act = tape.gelu(temb)?;
        let m = linear(tape, b, "head.mod", act)?;
        let shift = tape.slice(m, 1, 0, d)?;
        let scale = tape.slice(m, 1, d, d)?;
        let gate = tape.slice(m, 1, 2 * d, 1)?;
        let ones = tape.constant(&Tensor::full(&[n_vid, 1], 1.0));
        let scale = tape.matmul(ones, scale)?;
        let scaled = tape.mul(vid, scale)?;
        let vid = tape.add(vid, scaled)?;
        let vid = tape.add_row(vid, shift)?;
        let out = linear(tape, b, "head", vid)?;
        let gate = tape.matmul(ones, gate)?;
        let row = tape.constant(&Tensor::full(&[1, pd], 1.0));
        let gate = tape.matmul(gate, row)?;
        let skip = tape.mul(x_flat, gate)?;
        let eps = tape.add(out, skip)?;
        tape.reshape(eps, &[frames, p, pd])
    }

    /// Per-token `pos_patch[patch] + pos_frame[frame]`.
    fn video_positions(&self, tape: &mut Tape, b: &Bindings, frames: usize) -> Result<Var> {
        let p = self.config.layout.tokens_per_frame;
        let n = frames * p;
        let patch_sel = Tensor::from_fn(&[n, p], |i| f64::from(u8::from((i / p) % p == i % p)));
        let frame_sel = Tensor::from_fn(&[n, frames], |i| f64::from(u8::from((i / frames) / p == i % frames)));
        let (ps, fs) = (tape.constant(&patch_sel), tape.constant(&frame_sel));
        let pf = tape.slice(b.get("pos_frame")?, 0, 0, frames)?;
        let a = tape.matmul(ps, b.get("pos_patch")?)?;
        let c = tape.matmul(fs, pf)?;
        tape.add(a, c)
    }

    fn block(&self, tape: &mut Tape, b: &Bindings, i: usize, h: Var, mask: Var) -> Result<Var> {
        let n = |s: &str| format!("blocks.{i}.{s}");
        let x = tape.layer_norm(h, b.get(&n("ln1.gain"))?, b.get(&n("ln1.bias"))?)?;
        let q = linear(tape, b, &n("attn.wq"), x)?;
        let k = linear(tape, b, &n("attn.wk"), x)?;
        let v = linear(tape, b, &n("attn.wv"), x)?;
        let a = tape.masked_attention(q, k, v, Some(mask), self.config.heads)?;
        let a = linear(tape, b, &n("attn.wo"), a)?;
        let h = tape.add(h, a)?;
        let x = tape.layer_norm(h, b.get(&n("ln2.gain"))?, b.get(&n("ln2.bias"))?)?;
        let x = linear(tape, b, &n("mlp.fc1"), x)?;
        let x = tape.gelu(x)?;
        let x = linear(tape, b, &n("mlp.fc2"), x)?;
        tape.add(h, x)
    }

    /// Freezes input projections, nulls, timestep and positional embeddings
    /// and the first `L/2` blocks. Returns the frozen names.
    pub fn freeze_first_half(&mut self) -> Result<BTreeSet<String>> {
        if !self.config.layers.is_multiple_of(2) {
            return Err(Error::Config(format!("freezing half of {} layers is ambiguous", self.config.layers)));
        }
        let half = self.config.layers / 2;
        let names: Vec<String> = self
            .params
            .names()
            .filter(|name| {
                if let Some(rest) = name.strip_prefix("blocks.") {
                    let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                    idx < half
                } else {
                    !name.starts_with("head")
                }
            })
            .map(str::to_string)
            .collect();
        for name in &names {
            self.params.freeze(name)?;
        }
        Ok(self.params.frozen().clone())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes parameters to `path` and the config to `path` + `.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_tensors(path, self.params.tensors())?;
        let side = Sidecar { model: self.config, frozen: self.params.frozen().iter().cloned().collect() };
        let side_path = Self::sidecar_path(path);
        fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side_path = Self::sidecar_path(path);
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        side.model.validate()?;
        let tensors = load_tensors(path)?;
        let reference = SugarModel::new(side.model, &mut Rng::new(0))?;
        for (name, t) in reference.params.tensors() {
            match tensors.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                Some(got) => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape()),
                    })
                }
                None => {
                    return Err(Error::Format { path: path.to_path_buf(), reason: format!("missing parameter {name}") })
                }
            }
        }
        if tensors.len() != reference.params.len() {
            return Err(Error::Format { path: path.to_path_buf(), reason: "unexpected extra parameters".into() });
        }
        let mut params = ParamStore::from_tensors(tensors);
        for name in &side.frozen {
            params.freeze(name)?;
        }
        Ok(SugarModel { config: side.model, params, timesteps: reference.timesteps })
    }
}

impl EpsPredictor for SugarModel {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Conditions<'_>) -> Result<Tensor> {
        let c = &self.config;
        let tokens = patchify(x_t, c.patch_size)?;
        let eps = self.forward(&tokens, t, cond)?;
        unpatchify(&eps, c.patch_size, c.image_size, c.channels)
    }
}

fn linear(tape: &mut Tape, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.get(&format!("{name}.weight"))?)?;
    tape.add_row(y, b.get(&format!("{name}.bias"))?)
}
