//! Synthetic triplet construction: customized image generation, image
//! filtering, preprocessing, image-to-video generation and video filtering,
//! all procedural.

pub mod prompt;
pub mod store;
pub mod world;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, saliency, Embedders, ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::metrics::{dynamic_degree, FlowEstimator};
use crate::numerics::{Rng, Tensor};
use prompt::{Prompt, PromptTemplate};
use world::{
    background_color, flat_image, frame, frames, paint_sprite, render_subject, sprite_color, sprite_mask, stack_frames,
    to_pixel, Appearance, Motion, Shape, SubjectSpec, BACKGROUNDS, CHANNELS, SIZE,
};

pub use store::{read_dataset, write_dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

/// One training example: subject image, identity image, prompt and video.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub subject: Tensor,
    pub identity: Tensor,
    pub prompt: String,
    pub video: Tensor,
    pub origin: Origin,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("subject", &self.subject), ("identity", &self.identity)] {
            if t.shape() != [SIZE, SIZE, CHANNELS] {
                return Err(Error::Data(format!("{name} image has shape {:?}", t.shape())));
            }
        }
        let vs = self.video.shape();
        if vs.len() != 4 || vs[0] == 0 || vs[1..] != [SIZE, SIZE, CHANNELS] {
            return Err(Error::Data(format!("video has shape {vs:?}")));
        }
        if !self.video.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
            return Err(Error::Data("video values must be finite and within [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<String> {
        self.prompt.split_whitespace().map(str::to_string).collect()
    }

    /// Keeps a single frame of the video.
    pub fn with_single_frame(&self, k: usize) -> Result<Triplet> {
        let f = frame(&self.video, k)?;
        Ok(Triplet { video: stack_frames(&[f])?, ..self.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub tau_identity: f64,
    pub tau_text: f64,
    pub tau_consistency: f64,
    pub tau_flow: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds { tau_identity: 0.6, tau_text: 0.25, tau_consistency: 0.85, tau_flow: 0.3 }
    }
}

impl FilterThresholds {
    /// Thresholds that accept everything.
    pub fn permissive() -> Self {
        FilterThresholds { tau_identity: -1.0, tau_text: -1.0, tau_consistency: -1.0, tau_flow: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let cos = [self.tau_identity, self.tau_text, self.tau_consistency];
        if cos.iter().any(|c| !(-1.0..=1.0).contains(c)) || self.tau_flow.is_nan() || self.tau_flow < 0.0 {
            return Err(Error::Config(format!("invalid filter thresholds {self:?}")));
        }
        Ok(())
    }
}

/// Failure-injection rates of the mock generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineRates {
    /// Customized image renders the wrong shape.
    pub corruption: f64,
    /// Customized image ignores the prompt.
    pub ignore_prompt: f64,
    /// Image-to-video output is static.
    pub lazy: f64,
}

impl Default for PipelineRates {
    fn default() -> Self {
        PipelineRates { corruption: 0.1, ignore_prompt: 0.1, lazy: 0.1 }
    }
}

impl PipelineRates {
    pub fn none() -> Self {
        PipelineRates { corruption: 0.0, ignore_prompt: 0.0, lazy: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.corruption, self.ignore_prompt, self.lazy] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("pipeline rates must be in [0, 1]: {self:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct T2iFaults {
    pub corrupt: bool,
    pub ignore_prompt: bool,
}

/// Height and width of mock text-to-image output: a 2× render with one
/// source row cropped at top and bottom.
pub const T2I_SHAPE: [usize; 3] = [2 * SIZE - 4, 2 * SIZE, CHANNELS];

fn nonzero_mask(z: &Tensor) -> Vec<bool> {
    z.data().chunks(CHANNELS).map(|p| p.iter().any(|v| *v != 0.0)).collect()
}

fn mask_centroid(mask: &[bool]) -> Option<(f64, f64)> {
    let pts: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    Some((
        pts.iter().map(|i| (i % SIZE) as f64).sum::<f64>() / n,
        pts.iter().map(|i| (i / SIZE) as f64).sum::<f64>() / n,
    ))
}

/// Best-overlapping shape for a silhouette, with its centre.
pub fn recognize_shape(mask: &[bool]) -> Option<(Shape, (f64, f64))> {
    let (cx, cy) = mask_centroid(mask)?;
    let mut best: Option<(f64, Shape, (f64, f64))> = None;
    for shape in Shape::ALL {
        for oy in -1..=1 {
            for ox in -1..=1 {
                let c = (cx.round() + ox as f64, cy.round() + oy as f64);
                let m = sprite_mask(shape, c.0, c.1, 0.0);
                let inter = m.iter().zip(mask).filter(|(a, b)| **a && **b).count() as f64;
                let union = m.iter().zip(mask).filter(|(a, b)| **a || **b).count() as f64;
                let iou = inter / union.max(1.0);
                if best.is_none_or(|(b, _, _)| iou > b) {
                    best = Some((iou, shape, c));
                }
            }
        }
    }
    best.map(|(_, s, c)| (s, c))
}

pub fn silhouette_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// The 16×16 composition a mock customized image is rendered from.
pub fn compose_customized(z: &Tensor, prompt: &Prompt, faults: T2iFaults) -> Result<Tensor> {
    crate::embed::check_image("mock_t2i", z)?;
    let mut mask = nonzero_mask(z);
    let base = z
        .data()
        .chunks(CHANNELS)
        .zip(&mask)
        .find(|(_, m)| **m)
        .map(|(p, _)| [(p[0] + 1.0) / 2.0, (p[1] + 1.0) / 2.0, (p[2] + 1.0) / 2.0])
        .ok_or_else(|| Error::Data("identity image has no foreground".into()))?;
    if faults.ignore_prompt {
        let mut out = flat_image(BACKGROUNDS[0].rgb);
        for (i, m) in mask.iter().enumerate() {
            if *m {
                out.data_mut()[i * CHANNELS..(i + 1) * CHANNELS]
                    .copy_from_slice(&z.data()[i * CHANNELS..(i + 1) * CHANNELS]);
            }
        }
        return Ok(out);
    }
    let (cx, cy) = mask_centroid(&mask).expect("foreground checked above");
    if faults.corrupt {
        let (shape, c) = recognize_shape(&mask).expect("foreground checked above");
        mask = sprite_mask(shape.most_dissimilar(), c.0, c.1, 0.0);
    }
    let color = match &prompt.color {
        Some(name) => sprite_color(name).ok_or_else(|| Error::Data(format!("unknown colour {name}")))?,
        None => base,
    };
    let bg = match &prompt.background {
        Some(name) => background_color(name).ok_or_else(|| Error::Data(format!("unknown background {name}")))?,
        None => BACKGROUNDS[0].rgb,
    };
    let mut out = flat_image(bg);
    let look = Appearance { color, texture: prompt.texture, style: prompt.style };
    paint_sprite(&mut out, &mask, &look, (cx.round() as i64, cy.round() as i64));
    Ok(out)
}

/// Mock subject-driven text-to-image model. Output has shape [`T2I_SHAPE`].
pub fn mock_t2i(z: &Tensor, prompt: &Prompt, faults: T2iFaults) -> Result<Tensor> {
    let small = compose_customized(z, prompt, faults)?;
    let [h, w, c] = T2I_SHAPE;
    Ok(Tensor::from_fn(&T2I_SHAPE, |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let _ = h;
        small.get(&[(y + 2) / 2, x / 2, ch])
    }))
}

/// Centre-pads to a square with the border colour, then nearest-resizes to
/// 16×16.
pub fn preprocess(image: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("preprocess", format!("expected [H,W,C], got {:?}", image.shape())));
    };
    if c != CHANNELS || h == 0 || w == 0 {
        return Err(Error::shape("preprocess", format!("{:?}", image.shape())));
    }
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut ring: Vec<[f64; 3]> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                ring.push([image.get(&[y, x, 0]), image.get(&[y, x, 1]), image.get(&[y, x, 2])]);
            }
        }
    }
    let fill: [f64; 3] = std::array::from_fn(|ch| {
        let mut v: Vec<f64> = ring.iter().map(|p| p[ch]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    });
    Ok(Tensor::from_fn(&[SIZE, SIZE, CHANNELS], |i| {
        let (y, x, ch) = (i / (SIZE * CHANNELS), (i / CHANNELS) % SIZE, i % CHANNELS);
        let (sy, sx) = (y * side / SIZE, x * side / SIZE);
        if sy >= top && sy < top + h && sx >= left && sx < left + w {
            image.get(&[sy - top, sx - left, ch])
        } else {
            fill[ch]
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    RejectedIdentity,
    RejectedText,
    RejectedConsistency,
    RejectedStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub identity: f64,
    pub text: f64,
}

/// Identity check first, then text alignment.
pub fn filter_image(
    candidate: &Tensor,
    z: &Tensor,
    prompt: &str,
    emb: &Embedders,
    th: &FilterThresholds,
) -> Result<(Verdict, ImageScores)> {
    let img = if candidate.shape() == [SIZE, SIZE, CHANNELS] { candidate.clone() } else { preprocess(candidate)? };
    let identity = cosine(&emb.fine.embed_image(&img)?, &emb.fine.embed_image(z)?);
    let text = cosine(&emb.joint.embed_image(&img)?, &emb.joint.embed_text(prompt)?);
    let v = if identity < th.tau_identity {
        Verdict::RejectedIdentity
    } else if text < th.tau_text {
        Verdict::RejectedText
    } else {
        Verdict::Accepted
    };
    Ok((v, ImageScores { identity, text }))
}

/// Rotates/translates the salient region of `image` per the prompt's motion.
/// Frame 1 is `image` itself; `lazy` yields a static clip.
pub fn mock_i2v(image: &Tensor, prompt: &Prompt, frames_out: usize, lazy: bool) -> Result<Tensor> {
    crate::embed::check_image("mock_i2v", image)?;
    if frames_out == 0 {
        return Err(Error::Config("video needs at least one frame".into()));
    }
    let sal = saliency(image)?;
    let motion = if lazy { Motion::Static } else { prompt.motion };
    let (cx, cy) = sal.centroid().unwrap_or((SIZE as f64 / 2.0, SIZE as f64 / 2.0));
    let (ax, ay) = (cx.round(), cy.round());
    let mut out = vec![image.clone()];
    for k in 1..frames_out {
        let (dx, dy, ang) = motion.pose(k, ax, ay);
        let mut f = Tensor::from_fn(&[SIZE, SIZE, CHANNELS], |i| sal.background[i % CHANNELS]);
        let (s, c) = ang.sin_cos();
        for y in 0..SIZE {
            for x in 0..SIZE {
                // inverse map destination → source
                let (rx, ry) = (x as f64 - ax - dx, y as f64 - ay - dy);
                let (sx, sy) = ((c * rx + s * ry + ax).round(), (-s * rx + c * ry + ay).round());
                if sx < 0.0 || sy < 0.0 || sx >= SIZE as f64 || sy >= SIZE as f64 {
                    continue;
                }
                let src = sy as usize * SIZE + sx as usize;
                if sal.mask[src] {
                    let d = (y * SIZE + x) * CHANNELS;
                    f.data_mut()[d..d + CHANNELS].copy_from_slice(&image.data()[src * CHANNELS..(src + 1) * CHANNELS]);
                }
            }
        }
        out.push(f);
    }
    stack_frames(&out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub consistency: f64,
    pub flow: f64,
}

/// Consistency is the smaller of the consecutive-frame mean and the mean
/// over `pairs` random frame pairs.
pub fn filter_video(
    video: &Tensor,
    emb: &Embedders,
    flow: &dyn FlowEstimator,
    th: &FilterThresholds,
    pairs: usize,
    rng: &mut Rng,
) -> Result<(Verdict, VideoScores)> {
    let fs = frames(video)?;
    if fs.len() < 2 {
        return Err(Error::Data("video filter needs at least 2 frames".into()));
    }
    let e: Vec<Vec<f64>> = fs.iter().map(|f| emb.fine.embed_image(f)).collect::<Result<_>>()?;
    let consecutive = e.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / (e.len() - 1) as f64;
    let mut random = 0.0;
    for _ in 0..pairs {
        let i = rng.below(e.len());
        let j = (i + 1 + rng.below(e.len() - 1)) % e.len();
        random += cosine(&e[i], &e[j]);
    }
    let consistency = if pairs == 0 { consecutive } else { consecutive.min(random / pairs as f64) };
    let motion = dynamic_degree(video, flow)?;
    let v = if consistency < th.tau_consistency {
        Verdict::RejectedConsistency
    } else if motion < th.tau_flow {
        Verdict::RejectedStatic
    } else {
        Verdict::Accepted
    };
    Ok((v, VideoScores { consistency, flow: motion }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_subjects: usize,
    pub frames: usize,
    pub random_pairs: usize,
    pub rates: PipelineRates,
    pub thresholds: FilterThresholds,
    pub templates: Vec<PromptTemplate>,
    pub n_real: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_subjects: 256,
            frames: 8,
            random_pairs: 8,
            rates: PipelineRates::default(),
            thresholds: FilterThresholds::default(),
            templates: PromptTemplate::defaults(),
            n_real: 256,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        self.thresholds.validate()?;
        if self.templates.is_empty() {
            return Err(Error::Config("at least one prompt template is required".into()));
        }
        for t in &self.templates {
            t.validate()?;
        }
        if self.frames < 2 {
            return Err(Error::Config("videos need at least 2 frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub index: usize,
    pub prompt: String,
    pub corrupted: bool,
    pub ignored_prompt: bool,
    pub lazy: bool,
    pub image: ImageScores,
    pub video: Option<VideoScores>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub generated: usize,
    pub rejected_identity: usize,
    pub rejected_text: usize,
    pub rejected_consistency: usize,
    pub rejected_static: usize,
    pub accepted: usize,
    pub audit: Vec<AuditRow>,
}

impl PipelineReport {
    pub fn from_rows(audit: Vec<AuditRow>) -> Self {
        let count = |v: Verdict| audit.iter().filter(|r| r.verdict == v).count();
        PipelineReport {
            generated: audit.len(),
            rejected_identity: count(Verdict::RejectedIdentity),
            rejected_text: count(Verdict::RejectedText),
            rejected_consistency: count(Verdict::RejectedConsistency),
            rejected_static: count(Verdict::RejectedStatic),
            accepted: count(Verdict::Accepted),
            audit,
        }
    }

    pub fn balanced(&self) -> bool {
        self.accepted + self.rejected_identity + self.rejected_text + self.rejected_consistency + self.rejected_static
            == self.generated
    }
}

/// Everything needed to run one candidate through the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub subject: Tensor,
    pub identity: Tensor,
    pub prompt: Prompt,
    pub faults: T2iFaults,
    pub lazy: bool,
}

impl Candidate {
    pub fn draw(templates: &[PromptTemplate], rates: &PipelineRates, rng: &mut Rng) -> Result<Candidate> {
        let spec = SubjectSpec::random(rng);
        let (subject, identity) = render_subject(&spec, rng)?;
        let prompt = rng.choose(templates).instantiate(&spec.label, rng);
        let faults =
            T2iFaults { corrupt: rng.bernoulli(rates.corruption), ignore_prompt: rng.bernoulli(rates.ignore_prompt) };
        let lazy = rng.bernoulli(rates.lazy);
        Ok(Candidate { subject, identity, prompt, faults, lazy })
    }
}

/// Runs one candidate through generation and both filters.
pub fn process_candidate(
    index: usize,
    c: &Candidate,
    cfg: &PipelineConfig,
    emb: &Embedders,
    flow: &dyn FlowEstimator,
    rng: &mut Rng,
) -> Result<(AuditRow, Option<Triplet>)> {
    let text = c.prompt.render();
    let raw = mock_t2i(&c.identity, &c.prompt, c.faults)?;
    let (mut verdict, image) = filter_image(&raw, &c.identity, &text, emb, &cfg.thresholds)?;
    let mut video_scores = None;
    let mut triplet = None;
    if verdict == Verdict::Accepted {
        let img = preprocess(&raw)?;
        let video = mock_i2v(&img, &c.prompt, cfg.frames, c.lazy)?;
        let (v, s) = filter_video(&video, emb, flow, &cfg.thresholds, cfg.random_pairs, rng)?;
        verdict = v;
        video_scores = Some(s);
        if v == Verdict::Accepted {
            triplet = Some(Triplet {
                subject: c.subject.clone(),
                identity: c.identity.clone(),
                prompt: text.clone(),
                video,
                origin: Origin::Synthetic,
            });
        }
    }
    let row = AuditRow {
        index,
        prompt: text,
        corrupted: c.faults.corrupt,
        ignored_prompt: c.faults.ignore_prompt,
        lazy: c.lazy,
        image,
        video: video_scores,
        verdict,
    };
    Ok((row, triplet))
}

/// Generates `cfg.n_subjects` candidates, each from its own seed-derived
/// stream, and keeps the ones that pass both filters.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64) -> Result<(Vec<Triplet>, PipelineReport)> {
    cfg.validate()?;
    let emb = Embedders::default();
    let flow = crate::metrics::BlockMatcher::default();
    let root = Rng::new(seed);
    let results: Vec<(AuditRow, Option<Triplet>)> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let c = Candidate::draw(&cfg.templates, &cfg.rates, &mut rng)?;
            process_candidate(i, &c, cfg, &emb, &flow, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(results.len());
    let mut kept = Vec::new();
    for (row, t) in results {
        rows.push(row);
        kept.extend(t);
    }
    Ok((kept, PipelineReport::from_rows(rows)))
}

/// Real-video stand-in: the video shows the subject image itself in rigid
/// motion, so identity and appearance match exactly.
pub fn real_triplet(rng: &mut Rng, frames_out: usize) -> Result<Triplet> {
    let spec = SubjectSpec::random(rng);
    let bg = *rng.choose(&BACKGROUNDS);
    let center = world::random_center(rng);
    let (subject, identity) = world::render_subject_at(&spec, center, bg.rgb)?;
    let motion = *rng.choose(&Motion::RIGID);
    let prompt = Prompt {
        label: spec.label.clone(),
        color: None,
        texture: None,
        style: None,
        motion,
        background: Some(bg.name.to_string()),
    };
    let video = mock_i2v(&subject, &prompt, frames_out, false)?;
    Ok(Triplet { subject, identity, prompt: prompt.render(), video, origin: Origin::Real })
}

pub fn generate_real_set(n: usize, frames_out: usize, seed: u64) -> Result<Vec<Triplet>> {
    let root = Rng::new(seed ^ 0x7ea1);
    (0..n).into_par_iter().map(|i| real_triplet(&mut root.fork(i as u64), frames_out)).collect()
}

/// Pixel colour of a named sprite colour, for callers building fixtures.
pub fn sprite_pixel(name: &str) -> Option<[f64; 3]> {
    sprite_color(name).map(to_pixel)
}
