//! Deterministic toy encoders.
//!
//! Two families live here. Evaluation embedders map an image or prompt to a
//! unit vector and back the identity, text and consistency metrics and the
//! pipeline filters. Condition encoders produce the token matrices fed to
//! the model.

use crate::datapipe::prompt::{parse_prompt, Prompt};
use crate::datapipe::world::{boundary, Style, Texture, BACKGROUNDS, CHANNELS, SIZE, SPRITE_COLORS};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Distance from the border colour above which a pixel is foreground.
pub const SALIENCY_THRESHOLD: f64 = 0.45;

const FINE_SEED: u64 = 0x5eed_f1e0;
const TOKEN_SEED: u64 = 0x5eed_70c5;

pub trait ImageEmbedder: Sync {
    /// Unit-norm embedding of a `[16, 16, 3]` image.
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>>;
}

pub trait TextEmbedder: Sync {
    /// Unit-norm embedding of a prompt.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Unit-normalizes `v`; a zero vector maps to the uniform unit vector.
fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        let l = v.len();
        return vec![1.0 / (l as f64).sqrt(); l];
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub(crate) fn check_image(op: &'static str, image: &Tensor) -> Result<()> {
    if image.shape() != [SIZE, SIZE, CHANNELS] {
        return Err(Error::shape(op, format!("expected [{SIZE}, {SIZE}, {CHANNELS}], got {:?}", image.shape())));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

fn pixel(image: &Tensor, i: usize) -> [f64; 3] {
    let d = image.data();
    [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Foreground estimate: pixels far from the per-channel median of the
/// border ring.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub mask: Vec<bool>,
    pub background: [f64; 3],
}

impl Saliency {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, _) in self.mask.iter().enumerate().filter(|(_, m)| **m) {
            sx += (i % SIZE) as f64;
            sy += (i / SIZE) as f64;
        }
        Some((sx / n as f64, sy / n as f64))
    }
}

pub fn saliency(image: &Tensor) -> Result<Saliency> {
    check_image("saliency", image)?;
    let mut ring: Vec<[f64; 3]> = Vec::with_capacity(4 * SIZE);
    for y in 0..SIZE {
        for x in 0..SIZE {
            if x == 0 || y == 0 || x == SIZE - 1 || y == SIZE - 1 {
                ring.push(pixel(image, y * SIZE + x));
            }
        }
    }
    let mut background = [0.0; 3];
    for (c, bg) in background.iter_mut().enumerate() {
        let mut vals: Vec<f64> = ring.iter().map(|p| p[c]).collect();
        vals.sort_by(f64::total_cmp);
        let m = vals.len() / 2;
        *bg = if vals.len().is_multiple_of(2) { 0.5 * (vals[m - 1] + vals[m]) } else { vals[m] };
    }
    let mask = (0..SIZE * SIZE).map(|i| dist(pixel(image, i), background) > SALIENCY_THRESHOLD).collect();
    Ok(Saliency { mask, background })
}

/// Identity-sensitive embedding: centroid-aligned silhouette, outline and
/// colour maps under a fixed random projection.
#[derive(Debug, Clone)]
pub struct FineEmbedder {
    proj: Vec<f64>,
    out_dim: usize,
}

const FINE_FEATURES: usize = SIZE * SIZE * 5;

impl Default for FineEmbedder {
    fn default() -> Self {
        Self::new(512)
    }
}

impl FineEmbedder {
    pub fn new(out_dim: usize) -> Self {
        let mut rng = Rng::new(FINE_SEED);
        let proj = (0..FINE_FEATURES * out_dim).map(|_| rng.normal()).collect();
        FineEmbedder { proj, out_dim }
    }

    /// Unprojected features; exposed for tests of the projection.
    pub fn features(&self, image: &Tensor) -> Result<Option<Vec<f64>>> {
        let sal = saliency(image)?;
        let Some((cx, cy)) = sal.centroid() else { return Ok(None) };
        let (ox, oy) = ((SIZE / 2) as i64 - cx.round() as i64, (SIZE / 2) as i64 - cy.round() as i64);
        let edge = boundary(&sal.mask);
        let mut f = vec![0.0; FINE_FEATURES];
        let plane = SIZE * SIZE;
        for y in 0..SIZE as i64 {
            for x in 0..SIZE as i64 {
                let src = (y * SIZE as i64 + x) as usize;
                if !sal.mask[src] {
                    continue;
                }
                let (tx, ty) = (x + ox, y + oy);
                if tx < 0 || ty < 0 || tx >= SIZE as i64 || ty >= SIZE as i64 {
                    continue;
                }
                let dst = (ty * SIZE as i64 + tx) as usize;
                if edge[src] {
                    f[dst] = 1.0;
                }
                f[plane + dst] = 0.2;
                let p = pixel(image, src);
                for c in 0..3 {
                    f[(2 + c) * plane + dst] = 0.15 * p[c];
                }
            }
        }
        Ok(Some(f))
    }
}

impl ImageEmbedder for FineEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        let k = self.out_dim;
        let Some(f) = self.features(image)? else {
            return Ok(vec![1.0 / (k as f64).sqrt(); k]);
        };
        let mut out = vec![0.0; k];
        for (i, fi) in f.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            for (o, w) in out.iter_mut().zip(&self.proj[i * k..(i + 1) * k]) {
                *o += fi * w;
            }
        }
        Ok(normalized(out))
    }
}

/// Soft membership of a pixel in the eight sign octants of colour space,
/// indexed `4·[r>0] + 2·[g>0] + [b>0]`.
fn octant_weights(p: [f64; 3]) -> [f64; 8] {
    let mut w = [1.0; 8];
    for (o, wo) in w.iter_mut().enumerate() {
        for (c, v) in p.iter().enumerate() {
            let s = if (o >> (2 - c)) & 1 == 1 { 1.0 } else { -1.0 };
            *wo *= (1.0 + s * v.clamp(-1.0, 1.0)) / 2.0;
        }
    }
    w
}

pub fn octant(p: [f64; 3]) -> usize {
    4 * usize::from(p[0] > 0.0) + 2 * usize::from(p[1] > 0.0) + usize::from(p[2] > 0.0)
}

/// Coarse colour embedding: soft 8-bin histogram over non-zero pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoarseEmbedder;

impl CoarseEmbedder {
    pub fn histogram(&self, image: &Tensor, skip: Option<&[bool]>) -> Result<Vec<f64>> {
        check_image("coarse_embed", image)?;
        let mut h = vec![0.0; 8];
        for i in 0..SIZE * SIZE {
            if skip.is_some_and(|s| s[i]) {
                continue;
            }
            let p = pixel(image, i);
            if p.iter().all(|v| *v == 0.0) {
                continue;
            }
            for (hb, w) in h.iter_mut().zip(octant_weights(p)) {
                *hb += w;
            }
        }
        Ok(normalized(h))
    }

    /// Histogram of the frame with the salient region removed.
    pub fn embed_background(&self, image: &Tensor) -> Result<Vec<f64>> {
        let sal = saliency(image)?;
        self.histogram(image, Some(&sal.mask))
    }
}

impl ImageEmbedder for CoarseEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.histogram(image, None)
    }
}

/// Shared image/text space: `[subject, colour×8, background×5, texture×2,
/// outline]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct JointEmbedder;

pub const JOINT_DIM: usize = 1 + 8 + 5 + 2 + 1;
const J_COLOR: usize = 1;
const J_BG: usize = 9;
const J_TEX: usize = 14;
const J_STYLE: usize = 16;

fn is_complement(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| x * y < 0.0)
}

impl JointEmbedder {
    pub fn image_features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let sal = saliency(image)?;
        let mut v = vec![0.0; JOINT_DIM];
        let bg = BACKGROUNDS
            .iter()
            .enumerate()
            .map(|(i, b)| (i, dist(crate::datapipe::world::to_pixel(b.rgb), sal.background)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("non-empty palette");
        v[J_BG + bg] = 1.0;
        if sal.count() == 0 {
            return Ok(v);
        }
        v[0] = 0.5;
        let edge = boundary(&sal.mask);
        let interior: Vec<bool> = sal.mask.iter().zip(&edge).map(|(m, e)| *m && !e).collect();
        let region: &[bool] = if interior.iter().any(|b| *b) { &interior } else { &sal.mask };
        let n = region.iter().filter(|b| **b).count() as f64;
        for i in (0..SIZE * SIZE).filter(|i| region[*i]) {
            v[J_COLOR + octant(pixel(image, i))] += 1.0 / n;
        }

        let (mut vert, mut vflip, mut horiz, mut hflip) = (0.0f64, 0.0, 0.0f64, 0.0);
        for y in 0..SIZE {
            for x in 0..SIZE {
                let i = y * SIZE + x;
                if !interior[i] {
                    continue;
                }
                if x + 1 < SIZE && interior[i + 1] {
                    horiz += 1.0;
                    hflip += f64::from(u8::from(is_complement(pixel(image, i), pixel(image, i + 1))));
                }
                if y + 1 < SIZE && interior[i + SIZE] {
                    vert += 1.0;
                    vflip += f64::from(u8::from(is_complement(pixel(image, i), pixel(image, i + SIZE))));
                }
            }
        }
        let (vr, hr) = (vflip / vert.max(1.0), hflip / horiz.max(1.0));
        if vr > 0.5 && hr > 0.5 {
            v[J_TEX + 1] = 1.0;
        } else if vr > 0.5 {
            v[J_TEX] = 1.0;
        }

        let interior_octant = (0..8).max_by(|a, b| v[J_COLOR + a].total_cmp(&v[J_COLOR + b])).unwrap_or(0);
        let edges: Vec<usize> = (0..SIZE * SIZE).filter(|i| edge[*i]).collect();
        let outlined = edges
            .iter()
            .filter(|i| {
                let p = pixel(image, **i);
                let o = octant(p);
                (o == 0 || o == 7) && o != interior_octant
            })
            .count();
        if !edges.is_empty() && outlined as f64 / edges.len() as f64 > 0.6 && interior.iter().any(|b| *b) {
            v[J_STYLE] = 1.0;
        }
        Ok(v)
    }

    pub fn prompt_features(&self, p: &Prompt) -> Vec<f64> {
        let mut v = vec![0.0; JOINT_DIM];
        v[0] = 0.5;
        if let Some(c) = &p.color {
            if let Some(i) = SPRITE_COLORS.iter().position(|s| s.name == c) {
                v[J_COLOR + i] = 1.0;
            }
        }
        if let Some(b) = &p.background {
            if let Some(i) = BACKGROUNDS.iter().position(|s| s.name == b) {
                v[J_BG + i] = 1.0;
            }
        }
        match p.texture {
            Some(Texture::Stripes) => v[J_TEX] = 1.0,
            Some(Texture::Checkers) => v[J_TEX + 1] = 1.0,
            None => {}
        }
        if p.style == Some(Style::Outlined) {
            v[J_STYLE] = 1.0;
        }
        v
    }
}

impl ImageEmbedder for JointEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(normalized(self.image_features(image)?))
    }
}

impl TextEmbedder for JointEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let p = parse_prompt(text)?;
        Ok(normalized(self.prompt_features(&p)))
    }
}

/// The three evaluation embedders bundled together.
#[derive(Debug, Clone, Default)]
pub struct Embedders {
    pub fine: FineEmbedder,
    pub coarse: CoarseEmbedder,
    pub joint: JointEmbedder,
}

/// Token matrices consumed by the model for one identity image and prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub fine: Tensor,
    pub coarse: Tensor,
    pub text: Tensor,
}

/// Model-side encoders. Fine tokens are fixed random projections of the
/// identity image split into a square grid of regions; the coarse token is
/// the colour histogram; text tokens are one fixed vector per prompt slot.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    grid: usize,
    d_fine: usize,
    d_text: usize,
    n_text: usize,
    fine_proj: Vec<f64>,
}

const TEXT_SLOTS: usize = 6;

fn word_seed(slot: usize, word: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in slot.to_le_bytes().iter().chain(word.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ TOKEN_SEED
}

impl ConditionEncoder {
    pub fn new(
        n_fine: usize,
        d_fine: usize,
        n_coarse: usize,
        d_coarse: usize,
        n_text: usize,
        d_text: usize,
    ) -> Result<Self> {
        let grid = (n_fine as f64).sqrt().round() as usize;
        if grid == 0 || grid * grid != n_fine || !SIZE.is_multiple_of(grid) {
            return Err(Error::Config(format!("n_fine {n_fine} must be a square grid dividing {SIZE}")));
        }
        if n_coarse != 1 || d_coarse != 8 {
            return Err(Error::Config("coarse identity input is one 8-bin histogram token".into()));
        }
        if n_text < TEXT_SLOTS {
            return Err(Error::Config(format!("n_text must be >= {TEXT_SLOTS}, got {n_text}")));
        }
        if d_fine == 0 || d_text == 0 {
            return Err(Error::Config("token widths must be >= 1".into()));
        }
        let region = (SIZE / grid).pow(2) * CHANNELS;
        let mut rng = Rng::new(FINE_SEED ^ 0xf17e);
        let std = 1.0 / (region as f64).sqrt() * 4.0;
        let fine_proj = (0..region * d_fine).map(|_| rng.normal() * std).collect();
        Ok(ConditionEncoder { grid, d_fine, d_text, n_text, fine_proj })
    }

    pub fn for_model(cfg: &crate::model::ModelConfig) -> Result<Self> {
        let l = &cfg.layout;
        Self::new(l.n_fine, cfg.d_fine, l.n_coarse, cfg.d_coarse, l.n_text, cfg.d_text)
    }

    pub fn fine_tokens(&self, z: &Tensor) -> Result<Tensor> {
        check_image("fine_tokens", z)?;
        let cell = SIZE / self.grid;
        let region = cell * cell * CHANNELS;
        let n = self.grid * self.grid;
        let mut out = vec![0.0; n * self.d_fine];
        let mut buf = vec![0.0; region];
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut j = 0;
                for y in 0..cell {
                    for x in 0..cell {
                        let p = pixel(z, (gy * cell + y) * SIZE + gx * cell + x);
                        buf[j..j + 3].copy_from_slice(&p);
                        j += 3;
                    }
                }
                let row = &mut out[(gy * self.grid + gx) * self.d_fine..][..self.d_fine];
                for (i, v) in buf.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                    for (o, w) in row.iter_mut().zip(&self.fine_proj[i * self.d_fine..(i + 1) * self.d_fine]) {
                        *o += v * w;
                    }
                }
            }
        }
        Tensor::new(vec![n, self.d_fine], out)
    }

    pub fn coarse_tokens(&self, z: &Tensor) -> Result<Tensor> {
        let h = CoarseEmbedder.histogram(z, None)?;
        Tensor::new(vec![1, 8], h.iter().map(|v| v * 2.0).collect())
    }

    fn word_vector(&self, slot: usize, word: &str) -> Vec<f64> {
        let mut rng = Rng::new(word_seed(slot, word));
        (0..self.d_text).map(|_| rng.normal()).collect()
    }

    pub fn text_tokens(&self, prompt: &Prompt) -> Result<Tensor> {
        let words: [String; TEXT_SLOTS] = [
            prompt.label.clone(),
            prompt.color.clone().unwrap_or_else(|| "none".into()),
            prompt.texture.map_or("none", |t| t.word()).to_string(),
            prompt.style.map_or("none", |s| s.word()).to_string(),
            prompt.motion.phrase().to_string(),
            prompt.background.clone().unwrap_or_else(|| "none".into()),
        ];
        let mut data = Vec::with_capacity(self.n_text * self.d_text);
        for slot in 0..self.n_text {
            let word = words.get(slot).map_or("pad", String::as_str);
            data.extend(self.word_vector(slot, word));
        }
        Tensor::new(vec![self.n_text, self.d_text], data)
    }

    pub fn encode(&self, z: &Tensor, prompt: &Prompt) -> Result<ConditionTokens> {
        Ok(ConditionTokens {
            fine: self.fine_tokens(z)?,
            coarse: self.coarse_tokens(z)?,
            text: self.text_tokens(prompt)?,
        })
    }
}
