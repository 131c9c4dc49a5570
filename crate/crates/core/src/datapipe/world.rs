//! Procedural sprites on flat backgrounds, 16×16 RGB in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const SPRITE_RADIUS: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    /// The shape whose silhouette differs most, used to inject identity
    /// corruption.
    pub fn most_dissimilar(self) -> Shape {
        match self {
            Shape::Circle | Shape::Square => Shape::Star,
            Shape::Triangle | Shape::Star => Shape::Square,
        }
    }

    /// Whether pixel offset `(dx, dy)` from the centre lies inside.
    pub fn contains(self, dx: f64, dy: f64) -> bool {
        let r = SPRITE_RADIUS;
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r - 0.5 && dy.abs() <= r - 0.5,
            Shape::Triangle => dy <= r - 0.5 && dy >= -r && dx.abs() <= (dy + r) / 2.0 + 0.25,
            Shape::Star => {
                let ang = dy.atan2(dx) + std::f64::consts::FRAC_PI_2;
                let a = (ang * 5.0 / std::f64::consts::TAU).rem_euclid(1.0);
                let tip = (a - 0.5).abs() * 2.0;
                let reach = r * 0.45 + (r + 0.5 - r * 0.45) * tip;
                dx.hypot(dy) <= reach
            }
        }
    }
}

/// Named colour with channels in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

/// Saturated sprite colours; one per sign octant of pixel space.
pub const SPRITE_COLORS: [NamedColor; 8] = [
    NamedColor { name: "black", rgb: [0.0, 0.0, 0.0] },
    NamedColor { name: "blue", rgb: [0.0, 0.0, 1.0] },
    NamedColor { name: "green", rgb: [0.0, 1.0, 0.0] },
    NamedColor { name: "cyan", rgb: [0.0, 1.0, 1.0] },
    NamedColor { name: "red", rgb: [1.0, 0.0, 0.0] },
    NamedColor { name: "magenta", rgb: [1.0, 0.0, 1.0] },
    NamedColor { name: "yellow", rgb: [1.0, 1.0, 0.0] },
    NamedColor { name: "white", rgb: [1.0, 1.0, 1.0] },
];

/// Muted backgrounds, all within `[0.25, 0.75]` per channel so every
/// sprite colour stays salient against them.
pub const BACKGROUNDS: [NamedColor; 5] = [
    NamedColor { name: "gray", rgb: [0.5, 0.5, 0.5] },
    NamedColor { name: "sand", rgb: [0.7, 0.65, 0.45] },
    NamedColor { name: "teal", rgb: [0.3, 0.55, 0.55] },
    NamedColor { name: "plum", rgb: [0.55, 0.35, 0.55] },
    NamedColor { name: "olive", rgb: [0.5, 0.55, 0.3] },
];

pub const LABELS: [&str; 4] = ["toy", "robot", "pet", "gadget"];

pub fn sprite_color(name: &str) -> Option<[f64; 3]> {
    SPRITE_COLORS.iter().find(|c| c.name == name).map(|c| c.rgb)
}

pub fn background_color(name: &str) -> Option<[f64; 3]> {
    BACKGROUNDS.iter().find(|c| c.name == name).map(|c| c.rgb)
}

pub fn to_pixel(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| 2.0 * c - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Checkers,
}

impl Texture {
    pub const ALL: [Texture; 2] = [Texture::Stripes, Texture::Checkers];

    pub fn word(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Checkers => "checkers",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Outlined,
}

impl Style {
    pub const ALL: [Style; 1] = [Style::Outlined];

    pub fn word(self) -> &'static str {
        match self {
            Style::Outlined => "outlined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    SlideLeft,
    SlideRight,
    SlideUp,
    SlideDown,
    Bounce,
    Orbit,
    Spin,
}

impl Motion {
    pub const ALL: [Motion; 8] = [
        Motion::Static,
        Motion::SlideLeft,
        Motion::SlideRight,
        Motion::SlideUp,
        Motion::SlideDown,
        Motion::Bounce,
        Motion::Orbit,
        Motion::Spin,
    ];

    /// Motions whose silhouette stays rigid, used for the real-video stand-in.
    pub const RIGID: [Motion; 6] =
        [Motion::SlideLeft, Motion::SlideRight, Motion::SlideUp, Motion::SlideDown, Motion::Bounce, Motion::Orbit];

    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Static => "standing still",
            Motion::SlideLeft => "moving left",
            Motion::SlideRight => "moving right",
            Motion::SlideUp => "moving up",
            Motion::SlideDown => "moving down",
            Motion::Bounce => "bouncing",
            Motion::Orbit => "circling",
            Motion::Spin => "spinning",
        }
    }

    /// Sprite offset and rotation (radians) at frame `k`, starting from a
    /// centre at `(cx, cy)`. Translations reflect off the walls.
    pub fn pose(self, k: usize, cx: f64, cy: f64) -> (f64, f64, f64) {
        let k = k as f64;
        let (lo, hi) = (SPRITE_RADIUS.ceil(), SIZE as f64 - 1.0 - SPRITE_RADIUS.ceil());
        let walk = |start: f64, v: f64| reflect(start + v * k, lo, hi) - start;
        match self {
            Motion::Static => (0.0, 0.0, 0.0),
            Motion::SlideLeft => (walk(cx, -1.0), 0.0, 0.0),
            Motion::SlideRight => (walk(cx, 1.0), 0.0, 0.0),
            Motion::SlideUp => (0.0, walk(cy, -1.0), 0.0),
            Motion::SlideDown => (0.0, walk(cy, 1.0), 0.0),
            Motion::Bounce => (walk(cx, 1.0), walk(cy, 1.0), 0.0),
            Motion::Orbit => {
                let a = k * std::f64::consts::FRAC_PI_4;
                let r = 2.0;
                let dx = (r * a.cos() - r).round();
                let dy = (r * a.sin()).round();
                (reflect(cx + dx, lo, hi) - cx, reflect(cy + dy, lo, hi) - cy, 0.0)
            }
            Motion::Spin => (0.0, 0.0, k * std::f64::consts::PI / 8.0),
        }
    }
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let p = (x - lo).rem_euclid(2.0 * span);
    lo + if p > span { 2.0 * span - p } else { p }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub color: [f64; 3],
    pub label: String,
}

impl SubjectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Data(format!("subject colour {:?} outside [0, 1]", self.color)));
        }
        if !LABELS.contains(&self.label.as_str()) {
            return Err(Error::Data(format!("unknown subject label {:?}", self.label)));
        }
        Ok(())
    }

    pub fn random(rng: &mut Rng) -> SubjectSpec {
        SubjectSpec {
            shape: *rng.choose(&Shape::ALL),
            color: rng.choose(&SPRITE_COLORS).rgb,
            label: rng.choose(&LABELS).to_string(),
        }
    }

    pub fn color_name(&self) -> Option<&'static str> {
        SPRITE_COLORS.iter().find(|c| c.rgb == self.color).map(|c| c.name)
    }
}

/// How a sprite's pixels are coloured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub color: [f64; 3],
    pub texture: Option<Texture>,
    pub style: Option<Style>,
}

impl Appearance {
    pub fn plain(color: [f64; 3]) -> Self {
        Appearance { color, texture: None, style: None }
    }
}

/// Boolean support of a sprite centred at `(cx, cy)` and rotated by `angle`.
pub fn sprite_mask(shape: Shape, cx: f64, cy: f64, angle: f64) -> Vec<bool> {
    let (s, c) = angle.sin_cos();
    let mut m = vec![false; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
            m[y * SIZE + x] = shape.contains(rx, ry);
        }
    }
    m
}

/// Pixels of `mask` with at least one 4-neighbour outside it.
pub fn boundary(mask: &[bool]) -> Vec<bool> {
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < SIZE && (y as usize) < SIZE && mask[y as usize * SIZE + x as usize]
    };
    let mut b = vec![false; mask.len()];
    for y in 0..SIZE as isize {
        for x in 0..SIZE as isize {
            if at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)) {
                b[y as usize * SIZE + x as usize] = true;
            }
        }
    }
    b
}

pub fn flat_image(rgb: [f64; 3]) -> Tensor {
    let p = to_pixel(rgb);
    Tensor::from_fn(&[SIZE, SIZE, CHANNELS], |i| p[i % CHANNELS])
}

fn complement(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| -v)
}

/// Paints a sprite with the given appearance over `canvas`. `origin` anchors
/// texture phase so patterns travel with the sprite.
pub fn paint_sprite(canvas: &mut Tensor, mask: &[bool], look: &Appearance, origin: (i64, i64)) {
    let base = to_pixel(look.color);
    let edge = boundary(mask);
    let outline = if look.color == [0.0; 3] { [1.0; 3] } else { [-1.0; 3] };
    let data = canvas.data_mut();
    for y in 0..SIZE {
        for x in 0..SIZE {
            let i = y * SIZE + x;
            if !mask[i] {
                continue;
            }
            let (rx, ry) = (x as i64 - origin.0, y as i64 - origin.1);
            let mut p = match look.texture {
                Some(Texture::Stripes) if ry.rem_euclid(2) == 1 => complement(base),
                Some(Texture::Checkers) if (rx + ry).rem_euclid(2) == 1 => complement(base),
                _ => base,
            };
            if look.style == Some(Style::Outlined) && edge[i] {
                p = outline;
            }
            data[i * CHANNELS..(i + 1) * CHANNELS].copy_from_slice(&p);
        }
    }
}

/// Sprite centre drawn so the sprite fits inside the frame.
pub fn random_center(rng: &mut Rng) -> (f64, f64) {
    let lo = SPRITE_RADIUS.ceil() as usize;
    let span = SIZE - 2 * lo;
    ((lo + rng.below(span)) as f64, (lo + rng.below(span)) as f64)
}

/// Subject image on `background` plus the identity image on a zero
/// background, both with the sprite at `center`.
pub fn render_subject_at(spec: &SubjectSpec, center: (f64, f64), background: [f64; 3]) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mask = sprite_mask(spec.shape, center.0, center.1, 0.0);
    let look = Appearance::plain(spec.color);
    let origin = (center.0 as i64, center.1 as i64);
    let mut s = flat_image(background);
    paint_sprite(&mut s, &mask, &look, origin);
    let mut z = Tensor::zeros(&[SIZE, SIZE, CHANNELS]);
    paint_sprite(&mut z, &mask, &look, origin);
    Ok((s, z))
}

/// Random placement and background.
pub fn render_subject(spec: &SubjectSpec, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let center = random_center(rng);
    let bg = rng.choose(&BACKGROUNDS).rgb;
    render_subject_at(spec, center, bg)
}

/// Frame `k` of a `[F, 16, 16, 3]` video.
pub fn frame(video: &Tensor, k: usize) -> Result<Tensor> {
    let shape = video.shape();
    if shape.len() != 4 || shape[1..] != [SIZE, SIZE, CHANNELS] || k >= shape[0] {
        return Err(Error::shape("frame", format!("frame {k} of video {shape:?}")));
    }
    let n = SIZE * SIZE * CHANNELS;
    Tensor::new(vec![SIZE, SIZE, CHANNELS], video.data()[k * n..(k + 1) * n].to_vec())
}

pub fn frames(video: &Tensor) -> Result<Vec<Tensor>> {
    let f = video.shape().first().copied().unwrap_or(0);
    (0..f).map(|k| frame(video, k)).collect()
}

pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * SIZE * SIZE * CHANNELS);
    for f in frames {
        if f.shape() != [SIZE, SIZE, CHANNELS] {
            return Err(Error::shape("stack_frames", format!("frame {:?}", f.shape())));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), SIZE, SIZE, CHANNELS], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, color: &str) -> SubjectSpec {
        SubjectSpec { shape, color: sprite_color(color).unwrap(), label: "toy".into() }
    }

    #[test]
    fn identity_image_is_zero_off_sprite() {
        let (s, z) = render_subject_at(&spec(Shape::Star, "red"), (7.0, 8.0), [0.3, 0.55, 0.55]).unwrap();
        let mask = sprite_mask(Shape::Star, 7.0, 8.0, 0.0);
        for (i, inside) in mask.iter().enumerate() {
            let (zp, sp) = (&z.data()[i * 3..i * 3 + 3], &s.data()[i * 3..i * 3 + 3]);
            if *inside {
                assert_eq!(zp, sp);
            } else {
                assert_eq!(zp, &[0.0; 3]);
            }
        }
    }

    #[test]
    fn colour_change_differs_exactly_on_support() {
        let (_, a) = render_subject_at(&spec(Shape::Triangle, "red"), (8.0, 8.0), [0.5; 3]).unwrap();
        let (_, b) = render_subject_at(&spec(Shape::Triangle, "blue"), (8.0, 8.0), [0.5; 3]).unwrap();
        let mask = sprite_mask(Shape::Triangle, 8.0, 8.0, 0.0);
        for (i, inside) in mask.iter().enumerate() {
            let differs = a.data()[i * 3..i * 3 + 3] != b.data()[i * 3..i * 3 + 3];
            assert_eq!(differs, *inside, "pixel {i}");
        }
    }

    #[test]
    fn shapes_have_distinct_reasonable_sizes() {
        let areas: Vec<usize> =
            Shape::ALL.iter().map(|s| sprite_mask(*s, 8.0, 8.0, 0.0).iter().filter(|b| **b).count()).collect();
        for a in &areas {
            assert!((15..=60).contains(a), "{areas:?}");
        }
        for (i, s) in Shape::ALL.iter().enumerate() {
            for t in &Shape::ALL[i + 1..] {
                assert_ne!(sprite_mask(*s, 8.0, 8.0, 0.0), sprite_mask(*t, 8.0, 8.0, 0.0));
            }
        }
    }

    #[test]
    fn sprites_stay_inside_frame_for_every_pose() {
        for m in Motion::ALL {
            for k in 0..16 {
                for c in [4.0, 11.0] {
                    let (dx, dy, _) = m.pose(k, c, c);
                    let (x, y) = (c + dx, c + dy);
                    assert!((4.0..=11.0).contains(&x) && (4.0..=11.0).contains(&y), "{m:?} {k} {x} {y}");
                }
            }
        }
        assert_eq!(Motion::SlideRight.pose(3, 5.0, 5.0).0, 3.0);
        // reflection at the right wall
        assert_eq!(Motion::SlideRight.pose(3, 10.0, 5.0).0, -1.0);
    }

    #[test]
    fn backgrounds_are_far_from_sprite_colours() {
        for s in SPRITE_COLORS {
            for b in BACKGROUNDS {
                let (p, q) = (to_pixel(s.rgb), to_pixel(b.rgb));
                let d: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d > 0.8, "{} on {}", s.name, b.name);
            }
        }
    }
}
