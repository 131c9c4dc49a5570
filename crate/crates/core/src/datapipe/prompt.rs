//! Prompt grammar: `a <label> [made of <texture>] [in <color>] [in <style> style]
//! <motion> [on a <background> background]`.

use serde::{Deserialize, Serialize};

use super::world::{background_color, sprite_color, Motion, Style, Texture, BACKGROUNDS, LABELS, SPRITE_COLORS};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub label: String,
    pub color: Option<String>,
    pub texture: Option<Texture>,
    pub style: Option<Style>,
    pub motion: Motion,
    pub background: Option<String>,
}

impl Prompt {
    pub fn plain(label: &str, motion: Motion) -> Prompt {
        Prompt { label: label.into(), color: None, texture: None, style: None, motion, background: None }
    }

    /// True when no appearance attribute is requested.
    pub fn keeps_appearance(&self) -> bool {
        self.color.is_none() && self.texture.is_none() && self.style.is_none()
    }

    pub fn render(&self) -> String {
        let mut s = format!("a {}", self.label);
        if let Some(t) = self.texture {
            s += &format!(" made of {}", t.word());
        }
        if let Some(c) = &self.color {
            s += &format!(" in {c}");
        }
        if let Some(st) = self.style {
            s += &format!(" in {} style", st.word());
        }
        s += " ";
        s += self.motion.phrase();
        if let Some(b) = &self.background {
            s += &format!(" on a {b} background");
        }
        s
    }

    pub fn tokens(&self) -> Vec<String> {
        self.render().split_whitespace().map(str::to_string).collect()
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

const FILLER: [&str; 9] = ["a", "an", "made", "of", "in", "style", "on", "background", "standing"];

pub fn parse_prompt(text: &str) -> Result<Prompt> {
    let err = |reason: String| Error::Prompt { prompt: text.to_string(), reason };
    let mut label = None;
    let mut color = None;
    let mut texture = None;
    let mut style = None;
    let mut motion = None;
    let mut background = None;
    let mut moving = false;
    fn set<T>(slot: &mut Option<T>, v: T, what: &str, err: &dyn Fn(String) -> Error) -> Result<()> {
        if slot.is_some() {
            return Err(err(format!("{what} given twice")));
        }
        *slot = Some(v);
        Ok(())
    }
    for raw in text.split_whitespace() {
        let w = raw.to_ascii_lowercase();
        let w = w.as_str();
        if FILLER.contains(&w) {
            continue;
        }
        if LABELS.contains(&w) {
            set(&mut label, w.to_string(), "subject", &err)?;
        } else if sprite_color(w).is_some() {
            set(&mut color, w.to_string(), "colour", &err)?;
        } else if background_color(w).is_some() {
            set(&mut background, w.to_string(), "background", &err)?;
        } else if let Some(t) = Texture::ALL.into_iter().find(|t| t.word() == w) {
            set(&mut texture, t, "texture", &err)?;
        } else if let Some(s) = Style::ALL.into_iter().find(|s| s.word() == w) {
            set(&mut style, s, "style", &err)?;
        } else if w == "moving" {
            moving = true;
        } else {
            let m = match w {
                "still" => Motion::Static,
                "left" => Motion::SlideLeft,
                "right" => Motion::SlideRight,
                "up" => Motion::SlideUp,
                "down" => Motion::SlideDown,
                "bouncing" => Motion::Bounce,
                "circling" => Motion::Orbit,
                "spinning" => Motion::Spin,
                _ => return Err(err(format!("unknown word {raw:?}"))),
            };
            set(&mut motion, m, "motion", &err)?;
        }
    }
    let label = label.ok_or_else(|| err("no subject noun".into()))?;
    let motion = motion.unwrap_or(Motion::Static);
    if moving && !matches!(motion, Motion::SlideLeft | Motion::SlideRight | Motion::SlideUp | Motion::SlideDown) {
        return Err(err("\"moving\" needs a direction".into()));
    }
    Ok(Prompt { label, color, texture, style, motion, background })
}

/// Which attribute slots a template fills when instantiated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub color: bool,
    pub texture: bool,
    pub style: bool,
    pub background: bool,
    pub motions: Vec<Motion>,
}

impl PromptTemplate {
    /// The default set: each changes one or two appearance attributes.
    pub fn defaults() -> Vec<PromptTemplate> {
        let m = Motion::ALL.to_vec();
        let t = |color, texture, style| PromptTemplate { color, texture, style, background: true, motions: m.clone() };
        vec![
            t(true, false, false),
            t(false, true, false),
            t(false, false, true),
            t(true, true, false),
            t(true, false, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.motions.is_empty() {
            return Err(Error::Config("prompt template needs at least one motion".into()));
        }
        Ok(())
    }

    pub fn instantiate(&self, label: &str, rng: &mut Rng) -> Prompt {
        Prompt {
            label: label.into(),
            color: self.color.then(|| rng.choose(&SPRITE_COLORS).name.to_string()),
            texture: self.texture.then(|| *rng.choose(&Texture::ALL)),
            style: self.style.then(|| *rng.choose(&Style::ALL)),
            motion: *rng.choose(&self.motions),
            background: self.background.then(|| rng.choose(&BACKGROUNDS).name.to_string()),
        }
    }
}
