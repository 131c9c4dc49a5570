//! Group-level attention designs and their token-level expansion.
//!
//! Tokens are laid out as `[fine | coarse | text | frame 1 | frames 2..F]`.
//! A design is a 5×5 boolean matrix over those groups (row = query group,
//! column = key group).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, NEG_LARGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Fine,
    Coarse,
    Text,
    Frame1,
    FrameRest,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Fine, Group::Coarse, Group::Text, Group::Frame1, Group::FrameRest];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_image(self) -> bool {
        matches!(self, Group::Fine | Group::Coarse)
    }

    pub fn is_video(self) -> bool {
        matches!(self, Group::Frame1 | Group::FrameRest)
    }
}

pub type GroupMatrix = [[bool; 5]; 5];

/// Selective attention designs. `C` and `D` are reconstructions of
/// figure-only designs; `Custom` supplies the group matrix directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionDesign {
    /// Video never sees the identity embeddings (plain text-to-video).
    A,
    /// Only frame 1 reads the identity embeddings; they cannot read frame 1.
    B,
    /// Every frame reads the identity embeddings; they read no frames.
    C,
    /// Only frame 1 reads the identity embeddings and they read frame 1.
    D,
    /// Full attention.
    E,
    Custom(GroupMatrix),
}

impl std::fmt::Display for AttentionDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionDesign::A => write!(f, "A"),
            AttentionDesign::B => write!(f, "B"),
            AttentionDesign::C => write!(f, "C"),
            AttentionDesign::D => write!(f, "D"),
            AttentionDesign::E => write!(f, "E"),
            AttentionDesign::Custom(_) => write!(f, "custom"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectiveMask {
    design: AttentionDesign,
    attend: GroupMatrix,
}

fn preset(design: AttentionDesign) -> GroupMatrix {
    use Group::*;
    let mut m = [[true; 5]; 5];
    let mut deny = |q: Group, k: Group| m[q.index()][k.index()] = false;
    match design {
        AttentionDesign::E | AttentionDesign::Custom(_) => {}
        AttentionDesign::A => {
            for v in [Frame1, FrameRest] {
                for i in [Fine, Coarse] {
                    deny(v, i);
                    deny(i, v);
                }
            }
        }
        AttentionDesign::B => {
            for i in [Fine, Coarse] {
                deny(i, Frame1);
                deny(FrameRest, i);
            }
        }
        AttentionDesign::C => {
            for i in [Fine, Coarse] {
                deny(i, Frame1);
                deny(i, FrameRest);
            }
        }
        AttentionDesign::D => {
            for i in [Fine, Coarse] {
                deny(i, FrameRest);
                deny(FrameRest, i);
            }
        }
    }
    // Text may not relay identity information to video in the restricted
    // designs; otherwise two layers would bypass the mask.
    if !matches!(design, AttentionDesign::E | AttentionDesign::Custom(_)) {
        m[Text.index()][Fine.index()] = false;
        m[Text.index()][Coarse.index()] = false;
    }
    m
}

impl SelectiveMask {
    pub fn new(design: AttentionDesign) -> Result<Self> {
        let attend = match design {
            AttentionDesign::Custom(m) => m,
            d => preset(d),
        };
        validate(&attend)?;
        Ok(SelectiveMask { design, attend })
    }

    pub fn design(&self) -> AttentionDesign {
        self.design
    }

    pub fn matrix(&self) -> &GroupMatrix {
        &self.attend
    }

    pub fn allows(&self, query: Group, key: Group) -> bool {
        self.attend[query.index()][key.index()]
    }

    /// Token-level additive mask: 0 where allowed, `NEG_LARGE` elsewhere.
    pub fn expand(&self, layout: &TokenLayout) -> Result<Tensor> {
        layout.validate()?;
        let groups = layout.token_groups();
        let n = groups.len();
        Ok(Tensor::from_fn(&[n, n], |idx| if self.allows(groups[idx / n], groups[idx % n]) { 0.0 } else { NEG_LARGE }))
    }
}

fn validate(m: &GroupMatrix) -> Result<()> {
    for g in Group::ALL {
        if !m[g.index()][g.index()] {
            return Err(Error::Config(format!("group {g:?} must attend to itself")));
        }
    }
    for q in Group::ALL {
        for k in Group::ALL {
            let video_pair = q.is_video() && k.is_video();
            let text_video = (q == Group::Text && k.is_video()) || (q.is_video() && k == Group::Text);
            if (video_pair || text_video) && !m[q.index()][k.index()] {
                return Err(Error::Config(format!("{q:?} -> {k:?} attention must stay allowed")));
            }
        }
    }
    Ok(())
}

pub fn build_mask(design: AttentionDesign, layout: &TokenLayout) -> Result<Tensor> {
    SelectiveMask::new(design)?.expand(layout)
}

/// Token counts per group plus model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_fine: usize,
    pub n_coarse: usize,
    pub n_text: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub d_model: usize,
}

impl Default for TokenLayout {
    fn default() -> Self {
        TokenLayout { n_fine: 4, n_coarse: 1, n_text: 8, frames: 8, tokens_per_frame: 16, d_model: 64 }
    }
}

impl TokenLayout {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_fine, self.n_coarse, self.n_text, self.frames, self.tokens_per_frame, self.d_model];
        if counts.contains(&0) {
            return Err(Error::Config(format!("token layout counts must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn n_condition(&self) -> usize {
        self.n_fine + self.n_coarse + self.n_text
    }

    pub fn n_video(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn total_tokens(&self) -> usize {
        self.n_condition() + self.n_video()
    }

    pub fn with_frames(&self, frames: usize) -> TokenLayout {
        TokenLayout { frames, ..*self }
    }

    pub fn token_groups(&self) -> Vec<Group> {
        let mut g = Vec::with_capacity(self.total_tokens());
        g.extend(std::iter::repeat_n(Group::Fine, self.n_fine));
        g.extend(std::iter::repeat_n(Group::Coarse, self.n_coarse));
        g.extend(std::iter::repeat_n(Group::Text, self.n_text));
        g.extend(std::iter::repeat_n(Group::Frame1, self.tokens_per_frame));
        g.extend(std::iter::repeat_n(Group::FrameRest, self.n_video() - self.tokens_per_frame));
        g
    }
}
