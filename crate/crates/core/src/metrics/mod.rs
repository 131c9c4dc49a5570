//! Video quality metrics: identity preservation, text alignment, motion and
//! temporal consistency.

pub mod flow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::embed::{cosine, CoarseEmbedder, Embedders, FineEmbedder, ImageEmbedder, JointEmbedder, TextEmbedder};
pub use flow::{BlockMatcher, FlowEstimator};

use crate::datapipe::world::frames;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn video_frames(op: &str, video: &Tensor, min: usize) -> Result<Vec<Tensor>> {
    let fs = frames(video)?;
    if fs.len() < min {
        return Err(Error::Data(format!("{op} needs at least {min} frame(s), got {}", fs.len())));
    }
    Ok(fs)
}

/// Mean cosine between each frame and the subject image.
pub fn identity_score(video: &Tensor, subject: &Tensor, fine: &dyn ImageEmbedder) -> Result<f64> {
    let fs = video_frames("identity_score", video, 1)?;
    let reference = fine.embed_image(subject)?;
    let mut total = 0.0;
    for f in &fs {
        total += cosine(&fine.embed_image(f)?, &reference);
    }
    Ok(total / fs.len() as f64)
}

/// Mean cosine between each frame and the prompt in a joint space.
pub fn text_alignment(video: &Tensor, text: &str, image: &dyn ImageEmbedder, txt: &dyn TextEmbedder) -> Result<f64> {
    let fs = video_frames("text_alignment", video, 1)?;
    let t = txt.embed_text(text)?;
    let mut total = 0.0;
    for f in &fs {
        total += cosine(&image.embed_image(f)?, &t);
    }
    Ok(total / fs.len() as f64)
}

/// Mean over consecutive frame pairs of mean flow magnitude, px/frame.
pub fn dynamic_degree(video: &Tensor, flow: &dyn FlowEstimator) -> Result<f64> {
    let fs = video_frames("dynamic_degree", video, 2)?;
    let mut total = 0.0;
    for w in fs.windows(2) {
        total += flow.mean_magnitude(&w[0], &w[1])?;
    }
    Ok(total / (fs.len() - 1) as f64)
}

/// Mean of the consecutive-frame similarity and the similarity to frame 1,
/// given per-frame embeddings.
pub fn anchored_consistency(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Data(format!("consistency needs at least 2 frames, got {}", embeddings.len())));
    }
    let pairs = (embeddings.len() - 1) as f64;
    let consecutive = embeddings.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / pairs;
    let anchored = embeddings[1..].iter().map(|e| cosine(e, &embeddings[0])).sum::<f64>() / pairs;
    Ok(0.5 * (consecutive + anchored))
}

pub fn subject_consistency(video: &Tensor, fine: &dyn ImageEmbedder) -> Result<f64> {
    let fs = video_frames("subject_consistency", video, 2)?;
    let e: Vec<Vec<f64>> = fs.iter().map(|f| fine.embed_image(f)).collect::<Result<_>>()?;
    anchored_consistency(&e)
}

/// Consistency of the colour histogram outside the salient region.
pub fn background_consistency(video: &Tensor, coarse: &CoarseEmbedder) -> Result<f64> {
    let fs = video_frames("background_consistency", video, 2)?;
    let e: Vec<Vec<f64>> = fs.iter().map(|f| coarse.embed_background(f)).collect::<Result<_>>()?;
    anchored_consistency(&e)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub identity_score: f64,
    pub text_alignment: f64,
    pub dynamic_degree: f64,
    pub subject_consistency: f64,
    pub background_consistency: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            identity_score: sum(|r| r.identity_score),
            text_alignment: sum(|r| r.text_alignment),
            dynamic_degree: sum(|r| r.dynamic_degree),
            subject_consistency: sum(|r| r.subject_consistency),
            background_consistency: sum(|r| r.background_consistency),
        }
    }

    /// Column names of the paper's results table.
    pub fn table_row(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for (k, v) in [
            ("dino_score", self.identity_score),
            ("clip_score", self.text_alignment),
            ("dynamic_degree", self.dynamic_degree),
            ("subject_consistency", self.subject_consistency),
            ("background_consistency", self.background_consistency),
        ] {
            m.insert(k.into(), serde_json::json!(v));
        }
        m
    }
}

pub fn evaluate_video(
    video: &Tensor,
    subject: &Tensor,
    prompt: &str,
    emb: &Embedders,
    flow: &dyn FlowEstimator,
) -> Result<MetricReport> {
    Ok(MetricReport {
        identity_score: identity_score(video, subject, &emb.fine)?,
        text_alignment: text_alignment(video, prompt, &emb.joint, &emb.joint)?,
        dynamic_degree: dynamic_degree(video, flow)?,
        subject_consistency: subject_consistency(video, &emb.fine)?,
        background_consistency: background_consistency(video, &emb.coarse)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub per_video: Vec<MetricReport>,
    pub mean: MetricReport,
}

/// Scores every video against its subject image and prompt.
pub fn evaluate_run(
    videos: &[Tensor],
    subjects: &[Tensor],
    prompts: &[String],
    emb: &Embedders,
    flow: &dyn FlowEstimator,
) -> Result<RunEvaluation> {
    if videos.len() != subjects.len() || videos.len() != prompts.len() {
        return Err(Error::Data(format!(
            "evaluate_run: {} videos, {} subjects, {} prompts",
            videos.len(),
            subjects.len(),
            prompts.len()
        )));
    }
    let per_video: Vec<MetricReport> = videos
        .par_iter()
        .zip(subjects.par_iter())
        .zip(prompts.par_iter())
        .map(|((v, s), p)| evaluate_video(v, s, p, emb, flow))
        .collect::<Result<_>>()?;
    let mean = MetricReport::mean(&per_video);
    Ok(RunEvaluation { per_video, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::world::{render_subject_at, sprite_color, stack_frames, Shape, SubjectSpec};

    /// Embeds images by looking up their first pixel in a fixed table.
    struct Lookup(Vec<(f64, Vec<f64>)>);

    impl ImageEmbedder for Lookup {
        fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
            let key = image.data()[0];
            Ok(self.0.iter().find(|(k, _)| *k == key).expect("known key").1.clone())
        }
    }

    fn tagged(tag: f64) -> Tensor {
        Tensor::full(&[16, 16, 3], tag)
    }

    fn lookup() -> Lookup {
        Lookup(vec![(0.0, vec![1.0, 0.0]), (1.0, vec![0.0, 1.0]), (2.0, vec![1.0, 0.0])])
    }

    #[test]
    fn identity_score_oracles() {
        let l = lookup();
        let same = stack_frames(&[tagged(0.0), tagged(2.0), tagged(0.0)]).unwrap();
        assert!((identity_score(&same, &tagged(0.0), &l).unwrap() - 1.0).abs() < 1e-12);
        let orth = stack_frames(&[tagged(1.0), tagged(1.0)]).unwrap();
        assert!(identity_score(&orth, &tagged(0.0), &l).unwrap().abs() < 1e-12);
        let half = stack_frames(&[tagged(0.0), tagged(1.0), tagged(2.0), tagged(1.0)]).unwrap();
        assert!((identity_score(&half, &tagged(0.0), &l).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn consistency_oracles() {
        let l = lookup();
        let constant = stack_frames(&[tagged(0.0), tagged(0.0), tagged(0.0)]).unwrap();
        assert!((subject_consistency(&constant, &l).unwrap() - 1.0).abs() < 1e-12);
        // frames e0, e1, e0, e1: consecutive = 0; anchored = (0 + 1 + 0) / 3
        let alt = stack_frames(&[tagged(0.0), tagged(1.0), tagged(2.0), tagged(1.0)]).unwrap();
        assert!((subject_consistency(&alt, &l).unwrap() - 0.5 * (1.0 / 3.0)).abs() < 1e-12);
        assert!(subject_consistency(&stack_frames(&[tagged(0.0)]).unwrap(), &l).is_err());
    }

    #[test]
    fn cosine_ignores_positive_rescaling() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.5, -0.25];
        let scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        assert!((cosine(&a, &b) - cosine(&scaled, &b)).abs() < 1e-15);
    }

    #[test]
    fn real_embedders_on_repeated_subject() {
        let emb = Embedders::default();
        let spec = SubjectSpec { shape: Shape::Star, color: sprite_color("yellow").unwrap(), label: "pet".into() };
        let (s, _) = render_subject_at(&spec, (8.0, 7.0), [0.7, 0.65, 0.45]).unwrap();
        let video = stack_frames(&vec![s.clone(); 8]).unwrap();
        let r = evaluate_video(
            &video,
            &s,
            "a pet in yellow standing still on a sand background",
            &emb,
            &BlockMatcher::default(),
        )
        .unwrap();
        assert!((r.identity_score - 1.0).abs() < 1e-9);
        assert!((r.subject_consistency - 1.0).abs() < 1e-9);
        assert!((r.background_consistency - 1.0).abs() < 1e-9);
        assert_eq!(r.dynamic_degree, 0.0);
        assert!(r.text_alignment > 0.99);
    }

    #[test]
    fn run_mean_is_arithmetic_mean() {
        let emb = Embedders::default();
        let spec = SubjectSpec { shape: Shape::Circle, color: sprite_color("red").unwrap(), label: "toy".into() };
        let (s1, _) = render_subject_at(&spec, (6.0, 6.0), [0.5; 3]).unwrap();
        let (s2, _) = render_subject_at(&spec, (9.0, 7.0), [0.5; 3]).unwrap();
        let v = stack_frames(&[s1.clone(), s2.clone(), s1.clone()]).unwrap();
        let w = stack_frames(&[s2.clone(), s2.clone(), s2.clone()]).unwrap();
        let prompts = vec!["a toy in red moving right".to_string(), "a toy standing still".to_string()];
        let run = evaluate_run(&[v, w], &[s1.clone(), s1], &prompts, &emb, &BlockMatcher::default()).unwrap();
        let manual = (run.per_video[0].dynamic_degree + run.per_video[1].dynamic_degree) / 2.0;
        assert_eq!(run.mean.dynamic_degree, manual);
        assert!(run.per_video[0].dynamic_degree > 0.0);
    }
}
