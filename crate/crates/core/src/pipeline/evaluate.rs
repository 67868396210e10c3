//! Retrieval and localization scoring of a trained model on prepared samples.

use rayon::prelude::*;

use super::train::{embed_all, PreparedSample, TrainConfig};
use crate::aggregation::{
    clip_matrix_dense, clip_matrix_global, clip_matrix_symmetric, similarity_volume, ClipKind, ClipSimilarityMatrix, TokenSet,
};
use crate::error::{Error, Result};
use crate::localization::{mass_inside, points_inside, token_heatmap, Heatmap};
use crate::objective::{Model, Objective};
use crate::retrieval::{ranks, report, Direction, RetrievalReport};
use crate::tensor::Real;

/// Clip similarity used to rank candidates for a model trained with `objective`.
///
/// The hybrid model is ranked with its dense score, which is the one the
/// comparison is about.
pub fn eval_similarity(objective: Objective) -> ClipKind {
    match objective {
        Objective::Dense | Objective::Hybrid => ClipKind::Dense,
        Objective::Global => ClipKind::Global,
        Objective::DenseSymmetric => ClipKind::Symmetric,
    }
}

pub fn clip_matrix_of<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    kind: ClipKind,
    cfg: &TrainConfig,
) -> Result<ClipSimilarityMatrix<T>> {
    let eps = T::lit(cfg.eps);
    match kind {
        ClipKind::Dense => clip_matrix_dense(audio, visual, eps),
        ClipKind::Symmetric => clip_matrix_symmetric(audio, visual, eps),
        ClipKind::Global => clip_matrix_global(audio, visual, eps, cfg.renormalize_global),
    }
}

/// Heatmaps of one sample's spoken, unmasked audio tokens against its own image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLocalization {
    pub sample: usize,
    pub concept: u8,
    pub heatmap: Heatmap,
    pub hit: bool,
    pub mass_inside: f64,
    pub degenerate: bool,
}

pub fn localize_sample<T: Real>(audio: &TokenSet<T>, visual: &TokenSet<T>, sample: &PreparedSample<T>) -> Result<Vec<TokenLocalization>> {
    let s = similarity_volume(audio, visual)?;
    let mask = audio
        .mask
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("audio tokens without mask".into()))?;
    let mut out = Vec::new();
    for (t, &label) in sample.audio_labels.iter().enumerate() {
        if !mask.get(t) || !sample.spoken.contains(&label) {
            continue;
        }
        let gt = sample
            .masks
            .iter()
            .find(|m| m.concept == label)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {}: no mask for concept {label}", sample.index)))?;
        let heatmap = token_heatmap(&s, t, sample.grid_side)?;
        let hit = points_inside(&heatmap, gt)?;
        let mass = mass_inside(&heatmap, gt)?;
        out.push(TokenLocalization {
            sample: sample.index,
            concept: label,
            heatmap,
            hit,
            mass_inside: mass.fraction,
            degenerate: mass.degenerate,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub similarity: ClipKind,
    /// Audio-to-visual first, then visual-to-audio.
    pub reports: Vec<RetrievalReport>,
    pub pointing_accuracy: f64,
    pub mean_mass_inside: f64,
    pub tokens_scored: usize,
}

impl EvalOutcome {
    pub fn a2v(&self) -> &RetrievalReport {
        &self.reports[0]
    }
}

pub fn evaluate_with<T: Real>(model: &Model<T>, data: &[PreparedSample<T>], cfg: &TrainConfig, kind: ClipKind) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let (audio, visual) = embed_all(model, data, cfg.eps)?;
    let c = clip_matrix_of(&audio, &visual, kind, cfg)?;
    let reports = Direction::BOTH
        .iter()
        .map(|&d| report(&ranks(&c, d)?, d))
        .collect::<Result<Vec<_>>>()?;
    let locs: Vec<Vec<TokenLocalization>> = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| localize_sample(&audio[i], &visual[i], s))
        .collect::<Result<_>>()?;
    let flat: Vec<&TokenLocalization> = locs.iter().flatten().collect();
    let n = flat.len();
    let (pointing, mass) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            flat.iter().filter(|l| l.hit).count() as f64 / n as f64,
            flat.iter().map(|l| l.mass_inside).sum::<f64>() / n as f64,
        )
    };
    Ok(EvalOutcome {
        similarity: kind,
        reports,
        pointing_accuracy: pointing,
        mean_mass_inside: mass,
        tokens_scored: n,
    })
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &[PreparedSample<T>], cfg: &TrainConfig) -> Result<EvalOutcome> {
    evaluate_with(model, data, cfg, eval_similarity(cfg.objective))
}
