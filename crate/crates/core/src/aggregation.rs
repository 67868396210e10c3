//! Token-level similarity volumes and the clip-level aggregations built on them.
//!
//! Dense scoring keeps every audio-token/visual-patch interaction and
//! aggregates with a masked max-mean; global scoring pools each modality to a
//! single vector first.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, matmul_nt, normalize_in_place, row_l2_normalize, MaskVector, Matrix, Real};

/// Shared numerical guard for masked means and norm clamping.
pub const DEFAULT_EPS: f64 = 1e-6;

/// One sample's token matrix for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub tokens: Matrix<T>,
    pub mask: Option<MaskVector>,
    pub normalized: bool,
}

impl<T: Real> TokenSet<T> {
    pub fn audio(tokens: Matrix<T>, mask: MaskVector) -> Result<Self> {
        if mask.len() != tokens.rows() {
            return Err(Error::shape(
                "TokenSet::audio",
                format!("mask of length {}", tokens.rows()),
                format!("mask of length {}", mask.len()),
            ));
        }
        Ok(Self {
            tokens,
            mask: Some(mask),
            normalized: false,
        })
    }

    pub fn visual(tokens: Matrix<T>) -> Self {
        Self {
            tokens,
            mask: None,
            normalized: false,
        }
    }

    /// Returns a copy with every row scaled to unit norm (eps-guarded).
    pub fn normalize(&self, eps: T) -> Self {
        Self {
            tokens: row_l2_normalize(&self.tokens, eps),
            mask: self.mask.clone(),
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    fn require_mask(&self, op: &'static str) -> Result<&MaskVector> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{op}: audio token set has no mask")))
    }
}

/// `S = A·Vᵀ` for one (audio b, visual b') pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVolume<T> {
    pub values: Matrix<T>,
    pub audio_index: usize,
    pub visual_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipKind {
    Dense,
    Global,
    /// Average of both directional max-means; the discarded ablation variant.
    Symmetric,
}

/// B×B clip similarities; rows index audio samples, columns visual samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSimilarityMatrix<T> {
    pub values: Matrix<T>,
    pub kind: ClipKind,
}

impl<T: Real> ClipSimilarityMatrix<T> {
    pub fn new(values: Matrix<T>, kind: ClipKind) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::shape(
                "ClipSimilarityMatrix",
                "square matrix",
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        Ok(Self { values, kind })
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }
}

pub fn similarity_volume<T: Real>(audio: &TokenSet<T>, visual: &TokenSet<T>) -> Result<SimilarityVolume<T>> {
    similarity_volume_for(audio, visual, 0, 0)
}

pub fn similarity_volume_for<T: Real>(
    audio: &TokenSet<T>,
    visual: &TokenSet<T>,
    audio_index: usize,
    visual_index: usize,
) -> Result<SimilarityVolume<T>> {
    if audio.dim() != visual.dim() {
        return Err(Error::shape(
            "similarity_volume",
            format!("visual dim {}", audio.dim()),
            format!("visual dim {}", visual.dim()),
        ));
    }
    Ok(SimilarityVolume {
        values: matmul_nt(&audio.tokens, &visual.tokens)?,
        audio_index,
        visual_index,
    })
}

/// Masked max-mean over a raw similarity matrix, plus the per-row argmax
/// patch (lowest index on ties) needed for backprop.
pub fn phi_with_argmax<T: Real>(s: &Matrix<T>, mask: &MaskVector, eps: T) -> Result<(T, Vec<usize>)> {
    if mask.len() != s.rows() {
        return Err(Error::shape(
            "phi",
            format!("mask of length {}", s.rows()),
            format!("mask of length {}", mask.len()),
        ));
    }
    if s.cols() == 0 {
        return Err(Error::InvalidArgument("phi: similarity volume has no patches".into()));
    }
    let mut num = T::zero();
    let mut arg = Vec::with_capacity(s.rows());
    for (t, row) in s.iter_rows().enumerate() {
        let p = argmax(row);
        arg.push(p);
        if mask.get(t) {
            num += row[p];
        }
    }
    let denom = T::lit(mask.count() as f64) + eps;
    Ok((num / denom, arg))
}

/// Audio→visual max-mean: `Σ_t m_t max_p S[t,p] / (Σ_t m_t + eps)`.
pub fn phi<T: Real>(s: &SimilarityVolume<T>, mask: &MaskVector, eps: T) -> Result<T> {
    phi_with_argmax(&s.values, mask, eps).map(|(v, _)| v)
}

/// Visual→audio max-mean with the per-column argmax token.
pub fn psi_with_argmax<T: Real>(s: &Matrix<T>) -> Result<(T, Vec<usize>)> {
    if s.rows() == 0 || s.cols() == 0 {
        return Err(Error::InvalidArgument("psi: empty similarity volume".into()));
    }
    let mut arg = vec![0usize; s.cols()];
    let mut best: Vec<T> = s.row(0).to_vec();
    for t in 1..s.rows() {
        for (p, &v) in s.row(t).iter().enumerate() {
            if v > best[p] {
                best[p] = v;
                arg[p] = t;
            }
        }
    }
    let total: T = best.into_iter().sum();
    Ok((total / T::lit(s.cols() as f64), arg))
}

/// `(1/N_v) Σ_p max_t S[t,p]`.
pub fn psi<T: Real>(s: &SimilarityVolume<T>) -> Result<T> {
    psi_with_argmax(&s.values).map(|(v, _)| v)
}

fn check_batch<T: Real>(audio: &[TokenSet<T>], visual: &[TokenSet<T>], op: &'static str) -> Result<()> {
    if audio.len() != visual.len() {
        return Err(Error::shape(
            op,
            format!("{} visual sets", audio.len()),
            format!("{} visual sets", visual.len()),
        ));
    }
    if audio.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty batch")));
    }
    Ok(())
}

fn pairwise<T, F>(b: usize, f: F) -> Result<Matrix<T>>
where
    T: Real,
    F: Fn(usize, usize) -> Result<T> + Sync,
{
    // Each cell is independent, so the result does not depend on scheduling.
    let rows: Vec<Vec<T>> = (0..b)
        .into_par_iter()
        .map(|i| (0..b).map(|j| f(i, j)).collect::<Result<Vec<T>>>())
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

pub fn clip_matrix_dense<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    eps: T,
) -> Result<ClipSimilarityMatrix<T>> {
    check_batch(audio, visual, "clip_matrix_dense")?;
    for a in audio {
        a.require_mask("clip_matrix_dense")?;
    }
    let values = pairwise(audio.len(), |b, bp| {
        let s = similarity_volume_for(&audio[b], &visual[bp], b, bp)?;
        phi(&s, audio[b].mask.as_ref().expect("checked"), eps)
    })?;
    ClipSimilarityMatrix::new(values, ClipKind::Dense)
}

/// `(Φ + Ψ) / 2` for every pair; only used by the ablation objective.
pub fn clip_matrix_symmetric<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    eps: T,
) -> Result<ClipSimilarityMatrix<T>> {
    check_batch(audio, visual, "clip_matrix_symmetric")?;
    for a in audio {
        a.require_mask("clip_matrix_symmetric")?;
    }
    let half = T::lit(0.5);
    let values = pairwise(audio.len(), |b, bp| {
        let s = similarity_volume_for(&audio[b], &visual[bp], b, bp)?;
        let f = phi(&s, audio[b].mask.as_ref().expect("checked"), eps)?;
        Ok(half * (f + psi(&s)?))
    })?;
    ClipSimilarityMatrix::new(values, ClipKind::Symmetric)
}

/// Masked mean of audio tokens: `Σ_t m_t a_t / (Σ_t m_t + eps)`.
pub fn global_pool_audio<T: Real>(audio: &TokenSet<T>, eps: T) -> Result<Vec<T>> {
    let mask = audio.require_mask("global_pool_audio")?;
    let mut acc = vec![T::zero(); audio.dim()];
    for (t, row) in audio.tokens.iter_rows().enumerate() {
        if mask.get(t) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
    }
    let denom = T::lit(mask.count() as f64) + eps;
    Ok(acc.into_iter().map(|a| a / denom).collect())
}

pub fn global_pool_visual<T: Real>(visual: &TokenSet<T>) -> Result<Vec<T>> {
    if visual.is_empty() {
        return Err(Error::InvalidArgument("global_pool_visual: no patches".into()));
    }
    let mut acc = vec![T::zero(); visual.dim()];
    for row in visual.tokens.iter_rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    let n = T::lit(visual.len() as f64);
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Inner products of pooled vectors; with `renormalize` each pooled vector is
/// first scaled to unit norm, giving a true cosine.
pub fn clip_matrix_global<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    eps: T,
    renormalize: bool,
) -> Result<ClipSimilarityMatrix<T>> {
    check_batch(audio, visual, "clip_matrix_global")?;
    let mut pooled_a = audio
        .iter()
        .map(|a| global_pool_audio(a, eps))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled_v = visual.iter().map(global_pool_visual).collect::<Result<Vec<_>>>()?;
    if let Some(v) = pooled_v.iter().find(|v| v.len() != pooled_a[0].len()) {
        return Err(Error::shape(
            "clip_matrix_global",
            format!("dim {}", pooled_a[0].len()),
            format!("dim {}", v.len()),
        ));
    }
    if renormalize {
        for v in pooled_a.iter_mut().chain(pooled_v.iter_mut()) {
            normalize_in_place(v, eps);
        }
    }
    let b = audio.len();
    let mut values = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            values[(i, j)] = dot(&pooled_a[i], &pooled_v[j]);
        }
    }
    ClipSimilarityMatrix::new(values, ClipKind::Global)
}
