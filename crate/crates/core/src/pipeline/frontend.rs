//! Stride-2 temporal pooling of audio tokens and their masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{MaskVector, Matrix, Real};

/// How two adjacent mask bits merge into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRule {
    /// Valid if either input is valid.
    #[default]
    Or,
    /// Valid only if both inputs are valid.
    And,
}

/// `out[i] = (x[2i] + x[2i+1]) / 2`; an odd trailing token is dropped.
pub fn downsample_audio<T: Real>(tokens: &Matrix<T>) -> Result<Matrix<T>> {
    if tokens.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "downsample_audio needs at least 2 tokens, got {}",
            tokens.rows()
        )));
    }
    let n = tokens.rows() / 2;
    let half = T::lit(0.5);
    let mut out = Matrix::zeros(n, tokens.cols());
    for i in 0..n {
        let (a, b) = (tokens.row(2 * i), tokens.row(2 * i + 1));
        for (o, (&x, &y)) in out.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
            *o = (x + y) * half;
        }
    }
    Ok(out)
}

pub fn downsample_mask(mask: &MaskVector, rule: MaskRule) -> Result<MaskVector> {
    if mask.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "downsample_mask needs at least 2 entries, got {}",
            mask.len()
        )));
    }
    let bits = mask
        .bits()
        .chunks_exact(2)
        .map(|p| {
            let on = p[0] + p[1];
            let keep = match rule {
                MaskRule::Or => on >= 1,
                MaskRule::And => on == 2,
            };
            keep as u8
        })
        .collect();
    MaskVector::new(bits)
}

/// Merges per-token labels alongside the pooled tokens.
///
/// Equal pairs keep their label. A concept paired with a non-concept keeps the
/// concept. Two different concepts, or two different non-concept labels,
/// merge to `mixed`.
pub fn downsample_labels(labels: &[u8], is_concept: impl Fn(u8) -> bool, mixed: u8) -> Vec<u8> {
    labels
        .chunks_exact(2)
        .map(|p| match (p[0], p[1]) {
            (a, b) if a == b => a,
            (a, b) if is_concept(a) && !is_concept(b) => a,
            (a, b) if !is_concept(a) && is_concept(b) => b,
            _ => mixed,
        })
        .collect()
}
