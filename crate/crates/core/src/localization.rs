//! Per-audio-token heatmaps over the patch grid, scored against planted regions.

use std::path::Path;

use crate::aggregation::SimilarityVolume;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `g × g`, entries in `[0, 1]`.
    pub grid: Matrix<f64>,
    pub token: usize,
    pub raw_min: f64,
    pub raw_max: f64,
}

impl Heatmap {
    pub fn side(&self) -> usize {
        self.grid.rows()
    }

    pub fn is_degenerate(&self) -> bool {
        self.raw_min == self.raw_max
    }

    /// Row-major patch index of the maximum, lowest index on ties.
    pub fn argmax(&self) -> usize {
        crate::tensor::argmax(self.grid.as_slice())
    }
}

/// Min-max scales `values` into `[0, 1]`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out = if span > 0.0 {
        values.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; values.len()]
    };
    (out, lo, hi)
}

pub fn token_heatmap<T: Real>(s: &SimilarityVolume<T>, t: usize, g: usize) -> Result<Heatmap> {
    let (rows, cols) = s.values.shape();
    if g == 0 || g * g != cols {
        return Err(Error::shape("token_heatmap", format!("{cols} patches"), format!("grid side {g}")));
    }
    if t >= rows {
        return Err(Error::InvalidArgument(format!("token {t} out of range for {rows} tokens")));
    }
    let raw: Vec<f64> = s.values.row(t).iter().map(|x| x.as_f64()).collect();
    let (norm, raw_min, raw_max) = min_max(&raw);
    Ok(Heatmap {
        grid: Matrix::from_vec(g, g, norm)?,
        token: t,
        raw_min,
        raw_max,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    /// Row-major, one flag per patch.
    pub grid: Vec<bool>,
    pub side: usize,
    pub concept: u8,
}

impl GroundTruthMask {
    pub fn new(grid: Vec<bool>, side: usize, concept: u8) -> Result<Self> {
        if grid.len() != side * side {
            return Err(Error::shape("GroundTruthMask", format!("{} cells", side * side), format!("{} cells", grid.len())));
        }
        if !grid.iter().any(|&b| b) {
            return Err(Error::InvalidArgument(format!("mask for concept {concept} has no positive patch")));
        }
        Ok(Self { grid, side, concept })
    }

    /// Mask of the patches whose label equals `concept`.
    pub fn from_labels(labels: &[u8], side: usize, concept: u8) -> Result<Self> {
        Self::new(labels.iter().map(|&l| l == concept).collect(), side, concept)
    }
}

/// One heatmap together with the concept its token speaks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledHeatmap {
    pub heatmap: Heatmap,
    pub concept: u8,
}

/// Whether the heatmap argmax falls inside the mask.
pub fn points_inside(heatmap: &Heatmap, mask: &GroundTruthMask) -> Result<bool> {
    if mask.side != heatmap.side() {
        return Err(Error::shape("pointing", format!("side {}", heatmap.side()), format!("side {}", mask.side)));
    }
    Ok(mask.grid[heatmap.argmax()])
}

pub fn pointing_accuracy(items: &[LabeledHeatmap], masks: &[GroundTruthMask]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("pointing accuracy needs at least one labeled token".into()));
    }
    let mut hits = 0usize;
    for item in items {
        let mask = masks
            .iter()
            .find(|m| m.concept == item.concept)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground-truth mask for concept {}", item.concept)))?;
        hits += points_inside(&item.heatmap, mask)? as usize;
    }
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassInside {
    pub fraction: f64,
    /// Set when the heatmap sums to zero; `fraction` is then 0.
    pub degenerate: bool,
}

pub fn mass_inside(heatmap: &Heatmap, mask: &GroundTruthMask) -> Result<MassInside> {
    if mask.side != heatmap.side() {
        return Err(Error::shape("mass_inside", format!("side {}", heatmap.side()), format!("side {}", mask.side)));
    }
    let cells = heatmap.grid.as_slice();
    let total: f64 = cells.iter().sum();
    if total == 0.0 {
        return Ok(MassInside {
            fraction: 0.0,
            degenerate: true,
        });
    }
    let inside: f64 = cells.iter().zip(&mask.grid).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(MassInside {
        fraction: inside / total,
        degenerate: false,
    })
}

/// Binary PGM bytes: header `P5\n{w} {h}\n255\n`, then `round(255·v)` per
/// pixel, each cell replicated `upscale × upscale`.
pub fn encode_pgm(heatmap: &Heatmap, upscale: usize) -> Result<Vec<u8>> {
    if upscale == 0 {
        return Err(Error::InvalidArgument("upscale factor must be at least 1".into()));
    }
    let (h, w) = heatmap.grid.shape();
    let (ph, pw) = (h * upscale, w * upscale);
    let mut out = format!("P5\n{pw} {ph}\n255\n").into_bytes();
    out.reserve(ph * pw);
    for y in 0..ph {
        for x in 0..pw {
            let v = heatmap.grid[(y / upscale, x / upscale)];
            out.push((255.0 * v.clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pgm(heatmap: &Heatmap, path: &Path, upscale: usize) -> Result<()> {
    let bytes = encode_pgm(heatmap, upscale)?;
    crate::cache::write_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{similarity_volume, TokenSet};
    use crate::tensor::MaskVector;
    use proptest::prelude::*;

    fn volume(rows: &[Vec<f64>]) -> SimilarityVolume<f64> {
        SimilarityVolume {
            values: Matrix::from_f64_rows(rows).unwrap(),
            audio_index: 0,
            visual_index: 0,
        }
    }

    fn hm(vals: &[f64], g: usize) -> Heatmap {
        token_heatmap(&volume(&[vals.to_vec()]), 0, g).unwrap()
    }

    #[test]
    fn one_hot_and_constant_rows() {
        let mut row = vec![0.0; 9];
        row[4] = 0.7;
        let h = hm(&row, 3);
        assert_eq!(h.grid[(1, 1)], 1.0);
        assert_eq!(h.grid.as_slice().iter().sum::<f64>(), 1.0);
        let c = hm(&[0.3; 4], 2);
        assert!(c.grid.as_slice().iter().all(|&v| v == 0.0));
        assert!(c.is_degenerate());
    }

    #[test]
    fn random_row_matches_hand_oracle() {
        let row = [0.2, -0.4, 0.6, 0.0, 0.1, -0.2, 0.5, 0.3, -0.1];
        let h = hm(&row, 3);
        for (i, &v) in row.iter().enumerate() {
            let want = (v + 0.4) / 1.0;
            assert!((h.grid[(i / 3, i % 3)] - want).abs() < 1e-15);
        }
        assert_eq!((h.raw_min, h.raw_max), (-0.4, 0.6));
    }

    #[test]
    fn bad_grid_rejected() {
        assert!(token_heatmap(&volume(&[vec![0.0; 8]]), 0, 3).is_err());
        assert!(token_heatmap(&volume(&[vec![0.0; 9]]), 1, 3).is_err());
    }

    #[test]
    fn pointing_examples() {
        let full = GroundTruthMask::new(vec![true; 4], 2, 3).unwrap();
        let corner = GroundTruthMask::new(vec![true, false, false, false], 2, 1).unwrap();
        let items = vec![
            LabeledHeatmap { heatmap: hm(&[0.9, 0.1, 0.2, 0.0], 2), concept: 1 },
            LabeledHeatmap { heatmap: hm(&[0.0, 0.9, 0.2, 0.0], 2), concept: 3 },
        ];
        assert_eq!(pointing_accuracy(&items, &[corner.clone(), full.clone()]).unwrap(), 1.0);
        let missing = pointing_accuracy(&items, &[corner]);
        assert!(missing.is_err());
        assert!(GroundTruthMask::new(vec![false; 4], 2, 0).is_err());
    }

    #[test]
    fn planted_volumes_by_enumeration() {
        // Token t has a one-hot similarity at patch (t * 5) % 16; concept t % 4
        // owns patches with index % 4 == concept.
        let g = 4;
        let masks: Vec<GroundTruthMask> = (0..4u8)
            .map(|c| GroundTruthMask::new((0..16).map(|p| p % 4 == c as usize).collect(), g, c).unwrap())
            .collect();
        let mut items = Vec::new();
        let mut expected_hits = 0;
        for t in 0..12usize {
            let p = (t * 5) % 16;
            let mut row = vec![0.0; 16];
            row[p] = 1.0;
            let concept = (t % 4) as u8;
            expected_hits += (p % 4 == concept as usize) as usize;
            items.push(LabeledHeatmap { heatmap: hm(&row, g), concept });
        }
        let acc = pointing_accuracy(&items, &masks).unwrap();
        assert_eq!(acc, expected_hits as f64 / 12.0);
    }

    #[test]
    fn mass_inside_examples() {
        let uniform = hm(&[2.0, 0.0, 2.0, 2.0], 2);
        let all = GroundTruthMask::new(vec![true; 4], 2, 0).unwrap();
        assert_eq!(mass_inside(&uniform, &all).unwrap().fraction, 1.0);

        let outside = hm(&[0.0, 1.0, 0.0, 0.0], 2);
        let first = GroundTruthMask::new(vec![true, false, false, false], 2, 0).unwrap();
        assert_eq!(mass_inside(&outside, &first).unwrap().fraction, 0.0);

        let flat = Heatmap { grid: Matrix::filled(4, 4, 0.5), token: 0, raw_min: 0.0, raw_max: 1.0 };
        let four = GroundTruthMask::new((0..16).map(|i| i < 4).collect(), 4, 0).unwrap();
        assert_eq!(mass_inside(&flat, &four).unwrap().fraction, 0.25);

        let zero = hm(&[1.0; 4], 2);
        assert_eq!(mass_inside(&zero, &all).unwrap(), MassInside { fraction: 0.0, degenerate: true });
    }

    #[test]
    fn pgm_bytes() {
        let one = Heatmap { grid: Matrix::filled(1, 1, 1.0), token: 0, raw_min: 0.0, raw_max: 1.0 };
        assert_eq!(encode_pgm(&one, 1).unwrap(), b"P5\n1 1\n255\n\xff".to_vec());

        let zeros = Heatmap { grid: Matrix::zeros(2, 2), token: 0, raw_min: 0.0, raw_max: 0.0 };
        assert_eq!(encode_pgm(&zeros, 1).unwrap(), b"P5\n2 2\n255\n\0\0\0\0".to_vec());

        let ramp = Heatmap {
            grid: Matrix::from_vec(3, 3, (0..9).map(|i| i as f64 / 8.0).collect()).unwrap(),
            token: 0,
            raw_min: 0.0,
            raw_max: 8.0,
        };
        // round(255 · i/8) for i = 0..8
        let px = [0u8, 32, 64, 96, 128, 159, 191, 223, 255];
        let mut want = b"P5\n6 6\n255\n".to_vec();
        for r in 0..3 {
            for _ in 0..2 {
                for c in 0..3 {
                    want.extend_from_slice(&[px[r * 3 + c]; 2]);
                }
            }
        }
        assert_eq!(encode_pgm(&ramp, 2).unwrap(), want);
        assert!(encode_pgm(&ramp, 0).is_err());
    }

    #[test]
    fn identity_concepts_point_perfectly() {
        // Zero-noise planted data: concept c's patches and token are e_c.
        let g = 2;
        let e = |c: usize| (0..4).map(|i| (i == c) as u8 as f64).collect::<Vec<f64>>();
        let labels = [0u8, 1, 1, 2];
        let visual = TokenSet::<f64>::visual(Matrix::from_f64_rows(&labels.iter().map(|&l| e(l as usize)).collect::<Vec<_>>()).unwrap());
        let audio = TokenSet::audio(Matrix::from_f64_rows(&[e(1), e(2), e(0)]).unwrap(), MaskVector::ones(3)).unwrap();
        let s = similarity_volume(&audio, &visual).unwrap();
        let masks: Vec<GroundTruthMask> = (0..3).map(|c| GroundTruthMask::from_labels(&labels, g, c).unwrap()).collect();
        let items: Vec<LabeledHeatmap> = [1u8, 2, 0]
            .iter()
            .enumerate()
            .map(|(t, &c)| LabeledHeatmap { heatmap: token_heatmap(&s, t, g).unwrap(), concept: c })
            .collect();
        assert_eq!(pointing_accuracy(&items, &masks).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn min_max_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
            let (once, _, _) = min_max(&v);
            let (twice, _, _) = min_max(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(once.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn heatmap_is_permutation_equivariant(v in proptest::collection::vec(-1.0f64..1.0, 9), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&p| v[p]).collect();
            let a = hm(&v, 3);
            let b = hm(&permuted, 3);
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.grid.as_slice()[i], a.grid.as_slice()[p]);
            }
        }

        #[test]
        fn pointing_invariant_to_monotone_transform(v in proptest::collection::vec(-1.0f64..1.0, 16), c in 0u8..4) {
            let labels: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
            let mask = GroundTruthMask::from_labels(&labels, 4, c).unwrap();
            let t: Vec<f64> = v.iter().map(|x| x.powi(3) * 7.0 - 2.0).collect();
            let a = pointing_accuracy(&[LabeledHeatmap { heatmap: hm(&v, 4), concept: c }], std::slice::from_ref(&mask)).unwrap();
            let b = pointing_accuracy(&[LabeledHeatmap { heatmap: hm(&t, 4), concept: c }], &[mask]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
