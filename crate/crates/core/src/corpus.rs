//! Synthetic paired audio/visual token sets with planted concept regions.
//!
//! Every sample speaks `m` concepts and shows them, plus `d` visual-only
//! distractor concepts, as square patch blocks on a `g × g` grid. Audio is the
//! concatenation of one segment per spoken concept (shuffled order), a filler
//! segment of unmasked noise, and trailing masked silence.
//!
//! A concept instance is its prototype nudged along shared attribute
//! directions, `normalize(p_c + jitter/√A · Σ_j w_j a_j)`, with the same `w`
//! used in both modalities so individual pairs are distinguishable.
//!
//! Per-sample draw order from `ChaCha8Rng::seed_from_u64(sample_seed(seed, i))`:
//!
//! 1. `rand::seq::index::sample(rng, K, m + d)`: first `m` are spoken, the rest distractors;
//! 2. slot indices `0..S` shuffled with `SliceRandom::shuffle`, concept `j` takes slot `j`;
//! 3. `0..m` shuffled: the spoken order of segments;
//! 4. `rng.random_range(0..=m)`: how many concept segments precede the filler;
//! 5. `A` standard normals per concept, in selection order;
//! 6. background patch vectors (patch order), then filler and silence token vectors (time order);
//! 7. additive noise on every visual row, then every audio row.
//!
//! Slot `s` covers grid rows `(s / (g/bs))·bs ..` and columns `(s % (g/bs))·bs ..`.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{decode, encode, peek_dtype, write_atomic, CacheRecord};
use crate::error::{Error, Result};
use crate::localization::GroundTruthMask;
use crate::tensor::{DType, MaskVector, Matrix};

pub const BACKGROUND: u8 = 255;
pub const SILENCE: u8 = 254;
pub const FILLER: u8 = 253;
/// Label of a pooled token whose two inputs carried different labels.
pub const MIXED: u8 = 252;
pub const MAX_CONCEPTS: usize = 252;

pub fn is_concept(label: u8) -> bool {
    (label as usize) < MAX_CONCEPTS
}

pub const CACHE_FILE: &str = "corpus.vesc";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "corpus.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_samples: usize,
    /// The last `floor(num_samples · validation_fraction)` samples are held out.
    pub validation_fraction: f64,
    pub concepts: usize,
    pub concepts_per_sample: usize,
    pub distractors_per_sample: usize,
    pub grid_side: usize,
    pub block_side: usize,
    /// Raw (pre-pooling) audio tokens per spoken concept.
    pub segment_tokens: usize,
    pub filler_tokens: usize,
    /// Target fraction of raw audio tokens that are masked silence.
    pub silence_fraction: f64,
    pub noise_sigma: f64,
    pub instance_jitter: f64,
    pub attributes: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub seed: u64,
    pub precision: DType,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_samples: 2500,
            validation_fraction: 0.2,
            concepts: 12,
            concepts_per_sample: 2,
            distractors_per_sample: 1,
            grid_side: 4,
            block_side: 2,
            segment_tokens: 4,
            filler_tokens: 2,
            silence_fraction: 0.25,
            noise_sigma: 0.2,
            instance_jitter: 0.5,
            attributes: 8,
            audio_dim: 48,
            visual_dim: 48,
            seed: 0,
            precision: DType::F32,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_samples", self.num_samples),
            ("concepts", self.concepts),
            ("concepts_per_sample", self.concepts_per_sample),
            ("grid_side", self.grid_side),
            ("block_side", self.block_side),
            ("segment_tokens", self.segment_tokens),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.concepts > MAX_CONCEPTS {
            return Err(Error::config("concepts", format!("at most {MAX_CONCEPTS} supported")));
        }
        if self.concepts_per_sample > self.concepts {
            return Err(Error::config(
                "concepts_per_sample",
                format!("{} exceeds the {} available concepts", self.concepts_per_sample, self.concepts),
            ));
        }
        if self.concepts_per_sample + self.distractors_per_sample > self.concepts {
            return Err(Error::config("distractors_per_sample", "spoken plus distractor concepts exceed the concept count"));
        }
        if !self.grid_side.is_multiple_of(self.block_side) {
            return Err(Error::config("block_side", "must divide grid_side"));
        }
        if self.concepts_per_sample + self.distractors_per_sample > self.slots() {
            return Err(Error::config(
                "concepts_per_sample",
                format!("{} blocks do not fit in {} grid slots", self.concepts_per_sample + self.distractors_per_sample, self.slots()),
            ));
        }
        let min_dim = self.audio_dim.min(self.visual_dim);
        if self.bank_size() > min_dim {
            return Err(Error::config(
                "attributes",
                format!("concepts + attributes = {} exceeds embedding dim {min_dim}", self.bank_size()),
            ));
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return Err(Error::config("silence_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(self.instance_jitter >= 0.0 && self.instance_jitter.is_finite()) {
            return Err(Error::config("instance_jitter", "must be finite and non-negative"));
        }

        if self.raw_audio_tokens() < 2 {
            return Err(Error::config("segment_tokens", "raw audio needs at least 2 tokens for pooling"));
        }
        Ok(())
    }

    /// Prototypes and attribute directions.
    pub fn bank_size(&self) -> usize {
        self.concepts + self.attributes
    }

    pub fn slots(&self) -> usize {
        let per_side = self.grid_side / self.block_side;
        per_side * per_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn content_tokens(&self) -> usize {
        self.concepts_per_sample * self.segment_tokens + self.filler_tokens
    }

    /// `round(f · content / (1 − f))`, so silence makes up about `f` of the stream.
    pub fn silence_tokens(&self) -> usize {
        let f = self.silence_fraction;
        (f * self.content_tokens() as f64 / (1.0 - f)).round() as usize
    }

    pub fn raw_audio_tokens(&self) -> usize {
        self.content_tokens() + self.silence_tokens()
    }

    pub fn num_validation(&self) -> usize {
        (self.num_samples as f64 * self.validation_fraction).floor() as usize
    }

    pub fn num_train(&self) -> usize {
        self.num_samples - self.num_validation()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for sample `index`; depends only on the corpus seed and the index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

fn bank_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0xB4E5_C0DE_0000_0001)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
    n
}

/// `k` orthonormal vectors in `R^d` from Gram-Schmidt on seeded Gaussians.
pub fn gen_concepts(k: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k > d {
        return Err(Error::InvalidArgument(format!("cannot place {k} orthogonal concepts in dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes keep the result orthogonal to machine precision.
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        if normalize(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    Ok(basis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    pub prototypes: Vec<Vec<f64>>,
    pub attributes: Vec<Vec<f64>>,
}

impl ConceptBank {
    fn new(cfg: &CorpusConfig, dim: usize) -> Result<Self> {
        let mut all = gen_concepts(cfg.bank_size(), dim, bank_seed(cfg.seed))?;
        let attributes = all.split_off(cfg.concepts);
        Ok(Self {
            prototypes: all,
            attributes,
        })
    }

    fn instance(&self, concept: u8, weights: &[f64], jitter: f64) -> Vec<f64> {
        let mut v = self.prototypes[concept as usize].clone();
        if !self.attributes.is_empty() {
            let scale = jitter / (self.attributes.len() as f64).sqrt();
            for (w, a) in weights.iter().zip(&self.attributes) {
                for (x, y) in v.iter_mut().zip(a) {
                    *x += scale * w * y;
                }
            }
        }
        normalize(&mut v);
        v
    }
}

/// Audio and visual banks share a seed, so equal dims give identical banks.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub audio: ConceptBank,
    pub visual: ConceptBank,
}

impl Banks {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        Ok(Self {
            audio: ConceptBank::new(cfg, cfg.audio_dim)?,
            visual: ConceptBank::new(cfg, cfg.visual_dim)?,
        })
    }
}

/// The discrete layout decisions for one sample (draws 1 to 4).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub spoken: Vec<u8>,
    pub distractors: Vec<u8>,
    /// Slot for each concept in `spoken ++ distractors` order.
    pub slots: Vec<usize>,
    /// `segment_order[k]` indexes `spoken` for the k-th audio segment.
    pub segment_order: Vec<usize>,
    pub filler_gap: usize,
}

pub fn draw_placement<R: Rng>(cfg: &CorpusConfig, rng: &mut R) -> Placement {
    let (m, d) = (cfg.concepts_per_sample, cfg.distractors_per_sample);
    let chosen: Vec<u8> = index::sample(rng, cfg.concepts, m + d).into_iter().map(|c| c as u8).collect();
    let mut slots: Vec<usize> = (0..cfg.slots()).collect();
    slots.shuffle(rng);
    slots.truncate(m + d);
    let mut segment_order: Vec<usize> = (0..m).collect();
    segment_order.shuffle(rng);
    let filler_gap = rng.random_range(0..=m);
    Placement {
        spoken: chosen[..m].to_vec(),
        distractors: chosen[m..].to_vec(),
        slots,
        segment_order,
        filler_gap,
    }
}

/// Reconstructs the label layout implied by a placement.
pub fn placement_labels(cfg: &CorpusConfig, p: &Placement) -> (Vec<u8>, Vec<u8>) {
    let g = cfg.grid_side;
    let bs = cfg.block_side;
    let per_side = g / bs;
    let mut patches = vec![BACKGROUND; g * g];
    for (c, &slot) in p.spoken.iter().chain(&p.distractors).zip(&p.slots) {
        let (r0, c0) = ((slot / per_side) * bs, (slot % per_side) * bs);
        for r in r0..r0 + bs {
            for col in c0..c0 + bs {
                patches[r * g + col] = *c;
            }
        }
    }
    let mut audio = Vec::with_capacity(cfg.raw_audio_tokens());
    for (k, &s) in p.segment_order.iter().enumerate() {
        if k == p.filler_gap {
            audio.extend(std::iter::repeat_n(FILLER, cfg.filler_tokens));
        }
        audio.extend(std::iter::repeat_n(p.spoken[s], cfg.segment_tokens));
    }
    if p.filler_gap == p.segment_order.len() {
        audio.extend(std::iter::repeat_n(FILLER, cfg.filler_tokens));
    }
    audio.extend(std::iter::repeat_n(SILENCE, cfg.silence_tokens()));
    (audio, patches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub audio_raw: Matrix<f64>,
    pub audio_mask_raw: MaskVector,
    pub visual_raw: Matrix<f64>,
    pub audio_labels: Vec<u8>,
    pub patch_labels: Vec<u8>,
    pub spoken: Vec<u8>,
    pub distractors: Vec<u8>,
}

impl SyntheticSample {
    pub fn grid_side(&self) -> usize {
        (self.patch_labels.len() as f64).sqrt().round() as usize
    }

    /// One mask per concept shown in the image (spoken first).
    pub fn ground_truth(&self) -> Result<Vec<GroundTruthMask>> {
        let g = self.grid_side();
        self.spoken
            .iter()
            .chain(&self.distractors)
            .map(|&c| GroundTruthMask::from_labels(&self.patch_labels, g, c))
            .collect()
    }

    /// Every concept shown or spoken in this sample.
    pub fn concepts(&self) -> Vec<u8> {
        self.spoken.iter().chain(&self.distractors).copied().collect()
    }
}

fn isotropic<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn quantize(m: &mut Matrix<f64>, precision: DType) {
    if precision == DType::F32 {
        for x in m.as_mut_slice() {
            *x = *x as f32 as f64;
        }
    }
}

pub fn gen_sample(cfg: &CorpusConfig, banks: &Banks, seed: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placement = draw_placement(cfg, &mut rng);
    let (audio_labels, patch_labels) = placement_labels(cfg, &placement);

    let chosen: Vec<u8> = placement.spoken.iter().chain(&placement.distractors).copied().collect();
    let weights: Vec<Vec<f64>> = chosen
        .iter()
        .map(|_| (0..cfg.attributes).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let weight_of = |c: u8| &weights[chosen.iter().position(|&x| x == c).expect("placed concept")];

    let mut visual_rows = Vec::with_capacity(patch_labels.len());
    for &l in &patch_labels {
        visual_rows.push(if is_concept(l) {
            banks.visual.instance(l, weight_of(l), cfg.instance_jitter)
        } else {
            isotropic(&mut rng, cfg.visual_dim)
        });
    }
    let mut audio_rows = Vec::with_capacity(audio_labels.len());
    for &l in &audio_labels {
        audio_rows.push(if is_concept(l) {
            banks.audio.instance(l, weight_of(l), cfg.instance_jitter)
        } else {
            isotropic(&mut rng, cfg.audio_dim)
        });
    }
    let add_noise = |rows: &mut Vec<Vec<f64>>, d: usize, rng: &mut ChaCha8Rng| {
        let s = cfg.noise_sigma / (d as f64).sqrt();
        for row in rows.iter_mut() {
            for x in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += s * z;
            }
        }
    };
    if cfg.noise_sigma > 0.0 {
        add_noise(&mut visual_rows, cfg.visual_dim, &mut rng);
        add_noise(&mut audio_rows, cfg.audio_dim, &mut rng);
    }
    let mut visual_raw = Matrix::from_rows(&visual_rows)?;
    let mut audio_raw = Matrix::from_rows(&audio_rows)?;
    quantize(&mut visual_raw, cfg.precision);
    quantize(&mut audio_raw, cfg.precision);
    let mask = MaskVector::from_bools(&audio_labels.iter().map(|&l| l != SILENCE).collect::<Vec<_>>());

    Ok(SyntheticSample {
        index: 0,
        audio_raw,
        audio_mask_raw: mask,
        visual_raw,
        audio_labels,
        patch_labels,
        spoken: placement.spoken,
        distractors: placement.distractors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub samples: Vec<SyntheticSample>,
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let banks = Banks::new(cfg)?;
    let samples = (0..cfg.num_samples)
        .into_par_iter()
        .map(|i| {
            let mut s = gen_sample(cfg, &banks, sample_seed(cfg.seed, i as u64))?;
            s.index = i;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: cfg.clone(),
        samples,
    })
}

fn join(ids: &[u8]) -> String {
    if ids.is_empty() {
        return "-".into();
    }
    ids.iter().map(u8::to_string).collect::<Vec<_>>().join(",")
}

impl Corpus {
    pub fn num_train(&self) -> usize {
        self.samples.len() - self.config.num_validation().min(self.samples.len())
    }

    pub fn train(&self) -> &[SyntheticSample] {
        &self.samples[..self.num_train()]
    }

    pub fn validation(&self) -> &[SyntheticSample] {
        &self.samples[self.num_train()..]
    }

    /// Header lines, then one tab-separated row per sample:
    /// `index, split, spoken, distractors, audio_labels`.
    pub fn manifest(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# corpus manifest v1\nnum_samples={}\nnum_train={}\nnum_validation={}\nconcepts={}\ngrid_side={}\nraw_audio_tokens={}\nseed={}\nindex\tsplit\tspoken\tdistractors\taudio_labels\n",
            self.samples.len(),
            self.num_train(),
            self.samples.len() - self.num_train(),
            c.concepts,
            c.grid_side,
            c.raw_audio_tokens(),
            c.seed
        );
        let n_train = self.num_train();
        for smp in &self.samples {
            let split = if smp.index < n_train { "train" } else { "validation" };
            s.push_str(&format!(
                "{}\t{split}\t{}\t{}\t{}\n",
                smp.index,
                join(&smp.spoken),
                join(&smp.distractors),
                join(&smp.audio_labels)
            ));
        }
        s
    }

    fn records(&self) -> (Vec<CacheRecord<f64>>, usize) {
        let mut out = Vec::with_capacity(2 * self.samples.len());
        for s in &self.samples {
            let mut a_label = vec![b'A', s.spoken.len() as u8];
            a_label.extend_from_slice(&s.spoken);
            a_label.extend_from_slice(&s.audio_labels);
            out.push(CacheRecord::new(s.audio_raw.clone(), Some(s.audio_mask_raw.clone()), a_label));
            let mut v_label = vec![b'V', s.distractors.len() as u8];
            v_label.extend_from_slice(&s.distractors);
            v_label.extend_from_slice(&s.patch_labels);
            out.push(CacheRecord::new(s.visual_raw.clone(), None, v_label));
        }
        (out, self.samples.len())
    }

    /// Encoded cache bytes in the configured precision.
    pub fn cache_bytes(&self) -> Result<Vec<u8>> {
        let (recs, _) = self.records();
        match self.config.precision {
            DType::F64 => encode(&recs),
            DType::F32 => {
                let cast: Vec<CacheRecord<f32>> = recs
                    .into_iter()
                    .map(|r| CacheRecord::new(r.matrix.cast(), r.mask, r.label))
                    .collect();
                encode(&cast)
            }
        }
    }

    pub fn config_toml(&self) -> Result<String> {
        toml::to_string(&self.config).map_err(|e| Error::InvalidArgument(format!("serializing corpus config: {e}")))
    }

    /// Writes `corpus.vesc`, `manifest.txt` and `corpus.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = self.cache_bytes()?;
        let toml = self.config_toml()?;
        write_atomic(&dir.join(CACHE_FILE), &bytes)?;
        write_atomic(&dir.join(CONFIG_FILE), toml.as_bytes())?;
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: CorpusConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            what: "corpus config",
            path: cfg_path.clone(),
            detail: e.to_string(),
        })?;
        config.validate()?;

        let path = dir.join(CACHE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<CacheRecord<f64>> = match peek_dtype(&path)? {
            DType::F64 => decode(&bytes, &path)?,
            DType::F32 => decode::<f32>(&bytes, &path)?
                .into_iter()
                .map(|r| CacheRecord::new(r.matrix.cast(), r.mask, r.label))
                .collect(),
        };
        let bad = |detail: String| Error::Parse {
            what: "corpus cache",
            path: path.clone(),
            detail,
        };
        if records.len() != 2 * config.num_samples {
            return Err(bad(format!("{} records, expected {}", records.len(), 2 * config.num_samples)));
        }
        let split_label = |label: &[u8], kind: u8, i: usize| -> Result<(Vec<u8>, Vec<u8>)> {
            if label.len() < 2 || label[0] != kind {
                return Err(bad(format!("record {i}: malformed label header")));
            }
            let k = label[1] as usize;
            if label.len() < 2 + k {
                return Err(bad(format!("record {i}: truncated concept list")));
            }
            Ok((label[2..2 + k].to_vec(), label[2 + k..].to_vec()))
        };
        let mut samples = Vec::with_capacity(config.num_samples);
        for (i, pair) in records.chunks_exact(2).enumerate() {
            let (a, v) = (&pair[0], &pair[1]);
            let (spoken, audio_labels) = split_label(&a.label, b'A', 2 * i)?;
            let (distractors, patch_labels) = split_label(&v.label, b'V', 2 * i + 1)?;
            let mask = a.mask.clone().ok_or_else(|| bad(format!("record {}: audio without mask", 2 * i)))?;
            if audio_labels.len() != a.matrix.rows()
                || patch_labels.len() != config.num_patches()
                || v.matrix.rows() != config.num_patches()
                || a.matrix.cols() != config.audio_dim
                || v.matrix.cols() != config.visual_dim
            {
                return Err(bad(format!("sample {i}: shapes disagree with the corpus config")));
            }
            samples.push(SyntheticSample {
                index: i,
                audio_raw: a.matrix.clone(),
                audio_mask_raw: mask,
                visual_raw: v.matrix.clone(),
                audio_labels,
                patch_labels,
                spoken,
                distractors,
            });
        }
        Ok(Self { config, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{phi, similarity_volume, TokenSet};

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_samples: 40,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn concepts_are_orthonormal() {
        assert_eq!(gen_concepts(1, 5, 3).unwrap()[0].iter().map(|x| x * x).sum::<f64>().sqrt(), 1.0);
        let basis = gen_concepts(16, 16, 4).unwrap();
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let g: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-9, "{i},{j}: {g}");
            }
        }
        assert_eq!(gen_concepts(4, 16, 7).unwrap(), gen_concepts(4, 16, 7).unwrap());
        assert!(gen_concepts(5, 4, 0).is_err());
    }

    #[test]
    fn zero_noise_single_concept_copies_prototype() {
        let cfg = CorpusConfig {
            concepts_per_sample: 1,
            distractors_per_sample: 0,
            noise_sigma: 0.0,
            instance_jitter: 0.0,
            precision: DType::F64,
            ..small()
        };
        let banks = Banks::new(&cfg).unwrap();
        let s = gen_sample(&cfg, &banks, 11).unwrap();
        let c = s.spoken[0];
        for (t, &l) in s.audio_labels.iter().enumerate() {
            if l == c {
                assert_eq!(s.audio_raw.row(t), &banks.audio.prototypes[c as usize][..]);
            }
        }
        for (p, &l) in s.patch_labels.iter().enumerate() {
            if l == c {
                assert_eq!(s.visual_raw.row(p), &banks.visual.prototypes[c as usize][..]);
            }
        }
    }

    #[test]
    fn no_silence_means_full_mask() {
        let cfg = CorpusConfig { silence_fraction: 0.0, ..small() };
        let s = gen_sample(&cfg, &Banks::new(&cfg).unwrap(), 1).unwrap();
        assert_eq!(s.audio_mask_raw.count(), s.audio_mask_raw.len());
    }

    #[test]
    fn placement_matches_independent_reimplementation() {
        let cfg = CorpusConfig {
            concepts: 8,
            grid_side: 4,
            concepts_per_sample: 2,
            attributes: 4,
            ..small()
        };
        let banks = Banks::new(&cfg).unwrap();
        for i in 0..20u64 {
            let seed = sample_seed(cfg.seed, i);
            let s = gen_sample(&cfg, &banks, seed).unwrap();

            // Placement redone by hand from the documented draw order.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chosen: Vec<usize> = index::sample(&mut rng, 8, 3).into_vec();
            let mut slots: Vec<usize> = (0..4).collect();
            slots.shuffle(&mut rng);
            let mut order: Vec<usize> = (0..2).collect();
            order.shuffle(&mut rng);
            let gap = rng.random_range(0..=2usize);

            let mut patches = vec![BACKGROUND; 16];
            for (j, &c) in chosen.iter().enumerate() {
                let (r0, c0) = ((slots[j] / 2) * 2, (slots[j] % 2) * 2);
                for r in r0..r0 + 2 {
                    for col in c0..c0 + 2 {
                        patches[r * 4 + col] = c as u8;
                    }
                }
            }
            let mut audio = Vec::new();
            for k in 0..=2 {
                if k == gap {
                    audio.extend([FILLER; 2]);
                }
                if k < 2 {
                    audio.extend([chosen[order[k]] as u8; 4]);
                }
            }
            audio.extend(vec![SILENCE; cfg.silence_tokens()]);
            let mask: Vec<u8> = audio.iter().map(|&l| (l != SILENCE) as u8).collect();

            assert_eq!(s.patch_labels, patches);
            assert_eq!(s.audio_labels, audio);
            assert_eq!(s.audio_mask_raw.bits(), &mask[..]);
            assert_eq!(s.spoken, vec![chosen[0] as u8, chosen[1] as u8]);
        }
    }

    #[test]
    fn sample_invariants() {
        let corpus = gen_corpus(&small()).unwrap();
        for s in &corpus.samples {
            for &c in &s.spoken {
                let unmasked = s.audio_labels.iter().zip(s.audio_mask_raw.bits()).any(|(&l, &m)| l == c && m == 1);
                assert!(unmasked && s.patch_labels.contains(&c));
            }
            for (&l, &m) in s.audio_labels.iter().zip(s.audio_mask_raw.bits()) {
                assert_eq!(m == 0, l == SILENCE);
            }
            assert_eq!(s.ground_truth().unwrap().len(), 3);
        }
    }

    #[test]
    fn split_and_determinism() {
        let one = gen_corpus(&CorpusConfig { num_samples: 1, ..small() }).unwrap();
        assert_eq!((one.train().len(), one.validation().len()), (1, 0));

        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.cache_bytes().unwrap(), b.cache_bytes().unwrap());
        assert_eq!((a.train().len(), a.validation().len()), (32, 8));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for precision in [DType::F32, DType::F64] {
            let corpus = gen_corpus(&CorpusConfig { precision, ..small() }).unwrap();
            corpus.save(dir.path()).unwrap();
            assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
        }
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let bad = CorpusConfig {
            concepts_per_sample: 13,
            ..CorpusConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("concepts_per_sample"), "{err}");
        let bad = CorpusConfig {
            silence_fraction: 1.0,
            ..CorpusConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("silence_fraction"));
    }

    #[test]
    fn zero_noise_separability() {
        let cfg = CorpusConfig {
            num_samples: 60,
            noise_sigma: 0.0,
            precision: DType::F64,
            ..CorpusConfig::default()
        };
        let corpus = gen_corpus(&cfg).unwrap();
        let sets: Vec<(TokenSet<f64>, TokenSet<f64>)> = corpus
            .samples
            .iter()
            .map(|s| {
                (
                    TokenSet::audio(s.audio_raw.clone(), s.audio_mask_raw.clone()).unwrap().normalize(1e-6),
                    TokenSet::visual(s.visual_raw.clone()).normalize(1e-6),
                )
            })
            .collect();
        let score = |i: usize, j: usize| {
            let s = similarity_volume(&sets[i].0, &sets[j].1).unwrap();
            phi(&s, sets[i].0.mask.as_ref().unwrap(), 1e-6).unwrap()
        };
        let mut compared = 0;
        for (i, si) in corpus.samples.iter().enumerate() {
            let own = score(i, i);
            for (j, sj) in corpus.samples.iter().enumerate() {
                let disjoint = si.spoken.iter().all(|c| !sj.concepts().contains(c));
                if i != j && disjoint {
                    assert!(own > score(i, j), "sample {i} vs {j}");
                    compared += 1;
                }
            }
        }
        assert!(compared > 100);
    }

    #[test]
    fn concept_usage_is_balanced() {
        let cfg = CorpusConfig {
            num_samples: 1200,
            ..CorpusConfig::default()
        };
        let mut counts = vec![0usize; cfg.concepts];
        for i in 0..cfg.num_samples as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
            for &c in &draw_placement(&cfg, &mut rng).spoken {
                counts[c as usize] += 1;
            }
        }
        let uniform = (cfg.num_samples * cfg.concepts_per_sample) as f64 / cfg.concepts as f64;
        for (c, &n) in counts.iter().enumerate() {
            assert!((n as f64 - uniform).abs() <= 0.2 * uniform, "concept {c}: {n} vs {uniform}");
        }
    }
}
