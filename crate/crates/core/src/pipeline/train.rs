//! Data preparation, the seeded batch sampler, and the optimization loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frontend::{downsample_audio, downsample_labels, downsample_mask, MaskRule};
use super::optim::{accumulate, adam_step, lr_at, OptimizerState, ScheduleConfig};
use crate::aggregation::TokenSet;
use crate::corpus::{is_concept, SyntheticSample, MIXED};
use crate::error::{Error, Result};
use crate::localization::GroundTruthMask;
use crate::objective::{backward, forward, Batch, Model, Objective, ObjectiveConfig, Tape, DEFAULT_INIT_TAU, DEFAULT_LAMBDA};
use crate::tensor::{DType, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub eps: f64,
    pub renormalize_global: bool,
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer update.
    pub accumulation: usize,
    /// Optimizer updates.
    pub steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub final_lr_fraction: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub init_tau: f64,
    pub seed: u64,
    pub mask_rule: MaskRule,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dense,
            lambda: DEFAULT_LAMBDA,
            eps: crate::aggregation::DEFAULT_EPS,
            renormalize_global: true,
            batch_size: 64,
            accumulation: 1,
            steps: 600,
            base_lr: 2e-3,
            warmup_steps: 30,
            final_lr_fraction: 0.05,
            hidden_dim: 64,
            embed_dim: 32,
            init_tau: DEFAULT_INIT_TAU,
            seed: 0,
            mask_rule: MaskRule::Or,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            objective: self.objective,
            lambda: self.lambda,
            eps: self.eps,
            renormalize_global: self.renormalize_global,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            final_lr_fraction: self.final_lr_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective_config().validate()?;
        self.schedule().validate()?;
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("accumulation", self.accumulation),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.init_tau > 0.0 && self.init_tau <= crate::objective::MAX_TAU) {
            return Err(Error::config("init_tau", format!("must lie in (0, {}]", crate::objective::MAX_TAU)));
        }
        Ok(())
    }
}

/// One sample as the model sees it: pooled, masked audio and raw patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample<T> {
    pub index: usize,
    pub audio: TokenSet<T>,
    pub visual: TokenSet<T>,
    /// Labels of the pooled audio tokens.
    pub audio_labels: Vec<u8>,
    pub spoken: Vec<u8>,
    pub masks: Vec<GroundTruthMask>,
    pub grid_side: usize,
}

pub fn prepare<T: Real>(sample: &SyntheticSample, rule: MaskRule) -> Result<PreparedSample<T>> {
    let pooled = downsample_audio(&sample.audio_raw.cast::<T>())?;
    let mask = downsample_mask(&sample.audio_mask_raw, rule)?;
    let labels = downsample_labels(&sample.audio_labels, is_concept, MIXED);
    Ok(PreparedSample {
        index: sample.index,
        audio: TokenSet::audio(pooled, mask)?,
        visual: TokenSet::visual(sample.visual_raw.cast::<T>()),
        audio_labels: labels,
        spoken: sample.spoken.clone(),
        masks: sample.ground_truth()?,
        grid_side: sample.grid_side(),
    })
}

pub fn prepare_all<T: Real>(samples: &[SyntheticSample], rule: MaskRule) -> Result<Vec<PreparedSample<T>>> {
    samples.par_iter().map(|s| prepare(s, rule)).collect()
}

/// FNV-1a over the little-endian bytes of each index.
pub fn batch_hash(indices: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &i in indices {
        for b in (i as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Epoch-wise shuffled fixed-size batches; a trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct Sampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::config(
                "batch_size",
                format!("{batch_size} must lie in [1, {n}] for {n} training samples"),
            ));
        }
        let mut s = Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }

    pub fn skip(&mut self, batches: u64) {
        for _ in 0..batches {
            self.next_batch();
        }
    }
}

pub const LOSS_LOG_HEADER: &str = "step\tlr\ttotal\tdense_part\tglobal_part\ttau\tbatch_hash";

/// One optimizer update; losses are means over the micro-batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub dense_part: f64,
    pub global_part: f64,
    /// Temperature after the update.
    pub tau: f64,
    pub batch_hash: u64,
}

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.8e}\t{:.10}\t{:.10}\t{:.10}\t{:.8}\t{:016x}",
            self.step, self.lr, self.total, self.dense_part, self.global_part, self.tau, self.batch_hash
        )
    }
}

pub fn batch_of<T: Real>(data: &[PreparedSample<T>], indices: &[usize]) -> Result<Batch<T>> {
    Batch::new(
        indices.iter().map(|&i| data[i].audio.clone()).collect(),
        indices.iter().map(|&i| data[i].visual.clone()).collect(),
    )
}

/// Seed of the head initialization; independent of the objective so every
/// objective starts from identical weights.
pub fn init_seed(seed: u64) -> u64 {
    seed ^ 0x1A17_0000_0000_0000
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Updates applied so far.
    pub step: u64,
    sampler: Sampler,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, d_audio_in: usize, d_visual_in: usize, n_train: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(config.seed));
        let model = Model::init(d_audio_in, d_visual_in, config.hidden_dim, config.embed_dim, config.init_tau, &mut rng)?;
        Self::resume(config, model, None, 0, n_train)
    }

    /// Rebuilds a trainer at `step`, replaying the sampler to the same position.
    pub fn resume(config: TrainConfig, model: Model<T>, optimizer: Option<OptimizerState<T>>, step: u64, n_train: usize) -> Result<Self> {
        config.validate()?;
        let mut sampler = Sampler::new(n_train, config.batch_size, config.seed)?;
        sampler.skip(step * config.accumulation as u64);
        let optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(&model));
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            sampler,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn train_step(&mut self, data: &[PreparedSample<T>]) -> Result<LogRow> {
        let cfg = self.config.objective_config();
        let k = self.config.accumulation;
        let mut grads = Vec::with_capacity(k);
        let mut consumed = Vec::with_capacity(k * self.config.batch_size);
        let (mut total, mut dense, mut global) = (0.0, 0.0, 0.0);
        for _ in 0..k {
            let idx = self.sampler.next_batch();
            let batch = batch_of(data, &idx)?;
            let mut tape = Tape::new();
            let loss = forward(&self.model, &batch, &cfg, &mut tape)?;
            grads.push(backward(&self.model, &mut tape)?.params);
            total += loss.total.as_f64();
            dense += loss.dense_part.as_f64();
            global += loss.global_part.as_f64();
            consumed.extend(idx);
        }
        let g = accumulate(&grads)?;
        let lr = lr_at(self.step + 1, &self.config.schedule());
        adam_step(&mut self.model, &g, &mut self.optimizer, lr)?;
        self.model.temperature.clamp();
        self.step += 1;
        let kf = k as f64;
        Ok(LogRow {
            step: self.step,
            lr,
            total: total / kf,
            dense_part: dense / kf,
            global_part: global / kf,
            tau: self.model.temperature.value().as_f64(),
            batch_hash: batch_hash(&consumed),
        })
    }

    /// Runs to `config.steps`, passing every row to `on_step`.
    pub fn run(&mut self, data: &[PreparedSample<T>], mut on_step: impl FnMut(&LogRow, &Model<T>) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            let row = self.train_step(data)?;
            on_step(&row, &self.model)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Embeds prepared samples for scoring (normalized token sets).
pub fn embed_all<T: Real>(model: &Model<T>, data: &[PreparedSample<T>], eps: f64) -> Result<(Vec<TokenSet<T>>, Vec<TokenSet<T>>)> {
    let e = T::lit(eps);
    let audio = data.par_iter().map(|s| model.embed_audio(&s.audio, e)).collect::<Result<Vec<_>>>()?;
    let visual = data.par_iter().map(|s| model.embed_visual(&s.visual, e)).collect::<Result<Vec<_>>>()?;
    Ok((audio, visual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, CorpusConfig};

    fn tiny() -> (Vec<PreparedSample<f64>>, TrainConfig) {
        let corpus = gen_corpus(&CorpusConfig {
            num_samples: 24,
            ..CorpusConfig::default()
        })
        .unwrap();
        let data = prepare_all(corpus.train(), MaskRule::Or).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            steps: 12,
            warmup_steps: 2,
            hidden_dim: 16,
            embed_dim: 8,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = Sampler::new(10, 3, 4).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(Sampler::new(3, 4, 0).is_err());
        let mut a = Sampler::new(10, 3, 4).unwrap();
        let mut b = a.clone();
        a.skip(5);
        for _ in 0..5 {
            b.next_batch();
        }
        assert_eq!(a.next_batch(), b.next_batch());
    }

    #[test]
    fn batch_hash_is_order_sensitive() {
        assert_ne!(batch_hash(&[1, 2]), batch_hash(&[2, 1]));
        assert_eq!(batch_hash(&[]), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn pooled_labels_and_masks() {
        let corpus = gen_corpus(&CorpusConfig {
            num_samples: 3,
            ..CorpusConfig::default()
        })
        .unwrap();
        let s = &corpus.samples[0];
        let p: PreparedSample<f64> = prepare(s, MaskRule::Or).unwrap();
        assert_eq!(p.audio.len(), s.audio_raw.rows() / 2);
        assert_eq!(p.audio_labels.len(), p.audio.len());
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (data, cfg) = tiny();
        let run = || {
            let mut t = Trainer::<f64>::new(cfg.clone(), 48, 48, data.len()).unwrap();
            t.run(&data, |_, _| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.total.is_finite()));
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn objectives_share_batches_and_init() {
        let (data, cfg) = tiny();
        let hashes = |o: Objective| {
            let mut t = Trainer::<f64>::new(TrainConfig { objective: o, ..cfg.clone() }, 48, 48, data.len()).unwrap();
            let init = t.model.clone();
            (init, t.run(&data, |_, _| Ok(())).unwrap().iter().map(|r| r.batch_hash).collect::<Vec<_>>())
        };
        let (m_dense, h_dense) = hashes(Objective::Dense);
        let (m_global, h_global) = hashes(Objective::Global);
        assert_eq!(h_dense, h_global);
        assert_eq!(m_dense, m_global);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, cfg) = tiny();
        let mut full = Trainer::<f64>::new(cfg.clone(), 48, 48, data.len()).unwrap();
        let rows = full.run(&data, |_, _| Ok(())).unwrap();

        let mut first = Trainer::<f64>::new(cfg.clone(), 48, 48, data.len()).unwrap();
        for _ in 0..5 {
            first.train_step(&data).unwrap();
        }
        let mut second = Trainer::resume(cfg, first.model.clone(), Some(first.optimizer.clone()), 5, data.len()).unwrap();
        let rest = second.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(&rows[5..], &rest[..]);
        assert_eq!(full.model, second.model);
    }

    #[test]
    fn hybrid_logs_both_parts() {
        let (data, cfg) = tiny();
        let mut t = Trainer::<f64>::new(TrainConfig { objective: Objective::Hybrid, steps: 2, ..cfg }, 48, 48, data.len()).unwrap();
        let rows = t.run(&data, |_, _| Ok(())).unwrap();
        for r in rows {
            assert!(r.dense_part > 0.0 && r.global_part > 0.0);
            assert!((r.total - (0.7 * r.dense_part + 0.3 * r.global_part)).abs() < 1e-12);
        }
    }
}
