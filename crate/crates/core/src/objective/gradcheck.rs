//! Central finite-difference verification of the analytic backward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{backward, forward, Batch, Model, Tape};
use super::ObjectiveConfig;
use crate::aggregation::TokenSet;
use crate::error::Result;
use crate::pipeline::head::ParamSet;
use crate::tensor::{MaskVector, Matrix};

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Worst relative error between `analytic` and central differences of `f` at `x`.
pub fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    /// Audio token counts cycle through this list across the batch.
    pub audio_tokens: Vec<usize>,
    pub visual_tokens: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub step: f64,
    /// Above this many coordinates per buffer, a seeded subsample of this size is checked.
    pub max_coords_per_buffer: usize,
    pub check_inputs: bool,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient to confirm the check can fail.
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl GradCheckOptions {
    pub fn new(objective: ObjectiveConfig, seed: u64) -> Self {
        Self {
            objective,
            batch_size: 3,
            audio_tokens: vec![4, 5],
            visual_tokens: 9,
            input_dim: 6,
            hidden_dim: 6,
            embed_dim: 6,
            step: 1e-5,
            max_coords_per_buffer: 256,
            check_inputs: true,
            seed,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub objective: String,
    pub loss: f64,
    /// Worst relative error per parameter buffer (and per input family).
    pub per_buffer: Vec<(String, f64)>,
    pub worst: f64,
    pub coords_checked: usize,
    pub all_gradients_zero: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst <= tolerance
    }
}

fn random_batch(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let d = opts.input_dim;
    let mat = |r: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_vec(r, d, (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
    };
    let mut audio = Vec::with_capacity(opts.batch_size);
    let mut visual = Vec::with_capacity(opts.batch_size);
    for i in 0..opts.batch_size {
        let n = opts.audio_tokens[i % opts.audio_tokens.len()];
        let mut bits: Vec<u8> = (0..n).map(|_| rng.random_bool(0.75) as u8).collect();
        bits[0] = 1;
        audio.push(TokenSet::audio(mat(n, rng), MaskVector::new(bits).expect("binary")).expect("sized"));
        visual.push(TokenSet::visual(mat(opts.visual_tokens, rng)));
    }
    Batch::new(audio, visual).expect("valid batch")
}

fn loss_of(model: &Model<f64>, batch: &Batch<f64>, cfg: &ObjectiveConfig) -> f64 {
    let mut tape = Tape::new();
    forward(model, batch, cfg, &mut tape).expect("forward").total
}

/// Compares `backward` against central differences in 64-bit.
pub fn grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    opts.objective.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = Model::<f64>::init(
        opts.input_dim,
        opts.input_dim,
        opts.hidden_dim,
        opts.embed_dim,
        rng.random_range(2.0..20.0),
        &mut rng,
    )?;
    // Non-trivial affine parameters so their gradients are exercised.
    for g in model.audio.gamma.iter_mut().chain(model.visual.gamma.iter_mut()) {
        *g = rng.random_range(0.5..1.5);
    }
    for b in model.audio.beta.iter_mut().chain(model.visual.beta.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    let batch = random_batch(opts, &mut rng);
    let cfg = opts.objective;

    let mut tape = Tape::new();
    let loss = forward(&model, &batch, &cfg, &mut tape)?.total;
    let grads = backward(&model, &mut tape)?;

    let mut analytic = grads.params.flatten();
    if opts.corrupt_backward {
        for (i, g) in analytic.iter_mut().enumerate() {
            *g += 1e-2 * (1.0 + (i % 3) as f64);
        }
    }
    let all_gradients_zero = analytic.iter().all(|&g| g == 0.0)
        && grads.audio_inputs.iter().chain(&grads.visual_inputs).all(|m| m.as_slice().iter().all(|&g| g == 0.0));

    let base = model.flatten();
    let h = opts.step;
    let mut per_buffer = Vec::new();
    let mut worst = 0.0f64;
    let mut coords_checked = 0;
    let mut offset = 0;
    for (name, len) in model.layout() {
        let picks: Vec<usize> = if len > opts.max_coords_per_buffer {
            sample(&mut rng, len, opts.max_coords_per_buffer).into_vec()
        } else {
            (0..len).collect()
        };
        let mut buffer_worst = 0.0f64;
        let mut probe = model.clone();
        let mut flat = base.clone();
        for k in picks {
            let idx = offset + k;
            flat[idx] = base[idx] + h;
            probe.assign_flat(&flat);
            let up = loss_of(&probe, &batch, &cfg);
            flat[idx] = base[idx] - h;
            probe.assign_flat(&flat);
            let down = loss_of(&probe, &batch, &cfg);
            flat[idx] = base[idx];
            buffer_worst = buffer_worst.max(relative_error(analytic[idx], (up - down) / (2.0 * h)));
            coords_checked += 1;
        }
        worst = worst.max(buffer_worst);
        per_buffer.push((name, buffer_worst));
        offset += len;
    }
    model.assign_flat(&base);

    if opts.check_inputs {
        for (family, is_audio) in [("audio_inputs", true), ("visual_inputs", false)] {
            let mut family_worst = 0.0f64;
            for i in 0..batch.len() {
                let sets = if is_audio { &batch.audio } else { &batch.visual };
                let analytic_in = if is_audio { &grads.audio_inputs[i] } else { &grads.visual_inputs[i] };
                let x = sets[i].tokens.as_slice().to_vec();
                let f = |v: &[f64]| {
                    let mut b = batch.clone();
                    let target = if is_audio { &mut b.audio[i] } else { &mut b.visual[i] };
                    target.tokens.as_mut_slice().copy_from_slice(v);
                    loss_of(&model, &b, &cfg)
                };
                family_worst = family_worst.max(check_gradient(f, &x, analytic_in.as_slice(), h));
                coords_checked += x.len();
            }
            worst = worst.max(family_worst);
            per_buffer.push((family.to_string(), family_worst));
        }
    }

    Ok(GradCheckReport {
        objective: cfg.objective.name().to_string(),
        loss,
        per_buffer,
        worst,
        coords_checked,
        all_gradients_zero,
    })
}
