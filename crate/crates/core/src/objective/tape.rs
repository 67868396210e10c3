use rand::Rng;
use rayon::prelude::*;

use super::{combine, infonce_backward, infonce_matrix, LossBreakdown, Objective, ObjectiveConfig, Temperature};
use crate::aggregation::{phi_with_argmax, psi_with_argmax, TokenSet};
use crate::error::{Error, Result};
use crate::pipeline::head::{HeadCache, ParamSet, ProjectionHead};
use crate::tensor::{dot, matmul_nt, Matrix, Real};

/// Both projection heads plus the learnable temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub audio: ProjectionHead<T>,
    pub visual: ProjectionHead<T>,
    pub temperature: Temperature<T>,
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng>(d_audio_in: usize, d_visual_in: usize, d_hidden: usize, d_out: usize, init_tau: f64, rng: &mut R) -> Result<Self> {
        let audio = ProjectionHead::init(d_audio_in, d_hidden, d_out, rng);
        let visual = ProjectionHead::init(d_visual_in, d_hidden, d_out, rng);
        Ok(Self {
            audio,
            visual,
            temperature: Temperature::new(init_tau)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            audio: self.audio.zeros_like(),
            visual: self.visual.zeros_like(),
            temperature: Temperature { log_value: T::zero() },
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.audio.d_out()
    }

    /// Projects and l2-normalizes one audio token set, keeping its mask.
    pub fn embed_audio(&self, audio: &TokenSet<T>, eps: T) -> Result<TokenSet<T>> {
        let z = self.audio.forward(&audio.tokens)?;
        Ok(TokenSet {
            tokens: z,
            mask: audio.mask.clone(),
            normalized: false,
        }
        .normalize(eps))
    }

    pub fn embed_visual(&self, visual: &TokenSet<T>, eps: T) -> Result<TokenSet<T>> {
        let z = self.visual.forward(&visual.tokens)?;
        Ok(TokenSet::visual(z).normalize(eps))
    }

    pub fn embed_batch(&self, batch: &Batch<T>, eps: T) -> Result<(Vec<TokenSet<T>>, Vec<TokenSet<T>>)> {
        let audio = batch
            .audio
            .par_iter()
            .map(|a| self.embed_audio(a, eps))
            .collect::<Result<Vec<_>>>()?;
        let visual = batch
            .visual
            .par_iter()
            .map(|v| self.embed_visual(v, eps))
            .collect::<Result<Vec<_>>>()?;
        Ok((audio, visual))
    }
}

impl<T: Real> ParamSet<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.audio.visit(&mut |n, s| f(&format!("audio.{n}"), s));
        self.visual.visit(&mut |n, s| f(&format!("visual.{n}"), s));
        f("log_tau", std::slice::from_ref(&self.temperature.log_value));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.audio.visit_mut(&mut |n, s| f(&format!("audio.{n}"), s));
        self.visual.visit_mut(&mut |n, s| f(&format!("visual.{n}"), s));
        f("log_tau", std::slice::from_mut(&mut self.temperature.log_value));
    }
}

/// Head inputs for one micro-batch: pooled, masked audio and raw visual patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub audio: Vec<TokenSet<T>>,
    pub visual: Vec<TokenSet<T>>,
}

impl<T: Real> Batch<T> {
    pub fn new(audio: Vec<TokenSet<T>>, visual: Vec<TokenSet<T>>) -> Result<Self> {
        if audio.len() != visual.len() {
            return Err(Error::shape(
                "Batch::new",
                format!("{} visual sets", audio.len()),
                format!("{} visual sets", visual.len()),
            ));
        }
        if audio.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(i) = audio.iter().position(|a| a.mask.is_none()) {
            return Err(Error::InvalidArgument(format!("audio sample {i} has no mask")));
        }
        Ok(Self { audio, visual })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

/// Gradients of the scalar loss.
///
/// `params` has the same layout as the model (its temperature slot holds
/// `∂L/∂log τ`). Token gradients are kept both for the normalized embeddings
/// fed to aggregation and for the raw head inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore<T> {
    pub params: Model<T>,
    pub audio_tokens: Vec<Matrix<T>>,
    pub visual_tokens: Vec<Matrix<T>>,
    pub audio_inputs: Vec<Matrix<T>>,
    pub visual_inputs: Vec<Matrix<T>>,
}

struct Embedded<T> {
    cache: HeadCache<T>,
    norms: Vec<T>,
    tokens: Matrix<T>,
}

struct DenseRecord<T> {
    clip: Matrix<T>,
    /// `[b][b'][t]` argmax patch.
    phi_arg: Vec<Vec<Vec<usize>>>,
    /// `[b][b'][p]` argmax token; only for the symmetric objective.
    psi_arg: Option<Vec<Vec<Vec<usize>>>>,
}

struct GlobalRecord<T> {
    clip: Matrix<T>,
    audio_norm: Vec<T>,
    audio_unit: Vec<Vec<T>>,
    visual_norm: Vec<T>,
    visual_unit: Vec<Vec<T>>,
}

struct Record<T> {
    cfg: ObjectiveConfig,
    masks: Vec<crate::tensor::MaskVector>,
    audio: Vec<Embedded<T>>,
    visual: Vec<Embedded<T>>,
    dense: Option<DenseRecord<T>>,
    global: Option<GlobalRecord<T>>,
    tau: T,
}

/// Holds the intermediates of one forward evaluation until `backward`.
pub struct Tape<T> {
    record: Option<Record<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { record: None }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

fn embed_cached<T: Real>(head: &ProjectionHead<T>, tokens: &Matrix<T>, eps: T) -> Result<Embedded<T>> {
    let (mut z, cache) = head.forward_cached(tokens)?;
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        norms.push(crate::tensor::normalize_in_place(z.row_mut(i), eps));
    }
    Ok(Embedded { cache, norms, tokens: z })
}

/// Runs the full pipeline on `batch`, recording what `backward` needs.
pub fn forward<T: Real>(model: &Model<T>, batch: &Batch<T>, cfg: &ObjectiveConfig, tape: &mut Tape<T>) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    tape.record = None;
    let eps = T::lit(cfg.eps);
    let b = batch.len();
    let masks: Vec<_> = batch
        .audio
        .iter()
        .map(|a| a.mask.clone().ok_or_else(|| Error::InvalidArgument("audio set without mask".into())))
        .collect::<Result<_>>()?;

    let audio = batch
        .audio
        .par_iter()
        .map(|a| embed_cached(&model.audio, &a.tokens, eps))
        .collect::<Result<Vec<_>>>()?;
    let visual = batch
        .visual
        .par_iter()
        .map(|v| embed_cached(&model.visual, &v.tokens, eps))
        .collect::<Result<Vec<_>>>()?;

    let weight = cfg.dense_weight();
    let symmetric = cfg.objective == Objective::DenseSymmetric;
    let dense = if weight > 0.0 {
        let rows = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut vals = Vec::with_capacity(b);
                let mut phi_args = Vec::with_capacity(b);
                let mut psi_args = Vec::new();
                for v in &visual {
                    let s = matmul_nt(&audio[i].tokens, &v.tokens)?;
                    let (f, arg) = phi_with_argmax(&s, &masks[i], eps)?;
                    phi_args.push(arg);
                    if symmetric {
                        let (p, parg) = psi_with_argmax(&s)?;
                        psi_args.push(parg);
                        vals.push(T::lit(0.5) * (f + p));
                    } else {
                        vals.push(f);
                    }
                }
                Ok((vals, phi_args, psi_args))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut clip_rows = Vec::with_capacity(b);
        let mut phi_arg = Vec::with_capacity(b);
        let mut psi_arg = Vec::with_capacity(b);
        for (vals, pa, sa) in rows {
            clip_rows.push(vals);
            phi_arg.push(pa);
            psi_arg.push(sa);
        }
        Some(DenseRecord {
            clip: Matrix::from_rows(&clip_rows)?,
            phi_arg,
            psi_arg: symmetric.then_some(psi_arg),
        })
    } else {
        None
    };

    let global = if weight < 1.0 {
        let pool = |e: &Embedded<T>, mask: Option<&crate::tensor::MaskVector>| -> Vec<T> {
            let d = e.tokens.cols();
            let mut acc = vec![T::zero(); d];
            for (t, row) in e.tokens.iter_rows().enumerate() {
                if mask.is_none_or(|m| m.get(t)) {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x;
                    }
                }
            }
            let denom = match mask {
                Some(m) => T::lit(m.count() as f64) + eps,
                None => T::lit(e.tokens.rows() as f64),
            };
            acc.into_iter().map(|a| a / denom).collect()
        };
        let unit = |mut v: Vec<T>| -> (T, Vec<T>) {
            if cfg.renormalize_global {
                let n = crate::tensor::normalize_in_place(&mut v, eps);
                (n, v)
            } else {
                (T::one(), v)
            }
        };
        let (audio_norm, audio_unit): (Vec<T>, Vec<Vec<T>>) =
            audio.iter().zip(&masks).map(|(e, m)| unit(pool(e, Some(m)))).unzip();
        let (visual_norm, visual_unit): (Vec<T>, Vec<Vec<T>>) = visual.iter().map(|e| unit(pool(e, None))).unzip();
        let mut clip = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                clip[(i, j)] = dot(&audio_unit[i], &visual_unit[j]);
            }
        }
        Some(GlobalRecord {
            clip,
            audio_norm,
            audio_unit,
            visual_norm,
            visual_unit,
        })
    } else {
        None
    };

    let tau = model.temperature.value();
    let d = dense.as_ref().map_or(T::zero(), |r| infonce_matrix(&r.clip, tau));
    let g = global.as_ref().map_or(T::zero(), |r| infonce_matrix(&r.clip, tau));
    let lambda = T::lit(weight);
    let loss = LossBreakdown {
        total: combine(lambda, d, g),
        dense_part: d,
        global_part: g,
        lambda,
    };

    tape.record = Some(Record {
        cfg: *cfg,
        masks,
        audio,
        visual,
        dense,
        global,
        tau,
    });
    Ok(loss)
}

/// Gradient of the row-normalization `y = z / max(‖z‖, eps)` given `∂L/∂y`.
fn normalize_backward<T: Real>(unit: &[T], norm: T, eps: T, d_unit: &[T]) -> Vec<T> {
    if norm > eps {
        let radial = dot(unit, d_unit);
        unit.iter().zip(d_unit).map(|(&u, &d)| (d - u * radial) / norm).collect()
    } else {
        d_unit.iter().map(|&d| d / eps).collect()
    }
}

/// Consumes the tape and returns exact gradients of the recorded loss.
pub fn backward<T: Real>(model: &Model<T>, tape: &mut Tape<T>) -> Result<GradientStore<T>> {
    let rec = tape.record.take().ok_or(Error::BackwardWithoutForward)?;
    let eps = T::lit(rec.cfg.eps);
    let b = rec.audio.len();
    let lambda = T::lit(rec.cfg.dense_weight());

    let mut d_audio: Vec<Matrix<T>> = rec.audio.iter().map(|e| Matrix::zeros(e.tokens.rows(), e.tokens.cols())).collect();
    let mut d_visual: Vec<Matrix<T>> = rec.visual.iter().map(|e| Matrix::zeros(e.tokens.rows(), e.tokens.cols())).collect();
    let mut d_tau = T::zero();

    if let Some(dense) = &rec.dense {
        let (_, d_clip, dt) = infonce_backward(&dense.clip, rec.tau);
        d_tau += lambda * dt;
        let d_clip = d_clip.scale(lambda);
        let phi_scale = if dense.psi_arg.is_some() { T::lit(0.5) } else { T::one() };
        let inv_nv: Vec<T> = rec.visual.iter().map(|e| T::one() / T::lit(e.tokens.rows() as f64)).collect();

        // Audio side: row b owns d_audio[b]; visual side: column b' owns d_visual[b'].
        let phi_weight = |i: usize| -> T { T::one() / (T::lit(rec.masks[i].count() as f64) + eps) };
        d_audio.par_iter_mut().enumerate().for_each(|(i, da)| {
            let a_mask = &rec.masks[i];
            let w_phi = phi_weight(i);
            for j in 0..b {
                let g = d_clip[(i, j)];
                let v = &rec.visual[j].tokens;
                for (t, &p) in dense.phi_arg[i][j].iter().enumerate() {
                    if a_mask.get(t) {
                        let w = g * phi_scale * w_phi;
                        for (x, &y) in da.row_mut(t).iter_mut().zip(v.row(p)) {
                            *x += w * y;
                        }
                    }
                }
                if let Some(psi) = &dense.psi_arg {
                    let w = g * T::lit(0.5) * inv_nv[j];
                    for (p, &t) in psi[i][j].iter().enumerate() {
                        for (x, &y) in da.row_mut(t).iter_mut().zip(v.row(p)) {
                            *x += w * y;
                        }
                    }
                }
            }
        });
        d_visual.par_iter_mut().enumerate().for_each(|(j, dv)| {
            for i in 0..b {
                let g = d_clip[(i, j)];
                let a = &rec.audio[i].tokens;
                let a_mask = &rec.masks[i];
                let w_phi = phi_weight(i);
                for (t, &p) in dense.phi_arg[i][j].iter().enumerate() {
                    if a_mask.get(t) {
                        let w = g * phi_scale * w_phi;
                        for (x, &y) in dv.row_mut(p).iter_mut().zip(a.row(t)) {
                            *x += w * y;
                        }
                    }
                }
                if let Some(psi) = &dense.psi_arg {
                    let w = g * T::lit(0.5) * inv_nv[j];
                    for (p, &t) in psi[i][j].iter().enumerate() {
                        for (x, &y) in dv.row_mut(p).iter_mut().zip(a.row(t)) {
                            *x += w * y;
                        }
                    }
                }
            }
        });
    }

    if let Some(global) = &rec.global {
        let gw = T::one() - lambda;
        let (_, d_clip, dt) = infonce_backward(&global.clip, rec.tau);
        d_tau += gw * dt;
        let d_clip = d_clip.scale(gw);
        let dim = model.embed_dim();
        for i in 0..b {
            let mut d_unit_a = vec![T::zero(); dim];
            for j in 0..b {
                let g = d_clip[(i, j)];
                for (x, &y) in d_unit_a.iter_mut().zip(&global.visual_unit[j]) {
                    *x += g * y;
                }
            }
            let d_pool = if rec.cfg.renormalize_global {
                normalize_backward(&global.audio_unit[i], global.audio_norm[i], eps, &d_unit_a)
            } else {
                d_unit_a
            };
            let denom = T::lit(rec.masks[i].count() as f64) + eps;
            for t in 0..d_audio[i].rows() {
                if rec.masks[i].get(t) {
                    for (x, &y) in d_audio[i].row_mut(t).iter_mut().zip(&d_pool) {
                        *x += y / denom;
                    }
                }
            }
        }
        for j in 0..b {
            let mut d_unit_v = vec![T::zero(); dim];
            for i in 0..b {
                let g = d_clip[(i, j)];
                for (x, &y) in d_unit_v.iter_mut().zip(&global.audio_unit[i]) {
                    *x += g * y;
                }
            }
            let d_pool = if rec.cfg.renormalize_global {
                normalize_backward(&global.visual_unit[j], global.visual_norm[j], eps, &d_unit_v)
            } else {
                d_unit_v
            };
            let n = T::lit(d_visual[j].rows() as f64);
            for p in 0..d_visual[j].rows() {
                for (x, &y) in d_visual[j].row_mut(p).iter_mut().zip(&d_pool) {
                    *x += y / n;
                }
            }
        }
    }

    let head_backward = |head: &ProjectionHead<T>, e: &Embedded<T>, d_tokens: &Matrix<T>| -> Result<(ProjectionHead<T>, Matrix<T>)> {
        let mut d_z = Matrix::zeros(d_tokens.rows(), d_tokens.cols());
        for t in 0..d_tokens.rows() {
            let row = d_tokens.row(t);
            if row.iter().all(|&x| x == T::zero()) {
                continue;
            }
            let dz = normalize_backward(e.tokens.row(t), e.norms[t], eps, row);
            d_z.row_mut(t).copy_from_slice(&dz);
        }
        let mut grads = head.zeros_like();
        let d_in = head.backward(&e.cache, &d_z, &mut grads)?;
        Ok((grads, d_in))
    };

    let audio_back = rec
        .audio
        .par_iter()
        .zip(d_audio.par_iter())
        .map(|(e, d)| head_backward(&model.audio, e, d))
        .collect::<Result<Vec<_>>>()?;
    let visual_back = rec
        .visual
        .par_iter()
        .zip(d_visual.par_iter())
        .map(|(e, d)| head_backward(&model.visual, e, d))
        .collect::<Result<Vec<_>>>()?;

    let mut params = model.zeros_like();
    let mut audio_inputs = Vec::with_capacity(b);
    let mut visual_inputs = Vec::with_capacity(b);
    for (g, d_in) in audio_back {
        add_head(&mut params.audio, &g);
        audio_inputs.push(d_in);
    }
    for (g, d_in) in visual_back {
        add_head(&mut params.visual, &g);
        visual_inputs.push(d_in);
    }
    params.temperature.log_value = rec.tau * d_tau;

    Ok(GradientStore {
        params,
        audio_tokens: d_audio,
        visual_tokens: d_visual,
        audio_inputs,
        visual_inputs,
    })
}

fn add_head<T: Real>(acc: &mut ProjectionHead<T>, g: &ProjectionHead<T>) {
    let flat = g.flatten();
    let mut offset = 0;
    acc.visit_mut(&mut |_, s| {
        for x in s.iter_mut() {
            *x += flat[offset];
            offset += 1;
        }
    });
}
