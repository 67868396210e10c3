//! Symmetric InfoNCE over clip similarity matrices, the three contrastive
//! objectives, and exact gradients through the projection pipeline.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradient, grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{backward, forward, Batch, GradientStore, Model, Tape};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{clip_matrix_dense, clip_matrix_global, clip_matrix_symmetric, ClipSimilarityMatrix, TokenSet};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix, Real};

pub const DEFAULT_LAMBDA: f64 = 0.7;
pub const DEFAULT_INIT_TAU: f64 = 10.0;
pub const MAX_TAU: f64 = 100.0;

/// Inverse temperature, stored as its logarithm so it stays positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature<T> {
    pub log_value: T,
}

impl<T: Real> Temperature<T> {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {value}")));
        }
        let mut t = Self {
            log_value: T::lit(value.ln()),
        };
        t.clamp();
        Ok(t)
    }

    pub fn value(&self) -> T {
        self.log_value.exp()
    }

    /// Enforces `value ≤ MAX_TAU`.
    pub fn clamp(&mut self) {
        let cap = T::lit(MAX_TAU.ln());
        if self.log_value > cap {
            self.log_value = cap;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub dense_part: T,
    pub global_part: T,
    pub lambda: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dense,
    Global,
    Hybrid,
    /// Dense with both directional max-means averaged; the ablation variant.
    DenseSymmetric,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Dense, Objective::Global, Objective::Hybrid, Objective::DenseSymmetric];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dense => "dense",
            Objective::Global => "global",
            Objective::Hybrid => "hybrid",
            Objective::DenseSymmetric => "dense_symmetric",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub eps: f64,
    pub renormalize_global: bool,
}

impl ObjectiveConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            lambda: DEFAULT_LAMBDA,
            eps: crate::aggregation::DEFAULT_EPS,
            renormalize_global: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("{} is outside [0, 1]", self.lambda)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }

    /// Weight of the dense term in the total loss.
    pub(crate) fn dense_weight(&self) -> f64 {
        match self.objective {
            Objective::Dense | Objective::DenseSymmetric => 1.0,
            Objective::Global => 0.0,
            Objective::Hybrid => self.lambda,
        }
    }
}

/// `−(1/2B) Σ_b [log softmax_row(τC)_bb + log softmax_col(τC)_bb]`.
pub fn infonce<T: Real>(c: &ClipSimilarityMatrix<T>, tau: &Temperature<T>) -> T {
    infonce_matrix(&c.values, tau.value())
}

pub(crate) fn infonce_matrix<T: Real>(c: &Matrix<T>, tau: T) -> T {
    let b = c.rows();
    let logits = c.scale(tau);
    let mut total = T::zero();
    for i in 0..b {
        let row = logits.row(i);
        total += row[i] - log_sum_exp(row);
        let col = logits.column(i);
        total += col[i] - log_sum_exp(&col);
    }
    -total / T::lit(2.0 * b as f64)
}

/// Loss, `∂L/∂C`, and `∂L/∂τ` for the symmetric InfoNCE.
pub fn infonce_backward<T: Real>(c: &Matrix<T>, tau: T) -> (T, Matrix<T>, T) {
    let b = c.rows();
    let logits = c.scale(tau);
    let scale = T::one() / T::lit(2.0 * b as f64);
    let mut d_logits = Matrix::zeros(b, b);
    let mut total = T::zero();
    for i in 0..b {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        total += row[i] - lse;
        for j in 0..b {
            d_logits[(i, j)] += (row[j] - lse).exp();
        }
        d_logits[(i, i)] -= T::one();
    }
    for j in 0..b {
        let col = logits.column(j);
        let lse = log_sum_exp(&col);
        total += col[j] - lse;
        for i in 0..b {
            d_logits[(i, j)] += (col[i] - lse).exp();
        }
        d_logits[(j, j)] -= T::one();
    }
    let d_logits = d_logits.scale(scale);
    let mut d_tau = T::zero();
    for (d, &x) in d_logits.as_slice().iter().zip(c.as_slice()) {
        d_tau += *d * x;
    }
    (-total * scale, d_logits.scale(tau), d_tau)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} is outside [0, 1]")));
    }
    Ok(())
}

/// InfoNCE over the dense max-mean clip matrix of already-embedded tokens.
pub fn loss_dense<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    tau: &Temperature<T>,
    eps: T,
) -> Result<LossBreakdown<T>> {
    let total = infonce(&clip_matrix_dense(audio, visual, eps)?, tau);
    Ok(LossBreakdown {
        total,
        dense_part: total,
        global_part: T::zero(),
        lambda: T::one(),
    })
}

pub fn loss_global<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    tau: &Temperature<T>,
    eps: T,
    renormalize: bool,
) -> Result<LossBreakdown<T>> {
    let total = infonce(&clip_matrix_global(audio, visual, eps, renormalize)?, tau);
    Ok(LossBreakdown {
        total,
        dense_part: T::zero(),
        global_part: total,
        lambda: T::zero(),
    })
}

/// `λ·L_dense + (1−λ)·L_global` with one shared temperature.
pub fn loss_hybrid<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    tau: &Temperature<T>,
    eps: T,
    lambda: f64,
    renormalize: bool,
) -> Result<LossBreakdown<T>> {
    check_lambda(lambda)?;
    let d = loss_dense(audio, visual, tau, eps)?.total;
    let g = loss_global(audio, visual, tau, eps, renormalize)?.total;
    let lam = T::lit(lambda);
    Ok(LossBreakdown {
        total: combine(lam, d, g),
        dense_part: d,
        global_part: g,
        lambda: lam,
    })
}

pub fn loss_dense_symmetric<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    tau: &Temperature<T>,
    eps: T,
) -> Result<LossBreakdown<T>> {
    let total = infonce(&clip_matrix_symmetric(audio, visual, eps)?, tau);
    Ok(LossBreakdown {
        total,
        dense_part: total,
        global_part: T::zero(),
        lambda: T::one(),
    })
}

/// Loss of embedded tokens under `cfg`, without any projection heads.
pub fn loss_for<T: Real>(
    audio: &[TokenSet<T>],
    visual: &[TokenSet<T>],
    tau: &Temperature<T>,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    let eps = T::lit(cfg.eps);
    match cfg.objective {
        Objective::Dense => loss_dense(audio, visual, tau, eps),
        Objective::Global => loss_global(audio, visual, tau, eps, cfg.renormalize_global),
        Objective::Hybrid => loss_hybrid(audio, visual, tau, eps, cfg.lambda, cfg.renormalize_global),
        Objective::DenseSymmetric => loss_dense_symmetric(audio, visual, tau, eps),
    }
}

/// Exact at the boundaries: λ=1 returns `d`, λ=0 returns `g`.
pub(crate) fn combine<T: Real>(lambda: T, d: T, g: T) -> T {
    if lambda == T::one() {
        d
    } else if lambda == T::zero() {
        g
    } else {
        lambda * d + (T::one() - lambda) * g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{row_l2_normalize, MaskVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tau(v: f64) -> Temperature<f64> {
        Temperature::new(v).unwrap()
    }

    fn clip(values: Matrix<f64>) -> ClipSimilarityMatrix<f64> {
        ClipSimilarityMatrix::new(values, crate::aggregation::ClipKind::Dense).unwrap()
    }

    /// Direct summation of the symmetric cross-entropy.
    fn infonce_oracle(c: &Matrix<f64>, t: f64) -> f64 {
        let b = c.rows();
        let mut total = 0.0;
        for i in 0..b {
            let row_den: f64 = (0..b).map(|k| (t * c[(i, k)]).exp()).sum();
            let col_den: f64 = (0..b).map(|k| (t * c[(k, i)]).exp()).sum();
            let num = (t * c[(i, i)]).exp();
            total += (num / row_den).ln() + (num / col_den).ln();
        }
        -total / (2.0 * b as f64)
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize) -> (Vec<TokenSet<f64>>, Vec<TokenSet<f64>>) {
        let mut mat = |r: usize, c: usize| {
            row_l2_normalize(
                &Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                1e-6,
            )
        };
        let audio = (0..b)
            .map(|i| {
                let n = 3 + i % 2;
                let mut bits = vec![1u8; n];
                bits[n - 1] = (i % 2) as u8;
                TokenSet::audio(mat(n, 4), MaskVector::new(bits).unwrap()).unwrap()
            })
            .collect();
        let visual = (0..b).map(|_| TokenSet::visual(mat(5, 4))).collect();
        (audio, visual)
    }

    #[test]
    fn temperature_positive_and_clamped() {
        let t = Temperature::<f64>::new(10.0).unwrap();
        assert!((t.value() - 10.0).abs() < 1e-12);
        let t = Temperature::<f64>::new(1e4).unwrap();
        assert!((t.value() - MAX_TAU).abs() < 1e-9);
        assert!(Temperature::<f64>::new(0.0).is_err());
        let mut t = Temperature::<f64> { log_value: 7.0 };
        t.clamp();
        assert!(t.value() <= MAX_TAU + 1e-9);
    }

    #[test]
    fn infonce_closed_forms() {
        assert_eq!(infonce(&clip(Matrix::filled(1, 1, 0.3)), &tau(10.0)), 0.0);
        for b in [2, 3, 7] {
            let got = infonce(&clip(Matrix::filled(b, b, -0.4)), &tau(3.0));
            assert!((got - (b as f64).ln()).abs() < 1e-9);
        }
        let got = infonce(&clip(Matrix::identity(2)), &tau(1.0));
        let closed = (1.0 + (-1.0f64).exp()).ln();
        assert!((got - closed).abs() < 1e-9);
        assert!((infonce_oracle(&Matrix::identity(2), 1.0) - closed).abs() < 1e-12);
        assert!((closed - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn infonce_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Matrix::from_vec(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert!((infonce(&clip(c.clone()), &tau(5.0)) - infonce_oracle(&c, 5.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Matrix::from_vec(5, 5, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (loss, d, _) = infonce_backward(&c, 4.0);
        assert!((loss - infonce_oracle(&c, 4.0)).abs() < 1e-12);
        // The row-softmax term cancels along rows and the column term along
        // columns; only their sum over the whole matrix vanishes.
        let total: f64 = d.as_slice().iter().sum();
        assert!(total.abs() < 1e-12);
        let (_, d_row, _) = infonce_backward(&c.transpose(), 4.0);
        assert!(d_row.transpose().max_abs_diff(&d) < 1e-12);
        let h = 1e-6;
        for i in 0..5 {
            let shifted = |delta: f64| {
                let mut m = c.clone();
                m.row_mut(i).iter_mut().for_each(|x| *x += delta);
                infonce_oracle(&m, 4.0)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rs: f64 = d.row(i).iter().sum();
            assert!((numeric - rs).abs() < 1e-8);
        }
    }

    #[test]
    fn log_tau_gradient_for_identity_matches_central_difference() {
        let c = Matrix::<f64>::identity(2);
        let (_, _, d_tau) = infonce_backward(&c, 1.0);
        let analytic = d_tau * 1.0;
        let h = 1e-5;
        let f = |lt: f64| infonce_matrix(&c, lt.exp());
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        assert!(relative_error(analytic, numeric) < 1e-4);
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, v) = random_batch(&mut rng, 1);
        let t = tau(10.0);
        assert_eq!(loss_dense(&a, &v, &t, 1e-6).unwrap().total, 0.0);
        assert_eq!(loss_global(&a, &v, &t, 1e-6, true).unwrap().total, 0.0);

        let e0 = Matrix::from_f64_rows(&[vec![1.0, 0.0]]).unwrap();
        let e1 = Matrix::from_f64_rows(&[vec![0.0, 1.0]]).unwrap();
        let audio = vec![
            TokenSet::audio(e0.clone(), MaskVector::ones(1)).unwrap(),
            TokenSet::audio(e1.clone(), MaskVector::ones(1)).unwrap(),
        ];
        let visual = vec![TokenSet::visual(e0), TokenSet::visual(e1)];
        let d = loss_dense(&audio, &visual, &tau(1.0), 1e-6).unwrap().total;
        assert!((d - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-6);

        let same: Vec<_> = (0..3).map(|_| audio[0].clone()).collect();
        let same_v: Vec<_> = (0..3).map(|_| visual[0].clone()).collect();
        let g = loss_global(&same, &same_v, &tau(7.0), 1e-6, true).unwrap().total;
        assert!((g - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hybrid_boundaries_and_recombination() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, v) = random_batch(&mut rng, 3);
        let t = tau(6.0);
        let d = loss_dense(&a, &v, &t, 1e-6).unwrap().total;
        let g = loss_global(&a, &v, &t, 1e-6, true).unwrap().total;
        assert_eq!(loss_hybrid(&a, &v, &t, 1e-6, 1.0, true).unwrap().total, d);
        assert_eq!(loss_hybrid(&a, &v, &t, 1e-6, 0.0, true).unwrap().total, g);
        for lam in [0.25, 0.7] {
            let h = loss_hybrid(&a, &v, &t, 1e-6, lam, true).unwrap();
            assert!((h.total - (lam * d + (1.0 - lam) * g)).abs() < 1e-12);
            assert!((h.total - (h.lambda * h.dense_part + (1.0 - h.lambda) * h.global_part)).abs() < 1e-12);
        }
        assert!(matches!(loss_hybrid(&a, &v, &t, 1e-6, 1.2, true), Err(Error::Config { .. })));
    }

    proptest! {
        #[test]
        fn infonce_shift_invariant(seed in any::<u64>(), shift in -3.0f64..3.0, b in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Matrix::from_vec(b, b, (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let shifted = c.map(|x| x + shift);
            let t = tau(8.0);
            prop_assert!((infonce(&clip(c), &t) - infonce(&clip(shifted), &t)).abs() < 1e-9);
        }

        #[test]
        fn losses_invariant_to_batch_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, v) = random_batch(&mut rng, 4);
            let order = [2usize, 0, 3, 1];
            let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
            let pv: Vec<_> = order.iter().map(|&i| v[i].clone()).collect();
            let t = tau(9.0);
            for obj in Objective::ALL {
                let cfg = ObjectiveConfig::new(obj);
                let x = loss_for(&a, &v, &t, &cfg).unwrap().total;
                let y = loss_for(&pa, &pv, &t, &cfg).unwrap().total;
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
