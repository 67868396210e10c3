//! Linear → LayerNorm → Linear projection heads with a cached forward pass and
//! exact backward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_tn, Matrix, Real};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visits named parameter buffers in a fixed order.
pub trait ParamSet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<T>
    where
        T: Copy,
    {
        let mut out = Vec::new();
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    /// Overwrites all buffers from a flat vector produced by [`ParamSet::flatten`].
    fn assign_flat(&mut self, flat: &[T])
    where
        T: Copy,
    {
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter vector length");
    }

    /// `(name, length)` for every buffer, in visit order.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, s| out.push((name.to_string(), s.len())));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    /// `[d_in × d_hidden]`
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    /// `[d_hidden × d_out]`
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Intermediates of one head evaluation, consumed by [`ProjectionHead::backward`].
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input: Matrix<T>,
    normalized_hidden: Matrix<T>,
    inv_std: Vec<T>,
    ln_out: Matrix<T>,
}

impl<T: Real> ProjectionHead<T> {
    /// Uniform fan-in initialization for both linears; unit scale, zero shift.
    pub fn init<R: Rng>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let mut uniform = |fan_in: usize, n: usize| -> Vec<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
        };
        let w1 = Matrix::from_vec(d_in, d_hidden, uniform(d_in, d_in * d_hidden)).expect("sized");
        let b1 = uniform(d_in, d_hidden);
        let w2 = Matrix::from_vec(d_hidden, d_out, uniform(d_hidden, d_hidden * d_out)).expect("sized");
        let b2 = uniform(d_hidden, d_out);
        Self {
            w1,
            b1,
            gamma: vec![T::one(); d_hidden],
            beta: vec![T::zero(); d_hidden],
            w2,
            b2,
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_in, d_hidden),
            b1: vec![T::zero(); d_hidden],
            gamma: vec![T::zero(); d_hidden],
            beta: vec![T::zero(); d_hidden],
            w2: Matrix::zeros(d_hidden, d_out),
            b2: vec![T::zero(); d_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in(), self.d_hidden(), self.d_out())
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, tokens: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward_cached(tokens).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, tokens: &Matrix<T>) -> Result<(Matrix<T>, HeadCache<T>)> {
        if tokens.cols() != self.d_in() {
            return Err(Error::shape(
                "project",
                format!("token dim {}", self.d_in()),
                format!("token dim {}", tokens.cols()),
            ));
        }
        let n = tokens.rows();
        let dh = self.d_hidden();
        let mut hidden = matmul(tokens, &self.w1)?;
        for i in 0..n {
            for (h, &b) in hidden.row_mut(i).iter_mut().zip(&self.b1) {
                *h += b;
            }
        }

        let ln_eps = T::lit(LAYER_NORM_EPS);
        let inv_dh = T::lit(1.0 / dh as f64);
        let mut inv_std = Vec::with_capacity(n);
        let mut xhat = hidden;
        let mut ln_out = Matrix::zeros(n, dh);
        for i in 0..n {
            let row = xhat.row_mut(i);
            let mean = row.iter().copied().sum::<T>() * inv_dh;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_dh;
            let is = T::one() / (var + ln_eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
            for (k, y) in ln_out.row_mut(i).iter_mut().enumerate() {
                *y = self.gamma[k] * xhat[(i, k)] + self.beta[k];
            }
        }

        let mut out = matmul(&ln_out, &self.w2)?;
        for i in 0..n {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&self.b2) {
                *o += b;
            }
        }
        Ok((
            out,
            HeadCache {
                input: tokens.clone(),
                normalized_hidden: xhat,
                inv_std,
                ln_out,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the head input.
    pub fn backward(&self, cache: &HeadCache<T>, d_out: &Matrix<T>, grads: &mut ProjectionHead<T>) -> Result<Matrix<T>> {
        let n = cache.input.rows();
        if d_out.shape() != (n, self.d_out()) {
            return Err(Error::shape(
                "ProjectionHead::backward",
                format!("{:?}", (n, self.d_out())),
                format!("{:?}", d_out.shape()),
            ));
        }
        let dh = self.d_hidden();

        grads.w2.add_assign(&matmul_tn(&cache.ln_out, d_out)?)?;
        for row in d_out.iter_rows() {
            for (g, &d) in grads.b2.iter_mut().zip(row) {
                *g += d;
            }
        }
        let d_ln = matmul_nt_weights(d_out, &self.w2);

        let inv_dh = T::lit(1.0 / dh as f64);
        let mut d_hidden = Matrix::zeros(n, dh);
        for i in 0..n {
            let xhat = cache.normalized_hidden.row(i);
            let dy = d_ln.row(i);
            let mut dxhat = vec![T::zero(); dh];
            for k in 0..dh {
                grads.gamma[k] += dy[k] * xhat[k];
                grads.beta[k] += dy[k];
                dxhat[k] = dy[k] * self.gamma[k];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() * inv_dh;
            let mean_dx = dxhat.iter().zip(xhat).map(|(&d, &x)| d * x).sum::<T>() * inv_dh;
            let is = cache.inv_std[i];
            for (k, out) in d_hidden.row_mut(i).iter_mut().enumerate() {
                *out = is * (dxhat[k] - mean_d - xhat[k] * mean_dx);
            }
        }

        grads.w1.add_assign(&matmul_tn(&cache.input, &d_hidden)?)?;
        for row in d_hidden.iter_rows() {
            for (g, &d) in grads.b1.iter_mut().zip(row) {
                *g += d;
            }
        }
        Ok(matmul_nt_weights(&d_hidden, &self.w1))
    }
}

/// `d · wᵀ` where `w` is `[rows_w × cols_d]`.
fn matmul_nt_weights<T: Real>(d: &Matrix<T>, w: &Matrix<T>) -> Matrix<T> {
    crate::tensor::matmul_nt(d, w).expect("weight shapes checked by caller")
}

impl<T: Real> ParamSet<T> for ProjectionHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("w1", self.w1.as_slice());
        f("b1", &self.b1);
        f("gamma", &self.gamma);
        f("beta", &self.beta);
        f("w2", self.w2.as_slice());
        f("b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("w1", self.w1.as_mut_slice());
        f("b1", &mut self.b1);
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
        f("w2", self.w2.as_mut_slice());
        f("b2", &mut self.b2);
    }
}

/// Applies `head` to `tokens`.
pub fn project<T: Real>(tokens: &Matrix<T>, head: &ProjectionHead<T>) -> Result<Matrix<T>> {
    head.forward(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_scale_and_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = ProjectionHead::<f64>::init(5, 7, 3, &mut rng);
        head.gamma.iter_mut().for_each(|g| *g = 0.0);
        head.b2.iter_mut().for_each(|b| *b = 0.0);
        let out = project(&random(&mut rng, 4, 5), &head).unwrap();
        assert_eq!(out, Matrix::zeros(4, 3));
    }

    #[test]
    fn output_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = ProjectionHead::<f32>::init(6, 8, 4, &mut rng);
        for n in [1, 3, 11] {
            let x = Matrix::<f32>::filled(n, 6, 0.5);
            assert_eq!(project(&x, &head).unwrap().shape(), (n, 4));
        }
        assert!(project(&Matrix::<f32>::zeros(2, 5), &head).is_err());
    }

    #[test]
    fn matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = ProjectionHead::<f64>::init(4, 6, 3, &mut rng);
        head.gamma = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        head.beta = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = random(&mut rng, 5, 4);
        let got = project(&x, &head).unwrap();

        for i in 0..5 {
            let mut h = vec![0.0; 6];
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = head.b1[k] + (0..4).map(|j| x[(i, j)] * head.w1[(j, k)]).sum::<f64>();
            }
            let mean = h.iter().sum::<f64>() / 6.0;
            let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            let y: Vec<f64> = (0..6)
                .map(|k| head.gamma[k] * (h[k] - mean) / (var + LAYER_NORM_EPS).sqrt() + head.beta[k])
                .collect();
            for o in 0..3 {
                let z = head.b2[o] + (0..6).map(|k| y[k] * head.w2[(k, o)]).sum::<f64>();
                assert!((got[(i, o)] - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ProjectionHead::<f64>::init(3, 5, 2, &mut rng);
        let x = random(&mut rng, 4, 3);
        let weights = random(&mut rng, 4, 2);
        let loss = |h: &ProjectionHead<f64>, x: &Matrix<f64>| -> f64 {
            let out = h.forward(x).unwrap();
            out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = head.forward_cached(&x).unwrap();
        let mut grads = head.zeros_like();
        let dx = head.backward(&cache, &weights, &mut grads).unwrap();

        let h = 1e-6;
        let flat = head.flatten();
        let analytic = grads.flatten();
        for i in 0..flat.len() {
            let mut p = head.clone();
            let mut f = flat.clone();
            f[i] += h;
            p.assign_flat(&f);
            let up = loss(&p, &x);
            f[i] -= 2.0 * h;
            p.assign_flat(&f);
            let down = loss(&p, &x);
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-6, "param {i}: {numeric} vs {}", analytic[i]);
        }
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let up = loss(&head, &xp);
            xp.as_mut_slice()[i] -= 2.0 * h;
            let down = loss(&head, &xp);
            assert!(((up - down) / (2.0 * h) - dx.as_slice()[i]).abs() < 1e-6);
        }
    }
}
