use rand::Rng;

use super::params::join;
use super::{relu, relu_backward, Matrix, Parameterized, Real};
use crate::{Error, Result};

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Linear<T> {
    /// He-uniform weights, bias uniform in `±1/√in`.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let w_bound = (6.0 / input.max(1) as f64).sqrt();
        let b_bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            weight: Matrix::from_fn(output, input, |_, _| {
                T::of((rng.random::<f64>() * 2.0 - 1.0) * w_bound)
            }),
            bias: Matrix::from_fn(1, output, |_, _| T::of((rng.random::<f64>() * 2.0 - 1.0) * b_bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "linear",
                format!("input has {} columns, layer expects {}", x.cols(), self.input_dim()),
            ));
        }
        let mut y = Matrix::zeros(x.rows(), self.output_dim());
        for r in 0..y.rows() {
            y.row_mut(r).copy_from_slice(self.bias.row(0));
        }
        Matrix::gemm_into(x, false, &self.weight, true, T::one(), T::one(), &mut y);
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) -> Matrix<T> {
        Matrix::gemm_into(dy, true, x, false, T::one(), T::one(), &mut grad.weight);
        grad.bias.add_assign(&dy.column_sums());
        dy.matmul(&self.weight)
    }

    /// Parameter gradients only, for inputs that need no gradient.
    pub fn backward_params(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) {
        Matrix::gemm_into(dy, true, x, false, T::one(), T::one(), &mut grad.weight);
        grad.bias.add_assign(&dy.column_sums());
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn tensors<'a>(&'a self, prefix: &str, _buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn tensors_mut<'a>(&'a mut self, _buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Per-feature batch normalization over the rows of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
    pub running_mean: Matrix<T>,
    pub running_var: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm<T> {
    pub const EPS: f64 = 1e-7;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Matrix::filled(1, features, T::one()),
            beta: Matrix::zeros(1, features),
            running_mean: Matrix::zeros(1, features),
            running_var: Matrix::filled(1, features, T::one()),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.cols()
    }

    /// Normalizes with batch statistics when `train`, otherwise with the
    /// running estimates.
    pub fn forward(&self, x: &Matrix<T>, train: bool) -> (Matrix<T>, BatchNormCache<T>) {
        let (n, c) = x.shape();
        let eps = T::of(Self::EPS);
        let (mean, var) = if train && n > 0 {
            let inv_n = T::one() / T::of(n as f64);
            let mut mean = vec![T::zero(); c];
            for r in 0..n {
                for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); c];
            for r in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_n);
            (mean, var)
        } else {
            (self.running_mean.row(0).to_vec(), self.running_var.row(0).to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut y = Matrix::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                let h = (x.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                y.set(r, j, self.gamma.get(0, j) * h + self.beta.get(0, j));
            }
        }
        let cache = BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train: train && n > 0,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, dy: &Matrix<T>, grad: &mut BatchNorm<T>) -> Matrix<T> {
        let (n, c) = dy.shape();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for r in 0..n {
            for j in 0..c {
                dgamma[j] += dy.get(r, j) * cache.xhat.get(r, j);
                dbeta[j] += dy.get(r, j);
            }
        }
        for j in 0..c {
            let g = grad.gamma.get(0, j) + dgamma[j];
            grad.gamma.set(0, j, g);
            let b = grad.beta.get(0, j) + dbeta[j];
            grad.beta.set(0, j, b);
        }
        let mut dx = Matrix::zeros(n, c);
        if cache.train {
            let nf = T::of(n as f64);
            for j in 0..c {
                let gamma = self.gamma.get(0, j);
                // Σ dxhat and Σ dxhat·xhat with dxhat = dy·γ
                let sum_dxhat = dbeta[j] * gamma;
                let sum_dxhat_xhat = dgamma[j] * gamma;
                for r in 0..n {
                    let dxhat = dy.get(r, j) * gamma;
                    let v = cache.inv_std[j] / nf
                        * (nf * dxhat - sum_dxhat - cache.xhat.get(r, j) * sum_dxhat_xhat);
                    dx.set(r, j, v);
                }
            }
        } else {
            for r in 0..n {
                for j in 0..c {
                    dx.set(r, j, dy.get(r, j) * self.gamma.get(0, j) * cache.inv_std[j]);
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn commit(&mut self, cache: &BatchNormCache<T>) {
        if !cache.train {
            return;
        }
        let n = cache.xhat.rows();
        let m = T::of(Self::MOMENTUM);
        let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
        for j in 0..self.features() {
            let rm = (T::one() - m) * self.running_mean.get(0, j) + m * cache.batch_mean[j];
            let rv = (T::one() - m) * self.running_var.get(0, j) + m * cache.batch_var[j] * unbias;
            self.running_mean.set(0, j, rm);
            self.running_var.set(0, j, rv);
        }
    }
}

impl<T: Real> Parameterized<T> for BatchNorm<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        if buffers {
            out.push((join(prefix, "running_mean"), &self.running_mean));
            out.push((join(prefix, "running_var"), &self.running_var));
        }
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
        if buffers {
            out.push(&mut self.running_mean);
            out.push(&mut self.running_var);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer<T> {
    pub linear: Linear<T>,
    pub norm: Option<BatchNorm<T>>,
    pub relu: bool,
}

/// Stack of linear layers, each optionally followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<MlpLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    inputs: Vec<Matrix<T>>,
    pre_activation: Vec<Matrix<T>>,
    norms: Vec<Option<BatchNormCache<T>>>,
}

impl<T: Real> Mlp<T> {
    /// `dims = [in, h1, …, out]`. Hidden layers get ReLU (and batch norm if
    /// requested); the last layer gets them only when `activate_last`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activate_last: bool, batch_norm: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let count = dims.len() - 1;
        let layers = (0..count)
            .map(|i| {
                let activated = i + 1 < count || activate_last;
                MlpLayer {
                    linear: Linear::new(dims[i], dims[i + 1], rng),
                    norm: (activated && batch_norm).then(|| BatchNorm::new(dims[i + 1])),
                    relu: activated,
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].linear.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").linear.output_dim()
    }

    pub fn forward(&self, x: &Matrix<T>, train: bool) -> Result<(Matrix<T>, MlpCache<T>)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activation: Vec::with_capacity(self.layers.len()),
            norms: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layer.linear.forward(&h)?;
            let norm_cache = layer.norm.as_ref().map(|bn| {
                let (y, c) = bn.forward(&z, train);
                z = y;
                c
            });
            let out = if layer.relu { relu(&z) } else { z.clone() };
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre_activation.push(z);
            cache.norms.push(norm_cache);
        }
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Matrix<T>, grad: &mut Mlp<T>) -> Matrix<T> {
        let mut d = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = &mut grad.layers[i];
            if layer.relu {
                d = relu_backward(&cache.pre_activation[i], &d);
            }
            if let (Some(bn), Some(c)) = (&layer.norm, &cache.norms[i]) {
                d = bn.backward(c, &d, g.norm.as_mut().expect("matching structure"));
            }
            d = layer.linear.backward(&cache.inputs[i], &d, &mut g.linear);
        }
        d
    }

    /// Parameter gradients without propagating to the input.
    pub fn backward_params(&self, cache: &MlpCache<T>, dy: &Matrix<T>, grad: &mut Mlp<T>) {
        let mut d = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = &mut grad.layers[i];
            if layer.relu {
                d = relu_backward(&cache.pre_activation[i], &d);
            }
            if let (Some(bn), Some(c)) = (&layer.norm, &cache.norms[i]) {
                d = bn.backward(c, &d, g.norm.as_mut().expect("matching structure"));
            }
            if i == 0 {
                layer.linear.backward_params(&cache.inputs[i], &d, &mut g.linear);
            } else {
                d = layer.linear.backward(&cache.inputs[i], &d, &mut g.linear);
            }
        }
    }

    pub fn commit(&mut self, cache: &MlpCache<T>) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.norms) {
            if let (Some(bn), Some(c)) = (layer.norm.as_mut(), c) {
                bn.commit(c);
            }
        }
    }
}

impl<T: Real> Parameterized<T> for Mlp<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            layer.linear.tensors(&join(&p, "linear"), buffers, out);
            if let Some(bn) = &layer.norm {
                bn.tensors(&join(&p, "norm"), buffers, out);
            }
        }
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        for layer in &mut self.layers {
            layer.linear.tensors_mut(buffers, out);
            if let Some(bn) = &mut layer.norm {
                bn.tensors_mut(buffers, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{flatten_params, grad_check, load_flat_params, zeroed};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weighted_sum(y: &Matrix<f64>) -> f64 {
        y.data().iter().enumerate().map(|(i, v)| v * (0.3 + 0.1 * (i % 7) as f64)).sum()
    }

    fn weights_like(y: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(y.rows(), y.cols(), |r, c| 0.3 + 0.1 * ((r * y.cols() + c) % 7) as f64)
    }

    #[test]
    fn linear_examples() {
        let x = Matrix::<f64>::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -1.0]]);
        let id = Linear {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        };
        assert_eq!(id.forward(&x).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::<f64>::new(3, 2, &mut rng);
        let y = l.forward(&Matrix::zeros(4, 3)).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), l.bias.row(0));
        }
        assert!(l.forward(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Linear::<f64>::new(4, 3, &mut rng);
        let x = Matrix::<f64>::from_fn(5, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
        let y = layer.forward(&x).unwrap();
        let mut grad = zeroed(&layer);
        let dx = layer.backward(&x, &weights_like(&y), &mut grad);

        let p = flatten_params(&layer);
        let f = |q: &[f64]| {
            let mut l = layer.clone();
            load_flat_params(&mut l, q).unwrap();
            weighted_sum(&l.forward(&x).unwrap())
        };
        assert!(grad_check(f, &p, &flatten_params(&grad), 1e-5).passed(1e-4));

        let fx = |q: &[f64]| weighted_sum(&layer.forward(&Matrix::from_vec(5, 4, q.to_vec()).unwrap()).unwrap());
        assert!(grad_check(fx, x.data(), dx.data(), 1e-5).passed(1e-4));
    }

    #[test]
    fn batch_norm_train_statistics() {
        let bn = BatchNorm::<f64>::new(3);
        let x = Matrix::<f64>::from_fn(64, 3, |r, c| ((r * 3 + c) as f64 * 0.713).sin() * (c + 1) as f64 + c as f64);
        let (y, _) = bn.forward(&x, true);
        for j in 0..3 {
            let col: Vec<f64> = (0..64).map(|r| y.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batch_norm_gradients_and_commit() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = Matrix::from_rows(&[&[1.3, 0.7]]);
        bn.beta = Matrix::from_rows(&[&[0.1, -0.2]]);
        let x = Matrix::<f64>::from_fn(6, 2, |r, c| ((r * 2 + c) as f64 * 1.1).cos());
        for train in [true, false] {
            let (y, cache) = bn.forward(&x, train);
            let mut grad = zeroed(&bn);
            let dx = bn.backward(&cache, &weights_like(&y), &mut grad);
            let fx = |q: &[f64]| weighted_sum(&bn.forward(&Matrix::from_vec(6, 2, q.to_vec()).unwrap(), train).0);
            assert!(grad_check(fx, x.data(), dx.data(), 1e-5).passed(1e-4), "train={train}");
            let p = flatten_params(&bn);
            let fp = |q: &[f64]| {
                let mut b = bn.clone();
                load_flat_params(&mut b, q).unwrap();
                weighted_sum(&b.forward(&x, train).0)
            };
            assert!(grad_check(fp, &p, &flatten_params(&grad), 1e-5).passed(1e-4));
        }
        let (_, cache) = bn.forward(&x, true);
        bn.commit(&cache);
        assert_ne!(bn.running_mean, Matrix::zeros(1, 2));
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::<f64>::new(&[3, 6, 5, 2], false, false, &mut rng);
        let x = Matrix::<f64>::from_fn(7, 3, |r, c| ((r * 3 + c) as f64 * 0.917).sin());
        let (y, cache) = mlp.forward(&x, false).unwrap();
        let mut grad = zeroed(&mlp);
        let dx = mlp.backward(&cache, &weights_like(&y), &mut grad);
        let p = flatten_params(&mlp);
        let f = |q: &[f64]| {
            let mut m = mlp.clone();
            load_flat_params(&mut m, q).unwrap();
            weighted_sum(&m.forward(&x, false).unwrap().0)
        };
        let r = grad_check(f, &p, &flatten_params(&grad), 1e-5);
        assert!(r.passed(1e-4), "{r:?}");
        let fx = |q: &[f64]| weighted_sum(&mlp.forward(&Matrix::from_vec(7, 3, q.to_vec()).unwrap(), false).unwrap().0);
        assert!(grad_check(fx, x.data(), dx.data(), 1e-5).passed(1e-4));

        let mut grad2 = zeroed(&mlp);
        mlp.backward_params(&cache, &weights_like(&y), &mut grad2);
        assert_eq!(grad2, grad);
    }

    #[test]
    fn mlp_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::<f32>::new(&[4, 8, 1], false, true, &mut rng);
        assert!(mlp.layers[0].relu && mlp.layers[0].norm.is_some());
        assert!(!mlp.layers[1].relu && mlp.layers[1].norm.is_none());
        let names: Vec<String> = mlp.named_tensors(true).into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "0.linear.weight",
                "0.linear.bias",
                "0.norm.gamma",
                "0.norm.beta",
                "0.norm.running_mean",
                "0.norm.running_var",
                "1.linear.weight",
                "1.linear.bias"
            ]
        );
        assert_eq!(mlp.named_tensors(false).len(), 6);
    }
}
