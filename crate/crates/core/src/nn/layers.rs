use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::dot;
use super::{DenseMatrix, Real};
use crate::error::{Error, Result};

/// Affine map `y = W·x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
}

/// Gradient buffers shaped like a [`Linear`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
}

/// Linear layer followed by ReLU and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBlock<T> {
    pub linear: Linear<T>,
    pub dropout_rate: f64,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: DenseMatrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!("bias of length {} for {} outputs", bias.len(), weight.rows())));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: DenseMatrix::zeros(outputs, inputs), bias: vec![T::zero(); outputs] }
    }

    /// PyTorch's default `nn.Linear` initialisation: weights and biases drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn kaiming_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = if inputs == 0 { 0.0 } else { 1.0 / (inputs as f64).sqrt() };
        let mut draw = || T::of(rng.random_range(-1.0..=1.0) * bound);
        let weight: Vec<T> = (0..inputs * outputs).map(|_| draw()).collect();
        let bias: Vec<T> = (0..outputs).map(|_| draw()).collect();
        Self { weight: DenseMatrix::from_vec(outputs, inputs, weight).expect("sized above"), bias }
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.iter().map(|b| U::of(b.as_f64())).collect() }
    }

    /// Row-batched forward: `X·Wᵀ + b` for `X` of shape `n × in`.
    pub fn forward_batch(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if x.cols() != self.inputs() {
            return Err(Error::shape(format!("linear layer expects {} inputs, got {}", self.inputs(), x.cols())));
        }
        let mut out = DenseMatrix::zeros(x.rows(), self.outputs());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = out.row_mut(r);
            for (o, y) in yr.iter_mut().enumerate() {
                *y = dot(self.weight.row(o), xr) + self.bias[o];
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dX`.
    pub fn backward_batch(
        &self,
        x: &DenseMatrix<T>,
        d_out: &DenseMatrix<T>,
        grad: &mut LinearGrad<T>,
    ) -> DenseMatrix<T> {
        let mut dx = DenseMatrix::zeros(x.rows(), self.inputs());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dyr = d_out.row(r);
            let dxr = dx.row_mut(r);
            for (o, &dy) in dyr.iter().enumerate() {
                if dy == T::zero() {
                    continue;
                }
                grad.bias[o] = grad.bias[o] + dy;
                let w = self.weight.row(o);
                let gw = grad.weight.row_mut(o);
                for i in 0..xr.len() {
                    gw[i] = gw[i] + dy * xr[i];
                    dxr[i] = dxr[i] + dy * w[i];
                }
            }
        }
        dx
    }
}

impl<T: Real> LinearGrad<T> {
    pub fn zeros_like(layer: &Linear<T>) -> Self {
        Self { weight: DenseMatrix::zeros(layer.outputs(), layer.inputs()), bias: vec![T::zero(); layer.outputs()] }
    }
}

/// Forward cache for one [`LinearBlock`].
#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T> {
    pub input: DenseMatrix<T>,
    pub pre: DenseMatrix<T>,
    pub mask: Option<DenseMatrix<T>>,
}

impl<T: Real> LinearBlock<T> {
    pub fn cast<U: Real>(&self) -> LinearBlock<U> {
        LinearBlock { linear: self.linear.cast(), dropout_rate: self.dropout_rate }
    }

    /// Forward pass over a batch; dropout is applied only when `rng` is given.
    pub(crate) fn forward_batch<R: Rng + ?Sized>(
        &self,
        x: DenseMatrix<T>,
        rng: Option<&mut R>,
    ) -> Result<(DenseMatrix<T>, BlockCache<T>)> {
        let pre = self.linear.forward_batch(&x)?;
        let mut out = pre.clone();
        for v in out.data_mut() {
            *v = v.max(T::zero());
        }
        let mask = match rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let (dropped, mask) = dropout_forward(out.data(), self.dropout_rate, rng, true)?;
                out.data_mut().copy_from_slice(&dropped);
                Some(DenseMatrix::from_vec(out.rows(), out.cols(), mask)?)
            }
            _ => None,
        };
        Ok((out, BlockCache { input: x, pre, mask }))
    }

    pub(crate) fn backward_batch(
        &self,
        cache: &BlockCache<T>,
        mut d_out: DenseMatrix<T>,
        grad: &mut LinearGrad<T>,
    ) -> DenseMatrix<T> {
        if let Some(mask) = &cache.mask {
            for (d, m) in d_out.data_mut().iter_mut().zip(mask.data()) {
                *d = *d * *m;
            }
        }
        for (d, z) in d_out.data_mut().iter_mut().zip(cache.pre.data()) {
            if *z <= T::zero() {
                *d = T::zero();
            }
        }
        self.linear.backward_batch(&cache.input, &d_out, grad)
    }
}

pub fn linear_forward<T: Real>(layer: &Linear<T>, x: &[T]) -> Result<Vec<T>> {
    let mut y = layer.weight.matvec(x)?;
    for (v, b) in y.iter_mut().zip(&layer.bias) {
        *v = *v + *b;
    }
    Ok(y)
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.max(T::zero())).collect()
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Real>(x: &[T], grad: &[T]) -> Vec<T> {
    x.iter().zip(grad).map(|(x, g)| if *x > T::zero() { *g } else { T::zero() }).collect()
}

/// `exp(tanh(x))`, bounded in `[1/e, e]` and equal to 1 at the origin.
pub fn exp_tanh<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.tanh().exp()).collect()
}

pub fn exp_tanh_backward<T: Real>(x: &[T], grad: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad)
        .map(|(x, g)| {
            let t = x.tanh();
            *g * t.exp() * (T::one() - t * t)
        })
        .collect()
}

/// Inverted dropout. Returns the output and the multiplicative mask (0 or
/// `1/(1-rate)` per entry). Inference mode is the identity with a unit mask.
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    x: &[T],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1]")));
    }
    if !training || rate == 0.0 {
        return Ok((x.to_vec(), vec![T::one(); x.len()]));
    }
    if rate >= 1.0 {
        return Err(Error::config("dropout rate 1 drops every activation"));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let out = x.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let layer = Linear::new(DenseMatrix::<f64>::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_forward(&layer, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn forced_arithmetic() {
        let layer = Linear::new(DenseMatrix::<f64>::from_vec(1, 2, vec![1.0, 1.0]).unwrap(), vec![1.0]).unwrap();
        assert_eq!(linear_forward(&layer, &[2.0, 3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Linear::<f64>::kaiming_uniform(3, 4, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = linear_forward(&layer, &x).unwrap();
        for o in 0..4 {
            let mut acc = layer.bias[o];
            for i in 0..3 {
                acc += layer.weight.get(o, i) * x[i];
            }
            assert!((acc - y[o]).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let layer = Linear::<f32>::zeros(3, 2);
        assert!(matches!(linear_forward(&layer, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f32> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn exp_tanh_examples() {
        assert_eq!(exp_tanh(&[0.0f64])[0], 1.0);
        assert!((exp_tanh(&[50.0f64])[0] - std::f64::consts::E).abs() < 1e-6);
        let h = 1e-4;
        let fd = (exp_tanh(&[0.3 + h])[0] - exp_tanh(&[0.3 - h])[0]) / (2.0 * h);
        let an = exp_tanh_backward(&[0.3f64], &[1.0])[0];
        assert!(((fd - an) / an).abs() < 1e-5);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![1.0f32, -2.0, 3.0];
        assert_eq!(dropout_forward(&x, 0.5, &mut rng, false).unwrap().0, x);
        let (y, m) = dropout_forward(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(m.iter().all(|v| *v == 1.0));
        assert!(matches!(dropout_forward(&x, 1.0, &mut rng, true), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let x: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let (y, mask) = dropout_forward(&x, 0.5, &mut rng, true).unwrap();
        let survivors = mask.iter().filter(|m| **m > 0.0).count() as f64 / n as f64;
        assert!((0.48..=0.52).contains(&survivors), "{survivors}");
        let mean_x = x.iter().sum::<f64>() / n as f64;
        let mean_y = y.iter().sum::<f64>() / n as f64;
        assert!(((mean_y - mean_x) / mean_x).abs() < 0.02);
    }
}
