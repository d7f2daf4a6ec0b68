/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Central differences of `f` around `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: None, checked: analytic.len() };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let err = (a - n).abs() / denom;
        if !(err <= worst.max_rel_error) {
            worst.max_rel_error = err;
            worst.worst_index = Some(i);
        }
    }
    worst
}

/// Like [`max_relative_error`], but the denominator never drops below
/// `floor · max_i |n_i|`.
pub fn scaled_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: None, checked: analytic.len() };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor * scale).max(1e-8);
        let err = (a - n).abs() / denom;
        if !(err <= worst.max_rel_error) {
            worst.max_rel_error = err;
            worst.worst_index = Some(i);
        }
    }
    worst
}

/// Compare `analytic` against central differences of `loss` at `params`.
pub fn backprop_check<F>(analytic: &[f64], params: &[f64], loss: F, h: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = central_difference(loss, params, h);
    max_relative_error(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DenseMatrix, Linear, LinearGrad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn squared_loss(layer: &Linear<f64>, x: &DenseMatrix<f64>, t: &DenseMatrix<f64>) -> f64 {
        let y = layer.forward_batch(x).unwrap();
        y.data().iter().zip(t.data()).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
    }

    fn flatten(layer: &Linear<f64>) -> Vec<f64> {
        let mut p = layer.weight.data().to_vec();
        p.extend_from_slice(&layer.bias);
        p
    }

    fn unflatten(layer: &mut Linear<f64>, p: &[f64]) {
        let nw = layer.weight.data().len();
        layer.weight.data_mut().copy_from_slice(&p[..nw]);
        layer.bias.copy_from_slice(&p[nw..]);
    }

    fn check(layer: &Linear<f64>, x: &DenseMatrix<f64>, t: &DenseMatrix<f64>) -> GradCheck {
        let y = layer.forward_batch(x).unwrap();
        let mut dy = y.clone();
        for (d, b) in dy.data_mut().iter_mut().zip(t.data()) {
            *d -= *b;
        }
        let mut g = LinearGrad::zeros_like(layer);
        layer.backward_batch(x, &dy, &mut g);
        let mut analytic = g.weight.data().to_vec();
        analytic.extend_from_slice(&g.bias);
        let mut probe = layer.clone();
        backprop_check(
            &analytic,
            &flatten(layer),
            |p| {
                unflatten(&mut probe, p);
                squared_loss(&probe, x, t)
            },
            1e-5,
        )
    }

    #[test]
    fn linear_squared_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = Linear::<f64>::kaiming_uniform(5, 3, &mut rng);
        let x = DenseMatrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let res = check(&layer, &x, &t);
        assert!(res.max_rel_error < 1e-5, "{res:?}");
    }

    #[test]
    fn degenerate_zero_case_is_finite() {
        let layer = Linear::<f64>::zeros(3, 2);
        let x = DenseMatrix::zeros(2, 3);
        let t = DenseMatrix::zeros(2, 2);
        let res = check(&layer, &x, &t);
        assert!(res.max_rel_error.is_finite());
        assert_eq!(res.max_rel_error, 0.0);
    }
}
