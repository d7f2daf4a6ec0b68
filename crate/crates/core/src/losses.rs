//! Training loss terms over per-item metric values.
//!
//! Every term is a plain sum over the batch. Each has a value-only public
//! function and a gradient-accumulating counterpart used by the objective;
//! gradients are taken w.r.t. the metric values `l_{i,j}`, the scales
//! `w_{i,0}` and the negative-sample scales `w̃`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// `1/l` safeguard for the anomalous separation term.
pub const INV_FLOOR: f64 = 1e-8;
/// Guard on `Σ_m s^m_{i,0}` in the consistency coefficients.
pub const ETA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub k: usize,
    pub eta0: f64,
    pub m0: f64,
    pub l1_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 60.0, gamma: 8.0, mu: 20.0, k: 5, eta0: 1.2, m0: 1.0, l1_weight: 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.mu, self.l1_weight];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            return Err(Error::config(format!("m0 = {} must be positive", self.m0)));
        }
        if !(self.eta0 > 0.0) {
            return Err(Error::config("eta0 must be positive"));
        }
        Ok(())
    }

    pub fn neighbors(&self) -> usize {
        2 * self.k + 1
    }
}

/// One training position.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem<T> {
    pub anomalous: bool,
    /// `l_{i,j}` for `j = 0..=2k`.
    pub l: Vec<T>,
    /// `η_{i,j}`; index 0 is unused.
    pub eta: Vec<T>,
    /// `(w^P_{i,0}, w^R_{i,0})`.
    pub w0: [T; 2],
}

/// `η_{i,j} = η0 · Σ_m s^m_{i,j} / max(Σ_m s^m_{i,0}, 1e-8)`.
pub fn eta_coefficients<T: Real>(eta0: f64, s_sum: &[T]) -> Vec<T> {
    let base = s_sum[0].max(T::of(ETA_FLOOR));
    s_sum.iter().map(|s| T::of(eta0) * *s / base).collect()
}

/// Gradients of a loss w.r.t. its direct inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads<T> {
    pub dl: Vec<Vec<T>>,
    pub dw0: Vec<[T; 2]>,
    pub dneg: Vec<[T; 2]>,
}

impl<T: Real> LossGrads<T> {
    pub fn zeros(batch: &[BatchItem<T>], negatives: usize) -> Self {
        Self {
            dl: batch.iter().map(|b| vec![T::zero(); b.l.len()]).collect(),
            dw0: vec![[T::zero(); 2]; batch.len()],
            dneg: vec![[T::zero(); 2]; negatives],
        }
    }
}

fn sep_impl<T: Real>(batch: &[BatchItem<T>], m0: f64, mut g: Option<(&mut LossGrads<T>, T)>) -> T {
    let inv_m0 = T::of(1.0 / m0);
    let floor = T::of(INV_FLOOR);
    let mut total = T::zero();
    for (i, it) in batch.iter().enumerate() {
        let l = it.l[0];
        if !it.anomalous {
            total = total + l;
            if let Some((g, s)) = g.as_mut() {
                g.dl[i][0] = g.dl[i][0] + *s;
            }
        } else {
            let clamped = l.max(floor);
            let v = T::one() / clamped - inv_m0;
            if v > T::zero() {
                total = total + v;
                if l > floor {
                    if let Some((g, s)) = g.as_mut() {
                        g.dl[i][0] = g.dl[i][0] - *s / (l * l);
                    }
                }
            }
        }
    }
    total
}

/// `Σ_i (1−y_i)·l_{i,0} + y_i·(1/l_{i,0} − 1/m0)₊`.
pub fn sep_loss<T: Real>(batch: &[BatchItem<T>], m0: f64) -> T {
    sep_impl(batch, m0, None)
}

/// Batch bounds `(m_l, index, m_u, index)`, `None` when a class is missing
/// or `m_u ≤ 0`.
fn margin_bounds<T: Real>(batch: &[BatchItem<T>]) -> Option<(T, usize, T, usize)> {
    let mut lo: Option<(T, usize)> = None;
    let mut hi: Option<(T, usize)> = None;
    for (i, it) in batch.iter().enumerate() {
        let l = it.l[0];
        if it.anomalous {
            if lo.is_none_or(|(v, _)| l < v) {
                lo = Some((l, i));
            }
        } else if hi.is_none_or(|(v, _)| l > v) {
            hi = Some((l, i));
        }
    }
    match (lo, hi) {
        (Some((ml, a)), Some((mu, n))) if mu > T::zero() => Some((ml, a, mu, n)),
        _ => None,
    }
}

fn margin_impl<T: Real>(batch: &[BatchItem<T>], mut g: Option<(&mut LossGrads<T>, T)>) -> (T, bool) {
    let Some((ml, a_star, mu, n_star)) = margin_bounds(batch) else {
        return (T::zero(), true);
    };
    let inv = T::one() / mu;
    let mut sum = T::zero();
    let mut normal_active = 0usize;
    let mut anom_active = 0usize;
    for (i, it) in batch.iter().enumerate() {
        let l = it.l[0];
        if it.anomalous {
            let v = mu - l;
            if v > T::zero() {
                sum = sum + v;
                anom_active += 1;
                if let Some((g, s)) = g.as_mut() {
                    g.dl[i][0] = g.dl[i][0] - *s * inv;
                }
            }
        } else {
            let v = l - ml;
            if v > T::zero() {
                sum = sum + v;
                normal_active += 1;
                if let Some((g, s)) = g.as_mut() {
                    g.dl[i][0] = g.dl[i][0] + *s * inv;
                }
            }
        }
    }
    // The bounds are themselves functions of l; route their gradient to the
    // selected items so the result is the exact derivative of the loss.
    if let Some((g, s)) = g.as_mut() {
        let d_ml = -(T::of(normal_active as f64)) * inv;
        let d_mu = T::of(anom_active as f64) * inv - sum * inv * inv;
        g.dl[a_star][0] = g.dl[a_star][0] + *s * d_ml;
        g.dl[n_star][0] = g.dl[n_star][0] + *s * d_mu;
    }
    (sum * inv, false)
}

/// `(1/m_u)·Σ_i (1−y_i)(l_{i,0} − m_l)₊ + y_i(m_u − l_{i,0})₊` with batch-wise
/// `m_l = min anomalous l_{i,0}` and `m_u = max normal l_{i,0}`.
///
/// Returns `(value, skipped)`; single-class batches contribute 0.
pub fn margin_loss<T: Real>(batch: &[BatchItem<T>]) -> (T, bool) {
    margin_impl(batch, None)
}

fn consistency_impl<T: Real>(batch: &[BatchItem<T>], k: usize, mut g: Option<(&mut LossGrads<T>, T)>) -> T {
    if k == 0 {
        return T::zero();
    }
    let inv_k = T::one() / T::of(k as f64);
    let mut total = T::zero();
    for (i, it) in batch.iter().enumerate() {
        let l0 = it.l[0];
        for j in 1..=k {
            let v = it.l[j] - it.eta[j] * l0;
            if v > T::zero() {
                total = total + v;
                if let Some((g, s)) = g.as_mut() {
                    g.dl[i][j] = g.dl[i][j] + *s * inv_k;
                    g.dl[i][0] = g.dl[i][0] - *s * inv_k * it.eta[j];
                }
            }
        }
        for j in k + 1..=2 * k {
            let v = l0 - it.l[j];
            if v > T::zero() {
                total = total + v;
                if let Some((g, s)) = g.as_mut() {
                    g.dl[i][0] = g.dl[i][0] + *s * inv_k;
                    g.dl[i][j] = g.dl[i][j] - *s * inv_k;
                }
            }
        }
    }
    total * inv_k
}

/// `(1/k)·Σ_i [Σ_{j≤k} (l_{i,j} − η_{i,j} l_{i,0})₊ + Σ_{j>k} (l_{i,0} − l_{i,j})₊]`.
pub fn consistency_loss<T: Real>(batch: &[BatchItem<T>], k: usize) -> T {
    consistency_impl(batch, k, None)
}

fn scaling_impl<T: Real>(batch: &[BatchItem<T>], mut g: Option<(&mut LossGrads<T>, T)>) -> T {
    let e = T::of(std::f64::consts::E);
    let mut total = T::zero();
    for (i, it) in batch.iter().enumerate() {
        for m in 0..2 {
            let w = it.w0[m];
            if it.anomalous {
                total = total + (e - w);
                if let Some((g, s)) = g.as_mut() {
                    g.dw0[i][m] = g.dw0[i][m] - *s;
                }
            } else if w > T::one() {
                total = total + (w - T::one());
                if let Some((g, s)) = g.as_mut() {
                    g.dw0[i][m] = g.dw0[i][m] + *s;
                }
            }
        }
    }
    total
}

/// `Σ_i Σ_m (1−y_i)(w^m_{i,0} − 1)₊ + y_i(e − w^m_{i,0})`.
pub fn scaling_loss<T: Real>(batch: &[BatchItem<T>]) -> T {
    scaling_impl(batch, None)
}

fn cma_impl<T: Real>(neg: &[[T; 2]], mut g: Option<(&mut LossGrads<T>, T)>) -> T {
    let e = T::of(std::f64::consts::E);
    let mut total = T::zero();
    for (i, w) in neg.iter().enumerate() {
        for m in 0..2 {
            total = total + (e - w[m]);
            if let Some((g, s)) = g.as_mut() {
                g.dneg[i][m] = g.dneg[i][m] - *s;
            }
        }
    }
    total
}

/// `Σ_i Σ_m (e − w̃^m_{i,0})` over negative samples.
pub fn cma_loss<T: Real>(neg: &[[T; 2]]) -> T {
    cma_impl(neg, None)
}

/// Per-term values of the overall loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sep: f64,
    pub mar: f64,
    pub cns: f64,
    pub sc: f64,
    pub cma: f64,
    pub l1: f64,
    pub total: f64,
    pub mar_skipped: bool,
}

impl LossBreakdown {
    /// `sep + α·mar + β·cns + γ·sc + μ·cma + l1_weight·l1`.
    pub fn combine(cfg: &LossConfig, sep: f64, mar: f64, cns: f64, sc: f64, cma: f64, l1: f64) -> Result<Self> {
        let named = [("sep", sep), ("mar", mar), ("cns", cns), ("sc", sc), ("cma", cma), ("l1", l1)];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss(name));
        }
        let total = sep + cfg.alpha * mar + cfg.beta * cns + cfg.gamma * sc + cfg.mu * cma + cfg.l1_weight * l1;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss("total"));
        }
        Ok(Self { sep, mar, cns, sc, cma, l1, total, mar_skipped: false })
    }
}

fn check_batch<T: Real>(batch: &[BatchItem<T>], cfg: &LossConfig) -> Result<()> {
    let n = cfg.neighbors();
    match batch.iter().find(|b| b.l.len() != n || b.eta.len() != n) {
        Some(b) => {
            Err(Error::shape(format!("item carries {} metrics / {} eta values, expected {n}", b.l.len(), b.eta.len())))
        }
        None => Ok(()),
    }
}

/// Weighted overall loss. `l1_norm` is `Σ|W|` of the model.
pub fn total_loss<T: Real>(
    batch: &[BatchItem<T>],
    neg: &[[T; 2]],
    cfg: &LossConfig,
    l1_norm: T,
) -> Result<LossBreakdown> {
    check_batch(batch, cfg)?;
    let (mar, skipped) = margin_loss(batch);
    let mut out = LossBreakdown::combine(
        cfg,
        sep_loss(batch, cfg.m0).as_f64(),
        mar.as_f64(),
        consistency_loss(batch, cfg.k).as_f64(),
        scaling_loss(batch).as_f64(),
        cma_loss(neg).as_f64(),
        l1_norm.as_f64(),
    )?;
    out.mar_skipped = skipped;
    Ok(out)
}

/// Overall loss together with its gradient w.r.t. `l`, `w0` and `w̃`
/// (the l1 part is left to the caller, which owns the weights).
pub fn total_loss_with_grads<T: Real>(
    batch: &[BatchItem<T>],
    neg: &[[T; 2]],
    cfg: &LossConfig,
    l1_norm: T,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    check_batch(batch, cfg)?;
    let mut g = LossGrads::zeros(batch, neg.len());
    let sep = sep_impl(batch, cfg.m0, Some((&mut g, T::one())));
    let (mar, skipped) = margin_impl(batch, Some((&mut g, T::of(cfg.alpha))));
    let cns = consistency_impl(batch, cfg.k, Some((&mut g, T::of(cfg.beta))));
    let sc = scaling_impl(batch, Some((&mut g, T::of(cfg.gamma))));
    let cma = cma_impl(neg, Some((&mut g, T::of(cfg.mu))));
    let mut out = LossBreakdown::combine(
        cfg,
        sep.as_f64(),
        mar.as_f64(),
        cns.as_f64(),
        sc.as_f64(),
        cma.as_f64(),
        l1_norm.as_f64(),
    )?;
    out.mar_skipped = skipped;
    Ok((out, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn item(anomalous: bool, l0: f64) -> BatchItem<f64> {
        BatchItem { anomalous, l: vec![l0], eta: vec![1.2], w0: [1.0, 1.0] }
    }

    #[test]
    fn sep_examples() {
        assert!((sep_loss(&[item(false, 0.3)], 2.0) - 0.3).abs() < 1e-12);
        assert_eq!(sep_loss(&[item(true, 2.0)], 2.0), 0.0);
        assert!((sep_loss(&[item(true, 1.0)], 2.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sep_zero_metric_is_finite() {
        let v = sep_loss(&[item(true, 0.0)], 2.0);
        assert!(v.is_finite() && v > 1e7);
    }

    #[test]
    fn margin_examples() {
        let b =
            |n: [f64; 2], a: [f64; 2]| vec![item(false, n[0]), item(false, n[1]), item(true, a[0]), item(true, a[1])];
        assert_eq!(margin_loss(&b([1.0, 2.0], [3.0, 4.0])), (0.0, false));
        let (v, skipped) = margin_loss(&b([1.0, 3.0], [2.0, 4.0]));
        assert!(!skipped);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(margin_loss(&[item(false, 1.0), item(false, 2.0)]), (0.0, true));
    }

    #[test]
    fn consistency_example() {
        let it = BatchItem { anomalous: false, l: vec![1.0, 1.5, 0.8], eta: vec![0.0, 1.2, 0.0], w0: [1.0; 2] };
        assert!((consistency_loss::<f64>(&[it], 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn consistency_zero_when_within_bounds() {
        let s_sum = [1.0, 1.1, 1.3, 2.0, 2.5];
        let eta = eta_coefficients(1.2, &s_sum);
        let l: Vec<f64> = s_sum.iter().map(|s| 0.7 * s).collect();
        let it = BatchItem { anomalous: false, l, eta, w0: [1.0; 2] };
        assert_eq!(consistency_loss(&[it], 2), 0.0);
    }

    #[test]
    fn scaling_examples() {
        let mut n = item(false, 1.0);
        n.w0 = [0.9, 0.9];
        assert_eq!(scaling_loss(&[n.clone()]), 0.0);
        n.w0 = [1.3, 0.5];
        assert!((scaling_loss(&[n]) - 0.3).abs() < 1e-12);
        let mut a = item(true, 1.0);
        a.w0 = [E, E];
        assert_eq!(scaling_loss(&[a]), 0.0);
    }

    #[test]
    fn cma_examples() {
        assert_eq!(cma_loss(&[[E, E]]), 0.0);
        assert!((cma_loss(&[[1.0, 1.0]]) - 2.0 * (E - 1.0)).abs() < 1e-12);
        assert_eq!(cma_loss::<f64>(&[]), 0.0);
    }

    #[test]
    fn combine_weights() {
        let cfg = LossConfig::default();
        let b = LossBreakdown::combine(&cfg, 0.5, 0.1, 0.2, 0.3, 0.4, 0.0).unwrap();
        assert!((b.total - 23.9).abs() < 1e-9);
        let zero = LossConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, mu: 0.0, l1_weight: 0.0, ..cfg };
        assert_eq!(LossBreakdown::combine(&zero, 0.0, 3.0, 3.0, 3.0, 3.0, 3.0).unwrap().total, 0.0);
    }

    #[test]
    fn non_finite_term_is_named() {
        let err = LossBreakdown::combine(&LossConfig::default(), 0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss("mar")));
    }

    #[test]
    fn grads_match_finite_differences() {
        let cfg = LossConfig { k: 1, m0: 3.0, ..Default::default() };
        let base = vec![
            BatchItem { anomalous: false, l: vec![1.0, 1.7, 0.6], eta: vec![0.0, 1.3, 2.0], w0: [1.2, 0.8] },
            BatchItem { anomalous: false, l: vec![2.1, 2.0, 2.5], eta: vec![0.0, 1.1, 1.4], w0: [0.7, 1.6] },
            BatchItem { anomalous: true, l: vec![1.5, 1.0, 1.2], eta: vec![0.0, 1.2, 1.5], w0: [1.1, 2.0] },
            BatchItem { anomalous: true, l: vec![2.6, 3.9, 2.2], eta: vec![0.0, 1.25, 1.9], w0: [2.5, 0.5] },
        ];
        let neg = vec![[1.4, 0.9]];
        let (_, g) = total_loss_with_grads(&base, &neg, &cfg, 0.0).unwrap();
        let h = 1e-6;
        let eval = |b: &[BatchItem<f64>], n: &[[f64; 2]]| total_loss(b, n, &cfg, 0.0).unwrap().total;
        for i in 0..base.len() {
            for j in 0..3 {
                let mut p = base.clone();
                p[i].l[j] += h;
                let mut q = base.clone();
                q[i].l[j] -= h;
                let fd = (eval(&p, &neg) - eval(&q, &neg)) / (2.0 * h);
                assert!((fd - g.dl[i][j]).abs() < 1e-5, "dl[{i}][{j}] {fd} vs {}", g.dl[i][j]);
            }
            for m in 0..2 {
                let mut p = base.clone();
                p[i].w0[m] += h;
                let mut q = base.clone();
                q[i].w0[m] -= h;
                let fd = (eval(&p, &neg) - eval(&q, &neg)) / (2.0 * h);
                assert!((fd - g.dw0[i][m]).abs() < 1e-5);
            }
        }
        assert_eq!(g.dneg[0], [-20.0, -20.0]);
    }
}
