//! Full training objective over a batch of encoded cells.
//!
//! Rows for item `i` and neighbour rank `j` sit at `i·(2k+1) + j`; negative
//! rows follow. The network runs over fixed-size row chunks, each with its
//! own dropout stream, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::BankPair;
use crate::error::{Error, Result};
use crate::losses::{eta_coefficients, total_loss_with_grads, BatchItem, LossBreakdown, LossConfig};
use crate::lspn::{ForwardCache, LspnGrads, LspnInput, LspnModel};
use crate::nn::{central_difference, scaled_relative_error, DenseMatrix, GradCheck, Real};
use crate::rng::stream;
use crate::synthesis::EncodedCell;

const CHUNK_ROWS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeKind {
    /// `(m^P_i, m^R_ĩ, d^P_i, d^R_i)`
    Prototype,
    /// `(m^P_i, m^R_i, d^P_i, d^R_ĩ)`
    Direction,
}

/// Negative sample built from batch items `item` and `partner`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Negative {
    pub item: usize,
    pub partner: usize,
    pub kind: NegativeKind,
}

pub struct Evaluation<T> {
    pub breakdown: LossBreakdown,
    pub grads: Option<LspnGrads<T>>,
    /// Mean of `w^m_{i,0}` over items and modalities.
    pub mean_w: f64,
}

fn build_input<T: Real>(
    model: &LspnModel<T>,
    banks: &BankPair,
    cells: &[&EncodedCell],
    negatives: &[Negative],
    n: usize,
) -> Result<LspnInput<T>> {
    let mut b = LspnInput::with_capacity(cells.len() * n + negatives.len(), model.config.input_width());
    for c in cells {
        if c.pc.len() < n || c.rgb.len() < n {
            return Err(Error::shape(format!(
                "cell carries {} neighbours, objective needs {n}",
                c.pc.len().min(c.rgb.len())
            )));
        }
        for j in 0..n {
            b.push_encodings(banks, &c.pc[j], &c.rgb[j])?;
        }
    }
    for neg in negatives {
        let (a, p) = (cells[neg.item], cells[neg.partner]);
        let m_pc = banks.pc.prototype(a.pc[0].prototype_idx);
        let d_pc = &a.pc[0].direction;
        match neg.kind {
            NegativeKind::Prototype => {
                b.push(m_pc, banks.rgb.prototype(p.rgb[0].prototype_idx), d_pc, &a.rgb[0].direction)?
            }
            NegativeKind::Direction => {
                b.push(m_pc, banks.rgb.prototype(a.rgb[0].prototype_idx), d_pc, &p.rgb[0].direction)?
            }
        }
    }
    Ok(b.build())
}

fn row_slice<T: Real>(m: &DenseMatrix<T>, lo: usize, hi: usize) -> DenseMatrix<T> {
    let c = m.cols();
    DenseMatrix::from_vec(hi - lo, c, m.data()[lo * c..hi * c].to_vec()).expect("in range")
}

fn chunks(rows: usize) -> Vec<(usize, usize)> {
    (0..rows.div_ceil(CHUNK_ROWS)).map(|c| (c * CHUNK_ROWS, ((c + 1) * CHUNK_ROWS).min(rows))).collect()
}

fn forward_chunked<T: Real>(
    model: &LspnModel<T>,
    input: &LspnInput<T>,
    dropout_seed: Option<u64>,
) -> Result<(Vec<T>, Vec<ForwardCache<T>>)> {
    let parts: Vec<(DenseMatrix<T>, ForwardCache<T>)> = chunks(input.rows())
        .into_par_iter()
        .enumerate()
        .map(|(ci, (lo, hi))| {
            let x = LspnInput { proto: row_slice(&input.proto, lo, hi), dir: row_slice(&input.dir, lo, hi) };
            match dropout_seed {
                Some(seed) => model.forward_batch(&x, Some(&mut stream(seed, &[ci as u64]))),
                None => model.forward_batch::<rand_chacha::ChaCha8Rng>(&x, None),
            }
        })
        .collect::<Result<_>>()?;
    let mut w = Vec::with_capacity(input.rows() * 2);
    let mut caches = Vec::with_capacity(parts.len());
    for (wc, cache) in parts {
        w.extend_from_slice(wc.data());
        caches.push(cache);
    }
    Ok((w, caches))
}

fn add_grads<T: Real>(into: &mut LspnGrads<T>, from: &LspnGrads<T>) {
    let pairs = into
        .proto_branch
        .iter_mut()
        .chain(into.dir_branch.iter_mut())
        .chain(into.head.iter_mut())
        .chain(std::iter::once(&mut into.output))
        .zip(from.proto_branch.iter().chain(&from.dir_branch).chain(&from.head).chain(std::iter::once(&from.output)));
    for (a, b) in pairs {
        for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
            *x = *x + *y;
        }
        for (x, y) in a.bias.iter_mut().zip(&b.bias) {
            *x = *x + *y;
        }
    }
}

/// Loss of the whole objective on `cells` (and `negatives`), optionally with
/// the gradient w.r.t. every model parameter including `log σ` and the l1
/// penalty. Dropout is active iff `dropout_seed` is set.
pub fn evaluate<T: Real>(
    model: &LspnModel<T>,
    banks: &BankPair,
    cells: &[&EncodedCell],
    negatives: &[Negative],
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
    want_grads: bool,
) -> Result<Evaluation<T>> {
    let n = cfg.neighbors();
    if cells.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let input = build_input(model, banks, cells, negatives, n)?;
    let (w, caches) = forward_chunked(model, &input, dropout_seed)?;
    let sigma = model.sigma();

    let mut batch = Vec::with_capacity(cells.len());
    let mut mean_w = 0.0;
    for (i, c) in cells.iter().enumerate() {
        let mut l = Vec::with_capacity(n);
        let mut s_sum = Vec::with_capacity(n);
        for j in 0..n {
            let r = i * n + j;
            let (sp, sr) = (T::of(c.pc[j].distance as f64), T::of(c.rgb[j].distance as f64));
            l.push(w[2 * r] * sp * sigma[0] + w[2 * r + 1] * sr * sigma[1]);
            s_sum.push(sp + sr);
        }
        let w0 = [w[2 * i * n], w[2 * i * n + 1]];
        mean_w += (w0[0] + w0[1]).as_f64() / 2.0;
        batch.push(BatchItem { anomalous: c.y, l, eta: eta_coefficients(cfg.eta0, &s_sum), w0 });
    }
    mean_w /= cells.len() as f64;
    let neg_base = cells.len() * n;
    let neg_w: Vec<[T; 2]> = (0..negatives.len()).map(|q| [w[2 * (neg_base + q)], w[2 * (neg_base + q) + 1]]).collect();

    let l1 = model.l1_norm();
    let (breakdown, lg) = total_loss_with_grads(&batch, &neg_w, cfg, l1)?;
    if !want_grads {
        return Ok(Evaluation { breakdown, grads: None, mean_w });
    }

    let rows = input.rows();
    let mut d_w = vec![T::zero(); rows * 2];
    let mut d_sigma = [T::zero(); 2];
    for (i, c) in cells.iter().enumerate() {
        for j in 0..n {
            let r = i * n + j;
            let dl = lg.dl[i][j];
            if dl == T::zero() {
                continue;
            }
            let s = [T::of(c.pc[j].distance as f64), T::of(c.rgb[j].distance as f64)];
            for m in 0..2 {
                d_w[2 * r + m] = d_w[2 * r + m] + dl * s[m] * sigma[m];
                d_sigma[m] = d_sigma[m] + dl * w[2 * r + m] * s[m];
            }
        }
        for m in 0..2 {
            d_w[2 * i * n + m] = d_w[2 * i * n + m] + lg.dw0[i][m];
        }
    }
    for (q, d) in lg.dneg.iter().enumerate() {
        d_w[2 * (neg_base + q)] = d_w[2 * (neg_base + q)] + d[0];
        d_w[2 * (neg_base + q) + 1] = d_w[2 * (neg_base + q) + 1] + d[1];
    }

    let partial: Vec<LspnGrads<T>> = chunks(rows)
        .into_par_iter()
        .zip(caches.par_iter())
        .map(|((lo, hi), cache)| {
            let mut g = model.zero_grads();
            let dw = DenseMatrix::from_vec(hi - lo, 2, d_w[2 * lo..2 * hi].to_vec()).expect("sized");
            model.backward_batch(cache, &dw, &mut g);
            g
        })
        .collect();
    let mut grads = model.zero_grads();
    for g in &partial {
        add_grads(&mut grads, g);
    }
    grads.log_sigma = [d_sigma[0] * sigma[0], d_sigma[1] * sigma[1]];
    grads.add_l1(model, T::of(cfg.l1_weight));
    Ok(Evaluation { breakdown, grads: Some(grads), mean_w })
}

/// Denominator floor of [`gradient_check`] as a fraction of the largest
/// numeric gradient component; below it, differences are finite-difference
/// rounding noise rather than gradient error.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Compares the analytic gradient of the full objective, computed at
/// precision `T`, against `f64` central differences with step `h` around the
/// parameters of `model`.
pub fn gradient_check<T: Real>(
    model: &LspnModel<f64>,
    banks: &BankPair,
    cells: &[&EncodedCell],
    negatives: &[Negative],
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
    h: f64,
) -> Result<GradCheck> {
    let analytic: Vec<f64> = evaluate(&model.cast::<T>(), banks, cells, negatives, cfg, dropout_seed, true)?
        .grads
        .expect("requested")
        .flat()
        .iter()
        .map(|g| g.as_f64())
        .collect();
    let mut probe = model.clone();
    let mut failure = None;
    let numeric = central_difference(
        |p| {
            probe.set_flat_params(p).expect("same length");
            match evaluate(&probe, banks, cells, negatives, cfg, dropout_seed, false) {
                Ok(ev) => ev.breakdown.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &model.flat_params(),
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(scaled_relative_error(&analytic, &numeric, GRAD_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{build_banks, CoresetParams};
    use crate::features::{gen_synthetic_dataset, SynthConfig};
    use crate::geometry::fit_normalizer;
    use crate::lspn::{init_model, LspnConfig};
    use crate::synthesis::{build_training_pool, SynthesisConfig};

    #[test]
    fn full_objective_gradients() {
        let data = SynthConfig { n_train: 6, n_test: 1, ..Default::default() };
        let ds = gen_synthetic_dataset(&data, 3).unwrap();
        let banks = build_banks(&ds.train, &CoresetParams::default()).unwrap();
        let norm = fit_normalizer(&ds.train, &banks).unwrap().normalizer;
        let k = 2;
        let pool =
            build_training_pool(&ds.train, &banks, &norm, &SynthesisConfig { n_aug: 6, ..Default::default() }, k, 3)
                .unwrap();
        let mut cells: Vec<&EncodedCell> = pool.all_cells().filter(|c| c.y).take(3).collect();
        cells.extend(pool.all_cells().filter(|c| !c.y).take(5));
        let negatives = [
            Negative { item: 3, partner: 4, kind: NegativeKind::Prototype },
            Negative { item: 5, partner: 6, kind: NegativeKind::Direction },
        ];
        let cfg = LossConfig { k, m0: 2.0, ..Default::default() };
        let model = init_model(&LspnConfig { dropout: 0.3, ..LspnConfig::desk(8, 8) }, 1).unwrap().cast::<f64>();
        let g64 = gradient_check::<f64>(&model, &banks, &cells, &negatives, &cfg, Some(9), 1e-5).unwrap();
        let g32 = gradient_check::<f32>(&model, &banks, &cells, &negatives, &cfg, Some(9), 1e-5).unwrap();
        assert!(g64.max_rel_error < 1e-6, "{g64:?}");
        assert!(g32.max_rel_error < 1e-3, "{g32:?}");
    }
}
