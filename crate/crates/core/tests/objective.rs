//! Loss values against hand-derived results and gradients of the full
//! objective against central differences.

use std::time::Instant;

use g2sf::bank::{build_banks, BankPair, CoresetParams};
use g2sf::features::{gen_synthetic_dataset, SynthConfig};
use g2sf::geometry::fit_normalizer;
use g2sf::losses::{
    cma_loss, consistency_loss, margin_loss, scaling_loss, sep_loss, BatchItem, LossBreakdown, LossConfig,
};
use g2sf::lspn::{init_model, LspnConfig, LspnModel};
use g2sf::objective::{gradient_check, Negative, NegativeKind};
use g2sf::synthesis::{build_training_pool, EncodedCell, SynthesisConfig};

const E: f64 = std::f64::consts::E;
const TOL: f64 = 1e-6;

fn item(anomalous: bool, l: &[f64], eta: &[f64], w0: [f64; 2]) -> BatchItem<f64> {
    BatchItem { anomalous, l: l.to_vec(), eta: eta.to_vec(), w0 }
}

fn rank0(anomalous: bool, l: f64) -> BatchItem<f64> {
    item(anomalous, &[l], &[1.0], [1.0, 1.0])
}

#[test]
fn margin_examples() {
    // m_l = 2, m_u = 3: hinges (3−2) + (3−2) over m_u.
    let batch = [rank0(false, 1.0), rank0(false, 3.0), rank0(true, 2.0), rank0(true, 4.0)];
    let (v, skipped) = margin_loss(&batch);
    assert!((v - 2.0 / 3.0).abs() < TOL);
    assert!(!skipped);

    let separated = [rank0(false, 1.0), rank0(true, 5.0)];
    assert_eq!(margin_loss(&separated).0, 0.0);

    let (v, skipped) = margin_loss(&[rank0(false, 1.0), rank0(false, 2.0)]);
    assert_eq!(v, 0.0);
    assert!(skipped);
}

#[test]
fn consistency_example() {
    // k = 1: (1.5 − 1.2·1)₊ + (1 − 0.8)₊ = 0.5
    let batch = [item(false, &[1.0, 1.5, 0.8], &[1.0, 1.2, 1.2], [1.0, 1.0])];
    assert!((consistency_loss(&batch, 1) - 0.5).abs() < TOL);
    // Every constraint satisfied.
    let ok = [item(false, &[1.0, 1.1, 1.3], &[1.0, 1.2, 1.2], [1.0, 1.0])];
    assert_eq!(consistency_loss(&ok, 1), 0.0);
    assert_eq!(consistency_loss(&batch, 0), 0.0);
}

#[test]
fn cma_and_scaling_examples() {
    assert!((cma_loss(&[[1.0, 1.0]]) - 2.0 * (E - 1.0)).abs() < TOL);
    assert!((cma_loss(&[[E, E], [1.0 / E, E]]) - (E - 1.0 / E)).abs() < TOL);
    // Normal: only the part of w above 1 counts; anomalous: distance to e.
    let batch = [item(false, &[1.0], &[1.0], [1.5, 0.5]), item(true, &[1.0], &[1.0], [1.0, E])];
    assert!((scaling_loss(&batch) - (0.5 + E - 1.0)).abs() < TOL);
}

#[test]
fn sep_examples() {
    let m0 = 3.0;
    // Normal contributes l; anomaly at m0/2 contributes 2/m0 − 1/m0.
    let v = sep_loss(&[rank0(false, 0.25), rank0(true, m0 / 2.0)], m0);
    assert!((v - (0.25 + 1.0 / m0)).abs() < TOL);
    assert_eq!(sep_loss(&[rank0(true, 2.0 * m0)], m0), 0.0);
    let floored = sep_loss(&[rank0(true, 0.0)], m0);
    assert!((floored - (1e8 - 1.0 / m0)).abs() < 1e-6 * 1e8);
}

#[test]
fn weighted_total() {
    let b = LossBreakdown::combine(&LossConfig::default(), 0.5, 0.1, 0.2, 0.3, 0.4, 0.0).unwrap();
    // 0.5 + 10·0.1 + 60·0.2 + 8·0.3 + 20·0.4
    assert!((b.total - 23.9).abs() < TOL);
}

struct Fixture {
    banks: BankPair,
    cells: Vec<EncodedCell>,
    negatives: Vec<Negative>,
    loss: LossConfig,
    model: LspnModel<f64>,
}

/// Batch of eight cells (three anomalous) with one negative of each kind.
fn fixture(seed: u64) -> Fixture {
    let data = SynthConfig { n_train: 6, n_test: 1, ..SynthConfig::default() };
    let ds = gen_synthetic_dataset(&data, seed).unwrap();
    let banks = build_banks(&ds.train, &CoresetParams::default()).unwrap();
    let norm = fit_normalizer(&ds.train, &banks).unwrap().normalizer;
    let k = 2;
    let synth = SynthesisConfig { n_aug: 6, ..SynthesisConfig::default() };
    let pool = build_training_pool(&ds.train, &banks, &norm, &synth, k, seed).unwrap();
    let mut cells: Vec<EncodedCell> = pool.all_cells().filter(|c| c.y).take(3).cloned().collect();
    assert_eq!(cells.len(), 3, "pool should contain anomalous cells");
    cells.extend(pool.all_cells().filter(|c| !c.y).take(5).cloned());
    let negatives = vec![
        Negative { item: 4, partner: 6, kind: NegativeKind::Prototype },
        Negative { item: 7, partner: 3, kind: NegativeKind::Direction },
    ];
    let loss = LossConfig { k, m0: 2.0, ..LossConfig::default() };
    let cfg = LspnConfig { dropout: 0.3, ..LspnConfig::desk(data.dims.0, data.dims.1) };
    let model = init_model(&cfg, seed + 100).unwrap().cast::<f64>();
    Fixture { banks, cells, negatives, loss, model }
}

fn check<T: g2sf::nn::Real>(fx: &Fixture, dropout: Option<u64>) -> f64 {
    let refs: Vec<&EncodedCell> = fx.cells.iter().collect();
    gradient_check::<T>(&fx.model, &fx.banks, &refs, &fx.negatives, &fx.loss, dropout, 1e-5).unwrap().max_rel_error
}

#[test]
fn full_objective_gradient_f32() {
    let t = Instant::now();
    let fx = fixture(11);
    let err = check::<f32>(&fx, Some(5));
    assert!(err < 1e-3, "f32 max relative error {err:e}");
    assert!(t.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn full_objective_gradient_f64() {
    let t = Instant::now();
    let fx = fixture(11);
    let err = check::<f64>(&fx, Some(5));
    assert!(err < 1e-6, "f64 max relative error {err:e}");
    let err = check::<f64>(&fx, None);
    assert!(err < 1e-6, "f64 without dropout {err:e}");
    assert!(t.elapsed().as_secs_f64() < 30.0);
}
