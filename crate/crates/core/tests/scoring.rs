//! Score invariants on the synthetic test split: scale range, background
//! bypass, the unit-scale identity, aggregation ordering and agreement of the
//! batched scorer with a cell-by-cell recomputation.

use rand::Rng;

use g2sf::bank::{build_banks, BankPair, CoresetParams, MemoryBank, SourceRef};
use g2sf::features::{gen_synthetic_dataset, Modality, SamplePair, SynthConfig};
use g2sf::geometry::{encode, fit_normalizer, DistanceNormalizer, GeometricEncoding};
use g2sf::lspn::{init_model, metric, position_scales, LspnConfig, LspnInput, LspnModel};
use g2sf::rng::stream;
use g2sf::scoring::{aggregate, sample_metrics, score_cell, score_sample, Aggregation};

const E: f64 = std::f64::consts::E;
const K: usize = 3;

struct Setup {
    test: Vec<SamplePair>,
    banks: BankPair,
    norm: DistanceNormalizer,
}

fn setup(seed: u64) -> Setup {
    let data = SynthConfig { n_train: 8, n_test: 6, ..SynthConfig::default() };
    let ds = gen_synthetic_dataset(&data, seed).unwrap();
    let banks = build_banks(&ds.train, &CoresetParams::default()).unwrap();
    let norm = fit_normalizer(&ds.train, &banks).unwrap().normalizer;
    Setup { test: ds.test, banks, norm }
}

/// Desk model with weights drawn wide enough to reach both saturation ends.
fn wild_model(dim: usize, seed: u64, spread: f32) -> LspnModel<f32> {
    let mut m = init_model(&LspnConfig::desk(dim, dim), seed).unwrap();
    let mut rng = stream(seed, &[7]);
    let p: Vec<f32> = m.flat_params().iter().map(|_| rng.random_range(-spread..spread)).collect();
    m.set_flat_params(&p).unwrap();
    m
}

#[test]
fn million_random_inputs_stay_in_range() {
    let (lo, hi) = ((-1.0f64).exp() as f32, E as f32);
    let mut seen = (f32::INFINITY, f32::NEG_INFINITY);
    let mut total = 0;
    for (seed, spread) in [(1u64, 0.5f32), (2, 3.0), (3, 10.0), (4, 0.05)] {
        let model = wild_model(8, seed, spread);
        let mut rng = stream(seed, &[8]);
        let width = model.config.input_width();
        for _ in 0..62 {
            let rows = 4096;
            let mut b = LspnInput::with_capacity(rows, width);
            for _ in 0..rows {
                let v: Vec<f32> = (0..2 * width).map(|_| rng.random_range(-50.0..50.0)).collect();
                b.push(&v[0..8], &v[8..16], &v[16..24], &v[24..32]).unwrap();
            }
            let w = model.predict(&b.build()).unwrap();
            for &x in w.data() {
                assert!(x >= lo && x <= hi, "scale {x} outside [1/e, e]");
                seen = (seen.0.min(x), seen.1.max(x));
            }
            total += rows;
        }
    }
    assert!(total >= 1_000_000);
    // The bounds are actually approached, so the check is not vacuous.
    assert!(seen.0 < 0.4 && seen.1 > 2.6, "observed range {seen:?}");
}

#[test]
fn background_cells_bypass_the_network() {
    let s = setup(1);
    let model = wild_model(8, 5, 3.0);
    let mut background = 0;
    for pair in &s.test {
        let metrics = sample_metrics(&model, pair, &s.banks, &s.norm, K).unwrap();
        for (cell, m) in metrics.iter().enumerate() {
            if !pair.foreground()[cell] {
                assert_eq!(m.w0, [1.0, 1.0]);
                background += 1;
            }
        }
    }
    assert!(background > 0);

    let enc = GeometricEncoding { prototype_idx: 0, direction: vec![9.0; 8], distance: 4.0, degenerate: false };
    assert_eq!(position_scales(&model, &s.banks, &enc, &enc, false).unwrap(), (1.0, 1.0));
}

#[test]
fn unit_scales_reduce_to_euclidean_under_every_aggregation() {
    let s = setup(2);
    let mut model = init_model(&LspnConfig::desk(8, 8), 3).unwrap();
    model.force_unit_scales();
    assert_eq!(model.sigma(), [0.5, 0.5]);
    let mut rng = stream(2, &[1]);
    for _ in 0..1000 {
        let sp: f64 = rng.random_range(0.0..10.0);
        let sr: f64 = rng.random_range(0.0..10.0);
        assert!((metric([1.0, 1.0], [sp, sr], [0.5, 0.5]) - 0.5 * (sp + sr)).abs() < 1e-6);
    }
    for pair in &s.test {
        let metrics = sample_metrics(&model, pair, &s.banks, &s.norm, K).unwrap();
        let half = K.div_ceil(2);
        for (cell, m) in metrics.iter().enumerate() {
            let pc = encode(pair.pc.feature(cell), &s.banks.pc, half, s.norm.mean_pc).unwrap();
            let rgb = encode(pair.rgb.feature(cell), &s.banks.rgb, half, s.norm.mean_rgb).unwrap();
            let euclid: Vec<f64> = (0..=K).map(|j| 0.5 * (pc[j].distance as f64 + rgb[j].distance as f64)).collect();
            assert!((m.w0[0] - 1.0).abs() < 1e-6 && (m.w0[1] - 1.0).abs() < 1e-6);
            for agg in Aggregation::ALL {
                let (fused, base) = (aggregate(&m.l, agg), aggregate(&euclid, agg));
                assert!((fused - base).abs() < 1e-6 * base.max(1.0), "{agg:?}: {fused} vs {base}");
            }
        }
    }
}

#[test]
fn min_first_max_ordering() {
    let s = setup(3);
    let model = wild_model(8, 6, 1.0);
    for pair in &s.test {
        let by = |a| score_sample(&model, pair, &s.banks, &s.norm, K, a).unwrap();
        let (min, first, max, mean) =
            (by(Aggregation::Min), by(Aggregation::First), by(Aggregation::Max), by(Aggregation::Mean));
        for c in 0..min.grid_scores.len() {
            assert!(min.grid_scores[c] <= first.grid_scores[c]);
            assert!(first.grid_scores[c] <= max.grid_scores[c]);
            assert!(min.grid_scores[c] <= mean.grid_scores[c] && mean.grid_scores[c] <= max.grid_scores[c]);
        }
        assert!(min.sample_score <= first.sample_score && first.sample_score <= max.sample_score);
    }
}

#[test]
fn batched_scores_match_cellwise_recomputation() {
    let s = setup(4);
    let model = wild_model(8, 7, 1.0);
    let half = K.div_ceil(2);
    for pair in &s.test {
        let batched = score_sample(&model, pair, &s.banks, &s.norm, K, Aggregation::Min).unwrap();
        let fg = pair.foreground();
        let single: Vec<f64> = (0..pair.pc.cells())
            .map(|c| {
                let pc = encode(pair.pc.feature(c), &s.banks.pc, half, s.norm.mean_pc).unwrap();
                let rgb = encode(pair.rgb.feature(c), &s.banks.rgb, half, s.norm.mean_rgb).unwrap();
                score_cell(&model, &s.banks, &pc, &rgb, K, fg[c]).unwrap()
            })
            .collect();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            idx
        };
        for (a, b) in batched.grid_scores.iter().zip(&single) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(rank(&batched.grid_scores), rank(&single), "{}", pair.sample_id);
    }
}

#[test]
fn single_prototype_bank_scores() {
    // With one prototype per modality every rank equals rank 0.
    let refs = vec![SourceRef { sample_id: "a".into(), row: 0, col: 0 }];
    let bank = |m| MemoryBank::from_prototypes(m, 2, vec![0.0, 0.0], refs.clone(), 1.0).unwrap();
    let banks = BankPair { pc: bank(Modality::PointCloud), rgb: bank(Modality::Rgb) };
    let enc = encode(&[3.0, 4.0], &banks.pc, 1, 1.0).unwrap();
    assert!(enc.iter().all(|e| e.prototype_idx == 0));
    assert!((enc[0].distance - 5.0).abs() < 1e-6);
}
