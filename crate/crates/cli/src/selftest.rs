//! Embedded invariant suite: loss oracles, gradient checks of the full
//! objective, AUROC/AUPRO against brute-force oracles, the coreset
//! approximation bound and the scale-network range.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use g2sf::bank::{build_banks, greedy_k_center, BankPair, CoresetParams, MemoryBank, SourceRef};
use g2sf::eval::{aupro, auroc, PixelSample};
use g2sf::features::{gen_synthetic_dataset, Modality, SynthConfig};
use g2sf::geometry::{fit_normalizer, GeometricEncoding};
use g2sf::losses::{cma_loss, consistency_loss, margin_loss, sep_loss, BatchItem, LossBreakdown, LossConfig};
use g2sf::lspn::{init_model, position_scales, LspnConfig, LspnInput, LspnModel};
use g2sf::objective::{gradient_check, Negative, NegativeKind};
use g2sf::reference::{aupro_bruteforce, auroc_pairs, optimal_covering_radius};
use g2sf::rng::stream;
use g2sf::synthesis::{build_training_pool, EncodedCell, SynthesisConfig};
use g2sf::trainer::Checkpoint;

/// Outcome of one invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

const E: f64 = std::f64::consts::E;

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, expected {want}"))
    }
}

fn item(anomalous: bool, l: Vec<f64>, eta: Vec<f64>) -> BatchItem<f64> {
    BatchItem { anomalous, l, eta, w0: [1.0, 1.0] }
}

/// Hand-derived loss values.
pub fn loss_oracles() -> Result<String, String> {
    let single = |y: bool, l: f64| item(y, vec![l], vec![1.0]);
    let batch = [single(false, 1.0), single(false, 3.0), single(true, 2.0), single(true, 4.0)];
    close("margin", margin_loss(&batch).0, 2.0 / 3.0, 1e-6)?;
    let separated = [single(false, 1.0), single(false, 2.0), single(true, 3.0), single(true, 4.0)];
    close("margin separated", margin_loss(&separated).0, 0.0, 1e-6)?;
    let cns = [item(false, vec![1.0, 1.5, 0.8], vec![1.0, 1.2, 1.2])];
    close("consistency", consistency_loss(&cns, 1), 0.5, 1e-6)?;
    close("cma", cma_loss(&[[1.0, 1.0]]), 2.0 * (E - 1.0), 1e-6)?;
    let m0 = 3.0;
    close("sep", sep_loss(&[single(true, m0 / 2.0)], m0), 1.0 / m0, 1e-6)?;
    let total =
        LossBreakdown::combine(&LossConfig::default(), 0.5, 0.1, 0.2, 0.3, 0.4, 0.0).map_err(|e| e.to_string())?.total;
    close("weighted total", total, 23.9, 1e-6)?;
    Ok("margin 2/3, consistency 0.5, cma 2(e-1), sep 1/m0, total 23.9".into())
}

/// Small pool plus a batch of eight cells (three anomalous) and two
/// negatives for gradient checks.
pub struct GradFixture {
    pub banks: BankPair,
    pub cells: Vec<EncodedCell>,
    pub negatives: Vec<Negative>,
    pub loss: LossConfig,
    pub model: LspnModel<f64>,
}

impl GradFixture {
    pub fn new(seed: u64) -> g2sf::Result<Self> {
        let data = SynthConfig { n_train: 6, n_test: 1, ..SynthConfig::default() };
        let ds = gen_synthetic_dataset(&data, seed)?;
        let banks = build_banks(&ds.train, &CoresetParams::default())?;
        let norm = fit_normalizer(&ds.train, &banks)?.normalizer;
        let k = 2;
        let synth = SynthesisConfig { n_aug: 6, ..SynthesisConfig::default() };
        let pool = build_training_pool(&ds.train, &banks, &norm, &synth, k, seed)?;
        let mut cells: Vec<EncodedCell> = pool.all_cells().filter(|c| c.y).take(3).cloned().collect();
        cells.extend(pool.all_cells().filter(|c| !c.y).take(8 - cells.len()).cloned());
        let negatives = vec![
            Negative { item: 3, partner: 4, kind: NegativeKind::Prototype },
            Negative { item: 5, partner: 6, kind: NegativeKind::Direction },
        ];
        let loss = LossConfig { k, m0: 2.0, ..LossConfig::default() };
        let cfg = LspnConfig { dropout: 0.3, ..LspnConfig::desk(data.dims.0, data.dims.1) };
        let model = init_model(&cfg, seed)?.cast::<f64>();
        Ok(Self { banks, cells, negatives, loss, model })
    }

    /// Max relative error at precision `T` against f64 central differences.
    pub fn check<T: g2sf::nn::Real>(&self) -> g2sf::Result<f64> {
        let refs: Vec<&EncodedCell> = self.cells.iter().collect();
        let g = gradient_check::<T>(&self.model, &self.banks, &refs, &self.negatives, &self.loss, Some(9), 1e-5)?;
        Ok(g.max_rel_error)
    }
}

fn gradient(f32_mode: bool) -> Result<String, String> {
    let fx = GradFixture::new(3).map_err(|e| e.to_string())?;
    let (err, tol) = if f32_mode {
        (fx.check::<f32>().map_err(|e| e.to_string())?, 1e-3)
    } else {
        (fx.check::<f64>().map_err(|e| e.to_string())?, 1e-6)
    };
    let msg = format!("max rel error {err:.2e} over {} params (tol {tol:.0e})", fx.model.param_count());
    if err < tol {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Random `h × w` instance with integer-valued scores (forcing ties) and a
/// few rectangular ground-truth blobs.
pub fn random_pixel_instance<R: Rng>(rng: &mut R, h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let levels = rng.random_range(3..12);
    let scores: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..levels) as f64).collect();
    let mut gt = vec![false; h * w];
    for _ in 0..rng.random_range(1..4) {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        let (bh, bw) = (rng.random_range(1..4), rng.random_range(1..4));
        for yy in y..(y + bh).min(h) {
            for xx in x..(x + bw).min(w) {
                gt[yy * w + xx] = true;
            }
        }
    }
    if gt.iter().all(|g| *g) {
        gt[0] = false;
    }
    (scores, gt)
}

fn aupro_oracle() -> Result<String, String> {
    let mut rng = stream(5, &[1]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let inst: Vec<(Vec<f64>, Vec<bool>)> = (0..n).map(|_| random_pixel_instance(&mut rng, 8, 8)).collect();
        let samples: Vec<PixelSample> =
            inst.iter().map(|(s, g)| PixelSample { height: 8, width: 8, scores: s, gt: g }).collect();
        for limit in [0.30, 0.01] {
            let fast = aupro(&samples, limit).map_err(|e| e.to_string())?;
            let slow = aupro_bruteforce(&samples, limit);
            worst = worst.max((fast - slow).abs());
        }
    }
    let gt: Vec<bool> = (0..64).map(|i| i % 7 == 0).collect();
    let perfect: Vec<f64> = gt.iter().map(|g| f64::from(u8::from(*g))).collect();
    let px = [PixelSample { height: 8, width: 8, scores: &perfect, gt: &gt }];
    for limit in [0.30, 0.01] {
        let v = aupro(&px, limit).map_err(|e| e.to_string())?;
        if v != 1.0 {
            return Err(format!("perfect detector AUPRO@{limit} = {v}"));
        }
    }
    if worst <= 1e-9 {
        Ok(format!("100 instances, max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e} from brute force"))
    }
}

fn auroc_oracle() -> Result<String, String> {
    let mut rng = stream(6, &[1]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(4..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        if scores.iter().all(|s| *s == scores[0]) {
            continue;
        }
        let fast = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - auroc_pairs(&scores, &labels)).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("200 instances, max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e} from pair counting"))
    }
}

fn coreset_bound() -> Result<String, String> {
    let mut rng = stream(7, &[1]);
    let mut worst_ratio = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let dim = rng.random_range(1..=3);
        let budget = rng.random_range(1..=3usize.min(n));
        let pts: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (_, greedy) = greedy_k_center(&pts, dim, budget, 0);
        let opt = optimal_covering_radius(&pts, dim, budget);
        if greedy > 2.0 * opt + 1e-9 {
            return Err(format!("greedy radius {greedy} > 2 x optimal {opt} (n {n}, budget {budget})"));
        }
        if opt > 0.0 {
            worst_ratio = worst_ratio.max(greedy / opt);
        }
    }
    Ok(format!("200 instances, worst greedy/optimal {worst_ratio:.3}"))
}

fn scale_range(model: Option<&LspnModel<f32>>, rows: usize) -> Result<String, String> {
    let mut rng = stream(8, &[1]);
    let owned;
    let model = match model {
        Some(m) => m,
        None => {
            let mut m = init_model(&LspnConfig::desk(8, 8), 4).map_err(|e| e.to_string())?;
            // Large random weights push the output into saturation.
            let p: Vec<f32> = m.flat_params().iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            m.set_flat_params(&p).map_err(|e| e.to_string())?;
            owned = m;
            &owned
        }
    };
    let half = model.config.input_width();
    let (lo, hi) = ((-1.0f64).exp() as f32, E as f32);
    let mut checked = 0usize;
    let chunk = 4096;
    while checked < rows {
        let n = chunk.min(rows - checked);
        let mut b = LspnInput::with_capacity(n, half);
        for _ in 0..n {
            let v: Vec<f32> = (0..2 * half).map(|_| rng.random_range(-20.0..20.0)).collect();
            let (proto, dir) = v.split_at(half);
            let (mp, mr) = proto.split_at(model.config.dim_pc);
            let (dp, dr) = dir.split_at(model.config.dim_pc);
            b.push(mp, mr, dp, dr).map_err(|e| e.to_string())?;
        }
        let w = model.predict(&b.build()).map_err(|e| e.to_string())?;
        if let Some(x) = w.data().iter().find(|x| !(**x >= lo && **x <= hi)) {
            return Err(format!("scale {x} outside [e^-1, e]"));
        }
        checked += n;
    }
    let proto = |m: Modality, d: usize| {
        MemoryBank::from_prototypes(m, d, vec![0.0; d], vec![SourceRef { sample_id: "s".into(), row: 0, col: 0 }], 1.0)
    };
    let banks = BankPair {
        pc: proto(Modality::PointCloud, model.config.dim_pc).map_err(|e| e.to_string())?,
        rgb: proto(Modality::Rgb, model.config.dim_rgb).map_err(|e| e.to_string())?,
    };
    let enc =
        |d: usize| GeometricEncoding { prototype_idx: 0, direction: vec![1.0; d], distance: 3.0, degenerate: false };
    let bg = position_scales(model, &banks, &enc(model.config.dim_pc), &enc(model.config.dim_rgb), false)
        .map_err(|e| e.to_string())?;
    if bg != (1.0, 1.0) {
        return Err(format!("background scales {bg:?}"));
    }
    Ok(format!("{rows} random inputs in range; background bypass (1, 1)"))
}

fn unit_scale_identity() -> Result<String, String> {
    let mut m = init_model(&LspnConfig::desk(8, 8), 2).map_err(|e| e.to_string())?;
    m.force_unit_scales();
    let sigma = m.sigma();
    close("sigma", sigma[0] as f64, 0.5, 1e-7)?;
    close("sigma", sigma[1] as f64, 0.5, 1e-7)?;
    let mut rng = stream(9, &[1]);
    let n = 256;
    let mut b = LspnInput::with_capacity(n, 16);
    for _ in 0..n {
        let v: Vec<f32> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        b.push(&v[0..8], &v[8..16], &v[16..24], &v[24..32]).map_err(|e| e.to_string())?;
    }
    let w = m.predict(&b.build()).map_err(|e| e.to_string())?;
    for r in 0..n {
        let (sp, sr): (f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let l =
            g2sf::lspn::metric([w.get(r, 0) as f64, w.get(r, 1) as f64], [sp, sr], [sigma[0] as f64, sigma[1] as f64]);
        close("fused vs euclidean", l, 0.5 * (sp + sr), 1e-6)?;
    }
    Ok(format!("{n} encodings: fused metric = 0.5 (s_pc + s_rgb)"))
}

fn checkpoint_check(dir: &Path) -> Result<String, String> {
    let ckpt = Checkpoint::load(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    if !ckpt.model.is_finite() {
        return Err("non-finite parameters".into());
    }
    scale_range(Some(&ckpt.model), 4096)?;
    Ok(format!("epoch {} loads, scales in range", ckpt.epoch))
}

/// Runs every invariant; `checkpoint` adds a load-and-range check of a
/// stored model.
pub fn run_suite(checkpoint: Option<&Path>) -> Vec<Check> {
    let mut out = vec![
        timed("loss_oracles", loss_oracles),
        timed("gradient_f64", || gradient(false)),
        timed("gradient_f32", || gradient(true)),
        timed("aupro_oracle", aupro_oracle),
        timed("auroc_oracle", auroc_oracle),
        timed("coreset_2approx", coreset_bound),
        timed("scale_range", || scale_range(None, 1_000_000)),
        timed("unit_scale_identity", unit_scale_identity),
    ];
    if let Some(dir) = checkpoint {
        out.push(timed("checkpoint", || checkpoint_check(dir)));
    }
    out
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{:<width$}  {}  {:>7.2}s  {}\n",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        ));
    }
    s
}
