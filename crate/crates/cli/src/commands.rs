//! The pipeline stages. Each one verifies its upstream manifests, writes its
//! slot of the run directory and records a manifest of what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use g2sf::bank::{build_banks, BankPair};
use g2sf::eval::{ablation_csv, ablation_scores, evaluate_maps, learning_curve, score_dataset, CurveRow, EvalReport};
use g2sf::features::{gen_synthetic_dataset, load_split, write_split, PixelMask, SamplePair, Split};
use g2sf::geometry::{fit_normalizer, DistanceNormalizer};
use g2sf::lspn::LspnConfig;
use g2sf::scoring::{load_score_map, write_score_map};
use g2sf::synthesis::{encode_pool, synthesize_samples, AugmentedSample, InjectionReference};
use g2sf::trainer::{compute_m0, train, write_log, Checkpoint};
use g2sf::Error;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{stage_hash, RunDir, Stage, StageManifest};

/// Options shared by every stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageOpts {
    pub force: bool,
    pub deterministic: bool,
}

const NORMALIZER_FILE: &str = "normalizer.json";
const FINAL_DIR: &str = "final";

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn begin(
    run: &RunDir,
    stage: Stage,
    cfg: &RunConfig,
    opts: StageOpts,
) -> CliResult<std::collections::BTreeMap<String, String>> {
    let upstream = run.check_upstream(stage)?;
    run.prepare(stage, &stage_hash(stage, cfg, &upstream), opts.force)?;
    Ok(upstream)
}

fn load_banks(run: &RunDir) -> CliResult<(BankPair, DistanceNormalizer)> {
    let dir = run.slot(Stage::Bank);
    let banks = BankPair::load(&dir)?;
    let path = dir.join(NORMALIZER_FILE);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let norm = serde_json::from_slice(&bytes).map_err(Error::from)?;
    Ok((banks, norm))
}

fn snapshot_dir(epoch: usize) -> String {
    format!("epoch_{epoch:04}")
}

/// Synthetic dataset generation, or ingestion of an existing dataset
/// directory (`train.json` and optionally `test.json`) when `from` is set.
pub fn cmd_gen(run: &RunDir, cfg: &RunConfig, opts: StageOpts, from: Option<&Path>) -> CliResult<StageManifest> {
    let upstream = begin(run, Stage::Gen, cfg, opts)?;
    let dir = run.slot(Stage::Gen);
    let (train, test) = match from {
        Some(src) => {
            let (_, train) = load_split(src, Split::Train)?;
            let test = if src.join("test.json").exists() { load_split(src, Split::Test)?.1 } else { Vec::new() };
            (train, test)
        }
        None => {
            let ds = gen_synthetic_dataset(&cfg.data(), cfg.seed)?;
            (ds.train, ds.test)
        }
    };
    write_split(&dir, Split::Train, &train)?;
    if !test.is_empty() {
        write_split(&dir, Split::Test, &test)?;
    }
    println!("gen: {} train / {} test samples in {}", train.len(), test.len(), dir.display());
    run.finish(Stage::Gen, cfg, upstream, None)
}

pub fn cmd_bank(run: &RunDir, cfg: &RunConfig, opts: StageOpts) -> CliResult<StageManifest> {
    let upstream = begin(run, Stage::Bank, cfg, opts)?;
    let (_, train) = load_split(&run.slot(Stage::Gen), Split::Train)?;
    let banks = build_banks(&train, &cfg.coreset())?;
    let dir = run.slot(Stage::Bank);
    banks.save(&dir)?;
    let fit = fit_normalizer(&train, &banks)?;
    for m in &fit.warnings {
        log::warn!("{} normaliser fell back to 1", m.as_str());
    }
    write_json(&dir.join(NORMALIZER_FILE), &fit.normalizer)?;
    println!(
        "bank: {} pc / {} rgb prototypes, mean distances {:.4} / {:.4}",
        banks.pc.len(),
        banks.rgb.len(),
        fit.normalizer.mean_pc,
        fit.normalizer.mean_rgb
    );
    run.finish(Stage::Bank, cfg, upstream, None)
}

/// Writes the augmented samples as a dataset split whose grid-resolution
/// ground truth carries the cell labels.
pub fn cmd_synth(run: &RunDir, cfg: &RunConfig, opts: StageOpts) -> CliResult<StageManifest> {
    let upstream = begin(run, Stage::Synth, cfg, opts)?;
    let (_, train) = load_split(&run.slot(Stage::Gen), Split::Train)?;
    let (_, norm) = load_banks(run)?;
    let reference = InjectionReference { pc: norm.mean_pc, rgb: norm.mean_rgb };
    let samples = synthesize_samples(&train, &cfg.synthesis(), reference, cfg.seed)?;
    let mut anomalous = 0usize;
    let mut cells = 0usize;
    let pairs: Vec<SamplePair> = samples
        .into_iter()
        .map(|a| {
            let (h, w) = a.sample.grid();
            let mut s = a.sample;
            anomalous += a.labels.iter().filter(|y| **y).count();
            cells += s.foreground().iter().filter(|f| **f).count();
            s.image_label = Some(u8::from(a.labels.iter().any(|y| *y)));
            s.pixel_gt = Some(PixelMask { height: h, width: w, data: a.labels });
            s
        })
        .collect();
    write_split(&run.slot(Stage::Synth), Split::Train, &pairs)?;
    println!("synth: {} samples, {anomalous} of {cells} foreground cells anomalous", pairs.len());
    run.finish(Stage::Synth, cfg, upstream, None)
}

pub fn cmd_train(run: &RunDir, cfg: &RunConfig, opts: StageOpts) -> CliResult<StageManifest> {
    let upstream = begin(run, Stage::Train, cfg, opts)?;
    let (_, pool_samples) = load_split(&run.slot(Stage::Synth), Split::Train)?;
    let (banks, norm) = load_banks(run)?;
    let samples: Vec<AugmentedSample> = pool_samples
        .into_iter()
        .map(|s| {
            let labels = match &s.pixel_gt {
                Some(gt) if gt.data.len() == s.pc.cells() => gt.data.clone(),
                _ => vec![false; s.pc.cells()],
            };
            AugmentedSample { sample: s, labels }
        })
        .collect();
    let pool = encode_pool(&samples, &banks, &norm, cfg.k, cfg.seed)?;
    let loss = cfg.loss(compute_m0(&pool.train));
    let model_cfg = LspnConfig { dropout: cfg.dropout, ..LspnConfig::desk(banks.pc.dim(), banks.rgb.dim()) };
    let dir = run.slot(Stage::Train);
    let hash = cfg.hash();
    let mut out = match train(&pool, &banks, &norm, &model_cfg, &cfg.train(opts.deterministic), &loss) {
        Ok(out) => out,
        Err(Error::Diverged { epoch, mut last_good }) => {
            last_good.config_hash = hash;
            last_good.save(&dir.join("last_good"))?;
            log::error!("training diverged at epoch {epoch}; last good model saved");
            return Err(Error::Diverged { epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    out.checkpoint.config_hash = hash.clone();
    out.checkpoint.save(&dir.join(FINAL_DIR))?;
    for snap in &mut out.snapshots {
        snap.config_hash = hash.clone();
        snap.save(&dir.join(snapshot_dir(snap.epoch)))?;
    }
    write_log(&out.log, &dir.join("train_log.jsonl"))?;
    let last = out.log.last().expect("epoch 0 is always logged");
    println!(
        "train: {} epochs on {} cells, loss {:.4}, mean w {:.3}, sigma ({:.3}, {:.3})",
        cfg.epochs,
        pool.train.len(),
        last.train.total,
        last.mean_w,
        last.sigma_pc,
        last.sigma_rgb
    );
    run.finish(Stage::Train, cfg, upstream, None)
}

#[derive(Serialize)]
struct ScoreIndex<'a> {
    config_hash: String,
    seed: u64,
    aggregation: &'a str,
    samples: Vec<(String, f64)>,
}

fn map_file(id: &str) -> String {
    format!("{id}.g2t")
}

pub fn cmd_score(run: &RunDir, cfg: &RunConfig, opts: StageOpts) -> CliResult<StageManifest> {
    let upstream = begin(run, Stage::Score, cfg, opts)?;
    let ckpt = Checkpoint::load(&run.slot(Stage::Train).join(FINAL_DIR))?;
    let (banks, _) = load_banks(run)?;
    let (_, test) = load_split(&run.slot(Stage::Gen), Split::Test)?;
    let maps = score_dataset(&ckpt, &banks, &test, &cfg.eval()?)?;
    let dir = run.slot(Stage::Score);
    for m in &maps {
        write_score_map(m, &dir.join(map_file(&m.sample_id)))?;
    }
    let index = ScoreIndex {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        aggregation: &cfg.aggregation,
        samples: maps.iter().map(|m| (m.sample_id.clone(), m.sample_score)).collect(),
    };
    write_json(&dir.join("scores.json"), &index)?;
    println!("score: {} maps in {}", maps.len(), dir.display());
    run.finish(Stage::Score, cfg, upstream, None)
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn stamped<'a, T>(cfg: &RunConfig, body: &'a T) -> Stamped<'a, T> {
    Stamped { config_hash: cfg.hash(), seed: cfg.seed, body }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn cmd_eval(run: &RunDir, cfg: &RunConfig, opts: StageOpts) -> CliResult<(StageManifest, EvalReport)> {
    let upstream = begin(run, Stage::Eval, cfg, opts)?;
    let (_, test) = load_split(&run.slot(Stage::Gen), Split::Test)?;
    let scores = run.slot(Stage::Score);
    let maps =
        test.iter().map(|s| load_score_map(&scores.join(map_file(&s.sample_id)))).collect::<g2sf::Result<Vec<_>>>()?;
    let report = evaluate_maps(&maps, &test)?;
    let path = run.slot(Stage::Eval).join("eval.json");
    write_json(&path, &stamped(cfg, &report))?;
    println!(
        "eval: I-AUROC {:.4}  P-AUROC {}  AUPRO@30% {}  AUPRO@1% {}{}",
        report.i_auroc,
        fmt_opt(report.p_auroc),
        fmt_opt(report.aupro_at(0.30)),
        fmt_opt(report.aupro_at(0.01)),
        if report.pixel_metrics_absent { "  (no pixel ground truth)" } else { "" }
    );
    let m = run.finish(Stage::Eval, cfg, upstream, Some(&[path]))?;
    Ok((m, report))
}

fn curve_csv(rows: &[CurveRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("epoch,I-AUROC,P-AUROC,AUPRO@30%,AUPRO@1%\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            r.epoch,
            r.i_auroc,
            cell(r.p_auroc),
            cell(r.aupro_30),
            cell(r.aupro_01)
        ));
    }
    s
}

fn load_snapshots(dir: &Path) -> CliResult<Vec<Checkpoint>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch_")))
        .collect();
    names.sort();
    names.iter().map(|p| Checkpoint::load(p).map_err(CliError::from)).collect()
}

/// Score-variant and aggregation tables plus the learning curve over the
/// stored snapshots.
pub fn cmd_ablate(run: &RunDir, cfg: &RunConfig, opts: StageOpts) -> CliResult<StageManifest> {
    let upstream = begin(run, Stage::Ablate, cfg, opts)?;
    let ckpt_dir = run.slot(Stage::Train);
    let ckpt = Checkpoint::load(&ckpt_dir.join(FINAL_DIR))?;
    let snapshots = load_snapshots(&ckpt_dir)?;
    let (banks, _) = load_banks(run)?;
    let (_, test) = load_split(&run.slot(Stage::Gen), Split::Test)?;
    let eval = cfg.eval()?;
    let tables = ablation_scores(&ckpt, &banks, &test, &eval)?;
    let curve = learning_curve(&snapshots, &banks, &test, &eval)?;

    let dir = run.slot(Stage::Ablate);
    let files = [
        (dir.join("ablation_variants.csv"), ablation_csv(&tables.score_variants)),
        (dir.join("ablation_aggregations.csv"), ablation_csv(&tables.aggregations)),
        (dir.join("learning_curve.csv"), curve_csv(&curve)),
    ];
    for (path, text) in &files {
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    let json = dir.join("ablation.json");
    write_json(&json, &stamped(cfg, &tables))?;
    print!("{}\n{}", files[0].1, files[1].1);
    let mut outputs: Vec<PathBuf> = files.into_iter().map(|(p, _)| p).collect();
    outputs.push(json);
    run.finish(Stage::Ablate, cfg, upstream, Some(&outputs))
}
