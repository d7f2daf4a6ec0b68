//! Scale-predictor training: shuffled mini-batches, negatives for the
//! cross-modal term, two Adam learning rates, checkpoints and a JSON-lines
//! style per-epoch log.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::BankPair;
use crate::error::{Error, Result};
use crate::geometry::DistanceNormalizer;
use crate::losses::{LossBreakdown, LossConfig};
use crate::lspn::{init_model, LspnConfig, LspnModel, ParamKind};
use crate::nn::{adam_step, AdamHyper, AdamState};
use crate::objective::{evaluate, Negative, NegativeKind};
use crate::rng::{derive_seed, stream};
use crate::synthesis::{EncodedCell, TrainingPool};

const STREAM_INIT: u64 = 0x1a17;
const STREAM_SHUFFLE: u64 = 0x5f1e;
const STREAM_NEG: u64 = 0x2e9;
const STREAM_DROP: u64 = 0xd207;
const STREAM_EVAL_NEG: u64 = 0xe2e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sigma_lr: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Keep a snapshot every this many epochs (0 keeps only the last).
    pub eval_every: usize,
    /// Omit wall-clock fields from the log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 8192,
            lr: 1.5e-4,
            weight_decay: 1.5e-4,
            sigma_lr: 5e-3,
            dropout: 0.5,
            seed: 0,
            eval_every: 10,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Settings for desk-scale pools of a few thousand cells: the full-size
    /// batch would give only a handful of optimiser steps per run.
    pub fn desk() -> Self {
        Self { epochs: 40, batch_size: 256, lr: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        let rates = [self.lr, self.sigma_lr];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rates must be positive, weight decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Model snapshot plus the frozen preprocessing it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: LspnModel<f32>,
    pub normalizer: DistanceNormalizer,
    pub loss: LossConfig,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    epoch: usize,
    seed: u64,
    config_hash: String,
    normalizer: DistanceNormalizer,
    loss: LossConfig,
    sigma: [f64; 2],
}

impl Checkpoint {
    /// `dir/checkpoint.json` plus the model under `dir/model/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model"))?;
        let s = self.model.sigma();
        let manifest = CheckpointManifest {
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            normalizer: self.normalizer,
            loss: self.loss.clone(),
            sigma: [s[0] as f64, s[1] as f64],
        };
        fs::write(dir.join("checkpoint.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("checkpoint.json"))?)?;
        Ok(Self {
            model: LspnModel::load(&dir.join("model"))?,
            normalizer: manifest.normalizer,
            loss: manifest.loss,
            epoch: manifest.epoch,
            seed: manifest.seed,
            config_hash: manifest.config_hash,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
    pub mean_w: f64,
    pub sigma_pc: f64,
    pub sigma_rgb: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Snapshots at epoch 0, every `eval_every` epochs and at the end.
    pub snapshots: Vec<Checkpoint>,
}

/// `m0 = 2 · max_{i,m} s^m_{i,0}` over the cells, or 1 if all are zero.
pub fn compute_m0<'a>(cells: impl IntoIterator<Item = &'a EncodedCell>) -> f64 {
    let max = cells.into_iter().map(|c| c.pc[0].distance.max(c.rgb[0].distance) as f64).fold(0.0, f64::max);
    if max > 0.0 {
        2.0 * max
    } else {
        1.0
    }
}

/// Negatives over the normal items of a batch: a uniform derangement
/// (Sattolo's algorithm) pairs each with a different item, and a fair coin
/// picks the prototype- or direction-permuted form.
pub fn make_negatives<R: Rng + ?Sized>(anomalous: &[bool], rng: &mut R) -> Vec<Negative> {
    let normals: Vec<usize> = (0..anomalous.len()).filter(|&i| !anomalous[i]).collect();
    if normals.len() < 2 {
        if !anomalous.is_empty() {
            log::warn!("batch has {} normal item(s); no negatives formed", normals.len());
        }
        return Vec::new();
    }
    let mut perm: Vec<usize> = (0..normals.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    normals
        .iter()
        .zip(&perm)
        .map(|(&item, &p)| Negative {
            item,
            partner: normals[p],
            kind: if rng.random::<bool>() { NegativeKind::Prototype } else { NegativeKind::Direction },
        })
        .collect()
}

struct Optimiser {
    states: Vec<AdamState>,
}

impl Optimiser {
    fn new(model: &mut LspnModel<f32>, cfg: &TrainConfig) -> Self {
        let states = model
            .param_slices_mut()
            .iter()
            .map(|(kind, s)| {
                let hyper = match kind {
                    ParamKind::Weight => AdamHyper { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
                    ParamKind::Bias => AdamHyper { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
                    ParamKind::LogSigma => AdamHyper { lr: cfg.sigma_lr, weight_decay: 0.0, ..Default::default() },
                };
                AdamState::new(s.len(), hyper)
            })
            .collect();
        Self { states }
    }

    fn step(&mut self, model: &mut LspnModel<f32>, grads: &[&[f32]]) -> Result<()> {
        for ((_, params), (g, st)) in model.param_slices_mut().into_iter().zip(grads.iter().zip(&mut self.states)) {
            adam_step(params, g, st)?;
        }
        Ok(())
    }
}

fn pool_loss(
    model: &LspnModel<f32>,
    banks: &BankPair,
    cells: &[EncodedCell],
    loss: &LossConfig,
    seed: u64,
) -> Result<Option<(LossBreakdown, f64)>> {
    if cells.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&EncodedCell> = cells.iter().collect();
    let negatives = if loss.mu > 0.0 {
        let labels: Vec<bool> = cells.iter().map(|c| c.y).collect();
        make_negatives(&labels, &mut stream(seed, &[STREAM_EVAL_NEG]))
    } else {
        Vec::new()
    };
    let ev = evaluate(model, banks, &refs, &negatives, loss, None, false)?;
    Ok(Some((ev.breakdown, ev.mean_w)))
}

/// Trains a fresh model on `pool.train`, reporting validation loss on
/// `pool.validation` after every epoch.
pub fn train(
    pool: &TrainingPool,
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    model_cfg: &LspnConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if pool.train.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.dropout = cfg.dropout;
    let mut model = init_model(&model_cfg, derive_seed(cfg.seed, &[STREAM_INIT]))?;
    let mut opt = Optimiser::new(&mut model, cfg);
    let started = Instant::now();

    let snapshot = |model: &LspnModel<f32>, epoch: usize| Checkpoint {
        model: model.clone(),
        normalizer: *normalizer,
        loss: loss.clone(),
        epoch,
        seed: cfg.seed,
        config_hash: String::new(),
    };
    let log_entry = |model: &LspnModel<f32>, epoch: usize| -> Result<EpochLog> {
        let (train, mean_w) = pool_loss(model, banks, &pool.train, loss, cfg.seed)?.expect("nonempty");
        let validation = pool_loss(model, banks, &pool.validation, loss, cfg.seed)?.map(|v| v.0);
        let s = model.sigma();
        Ok(EpochLog {
            epoch,
            train,
            validation,
            mean_w,
            sigma_pc: s[0] as f64,
            sigma_rgb: s[1] as f64,
            wall_ms: (!cfg.deterministic).then(|| started.elapsed().as_millis() as u64),
        })
    };

    let mut log = vec![log_entry(&model, 0)?];
    let mut snapshots = vec![snapshot(&model, 0)];
    let mut order: Vec<usize> = (0..pool.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let last_good = snapshot(&model, epoch - 1);
        let diverged = |_: Error| Error::Diverged { epoch, last_good: Box::new(last_good.clone()) };
        let mut rng = stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let cells: Vec<&EncodedCell> = idx.iter().map(|&i| &pool.train[i]).collect();
            let negatives = if loss.mu > 0.0 {
                let labels: Vec<bool> = cells.iter().map(|c| c.y).collect();
                make_negatives(&labels, &mut stream(cfg.seed, &[STREAM_NEG, epoch as u64, b as u64]))
            } else {
                Vec::new()
            };
            let drop_seed = (cfg.dropout > 0.0).then(|| derive_seed(cfg.seed, &[STREAM_DROP, epoch as u64, b as u64]));
            let ev = match evaluate(&model, banks, &cells, &negatives, loss, drop_seed, true) {
                Ok(ev) => ev,
                Err(e @ (Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_))) => return Err(diverged(e)),
                Err(e) => return Err(e),
            };
            let grads = ev.grads.expect("requested");
            let slices = grads.slices();
            opt.step(&mut model, &slices).map_err(diverged)?;
            if !model.is_finite() {
                return Err(diverged(Error::NonFiniteLoss("parameters")));
            }
        }
        let entry = log_entry(&model, epoch).map_err(|e| match e {
            Error::NonFiniteLoss(_) => diverged(e),
            other => other,
        })?;
        log::debug!("epoch {epoch}: loss {:.4} mean w {:.3}", entry.train.total, entry.mean_w);
        log.push(entry);
        if epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            snapshots.push(snapshot(&model, epoch));
        }
    }
    let checkpoint = snapshot(&model, cfg.epochs);
    Ok(TrainOutcome { checkpoint, log, snapshots })
}

/// Writes the log as JSON lines.
pub fn write_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_batch_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let neg = make_negatives(&[false, false], &mut rng);
        assert_eq!(neg.len(), 2);
        assert_eq!((neg[0].partner, neg[1].partner), (1, 0));
    }

    #[test]
    fn derangement_and_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut proto = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let labels: Vec<bool> = (0..100).map(|i| i % 7 == 0).collect();
            let neg = make_negatives(&labels, &mut rng);
            for n in &neg {
                assert_ne!(n.item, n.partner);
                assert!(!labels[n.item] && !labels[n.partner]);
                proto += usize::from(n.kind == NegativeKind::Prototype);
            }
            total += neg.len();
        }
        assert!(total >= 8000);
        let ratio = proto as f64 / total as f64;
        assert!((0.48..=0.52).contains(&ratio), "{ratio}");
    }

    #[test]
    fn single_item_has_no_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(make_negatives(&[false], &mut rng).is_empty());
        assert!(make_negatives(&[true, false], &mut rng).is_empty());
    }

    #[test]
    fn invalid_batch_size() {
        let cfg = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
