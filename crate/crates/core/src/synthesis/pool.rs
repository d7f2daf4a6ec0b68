use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::BankPair;
use crate::error::{Error, Result};
use crate::features::{AnomalyKind, Modality, SamplePair};
use crate::geometry::{encode, DistanceNormalizer, GeometricEncoding};
use crate::rng::stream;

use super::{gen_perlin_mask, inject_anomaly, InjectionReference, PerlinMask, PerlinParams};

const STREAM_SYNTH: u64 = 0x5e7;
const STREAM_SPLIT: u64 = 0x5b1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Number of augmented samples; 0 keeps the normal training cells only.
    pub n_aug: usize,
    pub strength: f64,
    pub modes: Vec<AnomalyKind>,
    pub mask: PerlinParams,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { n_aug: 64, strength: 3.0, modes: AnomalyKind::ALL.to_vec(), mask: PerlinParams::default() }
    }
}

/// A feature pair at one grid position with its cell label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeaturePair {
    pub sample_id: String,
    pub position: (usize, usize),
    pub f_pc: Vec<f32>,
    pub f_rgb: Vec<f32>,
    pub y: bool,
}

/// Sample produced by the synthesis stage with its per-cell labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub sample: SamplePair,
    pub labels: Vec<bool>,
}

/// Foreground cell with `2k+1` neighbour encodings per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCell {
    pub sample: usize,
    pub position: (usize, usize),
    pub y: bool,
    pub pc: Vec<GeometricEncoding>,
    pub rgb: Vec<GeometricEncoding>,
}

impl EncodedCell {
    pub fn encodings(&self, m: Modality) -> &[GeometricEncoding] {
        match m {
            Modality::PointCloud => &self.pc,
            Modality::Rgb => &self.rgb,
        }
    }

    /// `Σ_m s^m_{i,j}` for every neighbour rank.
    pub fn s_sum(&self) -> Vec<f64> {
        self.pc.iter().zip(&self.rgb).map(|(a, b)| a.distance as f64 + b.distance as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPool {
    pub sample_ids: Vec<String>,
    pub train: Vec<EncodedCell>,
    pub validation: Vec<EncodedCell>,
    pub neighbors: usize,
}

impl TrainingPool {
    pub fn all_cells(&self) -> impl Iterator<Item = &EncodedCell> {
        self.train.iter().chain(&self.validation)
    }

    pub fn anomalous_fraction(&self) -> f64 {
        let n = self.train.len() + self.validation.len();
        self.all_cells().filter(|c| c.y).count() as f64 / n.max(1) as f64
    }
}

/// Foreground cells of a sample as labelled feature pairs.
pub fn labeled_cells(sample: &SamplePair, labels: &[bool]) -> Vec<LabeledFeaturePair> {
    let (_, w) = sample.grid();
    sample
        .pc
        .foreground_cells()
        .map(|cell| LabeledFeaturePair {
            sample_id: sample.sample_id.clone(),
            position: (cell / w, cell % w),
            f_pc: sample.pc.feature(cell).to_vec(),
            f_rgb: sample.rgb.feature(cell).to_vec(),
            y: labels[cell],
        })
        .collect()
}

fn foreground_mask<R: Rng + ?Sized>(sample: &SamplePair, params: &PerlinParams, rng: &mut R) -> PerlinMask {
    let (h, w) = sample.grid();
    let fg = sample.foreground();
    let mut mask = gen_perlin_mask(h, w, params, rng);
    for _ in 0..params.max_resamples {
        if mask.grid.iter().zip(fg).any(|(m, f)| *m && *f) {
            break;
        }
        mask = gen_perlin_mask(h, w, params, rng);
    }
    for (m, f) in mask.grid.iter_mut().zip(fg) {
        *m &= *f;
    }
    mask.coverage = mask.grid.iter().filter(|b| **b).count() as f64 / (h * w) as f64;
    mask
}

/// Augmented samples, or the normal training samples with all-zero labels
/// when `cfg.n_aug == 0`. Each sample draws from its own random stream.
pub fn synthesize_samples(
    train: &[SamplePair],
    cfg: &SynthesisConfig,
    reference: InjectionReference,
    seed: u64,
) -> Result<Vec<AugmentedSample>> {
    if train.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if cfg.n_aug == 0 {
        return Ok(train
            .iter()
            .map(|s| AugmentedSample { sample: s.clone(), labels: vec![false; s.pc.cells()] })
            .collect());
    }
    if train.len() < 2 {
        return Err(Error::config("synthesis needs at least two training samples"));
    }
    if cfg.modes.is_empty() {
        return Err(Error::config("no synthesis modes configured"));
    }
    (0..cfg.n_aug)
        .into_par_iter()
        .map(|a| {
            let mut rng = stream(seed, &[STREAM_SYNTH, a as u64]);
            let t = a % train.len();
            let mut d = rng.random_range(0..train.len() - 1);
            if d >= t {
                d += 1;
            }
            let target = &train[t];
            let mode = cfg.modes[rng.random_range(0..cfg.modes.len())];
            let mask = foreground_mask(target, &cfg.mask, &mut rng);
            let (mut sample, labels) =
                inject_anomaly(target, &train[d], &mask, mode, cfg.strength, reference, &mut rng)?;
            sample.sample_id = format!("aug{a:05}-{}", target.sample_id);
            sample.pixel_gt = None;
            Ok(AugmentedSample { sample, labels })
        })
        .collect()
}

fn encode_sample(
    idx: usize,
    aug: &AugmentedSample,
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    k: usize,
) -> Result<Vec<EncodedCell>> {
    let (_, w) = aug.sample.grid();
    aug.sample
        .pc
        .foreground_cells()
        .map(|cell| {
            let pc = encode(aug.sample.pc.feature(cell), &banks.pc, k, normalizer.mean_pc)?;
            let rgb = encode(aug.sample.rgb.feature(cell), &banks.rgb, k, normalizer.mean_rgb)?;
            Ok(EncodedCell { sample: idx, position: (cell / w, cell % w), y: aug.labels[cell], pc, rgb })
        })
        .collect()
}

/// Encodes every foreground cell and splits the samples 50/50 into
/// training and validation pools.
pub fn encode_pool(
    samples: &[AugmentedSample],
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    k: usize,
    seed: u64,
) -> Result<TrainingPool> {
    let n = 2 * k + 1;
    if banks.pc.len() < n || banks.rgb.len() < n {
        return Err(Error::config(format!(
            "banks hold {}/{} prototypes, need at least 2k+1 = {n}",
            banks.pc.len(),
            banks.rgb.len()
        )));
    }
    let per_sample: Vec<Vec<EncodedCell>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| encode_sample(i, s, banks, normalizer, k))
        .collect::<Result<_>>()?;
    if per_sample.iter().all(Vec::is_empty) {
        return Err(Error::EmptyForeground);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = stream(seed, &[STREAM_SPLIT]);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let half = samples.len().div_ceil(2);
    let mut in_train = vec![false; samples.len()];
    for &i in &order[..half] {
        in_train[i] = true;
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, cells) in per_sample.into_iter().enumerate() {
        if in_train[i] {
            train.extend(cells);
        } else {
            validation.extend(cells);
        }
    }
    Ok(TrainingPool {
        sample_ids: samples.iter().map(|s| s.sample.sample_id.clone()).collect(),
        train,
        validation,
        neighbors: n,
    })
}

/// [`synthesize_samples`] followed by [`encode_pool`].
pub fn build_training_pool(
    train: &[SamplePair],
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    cfg: &SynthesisConfig,
    k: usize,
    seed: u64,
) -> Result<TrainingPool> {
    let reference = InjectionReference { pc: normalizer.mean_pc, rgb: normalizer.mean_rgb };
    let samples = synthesize_samples(train, cfg, reference, seed)?;
    encode_pool(&samples, banks, normalizer, k, seed)
}
