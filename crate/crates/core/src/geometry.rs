//! Geometric encoding of a feature relative to its neighbouring prototypes,
//! and the per-modality distance normaliser.

use serde::{Deserialize, Serialize};

use crate::bank::{BankPair, MemoryBank};
use crate::error::{Error, Result};
use crate::features::{Modality, SamplePair};

/// Raw distances below this are treated as "feature sits on the prototype".
pub const DEGENERATE_DISTANCE: f64 = 1e-12;

/// `⟨prototype, unit direction, normalised distance⟩` for one neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricEncoding {
    pub prototype_idx: usize,
    /// Unit vector from the prototype towards the feature; all zeros when
    /// `degenerate` is set.
    pub direction: Vec<f32>,
    pub distance: f32,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceNormalizer {
    pub mean_pc: f64,
    pub mean_rgb: f64,
}

impl Default for DistanceNormalizer {
    fn default() -> Self {
        Self { mean_pc: 1.0, mean_rgb: 1.0 }
    }
}

impl DistanceNormalizer {
    pub fn mean(&self, m: Modality) -> f64 {
        match m {
            Modality::PointCloud => self.mean_pc,
            Modality::Rgb => self.mean_rgb,
        }
    }
}

/// Encodes `f` against its `2k+1` nearest prototypes, nearest first.
pub fn encode(f: &[f32], bank: &MemoryBank, k: usize, mean: f64) -> Result<Vec<GeometricEncoding>> {
    if !(mean > 0.0) {
        return Err(Error::config(format!("normaliser mean {mean} must be positive")));
    }
    let neighbors = bank.query_neighbors(f, k)?;
    Ok(neighbors.indices.iter().map(|&idx| encode_against(f, bank.prototype(idx), idx, mean)).collect())
}

pub(crate) fn encode_against(f: &[f32], proto: &[f32], idx: usize, mean: f64) -> GeometricEncoding {
    let diff: Vec<f64> = f.iter().zip(proto).map(|(a, b)| *a as f64 - *b as f64).collect();
    let raw = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if raw < DEGENERATE_DISTANCE {
        return GeometricEncoding {
            prototype_idx: idx,
            direction: vec![0.0; f.len()],
            distance: 0.0,
            degenerate: true,
        };
    }
    GeometricEncoding {
        prototype_idx: idx,
        direction: diff.iter().map(|d| (d / raw) as f32).collect(),
        distance: (raw / mean) as f32,
        degenerate: false,
    }
}

/// Inverse of [`encode`] for one neighbour: `m + (s · mean) · d`.
pub fn decode(enc: &GeometricEncoding, bank: &MemoryBank, mean: f64) -> Vec<f32> {
    let scale = enc.distance as f64 * mean;
    bank.prototype(enc.prototype_idx)
        .iter()
        .zip(&enc.direction)
        .map(|(m, d)| (*m as f64 + scale * *d as f64) as f32)
        .collect()
}

/// Result of fitting the normaliser; `warnings` lists modalities whose raw
/// mean was zero and was replaced by one.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizerFit {
    pub normalizer: DistanceNormalizer,
    pub warnings: Vec<Modality>,
}

/// Mean nearest-prototype distance of the training foreground, per modality.
pub fn fit_normalizer(train: &[SamplePair], banks: &BankPair) -> Result<NormalizerFit> {
    let mut means = [0.0f64; 2];
    let mut warnings = Vec::new();
    for m in Modality::BOTH {
        let bank = banks.get(m);
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in train {
            let map = s.map(m);
            for cell in map.foreground_cells() {
                sum += bank.nearest_distance(map.feature(cell))? as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyForeground);
        }
        let mean = sum / count as f64;
        means[m.index()] = if mean > 0.0 {
            mean
        } else {
            log::warn!("{} nearest-prototype distances are all zero; using a unit normaliser", m.as_str());
            warnings.push(m);
            1.0
        };
    }
    Ok(NormalizerFit { normalizer: DistanceNormalizer { mean_pc: means[0], mean_rgb: means[1] }, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::SourceRef;

    fn bank(protos: Vec<f32>, dim: usize) -> MemoryBank {
        let n = protos.len() / dim;
        let refs = (0..n).map(|i| SourceRef { sample_id: "b".into(), row: 0, col: i }).collect();
        MemoryBank::from_prototypes(Modality::Rgb, dim, protos, refs, 1.0).unwrap()
    }

    #[test]
    fn degenerate_on_prototype() {
        let b = bank(vec![1.0, 2.0, 5.0, 5.0], 2);
        let e = encode(&[1.0, 2.0], &b, 0, 1.0).unwrap();
        assert_eq!(e[0].distance, 0.0);
        assert!(e[0].degenerate);
        assert_eq!(e[0].direction, vec![0.0, 0.0]);
    }

    #[test]
    fn three_four_five() {
        let b = bank(vec![0.0, 0.0], 2);
        let e = encode(&[3.0, 4.0], &b, 0, 1.0).unwrap();
        assert_eq!(e[0].distance, 5.0);
        assert!((e[0].direction[0] - 0.6).abs() < 1e-7);
        assert!((e[0].direction[1] - 0.8).abs() < 1e-7);
        let e = encode(&[3.0, 4.0], &b, 0, 2.0).unwrap();
        assert_eq!(e[0].distance, 2.5);
    }

    #[test]
    fn ordering_follows_neighbor_set() {
        let b = bank(vec![0.0, 4.0, 1.0, 9.0, 2.5], 1);
        let e = encode(&[2.0], &b, 2, 1.0).unwrap();
        let n = b.query_neighbors(&[2.0], 2).unwrap();
        let idx: Vec<usize> = e.iter().map(|x| x.prototype_idx).collect();
        assert_eq!(idx, n.indices);
    }
}
