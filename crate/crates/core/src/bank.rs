//! Per-modality memory banks: greedy k-center coreset selection and exact
//! nearest-prototype queries.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_tensor, write_tensor, Modality, Tensor};
use crate::rng::stream;

/// Where a prototype came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub sample_id: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetParams {
    pub fraction: f64,
    pub seed: u64,
    /// Select in a seeded Gaussian random projection of this dimension.
    pub projection_dim: Option<usize>,
    pub start: usize,
}

impl Default for CoresetParams {
    fn default() -> Self {
        Self { fraction: 0.1, seed: 0, projection_dim: None, start: 0 }
    }
}

/// Immutable set of prototype vectors for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    modality: Modality,
    dim: usize,
    prototypes: Vec<f32>,
    source_refs: Vec<SourceRef>,
    coreset_fraction: f64,
}

/// The `2k+1` (or fewer) nearest prototypes of a query, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub distances: Vec<f32>,
    /// Set when the bank holds fewer than `2k+1` prototypes.
    pub truncated: bool,
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Greedy farthest-point selection of `budget` rows of the `n × dim` matrix
/// `points`, starting at `start`. Returns the selected indices (in selection
/// order) and the covering radius of the selection over all points.
pub fn greedy_k_center(points: &[f32], dim: usize, budget: usize, start: usize) -> (Vec<usize>, f64) {
    let n = points.len() / dim;
    if n == 0 || budget == 0 {
        return (Vec::new(), f64::INFINITY);
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let budget = budget.min(n);
    let mut selected = Vec::with_capacity(budget);
    let mut min_d = vec![f64::INFINITY; n];
    let mut next = start.min(n - 1);
    loop {
        selected.push(next);
        let c = row(next);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = sq_dist(row(i), c);
            if nd < *d {
                *d = nd;
            }
        }
        // farthest remaining point, ties to the lowest index
        let (far, far_d) =
            min_d.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        if selected.len() == budget {
            return (selected, far_d.sqrt());
        }
        next = far;
    }
}

fn project(points: &[f32], dim: usize, out_dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream(seed, &[0x9e0]);
    let scale = 1.0 / (out_dim as f64).sqrt();
    let proj: Vec<f64> = (0..dim * out_dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    let n = points.len() / dim;
    let mut out = Vec::with_capacity(n * out_dim);
    for i in 0..n {
        let x = &points[i * dim..(i + 1) * dim];
        for o in 0..out_dim {
            let p = &proj[o * dim..(o + 1) * dim];
            out.push(x.iter().zip(p).map(|(a, b)| *a as f64 * b).sum::<f64>() as f32);
        }
    }
    out
}

impl MemoryBank {
    /// Builds a bank from the rows of `features` (`n × dim`, row-major),
    /// keeping `ceil(fraction · n)` prototypes chosen by greedy k-center.
    pub fn build(
        modality: Modality,
        dim: usize,
        features: &[f32],
        refs: Vec<SourceRef>,
        params: &CoresetParams,
    ) -> Result<Self> {
        if dim == 0 || features.is_empty() {
            return Err(Error::EmptyBank);
        }
        if features.len() % dim != 0 || features.len() / dim != refs.len() {
            return Err(Error::shape(format!("{} values, {} refs, dim {dim}", features.len(), refs.len())));
        }
        if !(params.fraction > 0.0 && params.fraction <= 1.0) {
            return Err(Error::config(format!("coreset fraction {} outside (0, 1]", params.fraction)));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite feature at {i}")));
        }
        let n = refs.len();
        let budget = ((params.fraction * n as f64).ceil() as usize).clamp(1, n);
        let selected = if budget == n {
            (0..n).collect()
        } else {
            match params.projection_dim {
                Some(p) if p > 0 && p < dim => {
                    let projected = project(features, dim, p, params.seed);
                    greedy_k_center(&projected, p, budget, params.start).0
                }
                _ => greedy_k_center(features, dim, budget, params.start).0,
            }
        };
        let mut prototypes = Vec::with_capacity(selected.len() * dim);
        let mut source_refs = Vec::with_capacity(selected.len());
        for &i in &selected {
            prototypes.extend_from_slice(&features[i * dim..(i + 1) * dim]);
            source_refs.push(refs[i].clone());
        }
        Ok(Self { modality, dim, prototypes, source_refs, coreset_fraction: params.fraction })
    }

    /// Bank that stores the given prototypes verbatim.
    pub fn from_prototypes(
        modality: Modality,
        dim: usize,
        prototypes: Vec<f32>,
        source_refs: Vec<SourceRef>,
        coreset_fraction: f64,
    ) -> Result<Self> {
        if dim == 0 || prototypes.is_empty() {
            return Err(Error::EmptyBank);
        }
        if prototypes.len() != dim * source_refs.len() {
            return Err(Error::shape("prototype count does not match source refs"));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("non-finite prototype"));
        }
        Ok(Self { modality, dim, prototypes, source_refs, coreset_fraction })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.source_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_refs.is_empty()
    }

    pub fn coreset_fraction(&self) -> f64 {
        self.coreset_fraction
    }

    pub fn source_refs(&self) -> &[SourceRef] {
        &self.source_refs
    }

    pub fn prototypes(&self) -> &[f32] {
        &self.prototypes
    }

    #[inline]
    pub fn prototype(&self, i: usize) -> &[f32] {
        &self.prototypes[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, f: &[f32]) -> Result<()> {
        if f.len() != self.dim {
            return Err(Error::shape(format!(
                "{} query of length {} against bank dim {}",
                self.modality.as_str(),
                f.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Exact brute-force `2k+1` nearest neighbours, ties to the lower index.
    pub fn query_neighbors(&self, f: &[f32], k: usize) -> Result<NeighborSet> {
        self.check_dim(f)?;
        let want = 2 * k + 1;
        let mut all: Vec<(f64, usize)> = (0..self.len()).map(|i| (sq_dist(f, self.prototype(i)), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let take = want.min(all.len());
        if take < all.len() {
            all.select_nth_unstable_by(take, cmp);
            all.truncate(take);
        }
        all.sort_by(cmp);
        Ok(NeighborSet {
            indices: all.iter().map(|p| p.1).collect(),
            distances: all.iter().map(|p| p.0.sqrt() as f32).collect(),
            truncated: self.len() < want,
        })
    }

    pub fn nearest_distance(&self, f: &[f32]) -> Result<f32> {
        Ok(self.query_neighbors(f, 0)?.distances[0])
    }

    /// Largest distance from any row of `features` to its nearest prototype.
    pub fn covering_radius(&self, features: &[f32]) -> Result<f64> {
        let mut worst = 0.0f64;
        for x in features.chunks_exact(self.dim) {
            worst = worst.max(self.nearest_distance(x)? as f64);
        }
        Ok(worst)
    }
}

/// The two banks used together everywhere downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct BankPair {
    pub pc: MemoryBank,
    pub rgb: MemoryBank,
}

impl BankPair {
    pub fn get(&self, m: Modality) -> &MemoryBank {
        match m {
            Modality::PointCloud => &self.pc,
            Modality::Rgb => &self.rgb,
        }
    }
}

impl MemoryBank {
    /// Writes `<stem>.g2t` (prototypes) and `<stem>.refs.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let t = Tensor::f32(vec![self.len(), self.dim], self.prototypes.clone())
            .with_meta("kind", "memory_bank")
            .with_meta("modality", self.modality.as_str())
            .with_meta("coreset_fraction", self.coreset_fraction);
        write_tensor(&dir.join(format!("{stem}.g2t")), &t)?;
        fs::write(dir.join(format!("{stem}.refs.json")), serde_json::to_vec(&self.source_refs)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let t = read_tensor(&dir.join(format!("{stem}.g2t")))?;
        if t.meta_str("kind") != Some("memory_bank") || t.shape.len() != 2 {
            return Err(Error::format(12, "not a memory bank container"));
        }
        let modality = t
            .meta_str("modality")
            .and_then(Modality::parse)
            .ok_or_else(|| Error::format(12, "memory bank without a known modality"))?;
        let fraction = t
            .meta
            .get("coreset_fraction")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::format(12, "memory bank without coreset_fraction"))?;
        let dim = t.shape[1];
        let refs: Vec<SourceRef> = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.refs.json")))?)?;
        Self::from_prototypes(modality, dim, t.into_f32()?, refs, fraction)
    }
}

impl BankPair {
    /// Stores both banks as `pc.*` and `rgb.*` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.pc.save(dir, Modality::PointCloud.as_str())?;
        self.rgb.save(dir, Modality::Rgb.as_str())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let pair = Self {
            pc: MemoryBank::load(dir, Modality::PointCloud.as_str())?,
            rgb: MemoryBank::load(dir, Modality::Rgb.as_str())?,
        };
        if pair.pc.modality() != Modality::PointCloud || pair.rgb.modality() != Modality::Rgb {
            return Err(Error::format(12, "bank files hold the wrong modalities"));
        }
        Ok(pair)
    }
}

/// Collects all foreground features of one modality with their origins.
pub fn foreground_features(samples: &[crate::features::SamplePair], m: Modality) -> (Vec<f32>, Vec<SourceRef>) {
    let mut data = Vec::new();
    let mut refs = Vec::new();
    for s in samples {
        let map = s.map(m);
        for cell in map.foreground_cells() {
            data.extend_from_slice(map.feature(cell));
            refs.push(SourceRef { sample_id: s.sample_id.clone(), row: cell / map.width, col: cell % map.width });
        }
    }
    (data, refs)
}

/// Builds both banks from the foreground of the training samples.
pub fn build_banks(train: &[crate::features::SamplePair], params: &CoresetParams) -> Result<BankPair> {
    let build = |m: Modality| {
        let (data, refs) = foreground_features(train, m);
        let dim = train.first().map(|s| s.map(m).dim).unwrap_or(0);
        MemoryBank::build(m, dim, &data, refs, params)
    };
    Ok(BankPair { pc: build(Modality::PointCloud)?, rgb: build(Modality::Rgb)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: usize) -> Vec<SourceRef> {
        (0..n).map(|i| SourceRef { sample_id: "s".into(), row: 0, col: i }).collect()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = MemoryBank::from_prototypes(Modality::Rgb, 2, vec![0.1, 0.2, 0.3, 0.4], refs(2), 0.5).unwrap();
        bank.save(dir.path(), "b").unwrap();
        assert_eq!(MemoryBank::load(dir.path(), "b").unwrap(), bank);
    }

    #[test]
    fn one_dimensional_trace() {
        let pts = [0.0f32, 1.0, 2.0, 10.0];
        let (sel, radius) = greedy_k_center(&pts, 1, 2, 0);
        assert_eq!(sel, vec![0, 3]);
        assert!((radius - 2.0).abs() < 1e-12);
        let bank = MemoryBank::build(
            Modality::PointCloud,
            1,
            &pts,
            refs(4),
            &CoresetParams { fraction: 0.5, ..Default::default() },
        )
        .unwrap();
        assert_eq!(bank.prototypes(), &[0.0, 10.0]);
        assert!((bank.covering_radius(&pts).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let pts = [0.5f32, 1.5, -3.0, 2.0, 7.0, 7.0];
        let bank =
            MemoryBank::build(Modality::Rgb, 2, &pts, refs(3), &CoresetParams { fraction: 1.0, ..Default::default() })
                .unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.covering_radius(&pts).unwrap(), 0.0);
    }

    #[test]
    fn empty_input() {
        assert!(matches!(
            MemoryBank::build(Modality::Rgb, 2, &[], vec![], &CoresetParams::default()),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn hand_euclidean_query() {
        let bank = MemoryBank::from_prototypes(Modality::Rgb, 2, vec![0.0, 0.0, 3.0, 4.0], refs(2), 1.0).unwrap();
        let n = bank.query_neighbors(&[0.0, 0.0], 0).unwrap();
        assert_eq!((n.indices[0], n.distances[0]), (0, 0.0));
        let n = bank.query_neighbors(&[3.0, 0.0], 0).unwrap();
        assert_eq!((n.indices[0], n.distances[0]), (0, 3.0));
        assert!(bank.query_neighbors(&[1.0], 0).is_err());
    }

    #[test]
    fn truncation_flag() {
        let bank = MemoryBank::from_prototypes(Modality::Rgb, 1, vec![0.0, 1.0, 2.0, 3.0], refs(4), 1.0).unwrap();
        let n = bank.query_neighbors(&[0.2], 5).unwrap();
        assert_eq!(n.indices.len(), 4);
        assert!(n.truncated);
        assert_eq!(n.indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let bank = MemoryBank::from_prototypes(Modality::Rgb, 1, vec![1.0, -1.0, 1.0], refs(3), 1.0).unwrap();
        let n = bank.query_neighbors(&[0.0], 1).unwrap();
        assert_eq!(n.indices, vec![0, 1, 2]);
    }

    #[test]
    fn projection_keeps_full_dim_prototypes() {
        let pts: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let bank = MemoryBank::build(
            Modality::PointCloud,
            4,
            &pts,
            refs(10),
            &CoresetParams { fraction: 0.3, projection_dim: Some(2), ..Default::default() },
        )
        .unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.dim(), 4);
        assert_eq!(bank.prototype(0), &pts[..4]);
    }
}
