//! Desk-scale stand-in for a real two-modality dataset.
//!
//! Normal features of a foreground cell are a smooth spatial blend of a few
//! cluster centres, plus a per-cell "texture" displacement confined to a
//! low-rank subspace, plus small isotropic noise. Texture displacements of the
//! two modalities are correlated with coefficient `rho`. Test anomalies
//! translate the features of a noise-mask region in one or both modalities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::map::{AnomalyKind, FeatureMap, Modality, PixelMask, SamplePair};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::synthesis::{gen_perlin_mask, perlin_field, PerlinParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: (usize, usize),
    pub dims: (usize, usize),
    pub n_train: usize,
    pub n_test: usize,
    pub n_clusters: usize,
    pub texture_rank: usize,
    pub texture_sigma: f64,
    pub noise_sigma: f64,
    pub rho: f64,
    pub anomaly_fraction: f64,
    pub anomaly_modes: Vec<AnomalyKind>,
    /// Translation length of a single-modality anomaly, in units of `noise_sigma`.
    pub anomaly_offset: f64,
    /// Per-modality translation of a joint anomaly relative to `anomaly_offset`.
    pub joint_scale: f64,
    pub pixel_factor: usize,
    pub mix_frequency: f64,
    /// Softmax sharpness of the material blend; `None` assigns each cell to
    /// a single material.
    pub mix_sharpness: Option<f64>,
    pub mask: PerlinParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: (16, 16),
            dims: (8, 8),
            n_train: 64,
            n_test: 48,
            n_clusters: 3,
            texture_rank: 2,
            texture_sigma: 0.3,
            noise_sigma: 0.05,
            rho: 0.5,
            anomaly_fraction: 0.5,
            anomaly_modes: AnomalyKind::ALL.to_vec(),
            anomaly_offset: 8.0,
            joint_scale: 0.7,
            pixel_factor: 4,
            mix_frequency: 1.5,
            mix_sharpness: None,
            mask: PerlinParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.dims.0 < 2 || self.dims.1 < 2 {
            return bad("feature dims must be at least 2");
        }
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return bad("grid must be at least 2x2");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive");
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be positive");
        }
        if self.texture_rank > self.dims.0.min(self.dims.1) {
            return bad("texture_rank exceeds the feature dims");
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return bad("rho and anomaly_fraction must lie in [0, 1]");
        }
        if self.anomaly_modes.is_empty() && self.anomaly_fraction > 0.0 {
            return bad("anomaly_modes is empty");
        }
        if self.pixel_factor == 0 {
            return bad("pixel_factor must be >= 1");
        }
        if !(self.noise_sigma > 0.0 && self.texture_sigma >= 0.0 && self.anomaly_offset >= 0.0) {
            return bad("noise_sigma must be positive, texture_sigma/anomaly_offset nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

struct ModalityModel {
    dim: usize,
    centres: Vec<Vec<f64>>,
    texture_basis: Vec<Vec<f64>>,
    /// Orthonormal basis of the span of centres and texture directions.
    normal_span: Vec<Vec<f64>>,
    background: Vec<f64>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn orthonormal_columns<R: Rng>(rng: &mut R, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn orthonormalize(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut v = v.clone();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

impl ModalityModel {
    fn new(rng: &mut ChaCha8Rng, dim: usize, cfg: &SynthConfig) -> Self {
        let centres: Vec<Vec<f64>> = (0..cfg.n_clusters).map(|_| gaussian_vec(rng, dim)).collect();
        let texture_basis = orthonormal_columns(rng, dim, cfg.texture_rank);
        let spanning: Vec<Vec<f64>> = centres.iter().chain(&texture_basis).cloned().collect();
        // background is the pure first material
        let background = centres[0].clone();
        Self { dim, normal_span: orthonormalize(&spanning), centres, texture_basis, background }
    }

    /// Unit direction orthogonal to the normal span when one exists.
    fn anomaly_direction(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.normal_span.len() >= self.dim {
            return unit_vec(rng, self.dim);
        }
        loop {
            let mut v = gaussian_vec(rng, self.dim);
            for b in &self.normal_span {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

fn ellipse_foreground(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let cy = h as f64 / 2.0 + rng.random_range(-0.05..0.05) * h as f64;
    let cx = w as f64 / 2.0 + rng.random_range(-0.05..0.05) * w as f64;
    let ry = rng.random_range(0.34..0.46) * h as f64;
    let rx = rng.random_range(0.34..0.46) * w as f64;
    let mut fg = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 + 0.5 - cy) / ry;
            let dx = (c as f64 + 0.5 - cx) / rx;
            fg[r * w + c] = dx * dx + dy * dy <= 1.0;
        }
    }
    if !fg.iter().any(|b| *b) {
        fg[(h / 2) * w + w / 2] = true;
    }
    fg
}

/// Softmax of the material fields at a cell, or a hard assignment to the
/// strongest material.
fn mixture_weights(fields: &[Vec<f64>], cell: usize, sharpness: Option<f64>) -> Vec<f64> {
    let best = (0..fields.len()).max_by(|&a, &b| fields[a][cell].total_cmp(&fields[b][cell])).unwrap_or(0);
    let Some(sharpness) = sharpness else {
        return (0..fields.len()).map(|i| f64::from(u8::from(i == best))).collect();
    };
    let mx = fields[best][cell] * sharpness;
    fields.iter().map(|f| (f[cell] * sharpness - mx).exp()).collect()
}

fn normal_sample(
    cfg: &SynthConfig,
    models: &[ModalityModel; 2],
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePair> {
    let (h, w) = cfg.grid;
    let cells = h * w;
    let fg = ellipse_foreground(rng, h, w);
    let fields: Vec<Vec<f64>> = (0..cfg.n_clusters).map(|_| perlin_field(h, w, cfg.mix_frequency, 1, rng)).collect();
    let rank = cfg.texture_rank;
    let shared = (1.0 - cfg.rho * cfg.rho).sqrt();

    let mut data = [Vec::with_capacity(cells * models[0].dim), Vec::with_capacity(cells * models[1].dim)];
    for cell in 0..cells {
        let t_pc = gaussian_vec(rng, rank);
        let t_fresh = gaussian_vec(rng, rank);
        let t_rgb: Vec<f64> = t_pc.iter().zip(&t_fresh).map(|(a, b)| cfg.rho * a + shared * b).collect();
        let ex = mixture_weights(&fields, cell, cfg.mix_sharpness);
        let z: f64 = ex.iter().sum();

        for (mi, model) in models.iter().enumerate() {
            let t = if mi == 0 { &t_pc } else { &t_rgb };
            let noise = gaussian_vec(rng, model.dim);
            for d in 0..model.dim {
                let base = if fg[cell] {
                    let mix: f64 = model.centres.iter().zip(&ex).map(|(c, e)| c[d] * e / z).sum();
                    let tex: f64 = (0..rank).map(|q| model.texture_basis[q][d] * t[q] * cfg.texture_sigma).sum();
                    mix + tex
                } else {
                    model.background[d]
                };
                data[mi].push((base + cfg.noise_sigma * noise[d]) as f32);
            }
        }
    }
    let [pc_data, rgb_data] = data;
    let mut pc = FeatureMap::new(Modality::PointCloud, h, w, models[0].dim, pc_data)?;
    let mut rgb = FeatureMap::new(Modality::Rgb, h, w, models[1].dim, rgb_data)?;
    pc.foreground = fg.clone();
    rgb.foreground = fg;
    Ok(SamplePair { sample_id: id, pc, rgb, pixel_gt: None, image_label: None, anomaly: None })
}

fn anomaly_mask(cfg: &SynthConfig, fg: &[bool], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = cfg.grid;
    for _ in 0..32 {
        let m = gen_perlin_mask(h, w, &cfg.mask, rng);
        let grid: Vec<bool> = m.grid.iter().zip(fg).map(|(a, b)| *a && *b).collect();
        if grid.iter().any(|b| *b) {
            return grid;
        }
    }
    let mut grid = vec![false; h * w];
    let centre = fg.iter().position(|b| *b).unwrap_or(0);
    grid[centre] = true;
    grid
}

/// Generates a train split of normal samples and a labelled test split.
/// The output is a pure function of `(cfg, seed)`.
pub fn gen_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut global = stream(seed, &[0]);
    let models = [ModalityModel::new(&mut global, cfg.dims.0, cfg), ModalityModel::new(&mut global, cfg.dims.1, cfg)];

    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        let mut rng = stream(seed, &[1, i as u64]);
        train.push(normal_sample(cfg, &models, format!("train_{i:03}"), &mut rng)?);
    }

    let n_anom = (cfg.n_test as f64 * cfg.anomaly_fraction).round() as usize;
    let n_normal = cfg.n_test - n_anom;
    let (h, w) = cfg.grid;
    let mut test = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_test {
        let mut rng = stream(seed, &[2, i as u64]);
        let mut s = normal_sample(cfg, &models, format!("test_{i:03}"), &mut rng)?;
        let mut grid_gt = vec![false; h * w];
        if i >= n_normal {
            let kind = cfg.anomaly_modes[(i - n_normal) % cfg.anomaly_modes.len()];
            grid_gt = anomaly_mask(cfg, s.foreground(), &mut rng);
            for m in Modality::BOTH {
                if !kind.affects(m) {
                    continue;
                }
                let scale = if kind == AnomalyKind::Joint { cfg.joint_scale } else { 1.0 };
                let dir = models[m.index()].anomaly_direction(&mut rng);
                let map = s.map_mut(m);
                let len = cfg.anomaly_offset * cfg.noise_sigma * scale;
                for cell in (0..h * w).filter(|&c| grid_gt[c]) {
                    for (v, u) in map.feature_mut(cell).iter_mut().zip(&dir) {
                        *v = (*v as f64 + len * u) as f32;
                    }
                }
            }
            s.anomaly = Some(kind);
        }
        s.image_label = Some(u8::from(i >= n_normal));
        s.pixel_gt = Some(PixelMask { height: h, width: w, data: grid_gt }.upscale(cfg.pixel_factor));
        test.push(s);
    }
    Ok(SyntheticDataset { train, test })
}
