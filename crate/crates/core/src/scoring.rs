//! Anomaly scores from the learned metric.
//!
//! A cell's score aggregates its metric values over the `k+1` nearest
//! prototype pairs (the minimum by default); a sample's score is the maximum
//! over its foreground cells. Pixel maps are bilinearly upsampled and then
//! Gaussian-smoothed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::BankPair;
use crate::error::{Error, Result};
use crate::features::{read_tensor, write_tensor, Modality, SamplePair, Tensor};
use crate::geometry::{encode, DistanceNormalizer, GeometricEncoding};
use crate::lspn::{metric, position_scales, LspnInput, LspnModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Min,
    Max,
    Mean,
    /// `l_{i,0}` alone.
    First,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Aggregation::First, Aggregation::Max, Aggregation::Mean, Aggregation::Min];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Min => "min",
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
            Aggregation::First => "first",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

/// Aggregates the metric values of neighbour ranks `0..=k`.
pub fn aggregate(l: &[f64], agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Min => l.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Max => l.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => l.iter().sum::<f64>() / l.len() as f64,
        Aggregation::First => l[0],
    }
}

/// Score definitions compared in the ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreVariant {
    /// Euclidean nearest-prototype distance `s^m_{i,0}` of one modality.
    Unimodal(Modality),
    /// Raw predicted scale `w^m_{i,0}`.
    Scale(Modality),
    Fused(Aggregation),
}

impl ScoreVariant {
    pub fn label(self) -> String {
        match self {
            ScoreVariant::Unimodal(m) => format!("s_{}", m.as_str()),
            ScoreVariant::Scale(m) => format!("w_{}", m.as_str()),
            ScoreVariant::Fused(a) => format!("fused_{}", a.as_str()),
        }
    }
}

/// Everything needed to derive any [`ScoreVariant`] for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    /// `l_{i,j}` for `j = 0..=k`.
    pub l: Vec<f64>,
    pub w0: [f64; 2],
    pub s0: [f64; 2],
}

impl CellMetrics {
    pub fn score(&self, v: ScoreVariant) -> f64 {
        match v {
            ScoreVariant::Unimodal(m) => self.s0[m.index()],
            ScoreVariant::Scale(m) => self.w0[m.index()],
            ScoreVariant::Fused(a) => aggregate(&self.l, a),
        }
    }
}

/// Min-aggregated score of one position from its `k+1` neighbour encodings.
pub fn score_cell(
    model: &LspnModel<f32>,
    banks: &BankPair,
    enc_pc: &[GeometricEncoding],
    enc_rgb: &[GeometricEncoding],
    k: usize,
    foreground: bool,
) -> Result<f64> {
    if enc_pc.len() <= k || enc_rgb.len() <= k {
        return Err(Error::shape(format!(
            "scoring needs neighbour ranks 0..={k}, got {} / {}",
            enc_pc.len(),
            enc_rgb.len()
        )));
    }
    let sigma = model.sigma().map(|s| s as f64);
    let mut l = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let (a, b) = position_scales(model, banks, &enc_pc[j], &enc_rgb[j], foreground)?;
        let s = [enc_pc[j].distance as f64, enc_rgb[j].distance as f64];
        l.push(metric([a as f64, b as f64], s, sigma));
    }
    Ok(aggregate(&l, Aggregation::Min))
}

/// Metrics of every cell of a sample (row-major), neighbour ranks `0..=k`.
/// Background cells bypass the network with `w = (1, 1)`.
pub fn sample_metrics(
    model: &LspnModel<f32>,
    pair: &SamplePair,
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    k: usize,
) -> Result<Vec<CellMetrics>> {
    let cells = pair.pc.cells();
    let n = k + 1;
    let fg = pair.foreground();
    let mut encs = Vec::with_capacity(cells);
    // `encode` takes the half-width: ceil(k/2) gives at least k+1 ranks.
    let half = k.div_ceil(2);
    for cell in 0..cells {
        let pc = encode(pair.pc.feature(cell), &banks.pc, half, normalizer.mean_pc)?;
        let rgb = encode(pair.rgb.feature(cell), &banks.rgb, half, normalizer.mean_rgb)?;
        if pc.len() < n || rgb.len() < n {
            return Err(Error::shape(format!("banks too small for {n} neighbour ranks")));
        }
        encs.push((pc, rgb));
    }
    let fg_rows: Vec<usize> = (0..cells).filter(|&c| fg[c]).collect();
    let mut input = LspnInput::<f32>::with_capacity(fg_rows.len() * n, model.config.input_width());
    for &c in &fg_rows {
        for j in 0..n {
            input.push_encodings(banks, &encs[c].0[j], &encs[c].1[j])?;
        }
    }
    let w = if fg_rows.is_empty() { Vec::new() } else { model.predict(&input.build())?.into_vec() };
    let sigma = model.sigma().map(|s| s as f64);
    let mut fg_pos = vec![usize::MAX; cells];
    for (r, &c) in fg_rows.iter().enumerate() {
        fg_pos[c] = r;
    }
    Ok((0..cells)
        .map(|c| {
            let (pc, rgb) = &encs[c];
            let scales = |j: usize| -> [f64; 2] {
                if fg[c] {
                    let r = fg_pos[c] * n + j;
                    [w[2 * r] as f64, w[2 * r + 1] as f64]
                } else {
                    [1.0, 1.0]
                }
            };
            let l = (0..n).map(|j| metric(scales(j), [pc[j].distance as f64, rgb[j].distance as f64], sigma)).collect();
            CellMetrics { l, w0: scales(0), s0: [pc[0].distance as f64, rgb[0].distance as f64] }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub grid_scores: Vec<f64>,
    pub foreground: Vec<bool>,
    /// `(height, width, values)` at pixel resolution.
    pub upsampled: Option<(usize, usize, Vec<f64>)>,
    pub sample_score: f64,
}

impl ScoreMap {
    pub fn from_grid(
        sample_id: &str,
        height: usize,
        width: usize,
        grid_scores: Vec<f64>,
        foreground: Vec<bool>,
    ) -> Self {
        let sample_score = if foreground.iter().any(|f| *f) {
            grid_scores.iter().zip(&foreground).filter(|(_, f)| **f).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max)
        } else {
            log::warn!("{sample_id}: empty foreground, sample score set to 0");
            0.0
        };
        Self { sample_id: sample_id.to_string(), height, width, grid_scores, foreground, upsampled: None, sample_score }
    }

    /// Pixel map if present, else the grid.
    pub fn pixels(&self) -> (usize, usize, &[f64]) {
        match &self.upsampled {
            Some((h, w, v)) => (*h, *w, v),
            None => (self.height, self.width, &self.grid_scores),
        }
    }
}

pub fn map_from_metrics(pair: &SamplePair, metrics: &[CellMetrics], variant: ScoreVariant) -> ScoreMap {
    let (h, w) = pair.grid();
    ScoreMap::from_grid(
        &pair.sample_id,
        h,
        w,
        metrics.iter().map(|m| m.score(variant)).collect(),
        pair.foreground().to_vec(),
    )
}

/// Grid score map of one sample under an aggregation strategy.
pub fn score_sample(
    model: &LspnModel<f32>,
    pair: &SamplePair,
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    k: usize,
    agg: Aggregation,
) -> Result<ScoreMap> {
    let metrics = sample_metrics(model, pair, banks, normalizer, k)?;
    Ok(map_from_metrics(pair, &metrics, ScoreVariant::Fused(agg)))
}

/// Bilinear upsampling with half-pixel centres and clamped edges.
pub fn bilinear_upsample(h: usize, w: usize, v: &[f64], factor: usize) -> (usize, usize, Vec<f64>) {
    let (oh, ow) = (h * factor, w * factor);
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w);
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bottom = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    (oh, ow, out)
}

/// Half-sample symmetric reflection into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur, radius `ceil(2σ)`, reflective border.
pub fn gaussian_blur(h: usize, w: usize, v: &[f64], sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return v.to_vec();
    }
    let r = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                kernel.iter().enumerate().map(|(t, k)| k * v[y * w + reflect(x as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                kernel.iter().enumerate().map(|(t, k)| k * tmp[reflect(y as isize + t as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Upsamples the grid by `factor` and blurs with `sigma` (pixel units).
pub fn upsample_smooth(map: &ScoreMap, factor: usize, sigma: f64) -> Result<ScoreMap> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be >= 1"));
    }
    let (oh, ow, up) = bilinear_upsample(map.height, map.width, &map.grid_scores, factor);
    let smooth = gaussian_blur(oh, ow, &up, sigma);
    let mut out = map.clone();
    out.upsampled = Some((oh, ow, smooth));
    Ok(out)
}

/// Writes the pixel map (or the grid) as a `score_map` tensor.
pub fn write_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    let (h, w, v) = map.pixels();
    let t = Tensor::f32(vec![h, w], v.iter().map(|x| *x as f32).collect())
        .with_meta("kind", "score_map")
        .with_meta("sample_id", map.sample_id.as_str())
        .with_meta("sample_score", map.sample_score);
    write_tensor(path, &t)
}

/// Reads a map written by [`write_score_map`] as `(sample_id, h, w, values)`.
pub fn read_score_map(path: &Path) -> Result<(String, usize, usize, Vec<f32>)> {
    let t = read_tensor(path)?;
    if t.meta_str("kind") != Some("score_map") || t.shape.len() != 2 {
        return Err(Error::format(0, "not a score map container"));
    }
    let id = t.meta_str("sample_id").unwrap_or_default().to_string();
    let (h, w) = (t.shape[0], t.shape[1]);
    Ok((id, h, w, t.into_f32()?))
}

/// Rebuilds a [`ScoreMap`] from a file written by [`write_score_map`]. The
/// stored map becomes both the grid and the pixel map, with no foreground.
pub fn load_score_map(path: &Path) -> Result<ScoreMap> {
    let t = read_tensor(path)?;
    let sample_score = t
        .meta
        .get("sample_score")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::format(12, "score map without sample_score"))?;
    let (id, h, w, v) = read_score_map(path)?;
    let v: Vec<f64> = v.into_iter().map(f64::from).collect();
    Ok(ScoreMap {
        sample_id: id,
        height: h,
        width: w,
        grid_scores: v.clone(),
        foreground: Vec::new(),
        upsampled: Some((h, w, v)),
        sample_score,
    })
}

/// Plain CSV of a map, one row per line.
pub fn to_csv(h: usize, w: usize, v: &[f64]) -> String {
    let mut s = String::new();
    for y in 0..h {
        let row: Vec<String> = v[y * w..(y + 1) * w].iter().map(|x| format!("{x:.6}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_examples() {
        let l = [1.2, 0.9, 1.5];
        assert_eq!(aggregate(&l, Aggregation::Min), 0.9);
        assert_eq!(aggregate(&l, Aggregation::First), 1.2);
        assert_eq!(aggregate(&l, Aggregation::Max), 1.5);
        assert!((aggregate(&l, Aggregation::Mean) - 1.2).abs() < 1e-12);
        assert_eq!(aggregate(&[0.7], Aggregation::Min), 0.7);
    }

    #[test]
    fn bilinear_ramp() {
        let (h, w, v) = bilinear_upsample(2, 2, &[0.0, 1.0, 2.0, 3.0], 2);
        assert_eq!((h, w), (4, 4));
        let expect = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_constant() {
        let map = ScoreMap::from_grid("x", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![true; 6]);
        let same = upsample_smooth(&map, 1, 0.0).unwrap();
        assert_eq!(same.upsampled.unwrap().2, map.grid_scores);
        let c = ScoreMap::from_grid("c", 4, 4, vec![2.5; 16], vec![true; 16]);
        let out = upsample_smooth(&c, 4, 4.0).unwrap();
        assert!(out.upsampled.unwrap().2.iter().all(|v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn isolated_peak_stays_put() {
        let mut g = vec![0.0; 64];
        g[2 * 8 + 5] = 1.0;
        let m = ScoreMap::from_grid("p", 8, 8, g, vec![true; 64]);
        let out = upsample_smooth(&m, 1, 1.5).unwrap();
        let v = out.upsampled.unwrap().2;
        let arg = (0..64).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(arg, 2 * 8 + 5);
    }

    #[test]
    fn sample_score_ignores_background() {
        let m = ScoreMap::from_grid("b", 1, 3, vec![0.2, 9.0, 0.4], vec![true, false, true]);
        assert_eq!(m.sample_score, 0.4);
        let empty = ScoreMap::from_grid("e", 1, 2, vec![3.0, 4.0], vec![false, false]);
        assert_eq!(empty.sample_score, 0.0);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(9, 4), 1);
    }
}
