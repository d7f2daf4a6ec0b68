//! Thresholded gradient-noise masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerlinParams {
    pub octaves: u32,
    /// Lattice cells across the grid at the first octave.
    pub frequency: f64,
    pub threshold: f64,
    pub min_cov: f64,
    pub max_cov: f64,
    pub max_resamples: u32,
}

impl Default for PerlinParams {
    fn default() -> Self {
        Self { octaves: 2, frequency: 3.0, threshold: 0.25, min_cov: 0.02, max_cov: 0.35, max_resamples: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerlinMask {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<bool>,
    pub params: PerlinParams,
    /// Threshold actually applied (differs from `params.threshold` after clamping).
    pub threshold: f64,
    pub coverage: f64,
    pub resamples: u32,
    pub clamped: bool,
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic 2-D gradient noise sampled at cell centres, summed over octaves
/// with halving amplitude and normalised by the total amplitude.
pub fn perlin_field<R: Rng + ?Sized>(h: usize, w: usize, frequency: f64, octaves: u32, rng: &mut R) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    let side = h.max(w) as f64;
    for o in 0..octaves.max(1) {
        let freq = frequency * f64::powi(2.0, o as i32);
        let n = freq.ceil() as usize + 2;
        let grads: Vec<(f64, f64)> = (0..n * n)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let y = (r as f64 + 0.5) / side * freq;
                let x = (c as f64 + 0.5) / side * freq;
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                let corner = |ix: usize, iy: usize, dx: f64, dy: f64| {
                    let g = grads[iy * n + ix];
                    g.0 * dx + g.1 * dy
                };
                let n00 = corner(x0, y0, fx, fy);
                let n10 = corner(x0 + 1, y0, fx - 1.0, fy);
                let n01 = corner(x0, y0 + 1, fx, fy - 1.0);
                let n11 = corner(x0 + 1, y0 + 1, fx - 1.0, fy - 1.0);
                let (u, v) = (fade(fx), fade(fy));
                let top = n00 + u * (n10 - n00);
                let bottom = n01 + u * (n11 - n01);
                field[r * w + c] += amp * (top + v * (bottom - top));
            }
        }
        total += amp;
        amp *= 0.5;
    }
    for v in &mut field {
        *v /= total;
    }
    field
}

/// Binarised noise mask whose coverage lies in `[min_cov, max_cov]`.
///
/// Fields whose coverage misses the band are redrawn up to `max_resamples`
/// times; after that the threshold of the last field is moved so that the
/// coverage is clamped into the band.
pub fn gen_perlin_mask<R: Rng + ?Sized>(h: usize, w: usize, params: &PerlinParams, rng: &mut R) -> PerlinMask {
    let n = h * w;
    let in_band = |cov: f64| cov >= params.min_cov && cov <= params.max_cov;
    let mut field = Vec::new();
    for attempt in 0..=params.max_resamples {
        field = perlin_field(h, w, params.frequency, params.octaves, rng);
        let grid: Vec<bool> = field.iter().map(|v| *v > params.threshold).collect();
        let cov = grid.iter().filter(|b| **b).count() as f64 / n as f64;
        if in_band(cov) {
            return PerlinMask {
                height: h,
                width: w,
                grid,
                params: params.clone(),
                threshold: params.threshold,
                coverage: cov,
                resamples: attempt,
                clamped: false,
            };
        }
    }

    let count = field.iter().filter(|v| **v > params.threshold).count();
    let lo = (params.min_cov * n as f64).ceil() as usize;
    let hi = (params.max_cov * n as f64).floor() as usize;
    let target = count.clamp(lo.min(hi).max(1), hi.max(1)).min(n);
    // take exactly the `target` highest cells, ties to lower index
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut grid = vec![false; n];
    for &i in &order[..target] {
        grid[i] = true;
    }
    let threshold = field[order[target - 1]];
    PerlinMask {
        height: h,
        width: w,
        grid,
        params: params.clone(),
        threshold,
        coverage: target as f64 / n as f64,
        resamples: params.max_resamples,
        clamped: true,
    }
}
