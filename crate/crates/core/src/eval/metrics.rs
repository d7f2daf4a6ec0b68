use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Rank-based AUROC (Mann–Whitney U with average ranks for ties).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    if scores.iter().all(|s| *s == scores[0]) {
        return Err(Error::UndefinedMetric("all scores are equal".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// 8-connected components of a mask, each as sorted pixel indices, in
/// order of their first pixel.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// One sample's pixel scores and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct PixelSample<'a> {
    pub height: usize,
    pub width: usize,
    pub scores: &'a [f64],
    pub gt: &'a [bool],
}

/// Trapezoidal area under `(fpr, pro)` points (sorted by fpr) on
/// `[0, limit]`, interpolating at the limit, divided by `limit`.
pub(crate) fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    // Interior points of flat runs add nothing but rounding; dropping them
    // keeps a plateau's area exact (a perfect detector scores exactly 1).
    let kept: Vec<(f64, f64)> = points
        .iter()
        .enumerate()
        .filter(|&(i, p)| i == 0 || i + 1 == points.len() || !(points[i - 1].1 == p.1 && points[i + 1].1 == p.1))
        .map(|(_, p)| *p)
        .collect();
    let mut area = 0.0;
    for win in kept.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

/// PRO curve `(fpr, pro)` from a descending sweep over exact score values,
/// starting at `(0, 0)` (threshold `+∞`).
pub fn pro_curve(samples: &[PixelSample]) -> Result<Vec<(f64, f64)>> {
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut comp_size: Vec<usize> = Vec::new();
    for s in samples {
        if s.scores.len() != s.height * s.width || s.gt.len() != s.scores.len() {
            return Err(Error::shape(format!(
                "{}x{} map with {} scores and {} GT pixels",
                s.height,
                s.width,
                s.scores.len(),
                s.gt.len()
            )));
        }
        let mut comp_of = vec![None; s.gt.len()];
        for comp in connected_components(s.gt, s.height, s.width) {
            for &p in &comp {
                comp_of[p] = Some(comp_size.len());
            }
            comp_size.push(comp.len());
        }
        pixels.extend(s.scores.iter().copied().zip(comp_of));
    }
    if pixels.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite pixel score".into()));
    }
    let normals = pixels.iter().filter(|p| p.1.is_none()).count();
    if comp_size.is_empty() {
        return Err(Error::UndefinedMetric("no anomalous pixels".into()));
    }
    if normals == 0 {
        return Err(Error::UndefinedMetric("no normal pixels".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let regions = comp_size.len() as f64;
    // Coverage is kept as integer counts so fully covered regions contribute
    // exactly 1 and the curve ends at exactly 1.
    let mut covered = vec![0usize; comp_size.len()];
    let mut partial = BTreeSet::new();
    let mut full = 0usize;
    let mut points = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                None => fp += 1,
                Some(c) => {
                    covered[c] += 1;
                    if covered[c] == comp_size[c] {
                        partial.remove(&c);
                        full += 1;
                    } else {
                        partial.insert(c);
                    }
                }
            }
            i += 1;
        }
        let part: f64 = partial.iter().map(|&c| covered[c] as f64 / comp_size[c] as f64).sum();
        points.push((fp as f64 / normals as f64, (full as f64 + part) / regions));
    }
    Ok(points)
}

/// Normalised area under the PRO curve up to FPR `limit`.
pub fn aupro(samples: &[PixelSample], limit: f64) -> Result<f64> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(Error::config(format!("integration limit {limit} outside (0, 1]")));
    }
    Ok(integrate_to_limit(&pro_curve(samples)?, limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let v = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        assert_eq!(auroc(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
        let inv = auroc(&[0.1, 0.4, 0.35, 0.8], &[true, true, false, false]).unwrap();
        assert!((inv - 0.25).abs() < 1e-12);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auroc(&[0.3, 0.3], &[false, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_ties_count_half() {
        let v = auroc(&[0.5, 0.5, 0.2, 0.9], &[false, true, false, true]).unwrap();
        // pairs: (0.5n,0.5a)=.5 (0.5n,0.9a)=1 (0.2n,0.5a)=1 (0.2n,0.9a)=1
        assert!((v - 3.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn components_use_diagonals() {
        let m = [
            true, false, false, //
            false, true, false, //
            false, false, false, //
            true, true, false,
        ];
        let c = connected_components(&m, 4, 3);
        assert_eq!(c, vec![vec![0, 4], vec![9, 10]]);
    }

    #[test]
    fn perfect_detector_is_one() {
        let gt = [false, true, true, false, false, false, true, false, false];
        let scores: Vec<f64> = gt.iter().map(|g| f64::from(u8::from(*g))).collect();
        let s = [PixelSample { height: 3, width: 3, scores: &scores, gt: &gt }];
        for limit in [0.3, 0.01, 1.0] {
            assert_eq!(aupro(&s, limit).unwrap(), 1.0);
        }
    }

    #[test]
    fn anti_correlated_is_zero() {
        let gt = [false, true, true, false, false, false, true, false, false];
        let scores: Vec<f64> = gt.iter().map(|g| if *g { 0.0 } else { 1.0 }).collect();
        let s = [PixelSample { height: 3, width: 3, scores: &scores, gt: &gt }];
        assert_eq!(aupro(&s, 0.3).unwrap(), 0.0);
        assert_eq!(aupro(&s, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn missing_anomalies_undefined() {
        let gt = [false; 4];
        let s = [PixelSample { height: 2, width: 2, scores: &[0.1, 0.2, 0.3, 0.4], gt: &gt }];
        assert!(matches!(aupro(&s, 0.3), Err(Error::UndefinedMetric(_))));
    }
}
