//! Slow, obviously-correct implementations used as test oracles and by the
//! self-test suite.

use crate::bank::sq_dist;
use crate::eval::PixelSample;

/// AUROC by counting every positive/negative pair (ties count ½).
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (si, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (sj, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

fn flood_components(gt: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    // union-find over 8-neighbourhoods
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for y in 0..h {
        for x in 0..w {
            if !gt[y * w + x] {
                continue;
            }
            for (dy, dx) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= h as isize || nx < 0 || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if gt[q] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, q));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in (0..h * w).filter(|&p| gt[p]) {
        let r = find(&mut parent, p);
        groups.entry(r).or_default().push(p);
    }
    groups.into_values().collect()
}

/// AUPRO evaluating FPR and PRO from scratch at every distinct threshold.
pub fn aupro_bruteforce(samples: &[PixelSample], limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = samples.iter().flat_map(|s| s.scores.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let comps: Vec<Vec<Vec<usize>>> = samples.iter().map(|s| flood_components(s.gt, s.height, s.width)).collect();
    let regions: usize = comps.iter().map(Vec::len).sum();
    let normals: usize = samples.iter().map(|s| s.gt.iter().filter(|g| !**g).count()).sum();

    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let mut fp = 0usize;
        let mut pro = 0.0;
        for (s, cs) in samples.iter().zip(&comps) {
            fp += s.scores.iter().zip(s.gt).filter(|(v, g)| !**g && **v >= t).count();
            for c in cs {
                let hit = c.iter().filter(|&&p| s.scores[p] >= t).count();
                pro += hit as f64 / c.len() as f64;
            }
        }
        curve.push((fp as f64 / normals as f64, pro / regions as f64));
    }

    let mut area = 0.0;
    for i in 1..curve.len() {
        let (x0, y0) = curve[i - 1];
        let (x1, y1) = curve[i];
        let hi = x1.min(limit);
        if hi <= x0 {
            continue;
        }
        let y_hi = if x1 > limit { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y1 };
        area += (hi - x0) * (y0 + y_hi) / 2.0;
    }
    area / limit
}

/// Optimal k-center covering radius by trying every subset of `budget`
/// points.
pub fn optimal_covering_radius(points: &[f32], dim: usize, budget: usize) -> f64 {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut best = f64::INFINITY;
    let mut subset: Vec<usize> = (0..budget.min(n)).collect();
    if subset.is_empty() {
        return best;
    }
    loop {
        let radius = (0..n)
            .map(|p| subset.iter().map(|&c| sq_dist(row(p), row(c))).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
            .sqrt();
        best = best.min(radius);
        // next combination in lexicographic order
        let k = subset.len();
        let mut i = k;
        while i > 0 && subset[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_auroc_example() {
        assert_eq!(auroc_pairs(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), 0.75);
    }

    #[test]
    fn covering_on_a_line() {
        let pts = [0.0f32, 1.0, 2.0, 10.0, 11.0];
        assert!((optimal_covering_radius(&pts, 1, 2) - 1.0).abs() < 1e-12);
        assert_eq!(optimal_covering_radius(&pts, 1, 5), 0.0);
    }
}
