use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{AnomalyKind, Modality, SamplePair};

use super::PerlinMask;

/// Per-modality length scale that perturbation magnitudes are expressed in,
/// typically the mean nearest-prototype distance of normal training cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectionReference {
    pub pc: f64,
    pub rgb: f64,
}

impl InjectionReference {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::PointCloud => self.pc,
            Modality::Rgb => self.rgb,
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Cut-paste from `donor` into `target` inside `mask`, then perturb.
///
/// RGB cells get a contrast jitter about the donor's foreground mean
/// (`a ∈ 1 ± [0.25, 0.5]·strength`), a constant shift and per-cell noise.
/// Point-cloud cells get a constant offset. Magnitudes scale with
/// `strength · reference`. Returns the new sample and the cell labels.
pub fn inject_anomaly<R: Rng + ?Sized>(
    target: &SamplePair,
    donor: &SamplePair,
    mask: &PerlinMask,
    mode: AnomalyKind,
    strength: f64,
    reference: InjectionReference,
    rng: &mut R,
) -> Result<(SamplePair, Vec<bool>)> {
    let (h, w) = target.grid();
    if donor.grid() != (h, w) || (mask.height, mask.width) != (h, w) {
        return Err(Error::shape(format!(
            "target {}x{}, donor {}x{}, mask {}x{}",
            h,
            w,
            donor.grid().0,
            donor.grid().1,
            mask.height,
            mask.width
        )));
    }
    if donor.pc.dim != target.pc.dim || donor.rgb.dim != target.rgb.dim {
        return Err(Error::shape("donor feature dims differ from target"));
    }
    let mut out = target.clone();
    let labels: Vec<bool> = mask.grid.clone();
    if !labels.iter().any(|b| *b) {
        return Ok((out, labels));
    }

    for m in Modality::BOTH {
        if !mode.affects(m) {
            continue;
        }
        let src = donor.map(m);
        let dim = src.dim;
        let scale = strength * reference.get(m);
        let dir = unit_vector(rng, dim);
        let shift = scale * rng.random_range(1.0..2.0);
        let (gain, centre) = match m {
            Modality::Rgb => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let gain = 1.0 + sign * rng.random_range(0.25..0.5) * strength.min(1.0);
                let mut centre = vec![0.0f64; dim];
                let mut n = 0usize;
                for cell in src.foreground_cells() {
                    for (c, v) in centre.iter_mut().zip(src.feature(cell)) {
                        *c += *v as f64;
                    }
                    n += 1;
                }
                centre.iter_mut().for_each(|c| *c /= n.max(1) as f64);
                (gain, centre)
            }
            Modality::PointCloud => (1.0, vec![0.0; dim]),
        };
        let jitter = match m {
            Modality::Rgb => 0.25 * scale / (dim as f64).sqrt(),
            Modality::PointCloud => 0.0,
        };
        let dst = out.map_mut(m);
        for cell in (0..h * w).filter(|&c| labels[c]) {
            let from = src.feature(cell);
            let to = dst.feature_mut(cell);
            for d in 0..dim {
                let noise = if jitter > 0.0 { jitter * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                let base = centre[d] + gain * (from[d] as f64 - centre[d]);
                to[d] = (base + shift * dir[d] + noise) as f32;
            }
        }
    }
    out.image_label = Some(1);
    out.anomaly = Some(mode);
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{gen_synthetic_dataset, SynthConfig};
    use crate::synthesis::{gen_perlin_mask, PerlinParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (SamplePair, SamplePair) {
        let cfg = SynthConfig { n_train: 2, n_test: 1, ..Default::default() };
        let ds = gen_synthetic_dataset(&cfg, 3).unwrap();
        (ds.train[0].clone(), ds.train[1].clone())
    }

    const REF: InjectionReference = InjectionReference { pc: 0.2, rgb: 0.2 };

    #[test]
    fn empty_mask_is_identity() {
        let (t, d) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = gen_perlin_mask(16, 16, &PerlinParams::default(), &mut rng);
        mask.grid.iter_mut().for_each(|b| *b = false);
        let (out, labels) = inject_anomaly(&t, &d, &mask, AnomalyKind::Joint, 3.0, REF, &mut rng).unwrap();
        assert_eq!(out, t);
        assert!(labels.iter().all(|b| !b));
    }

    #[test]
    fn zero_strength_self_donor_keeps_features() {
        let (t, _) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = gen_perlin_mask(16, 16, &PerlinParams::default(), &mut rng);
        let (out, labels) = inject_anomaly(&t, &t, &mask, AnomalyKind::Joint, 0.0, REF, &mut rng).unwrap();
        assert_eq!(out.pc.data, t.pc.data);
        assert_eq!(out.rgb.data, t.rgb.data);
        assert_eq!(labels, mask.grid);
    }

    #[test]
    fn unmasked_cells_untouched_and_mode_respected() {
        let (t, d) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = gen_perlin_mask(16, 16, &PerlinParams::default(), &mut rng);
        let (out, labels) = inject_anomaly(&t, &d, &mask, AnomalyKind::PcOnly, 3.0, REF, &mut rng).unwrap();
        assert_eq!(out.rgb.data, t.rgb.data);
        for cell in 0..256 {
            if !labels[cell] {
                assert_eq!(out.pc.feature(cell), t.pc.feature(cell));
            } else {
                assert_ne!(out.pc.feature(cell), t.pc.feature(cell));
            }
        }
    }

    #[test]
    fn misaligned_grids_rejected() {
        let (t, d) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = gen_perlin_mask(8, 8, &PerlinParams::default(), &mut rng);
        assert!(inject_anomaly(&t, &d, &mask, AnomalyKind::Joint, 1.0, REF, &mut rng).is_err());
    }
}
