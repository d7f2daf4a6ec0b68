//! Detection and localisation metrics, evaluation reports and the
//! score-variant ablation tables.

mod metrics;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::BankPair;
use crate::error::{Error, Result};
use crate::features::{Modality, SamplePair};
use crate::geometry::DistanceNormalizer;
use crate::lspn::LspnModel;
use crate::scoring::{
    map_from_metrics, sample_metrics, upsample_smooth, Aggregation, CellMetrics, ScoreMap, ScoreVariant,
};
use crate::trainer::Checkpoint;

pub use metrics::{aupro, auroc, connected_components, pro_curve, PixelSample};

pub const AUPRO_LIMITS: [f64; 2] = [0.30, 0.01];
const CURVE_POINTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub aggregation: Aggregation,
    /// Blur σ in pixel units of the upsampled map.
    pub blur_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5, aggregation: Aggregation::Min, blur_sigma: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub score: f64,
    pub label: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    /// Keyed by the integration limit, e.g. `"0.30"`.
    pub aupro: BTreeMap<String, f64>,
    pub pixel_metrics_absent: bool,
    pub samples: Vec<SampleScore>,
    /// Decimated `(fpr, pro)` points up to the largest limit.
    pub pro_curve: Vec<[f64; 2]>,
}

pub fn limit_key(limit: f64) -> String {
    format!("{limit:.2}")
}

impl EvalReport {
    pub fn aupro_at(&self, limit: f64) -> Option<f64> {
        self.aupro.get(&limit_key(limit)).copied()
    }
}

fn decimate(points: &[(f64, f64)], limit: f64) -> Vec<[f64; 2]> {
    let kept: Vec<[f64; 2]> = points.iter().take_while(|p| p.0 <= limit).map(|p| [p.0, p.1]).collect();
    if kept.len() <= CURVE_POINTS {
        return kept;
    }
    let step = kept.len().div_ceil(CURVE_POINTS);
    let mut out: Vec<[f64; 2]> = kept.iter().step_by(step).copied().collect();
    if out.last() != kept.last() {
        out.push(*kept.last().expect("nonempty"));
    }
    out
}

/// Metrics from score maps that already carry their pixel-level maps.
pub fn evaluate_maps(maps: &[ScoreMap], test: &[SamplePair]) -> Result<EvalReport> {
    if maps.len() != test.len() {
        return Err(Error::shape(format!("{} maps for {} samples", maps.len(), test.len())));
    }
    let labels: Vec<bool> = test
        .iter()
        .map(|s| {
            s.image_label
                .map(|l| l > 0)
                .ok_or_else(|| Error::UndefinedMetric(format!("{} has no image label", s.sample_id)))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = maps.iter().map(|m| m.sample_score).collect();
    let i_auroc = auroc(&scores, &labels)?;
    let samples = maps
        .iter()
        .zip(test)
        .map(|(m, s)| SampleScore { sample_id: m.sample_id.clone(), score: m.sample_score, label: s.image_label })
        .collect();

    let mut report = EvalReport {
        i_auroc,
        p_auroc: None,
        aupro: BTreeMap::new(),
        pixel_metrics_absent: true,
        samples,
        pro_curve: Vec::new(),
    };
    if test.iter().any(|s| s.pixel_gt.is_none()) {
        log::warn!("pixel ground truth missing; pixel metrics omitted");
        return Ok(report);
    }
    let mut px = Vec::with_capacity(maps.len());
    for (m, s) in maps.iter().zip(test) {
        let gt = s.pixel_gt.as_ref().expect("checked");
        let (h, w, v) = m.pixels();
        if (h, w) != (gt.height, gt.width) {
            return Err(Error::shape(format!(
                "{}: score map {h}x{w} vs ground truth {}x{}",
                s.sample_id, gt.height, gt.width
            )));
        }
        px.push(PixelSample { height: h, width: w, scores: v, gt: &gt.data });
    }
    let all_scores: Vec<f64> = px.iter().flat_map(|p| p.scores.iter().copied()).collect();
    let all_gt: Vec<bool> = px.iter().flat_map(|p| p.gt.iter().copied()).collect();
    report.p_auroc = Some(auroc(&all_scores, &all_gt)?);
    let curve = pro_curve(&px)?;
    for limit in AUPRO_LIMITS {
        report.aupro.insert(limit_key(limit), metrics::integrate_to_limit(&curve, limit));
    }
    report.pro_curve = decimate(&curve, AUPRO_LIMITS[0]);
    report.pixel_metrics_absent = false;
    Ok(report)
}

fn all_metrics(
    model: &LspnModel<f32>,
    banks: &BankPair,
    normalizer: &DistanceNormalizer,
    test: &[SamplePair],
    k: usize,
) -> Result<Vec<Vec<CellMetrics>>> {
    test.par_iter().map(|s| sample_metrics(model, s, banks, normalizer, k)).collect()
}

fn variant_maps(
    test: &[SamplePair],
    metrics: &[Vec<CellMetrics>],
    v: ScoreVariant,
    sigma: f64,
) -> Result<Vec<ScoreMap>> {
    test.par_iter()
        .zip(metrics)
        .map(|(s, m)| {
            let map = map_from_metrics(s, m, v);
            upsample_smooth(&map, s.pixel_factor().unwrap_or(1), sigma)
        })
        .collect()
}

/// Score maps of every test sample under `cfg.aggregation`, upsampled to
/// the ground-truth resolution and smoothed.
pub fn score_dataset(
    checkpoint: &Checkpoint,
    banks: &BankPair,
    test: &[SamplePair],
    cfg: &EvalConfig,
) -> Result<Vec<ScoreMap>> {
    let metrics = all_metrics(&checkpoint.model, banks, &checkpoint.normalizer, test, cfg.k)?;
    variant_maps(test, &metrics, ScoreVariant::Fused(cfg.aggregation), cfg.blur_sigma)
}

pub fn eval_dataset(
    checkpoint: &Checkpoint,
    banks: &BankPair,
    test: &[SamplePair],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_maps(&score_dataset(checkpoint, banks, test, cfg)?, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub i_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub aupro_30: Option<f64>,
    pub aupro_01: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTables {
    /// Unimodal distances, raw scales and the fused score.
    pub score_variants: Vec<AblationRow>,
    /// Fused score under each aggregation strategy.
    pub aggregations: Vec<AblationRow>,
}

pub const SCORE_VARIANTS: [ScoreVariant; 5] = [
    ScoreVariant::Unimodal(Modality::Rgb),
    ScoreVariant::Unimodal(Modality::PointCloud),
    ScoreVariant::Scale(Modality::Rgb),
    ScoreVariant::Scale(Modality::PointCloud),
    ScoreVariant::Fused(Aggregation::Min),
];

fn row(variant: ScoreVariant, maps: &[ScoreMap], test: &[SamplePair]) -> Result<AblationRow> {
    let label = variant.label();
    match evaluate_maps(maps, test) {
        Ok(r) => Ok(AblationRow {
            variant: label,
            i_auroc: Some(r.i_auroc),
            p_auroc: r.p_auroc,
            aupro_30: r.aupro_at(0.30),
            aupro_01: r.aupro_at(0.01),
        }),
        Err(Error::UndefinedMetric(why)) => {
            log::warn!("{label}: {why}");
            Ok(AblationRow { variant: label, i_auroc: None, p_auroc: None, aupro_30: None, aupro_01: None })
        }
        Err(e) => Err(e),
    }
}

pub fn ablation_scores(
    checkpoint: &Checkpoint,
    banks: &BankPair,
    test: &[SamplePair],
    cfg: &EvalConfig,
) -> Result<AblationTables> {
    let metrics = all_metrics(&checkpoint.model, banks, &checkpoint.normalizer, test, cfg.k)?;
    let run = |v: ScoreVariant| row(v, &variant_maps(test, &metrics, v, cfg.blur_sigma)?, test);
    Ok(AblationTables {
        score_variants: SCORE_VARIANTS.iter().map(|v| run(*v)).collect::<Result<_>>()?,
        aggregations: Aggregation::ALL.iter().map(|a| run(ScoreVariant::Fused(*a))).collect::<Result<_>>()?,
    })
}

/// CSV with columns `variant,I-AUROC,P-AUROC,AUPRO@30%,AUPRO@1%`; undefined
/// cells are left empty.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("variant,I-AUROC,P-AUROC,AUPRO@30%,AUPRO@1%\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            cell(r.i_auroc),
            cell(r.p_auroc),
            cell(r.aupro_30),
            cell(r.aupro_01)
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub aupro_30: Option<f64>,
    pub aupro_01: Option<f64>,
}

/// Test metrics at every stored snapshot, sorted by epoch.
pub fn learning_curve(
    snapshots: &[Checkpoint],
    banks: &BankPair,
    test: &[SamplePair],
    cfg: &EvalConfig,
) -> Result<Vec<CurveRow>> {
    let mut rows = snapshots
        .iter()
        .map(|c| {
            let r = eval_dataset(c, banks, test, cfg)?;
            Ok(CurveRow {
                epoch: c.epoch,
                i_auroc: r.i_auroc,
                p_auroc: r.p_auroc,
                aupro_30: r.aupro_at(0.30),
                aupro_01: r.aupro_at(0.01),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.epoch);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMap, PixelMask};

    fn sample(id: &str, gt: Vec<bool>, label: u8) -> SamplePair {
        let pc = FeatureMap::new(Modality::PointCloud, 2, 2, 1, vec![0.0; 4]).unwrap();
        let rgb = FeatureMap::new(Modality::Rgb, 2, 2, 1, vec![0.0; 4]).unwrap();
        SamplePair {
            sample_id: id.into(),
            pc,
            rgb,
            pixel_gt: Some(PixelMask { height: 2, width: 2, data: gt }),
            image_label: Some(label),
            anomaly: None,
        }
    }

    fn oracle_map(s: &SamplePair) -> ScoreMap {
        let gt = &s.pixel_gt.as_ref().unwrap().data;
        let v: Vec<f64> = gt.iter().map(|g| f64::from(u8::from(*g))).collect();
        let mut m = ScoreMap::from_grid(&s.sample_id, 2, 2, v.clone(), vec![true; 4]);
        m.upsampled = Some((2, 2, v));
        m
    }

    #[test]
    fn oracle_detector_scores_one() {
        let test = vec![
            sample("a", vec![false, true, false, false], 1),
            sample("b", vec![false; 4], 0),
            sample("c", vec![true, true, false, false], 1),
        ];
        let maps: Vec<ScoreMap> = test.iter().map(oracle_map).collect();
        let r = evaluate_maps(&maps, &test).unwrap();
        assert_eq!(r.i_auroc, 1.0);
        assert_eq!(r.p_auroc, Some(1.0));
        assert_eq!(r.aupro_at(0.30), Some(1.0));
        assert_eq!(r.aupro_at(0.01), Some(1.0));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn constant_detector_is_undefined() {
        let test = vec![sample("a", vec![true, false, false, false], 1), sample("b", vec![false; 4], 0)];
        let maps: Vec<ScoreMap> =
            test.iter().map(|s| ScoreMap::from_grid(&s.sample_id, 2, 2, vec![0.5; 4], vec![true; 4])).collect();
        assert!(matches!(evaluate_maps(&maps, &test), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn missing_gt_flags_pixel_metrics() {
        let mut test = vec![sample("a", vec![true, false, false, false], 1), sample("b", vec![false; 4], 0)];
        test[1].pixel_gt = None;
        let maps: Vec<ScoreMap> = vec![
            ScoreMap::from_grid("a", 2, 2, vec![1.0; 4], vec![true; 4]),
            ScoreMap::from_grid("b", 2, 2, vec![0.0; 4], vec![true; 4]),
        ];
        let r = evaluate_maps(&maps, &test).unwrap();
        assert!(r.pixel_metrics_absent);
        assert!(r.p_auroc.is_none() && r.aupro.is_empty());
    }

    #[test]
    fn csv_layout() {
        let rows = [AblationRow {
            variant: "fused_min".into(),
            i_auroc: Some(0.5),
            p_auroc: None,
            aupro_30: Some(1.0),
            aupro_01: Some(0.25),
        }];
        assert_eq!(
            ablation_csv(&rows),
            "variant,I-AUROC,P-AUROC,AUPRO@30%,AUPRO@1%\nfused_min,0.500000,,1.000000,0.250000\n"
        );
    }
}
