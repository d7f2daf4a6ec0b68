use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::map::{read_feature_map, read_mask, write_feature_map, write_mask, AnomalyKind, Modality, SamplePair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One sample in a manifest; paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub pc: String,
    pub rgb: String,
    pub foreground: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_gt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalyKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    /// `(D_pc, D_rgb)`
    pub dims: (usize, usize),
    /// `(H, W)`
    pub grid: (usize, usize),
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn path(dir: &Path, split: Split) -> std::path::PathBuf {
        dir.join(format!("{}.json", split.as_str()))
    }
}

/// Writes every sample of a split under `dir/<split>/` plus `dir/<split>.json`.
pub fn write_split(dir: &Path, split: Split, samples: &[SamplePair]) -> Result<DatasetManifest> {
    let first = samples.first().ok_or_else(|| Error::config(format!("empty {} split", split.as_str())))?;
    let dims = (first.pc.dim, first.rgb.dim);
    let grid = first.grid();
    let sub = dir.join(split.as_str());
    fs::create_dir_all(&sub)?;

    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        if (s.pc.dim, s.rgb.dim) != dims || s.grid() != grid {
            return Err(Error::shape(format!("{} does not share the split's dims/grid", s.sample_id)));
        }
        let rel = |suffix: &str| format!("{}/{}.{suffix}", split.as_str(), s.sample_id);
        let entry = SampleEntry {
            id: s.sample_id.clone(),
            pc: rel("pc.g2t"),
            rgb: rel("rgb.g2t"),
            foreground: rel("fg.g2t"),
            pixel_gt: s.pixel_gt.as_ref().map(|_| rel("gt.g2t")),
            label: s.image_label,
            anomaly: s.anomaly,
        };
        write_feature_map(&s.pc, &dir.join(&entry.pc))?;
        write_feature_map(&s.rgb, &dir.join(&entry.rgb))?;
        let fg = super::PixelMask { height: grid.0, width: grid.1, data: s.foreground().to_vec() };
        write_mask(&fg, "foreground", &dir.join(&entry.foreground))?;
        if let (Some(gt), Some(p)) = (&s.pixel_gt, &entry.pixel_gt) {
            write_mask(gt, "pixel_gt", &dir.join(p))?;
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest { split, dims, grid, samples: entries };
    fs::write(DatasetManifest::path(dir, split), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_split(dir: &Path, split: Split) -> Result<(DatasetManifest, Vec<SamplePair>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(DatasetManifest::path(dir, split))?)?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let mut pc = read_feature_map(&dir.join(&e.pc), Modality::PointCloud)?;
        let mut rgb = read_feature_map(&dir.join(&e.rgb), Modality::Rgb)?;
        let fg = read_mask(&dir.join(&e.foreground))?;
        if (fg.height, fg.width) != (pc.height, pc.width) {
            return Err(Error::shape(format!("{}: foreground mask size", e.id)));
        }
        pc.foreground = fg.data.clone();
        rgb.foreground = fg.data;
        let pixel_gt = e.pixel_gt.as_ref().map(|p| read_mask(&dir.join(p))).transpose()?;
        let pair = SamplePair { sample_id: e.id.clone(), pc, rgb, pixel_gt, image_label: e.label, anomaly: e.anomaly };
        pair.validate()?;
        if (pair.pc.dim, pair.rgb.dim) != manifest.dims || pair.grid() != manifest.grid {
            return Err(Error::shape(format!("{}: disagrees with manifest", e.id)));
        }
        out.push(pair);
    }
    Ok((manifest, out))
}
