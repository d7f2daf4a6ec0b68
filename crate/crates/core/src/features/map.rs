use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{decode_tensor, read_tensor, write_tensor, Tensor, MAGIC};
use super::npy::decode_npy_f32;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Modality {
    #[serde(rename = "pc")]
    PointCloud,
    #[serde(rename = "rgb")]
    Rgb,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::PointCloud, Modality::Rgb];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::PointCloud => "pc",
            Modality::Rgb => "rgb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pc" => Some(Modality::PointCloud),
            "rgb" => Some(Modality::Rgb),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::PointCloud => 0,
            Modality::Rgb => 1,
        }
    }
}

/// Which modalities a test anomaly (or injected anomaly) affects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    PcOnly,
    RgbOnly,
    Joint,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::PcOnly, AnomalyKind::RgbOnly, AnomalyKind::Joint];

    pub fn affects(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (AnomalyKind::Joint, _)
                | (AnomalyKind::PcOnly, Modality::PointCloud)
                | (AnomalyKind::RgbOnly, Modality::Rgb)
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pc" | "pc_only" => Some(AnomalyKind::PcOnly),
            "rgb" | "rgb_only" => Some(AnomalyKind::RgbOnly),
            "joint" | "both" => Some(AnomalyKind::Joint),
            _ => None,
        }
    }
}

/// `H × W` grid of `D`-dimensional features for one modality of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub foreground: Vec<bool>,
}

impl FeatureMap {
    pub fn new(modality: Modality, height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let map = Self { modality, height, width, dim, data, foreground: vec![true; height * width] };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return Err(Error::shape(format!("degenerate feature map {}x{}x{}", self.height, self.width, self.dim)));
        }
        if self.data.len() != self.height * self.width * self.dim {
            return Err(Error::shape(format!(
                "{} values for a {}x{}x{} map",
                self.data.len(),
                self.height,
                self.width,
                self.dim
            )));
        }
        if self.foreground.len() != self.height * self.width {
            return Err(Error::shape("foreground mask does not match grid"));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite feature value at index {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn feature(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    #[inline]
    pub fn feature_mut(&mut self, cell: usize) -> &mut [f32] {
        &mut self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn foreground_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cells()).filter(|&c| self.foreground[c])
    }
}

/// Boolean mask at some resolution (grid or pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|v| *v)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                data[r * w + c] = self.data[(r / factor) * self.width + c / factor];
            }
        }
        Self { height: h, width: w, data }
    }
}

/// Spatially aligned point-cloud and RGB features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub sample_id: String,
    pub pc: FeatureMap,
    pub rgb: FeatureMap,
    pub pixel_gt: Option<PixelMask>,
    pub image_label: Option<u8>,
    pub anomaly: Option<AnomalyKind>,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        self.pc.validate()?;
        self.rgb.validate()?;
        if self.pc.modality != Modality::PointCloud || self.rgb.modality != Modality::Rgb {
            return Err(Error::shape(format!("{}: modality tags swapped", self.sample_id)));
        }
        if (self.pc.height, self.pc.width) != (self.rgb.height, self.rgb.width) {
            return Err(Error::shape(format!(
                "{}: pc grid {}x{} vs rgb grid {}x{}",
                self.sample_id, self.pc.height, self.pc.width, self.rgb.height, self.rgb.width
            )));
        }
        if let Some(gt) = &self.pixel_gt {
            if gt.height < self.pc.height
                || gt.width < self.pc.width
                || gt.height % self.pc.height != 0
                || gt.width % self.pc.width != 0
                || gt.height / self.pc.height != gt.width / self.pc.width
            {
                return Err(Error::shape(format!(
                    "{}: ground truth {}x{} is not an integer upscale of the grid",
                    self.sample_id, gt.height, gt.width
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, m: Modality) -> &FeatureMap {
        match m {
            Modality::PointCloud => &self.pc,
            Modality::Rgb => &self.rgb,
        }
    }

    pub fn map_mut(&mut self, m: Modality) -> &mut FeatureMap {
        match m {
            Modality::PointCloud => &mut self.pc,
            Modality::Rgb => &mut self.rgb,
        }
    }

    #[inline]
    pub fn grid(&self) -> (usize, usize) {
        (self.pc.height, self.pc.width)
    }

    #[inline]
    pub fn foreground(&self) -> &[bool] {
        &self.pc.foreground
    }

    /// Pixel upscale factor of the ground truth, if any.
    pub fn pixel_factor(&self) -> Option<usize> {
        self.pixel_gt.as_ref().map(|gt| gt.height / self.pc.height)
    }
}

pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    map.validate()?;
    let t = Tensor::f32(vec![map.height, map.width, map.dim], map.data.clone())
        .with_meta("modality", map.modality.as_str());
    write_tensor(path, &t)
}

/// Reads either the tensor container or an NPY array of shape `(H, W, D)`.
/// NPY files carry no modality tag; the caller supplies `fallback`.
pub fn read_feature_map(path: &Path, fallback: Modality) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    let (shape, data, modality) = if bytes.starts_with(MAGIC) {
        let t = decode_tensor(&bytes)?;
        let modality = match t.meta_str("modality") {
            Some(m) => Modality::parse(m).ok_or_else(|| Error::format(12, format!("unknown modality `{m}`")))?,
            None => fallback,
        };
        let shape = t.shape.clone();
        (shape, t.into_f32()?, modality)
    } else {
        let (shape, data) = decode_npy_f32(&bytes)?;
        (shape, data, fallback)
    };
    if shape.len() != 3 {
        return Err(Error::format(12, format!("feature map needs 3 dims, got {shape:?}")));
    }
    FeatureMap::new(modality, shape[0], shape[1], shape[2], data)
}

pub fn write_mask(mask: &PixelMask, kind: &str, path: &Path) -> Result<()> {
    let t =
        Tensor::u8(vec![mask.height, mask.width], mask.data.iter().map(|&b| b as u8).collect()).with_meta("kind", kind);
    write_tensor(path, &t)
}

pub fn read_mask(path: &Path) -> Result<PixelMask> {
    let t = read_tensor(path)?;
    if t.shape.len() != 2 {
        return Err(Error::format(12, format!("mask needs 2 dims, got {:?}", t.shape)));
    }
    let (height, width) = (t.shape[0], t.shape[1]);
    let data = t.into_u8()?.into_iter().map(|v| v != 0).collect();
    Ok(PixelMask { height, width, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.g2t");
        let m = FeatureMap::new(Modality::PointCloud, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        write_feature_map(&m, &p).unwrap();
        let back = read_feature_map(&p, Modality::Rgb).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_map_rejected() {
        assert!(FeatureMap::new(Modality::Rgb, 0, 0, 4, vec![]).is_err());
    }

    #[test]
    fn identical_maps_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMap::new(Modality::Rgb, 2, 1, 3, vec![0.5; 6]).unwrap();
        write_feature_map(&m, &dir.path().join("a")).unwrap();
        write_feature_map(&m, &dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("a")).unwrap(), std::fs::read(dir.path().join("b")).unwrap());
    }

    #[test]
    fn npy_input_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.npy");
        std::fs::write(&p, super::super::encode_npy_f32(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = read_feature_map(&p, Modality::Rgb).unwrap();
        assert_eq!((m.height, m.width, m.dim), (1, 2, 2));
        assert_eq!(m.feature(1), &[3.0, 4.0]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.g2t");
        let m = FeatureMap::new(Modality::Rgb, 2, 2, 2, vec![1.0; 8]).unwrap();
        write_feature_map(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_feature_map(&p, Modality::Rgb), Err(Error::Format { .. })));
    }
}
