//! Local scale prediction network and the anisotropic fused metric
//! `l = Σ_m w^m · s^m · σ^m`.
//!
//! The network has two parallel branches: one encodes the concatenated
//! prototypes `(m_pc, m_rgb)`, the other the concatenated directions
//! `(d_pc, d_rgb)`. Their outputs are concatenated and passed through a small
//! head whose last linear layer has width two and an `exp(tanh(.))`
//! activation, giving `(w_pc, w_rgb) ∈ [1/e, e]²`.
//!
//! Global modality scales are stored as `log σ` so they stay positive.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::BankPair;
use crate::error::{Error, Result};
use crate::features::{read_tensor, write_tensor, Tensor};
use crate::geometry::GeometricEncoding;
use crate::nn::BlockCache;
use crate::nn::{exp_tanh, exp_tanh_backward};
use crate::nn::{DenseMatrix, Linear, LinearBlock, LinearGrad, Real};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LspnConfig {
    pub dim_pc: usize,
    pub dim_rgb: usize,
    pub proto_widths: Vec<usize>,
    pub dir_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    pub sigma_init: f64,
}

impl Default for LspnConfig {
    fn default() -> Self {
        Self {
            dim_pc: 1152,
            dim_rgb: 768,
            proto_widths: vec![512, 256],
            dir_widths: vec![512, 256],
            head_widths: vec![128],
            dropout: 0.5,
            sigma_init: 0.5,
        }
    }
}

impl LspnConfig {
    /// Small widths for desk-scale feature dims.
    pub fn desk(dim_pc: usize, dim_rgb: usize) -> Self {
        Self {
            dim_pc,
            dim_rgb,
            proto_widths: vec![32, 16],
            dir_widths: vec![32, 16],
            head_widths: vec![16],
            ..Default::default()
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim_pc + self.dim_rgb
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_pc == 0 || self.dim_rgb == 0 {
            return Err(Error::config("feature dims must be positive"));
        }
        let widths = self.proto_widths.iter().chain(&self.dir_widths).chain(&self.head_widths);
        if widths.clone().any(|w| *w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.sigma_init > 0.0) {
            return Err(Error::config("sigma_init must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LspnModel<T = f32> {
    pub config: LspnConfig,
    pub proto_branch: Vec<LinearBlock<T>>,
    pub dir_branch: Vec<LinearBlock<T>>,
    pub head: Vec<LinearBlock<T>>,
    pub output: Linear<T>,
    /// `[log σ_pc, log σ_rgb]`
    pub log_sigma: [T; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LspnGrads<T> {
    pub proto_branch: Vec<LinearGrad<T>>,
    pub dir_branch: Vec<LinearGrad<T>>,
    pub head: Vec<LinearGrad<T>>,
    pub output: LinearGrad<T>,
    pub log_sigma: [T; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    LogSigma,
}

/// Row batch of network inputs: concatenated prototypes and directions.
#[derive(Clone, Debug, PartialEq)]
pub struct LspnInput<T> {
    pub proto: DenseMatrix<T>,
    pub dir: DenseMatrix<T>,
}

pub struct ForwardCache<T> {
    proto: Vec<BlockCache<T>>,
    dir: Vec<BlockCache<T>>,
    head: Vec<BlockCache<T>>,
    proto_out: usize,
    out_input: DenseMatrix<T>,
    out_pre: DenseMatrix<T>,
}

/// `(w, s, σ)` decomposition of one metric value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub l: f64,
    pub w_pc: f64,
    pub w_rgb: f64,
    pub s_pc: f64,
    pub s_rgb: f64,
}

pub fn metric<T: Real>(w: [T; 2], s: [T; 2], sigma: [T; 2]) -> T {
    w[0] * s[0] * sigma[0] + w[1] * s[1] * sigma[1]
}

fn build_branch<R: Rng>(inputs: usize, widths: &[usize], dropout: f64, rng: &mut R) -> Vec<LinearBlock<f32>> {
    let mut fan_in = inputs;
    widths
        .iter()
        .map(|&w| {
            let block = LinearBlock { linear: Linear::kaiming_uniform(fan_in, w, rng), dropout_rate: dropout };
            fan_in = w;
            block
        })
        .collect()
}

/// Fresh model with PyTorch-default layer initialisation and `σ = sigma_init`.
pub fn init_model(cfg: &LspnConfig, seed: u64) -> Result<LspnModel<f32>> {
    cfg.validate()?;
    let mut rng = stream(seed, &[0x15e9]);
    let input = cfg.input_width();
    let proto_branch = build_branch(input, &cfg.proto_widths, cfg.dropout, &mut rng);
    let dir_branch = build_branch(input, &cfg.dir_widths, cfg.dropout, &mut rng);
    let proto_out = cfg.proto_widths.last().copied().unwrap_or(input);
    let dir_out = cfg.dir_widths.last().copied().unwrap_or(input);
    let head = build_branch(proto_out + dir_out, &cfg.head_widths, cfg.dropout, &mut rng);
    let head_out = cfg.head_widths.last().copied().unwrap_or(proto_out + dir_out);
    let output = Linear::kaiming_uniform(head_out, 2, &mut rng);
    let ls = (cfg.sigma_init as f32).ln();
    Ok(LspnModel { config: cfg.clone(), proto_branch, dir_branch, head, output, log_sigma: [ls, ls] })
}

fn run_blocks<T: Real, R: Rng + ?Sized>(
    blocks: &[LinearBlock<T>],
    mut x: DenseMatrix<T>,
    mut rng: Option<&mut R>,
    caches: &mut Vec<BlockCache<T>>,
) -> Result<DenseMatrix<T>> {
    for b in blocks {
        let (y, c) = b.forward_batch(x, rng.as_deref_mut())?;
        caches.push(c);
        x = y;
    }
    Ok(x)
}

impl<T: Real> LspnModel<T> {
    pub fn cast<U: Real>(&self) -> LspnModel<U> {
        LspnModel {
            config: self.config.clone(),
            proto_branch: self.proto_branch.iter().map(LinearBlock::cast).collect(),
            dir_branch: self.dir_branch.iter().map(LinearBlock::cast).collect(),
            head: self.head.iter().map(LinearBlock::cast).collect(),
            output: self.output.cast(),
            log_sigma: [U::of(self.log_sigma[0].as_f64()), U::of(self.log_sigma[1].as_f64())],
        }
    }

    pub fn sigma(&self) -> [T; 2] {
        [self.log_sigma[0].exp(), self.log_sigma[1].exp()]
    }

    /// Zero the output layer so that every prediction is exactly `w = 1`.
    pub fn force_unit_scales(&mut self) {
        self.output.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.output.bias.iter_mut().for_each(|v| *v = T::zero());
    }

    fn linears(&self) -> impl Iterator<Item = &Linear<T>> {
        self.proto_branch
            .iter()
            .chain(&self.dir_branch)
            .chain(&self.head)
            .map(|b| &b.linear)
            .chain(std::iter::once(&self.output))
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> {
        self.proto_branch
            .iter_mut()
            .chain(self.dir_branch.iter_mut())
            .chain(self.head.iter_mut())
            .map(|b| &mut b.linear)
            .chain(std::iter::once(&mut self.output))
    }

    pub fn is_finite(&self) -> bool {
        self.linears().all(Linear::is_finite) && self.log_sigma.iter().all(|v| v.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.linears().map(|l| l.weight.data().len() + l.bias.len()).sum::<usize>() + 2
    }

    /// Parameter tensors in a fixed order: (weight, bias) per linear layer,
    /// then the two log-scales.
    pub fn param_slices_mut(&mut self) -> Vec<(ParamKind, &mut [T])> {
        let Self { proto_branch, dir_branch, head, output, log_sigma, .. } = self;
        let mut out = Vec::new();
        let linears = proto_branch
            .iter_mut()
            .chain(dir_branch.iter_mut())
            .chain(head.iter_mut())
            .map(|b| &mut b.linear)
            .chain(std::iter::once(output));
        for l in linears {
            out.push((ParamKind::Weight, l.weight.data_mut()));
            out.push((ParamKind::Bias, l.bias.as_mut_slice()));
        }
        out.push((ParamKind::LogSigma, &mut log_sigma[..]));
        out
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.linears() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.log_sigma);
        out
    }

    pub fn set_flat_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::shape(format!("{} values for {} parameters", p.len(), self.param_count())));
        }
        let mut at = 0;
        for (_, slice) in self.param_slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&p[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// `Σ |W|` over every weight matrix (biases and scales excluded).
    pub fn l1_norm(&self) -> T {
        self.linears().flat_map(|l| l.weight.data().iter()).fold(T::zero(), |acc, w| acc + w.abs())
    }

    pub fn zero_grads(&self) -> LspnGrads<T> {
        LspnGrads {
            proto_branch: self.proto_branch.iter().map(|b| LinearGrad::zeros_like(&b.linear)).collect(),
            dir_branch: self.dir_branch.iter().map(|b| LinearGrad::zeros_like(&b.linear)).collect(),
            head: self.head.iter().map(|b| LinearGrad::zeros_like(&b.linear)).collect(),
            output: LinearGrad::zeros_like(&self.output),
            log_sigma: [T::zero(); 2],
        }
    }

    /// Batched forward. Dropout is active iff `dropout_rng` is provided.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        input: &LspnInput<T>,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(DenseMatrix<T>, ForwardCache<T>)> {
        let width = self.config.input_width();
        if input.proto.cols() != width || input.dir.cols() != width {
            return Err(Error::shape(format!(
                "network expects {width}-wide inputs, got {} and {}",
                input.proto.cols(),
                input.dir.cols()
            )));
        }
        if input.proto.rows() != input.dir.rows() {
            return Err(Error::shape("prototype and direction batches differ in length"));
        }
        let mut proto_c = Vec::with_capacity(self.proto_branch.len());
        let mut dir_c = Vec::with_capacity(self.dir_branch.len());
        let mut head_c = Vec::with_capacity(self.head.len());
        let p = run_blocks(&self.proto_branch, input.proto.clone(), dropout_rng.as_deref_mut(), &mut proto_c)?;
        let d = run_blocks(&self.dir_branch, input.dir.clone(), dropout_rng.as_deref_mut(), &mut dir_c)?;
        let proto_out = p.cols();
        let h = DenseMatrix::hconcat(&p, &d)?;
        let h = run_blocks(&self.head, h, dropout_rng, &mut head_c)?;
        let pre = self.output.forward_batch(&h)?;
        let w = DenseMatrix::from_vec(pre.rows(), 2, exp_tanh(pre.data()))?;
        Ok((w, ForwardCache { proto: proto_c, dir: dir_c, head: head_c, proto_out, out_input: h, out_pre: pre }))
    }

    /// Accumulates parameter gradients for upstream `dL/dw` (`n × 2`).
    /// `grads.log_sigma` is left to the caller.
    pub fn backward_batch(&self, cache: &ForwardCache<T>, d_w: &DenseMatrix<T>, grads: &mut LspnGrads<T>) {
        let d_pre = DenseMatrix::from_vec(d_w.rows(), 2, exp_tanh_backward(cache.out_pre.data(), d_w.data()))
            .expect("shape matches forward");
        let mut d_h = self.output.backward_batch(&cache.out_input, &d_pre, &mut grads.output);
        for ((block, c), g) in self.head.iter().zip(&cache.head).zip(&mut grads.head).rev() {
            d_h = block.backward_batch(c, d_h, g);
        }
        let (mut d_p, mut d_d) = d_h.hsplit(cache.proto_out);
        for ((block, c), g) in self.proto_branch.iter().zip(&cache.proto).zip(&mut grads.proto_branch).rev() {
            d_p = block.backward_batch(c, d_p, g);
        }
        for ((block, c), g) in self.dir_branch.iter().zip(&cache.dir).zip(&mut grads.dir_branch).rev() {
            d_d = block.backward_batch(c, d_d, g);
        }
    }

    /// Deterministic scales for a batch.
    pub fn predict(&self, input: &LspnInput<T>) -> Result<DenseMatrix<T>> {
        Ok(self.forward_batch::<rand_chacha::ChaCha8Rng>(input, None)?.0)
    }
}

impl<T: Real> LspnGrads<T> {
    fn linears(&self) -> impl Iterator<Item = &LinearGrad<T>> {
        self.proto_branch.iter().chain(&self.dir_branch).chain(&self.head).chain(std::iter::once(&self.output))
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut LinearGrad<T>> {
        self.proto_branch
            .iter_mut()
            .chain(self.dir_branch.iter_mut())
            .chain(self.head.iter_mut())
            .chain(std::iter::once(&mut self.output))
    }

    /// Same order as [`LspnModel::flat_params`].
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in self.linears() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.log_sigma);
        out
    }

    /// Same order as [`LspnModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in self.linears() {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
        out.push(&self.log_sigma);
        out
    }

    /// Adds `scale · sign(W)` for every weight (zero at zero).
    pub fn add_l1(&mut self, model: &LspnModel<T>, scale: T) {
        for (g, l) in self.linears_mut().zip(model.linears()) {
            for (gw, w) in g.weight.data_mut().iter_mut().zip(l.weight.data()) {
                if *w > T::zero() {
                    *gw = *gw + scale;
                } else if *w < T::zero() {
                    *gw = *gw - scale;
                }
            }
        }
    }
}

impl<T: Real> LspnInput<T> {
    pub fn with_capacity(rows: usize, width: usize) -> LspnInputBuilder<T> {
        LspnInputBuilder {
            width,
            rows: 0,
            proto: Vec::with_capacity(rows * width),
            dir: Vec::with_capacity(rows * width),
        }
    }

    pub fn rows(&self) -> usize {
        self.proto.rows()
    }
}

pub struct LspnInputBuilder<T> {
    width: usize,
    rows: usize,
    proto: Vec<T>,
    dir: Vec<T>,
}

impl<T: Real> LspnInputBuilder<T> {
    pub fn push(&mut self, m_pc: &[f32], m_rgb: &[f32], d_pc: &[f32], d_rgb: &[f32]) -> Result<()> {
        if m_pc.len() + m_rgb.len() != self.width || d_pc.len() + d_rgb.len() != self.width {
            return Err(Error::shape(format!(
                "row widths {}+{} / {}+{} against network width {}",
                m_pc.len(),
                m_rgb.len(),
                d_pc.len(),
                d_rgb.len(),
                self.width
            )));
        }
        let cast = |v: &f32| T::of(*v as f64);
        self.proto.extend(m_pc.iter().chain(m_rgb).map(cast));
        self.dir.extend(d_pc.iter().chain(d_rgb).map(cast));
        self.rows += 1;
        Ok(())
    }

    /// Row for neighbour encodings of both modalities at the same rank.
    pub fn push_encodings(&mut self, banks: &BankPair, pc: &GeometricEncoding, rgb: &GeometricEncoding) -> Result<()> {
        self.push(
            banks.pc.prototype(pc.prototype_idx),
            banks.rgb.prototype(rgb.prototype_idx),
            &pc.direction,
            &rgb.direction,
        )
    }

    pub fn build(self) -> LspnInput<T> {
        LspnInput {
            proto: DenseMatrix::from_vec(self.rows, self.width, self.proto).expect("sized by push"),
            dir: DenseMatrix::from_vec(self.rows, self.width, self.dir).expect("sized by push"),
        }
    }
}

/// Single-row forward: `(w_pc, w_rgb)`.
pub fn lspn_forward<T: Real, R: Rng + ?Sized>(
    model: &LspnModel<T>,
    m_pc: &[f32],
    m_rgb: &[f32],
    d_pc: &[f32],
    d_rgb: &[f32],
    rng: Option<&mut R>,
) -> Result<(T, T)> {
    let mut b = LspnInput::with_capacity(1, model.config.input_width());
    b.push(m_pc, m_rgb, d_pc, d_rgb)?;
    let (w, _) = model.forward_batch(&b.build(), rng)?;
    Ok((w.get(0, 0), w.get(0, 1)))
}

/// Scales for one position; background positions bypass the network.
pub fn position_scales<T: Real>(
    model: &LspnModel<T>,
    banks: &BankPair,
    pc: &GeometricEncoding,
    rgb: &GeometricEncoding,
    foreground: bool,
) -> Result<(T, T)> {
    if !foreground {
        return Ok((T::one(), T::one()));
    }
    lspn_forward::<T, rand_chacha::ChaCha8Rng>(
        model,
        banks.pc.prototype(pc.prototype_idx),
        banks.rgb.prototype(rgb.prototype_idx),
        &pc.direction,
        &rgb.direction,
        None,
    )
}

/// Fused metric for the encodings of one position at one neighbour rank.
pub fn fused_metric(
    model: &LspnModel<f32>,
    pc: &GeometricEncoding,
    rgb: &GeometricEncoding,
    banks: &BankPair,
) -> Result<MetricValue> {
    let (w_pc, w_rgb) = position_scales(model, banks, pc, rgb, true)?;
    let sigma = model.sigma();
    let (s_pc, s_rgb) = (pc.distance as f64, rgb.distance as f64);
    let (w_pc, w_rgb) = (w_pc as f64, w_rgb as f64);
    Ok(MetricValue {
        l: metric([w_pc, w_rgb], [s_pc, s_rgb], [sigma[0] as f64, sigma[1] as f64]),
        w_pc,
        w_rgb,
        s_pc,
        s_rgb,
    })
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    config: LspnConfig,
    log_sigma: [f32; 2],
    tensors: Vec<String>,
}

impl LspnModel<f32> {
    /// Writes `model.json` plus one tensor container per weight and bias.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (i, l) in self.linears().enumerate() {
            let w = format!("layer{i:02}.weight.g2t");
            let b = format!("layer{i:02}.bias.g2t");
            write_tensor(
                &dir.join(&w),
                &Tensor::f32(vec![l.outputs(), l.inputs()], l.weight.data().to_vec()).with_meta("kind", "weight"),
            )?;
            write_tensor(&dir.join(&b), &Tensor::f32(vec![l.outputs()], l.bias.clone()).with_meta("kind", "bias"))?;
            names.push(w);
            names.push(b);
        }
        let manifest = WeightsManifest { config: self.config.clone(), log_sigma: self.log_sigma, tensors: names };
        fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: WeightsManifest = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        let mut model = init_model(&manifest.config, 0)?;
        model.log_sigma = manifest.log_sigma;
        let expected = 2 * model.linears().count();
        if manifest.tensors.len() != expected {
            return Err(Error::format(
                0,
                format!("model.json lists {} tensors, architecture needs {expected}", manifest.tensors.len()),
            ));
        }
        let mut names = manifest.tensors.iter();
        for l in model.linears_mut() {
            let w = read_tensor(&dir.join(names.next().expect("counted")))?;
            let b = read_tensor(&dir.join(names.next().expect("counted")))?;
            if w.shape != [l.outputs(), l.inputs()] || b.shape != [l.outputs()] {
                return Err(Error::format(
                    12,
                    format!(
                        "tensor shape {:?}/{:?} does not match layer {}x{}",
                        w.shape,
                        b.shape,
                        l.outputs(),
                        l.inputs()
                    ),
                ));
            }
            l.weight.data_mut().copy_from_slice(&w.into_f32()?);
            l.bias.copy_from_slice(&b.into_f32()?);
        }
        if !model.is_finite() {
            return Err(Error::format(0, "non-finite log sigma"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> LspnConfig {
        LspnConfig {
            dim_pc: 3,
            dim_rgb: 2,
            proto_widths: vec![6],
            dir_widths: vec![5],
            head_widths: vec![4],
            dropout: 0.5,
            sigma_init: 0.5,
        }
    }

    fn random_input(n: usize, width: usize, rng: &mut ChaCha8Rng) -> LspnInput<f32> {
        LspnInput {
            proto: DenseMatrix::from_vec(n, width, (0..n * width).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap(),
            dir: DenseMatrix::from_vec(n, width, (0..n * width).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        }
    }

    #[test]
    fn zero_weights_give_unit_scales() {
        let mut m = init_model(&tiny(), 0).unwrap();
        let zeros: Vec<f32> = vec![0.0; m.param_count()];
        m.set_flat_params(&zeros).unwrap();
        let (a, b) = lspn_forward::<f32, ChaCha8Rng>(&m, &[1.0; 3], &[2.0; 2], &[0.5; 3], &[0.1; 2], None).unwrap();
        assert_eq!((a, b), (1.0, 1.0));
    }

    #[test]
    fn init_is_seeded_and_sigma_half() {
        let a = init_model(&tiny(), 9).unwrap();
        let b = init_model(&tiny(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(&tiny(), 10).unwrap());
        assert!((a.sigma()[0] - 0.5).abs() < 1e-7 && (a.sigma()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn output_range_and_determinism() {
        let m = init_model(&tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(64, 5, &mut rng);
        let w1 = m.predict(&x).unwrap();
        let w2 = m.predict(&x).unwrap();
        assert_eq!(w1, w2);
        let (lo, hi) = ((-1.0f32).exp(), 1.0f32.exp());
        assert!(w1.data().iter().all(|w| *w >= lo && *w <= hi));
    }

    #[test]
    fn wrong_width_rejected() {
        let m = init_model(&tiny(), 1).unwrap();
        assert!(lspn_forward::<f32, ChaCha8Rng>(&m, &[1.0; 2], &[2.0; 2], &[0.5; 3], &[0.1; 2], None).is_err());
    }

    #[test]
    fn save_load_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(&tiny(), 4).unwrap();
        m.save(dir.path()).unwrap();
        let back = LspnModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(8, 5, &mut rng);
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences_f64() {
        let m = init_model(&tiny(), 3).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_input(6, 5, &mut rng);
        let x = LspnInput { proto: x.proto.cast::<f64>(), dir: x.dir.cast::<f64>() };
        // loss = Σ c_r · w_r with fixed random coefficients
        let coef: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |model: &LspnModel<f64>| -> f64 {
            let w = model.predict(&x).unwrap();
            w.data().iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = m.forward_batch::<ChaCha8Rng>(&x, None).unwrap();
        let mut g = m.zero_grads();
        m.backward_batch(&cache, &DenseMatrix::from_vec(6, 2, coef.clone()).unwrap(), &mut g);
        let analytic = g.flat();
        let params = m.flat_params();
        let mut probe = m.clone();
        let res = crate::nn::backprop_check(
            &analytic,
            &params,
            |p| {
                probe.set_flat_params(p).unwrap();
                loss(&probe)
            },
            1e-6,
        );
        assert!(res.max_rel_error < 1e-5, "{res:?}");
    }
}
