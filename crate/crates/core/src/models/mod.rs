//! The three model variants.
//!
//! * `proposed`: SAR and optical U-Nets with identical hyper-parameters,
//!   a third U-Net that predicts the optical feature map from SAR, and a
//!   1x1 fusion head over the concatenated feature maps. With optical
//!   input it yields the fused prediction and the prediction through the
//!   reconstructed features; without, only the latter.
//! * `ds-zerofill`: the dual-stream network without reconstruction; a
//!   missing optical image is replaced by zeros.
//! * `unimodal-sar`: one SAR U-Net and a 1x1 head over its features.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta, TensorEntry, CHECKPOINT_MAGIC,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{zero_fill_optical, Raster, Sample, OPTICAL_CHANNELS, SAR_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param, StateDict, Tensor, UNet, UNetCache, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Proposed,
    DsZerofill,
    UnimodalSar,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Proposed, Variant::DsZerofill, Variant::UnimodalSar];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::DsZerofill => "ds-zerofill",
            Variant::UnimodalSar => "unimodal-sar",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown variant `{s}` (expected proposed, ds-zerofill or unimodal-sar)"
                ))
            })
    }
}

/// Shared U-Net hyper-parameters. `in_channels` describes the SAR
/// extractor; the optical extractor uses the same values with four input
/// channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    pub base_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: SAR_CHANNELS,
            feature_channels: 16,
            depth: 2,
            base_width: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != SAR_CHANNELS {
            return Err(Error::Config(format!(
                "backbone in_channels must be {SAR_CHANNELS} (SAR), got {}",
                self.in_channels
            )));
        }
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be at least 1".into()));
        }
        self.unet(SAR_CHANNELS).validate()
    }

    /// Patch and tile sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 || patch % self.size_multiple() != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} is not divisible by 2^{} = {}",
                self.depth,
                self.size_multiple()
            )));
        }
        Ok(())
    }

    fn unet(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            out_channels: self.feature_channels,
            depth: self.depth,
            base_width: self.base_width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    /// Use the optical image whenever the sample has one.
    #[default]
    Auto,
    /// Behave as if the optical image were missing.
    ForceMissing,
}

/// Predictions and feature maps for one sample; rasters keep the input's
/// height and width.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Prediction from SAR and optical features.
    pub p_fused: Option<Raster>,
    /// Prediction from SAR features and reconstructed optical features
    /// (proposed), or from SAR features alone (unimodal-sar).
    pub p_sar_path: Option<Raster>,
    pub f_s1: Raster,
    pub f_s2: Option<Raster>,
    pub f_s2_hat: Option<Raster>,
}

impl ForwardOutput {
    /// The prediction that is scored: the fused one when present.
    pub fn prediction(&self) -> &Raster {
        self.p_fused
            .as_ref()
            .or(self.p_sar_path.as_ref())
            .expect("every output carries a prediction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub variant: Variant,
    pub config: BackboneConfig,
    /// Seed of the training run that produced the parameters.
    pub seed: u64,
    pub sar_extractor: UNet,
    pub optical_extractor: Option<UNet>,
    pub reconstruction_net: Option<UNet>,
    /// 1x1 convolution to a single logit, over `2 * C_f` channels (or `C_f`
    /// for unimodal-sar).
    pub head: Conv2d,
}

/// Initialises a bundle. Parameters depend only on the random source.
pub fn build_model<R: Rng>(variant: Variant, config: &BackboneConfig, rng: &mut R) -> Result<ModelBundle> {
    config.validate()?;
    let sar_extractor = UNet::new(config.unet(SAR_CHANNELS), rng)?;
    let optical_extractor = match variant {
        Variant::Proposed | Variant::DsZerofill => Some(UNet::new(config.unet(OPTICAL_CHANNELS), rng)?),
        Variant::UnimodalSar => None,
    };
    let reconstruction_net = match variant {
        Variant::Proposed => Some(UNet::new(config.unet(SAR_CHANNELS), rng)?),
        _ => None,
    };
    let head_in = match variant {
        Variant::UnimodalSar => config.feature_channels,
        _ => 2 * config.feature_channels,
    };
    let head = Conv2d::new(head_in, 1, 1, true, rng);
    Ok(ModelBundle {
        variant,
        config: *config,
        seed: 0,
        sar_extractor,
        optical_extractor,
        reconstruction_net,
        head,
    })
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn to_batch(r: &Raster) -> Tensor {
    Tensor {
        n: 1,
        c: r.channels,
        h: r.height,
        w: r.width,
        data: r.data.clone(),
    }
}

fn sample_raster(t: &Tensor, i: usize) -> Raster {
    Raster {
        channels: t.c,
        height: t.h,
        width: t.w,
        data: t.sample(i).to_vec(),
    }
}

fn probabilities(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    p.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    p
}

/// Per-sample gradients of the loss with respect to the forward outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputGrad {
    pub p_fused: Option<Vec<f32>>,
    pub p_sar_path: Option<Vec<f32>>,
    pub f_s2: Option<Vec<f32>>,
    pub f_s2_hat: Option<Vec<f32>>,
}

struct HeadPass {
    input: Tensor,
    probs: Tensor,
}

/// Intermediate state of a training-mode forward pass over a mini-batch.
pub struct TrainPass {
    pub outputs: Vec<ForwardOutput>,
    /// Batch positions that went through the optical extractor.
    optical_rows: Vec<usize>,
    sar: UNetCache,
    optical: Option<UNetCache>,
    reconstruction: Option<UNetCache>,
    fused_head: Option<HeadPass>,
    sar_head: Option<HeadPass>,
}

impl ModelBundle {
    pub fn num_params(&mut self) -> usize {
        Module::num_params(self)
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let m = self.config.size_multiple();
        let (h, w) = (sample.height(), sample.width());
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "sample {}x{} is not divisible by 2^{} = {m}",
                h, w, self.config.depth
            )));
        }
        Ok(())
    }

    /// Head output for given SAR features and a second feature map (the
    /// optical features or their reconstruction). `None` for unimodal-sar.
    pub fn predict_from_features(&self, f_s1: &Raster, f_other: Option<&Raster>) -> Raster {
        let input = match f_other {
            Some(f) => Tensor::concat_channels(&to_batch(f_s1), &to_batch(f)),
            None => to_batch(f_s1),
        };
        sample_raster(&probabilities(&self.head.forward(&input)), 0)
    }

    /// Inference for one sample using running batch-norm statistics.
    pub fn forward(&self, sample: &Sample, mode: ForwardMode) -> Result<ForwardOutput> {
        self.check_sample(sample)?;
        let f1 = sample_raster(&self.sar_extractor.forward(&to_batch(&sample.sar))?, 0);
        let use_optical = mode == ForwardMode::Auto && sample.optical_available;
        match self.variant {
            Variant::Proposed => {
                let recon = self.reconstruction_net.as_ref().expect("proposed has reconstruction");
                let f2_hat = sample_raster(&recon.forward(&to_batch(&sample.sar))?, 0);
                let p_sar_path = Some(self.predict_from_features(&f1, Some(&f2_hat)));
                let (f_s2, p_fused) = if use_optical {
                    let optical = sample
                        .optical
                        .as_ref()
                        .ok_or_else(|| Error::Internal("sample flagged available without optical raster".into()))?;
                    let ext = self.optical_extractor.as_ref().expect("proposed has optical branch");
                    let f2 = sample_raster(&ext.forward(&to_batch(optical))?, 0);
                    let p = self.predict_from_features(&f1, Some(&f2));
                    (Some(f2), Some(p))
                } else {
                    (None, None)
                };
                Ok(ForwardOutput {
                    p_fused,
                    p_sar_path,
                    f_s1: f1,
                    f_s2,
                    f_s2_hat: Some(f2_hat),
                })
            }
            Variant::DsZerofill => {
                let input = if use_optical {
                    sample.clone()
                } else {
                    zero_fill_optical(&sample.without_optical())
                };
                let optical = input
                    .optical
                    .as_ref()
                    .ok_or_else(|| Error::Internal("zero-fill produced no optical raster".into()))?;
                let ext = self.optical_extractor.as_ref().expect("dual stream has optical branch");
                let f2 = sample_raster(&ext.forward(&to_batch(optical))?, 0);
                let p = self.predict_from_features(&f1, Some(&f2));
                Ok(ForwardOutput {
                    p_fused: Some(p),
                    p_sar_path: None,
                    f_s1: f1,
                    f_s2: Some(f2),
                    f_s2_hat: None,
                })
            }
            Variant::UnimodalSar => {
                let p = self.predict_from_features(&f1, None);
                Ok(ForwardOutput {
                    p_fused: None,
                    p_sar_path: Some(p),
                    f_s1: f1,
                    f_s2: None,
                    f_s2_hat: None,
                })
            }
        }
    }

    /// Training-mode forward over a mini-batch of equally sized samples.
    /// Batch-norm statistics come from the samples that pass through each
    /// network; the optical extractor of `proposed` only sees samples with
    /// an optical image.
    pub fn forward_train(&mut self, batch: &[Sample]) -> Result<TrainPass> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Argument("empty mini-batch".into()))?;
        let (h, w) = (first.height(), first.width());
        for s in batch {
            self.check_sample(s)?;
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Shape("mini-batch samples differ in size".into()));
            }
        }
        let sars: Vec<&[f32]> = batch.iter().map(|s| s.sar.data.as_slice()).collect();
        let sar = Tensor::stack(&sars, SAR_CHANNELS, h, w)?;
        let (f1, sar_cache) = self.sar_extractor.forward_train(&sar)?;
        let n = batch.len();

        let mut outputs: Vec<ForwardOutput> = (0..n)
            .map(|i| ForwardOutput {
                p_fused: None,
                p_sar_path: None,
                f_s1: sample_raster(&f1, i),
                f_s2: None,
                f_s2_hat: None,
            })
            .collect();

        let optical_rows: Vec<usize> = match self.variant {
            Variant::Proposed => (0..n).filter(|&i| batch[i].optical_available).collect(),
            Variant::DsZerofill => (0..n).collect(),
            Variant::UnimodalSar => Vec::new(),
        };

        let mut optical_cache = None;
        let mut fused_head = None;
        if !optical_rows.is_empty() {
            let filled: Vec<Sample> = optical_rows
                .iter()
                .map(|&i| {
                    if batch[i].optical_available {
                        batch[i].clone()
                    } else {
                        zero_fill_optical(&batch[i].without_optical())
                    }
                })
                .collect();
            let opts: Vec<&[f32]> = filled
                .iter()
                .map(|s| s.optical.as_ref().expect("optical present or zero-filled").data.as_slice())
                .collect();
            let optical = Tensor::stack(&opts, OPTICAL_CHANNELS, h, w)?;
            let ext = self.optical_extractor.as_mut().expect("variant has optical branch");
            let (f2, cache) = ext.forward_train(&optical)?;
            let input = Tensor::concat_channels(&f1.select(&optical_rows), &f2);
            let probs = probabilities(&self.head.forward(&input));
            for (j, &i) in optical_rows.iter().enumerate() {
                outputs[i].f_s2 = Some(sample_raster(&f2, j));
                outputs[i].p_fused = Some(sample_raster(&probs, j));
            }
            optical_cache = Some(cache);
            fused_head = Some(HeadPass { input, probs });
        }

        let mut recon_cache = None;
        let mut sar_head = None;
        match self.variant {
            Variant::Proposed => {
                let recon = self.reconstruction_net.as_mut().expect("proposed has reconstruction");
                let (f2_hat, cache) = recon.forward_train(&sar)?;
                let input = Tensor::concat_channels(&f1, &f2_hat);
                let probs = probabilities(&self.head.forward(&input));
                for (i, out) in outputs.iter_mut().enumerate() {
                    out.f_s2_hat = Some(sample_raster(&f2_hat, i));
                    out.p_sar_path = Some(sample_raster(&probs, i));
                }
                recon_cache = Some(cache);
                sar_head = Some(HeadPass { input, probs });
            }
            Variant::UnimodalSar => {
                let probs = probabilities(&self.head.forward(&f1));
                for (i, out) in outputs.iter_mut().enumerate() {
                    out.p_sar_path = Some(sample_raster(&probs, i));
                }
                sar_head = Some(HeadPass { input: f1, probs });
            }
            Variant::DsZerofill => {}
        }

        Ok(TrainPass {
            outputs,
            optical_rows,
            sar: sar_cache,
            optical: optical_cache,
            reconstruction: recon_cache,
            fused_head,
            sar_head,
        })
    }

    /// Accumulates parameter gradients for the given per-sample output
    /// gradients (one entry per batch sample, in batch order).
    pub fn backward(&mut self, pass: TrainPass, grads: &[OutputGrad]) -> Result<()> {
        let n = pass.outputs.len();
        if grads.len() != n {
            return Err(Error::Internal(format!(
                "{} output gradients for a batch of {n}",
                grads.len()
            )));
        }
        let first = &pass.outputs[0].f_s1;
        let (cf, h, w) = (first.channels, first.height, first.width);
        let plane = h * w;
        let mut d_f1 = Tensor::zeros(n, cf, h, w);

        let logit_grad = |probs: &Tensor, rows: &[usize], pick: &dyn Fn(&OutputGrad) -> Option<&Vec<f32>>| -> Result<Tensor> {
            let mut dz = Tensor::zeros(rows.len(), 1, h, w);
            for (j, &i) in rows.iter().enumerate() {
                let dp = pick(&grads[i]).ok_or_else(|| {
                    Error::Internal(format!("missing prediction gradient for batch row {i}"))
                })?;
                if dp.len() != plane {
                    return Err(Error::Shape("prediction gradient has the wrong size".into()));
                }
                let p = probs.sample(j);
                for (k, d) in dz.sample_mut(j).iter_mut().enumerate() {
                    *d = dp[k] * p[k] * (1.0 - p[k]);
                }
            }
            Ok(dz)
        };

        let mut d_f2 = None;
        if let Some(head) = &pass.fused_head {
            let dz = logit_grad(&head.probs, &pass.optical_rows, &|g| g.p_fused.as_ref())?;
            let d_in = self.head.backward(&head.input, &dz, true).expect("input gradient");
            let (da, mut db) = d_in.split_channels(cf);
            for (j, &i) in pass.optical_rows.iter().enumerate() {
                d_f1.sample_mut(i)
                    .iter_mut()
                    .zip(da.sample(j))
                    .for_each(|(a, b)| *a += b);
                if let Some(extra) = &grads[i].f_s2 {
                    db.sample_mut(j).iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
            }
            d_f2 = Some(db);
        }

        let mut d_f2_hat = None;
        if let Some(head) = &pass.sar_head {
            let rows: Vec<usize> = (0..n).collect();
            let dz = logit_grad(&head.probs, &rows, &|g| g.p_sar_path.as_ref())?;
            let d_in = self.head.backward(&head.input, &dz, true).expect("input gradient");
            if self.variant == Variant::UnimodalSar {
                d_f1.add_assign(&d_in);
            } else {
                let (da, mut db) = d_in.split_channels(cf);
                d_f1.add_assign(&da);
                for i in 0..n {
                    if let Some(extra) = &grads[i].f_s2_hat {
                        db.sample_mut(i).iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                    }
                }
                d_f2_hat = Some(db);
            }
        }

        self.sar_extractor.backward(&pass.sar, &d_f1);
        if let (Some(cache), Some(d)) = (&pass.optical, &d_f2) {
            self.optical_extractor
                .as_mut()
                .expect("variant has optical branch")
                .backward(cache, d);
        }
        if let (Some(cache), Some(d)) = (&pass.reconstruction, &d_f2_hat) {
            self.reconstruction_net
                .as_mut()
                .expect("proposed has reconstruction")
                .backward(cache, d);
        }
        Ok(())
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.params_mut(&mut out);
        out
    }

    pub fn state_dict(&self) -> StateDict {
        let mut out = StateDict::new();
        self.save_state("", &mut out);
        out
    }
}

impl Module for ModelBundle {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.sar_extractor.params_mut(out);
        if let Some(o) = &mut self.optical_extractor {
            o.params_mut(out);
        }
        if let Some(r) = &mut self.reconstruction_net {
            r.params_mut(out);
        }
        self.head.params_mut(out);
    }

    fn save_state(&self, _prefix: &str, out: &mut StateDict) {
        self.sar_extractor.save_state("sar", out);
        if let Some(o) = &self.optical_extractor {
            o.save_state("optical", out);
        }
        if let Some(r) = &self.reconstruction_net {
            r.save_state("reconstruction", out);
        }
        self.head.save_state("head", out);
    }

    fn load_state(&mut self, _prefix: &str, state: &StateDict) -> Result<()> {
        self.sar_extractor.load_state("sar", state)?;
        if let Some(o) = &mut self.optical_extractor {
            o.load_state("optical", state)?;
        }
        if let Some(r) = &mut self.reconstruction_net {
            r.load_state("reconstruction", state)?;
        }
        self.head.load_state("head", state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Raster;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            feature_channels: 4,
            depth: 2,
            base_width: 4,
            ..Default::default()
        }
    }

    fn sample(n: usize, optical: bool, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |c: usize| Raster::new(c, n, n, (0..c * n * n).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let sar = r(SAR_CHANNELS);
        let opt = r(OPTICAL_CHANNELS);
        let label = Raster::new(1, n, n, r(1).data.iter().map(|v| (*v > 0.5) as u8 as f32).collect()).unwrap();
        Sample {
            sar,
            optical: optical.then_some(opt),
            label,
            optical_available: optical,
            site_id: "s".into(),
            timestamp_index: 1,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("unet".parse::<Variant>().is_err());
    }

    #[test]
    fn bundle_composition_per_variant() {
        let cfg = BackboneConfig {
            feature_channels: 16,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_model(Variant::Proposed, &cfg, &mut rng).unwrap();
        assert!(p.optical_extractor.is_some() && p.reconstruction_net.is_some());
        assert_eq!(p.head.in_channels, 32);
        let d = build_model(Variant::DsZerofill, &cfg, &mut rng).unwrap();
        assert!(d.optical_extractor.is_some() && d.reconstruction_net.is_none());
        let u = build_model(Variant::UnimodalSar, &cfg, &mut rng).unwrap();
        assert!(u.optical_extractor.is_none() && u.reconstruction_net.is_none());
        assert_eq!(u.head.in_channels, 16);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_model(Variant::Proposed, &small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_model(Variant::Proposed, &small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = build_model(Variant::Proposed, &small(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn extractors_differ_only_in_first_layer() {
        let mut m = build_model(Variant::Proposed, &small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let sar = m.sar_extractor.num_params();
        let opt = m.optical_extractor.as_mut().unwrap().num_params();
        // first 3x3 conv: (4 - 2) extra input channels x base_width x 9 taps
        assert_eq!(opt - sar, (OPTICAL_CHANNELS - SAR_CHANNELS) * 4 * 9);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = BackboneConfig { depth: 0, ..small() };
        assert!(matches!(build_model(Variant::Proposed, &bad, &mut rng), Err(Error::Config(_))));
        assert!(small().check_patch(62).is_err());
        assert!(small().check_patch(64).is_ok());
    }

    #[test]
    fn forward_fields_per_variant_and_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = sample(16, true, 1);
        let p = build_model(Variant::Proposed, &small(), &mut rng).unwrap();
        let out = p.forward(&full, ForwardMode::Auto).unwrap();
        assert!(out.p_fused.is_some() && out.p_sar_path.is_some() && out.f_s2.is_some() && out.f_s2_hat.is_some());
        let forced = p.forward(&full, ForwardMode::ForceMissing).unwrap();
        assert!(forced.p_fused.is_none() && forced.f_s2.is_none());
        assert_eq!(forced, p.forward(&full.without_optical(), ForwardMode::Auto).unwrap());

        let d = build_model(Variant::DsZerofill, &small(), &mut rng).unwrap();
        let out = d.forward(&full.without_optical(), ForwardMode::Auto).unwrap();
        assert!(out.p_fused.is_some() && out.f_s2_hat.is_none() && out.p_sar_path.is_none());

        let u = build_model(Variant::UnimodalSar, &small(), &mut rng).unwrap();
        let out = u.forward(&full, ForwardMode::Auto).unwrap();
        assert!(out.p_fused.is_none() && out.p_sar_path.is_some() && out.f_s2.is_none());
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let p = build_model(Variant::Proposed, &small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = sample(10, true, 0);
        assert!(matches!(p.forward(&s, ForwardMode::Auto), Err(Error::Shape(_))));
    }

    fn probe(rng: &mut ChaCha8Rng, r: &Option<Raster>) -> Option<Vec<f32>> {
        r.as_ref().map(|r| (0..r.data.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    }

    fn dot(r: &Option<Raster>, g: &Option<Vec<f32>>) -> f64 {
        match (r, g) {
            (Some(r), Some(g)) => r.data.iter().zip(g).map(|(a, b)| *a as f64 * *b as f64).sum(),
            _ => 0.0,
        }
    }

    #[test]
    fn bundle_backward_matches_finite_differences() {
        let batch = vec![sample(8, true, 1), sample(8, false, 2), sample(8, true, 3)];
        for variant in Variant::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut m = build_model(variant, &small(), &mut rng).unwrap();
            // keep the feature ReLUs away from their kink
            for net in [Some(&mut m.sar_extractor), m.optical_extractor.as_mut(), m.reconstruction_net.as_mut()]
                .into_iter()
                .flatten()
            {
                net.head.bias.as_mut().unwrap().value.fill(3.0);
            }
            let pass = m.forward_train(&batch).unwrap();
            let grads: Vec<OutputGrad> = pass
                .outputs
                .iter()
                .map(|o| OutputGrad {
                    p_fused: probe(&mut rng, &o.p_fused),
                    p_sar_path: probe(&mut rng, &o.p_sar_path),
                    f_s2: probe(&mut rng, &o.f_s2),
                    f_s2_hat: probe(&mut rng, &o.f_s2_hat),
                })
                .collect();
            let objective = |m: &ModelBundle| -> f64 {
                let pass = m.clone().forward_train(&batch).unwrap();
                pass.outputs
                    .iter()
                    .zip(&grads)
                    .map(|(o, g)| {
                        dot(&o.p_fused, &g.p_fused)
                            + dot(&o.p_sar_path, &g.p_sar_path)
                            + dot(&o.f_s2, &g.f_s2)
                            + dot(&o.f_s2_hat, &g.f_s2_hat)
                    })
                    .sum()
            };
            m.zero_grad();
            m.backward(pass, &grads).unwrap();
            let analytic: Vec<Vec<f32>> = m.params().iter().map(|p| p.grad.clone()).collect();
            // Large steps cross ReLU and max-pool kinks, small ones drown in f32
            // rounding; both only inflate the error, so keep the best step.
            let mut errors = Vec::new();
            for (k, g) in analytic.iter().enumerate() {
                for idx in [0, g.len() / 2] {
                    let err = [3e-4f32, 1e-4, 5e-5, 2e-5, 1e-5]
                        .into_iter()
                        .map(|eps| {
                            let shifted = |sign: f32| {
                                let mut m2 = m.clone();
                                m2.params()[k].value[idx] += sign * eps;
                                m2
                            };
                            let fd = (objective(&shifted(1.0)) - objective(&shifted(-1.0))) / (2.0 * eps as f64);
                            (fd - g[idx] as f64).abs() / (1.0 + g[idx].abs() as f64)
                        })
                        .fold(f64::INFINITY, f64::min);
                    errors.push(err);
                }
            }
            errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = errors[errors.len() / 2];
            let worst = *errors.last().unwrap();
            assert!(median < 5e-3 && worst < 5e-2, "{variant}: median {median}, worst {worst}");
        }
    }

    #[test]
    fn train_pass_matches_layout_of_inference() {
        let mut p = build_model(Variant::Proposed, &small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let batch = vec![sample(16, true, 1), sample(16, false, 2), sample(16, true, 3)];
        let pass = p.forward_train(&batch).unwrap();
        assert!(pass.outputs[0].p_fused.is_some());
        assert!(pass.outputs[1].p_fused.is_none() && pass.outputs[1].f_s2.is_none());
        assert!(pass.outputs.iter().all(|o| o.p_sar_path.is_some() && o.f_s2_hat.is_some()));
    }
}
