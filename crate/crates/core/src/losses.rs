//! Power Jaccard, feature similarity and the per-sample composite loss.
//!
//! Reductions run in `f64` over pixels in row-major order.

use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::error::{Error, Result};
use crate::models::{ForwardOutput, OutputGrad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the similarity term in the multi-modal case.
    pub phi: f64,
    pub jaccard_power: f64,
    pub smoothing: f64,
    /// Treat the optical features as a constant target in the similarity term.
    pub similarity_detach_target: bool,
    pub similarity_reduction: Reduction,
}

/// How squared feature differences are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn divisor(self, len: usize) -> f64 {
        match self {
            Reduction::Mean => len.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            phi: 1e-2,
            jaccard_power: 2.0,
            smoothing: 1.0,
            similarity_detach_target: true,
            similarity_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return Err(Error::Config(format!("phi must be finite and >= 0, got {}", self.phi)));
        }
        if !(self.jaccard_power >= 1.0 && self.jaccard_power.is_finite()) {
            return Err(Error::Config(format!(
                "jaccard_power must be >= 1, got {}",
                self.jaccard_power
            )));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing must be > 0, got {}",
                self.smoothing
            )));
        }
        Ok(())
    }
}

fn check_pair(a: &Raster, b: &Raster, what: &str) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Argument(format!(
            "{what}: shapes {}x{}x{} and {}x{}x{} differ",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

#[inline]
fn pow(x: f64, k: f64) -> f64 {
    if k == 2.0 {
        x * x
    } else {
        x.powf(k)
    }
}

struct JaccardSums {
    intersection: f64,
    denominator: f64,
}

fn jaccard_sums(pred: &Raster, target: &Raster, config: &LossConfig) -> Result<JaccardSums> {
    check_pair(pred, target, "power jaccard")?;
    let k = config.jaccard_power;
    let (mut inter, mut pk, mut yk) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &y) in pred.data.iter().zip(&target.data) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("prediction {p} outside [0, 1]")));
        }
        let (p, y) = (p as f64, y as f64);
        inter += p * y;
        pk += pow(p, k);
        yk += pow(y, k);
    }
    Ok(JaccardSums {
        intersection: inter,
        denominator: pk + yk - inter + config.smoothing,
    })
}

/// `1 - (sum(p*y) + eps) / (sum(p^k) + sum(y^k) - sum(p*y) + eps)`.
pub fn power_jaccard(pred: &Raster, target: &Raster, config: &LossConfig) -> Result<f64> {
    let s = jaccard_sums(pred, target, config)?;
    Ok(1.0 - (s.intersection + config.smoothing) / s.denominator)
}

/// Loss and its gradient with respect to every predicted pixel.
pub fn power_jaccard_grad(pred: &Raster, target: &Raster, config: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let s = jaccard_sums(pred, target, config)?;
    let num = s.intersection + config.smoothing;
    let d = s.denominator;
    let k = config.jaccard_power;
    let d2 = d * d;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &y)| {
            let (p, y) = (p as f64, y as f64);
            let dd = k * pow(p, k - 1.0) - y;
            -(y * d - num * dd) / d2
        })
        .collect();
    Ok((1.0 - num / d, grad))
}

/// Mean squared difference over all channels and pixels.
pub fn feature_similarity(f_s2: &Raster, f_s2_hat: &Raster) -> Result<f64> {
    reduced_similarity(f_s2, f_s2_hat, Reduction::Mean)
}

/// Squared differences combined with `reduction`.
pub fn reduced_similarity(f_s2: &Raster, f_s2_hat: &Raster, reduction: Reduction) -> Result<f64> {
    check_pair(f_s2, f_s2_hat, "feature similarity")?;
    let sum: f64 = f_s2
        .data
        .iter()
        .zip(&f_s2_hat.data)
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
            d * d
        })
        .sum();
    Ok(sum / reduction.divisor(f_s2.data.len()))
}

/// Similarity and its gradient with respect to `f_s2_hat` (the gradient with
/// respect to `f_s2` is the negation).
pub fn feature_similarity_grad(f_s2: &Raster, f_s2_hat: &Raster, reduction: Reduction) -> Result<(f64, Vec<f64>)> {
    let value = reduced_similarity(f_s2, f_s2_hat, reduction)?;
    let n = reduction.divisor(f_s2.data.len());
    let grad = f_s2
        .data
        .iter()
        .zip(&f_s2_hat.data)
        .map(|(&a, &b)| 2.0 * (b as f64 - a as f64) / n)
        .collect();
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossCase {
    /// Optical features and their reconstruction are both present.
    MultiModal,
    /// Only the SAR-path prediction is present.
    MissingModality,
    /// Only a fused prediction is present (the dual-stream baseline, where a
    /// missing optical image is zero-filled).
    FusedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub case: LossCase,
    pub supervised_fused: Option<f64>,
    pub supervised_sar_path: Option<f64>,
    pub similarity: Option<f64>,
    pub total: f64,
}

fn case_of(output: &ForwardOutput) -> Result<LossCase> {
    let o = output;
    match (
        o.p_fused.is_some(),
        o.p_sar_path.is_some(),
        o.f_s2.is_some(),
        o.f_s2_hat.is_some(),
    ) {
        (true, true, true, true) => Ok(LossCase::MultiModal),
        (false, true, false, _) => Ok(LossCase::MissingModality),
        (true, false, _, false) => Ok(LossCase::FusedOnly),
        (pf, ps, f, fh) => Err(Error::Internal(format!(
            "inconsistent forward output (p_fused {pf}, p_sar_path {ps}, f_s2 {f}, f_s2_hat {fh})"
        ))),
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Composite loss of one sample together with the gradients of its total
/// with respect to the forward outputs.
pub fn sample_loss_grad(
    output: &ForwardOutput,
    label: &Raster,
    config: &LossConfig,
) -> Result<(LossReport, OutputGrad)> {
    let case = case_of(output)?;
    let mut grad = OutputGrad::default();
    let report = match case {
        LossCase::MultiModal => {
            let (lf, gf) = power_jaccard_grad(output.p_fused.as_ref().unwrap(), label, config)?;
            let (ls, gs) = power_jaccard_grad(output.p_sar_path.as_ref().unwrap(), label, config)?;
            let (sim, gh) =
                feature_similarity_grad(
                output.f_s2.as_ref().unwrap(),
                output.f_s2_hat.as_ref().unwrap(),
                config.similarity_reduction,
            )?;
            let phi = config.phi;
            grad.p_fused = Some(to_f32(gf));
            grad.p_sar_path = Some(to_f32(gs));
            if !config.similarity_detach_target {
                grad.f_s2 = Some(gh.iter().map(|g| (-phi * g) as f32).collect());
            }
            grad.f_s2_hat = Some(gh.into_iter().map(|g| (phi * g) as f32).collect());
            LossReport {
                case,
                supervised_fused: Some(lf),
                supervised_sar_path: Some(ls),
                similarity: Some(sim),
                total: lf + ls + phi * sim,
            }
        }
        LossCase::MissingModality => {
            let (ls, gs) = power_jaccard_grad(output.p_sar_path.as_ref().unwrap(), label, config)?;
            grad.p_sar_path = Some(to_f32(gs));
            LossReport {
                case,
                supervised_fused: None,
                supervised_sar_path: Some(ls),
                similarity: None,
                total: ls,
            }
        }
        LossCase::FusedOnly => {
            let (lf, gf) = power_jaccard_grad(output.p_fused.as_ref().unwrap(), label, config)?;
            grad.p_fused = Some(to_f32(gf));
            LossReport {
                case,
                supervised_fused: Some(lf),
                supervised_sar_path: None,
                similarity: None,
                total: lf,
            }
        }
    };
    Ok((report, grad))
}

pub fn sample_loss(output: &ForwardOutput, label: &Raster, config: &LossConfig) -> Result<LossReport> {
    let case = case_of(output)?;
    let pj = |p: &Option<Raster>| p.as_ref().map(|p| power_jaccard(p, label, config)).transpose();
    let supervised_fused = pj(&output.p_fused)?;
    let supervised_sar_path = pj(&output.p_sar_path)?;
    Ok(match case {
        LossCase::MultiModal => {
            let sim = reduced_similarity(
                output.f_s2.as_ref().unwrap(),
                output.f_s2_hat.as_ref().unwrap(),
                config.similarity_reduction,
            )?;
            LossReport {
                case,
                supervised_fused,
                supervised_sar_path,
                similarity: Some(sim),
                total: supervised_fused.unwrap() + supervised_sar_path.unwrap() + config.phi * sim,
            }
        }
        LossCase::MissingModality => LossReport {
            case,
            supervised_fused: None,
            supervised_sar_path,
            similarity: None,
            total: supervised_sar_path.unwrap(),
        },
        LossCase::FusedOnly => LossReport {
            case,
            supervised_fused,
            supervised_sar_path: None,
            similarity: None,
            total: supervised_fused.unwrap(),
        },
    })
}

/// Sum of per-sample totals, left to right in the given order.
pub fn batch_loss(reports: &[LossReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Argument("batch_loss of an empty list".into()));
    }
    Ok(reports.iter().fold(0.0, |acc, r| acc + r.total))
}
