//! Measurable image attributes and the composite traversal objective.
//!
//! Every attribute is a differentiable scalar read off the rendered image:
//! pupil/iris radii and their ratio come from the circle estimator, eyelid
//! opening from the row-coverage statistic, sharpness from masked band-pass
//! power. Hold terms (mask, eyelid, identity) anchor the image to a
//! reference snapshot taken before the traversal starts.

use crate::autodiff::{Array, Context, PadMode, Tensor};
use crate::decoders::{Decoder, LatentSpace};
use crate::error::{Error, Result};
use crate::geometry::{
    self, estimate_circles, eyelid_opening, normalize, soft_mask, CircleEstimate, PolarConfig,
};
use crate::identity::{loss_identity, phi_id, GaborBank};

// ── Sharpness ────────────────────────────────────────────────────────────

/// Half-saturation constant of the score's squared-power response.
pub const SHARPNESS_C: f64 = 1_800_000.0;

/// Gain applied to the band-pass response before squaring.
///
/// Calibrated once against sharp (blur-mix ≈ 0) procedural renders at the
/// default experiment resolution so their scores land in the upper-middle
/// of the range instead of collapsing against 0, where the squashing would
/// kill every gradient. The value transfers across resolutions because the
/// power estimate is a per-pixel mean.
pub const DEFAULT_RESPONSE_GAIN: f64 = 230_000.0;

#[derive(Clone, Debug)]
pub struct SharpnessConfig {
    /// Multiplies the filter response before squaring.
    pub response_gain: f64,
    /// Half-saturation constant `C`.
    pub c: f64,
    /// Treat the mask-mass denominator as a constant during backprop, so
    /// the score cannot be gamed by shrinking the mask instead of adding
    /// texture. On by default; the off position exists for gradient
    /// verification of the full graph.
    pub detach_mask_norm: bool,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        SharpnessConfig {
            response_gain: DEFAULT_RESPONSE_GAIN,
            c: SHARPNESS_C,
            detach_mask_norm: true,
        }
    }
}

/// 9×9 difference-of-Gaussians band-pass kernel (σ = 1 minus σ = 2), shaped
/// `1×1×9×9` for [`Tensor::conv2d`]. Exactly zero-sum, so constant images
/// produce exactly zero response.
pub fn sharpness_kernel() -> Array {
    let (s1, s2) = (1.0_f64, 2.0_f64);
    let mut g1 = [0.0; 81];
    let mut g2 = [0.0; 81];
    let (mut n1, mut n2) = (0.0, 0.0);
    for y in -4i64..=4 {
        for x in -4i64..=4 {
            let i = ((y + 4) * 9 + (x + 4)) as usize;
            let r2 = (x * x + y * y) as f64;
            g1[i] = (-r2 / (2.0 * s1 * s1)).exp();
            g2[i] = (-r2 / (2.0 * s2 * s2)).exp();
            n1 += g1[i];
            n2 += g2[i];
        }
    }
    let mut k: Vec<f64> = (0..81).map(|i| g1[i] / n1 - g2[i] / n2).collect();
    let residue = k.iter().sum::<f64>() / 81.0;
    for v in &mut k {
        *v -= residue;
    }
    Array::new(vec![1, 1, 9, 9], k).expect("kernel shape")
}

/// Masked band-pass sharpness score in `[0, 100)`.
///
/// `S = Σ (g·(k∗x))² · m`, `P = S / Σm`, `score = 100 · P² / (P² + C²)`.
/// The image is reflect-padded so border pixels add no fake edge energy.
/// Fails on a degenerate mask (`Σm ≤ 10`).
pub fn sharpness_score(x: &Tensor, m: &Tensor, cfg: &SharpnessConfig) -> Result<Tensor> {
    let (xs, ms) = (x.shape(), m.shape());
    if xs != ms {
        return Err(Error::ShapeMismatch {
            op: "sharpness_score",
            left: xs,
            right: ms,
        });
    }
    let [h, w] = match xs.as_slice() {
        [h, w] => [*h, *w],
        _ => {
            return Err(Error::domain(
                "sharpness_score",
                format!("expected an H×W image, got {xs:?}"),
            ))
        }
    };
    let mass: f64 = m.values().iter().sum();
    if !(mass > geometry::MIN_MASK_MASS) {
        return Err(Error::DegenerateMask {
            msg: format!("mask mass {mass:.3} too small for a sharpness estimate"),
        });
    }
    let ctx = x.context();
    let kernel = ctx.constant(&sharpness_kernel());
    let response = x
        .reshape(&[1, h, w])?
        .conv2d(&kernel, 1, 4, PadMode::Reflect)?
        .mul_scalar(cfg.response_gain)?;
    let weighted = response.square()?.mul(&m.reshape(&[1, h, w])?)?;
    let s = weighted.sum_all()?;
    let p = if cfg.detach_mask_norm {
        s.div_scalar(mass)?
    } else {
        s.div(&m.sum_all()?)?
    };
    // 100·P²/(P² + C²), written as 100·(1 − C²/(P² + C²)) so the result
    // keeps its distance from 100 even when P² dwarfs C² in f64. Gains
    // thousands of times past calibration can still round the inner
    // subtraction to 1; that regime is numerically saturated anyway.
    let p2 = p.square()?;
    let falloff = ctx.scalar(cfg.c * cfg.c).div(&p2.add_scalar(cfg.c * cfg.c)?)?;
    falloff.rsub_scalar(1.0)?.mul_scalar(100.0)
}

/// Mean masked band-pass power at unit gain: `Σ (k∗x)²·m / Σm`, plain f64.
/// The raw texture-energy statistic experiment summaries report —
/// independent of the sharpness gain and squashing.
pub fn band_power(image: &Array, mask: &Array) -> Result<f64> {
    if image.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "band_power",
            left: image.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let [h, w] = match image.shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(Error::domain(
                "band_power",
                format!("expected an H×W image, got {other:?}"),
            ))
        }
    };
    let mass: f64 = mask.data().iter().sum();
    if !(mass > geometry::MIN_MASK_MASS) {
        return Err(Error::DegenerateMask {
            msg: format!("mask mass {mass:.3} too small for a texture-power estimate"),
        });
    }
    let ctx = Context::new();
    let x = ctx.constant(image);
    let kernel = ctx.constant(&sharpness_kernel());
    let response = x.reshape(&[1, h, w])?.conv2d(&kernel, 1, 4, PadMode::Reflect)?;
    let weighted = response
        .square()?
        .mul(&ctx.constant(mask).reshape(&[1, h, w])?)?;
    Ok(weighted.sum_all()?.value()? / mass)
}

// ── Individual loss terms ────────────────────────────────────────────────

const BCE_CLAMP: f64 = 1e-7;
const RATIO_EPS: f64 = 1e-6;

/// Mean per-pixel binary cross-entropy of a live soft mask against a binary
/// reference mask. Probabilities are clamped to `[1e-7, 1 − 1e-7]`.
pub fn loss_mask(m: &Tensor, reference: &Array) -> Result<Tensor> {
    if m.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_mask",
            left: m.shape(),
            right: reference.shape().to_vec(),
        });
    }
    let ctx = m.context();
    let r = ctx.constant(reference);
    let mc = m.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = r.mul(&mc.log()?)?;
    let neg = r.rsub_scalar(1.0)?.mul(&mc.rsub_scalar(1.0)?.log()?)?;
    pos.add(&neg)?.neg()?.mean_all()
}

/// `|Λ(m) − Λ₀|` — absolute change in eyelid opening from the reference.
pub fn loss_eyelid(m: &Tensor, reference_opening: f64) -> Result<Tensor> {
    eyelid_opening(m)?.sub_scalar(reference_opening)?.abs()
}

/// `|r_pupil − target|` in pixels.
pub fn loss_pupil(est: &CircleEstimate, target: f64) -> Result<Tensor> {
    est.pupil_radius.sub_scalar(target)?.abs()
}

/// `|r_iris − target|` in pixels.
pub fn loss_iris(est: &CircleEstimate, target: f64) -> Result<Tensor> {
    est.iris_radius.sub_scalar(target)?.abs()
}

/// `|100·r_pupil/(r_iris + 1e-6) − target|` (ratio expressed in percent).
pub fn loss_pir(est: &CircleEstimate, target: f64) -> Result<Tensor> {
    est.pupil_radius
        .mul_scalar(100.0)?
        .div(&est.iris_radius.add_scalar(RATIO_EPS)?)?
        .sub_scalar(target)?
        .abs()
}

/// `|score − target|` in score points.
pub fn loss_sharpness(x: &Tensor, m: &Tensor, target: f64, cfg: &SharpnessConfig) -> Result<Tensor> {
    sharpness_score(x, m, cfg)?.sub_scalar(target)?.abs()
}

// ── Attribute specifications ─────────────────────────────────────────────

/// The attributes a traversal can steer or hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Sharpness,
    PupilRadius,
    IrisRadius,
    PupilIrisRatio,
    EyelidHold,
    MaskHold,
    IdentityHold,
}

impl AttributeKind {
    /// Targeted kinds steer toward a numeric target; the rest hold the
    /// reference state.
    pub fn is_targeted(self) -> bool {
        matches!(
            self,
            AttributeKind::Sharpness
                | AttributeKind::PupilRadius
                | AttributeKind::IrisRadius
                | AttributeKind::PupilIrisRatio
        )
    }

    pub fn is_hold(self) -> bool {
        !self.is_targeted()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Sharpness => "sharpness",
            AttributeKind::PupilRadius => "pupil_radius",
            AttributeKind::IrisRadius => "iris_radius",
            AttributeKind::PupilIrisRatio => "pupil_iris_ratio",
            AttributeKind::EyelidHold => "eyelid_hold",
            AttributeKind::MaskHold => "mask_hold",
            AttributeKind::IdentityHold => "identity_hold",
        }
    }
}

impl std::fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One term of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributeSpec {
    pub kind: AttributeKind,
    /// Required for targeted kinds, forbidden for hold kinds.
    #[serde(default)]
    pub target: Option<f64>,
    /// Non-negative term weight λ.
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl AttributeSpec {
    pub fn targeted(kind: AttributeKind, target: f64) -> Self {
        AttributeSpec {
            kind,
            target: Some(target),
            weight: 1.0,
        }
    }

    pub fn hold(kind: AttributeKind) -> Self {
        AttributeSpec {
            kind,
            target: None,
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Reject weight/target/duplication mistakes before any rendering happens.
pub fn validate_specs(specs: &[AttributeSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("attribute list must not be empty".to_string()));
    }
    let mut seen: Vec<AttributeKind> = Vec::new();
    for spec in specs {
        if seen.contains(&spec.kind) {
            return Err(Error::Config(format!("duplicate attribute '{}'", spec.kind)));
        }
        seen.push(spec.kind);
        if !(spec.weight >= 0.0) || !spec.weight.is_finite() {
            return Err(Error::Config(format!(
                "attribute '{}' has invalid weight {}",
                spec.kind, spec.weight
            )));
        }
        match (spec.kind.is_targeted(), spec.target) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "attribute '{}' needs a target value",
                    spec.kind
                )))
            }
            (true, Some(t)) if !t.is_finite() => {
                return Err(Error::Config(format!(
                    "attribute '{}' has a non-finite target",
                    spec.kind
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "hold attribute '{}' must not carry a target",
                    spec.kind
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

// ── Measured values and the reference baseline ───────────────────────────

/// Detached attribute readouts of one rendered image.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributeValues {
    pub pupil_radius: f64,
    pub iris_radius: f64,
    pub pupil_iris_ratio: f64,
    pub eyelid_opening: f64,
    pub sharpness: f64,
}

impl AttributeValues {
    /// The measured value a targeted kind steers; `None` for hold kinds.
    pub fn targeted_value(&self, kind: AttributeKind) -> Option<f64> {
        match kind {
            AttributeKind::Sharpness => Some(self.sharpness),
            AttributeKind::PupilRadius => Some(self.pupil_radius),
            AttributeKind::IrisRadius => Some(self.iris_radius),
            AttributeKind::PupilIrisRatio => Some(self.pupil_iris_ratio),
            _ => None,
        }
    }
}

/// Everything hold terms need about the pre-traversal image, measured once.
#[derive(Clone, Debug)]
pub struct Baseline {
    /// The reference image `x₀`.
    pub image: Array,
    /// Its soft mask thresholded at 0.5.
    pub mask_binary: Array,
    /// Eyelid opening `Λ₀`.
    pub eyelid_opening: f64,
    /// Identity descriptor stack `φ₀` (loss bank on the polar unwrap).
    pub identity: Array,
    pub attrs: AttributeValues,
}

/// Shared settings of the composite objective.
#[derive(Clone, Debug)]
pub struct CompositeConfig {
    pub sharpness: SharpnessConfig,
    /// Polar grid used by the identity descriptor.
    pub polar: PolarConfig,
    /// Weight of the optional `½‖v − v₀‖²` latent anchor; 0 disables it.
    pub z_reg_weight: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        CompositeConfig {
            sharpness: SharpnessConfig::default(),
            polar: PolarConfig::default(),
            z_reg_weight: 0.0,
        }
    }
}

impl Baseline {
    /// Measure the reference image. Fails if its mask is degenerate — a
    /// traversal cannot hold on to a reference it cannot measure.
    pub fn measure(x0: &Array, cfg: &CompositeConfig) -> Result<Baseline> {
        let ctx = Context::new();
        let x = ctx.constant(x0);
        let m = soft_mask(&x)?;
        let est = estimate_circles(&x, &m)?;
        let lam = eyelid_opening(&m)?.value()?;
        let score = sharpness_score(&x, &m, &cfg.sharpness)?.value()?;
        let polar = normalize(&x, &est, &cfg.polar)?;
        let phi0 = phi_id(&GaborBank::loss_bank(), &polar.image)?.detach();
        let mask = m.detach();
        let mask_binary = Array::new(
            mask.shape().to_vec(),
            mask.data().iter().map(|&v| f64::from(v >= 0.5)).collect(),
        )?;
        let (pupil, iris, _, _) = est.values()?;
        Ok(Baseline {
            image: x0.clone(),
            mask_binary,
            eyelid_opening: lam,
            identity: phi0,
            attrs: AttributeValues {
                pupil_radius: pupil,
                iris_radius: iris,
                pupil_iris_ratio: 100.0 * pupil / (iris + RATIO_EPS),
                eyelid_opening: lam,
                sharpness: score,
            },
        })
    }
}

// ── The composite objective ──────────────────────────────────────────────

/// One evaluated term: the raw (unweighted) loss value next to its weight.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TermValue {
    pub kind: AttributeKind,
    pub raw: f64,
    pub weight: f64,
}

/// Result of one composite evaluation: the differentiable total plus
/// detached diagnostics.
#[derive(Debug)]
pub struct Composite {
    pub total: Tensor,
    pub terms: Vec<TermValue>,
    /// Raw value of the latent anchor term, when enabled.
    pub z_reg: Option<f64>,
    pub attrs: AttributeValues,
}

/// Build the weighted objective `Σ λ_k · term_k` from a single rendering of
/// the latent.
///
/// `baseline` is required exactly when a hold term is present; `anchor` is
/// required exactly when `cfg.z_reg_weight > 0`.
pub fn composite_loss(
    ctx: &Context,
    latent: &Tensor,
    space: LatentSpace,
    decoder: &dyn Decoder,
    specs: &[AttributeSpec],
    baseline: Option<&Baseline>,
    anchor: Option<&Array>,
    cfg: &CompositeConfig,
) -> Result<Composite> {
    validate_specs(specs)?;
    let needs_hold = specs.iter().any(|s| s.kind.is_hold());
    if needs_hold && baseline.is_none() {
        return Err(Error::Config(
            "hold attributes require a reference baseline".to_string(),
        ));
    }
    if cfg.z_reg_weight > 0.0 && anchor.is_none() {
        return Err(Error::Config(
            "latent anchor term enabled but no anchor vector given".to_string(),
        ));
    }

    // One forward pass shared by every term.
    let x = decoder.decode_from(ctx, latent, space)?;
    let m = soft_mask(&x)?;
    let est = estimate_circles(&x, &m)?;
    let lam = eyelid_opening(&m)?;
    let score = sharpness_score(&x, &m, &cfg.sharpness)?;

    let (pupil, iris, _, _) = est.values()?;
    let attrs = AttributeValues {
        pupil_radius: pupil,
        iris_radius: iris,
        pupil_iris_ratio: 100.0 * pupil / (iris + RATIO_EPS),
        eyelid_opening: lam.value()?,
        sharpness: score.value()?,
    };

    let mut total = ctx.scalar(0.0);
    let mut terms = Vec::with_capacity(specs.len());
    for spec in specs {
        let term = match spec.kind {
            AttributeKind::Sharpness => {
                score.sub_scalar(spec.target.expect("validated"))?.abs()?
            }
            AttributeKind::PupilRadius => loss_pupil(&est, spec.target.expect("validated"))?,
            AttributeKind::IrisRadius => loss_iris(&est, spec.target.expect("validated"))?,
            AttributeKind::PupilIrisRatio => loss_pir(&est, spec.target.expect("validated"))?,
            AttributeKind::EyelidHold => {
                let b = baseline.expect("checked");
                loss_eyelid(&m, b.eyelid_opening)?
            }
            AttributeKind::MaskHold => {
                let b = baseline.expect("checked");
                loss_mask(&m, &b.mask_binary)?
            }
            AttributeKind::IdentityHold => {
                let b = baseline.expect("checked");
                let polar = normalize(&x, &est, &cfg.polar)?;
                let phi = phi_id(&GaborBank::loss_bank(), &polar.image)?;
                loss_identity(&phi, &b.identity)?
            }
        };
        terms.push(TermValue {
            kind: spec.kind,
            raw: term.value()?,
            weight: spec.weight,
        });
        if spec.weight > 0.0 {
            total = total.add(&term.mul_scalar(spec.weight)?)?;
        }
    }

    let mut z_reg = None;
    if cfg.z_reg_weight > 0.0 {
        let anchor = ctx.constant(anchor.expect("checked"));
        let reg = latent
            .sub(&anchor)?
            .square()?
            .sum_all()?
            .mul_scalar(0.5)?;
        z_reg = Some(reg.value()?);
        total = total.add(&reg.mul_scalar(cfg.z_reg_weight)?)?;
    }

    Ok(Composite {
        total,
        terms,
        z_reg,
        attrs,
    })
}
