//! Differentiable geometry readouts: segmentation mask, pupil/iris circle
//! estimation, eyelid opening, and polar normalization.
//!
//! Everything here is built from smooth primitives so gradients flow from
//! the readouts back into whatever produced the image. The estimators are
//! validated against the procedural decoder's closed-form parameters; the
//! constants below are part of that contract and are not tunable knobs.

use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};

/// Gray-level band treated as iris texture by [`soft_mask`]; pixels well
/// inside `(LO, HI)` get mask ≈ 1, the pupil (~0.1), sclera (~0.9) and
/// closed lids (~0.88) get mask ≈ 0.
const MASK_BAND_LO: f64 = 0.25;
const MASK_BAND_HI: f64 = 0.75;
/// Gray-level softness of the mask band edges.
const MASK_SOFTNESS: f64 = 0.05;

/// Occupancy (in soft pixels) under which segmentation is refused.
pub const MIN_MASK_MASS: f64 = 10.0;
const MIN_DARK_MASS: f64 = 5.0;

/// Half-height, in rows, of the horizontal scan band around the estimated
/// center used for radius estimation.
const SCAN_HALF_HEIGHT: f64 = 10.0;
/// Row-distance softness of the scan band edge.
const SCAN_SOFTNESS: f64 = 1.0;

/// Occupancy fields are resharpened through σ((v − OCC_MID)/OCC_SOFT) before
/// chord counting, so partially-on pixels do not dilute the chord length.
const OCC_MID: f64 = 0.4;
const OCC_SOFT: f64 = 0.06;

/// Row-coverage sharpening for the eyelid scan: a row counts as open when
/// its iris-texture occupancy clears this level.
const LID_ROW_MID: f64 = 0.80;
const LID_ROW_SOFT: f64 = 0.04;
/// Scale inside `tanh(β·Σ)` converting a row's open-pixel total into a soft
/// 0/1 row count.
const LID_ROW_BETA: f64 = 0.1;

/// Soft segmentation: ≈1 on iris texture, ≈0 on pupil, sclera, and lids.
///
/// `m = σ((x−0.25)/0.05) · σ((0.75−x)/0.05)`
pub fn soft_mask(x: &Tensor) -> Result<Tensor> {
    let lo = x.sub_scalar(MASK_BAND_LO)?.div_scalar(MASK_SOFTNESS)?.sigmoid()?;
    let hi = x.rsub_scalar(MASK_BAND_HI)?.div_scalar(MASK_SOFTNESS)?.sigmoid()?;
    lo.mul(&hi)
}

/// Differentiable circle estimates; every field is a `[1]` tensor on the
/// same tape as the input image.
#[derive(Debug)]
pub struct CircleEstimate {
    pub pupil_radius: Tensor,
    pub iris_radius: Tensor,
    pub center_x: Tensor,
    pub center_y: Tensor,
}

impl CircleEstimate {
    /// Detached `(pupil, iris, cx, cy)` values.
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        Ok((
            self.pupil_radius.value()?,
            self.iris_radius.value()?,
            self.center_x.value()?,
            self.center_y.value()?,
        ))
    }
}

/// Estimate pupil/iris circles from an image and its soft mask.
///
/// The pupil center is the centroid of a darkness field; radii come from
/// averaging horizontal chord lengths over a ±10-row band around the center
/// (the chord of a circle near its center line is its diameter, up to a
/// quadratic-in-offset correction that stays well inside the advertised
/// tolerances at full resolution).
///
/// Errors with degenerate segmentation when the mask or darkness field has
/// less than ~10 soft pixels of mass.
pub fn estimate_circles(x: &Tensor, m: &Tensor) -> Result<CircleEstimate> {
    let shape = x.shape();
    let [h, w] = match shape.as_slice() {
        [h, w] => [*h, *w],
        _ => {
            return Err(Error::domain(
                "estimate_circles",
                format!("image must be H×W, got {shape:?}"),
            ))
        }
    };
    if m.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "estimate_circles",
            left: shape,
            right: m.shape(),
        });
    }

    let mask_mass = m.sum_all()?.value()?;
    if !(mask_mass > MIN_MASK_MASS) {
        return Err(Error::DegenerateMask {
            msg: format!("mask mass {mask_mass:.2} below {MIN_MASK_MASS} pixels"),
        });
    }

    // Darkness field: large only on the pupil disk.
    let dark = x
        .rsub_scalar(1.0)?
        .mul(&x.rsub_scalar(MASK_BAND_LO)?.div_scalar(MASK_SOFTNESS)?.sigmoid()?)?;
    let dark_mass = dark.sum_all()?;
    let dark_mass_v = dark_mass.value()?;
    if !(dark_mass_v > MIN_DARK_MASS) {
        return Err(Error::DegenerateMask {
            msg: format!("darkness mass {dark_mass_v:.2} below {MIN_DARK_MASS} pixels"),
        });
    }

    let ctx = x.context();
    let (xs, ys) = index_grids(h, w);
    let xs = ctx.constant(&xs);
    let ys = ctx.constant(&ys);

    // Pupil center = darkness centroid.
    let center_x = dark.mul(&xs)?.sum_all()?.div(&dark_mass)?;
    let center_y = dark.mul(&ys)?.sum_all()?.div(&dark_mass)?;

    // Soft scan band: rows within ~±10 of the center, as an H×W weight
    // matrix built from a column profile (rank-1 outer product).
    let rows = ctx.constant(&Array::new(
        vec![h, 1],
        (0..h).map(|r| r as f64).collect(),
    )?);
    let band_col = rows
        .sub(&center_y)?
        .abs()?
        .rsub_scalar(SCAN_HALF_HEIGHT)?
        .div_scalar(SCAN_SOFTNESS)?
        .sigmoid()?;
    let ones_row = ctx.constant(&Array::new(vec![1, w], vec![1.0; w])?);
    let band = band_col.matmul(&ones_row)?;
    // Σ of the band weights per unit row = W · Σ band_col.
    let band_rows = band_col.sum_all()?;

    // Radius from mean chord: Σ(band·occupancy) / (2·Σ band rows).
    let chord_radius = |occupancy: &Tensor| -> Result<Tensor> {
        let sharp = occupancy
            .sub_scalar(OCC_MID)?
            .div_scalar(OCC_SOFT)?
            .sigmoid()?;
        band.mul(&sharp)?
            .sum_all()?
            .div(&band_rows)?
            .div_scalar(2.0)
    };

    let pupil_radius = chord_radius(&dark)?;
    // Iris disk = iris texture ∪ pupil: soft union m + d − m·d.
    let disk = m.add(&dark)?.sub(&m.mul(&dark)?)?;
    let iris_radius = chord_radius(&disk)?;

    Ok(CircleEstimate {
        pupil_radius,
        iris_radius,
        center_x,
        center_y,
    })
}

/// Eyelid opening in rows: a soft count of image rows whose iris-texture
/// occupancy is high. For the procedural renderer this tracks `2·aperture`.
///
/// Per row: `s_r = tanh(0.1 · Σ_cols σ((m − 0.80)/0.04))`, and the opening
/// is `Σ_rows s_r`. Binary masks pass through the inner sigmoid unchanged
/// (0 → 0, 1 → ≈1), so on hard segmentations this is exactly the
/// tanh-smoothed row count.
pub fn eyelid_opening(m: &Tensor) -> Result<Tensor> {
    let shape = m.shape();
    if shape.len() != 2 {
        return Err(Error::domain(
            "eyelid_opening",
            format!("mask must be H×W, got {shape:?}"),
        ));
    }
    let open = m
        .sub_scalar(LID_ROW_MID)?
        .div_scalar(LID_ROW_SOFT)?
        .sigmoid()?;
    let row_totals = open.sum_axes(&[1])?;
    row_totals.mul_scalar(LID_ROW_BETA)?.tanh()?.sum_all()
}

/// Polar sampling resolution.
#[derive(Clone, Copy, Debug)]
pub struct PolarConfig {
    pub radial_samples: usize,
    pub angular_samples: usize,
}

impl Default for PolarConfig {
    fn default() -> Self {
        PolarConfig {
            radial_samples: 64,
            angular_samples: 512,
        }
    }
}

/// Polar-normalized iris band plus sampling diagnostics.
pub struct PolarUnwrap {
    /// `radial_samples × angular_samples`, row 0 at the pupil boundary.
    pub image: Tensor,
    /// Fraction of sample points that fell outside the image and were
    /// clamped to the border. Zero for a well-framed eye.
    pub clamped_fraction: f64,
}

/// Unwrap the iris annulus between the estimated circles into a fixed-size
/// polar rectangle. Radial row `i` sits at `ρ = (i+0.5)/n` across the
/// annulus; angular column `j` at `θ = 2πj/m`. Out-of-bounds samples clamp
/// to the border (reported, never an error).
pub fn normalize(x: &Tensor, circles: &CircleEstimate, cfg: &PolarConfig) -> Result<PolarUnwrap> {
    let shape = x.shape();
    let [h, w] = match shape.as_slice() {
        [h, w] => [*h, *w],
        _ => {
            return Err(Error::domain(
                "normalize",
                format!("image must be H×W, got {shape:?}"),
            ))
        }
    };
    if cfg.radial_samples == 0 || cfg.angular_samples == 0 {
        return Err(Error::Config("polar sampling dimensions must be ≥ 1".to_string()));
    }
    let (nr, nt) = (cfg.radial_samples, cfg.angular_samples);
    let ctx = x.context();

    // Radii per row: r(i) = r_pupil + ρ_i · (r_iris − r_pupil).
    let rho = ctx.constant(&Array::new(
        vec![nr, 1],
        (0..nr).map(|i| (i as f64 + 0.5) / nr as f64).collect(),
    )?);
    let annulus = circles.iris_radius.sub(&circles.pupil_radius)?;
    let radii = rho.mul(&annulus)?.add(&circles.pupil_radius)?;

    let mut sines = Vec::with_capacity(nt);
    let mut cosines = Vec::with_capacity(nt);
    for j in 0..nt {
        let theta = 2.0 * std::f64::consts::PI * j as f64 / nt as f64;
        sines.push(theta.sin());
        cosines.push(theta.cos());
    }
    let sin_row = ctx.constant(&Array::new(vec![1, nt], sines)?);
    let cos_row = ctx.constant(&Array::new(vec![1, nt], cosines)?);

    let ys = radii.matmul(&sin_row)?.add(&circles.center_y)?;
    let xs = radii.matmul(&cos_row)?.add(&circles.center_x)?;

    let clamped = {
        let yv = ys.values();
        let xv = xs.values();
        let out = yv
            .iter()
            .zip(xv.iter())
            .filter(|(&y, &x)| y < 0.0 || y > (h - 1) as f64 || x < 0.0 || x > (w - 1) as f64)
            .count();
        out as f64 / yv.len() as f64
    };

    let coords = ys.stack_pair(&xs)?;
    let image = x.grid_sample(&coords)?;
    Ok(PolarUnwrap {
        image,
        clamped_fraction: clamped,
    })
}

fn index_grids(h: usize, w: usize) -> (Array, Array) {
    let mut xs = vec![0.0; h * w];
    let mut ys = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            xs[y * w + x] = x as f64;
            ys[y * w + x] = y as f64;
        }
    }
    (
        Array::new(vec![h, w], xs).expect("grid size"),
        Array::new(vec![h, w], ys).expect("grid size"),
    )
}
