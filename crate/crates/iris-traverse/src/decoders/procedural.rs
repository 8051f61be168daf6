//! Procedural eye renderer with closed-form geometry.
//!
//! Every image this decoder produces has pupil/iris circles, eyelid
//! aperture, and palette levels that are analytic functions of the style
//! vector `w` — see [`ProceduralDecoder::circle_params`]. Downstream
//! estimators are validated against those values, so the formulas here are
//! the ground truth for the whole test pyramid. Change them and the frozen
//! expectations elsewhere stop being true.

use super::{MappingNet, W_DIM};
use crate::autodiff::{Array, Context, PadMode, Tensor};
use crate::error::{Error, Result};

/// Rendering geometry and softness knobs.
#[derive(Clone, Debug)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Softness (in pixels) of the pupil/iris circle edges.
    pub edge_softness: f64,
    /// Softness (in pixels) of the eyelid boundary. Kept tighter than the
    /// circle edges so row-counting estimators see a crisp transition.
    pub lid_softness: f64,
    /// Rotates the angular texture basis (radians). Rendering with an offset
    /// and comparing polar unwraps against a column-shifted original is how
    /// rotation equivariance is tested.
    pub texture_angle_offset: f64,
}

impl RenderConfig {
    pub fn new(width: usize, height: usize) -> Self {
        RenderConfig {
            width,
            height,
            edge_softness: 2.0,
            lid_softness: 1.0,
            texture_angle_offset: 0.0,
        }
    }
}

/// Closed-form scene parameters implied by a style vector.
#[derive(Clone, Copy, Debug)]
pub struct CircleParams {
    pub pupil_radius: f64,
    pub iris_radius: f64,
    /// Half-height of the eyelid opening; the visible band is
    /// `|y − center_y| < aperture`, so the opening spans `2·aperture` rows.
    pub aperture: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Blur mix α ∈ (0,1): 0 = sharp texture, 1 = fully blurred.
    pub blur_mix: f64,
    pub texture_gain: f64,
    pub sclera_level: f64,
}

/// Gray level inside the pupil disk.
const PUPIL_LEVEL: f64 = 0.1;
/// Gray level of the closed-lid region.
const LID_LEVEL: f64 = 0.88;
/// Keeps the distance field differentiable at the exact center pixel.
const DIST_EPS: f64 = 1e-6;

/// Number of sinusoid components per texture bank.
const BANK_SIZE: usize = 6;

pub struct ProceduralDecoder {
    mapping: MappingNet,
    config: RenderConfig,
    /// Column-index grid, `H×W`.
    xs: Array,
    /// Row-index grid, `H×W`.
    ys: Array,
    /// Normalized 5×5 Gaussian (σ = 1.5) as a `1×1×5×5` kernel.
    blur_kernel: Array,
}

impl ProceduralDecoder {
    pub fn new(latent_dim: usize, seed: u64, config: RenderConfig) -> Result<Self> {
        if config.width < 8 || config.height < 8 {
            return Err(Error::Config(format!(
                "render target {}×{} too small",
                config.width, config.height
            )));
        }
        if config.width > super::MAX_RENDER_SIDE || config.height > super::MAX_RENDER_SIDE {
            return Err(Error::Config(format!(
                "render target {}×{} exceeds the {} px side limit",
                config.width,
                config.height,
                super::MAX_RENDER_SIDE
            )));
        }
        if !(config.edge_softness > 0.0) || !(config.lid_softness > 0.0) {
            return Err(Error::Config("edge softness values must be positive".to_string()));
        }
        let (h, w) = (config.height, config.width);
        let mut xs = vec![0.0; h * w];
        let mut ys = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                xs[y * w + x] = x as f64;
                ys[y * w + x] = y as f64;
            }
        }
        Ok(ProceduralDecoder {
            mapping: MappingNet::new(latent_dim, seed)?,
            config,
            xs: Array::new(vec![h, w], xs).expect("grid size"),
            ys: Array::new(vec![h, w], ys).expect("grid size"),
            blur_kernel: gaussian_kernel_5x5(1.5),
        })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.config
    }

    /// The analytic scene parameters for a style vector, computed with plain
    /// arithmetic (no tape). This is the oracle that geometry estimators are
    /// judged against.
    pub fn circle_params(&self, w: &[f64]) -> Result<CircleParams> {
        if w.len() != W_DIM {
            return Err(Error::LatentMismatch(format!(
                "style vector must have {} entries, got {}",
                W_DIM,
                w.len()
            )));
        }
        let r = 0.5 * self.config.width.min(self.config.height) as f64;
        let pupil_radius = r * (0.08 + 0.42 * sigmoid(w[0]));
        let iris_radius = pupil_radius + r * (0.10 + 0.18 * softplus(w[1]));
        let aperture = pupil_radius + (0.3 + 0.6 * sigmoid(w[2])) * (iris_radius - pupil_radius);
        let center_x = 0.5 * self.config.width as f64 * (1.0 + 0.08 * w[3].tanh());
        let center_y = 0.5 * self.config.height as f64 * (1.0 + 0.08 * w[4].tanh());
        Ok(CircleParams {
            pupil_radius,
            iris_radius,
            aperture,
            center_x,
            center_y,
            blur_mix: sigmoid(w[5]),
            texture_gain: 0.08 + 0.14 * sigmoid(w[6]),
            sclera_level: 0.90 + 0.04 * w[7].tanh(),
        })
    }

    /// Fraction of the style vector driving each scene knob, for reference:
    /// `w[0]` pupil radius, `w[1]` iris annulus width, `w[2]` lid aperture,
    /// `w[3]`/`w[4]` center, `w[5]` blur mix, `w[6]` texture gain,
    /// `w[7]` sclera level, `w[8..32]` texture sinusoid banks.
    pub fn style_width(&self) -> usize {
        W_DIM
    }

    /// Differentiable renderer; `w` has shape `[W_DIM]`, output `H×W` with
    /// every pixel strictly inside `(0, 1)`.
    pub fn render(&self, ctx: &Context, w: &Tensor) -> Result<Tensor> {
        if w.shape() != vec![W_DIM] {
            return Err(Error::LatentMismatch(format!(
                "style vector must have shape [{}], got {:?}",
                W_DIM,
                w.shape()
            )));
        }
        let cfg = &self.config;
        let r = 0.5 * cfg.width.min(cfg.height) as f64;
        let xs = ctx.constant(&self.xs);
        let ys = ctx.constant(&self.ys);

        // Scalar scene parameters, each a [1] tensor on the tape.
        let w0 = w.select(0)?;
        let w1 = w.select(1)?;
        let w2 = w.select(2)?;
        let w3 = w.select(3)?;
        let w4 = w.select(4)?;
        let w5 = w.select(5)?;
        let w6 = w.select(6)?;
        let w7 = w.select(7)?;

        let r_pupil = w0.sigmoid()?.mul_scalar(0.42)?.add_scalar(0.08)?.mul_scalar(r)?;
        let annulus = softplus_t(&w1)?
            .mul_scalar(0.18)?
            .add_scalar(0.10)?
            .mul_scalar(r)?;
        let r_iris = r_pupil.add(&annulus)?;
        let aperture = w2
            .sigmoid()?
            .mul_scalar(0.6)?
            .add_scalar(0.3)?
            .mul(&annulus)?
            .add(&r_pupil)?;
        let cx = w3
            .tanh()?
            .mul_scalar(0.08)?
            .add_scalar(1.0)?
            .mul_scalar(0.5 * cfg.width as f64)?;
        let cy = w4
            .tanh()?
            .mul_scalar(0.08)?
            .add_scalar(1.0)?
            .mul_scalar(0.5 * cfg.height as f64)?;
        let blur_mix = w5.sigmoid()?;
        let gain = w6.sigmoid()?.mul_scalar(0.14)?.add_scalar(0.08)?;
        let sclera = w7.tanh()?.mul_scalar(0.04)?.add_scalar(0.90)?;

        // Distance field from the (cx, cy) center; ε keeps sqrt smooth at
        // the center pixel.
        let dx = xs.sub(&cx)?;
        let dy = ys.sub(&cy)?;
        let dist = dx
            .square()?
            .add(&dy.square()?)?
            .add_scalar(DIST_EPS)?
            .sqrt()?;

        // Angular basis cos θ, sin θ — from coordinates, not atan2, so the
        // whole thing stays in the op set.
        let mut ct = dx.div(&dist)?;
        let mut st = dy.div(&dist)?;
        if cfg.texture_angle_offset != 0.0 {
            let (sd, cd) = cfg.texture_angle_offset.sin_cos();
            let ct2 = ct.mul_scalar(cd)?.add(&st.mul_scalar(sd)?)?;
            let st2 = st.mul_scalar(cd)?.sub(&ct.mul_scalar(sd)?)?;
            ct = ct2;
            st = st2;
        }
        // Harmonics up to 3θ via double/triple-angle identities.
        let c2 = ct.square()?.sub(&st.square()?)?;
        let s2 = ct.mul(&st)?.mul_scalar(2.0)?;
        let c3 = ct.mul(&c2)?.sub(&st.mul(&s2)?)?;
        let harmonics: [Option<&Tensor>; BANK_SIZE] =
            [None, Some(&ct), Some(&st), Some(&c2), Some(&s2), Some(&c3)];

        // Radial coordinate normalized to [0,1] across the iris annulus.
        let rho = dist.sub(&r_pupil)?.div(&annulus)?;

        // Texture: two banks of radial sinusoids, each component modulated
        // by one angular harmonic.
        let mut field: Option<Tensor> = None;
        for (bank, (f0, fstep, amp_scale)) in
            [(3.0, 1.0, 0.08), (8.0, 1.5, 0.06)].into_iter().enumerate()
        {
            for k in 0..BANK_SIZE {
                let base = 8 + bank * 2 * BANK_SIZE + 2 * k;
                let amp = w.select(base)?.tanh()?.mul_scalar(amp_scale)?;
                let phase = w.select(base + 1)?;
                let freq = f0 + fstep * k as f64;
                let mut term = rho
                    .mul_scalar(2.0 * std::f64::consts::PI * freq)?
                    .add(&phase)?
                    .sin()?
                    .mul(&amp)?;
                if let Some(h) = harmonics[k] {
                    term = term.mul(h)?;
                }
                field = Some(match field {
                    Some(acc) => acc.add(&term)?,
                    None => term,
                });
            }
        }
        let tex_sharp = field
            .expect("banks are non-empty")
            .mul(&gain)?
            .add_scalar(0.5)?;

        // Optional blur, mixed in by w[5]: the sharpness attribute reads
        // this back out of the final image.
        let kernel = ctx.constant(&self.blur_kernel);
        let tex_blur = tex_sharp
            .reshape(&[1, cfg.height, cfg.width])?
            .conv2d(&kernel, 1, 2, PadMode::Reflect)?
            .reshape(&[cfg.height, cfg.width])?;
        let tex = tex_sharp
            .mul(&blur_mix.rsub_scalar(1.0)?)?
            .add(&tex_blur.mul(&blur_mix)?)?;

        // Region memberships through soft circle edges.
        let tau = cfg.edge_softness;
        let s_pupil = r_pupil.sub(&dist)?.div_scalar(tau)?.sigmoid()?;
        let s_iris = r_iris.sub(&dist)?.div_scalar(tau)?.sigmoid()?;

        let interior = s_pupil
            .mul_scalar(PUPIL_LEVEL)?
            .add(&tex.mul(&s_iris.sub(&s_pupil)?)?)?
            .add(&s_iris.rsub_scalar(1.0)?.mul(&sclera)?)?;

        // Eyelids: everything farther than `aperture` rows from the center
        // line fades to the lid level.
        let lid = ys
            .sub(&cy)?
            .abs()?
            .sub(&aperture)?
            .div_scalar(cfg.lid_softness)?
            .sigmoid()?;
        lid.rsub_scalar(1.0)?
            .mul(&interior)?
            .add(&lid.mul_scalar(LID_LEVEL)?)
    }
}

impl super::Decoder for ProceduralDecoder {
    fn latent_dim(&self) -> usize {
        self.mapping.latent_dim()
    }

    fn image_size(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn mapping(&self) -> &MappingNet {
        &self.mapping
    }

    fn synthesize(&self, ctx: &Context, w: &Tensor) -> Result<Tensor> {
        self.render(ctx, w)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + eˣ).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tape version of softplus. The raw ln(1+eˣ) form is fine here because
/// style entries reaching it are bounded by the mapping network and by
/// step-clipped traversal, far below exp's overflow domain.
fn softplus_t(x: &Tensor) -> Result<Tensor> {
    x.exp()?.add_scalar(1.0)?.log()
}

fn gaussian_kernel_5x5(sigma: f64) -> Array {
    let mut k = [0.0; 25];
    let mut sum = 0.0;
    for y in 0..5 {
        for x in 0..5 {
            let (dy, dx) = (y as f64 - 2.0, x as f64 - 2.0);
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * 5 + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    Array::new(vec![1, 1, 5, 5], k.to_vec()).expect("kernel size")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::Decoder;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_z(dim: usize, seed: u64) -> Array {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Array::new(vec![dim], data).unwrap()
    }

    fn decoder(w: usize, h: usize, seed: u64) -> ProceduralDecoder {
        ProceduralDecoder::new(8, seed, RenderConfig::new(w, h)).unwrap()
    }

    /// Count pixels darker than the pupil/iris midpoint level.
    fn dark_pixel_count(img: &[f64]) -> usize {
        img.iter().filter(|&&v| v < 0.3).count()
    }

    #[test]
    fn generate_equals_mapping_then_synthesize() {
        let dec = decoder(64, 48, 11);
        let z = sample_z(8, 1);
        let ctx = Context::new();
        let zt = ctx.constant(&z);
        let full = dec.generate(&ctx, &zt).unwrap().values();
        let w = dec.mapping().forward_detached(&z).unwrap();
        let ctx2 = Context::new();
        let wt = ctx2.constant(&w);
        let staged = dec.synthesize(&ctx2, &wt).unwrap().values();
        assert_eq!(full, staged, "two-stage pipeline must compose exactly");
    }

    #[test]
    fn output_range_is_strictly_inside_unit_interval() {
        let dec = decoder(96, 72, 3);
        for seed in 0..4 {
            let z = sample_z(8, seed);
            let ctx = Context::new();
            let img = dec.generate(&ctx, &ctx.constant(&z)).unwrap();
            let v = img.values();
            assert!(v.iter().all(|&p| p > 0.0 && p < 1.0), "seed {seed} left (0,1)");
            assert_eq!(img.shape(), vec![72, 96]);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let dec = decoder(64, 48, 5);
        let z = sample_z(8, 9);
        let render = || {
            let ctx = Context::new();
            dec.generate(&ctx, &ctx.constant(&z)).unwrap().values()
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn dark_disk_area_matches_pupil_circle() {
        // Pixel-count oracle: the sub-0.3 region is the pupil disk, whose
        // analytic area is π·r².
        let dec = decoder(320, 240, 17);
        for seed in [2, 14] {
            let z = sample_z(8, seed);
            let w = dec.mapping().forward_detached(&z).unwrap();
            let p = dec.circle_params(w.data()).unwrap();
            let ctx = Context::new();
            let img = dec.synthesize(&ctx, &ctx.constant(&w)).unwrap();
            let count = dark_pixel_count(&img.values()) as f64;
            let expect = std::f64::consts::PI * p.pupil_radius * p.pupil_radius;
            let rel = (count - expect).abs() / expect;
            assert!(
                rel < 0.05,
                "seed {seed}: dark area {count} vs analytic {expect:.1} (rel {rel:.3})"
            );
        }
    }

    #[test]
    fn pupil_knob_grows_the_dark_disk() {
        let dec = decoder(160, 120, 23);
        let z = sample_z(8, 4);
        let mut w = dec.mapping().forward_detached(&z).unwrap();
        let render_count = |w: &Array| {
            let ctx = Context::new();
            dark_pixel_count(&dec.synthesize(&ctx, &ctx.constant(w)).unwrap().values())
        };
        let before = render_count(&w);
        w.data_mut()[0] += 1.5;
        let after = render_count(&w);
        assert!(
            after > before,
            "raising the pupil knob must enlarge the dark disk ({before} → {after})"
        );
    }

    #[test]
    fn lid_rows_sit_at_lid_level() {
        let dec = decoder(160, 120, 29);
        let z = sample_z(8, 6);
        let w = dec.mapping().forward_detached(&z).unwrap();
        let p = dec.circle_params(w.data()).unwrap();
        let ctx = Context::new();
        let img = dec.synthesize(&ctx, &ctx.constant(&w)).unwrap().values();
        let (h, wd) = (120usize, 160usize);
        let mut checked = 0;
        for y in 0..h {
            if (y as f64 - p.center_y).abs() > p.aperture + 5.0 {
                for x in 0..wd {
                    assert!(
                        (img[y * wd + x] - LID_LEVEL).abs() < 0.01,
                        "row {y} col {x}: {} should be lid level",
                        img[y * wd + x]
                    );
                }
                checked += 1;
            }
        }
        assert!(checked > 10, "test must actually cover closed-lid rows");
    }

    #[test]
    fn aperture_sits_strictly_between_pupil_and_iris() {
        let dec = decoder(160, 120, 31);
        for seed in 0..12 {
            let z = sample_z(8, seed);
            let w = dec.mapping().forward_detached(&z).unwrap();
            let p = dec.circle_params(w.data()).unwrap();
            assert!(
                p.pupil_radius < p.aperture && p.aperture < p.iris_radius,
                "seed {seed}: pupil {}, aperture {}, iris {}",
                p.pupil_radius,
                p.aperture,
                p.iris_radius
            );
        }
    }

    #[test]
    fn style_vector_gradient_matches_finite_differences() {
        let dec = decoder(32, 24, 37);
        let z = sample_z(8, 8);
        let w0 = dec.mapping().forward_detached(&z).unwrap();
        let rep = crate::autodiff::grad_check_default_eps(
            |ctx, w| dec.render(ctx, w)?.mean_all(),
            &w0,
        )
        .unwrap();
        assert!(
            rep.max_rel_error < 1e-6,
            "render gradient mismatch: {} at w[{}]",
            rep.max_rel_error,
            rep.worst_index
        );
    }

    #[test]
    fn angle_offset_rotates_texture_only() {
        let mut cfg = RenderConfig::new(64, 64);
        cfg.texture_angle_offset = 0.7;
        let rotated = ProceduralDecoder::new(8, 41, cfg).unwrap();
        let plain = decoder(64, 64, 41);
        let z = sample_z(8, 12);
        let w = plain.mapping().forward_detached(&z).unwrap();
        let pr = rotated.circle_params(w.data()).unwrap();
        let pp = plain.circle_params(w.data()).unwrap();
        // Same geometry either way; only the texture basis moves.
        assert_eq!(pr.pupil_radius, pp.pupil_radius);
        assert_eq!(pr.iris_radius, pp.iris_radius);
        let ctx = Context::new();
        let a = rotated.synthesize(&ctx, &ctx.constant(&w)).unwrap().values();
        let ctx2 = Context::new();
        let b = plain.synthesize(&ctx2, &ctx2.constant(&w)).unwrap().values();
        assert_ne!(a, b, "texture must actually move with the offset");
    }

    #[test]
    fn rejects_wrong_style_width() {
        let dec = decoder(32, 24, 1);
        let ctx = Context::new();
        let bad = ctx.constant(&Array::new(vec![7], vec![0.0; 7]).unwrap());
        assert!(matches!(
            dec.render(&ctx, &bad).unwrap_err(),
            Error::LatentMismatch(_)
        ));
    }
}
