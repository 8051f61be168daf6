//! Identity descriptors for the normalized iris: a differentiable Gabor
//! response stack used as a loss, and a binarized code + Hamming matcher
//! used only for evaluation.
//!
//! The two banks are deliberately parameterized apart (different
//! wavelengths, orientations, and phase): the loss must not be graded by
//! the same filters it optimizes, or the evaluation would just measure the
//! optimizer's ability to satisfy its own objective.

use crate::autodiff::{Array, Context, PadMode, Tensor};
use crate::error::{Error, Result};

/// Kernel side length; responses within `KERNEL_RADIUS` of the polar border
/// are padding-contaminated and excluded from code validity.
const KERNEL_SIZE: usize = 15;
pub const KERNEL_RADIUS: usize = KERNEL_SIZE / 2;

/// Hard cap on code dimensions accepted from files.
const MAX_CODE_DIM: u16 = 4096;
const MAX_CODE_BITS: u64 = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GaborPhase {
    /// Cosine carrier (even); mean-subtracted to kill the DC response.
    Even,
    /// Sine carrier (odd); zero-mean by antisymmetry.
    Odd,
}

/// A fixed stack of 2-D Gabor kernels applied to polar iris images.
pub struct GaborBank {
    /// `F×1×15×15`
    kernels: Array,
    /// Identifies the bank; codes from different banks never compare.
    tag: &'static str,
}

impl GaborBank {
    /// Bank behind the differentiable identity loss:
    /// wavelengths {4, 8, 16} px × orientations {0°, 90°}, even phase.
    pub fn loss_bank() -> Self {
        Self::build(
            "loss",
            &[4.0, 8.0, 16.0],
            &[0.0, std::f64::consts::FRAC_PI_2],
            GaborPhase::Even,
        )
    }

    /// Disjoint bank behind the evaluation matcher:
    /// wavelengths {5, 10, 20} px × orientations {45°, 135°}, odd phase.
    pub fn eval_bank() -> Self {
        Self::build(
            "eval",
            &[5.0, 10.0, 20.0],
            &[std::f64::consts::FRAC_PI_4, 3.0 * std::f64::consts::FRAC_PI_4],
            GaborPhase::Odd,
        )
    }

    fn build(tag: &'static str, wavelengths: &[f64], orientations: &[f64], phase: GaborPhase) -> Self {
        let f = wavelengths.len() * orientations.len();
        let mut data = Vec::with_capacity(f * KERNEL_SIZE * KERNEL_SIZE);
        for &lambda in wavelengths {
            for &theta in orientations {
                data.extend_from_slice(&gabor_kernel(lambda, theta, phase));
            }
        }
        GaborBank {
            kernels: Array::new(vec![f, 1, KERNEL_SIZE, KERNEL_SIZE], data).expect("kernel sizes"),
            tag,
        }
    }

    pub fn filter_count(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn tag(&self) -> &'static str {
        self.tag
    }

    /// Differentiable response stack `F×H×W` for a polar image `H×W`.
    /// Reflect padding keeps the output the same size as the input.
    pub fn responses(&self, polar: &Tensor) -> Result<Tensor> {
        let shape = polar.shape();
        let [h, w] = match shape.as_slice() {
            [h, w] => [*h, *w],
            _ => {
                return Err(Error::domain(
                    "gabor responses",
                    format!("polar image must be H×W, got {shape:?}"),
                ))
            }
        };
        let ctx = polar.context();
        let k = ctx.constant(&self.kernels);
        polar
            .reshape(&[1, h, w])?
            .conv2d(&k, 1, KERNEL_RADIUS, PadMode::Reflect)
    }

    /// Response stack without a gradient tape (for code extraction).
    pub fn responses_detached(&self, polar: &Array) -> Result<Array> {
        let ctx = Context::new();
        let p = ctx.constant(polar);
        Ok(self.responses(&p)?.detach())
    }
}

/// Real Gabor kernel, σ = λ/2, aspect γ = 0.5, carrier along θ.
fn gabor_kernel(lambda: f64, theta: f64, phase: GaborPhase) -> Vec<f64> {
    let sigma = 0.5 * lambda;
    let gamma = 0.5;
    let r = KERNEL_RADIUS as isize;
    let mut k = Vec::with_capacity(KERNEL_SIZE * KERNEL_SIZE);
    let (st, ct) = theta.sin_cos();
    for y in -r..=r {
        for x in -r..=r {
            let xr = x as f64 * ct + y as f64 * st;
            let yr = -(x as f64) * st + y as f64 * ct;
            let envelope = (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp();
            let carrier = 2.0 * std::f64::consts::PI * xr / lambda;
            let v = match phase {
                GaborPhase::Even => envelope * carrier.cos(),
                GaborPhase::Odd => envelope * carrier.sin(),
            };
            k.push(v);
        }
    }
    // Remove any residual DC so constant inputs produce zero response.
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    for v in &mut k {
        *v -= mean;
    }
    k
}

/// Differentiable identity descriptor: the loss bank's response stack on a
/// polar iris image.
pub fn phi_id(bank: &GaborBank, polar: &Tensor) -> Result<Tensor> {
    bank.responses(polar)
}

/// Mean-per-element L1 distance between a live descriptor and a cached
/// reference stack. Shapes must agree (same bank, same polar size).
pub fn loss_identity(phi: &Tensor, phi0: &Array) -> Result<Tensor> {
    if phi.shape() != phi0.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_identity",
            left: phi.shape(),
            right: phi0.shape().to_vec(),
        });
    }
    let ctx = phi.context();
    let reference = ctx.constant(phi0);
    phi.sub(&reference)?.abs()?.mean_all()
}

// ── Binary codes ─────────────────────────────────────────────────────────

/// Sign-thresholded Gabor responses with a validity mask; the evaluation
/// matcher's template.
#[derive(Clone, Debug, PartialEq)]
pub struct IrisCode {
    pub filters: usize,
    pub rows: usize,
    pub cols: usize,
    /// `filters·rows·cols` entries, 1 = positive response.
    bits: Vec<u8>,
    /// Same layout; 1 = bit unaffected by border padding.
    valid: Vec<u8>,
    tag: &'static str,
}

impl IrisCode {
    pub fn bit(&self, f: usize, r: usize, c: usize) -> u8 {
        self.bits[(f * self.rows + r) * self.cols + c]
    }

    pub fn is_valid(&self, f: usize, r: usize, c: usize) -> bool {
        self.valid[(f * self.rows + r) * self.cols + c] == 1
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v == 1).count()
    }
}

/// Threshold a response stack into a code. Validity excludes
/// [`KERNEL_RADIUS`] rows/columns at each polar border, where reflect
/// padding contaminates the responses.
pub fn iris_code(bank: &GaborBank, polar: &Array) -> Result<IrisCode> {
    let responses = bank.responses_detached(polar)?;
    let [f, h, w] = match responses.shape() {
        [f, h, w] => [*f, *h, *w],
        other => {
            return Err(Error::domain(
                "iris_code",
                format!("unexpected response shape {other:?}"),
            ))
        }
    };
    let data = responses.data();
    let mut bits = vec![0u8; f * h * w];
    let mut valid = vec![0u8; f * h * w];
    let b = KERNEL_RADIUS;
    for fi in 0..f {
        for r in 0..h {
            for c in 0..w {
                let i = (fi * h + r) * w + c;
                bits[i] = (data[i] > 0.0) as u8;
                let inside = r >= b && r + b < h && c >= b && c + b < w;
                valid[i] = inside as u8;
            }
        }
    }
    if valid.iter().all(|&v| v == 0) {
        return Err(Error::domain(
            "iris_code",
            format!("polar image {h}×{w} too small: border exclusion leaves no valid bits"),
        ));
    }
    Ok(IrisCode {
        filters: f,
        rows: h,
        cols: w,
        bits,
        valid,
        tag: bank.tag(),
    })
}

/// Fractional Hamming distance: minimum over circular angular shifts in
/// `[-max_shift, +max_shift]` columns of (disagreeing valid bits) / (jointly
/// valid bits).
pub fn hamming(a: &IrisCode, b: &IrisCode, max_shift: usize) -> Result<f64> {
    if a.tag != b.tag || a.filters != b.filters || a.rows != b.rows || a.cols != b.cols {
        return Err(Error::domain(
            "hamming",
            format!(
                "codes not comparable: {}/{}×{}×{} vs {}/{}×{}×{}",
                a.tag, a.filters, a.rows, a.cols, b.tag, b.filters, b.rows, b.cols
            ),
        ));
    }
    let cols = a.cols as isize;
    let mut best: Option<f64> = None;
    for shift in -(max_shift as isize)..=(max_shift as isize) {
        let mut disagree = 0usize;
        let mut total = 0usize;
        for f in 0..a.filters {
            for r in 0..a.rows {
                let base = (f * a.rows + r) * a.cols;
                for c in 0..a.cols {
                    // Column c of `a` against column c+shift (circular) of `b`.
                    let cb = (c as isize + shift).rem_euclid(cols) as usize;
                    if a.valid[base + c] == 1 && b.valid[base + cb] == 1 {
                        total += 1;
                        disagree += (a.bits[base + c] != b.bits[base + cb]) as usize;
                    }
                }
            }
        }
        if total == 0 {
            continue;
        }
        let hd = disagree as f64 / total as f64;
        best = Some(best.map_or(hd, |b: f64| b.min(hd)));
    }
    best.ok_or_else(|| {
        Error::domain(
            "hamming",
            "no jointly valid bits at any shift (disjoint validity)".to_string(),
        )
    })
}

// ── Code files ───────────────────────────────────────────────────────────
//
// Layout: 8-byte header (rows u16 LE, cols u16, filters u16, reserved u16
// = 0), then ceil(n/8) packed code bytes, then ceil(n/8) packed validity
// bytes, n = filters·rows·cols, bits LSB-first. The reader is strict and
// panic-free on arbitrary bytes — it is fuzzed.

pub fn write_code<W: std::io::Write>(mut out: W, code: &IrisCode) -> Result<()> {
    let dims = [code.rows, code.cols, code.filters];
    if dims.iter().any(|&d| d == 0 || d > MAX_CODE_DIM as usize) {
        return Err(Error::format("iris-code", format!("dimensions {dims:?} out of range")));
    }
    out.write_all(&(code.rows as u16).to_le_bytes())?;
    out.write_all(&(code.cols as u16).to_le_bytes())?;
    out.write_all(&(code.filters as u16).to_le_bytes())?;
    out.write_all(&0u16.to_le_bytes())?;
    out.write_all(&pack_bits(&code.bits))?;
    out.write_all(&pack_bits(&code.valid))?;
    Ok(())
}

/// Parse a complete in-memory code file written by [`write_code`].
///
/// The bank tag is not stored; the caller asserts which bank the code came
/// from (codes only flow between runs of this same program).
pub fn parse_code(bytes: &[u8], tag: &'static str) -> Result<IrisCode> {
    if bytes.len() < 8 {
        return Err(Error::format("iris-code", "file shorter than header".to_string()));
    }
    let rows = u16::from_le_bytes([bytes[0], bytes[1]]);
    let cols = u16::from_le_bytes([bytes[2], bytes[3]]);
    let filters = u16::from_le_bytes([bytes[4], bytes[5]]);
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(Error::format("iris-code", "reserved header word must be zero".to_string()));
    }
    if rows == 0 || cols == 0 || filters == 0 {
        return Err(Error::format("iris-code", "zero dimension in header".to_string()));
    }
    if rows > MAX_CODE_DIM || cols > MAX_CODE_DIM || filters > MAX_CODE_DIM {
        return Err(Error::format("iris-code", "dimension exceeds limit".to_string()));
    }
    let n = rows as u64 * cols as u64 * filters as u64;
    if n > MAX_CODE_BITS {
        return Err(Error::format("iris-code", "bit count exceeds limit".to_string()));
    }
    let packed = n.div_ceil(8) as usize;
    let want = 8 + 2 * packed;
    if bytes.len() != want {
        return Err(Error::format(
            "iris-code",
            format!("file length {} does not match header ({want} expected)", bytes.len()),
        ));
    }
    let bits = unpack_bits(&bytes[8..8 + packed], n as usize);
    let valid = unpack_bits(&bytes[8 + packed..], n as usize);
    // Padding bits past n must be zero so files have one canonical form.
    for section in [&bytes[8..8 + packed], &bytes[8 + packed..]] {
        if n as usize % 8 != 0 {
            let last = section[packed - 1];
            if last >> (n % 8) != 0 {
                return Err(Error::format("iris-code", "nonzero padding bits".to_string()));
            }
        }
    }
    Ok(IrisCode {
        filters: filters as usize,
        rows: rows as usize,
        cols: cols as usize,
        bits,
        valid,
        tag,
    })
}

pub fn read_code_from_path(path: &std::path::Path, tag: &'static str) -> Result<IrisCode> {
    let bytes = std::fs::read(path)?;
    parse_code(&bytes, tag)
}

pub fn write_code_to_path(path: &std::path::Path, code: &IrisCode) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_code(std::io::BufWriter::new(file), code)
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b & 1) << (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Context;

    fn hash_unit(seed: u64, r: usize, c: usize) -> f64 {
        // splitmix64 of (seed, r, c) → uniform in [0, 1).
        let mut z = seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add((r as u64) << 32 | c as u64);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        (z ^ (z >> 31)) as f64 / u64::MAX as f64
    }

    /// Broadband pseudo-texture: hash noise pushed into the filter band by
    /// two 3×3 box-blur passes (clamped at the borders).
    fn textured_polar(rows: usize, cols: usize, seed: u64) -> Array {
        let mut data: Vec<f64> = (0..rows * cols)
            .map(|i| hash_unit(seed, i / cols, i % cols))
            .collect();
        for _ in 0..2 {
            let src = data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = (r as i64 + dr).clamp(0, rows as i64 - 1) as usize;
                            let cc = (c as i64 + dc).clamp(0, cols as i64 - 1) as usize;
                            acc += src[rr * cols + cc];
                        }
                    }
                    data[r * cols + c] = acc / 9.0;
                }
            }
        }
        Array::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn constant_input_gives_zero_responses() {
        for bank in [GaborBank::loss_bank(), GaborBank::eval_bank()] {
            let polar = Array::new(vec![32, 64], vec![0.37; 32 * 64]).unwrap();
            let resp = bank.responses_detached(&polar).unwrap();
            let max = resp.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-10, "{} bank responds {max} to a constant", bank.tag());
        }
    }

    #[test]
    fn banks_are_disjointly_parameterized() {
        let a = GaborBank::loss_bank();
        let b = GaborBank::eval_bank();
        assert_eq!(a.filter_count(), 6);
        assert_eq!(b.filter_count(), 6);
        assert_ne!(a.kernels.data(), b.kernels.data());
    }

    #[test]
    fn descriptor_is_deterministic_and_zero_on_self() {
        let bank = GaborBank::loss_bank();
        let polar = textured_polar(32, 64, 3);
        let r1 = bank.responses_detached(&polar).unwrap();
        let r2 = bank.responses_detached(&polar).unwrap();
        assert_eq!(r1.data(), r2.data());
        let ctx = Context::new();
        let live = phi_id(&bank, &ctx.constant(&polar)).unwrap();
        let loss = loss_identity(&live, &r1).unwrap().value().unwrap();
        assert_eq!(loss, 0.0, "identity loss of an image against itself");
    }

    #[test]
    fn different_textures_have_positive_distance() {
        let bank = GaborBank::loss_bank();
        let p1 = textured_polar(32, 64, 1);
        let p2 = textured_polar(32, 64, 2);
        let phi0 = bank.responses_detached(&p1).unwrap();
        let ctx = Context::new();
        let live = phi_id(&bank, &ctx.constant(&p2)).unwrap();
        let cross = loss_identity(&live, &phi0).unwrap().value().unwrap();
        assert!(cross > 1e-3, "distinct textures must separate, got {cross}");
    }

    #[test]
    fn descriptor_gradient_matches_finite_differences() {
        let bank = GaborBank::loss_bank();
        let polar0 = textured_polar(12, 20, 5);
        let phi0 = bank.responses_detached(&textured_polar(12, 20, 6)).unwrap();
        let rep = crate::autodiff::grad_check_default_eps(
            |_, p| loss_identity(&phi_id(&bank, p)?, &phi0),
            &polar0,
        )
        .unwrap();
        assert!(
            rep.max_rel_error < 1e-4,
            "identity loss gradient mismatch: {}",
            rep.max_rel_error
        );
    }

    #[test]
    fn code_is_deterministic_and_self_distance_zero() {
        let bank = GaborBank::eval_bank();
        let polar = textured_polar(32, 64, 7);
        let a = iris_code(&bank, &polar).unwrap();
        let b = iris_code(&bank, &polar).unwrap();
        assert_eq!(a, b);
        assert_eq!(hamming(&a, &b, 16).unwrap(), 0.0);
    }

    #[test]
    fn contrast_flip_inverts_every_valid_bit() {
        let bank = GaborBank::eval_bank();
        let polar = textured_polar(32, 64, 9);
        let flipped = Array::new(
            vec![32, 64],
            polar.data().iter().map(|v| 1.0 - v).collect(),
        )
        .unwrap();
        let a = iris_code(&bank, &polar).unwrap();
        let b = iris_code(&bank, &flipped).unwrap();
        let mut checked = 0;
        for f in 0..a.filters {
            for r in 0..a.rows {
                for c in 0..a.cols {
                    if a.is_valid(f, r, c) {
                        assert_ne!(a.bit(f, r, c), b.bit(f, r, c), "bit ({f},{r},{c})");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000, "need a meaningful number of valid bits");
        // And the shift-0 distance is 1; the reported minimum can only be ≤.
        assert!(hamming(&a, &b, 16).unwrap() <= 1.0);
    }

    #[test]
    fn column_rotation_is_recovered_by_shift_search() {
        let bank = GaborBank::eval_bank();
        let rows = 32;
        let cols = 128;
        let polar = textured_polar(rows, cols, 11);
        // Rotate the texture by 4 columns (circularly).
        let mut rot = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                rot[r * cols + c] = polar.data()[r * cols + (c + 4) % cols];
            }
        }
        let rot = Array::new(vec![rows, cols], rot).unwrap();
        let a = iris_code(&bank, &polar).unwrap();
        let b = iris_code(&bank, &rot).unwrap();
        let hd = hamming(&a, &b, 16).unwrap();
        assert!(hd < 0.05, "shift search must realign a 4-column rotation, got {hd}");
        // Without enough search range the distance stays high.
        let hd0 = hamming(&a, &b, 0).unwrap();
        assert!(hd0 > hd, "shift search must actually help ({hd0} vs {hd})");
    }

    #[test]
    fn independent_textures_sit_near_half_distance() {
        let bank = GaborBank::eval_bank();
        let mut hds = Vec::new();
        for pair in 0..10 {
            let a = iris_code(&bank, &textured_polar(32, 128, 100 + 2 * pair)).unwrap();
            let b = iris_code(&bank, &textured_polar(32, 128, 101 + 2 * pair)).unwrap();
            hds.push(hamming(&a, &b, 16).unwrap());
        }
        let mean = hds.iter().sum::<f64>() / hds.len() as f64;
        assert!(
            (0.30..=0.60).contains(&mean),
            "independent codes should sit near 0.5, got {mean} ({hds:?})"
        );
    }

    #[test]
    fn mismatched_codes_are_refused() {
        let bank = GaborBank::eval_bank();
        let loss = GaborBank::loss_bank();
        let a = iris_code(&bank, &textured_polar(32, 64, 1)).unwrap();
        let b = iris_code(&loss, &textured_polar(32, 64, 1)).unwrap();
        assert!(hamming(&a, &b, 16).is_err(), "different banks must not compare");
        let c = iris_code(&bank, &textured_polar(32, 96, 1)).unwrap();
        assert!(hamming(&a, &c, 16).is_err(), "different sizes must not compare");
    }

    #[test]
    fn too_small_polar_is_refused() {
        let bank = GaborBank::eval_bank();
        let tiny = textured_polar(14, 14, 1);
        assert!(iris_code(&bank, &tiny).is_err(), "no valid bits inside the border");
    }

    #[test]
    fn code_file_roundtrip() {
        let bank = GaborBank::eval_bank();
        let code = iris_code(&bank, &textured_polar(32, 64, 13)).unwrap();
        let mut buf = Vec::new();
        write_code(&mut buf, &code).unwrap();
        let back = parse_code(&buf, bank.tag()).unwrap();
        assert_eq!(code, back);
    }

    #[test]
    fn code_parser_rejects_malformed_input() {
        let bank = GaborBank::eval_bank();
        let code = iris_code(&bank, &textured_polar(32, 64, 13)).unwrap();
        let mut buf = Vec::new();
        write_code(&mut buf, &code).unwrap();
        for cut in 0..8 {
            assert!(parse_code(&buf[..cut], "eval").is_err());
        }
        assert!(parse_code(&buf[..buf.len() - 1], "eval").is_err(), "truncated body");
        let mut long = buf.clone();
        long.push(0);
        assert!(parse_code(&long, "eval").is_err(), "trailing byte");
        let mut reserved = buf.clone();
        reserved[6] = 1;
        assert!(parse_code(&reserved, "eval").is_err(), "reserved word");
        // Header claiming enormous dimensions must fail before allocating.
        let mut huge = vec![0u8; 8];
        huge[0] = 0xff;
        huge[1] = 0xff;
        huge[2] = 0xff;
        huge[3] = 0xff;
        huge[4] = 0xff;
        huge[5] = 0xff;
        assert!(parse_code(&huge, "eval").is_err());
    }
}
