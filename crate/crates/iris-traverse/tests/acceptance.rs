//! Release acceptance gate.
//!
//! Ten checks, one test each, covering the full promise of the crate:
//! gradient correctness, metric properties, oracle agreement, convergence,
//! the identity-preservation effect, loss interactions, inversion,
//! space comparison, determinism, and optimizer behavior. Each test prints
//! an `ACCEPT <n>: PASS` line with the measured numbers; a failure message
//! carries the same numbers so the gap is visible without rerunning.
//!
//! The heavier checks share one desk-scale matrix run through a `OnceLock`,
//! so the suite executes the 80-cell grid twice in total (the second run is
//! itself the determinism check).

use std::sync::OnceLock;
use std::time::Instant;

use iris_traverse::attributes::{
    composite_loss, sharpness_score, AttributeKind, AttributeSpec, Baseline, CompositeConfig,
    SharpnessConfig,
};
use iris_traverse::autodiff::{grad_check, Array, Context, PadMode, Tensor, UnKind};
use iris_traverse::config::{parse_plan, DESK_PLAN, DESK_SPACE_PLAN};
use iris_traverse::decoders::{Decoder, LatentSpace, ProceduralDecoder, RenderConfig};
use iris_traverse::geometry::{estimate_circles, eyelid_opening, soft_mask};
use iris_traverse::harness::{run_matrix, run_space_compare, start_latent, MatrixOutput};
use iris_traverse::traversal::{
    clip_grad_norm, invert, traverse, InvertConfig, OptimizerState, TraversalConfig,
    TraversalStatus,
};
use iris_traverse::Result;

// ── Shared fixtures ──────────────────────────────────────────────────────

fn procedural(latent_dim: usize, width: usize, height: usize) -> ProceduralDecoder {
    ProceduralDecoder::new(latent_dim, 7, RenderConfig::new(width, height))
        .expect("decoder construction")
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Render a latent (either space) without keeping the tape.
fn render(decoder: &dyn Decoder, v: &Array, space: LatentSpace) -> Array {
    let ctx = Context::new();
    decoder
        .decode_from(&ctx, &ctx.constant(v), space)
        .expect("render")
        .detach()
}

/// Detached (pupil, iris, ratio, eyelid opening) readouts of an image.
fn measure_geometry(image: &Array) -> (f64, f64, f64, f64) {
    let ctx = Context::new();
    let x = ctx.constant(image);
    let m = soft_mask(&x).expect("mask");
    let est = estimate_circles(&x, &m).expect("circles");
    let (pupil, iris, _, _) = est.values().expect("values");
    let lam = eyelid_opening(&m).expect("eyelid").value().expect("value");
    (pupil, iris, 100.0 * pupil / iris, lam)
}

fn measure_sharpness(image: &Array) -> f64 {
    let ctx = Context::new();
    let x = ctx.constant(image);
    let m = soft_mask(&x).expect("mask");
    sharpness_score(&x, &m, &SharpnessConfig::default())
        .expect("score")
        .value()
        .expect("value")
}

/// The 80-cell desk matrix, run once and shared by the checks that read it.
fn desk_matrix() -> &'static MatrixOutput {
    static MATRIX: OnceLock<MatrixOutput> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let plan = parse_plan(DESK_PLAN).expect("shipped plan parses");
        run_matrix(&plan, workers(), None).expect("desk matrix runs")
    })
}

// ── 1. Gradient correctness ──────────────────────────────────────────────

/// Gradcheck `f` against central differences and assert the relative error
/// bound, with the op name in the failure message.
fn check_op<F>(name: &str, tol: f64, x0: &Array, f: F)
where
    F: Fn(&Context, &Tensor) -> Result<Tensor>,
{
    let report = grad_check(f, x0, 1e-5).unwrap_or_else(|e| panic!("gradcheck {name}: {e}"));
    assert!(
        report.max_rel_error <= tol,
        "op {name}: max rel error {:.3e} exceeds {tol:.0e} at index {} \
         (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_error,
        report.worst_index,
        report.analytic[report.worst_index],
        report.numeric[report.worst_index],
    );
}

/// Inputs kept away from kinks (|v| ≥ 0.1) and from the clamp edges used
/// below; values span both signs and both sides of 1.
fn generic_input() -> Array {
    Array::new(
        vec![6],
        vec![0.7, -0.45, 1.3, 0.25, -1.15, 0.9],
    )
    .unwrap()
}

fn positive_input() -> Array {
    Array::new(vec![6], vec![0.7, 0.45, 1.3, 0.25, 2.15, 0.9]).unwrap()
}

/// A fixed non-uniform pattern, so reductions after structural ops produce
/// distinct per-element output gradients (catches index transpositions).
fn pattern(ctx: &Context, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    ctx.constant(&Array::new(shape.to_vec(), data).unwrap())
}

/// Weighted sum against the fixed pattern, as the scalar head of every
/// structural-op check.
fn pattern_sum(t: &Tensor) -> Result<Tensor> {
    let ctx = t.context();
    let shape = t.shape();
    t.mul(&pattern(&ctx, &shape))?.sum_all()
}

const SMOOTH_TOL: f64 = 1e-6;
const OP_TOL: f64 = 1e-4;

fn sweep_elementwise_ops() {
    let a = generic_input();
    let pos = positive_input();

    // Smooth unaries at the tight tolerance.
    let smooth: &[(&str, UnKind)] = &[
        ("neg", UnKind::Neg),
        ("exp", UnKind::Exp),
        ("sigmoid", UnKind::Sigmoid),
        ("tanh", UnKind::Tanh),
        ("square", UnKind::Square),
        ("sin", UnKind::Sin),
        ("cos", UnKind::Cos),
    ];
    for &(name, kind) in smooth {
        check_op(name, SMOOTH_TOL, &a, move |_, x| x.unary(kind)?.sum_all());
    }
    for &(name, kind) in &[("log", UnKind::Log), ("sqrt", UnKind::Sqrt)] {
        check_op(name, SMOOTH_TOL, &pos, move |_, x| x.unary(kind)?.sum_all());
    }
    // Kinked unaries, evaluated away from their kinks.
    check_op("abs", OP_TOL, &a, |_, x| x.abs()?.sum_all());
    check_op("relu", OP_TOL, &a, |_, x| x.relu()?.sum_all());
    check_op("clamp", OP_TOL, &a, |_, x| x.clamp(-1.0, 1.2)?.sum_all());

    // Binaries, gradchecked once per operand side.
    let b = Array::new(vec![6], vec![0.35, 1.4, -0.8, 0.6, 2.0, -0.3]).unwrap();
    let binaries: &[(&str, fn(&Tensor, &Tensor) -> Result<Tensor>)] = &[
        ("add", |x, y| x.add(y)),
        ("sub", |x, y| x.sub(y)),
        ("mul", |x, y| x.mul(y)),
        ("div", |x, y| x.div(y)),
    ];
    for &(name, op) in binaries {
        let bc = b.clone();
        check_op(&format!("{name} (left)"), SMOOTH_TOL, &a, move |ctx, x| {
            op(x, &ctx.constant(&bc))?.sum_all()
        });
        let ac = a.clone();
        check_op(&format!("{name} (right)"), SMOOTH_TOL, &b, move |ctx, y| {
            op(&ctx.constant(&ac), y)?.sum_all()
        });
    }
    // pow needs a positive base; check base and exponent sides separately.
    let expo = Array::new(vec![6], vec![1.3, -0.7, 2.0, 0.5, -1.2, 0.8]).unwrap();
    let ec = expo.clone();
    check_op("pow (base)", SMOOTH_TOL, &pos, move |ctx, x| {
        x.pow(&ctx.constant(&ec))?.sum_all()
    });
    let pc = pos.clone();
    check_op("pow (exponent)", SMOOTH_TOL, &expo, move |ctx, y| {
        ctx.constant(&pc).pow(y)?.sum_all()
    });

    // Scalar-broadcast arithmetic.
    check_op("add_scalar", SMOOTH_TOL, &a, |_, x| x.add_scalar(0.37)?.sum_all());
    check_op("sub_scalar", SMOOTH_TOL, &a, |_, x| x.sub_scalar(1.2)?.sum_all());
    check_op("mul_scalar", SMOOTH_TOL, &a, |_, x| x.mul_scalar(-2.5)?.sum_all());
    check_op("div_scalar", SMOOTH_TOL, &a, |_, x| x.div_scalar(1.7)?.sum_all());
    check_op("rsub_scalar", SMOOTH_TOL, &a, |_, x| x.rsub_scalar(0.9)?.sum_all());
    check_op("powf", SMOOTH_TOL, &pos, |_, x| x.powf(2.5)?.sum_all());
}

fn sweep_structural_ops() {
    let a6 = generic_input();

    check_op("select", OP_TOL, &a6, |_, x| x.select(3));
    check_op("reshape", OP_TOL, &a6, |_, x| pattern_sum(&x.reshape(&[2, 3])?));
    check_op("upsample2x", OP_TOL, &a6, |_, x| {
        pattern_sum(&x.reshape(&[1, 2, 3])?.upsample2x()?)
    });

    let b6 = Array::new(vec![6], vec![0.2, -0.6, 1.1, 0.4, -0.9, 0.5]).unwrap();
    let bc = b6.clone();
    check_op("stack_pair (first)", OP_TOL, &a6, move |ctx, x| {
        pattern_sum(&x.stack_pair(&ctx.constant(&bc))?)
    });
    let ac = a6.clone();
    check_op("stack_pair (second)", OP_TOL, &b6, move |ctx, y| {
        pattern_sum(&ctx.constant(&ac).stack_pair(y)?)
    });

    let m23 = Array::new(vec![2, 3], vec![0.7, -0.45, 1.3, 0.25, -1.15, 0.9]).unwrap();
    let m32 = Array::new(vec![3, 2], vec![0.4, -0.2, 1.1, 0.8, -0.5, 0.3]).unwrap();
    let rc = m32.clone();
    check_op("matmul (left)", OP_TOL, &m23, move |ctx, x| {
        pattern_sum(&x.matmul(&ctx.constant(&rc))?)
    });
    let lc = m23.clone();
    check_op("matmul (right)", OP_TOL, &m32, move |ctx, y| {
        pattern_sum(&ctx.constant(&lc).matmul(y)?)
    });

    // Convolution: image side and kernel side, both padding modes.
    let img = Array::new(
        vec![1, 5, 6],
        (0..30).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.4).collect(),
    )
    .unwrap();
    let ker = Array::new(
        vec![2, 1, 3, 3],
        (0..18).map(|i| ((i * 5) % 7) as f64 * 0.2 - 0.5).collect(),
    )
    .unwrap();
    for mode in [PadMode::Zero, PadMode::Reflect] {
        let kc = ker.clone();
        check_op(&format!("conv2d (image, {mode:?})"), OP_TOL, &img, move |ctx, x| {
            pattern_sum(&x.conv2d(&ctx.constant(&kc), 1, 1, mode)?)
        });
        let ic = img.clone();
        check_op(&format!("conv2d (kernel, {mode:?})"), OP_TOL, &ker, move |ctx, k| {
            pattern_sum(&ctx.constant(&ic).conv2d(k, 1, 1, mode)?)
        });
        let kc2 = ker.clone();
        check_op(&format!("conv2d (stride 2, {mode:?})"), OP_TOL, &img, move |ctx, x| {
            pattern_sum(&x.conv2d(&ctx.constant(&kc2), 2, 1, mode)?)
        });
    }

    // Grid sampling: source side and coordinate side. Sample points sit
    // strictly inside cells (fractional parts far from 0), so the bilinear
    // surface is smooth at every probe the finite difference makes.
    let src = Array::new(
        vec![4, 5],
        (0..20).map(|i| ((i * 3) % 13) as f64 * 0.15 - 0.6).collect(),
    )
    .unwrap();
    let coords = Array::new(
        vec![1, 3, 2],
        vec![0.4, 1.3, 2.6, 3.4, 1.5, 0.7],
    )
    .unwrap();
    let cc = coords.clone();
    check_op("grid_sample (source)", OP_TOL, &src, move |ctx, s| {
        pattern_sum(&s.grid_sample(&ctx.constant(&cc))?)
    });
    let sc = src.clone();
    check_op("grid_sample (coords)", OP_TOL, &coords, move |ctx, c| {
        pattern_sum(&ctx.constant(&sc).grid_sample(c)?)
    });

    // Reductions.
    check_op("sum_all", OP_TOL, &a6, |_, x| x.reshape(&[2, 3])?.sum_all());
    check_op("mean_all", OP_TOL, &a6, |_, x| x.reshape(&[2, 3])?.mean_all());
    check_op("sum_axes (rows)", OP_TOL, &a6, |_, x| {
        pattern_sum(&x.reshape(&[2, 3])?.sum_axes(&[0])?)
    });
    check_op("sum_axes (cols)", OP_TOL, &a6, |_, x| {
        pattern_sum(&x.reshape(&[2, 3])?.sum_axes(&[1])?)
    });
    check_op("max_smooth_all", OP_TOL, &a6, |_, x| x.max_smooth_all(0.3));
}

/// The sharpness readout as a standalone differentiable op on a small raw
/// image, with the mask-normalizer kept on the tape so finite differences
/// see the same function the backward pass does.
fn sweep_sharpness_op() {
    let h = 10;
    let w = 12;
    let data: Vec<f64> = (0..h * w)
        .map(|i| {
            let y = (i / w) as f64;
            let x = (i % w) as f64;
            0.5 + 0.22 * (0.9 * x + 0.4 * y).sin() * (0.7 * y).cos()
        })
        .collect();
    let img = Array::new(vec![h, w], data).unwrap();
    let cfg = SharpnessConfig {
        detach_mask_norm: false,
        ..SharpnessConfig::default()
    };
    check_op("sharpness_score", OP_TOL, &img, move |_, x| {
        let m = soft_mask(x)?;
        sharpness_score(x, &m, &cfg)
    });
}

/// End-to-end: every objective term at once, differentiated through the
/// procedural decoder and its mapping network from the input latent.
///
/// The baseline is measured at one latent and the gradient probed at a
/// nearby offset one. The hold terms are exact L1 anchors, so at the
/// baseline latent itself they sit on the kink of |·| where a subgradient
/// and a central difference legitimately disagree; one optimizer step away
/// every term is smooth and the comparison is meaningful.
fn composite_end_to_end() {
    let decoder = procedural(8, 64, 48);
    let z0 = start_latent(&decoder, 41, LatentSpace::Z).expect("start");
    let x0 = render(&decoder, &z0, LatentSpace::Z);
    let (pupil, _, ratio, _) = measure_geometry(&x0);
    let score = measure_sharpness(&x0);

    let offsets = [0.2, -0.15, 0.1, -0.2, 0.15, -0.1, 0.25, -0.05];
    let z1 = Array::new(
        vec![8],
        z0.data().iter().zip(offsets).map(|(z, d)| z + d).collect(),
    )
    .unwrap();

    let cfg = CompositeConfig {
        sharpness: SharpnessConfig {
            detach_mask_norm: false,
            ..SharpnessConfig::default()
        },
        polar: iris_traverse::geometry::PolarConfig {
            radial_samples: 16,
            angular_samples: 64,
        },
        z_reg_weight: 0.1,
    };
    let baseline = Baseline::measure(&x0, &cfg).expect("baseline");
    let specs = [
        AttributeSpec::targeted(AttributeKind::PupilRadius, pupil * 1.2),
        AttributeSpec::targeted(AttributeKind::PupilIrisRatio, ratio * 0.9),
        AttributeSpec::targeted(AttributeKind::Sharpness, score * 0.8),
        AttributeSpec::hold(AttributeKind::EyelidHold).with_weight(0.5),
        AttributeSpec::hold(AttributeKind::MaskHold).with_weight(0.5),
        AttributeSpec::hold(AttributeKind::IdentityHold).with_weight(0.5),
    ];

    let anchor = z0.clone();
    let report = grad_check(
        move |ctx, z| {
            Ok(composite_loss(
                ctx,
                z,
                LatentSpace::Z,
                &decoder,
                &specs,
                Some(&baseline),
                Some(&anchor),
                &cfg,
            )?
            .total)
        },
        &z1,
        1e-5,
    )
    .expect("composite gradcheck");
    assert!(
        report.max_rel_error <= 1e-3,
        "composite loss through the decoder: max rel error {:.3e} exceeds 1e-3 \
         at latent index {}",
        report.max_rel_error,
        report.worst_index,
    );
}

#[test]
fn accept_01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    sweep_elementwise_ops();
    sweep_structural_ops();
    sweep_sharpness_op();
    composite_end_to_end();
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        elapsed < 300.0,
        "gradient sweep took {elapsed:.1}s, budget is 300s"
    );
    println!(
        "ACCEPT 1: PASS — op sweep ≤{OP_TOL:.0e} (smooth ≤{SMOOTH_TOL:.0e}), \
         composite end-to-end ≤1e-3, {elapsed:.1}s"
    );
}

// ── 2. Sharpness metric properties ───────────────────────────────────────

#[test]
fn accept_02_sharpness_bounds_and_blur_ordering() {
    // Bounded range and exact zero on constant images.
    for level in [0.0, 0.3, 0.5, 1.0] {
        let img = Array::new(vec![48, 64], vec![level; 48 * 64]).unwrap();
        let ctx = Context::new();
        let x = ctx.constant(&img);
        let m = ctx.constant(&Array::new(vec![48, 64], vec![1.0; 48 * 64]).unwrap());
        let s = sharpness_score(&x, &m, &SharpnessConfig::default())
            .expect("score")
            .value()
            .expect("value");
        assert_eq!(s, 0.0, "constant image at level {level} must score 0, got {s}");
    }

    // Sharp/blurred render pairs: same scene, blur mix forced to the two
    // extremes through the style vector.
    let decoder = procedural(32, 640, 480);
    let mut worst_gap = f64::INFINITY;
    for seed in 0..20u64 {
        let z = start_latent(&decoder, 100 + seed, LatentSpace::Z).expect("start");
        let w = decoder.mapping().forward_detached(&z).expect("mapping");
        let mut sharp_w = w.clone();
        sharp_w.data_mut()[5] = -12.0;
        let mut blur_w = w.clone();
        blur_w.data_mut()[5] = 12.0;

        let s_sharp = measure_sharpness(&render(&decoder, &sharp_w, LatentSpace::W));
        let s_blur = measure_sharpness(&render(&decoder, &blur_w, LatentSpace::W));
        for s in [s_sharp, s_blur] {
            assert!(
                (0.0..100.0).contains(&s),
                "seed {seed}: score {s} outside [0, 100)"
            );
        }
        assert!(
            s_sharp > s_blur,
            "seed {seed}: sharp render scored {s_sharp:.3}, blurred {s_blur:.3}"
        );
        worst_gap = worst_gap.min(s_sharp - s_blur);
    }
    println!(
        "ACCEPT 2: PASS — scores in [0,100), constants score 0, \
         sharp > blurred 20/20 (smallest gap {worst_gap:.2})"
    );
}

// ── 3. Geometry estimators vs the closed-form scene ──────────────────────

#[test]
fn accept_03_geometry_tracks_analytic_scene() {
    let decoder = procedural(32, 640, 480);
    let (mut worst_p, mut worst_i, mut worst_l) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let z = start_latent(&decoder, 200 + seed, LatentSpace::Z).expect("start");
        let w = decoder.mapping().forward_detached(&z).expect("mapping");
        let params = decoder.circle_params(w.data()).expect("scene params");
        let img = render(&decoder, &w, LatentSpace::W);
        let (pupil, iris, _, lam) = measure_geometry(&img);

        let dp = (pupil - params.pupil_radius).abs();
        let di = (iris - params.iris_radius).abs();
        let dl = (lam - 2.0 * params.aperture).abs();
        assert!(
            dp <= 3.0,
            "seed {seed}: pupil estimate {pupil:.2} vs analytic {:.2} (|Δ| = {dp:.2} > 3)",
            params.pupil_radius
        );
        assert!(
            di <= 5.0,
            "seed {seed}: iris estimate {iris:.2} vs analytic {:.2} (|Δ| = {di:.2} > 5)",
            params.iris_radius
        );
        assert!(
            dl <= 2.0,
            "seed {seed}: eyelid opening {lam:.2} vs analytic {:.2} (|Δ| = {dl:.2} > 2)",
            2.0 * params.aperture
        );
        worst_p = worst_p.max(dp);
        worst_i = worst_i.max(di);
        worst_l = worst_l.max(dl);
    }
    println!(
        "ACCEPT 3: PASS — 20 seeds, worst |Δ|: pupil {worst_p:.2}px (≤3), \
         iris {worst_i:.2}px (≤5), eyelid {worst_l:.2}px (≤2)"
    );
}

// ── 4. Attribute convergence rate ────────────────────────────────────────

#[test]
fn accept_04_attribute_targets_converge() {
    let t0 = Instant::now();
    let decoder = procedural(32, 160, 120);
    let cfg = TraversalConfig::default();
    let composite = CompositeConfig::default();

    let mut rates = Vec::new();
    for kind in [AttributeKind::PupilRadius, AttributeKind::PupilIrisRatio] {
        let mut converged = 0;
        for seed in 0..20u64 {
            let z = start_latent(&decoder, 300 + seed, LatentSpace::Z).expect("start");
            let x0 = render(&decoder, &z, LatentSpace::Z);
            let (pupil, _, ratio, _) = measure_geometry(&x0);
            let start = match kind {
                AttributeKind::PupilRadius => pupil,
                _ => ratio,
            };
            // Alternate the direction so both signs of ±25% are exercised.
            let factor = if seed % 2 == 0 { 1.25 } else { 0.75 };
            let specs = [AttributeSpec::targeted(kind, start * factor)];
            let out = traverse(&decoder, &z, &specs, &cfg, &composite).expect("traversal");
            if out.trajectory.status == TraversalStatus::Converged {
                converged += 1;
            }
        }
        assert!(
            converged >= 18,
            "{kind}: only {converged}/20 runs converged within {} iterations (need ≥18)",
            cfg.max_iters
        );
        rates.push((kind, converged));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        elapsed < 1800.0,
        "convergence sweep took {elapsed:.0}s, budget is 1800s"
    );
    println!(
        "ACCEPT 4: PASS — {}: {}/20, {}: {}/20 converged (≥90% each), {elapsed:.0}s",
        rates[0].0, rates[0].1, rates[1].0, rates[1].1
    );
}

// ── 5. Identity-loss effect on the desk matrix ───────────────────────────

#[test]
fn accept_05_identity_loss_preserves_iris_code() {
    let out = desk_matrix();
    let with = &out.summary.with_identity;
    let without = &out.summary.without_identity;
    let (mean_with, mean_without) = (
        with.mean_hd.expect("held arm has scores"),
        without.mean_hd.expect("free arm has scores"),
    );
    assert!(
        mean_with < mean_without,
        "mean Hamming distance with identity hold ({mean_with:.4}) is not below \
         the arm without it ({mean_without:.4})"
    );
    let test = out
        .summary
        .hd_rank_sum
        .as_ref()
        .expect("both arms produced scores");
    assert!(
        test.p_less < 0.05,
        "rank-sum favors the identity arm only at p = {:.3} (need < 0.05); \
         mean HD {mean_with:.4} vs {mean_without:.4}",
        test.p_less
    );
    println!(
        "ACCEPT 5: PASS — mean HD {mean_with:.4} (identity) < {mean_without:.4} (none), \
         rank-sum p = {:.2e}",
        test.p_less
    );
}

// ── 6. Hold terms change what drifts ─────────────────────────────────────

#[test]
fn accept_06_hold_terms_limit_side_effects() {
    let decoder = procedural(32, 160, 120);
    let composite = CompositeConfig::default();
    // Tight radius tolerance so the iris-size runs do real work instead of
    // stopping a couple of pixels short of the target.
    let cfg = TraversalConfig {
        tol_radius: 0.75,
        max_iters: 400,
        ..TraversalConfig::default()
    };

    // Iris-size traversals: the eyelid-hold term must keep the opening Λ
    // closer to its start value, per seed.
    let mut lambda_pairs = Vec::new();
    for seed in 0..10u64 {
        let z = start_latent(&decoder, 400 + seed, LatentSpace::Z).expect("start");
        let x0 = render(&decoder, &z, LatentSpace::Z);
        let (_, iris, _, lam0) = measure_geometry(&x0);
        let target = iris * 1.25;

        let free = [AttributeSpec::targeted(AttributeKind::IrisRadius, target)];
        let held = [
            AttributeSpec::targeted(AttributeKind::IrisRadius, target),
            AttributeSpec::hold(AttributeKind::EyelidHold),
        ];
        let drift = |specs: &[AttributeSpec]| -> f64 {
            let out = traverse(&decoder, &z, specs, &cfg, &composite).expect("traversal");
            let xf = render(&decoder, &out.latent, LatentSpace::Z);
            let (_, _, _, lam) = measure_geometry(&xf);
            (lam - lam0).abs()
        };
        let d_free = drift(&free);
        let d_held = drift(&held);
        assert!(
            d_held < d_free,
            "seed {seed}: eyelid drift with hold ({d_held:.3}px) is not below \
             the run without it ({d_free:.3}px)"
        );
        lambda_pairs.push((d_held, d_free));
    }

    // Sharpness-decrease traversals: without the mask-hold term the cheapest
    // descent direction may deform the segmentation; with it the final mask
    // must stay closer (lower BCE against the starting mask) in ≥8/10 seeds.
    let mut mask_wins = 0;
    for seed in 0..10u64 {
        let z = start_latent(&decoder, 500 + seed, LatentSpace::Z).expect("start");
        let x0 = render(&decoder, &z, LatentSpace::Z);
        let baseline = Baseline::measure(&x0, &composite).expect("baseline");
        let target = baseline.attrs.sharpness * 0.7;

        let free = [AttributeSpec::targeted(AttributeKind::Sharpness, target)];
        let held = [
            AttributeSpec::targeted(AttributeKind::Sharpness, target),
            AttributeSpec::hold(AttributeKind::MaskHold),
        ];
        let final_bce = |specs: &[AttributeSpec]| -> f64 {
            let out = traverse(&decoder, &z, specs, &cfg, &composite).expect("traversal");
            let xf = render(&decoder, &out.latent, LatentSpace::Z);
            let ctx = Context::new();
            let m = soft_mask(&ctx.constant(&xf)).expect("mask");
            iris_traverse::attributes::loss_mask(&m, &baseline.mask_binary)
                .expect("bce")
                .value()
                .expect("value")
        };
        if final_bce(&held) < final_bce(&free) {
            mask_wins += 1;
        }
    }
    assert!(
        mask_wins >= 8,
        "mask-hold kept the segmentation closer in only {mask_wins}/10 sharpness runs \
         (need ≥8)"
    );
    let worst = lambda_pairs
        .iter()
        .map(|(h, f)| f - h)
        .fold(f64::INFINITY, f64::min);
    println!(
        "ACCEPT 6: PASS — eyelid-hold reduced Λ drift 10/10 (smallest margin {worst:.3}px), \
         mask-hold kept mask closer {mask_wins}/10"
    );
}

// ── 7. Self-inversion ────────────────────────────────────────────────────

#[test]
fn accept_07_renders_invert_to_low_mse() {
    let decoder = procedural(32, 160, 120);
    let mut hits = 0;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let z = start_latent(&decoder, 600 + seed, LatentSpace::Z).expect("start");
        let target = render(&decoder, &z, LatentSpace::Z);
        let cfg = InvertConfig {
            seed: 9000 + seed,
            ..InvertConfig::default()
        };
        match invert(&decoder, &target, &cfg, None) {
            Ok(out) => {
                let mse = out.trajectory.best_mse;
                worst = worst.max(mse);
                if mse < 1e-3 {
                    hits += 1;
                }
            }
            Err(failure) => {
                eprintln!("seed {seed}: inversion diverged: {}", failure.error);
            }
        }
    }
    assert!(
        hits >= 18,
        "only {hits}/20 inversions reached MSE < 1e-3 within 2000 iterations \
         (worst best-MSE {worst:.2e})"
    );
    println!("ACCEPT 7: PASS — {hits}/20 inversions below 1e-3 (worst best-MSE {worst:.2e})");
}

// ── 8. Z vs W comparison ─────────────────────────────────────────────────

#[test]
fn accept_08_space_compare_runs_both_spaces() {
    let plan = parse_plan(DESK_SPACE_PLAN).expect("shipped plan parses");
    let out = run_space_compare(&plan, workers(), None).expect("space compare");
    let (z, w) = (&out.summary.z, &out.summary.w);
    assert!(
        z.convergence_rate >= 0.8,
        "z-space converged in only {:.0}% of cells (need ≥80%)",
        100.0 * z.convergence_rate
    );
    assert!(
        w.convergence_rate >= 0.8,
        "w-space converged in only {:.0}% of cells (need ≥80%)",
        100.0 * w.convergence_rate
    );
    let (tz, tw) = (
        z.mean_texture_energy.expect("z texture statistic"),
        w.mean_texture_energy.expect("w texture statistic"),
    );
    let lines = out.csv.lines().count();
    assert_eq!(
        lines,
        out.pairs.len() + 1,
        "paired CSV row count mismatch"
    );
    println!(
        "ACCEPT 8: PASS — convergence z {:.0}% / w {:.0}%, \
         texture energy z {tz:.4} / w {tw:.4}, {} paired rows",
        100.0 * z.convergence_rate,
        100.0 * w.convergence_rate,
        out.pairs.len()
    );
}

// ── 9. Determinism of the matrix ─────────────────────────────────────────

#[test]
fn accept_09_matrix_rerun_is_byte_identical() {
    let first = desk_matrix();
    assert_eq!(first.rows.len(), 80, "desk matrix must have 80 cells");
    let plan = parse_plan(DESK_PLAN).expect("shipped plan parses");
    let second = run_matrix(&plan, workers(), None).expect("desk matrix reruns");
    assert!(
        first.csv == second.csv,
        "rerunning the desk matrix changed the CSV ({} vs {} bytes)",
        first.csv.len(),
        second.csv.len()
    );
    println!(
        "ACCEPT 9: PASS — 80-cell matrix rerun byte-identical ({} bytes of CSV)",
        first.csv.len()
    );
}

// ── 10. Optimizer unit behavior ──────────────────────────────────────────

#[test]
fn accept_10_optimizer_contract() {
    // Adam: zero gradient is an exact fixed point.
    let mut params = [0.3, -1.2, 7.0];
    let before = params;
    let mut opt = OptimizerState::new(3);
    for _ in 0..5 {
        opt.adam_step(&mut params, &[0.0; 3], 0.05);
    }
    assert_eq!(params, before, "Adam moved parameters on a zero gradient");

    // AdamW: zero gradient shrinks by exactly (1 − lr·decay) each step.
    let (lr, decay) = (0.03, 0.01);
    let mut params = [0.3, -1.2, 7.0];
    let mut expected = params;
    let mut opt = OptimizerState::new(3);
    for step in 0..5 {
        opt.adamw_step(&mut params, &[0.0; 3], lr, decay);
        for e in &mut expected {
            *e *= 1.0 - lr * decay;
        }
        assert_eq!(
            params, expected,
            "AdamW zero-gradient step {step} is not an exact (1 − lr·decay) shrink"
        );
    }

    // Clipping reports the norm pair and lands exactly on the ceiling.
    let mut g = [3.0, 4.0];
    let (pre, post) = clip_grad_norm(&mut g, 1.0).expect("finite gradient");
    assert_eq!(pre, 5.0);
    assert_eq!(post, 1.0);
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

    // Every recorded trajectory row stays within the clip ceiling, on both
    // the attribute-traversal and the inversion loops.
    let decoder = procedural(8, 64, 48);
    let cfg = TraversalConfig {
        max_iters: 60,
        ..TraversalConfig::default()
    };
    let composite = CompositeConfig::default();
    let mut rows = 0usize;
    for seed in [700u64, 701] {
        let z = start_latent(&decoder, seed, LatentSpace::Z).expect("start");
        let x0 = render(&decoder, &z, LatentSpace::Z);
        let (pupil, _, _, _) = measure_geometry(&x0);
        let specs = [AttributeSpec::targeted(AttributeKind::PupilRadius, pupil * 1.6)];
        let out = traverse(&decoder, &z, &specs, &cfg, &composite).expect("traversal");
        assert!(!out.trajectory.records.is_empty());
        for r in &out.trajectory.records {
            assert!(
                r.grad_norm_post_clip <= cfg.clip_norm,
                "iteration {} recorded post-clip norm {} above {}",
                r.iter,
                r.grad_norm_post_clip,
                cfg.clip_norm
            );
            rows += 1;
        }
    }
    let z = start_latent(&decoder, 702, LatentSpace::Z).expect("start");
    let target = render(&decoder, &z, LatentSpace::Z);
    let inv_cfg = InvertConfig {
        max_iters: 120,
        seed: 9102,
        ..InvertConfig::default()
    };
    let inv = invert(&decoder, &target, &inv_cfg, None).expect("inversion");
    assert!(!inv.trajectory.records.is_empty());
    for r in &inv.trajectory.records {
        assert!(
            r.grad_norm_post_clip <= inv_cfg.clip_norm,
            "inversion iteration {} recorded post-clip norm {} above {}",
            r.iter,
            r.grad_norm_post_clip,
            inv_cfg.clip_norm
        );
        rows += 1;
    }
    println!(
        "ACCEPT 10: PASS — Adam fixed point, exact AdamW decay, \
         post-clip norm ≤ 1.0 across {rows} recorded rows"
    );
}
