//! Temporary diagnostic — not part of the suite. Run with
//! `cargo test --test probe -- --ignored --nocapture`.

use iris_traverse::attributes::{
    composite_loss, AttributeKind, AttributeSpec, Baseline, CompositeConfig, SharpnessConfig,
};
use iris_traverse::autodiff::grad_check;
use iris_traverse::decoders::{LatentSpace, ProceduralDecoder, RenderConfig};
use iris_traverse::harness::{render_detached, start_latent};

#[test]
#[ignore]
fn term_by_term() {
    let decoder = ProceduralDecoder::new(8, 7, RenderConfig::new(64, 48)).unwrap();
    let z0 = start_latent(&decoder, 41, LatentSpace::Z).unwrap();
    let x0 = render_detached(&decoder, &z0, LatentSpace::Z).unwrap();

    let cfg = CompositeConfig {
        sharpness: SharpnessConfig {
            detach_mask_norm: false,
            ..SharpnessConfig::default()
        },
        polar: iris_traverse::geometry::PolarConfig {
            radial_samples: 16,
            angular_samples: 64,
        },
        z_reg_weight: 0.0,
    };
    let baseline = Baseline::measure(&x0, &cfg).unwrap();
    let pupil = baseline.attrs.pupil_radius;
    let ratio = baseline.attrs.pupil_iris_ratio;
    let score = baseline.attrs.sharpness;

    let cases: Vec<(&str, AttributeSpec)> = vec![
        ("pupil", AttributeSpec::targeted(AttributeKind::PupilRadius, pupil * 1.2)),
        ("ratio", AttributeSpec::targeted(AttributeKind::PupilIrisRatio, ratio * 0.9)),
        ("sharp", AttributeSpec::targeted(AttributeKind::Sharpness, score * 0.8)),
        ("eyelid", AttributeSpec::hold(AttributeKind::EyelidHold)),
        ("mask", AttributeSpec::hold(AttributeKind::MaskHold)),
        ("ident", AttributeSpec::hold(AttributeKind::IdentityHold)),
    ];

    for (name, spec) in cases {
        let d = ProceduralDecoder::new(8, 7, RenderConfig::new(64, 48)).unwrap();
        let b = baseline.clone();
        let c = cfg.clone();
        let specs = [spec];
        let report = grad_check(
            move |ctx, z| {
                Ok(composite_loss(ctx, z, LatentSpace::Z, &d, &specs, Some(&b), None, &c)?.total)
            },
            &z0,
            1e-5,
        )
        .unwrap();
        let i = report.worst_index;
        println!(
            "{name}: max rel {:.3e} at index {i} (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error, report.analytic[i], report.numeric[i]
        );
    }
}
