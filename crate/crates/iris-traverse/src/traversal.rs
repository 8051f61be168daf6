//! Latent-space traversal: walk a decoder's input so the rendered image
//! reaches attribute targets while hold terms anchor everything else.
//!
//! The loop is deliberately plain: evaluate the composite objective, clip
//! the gradient's norm, take an Adam(W) step, repeat. Every iteration is
//! recorded, the best-loss iterate wins, and blow-ups degrade to a
//! `Diverged` status with the partial trajectory intact instead of tearing
//! the whole run down.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::attributes::{
    composite_loss, validate_specs, AttributeSpec, AttributeValues, Baseline, CompositeConfig,
    TermValue,
};
use crate::autodiff::{Array, Context};
use crate::decoders::{Decoder, LatentSpace};
use crate::error::{Error, Result};

// ── Optimizers ───────────────────────────────────────────────────────────

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for Adam-family updates.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected Adam step in place. A zero gradient leaves the
    /// parameters bit-identical.
    pub fn adam_step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert!(
            params.len() == self.m.len() && grad.len() == self.m.len(),
            "optimizer state sized for {} parameters",
            self.m.len()
        );
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    /// AdamW: decoupled weight decay applied to the parameters first, then
    /// a regular Adam step. With a zero gradient the parameters shrink by
    /// exactly `1 − lr·decay`.
    pub fn adamw_step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, decay: f64) {
        let shrink = 1.0 - lr * decay;
        for p in params.iter_mut() {
            *p *= shrink;
        }
        self.adam_step(params, grad, lr);
    }
}

/// Scale `grad` so its L2 norm is at most `max_norm`; returns the norms
/// before and after. A non-finite incoming norm is an optimization failure.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> Result<(f64, f64)> {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let pre = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !pre.is_finite() {
        return Err(Error::Diverged {
            iter: 0,
            msg: "diverged gradient: non-finite norm before clipping".to_string(),
        });
    }
    if pre <= max_norm {
        return Ok((pre, pre));
    }
    let scale = max_norm / pre;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    // The rescaled vector's norm is max_norm by construction; re-measuring
    // it would only add one rounding's worth of noise.
    Ok((pre, max_norm))
}

// ── Trajectories ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraversalStatus {
    /// Every targeted attribute reached its stop tolerance.
    Converged,
    /// The iteration budget ran out first.
    MaxIters,
    /// The objective or gradient left the finite (or measurable) regime.
    Diverged,
}

impl TraversalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TraversalStatus::Converged => "converged",
            TraversalStatus::MaxIters => "max_iters",
            TraversalStatus::Diverged => "diverged",
        }
    }
}

impl std::fmt::Display for TraversalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One fully evaluated iteration.
#[derive(Clone, Debug, serde::Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub total_loss: f64,
    pub terms: Vec<TermValue>,
    pub attrs: AttributeValues,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct LatentSnapshot {
    pub iter: usize,
    pub latent: Vec<f64>,
}

/// Everything a traversal run leaves behind.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    pub snapshots: Vec<LatentSnapshot>,
    pub status: TraversalStatus,
    /// Iteration index of the best (lowest) total loss.
    pub best_iter: usize,
    pub best_loss: f64,
    /// Diagnostic for diverged runs.
    pub failure: Option<String>,
}

impl Trajectory {
    /// Attribute readouts at the returned (best-loss) iterate.
    pub fn best_attrs(&self) -> &AttributeValues {
        &self.records[self.best_iter].attrs
    }
}

#[derive(Debug)]
pub struct TraversalResult {
    /// The best-loss latent visited, in the traversal's space.
    pub latent: Array,
    pub trajectory: Trajectory,
    /// Reference state measured from the starting image (present whenever
    /// hold terms requested it).
    pub baseline: Option<Baseline>,
}

// ── Traversal configuration ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TraversalConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Decoupled weight decay; used only when the objective has no
    /// identity term (identity anchoring and decay-toward-0 fight each
    /// other, so whichever is present wins).
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Stop tolerance for pupil/iris radius targets, in pixels.
    pub tol_radius: f64,
    /// Stop tolerance for the pupil-to-iris ratio target, in points.
    pub tol_ratio: f64,
    /// Stop tolerance for the sharpness target, in score points.
    pub tol_sharpness: f64,
    /// Which latent space the start vector lives in.
    pub space: LatentSpace,
    /// Record the latent every this many iterations.
    pub snapshot_stride: usize,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig {
            lr: 0.03,
            max_iters: 500,
            weight_decay: 0.01,
            clip_norm: 1.0,
            tol_radius: 2.0,
            tol_ratio: 2.0,
            tol_sharpness: 2.0,
            space: LatentSpace::Z,
            snapshot_stride: 25,
        }
    }
}

impl TraversalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("tol_radius", self.tol_radius),
            ("tol_ratio", self.tol_ratio),
            ("tol_sharpness", self.tol_sharpness),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".to_string()));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::Config("snapshot_stride must be at least 1".to_string()));
        }
        Ok(())
    }

    fn tolerance_for(&self, kind: crate::attributes::AttributeKind) -> f64 {
        use crate::attributes::AttributeKind::*;
        match kind {
            PupilRadius | IrisRadius => self.tol_radius,
            PupilIrisRatio => self.tol_ratio,
            Sharpness => self.tol_sharpness,
            _ => f64::INFINITY,
        }
    }
}

// ── The traversal loop ───────────────────────────────────────────────────

/// Errors whose appearance mid-run means the optimizer walked into a bad
/// region (as opposed to the caller misusing the API).
pub fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::Domain { .. } | Error::DegenerateMask { .. } | Error::Diverged { .. }
    )
}

/// Walk `start` (in `cfg.space`) so the decoder's output satisfies `specs`.
///
/// The starting image is rendered once; hold terms anchor to it. Stops as
/// soon as every targeted attribute is within its tolerance — a hold-only
/// objective therefore converges at iteration 0 without stepping. The
/// returned latent is the best-loss iterate, which is not necessarily the
/// last one.
pub fn traverse(
    decoder: &dyn Decoder,
    start: &Array,
    specs: &[AttributeSpec],
    cfg: &TraversalConfig,
    composite_cfg: &CompositeConfig,
) -> Result<TraversalResult> {
    cfg.validate()?;
    validate_specs(specs)?;
    let dim = decoder.dim_of(cfg.space);
    if start.shape() != [dim] {
        return Err(Error::LatentMismatch(format!(
            "start vector {:?} does not match the {} space dimension [{dim}]",
            start.shape(),
            cfg.space.as_str()
        )));
    }

    // Render the reference image once, up front, if any term will hold it.
    let baseline = if specs.iter().any(|s| s.kind.is_hold()) {
        let ctx = Context::new();
        let x0 = decoder
            .decode_from(&ctx, &ctx.constant(start), cfg.space)?
            .detach();
        Some(Baseline::measure(&x0, composite_cfg)?)
    } else {
        None
    };

    let use_decay = !specs
        .iter()
        .any(|s| s.kind == crate::attributes::AttributeKind::IdentityHold);

    let mut z = start.clone();
    let mut opt = OptimizerState::new(dim);
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, Array)> = None;
    let mut status = TraversalStatus::MaxIters;
    let mut failure = None;

    for iter in 0..cfg.max_iters {
        let ctx = Context::new();
        let leaf = ctx.leaf(&z);
        let evaluated = composite_loss(
            &ctx,
            &leaf,
            cfg.space,
            decoder,
            specs,
            baseline.as_ref(),
            Some(start),
            composite_cfg,
        );
        let out = match evaluated {
            Ok(out) => out,
            Err(e) if is_divergence(&e) => {
                status = TraversalStatus::Diverged;
                failure = Some(format!("iteration {iter}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let total = out.total.value()?;
        if !total.is_finite() {
            status = TraversalStatus::Diverged;
            failure = Some(format!("iteration {iter}: non-finite loss {total}"));
            break;
        }

        out.total.backward()?;
        let mut grad = leaf.grad().unwrap_or_else(|| vec![0.0; dim]);
        let (pre, post) = match clip_grad_norm(&mut grad, cfg.clip_norm) {
            Ok(norms) => norms,
            Err(e) => {
                status = TraversalStatus::Diverged;
                failure = Some(format!("iteration {iter}: {e}"));
                break;
            }
        };

        records.push(IterationRecord {
            iter,
            total_loss: total,
            terms: out.terms.clone(),
            attrs: out.attrs,
            grad_norm_pre_clip: pre,
            grad_norm_post_clip: post,
        });
        if iter % cfg.snapshot_stride == 0 {
            snapshots.push(LatentSnapshot {
                iter,
                latent: z.data().to_vec(),
            });
        }
        if best.as_ref().is_none_or(|(b, _, _)| total < *b) {
            best = Some((total, iter, z.clone()));
        }

        let reached = specs.iter().all(|s| match s.target {
            Some(t) => {
                let v = out
                    .attrs
                    .targeted_value(s.kind)
                    .expect("targeted kinds always have a readout");
                (v - t).abs() <= cfg.tolerance_for(s.kind)
            }
            None => true,
        });
        if reached {
            status = TraversalStatus::Converged;
            break;
        }

        if use_decay && cfg.weight_decay > 0.0 {
            opt.adamw_step(z.data_mut(), &grad, cfg.lr, cfg.weight_decay);
        } else {
            opt.adam_step(z.data_mut(), &grad, cfg.lr);
        }
    }

    let (best_loss, best_iter, best_latent) = match best {
        Some(b) => b,
        None => {
            // Divergence on the very first evaluation: nothing to return.
            return Err(Error::Diverged {
                iter: 0,
                msg: failure.unwrap_or_else(|| "no iteration completed".to_string()),
            });
        }
    };

    Ok(TraversalResult {
        latent: best_latent,
        trajectory: Trajectory {
            records,
            snapshots,
            status,
            best_iter,
            best_loss,
            failure,
        },
        baseline,
    })
}

// ── Inversion ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct InvertConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop as soon as the mean squared pixel error drops below this.
    pub mse_tol: f64,
    pub clip_norm: f64,
    /// Seeds the random starting latent.
    pub seed: u64,
    pub snapshot_stride: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            lr: 0.05,
            max_iters: 2000,
            mse_tol: 1e-3,
            clip_norm: 1.0,
            seed: 7,
            snapshot_stride: 100,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct InvertRecord {
    pub iter: usize,
    pub mse: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
}

#[derive(Clone, Debug)]
pub struct InvertTrajectory {
    pub records: Vec<InvertRecord>,
    pub snapshots: Vec<LatentSnapshot>,
    pub status: TraversalStatus,
    pub best_iter: usize,
    pub best_mse: f64,
}

#[derive(Debug)]
pub struct InvertResult {
    /// Latent (in Z) whose rendering best matches the target.
    pub latent: Array,
    pub trajectory: InvertTrajectory,
}

/// Inversion failure carrying whatever trajectory accumulated before the
/// run fell apart.
#[derive(Debug)]
pub struct InvertFailure {
    pub error: Error,
    pub trajectory: InvertTrajectory,
}

impl std::fmt::Display for InvertFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl From<InvertFailure> for Error {
    fn from(f: InvertFailure) -> Error {
        f.error
    }
}

/// Recover a latent that renders to `target` by minimizing mean squared
/// pixel error from a seeded random start (or `start` when given).
///
/// Unlike attribute traversal, failing to stay finite here is a hard error
/// — there is no meaningful "partial inversion" — but the error still
/// carries the trajectory for post-mortems.
pub fn invert(
    decoder: &dyn Decoder,
    target: &Array,
    cfg: &InvertConfig,
    start: Option<&Array>,
) -> std::result::Result<InvertResult, Box<InvertFailure>> {
    let fail = |error: Error, trajectory: InvertTrajectory| {
        Box::new(InvertFailure { error, trajectory })
    };
    let empty = || InvertTrajectory {
        records: Vec::new(),
        snapshots: Vec::new(),
        status: TraversalStatus::Diverged,
        best_iter: 0,
        best_mse: f64::INFINITY,
    };

    let (h, w) = decoder.image_size();
    if target.shape() != [h, w] {
        return Err(fail(
            Error::LatentMismatch(format!(
                "target image {:?} does not match the decoder output [{h}, {w}]",
                target.shape()
            )),
            empty(),
        ));
    }
    if !(cfg.lr > 0.0) || cfg.max_iters == 0 || !(cfg.mse_tol > 0.0) || cfg.snapshot_stride == 0 {
        return Err(fail(
            Error::Config("inversion needs positive lr, iters, tolerance, stride".to_string()),
            empty(),
        ));
    }
    let dim = decoder.latent_dim();
    let mut z = match start {
        Some(s) => {
            if s.shape() != [dim] {
                return Err(fail(
                    Error::LatentMismatch(format!(
                        "start vector {:?} does not match the latent dimension [{dim}]",
                        s.shape()
                    )),
                    empty(),
                ));
            }
            s.clone()
        }
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            Array::new(
                vec![dim],
                (0..dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            )
            .expect("latent shape")
        }
    };

    let mut opt = OptimizerState::new(dim);
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, Array)> = None;
    let mut status = TraversalStatus::MaxIters;

    for iter in 0..cfg.max_iters {
        let ctx = Context::new();
        let leaf = ctx.leaf(&z);
        let step = (|| -> Result<(f64, Vec<f64>)> {
            let x = decoder.generate(&ctx, &leaf)?;
            let mse = x.sub(&ctx.constant(target))?.square()?.mean_all()?;
            let value = mse.value()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    msg: format!("non-finite reconstruction error {value}"),
                });
            }
            mse.backward()?;
            Ok((value, leaf.grad().unwrap_or_else(|| vec![0.0; dim])))
        })();
        let (mse, mut grad) = match step {
            Ok(v) => v,
            Err(e) => {
                let trajectory = InvertTrajectory {
                    records,
                    snapshots,
                    status: TraversalStatus::Diverged,
                    best_iter: best.as_ref().map_or(0, |b| b.1),
                    best_mse: best.as_ref().map_or(f64::INFINITY, |b| b.0),
                };
                return Err(fail(e, trajectory));
            }
        };
        let clipped = clip_grad_norm(&mut grad, cfg.clip_norm);
        let (pre, post) = match clipped {
            Ok(norms) => norms,
            Err(e) => {
                let trajectory = InvertTrajectory {
                    records,
                    snapshots,
                    status: TraversalStatus::Diverged,
                    best_iter: best.as_ref().map_or(0, |b| b.1),
                    best_mse: best.as_ref().map_or(f64::INFINITY, |b| b.0),
                };
                return Err(fail(e, trajectory));
            }
        };

        records.push(InvertRecord {
            iter,
            mse,
            grad_norm_pre_clip: pre,
            grad_norm_post_clip: post,
        });
        if iter % cfg.snapshot_stride == 0 {
            snapshots.push(LatentSnapshot {
                iter,
                latent: z.data().to_vec(),
            });
        }
        if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
            best = Some((mse, iter, z.clone()));
        }
        if mse < cfg.mse_tol {
            status = TraversalStatus::Converged;
            break;
        }
        opt.adam_step(z.data_mut(), &grad, cfg.lr);
    }

    let (best_mse, best_iter, latent) = best.expect("at least one iteration ran");
    Ok(InvertResult {
        latent,
        trajectory: InvertTrajectory {
            records,
            snapshots,
            status,
            best_iter,
            best_mse,
        },
    })
}
