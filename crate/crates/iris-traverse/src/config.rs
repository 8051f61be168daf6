//! TOML run configuration: single-run specs and experiment plans.
//!
//! Every table rejects unknown keys so a typo fails loudly instead of
//! silently falling back to a default. Parse errors keep the TOML line
//! context. The parsers here accept untrusted text and must never panic.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attributes::{validate_specs, AttributeKind, AttributeSpec, CompositeConfig};
use crate::decoders::{ConvDecoder, Decoder, LatentSpace, ProceduralDecoder, RenderConfig};
use crate::error::{Error, Result};
use crate::traversal::TraversalConfig;

// ── Decoder selection ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Procedural,
    Conv,
}

/// Which generator to build and at what size.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    /// Seed for the decoder's own weights (not the start latent).
    pub seed: u64,
    pub latent_dim: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            kind: DecoderKind::Procedural,
            seed: 7,
            latent_dim: 32,
            width: 160,
            height: 120,
        }
    }
}

impl DecoderSpec {
    pub fn build(&self) -> Result<Box<dyn Decoder>> {
        Ok(match self.kind {
            DecoderKind::Procedural => Box::new(ProceduralDecoder::new(
                self.latent_dim,
                self.seed,
                RenderConfig::new(self.width, self.height),
            )?),
            DecoderKind::Conv => Box::new(ConvDecoder::new(
                self.latent_dim,
                self.seed,
                self.height,
                self.width,
            )?),
        })
    }
}

// ── Optimizer / objective overrides ──────────────────────────────────────

/// Optional `[traversal]` overrides; anything omitted keeps the default.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraversalTable {
    pub lr: Option<f64>,
    pub max_iters: Option<usize>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub tol_radius: Option<f64>,
    pub tol_ratio: Option<f64>,
    pub tol_sharpness: Option<f64>,
    pub snapshot_stride: Option<usize>,
}

impl TraversalTable {
    pub fn to_config(&self, space: LatentSpace) -> TraversalConfig {
        let mut cfg = TraversalConfig {
            space,
            ..TraversalConfig::default()
        };
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.tol_radius {
            cfg.tol_radius = v;
        }
        if let Some(v) = self.tol_ratio {
            cfg.tol_ratio = v;
        }
        if let Some(v) = self.tol_sharpness {
            cfg.tol_sharpness = v;
        }
        if let Some(v) = self.snapshot_stride {
            cfg.snapshot_stride = v;
        }
        cfg
    }
}

/// Optional `[composite]` overrides for the objective.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeTable {
    /// Band-pass response gain used by the sharpness score.
    pub response_gain: Option<f64>,
    /// Weight of the ½‖v − v₀‖² pull toward the start latent.
    pub z_reg_weight: Option<f64>,
    /// Radial rows of the polar unwrap used for identity terms.
    pub polar_radial: Option<usize>,
    /// Angular columns of the polar unwrap used for identity terms.
    pub polar_angular: Option<usize>,
}

impl CompositeTable {
    pub fn to_config(&self) -> CompositeConfig {
        let mut cfg = CompositeConfig::default();
        if let Some(v) = self.response_gain {
            cfg.sharpness.response_gain = v;
        }
        if let Some(v) = self.z_reg_weight {
            cfg.z_reg_weight = v;
        }
        if let Some(v) = self.polar_radial {
            cfg.polar.radial_samples = v;
        }
        if let Some(v) = self.polar_angular {
            cfg.polar.angular_samples = v;
        }
        cfg
    }
}

// ── Single traversal run ─────────────────────────────────────────────────

/// Config for one traversal: a decoder, a start latent, and the objective.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleRun {
    #[serde(default)]
    pub decoder: DecoderSpec,
    /// Seed of the random start latent.
    #[serde(default = "default_latent_seed")]
    pub seed: u64,
    #[serde(default = "default_space")]
    pub space: LatentSpace,
    /// The objective, one `[[attribute]]` block per term.
    #[serde(rename = "attribute")]
    pub attributes: Vec<AttributeSpec>,
    #[serde(default)]
    pub traversal: TraversalTable,
    #[serde(default)]
    pub composite: CompositeTable,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_latent_seed() -> u64 {
    1
}

fn default_space() -> LatentSpace {
    LatentSpace::Z
}

impl SingleRun {
    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.attributes)?;
        Ok(())
    }
}

// ── Experiment plan ──────────────────────────────────────────────────────

/// Direction to push a targeted attribute relative to its start value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Decrease,
    Increase,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Decrease => -1.0,
            Direction::Increase => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Decrease => "decrease",
            Direction::Increase => "increase",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How per-cell targets derive from the measured start value: the j-th of
/// `count` targets is `start · (1 + sign · spacing · (j+1))`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetRule {
    pub count: usize,
    pub spacing: f64,
}

impl Default for TargetRule {
    fn default() -> Self {
        TargetRule {
            count: 2,
            spacing: 0.2,
        }
    }
}

/// A full experiment grid. Cells enumerate in nesting order
/// seeds → attributes → directions → targets → identity_arms → spaces,
/// which is also the row order of the output table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub decoder: DecoderSpec,
    /// Start-latent seeds, one batch of cells per seed.
    pub seeds: Vec<u64>,
    /// Targeted attributes to steer (holds are not valid here).
    pub attributes: Vec<AttributeKind>,
    pub directions: Vec<Direction>,
    #[serde(default)]
    pub targets: TargetRule,
    /// Whether each cell also carries an identity-hold term.
    pub identity_arms: Vec<bool>,
    /// Latent spaces to traverse in.
    pub spaces: Vec<LatentSpace>,
    /// Weight of the identity-hold term in arms that carry one.
    #[serde(default = "default_identity_weight")]
    pub identity_weight: f64,
    /// Circular-shift tolerance when comparing iris codes.
    #[serde(default = "default_max_shift")]
    pub max_shift: usize,
    #[serde(default)]
    pub traversal: TraversalTable,
    #[serde(default)]
    pub composite: CompositeTable,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_identity_weight() -> f64 {
    1.0
}

fn default_max_shift() -> usize {
    16
}

fn unique<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .all(|(i, a)| items[i + 1..].iter().all(|b| b != a))
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("plan needs at least one seed".into());
        }
        if !unique(&self.seeds) {
            return bad("plan seeds contain a duplicate".into());
        }
        if self.attributes.is_empty() {
            return bad("plan needs at least one attribute".into());
        }
        if !unique(&self.attributes) {
            return bad("plan attributes contain a duplicate".into());
        }
        for kind in &self.attributes {
            if !kind.is_targeted() {
                return bad(format!(
                    "'{kind}' is a hold, not a steerable attribute; plans steer \
                     targeted attributes only"
                ));
            }
        }
        if self.directions.is_empty() || !unique(&self.directions) {
            return bad("plan directions must be non-empty and unique".into());
        }
        if self.identity_arms.is_empty() || !unique(&self.identity_arms) {
            return bad("plan identity_arms must be non-empty and unique".into());
        }
        if self.spaces.is_empty() || !unique(&self.spaces) {
            return bad("plan spaces must be non-empty and unique".into());
        }
        if self.targets.count == 0 {
            return bad("targets.count must be at least 1".into());
        }
        if !(self.targets.spacing > 0.0) || !self.targets.spacing.is_finite() {
            return bad("targets.spacing must be positive and finite".into());
        }
        if self.targets.spacing * self.targets.count as f64 >= 1.0 {
            return bad(
                "targets.spacing × targets.count must stay below 1 so decrease \
                 targets remain positive"
                    .into(),
            );
        }
        if !(self.identity_weight >= 0.0) || !self.identity_weight.is_finite() {
            return bad("identity_weight must be non-negative and finite".into());
        }
        if self.cell_count() > MAX_PLAN_CELLS {
            return bad(format!(
                "plan expands to more than {MAX_PLAN_CELLS} cells"
            ));
        }
        Ok(())
    }

    /// Number of grid cells this plan expands to. Saturates instead of
    /// overflowing, so absurd counts fail [`validate`](Self::validate)
    /// rather than panicking.
    pub fn cell_count(&self) -> usize {
        [
            self.attributes.len(),
            self.directions.len(),
            self.targets.count,
            self.identity_arms.len(),
            self.spaces.len(),
        ]
        .iter()
        .fold(self.seeds.len(), |acc, &n| acc.saturating_mul(n))
    }
}

/// Upper bound on the number of cells a plan may expand to; generous next
/// to the 80-cell desk grid and the 400-cell full preset, but small enough
/// to refuse configs that would never finish.
pub const MAX_PLAN_CELLS: usize = 100_000;

// ── Parsing ──────────────────────────────────────────────────────────────

fn config_err(e: toml::de::Error) -> Error {
    // toml's Display already carries "line N, column M" context.
    Error::Config(e.to_string())
}

/// Parse a single-run config from TOML text. Never panics.
pub fn parse_single(text: &str) -> Result<SingleRun> {
    let run: SingleRun = toml::from_str(text).map_err(config_err)?;
    run.validate()?;
    Ok(run)
}

/// Parse an experiment plan from TOML text. Never panics.
pub fn parse_plan(text: &str) -> Result<ExperimentPlan> {
    let plan: ExperimentPlan = toml::from_str(text).map_err(config_err)?;
    plan.validate()?;
    Ok(plan)
}

pub fn read_single_from_path(path: &std::path::Path) -> Result<SingleRun> {
    parse_single(&std::fs::read_to_string(path)?)
}

pub fn read_plan_from_path(path: &std::path::Path) -> Result<ExperimentPlan> {
    parse_plan(&std::fs::read_to_string(path)?)
}

/// The desk-scale experiment grid the binary ships with: 5 seeds ×
/// 2 attributes × 2 directions × 2 targets × 2 identity arms, z space,
/// 160×120 renders and a 16×128 polar unwrap — 80 cells that finish in
/// minutes on a laptop.
///
/// Sharpness is the second attribute on purpose: pushing it deforms the
/// iris texture itself, so the free arm genuinely drifts in code space
/// while the held arm pins it back. Geometry-only pairs (pupil size vs
/// ratio) separate poorly at this scale — their code distance is mostly
/// polar-resampling noise from the radius move, which the identity term
/// cannot undo. The identity weight is high for the same reason: it has
/// to compete with an attribute term whose raw gradient is two orders of
/// magnitude larger.
pub const DESK_PLAN: &str = r#"
seeds = [11, 12, 13, 14, 15]
attributes = ["pupil_radius", "sharpness"]
directions = ["decrease", "increase"]
identity_arms = [false, true]
spaces = ["z"]
identity_weight = 40.0

[decoder]
kind = "procedural"
seed = 7
latent_dim = 32
width = 160
height = 120

[targets]
count = 2
spacing = 0.3

[traversal]
tol_radius = 0.5
max_iters = 150

[composite]
polar_radial = 16
polar_angular = 128
"#;

/// A paired z-vs-w comparison on the same decoder and seeds.
pub const DESK_SPACE_PLAN: &str = r#"
seeds = [11, 12, 13, 14, 15]
attributes = ["pupil_radius"]
directions = ["decrease", "increase"]
identity_arms = [false]
spaces = ["z", "w"]

[decoder]
kind = "procedural"
seed = 7
latent_dim = 32
width = 160
height = 120

[targets]
count = 2
spacing = 0.2

[composite]
polar_radial = 32
polar_angular = 256
"#;
