//! Command-line front end: render latents, invert images, run single
//! traversals, and drive the experiment grids.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad TOML, bad
//! flags, malformed input files), 3 when an optimization diverged, 1 for
//! anything else (I/O and the like).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use iris_traverse::attributes::Baseline;
use iris_traverse::config::{self, DecoderKind, DecoderSpec, SingleRun};
use iris_traverse::decoders::LatentSpace;
use iris_traverse::error::Error;
use iris_traverse::harness::{self, MatrixOutput, SpaceOutput};
use iris_traverse::imageio;
use iris_traverse::traversal::{self, InvertConfig, TraversalStatus};

#[derive(Parser)]
#[command(
    name = "iris-traverse",
    version,
    about = "Gradient-guided latent traversal over differentiable iris decoders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render one or more seeds to images and report their attributes.
    Generate(GenerateArgs),
    /// Recover the latent behind an image by gradient descent.
    Invert(InvertArgs),
    /// Run a single traversal described by a TOML config.
    Traverse(TraverseArgs),
    /// Run a full experiment grid and write the result table.
    Matrix(GridArgs),
    /// Run the same grid in z and w space and pair the results.
    SpaceCompare(GridArgs),
}

// ── Shared flags ─────────────────────────────────────────────────────────

#[derive(Args)]
struct DecoderArgs {
    /// Decoder family: procedural | conv.
    #[arg(long, default_value = "procedural")]
    decoder: String,
    /// Seed of the decoder's weights.
    #[arg(long, default_value_t = 7)]
    decoder_seed: u64,
    /// Input latent dimension.
    #[arg(long, default_value_t = 32)]
    latent_dim: usize,
    /// Render size as WIDTHxHEIGHT, e.g. 160x120.
    #[arg(long, default_value = "160x120")]
    resolution: String,
}

impl DecoderArgs {
    fn to_spec(&self) -> Result<DecoderSpec, Error> {
        let kind = match self.decoder.as_str() {
            "procedural" => DecoderKind::Procedural,
            "conv" => DecoderKind::Conv,
            other => {
                return Err(Error::Config(format!(
                    "unknown decoder '{other}' (expected 'procedural' or 'conv')"
                )))
            }
        };
        let (width, height) = parse_resolution(&self.resolution)?;
        Ok(DecoderSpec {
            kind,
            seed: self.decoder_seed,
            latent_dim: self.latent_dim,
            width,
            height,
        })
    }
}

fn parse_resolution(text: &str) -> Result<(usize, usize), Error> {
    let bad = || {
        Error::Config(format!(
            "--resolution wants WIDTHxHEIGHT (e.g. 640x480), got '{text}'"
        ))
    };
    let (w, h) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(usize::from)
        .unwrap_or(1)
}

// ── generate ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    /// First latent seed to render.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// How many consecutive seeds to render.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Latent space to start from: z | w.
    #[arg(long, default_value = "z")]
    space: String,
    /// Output directory for seed_<N>.png / seed_<N>.pgm.
    #[arg(long)]
    out: PathBuf,
}

fn parse_space(text: &str) -> Result<LatentSpace, Error> {
    match text {
        "z" => Ok(LatentSpace::Z),
        "w" => Ok(LatentSpace::W),
        other => Err(Error::Config(format!(
            "unknown latent space '{other}' (expected 'z' or 'w')"
        ))),
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    let spec = args.decoder.to_spec()?;
    let space = parse_space(&args.space)?;
    let decoder = spec.build()?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let composite = config::CompositeTable::default().to_config();

    for seed in args.seed..args.seed.saturating_add(args.count) {
        let v = harness::start_latent(decoder.as_ref(), seed, space)?;
        let image = harness::render_detached(decoder.as_ref(), &v, space)?;
        let png = args.out.join(format!("seed_{seed}.png"));
        imageio::write_image(&png, &image)?;
        imageio::write_image(&args.out.join(format!("seed_{seed}.pgm")), &image)?;
        match Baseline::measure(&image, &composite) {
            Ok(b) => println!(
                "seed {seed}: pupil {:.2} px, iris {:.2} px, ratio {:.1}, eyelid {:.1}, \
                 sharpness {:.1} -> {}",
                b.attrs.pupil_radius,
                b.attrs.iris_radius,
                b.attrs.pupil_iris_ratio,
                b.attrs.eyelid_opening,
                b.attrs.sharpness,
                png.display()
            ),
            Err(e) if traversal::is_divergence(&e) => {
                println!("seed {seed}: attributes unmeasurable ({e}) -> {}", png.display())
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ── invert ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    /// Image to invert (.pgm or .png); size must match --resolution.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed of the random starting latent.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Stop once mean squared pixel error drops below this.
    #[arg(long, default_value_t = 1e-3)]
    mse_tol: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(serde::Serialize)]
struct InvertSummary {
    status: TraversalStatus,
    iterations: usize,
    best_iter: usize,
    best_mse: f64,
}

fn cmd_invert(args: InvertArgs) -> anyhow::Result<ExitCode> {
    let spec = args.decoder.to_spec()?;
    let decoder = spec.build()?;
    let target = imageio::read_image(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let cfg = InvertConfig {
        lr: args.lr,
        max_iters: args.max_iters,
        mse_tol: args.mse_tol,
        seed: args.seed,
        ..InvertConfig::default()
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let write_trajectory = |t: &iris_traverse::traversal::InvertTrajectory| -> anyhow::Result<()> {
        harness_write_jsonl(&args.out.join("trajectory.jsonl"), &t.records)?;
        harness_write_jsonl(&args.out.join("snapshots.jsonl"), &t.snapshots)?;
        Ok(())
    };

    match traversal::invert(decoder.as_ref(), &target, &cfg, None) {
        Ok(res) => {
            write_trajectory(&res.trajectory)?;
            let recon =
                harness::render_detached(decoder.as_ref(), &res.latent, LatentSpace::Z)?;
            imageio::write_image(&args.out.join("recovered.png"), &recon)?;
            imageio::write_image(&args.out.join("recovered.pgm"), &recon)?;
            let latent_json = serde_json::json!({
                "space": "z",
                "latent": res.latent.data(),
            });
            std::fs::write(
                args.out.join("latent.json"),
                serde_json::to_string_pretty(&latent_json)? + "\n",
            )?;
            let summary = InvertSummary {
                status: res.trajectory.status,
                iterations: res.trajectory.records.len(),
                best_iter: res.trajectory.best_iter,
                best_mse: res.trajectory.best_mse,
            };
            std::fs::write(
                args.out.join("summary.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            println!(
                "inversion {}: best MSE {:.3e} at iteration {} ({} evaluated)",
                summary.status, summary.best_mse, summary.best_iter, summary.iterations
            );
            println!("wrote {}", args.out.join("recovered.png").display());
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            // Keep the partial trajectory for post-mortems, then report.
            write_trajectory(&failure.trajectory)?;
            Err(Error::from(*failure).into())
        }
    }
}

// ── traverse ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct TraverseArgs {
    /// TOML run config (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_out(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf, Error> {
    flag.or_else(|| cfg.clone()).ok_or_else(|| {
        Error::Config(format!("{what} needs an output directory: pass --out or set out_dir"))
    })
}

fn cmd_traverse(args: TraverseArgs) -> anyhow::Result<ExitCode> {
    let run: SingleRun = config::read_single_from_path(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let out_dir = resolve_out(args.out, &run.out_dir, "traverse")?;
    let output = harness::run_single(&run, &out_dir)?;

    let s = &output.summary;
    println!(
        "traversal {}: {} iterations, best loss {:.4e} at iteration {}",
        s.status,
        s.iterations,
        s.best_loss,
        s.best_iter
    );
    for spec in run.attributes.iter().filter(|a| a.kind.is_targeted()) {
        let from = s.start_attrs.targeted_value(spec.kind).unwrap_or(f64::NAN);
        let to = s.final_attrs.targeted_value(spec.kind).unwrap_or(f64::NAN);
        println!(
            "  {}: {:.3} -> {:.3} (target {:.3})",
            spec.kind,
            from,
            to,
            spec.target.unwrap_or(f64::NAN)
        );
    }
    if let Some(hd) = s.hamming_distance {
        println!("  iris-code hamming distance: {hd:.4}");
    }
    if let Some(failure) = &s.failure {
        println!("  failure: {failure}");
    }
    println!("wrote {}", out_dir.display());
    Ok(match s.status {
        TraversalStatus::Diverged => ExitCode::from(3),
        _ => ExitCode::SUCCESS,
    })
}

// ── matrix / space-compare ───────────────────────────────────────────────

#[derive(Args)]
struct GridArgs {
    /// TOML experiment plan; omitted means the built-in desk-scale plan.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the plan's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

fn load_plan(path: &Option<PathBuf>, builtin: &str) -> anyhow::Result<config::ExperimentPlan> {
    match path {
        Some(p) => {
            config::read_plan_from_path(p).with_context(|| format!("loading {}", p.display()))
        }
        None => Ok(config::parse_plan(builtin).expect("built-in plan parses")),
    }
}

fn cmd_matrix(args: GridArgs) -> anyhow::Result<ExitCode> {
    let plan = load_plan(&args.config, config::DESK_PLAN)?;
    let out_dir = resolve_out(args.out, &plan.out_dir, "matrix")?;
    let workers = args.workers.unwrap_or_else(default_workers);
    eprintln!(
        "running {} cells on {} workers...",
        plan.cell_count(),
        workers.clamp(1, plan.cell_count().max(1))
    );
    let MatrixOutput { summary, csv_path, .. } = harness::run_matrix(&plan, workers, Some(&out_dir))?;

    println!(
        "{} cells: {} converged, {} diverged",
        summary.cells, summary.converged, summary.diverged
    );
    let arm_line = |label: &str, arm: &harness::ArmSummary| {
        println!(
            "  {label}: {}/{} converged, mean HD {}, median HD {}",
            arm.converged,
            arm.cells,
            arm.mean_hd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            arm.median_hd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        );
    };
    arm_line("with identity hold   ", &summary.with_identity);
    arm_line("without identity hold", &summary.without_identity);
    if let Some(t) = &summary.hd_rank_sum {
        println!(
            "  rank-sum (held drifts less): U={:.1}, z={:.2}, one-sided p={:.2e}",
            t.u, t.z, t.p_less
        );
    }
    if let Some(p) = csv_path {
        println!("wrote {}", p.display());
    }
    Ok(if summary.diverged > 0 {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_space_compare(args: GridArgs) -> anyhow::Result<ExitCode> {
    let plan = load_plan(&args.config, config::DESK_SPACE_PLAN)?;
    let out_dir = resolve_out(args.out, &plan.out_dir, "space-compare")?;
    let workers = args.workers.unwrap_or_else(default_workers);
    eprintln!("running {} cells on {} workers...", plan.cell_count(), workers);
    let SpaceOutput { summary, csv_path, pairs, .. } =
        harness::run_space_compare(&plan, workers, Some(&out_dir))?;

    println!("{} paired cells", summary.pairs);
    let arm_line = |label: &str, arm: &harness::SpaceArmSummary| {
        println!(
            "  {label}: {}/{} converged, mean texture energy {}",
            arm.converged,
            arm.cells,
            arm.mean_texture_energy
                .map(|v| format!("{v:.3e}"))
                .unwrap_or_else(|| "-".into()),
        );
    };
    arm_line("z space", &summary.z);
    arm_line("w space", &summary.w);
    if let Some(p) = csv_path {
        println!("wrote {}", p.display());
    }
    let any_diverged = pairs.iter().any(|p| {
        p.z_status == TraversalStatus::Diverged || p.w_status == TraversalStatus::Diverged
    });
    Ok(if any_diverged {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

// ── Entry point ──────────────────────────────────────────────────────────

fn harness_write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    use std::io::Write as _;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::FileFormat { .. }
        | Error::LatentMismatch(_)
        | Error::ShapeMismatch { .. } => 2,
        Error::Domain { .. } | Error::DegenerateMask { .. } | Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Invert(args) => cmd_invert(args),
        Cmd::Traverse(args) => cmd_traverse(args),
        Cmd::Matrix(args) => cmd_matrix(args),
        Cmd::SpaceCompare(args) => cmd_space_compare(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<Error>()
                .map(exit_for)
                .unwrap_or(1);
            ExitCode::from(code)
        }
    }
}
