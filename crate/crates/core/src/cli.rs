//! The `lord` command-line driver.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{LordError, Result};
use crate::experiment::{run_pair, run_sweep, sweep_csv, PairResult, SweepKind, SynthWarpSetup};
use crate::ffd::{warp_image, HierarchicalFFD};
use crate::glyph::frt_slice;
use crate::gradient::gradient_oracle;
use crate::metrics::{step_reports, Deformation, Identity};
use crate::phantom::{builtin_experiment, synthesize, Blueprint, DEFAULT_DIRECTIONS, DEFAULT_ISO_LEVEL, DEFAULT_NOISE, EXPERIMENTS};
use crate::sphere::DirectionSet;
use crate::volume::{load_lsdv, save_lsdv, DirectionalKernel};

#[derive(Debug, Parser)]
#[command(name = "lord", version, about = "Nonrigid registration of spatio-directional images")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "LORD_THREADS")]
    pub threads: Option<usize>,
    /// Reproducible output: wall times are written as zero.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a builtin phantom pair, or render a blueprint file.
    Phantom(PhantomArgs),
    /// Register a moving image onto a target image.
    Register(RegisterArgs),
    /// Resample an image through a deformation with reorientation.
    Warp(WarpArgs),
    /// Curl, divergence and coordinate error of a deformation.
    Metrics(MetricsArgs),
    /// Funk-Radon ODF glyphs of one slice.
    Frt(FrtArgs),
    /// Run a builtin phantom experiment or a synthetic-warp sweep.
    Experiment(ExperimentArgs),
    /// Compare analytic and finite-difference gradients on a random problem.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Builtin experiment name.
    pub name: Option<String>,
    /// Render this blueprint file instead of a builtin pair.
    #[arg(long, conflicts_with = "name")]
    pub blueprint: Option<PathBuf>,
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,
    /// Directions of a rendered blueprint.
    #[arg(long, default_value_t = DEFAULT_DIRECTIONS)]
    pub directions: usize,
    /// Noise level of a rendered blueprint.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    /// Direction and noise seed of a rendered blueprint.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the builtin names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// JSON run configuration; defaults to the phantom settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Watson concentration for every step.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subsample both images to this many directions.
    #[arg(long)]
    pub directions: Option<usize>,
    /// Output deformation.
    #[arg(long)]
    pub ffd: Option<PathBuf>,
    /// Output optimizer trace (CSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub ffd: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Watson concentration of the directional resampling.
    #[arg(long, default_value_t = 15.0)]
    pub kappa: f64,
    /// Cubic B-spline instead of trilinear spatial interpolation.
    #[arg(long)]
    pub cubic: bool,
    /// Warp even when the deformation folds.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = crate::ffd::DEFAULT_DET_FLOOR)]
    pub det_floor: f64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub ffd: PathBuf,
    /// Reference deformation; the identity when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Domain size `nx,ny,nz`.
    #[arg(long, value_delimiter = ',', required_unless_present = "like")]
    pub dims: Option<Vec<usize>>,
    /// Take the domain size from this image.
    #[arg(long, conflicts_with = "dims")]
    pub like: Option<PathBuf>,
    /// Per-step CSV; printed to stdout when absent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Accumulated curl magnitude as a one-direction LSDV volume.
    #[arg(long)]
    pub curl: Option<PathBuf>,
    /// Accumulated absolute divergence as a one-direction LSDV volume.
    #[arg(long)]
    pub abs_div: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FrtArgs {
    pub input: PathBuf,
    /// Slice index; the middle slice when absent.
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// A builtin phantom pair or bins_sweep, kappa_sweep, spatial_sweep.
    pub name: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Watson concentration for phantom pairs.
    #[arg(long, default_value_t = 15.0)]
    pub kappa: f64,
    /// Synthetic-warp domain `nx,ny,nz`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 15.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 30)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// Parses the process arguments, runs, and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lord: error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LordError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Register(a) => register(a, cli.deterministic),
        Command::Warp(a) => warp(a),
        Command::Metrics(a) => metrics(a),
        Command::Frt(a) => frt(a),
        Command::Experiment(a) => experiment(a, cli.deterministic),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(LordError::io_at(path))
}

fn out_file(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    if a.list {
        for name in EXPERIMENTS {
            println!("{name}");
        }
        return Ok(());
    }
    let dirs = Arc::new(DirectionSet::generate(a.directions, a.seed)?);
    if let Some(path) = &a.blueprint {
        let bp = Blueprint::load(path)?;
        let img = synthesize(&bp, dirs, a.noise, DEFAULT_ISO_LEVEL, a.seed)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("phantom");
        let out = out_file(&a.out, &format!("{stem}.lsdv"))?;
        save_lsdv(&out, &img)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let name = a.name.ok_or_else(|| LordError::invalid("give a builtin name, --blueprint or --list"))?;
    let pair = builtin_experiment(&name)?;
    for (role, img, bp) in [("moving", &pair.moving, &pair.moving_blueprint), ("target", &pair.target, &pair.target_blueprint)] {
        let out = out_file(&a.out, &format!("{name}_{role}.lsdv"))?;
        save_lsdv(&out, img)?;
        bp.save(out.with_extension("blueprint"))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn register(a: RegisterArgs, deterministic: bool) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::phantom(),
    };
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(k) = a.kappa {
        cfg.schedule.iter_mut().for_each(|s| s.kappa = k);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.directions.is_some() {
        cfg.directions = a.directions;
    }
    for (slot, flag) in [
        (&mut cfg.paths.moving, a.moving),
        (&mut cfg.paths.target, a.target),
        (&mut cfg.paths.ffd, a.ffd),
        (&mut cfg.paths.trace, a.trace),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    cfg.validate()?;
    let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| LordError::Config(format!("no {what} image given")));
    let moving = load_lsdv(need(&cfg.paths.moving, "moving")?)?;
    let target = load_lsdv(need(&cfg.paths.target, "target")?)?;
    let reg = crate::optimizer::register(&moving, &target, &cfg.schedule()?, &cfg.register_options(deterministic), None)?;
    let mut out = std::io::stdout().lock();
    for s in &reg.steps {
        writeln!(
            out,
            "step {} delta {} bins {} kappa {}: nmi {:.6} -> {:.6}, {} iterations, {}, min det {:.4}",
            s.step,
            s.delta,
            s.bins,
            s.kappa,
            s.initial_nmi,
            s.final_nmi,
            s.iterations,
            s.termination.as_str(),
            s.min_det
        )?;
    }
    if let Some(p) = &cfg.paths.ffd {
        reg.ffd.save(p)?;
    }
    if let Some(p) = &cfg.paths.trace {
        write_text(p, &reg.trace_csv())?;
    }
    Ok(())
}

fn warp(a: WarpArgs) -> Result<()> {
    let img = load_lsdv(&a.input)?;
    let ffd = HierarchicalFFD::load(&a.ffd)?;
    let guard = ffd.check_diffeomorphism(&ffd.dense_probes(img.dims()), a.det_floor);
    if !guard.pass {
        eprintln!(
            "lord: warning: deformation folds near ({:.2}, {:.2}, {:.2}), min det J = {:e}",
            guard.worst.x, guard.worst.y, guard.worst.z, guard.min_det
        );
        if !a.force {
            return Err(LordError::NotDiffeomorphic { min_det: guard.min_det });
        }
    }
    let out = warp_image(&img, &ffd, DirectionalKernel::Watson(a.kappa), a.cubic)?;
    save_lsdv(&a.out, &out)
}

fn dims3(v: &[usize]) -> Result<[usize; 3]> {
    match v {
        [x, y, z] if *x > 0 && *y > 0 && *z > 0 => Ok([*x, *y, *z]),
        _ => Err(LordError::Config(format!("dims must be three positive integers, got {v:?}"))),
    }
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let ffd = HierarchicalFFD::load(&a.ffd)?;
    let dims = match (&a.dims, &a.like) {
        (Some(d), _) => dims3(d)?,
        (None, Some(p)) => load_lsdv(p)?.dims(),
        (None, None) => return Err(LordError::Config("give --dims or --like".into())),
    };
    let reference = a.reference.as_deref().map(HierarchicalFFD::load).transpose()?;
    let truth: &dyn Deformation = match &reference {
        Some(r) => r,
        None => &Identity,
    };
    let report = step_reports(&ffd, truth, dims)?;
    match &a.csv {
        Some(p) => write_text(p, &report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(p) = &a.curl {
        save_lsdv(p, &report.curl.to_image()?)?;
    }
    if let Some(p) = &a.abs_div {
        save_lsdv(p, &report.abs_div.to_image()?)?;
    }
    Ok(())
}

fn frt(a: FrtArgs) -> Result<()> {
    let img = load_lsdv(&a.input)?;
    let z = a.slice.unwrap_or(img.dims()[2] / 2);
    let g = frt_slice(&img, z)?;
    if a.svg.is_none() && a.csv.is_none() {
        return Err(LordError::Config("give --svg and/or --csv".into()));
    }
    if let Some(p) = &a.svg {
        write_text(p, &g.svg())?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &g.csv())?;
    }
    Ok(())
}

fn experiment(a: ExperimentArgs, deterministic: bool) -> Result<()> {
    let opts = crate::optimizer::RegisterOptions { seed: a.seed, deterministic, ..Default::default() };
    let text = if EXPERIMENTS.contains(&a.name.as_str()) {
        let res = run_pair(&builtin_experiment(&a.name)?, a.kappa, &opts)?;
        format!("{}\n{}\n", PairResult::CSV_HEADER, res.csv_row())
    } else {
        let kind = SweepKind::parse(&a.name).map_err(|_| {
            LordError::invalid(format!(
                "unknown experiment `{}`; valid names: {}, bins_sweep, kappa_sweep, spatial_sweep",
                a.name,
                EXPERIMENTS.join(", ")
            ))
        })?;
        let mut setup = SynthWarpSetup::default();
        if let Some(d) = &a.dims {
            setup.dims = dims3(d)?;
        }
        sweep_csv(a.seed, &run_sweep(kind, &setup, a.seed, &opts)?)
    };
    match &a.csv {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let err = gradient_oracle(a.seed, a.kappa, a.coords)?;
    println!("max relative error {err:.3e} over {} coordinates (seed {}, kappa {})", a.coords, a.seed, a.kappa);
    if err > a.tol {
        return Err(LordError::GradientMismatch { max_rel_err: err, tol: a.tol });
    }
    Ok(())
}
