//! Experiments. Builtin phantom pairs are registered with the phantom
//! schedule and scored by NMI, the diffeomorphism guard, fiber-direction error
//! and tract stretch. In the synthetic-warp sweeps a seeded 3-D phantom is
//! warped by a random diffeomorphic FFD and registered back under different
//! histogram, Watson and sampling schedules, scoring each run against the
//! known map.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{LordError, Result};
use crate::ffd::{warp_image, DiffeoReport, HierarchicalFFD};
use crate::metrics::{length_distortion, step_reports, peak_angle_errors, DeformationReport};
use crate::optimizer::{register, RegisterOptions, Registration, Schedule, ScheduleStep};
use crate::phantom::{
    synthesize, synthesize_warped, synthetic_warp, synthwarp_blueprint, Blueprint, ExperimentPair, DEFAULT_ISO_LEVEL,
    DEFAULT_NOISE,
};
use crate::sphere::DirectionSet;
use crate::volume::{DirectionalKernel, SpatioDirectionalImage};

/// Smallest Watson concentration used to warp the moving image before peak
/// extraction; weaker smoothing (κ = 0 above all) would wash out the peaks.
pub const PEAK_WARP_KAPPA: f64 = 15.0;

/// Scores of one registered phantom pair.
#[derive(Clone, Debug)]
pub struct PairResult {
    pub name: String,
    pub kappa: f64,
    pub registration: Registration,
    pub guard: DiffeoReport,
    /// Principal-fiber angle errors (degrees) on the target's single-fiber voxels.
    pub peak_errors: Vec<f64>,
    /// Relative length change of each moving tract; NaN where the map could not be inverted.
    pub tract_stretch: Vec<f64>,
}

impl PairResult {
    pub fn mean_peak_error(&self) -> f64 {
        self.peak_errors.iter().sum::<f64>() / self.peak_errors.len().max(1) as f64
    }

    pub const CSV_HEADER: &'static str =
        "name,kappa,initial_nmi,final_nmi,guard,min_det,mean_peak_error_deg,peak_voxels,max_abs_tract_stretch";

    pub fn csv_row(&self) -> String {
        let stretch = self.tract_stretch.iter().map(|d| d.abs()).fold(f64::NAN, f64::max);
        format!(
            "{},{},{:.9e},{:.9e},{},{:.9e},{:.6},{},{:.6}",
            self.name,
            self.kappa,
            self.registration.initial_nmi().unwrap_or(f64::NAN),
            self.registration.final_nmi().unwrap_or(f64::NAN),
            if self.guard.pass { "pass" } else { "fail" },
            self.guard.min_det,
            self.mean_peak_error(),
            self.peak_errors.len(),
            stretch
        )
    }
}

/// Registers a phantom pair with [`Schedule::phantom`] at the given Watson concentration.
pub fn run_pair(pair: &ExperimentPair, kappa: f64, opts: &RegisterOptions) -> Result<PairResult> {
    let reg = register(&pair.moving, &pair.target, &Schedule::phantom(kappa)?, opts, None)?;
    let dims = pair.moving.dims();
    let guard = reg.ffd.check_diffeomorphism(&reg.ffd.dense_probes(dims), opts.det_floor);
    let warped = warp_image(&pair.moving, &reg.ffd, DirectionalKernel::Watson(kappa.max(PEAK_WARP_KAPPA)), false)?;
    let voxels: Vec<[usize; 3]> = pair.target_blueprint.single_fiber_voxels().into_iter().map(|(v, _)| v).collect();
    let peak_errors = peak_angle_errors(&warped, &pair.target, &voxels)?;
    let tract_stretch = pair
        .moving_tracts
        .iter()
        .map(|t| length_distortion(&reg.ffd, t).unwrap_or(f64::NAN))
        .collect();
    Ok(PairResult { name: pair.name.clone(), kappa, registration: reg, guard, peak_errors, tract_stretch })
}

/// Control spacings of the synthetic-warp schedule.
pub const SYNTHWARP_DELTAS: [f64; 4] = [10.0, 5.0, 3.5, 3.0];
/// Progressive histogram sizes.
pub const PROGRESSIVE_BINS: [usize; 4] = [50, 100, 200, 500];
pub const SYNTHWARP_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWarpSetup {
    pub dims: [usize; 3],
    pub n_tracts: usize,
    pub directions: usize,
    /// Control spacing of the ground-truth warp.
    pub warp_spacing: f64,
    /// Warp amplitude as a fraction of its spacing.
    pub magnitude: f64,
    pub noise: f64,
}

impl Default for SynthWarpSetup {
    fn default() -> Self {
        SynthWarpSetup { dims: [16, 48, 24], n_tracts: 9, directions: 30, warp_spacing: 10.0, magnitude: 0.4, noise: DEFAULT_NOISE }
    }
}

/// A phantom, its warped copy and the map relating them (`target(x) ≈ moving(warp(x))`).
#[derive(Clone, Debug)]
pub struct SynthWarpCase {
    pub blueprint: Blueprint,
    pub moving: SpatioDirectionalImage,
    pub target: SpatioDirectionalImage,
    pub warp: HierarchicalFFD,
}

pub fn synthwarp_case(setup: &SynthWarpSetup, seed: u64) -> Result<SynthWarpCase> {
    let blueprint = synthwarp_blueprint(setup.dims, setup.n_tracts, seed)?;
    let warp = synthetic_warp(setup.dims, setup.warp_spacing, setup.magnitude, seed)?;
    let dirs = Arc::new(DirectionSet::generate(setup.directions, 0)?);
    let moving = synthesize(&blueprint, dirs.clone(), setup.noise, DEFAULT_ISO_LEVEL, 2 * seed + 1)?;
    let target = synthesize_warped(&blueprint, dirs, Some(&warp), setup.noise, DEFAULT_ISO_LEVEL, 2 * seed + 2)?;
    Ok(SynthWarpCase { blueprint, moving, target, warp })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Bins,
    Kappa,
    Spatial,
}

impl SweepKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "bins_sweep" => Ok(SweepKind::Bins),
            "kappa_sweep" => Ok(SweepKind::Kappa),
            "spatial_sweep" => Ok(SweepKind::Spatial),
            other => Err(LordError::invalid(format!(
                "unknown experiment `{other}`; valid names: bins_sweep, kappa_sweep, spatial_sweep"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Bins => "bins_sweep",
            SweepKind::Kappa => "kappa_sweep",
            SweepKind::Spatial => "spatial_sweep",
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let base = Variant { label: String::new(), bins: PROGRESSIVE_BINS, kappa: 15.0, strides: [1; 4] };
        match self {
            SweepKind::Bins => vec![
                Variant { label: "fixed_50".into(), bins: [50; 4], ..base.clone() },
                Variant { label: "fixed_500".into(), bins: [500; 4], ..base.clone() },
                Variant { label: "progressive".into(), ..base },
            ],
            SweepKind::Kappa => [0.0, 10.0, 15.0, 30.0]
                .into_iter()
                .map(|k| Variant { label: format!("kappa_{k}"), kappa: k, ..base.clone() })
                .collect(),
            SweepKind::Spatial => vec![
                Variant { label: "full".into(), ..base.clone() },
                Variant { label: "low_to_full".into(), strides: [4, 3, 2, 1], ..base },
            ],
        }
    }
}

/// One schedule of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub bins: [usize; 4],
    pub kappa: f64,
    pub strides: [usize; 4],
}

impl Variant {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            (0..4)
                .map(|i| ScheduleStep {
                    delta: SYNTHWARP_DELTAS[i],
                    bins: self.bins[i],
                    kappa: self.kappa,
                    spatial_stride: self.strides[i],
                    max_iters: SYNTHWARP_ITERS,
                    tol: 1e-6,
                })
                .collect(),
        )
    }

    fn same_run(&self, other: &Variant) -> bool {
        self.bins == other.bins && self.kappa == other.kappa && self.strides == other.strides
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub registration: Registration,
    /// Per-step deviation from the true warp, accumulated.
    pub report: DeformationReport,
}

impl VariantResult {
    pub fn final_mse(&self) -> f64 {
        self.report.mse.unwrap_or(f64::NAN)
    }
}

/// Registers the case under each variant. Variants with identical schedules
/// share one run.
pub fn run_variants(
    case: &SynthWarpCase,
    variants: &[Variant],
    opts: &RegisterOptions,
) -> Result<Vec<VariantResult>> {
    let mut out: Vec<VariantResult> = Vec::new();
    for v in variants {
        if let Some(done) = out.iter().find(|r| r.variant.same_run(v)) {
            let mut copy = done.clone();
            copy.variant = v.clone();
            out.push(copy);
            continue;
        }
        let reg = register(&case.moving, &case.target, &v.schedule()?, opts, Some(&case.warp))?;
        let report = step_reports(&reg.ffd, &case.warp, case.moving.dims())?;
        out.push(VariantResult { variant: v.clone(), registration: reg, report });
    }
    Ok(out)
}

/// Runs one sweep on the seeded case.
pub fn run_sweep(kind: SweepKind, setup: &SynthWarpSetup, seed: u64, opts: &RegisterOptions) -> Result<Vec<VariantResult>> {
    let case = synthwarp_case(setup, seed)?;
    run_variants(&case, &kind.variants(), opts)
}

/// `seed,variant,step,delta,bins,kappa,stride,mse,mean_curl,mean_abs_div,nmi,wall_ms`,
/// one row per step plus an `all` row with the accumulated fields.
pub fn sweep_csv(seed: u64, results: &[VariantResult]) -> String {
    let mut s = String::from("seed,variant,step,delta,bins,kappa,stride,mse,mean_curl,mean_abs_div,nmi,wall_ms\n");
    for r in results {
        let reg = &r.registration;
        for (st, m) in reg.steps.iter().zip(&r.report.steps) {
            let _ = writeln!(
                s,
                "{seed},{},{},{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                r.variant.label,
                st.step,
                st.delta,
                st.bins,
                st.kappa,
                r.variant.strides[st.step - 1],
                st.mse.unwrap_or(f64::NAN),
                m.mean_curl,
                m.mean_abs_div,
                st.final_nmi,
                st.wall_ms
            );
        }
        let _ = writeln!(
            s,
            "{seed},{},all,,,,,{:.9e},{:.9e},{:.9e},{:.9e},{}",
            r.variant.label,
            r.final_mse(),
            r.report.mean_curl(),
            r.report.mean_abs_div(),
            reg.final_nmi().unwrap_or(f64::NAN),
            reg.wall_ms()
        );
    }
    s
}
