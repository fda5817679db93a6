//! L-BFGS maximization with a strong Wolfe line search, the diffeomorphism
//! guard, and the coarse-to-fine registration driver.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LordError, Result};
use crate::ffd::{dense_probes, BasisEntry, ControlGrid, DiffeoReport, HierarchicalFFD, DEFAULT_DET_FLOOR};
use crate::gradient::{ObjectiveSettings, StepObjective};
use crate::metrics::{coordinate_mse, voxel_centers, Deformation};
use crate::volume::{subsample_directions, DirectionalKernel, SpatioDirectionalImage};
use crate::{Mat3, Vec3};

/// Maximum consecutive guard rejections before a line search stalls.
pub const MAX_REJECTIONS: usize = 20;

/// One multiresolution step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    /// Control-point spacing in voxels.
    pub delta: f64,
    pub bins: usize,
    pub kappa: f64,
    #[serde(default = "one")]
    pub spatial_stride: usize,
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn one() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-6
}

/// Ordered steps with decreasing spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub steps: Vec<ScheduleStep>,
}

impl Schedule {
    pub fn new(steps: Vec<ScheduleStep>) -> Result<Self> {
        let s = Schedule { steps };
        s.validate()?;
        Ok(s)
    }

    /// One step per spacing, sharing the other settings.
    pub fn uniform(deltas: &[f64], bins: usize, kappa: f64, max_iters: usize, tol: f64) -> Result<Self> {
        Schedule::new(
            deltas
                .iter()
                .map(|&delta| ScheduleStep { delta, bins, kappa, spatial_stride: 1, max_iters, tol })
                .collect(),
        )
    }

    /// Four steps at spacings 4, 3.5, 3, 2 with 20 bins, ten iterations on the
    /// early steps and ninety on the last.
    pub fn phantom(kappa: f64) -> Result<Self> {
        let mut s = Schedule::uniform(&[4.0, 3.5, 3.0, 2.0], 20, kappa, 10, 1e-6)?;
        s.steps[3].max_iters = 90;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(LordError::Config("schedule has no steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if !(s.delta > 0.0) {
                return Err(LordError::Config(format!("step {}: spacing must be positive", i + 1)));
            }
            if s.bins < 5 {
                return Err(LordError::Config(format!("step {}: need at least 5 bins", i + 1)));
            }
            if !(s.kappa >= 0.0) || !s.kappa.is_finite() {
                return Err(LordError::Config(format!("step {}: kappa must be finite and nonnegative", i + 1)));
            }
            if s.spatial_stride == 0 {
                return Err(LordError::Config(format!("step {}: spatial stride must be at least 1", i + 1)));
            }
            if !(s.tol >= 0.0) {
                return Err(LordError::Config(format!("step {}: tolerance must be nonnegative", i + 1)));
            }
            if i > 0 {
                let p = &self.steps[i - 1];
                if !(s.delta < p.delta) {
                    return Err(LordError::Config(format!("step {}: spacing must decrease", i + 1)));
                }
                if s.bins < p.bins {
                    return Err(LordError::Config(format!("step {}: bins must not decrease", i + 1)));
                }
                if s.spatial_stride > p.spatial_stride {
                    return Err(LordError::Config(format!("step {}: spatial stride must not increase", i + 1)));
                }
            }
        }
        Ok(())
    }
}

/// L-BFGS settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub depth: usize,
    pub max_iters: usize,
    /// Stop when the gradient's infinity norm falls to this value.
    pub tol: f64,
    /// Largest coordinate change of the first trial step.
    pub initial_step: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { depth: 10, max_iters: 100, tol: 1e-6, initial_step: 0.5, c1: 1e-4, c2: 0.9, max_line_evals: 30 }
    }
}

/// Why the optimizer stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
    Stalled,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::LineSearchFailed => "line_search_failed",
            Termination::Stalled => "stalled",
        }
    }
}

/// Function to maximize.
pub trait Problem {
    /// Value and gradient.
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Whether a trial point may be evaluated at all.
    fn feasible(&mut self, _x: &[f64]) -> bool {
        true
    }

    /// Called at the start point (iteration 0) and after every accepted step.
    fn accepted(&mut self, _iteration: usize, _x: &[f64], _value: f64, _grad: &[f64], _evals: usize) {}
}

/// Adapter turning a closure into a [`Problem`].
pub struct FnProblem<F>(pub F);

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Problem for FnProblem<F> {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.0)(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_inf: f64,
    pub evals: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evals: usize,
    pub termination: Termination,
    pub trace: Vec<IterationRecord>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

#[derive(Clone)]
struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

enum Search {
    Found(Trial),
    /// No Wolfe point; best strictly decreasing trial if any.
    Failed(Option<Trial>),
    Stalled(Option<Trial>),
}

/// Minimizes `f = −M` along `d` from `x`.
struct LineSearch<'a, P: Problem> {
    problem: &'a mut P,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dphi0: f64,
    opts: &'a LbfgsOptions,
    evals: usize,
    rejections: usize,
    best: Option<Trial>,
}

impl<'a, P: Problem> LineSearch<'a, P> {
    /// `None` when the guard or the objective rejects the point.
    fn eval(&mut self, alpha: f64) -> Option<Trial> {
        let xt = axpy(self.x, alpha, self.d);
        if !self.problem.feasible(&xt) {
            self.rejections += 1;
            return None;
        }
        self.evals += 1;
        match self.problem.evaluate(&xt) {
            Ok((m, g)) if m.is_finite() && g.iter().all(|v| v.is_finite()) => {
                self.rejections = 0;
                let g: Vec<f64> = g.iter().map(|v| -v).collect();
                let t = Trial { alpha, f: -m, dphi: dot(&g, self.d), g };
                if t.f < self.f0 && self.best.as_ref().is_none_or(|b| t.f < b.f) {
                    self.best = Some(t.clone());
                }
                Some(t)
            }
            _ => {
                self.rejections += 1;
                None
            }
        }
    }

    fn sufficient(&self, t: &Trial) -> bool {
        t.f <= self.f0 + self.opts.c1 * t.alpha * self.dphi0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.dphi.abs() <= -self.opts.c2 * self.dphi0
    }

    fn run(mut self, alpha0: f64) -> (Search, usize) {
        let mut prev = Trial { alpha: 0.0, f: self.f0, g: Vec::new(), dphi: self.dphi0 };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.opts.max_line_evals {
            let Some(t) = self.eval(alpha) else {
                if self.rejections >= MAX_REJECTIONS {
                    let best = self.best.take();
                    let n = self.evals;
                    return (Search::Stalled(best), n);
                }
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                continue;
            };
            if !self.sufficient(&t) || (!first && t.f >= prev.f) {
                return self.zoom(prev, t);
            }
            if self.curvature(&t) {
                let n = self.evals;
                return (Search::Found(t), n);
            }
            if t.dphi >= 0.0 {
                return self.zoom(t, prev);
            }
            first = false;
            alpha = 2.0 * t.alpha;
            prev = t;
        }
        let best = self.best.take();
        let n = self.evals;
        (Search::Failed(best), n)
    }

    fn zoom(mut self, mut lo: Trial, mut hi: Trial) -> (Search, usize) {
        while self.evals < self.opts.max_line_evals {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= 1e-14 * b.max(1.0) {
                break;
            }
            let mut alpha = cubic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
            alpha = alpha.clamp(a + 0.1 * width, b - 0.1 * width);
            let Some(t) = self.eval(alpha) else {
                if self.rejections >= MAX_REJECTIONS {
                    let best = self.best.take();
                    let n = self.evals;
                    return (Search::Stalled(best), n);
                }
                // treat an infeasible point as overshooting
                hi = Trial { alpha, f: f64::INFINITY, g: Vec::new(), dphi: f64::NAN };
                continue;
            };
            if !self.sufficient(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature(&t) {
                    let n = self.evals;
                    return (Search::Found(t), n);
                }
                if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        let best = self.best.take();
        let n = self.evals;
        (Search::Failed(best), n)
    }
}

/// Minimizer of the cubic through two trials (value and slope at each).
fn cubic_min(p: &Trial, q: &Trial) -> Option<f64> {
    if !p.f.is_finite() || !q.f.is_finite() || !p.dphi.is_finite() || !q.dphi.is_finite() {
        return None;
    }
    let (a0, a1) = (p.alpha, q.alpha);
    let d1 = p.dphi + q.dphi - 3.0 * (p.f - q.f) / (a0 - a1);
    let disc = d1 * d1 - p.dphi * q.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (a1 - a0).signum() * disc.sqrt();
    let denom = q.dphi - p.dphi + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let a = a1 - (a1 - a0) * (q.dphi + d2 - d1) / denom;
    a.is_finite().then_some(a)
}

/// Maximizes a [`Problem`] with limited-memory BFGS.
pub fn lbfgs_maximize<P: Problem>(problem: &mut P, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsOutcome> {
    let (m0, g0) = problem.evaluate(x0).map_err(|_| LordError::InvalidStart)?;
    if !m0.is_finite() || g0.iter().any(|v| !v.is_finite()) || g0.len() != x0.len() {
        return Err(LordError::InvalidStart);
    }
    let mut x = x0.to_vec();
    let mut f = -m0;
    let mut g: Vec<f64> = g0.iter().map(|v| -v).collect();
    let mut evals = 1usize;
    let mut trace = vec![IterationRecord { iteration: 0, value: m0, grad_inf: inf_norm(&g), evals }];
    problem.accepted(0, &x, m0, &g0, evals);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    for iter in 1..=opts.max_iters {
        if inf_norm(&g) <= opts.tol {
            termination = Termination::Converged;
            break;
        }
        let mut d = two_loop(&g, &history);
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
        }
        let alpha0 = if history.is_empty() { (opts.initial_step / inf_norm(&d)).min(1.0 / 1e-12) } else { 1.0 };
        let ls = LineSearch {
            problem: &mut *problem,
            x: &x,
            d: &d,
            f0: f,
            dphi0,
            opts,
            evals: 0,
            rejections: 0,
            best: None,
        };
        let (result, n) = ls.run(alpha0);
        evals += n;
        let (trial, stop) = match result {
            Search::Found(t) => (Some(t), None),
            Search::Failed(t) => (t, Some(Termination::LineSearchFailed)),
            Search::Stalled(t) => (t, Some(Termination::Stalled)),
        };
        if let Some(t) = trial {
            let x_new = axpy(&x, t.alpha, &d);
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if history.len() == opts.depth.max(1) {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            x = x_new;
            f = t.f;
            g = t.g;
            iterations = iter;
            let gm: Vec<f64> = g.iter().map(|v| -v).collect();
            trace.push(IterationRecord { iteration: iter, value: -f, grad_inf: inf_norm(&g), evals });
            problem.accepted(iter, &x, -f, &gm, evals);
        }
        if let Some(s) = stop {
            termination = s;
            break;
        }
    }
    if termination == Termination::MaxIterations && inf_norm(&g) <= opts.tol {
        termination = Termination::Converged;
    }
    Ok(LbfgsOutcome {
        x,
        value: -f,
        gradient: g.iter().map(|v| -v).collect(),
        iterations,
        evals,
        termination,
        trace,
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Orientation-preservation check of `base + active(c)` at fixed probes.
#[derive(Clone, Debug)]
pub struct DiffeoGuard {
    probes: Vec<Vec3>,
    base_jac: Vec<Mat3>,
    support: Vec<Vec<BasisEntry>>,
    det_floor: f64,
}

/// Result of [`DiffeoGuard::guarded_step`].
#[derive(Clone, Debug, PartialEq)]
pub enum GuardOutcome {
    Accepted { alpha: f64, c: Vec<f64> },
    Stalled,
}

impl DiffeoGuard {
    pub fn new(base: &HierarchicalFFD, active: &ControlGrid, probes: Vec<Vec3>, det_floor: f64) -> Self {
        let base_jac = probes.iter().map(|p| base.spatial_jacobian(p) - Mat3::identity()).collect();
        let support = probes.iter().map(|p| active.basis_matrix(p).entries).collect();
        DiffeoGuard { probes, base_jac, support, det_floor }
    }

    /// Guard on the voxel centers and finest cell centers of `dims`.
    pub fn for_domain(base: &HierarchicalFFD, active: &ControlGrid, dims: [usize; 3], det_floor: f64) -> Self {
        DiffeoGuard::new(base, active, dense_probes(dims, Some(active.spacing())), det_floor)
    }

    pub fn check(&self, c: &[f64]) -> DiffeoReport {
        let mut min_det = f64::INFINITY;
        let mut worst = Vec3::zeros();
        for ((p, bj), sup) in self.probes.iter().zip(&self.base_jac).zip(&self.support) {
            let mut j = Mat3::identity() + bj;
            for e in sup {
                let i = 3 * e.index;
                j += Vec3::new(c[i], c[i + 1], c[i + 2]) * e.grad.transpose();
            }
            let d = j.determinant();
            if d < min_det || d.is_nan() {
                min_det = d;
                worst = *p;
            }
        }
        DiffeoReport { pass: min_det > self.det_floor, min_det, worst }
    }

    /// Halves `alpha` until `c + alpha·d` passes, at most [`MAX_REJECTIONS`] times.
    pub fn guarded_step(&self, c: &[f64], d: &[f64], alpha: f64) -> GuardOutcome {
        let mut a = alpha;
        for _ in 0..MAX_REJECTIONS {
            let cand = axpy(c, a, d);
            if self.check(&cand).pass {
                return GuardOutcome::Accepted { alpha: a, c: cand };
            }
            a *= 0.5;
        }
        GuardOutcome::Stalled
    }
}

/// Options of a full registration.
#[derive(Clone, Debug)]
pub struct RegisterOptions {
    pub sigma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub det_floor: f64,
    pub lbfgs_depth: usize,
    pub initial_step: f64,
    pub seed: u64,
    /// Subsample both images to this many directions first.
    pub directions: Option<usize>,
    /// Deterministic mode writes zero wall times so traces are reproducible.
    pub deterministic: bool,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            sigma: 0.6,
            lambda: 1e-4,
            beta: 1.0,
            det_floor: DEFAULT_DET_FLOOR,
            lbfgs_depth: 10,
            initial_step: 0.5,
            seed: 0,
            directions: None,
            deterministic: false,
        }
    }
}

/// One row of the optimizer trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub iteration: usize,
    pub objective: f64,
    pub nmi: f64,
    pub penalty: f64,
    pub grad_inf_norm: f64,
    pub evals: usize,
    pub wall_ms: u64,
}

/// Summary of one multiresolution step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub delta: f64,
    pub bins: usize,
    pub kappa: f64,
    pub initial_nmi: f64,
    pub final_nmi: f64,
    pub iterations: usize,
    pub evals: usize,
    pub termination: Termination,
    pub min_det: f64,
    /// Coordinate error against the true map, when supplied.
    pub mse: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub ffd: HierarchicalFFD,
    pub steps: Vec<StepReport>,
    pub trace: Vec<TraceRow>,
}

impl Registration {
    pub fn initial_nmi(&self) -> Option<f64> {
        self.steps.first().map(|s| s.initial_nmi)
    }

    pub fn final_nmi(&self) -> Option<f64> {
        self.steps.last().map(|s| s.final_nmi)
    }

    /// Total wall time in milliseconds (zero in deterministic mode).
    pub fn wall_ms(&self) -> u64 {
        self.steps.iter().map(|s| s.wall_ms).sum()
    }

    /// `step,iteration,objective,nmi,penalty,grad_inf_norm,evals,wall_ms`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,iteration,objective,nmi,penalty,grad_inf_norm,evals,wall_ms\n");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
                r.step, r.iteration, r.objective, r.nmi, r.penalty, r.grad_inf_norm, r.evals, r.wall_ms
            );
        }
        s
    }
}

struct StepProblem<'o, 'a> {
    objective: &'o StepObjective<'a>,
    guard: &'o DiffeoGuard,
    step: usize,
    trace: Vec<TraceRow>,
    last: Option<(Vec<f64>, f64, f64)>,
    start: Instant,
    deterministic: bool,
}

impl Problem for StepProblem<'_, '_> {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = self.objective.evaluate(x, true)?;
        self.last = Some((x.to_vec(), e.nmi, e.penalty));
        Ok((e.objective, e.gradient))
    }

    fn feasible(&mut self, x: &[f64]) -> bool {
        self.guard.check(x).pass
    }

    fn accepted(&mut self, iteration: usize, x: &[f64], value: f64, grad: &[f64], evals: usize) {
        let (nmi, penalty) = match &self.last {
            Some((lx, n, p)) if lx.as_slice() == x => (*n, *p),
            _ => self.objective.evaluate(x, false).map(|e| (e.nmi, e.penalty)).unwrap_or((f64::NAN, f64::NAN)),
        };
        let wall_ms = if self.deterministic { 0 } else { self.start.elapsed().as_millis() as u64 };
        self.trace.push(TraceRow {
            step: self.step,
            iteration,
            objective: value,
            nmi,
            penalty,
            grad_inf_norm: inf_norm(grad),
            evals,
            wall_ms,
        });
    }
}

/// Coarse-to-fine registration of `moving` onto `target`: finds `φ` with
/// `moving(φ(x), ψ(x, v)) ≈ target(x, v)`. When the true map is given, each
/// step also records `mean ‖φ(x) − truth(x)‖²` over the voxel centers.
pub fn register(
    moving: &SpatioDirectionalImage,
    target: &SpatioDirectionalImage,
    schedule: &Schedule,
    opts: &RegisterOptions,
    truth: Option<&dyn Deformation>,
) -> Result<Registration> {
    schedule.validate()?;
    moving.compatible_with(target)?;
    let (mov_sub, tgt_sub);
    let (moving, target) = match opts.directions {
        Some(m) if m < moving.n_dirs() => {
            mov_sub = subsample_directions(moving, m, DirectionalKernel::Nearest)?;
            tgt_sub = subsample_directions(target, m, DirectionalKernel::Nearest)?;
            (&mov_sub, &tgt_sub)
        }
        _ => (moving, target),
    };
    let dims = moving.dims();
    let centers = voxel_centers(dims);
    let mut ffd = HierarchicalFFD::identity();
    let mut steps = Vec::new();
    let mut trace = Vec::new();
    for (r, st) in schedule.steps.iter().enumerate() {
        let start = Instant::now();
        let grid = ControlGrid::for_domain(dims, st.delta, r + 1)?;
        let settings = ObjectiveSettings {
            bins: st.bins,
            beta: opts.beta,
            kappa: st.kappa,
            sigma: opts.sigma,
            lambda: opts.lambda,
            stride: st.spatial_stride,
        };
        let objective = StepObjective::new(moving, target, &ffd, &grid, settings)?;
        let guard = DiffeoGuard::for_domain(&ffd, &grid, dims, opts.det_floor);
        let lopts = LbfgsOptions {
            depth: opts.lbfgs_depth,
            max_iters: st.max_iters,
            tol: st.tol,
            initial_step: opts.initial_step,
            ..Default::default()
        };
        let mut problem = StepProblem {
            objective: &objective,
            guard: &guard,
            step: r + 1,
            trace: Vec::new(),
            last: None,
            start,
            deterministic: opts.deterministic,
        };
        let x0 = vec![0.0; objective.n_params()];
        let outcome = lbfgs_maximize(&mut problem, &x0, &lopts)?;
        let initial_nmi = problem.trace.first().map_or(f64::NAN, |t| t.nmi);
        let final_nmi = problem.trace.last().map_or(f64::NAN, |t| t.nmi);
        trace.append(&mut problem.trace);
        let min_det = guard.check(&outcome.x).min_det;
        let mut level = grid;
        level.set_from_vec(&outcome.x)?;
        ffd.push_level(level)?;
        let mse = match truth {
            Some(w) => Some(coordinate_mse(&ffd, w, &centers)?),
            None => None,
        };
        steps.push(StepReport {
            step: r + 1,
            delta: st.delta,
            bins: st.bins,
            kappa: st.kappa,
            initial_nmi,
            final_nmi,
            iterations: outcome.iterations,
            evals: outcome.evals,
            termination: outcome.termination,
            min_det,
            mse,
            wall_ms: if opts.deterministic { 0 } else { start.elapsed().as_millis() as u64 },
        });
    }
    Ok(Registration { ffd, steps, trace })
}
