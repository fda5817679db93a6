//! Regularized NMI objective of one multiresolution step and its analytic gradient.
//!
//! A sample is a pair `(x, ν_m)` of a voxel center and a direction of the
//! shared set. The moving value is
//! `a = Σ_y K_σ(φ(x) − y) Σ_n Γ̄_κ(ν_n, ψ(x, ν_m)) I(y, ν_n)`,
//! the target value `b` is the same expression for `J` at the identity.
//! `K_σ` is a separable truncated Gaussian, normalized over the lattice so
//! constant images stay constant; `σ = 0` falls back to trilinear weights.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::{d_nmi_with_table, IntensityMap, JointDensity, Window};
use crate::error::{LordError, Result};
use crate::ffd::{BasisEntry, BasisMatrix, ControlGrid, HierarchicalFFD, PsiJacobian};
use crate::regularizer::{penalty_gradient_of, penalty_of, NeighborStencil};
use crate::sphere::{check_kappa, DirectionSet};
use crate::volume::SpatioDirectionalImage;
use crate::{Mat3, Vec3};

/// Largest supported spatial scale, in voxels.
pub const MAX_SIGMA: f64 = 5.0;
const MAX_TAPS: usize = 32;

/// Sparse `1×3k` row: one 3-vector per active control point.
pub type SparseRow = Vec<(usize, Vec3)>;

/// Expands a sparse row to the interleaved `3k` layout.
pub fn dense_row(row: &[(usize, Vec3)], n_points: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * n_points];
    for (idx, v) in row {
        for d in 0..3 {
            out[3 * idx + d] += v[d];
        }
    }
    out
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=MAX_SIGMA).contains(&sigma) {
        return Err(LordError::invalid(format!("spatial scale must lie in [0, {MAX_SIGMA}], got {sigma}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTaps {
    first: isize,
    len: usize,
    w: [f64; MAX_TAPS],
    dw: [f64; MAX_TAPS],
}

/// 1-D lattice weights at `p` and their derivatives in `p`.
pub(crate) fn axis_taps(p: f64, sigma: f64) -> AxisTaps {
    let mut t = AxisTaps { first: 0, len: 0, w: [0.0; MAX_TAPS], dw: [0.0; MAX_TAPS] };
    if sigma == 0.0 {
        let f = p.floor();
        let u = p - f;
        t.first = f as isize;
        t.len = 2;
        t.w[0] = 1.0 - u;
        t.w[1] = u;
        t.dw[0] = -1.0;
        t.dw[1] = 1.0;
        return t;
    }
    let r = (3.0 * sigma).ceil();
    let s2 = sigma * sigma;
    let e_r = (-r * r / (2.0 * s2)).exp();
    let first = (p - r).floor() as isize + 1;
    let last = (p + r).ceil() as isize - 1;
    let mut sum = 0.0;
    let mut dsum = 0.0;
    for (l, y) in (first..=last).enumerate() {
        let d = p - y as f64;
        let g = (-d * d / (2.0 * s2)).exp();
        // C¹ truncation: value and slope vanish at |d| = r
        let k = (g - e_r * (1.0 + (r * r - d * d) / (2.0 * s2))).max(0.0);
        let dk = if d.abs() < r { -(d / s2) * (g - e_r) } else { 0.0 };
        t.w[l] = k;
        t.dw[l] = dk;
        sum += k;
        dsum += dk;
    }
    t.first = first;
    t.len = (last - first + 1) as usize;
    for l in 0..t.len {
        let k = t.w[l];
        t.w[l] = k / sum;
        t.dw[l] = (t.dw[l] * sum - k * dsum) / (sum * sum);
    }
    t
}

/// Spatial kernel `K_σ(p − y)` and its gradient in `p`.
pub fn spatial_kernel(p: &Vec3, y: [isize; 3], sigma: f64) -> Result<(f64, Vec3)> {
    check_sigma(sigma)?;
    let mut w = [0.0; 3];
    let mut dw = [0.0; 3];
    for a in 0..3 {
        let t = axis_taps(p[a], sigma);
        let l = y[a] - t.first;
        if l >= 0 && (l as usize) < t.len {
            w[a] = t.w[l as usize];
            dw[a] = t.dw[l as usize];
        }
    }
    Ok((w[0] * w[1] * w[2], Vec3::new(dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2])))
}

/// `∂K_σ(φ(x) − y)/∂vec(c)` given the basis of `x` at the active level.
pub fn jac_spatial_kernel(phi_x: &Vec3, y: [isize; 3], sigma: f64, basis: &BasisMatrix) -> Result<SparseRow> {
    if sigma == 0.0 {
        return Err(LordError::invalid("spatial kernel derivative needs sigma > 0"));
    }
    let (_, g) = spatial_kernel(phi_x, y, sigma)?;
    Ok(basis.entries.iter().map(|e| (e.index, g * e.weight)).collect())
}

/// Spatially smoothed channels at `p` and, optionally, their gradients.
pub(crate) fn smooth_channels(img: &SpatioDirectionalImage, p: &Vec3, sigma: f64, s: &mut [f64], g: Option<&mut [Vec3]>) {
    let [nx, ny, nz] = img.dims().map(|d| d as isize);
    let nd = img.n_dirs();
    let data = img.data();
    let tx = axis_taps(p.x, sigma);
    let ty = axis_taps(p.y, sigma);
    let tz = axis_taps(p.z, sigma);
    s.iter_mut().for_each(|v| *v = 0.0);
    let mut g = g;
    if let Some(g) = g.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = Vec3::zeros());
    }
    for c in 0..tz.len {
        let iz = tz.first + c as isize;
        if iz < 0 || iz >= nz || tz.w[c] == 0.0 && tz.dw[c] == 0.0 {
            continue;
        }
        for b in 0..ty.len {
            let iy = ty.first + b as isize;
            if iy < 0 || iy >= ny || ty.w[b] == 0.0 && ty.dw[b] == 0.0 {
                continue;
            }
            for a in 0..tx.len {
                let ix = tx.first + a as isize;
                if ix < 0 || ix >= nx || tx.w[a] == 0.0 && tx.dw[a] == 0.0 {
                    continue;
                }
                let base = (ix + nx * (iy + ny * iz)) as usize * nd;
                let vox = &data[base..base + nd];
                let w = tx.w[a] * ty.w[b] * tz.w[c];
                for (sv, &iv) in s.iter_mut().zip(vox) {
                    *sv += w * iv;
                }
                if let Some(g) = g.as_deref_mut() {
                    let gw = Vec3::new(
                        tx.dw[a] * ty.w[b] * tz.w[c],
                        tx.w[a] * ty.dw[b] * tz.w[c],
                        tx.w[a] * ty.w[b] * tz.dw[c],
                    );
                    for (gv, &iv) in g.iter_mut().zip(vox) {
                        *gv += gw * iv;
                    }
                }
            }
        }
    }
}

/// Watson weights `Γ̄_κ(ν_n, ψ)` with the dot products `ν_n·ψ`.
pub(crate) fn watson_into(nu: &[Vec3], kappa: f64, psi: &Vec3, dots: &mut [f64], w: &mut [f64]) {
    let mut max = 0.0f64;
    for (d, n) in dots.iter_mut().zip(nu) {
        *d = n.dot(psi);
        max = max.max(*d * *d);
    }
    let mut sum = 0.0;
    for (wv, &d) in w.iter_mut().zip(dots.iter()) {
        *wv = (kappa * (d * d - max)).exp();
        sum += *wv;
    }
    w.iter_mut().for_each(|v| *v /= sum);
}

/// `I_σκ(p, ψ)`.
pub fn smoothed_intensity(img: &SpatioDirectionalImage, p: &Vec3, psi: &Vec3, sigma: f64, kappa: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_kappa(kappa)?;
    let n = img.n_dirs();
    let mut s = vec![0.0; n];
    smooth_channels(img, p, sigma, &mut s, None);
    let mut dots = vec![0.0; n];
    let mut w = vec![0.0; n];
    watson_into(img.dirs().as_slice(), kappa, psi, &mut dots, &mut w);
    Ok(s.iter().zip(&w).map(|(a, b)| a * b).sum())
}

/// `∂Γ̄_κ(ν_n, ψ)/∂ψ = 2κ Γ̄_n ((ν_n·ψ)ν_n − Σ_i Γ̄_i (ν_i·ψ)ν_i)`.
pub fn watson_psi_gradient(n: usize, psi: &Vec3, dirs: &DirectionSet, kappa: f64) -> Vec3 {
    let nu = dirs.as_slice();
    let mut dots = vec![0.0; nu.len()];
    let mut w = vec![0.0; nu.len()];
    watson_into(nu, kappa, psi, &mut dots, &mut w);
    let q: Vec3 = nu.iter().zip(dots.iter().zip(&w)).map(|(v, (d, g))| v * (d * g)).sum();
    (nu[n] * dots[n] - q) * (2.0 * kappa * w[n])
}

/// `∂Γ̄_κ(ν_n, ψ_c)/∂vec(c)` through the reorientation Jacobian.
pub fn jac_watson_row(n: usize, dirs: &DirectionSet, kappa: f64, jac_psi: &PsiJacobian) -> SparseRow {
    let g = watson_psi_gradient(n, &jac_psi.psi, dirs, kappa);
    jac_psi.blocks.iter().map(|(idx, b)| (*idx, b.transpose() * g)).collect()
}

/// `∂I_σκ(φ_c(x), ψ_c(x, v))/∂vec(c^level)`.
pub fn jac_smoothed_intensity(
    x: &Vec3,
    v: &Vec3,
    ffd: &HierarchicalFFD,
    level: usize,
    img: &SpatioDirectionalImage,
    sigma: f64,
    kappa: f64,
) -> Result<SparseRow> {
    check_sigma(sigma)?;
    check_kappa(kappa)?;
    let jp = ffd.jac_psi(level, x, v)?;
    let p = ffd.deform(x);
    let n = img.n_dirs();
    let mut s = vec![0.0; n];
    let mut g = vec![Vec3::zeros(); n];
    smooth_channels(img, &p, sigma, &mut s, Some(&mut g));
    let nu = img.dirs().as_slice();
    let mut dots = vec![0.0; n];
    let mut w = vec![0.0; n];
    watson_into(nu, kappa, &jp.psi, &mut dots, &mut w);
    let (gbar, h) = sample_terms(nu, kappa, &s, &g, &dots, &w).1;
    let basis = ffd.level(level).basis_matrix(x);
    let mut row: SparseRow = basis.entries.iter().map(|e| (e.index, gbar * e.weight)).collect();
    for ((idx, b), r) in jp.blocks.iter().zip(row.iter_mut()) {
        debug_assert_eq!(*idx, r.0);
        r.1 += b.transpose() * h;
    }
    Ok(row)
}

/// Sample value `a`, the spatial term `Σ_n Γ̄_n ∇S_n` and `∂a/∂ψ`.
#[inline]
fn sample_terms(nu: &[Vec3], kappa: f64, s: &[f64], g: &[Vec3], dots: &[f64], w: &[f64]) -> (f64, (Vec3, Vec3)) {
    let mut a = 0.0;
    let mut gbar = Vec3::zeros();
    let mut q = Vec3::zeros();
    let mut r = Vec3::zeros();
    for i in 0..nu.len() {
        let wi = w[i];
        a += wi * s[i];
        gbar += g[i] * wi;
        if kappa != 0.0 {
            let c = wi * dots[i];
            q += nu[i] * c;
            r += nu[i] * (c * s[i]);
        }
    }
    let h = if kappa != 0.0 { (r - q * a) * (2.0 * kappa) } else { Vec3::zeros() };
    (a, (gbar, h))
}

/// Scales of one multiresolution step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub bins: usize,
    pub beta: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// Voxel step between samples along the longest axis.
    pub stride: usize,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings { bins: 20, beta: 1.0, kappa: 15.0, sigma: 0.6, lambda: 1e-4, stride: 1 }
    }
}

/// Per-axis sample strides: `stride` along the longest axis, proportionally fewer elsewhere.
pub fn axis_strides(dims: [usize; 3], stride: usize) -> [usize; 3] {
    let nmax = *dims.iter().max().unwrap_or(&1) as f64;
    dims.map(|d| ((stride as f64 * d as f64 / nmax).round() as usize).max(1))
}

#[derive(Clone, Debug)]
struct SampleVoxel {
    x: Vec3,
    base_disp: Vec3,
    base_jac: Mat3,
    support: Vec<BasisEntry>,
}

/// One objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `NMI + S`.
    pub objective: f64,
    pub nmi: f64,
    pub penalty: f64,
    /// Interleaved `3k` gradient of the objective; empty when not requested.
    pub gradient: Vec<f64>,
    /// Samples clamped into the intensity range.
    pub clamped: usize,
}

/// Objective of one step: coarser levels frozen, one active grid free.
#[derive(Debug)]
pub struct StepObjective<'a> {
    moving: &'a SpatioDirectionalImage,
    settings: ObjectiveSettings,
    map: IntensityMap,
    voxels: Vec<SampleVoxel>,
    target: Vec<f64>,
    target_windows: Vec<Window>,
    template: ControlGrid,
    stencil: NeighborStencil,
}

impl<'a> StepObjective<'a> {
    /// `base` holds the frozen coarser levels; `active` fixes the free grid's layout.
    pub fn new(
        moving: &'a SpatioDirectionalImage,
        target: &SpatioDirectionalImage,
        base: &HierarchicalFFD,
        active: &ControlGrid,
        settings: ObjectiveSettings,
    ) -> Result<Self> {
        moving.compatible_with(target)?;
        check_sigma(settings.sigma)?;
        check_kappa(settings.kappa)?;
        if settings.stride == 0 {
            return Err(LordError::invalid("spatial stride must be at least 1"));
        }
        if !(settings.lambda >= 0.0) {
            return Err(LordError::invalid(format!("lambda must be nonnegative, got {}", settings.lambda)));
        }
        let dims = moving.dims();
        let st = axis_strides(dims, settings.stride);
        let mut voxels = Vec::new();
        for z in (0..dims[2]).step_by(st[2]) {
            for y in (0..dims[1]).step_by(st[1]) {
                for x in (0..dims[0]).step_by(st[0]) {
                    let p = Vec3::new(x as f64, y as f64, z as f64);
                    voxels.push(SampleVoxel {
                        x: p,
                        base_disp: base.displacement(&p),
                        base_jac: base.spatial_jacobian(&p) - Mat3::identity(),
                        support: active.basis_matrix(&p).entries,
                    });
                }
            }
        }
        let nu = moving.dirs().as_slice().to_vec();
        let kappa = settings.kappa;
        let sigma = settings.sigma;
        let identity_values = |img: &SpatioDirectionalImage| -> Vec<f64> {
            let n = nu.len();
            voxels
                .par_iter()
                .map_init(
                    || (vec![0.0; n], vec![0.0; n], vec![0.0; n]),
                    |(s, dots, w), vx| {
                        smooth_channels(img, &vx.x, sigma, s, None);
                        nu.iter()
                            .map(|v| {
                                watson_into(&nu, kappa, v, dots, w);
                                s.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>()
                            })
                            .collect::<Vec<f64>>()
                    },
                )
                .flatten()
                .collect()
        };
        let target_values = identity_values(target);
        let moving_values = identity_values(moving);
        let map = IntensityMap::fitted(
            target_values.iter().chain(moving_values.iter()).copied(),
            settings.bins,
            settings.beta,
        )?;
        let target_windows = target_values.iter().map(|&b| map.window(b)).collect();
        let mut template = active.clone();
        template.coeffs_mut().iter_mut().for_each(|c| *c = Vec3::zeros());
        Ok(StepObjective {
            moving,
            settings,
            map,
            voxels,
            target: target_values,
            target_windows,
            stencil: NeighborStencil::for_grid(&template),
            template,
        })
    }

    pub fn settings(&self) -> &ObjectiveSettings {
        &self.settings
    }

    pub fn intensity_map(&self) -> &IntensityMap {
        &self.map
    }

    pub fn n_params(&self) -> usize {
        3 * self.template.n_points()
    }

    pub fn n_samples(&self) -> usize {
        self.target.len()
    }

    pub fn target_values(&self) -> &[f64] {
        &self.target
    }

    /// Active grid carrying the parameter vector `c`.
    pub fn grid_for(&self, c: &[f64]) -> Result<ControlGrid> {
        let mut g = self.template.clone();
        g.set_from_vec(c)?;
        Ok(g)
    }

    fn check_params(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.n_params() {
            return Err(LordError::DimensionMismatch(format!(
                "parameter vector has {} entries, objective needs {}",
                c.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    /// Per-sample moving values and, with `terms`, the two gradient factors.
    fn samples(&self, c: &[f64], terms: bool) -> Result<(Vec<f64>, Vec<(Vec3, Vec3)>)> {
        self.check_params(c)?;
        let n = self.moving.n_dirs();
        let nu = self.moving.dirs().as_slice();
        let kappa = self.settings.kappa;
        let sigma = self.settings.sigma;
        let mut values = vec![0.0; self.voxels.len() * n];
        let mut extra = if terms { vec![(Vec3::zeros(), Vec3::zeros()); self.voxels.len() * n] } else { Vec::new() };
        let scratch = || (vec![0.0; n], vec![Vec3::zeros(); n], vec![0.0; n], vec![0.0; n]);
        let work = |(s, g, dots, w): &mut (Vec<f64>, Vec<Vec3>, Vec<f64>, Vec<f64>),
                    vx: &SampleVoxel,
                    vals: &mut [f64],
                    ext: Option<&mut [(Vec3, Vec3)]>|
         -> Result<()> {
            let mut disp = vx.base_disp;
            let mut jac = Mat3::identity() + vx.base_jac;
            for e in &vx.support {
                let i = 3 * e.index;
                let ck = Vec3::new(c[i], c[i + 1], c[i + 2]);
                disp += ck * e.weight;
                jac += ck * e.grad.transpose();
            }
            let p = vx.x + disp;
            smooth_channels(self.moving, &p, sigma, s, terms.then_some(&mut g[..]));
            let mut ext = ext;
            for m in 0..n {
                let big_v = jac * nu[m];
                let norm = big_v.norm();
                if !(norm >= 1e-12) {
                    return Err(LordError::SingularJacobian { norm });
                }
                let psi = big_v / norm;
                watson_into(nu, kappa, &psi, dots, w);
                let (a, (gbar, h)) = sample_terms(nu, kappa, s, g, dots, w);
                vals[m] = a;
                if let Some(ext) = ext.as_deref_mut() {
                    let hp = (h - psi * psi.dot(&h)) / norm;
                    ext[m] = (gbar, hp);
                }
            }
            Ok(())
        };
        if terms {
            values
                .par_chunks_mut(n)
                .zip(extra.par_chunks_mut(n))
                .zip(self.voxels.par_iter())
                .try_for_each_init(scratch, |sc, ((vals, ext), vx)| work(sc, vx, vals, Some(ext)))?;
        } else {
            values
                .par_chunks_mut(n)
                .zip(self.voxels.par_iter())
                .try_for_each_init(scratch, |sc, (vals, vx)| work(sc, vx, vals, None))?;
        }
        Ok((values, extra))
    }

    /// Moving-image samples under the active coefficients `c`.
    pub fn warped_values(&self, c: &[f64]) -> Result<Vec<f64>> {
        Ok(self.samples(c, false)?.0)
    }

    /// Joint density of warped moving and target samples.
    pub fn density(&self, c: &[f64]) -> Result<JointDensity> {
        let values = self.warped_values(c)?;
        let wa: Vec<Window> = values.par_iter().map(|&a| self.map.window(a)).collect();
        JointDensity::from_windows(self.map.bins(), wa.iter().zip(&self.target_windows))
    }

    /// `NMI + S` and, with `with_gradient`, its gradient.
    pub fn evaluate(&self, c: &[f64], with_gradient: bool) -> Result<Evaluation> {
        let (values, extra) = self.samples(c, with_gradient)?;
        let wa: Vec<Window> = values.par_iter().map(|&a| self.map.window(a)).collect();
        let jd = JointDensity::from_windows(self.map.bins(), wa.iter().zip(&self.target_windows))?;
        let nmi = jd.nmi()?;
        let grid = self.grid_for(c)?;
        let lambda = self.settings.lambda;
        let penalty = penalty_of(&self.stencil, grid.coeffs(), lambda);
        let objective = nmi + penalty;
        if !objective.is_finite() {
            return Err(LordError::Domain(format!("objective is not finite ({objective})")));
        }
        let mut gradient = Vec::new();
        if with_gradient {
            let table = jd.nmi_sensitivity()?;
            let n = self.moving.n_dirs();
            let nu = self.moving.dirs().as_slice();
            let bins = self.map.bins();
            let total = jd.total();
            let per_voxel: Vec<(Vec3, Mat3)> = (0..self.voxels.len())
                .into_par_iter()
                .map(|v| {
                    let mut gx = Vec3::zeros();
                    let mut mx = Mat3::zeros();
                    for m in 0..n {
                        let s = v * n + m;
                        let da = d_nmi_with_table(&table, bins, total, &wa[s], &self.target_windows[s]);
                        if da == 0.0 {
                            continue;
                        }
                        let (gbar, hp) = extra[s];
                        gx += gbar * da;
                        mx += (hp * da) * nu[m].transpose();
                    }
                    (gx, mx)
                })
                .collect();
            gradient = penalty_gradient_of(&self.stencil, grid.coeffs(), lambda);
            for (vx, (gx, mx)) in self.voxels.iter().zip(&per_voxel) {
                for e in &vx.support {
                    let r = gx * e.weight + mx * e.grad;
                    let i = 3 * e.index;
                    gradient[i] += r.x;
                    gradient[i + 1] += r.y;
                    gradient[i + 2] += r.z;
                }
            }
        }
        Ok(Evaluation { objective, nmi, penalty, gradient, clamped: jd.clamped })
    }
}

/// Direction-averaged (mean diffusivity) copy of an image, as a one-direction image.
pub fn direction_averaged(img: &SpatioDirectionalImage) -> Result<SpatioDirectionalImage> {
    img.mean_over_directions().to_image()
}

/// Largest relative error between the analytic gradient and central differences
/// of the objective at the given coordinates.
pub fn gradient_check(obj: &StepObjective<'_>, c: &[f64], coords: &[usize], h: f64, abs_floor: f64) -> Result<f64> {
    let analytic = obj.evaluate(c, true)?.gradient;
    let mut worst: f64 = 0.0;
    let mut cp = c.to_vec();
    for &i in coords {
        cp[i] = c[i] + h;
        let fp = obj.evaluate(&cp, false)?.objective;
        cp[i] = c[i] - h;
        let fm = obj.evaluate(&cp, false)?.objective;
        cp[i] = c[i];
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(abs_floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference check on a seeded random problem: 8³ voxels, 12
/// directions, one 4³ control grid at random coefficients, 16 bins, step
/// 1e-3 (smaller steps are dominated by roundoff on small entries). Returns
/// the largest relative error over `n_coords` random coordinates.
pub fn gradient_oracle(seed: u64, kappa: f64, n_coords: usize) -> Result<f64> {
    let dims = [8, 8, 8];
    let dirs = Arc::new(DirectionSet::generate(12, 0)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product::<usize>() * dirs.len();
    let moving = SpatioDirectionalImage::new(dims, dirs.clone(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let target = SpatioDirectionalImage::new(dims, dirs, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let grid = ControlGrid::for_domain(dims, 8.0, 1)?;
    let settings = ObjectiveSettings { bins: 16, kappa, ..Default::default() };
    let obj = StepObjective::new(&moving, &target, &HierarchicalFFD::identity(), &grid, settings)?;
    let c: Vec<f64> = (0..obj.n_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let coords: Vec<usize> = (0..n_coords).map(|_| rng.gen_range(0..obj.n_params())).collect();
    gradient_check(&obj, &c, &coords, 1e-3, 1e-7)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_image(dims: [usize; 3], n: usize, seed: u64) -> SpatioDirectionalImage {
        let dirs = Arc::new(DirectionSet::generate(n, 0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product::<usize>() * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        SpatioDirectionalImage::new(dims, dirs, data).unwrap()
    }

    fn random_ffd(dims: [usize; 3], amp: f64, seed: u64) -> HierarchicalFFD {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g1 = ControlGrid::for_domain(dims, 4.0, 1).unwrap();
        let mut g2 = ControlGrid::for_domain(dims, 3.0, 2).unwrap();
        for g in [&mut g1, &mut g2] {
            for c in g.coeffs_mut() {
                *c = Vec3::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp));
            }
        }
        HierarchicalFFD::from_grids(vec![g1, g2]).unwrap()
    }

    #[test]
    fn taps_are_a_partition_of_unity() {
        for sigma in [0.0, 0.3, 0.6, 1.0, 2.2] {
            for p in [0.0, 0.25, 3.5, -1.7, 7.999] {
                let t = axis_taps(p, sigma);
                let s: f64 = t.w[..t.len].iter().sum();
                let ds: f64 = t.dw[..t.len].iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
                assert!(ds.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn taps_derivative_matches_differences() {
        let h = 1e-6;
        for sigma in [0.6, 1.3] {
            for p in [0.3, 2.71, -0.45] {
                let t = axis_taps(p, sigma);
                let tp = axis_taps(p + h, sigma);
                let tm = axis_taps(p - h, sigma);
                for l in 0..t.len {
                    let y = t.first + l as isize;
                    let at = |u: &AxisTaps| {
                        let k = y - u.first;
                        if k >= 0 && (k as usize) < u.len { u.w[k as usize] } else { 0.0 }
                    };
                    let fd = (at(&tp) - at(&tm)) / (2.0 * h);
                    assert!((t.dw[l] - fd).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn kernel_gradient_vanishes_on_lattice_points() {
        let (_, g) = spatial_kernel(&Vec3::new(2.0, 3.0, 1.0), [2, 3, 1], 0.6).unwrap();
        assert!(g.norm() < 1e-15);
        let basis = ControlGrid::for_domain([6, 6, 6], 3.0, 1).unwrap().basis_matrix(&Vec3::new(2.0, 3.0, 1.0));
        let row = jac_spatial_kernel(&Vec3::new(2.0, 3.0, 1.0), [2, 3, 1], 0.6, &basis).unwrap();
        assert!(row.iter().all(|(_, v)| v.norm() < 1e-15));
        assert!(jac_spatial_kernel(&Vec3::zeros(), [0, 0, 0], 0.0, &basis).is_err());
    }

    #[test]
    fn kernel_profile_tracks_the_gaussian_slope() {
        // along one axis, away from truncation, the unnormalized slope is the Gaussian one
        let sigma = 1.5;
        let r = (3.0 * sigma as f64).ceil();
        let e_r = (-r * r / (2.0 * sigma * sigma)).exp();
        let d = 0.8;
        let g = (-d * d / (2.0 * sigma * sigma)).exp();
        let slope = -(d / (sigma * sigma)) * (g - e_r);
        let gauss = -(d / (sigma * sigma)) * g;
        assert!((slope - gauss).abs() <= e_r);
    }

    #[test]
    fn jac_spatial_kernel_matches_differences() {
        let dims = [8, 8, 8];
        let ffd = random_ffd(dims, 0.5, 3);
        let x = Vec3::new(3.3, 4.1, 2.6);
        let level = 1;
        let basis = ffd.level(level).basis_matrix(&x);
        let y = [4, 4, 3];
        let row = dense_row(&jac_spatial_kernel(&ffd.deform(&x), y, 0.6, &basis).unwrap(), ffd.level(level).n_points());
        let base = ffd.level(level).to_vec();
        let h = 1e-6;
        for e in basis.entries.iter().step_by(5) {
            for d in 0..3 {
                let i = 3 * e.index + d;
                let mut f = ffd.clone();
                let mut v = base.clone();
                v[i] += h;
                f.level_mut(level).set_from_vec(&v).unwrap();
                let kp = spatial_kernel(&f.deform(&x), y, 0.6).unwrap().0;
                v[i] -= 2.0 * h;
                f.level_mut(level).set_from_vec(&v).unwrap();
                let km = spatial_kernel(&f.deform(&x), y, 0.6).unwrap().0;
                assert!((row[i] - (kp - km) / (2.0 * h)).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn watson_row_cases() {
        let dirs = DirectionSet::generate(12, 0).unwrap();
        let dims = [8, 8, 8];
        let ffd = random_ffd(dims, 0.4, 5);
        let x = Vec3::new(3.1, 2.2, 4.4);
        let v = Vec3::new(0.2, -0.5, 0.8).normalize();
        let jp = ffd.jac_psi(1, &x, &v).unwrap();
        assert!(jac_watson_row(3, &dirs, 0.0, &jp).iter().all(|(_, r)| r.norm() == 0.0));

        let kappa = 15.0;
        let n = 4;
        let row = dense_row(&jac_watson_row(n, &dirs, kappa, &jp), ffd.level(1).n_points());
        let weight = |f: &HierarchicalFFD| {
            let psi = f.reorient(&x, &v).unwrap();
            crate::sphere::watson_weights(&dirs, kappa, &psi).unwrap()[n]
        };
        let base = ffd.level(1).to_vec();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (idx, _) in jp.blocks.iter().step_by(3) {
            for d in 0..3 {
                let i = 3 * idx + d;
                let mut f = ffd.clone();
                let mut vv = base.clone();
                vv[i] += h;
                f.level_mut(1).set_from_vec(&vv).unwrap();
                let wp = weight(&f);
                vv[i] -= 2.0 * h;
                f.level_mut(1).set_from_vec(&vv).unwrap();
                let wm = weight(&f);
                worst = worst.max((row[i] - (wp - wm) / (2.0 * h)).abs());
            }
        }
        assert!(worst <= 1e-6, "{worst}");

        // antipodal invariance in the direction
        let g1 = watson_psi_gradient(n, &jp.psi, &dirs, kappa);
        let flipped = DirectionSet::new(dirs.iter().map(|d| -d).collect()).unwrap();
        let g2 = watson_psi_gradient(n, &jp.psi, &flipped, kappa);
        assert!((g1 - g2).norm() < 1e-14);
    }

    #[test]
    fn omitting_the_own_direction_term_is_wrong() {
        // the derivative needs the ν_n term alongside the Σ_{i≠n} sum
        let dirs = DirectionSet::generate(12, 0).unwrap();
        let psi = Vec3::new(0.3, 0.1, 0.9).normalize();
        let kappa = 5.0;
        let n = 2;
        let nu = dirs.as_slice();
        let f: Vec<f64> = nu.iter().map(|v| (kappa * v.dot(&psi).powi(2)).exp()).collect();
        let total: f64 = f.iter().sum();
        let gamma = f[n] / total;
        let mut partial = Mat3::zeros();
        for i in 0..nu.len() {
            if i != n {
                partial += nu[i] * nu[i].transpose() * f[i];
            }
        }
        let truncated = -(partial.transpose() * psi) * (2.0 * kappa * gamma / total);
        let exact = watson_psi_gradient(n, &psi, &dirs, kappa);
        let h = 1e-6;
        let mut fd = Vec3::zeros();
        for d in 0..3 {
            let mut e = Vec3::zeros();
            e[d] = h;
            let w = |q: Vec3| {
                let g: Vec<f64> = nu.iter().map(|v| (kappa * v.dot(&q).powi(2)).exp()).collect();
                g[n] / g.iter().sum::<f64>()
            };
            fd[d] = (w(psi + e) - w(psi - e)) / (2.0 * h);
        }
        assert!((exact - fd).norm() < 1e-7);
        assert!((truncated - fd).norm() > 1e-3);
    }

    #[test]
    fn smoothed_intensity_jacobian_matches_differences() {
        let dims = [6, 6, 6];
        let img = random_image(dims, 12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (kappa, sigma) in [(15.0, 0.6), (0.0, 0.6), (5.0, 1.0)] {
            let ffd = random_ffd(dims, 0.3, 9);
            let level = 1;
            let x = Vec3::new(2.4, 2.9, 3.2);
            let v = *img.dirs().get(5);
            let row = dense_row(
                &jac_smoothed_intensity(&x, &v, &ffd, level, &img, sigma, kappa).unwrap(),
                ffd.level(level).n_points(),
            );
            let value = |f: &HierarchicalFFD| {
                let psi = f.reorient(&x, &v).unwrap();
                smoothed_intensity(&img, &f.deform(&x), &psi, sigma, kappa).unwrap()
            };
            let base = ffd.level(level).to_vec();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let i = rng.gen_range(0..base.len());
                let mut f = ffd.clone();
                let mut vv = base.clone();
                vv[i] += h;
                f.level_mut(level).set_from_vec(&vv).unwrap();
                let fp = value(&f);
                vv[i] -= 2.0 * h;
                f.level_mut(level).set_from_vec(&vv).unwrap();
                let fm = value(&f);
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((row[i] - fd).abs() / row[i].abs().max(fd.abs()).max(1e-5));
            }
            assert!(worst <= 1e-5, "kappa {kappa}: {worst}");
        }
    }

    #[test]
    fn constant_image_has_no_intensity_gradient() {
        let dims = [6, 6, 6];
        let dirs = Arc::new(DirectionSet::generate(12, 0).unwrap());
        let img = SpatioDirectionalImage::new(dims, dirs.clone(), vec![0.7; 216 * 12]).unwrap();
        let ffd = HierarchicalFFD::from_grids(vec![ControlGrid::for_domain(dims, 3.0, 1).unwrap()]).unwrap();
        let row = jac_smoothed_intensity(&Vec3::new(2.5, 2.5, 2.5), dirs.get(0), &ffd, 0, &img, 0.6, 15.0).unwrap();
        assert!(row.iter().all(|(_, r)| r.norm() < 1e-14));
        let v = smoothed_intensity(&img, &Vec3::new(2.5, 2.2, 2.9), dirs.get(3), 0.6, 15.0).unwrap();
        assert!((v - 0.7).abs() < 1e-14);
    }

    fn objective_fd(kappa: f64, bins: usize, sigma: f64, seed: u64) -> f64 {
        let dims = [8, 8, 8];
        let moving = random_image(dims, 12, seed);
        let target = random_image(dims, 12, seed + 100);
        let grid = ControlGrid::for_domain(dims, 4.0, 1).unwrap();
        let settings = ObjectiveSettings { bins, beta: 1.0, kappa, sigma, lambda: 1e-4, stride: 1 };
        let obj = StepObjective::new(&moving, &target, &HierarchicalFFD::identity(), &grid, settings).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..obj.n_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..obj.n_params())).collect();
        gradient_check(&obj, &c, &coords, 1e-3, 1e-7).unwrap()
    }

    #[test]
    fn objective_gradient_matches_differences() {
        for (kappa, bins) in [(0.0, 16), (5.0, 32), (15.0, 16)] {
            let err = objective_fd(kappa, bins, 0.6, 3);
            assert!(err <= 1e-4, "kappa {kappa} bins {bins}: {err}");
        }
    }

    #[test]
    fn zero_kappa_matches_direction_averaged_registration() {
        let dims = [7, 6, 5];
        let moving = random_image(dims, 10, 11);
        let target = random_image(dims, 10, 12);
        let mm = direction_averaged(&moving).unwrap();
        let tm = direction_averaged(&target).unwrap();
        let grid = ControlGrid::for_domain(dims, 3.0, 1).unwrap();
        let settings = ObjectiveSettings { bins: 16, kappa: 0.0, ..Default::default() };
        let full = StepObjective::new(&moving, &target, &HierarchicalFFD::identity(), &grid, settings).unwrap();
        let scalar = StepObjective::new(&mm, &tm, &HierarchicalFFD::identity(), &grid, settings).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c: Vec<f64> = (0..full.n_params()).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let a = full.evaluate(&c, true).unwrap();
        let b = scalar.evaluate(&c, true).unwrap();
        assert!((a.nmi - b.nmi).abs() < 1e-12);
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn self_alignment_is_stationary() {
        let dims = [6, 6, 6];
        let img = random_image(dims, 12, 5);
        let grid = ControlGrid::for_domain(dims, 3.0, 1).unwrap();
        let obj = StepObjective::new(&img, &img, &HierarchicalFFD::identity(), &grid, ObjectiveSettings::default()).unwrap();
        let e = obj.evaluate(&vec![0.0; obj.n_params()], true).unwrap();
        let inf = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let c: Vec<f64> = (0..obj.n_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let off = obj.evaluate(&c, true).unwrap();
            assert!(off.nmi < e.nmi);
            assert!(inf(&e.gradient) < 0.1 * inf(&off.gradient), "{} vs {}", inf(&e.gradient), inf(&off.gradient));
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let dims = [6, 5, 5];
        let moving = random_image(dims, 8, 21);
        let target = random_image(dims, 8, 22);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let dirs: Vec<Vec3> = perm.iter().map(|&p| *moving.dirs().get(p)).collect();
        let pd = Arc::new(DirectionSet::new(dirs).unwrap());
        let permute = |img: &SpatioDirectionalImage| {
            let data: Vec<f64> = img.data().chunks(8).flat_map(|v| perm.iter().map(move |&p| v[p])).collect();
            SpatioDirectionalImage::new(dims, pd.clone(), data).unwrap()
        };
        let (pm, pt) = (permute(&moving), permute(&target));
        let grid = ControlGrid::for_domain(dims, 3.0, 1).unwrap();
        let s = ObjectiveSettings { bins: 16, ..Default::default() };
        let a = StepObjective::new(&moving, &target, &HierarchicalFFD::identity(), &grid, s).unwrap();
        let b = StepObjective::new(&pm, &pt, &HierarchicalFFD::identity(), &grid, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c: Vec<f64> = (0..a.n_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let ea = a.evaluate(&c, true).unwrap();
        let eb = b.evaluate(&c, true).unwrap();
        assert!((ea.objective - eb.objective).abs() < 1e-12);
        for (x, y) in ea.gradient.iter().zip(&eb.gradient) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_levels_enter_values_and_gradient() {
        let dims = [8, 8, 8];
        let moving = random_image(dims, 12, 31);
        let target = random_image(dims, 12, 32);
        let full = random_ffd(dims, 0.3, 33);
        let base = HierarchicalFFD::from_grids(vec![full.level(0).clone()]).unwrap();
        let active = full.level(1).clone();
        let settings = ObjectiveSettings { bins: 16, kappa: 5.0, ..Default::default() };
        let obj = StepObjective::new(&moving, &target, &base, &active, settings).unwrap();
        let c = active.to_vec();
        let vals = obj.warped_values(&c).unwrap();
        let x = Vec3::new(3.0, 5.0, 2.0);
        let m = 7;
        let v = moving.dirs().get(m);
        let psi = full.reorient(&x, v).unwrap();
        let direct = smoothed_intensity(&moving, &full.deform(&x), &psi, 0.6, 5.0).unwrap();
        let s = (3 + 8 * (5 + 8 * 2)) * 12 + m;
        assert!((vals[s] - direct).abs() < 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<usize> = (0..8).map(|_| rng.gen_range(0..obj.n_params())).collect();
        assert!(gradient_check(&obj, &c, &coords, 1e-5, 1e-7).unwrap() <= 1e-4);
    }

    #[test]
    fn strides_scale_with_axis_length() {
        assert_eq!(axis_strides([20, 20, 3], 2), [2, 2, 1]);
        assert_eq!(axis_strides([16, 48, 24], 4), [1, 4, 2]);
        assert_eq!(axis_strides([8, 8, 8], 1), [1, 1, 1]);
    }
}
