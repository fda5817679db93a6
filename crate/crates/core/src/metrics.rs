//! Ground-truth evaluation of deformations: coordinate MSE, curl, divergence
//! arc-length distortion and fiber-direction error.

use std::fmt::Write as _;

use crate::error::{LordError, Result};
use crate::ffd::HierarchicalFFD;
use crate::sphere::{line_angle, principal_fiber, DEFAULT_FRT_BAND};
use crate::volume::{ScalarVolume, SpatioDirectionalImage};
use crate::Vec3;

/// A point map of voxel space.
pub trait Deformation {
    fn apply(&self, x: &Vec3) -> Vec3;
}

impl Deformation for HierarchicalFFD {
    fn apply(&self, x: &Vec3) -> Vec3 {
        self.deform(x)
    }
}

/// The identity map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Deformation for Identity {
    fn apply(&self, x: &Vec3) -> Vec3 {
        *x
    }
}

impl<F: Fn(&Vec3) -> Vec3> Deformation for F {
    fn apply(&self, x: &Vec3) -> Vec3 {
        self(x)
    }
}

/// Mean of `‖φ(x) − φ_ref(x)‖²` over the probes.
pub fn coordinate_mse(phi: &dyn Deformation, phi_ref: &dyn Deformation, probes: &[Vec3]) -> Result<f64> {
    if probes.is_empty() {
        return Err(LordError::invalid("coordinate MSE needs at least one probe"));
    }
    let s: f64 = probes.iter().map(|x| (phi.apply(x) - phi_ref.apply(x)).norm_squared()).sum();
    Ok(s / probes.len() as f64)
}

/// Mean of `‖W(φ(x)) − x‖²`: how far `φ` is from inverting the warp `W`.
pub fn composition_mse(phi: &dyn Deformation, warp: &dyn Deformation, probes: &[Vec3]) -> Result<f64> {
    coordinate_mse(&|x: &Vec3| warp.apply(&phi.apply(x)), &Identity, probes)
}

/// All voxel centers of a grid, x fastest.
pub fn voxel_centers(dims: [usize; 3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(Vec3::new(x as f64, y as f64, z as f64));
            }
        }
    }
    out
}

/// Displacement `φ(x) − x` at every voxel center.
pub fn displacement_field(phi: &dyn Deformation, dims: [usize; 3]) -> Vec<Vec3> {
    voxel_centers(dims).iter().map(|x| phi.apply(x) - x).collect()
}

/// Pointwise `‖∇×u‖` and signed `∇·u` of a voxel field (central differences
/// inside, one-sided on the boundary).
pub fn curl_divergence(u: &[Vec3], dims: [usize; 3]) -> Result<(ScalarVolume, ScalarVolume)> {
    if dims.iter().any(|&d| d < 3) {
        return Err(LordError::invalid(format!("curl/divergence need at least 3 voxels per axis, got {dims:?}")));
    }
    if u.len() != dims.iter().product::<usize>() {
        return Err(LordError::DimensionMismatch(format!("field has {} vectors for dims {dims:?}", u.len())));
    }
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let mut curl = ScalarVolume::zeros(dims);
    let mut div = ScalarVolume::zeros(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = [x, y, z];
                // d[a] = ∂u/∂x_a
                let mut d = [Vec3::zeros(); 3];
                for a in 0..3 {
                    let (mut lo, mut hi) = (c, c);
                    if c[a] > 0 {
                        lo[a] -= 1;
                    }
                    if c[a] + 1 < dims[a] {
                        hi[a] += 1;
                    }
                    let h = (hi[a] - lo[a]) as f64;
                    d[a] = (u[idx(hi[0], hi[1], hi[2])] - u[idx(lo[0], lo[1], lo[2])]) / h;
                }
                let rot = Vec3::new(d[1].z - d[2].y, d[2].x - d[0].z, d[0].y - d[1].x);
                let i = idx(x, y, z);
                curl.data[i] = rot.norm();
                div.data[i] = d[0].x + d[1].y + d[2].z;
            }
        }
    }
    Ok((curl, div))
}

/// Summary of one or more multiresolution steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationReport {
    /// Coordinate MSE of the final map against ground truth, if known.
    pub mse: Option<f64>,
    pub curl: ScalarVolume,
    /// Absolute divergence.
    pub abs_div: ScalarVolume,
    pub steps: Vec<StepMetrics>,
}

/// Per-step summary values (interior means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub mse: Option<f64>,
    pub mean_curl: f64,
    pub mean_abs_div: f64,
}

impl DeformationReport {
    /// Report of one displacement field.
    pub fn from_field(u: &[Vec3], dims: [usize; 3], mse: Option<f64>) -> Result<Self> {
        let (curl, div) = curl_divergence(u, dims)?;
        let abs_div = ScalarVolume::new(dims, div.data.iter().map(|v| v.abs()).collect())?;
        let step = StepMetrics { mse, mean_curl: curl.interior_mean(), mean_abs_div: abs_div.interior_mean() };
        Ok(DeformationReport { mse, curl, abs_div, steps: vec![step] })
    }

    pub fn mean_curl(&self) -> f64 {
        self.curl.interior_mean()
    }

    pub fn mean_abs_div(&self) -> f64 {
        self.abs_div.interior_mean()
    }

    /// `step,mse,mean_curl,mean_abs_div` per step plus a `total` row.
    pub fn to_csv(&self) -> String {
        let fmt = |m: Option<f64>| m.map_or_else(String::new, |v| format!("{v:e}"));
        let mut s = String::from("step,mse,mean_curl,mean_abs_div\n");
        for (i, st) in self.steps.iter().enumerate() {
            let _ = writeln!(s, "{},{},{:e},{:e}", i + 1, fmt(st.mse), st.mean_curl, st.mean_abs_div);
        }
        let _ = writeln!(s, "total,{},{:e},{:e}", fmt(self.mse), self.mean_curl(), self.mean_abs_div());
        s
    }
}

/// Voxelwise sums of per-step curl and |div|; the MSE is the last step's.
pub fn accumulate(reports: &[DeformationReport]) -> Result<DeformationReport> {
    let first = reports.first().ok_or_else(|| LordError::invalid("nothing to accumulate"))?;
    let dims = first.curl.dims;
    let mut curl = ScalarVolume::zeros(dims);
    let mut abs_div = ScalarVolume::zeros(dims);
    let mut steps = Vec::new();
    for r in reports {
        if r.curl.dims != dims {
            return Err(LordError::invalid(format!("report dims {:?} differ from {dims:?}", r.curl.dims)));
        }
        for (a, b) in curl.data.iter_mut().zip(&r.curl.data) {
            *a += b;
        }
        for (a, b) in abs_div.data.iter_mut().zip(&r.abs_div.data) {
            *a += b;
        }
        steps.extend_from_slice(&r.steps);
    }
    Ok(DeformationReport { mse: reports.last().and_then(|r| r.mse), curl, abs_div, steps })
}

/// Per-step reports of a hierarchical FFD against a reference map. After step
/// `r` the map is `x + u₁(x) + … + u_r(x)`; each step contributes the curl,
/// |div| and MSE of its deviation from the reference, accumulated voxelwise.
/// With the identity as reference this is the cumulative displacement.
pub fn step_reports(ffd: &HierarchicalFFD, reference: &dyn Deformation, dims: [usize; 3]) -> Result<DeformationReport> {
    let centers = voxel_centers(dims);
    let mut u = vec![Vec3::zeros(); centers.len()];
    let mut reports = Vec::new();
    let step = |u: &[Vec3]| -> Result<DeformationReport> {
        let e: Vec<Vec3> = centers.iter().zip(u).map(|(x, d)| x + d - reference.apply(x)).collect();
        let mse = e.iter().map(|v| v.norm_squared()).sum::<f64>() / e.len() as f64;
        DeformationReport::from_field(&e, dims, Some(mse))
    };
    for g in ffd.levels() {
        for (d, x) in u.iter_mut().zip(&centers) {
            *d += g.displacement(x);
        }
        reports.push(step(&u)?);
    }
    if reports.is_empty() {
        reports.push(step(&u)?);
    }
    accumulate(&reports)
}

/// Length of a polyline.
pub fn polyline_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Relative length change `L(φ⁻¹(P))/L(P) − 1` of a polyline `P` given in
/// moving-image coordinates, where `φ` maps target to moving space.
pub fn length_distortion(ffd: &HierarchicalFFD, polyline: &[Vec3]) -> Result<f64> {
    let original = polyline_length(polyline);
    if original <= 0.0 {
        return Err(LordError::invalid("polyline has zero length"));
    }
    let mapped: Vec<Vec3> = polyline
        .iter()
        .map(|p| ffd.invert(p).ok_or_else(|| LordError::Domain(format!("cannot invert the map at {p:?}"))))
        .collect::<Result<_>>()?;
    Ok(polyline_length(&mapped) / original - 1.0)
}

/// Angle in degrees between the principal FRT fibers of `a` and `b` at each
/// listed voxel. Voxels where either side has no peak are skipped.
pub fn peak_angle_errors(a: &SpatioDirectionalImage, b: &SpatioDirectionalImage, voxels: &[[usize; 3]]) -> Result<Vec<f64>> {
    a.compatible_with(b)?;
    let dirs = a.dirs();
    let mut out = Vec::with_capacity(voxels.len());
    for &[x, y, z] in voxels {
        let v = a.voxel_index(x, y, z);
        let pa = principal_fiber(a.voxel(v), dirs, DEFAULT_FRT_BAND)?;
        let pb = principal_fiber(b.voxel(v), dirs, DEFAULT_FRT_BAND)?;
        if let (Some(pa), Some(pb)) = (pa, pb) {
            out.push(line_angle(&pa, &pb).to_degrees());
        }
    }
    Ok(out)
}
