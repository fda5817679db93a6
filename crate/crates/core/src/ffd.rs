//! Hierarchical cubic B-spline free-form deformations.
//!
//! Control point `(i, j, k)` of a grid with spacing `δ` sits at
//! `((i-1)δ, (j-1)δ, (k-1)δ)`, so the first control point lies one spacing
//! outside the domain and every voxel center has a full 4×4×4 support.
//! Control points outside the stored grid count as zero.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LordError, Result};
use crate::sphere::parse_vec3;
use crate::volume::{sample_weighted, CubicCoefficients, DirectionalKernel, SpatioDirectionalImage};
use crate::{Mat3, Vec3};

/// Smallest Jacobian determinant accepted by the diffeomorphism guard.
pub const DEFAULT_DET_FLOOR: f64 = 1e-3;

#[inline]
pub(crate) fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
pub(crate) fn bspline_derivatives(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let s = 1.0 - t;
    [-0.5 * s * s, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2]
}

/// One active control point of the spline at a given location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisEntry {
    /// Flat control-point index (`i + nx·(j + ny·k)`).
    pub index: usize,
    /// Tensor-product weight.
    pub weight: f64,
    /// Spatial gradient of the weight.
    pub grad: Vec3,
}

/// Sparse form of `B(x)`: row `d` of the 3×3k matrix holds `weight` at column
/// `3·index + d` for each entry, so the three rows are shifted copies of the
/// same scalar weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BasisMatrix {
    pub entries: Vec<BasisEntry>,
}

impl BasisMatrix {
    /// `B(x)·vec(c)`.
    pub fn apply(&self, coeffs: &[f64]) -> Vec3 {
        let mut out = Vec3::zeros();
        for e in &self.entries {
            let i = 3 * e.index;
            out += e.weight * Vec3::new(coeffs[i], coeffs[i + 1], coeffs[i + 2]);
        }
        out
    }

    /// `∂/∂x (B(x)·vec(c))`.
    pub fn apply_gradient(&self, coeffs: &[f64]) -> Mat3 {
        let mut out = Mat3::zeros();
        for e in &self.entries {
            let i = 3 * e.index;
            let c = Vec3::new(coeffs[i], coeffs[i + 1], coeffs[i + 2]);
            out += c * e.grad.transpose();
        }
        out
    }

    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }
}

/// One level of control points.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    level: usize,
    size: [usize; 3],
    spacing: f64,
    coeffs: Vec<Vec3>,
}

impl ControlGrid {
    pub fn new(level: usize, size: [usize; 3], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(LordError::invalid(format!("control spacing must be positive, got {spacing}")));
        }
        if size.iter().any(|&s| s == 0) {
            return Err(LordError::invalid("control grid size must be positive"));
        }
        let n = size.iter().product();
        Ok(ControlGrid { level, size, spacing, coeffs: vec![Vec3::zeros(); n] })
    }

    /// Smallest grid giving every point of `[0, dims-1]` full support.
    pub fn for_domain(dims: [usize; 3], spacing: f64, level: usize) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(LordError::invalid(format!("control spacing must be positive, got {spacing}")));
        }
        let size = dims.map(|d| ((d.max(1) - 1) as f64 / spacing).floor() as usize + 4);
        ControlGrid::new(level, size, spacing)
    }

    /// Grid whose displacement reproduces `x ↦ A(x - center) + center` exactly
    /// wherever the support is complete.
    pub fn from_linear_map(dims: [usize; 3], spacing: f64, level: usize, a: &Mat3, center: &Vec3) -> Result<Self> {
        let mut g = ControlGrid::for_domain(dims, spacing, level)?;
        let m = a - Mat3::identity();
        for k in 0..g.size[2] {
            for j in 0..g.size[1] {
                for i in 0..g.size[0] {
                    let p = g.point_position(i, j, k);
                    let idx = g.point_index(i, j, k);
                    g.coeffs[idx] = m * (p - center);
                }
            }
        }
        Ok(g)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn n_points(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[Vec3] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Vec3] {
        &mut self.coeffs
    }

    pub fn point_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.size[0] * (j + self.size[1] * k)
    }

    pub fn point_coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.size[0];
        let ny = self.size[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn point_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(i as f64 - 1.0, j as f64 - 1.0, k as f64 - 1.0) * self.spacing
    }

    /// `vec(c)`: x, y, z interleaved per control point.
    pub fn to_vec(&self) -> Vec<f64> {
        self.coeffs.iter().flat_map(|c| [c.x, c.y, c.z]).collect()
    }

    pub fn set_from_vec(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != 3 * self.coeffs.len() {
            return Err(LordError::DimensionMismatch(format!(
                "parameter vector has {} entries, grid needs {}",
                v.len(),
                3 * self.coeffs.len()
            )));
        }
        for (c, chunk) in self.coeffs.iter_mut().zip(v.chunks_exact(3)) {
            *c = Vec3::new(chunk[0], chunk[1], chunk[2]);
        }
        Ok(())
    }

    /// Active control points at `x` with their weights and weight gradients.
    pub fn basis_matrix(&self, x: &Vec3) -> BasisMatrix {
        let mut entries = Vec::with_capacity(64);
        self.for_each_support(x, |index, weight, grad| entries.push(BasisEntry { index, weight, grad }));
        BasisMatrix { entries }
    }

    pub(crate) fn for_each_support(&self, x: &Vec3, mut f: impl FnMut(usize, f64, Vec3)) {
        let p = [x.x, x.y, x.z];
        let mut base = [0isize; 3];
        let mut w = [[0.0; 4]; 3];
        let mut dw = [[0.0; 4]; 3];
        for a in 0..3 {
            let s = p[a] / self.spacing + 1.0;
            let f = s.floor();
            let t = s - f;
            base[a] = f as isize - 1;
            w[a] = bspline_weights(t);
            let d = bspline_derivatives(t);
            for l in 0..4 {
                dw[a][l] = d[l] / self.spacing;
            }
        }
        for n in 0..4 {
            let kk = base[2] + n as isize;
            if kk < 0 || kk >= self.size[2] as isize {
                continue;
            }
            for m in 0..4 {
                let jj = base[1] + m as isize;
                if jj < 0 || jj >= self.size[1] as isize {
                    continue;
                }
                for l in 0..4 {
                    let ii = base[0] + l as isize;
                    if ii < 0 || ii >= self.size[0] as isize {
                        continue;
                    }
                    let weight = w[0][l] * w[1][m] * w[2][n];
                    let grad = Vec3::new(
                        dw[0][l] * w[1][m] * w[2][n],
                        w[0][l] * dw[1][m] * w[2][n],
                        w[0][l] * w[1][m] * dw[2][n],
                    );
                    let idx = ii as usize + self.size[0] * (jj as usize + self.size[1] * kk as usize);
                    f(idx, weight, grad);
                }
            }
        }
    }

    /// Spline displacement at `x`.
    pub fn displacement(&self, x: &Vec3) -> Vec3 {
        let mut out = Vec3::zeros();
        self.for_each_support(x, |idx, w, _| out += w * self.coeffs[idx]);
        out
    }

    /// Spatial derivative of the displacement, `∂u_a/∂x_b`.
    pub fn displacement_jacobian(&self, x: &Vec3) -> Mat3 {
        let mut out = Mat3::zeros();
        self.for_each_support(x, |idx, _, g| out += self.coeffs[idx] * g.transpose());
        out
    }
}

/// `∂ψ/∂vec(c)` at one location: for each active control point, the 3×3 block
/// `(g_k·v)/|V| · π_{V⊥}` acting on that point's coefficient.
#[derive(Clone, Debug)]
pub struct PsiJacobian {
    pub psi: Vec3,
    pub v_norm: f64,
    pub blocks: Vec<(usize, Mat3)>,
}

impl PsiJacobian {
    /// Directional derivative of ψ along a parameter perturbation.
    pub fn apply(&self, delta: &[f64]) -> Vec3 {
        let mut out = Vec3::zeros();
        for (idx, b) in &self.blocks {
            let i = 3 * idx;
            out += b * Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
        }
        out
    }

    /// Row `ψᵀ·∂ψ/∂c` restricted to the active columns.
    pub fn psi_transpose_product(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|(_, b)| {
            let r = self.psi.transpose() * b;
            [r[0], r[1], r[2]]
        }).collect()
    }
}

/// Result of probing the deformation's Jacobian determinant.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffeoReport {
    pub pass: bool,
    pub min_det: f64,
    pub worst: Vec3,
}

/// Coarse-to-fine stack of control grids with `φ(x) = x + Σ_r B^r(x)c^r`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HierarchicalFFD {
    grids: Vec<ControlGrid>,
}

impl HierarchicalFFD {
    pub fn identity() -> Self {
        HierarchicalFFD { grids: Vec::new() }
    }

    pub fn from_grids(grids: Vec<ControlGrid>) -> Result<Self> {
        let mut f = HierarchicalFFD::identity();
        for g in grids {
            f.push_level(g)?;
        }
        Ok(f)
    }

    /// Appends a finer level; spacings must strictly decrease.
    pub fn push_level(&mut self, grid: ControlGrid) -> Result<()> {
        if let Some(last) = self.grids.last() {
            if !(grid.spacing < last.spacing) {
                return Err(LordError::invalid(format!(
                    "level spacing {} must be below the previous {}",
                    grid.spacing, last.spacing
                )));
            }
        }
        self.grids.push(grid);
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.grids.len()
    }

    pub fn levels(&self) -> &[ControlGrid] {
        &self.grids
    }

    pub fn level(&self, r: usize) -> &ControlGrid {
        &self.grids[r]
    }

    pub fn level_mut(&mut self, r: usize) -> &mut ControlGrid {
        &mut self.grids[r]
    }

    pub fn finest_spacing(&self) -> Option<f64> {
        self.grids.last().map(|g| g.spacing)
    }

    pub fn displacement(&self, x: &Vec3) -> Vec3 {
        self.grids.iter().map(|g| g.displacement(x)).sum()
    }

    pub fn deform(&self, x: &Vec3) -> Vec3 {
        x + self.displacement(x)
    }

    pub fn spatial_jacobian(&self, x: &Vec3) -> Mat3 {
        let mut j = Mat3::identity();
        for g in &self.grids {
            j += g.displacement_jacobian(x);
        }
        j
    }

    /// `ψ(x, v) = J v / |J v|`.
    pub fn reorient(&self, x: &Vec3, v: &Vec3) -> Result<Vec3> {
        reorient_with(&self.spatial_jacobian(x), v)
    }

    /// `∂ψ(x, v)/∂vec(c^level)`.
    pub fn jac_psi(&self, level: usize, x: &Vec3, v: &Vec3) -> Result<PsiJacobian> {
        let jac = self.spatial_jacobian(x);
        let big_v = jac * v;
        let norm = big_v.norm();
        if norm < 1e-12 {
            return Err(LordError::SingularJacobian { norm });
        }
        let psi = big_v / norm;
        let proj = Mat3::identity() - psi * psi.transpose();
        let mut blocks = Vec::with_capacity(64);
        self.grids[level].for_each_support(x, |idx, _, g| {
            blocks.push((idx, proj * (g.dot(v) / norm)));
        });
        Ok(PsiJacobian { psi, v_norm: norm, blocks })
    }

    /// Passes iff `det J > det_floor` at every probe.
    pub fn check_diffeomorphism(&self, probes: &[Vec3], det_floor: f64) -> DiffeoReport {
        let mut min_det = f64::INFINITY;
        let mut worst = Vec3::zeros();
        for p in probes {
            let d = self.spatial_jacobian(p).determinant();
            if d < min_det || d.is_nan() {
                min_det = d;
                worst = *p;
            }
        }
        DiffeoReport { pass: min_det > det_floor, min_det, worst }
    }

    /// Voxel centers plus the in-domain cell centers of the finest grid.
    pub fn dense_probes(&self, dims: [usize; 3]) -> Vec<Vec3> {
        dense_probes(dims, self.finest_spacing())
    }

    /// Solves `φ(x) = y` by Newton's method started at `y`.
    pub fn invert(&self, y: &Vec3) -> Option<Vec3> {
        let mut x = *y;
        for _ in 0..100 {
            let r = self.deform(&x) - y;
            if r.norm() < 1e-11 {
                return Some(x);
            }
            let step = self.spatial_jacobian(&x).lu().solve(&r)?;
            let mut t = 1.0;
            let mut next = x - step;
            while (self.deform(&next) - y).norm() > r.norm() && t > 1e-4 {
                t *= 0.5;
                next = x - step * t;
            }
            x = next;
        }
        ((self.deform(&x) - y).norm() < 1e-8).then_some(x)
    }

    /// `FFD1 R`, then per level `LEVEL r nx ny nz delta` and one `dx dy dz` line per control point.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "FFD1 {}", self.grids.len());
        for (r, g) in self.grids.iter().enumerate() {
            let _ = writeln!(s, "LEVEL {} {} {} {} {}", r + 1, g.size[0], g.size[1], g.size[2], g.spacing);
            for c in &g.coeffs {
                let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", c.x, c.y, c.z);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LordError::format("empty FFD file"))?;
        let r: usize = header
            .strip_prefix("FFD1 ")
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| LordError::format(format!("bad FFD header `{header}`")))?;
        let mut ffd = HierarchicalFFD::identity();
        for expected in 1..=r {
            let line = lines.next().ok_or_else(|| LordError::format("missing LEVEL line"))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 || parts[0] != "LEVEL" {
                return Err(LordError::format(format!("bad LEVEL line `{line}`")));
            }
            let bad = || LordError::format(format!("bad LEVEL line `{line}`"));
            let level: usize = parts[1].parse().map_err(|_| bad())?;
            if level != expected {
                return Err(LordError::format(format!("expected level {expected}, found {level}")));
            }
            let size = [
                parts[2].parse().map_err(|_| bad())?,
                parts[3].parse().map_err(|_| bad())?,
                parts[4].parse().map_err(|_| bad())?,
            ];
            let spacing: f64 = parts[5].parse().map_err(|_| bad())?;
            let mut g = ControlGrid::new(level, size, spacing).map_err(|e| LordError::format(e.to_string()))?;
            for c in g.coeffs.iter_mut() {
                let l = lines.next().ok_or_else(|| LordError::format("truncated FFD coefficients"))?;
                *c = parse_vec3(l)?;
            }
            ffd.push_level(g).map_err(|e| LordError::format(e.to_string()))?;
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(LordError::format("trailing content after FFD levels"));
        }
        Ok(ffd)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(LordError::io_at(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        HierarchicalFFD::from_text(&std::fs::read_to_string(path).map_err(LordError::io_at(path))?)
    }
}

pub(crate) fn reorient_with(jac: &Mat3, v: &Vec3) -> Result<Vec3> {
    let w = jac * v;
    let n = w.norm();
    if n < 1e-12 {
        return Err(LordError::SingularJacobian { norm: n });
    }
    Ok(w / n)
}

/// Pulls `img` back through `ffd`: the output at `(x, v)` is the input read at
/// `(φ(x), ψ(x, v))`, so directional structure is reoriented along with the
/// voxels. `cubic` switches the spatial interpolation to cubic B-splines.
pub fn warp_image(
    img: &SpatioDirectionalImage,
    ffd: &HierarchicalFFD,
    kernel: DirectionalKernel,
    cubic: bool,
) -> Result<SpatioDirectionalImage> {
    if let DirectionalKernel::Watson(k) = kernel {
        crate::sphere::check_kappa(k)?;
    }
    let dims = img.dims();
    let dirs = img.dirs().clone();
    let n = dirs.len();
    let spline = cubic.then(|| CubicCoefficients::new(img));
    let mut data = Vec::with_capacity(img.n_voxels() * n);
    let mut w = vec![0.0; n];
    for v in 0..img.n_voxels() {
        let [x, y, z] = img.voxel_coords(v);
        let p = Vec3::new(x as f64, y as f64, z as f64);
        let q = ffd.deform(&p);
        let jac = ffd.spatial_jacobian(&p);
        for d in dirs.iter() {
            let psi = reorient_with(&jac, d)?;
            kernel.weights(&dirs, &psi, &mut w);
            let val = match &spline {
                Some(c) => c.sample_weighted(&q, &w),
                None => sample_weighted(img, &q, &w),
            };
            data.push(val.max(0.0));
        }
    }
    SpatioDirectionalImage::new(dims, dirs, data)
}

/// Voxel centers plus the cell centers of a grid of the given spacing that fall in the domain.
pub fn dense_probes(dims: [usize; 3], finest_spacing: Option<f64>) -> Vec<Vec3> {
    let mut probes = Vec::with_capacity(dims.iter().product::<usize>() * 2);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                probes.push(Vec3::new(x as f64, y as f64, z as f64));
            }
        }
    }
    if let Some(d) = finest_spacing {
        let centers = |n: usize| -> Vec<f64> {
            let hi = (n.max(1) - 1) as f64;
            (0..)
                .map(|i| (i as f64 - 0.5) * d)
                .skip_while(|c| *c < 0.0)
                .take_while(|c| *c <= hi)
                .collect()
        };
        let (cx, cy, cz) = (centers(dims[0]), centers(dims[1]), centers(dims[2]));
        for z in &cz {
            for y in &cy {
                for x in &cx {
                    probes.push(Vec3::new(*x, *y, *z));
                }
            }
        }
    }
    probes
}
