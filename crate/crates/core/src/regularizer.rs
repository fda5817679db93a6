//! Grid-uniformity penalty on control points.
//!
//! `S(c) = −(λ/2) Σ_i ‖c_i − mean_{j∈N(i)} c_j‖²` over 6-connected neighbours.

use crate::ffd::ControlGrid;
use crate::Vec3;

/// Default penalty weight.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// 6-connected neighbourhoods of a control grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborStencil {
    size: [usize; 3],
}

impl NeighborStencil {
    pub fn new(size: [usize; 3]) -> Self {
        NeighborStencil { size }
    }

    pub fn for_grid(grid: &ControlGrid) -> Self {
        NeighborStencil::new(grid.size())
    }

    pub fn len(&self) -> usize {
        self.size.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Neighbour indices of point `idx`, at most six.
    pub fn neighbors(&self, idx: usize) -> Vec<usize> {
        let [nx, ny, nz] = self.size;
        let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
        let mut out = Vec::with_capacity(6);
        if i > 0 {
            out.push(idx - 1);
        }
        if i + 1 < nx {
            out.push(idx + 1);
        }
        if j > 0 {
            out.push(idx - nx);
        }
        if j + 1 < ny {
            out.push(idx + nx);
        }
        if k > 0 {
            out.push(idx - nx * ny);
        }
        if k + 1 < nz {
            out.push(idx + nx * ny);
        }
        out
    }

    /// `T_i c = c_i − mean of neighbours` (zero for an isolated point).
    pub fn residual(&self, coeffs: &[Vec3], idx: usize) -> Vec3 {
        let nb = self.neighbors(idx);
        if nb.is_empty() {
            return Vec3::zeros();
        }
        let mean: Vec3 = nb.iter().map(|&j| coeffs[j]).sum::<Vec3>() / nb.len() as f64;
        coeffs[idx] - mean
    }

    /// Adjoint of `T_i`: scatters `d` back onto the point and its neighbours.
    pub fn residual_adjoint(&self, idx: usize, d: &Vec3, out: &mut [Vec3]) {
        let nb = self.neighbors(idx);
        if nb.is_empty() {
            return;
        }
        out[idx] += d;
        let share = d / nb.len() as f64;
        for j in nb {
            out[j] -= share;
        }
    }
}

/// `S(c)`, never positive.
pub fn penalty(grid: &ControlGrid, lambda: f64) -> f64 {
    penalty_of(&NeighborStencil::for_grid(grid), grid.coeffs(), lambda)
}

pub(crate) fn penalty_of(stencil: &NeighborStencil, coeffs: &[Vec3], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let s: f64 = (0..coeffs.len()).map(|i| stencil.residual(coeffs, i).norm_squared()).sum();
    -0.5 * lambda * s
}

/// `∇S(c)` with the same interleaved layout as [`ControlGrid::to_vec`].
pub fn penalty_gradient(grid: &ControlGrid, lambda: f64) -> Vec<f64> {
    penalty_gradient_of(&NeighborStencil::for_grid(grid), grid.coeffs(), lambda)
}

pub(crate) fn penalty_gradient_of(stencil: &NeighborStencil, coeffs: &[Vec3], lambda: f64) -> Vec<f64> {
    let mut g = vec![Vec3::zeros(); coeffs.len()];
    if lambda != 0.0 {
        for i in 0..coeffs.len() {
            let r = stencil.residual(coeffs, i) * -lambda;
            stencil.residual_adjoint(i, &r, &mut g);
        }
    }
    g.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}
