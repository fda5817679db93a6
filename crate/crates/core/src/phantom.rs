//! Simulated HARDI phantoms.
//!
//! A [`Blueprint`] is a grid of cells, each either isotropic or a list of
//! weighted fiber tangents. Every fiber contributes the disc-shaped raw signal
//! `exp(−s (ν·t)²)`; isotropic cells hold a constant low level. Planar
//! blueprints are replicated over a few slices in z so spatial Jacobians stay
//! nondegenerate.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{LordError, Result};
use crate::ffd::{dense_probes, reorient_with, ControlGrid, HierarchicalFFD, DEFAULT_DET_FLOOR};
use crate::sphere::DirectionSet;
use crate::volume::{trilinear_corners, SpatioDirectionalImage};
use crate::{Mat3, Vec3};

pub const DEFAULT_SHARPNESS: f64 = 4.0;
pub const DEFAULT_ISO_LEVEL: f64 = 0.3;
pub const DEFAULT_NOISE: f64 = 0.05;
pub const DEFAULT_DIRECTIONS: usize = 100;
/// Slices a planar blueprint is replicated over.
pub const PLANAR_THICKNESS: usize = 3;
/// Tract width in cells used by the builtin experiments.
pub const TRACT_WIDTH: f64 = 3.0;

/// Amplitude in cells of the wavy target tracts (period 15 cells).
const WAVE_AMPLITUDE: f64 = 1.5;

const MAX_WARP_ATTEMPTS: usize = 100;

/// Names accepted by [`builtin_experiment`].
pub const EXPERIMENTS: [&str; 6] = [
    "straight_wavy_bounded",
    "straight_wavy_free",
    "crossing_shifted",
    "sheared_30_45",
    "fanning_kissing",
    "straight_kissing",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fiber {
    /// Unit tangent.
    pub tangent: Vec3,
    /// Volume fraction in `(0, 1]`.
    pub weight: f64,
}

/// Grid of fiber cells. Cells without fibers are isotropic.
#[derive(Clone, Debug, PartialEq)]
pub struct Blueprint {
    dims: [usize; 3],
    cells: Vec<Vec<Fiber>>,
}

impl Default for Blueprint {
    fn default() -> Self {
        Blueprint::new([20, 20, 1]).expect("nonzero dims")
    }
}

impl Blueprint {
    /// An all-isotropic blueprint.
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(LordError::invalid(format!("blueprint dims must be positive, got {dims:?}")));
        }
        Ok(Blueprint { dims, cells: vec![Vec::new(); dims.iter().product()] })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn is_planar(&self) -> bool {
        self.dims[2] == 1
    }

    /// Dimensions of the synthesized volume.
    pub fn volume_dims(&self) -> [usize; 3] {
        if self.is_planar() {
            [self.dims[0], self.dims[1], PLANAR_THICKNESS]
        } else {
            self.dims
        }
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[Fiber] {
        &self.cells[self.index(i, j, k)]
    }

    /// Cell covering voxel `(x, y, z)` of the synthesized volume.
    pub fn cell_at_voxel(&self, x: usize, y: usize, z: usize) -> &[Fiber] {
        let k = if self.is_planar() { 0 } else { z };
        self.cell(x, y, k)
    }

    pub fn add_fiber(&mut self, i: usize, j: usize, k: usize, tangent: Vec3, weight: f64) -> Result<()> {
        if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
            return Err(LordError::invalid(format!("cell ({i}, {j}, {k}) outside {:?}", self.dims)));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(LordError::invalid(format!("fiber weight must be in (0, 1], got {weight}")));
        }
        let n = tangent.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(LordError::invalid("fiber tangent must be nonzero"));
        }
        let idx = self.index(i, j, k);
        // already-unit tangents are kept bit-exact so text round trips are lossless
        let tangent = if (n - 1.0).abs() < 1e-12 { tangent } else { tangent / n };
        self.cells[idx].push(Fiber { tangent, weight });
        Ok(())
    }

    pub fn set_isotropic(&mut self, i: usize, j: usize, k: usize) {
        let idx = self.index(i, j, k);
        self.cells[idx].clear();
    }

    /// Rasterizes a tract: every cell whose center lies within `width/2` of
    /// the polyline gets one fiber along the nearest segment, weight 1.
    pub fn add_tract(&mut self, path: &[Vec3], width: f64) -> Result<()> {
        if path.len() < 2 {
            return Err(LordError::invalid("a tract needs at least two points"));
        }
        if !(width > 0.0) {
            return Err(LordError::invalid(format!("tract width must be positive, got {width}")));
        }
        let r = width / 2.0;
        let [nx, ny, nz] = self.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = Vec3::new(i as f64, j as f64, if nz == 1 { path[0].z } else { k as f64 });
                    let mut best = (f64::INFINITY, Vec3::zeros());
                    for w in path.windows(2) {
                        let seg = w[1] - w[0];
                        let len2 = seg.norm_squared();
                        if len2 == 0.0 {
                            continue;
                        }
                        let t = ((c - w[0]).dot(&seg) / len2).clamp(0.0, 1.0);
                        let d = (w[0] + seg * t - c).norm();
                        if d < best.0 {
                            best = (d, seg);
                        }
                    }
                    if best.0 <= r {
                        self.add_fiber(i, j, k, best.1, 1.0)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Rescales every cell whose weights sum above 1 to sum exactly 1.
    pub fn normalize_weights(&mut self) {
        for cell in &mut self.cells {
            let s: f64 = cell.iter().map(|f| f.weight).sum();
            if s > 1.0 {
                cell.iter_mut().for_each(|f| f.weight /= s);
            }
        }
    }

    /// Raw signal of the cell at `(i, j, k)` for direction `v`.
    pub fn cell_signal(&self, i: usize, j: usize, k: usize, v: &Vec3, sharpness: f64, iso_level: f64) -> f64 {
        fibers_signal(self.cell(i, j, k), v, sharpness, iso_level)
    }

    /// Voxels of the synthesized volume covered by exactly one fiber.
    pub fn single_fiber_voxels(&self) -> Vec<([usize; 3], Vec3)> {
        let [nx, ny, nz] = self.volume_dims();
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if let [f] = self.cell_at_voxel(x, y, z) {
                        out.push(([x, y, z], f.tangent));
                    }
                }
            }
        }
        out
    }

    pub fn n_fiber_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_empty()).count()
    }

    /// Text form: a `# dims` directive, then one `i j [k] tx ty tz weight`
    /// line per fiber (the k column only for non-planar grids).
    pub fn to_text(&self) -> String {
        let [nx, ny, nz] = self.dims;
        let mut s = format!("# dims {nx} {ny} {nz}\n");
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    for f in self.cell(i, j, k) {
                        let t = f.tangent;
                        if self.is_planar() {
                            let _ = write!(s, "{i} {j}");
                        } else {
                            let _ = write!(s, "{i} {j} {k}");
                        }
                        let _ = writeln!(s, " {:?} {:?} {:?} {:?}", t.x, t.y, t.z, f.weight);
                    }
                }
            }
        }
        s
    }

    /// Parses the text form. Lines are `i j tx ty tz weight` or
    /// `i j k tx ty tz weight`; a zero tangent marks the cell isotropic.
    /// Without a `# dims nx ny nz` directive the grid is 20×20×1.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dims = [20, 20, 1];
        let mut rows: Vec<(usize, [usize; 3], Vec3, f64)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                if it.next() == Some("dims") {
                    let v: Vec<usize> = it
                        .map(|t| t.parse().map_err(|_| LordError::format(format!("line {}: bad dims", ln + 1))))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(LordError::format(format!("line {}: dims needs three values", ln + 1)));
                    }
                    dims = [v[0], v[1], v[2]];
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let bad = || LordError::format(format!("line {}: expected `i j [k] tx ty tz weight`", ln + 1));
            let (ijk, rest) = match tok.len() {
                6 => (vec![tok[0], tok[1], "0"], &tok[2..]),
                7 => (vec![tok[0], tok[1], tok[2]], &tok[3..]),
                _ => return Err(bad()),
            };
            let mut c = [0usize; 3];
            for (a, t) in ijk.iter().enumerate() {
                c[a] = t.parse().map_err(|_| bad())?;
            }
            let mut f = [0.0; 4];
            for (a, t) in rest.iter().enumerate() {
                f[a] = t.parse().map_err(|_| bad())?;
            }
            rows.push((ln + 1, c, Vec3::new(f[0], f[1], f[2]), f[3]));
        }
        let mut bp = Blueprint::new(dims).map_err(|e| LordError::format(e.to_string()))?;
        for (ln, [i, j, k], t, w) in rows {
            if t == Vec3::zeros() {
                if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                    return Err(LordError::format(format!("line {ln}: cell outside {dims:?}")));
                }
                bp.set_isotropic(i, j, k);
                continue;
            }
            if (t.norm() - 1.0).abs() > 1e-6 {
                return Err(LordError::format(format!("line {ln}: tangent is not unit length")));
            }
            bp.add_fiber(i, j, k, t, w).map_err(|e| LordError::format(format!("line {ln}: {e}")))?;
        }
        Ok(bp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(LordError::io_at(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Blueprint::from_text(&std::fs::read_to_string(path).map_err(LordError::io_at(path))?)
    }
}

fn fibers_signal(fibers: &[Fiber], v: &Vec3, sharpness: f64, iso_level: f64) -> f64 {
    if fibers.is_empty() {
        return iso_level;
    }
    fibers.iter().map(|f| f.weight * (-sharpness * f.tangent.dot(v).powi(2)).exp()).sum()
}

/// Raw single-fiber signal `exp(−sharpness (ν·t)²)` over a direction set.
pub fn single_fiber_signal(tangent: &Vec3, dirs: &DirectionSet, sharpness: f64) -> Result<Vec<f64>> {
    if !(sharpness > 0.0) {
        return Err(LordError::invalid(format!("sharpness must be positive, got {sharpness}")));
    }
    let n = tangent.norm();
    if !(n > 1e-12) {
        return Err(LordError::invalid("tangent must be nonzero"));
    }
    let t = tangent / n;
    Ok(dirs.iter().map(|d| (-sharpness * d.dot(&t).powi(2)).exp()).collect())
}

/// Synthesizes the image of a blueprint with additive uniform noise in
/// `[0, noise_amplitude]`.
pub fn synthesize(
    bp: &Blueprint,
    dirs: Arc<DirectionSet>,
    noise_amplitude: f64,
    iso_level: f64,
    seed: u64,
) -> Result<SpatioDirectionalImage> {
    synthesize_warped(bp, dirs, None, noise_amplitude, iso_level, seed)
}

/// Renders the blueprint pulled back through `warp`: the value at `(x, v)` is
/// the trilinear blend of the cell signals around `warp(x)`, read at the
/// reoriented direction `ψ(x, v)`. Cells outside the grid are isotropic.
/// With no warp this equals [`synthesize`].
pub fn synthesize_warped(
    bp: &Blueprint,
    dirs: Arc<DirectionSet>,
    warp: Option<&HierarchicalFFD>,
    noise_amplitude: f64,
    iso_level: f64,
    seed: u64,
) -> Result<SpatioDirectionalImage> {
    if !(noise_amplitude >= 0.0) || !noise_amplitude.is_finite() {
        return Err(LordError::invalid(format!("noise amplitude must be ≥ 0, got {noise_amplitude}")));
    }
    if !(iso_level > 0.0 && iso_level <= 1.0) {
        return Err(LordError::invalid(format!("iso level must be in (0, 1], got {iso_level}")));
    }
    let dims = bp.volume_dims();
    let n_vox: usize = dims.iter().product();
    let n = dirs.len();
    let per_voxel: Vec<Vec<f64>> = (0..n_vox)
        .into_par_iter()
        .map(|vox| {
            let x = Vec3::new(
                (vox % dims[0]) as f64,
                ((vox / dims[0]) % dims[1]) as f64,
                (vox / (dims[0] * dims[1])) as f64,
            );
            let (p, jac) = match warp {
                Some(w) => (w.deform(&x), w.spatial_jacobian(&x)),
                None => (x, Mat3::identity()),
            };
            let corners: Vec<(Option<&[Fiber]>, f64)> = trilinear_corners(&p)
                .iter()
                .filter(|(_, w)| *w != 0.0)
                .map(|(c, w)| {
                    let inside = (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < dims[a]);
                    let cell = inside.then(|| bp.cell_at_voxel(c[0] as usize, c[1] as usize, c[2] as usize));
                    (cell, *w)
                })
                .collect();
            let mut out = Vec::with_capacity(n);
            for d in dirs.iter() {
                let psi = if warp.is_some() { reorient_with(&jac, d).unwrap_or(*d) } else { *d };
                let s: f64 = corners
                    .iter()
                    .map(|(cell, w)| w * cell.map_or(iso_level, |f| fibers_signal(f, &psi, DEFAULT_SHARPNESS, iso_level)))
                    .sum();
                out.push(s);
            }
            out
        })
        .collect();
    let mut data: Vec<f64> = per_voxel.into_iter().flatten().collect();
    if noise_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut data {
            *v += rng.gen::<f64>() * noise_amplitude;
        }
    }
    SpatioDirectionalImage::new(dims, dirs, data)
}

/// A moving/target phantom pair.
#[derive(Clone, Debug)]
pub struct ExperimentPair {
    pub name: String,
    pub moving_blueprint: Blueprint,
    pub target_blueprint: Blueprint,
    pub moving: SpatioDirectionalImage,
    pub target: SpatioDirectionalImage,
    /// Centerlines of the moving tracts in voxel coordinates (middle slice),
    /// restricted to the image.
    pub moving_tracts: Vec<Vec<Vec3>>,
}

fn curve(n: usize, f: impl Fn(f64) -> (f64, f64)) -> Vec<Vec3> {
    (0..=n)
        .map(|i| {
            let (x, y) = f(i as f64 / n as f64);
            Vec3::new(x, y, 0.0)
        })
        .collect()
}

fn line(a: (f64, f64), b: (f64, f64)) -> Vec<Vec3> {
    curve(40, |t| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)))
}

fn ring(c: (f64, f64), r: f64) -> Vec<Vec3> {
    curve(64, |t| (c.0 + r * (2.0 * PI * t).cos(), c.1 + r * (2.0 * PI * t).sin()))
}

fn line_through(c: (f64, f64), angle_deg: f64, half: f64) -> Vec<Vec3> {
    let (s, co) = angle_deg.to_radians().sin_cos();
    line((c.0 - half * co, c.1 - half * s), (c.0 + half * co, c.1 + half * s))
}

fn planar(tracts: &[(Vec<Vec3>, f64)]) -> Result<Blueprint> {
    let mut bp = Blueprint::default();
    for (path, width) in tracts {
        bp.add_tract(path, *width)?;
    }
    bp.normalize_weights();
    Ok(bp)
}

/// The tract centerlines of a builtin experiment, `(moving, target)`, each with its width.
#[allow(clippy::type_complexity)]
pub fn builtin_tracts(name: &str) -> Result<(Vec<(Vec<Vec3>, f64)>, Vec<(Vec<Vec3>, f64)>)> {
    let w = TRACT_WIDTH;
    let pairs = match name {
        "straight_wavy_bounded" => {
            let walls = || vec![(line((2.0, -1.0), (2.0, 20.0)), w), (line((17.0, -1.0), (17.0, 20.0)), w)];
            let mut m = walls();
            m.push((line((-1.0, 9.5), (20.0, 9.5)), w));
            let mut t = walls();
            t.push((
                curve(200, |s| {
                    let x = -1.0 + 21.0 * s;
                    let y = if (2.0..=17.0).contains(&x) { 9.5 + WAVE_AMPLITUDE * (2.0 * PI * (x - 2.0) / 15.0).sin() } else { 9.5 };
                    (x, y)
                }),
                w,
            ));
            (m, t)
        }
        "straight_wavy_free" => {
            let m = vec![(line((-1.0, 9.5), (20.0, 9.5)), w)];
            let t = vec![(curve(200, |s| {
                let x = -1.0 + 21.0 * s;
                (x, 9.5 + WAVE_AMPLITUDE * (2.0 * PI * (x - 2.0) / 15.0).sin())
            }), w)];
            (m, t)
        }
        "crossing_shifted" => {
            let rings = || {
                [(3.0, 3.0), (16.0, 3.0), (3.0, 16.0), (16.0, 16.0)]
                    .into_iter()
                    .map(|c| (ring(c, 1.5), 1.5))
                    .collect::<Vec<_>>()
            };
            let mut m = rings();
            m.push((line((-1.0, 8.5), (20.0, 8.5)), w));
            m.push((line((8.5, -1.0), (8.5, 20.0)), w));
            let mut t = rings();
            t.push((line((-1.0, 10.5), (20.0, 10.5)), w));
            t.push((line((10.5, -1.0), (10.5, 20.0)), w));
            (m, t)
        }
        "sheared_30_45" => {
            let c = (9.5, 11.0);
            let base = || vec![(line((-1.0, 3.0), (20.0, 3.0)), w)];
            let mut m = base();
            m.push((line_through(c, 60.0, 7.0), w));
            m.push((line_through(c, 120.0, 7.0), w));
            let mut t = base();
            t.push((line_through(c, 45.0, 7.0), w));
            t.push((line_through(c, 135.0, 7.0), w));
            (m, t)
        }
        "fanning_kissing" => {
            let horizontal = || (line((-1.0, 9.5), (20.0, 9.5)), w);
            let mut m = vec![horizontal()];
            for dx in [-4.0, 0.0, 4.0] {
                m.push((line((9.5, 9.5), (9.5 + dx, -1.0)), 2.0));
                m.push((line((9.5, 9.5), (9.5 + dx, 20.0)), 2.0));
            }
            let mut t = vec![horizontal()];
            for sgn in [-1.0, 1.0] {
                t.push((
                    curve(200, |s| {
                        let y = -1.0 + 21.0 * s;
                        (9.5 + sgn * 4.0 * (1.0 - (-(y - 9.5).powi(2) / 20.0).exp()), y)
                    }),
                    w,
                ));
            }
            (m, t)
        }
        "straight_kissing" => {
            let m = vec![(line((-1.0, 6.0), (20.0, 6.0)), w), (line((-1.0, 13.0), (20.0, 13.0)), w)];
            let t = [-1.0, 1.0]
                .into_iter()
                .map(|sgn| {
                    let path = curve(200, |s| {
                        let x = -1.0 + 21.0 * s;
                        (x, 9.5 + sgn * (3.5 - 3.0 * (-(x - 9.5).powi(2) / 16.0).exp()))
                    });
                    (path, w)
                })
                .collect();
            (m, t)
        }
        other => {
            return Err(LordError::invalid(format!(
                "unknown experiment `{other}`; valid names: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    };
    Ok(pairs)
}

/// Moving and target blueprints of a builtin experiment.
pub fn builtin_blueprints(name: &str) -> Result<(Blueprint, Blueprint)> {
    let (m, t) = builtin_tracts(name)?;
    Ok((planar(&m)?, planar(&t)?))
}

/// One of the six builtin phantom pairs with the default direction set,
/// noise and isotropic level. Moving and target use different noise seeds.
pub fn builtin_experiment(name: &str) -> Result<ExperimentPair> {
    let (m, t) = builtin_tracts(name)?;
    let (mb, tb) = (planar(&m)?, planar(&t)?);
    let dirs = Arc::new(DirectionSet::generate(DEFAULT_DIRECTIONS, 0)?);
    let k = EXPERIMENTS.iter().position(|e| *e == name).unwrap_or(0) as u64;
    let moving = synthesize(&mb, dirs.clone(), DEFAULT_NOISE, DEFAULT_ISO_LEVEL, 2 * k + 1)?;
    let target = synthesize(&tb, dirs, DEFAULT_NOISE, DEFAULT_ISO_LEVEL, 2 * k + 2)?;
    let mid = (PLANAR_THICKNESS / 2) as f64;
    let moving_tracts = m
        .into_iter()
        .map(|(p, _)| {
            p.into_iter()
                .filter(|q| (0.0..=19.0).contains(&q.x) && (0.0..=19.0).contains(&q.y))
                .map(|q| Vec3::new(q.x, q.y, mid))
                .collect()
        })
        .collect();
    Ok(ExperimentPair {
        name: name.to_string(),
        moving_blueprint: mb,
        target_blueprint: tb,
        moving,
        target,
        moving_tracts,
    })
}

/// A random one-level FFD with i.i.d. control displacements uniform in
/// `[−mδ, mδ]³`, redrawn until it passes the diffeomorphism guard.
pub fn synthetic_warp(dims: [usize; 3], delta: f64, magnitude_fraction: f64, seed: u64) -> Result<HierarchicalFFD> {
    if !(0.0..=0.5).contains(&magnitude_fraction) {
        return Err(LordError::invalid(format!(
            "magnitude fraction must be in [0, 0.5], got {magnitude_fraction}"
        )));
    }
    let template = ControlGrid::for_domain(dims, delta, 1)?;
    let probes = dense_probes(dims, Some(delta));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = magnitude_fraction * delta;
    for _ in 0..MAX_WARP_ATTEMPTS {
        let mut grid = template.clone();
        if amp > 0.0 {
            for c in grid.coeffs_mut() {
                *c = Vec3::new(rng.gen_range(-amp..=amp), rng.gen_range(-amp..=amp), rng.gen_range(-amp..=amp));
            }
        }
        let ffd = HierarchicalFFD::from_grids(vec![grid])?;
        if ffd.check_diffeomorphism(&probes, DEFAULT_DET_FLOOR).pass {
            return Ok(ffd);
        }
    }
    Err(LordError::CannotGenerate { attempts: MAX_WARP_ATTEMPTS })
}

/// A seeded 3-D blueprint of smoothly bending tracts running along each axis
/// in turn, for synthetic-warp experiments.
pub fn synthwarp_blueprint(dims: [usize; 3], n_tracts: usize, seed: u64) -> Result<Blueprint> {
    let mut bp = Blueprint::new(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = dims.map(|d| d as f64 - 1.0);
    for t in 0..n_tracts {
        let a = t % 3;
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let ob = rng.gen_range(0.25..0.75) * ext[b];
        let oc = rng.gen_range(0.25..0.75) * ext[c];
        let amp = rng.gen_range(0.1..0.25) * ext[b].min(ext[c]).max(2.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let path: Vec<Vec3> = (0..=120)
            .map(|i| {
                let s = i as f64 / 120.0;
                let mut p = Vec3::zeros();
                p[a] = -1.0 + (ext[a] + 2.0) * s;
                p[b] = ob + amp * (2.0 * PI * s + phase).sin();
                p[c] = oc + 0.5 * amp * (PI * s + phase).cos();
                p
            })
            .collect();
        bp.add_tract(&path, TRACT_WIDTH)?;
    }
    bp.normalize_weights();
    Ok(bp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{funk_radon, line_angle, odf_peaks, principal_fiber, DEFAULT_FRT_BAND};
    use crate::sphere::default_peak_neighborhood as default_peak_neighborhood_for;

    fn dirs100() -> Arc<DirectionSet> {
        Arc::new(DirectionSet::generate(100, 0).unwrap())
    }

    #[test]
    fn single_fiber_is_an_equatorial_disc() {
        let d = dirs100();
        let s = single_fiber_signal(&Vec3::z(), &d, 4.0).unwrap();
        let imax = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let imin = s.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let zmin = d.iter().map(|v| v.z.abs()).fold(f64::INFINITY, f64::min);
        assert_eq!(d.get(imax).z.abs(), zmin);
        assert!(d.get(imin).z.abs() > 0.95);
        let peak = principal_fiber(&s, &d, DEFAULT_FRT_BAND).unwrap().unwrap();
        assert!(line_angle(&peak, &Vec3::z()).to_degrees() < 10.0);
        assert!(single_fiber_signal(&Vec3::z(), &d, 0.0).is_err());
    }

    #[test]
    fn isotropic_blueprint_is_constant() {
        let bp = Blueprint::default();
        let img = synthesize(&bp, dirs100(), 0.0, 0.3, 1).unwrap();
        assert_eq!(img.dims(), [20, 20, 3]);
        assert!(img.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn crossing_cell_has_two_peaks() {
        let d = dirs100();
        let mut bp = Blueprint::default();
        bp.add_tract(&line((-1.0, 9.5), (20.0, 9.5)), 3.0).unwrap();
        bp.add_tract(&line((9.5, -1.0), (9.5, 20.0)), 3.0).unwrap();
        bp.normalize_weights();
        assert_eq!(bp.cell(9, 9, 0).len(), 2);
        assert!((bp.cell(9, 9, 0)[0].weight - 0.5).abs() < 1e-15);
        let img = synthesize(&bp, d.clone(), 0.0, 0.3, 0).unwrap();
        let odf = funk_radon(img.voxel(img.voxel_index(9, 9, 1)), &d, DEFAULT_FRT_BAND).unwrap();
        let peaks = odf_peaks(&odf, &d, default_peak_neighborhood_for(&d));
        assert!(peaks.len() >= 2);
        let (a, b) = (peaks[0].direction, peaks[1].direction);
        assert!((line_angle(&a, &b).to_degrees() - 90.0).abs() < 12.0);
        assert!(peaks[1].value > 0.8 * peaks[0].value);
    }

    #[test]
    fn synthesis_is_reproducible_and_linear() {
        let d = dirs100();
        let (bp, _) = builtin_blueprints("crossing_shifted").unwrap();
        let a = synthesize(&bp, d.clone(), 0.1, 0.3, 9).unwrap();
        let b = synthesize(&bp, d.clone(), 0.1, 0.3, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let clean = synthesize(&bp, d.clone(), 0.0, 0.3, 9).unwrap();
        assert!(a.data().iter().zip(clean.data()).all(|(x, y)| x - y >= 0.0 && x - y <= 0.1));
        let mut half = bp.clone();
        for c in &mut half.cells {
            c.iter_mut().for_each(|f| f.weight *= 0.5);
        }
        let h = synthesize(&half, d, 0.0, 0.3, 0).unwrap();
        for v in 0..clean.n_voxels() {
            let [x, y, z] = clean.voxel_coords(v);
            if !bp.cell_at_voxel(x, y, z).is_empty() {
                for (p, q) in clean.voxel(v).iter().zip(h.voxel(v)) {
                    assert!((0.5 * p - q).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn blueprint_text_round_trips() {
        for name in EXPERIMENTS {
            let (m, t) = builtin_blueprints(name).unwrap();
            for bp in [m, t] {
                let back = Blueprint::from_text(&bp.to_text()).unwrap();
                assert_eq!(back, bp);
            }
        }
        let bp3 = synthwarp_blueprint([6, 8, 5], 3, 2).unwrap();
        assert_eq!(Blueprint::from_text(&bp3.to_text()).unwrap(), bp3);
    }

    #[test]
    fn blueprint_parser_rejects_garbage() {
        assert!(Blueprint::from_text("1 2 3").is_err());
        assert!(Blueprint::from_text("1 2 2 0 0 1").is_err());
        assert!(Blueprint::from_text("25 2 1 0 0 1").is_err());
        assert!(Blueprint::from_text("1 2 1 0 0 1.5").is_err());
        let bp = Blueprint::from_text("# a comment\n3 4 0 1 0 0.5\n5 5 0 0 0 1\n").unwrap();
        assert_eq!(bp.cell(3, 4, 0).len(), 1);
        assert!(bp.cell(5, 5, 0).is_empty());
        assert_eq!(bp.n_fiber_cells(), 1);
    }

    #[test]
    fn builtin_pairs_share_layout() {
        for name in EXPERIMENTS {
            let p = builtin_experiment(name).unwrap();
            p.moving.compatible_with(&p.target).unwrap();
            assert_eq!(p.moving.dims(), [20, 20, 3]);
            assert!(p.moving_blueprint.n_fiber_cells() > 20);
            assert_ne!(p.moving_blueprint, p.target_blueprint);
        }
        let err = builtin_experiment("nope").unwrap_err().to_string();
        assert!(err.contains("straight_kissing"));
    }

    #[test]
    fn sheared_target_center_crosses_at_45() {
        let p = builtin_experiment("sheared_30_45").unwrap();
        let cell = p.target_blueprint.cell(9, 11, 0);
        assert_eq!(cell.len(), 2);
        let d = p.target.dirs().clone();
        let odf = funk_radon(p.target.voxel(p.target.voxel_index(9, 11, 1)), &d, DEFAULT_FRT_BAND).unwrap();
        let peaks = odf_peaks(&odf, &d, default_peak_neighborhood_for(&d));
        let (a, b) = (peaks[0].direction, peaks[1].direction);
        assert!((line_angle(&a, &b).to_degrees() - 90.0).abs() < 15.0);
        for q in [a, b] {
            let to_x = line_angle(&q, &Vec3::x()).to_degrees();
            assert!((to_x - 45.0).abs() < 15.0, "peak {q:?} at {to_x}° from x");
        }
    }

    #[test]
    fn identity_warped_rendering_matches_synthesis() {
        let d = dirs100();
        let (bp, _) = builtin_blueprints("straight_kissing").unwrap();
        let a = synthesize(&bp, d.clone(), 0.0, 0.3, 0).unwrap();
        let id = HierarchicalFFD::from_grids(vec![ControlGrid::for_domain([20, 20, 3], 5.0, 1).unwrap()]).unwrap();
        let b = synthesize_warped(&bp, d, Some(&id), 0.0, 0.3, 0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_warps_are_valid_and_seeded() {
        let dims = [11, 71, 41];
        let w = synthetic_warp(dims, 10.0, 0.4, 3).unwrap();
        assert!(w.check_diffeomorphism(&w.dense_probes(dims), DEFAULT_DET_FLOOR).pass);
        assert_eq!(w.to_text(), synthetic_warp(dims, 10.0, 0.4, 3).unwrap().to_text());
        let id = synthetic_warp(dims, 10.0, 0.0, 3).unwrap();
        assert!(id.level(0).coeffs().iter().all(|c| *c == Vec3::zeros()));
        assert!(synthetic_warp(dims, 10.0, 0.6, 3).is_err());
    }
}
