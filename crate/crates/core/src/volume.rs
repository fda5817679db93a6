//! Spatio-directional image storage, smoothing, interpolation and the LSDV file format.
//!
//! Voxel centers sit at integer coordinates starting from the origin; reads
//! outside the grid return 0.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{LordError, Result};
use crate::sphere::{self, DirectionSet};
use crate::Vec3;

/// How a directional value is read at a direction that need not belong to the set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DirectionalKernel {
    /// Discrete Watson smoothing with the given concentration.
    Watson(f64),
    /// Value of the projectively closest direction (the `κ → ∞` limit).
    Nearest,
}

impl DirectionalKernel {
    /// Weights of every set direction for the query `v`.
    pub fn weights(&self, dirs: &DirectionSet, v: &Vec3, out: &mut [f64]) {
        match *self {
            DirectionalKernel::Watson(kappa) => {
                sphere::watson_weights_into(dirs, kappa, v, out);
            }
            DirectionalKernel::Nearest => {
                out.iter_mut().for_each(|w| *w = 0.0);
                out[dirs.nearest(v)] = 1.0;
            }
        }
    }
}

/// Voxel grid × direction set of nonnegative values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioDirectionalImage {
    dims: [usize; 3],
    spacing: [f64; 3],
    dirs: Arc<DirectionSet>,
    data: Vec<f64>,
}

impl SpatioDirectionalImage {
    pub fn new(dims: [usize; 3], dirs: Arc<DirectionSet>, data: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * dirs.len();
        if dims.iter().any(|&d| d == 0) {
            return Err(LordError::invalid("image dimensions must be positive"));
        }
        if data.len() != expected {
            return Err(LordError::DimensionMismatch(format!(
                "data has {} values, dims × directions = {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(LordError::invalid(format!("value {} at {i} is negative or non-finite", data[i])));
        }
        Ok(SpatioDirectionalImage { dims, spacing: [1.0; 3], dirs, data })
    }

    pub fn zeros(dims: [usize; 3], dirs: Arc<DirectionSet>) -> Self {
        let len = dims.iter().product::<usize>() * dirs.len();
        SpatioDirectionalImage { dims, spacing: [1.0; 3], dirs, data: vec![0.0; len] }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dirs(&self) -> &Arc<DirectionSet> {
        &self.dirs
    }

    pub fn n_dirs(&self) -> usize {
        self.dirs.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn voxel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn voxel_coords(&self, v: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [v % nx, (v / nx) % ny, v / (nx * ny)]
    }

    /// All direction values of one voxel.
    pub fn voxel(&self, v: usize) -> &[f64] {
        let n = self.n_dirs();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn voxel_mut(&mut self, v: usize) -> &mut [f64] {
        let n = self.n_dirs();
        &mut self.data[v * n..(v + 1) * n]
    }

    /// Value at integer voxel coordinates, 0 outside the grid.
    pub fn get(&self, ix: isize, iy: isize, iz: isize, n: usize) -> f64 {
        if ix < 0 || iy < 0 || iz < 0 {
            return 0.0;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= self.dims[0] || iy >= self.dims[1] || iz >= self.dims[2] {
            return 0.0;
        }
        self.data[self.voxel_index(ix, iy, iz) * self.n_dirs() + n]
    }

    /// Direction-averaged (mean diffusivity) view.
    pub fn mean_over_directions(&self) -> ScalarVolume {
        let n = self.n_dirs() as f64;
        let data = (0..self.n_voxels()).map(|v| self.voxel(v).iter().sum::<f64>() / n).collect();
        ScalarVolume { dims: self.dims, data }
    }

    /// Builds an image with the same grid and directions from a per-channel map.
    pub fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for v in 0..self.n_voxels() {
            let out = f(self.voxel(v));
            if out.len() != self.n_dirs() {
                return Err(LordError::DimensionMismatch("channel map changed length".into()));
            }
            data.extend(out);
        }
        SpatioDirectionalImage::new(self.dims, self.dirs.clone(), data)
    }

    /// Whether two images share grid and directions.
    pub fn compatible_with(&self, other: &SpatioDirectionalImage) -> Result<()> {
        if self.dims != other.dims {
            return Err(LordError::DimensionMismatch(format!(
                "image dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        if *self.dirs != *other.dirs {
            return Err(LordError::DimensionMismatch("images use different direction sets".into()));
        }
        Ok(())
    }
}

/// A plain scalar field on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(LordError::DimensionMismatch("scalar volume length".into()));
        }
        Ok(ScalarVolume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        ScalarVolume { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[self.index(ix, iy, iz)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over voxels at least one voxel away from every face.
    pub fn interior_mean(&self) -> f64 {
        let [nx, ny, nz] = self.dims;
        let mut sum = 0.0;
        let mut count = 0usize;
        for iz in 1..nz.saturating_sub(1) {
            for iy in 1..ny.saturating_sub(1) {
                for ix in 1..nx.saturating_sub(1) {
                    sum += self.at(ix, iy, iz);
                    count += 1;
                }
            }
        }
        if count == 0 {
            self.mean()
        } else {
            sum / count as f64
        }
    }

    /// Single-direction LSDV image holding this field (for the file format).
    pub fn to_image(&self) -> Result<SpatioDirectionalImage> {
        let dirs = Arc::new(DirectionSet::new(vec![Vec3::z()])?);
        let data = self.data.iter().map(|v| v.max(0.0)).collect();
        SpatioDirectionalImage::new(self.dims, dirs, data)
    }
}

// ---------------------------------------------------------------------------
// Spatial smoothing
// ---------------------------------------------------------------------------

fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

fn bspline_taps(h: f64) -> Vec<f64> {
    let r = (2.0 * h).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|j| bspline3(j as f64 / h)).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn taps_variance(taps: &[f64]) -> f64 {
    let r = (taps.len() / 2) as f64;
    taps.iter().enumerate().map(|(i, w)| (i as f64 - r).powi(2) * w).sum()
}

/// Normalized 1-D taps approximating a Gaussian of standard deviation `sigma`.
///
/// Up to `sigma = 0.8` a scaled cubic B-spline whose discrete variance equals
/// `sigma²` is used; above that a discrete Gaussian truncated at `⌈3σ⌉`.
pub fn smoothing_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    if sigma <= 0.8 {
        let target = sigma * sigma;
        let (mut lo, mut hi) = (0.5, 4.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if taps_variance(&bspline_taps(mid)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        bspline_taps(0.5 * (lo + hi))
    } else {
        let r = (3.0 * sigma).ceil() as isize;
        let mut taps: Vec<f64> =
            (-r..=r).map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        taps
    }
}

/// Separable spatial smoothing of every direction channel, zero-extended.
pub fn spatial_smooth(img: &SpatioDirectionalImage, sigma: f64) -> Result<SpatioDirectionalImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(LordError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = smoothing_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let n = img.n_dirs();
    let dims = img.dims;
    let mut cur = img.data.clone();
    let strides = [n, dims[0] * n, dims[0] * dims[1] * n];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let len = dims[axis] as isize;
        for v in 0..img.n_voxels() {
            let c = img.voxel_coords(v);
            let pos = c[axis] as isize;
            let base = v * n;
            for (k, w) in taps.iter().enumerate() {
                let q = pos + k as isize - r;
                if q < 0 || q >= len {
                    continue;
                }
                let src = (base as isize + (q - pos) * strides[axis] as isize) as usize;
                for d in 0..n {
                    next[base + d] += w * cur[src + d];
                }
            }
        }
        cur = next;
    }
    Ok(SpatioDirectionalImage { dims, spacing: img.spacing, dirs: img.dirs.clone(), data: cur })
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

/// Trilinear corner weights of a continuous point: `(voxel coords, weight)` for the 8 corners.
pub(crate) fn trilinear_corners(x: &Vec3) -> [([isize; 3], f64); 8] {
    let f = [x.x.floor(), x.y.floor(), x.z.floor()];
    let t = [x.x - f[0], x.y - f[1], x.z - f[2]];
    let b = [f[0] as isize, f[1] as isize, f[2] as isize];
    let mut out = [([0isize; 3], 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if o[a] == 1 { t[a] } else { 1.0 - t[a] };
        }
        *slot = ([b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize], w);
    }
    out
}

/// Trilinear interpolation of the directionally smoothed value at `(x, v)`.
pub fn sample(img: &SpatioDirectionalImage, x: &Vec3, v: &Vec3, kappa: f64) -> f64 {
    sample_with(img, x, v, DirectionalKernel::Watson(kappa))
}

pub fn sample_with(img: &SpatioDirectionalImage, x: &Vec3, v: &Vec3, kernel: DirectionalKernel) -> f64 {
    let mut w = vec![0.0; img.n_dirs()];
    kernel.weights(&img.dirs, v, &mut w);
    sample_weighted(img, x, &w)
}

/// Trilinear interpolation of `Σ_n w_n I(·, ν_n)` at `x`.
pub fn sample_weighted(img: &SpatioDirectionalImage, x: &Vec3, w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (c, cw) in trilinear_corners(x) {
        if cw == 0.0 {
            continue;
        }
        if c.iter().zip(img.dims).any(|(&ci, d)| ci < 0 || ci >= d as isize) {
            continue;
        }
        let vox = img.voxel_index(c[0] as usize, c[1] as usize, c[2] as usize);
        let vals = img.voxel(vox);
        acc += cw * vals.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Resamples the directional channels onto `m` freshly generated directions.
pub fn subsample_directions(
    img: &SpatioDirectionalImage,
    m: usize,
    kernel: DirectionalKernel,
) -> Result<SpatioDirectionalImage> {
    if m == 0 || m > img.n_dirs() {
        return Err(LordError::invalid(format!(
            "target direction count must be in 1..={}, got {m}",
            img.n_dirs()
        )));
    }
    if let DirectionalKernel::Watson(k) = kernel {
        sphere::check_kappa(k)?;
    }
    let new_dirs = Arc::new(DirectionSet::generate(m, 0)?);
    let n = img.n_dirs();
    let mut table = vec![0.0; m * n];
    for (j, row) in table.chunks_mut(n).enumerate() {
        kernel.weights(&img.dirs, new_dirs.get(j), row);
    }
    let mut data = Vec::with_capacity(img.n_voxels() * m);
    for v in 0..img.n_voxels() {
        let vals = img.voxel(v);
        for row in table.chunks(n) {
            data.push(row.iter().zip(vals).map(|(a, b)| a * b).sum::<f64>().max(0.0));
        }
    }
    SpatioDirectionalImage::new(img.dims, new_dirs, data)
}

// ---------------------------------------------------------------------------
// Cubic B-spline resampling (visualization only)
// ---------------------------------------------------------------------------

/// Cubic B-spline interpolation coefficients of every channel, computed by the
/// standard recursive prefilter with mirror boundaries.
#[derive(Clone, Debug)]
pub struct CubicCoefficients {
    dims: [usize; 3],
    n: usize,
    coeffs: Vec<f64>,
}

fn prefilter_line(line: &mut [f64]) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let z = 3f64.sqrt() - 2.0;
    let lambda = (1.0 - z) * (1.0 - 1.0 / z);
    line.iter_mut().for_each(|v| *v *= lambda);
    // causal init over one full mirrored period
    let period = 2 * n - 2;
    let mut zk = 1.0;
    let mut sum = 0.0;
    for k in 0..period {
        let m = if k < n { k } else { period - k };
        sum += zk * line[m];
        zk *= z;
    }
    let sum = sum / (1.0 - zk);
    line[0] = sum;
    for k in 1..n {
        line[k] += z * line[k - 1];
    }
    line[n - 1] = (z / (z * z - 1.0)) * (z * line[n - 2] + line[n - 1]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

impl CubicCoefficients {
    pub fn new(img: &SpatioDirectionalImage) -> Self {
        let dims = img.dims;
        let n = img.n_dirs();
        let mut coeffs = img.data.clone();
        let strides = [n, dims[0] * n, dims[0] * dims[1] * n];
        let mut line = Vec::new();
        for axis in 0..3 {
            let len = dims[axis];
            for v in 0..img.n_voxels() {
                let c = img.voxel_coords(v);
                if c[axis] != 0 {
                    continue;
                }
                for d in 0..n {
                    line.clear();
                    line.extend((0..len).map(|k| coeffs[v * n + d + k * strides[axis]]));
                    prefilter_line(&mut line);
                    for (k, val) in line.iter().enumerate() {
                        coeffs[v * n + d + k * strides[axis]] = *val;
                    }
                }
            }
        }
        CubicCoefficients { dims, n, coeffs }
    }

    fn coeff(&self, idx: [isize; 3], d: usize) -> f64 {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let n = self.dims[a] as isize;
            let mut i = idx[a];
            if n == 1 {
                i = 0;
            } else {
                let period = 2 * (n - 1);
                i = i.rem_euclid(period);
                if i >= n {
                    i = period - i;
                }
            }
            c[a] = i as usize;
        }
        let vox = c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2]);
        self.coeffs[vox * self.n + d]
    }

    /// Interpolated value of `Σ_n w_n I(·, ν_n)`; 0 beyond half a voxel outside the grid.
    pub fn sample_weighted(&self, x: &Vec3, w: &[f64]) -> f64 {
        let p = [x.x, x.y, x.z];
        for a in 0..3 {
            if p[a] < -0.5 || p[a] > self.dims[a] as f64 - 0.5 {
                return 0.0;
            }
        }
        let mut base = [0isize; 3];
        let mut wts = [[0.0; 4]; 3];
        for a in 0..3 {
            let f = p[a].floor();
            base[a] = f as isize - 1;
            for (k, wt) in wts[a].iter_mut().enumerate() {
                *wt = bspline3(p[a] - (f + k as f64 - 1.0));
            }
        }
        let mut acc = 0.0;
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let ww = wts[0][i] * wts[1][j] * wts[2][k];
                    if ww == 0.0 {
                        continue;
                    }
                    let idx = [base[0] + i as isize, base[1] + j as isize, base[2] + k as isize];
                    let mut v = 0.0;
                    for (d, wd) in w.iter().enumerate() {
                        if *wd != 0.0 {
                            v += wd * self.coeff(idx, d);
                        }
                    }
                    acc += ww * v;
                }
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Signal model
// ---------------------------------------------------------------------------

/// Apparent diffusion coefficient `-(1/b)·ln(S/S0)`.
pub fn adc_from_signal(s: f64, s0: f64, b: f64) -> Result<f64> {
    if !(s0 > 0.0) || !(b > 0.0) {
        return Err(LordError::Domain(format!("S0 and b must be positive (S0={s0}, b={b})")));
    }
    if !(s > 0.0) {
        return Err(LordError::Domain(format!("signal must be positive, got {s}")));
    }
    if s > s0 {
        return Err(LordError::Domain(format!("signal {s} exceeds S0 {s0}: negative ADC")));
    }
    Ok(-(s / s0).ln() / b)
}

/// Inverse of [`adc_from_signal`]: `S0·exp(-b·adc)`.
pub fn signal_from_adc(adc: f64, s0: f64, b: f64) -> Result<f64> {
    if !(s0 > 0.0) || !(b > 0.0) {
        return Err(LordError::Domain(format!("S0 and b must be positive (S0={s0}, b={b})")));
    }
    Ok(s0 * (-b * adc).exp())
}

// ---------------------------------------------------------------------------
// LSDV format
// ---------------------------------------------------------------------------

/// Writes `LSDV1 nx ny nz N`, the direction table, `DATA`, then little-endian f64 values.
pub fn write_lsdv<W: Write>(mut w: W, img: &SpatioDirectionalImage) -> Result<()> {
    let [nx, ny, nz] = img.dims;
    write!(w, "LSDV1 {nx} {ny} {nz} {}\n", img.n_dirs())?;
    for d in img.dirs.iter() {
        write!(w, "{:.16e} {:.16e} {:.16e}\n", d.x, d.y, d.z)?;
    }
    w.write_all(b"DATA\n")?;
    let mut buf = Vec::with_capacity(img.data.len() * 8);
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    let n = r.read_line(&mut s)?;
    if n == 0 {
        return Err(LordError::format("unexpected end of LSDV header"));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

pub fn read_lsdv<R: BufRead>(mut r: R) -> Result<SpatioDirectionalImage> {
    let header = read_line(&mut r)?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 5 || parts[0] != "LSDV1" {
        return Err(LordError::format(format!("bad LSDV header `{header}`")));
    }
    let nums: Vec<usize> = parts[1..]
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| LordError::format(format!("bad LSDV header `{header}`")))?;
    let dims = [nums[0], nums[1], nums[2]];
    let n = nums[3];
    let mut dirs = Vec::with_capacity(n);
    for _ in 0..n {
        dirs.push(sphere::parse_vec3(&read_line(&mut r)?)?);
    }
    if read_line(&mut r)? != "DATA" {
        return Err(LordError::format("missing DATA marker"));
    }
    let count = dims.iter().product::<usize>() * n;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| LordError::format("LSDV payload shorter than header implies"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(LordError::format("trailing bytes after LSDV payload"));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let dirs = DirectionSet::new(dirs)?;
    SpatioDirectionalImage::new(dims, Arc::new(dirs), data).map_err(|e| LordError::format(e.to_string()))
}

pub fn save_lsdv(path: impl AsRef<Path>, img: &SpatioDirectionalImage) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(LordError::io_at(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_lsdv(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn load_lsdv(path: impl AsRef<Path>) -> Result<SpatioDirectionalImage> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(LordError::io_at(path))?;
    read_lsdv(std::io::BufReader::new(f))
}
