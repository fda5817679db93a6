//! Directions on the projective plane and the kernels that live on them.
//!
//! Every direction is stored through a single canonical representative on the
//! upper hemisphere (nonnegative z, ties broken on y then x). All kernels here
//! depend on directions only through `(u·v)²` or `|u·v|`, so negating any
//! direction never changes a result.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::SymmetricEigen;

use crate::error::{LordError, Result};
use crate::{Mat3, Vec3};

/// Default half-width of the equatorial band used by [`funk_radon`], in radians.
pub const DEFAULT_FRT_BAND: f64 = 0.12;

const DUPLICATE_TOL: f64 = 1e-9;

/// Flip `v` onto the canonical half-space: z > 0, or z = 0 and y > 0, or z = y = 0 and x ≥ 0.
pub fn canonical(v: Vec3) -> Vec3 {
    let flip = if v.z != 0.0 {
        v.z < 0.0
    } else if v.y != 0.0 {
        v.y < 0.0
    } else {
        v.x < 0.0
    };
    if flip {
        -v
    } else {
        v
    }
}

/// Angle between the lines spanned by `a` and `b`, in radians, in `[0, π/2]`.
pub fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos()
}

/// A set of `N` distinct projective directions.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    dirs: Vec<Vec3>,
}

impl DirectionSet {
    /// Builds a set from arbitrary nonzero vectors. Vectors are normalized and
    /// canonicalized; two vectors spanning the same line are rejected.
    pub fn new(vectors: Vec<Vec3>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(LordError::invalid("direction set must not be empty"));
        }
        let mut dirs = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.into_iter().enumerate() {
            let n = v.norm();
            if !n.is_finite() || n < 1e-300 {
                return Err(LordError::invalid(format!("direction {i} has zero or non-finite norm")));
            }
            dirs.push(canonical(v / n));
        }
        for i in 0..dirs.len() {
            for j in 0..i {
                if dirs[i].dot(&dirs[j]).abs() > 1.0 - DUPLICATE_TOL {
                    return Err(LordError::invalid(format!(
                        "directions {j} and {i} span the same line"
                    )));
                }
            }
        }
        Ok(DirectionSet { dirs })
    }

    /// Quasi-uniform directions: Fibonacci points on the upper hemisphere,
    /// relaxed by a repulsion pass under the projective metric.
    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(LordError::invalid("number of directions must be positive"));
        }
        let golden = PI * (3.0 - 5f64.sqrt());
        let offset = unit_fraction(seed) * 2.0 * PI;
        let mut pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - i as f64 / n as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = offset + golden * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        if n > 1 {
            repel(&mut pts, 80);
        }
        let dirs: Vec<Vec3> = pts.into_iter().map(|p| canonical(p.normalize())).collect();
        DirectionSet::new(dirs)
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn get(&self, i: usize) -> &Vec3 {
        &self.dirs[i]
    }

    pub fn as_slice(&self) -> &[Vec3] {
        &self.dirs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.dirs.iter()
    }

    /// Index of the direction closest (projectively) to `q`.
    pub fn nearest(&self, q: &Vec3) -> usize {
        let mut best = 0;
        let mut best_dot = -1.0;
        for (i, d) in self.dirs.iter().enumerate() {
            let c = d.dot(q).abs();
            if c > best_dot {
                best_dot = c;
                best = i;
            }
        }
        best
    }

    /// Smallest projective angle between two members, `π/2` for a single direction.
    pub fn min_angle(&self) -> f64 {
        let mut best = PI / 2.0;
        for i in 0..self.dirs.len() {
            for j in 0..i {
                best = best.min(line_angle(&self.dirs[i], &self.dirs[j]));
            }
        }
        best
    }

    /// Text form: `N` on the first line, then one `x y z` line per direction.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(64 * (self.len() + 1));
        let _ = writeln!(s, "{}", self.len());
        for d in &self.dirs {
            let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", d.x, d.y, d.z);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| LordError::format("empty direction table"))?
            .trim()
            .parse()
            .map_err(|_| LordError::format("direction table: bad count line"))?;
        let mut dirs = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| LordError::format("direction table: too few lines"))?;
            dirs.push(parse_vec3(line)?);
        }
        DirectionSet::new(dirs)
    }
}

pub(crate) fn parse_vec3(line: &str) -> Result<Vec3> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| LordError::format(format!("bad vector line `{line}`")))?;
    if vals.len() != 3 {
        return Err(LordError::format(format!("expected 3 components in `{line}`")));
    }
    Ok(Vec3::new(vals[0], vals[1], vals[2]))
}

// splitmix64 finalizer mapped to [0, 1)
fn unit_fraction(seed: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Jacobi-style electrostatic relaxation on the sphere with every point's
/// antipode included as a charge.
fn repel(pts: &mut [Vec3], iters: usize) {
    let n = pts.len();
    let spacing = (2.0 * PI / n as f64).sqrt();
    let mut forces = vec![Vec3::zeros(); n];
    let mut eta = 0.25;
    for _ in 0..iters {
        let mut max_f: f64 = 0.0;
        for i in 0..n {
            let p = pts[i];
            let mut f = Vec3::zeros();
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                for s in [1.0, -1.0] {
                    let r = p - s * q;
                    let d2 = r.norm_squared().max(1e-24);
                    f += r / (d2 * d2.sqrt());
                }
            }
            let ft = f - p * f.dot(&p);
            max_f = max_f.max(ft.norm());
            forces[i] = ft;
        }
        if max_f <= 0.0 {
            break;
        }
        for (p, f) in pts.iter_mut().zip(&forces) {
            *p = (*p + f * (eta * spacing / max_f)).normalize();
        }
        eta *= 0.96;
    }
}

/// Row-stochastic table of discrete Watson weights between the members of a
/// direction set. Row `m` holds the weights of every `ν_n` for the center `ν_m`.
#[derive(Clone, Debug)]
pub struct WatsonTable {
    kappa: f64,
    n: usize,
    weights: Vec<f64>,
}

impl WatsonTable {
    pub fn new(dirs: &DirectionSet, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        let n = dirs.len();
        let mut weights = vec![0.0; n * n];
        for (m, row) in weights.chunks_mut(n).enumerate() {
            watson_weights_into(dirs, kappa, dirs.get(m), row);
        }
        Ok(WatsonTable { kappa, n, weights })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n..(m + 1) * self.n]
    }

    pub fn weight(&self, m: usize, n: usize) -> f64 {
        self.weights[m * self.n + n]
    }
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(LordError::invalid(format!("kappa must be finite and >= 0, got {kappa}")));
    }
    Ok(())
}

/// Discrete Watson weights `exp(κ(ν_n·q)²) / Σ_i exp(κ(ν_i·q)²)`.
pub fn watson_weights(dirs: &DirectionSet, kappa: f64, query: &Vec3) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    let norm = query.norm();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(LordError::invalid(format!("query must be a unit vector, |q| = {norm}")));
    }
    let mut out = vec![0.0; dirs.len()];
    watson_weights_into(dirs, kappa, query, &mut out);
    Ok(out)
}

/// Unchecked kernel behind [`watson_weights`]; returns the normalizing sum of
/// the max-shifted exponentials.
pub(crate) fn watson_weights_into(dirs: &DirectionSet, kappa: f64, q: &Vec3, out: &mut [f64]) -> f64 {
    let mut top = f64::NEG_INFINITY;
    for (o, d) in out.iter_mut().zip(dirs.iter()) {
        let c = d.dot(q);
        *o = kappa * c * c;
        top = top.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - top).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    sum
}

/// Applies the Watson table: `out[m] = Σ_n signal[n]·w(m, n)`.
pub fn directional_smooth(signal: &[f64], table: &WatsonTable) -> Result<Vec<f64>> {
    if signal.len() != table.dim() {
        return Err(LordError::invalid(format!(
            "signal has {} entries, table expects {}",
            signal.len(),
            table.dim()
        )));
    }
    Ok((0..table.dim())
        .map(|m| table.row(m).iter().zip(signal).map(|(w, s)| w * s).sum())
        .collect())
}

/// Discrete Funk-Radon transform: mean of the signal over the band of
/// directions within `band_halfwidth` of the great circle orthogonal to each
/// direction, max-normalized to `[0, 1]`.
pub fn funk_radon(signal: &[f64], dirs: &DirectionSet, band_halfwidth: f64) -> Result<Vec<f64>> {
    if signal.len() != dirs.len() {
        return Err(LordError::invalid("signal length does not match direction set"));
    }
    if !(band_halfwidth > 0.0 && band_halfwidth < PI / 2.0) {
        return Err(LordError::invalid(format!(
            "band half-width must lie in (0, π/2), got {band_halfwidth}"
        )));
    }
    let thr = band_halfwidth.sin();
    let mut odf = Vec::with_capacity(dirs.len());
    for (m, axis) in dirs.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (s, d) in signal.iter().zip(dirs.iter()) {
            if d.dot(axis).abs() <= thr {
                sum += s;
                count += 1;
            }
        }
        if count == 0 {
            return Err(LordError::DegenerateBand { index: m, x: axis.x, y: axis.y, z: axis.z });
        }
        odf.push(sum / count as f64);
    }
    let top = odf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top > 0.0 {
        for v in odf.iter_mut() {
            *v /= top;
        }
    }
    Ok(odf)
}

/// Generalized anisotropy: population standard deviation over root mean square.
pub fn gfa(signal: &[f64]) -> Result<f64> {
    if signal.len() < 2 {
        return Err(LordError::invalid("GFA needs at least two directions"));
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let ms = signal.iter().map(|s| s * s).sum::<f64>() / n;
    if ms == 0.0 {
        return Err(LordError::UndefinedGfa);
    }
    let var = signal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((var / ms).sqrt().min(1.0))
}

/// A local maximum of an ODF.
#[derive(Clone, Debug)]
pub struct Peak {
    /// Refined peak axis (canonical representative).
    pub direction: Vec3,
    /// Index of the discrete direction the peak was found at.
    pub index: usize,
    pub value: f64,
}

/// Local maxima of `odf` over `dirs`, strongest first.
///
/// A direction is a local maximum when no direction within `neighborhood`
/// radians has a larger value. Each peak axis is refined as the principal axis
/// of the baseline-subtracted ODF over that neighborhood, which recovers
/// orientations between the discrete samples.
pub fn odf_peaks(odf: &[f64], dirs: &DirectionSet, neighborhood: f64) -> Vec<Peak> {
    let cos_nb = neighborhood.cos();
    let mut peaks = Vec::new();
    for (m, axis) in dirs.iter().enumerate() {
        let mut is_max = true;
        let mut nb = Vec::new();
        for (n, d) in dirs.iter().enumerate() {
            if n == m {
                continue;
            }
            if d.dot(axis).abs() >= cos_nb {
                if odf[n] > odf[m] || (odf[n] == odf[m] && n < m) {
                    is_max = false;
                    break;
                }
                nb.push(n);
            }
        }
        if !is_max {
            continue;
        }
        let base = nb.iter().map(|&n| odf[n]).fold(odf[m], f64::min);
        let mut t = Mat3::zeros();
        t += axis * axis.transpose() * (odf[m] - base);
        for &n in &nb {
            let d = dirs.get(n);
            t += d * d.transpose() * (odf[n] - base);
        }
        let direction = if t.norm() > 0.0 {
            let eig = SymmetricEigen::new(t);
            let k = eig.eigenvalues.imax();
            let v: Vec3 = eig.eigenvectors.column(k).into_owned();
            canonical(v.normalize())
        } else {
            *axis
        };
        peaks.push(Peak { direction, index: m, value: odf[m] });
    }
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value));
    peaks
}

/// Default peak neighborhood for a direction set: a little over twice the
/// typical spacing between directions.
pub fn default_peak_neighborhood(dirs: &DirectionSet) -> f64 {
    let spacing = (2.0 * PI / dirs.len() as f64).sqrt();
    (2.2 * spacing).min(PI / 4.0)
}

/// Refined axis of the strongest FRT peak of a raw signal.
pub fn principal_fiber(signal: &[f64], dirs: &DirectionSet, band: f64) -> Result<Option<Vec3>> {
    let odf = funk_radon(signal, dirs, band)?;
    let peaks = odf_peaks(&odf, dirs, default_peak_neighborhood(dirs));
    Ok(peaks.first().map(|p| p.direction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn brute_min_angle(d: &DirectionSet) -> f64 {
        let mut best = f64::MAX;
        for i in 0..d.len() {
            for j in (i + 1)..d.len() {
                let c = d.get(i).dot(d.get(j)).abs().min(1.0);
                best = best.min(c.acos());
            }
        }
        best
    }

    #[test]
    fn single_direction_is_the_pole() {
        for seed in [0, 1, 99] {
            let d = DirectionSet::generate(1, seed).unwrap();
            assert_eq!(d.as_slice(), &[Vec3::new(0.0, 0.0, 1.0)]);
        }
    }

    #[test]
    fn zero_directions_rejected() {
        assert!(matches!(DirectionSet::generate(0, 0), Err(LordError::InvalidArgument(_))));
    }

    #[test]
    fn three_directions_spread_out() {
        let d = DirectionSet::generate(3, 0).unwrap();
        assert!(brute_min_angle(&d).to_degrees() > 40.0);
    }

    #[test]
    fn hundred_directions_min_angle() {
        let d = DirectionSet::generate(100, 0).unwrap();
        let a = brute_min_angle(&d);
        assert!(a.to_degrees() >= 10.0, "min angle {}", a.to_degrees());
        assert_abs_diff_eq!(a, d.min_angle(), epsilon = 1e-15);
    }

    #[test]
    fn generated_sets_are_canonical_unit_and_deterministic() {
        for n in [2, 7, 30, 90, 100] {
            let a = DirectionSet::generate(n, 5).unwrap();
            let b = DirectionSet::generate(n, 5).unwrap();
            assert_eq!(a, b);
            for v in a.iter() {
                assert!((v.norm() - 1.0).abs() <= 1e-12);
                assert_eq!(canonical(*v), *v);
                assert!(v.z >= 0.0);
            }
        }
    }

    #[test]
    fn duplicate_lines_rejected() {
        let r = DirectionSet::new(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn text_round_trip() {
        let d = DirectionSet::generate(17, 3).unwrap();
        let back = DirectionSet::from_text(&d.to_text()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn watson_kappa_zero_is_uniform() {
        let d = DirectionSet::generate(20, 0).unwrap();
        let w = watson_weights(&d, 0.0, &Vec3::new(0.6, 0.0, 0.8)).unwrap();
        for x in w {
            assert_abs_diff_eq!(x, 1.0 / 20.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn watson_peak_and_antipodal_symmetry() {
        let d = DirectionSet::generate(30, 1).unwrap();
        let k = 4;
        let q = *d.get(k);
        let w = watson_weights(&d, 15.0, &q).unwrap();
        let wn = watson_weights(&d, 15.0, &(-q)).unwrap();
        assert_eq!(w, wn);
        for (i, x) in w.iter().enumerate() {
            if i != k {
                assert!(w[k] > *x);
            }
        }
    }

    #[test]
    fn watson_non_unit_query_rejected() {
        let d = DirectionSet::generate(5, 0).unwrap();
        assert!(watson_weights(&d, 1.0, &Vec3::new(0.0, 0.0, 1.1)).is_err());
        assert!(watson_weights(&d, -1.0, &Vec3::new(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn watson_midpoint_ties() {
        // six directions: axes and two diagonals in the xy plane
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = DirectionSet::new(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(s, 0.0, s),
            Vec3::new(0.0, s, s),
            Vec3::new(s, -s, 0.0),
        ])
        .unwrap();
        let q = (d.get(0) + d.get(1)).normalize();
        let w = watson_weights(&d, 15.0, &q).unwrap();
        // scalar oracle written independently of the kernel
        let f: Vec<f64> = d.iter().map(|v| (15.0 * v.dot(&q).powi(2)).exp()).collect();
        let total: f64 = f.iter().sum();
        for i in 0..6 {
            assert_abs_diff_eq!(w[i], f[i] / total, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-12);
    }

    #[test]
    fn table_rows_are_stochastic() {
        let d = DirectionSet::generate(40, 2).unwrap();
        for kappa in [0.0, 1.0, 15.0, 30.0] {
            let t = WatsonTable::new(&d, kappa).unwrap();
            for m in 0..d.len() {
                let s: f64 = t.row(m).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_averages_at_kappa_zero() {
        let d = DirectionSet::generate(25, 0).unwrap();
        let t = WatsonTable::new(&d, 15.0).unwrap();
        let out = directional_smooth(&vec![2.5; 25], &t).unwrap();
        for v in out {
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-12);
        }
        let sig: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let mean = sig.iter().sum::<f64>() / 25.0;
        let t0 = WatsonTable::new(&d, 0.0).unwrap();
        for v in directional_smooth(&sig, &t0).unwrap() {
            assert_abs_diff_eq!(v, mean, epsilon = 1e-12);
        }
        assert!(directional_smooth(&sig[..3], &t0).is_err());
    }

    #[test]
    fn smoothed_delta_decreases_with_angle() {
        let d = DirectionSet::generate(100, 0).unwrap();
        let t = WatsonTable::new(&d, 15.0).unwrap();
        let mut delta = vec![0.0; 100];
        delta[7] = 1.0;
        let out = directional_smooth(&delta, &t).unwrap();
        // oracle: each output is exp(15 c²)/Σ_i exp(15 (ν_i·ν_m)²)
        let center = d.get(7);
        let mut by_angle: Vec<(f64, f64)> = (0..100)
            .map(|m| {
                let q = d.get(m);
                let num = (15.0 * center.dot(q).powi(2)).exp();
                let den: f64 = d.iter().map(|v| (15.0 * v.dot(q).powi(2)).exp()).sum();
                assert_abs_diff_eq!(out[m], num / den, epsilon = 1e-14);
                (line_angle(center, q), out[m])
            })
            .collect();
        by_angle.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(by_angle[0].0, 0.0);
        let peak = out[7];
        assert!(out.iter().all(|&v| v <= peak));
        // decreasing with angle, up to the normalizer varying with the center
        let near: Vec<f64> = by_angle.iter().take(10).map(|x| x.1).collect();
        for w in near.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn smoothed_peak_nondecreasing_in_kappa() {
        let d = DirectionSet::generate(100, 0).unwrap();
        let mut delta = vec![0.0; 100];
        delta[11] = 1.0;
        let mut last = 0.0;
        for kappa in [0.0, 5.0, 15.0, 30.0] {
            let t = WatsonTable::new(&d, kappa).unwrap();
            let v = directional_smooth(&delta, &t).unwrap()[11];
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn frt_of_isotropic_is_ones() {
        let d = DirectionSet::generate(100, 0).unwrap();
        let odf = funk_radon(&vec![1.0; 100], &d, DEFAULT_FRT_BAND).unwrap();
        assert!(odf.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn frt_rejects_bad_band() {
        let d = DirectionSet::generate(10, 0).unwrap();
        assert!(funk_radon(&[1.0; 10], &d, 0.0).is_err());
        assert!(funk_radon(&[1.0; 10], &d, 2.0).is_err());
        // a tiny band on a sparse set leaves some circle empty
        let r = funk_radon(&[1.0; 10], &d, 1e-6);
        assert!(matches!(r, Err(LordError::DegenerateBand { .. })));
    }

    fn disc(dirs: &DirectionSet, axis: &Vec3) -> Vec<f64> {
        dirs.iter().map(|v| (-4.0 * v.dot(axis).powi(2)).exp()).collect()
    }

    #[test]
    fn frt_single_fiber_peaks_at_axis() {
        let d = DirectionSet::generate(100, 0).unwrap();
        let axis = Vec3::new(1.0, 2.0, 0.5).normalize();
        let odf = funk_radon(&disc(&d, &axis), &d, DEFAULT_FRT_BAND).unwrap();
        let best = (0..100).max_by(|&a, &b| odf[a].total_cmp(&odf[b])).unwrap();
        assert_eq!(best, d.nearest(&axis));
        let peak = principal_fiber(&disc(&d, &axis), &d, DEFAULT_FRT_BAND).unwrap().unwrap();
        assert!(line_angle(&peak, &axis).to_degrees() < 5.0);
    }

    #[test]
    fn frt_crossing_has_two_maxima() {
        let d = DirectionSet::generate(100, 0).unwrap();
        let a = Vec3::new(1.0, 0.0, 0.0);
        let b = Vec3::new(0.0, 1.0, 0.0);
        let sig: Vec<f64> = disc(&d, &a).iter().zip(disc(&d, &b)).map(|(x, y)| x + y).collect();
        let odf = funk_radon(&sig, &d, DEFAULT_FRT_BAND).unwrap();
        let peaks = odf_peaks(&odf, &d, default_peak_neighborhood(&d));
        assert!(peaks.len() >= 2);
        let p0 = peaks[0].direction;
        let p1 = peaks[1].direction;
        let near_a = line_angle(&p0, &a).min(line_angle(&p1, &a)).to_degrees();
        let near_b = line_angle(&p0, &b).min(line_angle(&p1, &b)).to_degrees();
        assert!(near_a < 10.0 && near_b < 10.0, "{near_a} {near_b}");
    }

    #[test]
    fn frt_rotation_equivariance_on_closed_set() {
        // 13 cube axes are closed under the quarter turn about z
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        let s3 = 1.0 / 3f64.sqrt();
        let vs = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(s2, s2, 0.0),
            Vec3::new(s2, -s2, 0.0),
            Vec3::new(s2, 0.0, s2),
            Vec3::new(-s2, 0.0, s2),
            Vec3::new(0.0, s2, s2),
            Vec3::new(0.0, -s2, s2),
            Vec3::new(s3, s3, s3),
            Vec3::new(-s3, s3, s3),
            Vec3::new(s3, -s3, s3),
            Vec3::new(-s3, -s3, s3),
        ];
        let d = DirectionSet::new(vs).unwrap();
        let rot = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        // perm[m] = index of R ν_m
        let perm: Vec<usize> = d.iter().map(|v| d.nearest(&(rot * v))).collect();
        for (m, &p) in perm.iter().enumerate() {
            assert!(d.get(p).dot(&(rot * d.get(m))).abs() > 1.0 - 1e-12);
        }
        let sig: Vec<f64> = (0..13).map(|i| 1.0 + (i as f64 * 1.7).sin().abs()).collect();
        // (signal∘R)[m] = signal[index of R ν_m]
        let rotated: Vec<f64> = perm.iter().map(|&p| sig[p]).collect();
        let lhs = funk_radon(&rotated, &d, DEFAULT_FRT_BAND).unwrap();
        let base = funk_radon(&sig, &d, DEFAULT_FRT_BAND).unwrap();
        for m in 0..13 {
            assert_abs_diff_eq!(lhs[m], base[perm[m]], epsilon = 1e-14);
        }
    }

    #[test]
    fn antipodal_invariance_of_frt_and_weights() {
        let d = DirectionSet::generate(60, 0).unwrap();
        let flipped: Vec<Vec3> = d.iter().enumerate().map(|(i, v)| if i % 2 == 0 { -v } else { *v }).collect();
        let d2 = DirectionSet::new(flipped).unwrap();
        assert_eq!(d, d2);
        let q = Vec3::new(0.3, -0.4, 0.866).normalize();
        let w1 = watson_weights(&d, 15.0, &q).unwrap();
        let w2 = watson_weights(&d, 15.0, &-q).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn gfa_cases() {
        assert_eq!(gfa(&[3.0; 10]).unwrap(), 0.0);
        assert!(matches!(gfa(&[0.0; 10]), Err(LordError::UndefinedGfa)));
        let s: Vec<f64> = (0..50).map(|i| ((i * 7919) % 97) as f64 / 97.0 + 0.01).collect();
        let twice: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        assert_abs_diff_eq!(gfa(&s).unwrap(), gfa(&twice).unwrap(), epsilon = 1e-14);
        let mut delta = vec![0.0; 100];
        delta[0] = 1.0;
        // std/rms oracle: mean 1/N, std sqrt(N-1)/N, rms 1/sqrt(N)
        let n = 100f64;
        let expected = ((n - 1.0) / n).sqrt();
        assert_abs_diff_eq!(gfa(&delta).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 0.99498743710662, epsilon = 1e-12);
    }
}
