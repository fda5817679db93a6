//! Parzen-window joint histograms, entropies and normalized mutual information.
//!
//! Bin `i` of an [`IntensityMap`] is centered at `a₁ + (i + ½)Δ`. A value is
//! spread over neighbouring bins with a cubic B-spline window of width `β`
//! bins, renormalized per sample so every sample deposits mass exactly 1.
//! `β = 0` selects hard nearest-bin assignment.

use std::fmt::Write as _;

use crate::error::{LordError, Result};

/// Largest supported Parzen scale, in bin widths.
pub const MAX_BETA: f64 = 5.0;
const WINDOW_CAP: usize = 24;

#[inline]
fn cubic_bspline(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let s = 2.0 - a;
        s * s * s / 6.0
    } else {
        0.0
    }
}

#[inline]
fn cubic_bspline_deriv(u: f64) -> f64 {
    let a = u.abs();
    let d = if a < 1.0 {
        -2.0 * a + 1.5 * a * a
    } else if a < 2.0 {
        let s = 2.0 - a;
        -0.5 * s * s
    } else {
        0.0
    };
    d * u.signum()
}

/// Parzen footprint of one value: weights over consecutive bins and their
/// derivatives with respect to the value itself.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub first: usize,
    pub len: usize,
    pub w: [f64; WINDOW_CAP],
    pub dw: [f64; WINDOW_CAP],
    /// True when the value was clamped into the range (its derivative is zero).
    pub clamped: bool,
}

impl Window {
    pub fn weights(&self) -> &[f64] {
        &self.w[..self.len]
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.dw[..self.len]
    }
}

/// Intensity range, bin count and Parzen scale shared by both histogram axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityMap {
    lo: f64,
    hi: f64,
    bins: usize,
    beta: f64,
}

impl IntensityMap {
    pub fn new(lo: f64, hi: f64, bins: usize, beta: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(LordError::invalid(format!("intensity range [{lo}, {hi}] is empty")));
        }
        if bins < 2 {
            return Err(LordError::invalid(format!("need at least 2 bins, got {bins}")));
        }
        if !(0.0..=MAX_BETA).contains(&beta) {
            return Err(LordError::invalid(format!("Parzen scale must lie in [0, {MAX_BETA}], got {beta}")));
        }
        Ok(IntensityMap { lo, hi, bins, beta })
    }

    /// Range `[min, max]` of `values` padded by two bins on each side.
    pub fn fitted(values: impl IntoIterator<Item = f64>, bins: usize, beta: f64) -> Result<Self> {
        if bins < 5 {
            return Err(LordError::invalid(format!("a padded range needs at least 5 bins, got {bins}")));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            return Err(LordError::invalid("no finite intensities to fit a range"));
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let delta = (hi - lo) / (bins - 4) as f64;
        IntensityMap::new(lo - 2.0 * delta, hi + 2.0 * delta, bins, beta)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    pub fn with_bins(&self, bins: usize) -> Result<Self> {
        IntensityMap::new(self.lo, self.hi, bins, self.beta)
    }

    /// Parzen footprint of `a`.
    pub fn window(&self, a: f64) -> Window {
        let delta = self.bin_width();
        let clamped = !(a >= self.lo && a <= self.hi);
        let a = if a.is_nan() { self.lo } else { a.clamp(self.lo, self.hi) };
        let t = (a - self.lo) / delta - 0.5;
        let kmax = self.bins as isize - 1;
        let mut win = Window { first: 0, len: 0, w: [0.0; WINDOW_CAP], dw: [0.0; WINDOW_CAP], clamped };
        let nearest = || (t.round() as isize).clamp(0, kmax) as usize;
        if self.beta == 0.0 {
            win.first = nearest();
            win.len = 1;
            win.w[0] = 1.0;
            return win;
        }
        let r = 2.0 * self.beta;
        let first = ((t - r).floor() as isize + 1).clamp(0, kmax);
        let last = ((t + r).ceil() as isize - 1).clamp(0, kmax);
        let mut s = 0.0;
        let mut ds = 0.0;
        for (l, i) in (first..=last).enumerate() {
            let u = (t - i as f64) / self.beta;
            let k = cubic_bspline(u);
            let dk = cubic_bspline_deriv(u) / (self.beta * delta);
            win.w[l] = k;
            win.dw[l] = dk;
            s += k;
            ds += dk;
        }
        win.first = first as usize;
        win.len = (last - first + 1).max(0) as usize;
        if s < 1e-200 {
            win.first = nearest();
            win.len = 1;
            win.w[0] = 1.0;
            win.dw[0] = 0.0;
            return win;
        }
        for l in 0..win.len {
            let k = win.w[l];
            win.w[l] = k / s;
            win.dw[l] = if clamped { 0.0 } else { (win.dw[l] * s - k * ds) / (s * s) };
        }
        win
    }
}

/// Joint histogram of `(a, b)` samples with its normalized density and marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDensity {
    bins: usize,
    counts: Vec<f64>,
    total: f64,
    p: Vec<f64>,
    p_a: Vec<f64>,
    p_b: Vec<f64>,
    /// Number of samples whose first value fell outside the range.
    pub clamped: usize,
}

impl JointDensity {
    /// Builds the density from precomputed windows.
    pub fn from_windows<'a>(bins: usize, pairs: impl IntoIterator<Item = (&'a Window, &'a Window)>) -> Result<Self> {
        let mut counts = vec![0.0; bins * bins];
        let mut n = 0usize;
        let mut clamped = 0usize;
        for (wa, wb) in pairs {
            n += 1;
            clamped += wa.clamped as usize;
            for (la, &x) in wa.weights().iter().enumerate() {
                let row = (wa.first + la) * bins + wb.first;
                for (lb, &y) in wb.weights().iter().enumerate() {
                    counts[row + lb] += x * y;
                }
            }
        }
        if n == 0 {
            return Err(LordError::invalid("joint histogram needs at least one sample"));
        }
        Ok(JointDensity::from_counts(bins, counts, clamped))
    }

    fn from_counts(bins: usize, counts: Vec<f64>, clamped: usize) -> Self {
        let total: f64 = counts.iter().sum();
        let p: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let mut p_a = vec![0.0; bins];
        let mut p_b = vec![0.0; bins];
        for i in 0..bins {
            for j in 0..bins {
                let v = p[i * bins + j];
                p_a[i] += v;
                p_b[j] += v;
            }
        }
        JointDensity { bins, counts, total, p, p_a, p_b, clamped }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Row-major density, row `i` indexing the first value.
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn p_at(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.bins + j]
    }

    pub fn marginal_a(&self) -> &[f64] {
        &self.p_a
    }

    pub fn marginal_b(&self) -> &[f64] {
        &self.p_b
    }

    /// `(H_a, H_b, H_ab)`.
    pub fn entropies(&self) -> (f64, f64, f64) {
        (shannon(&self.p_a), shannon(&self.p_b), shannon(&self.p))
    }

    pub fn nmi(&self) -> Result<f64> {
        let (ha, hb, hab) = self.entropies();
        if hab.abs() < 1e-12 {
            return Err(LordError::DegenerateDistribution { joint_entropy: hab });
        }
        Ok((ha + hb) / hab)
    }

    /// Table `D(i, j) = (NMI·ln p(i,j) − ln p_a(i)) / H_ab` such that
    /// `∂NMI/∂a_s = (1/M) Σ_ij ∂w_i(a_s)/∂a_s · w_j(b_s) · D(i, j)`.
    pub fn nmi_sensitivity(&self) -> Result<Vec<f64>> {
        let (ha, hb, hab) = self.entropies();
        if hab.abs() < 1e-12 {
            return Err(LordError::DegenerateDistribution { joint_entropy: hab });
        }
        let nmi = (ha + hb) / hab;
        let mut d = vec![0.0; self.bins * self.bins];
        for i in 0..self.bins {
            let lpa = if self.p_a[i] > 0.0 { self.p_a[i].ln() } else { 0.0 };
            for j in 0..self.bins {
                let p = self.p[i * self.bins + j];
                if p > 0.0 {
                    d[i * self.bins + j] = (nmi * p.ln() - lpa) / hab;
                }
            }
        }
        Ok(d)
    }

    /// Density as CSV, one row per first-axis bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.bins {
            let row: Vec<String> = (0..self.bins).map(|j| format!("{:e}", self.p_at(i, j))).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Joint histogram of sample pairs under a shared intensity map.
pub fn joint_histogram(samples: &[(f64, f64)], map: &IntensityMap) -> Result<JointDensity> {
    if samples.is_empty() {
        return Err(LordError::invalid("joint histogram needs at least one sample"));
    }
    let windows: Vec<(Window, Window)> = samples.iter().map(|&(a, b)| (map.window(a), map.window(b))).collect();
    JointDensity::from_windows(map.bins(), windows.iter().map(|(x, y)| (x, y)))
}

fn shannon(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Discrete Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    for (i, &v) in p.iter().enumerate() {
        if v < -1e-12 || !v.is_finite() {
            return Err(LordError::InvalidDensity { index: i, value: v });
        }
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(LordError::invalid(format!("density sums to {s}, not 1")));
    }
    Ok(shannon(p))
}

/// Differential entropy of a piecewise-constant density with cells of measure `cell`.
pub fn differential_entropy(p: &[f64], cell: f64) -> Result<f64> {
    Ok(entropy(p)? + cell.ln())
}

/// `(H_a + H_b) / H_ab`.
pub fn nmi(jd: &JointDensity) -> Result<f64> {
    jd.nmi()
}

/// `∂NMI/∂a` for one sample of the set `jd` was built from.
pub fn d_nmi_d_sample(jd: &JointDensity, sample: (f64, f64), map: &IntensityMap) -> Result<f64> {
    let d = jd.nmi_sensitivity()?;
    Ok(d_nmi_with_table(&d, jd.bins(), jd.total(), &map.window(sample.0), &map.window(sample.1)))
}

#[inline]
pub(crate) fn d_nmi_with_table(d: &[f64], bins: usize, total: f64, wa: &Window, wb: &Window) -> f64 {
    let mut acc = 0.0;
    for (la, &dx) in wa.derivatives().iter().enumerate() {
        if dx == 0.0 {
            continue;
        }
        let row = (wa.first + la) * bins + wb.first;
        let mut inner = 0.0;
        for (lb, &y) in wb.weights().iter().enumerate() {
            inner += y * d[row + lb];
        }
        acc += dx * inner;
    }
    acc / total
}
