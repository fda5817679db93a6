//! ODF glyph plots of one axial slice.
//!
//! Each voxel's raw signal is turned into an ODF by the Funk-Radon transform.
//! The glyph is the in-plane profile of that ODF: at evenly spaced in-plane
//! angles the ODF is read through narrow Watson weights and used as a radius.
//! Glyphs are colored from blue (isotropic) to red by the GFA of the raw signal.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{LordError, Result};
use crate::sphere::{funk_radon, gfa, watson_weights, DEFAULT_FRT_BAND};
use crate::volume::SpatioDirectionalImage;
use crate::Vec3;

/// Pixels per voxel in the SVG.
pub const CELL_PX: f64 = 20.0;
const PROFILE_SAMPLES: usize = 48;
const PROFILE_KAPPA: f64 = 30.0;

/// Glyph data of one slice.
#[derive(Clone, Debug)]
pub struct GlyphSlice {
    pub dims: [usize; 2],
    pub z: usize,
    /// Per voxel (x fastest): GFA and the max-normalized ODF over the direction set.
    pub gfa: Vec<f64>,
    pub odfs: Vec<Vec<f64>>,
    /// Per voxel: ODF radius at the in-plane sample angles.
    pub profiles: Vec<Vec<f64>>,
}

/// Six-digit decimal with trailing zeros trimmed, so output diffs cleanly.
fn num(v: f64) -> String {
    let s = format!("{:.6}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

pub fn frt_slice(img: &SpatioDirectionalImage, z: usize) -> Result<GlyphSlice> {
    let [nx, ny, nz] = img.dims();
    if z >= nz {
        return Err(LordError::invalid(format!("slice {z} outside 0..{nz}")));
    }
    let dirs = img.dirs();
    let weights: Vec<Vec<f64>> = (0..PROFILE_SAMPLES)
        .map(|j| {
            let t = 2.0 * PI * j as f64 / PROFILE_SAMPLES as f64;
            watson_weights(dirs, PROFILE_KAPPA, &Vec3::new(t.cos(), t.sin(), 0.0))
        })
        .collect::<Result<_>>()?;
    let mut out = GlyphSlice { dims: [nx, ny], z, gfa: Vec::new(), odfs: Vec::new(), profiles: Vec::new() };
    for y in 0..ny {
        for x in 0..nx {
            let signal = img.voxel(img.voxel_index(x, y, z));
            let odf = funk_radon(signal, dirs, DEFAULT_FRT_BAND)?;
            let g = gfa(signal).unwrap_or(0.0);
            let profile = weights.iter().map(|w| w.iter().zip(&odf).map(|(a, b)| a * b).sum()).collect();
            out.gfa.push(g);
            out.odfs.push(odf);
            out.profiles.push(profile);
        }
    }
    Ok(out)
}

impl GlyphSlice {
    pub fn svg(&self) -> String {
        let [nx, ny] = self.dims;
        let (w, h) = (nx as f64 * CELL_PX, ny as f64 * CELL_PX);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
            num(w),
            num(h),
            num(w),
            num(h)
        );
        let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"black\"/>");
        let r_max = 0.45 * CELL_PX;
        for (v, profile) in self.profiles.iter().enumerate() {
            let (x, y) = (v % nx, v / nx);
            let cx = (x as f64 + 0.5) * CELL_PX;
            // image y grows upward
            let cy = h - (y as f64 + 0.5) * CELL_PX;
            let pts: Vec<String> = profile
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let t = 2.0 * PI * j as f64 / profile.len() as f64;
                    format!("{},{}", num(cx + r_max * r * t.cos()), num(cy - r_max * r * t.sin()))
                })
                .collect();
            let g = self.gfa[v].clamp(0.0, 1.0);
            let color = format!("rgb({},{},{})", (255.0 * g).round(), (80.0 * (1.0 - g)).round() + 40.0, (255.0 * (1.0 - g)).round());
            let _ = writeln!(s, "<polygon points=\"{}\" fill=\"{color}\" stroke=\"none\"/>", pts.join(" "));
        }
        s.push_str("</svg>\n");
        s
    }

    /// `x,y,gfa,odf_0,…` with one row per voxel.
    pub fn csv(&self) -> String {
        let n = self.odfs.first().map_or(0, |o| o.len());
        let mut s = String::from("x,y,gfa");
        for i in 0..n {
            let _ = write!(s, ",odf_{i}");
        }
        s.push('\n');
        for (v, odf) in self.odfs.iter().enumerate() {
            let _ = write!(s, "{},{},{}", v % self.dims[0], v / self.dims[0], num(self.gfa[v]));
            for o in odf {
                let _ = write!(s, ",{}", num(*o));
            }
            s.push('\n');
        }
        s
    }
}
