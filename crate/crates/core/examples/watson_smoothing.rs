//! Directional tools on one voxel: Watson smoothing at several
//! concentrations, the FRT ODF, GFA and peak extraction.
//!
//! cargo run --release --example watson_smoothing

use lord::phantom::{single_fiber_signal, DEFAULT_SHARPNESS};
use lord::sphere::{
    default_peak_neighborhood, directional_smooth, funk_radon, gfa, line_angle, odf_peaks, DirectionSet, WatsonTable,
    DEFAULT_FRT_BAND,
};
use lord::Vec3;

fn main() -> lord::Result<()> {
    let dirs = DirectionSet::generate(100, 0)?;
    let a = Vec3::new(1.0, 0.0, 0.0);
    let b = Vec3::new(0.0, 1.0, 0.0);
    let sa = single_fiber_signal(&a, &dirs, DEFAULT_SHARPNESS)?;
    let sb = single_fiber_signal(&b, &dirs, DEFAULT_SHARPNESS)?;
    let crossing: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| 0.5 * (x + y)).collect();

    for kappa in [0.0, 5.0, 15.0, 30.0] {
        let smooth = directional_smooth(&crossing, &WatsonTable::new(&dirs, kappa)?)?;
        println!("kappa {kappa:>4}: gfa {:.4}", gfa(&smooth)?);
    }
    let odf = funk_radon(&crossing, &dirs, DEFAULT_FRT_BAND)?;
    for p in odf_peaks(&odf, &dirs, default_peak_neighborhood(&dirs)).iter().take(2) {
        let err = line_angle(&p.direction, &a).min(line_angle(&p.direction, &b)).to_degrees();
        println!("peak {:.3} at {:?}, {err:.1} deg from the nearest fiber", p.value, p.direction.as_slice());
    }
    Ok(())
}
