//! Parzen joint histogram and NMI of a phantom pair before registration,
//! for a few bin counts and window widths.
//!
//! cargo run --release --example joint_density

use lord::density::{joint_histogram, IntensityMap};
use lord::phantom::builtin_experiment;

fn main() -> lord::Result<()> {
    let pair = builtin_experiment("sheared_30_45")?;
    let samples: Vec<(f64, f64)> = pair.moving.data().iter().copied().zip(pair.target.data().iter().copied()).collect();
    let selfs: Vec<(f64, f64)> = pair.target.data().iter().map(|&v| (v, v)).collect();
    for bins in [16, 50, 200] {
        for beta in [0.5, 1.0, 2.0] {
            let map = IntensityMap::fitted(samples.iter().flat_map(|&(a, b)| [a, b]), bins, beta)?;
            let pair_nmi = joint_histogram(&samples, &map)?.nmi()?;
            let self_nmi = joint_histogram(&selfs, &map)?.nmi()?;
            println!("bins {bins:>3} beta {beta}: nmi(moving, target) {pair_nmi:.4}, nmi(target, target) {self_nmi:.4}");
        }
    }
    Ok(())
}
