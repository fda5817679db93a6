//! Registers the boundary-free straight-to-wavy pair with and without the
//! directional term and compares how much the straight tract is stretched.
//!
//! cargo run --release --example inherent_regularization

use lord::metrics::length_distortion;
use lord::optimizer::{register, RegisterOptions, Schedule};
use lord::phantom::builtin_experiment;

fn main() -> lord::Result<()> {
    let pair = builtin_experiment("straight_wavy_free")?;
    let tract = &pair.moving_tracts[0];
    for kappa in [15.0, 0.0] {
        let reg = register(&pair.moving, &pair.target, &Schedule::phantom(kappa)?, &RegisterOptions::default(), None)?;
        let d = length_distortion(&reg.ffd, tract)?;
        println!(
            "kappa {kappa:>4}: nmi {:.4} -> {:.4}, tract length change {:+.2}%",
            reg.initial_nmi().unwrap_or(f64::NAN),
            reg.final_nmi().unwrap_or(f64::NAN),
            100.0 * d
        );
    }
    Ok(())
}
