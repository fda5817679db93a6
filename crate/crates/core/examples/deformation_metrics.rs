//! Draws a random diffeomorphic FFD and reports its curl, divergence and
//! coordinate distance from the identity, then saves the curl map.
//!
//! cargo run --release --example deformation_metrics -- 3

use lord::metrics::{step_reports, Identity};
use lord::phantom::synthetic_warp;
use lord::volume::save_lsdv;

fn main() -> lord::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dims = [16, 48, 24];
    let warp = synthetic_warp(dims, 10.0, 0.4, seed)?;
    let report = step_reports(&warp, &Identity, dims)?;
    print!("{}", report.to_csv());
    let path = std::env::temp_dir().join(format!("warp_{seed}_curl.lsdv"));
    save_lsdv(&path, &report.curl.to_image()?)?;
    println!("curl map at {}", path.display());
    Ok(())
}
