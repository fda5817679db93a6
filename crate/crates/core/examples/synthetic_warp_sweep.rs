//! Runs one of the synthetic-warp sweeps (bins_sweep, kappa_sweep,
//! spatial_sweep) on a seeded phantom and prints the per-step table.
//!
//! cargo run --release --example synthetic_warp_sweep -- kappa_sweep 0

use lord::experiment::{run_sweep, sweep_csv, SweepKind, SynthWarpSetup};
use lord::optimizer::RegisterOptions;

fn main() -> lord::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = SweepKind::parse(&args.next().unwrap_or_else(|| "kappa_sweep".into()))?;
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let results = run_sweep(kind, &SynthWarpSetup::default(), seed, &RegisterOptions::default())?;
    print!("{}", sweep_csv(seed, &results));
    Ok(())
}
