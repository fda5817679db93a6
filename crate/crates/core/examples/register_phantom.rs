//! Registers one builtin phantom pair with the standard phantom schedule and
//! reports NMI, guard status and the FRT peak error on single-fiber voxels.
//!
//! cargo run --release --example register_phantom -- straight_wavy_bounded 15

use lord::experiment::run_pair;
use lord::optimizer::RegisterOptions;
use lord::phantom::builtin_experiment;

fn main() -> lord::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "straight_wavy_bounded".into());
    let kappa: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(15.0);
    let pair = builtin_experiment(&name)?;
    let t0 = std::time::Instant::now();
    let res = run_pair(&pair, kappa, &RegisterOptions::default())?;
    for s in &res.registration.steps {
        println!(
            "step {} delta {:.1}: nmi {:.5} -> {:.5}, {} iterations, {} evals, {}",
            s.step, s.delta, s.initial_nmi, s.final_nmi, s.iterations, s.evals, s.termination.as_str()
        );
    }
    println!(
        "{name}: nmi {:.5} -> {:.5}, guard {} (min det {:.3}), mean peak error {:.2} deg over {} voxels, {:.1} s",
        res.registration.initial_nmi().unwrap_or(f64::NAN),
        res.registration.final_nmi().unwrap_or(f64::NAN),
        if res.guard.pass { "pass" } else { "FAIL" },
        res.guard.min_det,
        res.mean_peak_error(),
        res.peak_errors.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
