//! Loads a JSON run configuration, overrides a field and registers the
//! phantom pair it names by default.
//!
//! cargo run --release --example config_file -- configs/phantom.json

use lord::config::RunConfig;
use lord::optimizer::register;
use lord::phantom::builtin_experiment;

fn main() -> lord::Result<()> {
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::phantom(),
    };
    cfg.schedule.truncate(2);
    cfg.lambda = 5e-4;
    cfg.validate()?;
    println!("{}", cfg.to_json());
    let pair = builtin_experiment("straight_wavy_bounded")?;
    let reg = register(&pair.moving, &pair.target, &cfg.schedule()?, &cfg.register_options(true), None)?;
    println!(
        "nmi {:.5} -> {:.5} after {} steps",
        reg.initial_nmi().unwrap_or(f64::NAN),
        reg.final_nmi().unwrap_or(f64::NAN),
        reg.steps.len()
    );
    Ok(())
}
