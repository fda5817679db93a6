//! Renders Funk-Radon ODF glyphs of a phantom slice as SVG.
//!
//! cargo run --release --example frt_glyphs -- crossing_shifted glyphs.svg

use lord::glyph::frt_slice;
use lord::phantom::builtin_experiment;

fn main() -> lord::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "crossing_shifted".into());
    let out = args.next().unwrap_or_else(|| format!("{name}.svg"));
    let pair = builtin_experiment(&name)?;
    let glyphs = frt_slice(&pair.target, 1)?;
    std::fs::write(&out, glyphs.svg())?;
    let strong = glyphs.gfa.iter().filter(|g| **g > 0.2).count();
    println!("{out}: {} glyphs, {strong} with GFA above 0.2", glyphs.gfa.len());
    Ok(())
}
