//! Draws a blueprint by hand (a curved tract crossing a straight one), saves
//! it as text and renders the image with noise.
//!
//! cargo run --release --example custom_blueprint

use std::sync::Arc;

use lord::phantom::{synthesize, Blueprint, DEFAULT_ISO_LEVEL, TRACT_WIDTH};
use lord::sphere::DirectionSet;
use lord::Vec3;

fn main() -> lord::Result<()> {
    let mut bp = Blueprint::new([24, 24, 1])?;
    let arc: Vec<Vec3> = (0..=32)
        .map(|i| {
            let t = std::f64::consts::PI * i as f64 / 32.0;
            Vec3::new(11.5 + 8.0 * t.cos(), 4.0 + 12.0 * t.sin(), 0.0)
        })
        .collect();
    bp.add_tract(&arc, TRACT_WIDTH)?;
    bp.add_tract(&[Vec3::new(11.5, 0.0, 0.0), Vec3::new(11.5, 23.0, 0.0)], 2.0)?;
    bp.normalize_weights();

    let path = std::env::temp_dir().join("custom.blueprint");
    bp.save(&path)?;
    let back = Blueprint::load(&path)?;
    assert_eq!(back.to_text(), bp.to_text());

    let dirs = Arc::new(DirectionSet::generate(64, 0)?);
    let img = synthesize(&back, dirs, 0.02, DEFAULT_ISO_LEVEL, 7)?;
    let crossings = (0..24 * 24).filter(|&c| back.cell(c % 24, c / 24, 0).len() > 1).count();
    println!(
        "{} fiber cells, {crossings} crossing cells, image {:?}, blueprint at {}",
        back.n_fiber_cells(),
        img.dims(),
        path.display()
    );
    Ok(())
}
