//! Builds a builtin phantom pair and writes both images and blueprints.
//!
//! cargo run --release --example phantom_pair -- crossing_shifted /tmp/out

use std::path::PathBuf;

use lord::phantom::{builtin_experiment, EXPERIMENTS};
use lord::volume::save_lsdv;

fn main() -> lord::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| EXPERIMENTS[2].into());
    let out: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let pair = builtin_experiment(&name)?;
    println!(
        "{name}: {:?} voxels x {} directions; fiber cells {} (moving) / {} (target); {} moving tracts",
        pair.moving.dims(),
        pair.moving.n_dirs(),
        pair.moving_blueprint.n_fiber_cells(),
        pair.target_blueprint.n_fiber_cells(),
        pair.moving_tracts.len()
    );
    std::fs::create_dir_all(&out)?;
    for (role, img, bp) in [("moving", &pair.moving, &pair.moving_blueprint), ("target", &pair.target, &pair.target_blueprint)] {
        let path = out.join(format!("{name}_{role}.lsdv"));
        save_lsdv(&path, img)?;
        bp.save(path.with_extension("blueprint"))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
