//! Rotates a single-fiber phantom with an exact linear FFD and checks that the
//! fiber directions of the warped image turn with it.
//!
//! cargo run --release --example warp_and_reorient -- 30

use lord::ffd::{warp_image, ControlGrid, HierarchicalFFD};
use lord::phantom::builtin_experiment;
use lord::sphere::{line_angle, principal_fiber, DEFAULT_FRT_BAND};
use lord::volume::DirectionalKernel;
use lord::Vec3;

fn main() -> lord::Result<()> {
    let deg: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30.0);
    let pair = builtin_experiment("straight_kissing")?;
    let (img, bp) = (&pair.moving, &pair.moving_blueprint);
    let dims = img.dims();
    let rot = *nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), deg.to_radians()).matrix();
    let center = Vec3::new(9.5, 9.5, 1.0);
    let ffd = HierarchicalFFD::from_grids(vec![ControlGrid::from_linear_map(dims, 4.0, 1, &rot, &center)?])?;
    let warped = warp_image(img, &ffd, DirectionalKernel::Watson(15.0), false)?;

    // output(x) reads the input at φ(x) = R(x - c) + c with fibers turned by Rᵀ
    let mut errs = Vec::new();
    for v in 0..warped.n_voxels() {
        let [x, y, z] = warped.voxel_coords(v);
        let src = ffd.deform(&Vec3::new(x as f64, y as f64, z as f64));
        let (fx, fy) = (src.x.floor(), src.y.floor());
        if fx < 0.0 || fy < 0.0 || fx + 1.0 > (dims[0] - 1) as f64 || fy + 1.0 > (dims[1] - 1) as f64 {
            continue;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        let corners = [(ix, iy), (ix + 1, iy), (ix, iy + 1), (ix + 1, iy + 1)];
        let cells: Vec<_> = corners.iter().map(|&(i, j)| bp.cell_at_voxel(i, j, z)).collect();
        if !cells.iter().all(|c| c.len() == 1) {
            continue;
        }
        let tangent = cells[0][0].tangent;
        if let Some(f) = principal_fiber(warped.voxel(v), warped.dirs(), DEFAULT_FRT_BAND)? {
            errs.push(line_angle(&f, &(rot.transpose() * tangent)).to_degrees());
        }
    }
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    let within = errs.iter().filter(|e| **e <= 5.0).count();
    println!(
        "rotation {deg} deg: {} voxels, mean reorientation error {mean:.2} deg, {within} within 5 deg",
        errs.len()
    );
    Ok(())
}
