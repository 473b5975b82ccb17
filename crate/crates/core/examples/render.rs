//! Render a random Gaussian set and write RGB, depth and opacity.
//!
//!     cargo run --release --example render -- out_dir

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatlens::io;
use splatlens::raster::{rasterize, RasterOptions};
use splatlens::testing::{canonical_camera, random_visible_gaussians};

fn main() -> splatlens::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "render_out".into());
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cam = canonical_camera(128);
    let set = random_visible_gaussians(&mut rng, 60, &cam);
    let r = rasterize(&set, &cam, &RasterOptions::default())?;
    io::save_png(&r.rgb, format!("{out}/rgb.png"))?;
    io::write_planes(&r.depth_image(), std::fs::File::create(format!("{out}/depth.planes"))?)?;
    io::write_planes(&r.acc_image(), std::fs::File::create(format!("{out}/acc.planes"))?)?;
    io::save_gaussian_set(&set, format!("{out}/set.gs"))?;
    io::save_camera(&cam, format!("{out}/camera.json"))?;
    let covered = r.acc_opacity.iter().filter(|a| **a > 0.5).count();
    println!("{} gaussians, {covered}/{} pixels over half opacity", set.len(), cam.num_pixels());
    Ok(())
}
