//! Draw a rectangle on one view, expand it to per-view masks and split the
//! coarse set into RoI and background Gaussians.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatlens::raster::RasterOptions;
use splatlens::roi::{roi_from_rect, select_roi_gaussians, RoiParams, DEFAULT_MIN_VIEWS, DEFAULT_TAU};
use splatlens::synth::{generate_scene, SynthConfig};
use splatlens::{io, Rect};

fn main() -> splatlens::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "roi_out".into());
    let scene = generate_scene(3, &SynthConfig::default())?;
    let side = scene.cameras[0].width / 4;
    let rect = Rect {
        x0: 3 * side / 2,
        y0: 3 * side / 2,
        w: side,
        h: side,
    };
    let params = RoiParams {
        crop_fraction: 0.25,
        ..RoiParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let roi = roi_from_rect(&scene.g_input, &scene.cameras, 0, rect, &params, Some(&mut rng))?;
    roi.save(&out)?;
    let views: Vec<_> = scene.cameras.iter().copied().zip(roi.masks.iter().cloned()).collect();
    let split = select_roi_gaussians(&scene.g_input, &views, DEFAULT_TAU, DEFAULT_MIN_VIEWS, &RasterOptions::default())?;
    println!("{} RoI gaussians, {} background", split.roi.len(), split.bg.len());
    for (i, m) in roi.masks.iter().enumerate() {
        io::save_mask_png(m, format!("{out}/preview_{i}.png"))?;
        println!("view {i}: {} pixels", m.count());
    }
    Ok(())
}
