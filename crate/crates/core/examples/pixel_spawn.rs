//! Spawn one Gaussian per masked pixel at the coarse set's median depth.

use splatlens::pipeline::{crop_view, working_rect};
use splatlens::pixel::{spawn_pixel_gaussians, ALPHA_INIT, SCALE_INIT};
use splatlens::raster::{rasterize, RasterOptions};
use splatlens::synth::{generate_scene, SynthConfig};

fn main() -> splatlens::Result<()> {
    let scene = generate_scene(5, &SynthConfig::default())?;
    let views = scene.high_res_views()?;
    let mut crops = Vec::new();
    let mut depths = Vec::new();
    for i in 0..2 {
        let Some(rect) = working_rect(&scene.roi, i) else { continue };
        let v = crop_view(&views[i], &scene.roi.masks[i], rect)?;
        depths.push(rasterize(&scene.g_input, &v.camera, &RasterOptions::default())?.median_depth);
        crops.push(v);
    }
    let spawn = spawn_pixel_gaussians(&crops, &depths, ALPHA_INIT, SCALE_INIT)?;
    println!("{} pixel gaussians, {} masked pixels without depth", spawn.set.len(), spawn.skipped);
    if let (Some((g, _)), Some(src)) = (spawn.set.iter().next(), spawn.sources.first()) {
        println!("first: view {} pixel ({}, {}) at {:?}", src.0, src.1, src.2, g.mu.as_slice());
    }
    Ok(())
}
