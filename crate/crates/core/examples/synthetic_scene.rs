//! Generate one synthetic scene (views, coarse input set, RoI) and save it.
//!
//!     cargo run --release --example synthetic_scene -- scene_dir [seed]

use splatlens::synth::{generate_scene, SynthConfig};

fn main() -> splatlens::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "scene".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let scene = generate_scene(seed, &SynthConfig::default())?;
    scene.save(&dir)?;
    println!("{} views at {}px, {} low-res", scene.cameras.len(), scene.cameras[0].width, scene.low_res_cameras[0].width);
    println!("coarse set: {} gaussians, {:.2} dB on the context views", scene.g_input.len(), scene.input_psnr);
    for (i, m) in scene.roi.masks.iter().enumerate() {
        println!("view {i}: {} RoI pixels, crop {:?}", m.count(), scene.roi.crops[i]);
    }
    Ok(())
}
