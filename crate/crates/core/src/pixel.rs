//! Pixel-guided Gaussians: one new Gaussian per masked high-resolution pixel,
//! placed on the pixel's ray at the coarse reconstruction's median depth.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::types::{Camera, Gaussian3D, GaussianSet, ImageView, SourceTag, IDENTITY_QUAT};

pub const ALPHA_INIT: f64 = 0.05;
pub const SCALE_INIT: f64 = 0.02;

/// Spawned Gaussians with the pixel each one came from.
#[derive(Debug, Clone)]
pub struct PixelSpawn {
    pub set: GaussianSet,
    /// `(view, x, y)` per spawned Gaussian.
    pub sources: Vec<(usize, usize, usize)>,
    /// Masked pixels without a rendered surface.
    pub skipped: usize,
}

/// World point on the ray through pixel `(x, y)` whose camera-frame depth is `depth`.
pub fn back_project(camera: &Camera, x: f64, y: f64, depth: f64) -> Vector3<f64> {
    let d = camera.ray_direction(x, y);
    let z_per_unit = (camera.rotation() * d).z;
    camera.origin() + d * (depth / z_per_unit)
}

/// Spawns one Gaussian per masked pixel with positive depth, in
/// (view, row, column) order. `depth_maps[i]` is the median depth of view `i`
/// as rendered by the rasterizer, row-major at the view's resolution.
pub fn spawn_pixel_gaussians(views: &[ImageView], depth_maps: &[Vec<f64>], alpha_init: f64, s_init: f64) -> Result<PixelSpawn> {
    if views.len() != depth_maps.len() {
        return Err(Error::shape(format!("{} views but {} depth maps", views.len(), depth_maps.len())));
    }
    let mut set = GaussianSet::new();
    let mut sources = Vec::new();
    let mut skipped = 0;
    for (i, (view, depth)) in views.iter().zip(depth_maps).enumerate() {
        let (w, h) = (view.mask.width, view.mask.height);
        if depth.len() != w * h {
            return Err(Error::shape(format!(
                "depth map {i} has {} values for a {w}x{h} mask",
                depth.len()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                if !view.mask.get(x, y) {
                    continue;
                }
                let d = depth[y * w + x];
                if !(d > 0.0) {
                    skipped += 1;
                    continue;
                }
                let mu = back_project(&view.camera, x as f64, y as f64, d);
                let c = view.rgb.pixel(x, y);
                let g = Gaussian3D::new(
                    mu,
                    alpha_init,
                    Vector3::repeat(s_init),
                    IDENTITY_QUAT,
                    Vector3::new(c[0], c[1], c[2]),
                );
                set.push(g, SourceTag::PixelSpawned);
                sources.push((i, x, y));
            }
        }
    }
    Ok(PixelSpawn { set, sources, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::canonical_camera;
    use crate::types::{Image, Mask};

    #[test]
    fn principal_point_pixel() {
        let cam = canonical_camera(16);
        let mut rgb = Image::new(16, 16, 3);
        rgb.pixel_mut(8, 8).copy_from_slice(&[0.2, 0.4, 0.6]);
        let mut mask = Mask::new(16, 16);
        mask.set(8, 8, true);
        let mut depth = vec![0.0; 256];
        depth[8 * 16 + 8] = 2.0;
        let view = ImageView::new(rgb, mask, cam).unwrap();
        let out = spawn_pixel_gaussians(&[view], &[depth], ALPHA_INIT, SCALE_INIT).unwrap();
        assert_eq!(out.set.len(), 1);
        let g = &out.set.gaussians()[0];
        assert!((g.mu - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        assert_eq!(g.color, Vector3::new(0.2, 0.4, 0.6));
        assert!((g.opacity() - 0.05).abs() < 1e-15);
        assert!((g.scale() - Vector3::repeat(0.02)).norm() < 1e-15);
        assert_eq!(g.rotation, IDENTITY_QUAT);
        assert_eq!(out.sources, vec![(0, 8, 8)]);
    }

    #[test]
    fn empty_masks_and_holes() {
        let cam = canonical_camera(8);
        let view = ImageView::new(Image::new(8, 8, 3), Mask::new(8, 8), cam).unwrap();
        let out = spawn_pixel_gaussians(&[view], &[vec![1.0; 64]], ALPHA_INIT, SCALE_INIT).unwrap();
        assert!(out.set.is_empty());

        let view = ImageView::new(Image::new(8, 8, 3), Mask::full(8, 8), cam).unwrap();
        let mut depth = vec![1.0; 64];
        depth[3] = 0.0;
        let out = spawn_pixel_gaussians(&[view], &[depth], ALPHA_INIT, SCALE_INIT).unwrap();
        assert_eq!((out.set.len(), out.skipped), (63, 1));
    }

    #[test]
    fn depth_resolution_mismatch() {
        let cam = canonical_camera(8);
        let view = ImageView::new(Image::new(8, 8, 3), Mask::full(8, 8), cam).unwrap();
        assert!(matches!(
            spawn_pixel_gaussians(&[view], &[vec![1.0; 10]], ALPHA_INIT, SCALE_INIT),
            Err(Error::Shape(_))
        ));
    }
}
