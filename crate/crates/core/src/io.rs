//! On-disk formats.
//!
//! * Gaussian sets: 16-byte header (`b"SPLATLNS"`, u32 version, u32 zero),
//!   u64 count, then per Gaussian 14 little-endian f32 values
//!   (mu 3, opacity logit, log scale 3, quaternion wxyz, color 3) and a u8 tag.
//! * Cameras: JSON with `world_to_camera` (16 row-major values) and intrinsics.
//! * Images and masks: 8-bit PNG; masks are 0 outside, 255 inside.
//! * Float planes: `b"SLPF"`, u32 height, width, channels, then f32 data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::types::{Camera, Gaussian3D, GaussianSet, Image, Mask, SourceTag};

pub const GAUSSIAN_MAGIC: &[u8; 8] = b"SPLATLNS";
pub const GAUSSIAN_VERSION: u32 = 1;
pub const PLANE_MAGIC: &[u8; 4] = b"SLPF";

pub fn write_gaussian_set(set: &GaussianSet, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + set.len() * 57);
    buf.extend_from_slice(GAUSSIAN_MAGIC);
    buf.extend_from_slice(&GAUSSIAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for (g, tag) in set.iter() {
        for v in g.to_params() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.push(tag as u8);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_gaussian_set(mut r: impl Read) -> Result<GaussianSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[0..8] != GAUSSIAN_MAGIC {
        return Err(Error::Format("not a gaussian set file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != GAUSSIAN_VERSION {
        return Err(Error::Format(format!("unsupported gaussian set version {version}")));
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = 24 + count * 57;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "gaussian set of {count} elements needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut set = GaussianSet::new();
    for i in 0..count {
        let rec = &bytes[24 + i * 57..24 + (i + 1) * 57];
        let mut p = [0.0f64; 14];
        for (k, v) in p.iter_mut().enumerate() {
            *v = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        }
        let tag = SourceTag::from_u8(rec[56]).ok_or_else(|| Error::Format(format!("bad source tag {}", rec[56])))?;
        set.push(Gaussian3D::from_params(&p), tag);
    }
    Ok(set)
}

pub fn save_gaussian_set(set: &GaussianSet, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_gaussian_set(set, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_gaussian_set(path: impl AsRef<Path>) -> Result<GaussianSet> {
    read_gaussian_set(fs::File::open(path)?)
}

/// Rounds every parameter through f32, matching what a save/load cycle produces.
pub fn quantize_to_f32(set: &GaussianSet) -> GaussianSet {
    let gaussians = set
        .gaussians()
        .iter()
        .map(|g| Gaussian3D::from_params(&g.to_params().map(|v| v as f32 as f64)))
        .collect();
    GaussianSet::from_parts(gaussians, set.tags().to_vec()).expect("same length")
}

pub fn save_camera(camera: &Camera, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(camera)?)?;
    Ok(())
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let cam: Camera = serde_json::from_slice(&fs::read(path)?)?;
    cam.validate()?;
    Ok(cam)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_png_image(img: &Image) -> Result<RgbImage> {
    if img.channels != 3 {
        return Err(Error::shape("PNG export needs 3 channels"));
    }
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = img.pixel(x as usize, y as usize);
        *px = Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
    }
    Ok(out)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    rgb_to_png_image(img)?.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    mask_to_gray(mask).write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    rgb_to_png_image(img)?.save(path)?;
    Ok(())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Image::from_data(w as usize, h as usize, 3, data).expect("rgb buffer")
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&img))
}

fn mask_to_gray(mask: &Mask) -> GrayImage {
    let mut out = GrayImage::new(mask.width as u32, mask.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }]);
    }
    out
}

pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    mask_to_gray(mask).save(path)?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut m = Mask::new(w as usize, h as usize);
    for (x, y, px) in img.enumerate_pixels() {
        m.set(x as usize, y as usize, px.0[0] >= 128);
    }
    Ok(m)
}

pub fn write_planes(img: &Image, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.data.len() * 4);
    buf.extend_from_slice(PLANE_MAGIC);
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.channels as u32).to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_planes(mut r: impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != PLANE_MAGIC {
        return Err(Error::Format("not a float plane file".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if bytes.len() != 16 + h * w * c * 4 {
        return Err(Error::Format("float plane size mismatch".into()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Image::from_data(w, h, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{canonical_camera, random_visible_gaussians};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_file_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_visible_gaussians(&mut rng, 3, &canonical_camera(16));
        let mut buf = Vec::new();
        write_gaussian_set(&set, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 + 3 * 57);
        assert_eq!(&buf[0..8], b"SPLATLNS");
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 3);
        let mu_x = f32::from_le_bytes(buf[24..28].try_into().unwrap());
        assert_eq!(mu_x, set.gaussians()[0].mu.x as f32);
        assert_eq!(buf[24 + 56], SourceTag::RoiInput as u8);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        assert!(read_gaussian_set(&b"hello"[..]).is_err());
        let mut buf = Vec::new();
        write_gaussian_set(&GaussianSet::new(), &mut buf).unwrap();
        buf[16] = 2;
        assert!(matches!(read_gaussian_set(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn png_and_planes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 6.0;
        }
        img.quantize_u8();
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), img);

        let mut m = Mask::new(5, 4);
        m.set(1, 2, true);
        let p = dir.path().join("m.png");
        save_mask_png(&m, &p).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), m);

        let mut buf = Vec::new();
        write_planes(&img, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"SLPF");
        let back = read_planes(&buf[..]).unwrap();
        assert_eq!((back.width, back.height, back.channels), (5, 4, 3));
    }

    proptest! {
        #[test]
        fn gaussian_set_round_trip_after_f32(seed in 0u64..1000, n in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = quantize_to_f32(&random_visible_gaussians(&mut rng, n, &canonical_camera(16)));
            let mut buf = Vec::new();
            write_gaussian_set(&set, &mut buf).unwrap();
            let back = read_gaussian_set(&buf[..]).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
