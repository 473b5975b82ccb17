//! Masked image-quality metrics.

use crate::error::{Error, Result};
use crate::types::{Image, Mask};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(pred: &Image, gt: &Image, mask: &Mask) -> Result<()> {
    if (pred.width, pred.height, pred.channels) != (gt.width, gt.height, gt.channels)
        || (mask.width, mask.height) != (gt.width, gt.height)
    {
        return Err(Error::shape("metric inputs differ in size"));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// PSNR over the masked pixels (all channels), for images in [0, 1], capped at 99 dB.
pub fn masked_psnr(pred: &Image, gt: &Image, mask: &Mask) -> Result<f64> {
    check(pred, gt, mask)?;
    let c = gt.channels;
    let mut se = 0.0;
    let mut n = 0usize;
    for (p, m) in mask.data.iter().enumerate() {
        if *m {
            for k in 0..c {
                let d = pred.data[p * c + k] - gt.data[p * c + k];
                se += d * d;
            }
            n += c;
        }
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Symmetric reflection (`d c b | a b c d | c b a`) of an index into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Separable Gaussian blur of a single-channel plane with reflected borders.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * plane[y * w + reflect(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Per-pixel SSIM map (channel mean) of two same-sized images.
pub fn ssim_map(pred: &Image, gt: &Image) -> Vec<f64> {
    let (w, h, c) = (gt.width, gt.height, gt.channels);
    let mut acc = vec![0.0; w * h];
    for k in 0..c {
        let x: Vec<f64> = (0..w * h).map(|p| pred.data[p * c + k]).collect();
        let y: Vec<f64> = (0..w * h).map(|p| gt.data[p * c + k]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (blur(&x, w, h), blur(&y, w, h));
        let (sxx, syy, sxy) = (blur(&xx, w, h), blur(&yy, w, h), blur(&xy, w, h));
        for p in 0..w * h {
            let vx = sxx[p] - mx[p] * mx[p];
            let vy = syy[p] - my[p] * my[p];
            let cxy = sxy[p] - mx[p] * my[p];
            let s = ((2.0 * mx[p] * my[p] + C1) * (2.0 * cxy + C2))
                / ((mx[p] * mx[p] + my[p] * my[p] + C1) * (vx + vy + C2));
            acc[p] += s / c as f64;
        }
    }
    acc
}

/// SSIM computed on the mask's bounding box and averaged over the masked pixels.
pub fn masked_ssim(pred: &Image, gt: &Image, mask: &Mask) -> Result<f64> {
    check(pred, gt, mask)?;
    let r = mask.bounding_rect().ok_or(Error::EmptyMask)?;
    let p = pred.crop(r.x0, r.y0, r.w, r.h);
    let g = gt.crop(r.x0, r.y0, r.w, r.h);
    let m = mask.crop(r.x0, r.y0, r.w, r.h);
    let map = ssim_map(&p, &g);
    let (s, n) = map
        .iter()
        .zip(&m.data)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok(s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean masked PSNR and SSIM over the views with nonempty masks.
/// Returns `None` when every mask is empty.
pub fn mean_masked_metrics(preds: &[Image], gts: &[Image], masks: &[Mask]) -> Result<Option<ViewMetrics>> {
    let mut ps = 0.0;
    let mut ss = 0.0;
    let mut n = 0;
    for ((p, g), m) in preds.iter().zip(gts).zip(masks) {
        if m.is_empty() {
            continue;
        }
        ps += masked_psnr(p, g, m)?;
        ss += masked_ssim(p, g, m)?;
        n += 1;
    }
    Ok((n > 0).then(|| ViewMetrics {
        psnr: ps / n as f64,
        ssim: ss / n as f64,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_images_cap() {
        let a = noise_image(16, 12, 1);
        let m = Mask::full(16, 12);
        assert_eq!(masked_psnr(&a, &a, &m).unwrap(), 99.0);
        assert!((masked_ssim(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_error_is_twenty_db() {
        let a = Image::filled(10, 10, &[0.5, 0.5, 0.5]);
        let mut b = a.clone();
        let mut m = Mask::new(10, 10);
        for y in 2..7 {
            for x in 3..9 {
                m.set(x, y, true);
                b.pixel_mut(x, y).iter_mut().for_each(|v| *v += 0.1);
            }
        }
        b.pixel_mut(0, 0)[0] = 1.0;
        assert!((masked_psnr(&b, &a, &m).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = noise_image(4, 4, 1);
        assert!(matches!(masked_psnr(&a, &a, &Mask::new(4, 4)), Err(Error::EmptyMask)));
        assert_eq!(mean_masked_metrics(&[a.clone()], &[a], &[Mask::new(4, 4)]).unwrap(), None);
    }

    /// Direct windowed SSIM: per pixel, Gaussian-weighted local statistics
    /// over the 11×11 neighbourhood with reflected borders.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let (w, h, c) = (a.width, a.height, a.channels);
        let r = 5isize;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for k in 0..c {
                    let (mut wsum, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                            let px = reflect(x as isize + dx, w);
                            let py = reflect(y as isize + dy, h);
                            let va = a.pixel(px, py)[k];
                            let vb = b.pixel(px, py)[k];
                            wsum += wt;
                            mx += wt * va;
                            my += wt * vb;
                            xx += wt * va * va;
                            yy += wt * vb * vb;
                            xy += wt * va * vb;
                        }
                    }
                    let (mx, my) = (mx / wsum, my / wsum);
                    let vx = xx / wsum - mx * mx;
                    let vy = yy / wsum - my * my;
                    let cv = xy / wsum - mx * my;
                    s += ((2.0 * mx * my + C1) * (2.0 * cv + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                }
                total += s / c as f64;
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn full_mask_matches_reference() {
        let a = noise_image(23, 17, 2);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.data.iter_mut().for_each(|v| *v = (*v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
        let m = Mask::full(23, 17);
        let s = masked_ssim(&b, &a, &m).unwrap();
        assert!((s - reference_ssim(&b, &a)).abs() < 1e-10);
        let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
        assert!((masked_psnr(&b, &a, &m).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }
}
