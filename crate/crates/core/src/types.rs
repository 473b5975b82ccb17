//! Scene data model: Gaussians, tagged Gaussian sets, pinhole cameras,
//! images and masks.
//!
//! Image coordinates follow the convention that pixel `(x, y)` has its
//! center at the continuous coordinate `(x, y)`. Camera frames are
//! x-right, y-down, z-forward.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this (camera-frame z) are treated as behind the camera.
pub const NEAR_PLANE: f64 = 1e-4;

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Normalizes a `(w, x, y, z)` quaternion.
///
/// Quaternions already at unit norm (to a few ulps) are returned unchanged,
/// which makes repeated normalization an exact no-op.
pub fn quat_normalize(q: Quat) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return q;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_to_rotation(q: Quat) -> Matrix3<f64> {
    let [w, x, y, z] = quat_normalize(q);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SourceTag {
    Background = 0,
    RoiInput = 1,
    PixelSpawned = 2,
    Densified = 3,
}

impl SourceTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SourceTag::Background),
            1 => Some(SourceTag::RoiInput),
            2 => Some(SourceTag::PixelSpawned),
            3 => Some(SourceTag::Densified),
            _ => None,
        }
    }
}

/// One anisotropic Gaussian. Opacity is stored as a logit and scale as a log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    pub opacity_logit: f64,
    pub log_scale: Vector3<f64>,
    pub rotation: Quat,
    /// Degree-0 RGB color, unclamped.
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn new(mu: Vector3<f64>, opacity: f64, scale: Vector3<f64>, rotation: Quat, color: Vector3<f64>) -> Self {
        Gaussian3D {
            mu,
            opacity_logit: logit(opacity),
            log_scale: scale.map(f64::ln),
            rotation: quat_normalize(rotation),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        logistic(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_scale_rotation(&self.log_scale, self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.log_scale.iter().all(|v| v.is_finite() && v.exp().is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
    }

    /// Parameters in the canonical 14-value order
    /// `(mu:3, opacity_logit:1, log_scale:3, rotation:4, color:3)`.
    pub fn to_params(&self) -> [f64; 14] {
        let mut p = [0.0; 14];
        p[0..3].copy_from_slice(self.mu.as_slice());
        p[3] = self.opacity_logit;
        p[4..7].copy_from_slice(self.log_scale.as_slice());
        p[7..11].copy_from_slice(&self.rotation);
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        Gaussian3D {
            mu: Vector3::new(p[0], p[1], p[2]),
            opacity_logit: p[3],
            log_scale: Vector3::new(p[4], p[5], p[6]),
            rotation: [p[7], p[8], p[9], p[10]],
            color: Vector3::new(p[11], p[12], p[13]),
        }
    }
}

/// Σ = R diag(s²) Rᵀ.
pub fn covariance_from_scale_rotation(log_scale: &Vector3<f64>, rotation: Quat) -> Result<Matrix3<f64>> {
    if !log_scale.iter().all(|v| v.is_finite()) || !rotation.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(0, "non-finite scale or rotation"));
    }
    let qn = rotation.iter().map(|v| v * v).sum::<f64>();
    if qn == 0.0 {
        return Err(Error::invalid(0, "zero quaternion"));
    }
    let s = log_scale.map(f64::exp);
    if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::invalid(0, "scale overflow"));
    }
    let r = quat_to_rotation(rotation);
    let m = r * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Ordered Gaussians with one provenance tag per element.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian3D>,
    tags: Vec<SourceTag>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tag(gaussians: Vec<Gaussian3D>, tag: SourceTag) -> Self {
        let tags = vec![tag; gaussians.len()];
        GaussianSet { gaussians, tags }
    }

    pub fn from_parts(gaussians: Vec<Gaussian3D>, tags: Vec<SourceTag>) -> Result<Self> {
        if gaussians.len() != tags.len() {
            return Err(Error::shape(format!(
                "{} gaussians but {} tags",
                gaussians.len(),
                tags.len()
            )));
        }
        Ok(GaussianSet { gaussians, tags })
    }

    pub fn push(&mut self, g: Gaussian3D, tag: SourceTag) {
        self.gaussians.push(g);
        self.tags.push(tag);
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        &mut self.gaussians
    }

    pub fn tags(&self) -> &[SourceTag] {
        &self.tags
    }

    pub fn get(&self, i: usize) -> (&Gaussian3D, SourceTag) {
        (&self.gaussians[i], self.tags[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Gaussian3D, SourceTag)> {
        self.gaussians.iter().zip(self.tags.iter().copied())
    }

    pub fn retag(&mut self, tag: SourceTag) {
        self.tags.iter_mut().for_each(|t| *t = tag);
    }

    pub fn count_tag(&self, tag: SourceTag) -> usize {
        self.tags.iter().filter(|t| **t == tag).count()
    }

    /// Elements at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        GaussianSet {
            gaussians: indices.iter().map(|&i| self.gaussians[i]).collect(),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
        }
    }

    /// Partitions into `(matching, rest)`, preserving relative order within each part.
    pub fn split_by_tag(&self, pred: impl Fn(SourceTag) -> bool) -> (GaussianSet, GaussianSet) {
        self.partition(|_, tag| pred(tag))
    }

    pub fn partition(&self, pred: impl Fn(usize, SourceTag) -> bool) -> (GaussianSet, GaussianSet) {
        let mut yes = GaussianSet::new();
        let mut no = GaussianSet::new();
        for (i, (g, t)) in self.iter().enumerate() {
            if pred(i, t) {
                yes.push(*g, t);
            } else {
                no.push(*g, t);
            }
        }
        (yes, no)
    }

    /// Concatenation `a ++ b`.
    pub fn merge(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
        let mut out = a.clone();
        out.extend(b);
        out
    }

    pub fn extend(&mut self, other: &GaussianSet) {
        self.gaussians.extend_from_slice(&other.gaussians);
        self.tags.extend_from_slice(&other.tags);
    }

    /// Renormalizes every quaternion.
    pub fn normalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            g.rotation = quat_normalize(g.rotation);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::invalid(i, "non-finite gaussian parameters"));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with an OpenCV-style world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    #[serde(with = "mat4_row_major")]
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

mod mat4_row_major {
    use nalgebra::Matrix4;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix4<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut v = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                v.push(m[(r, c)]);
            }
        }
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix4<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 16 {
            return Err(serde::de::Error::custom(format!(
                "world_to_camera needs 16 values, got {}",
                v.len()
            )));
        }
        Ok(Matrix4::from_row_slice(&v))
    }
}

/// Result of projecting a world point. `behind` is set when the camera-frame
/// depth is at or below [`NEAR_PLANE`]; `x`/`y` are then meaningless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub behind: bool,
}

impl Camera {
    pub fn new(world_to_camera: Matrix4<f64>, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Camera {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Camera at `eye` looking at `target`. `up` is the approximate world up
    /// (the image y axis points away from it).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&(-up)).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(m, fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn origin(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        let c = self.to_camera_frame(p);
        let depth = c.z;
        if !(depth > NEAR_PLANE) {
            return Projection {
                x: f64::NAN,
                y: f64::NAN,
                depth,
                behind: true,
            };
        }
        Projection {
            x: self.fx * c.x / depth + self.cx,
            y: self.fy * c.y / depth + self.cy,
            depth,
            behind: false,
        }
    }

    /// Unit world-space direction of the ray through image point `(x, y)`.
    pub fn ray_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        let d = Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        (self.rotation().transpose() * d).normalize()
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera for the `w`×`h` sub-image whose top-left pixel is `(x0, y0)`.
    /// The principal point may land outside the cropped frame.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Camera {
        Camera {
            cx: self.cx - x0 as f64,
            cy: self.cy - y0 as f64,
            width: w,
            height: h,
            ..*self
        }
    }

    /// Camera whose image is this one resampled by `factor` (e.g. 0.25 for a
    /// 4× smaller image, where each low-res pixel averages a block of
    /// full-res pixels).
    pub fn rescaled(&self, factor: f64, width: usize, height: usize) -> Camera {
        Camera {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            width,
            height,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config("camera principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera resolution must be nonzero".into()));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("camera transform must be finite".into()));
        }
        let r = self.rotation();
        let dev = (r * r.transpose() - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(Error::Config(format!("camera rotation not orthonormal (deviation {dev:e})")));
        }
        let bottom = self.world_to_camera.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Config("camera transform must be rigid".into()));
        }
        Ok(())
    }
}

/// Dense row-major image with interleaved channels; pixel `(x, y)` channel
/// `c` lives at `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                out.pixel_mut(x, y).copy_from_slice(self.pixel(x0 + x, y0 + y));
            }
        }
        out
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        let w = self.width / factor;
        let h = self.height / factor;
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.pixel(x * factor + dx, y * factor + dy).to_vec();
                        for (o, s) in out.pixel_mut(x, y).iter_mut().zip(src) {
                            *o += s * norm;
                        }
                    }
                }
            }
        }
        out
    }

    /// Rounds every value to the nearest multiple of 1/255 in [0, 1].
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Binary image mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_rect(width: usize, height: usize, rect: Rect) -> Self {
        let mut m = Mask::new(width, height);
        for y in rect.y0..(rect.y0 + rect.h).min(height) {
            for x in rect.x0..(rect.x0 + rect.w).min(width) {
                m.set(x, y, true);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        let mut out = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn bounding_rect(&self) -> Option<Rect> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect {
            x0,
            y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }
}

/// Axis-aligned pixel rectangle `[x0, x0+w) × [y0, y0+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }
}

/// An observed view: RGB image, RoI mask and camera.
#[derive(Debug, Clone)]
pub struct ImageView {
    pub rgb: Image,
    pub mask: Mask,
    pub camera: Camera,
}

impl ImageView {
    pub fn new(rgb: Image, mask: Mask, camera: Camera) -> Result<Self> {
        if rgb.channels != 3 {
            return Err(Error::shape("view image must have 3 channels"));
        }
        if rgb.width != mask.width || rgb.height != mask.height {
            return Err(Error::shape(format!(
                "mask {}x{} does not match image {}x{}",
                mask.width, mask.height, rgb.width, rgb.height
            )));
        }
        if camera.width != rgb.width || camera.height != rgb.height {
            return Err(Error::shape("camera resolution does not match image"));
        }
        Ok(ImageView { rgb, mask, camera })
    }
}
