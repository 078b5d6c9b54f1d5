//! Pinhole camera: pixel rays, water-plane ray casting and box bearings.
//!
//! Camera axes are x right, y down, z forward. The ship frame matches
//! [`crate::geo::BodyFramePoint`]: x forward, y port, z up, with the water
//! surface at z = 0. Orientation uses intrinsic Z(yaw)-Y(pitch)-X(roll)
//! rotations about the ship axes (right handed, so positive pitch lowers the
//! bow and positive roll lowers the starboard side).
//!
//! Pixel scale and focal length are kept separate, `f_px = fs * fl`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::BodyFramePoint;

/// Rays whose downward component is above `-HORIZON_EPS` never reach the water.
pub const HORIZON_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub u0: f64,
    pub v0: f64,
    /// Pixels per focal-length unit.
    pub fs: f64,
    pub fl: f64,
    pub image_w: u32,
    pub image_h: u32,
}

impl CameraIntrinsics {
    pub fn new(u0: f64, v0: f64, fs: f64, fl: f64, image_w: u32, image_h: u32) -> Result<Self> {
        let intr = Self {
            u0,
            v0,
            fs,
            fl,
            image_w,
            image_h,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fl > 0.0) {
            return Err(Error::InvalidInput(format!(
                "fs ({}) and fl ({}) must be positive",
                self.fs, self.fl
            )));
        }
        let (w, h) = (self.image_w as f64, self.image_h as f64);
        if !(self.u0 >= 0.0 && self.u0 < w && self.v0 >= 0.0 && self.v0 < h) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.u0, self.v0, self.image_w, self.image_h
            )));
        }
        Ok(())
    }

    pub fn focal_px(&self) -> f64 {
        self.fs * self.fl
    }

    /// Full horizontal field of view, radians.
    pub fn horizontal_fov(&self) -> f64 {
        let half_left = (self.u0 / self.focal_px()).atan();
        let half_right = ((self.image_w as f64 - self.u0) / self.focal_px()).atan();
        half_left + half_right
    }

    /// Copy with the pixel scale divided by `correction`.
    pub fn with_scale_correction(&self, correction: f64) -> Self {
        Self {
            fs: self.fs / correction,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// ship <- camera
    rotation: Matrix3<f64>,
    /// Camera origin in the ship frame, z is the mount height.
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "extrinsic rotation is not a proper rotation".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }
}

/// Maps camera axes (right, down, forward) onto ship axes (forward, port, up).
pub fn camera_to_body_axes() -> Matrix3<f64> {
    Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    )
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Angles in radians, mount offset in meters (ship frame).
pub fn build_extrinsics(roll: f64, pitch: f64, yaw: f64, mount: Vector3<f64>) -> CameraExtrinsics {
    let rotation = rot_z(yaw) * rot_y(pitch) * rot_x(roll) * camera_to_body_axes();
    CameraExtrinsics {
        rotation,
        translation: mount,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

pub fn pixel_to_ray(u: f64, v: f64, intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Ray {
    let cam = Vector3::new((u - intr.u0) / intr.fs, (v - intr.v0) / intr.fs, intr.fl);
    Ray {
        origin: extr.translation,
        direction: (extr.rotation * cam).normalize(),
    }
}

/// Projects a ship-frame point into pixel coordinates. `None` when the point
/// is behind the image plane.
pub fn project_point(
    p: &Vector3<f64>,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> Option<(f64, f64)> {
    let cam = extr.rotation.transpose() * (p - extr.translation);
    if cam.z <= 0.0 {
        return None;
    }
    let f = intr.focal_px();
    Some((intr.u0 + f * cam.x / cam.z, intr.v0 + f * cam.y / cam.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxUnits {
    #[default]
    Pixels,
    Normalized,
}

/// Axis-aligned box in center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub score: f64,
    #[serde(default)]
    pub units: BoxUnits,
}

fn one() -> f64 {
    1.0
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64, units: BoxUnits) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            w,
            h,
            score,
            units,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn pixels(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx, cy, w, h, 1.0, BoxUnits::Pixels)
    }

    pub fn normalized(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx, cy, w, h, 1.0, BoxUnits::Normalized)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h, self.score]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite box component".into()));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "box extents must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidInput(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if self.units == BoxUnits::Normalized
            && ![self.cx, self.cy, self.w, self.h]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidInput(
                "normalized box components must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_pixels(&self, image_w: u32, image_h: u32) -> Self {
        match self.units {
            BoxUnits::Pixels => *self,
            BoxUnits::Normalized => {
                let (w, h) = (image_w as f64, image_h as f64);
                Self {
                    cx: self.cx * w,
                    cy: self.cy * h,
                    w: self.w * w,
                    h: self.h * h,
                    score: self.score,
                    units: BoxUnits::Pixels,
                }
            }
        }
    }

    pub fn to_normalized(&self, image_w: u32, image_h: u32) -> Self {
        match self.units {
            BoxUnits::Normalized => *self,
            BoxUnits::Pixels => {
                let (w, h) = (image_w as f64, image_h as f64);
                Self {
                    cx: self.cx / w,
                    cy: self.cy / h,
                    w: self.w / w,
                    h: self.h / h,
                    score: self.score,
                    units: BoxUnits::Normalized,
                }
            }
        }
    }

    /// Clips the box to the image rectangle. `None` if nothing remains.
    pub fn clamp_to_image(&self, image_w: u32, image_h: u32) -> Option<Self> {
        let (iw, ih) = match self.units {
            BoxUnits::Pixels => (image_w as f64, image_h as f64),
            BoxUnits::Normalized => (1.0, 1.0),
        };
        let (x1, y1, x2, y2) = self.corners();
        let (x1, y1) = (x1.clamp(0.0, iw), y1.clamp(0.0, ih));
        let (x2, y2) = (x2.clamp(0.0, iw), y2.clamp(0.0, ih));
        if x2 <= x1 || y2 <= y1 {
            return None;
        }
        Some(Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
            ..*self
        })
    }
}

/// Casts the ray through the bottom-center of `bbox` onto the water plane.
pub fn raycast_to_water(
    bbox: &BoundingBox,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> Result<BodyFramePoint> {
    let b = bbox.to_pixels(intr.image_w, intr.image_h);
    let ray = pixel_to_ray(b.cx, b.cy + b.h / 2.0, intr, extr);
    if ray.direction.z >= -HORIZON_EPS {
        return Err(Error::HorizonRay);
    }
    let t = -ray.origin.z / ray.direction.z;
    if t < 0.0 {
        return Err(Error::HorizonRay);
    }
    let p = ray.origin + t * ray.direction;
    Ok(BodyFramePoint::new(p.x, p.y, p.z))
}

/// Relative bearing of the box center column, positive to port.
pub fn bearing_from_box(bbox: &BoundingBox, intr: &CameraIntrinsics) -> f64 {
    let b = bbox.to_pixels(intr.image_w, intr.image_h);
    -((b.cx - intr.u0) / (intr.fs * intr.fl)).atan()
}

pub fn polar_to_body(dist: f64, bearing: f64) -> Result<BodyFramePoint> {
    if !(dist >= 0.0 && dist.is_finite()) {
        return Err(Error::InvalidInput(format!("distance {dist} must be >= 0")));
    }
    let (s, c) = bearing.sin_cos();
    Ok(BodyFramePoint::new(dist * c, dist * s, 0.0))
}

/// Camera calibration as stored in the `key = value` calibration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub mount: [f64; 3],
}

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

impl Calibration {
    pub fn mount_vector(&self) -> Vector3<f64> {
        Vector3::from(self.mount)
    }

    /// Extrinsics for a frame with the given roll/pitch (degrees).
    pub fn extrinsics(&self, roll_deg: f64, pitch_deg: f64) -> CameraExtrinsics {
        build_extrinsics(
            roll_deg.to_radians(),
            pitch_deg.to_radians(),
            0.0,
            self.mount_vector(),
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("invalid number `{}`", v.trim())))?;
            values.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::parse(path, 0, format!("missing key `{k}`")))
        };
        if let Some(&v) = values.get("format_version") {
            if v as u32 != CALIBRATION_FORMAT_VERSION {
                return Err(Error::parse(path, 0, format!("unsupported format_version {v}")));
            }
        }
        let dim = |k: &str| -> Result<u32> {
            let v = get(k)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::parse(path, 0, format!("`{k}` must be a positive integer")));
            }
            Ok(v as u32)
        };
        let intrinsics = CameraIntrinsics::new(
            get("u0")?,
            get("v0")?,
            get("fs")?,
            get("fl")?,
            dim("image_w")?,
            dim("image_h")?,
        )?;
        Ok(Self {
            intrinsics,
            mount: [get("mount_x")?, get("mount_y")?, get("mount_z")?],
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let i = &self.intrinsics;
        format!(
            "format_version = {}\nu0 = {}\nv0 = {}\nfs = {}\nfl = {}\nimage_w = {}\nimage_h = {}\nmount_x = {}\nmount_y = {}\nmount_z = {}\n",
            CALIBRATION_FORMAT_VERSION,
            i.u0,
            i.v0,
            i.fs,
            i.fl,
            i.image_w,
            i.image_h,
            self.mount[0],
            self.mount[1],
            self.mount[2]
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::body_to_polar;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(48.0, 27.0, 20.0, 4.0, 96, 54).unwrap()
    }

    fn level(height: f64) -> CameraExtrinsics {
        build_extrinsics(0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, height))
    }

    #[test]
    fn identity_orientation_permutes_axes() {
        let e = build_extrinsics(0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, 2.0));
        let fwd = e.rotation() * Vector3::new(0.0, 0.0, 1.0);
        assert_relative_eq!(fwd, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(e.translation().z, 2.0);
    }

    #[test]
    fn yaw_quarter_turn_points_to_port() {
        let e = build_extrinsics(0.0, 0.0, FRAC_PI_2, Vector3::zeros());
        let expected = rot_z(FRAC_PI_2) * camera_to_body_axes();
        assert_relative_eq!(*e.rotation(), expected, epsilon = 1e-15);
        let fwd = e.rotation() * Vector3::new(0.0, 0.0, 1.0);
        assert_relative_eq!(fwd, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn rotations_stay_orthonormal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (r, p, y) = (
                rng.random_range(-3.2..3.2),
                rng.random_range(-3.2..3.2),
                rng.random_range(-3.2..3.2),
            );
            let e = build_extrinsics(r, p, y, Vector3::zeros());
            assert!(CameraExtrinsics::new(*e.rotation(), Vector3::zeros()).is_ok());
        }
    }

    #[test]
    fn principal_ray_is_forward() {
        let ray = pixel_to_ray(48.0, 27.0, &intr(), &level(2.0));
        assert_relative_eq!(ray.direction, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(ray.origin, Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn pixel_one_focal_below_center_is_45_degrees_down() {
        let i = intr();
        let ray = pixel_to_ray(i.u0, i.v0 + i.focal_px(), &i, &level(2.0));
        let depression = (-ray.direction.z).atan2(ray.direction.x);
        assert_relative_eq!(depression, FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn raycast_45_degree_geometry() {
        let i = intr();
        let f = i.focal_px();
        // bottom-center at v0 + f
        let b = BoundingBox::pixels(i.u0, i.v0 + f - 2.0, 4.0, 4.0).unwrap();
        let p = raycast_to_water(&b, &i, &level(2.0)).unwrap();
        assert_relative_eq!(p.x, 2.0, epsilon = 1e-12);
        assert!(p.y.abs() < 1e-12 && p.z.abs() < 1e-9);
    }

    #[test]
    fn horizon_ray_rejected() {
        let i = intr();
        let b = BoundingBox::pixels(40.0, i.v0 - 1.0, 4.0, 2.0).unwrap();
        assert!(matches!(
            raycast_to_water(&b, &i, &level(3.0)),
            Err(Error::HorizonRay)
        ));
        // above the horizon
        let b = BoundingBox::pixels(40.0, 5.0, 4.0, 2.0).unwrap();
        assert!(matches!(
            raycast_to_water(&b, &i, &level(3.0)),
            Err(Error::HorizonRay)
        ));
    }

    #[test]
    fn intersection_behind_camera_rejected() {
        // camera below the water plane looking down never meets it ahead
        let i = intr();
        let b = BoundingBox::pixels(48.0, 50.0, 4.0, 2.0).unwrap();
        assert!(matches!(
            raycast_to_water(&b, &i, &level(-1.0)),
            Err(Error::HorizonRay)
        ));
    }

    #[test]
    fn bearing_examples() {
        let i = intr();
        let b = BoundingBox::pixels(i.u0, 30.0, 2.0, 2.0).unwrap();
        assert_eq!(bearing_from_box(&b, &i), 0.0);
        let b = BoundingBox::pixels(i.u0 + i.fs * i.fl, 30.0, 2.0, 2.0).unwrap();
        assert_relative_eq!(bearing_from_box(&b, &i), -FRAC_PI_4);
        let mut last = f64::INFINITY;
        for u in 0..96 {
            let b = BoundingBox::pixels(u as f64 + 0.5, 30.0, 1.0, 1.0).unwrap();
            let a = bearing_from_box(&b, &i);
            assert!(a < last && a.abs() < FRAC_PI_2);
            last = a;
        }
    }

    #[test]
    fn normalized_boxes_convert_before_geometry() {
        let i = intr();
        let px = BoundingBox::pixels(30.0, 40.0, 6.0, 8.0).unwrap();
        let n = px.to_normalized(96, 54);
        assert_relative_eq!(bearing_from_box(&n, &i), bearing_from_box(&px, &i));
        let a = raycast_to_water(&n, &i, &level(4.0)).unwrap();
        let b = raycast_to_water(&px, &i, &level(4.0)).unwrap();
        assert_relative_eq!(a.x, b.x, epsilon = 1e-9);
    }

    #[test]
    fn polar_to_body_examples() {
        assert_eq!(polar_to_body(100.0, 0.0).unwrap(), BodyFramePoint::new(100.0, 0.0, 0.0));
        let p = polar_to_body(100.0, FRAC_PI_2).unwrap();
        assert!(p.x.abs() < 1e-12);
        assert_relative_eq!(p.y, 100.0);
        assert!(polar_to_body(-1.0, 0.0).is_err());
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::pixels(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::normalized(0.5, 0.5, 1.2, 0.1).is_err());
        let b = BoundingBox::pixels(2.0, 2.0, 8.0, 8.0).unwrap();
        let c = b.clamp_to_image(96, 54).unwrap();
        assert_eq!(c.corners(), (0.0, 0.0, 6.0, 6.0));
        assert!(BoundingBox::pixels(-5.0, 2.0, 2.0, 2.0)
            .unwrap()
            .clamp_to_image(96, 54)
            .is_none());
    }

    #[test]
    fn calibration_file_round_trip() {
        let cal = Calibration {
            intrinsics: intr(),
            mount: [0.5, -0.25, 4.0],
        };
        let parsed = Calibration::parse(&cal.to_text(), Path::new("cal.txt")).unwrap();
        assert_eq!(parsed, cal);
        let err = Calibration::parse("u0 = 1\nfs = x\n", Path::new("cal.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(Calibration::parse("u0 = 1\n", Path::new("cal.txt")).is_err());
    }

    /// World point -> pixel -> box whose bottom-center is that pixel -> raycast.
    fn round_trip(x: f64, y: f64, height: f64, roll: f64, pitch: f64) -> Option<(f64, f64)> {
        let i = intr();
        let e = build_extrinsics(roll, pitch, 0.0, Vector3::new(0.3, -0.2, height));
        let (u, v) = project_point(&Vector3::new(x, y, 0.0), &i, &e)?;
        let b = BoundingBox::pixels(u, v - 1.5, 3.0, 3.0).unwrap();
        raycast_to_water(&b, &i, &e).ok().map(|p| (p.x, p.y))
    }

    #[test]
    fn projection_round_trip_example() {
        let (x, y) = round_trip(120.0, -15.0, 3.5, 0.01, -0.02).unwrap();
        assert!((x - 120.0).abs() / 120.0 < 1e-6);
        assert!((y + 15.0).abs() / 120.6 < 1e-6);
    }

    #[test]
    fn distance_decreases_down_the_image() {
        let i = intr();
        let e = level(4.0);
        let mut last = f64::INFINITY;
        for v in 28..54 {
            let b = BoundingBox::pixels(60.0, v as f64 - 1.0, 2.0, 2.0).unwrap();
            let d = body_to_polar(&raycast_to_water(&b, &i, &e).unwrap()).dist();
            assert!(d < last);
            last = d;
        }
    }

    proptest! {
        #[test]
        fn ray_directions_are_unit(u in -50.0f64..150.0, v in -50.0f64..100.0,
                                   r in -0.5f64..0.5, p in -0.5f64..0.5, y in -3.0f64..3.0) {
            let ray = pixel_to_ray(u, v, &intr(), &build_extrinsics(r, p, y, Vector3::zeros()));
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn level_bearing_matches_raycast(u in 1.0f64..95.0, v in 29.0f64..53.0, h in 0.5f64..20.0) {
            let i = intr();
            let b = BoundingBox::pixels(u, v - 0.5, 1.0, 1.0).unwrap();
            let p = raycast_to_water(&b, &i, &level(h)).unwrap();
            prop_assert!((bearing_from_box(&b, &i) - body_to_polar(&p).bearing()).abs() < 1e-6);
        }

        #[test]
        fn polar_inverse_of_body_to_polar(x in -1000.0f64..1000.0, y in -1000.0f64..1000.0) {
            let p = body_to_polar(&BodyFramePoint::new(x, y, 0.0));
            let q = polar_to_body(p.dist(), p.bearing()).unwrap();
            prop_assert!((q.x - x).abs() < 1e-9 * p.dist().max(1.0));
            prop_assert!((q.y - y).abs() < 1e-9 * p.dist().max(1.0));
        }
    }
}
