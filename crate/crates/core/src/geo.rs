//! Geodetic positions, the vessel body frame and polar offsets.
//!
//! The body frame is vessel fixed and level: `x` forward along the heading,
//! `y` to port, `z` up. Bearings are measured from the forward axis and are
//! positive to port, so a target right of the bow has a negative bearing.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equatorial radius used by the local tangent-plane approximation.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Largest |Δlat| / |Δlon| (degrees) accepted by [`geodetic_to_body`].
pub const TANGENT_RANGE_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPosition {
    lat: f64,
    lon: f64,
}

impl GeodeticPosition {
    /// Latitude must lie in [-90, 90]; longitude is wrapped into [-180, 180).
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite coordinate ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidInput(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        Ok(Self {
            lat,
            lon: wrap_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// A point in the vessel body frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyFramePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BodyFramePoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance_2d(&self, other: &BodyFramePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Vessel and camera state for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: GeodeticPosition,
    /// Degrees clockwise from true north, in [0, 360).
    heading: f64,
    /// Degrees.
    pub roll: f64,
    /// Degrees.
    pub pitch: f64,
    /// Camera height above the water, meters.
    height: f64,
    /// Seconds.
    pub timestamp: f64,
}

impl CameraPose {
    pub fn new(
        position: GeodeticPosition,
        heading: f64,
        roll: f64,
        pitch: f64,
        height: f64,
        timestamp: f64,
    ) -> Result<Self> {
        if ![heading, roll, pitch, height, timestamp]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite pose component".into()));
        }
        if height < 0.0 {
            return Err(Error::InvalidInput(format!(
                "camera height {height} is negative"
            )));
        }
        Ok(Self {
            position,
            heading: normalize_heading(heading),
            roll,
            pitch,
            height,
            timestamp,
        })
    }

    /// A level pose with zero roll/pitch and timestamp.
    pub fn level(position: GeodeticPosition, heading: f64, height: f64) -> Result<Self> {
        Self::new(position, heading, 0.0, 0.0, height, 0.0)
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn with_heading(mut self, heading: f64) -> Self {
        self.heading = normalize_heading(heading);
        self
    }
}

fn normalize_heading(h: f64) -> f64 {
    let w = h.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Distance and bearing of a target relative to the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarOffset {
    dist: f64,
    bearing: f64,
}

impl PolarOffset {
    pub fn new(dist: f64, bearing: f64) -> Result<Self> {
        if !(dist.is_finite() && dist >= 0.0) {
            return Err(Error::InvalidInput(format!("distance {dist} must be >= 0")));
        }
        Ok(Self {
            dist,
            bearing: wrap_angle(bearing)?,
        })
    }

    pub fn dist(&self) -> f64 {
        self.dist
    }

    pub fn bearing(&self) -> f64 {
        self.bearing
    }
}

/// Wraps an angle into [-π, π).
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite angle {a}")));
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    Ok(if w >= PI { w - TAU } else { w })
}

/// Local equirectangular projection of `marker` into the body frame of `pose`.
pub fn geodetic_to_body(marker: GeodeticPosition, pose: &CameraPose) -> Result<BodyFramePoint> {
    let dlat = marker.lat - pose.position.lat;
    let dlon = wrap_lon(marker.lon - pose.position.lon);
    if dlat.abs() >= TANGENT_RANGE_DEG || dlon.abs() >= TANGENT_RANGE_DEG {
        return Err(Error::OutOfTangentRange { dlat, dlon });
    }
    let deg = PI / 180.0;
    let north = dlat * deg * EARTH_RADIUS_M;
    let east = dlon * deg * pose.position.lat.to_radians().cos() * EARTH_RADIUS_M;
    let (s, c) = pose.heading.to_radians().sin_cos();
    // forward = (sin h, cos h) in (east, north); port = (-cos h, sin h)
    Ok(BodyFramePoint {
        x: east * s + north * c,
        y: -east * c + north * s,
        z: 0.0,
    })
}

/// Inverse of [`geodetic_to_body`] for a water-plane point.
pub fn body_to_geodetic(p: &BodyFramePoint, pose: &CameraPose) -> Result<GeodeticPosition> {
    let (s, c) = pose.heading.to_radians().sin_cos();
    let east = p.x * s - p.y * c;
    let north = p.x * c + p.y * s;
    let deg = PI / 180.0;
    let dlat = north / (deg * EARTH_RADIUS_M);
    let dlon = east / (deg * pose.position.lat.to_radians().cos() * EARTH_RADIUS_M);
    if dlat.abs() >= TANGENT_RANGE_DEG || dlon.abs() >= TANGENT_RANGE_DEG || !dlon.is_finite() {
        return Err(Error::OutOfTangentRange { dlat, dlon });
    }
    GeodeticPosition::new(pose.position.lat + dlat, pose.position.lon + dlon)
}

pub fn body_to_polar(p: &BodyFramePoint) -> PolarOffset {
    let dist = p.x.hypot(p.y);
    let bearing = if dist == 0.0 {
        0.0
    } else {
        // atan2 output is finite for finite input
        wrap_angle(p.y.atan2(p.x)).unwrap_or(0.0)
    };
    PolarOffset { dist, bearing }
}
