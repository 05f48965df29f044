//! Oriented 3D boxes in the lidar frame.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three evaluated object classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    /// Typical `(w, l, h)` in meters; shared by the anchor generator and the scene synthesizer.
    pub fn typical_size(self) -> (f64, f64, f64) {
        match self {
            ObjectClass::Car => (1.6, 3.9, 1.56),
            ObjectClass::Pedestrian => (0.6, 0.8, 1.73),
            ObjectClass::Cyclist => (0.6, 1.76, 1.73),
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Car" => Ok(ObjectClass::Car),
            "Pedestrian" => Ok(ObjectClass::Pedestrian),
            "Cyclist" => Ok(ObjectClass::Cyclist),
            other => Err(format!("unknown class `{other}`")),
        }
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// 7-DoF box: center, size (`w` along the box's y axis, `l` along its x
/// axis), and yaw about +z measured counter-clockwise from +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, yaw: f64) -> Self {
        Self { cx, cy, cz, w, l, h, yaw }
    }

    /// Bird's-eye footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dx, dy)| {
            [self.cx + dx * c - dy * s, self.cy + dx * s + dy * c]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - self.h / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.cz + self.h / 2.0
    }

    /// Radius of the circle circumscribing the footprint.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    /// Coordinates of `(x, y, z)` in the box frame.
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        [dx * c + dy * s, -dx * s + dy * c, z - self.cz]
    }

    pub fn from_local(&self, lx: f64, ly: f64, lz: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [self.cx + lx * c - ly * s, self.cy + lx * s + ly * c, self.cz + lz]
    }

    /// Point containment with every half-extent enlarged by `margin`.
    pub fn contains(&self, x: f64, y: f64, z: f64, margin: f64) -> bool {
        let [lx, ly, lz] = self.to_local(x, y, z);
        lx.abs() <= self.l / 2.0 + margin && ly.abs() <= self.w / 2.0 + margin && lz.abs() <= self.h / 2.0 + margin
    }
}

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class: ObjectClass,
    pub bbox: Box3D,
}

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    pub bbox: Box3D,
    /// Sigmoid of the class logit.
    pub score: f64,
}
