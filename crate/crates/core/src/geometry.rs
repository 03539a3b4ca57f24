//! Small fixed-size vector helpers and axis-aligned boxes.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn unit() -> Self {
        Aabb::new([0.0; 3], [1.0; 3])
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a])
    }

    /// Grows every side by `fraction` of the extent along that axis.
    pub fn padded(&self, fraction: f64) -> Self {
        let e = self.extent();
        Aabb::new(
            [
                self.min[0] - fraction * e[0],
                self.min[1] - fraction * e[1],
                self.min[2] - fraction * e[2],
            ],
            [
                self.max[0] + fraction * e[0],
                self.max[1] + fraction * e[1],
                self.max[2] + fraction * e[2],
            ],
        )
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    /// Affine map of this box onto `[0,1]³`.
    pub fn to_unit(&self, p: Vec3) -> Vec3 {
        let e = self.extent();
        [
            (p[0] - self.min[0]) / e[0],
            (p[1] - self.min[1]) / e[1],
            (p[2] - self.min[2]) / e[2],
        ]
    }

    pub fn from_unit(&self, u: Vec3) -> Vec3 {
        let e = self.extent();
        [
            self.min[0] + u[0] * e[0],
            self.min[1] + u[1] * e[1],
            self.min[2] + u[2] * e[2],
        ]
    }

    /// Slab test. Returns the parametric interval `[t0, t1]` (possibly with
    /// `t0 < 0`) where the line `origin + t·dir` is inside the box.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}
