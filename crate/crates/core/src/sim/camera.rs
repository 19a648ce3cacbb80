//! Pinhole cameras on a fixed ring around the body.
//!
//! Four cameras sit at azimuths -60, -20, +20, +60 degrees on a ring of
//! radius 2.5 body heights, at the height of the canonical body centroid,
//! each looking at that centroid. The focal length is twice the panel side,
//! which makes the unit-height body span roughly 80% of the panel.

use super::body::canonical_centroid;
use super::geom::{cross, dot, normalize, sub, Mat3, Vec3};

pub const RING_RADIUS: f64 = 2.5;
pub const AZIMUTHS_DEG: [f64; 4] = [-60.0, -20.0, 20.0, 60.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// world-to-camera rotation, rows are the camera axes in world coordinates
    pub rot: Mat3,
    pub pos: Vec3,
}

impl Camera {
    /// Camera on the ring at the given azimuth, looking at `target`.
    pub fn on_ring(azimuth_deg: f64, radius: f64, target: Vec3, side: usize) -> Camera {
        let az = azimuth_deg.to_radians();
        let pos = [target[0] + radius * az.sin(), target[1], target[2] + radius * az.cos()];
        let z = normalize(sub(target, pos));
        let x = normalize(cross([0.0, 1.0, 0.0], z));
        let y = cross(z, x);
        Camera {
            focal: 2.0 * side as f64,
            cx: side as f64 / 2.0,
            cy: side as f64 / 2.0,
            width: side,
            height: side,
            rot: [x, y, z],
            pos,
        }
    }

    /// Max deviation of R from a proper rotation (orthonormality and det +1).
    pub fn rotation_defect(&self) -> f64 {
        let r = &self.rot;
        let mut defect: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((dot(r[i], r[j]) - want).abs());
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        defect.max((det - 1.0).abs())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.pos);
        [dot(self.rot[0], d), dot(self.rot[1], d), dot(self.rot[2], d)]
    }

    /// Pixel coordinates of a world point, or None when at or behind the
    /// camera plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= 1e-9 {
            return None;
        }
        Some((self.focal * c[0] / c[2] + self.cx, self.focal * c[1] / c[2] + self.cy))
    }

    /// Unit ray direction in world coordinates through pixel center (i, j).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let x = (u - self.cx) / self.focal;
        let y = (v - self.cy) / self.focal;
        normalize([
            self.rot[0][0] * x + self.rot[1][0] * y + self.rot[2][0],
            self.rot[0][1] * x + self.rot[1][1] * y + self.rot[2][1],
            self.rot[0][2] * x + self.rot[1][2] * y + self.rot[2][2],
        ])
    }

    /// 3x4 projection matrix K[R|t] with t = -R . pos.
    pub fn projection_matrix(&self) -> [[f64; 4]; 3] {
        let k = [[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]];
        let mut p = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (l, row) in self.rot.iter().enumerate() {
                    p[i][j] += k[i][l] * row[j];
                }
            }
            p[i][3] = -(p[i][0] * self.pos[0] + p[i][1] * self.pos[1] + p[i][2] * self.pos[2]);
        }
        p
    }
}

/// The four ring cameras at a given panel resolution, in panel order.
pub fn ring_cameras(side: usize) -> [Camera; 4] {
    let target = canonical_centroid();
    AZIMUTHS_DEG.map(|az| Camera::on_ring(az, RING_RADIUS, target, side))
}

/// Landmark projections for each camera; None marks points behind a camera.
pub fn project_landmarks(points: &[Vec3], cam: &Camera) -> Vec<Option<(f64, f64)>> {
    points.iter().map(|&p| cam.project(p)).collect()
}
