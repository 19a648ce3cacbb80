//! Small fixed-size vector and matrix helpers plus analytic ray intersections.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

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

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub c: Vec3,
    pub r: f64,
}

impl Capsule {
    pub fn midpoint(&self) -> Vec3 {
        scale(add(self.a, self.b), 0.5)
    }
}

/// Distance along a unit-direction ray to a sphere, if hit in front.
pub fn ray_sphere(origin: Vec3, dir: Vec3, s: &Sphere) -> Option<f64> {
    let oc = sub(origin, s.c);
    let b = dot(oc, dir);
    let disc = b * b - (dot(oc, oc) - s.r * s.r);
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 1e-9).then_some(t)
}

/// Distance along a unit-direction ray to a capsule, if hit in front.
/// Checks the open cylinder against the segment span, then both cap spheres.
pub fn ray_capsule(origin: Vec3, dir: Vec3, cap: &Capsule) -> Option<f64> {
    let axis = sub(cap.b, cap.a);
    let len2 = dot(axis, axis);
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    if len2 > 1e-18 {
        // quadratic in t for the infinite cylinder, solutions kept only when
        // the foot of the hit lies within the segment
        let oa = sub(origin, cap.a);
        let da = dot(dir, axis);
        let oaa = dot(oa, axis);
        let qa = 1.0 - da * da / len2;
        let qb = dot(oa, dir) - da * oaa / len2;
        let qc = dot(oa, oa) - oaa * oaa / len2 - cap.r * cap.r;
        if qa.abs() > 1e-12 {
            let disc = qb * qb - qa * qc;
            if disc >= 0.0 {
                let root = disc.sqrt();
                for t in [(-qb - root) / qa, (-qb + root) / qa] {
                    let u = (oaa + t * da) / len2;
                    if (0.0..=1.0).contains(&u) {
                        consider(t);
                    }
                }
            }
        }
    }
    for c in [cap.a, cap.b] {
        if let Some(t) = ray_sphere(origin, dir, &Sphere { c, r: cap.r }) {
            consider(t);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_hits_sphere_at_distance_minus_radius() {
        let s = Sphere { c: [0.0, 0.0, 5.0], r: 1.25 };
        let t = ray_sphere([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], &s).unwrap();
        assert!((t - 3.75).abs() < 1e-12);
        assert!(ray_sphere([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], &s).is_none());
    }

    #[test]
    fn ray_hits_cylinder_wall_and_cap() {
        let cap = Capsule { a: [-1.0, 0.0, 4.0], b: [1.0, 0.0, 4.0], r: 0.5 };
        // straight at the wall
        let t = ray_capsule([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], &cap).unwrap();
        assert!((t - 3.5).abs() < 1e-12);
        // down the axis from the left: end-cap sphere at distance 2 - r
        let t = ray_capsule([-3.0, 0.0, 4.0], [1.0, 0.0, 0.0], &cap).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
        // parallel offset miss
        assert!(ray_capsule([0.0, 0.7, 0.0], [0.0, 0.0, 1.0], &cap).is_none());
    }

    #[test]
    fn degenerate_capsule_acts_as_a_sphere() {
        let cap = Capsule { a: [0.0, 0.0, 3.0], b: [0.0, 0.0, 3.0], r: 0.25 };
        let t = ray_capsule([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], &cap).unwrap();
        assert!((t - 2.75).abs() < 1e-12);
    }

    #[test]
    fn rotations_compose_orthonormally() {
        let m = mat_mul(&rot_y(0.3), &mat_mul(&rot_x(-0.7), &rot_z(1.1)));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
