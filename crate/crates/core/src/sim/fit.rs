//! Pose recovery from labeled 2D keypoints by damped Gauss-Newton.
//!
//! Minimizes the squared pixel error between projected segment landmarks and
//! observed keypoints over the 14 joint angles. The Jacobian is numerical
//! (central differences, h=1e-4); steps solve (JtJ + lambda I) d = -Jt r and
//! the damping grows until a step does not increase the cost, so the cost
//! over accepted steps never increases. Angles clamp to joint limits after
//! every step.

use super::body::{fk_unchecked, BodyPose, JOINT_LIMITS, N_JOINTS};
use super::camera::Camera;
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub segment: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub pose: BodyPose,
    pub converged: bool,
    pub iterations: usize,
    /// root-mean-square pixel distance per keypoint at the final pose
    pub rms: f64,
    /// cost after the start and after each accepted step
    pub history: Vec<f64>,
}

pub const MIN_KEYPOINTS: usize = 6;
const MAX_ITERS: usize = 100;
const STEP_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-4;

fn residuals(angles: &[f64; N_JOINTS], template: &BodyPose, cam: &Camera, kps: &[Keypoint]) -> Vec<f64> {
    let mut pose = template.clone();
    pose.joint_angles = *angles;
    let body = fk_unchecked(&pose);
    let mut r = Vec::with_capacity(2 * kps.len());
    for kp in kps {
        let p = body.capsules[kp.segment].midpoint();
        let c = cam.to_camera(p);
        // points never approach the camera plane on this rig; guard anyway
        let z = c[2].max(1e-3);
        r.push(cam.focal * c[0] / z + cam.cx - kp.u);
        r.push(cam.focal * c[1] / z + cam.cy - kp.v);
    }
    r
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Cholesky solve of the damped normal equations.
fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let rhs = nalgebra::DVector::from_column_slice(b);
    m.cholesky().map(|ch| ch.solve(&rhs).iter().copied().collect())
}

fn clamp_angles(angles: &mut [f64; N_JOINTS]) {
    for (a, (lo, hi)) in angles.iter_mut().zip(JOINT_LIMITS) {
        *a = a.clamp(lo, hi);
    }
}

pub fn fit_pose(keypoints: &[Keypoint], cam: &Camera, init: &BodyPose) -> Result<FitReport, SimError> {
    if keypoints.len() < MIN_KEYPOINTS {
        return Err(SimError::TooFewKeypoints { got: keypoints.len(), need: MIN_KEYPOINTS });
    }
    for kp in keypoints {
        if kp.segment >= super::body::N_SEGMENTS {
            return Err(SimError::ClassOutOfRange { what: "segment", value: kp.segment, classes: super::body::N_SEGMENTS });
        }
    }
    init.validate()?;

    let mut angles = init.joint_angles;
    let mut r = residuals(&angles, init, cam, keypoints);
    let mut cost = cost_of(&r);
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_ITERS {
        iterations += 1;
        // numerical Jacobian, central differences
        let m = r.len();
        let mut jac = vec![[0.0; N_JOINTS]; m];
        for j in 0..N_JOINTS {
            let mut hi = angles;
            let mut lo = angles;
            hi[j] += FD_STEP;
            lo[j] -= FD_STEP;
            let rh = residuals(&hi, init, cam, keypoints);
            let rl = residuals(&lo, init, cam, keypoints);
            for i in 0..m {
                jac[i][j] = (rh[i] - rl[i]) / (2.0 * FD_STEP);
            }
        }
        let mut jtj = vec![vec![0.0; N_JOINTS]; N_JOINTS];
        let mut jtr = vec![0.0; N_JOINTS];
        for i in 0..m {
            for a in 0..N_JOINTS {
                jtr[a] += jac[i][a] * r[i];
                for b in a..N_JOINTS {
                    jtj[a][b] += jac[i][a] * jac[i][b];
                }
            }
        }
        for a in 0..N_JOINTS {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda;
            }
            let rhs: Vec<f64> = jtr.iter().map(|x| -x).collect();
            let Some(step) = solve_spd(&damped, &rhs) else {
                lambda *= 4.0;
                continue;
            };
            let mut candidate = angles;
            for (a, s) in candidate.iter_mut().zip(&step) {
                *a += s;
            }
            clamp_angles(&mut candidate);
            let rc = residuals(&candidate, init, cam, keypoints);
            let cc = cost_of(&rc);
            if cc <= cost {
                let moved: f64 =
                    angles.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                angles = candidate;
                r = rc;
                cost = cc;
                history.push(cost);
                lambda = (lambda * 0.5).max(1e-9);
                accepted = true;
                if moved < STEP_TOL {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if converged || !accepted {
            converged = converged || !accepted && cost == 0.0;
            break;
        }
    }

    let mut pose = init.clone();
    pose.joint_angles = angles;
    let rms = (cost / keypoints.len() as f64).sqrt();
    Ok(FitReport { pose, converged, iterations, rms, history })
}
