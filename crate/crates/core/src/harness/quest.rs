//! QUEST solution of Wahba's problem.

use nalgebra::{Matrix3, Vector4};
use thiserror::Error;

use crate::lie::{skew, Mat3, Rotation, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum QuestError {
    #[error("need at least two vector pairs, got {0}")]
    TooFewPairs(usize),
    #[error("observations are collinear; rotation about body axis [{:.4}, {:.4}, {:.4}] is unobservable", .0.x, .0.y, .0.z)]
    Collinear(Vec3),
    #[error("vector pair {0} has zero length or non-positive weight")]
    Degenerate(usize),
}

/// One vector observation: `reference` in the navigation frame, `observed`
/// in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VectorPair {
    pub reference: Vec3,
    pub observed: Vec3,
    pub weight: f64,
}

impl VectorPair {
    pub fn new(reference: Vec3, observed: Vec3, weight: f64) -> Self {
        Self {
            reference,
            observed,
            weight,
        }
    }
}

/// Attitude matrix (reference → body) of the quaternion `[q̄, q₄]`.
fn attitude_of(q: &Vector4<f64>) -> Mat3 {
    let v = Vec3::new(q[0], q[1], q[2]);
    let s = q[3];
    Mat3::identity() * (s * s - v.dot(&v)) + v * v.transpose() * 2.0 - skew(&v) * (2.0 * s)
}

struct Solution {
    attitude: Mat3,
    /// |γ| relative to the cubed total weight
    conditioning: f64,
}

fn quest_core(refs: &[Vec3], obs: &[Vec3], weights: &[f64]) -> Solution {
    let mut b = Matrix3::zeros();
    let mut z = Vec3::zeros();
    let mut total = 0.0;
    for ((r, o), w) in refs.iter().zip(obs).zip(weights) {
        b += o * r.transpose() * *w;
        z += o.cross(r) * *w;
        total += w;
    }
    let mut lambda = total;
    let s = b + b.transpose();
    let sigma = b.trace();
    let delta = s.determinant();
    // trace of the adjugate: sum of the principal 2×2 minors
    let kappa = s[(1, 1)] * s[(2, 2)] - s[(1, 2)] * s[(2, 1)] + s[(0, 0)] * s[(2, 2)] - s[(0, 2)] * s[(2, 0)]
        + s[(0, 0)] * s[(1, 1)]
        - s[(0, 1)] * s[(1, 0)];
    let a = sigma * sigma - kappa;
    let bb = sigma * sigma + z.dot(&z);
    let c = delta + z.dot(&(s * z));
    let d = z.dot(&(s * s * z));
    let constant = a * bb + c * sigma - d;
    // Newton on the characteristic polynomial from the sum of weights
    for _ in 0..50 {
        let l2 = lambda * lambda;
        let f = l2 * l2 - (a + bb) * l2 - c * lambda + constant;
        let df = 4.0 * l2 * lambda - 2.0 * (a + bb) * lambda - c;
        if df == 0.0 {
            break;
        }
        let step = f / df;
        lambda -= step;
        if step.abs() < 1e-15 * lambda.abs().max(1.0) {
            break;
        }
    }
    let alpha = lambda * lambda - sigma * sigma + kappa;
    let beta = lambda - sigma;
    let gamma = (lambda + sigma) * alpha - delta;
    let x = (Mat3::identity() * alpha + s * beta + s * s) * z;
    let norm = (gamma * gamma + x.dot(&x)).sqrt();
    let q = Vector4::new(x.x, x.y, x.z, gamma) / norm;
    Solution {
        attitude: attitude_of(&q),
        // γ scales with the cube of the total weight; near a half turn both γ
        // and x are rounding noise, so the ratio γ/‖q‖ is no guide
        conditioning: gamma.abs() / total.powi(3),
    }
}

/// Body-to-navigation rotation `R` minimizing `Σ wᵢ ‖rᵢ − R bᵢ‖²` over
/// unit-normalized vectors.
///
/// Near 180° rotations QUEST's scalar part vanishes; the method of sequential
/// rotations then re-solves with the reference frame flipped about each axis
/// and keeps the best-conditioned answer.
pub fn quest(pairs: &[VectorPair]) -> Result<Rotation, QuestError> {
    if pairs.len() < 2 {
        return Err(QuestError::TooFewPairs(pairs.len()));
    }
    let mut refs = Vec::with_capacity(pairs.len());
    let mut obs = Vec::with_capacity(pairs.len());
    let mut weights = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let (nr, no) = (p.reference.norm(), p.observed.norm());
        if !(nr > 0.0 && no > 0.0 && p.weight > 0.0) {
            return Err(QuestError::Degenerate(i));
        }
        refs.push(p.reference / nr);
        obs.push(p.observed / no);
        weights.push(p.weight);
    }
    let spread = (0..obs.len())
        .flat_map(|i| (i + 1..obs.len()).map(move |j| (i, j)))
        .map(|(i, j)| obs[i].cross(&obs[j]).norm())
        .fold(0.0, f64::max);
    if spread < 1e-6 {
        return Err(QuestError::Collinear(obs[0]));
    }

    let flips = [
        Mat3::identity(),
        Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
        Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0)),
        Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)),
    ];
    let mut best: Option<(Mat3, f64)> = None;
    for flip in flips {
        let flipped: Vec<Vec3> = refs.iter().map(|r| flip * r).collect();
        let sol = quest_core(&flipped, &obs, &weights);
        let attitude = sol.attitude * flip;
        if attitude.iter().all(|v| v.is_finite()) && best.as_ref().is_none_or(|(_, c)| sol.conditioning > *c) {
            best = Some((attitude, sol.conditioning));
        }
        if sol.conditioning > 0.1 {
            break;
        }
    }
    let (a, _) = best.expect("at least one candidate");
    Ok(Rotation::from_matrix(a.transpose()))
}
