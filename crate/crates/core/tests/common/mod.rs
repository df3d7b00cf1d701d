//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use telekinesis::kinematics::KinematicChain;
use telekinesis::se3::Vec3;

/// Uniform joint vector within the chain limits.
pub fn random_q(chain: &KinematicChain, rng: &mut impl Rng) -> Vec<f64> {
    chain
        .joints()
        .iter()
        .map(|j| rng.random_range(j.lower..j.upper))
        .collect()
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Segment distance from points spaced at most `spacing` apart along each
/// segment, measured against the other segment. Overestimates the true
/// distance by at most `spacing / 2`.
pub fn sampled_segment_distance(a0: &Vec3, a1: &Vec3, b0: &Vec3, b1: &Vec3, spacing: f64) -> f64 {
    let sweep = |p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3| {
        let n = ((p1 - p0).norm() / spacing).ceil().max(1.0) as usize;
        (0..=n)
            .map(|k| {
                let p = p0 + (p1 - p0) * (k as f64 / n as f64);
                point_segment_distance(&p, q0, q1)
            })
            .fold(f64::INFINITY, f64::min)
    };
    sweep(a0, a1, b0, b1).min(sweep(b0, b1, a0, a1))
}
