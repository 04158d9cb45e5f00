//! Gumbel (softmax) smoothing of the support maps, used to differentiate a
//! witness when the active simplex is degenerate.
//!
//! With soft supports `S1(x) = Σ softmax(-x·a_i/τ) a_i` and
//! `S2(x) = Σ softmax(x·b_j/τ) b_j`, the fixed point `f(x) = x - S1 + S2 = 0`
//! is differentiated at the GJK solution:
//! `∂f/∂x = I + Cov1/τ + Cov2/τ` is always positive definite.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::gjk::{Witness, WitnessDerivative};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};

/// Softmax weights of `exp(-(d·p_i - min)/τ)`, the smoothed argmin support.
pub fn smoothed_support_weights(points: &[Vec3], d: &Vec3, tau: f64) -> Vec<f64> {
    let s: Vec<f64> = points.iter().map(|p| p.dot(d)).collect();
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = s.iter().map(|&v| (-(v - min) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn weighted_mean_cov(points: &[Vec3], w: &[f64]) -> (Vec3, Mat3) {
    let mean: Vec3 = points.iter().zip(w).map(|(p, &wi)| p * wi).sum();
    let mut cov = Mat3::zeros();
    for (p, &wi) in points.iter().zip(w) {
        let d = p - mean;
        cov += d * d.transpose() * wi;
    }
    (mean, cov)
}

/// Smoothed counterpart of [`super::gjk::witness_derivative`].
pub fn smoothed_witness_derivative(a: &[Vec3], b: &[Vec3], wit: &Witness, tau: f64) -> Result<WitnessDerivative> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("smoothing temperature must be positive, got {tau}")));
    }
    let x = wit.separation;
    let wa = smoothed_support_weights(a, &x, tau);
    let neg: Vec<Vec3> = b.iter().map(|p| -p).collect();
    let wb = smoothed_support_weights(&neg, &x, tau);
    let (s1, cov1) = weighted_mean_cov(a, &wa);
    let (s2, cov2) = weighted_mean_cov(b, &wb);
    let jx = Mat3::identity() + (cov1 + cov2) / tau;
    let jx_inv = jx.try_inverse().ok_or(Error::SingularSystem("smoothed support system"))?;
    let (na, nb) = (a.len(), b.len());
    let ncol = 3 * (na + nb);
    let mut ds = DMatrix::zeros(3, ncol);
    let mut dwa = DMatrix::zeros(na, ncol);
    let mut dwb = DMatrix::zeros(nb, ncol);
    for col in 0..ncol {
        let (v, c) = (col / 3, col % 3);
        let e = Vec3::ith(c, 1.0);
        // ∂f/∂(vertex coordinate)
        let df = if v < na {
            -(e * wa[v] - (a[v] - s1) * (x.dot(&e) * wa[v] / tau))
        } else {
            let j = v - na;
            e * wb[j] + (b[j] - s2) * (x.dot(&e) * wb[j] / tau)
        };
        let dx = -(jx_inv * df);
        ds.set_column(col, &dx);
        let dsa: Vec<f64> = (0..na)
            .map(|i| dx.dot(&a[i]) + if v == i { x.dot(&e) } else { 0.0 })
            .collect();
        let mean_a: f64 = dsa.iter().zip(&wa).map(|(d, w)| d * w).sum();
        for i in 0..na {
            dwa[(i, col)] = wa[i] * (mean_a - dsa[i]) / tau;
        }
        let dsb: Vec<f64> = (0..nb)
            .map(|j| dx.dot(&b[j]) + if v == na + j { x.dot(&e) } else { 0.0 })
            .collect();
        let mean_b: f64 = dsb.iter().zip(&wb).map(|(d, w)| d * w).sum();
        for j in 0..nb {
            dwb[(j, col)] = wb[j] * (dsb[j] - mean_b) / tau;
        }
    }
    Ok(WitnessDerivative { separation: ds, weights_a: dwa, weights_b: dwb })
}
