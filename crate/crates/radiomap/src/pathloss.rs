//! Log-distance path-loss model: prediction and least-squares fitting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathLossError {
    #[error("distance must be > 0, got {0}")]
    NonPositiveDistance(f64),
    #[error("fit needs at least 2 samples with 2 distinct distances")]
    SingularFit,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Parameters of the log-normal path-loss model for one base station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossParams {
    /// Mean received power at the reference distance, dBm.
    pub p0_dbm: f64,
    /// Path-loss exponent.
    pub n: f64,
    /// Shadowing standard deviation, dB.
    pub sigma_db: f64,
    /// Reference distance, meters.
    pub d0_m: f64,
}

impl PathLossParams {
    pub fn new(p0_dbm: f64, n: f64, sigma_db: f64, d0_m: f64) -> Result<Self, PathLossError> {
        if !(d0_m > 0.0) {
            return Err(PathLossError::InvalidParams(format!("d0 must be > 0, got {d0_m}")));
        }
        if sigma_db < 0.0 {
            return Err(PathLossError::InvalidParams(format!(
                "sigma must be >= 0, got {sigma_db}"
            )));
        }
        Ok(Self {
            p0_dbm,
            n,
            sigma_db,
            d0_m,
        })
    }
}

/// Mean received power at distance `d_m`, no shadowing term.
pub fn predict_rssi(params: &PathLossParams, d_m: f64) -> Result<f64, PathLossError> {
    if !(d_m > 0.0) {
        return Err(PathLossError::NonPositiveDistance(d_m));
    }
    Ok(params.p0_dbm - 10.0 * params.n * (d_m / params.d0_m).log10())
}

/// Least-squares fit of `(p0, n)` over `(distance, rssi)` samples, with the
/// residual standard deviation as the shadowing estimate.
///
/// The design matrix has columns `[1, -10*log10(d/d0)]`; the normal equations
/// are solved directly, falling back to a pseudo-inverse when the 2x2 system
/// is ill-conditioned. The residual std uses the n-2 denominator.
pub fn fit_pathloss(samples: &[(f64, f64)], d0_m: f64) -> Result<PathLossParams, PathLossError> {
    if samples.len() < 2 {
        return Err(PathLossError::SingularFit);
    }
    if let Some(&(d, _)) = samples.iter().find(|(d, _)| !(*d > 0.0)) {
        return Err(PathLossError::NonPositiveDistance(d));
    }
    let first = -10.0 * (samples[0].0 / d0_m).log10();
    let distinct = samples
        .iter()
        .any(|(d, _)| (-10.0 * (d / d0_m).log10() - first).abs() > 1e-12);
    if !distinct {
        return Err(PathLossError::SingularFit);
    }

    // Normal equations for A = [1, x], x = -10 log10(d/d0).
    let k = samples.len() as f64;
    let (mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(d, y) in samples {
        let x = -10.0 * (d / d0_m).log10();
        sx += x;
        sxx += x * x;
        sy += y;
        sxy += x * y;
    }
    // AtA = [[k, sx], [sx, sxx]], Atm = [sy, sxy].
    let (p0, n) = solve_sym2(k, sx, sxx, sy, sxy)?;

    let mut ss = 0.0;
    for &(d, y) in samples {
        let x = -10.0 * (d / d0_m).log10();
        let r = y - (p0 + n * x);
        ss += r * r;
    }
    let dof = (samples.len() as f64 - 2.0).max(1.0);
    let sigma = (ss / dof).sqrt();
    PathLossParams::new(p0, n, sigma, d0_m)
}

/// Solve the symmetric system [[a, b], [b, c]] * eta = [r0, r1].
fn solve_sym2(a: f64, b: f64, c: f64, r0: f64, r1: f64) -> Result<(f64, f64), PathLossError> {
    let det = a * c - b * b;
    // Eigenvalues of the symmetric 2x2 give the condition number.
    let tr = a + c;
    let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
    let l1 = (tr + disc) / 2.0;
    let l2 = (tr - disc) / 2.0;
    if l1 <= 0.0 {
        return Err(PathLossError::SingularFit);
    }
    if l2.abs() * 1e12 > l1 && det != 0.0 {
        return Ok(((c * r0 - b * r1) / det, (a * r1 - b * r0) / det));
    }
    // Pseudo-inverse: drop the near-null eigendirection.
    let (vx, vy) = if b.abs() > 1e-300 {
        (l1 - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = (vx / norm, vy / norm);
    let proj = (vx * r0 + vy * r1) / l1;
    Ok((proj * vx, proj * vy))
}
