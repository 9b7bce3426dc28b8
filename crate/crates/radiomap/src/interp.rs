//! Classical map-reconstruction baselines: linear-kernel RBF interpolation,
//! k-nearest-neighbour regression and total-variation inpainting.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{Grid, GridSpec, RadioMap};

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("anchor set is empty")]
    NoAnchors,
    #[error("anchor value at index {0} is not finite")]
    NonFiniteAnchor(usize),
    #[error("k = {k} exceeds the {n} available anchors (k >= 1 required)")]
    BadK { k: usize, n: usize },
    #[error("RBF system is singular")]
    SingularSystem,
    #[error("map has no observed cells")]
    NothingObserved,
}

/// Scattered observations used as interpolation anchors.
#[derive(Debug, Clone, Default)]
pub struct AnchorSet {
    /// (east m, north m, value dBm).
    pub points: Vec<(f64, f64, f64)>,
}

impl AnchorSet {
    pub fn new(points: Vec<(f64, f64, f64)>) -> Result<Self, InterpError> {
        if points.is_empty() {
            return Err(InterpError::NoAnchors);
        }
        if let Some(i) = points.iter().position(|p| !p.2.is_finite()) {
            return Err(InterpError::NonFiniteAnchor(i));
        }
        Ok(Self { points })
    }

    /// Collect the masked cells of a map as anchors at cell centers.
    pub fn from_map(map: &RadioMap) -> Result<Self, InterpError> {
        let mut points = Vec::new();
        for (row, col, m) in map.mask.iter_cells() {
            if m != 0 {
                let (e, n) = map.spec.cell_center(row, col);
                points.push((e, n, map.values.get(row, col)));
            }
        }
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---------------------------------------------------------------------------
// RBF with linear kernel
// ---------------------------------------------------------------------------

/// Anchor sets beyond this size are thinned before the dense solve.
const MAX_RBF_ANCHORS: usize = 4000;
/// Diagonal jitter keeping the kernel matrix comfortably factorizable.
const RBF_JITTER: f64 = 1e-10;

/// A solved linear-kernel RBF interpolant `s(x) = sum w_i |x - x_i| + c`
/// with the side condition `sum w_i = 0`.
#[derive(Debug, Clone)]
pub struct RbfModel {
    centers: Vec<(f64, f64)>,
    weights: Vec<f64>,
    constant: f64,
}

impl RbfModel {
    /// Fit the interpolant to the anchors.
    pub fn fit(anchors: &AnchorSet) -> Result<Self, InterpError> {
        let pts = thin_anchors(&anchors.points, MAX_RBF_ANCHORS);
        let n = pts.len();
        if n == 1 {
            // Degenerate set: the constant term carries the single value.
            return Ok(Self {
                centers: vec![(pts[0].0, pts[0].1)],
                weights: vec![0.0],
                constant: pts[0].2,
            });
        }
        let dim = n + 1;
        let mut a = vec![0.0f64; dim * dim];
        let mut rhs = vec![0.0f64; dim];
        for i in 0..n {
            for j in 0..n {
                let d = hypot(pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                a[i * dim + j] = if i == j { d + RBF_JITTER } else { d };
            }
            a[i * dim + n] = 1.0;
            a[n * dim + i] = 1.0;
            rhs[i] = pts[i].2;
        }
        let sol = lu_solve(&mut a, &mut rhs, dim).ok_or(InterpError::SingularSystem)?;
        Ok(Self {
            centers: pts.iter().map(|p| (p.0, p.1)).collect(),
            weights: sol[..n].to_vec(),
            constant: sol[n],
        })
    }

    /// Evaluate the interpolant at an ENU point.
    pub fn eval(&self, east: f64, north: f64) -> f64 {
        let mut acc = self.constant;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            acc += w * hypot(east - c.0, north - c.1);
        }
        acc
    }
}

#[inline]
fn hypot(dx: f64, dy: f64) -> f64 {
    (dx * dx + dy * dy).sqrt()
}

/// Grid-stratified subsampling keeping at most `max` anchors, deterministic
/// in the input order.
fn thin_anchors(points: &[(f64, f64, f64)], max: usize) -> Vec<(f64, f64, f64)> {
    if points.len() <= max {
        return points.to_vec();
    }
    let (mut e0, mut e1, mut n0, mut n1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        e0 = e0.min(p.0);
        e1 = e1.max(p.0);
        n0 = n0.min(p.1);
        n1 = n1.max(p.1);
    }
    let g = (max as f64).sqrt().ceil() as usize;
    let we = ((e1 - e0) / g as f64).max(1e-9);
    let wn = ((n1 - n0) / g as f64).max(1e-9);
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); g * g];
    for (i, p) in points.iter().enumerate() {
        let ce = (((p.0 - e0) / we) as usize).min(g - 1);
        let cn = (((p.1 - n0) / wn) as usize).min(g - 1);
        strata[cn * g + ce].push(i);
    }
    let mut selected: Vec<usize> = Vec::with_capacity(max);
    let mut depth = 0;
    while selected.len() < max {
        let mut advanced = false;
        for s in &strata {
            if let Some(&i) = s.get(depth) {
                selected.push(i);
                advanced = true;
                if selected.len() == max {
                    break;
                }
            }
        }
        if !advanced {
            break;
        }
        depth += 1;
    }
    selected.sort_unstable();
    selected.into_iter().map(|i| points[i]).collect()
}

/// Dense LU solve with partial pivoting; `a` is n x n row-major, consumed.
fn lu_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for c in col + 1..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r * n + c] * x[c];
        }
        x[r] = acc / a[r * n + r];
    }
    Some(x)
}

/// Interpolate anchors onto every cell of the grid.
pub fn rbf_interpolate(anchors: &AnchorSet, spec: GridSpec) -> Result<RadioMap, InterpError> {
    let model = RbfModel::fit(anchors)?;
    let width = spec.width;
    let data: Vec<f64> = (0..spec.cells())
        .into_par_iter()
        .map(|i| {
            let (e, n) = spec.cell_center(i / width, i % width);
            model.eval(e, n)
        })
        .collect();
    Ok(RadioMap {
        spec,
        values: Grid {
            width: spec.width,
            height: spec.height,
            data,
        },
        mask: Grid::filled(spec.height, spec.width, 1),
        count: None,
        cell_std: None,
    })
}

// ---------------------------------------------------------------------------
// k nearest neighbours
// ---------------------------------------------------------------------------

/// Domain in which the k neighbour values are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnnDomain {
    /// Plain mean of the dB values.
    #[default]
    Db,
    /// Mean power in milliwatts, converted back to dBm.
    MilliWatt,
}

/// Average of the k nearest anchors per cell. Ties at the k-th distance are
/// broken by anchor index.
pub fn knn_interpolate(
    anchors: &AnchorSet,
    spec: GridSpec,
    k: usize,
    domain: KnnDomain,
) -> Result<RadioMap, InterpError> {
    let n = anchors.len();
    if k == 0 || k > n {
        return Err(InterpError::BadK { k, n });
    }
    let pts = &anchors.points;
    let width = spec.width;
    let data: Vec<f64> = (0..spec.cells())
        .into_par_iter()
        .map(|i| {
            let (e, no) = spec.cell_center(i / width, i % width);
            let mut dist: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(j, p)| (hypot(e - p.0, no - p.1), j))
                .collect();
            if k < n {
                dist.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
                dist.truncate(k);
            }
            // Deterministic summation order independent of the selection.
            let mut idx: Vec<usize> = dist.iter().map(|&(_, j)| j).collect();
            idx.sort_unstable();
            match domain {
                KnnDomain::Db => idx.iter().map(|&j| pts[j].2).sum::<f64>() / k as f64,
                KnnDomain::MilliWatt => {
                    let mw = idx.iter().map(|&j| 10f64.powf(pts[j].2 / 10.0)).sum::<f64>() / k as f64;
                    10.0 * mw.log10()
                }
            }
        })
        .collect();
    Ok(RadioMap {
        spec,
        values: Grid {
            width: spec.width,
            height: spec.height,
            data,
        },
        mask: Grid::filled(spec.height, spec.width, 1),
        count: None,
        cell_std: None,
    })
}

// ---------------------------------------------------------------------------
// Total-variation inpainting
// ---------------------------------------------------------------------------

/// Outcome of the TV solve, with the objective recorded per iteration.
#[derive(Debug, Clone)]
pub struct TvResult {
    pub map: RadioMap,
    /// Isotropic TV objective after each accepted iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Isotropic total variation with forward differences and Neumann borders.
pub fn tv_objective(u: &Grid<f64>) -> f64 {
    let (h, w) = (u.height, u.width);
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = u.get(r, c);
            let gx = if c + 1 < w { u.get(r, c + 1) - v } else { 0.0 };
            let gy = if r + 1 < h { u.get(r + 1, c) - v } else { 0.0 };
            acc += (gx * gx + gy * gy).sqrt();
        }
    }
    acc
}

/// Iterations without a `tol`-sized improvement of the incumbent before the
/// solve is declared converged.
const TV_PATIENCE: usize = 50;

/// Fill unobserved cells by minimizing isotropic TV subject to equality on
/// the observed cells, with a first-order primal-dual iteration
/// (Chambolle-Pock, step sizes sigma = tau = 1/sqrt(8)).
///
/// The raw primal objective of a primal-dual scheme is not monotone, so the
/// solver tracks the incumbent: the best feasible iterate seen so far. The
/// returned map and the recorded trace are the incumbent's, which makes the
/// trace non-increasing by construction. Observed cells are preserved
/// bit-exact.
pub fn tv_inpaint(map: &RadioMap, max_iters: usize, tol: f64) -> Result<TvResult, InterpError> {
    let spec = map.spec;
    let (h, w) = (spec.height, spec.width);
    let observed = &map.mask;
    let n_obs = observed.count_ones();
    if n_obs == 0 {
        return Err(InterpError::NothingObserved);
    }
    if n_obs == h * w {
        return Ok(TvResult {
            map: map.clone(),
            objective_trace: vec![tv_objective(&map.values)],
            iterations: 0,
        });
    }

    // Initialize holes at the mean of the observed values.
    let mean = map
        .values
        .data
        .iter()
        .zip(&observed.data)
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| v)
        .sum::<f64>()
        / n_obs as f64;
    let mut u: Vec<f64> = map
        .values
        .data
        .iter()
        .zip(&observed.data)
        .map(|(&v, &m)| if m != 0 { v } else { mean })
        .collect();

    let mut px = vec![0.0f64; h * w];
    let mut py = vec![0.0f64; h * w];
    let mut u_bar = u.clone();
    let mut u_old = vec![0.0f64; h * w];
    let sigma = 1.0 / 8f64.sqrt();
    let tau = 1.0 / 8f64.sqrt();

    let grid_of = |data: &[f64]| Grid {
        width: w,
        height: h,
        data: data.to_vec(),
    };
    let mut best_u = u.clone();
    let mut best_obj = tv_objective(&grid_of(&u));
    let mut trace = vec![best_obj];
    let mut iterations = 0;
    let mut stall = 0usize;

    for _ in 0..max_iters {
        iterations += 1;
        // Dual ascent on p with projection onto the unit ball.
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let v = u_bar[i];
                let gx = if c + 1 < w { u_bar[i + 1] - v } else { 0.0 };
                let gy = if r + 1 < h { u_bar[i + w] - v } else { 0.0 };
                let nx = px[i] + sigma * gx;
                let ny = py[i] + sigma * gy;
                let norm = (nx * nx + ny * ny).sqrt().max(1.0);
                px[i] = nx / norm;
                py[i] = ny / norm;
            }
        }
        // Primal step along div p, then projection onto the constraint.
        u_old.copy_from_slice(&u);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if observed.data[i] != 0 {
                    u[i] = map.values.data[i];
                    continue;
                }
                let mut g = 0.0;
                if c + 1 < w {
                    g -= px[i];
                }
                if c > 0 {
                    g += px[i - 1];
                }
                if r + 1 < h {
                    g -= py[i];
                }
                if r > 0 {
                    g += py[i - w];
                }
                // g is -div(p), the ascent direction of <grad u, p> in u.
                u[i] -= tau * g;
            }
        }
        for i in 0..h * w {
            u_bar[i] = 2.0 * u[i] - u_old[i];
        }

        let obj = tv_objective(&grid_of(&u));
        if obj < best_obj - tol * best_obj.abs().max(1e-12) {
            best_obj = obj;
            best_u.copy_from_slice(&u);
            stall = 0;
        } else {
            if obj < best_obj {
                best_obj = obj;
                best_u.copy_from_slice(&u);
            }
            stall += 1;
        }
        trace.push(best_obj);
        if stall >= TV_PATIENCE {
            break;
        }
    }

    let mut out = map.clone();
    out.values = Grid {
        width: w,
        height: h,
        data: best_u,
    };
    out.mask = Grid::filled(h, w, 1);
    out.count = None;
    out.cell_std = None;
    Ok(TvResult {
        map: out,
        objective_trace: trace,
        iterations,
    })
}
