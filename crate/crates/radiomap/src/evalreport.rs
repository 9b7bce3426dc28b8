//! Evaluation protocol: per-zone MAE tables, MAE-vs-distance curves, signed
//! error scatters, empirical CDFs, and Wilcoxon rank-sum significance against
//! the best method.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, RadioMap};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sample passed to the rank-sum test")]
    EmptySample,
    #[error("no usable test points")]
    NoTestPoints,
}

/// A held-out ground-truth observation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthPoint {
    pub east: f64,
    pub north: f64,
    pub dbm: f64,
}

/// Zone radii reported by default, meters.
pub const DEFAULT_RADII: [f64; 3] = [200.0, 400.0, 800.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneMae {
    pub radius_m: f64,
    /// `None` when no test point falls inside the radius.
    pub mae_db: Option<f64>,
    pub count: usize,
}

/// Pair each truth point with the prediction at its cell. Points outside the
/// grid, on building cells, or on cells without a prediction are skipped, so
/// poisoned values there can never leak into a statistic.
fn paired_errors(
    pred: &RadioMap,
    truth: &[TruthPoint],
    buildings: Option<&Grid<u8>>,
) -> Vec<(f64, f64, f64)> {
    // (distance placeholder east, north, signed error) resolved by callers.
    truth
        .iter()
        .filter_map(|p| {
            let (row, col) = pred.spec.cell_of(p.east, p.north)?;
            if pred.mask.get(row, col) == 0 {
                return None;
            }
            if let Some(b) = buildings {
                if b.get(row, col) != 0 {
                    return None;
                }
            }
            let err = p.dbm - pred.values.get(row, col);
            Some((p.east, p.north, err))
        })
        .collect()
}

fn distance_to(bs: (f64, f64), east: f64, north: f64) -> f64 {
    ((east - bs.0).powi(2) + (north - bs.1).powi(2)).sqrt()
}

/// MAE over the test points within each radius of the base-station cell.
pub fn zone_mae(
    pred: &RadioMap,
    truth: &[TruthPoint],
    bs_cell: (usize, usize),
    radii: &[f64],
    buildings: Option<&Grid<u8>>,
) -> Vec<ZoneMae> {
    let bs = pred.spec.cell_center(bs_cell.0, bs_cell.1);
    let pairs = paired_errors(pred, truth, buildings);
    let mut out = Vec::with_capacity(radii.len());
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &r in &radii {
        let mut acc = 0.0;
        let mut n = 0usize;
        for &(e, no, err) in &pairs {
            if distance_to(bs, e, no) <= r {
                acc += err.abs();
                n += 1;
            }
        }
        out.push(ZoneMae {
            radius_m: r,
            mae_db: if n > 0 { Some(acc / n as f64) } else { None },
            count: n,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    /// MAE over all points within the distance (matches the figures).
    #[default]
    Cumulative,
    /// MAE per distance ring.
    Annulus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub distance_m: f64,
    pub mae_db: Option<f64>,
    pub count: usize,
}

/// MAE as a function of distance to the base station, sampled at bin edges.
pub fn mae_vs_distance(
    pred: &RadioMap,
    truth: &[TruthPoint],
    bs_cell: (usize, usize),
    bin_width_m: f64,
    mode: CurveMode,
    buildings: Option<&Grid<u8>>,
) -> Vec<CurvePoint> {
    let bs = pred.spec.cell_center(bs_cell.0, bs_cell.1);
    let pairs = paired_errors(pred, truth, buildings);
    if pairs.is_empty() {
        return Vec::new();
    }
    let max_d = pairs
        .iter()
        .map(|&(e, n, _)| distance_to(bs, e, n))
        .fold(0.0f64, f64::max);
    let bins = (max_d / bin_width_m).ceil().max(1.0) as usize;
    (1..=bins)
        .map(|k| {
            let hi = k as f64 * bin_width_m;
            let lo = match mode {
                CurveMode::Cumulative => 0.0,
                CurveMode::Annulus => hi - bin_width_m,
            };
            let mut acc = 0.0;
            let mut n = 0usize;
            for &(e, no, err) in &pairs {
                let d = distance_to(bs, e, no);
                if d <= hi && (d > lo || (lo == 0.0 && d >= 0.0)) {
                    acc += err.abs();
                    n += 1;
                }
            }
            CurvePoint {
                distance_m: hi,
                mae_db: if n > 0 { Some(acc / n as f64) } else { None },
                count: n,
            }
        })
        .collect()
}

/// Signed errors (truth - prediction) with positions, for scatter heatmaps.
pub fn error_heatmap(
    pred: &RadioMap,
    truth: &[TruthPoint],
    bs_cell: (usize, usize),
    radius_m: f64,
    buildings: Option<&Grid<u8>>,
) -> Vec<(f64, f64, f64)> {
    let bs = pred.spec.cell_center(bs_cell.0, bs_cell.1);
    paired_errors(pred, truth, buildings)
        .into_iter()
        .filter(|&(e, n, _)| distance_to(bs, e, n) <= radius_m)
        .collect()
}

/// Absolute errors for one method on the test points.
pub fn abs_errors(
    pred: &RadioMap,
    truth: &[TruthPoint],
    buildings: Option<&Grid<u8>>,
) -> Vec<f64> {
    paired_errors(pred, truth, buildings)
        .into_iter()
        .map(|(_, _, e)| e.abs())
        .collect()
}

/// Empirical CDF of absolute errors: sorted (|e|, fraction <= |e|) steps.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect()
}

// ---------------------------------------------------------------------------
// Wilcoxon rank sum
// ---------------------------------------------------------------------------

/// Midranks of the pooled samples; returns (ranks of a, ranks of b).
fn midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .copied()
        .map(|v| (v, 0usize))
        .chain(b.iter().copied().map(|v| (v, 1usize)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let n = pooled.len();
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = rank;
        }
        i = j + 1;
    }
    let mut ra = Vec::with_capacity(a.len());
    let mut rb = Vec::with_capacity(b.len());
    for (k, &(_, side)) in pooled.iter().enumerate() {
        if side == 0 {
            ra.push(ranks[k]);
        } else {
            rb.push(ranks[k]);
        }
    }
    (ra, rb)
}

/// Exact two-sided p by enumerating every assignment of pooled ranks to the
/// first sample: `2 * min(P(W <= w), P(W >= w))`, capped at 1.
pub fn wilcoxon_exact_p(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let (ra, rb) = midranks(a, b);
    let w_obs: f64 = ra.iter().sum();
    let mut all_ranks = ra.clone();
    all_ranks.extend_from_slice(&rb);
    let n = a.len();
    let total = all_ranks.len();

    let mut le = 0u64;
    let mut ge = 0u64;
    let mut count = 0u64;
    // Lexicographic combinations of `n` indices out of `total`.
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let w: f64 = idx.iter().map(|&i| all_ranks[i]).sum();
        if w <= w_obs + 1e-9 {
            le += 1;
        }
        if w >= w_obs - 1e-9 {
            ge += 1;
        }
        count += 1;
        // Advance.
        let mut k = n;
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            if idx[k] != k + total - n {
                idx[k] += 1;
                for j in k + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if k == 0 {
                return Ok((2.0 * (le.min(ge) as f64) / count as f64).min(1.0));
            }
        }
    }
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes 6.2.12 style rational Chebyshev fit, |err| < 1.2e-7.
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Two-sided p from the large-sample approximation. The rank sum is a total
/// over sampling without replacement from the pooled midranks (which is
/// where ties enter), so its exact mean, variance, skewness and kurtosis
/// follow from the midrank population power sums; an Edgeworth-corrected
/// normal CDF with continuity correction turns them into tail areas.
pub fn wilcoxon_normal_p(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let (ra, rb) = midranks(a, b);
    let w: f64 = ra.iter().sum();
    let n = a.len();
    let total = (a.len() + b.len()) as f64;

    // Centered power sums of the pooled midrank population.
    let mean_rank = (total + 1.0) / 2.0;
    let (mut p2, mut p3, mut p4) = (0.0f64, 0.0, 0.0);
    for &r in ra.iter().chain(rb.iter()) {
        let d = r - mean_rank;
        p2 += d * d;
        p3 += d * d * d;
        p4 += d * d * d * d;
    }
    // Joint inclusion probabilities of 1..4 distinct population items.
    let incl = |r: usize| -> f64 {
        (0..r).map(|t| (n - t) as f64 / (total - t as f64)).product()
    };
    let (q1, q2, q3, q4) = (incl(1), incl(2), incl(3), incl(4));
    let mu = n as f64 * mean_rank;
    let var = (q1 - q2) * p2;
    if var <= 0.0 {
        // All values tied: no evidence either way.
        return Ok(1.0);
    }
    let m3 = p3 * (q1 - 3.0 * q2 + 2.0 * q3);
    let m4 = p4 * (q1 - 7.0 * q2 + 12.0 * q3 - 6.0 * q4) + 3.0 * p2 * p2 * (q2 - 2.0 * q3 + q4);
    let sd = var.sqrt();
    let g1 = m3 / (var * sd);
    let g2 = m4 / (var * var) - 3.0;

    let cdf = |z: f64| -> f64 {
        let base = 1.0 - normal_sf(z);
        let corr = g1 / 6.0 * (z * z - 1.0)
            + g2 / 24.0 * (z * z * z - 3.0 * z)
            + g1 * g1 / 72.0 * (z.powi(5) - 10.0 * z.powi(3) + 15.0 * z);
        (base - normal_pdf(z) * corr).clamp(0.0, 1.0)
    };
    let p_le = cdf((w - mu + 0.5) / sd);
    let p_ge = 1.0 - cdf((w - mu - 0.5) / sd);
    Ok((2.0 * p_le.min(p_ge)).min(1.0))
}

/// Rank-sum statistic and two-sided p: exact by enumeration for pooled sizes
/// up to 20, normal approximation with tie correction beyond.
pub fn wilcoxon_ranksum(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let (ra, _) = midranks(a, b);
    let w: f64 = ra.iter().sum();
    let p = if a.len() + b.len() <= 20 {
        wilcoxon_exact_p(a, b)?
    } else {
        wilcoxon_normal_p(a, b)?
    };
    Ok((w, p))
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// Wilcoxon significance threshold for the `marker` column.
pub const SIGNIFICANCE_P: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub zones: Vec<ZoneMae>,
    pub global_mae_db: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub cdf: Vec<(f64, f64)>,
    /// Two-sided p against the best method; `None` for the best itself.
    pub p_vs_best: Option<f64>,
    /// "↓" when significantly worse than the best method.
    pub marker: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub radii_m: Vec<f64>,
    pub best_method: String,
    pub methods: Vec<MethodReport>,
    /// (east, north, truth - pred) of the best method within the largest
    /// radius.
    pub heatmap_best: Vec<(f64, f64, f64)>,
}

/// Build the full comparison report for several prediction maps over shared
/// truth points.
pub fn assemble_report(
    methods: &[(String, &RadioMap)],
    truth: &[TruthPoint],
    bs_cell: (usize, usize),
    radii: &[f64],
    bin_width_m: f64,
    buildings: Option<&Grid<u8>>,
) -> Result<EvalReport, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::NoTestPoints);
    }
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let errs: Vec<Vec<f64>> = methods
        .iter()
        .map(|(_, pred)| abs_errors(pred, truth, buildings))
        .collect();
    if errs.iter().all(|e| e.is_empty()) {
        return Err(EvalError::NoTestPoints);
    }
    let global: Vec<Option<f64>> = errs
        .iter()
        .map(|e| {
            if e.is_empty() {
                None
            } else {
                Some(e.iter().sum::<f64>() / e.len() as f64)
            }
        })
        .collect();
    let best_idx = global
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|v| (i, v)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    let mut out = Vec::with_capacity(methods.len());
    for (i, (name, pred)) in methods.iter().enumerate() {
        let p = if i == best_idx || errs[i].is_empty() || errs[best_idx].is_empty() {
            None
        } else {
            Some(wilcoxon_ranksum(&errs[i], &errs[best_idx])?.1)
        };
        let marker = match p {
            Some(p) if p < SIGNIFICANCE_P => "↓".to_string(),
            _ => String::new(),
        };
        out.push(MethodReport {
            method: name.clone(),
            zones: zone_mae(pred, truth, bs_cell, &radii, buildings),
            global_mae_db: global[i],
            curve: mae_vs_distance(pred, truth, bs_cell, bin_width_m, CurveMode::Cumulative, buildings),
            cdf: error_cdf(&errs[i]),
            p_vs_best: p,
            marker,
        });
    }
    let largest = radii.last().copied().unwrap_or(f64::INFINITY);
    let heatmap_best = error_heatmap(methods[best_idx].1, truth, bs_cell, largest, buildings);
    Ok(EvalReport {
        radii_m: radii,
        best_method: methods[best_idx].0.clone(),
        methods: out,
        heatmap_best,
    })
}

/// Render the zone table as CSV: `method,radius_m,mae_db,count,marker`.
pub fn zone_table_csv(report: &EvalReport) -> String {
    let mut s = String::from("method,radius_m,mae_db,count,marker\n");
    for m in &report.methods {
        for z in &m.zones {
            let mae = z
                .mae_db
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "".to_string());
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                m.method, z.radius_m, mae, z.count, m.marker
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn dense_map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> RadioMap {
        let spec = GridSpec::new(0.0, 0.0, 10.0, w, h).unwrap();
        let mut map = RadioMap::empty(spec);
        for r in 0..h {
            for c in 0..w {
                map.values.set(r, c, f(r, c));
                map.mask.set(r, c, 1);
            }
        }
        map
    }

    #[test]
    fn zone_mae_perfect_predictions_are_zero() {
        let map = dense_map(64, 64, |r, c| -60.0 - (r + c) as f64);
        let truth: Vec<TruthPoint> = (0..50)
            .map(|k| {
                let (r, c) = (k % 64, (k * 7) % 64);
                let (e, n) = map.spec.cell_center(r, c);
                TruthPoint { east: e, north: n, dbm: map.values.get(r, c) }
            })
            .collect();
        let zones = zone_mae(&map, &truth, (32, 32), &DEFAULT_RADII, None);
        for z in zones {
            if z.count > 0 {
                assert_eq!(z.mae_db, Some(0.0));
            }
        }
    }

    #[test]
    fn zone_mae_six_point_hand_fixture() {
        // BS at cell (0,0); three points within 200 m (errors 1, 2, 3), three
        // beyond (errors 10, 10, 10).
        let map = dense_map(100, 100, |_, _| -80.0);
        let mk = |col: usize, err: f64| {
            let (e, n) = map.spec.cell_center(0, col);
            TruthPoint { east: e, north: n, dbm: -80.0 + err }
        };
        let truth = vec![
            mk(0, 1.0),
            mk(5, 2.0),
            mk(10, 3.0),
            mk(50, 10.0),
            mk(60, -10.0),
            mk(70, 10.0),
        ];
        let zones = zone_mae(&map, &truth, (0, 0), &[200.0, 400.0, 800.0], None);
        assert_eq!(zones[0].count, 3);
        assert!((zones[0].mae_db.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(zones[1].count, 3);
        assert_eq!(zones[2].count, 6);
        assert!((zones[2].mae_db.unwrap() - 6.0).abs() < 1e-12);
        // Empty zone is None, not zero.
        let far = vec![mk(90, 5.0)];
        let zones = zone_mae(&map, &far, (0, 0), &[200.0], None);
        assert_eq!(zones[0].mae_db, None);
        assert_eq!(zones[0].count, 0);
    }

    #[test]
    fn curve_reaches_global_mae_and_matches_recompute() {
        let map = dense_map(64, 64, |r, c| -70.0 - (r as f64) - 0.5 * c as f64);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let truth: Vec<TruthPoint> = (0..80)
            .map(|_| {
                let r = rng.random_range(0..64);
                let c = rng.random_range(0..64);
                let (e, n) = map.spec.cell_center(r, c);
                TruthPoint { east: e, north: n, dbm: map.values.get(r, c) + rng.random_range(-5.0..5.0) }
            })
            .collect();
        let curve = mae_vs_distance(&map, &truth, (0, 0), 50.0, CurveMode::Cumulative, None);
        let global = abs_errors(&map, &truth, None);
        let global_mae = global.iter().sum::<f64>() / global.len() as f64;
        let last = curve.last().unwrap();
        assert!((last.mae_db.unwrap() - global_mae).abs() < 1e-12);
        // Counts are monotone for the cumulative mode.
        for w in curve.windows(2) {
            assert!(w[1].count >= w[0].count);
        }
        // Spot-check three edges against direct recomputation.
        let bs = map.spec.cell_center(0, 0);
        for k in [1usize, curve.len() / 2, curve.len() - 1] {
            let hi = curve[k].distance_m;
            let mut acc = 0.0;
            let mut n = 0;
            for p in &truth {
                let d = ((p.east - bs.0).powi(2) + (p.north - bs.1).powi(2)).sqrt();
                if d <= hi {
                    let (r, c) = map.spec.cell_of(p.east, p.north).unwrap();
                    acc += (p.dbm - map.values.get(r, c)).abs();
                    n += 1;
                }
            }
            if n > 0 {
                assert!((curve[k].mae_db.unwrap() - acc / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_counts_and_signs() {
        let map = dense_map(64, 64, |_, _| -90.0);
        let mk = |col: usize, truth: f64| {
            let (e, n) = map.spec.cell_center(0, col);
            TruthPoint { east: e, north: n, dbm: truth }
        };
        let truth = vec![mk(0, -88.0), mk(3, -92.0), mk(60, -80.0)];
        let pts = error_heatmap(&map, &truth, (0, 0), 200.0, None);
        assert_eq!(pts.len(), 2);
        assert!((pts[0].2 - 2.0).abs() < 1e-12);
        assert!((pts[1].2 - -2.0).abs() < 1e-12);
        let mean = (pts[0].2 + pts[1].2) / 2.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn cdf_steps_and_quartiles() {
        let cdf = error_cdf(&[2.0]);
        assert_eq!(cdf, vec![(2.0, 1.0)]);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(-10.0..10.0)).collect();
        let cdf = error_cdf(&vals);
        assert_eq!(cdf.last().unwrap().1, 1.0);
        let mut sorted: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cdf[24].0, sorted[24]);
        assert_eq!(cdf[49].0, sorted[49]);
        assert_eq!(cdf[74].0, sorted[74]);
    }

    #[test]
    fn wilcoxon_identical_samples_show_no_evidence() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let (_, p) = wilcoxon_ranksum(&a, &a).unwrap();
        assert!(p > 0.9, "p = {p}");
    }

    #[test]
    fn wilcoxon_exact_small_fixture() {
        let (w, p) = wilcoxon_ranksum(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(w, 3.0);
        assert!((p - 1.0 / 3.0).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn wilcoxon_scale_invariance() {
        let a = vec![1.0, 5.0, 2.5, 7.0, 3.0];
        let b = vec![2.0, 6.0, 8.0, 1.5];
        let (w1, p1) = wilcoxon_ranksum(&a, &b).unwrap();
        let a2: Vec<f64> = a.iter().map(|v| v * 2.0).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * 2.0).collect();
        let (w2, p2) = wilcoxon_ranksum(&a2, &b2).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(p1, p2);
        // Any strictly monotone transform, e.g. exp.
        let a3: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let b3: Vec<f64> = b.iter().map(|v| v.exp()).collect();
        let (w3, p3) = wilcoxon_ranksum(&a3, &b3).unwrap();
        assert_eq!(w1, w3);
        assert_eq!(p1, p3);
    }

    #[test]
    fn wilcoxon_normal_approximation_tracks_exact_at_n14() {
        // Exhaustive over every untied sample pair shape: for continuous
        // data only the split and the rank sum matter, so scanning all
        // (n, W) combinations covers all pairs with |a| + |b| = 14.
        let mut worst: f64 = 0.0;
        for na in 3..=11usize {
            // Any strictly increasing values realize the rank assignment.
            let mut idx: Vec<usize> = (0..na).collect();
            loop {
                let a: Vec<f64> = idx.iter().map(|&i| i as f64 + 1.0).collect();
                let b: Vec<f64> = (0..14)
                    .filter(|i| !idx.contains(i))
                    .map(|i| i as f64 + 1.0)
                    .collect();
                let pe = wilcoxon_exact_p(&a, &b).unwrap();
                let pn = wilcoxon_normal_p(&a, &b).unwrap();
                worst = worst.max((pe - pn).abs());
                // Next combination, lexicographic.
                let mut k = na;
                let mut done = false;
                loop {
                    if k == 0 {
                        done = true;
                        break;
                    }
                    k -= 1;
                    if idx[k] != k + 14 - na {
                        idx[k] += 1;
                        for j in k + 1..na {
                            idx[j] = idx[j - 1] + 1;
                        }
                        break;
                    }
                }
                if done {
                    break;
                }
            }
        }
        assert!(worst <= 0.01, "worst |exact - normal| = {worst}");
    }

    #[test]
    fn wilcoxon_approximation_reasonable_under_ties() {
        // Ties make the null distribution lumpy; a continuous approximation
        // cannot chase the atoms near p = 1, but in the decision region the
        // two must stay close.
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut worst_low: f64 = 0.0;
        for case in 0..80 {
            let na = 4 + case % 7;
            let nb = 14 - na;
            let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..6) as f64).collect();
            let pe = wilcoxon_exact_p(&a, &b).unwrap();
            let pn = wilcoxon_normal_p(&a, &b).unwrap();
            if pe < 0.3 {
                worst_low = worst_low.max((pe - pn).abs());
            }
        }
        assert!(worst_low <= 0.04, "worst under ties (p < 0.3) = {worst_low}");
    }

    #[test]
    fn excluded_cells_never_change_statistics() {
        let mut map = dense_map(32, 32, |r, c| -70.0 - (r + c) as f64);
        let mut buildings = Grid::filled(32, 32, 0u8);
        buildings.set(3, 3, 1);
        buildings.set(10, 20, 1);
        let truth: Vec<TruthPoint> = (0..30)
            .map(|k| {
                let (r, c) = ((k * 3) % 32, (k * 11) % 32);
                let (e, n) = map.spec.cell_center(r, c);
                TruthPoint { east: e, north: n, dbm: map.values.get(r, c) + 1.0 }
            })
            .collect();
        let base = zone_mae(&map, &truth, (16, 16), &DEFAULT_RADII, Some(&buildings));
        let base_curve = mae_vs_distance(&map, &truth, (16, 16), 50.0, CurveMode::Cumulative, Some(&buildings));
        // Poison the building cells and a non-test cell.
        map.values.set(3, 3, 9999.0);
        map.values.set(10, 20, -9999.0);
        map.values.set(31, 0, 4242.0);
        let poisoned = zone_mae(&map, &truth, (16, 16), &DEFAULT_RADII, Some(&buildings));
        for (a, b) in base.iter().zip(&poisoned) {
            assert_eq!(a.mae_db, b.mae_db);
            assert_eq!(a.count, b.count);
        }
        let poisoned_curve = mae_vs_distance(&map, &truth, (16, 16), 50.0, CurveMode::Cumulative, Some(&buildings));
        for (a, b) in base_curve.iter().zip(&poisoned_curve) {
            assert_eq!(a.mae_db, b.mae_db);
        }
    }

    #[test]
    fn report_marks_significantly_worse_methods() {
        let good = dense_map(64, 64, |r, c| -70.0 - (r + c) as f64);
        let bad = dense_map(64, 64, |r, c| -70.0 - (r + c) as f64 + 15.0);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let truth: Vec<TruthPoint> = (0..60)
            .map(|_| {
                let r = rng.random_range(0..64);
                let c = rng.random_range(0..64);
                let (e, n) = good.spec.cell_center(r, c);
                TruthPoint { east: e, north: n, dbm: good.values.get(r, c) + rng.random_range(-1.0..1.0) }
            })
            .collect();
        let report = assemble_report(
            &[("good".to_string(), &good), ("bad".to_string(), &bad)],
            &truth,
            (32, 32),
            &DEFAULT_RADII,
            50.0,
            None,
        )
        .unwrap();
        assert_eq!(report.best_method, "good");
        assert_eq!(report.methods[0].marker, "");
        assert_eq!(report.methods[1].marker, "↓");
        assert!(report.methods[1].p_vs_best.unwrap() < 0.01);
        let csv = zone_table_csv(&report);
        assert!(csv.contains("good,200,"));
        assert!(csv.lines().count() > 6);
    }
}
