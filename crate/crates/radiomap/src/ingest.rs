//! Measurement log parsing, artifact filtering, local projection and grid
//! aggregation.
//!
//! The ingest chain goes: CSV rows -> [`MeasurementRecord`]s -> charging
//! artifact removal -> ENU projection -> per-cell power aggregation ->
//! cell filtering -> train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::grid::{Grid, GridSpec, RadioMap};

/// WGS-84 equatorial radius, meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Default RSSI ceiling above which a static device is considered to be
/// charging indoors, dBm.
pub const DEFAULT_RSSI_CEILING_DBM: f64 = -55.0;

/// Default minimum duration of a suspicious static window, seconds.
pub const DEFAULT_STATIC_WINDOW_S: i64 = 30 * 60;

/// Two fixes closer than this (degrees) count as the same position.
const POSITION_EPS_DEG: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("header has {0} columns, expected 6: gateway_id,device_id,rssi_dbm,lat,lon,time")]
    BadHeader(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// One GPS-tagged RSSI observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub gateway_id: String,
    pub device_id: String,
    /// Received power, dBm.
    pub rssi_dbm: f64,
    /// WGS-84 latitude, degrees.
    pub lat: f64,
    /// WGS-84 longitude, degrees.
    pub lon: f64,
    /// Seconds since the Unix epoch, UTC.
    pub time_unix: i64,
}

impl MeasurementRecord {
    pub fn is_valid(&self) -> bool {
        (-200.0..=0.0).contains(&self.rssi_dbm)
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A row the parser could not turn into a valid record.
#[derive(Debug, Clone, PartialEq)]
pub struct RowReject {
    /// 1-based line number in the input stream.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<MeasurementRecord>,
    pub rejects: Vec<RowReject>,
}

const HEADER: [&str; 6] = ["gateway_id", "device_id", "rssi_dbm", "lat", "lon", "time"];

/// Parse a measurement CSV stream.
///
/// The header is mandatory for non-empty input. Rows that fail to parse or
/// violate value ranges are reported with their line number rather than
/// aborting the whole stream.
pub fn parse_measurements(input: &str) -> Result<ParseOutcome, IngestError> {
    let mut out = ParseOutcome::default();
    let mut lines = input.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(out), // empty stream: empty list, zero rejects
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != HEADER.len() {
        return Err(IngestError::BadHeader(cols.len()));
    }
    for want in HEADER {
        if !cols.iter().any(|c| c.eq_ignore_ascii_case(want)) {
            return Err(IngestError::MissingColumn(want.to_string()));
        }
    }
    // Column order may differ from canonical; map positions once.
    let pos: Vec<usize> = HEADER
        .iter()
        .map(|want| cols.iter().position(|c| c.eq_ignore_ascii_case(want)).unwrap())
        .collect();

    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != HEADER.len() {
            out.rejects.push(RowReject {
                line: lineno,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
            continue;
        }
        match parse_row(&fields, &pos) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(RowReject {
                line: lineno,
                reason,
            }),
        }
    }
    Ok(out)
}

fn parse_row(fields: &[&str], pos: &[usize]) -> Result<MeasurementRecord, String> {
    let rssi_dbm: f64 = fields[pos[2]]
        .parse()
        .map_err(|_| format!("unparsable rssi `{}`", fields[pos[2]]))?;
    let lat: f64 = fields[pos[3]]
        .parse()
        .map_err(|_| format!("unparsable lat `{}`", fields[pos[3]]))?;
    let lon: f64 = fields[pos[4]]
        .parse()
        .map_err(|_| format!("unparsable lon `{}`", fields[pos[4]]))?;
    let time_unix = parse_iso8601(fields[pos[5]])
        .ok_or_else(|| format!("unparsable time `{}`", fields[pos[5]]))?;
    let rec = MeasurementRecord {
        gateway_id: fields[pos[0]].to_string(),
        device_id: fields[pos[1]].to_string(),
        rssi_dbm,
        lat,
        lon,
        time_unix,
    };
    if !(-200.0..=0.0).contains(&rssi_dbm) {
        return Err(format!("rssi {rssi_dbm} outside [-200, 0] dBm"));
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("lat {lat} outside [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("lon {lon} outside [-180, 180]"));
    }
    Ok(rec)
}

/// Parse `YYYY-MM-DDTHH:MM:SS` (optional fractional seconds, optional `Z`,
/// space accepted for `T`) into Unix seconds.
pub fn parse_iso8601(s: &str) -> Option<i64> {
    let s = s.trim().trim_end_matches('Z');
    let bytes = s.as_bytes();
    if bytes.len() < 19 {
        return None;
    }
    if bytes[4] != b'-' || bytes[7] != b'-' || (bytes[10] != b'T' && bytes[10] != b' ') {
        return None;
    }
    if bytes[13] != b':' || bytes[16] != b':' {
        return None;
    }
    let year: i64 = s.get(0..4)?.parse().ok()?;
    let month: i64 = s.get(5..7)?.parse().ok()?;
    let day: i64 = s.get(8..10)?.parse().ok()?;
    let hour: i64 = s.get(11..13)?.parse().ok()?;
    let minute: i64 = s.get(14..16)?.parse().ok()?;
    let second: i64 = s.get(17..19)?.parse().ok()?;
    if let Some(rest) = s.get(19..) {
        if !rest.is_empty() && !(rest.starts_with('.') && rest[1..].chars().all(|c| c.is_ascii_digit()))
        {
            return None;
        }
    }
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    if !(0..24).contains(&hour) || !(0..60).contains(&minute) || !(0..61).contains(&second) {
        return None;
    }
    Some(days_from_civil(year, month, day) * 86_400 + hour * 3_600 + minute * 60 + second)
}

// Days since 1970-01-01 for a proleptic Gregorian date.
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Remove charging artifacts: windows where a (device, gateway) pair reports
/// RSSI above `ceiling_dbm` for at least `static_window_s` while the device
/// position does not move. Every record of that device inside such a window
/// is dropped, across all gateways. Records with invalid latitude are dropped
/// unconditionally.
pub fn filter_artifacts(
    records: &[MeasurementRecord],
    ceiling_dbm: f64,
    static_window_s: i64,
) -> (Vec<MeasurementRecord>, usize) {
    use std::collections::HashMap;

    // Suspicious time windows per device.
    let mut windows: HashMap<&str, Vec<(i64, i64)>> = HashMap::new();
    let mut per_pair: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        per_pair
            .entry((r.device_id.as_str(), r.gateway_id.as_str()))
            .or_default()
            .push(i);
    }
    let mut pairs: Vec<_> = per_pair.into_iter().collect();
    pairs.sort_by_key(|((d, g), _)| (d.to_string(), g.to_string()));

    for ((device, _gateway), mut idxs) in pairs {
        idxs.sort_by_key(|&i| records[i].time_unix);
        let mut run_start = 0usize;
        let mut k = 0usize;
        while k <= idxs.len() {
            let run_breaks = k == idxs.len() || {
                let cur = &records[idxs[k]];
                let first = &records[idxs[run_start]];
                cur.rssi_dbm <= ceiling_dbm
                    || (cur.lat - first.lat).abs() > POSITION_EPS_DEG
                    || (cur.lon - first.lon).abs() > POSITION_EPS_DEG
            };
            if run_breaks {
                if k > run_start {
                    let t0 = records[idxs[run_start]].time_unix;
                    let t1 = records[idxs[k - 1]].time_unix;
                    if t1 - t0 >= static_window_s {
                        windows.entry(device).or_default().push((t0, t1));
                    }
                }
                // A record that broke the run on rssi alone may still start a
                // new static run at its own position.
                run_start = k;
            }
            k += 1;
        }
    }

    let mut kept = Vec::with_capacity(records.len());
    let mut removed = 0usize;
    for r in records {
        let lat_ok = (-90.0..=90.0).contains(&r.lat);
        let in_window = windows
            .get(r.device_id.as_str())
            .map(|ws| ws.iter().any(|&(t0, t1)| r.time_unix >= t0 && r.time_unix <= t1))
            .unwrap_or(false);
        if lat_ok && !in_window {
            kept.push(r.clone());
        } else {
            removed += 1;
        }
    }
    (kept, removed)
}

/// Equirectangular projection to a local east/north frame, meters.
pub fn geo_to_enu(lat: f64, lon: f64, origin_lat: f64, origin_lon: f64) -> (f64, f64) {
    let north = EARTH_RADIUS_M * (lat - origin_lat).to_radians();
    let east = EARTH_RADIUS_M * (lon - origin_lon).to_radians() * origin_lat.to_radians().cos();
    (east, north)
}

/// Inverse of [`geo_to_enu`].
pub fn enu_to_geo(east: f64, north: f64, origin_lat: f64, origin_lon: f64) -> (f64, f64) {
    let lat = origin_lat + (north / EARTH_RADIUS_M).to_degrees();
    let lon = origin_lon + (east / (EARTH_RADIUS_M * origin_lat.to_radians().cos())).to_degrees();
    (lat, lon)
}

/// A projected measurement ready for gridding.
#[derive(Debug, Clone, Copy)]
pub struct EnuSample {
    pub east: f64,
    pub north: f64,
    pub rssi_dbm: f64,
}

/// Project records into the ENU frame of `(origin_lat, origin_lon)`.
pub fn project_records(
    records: &[MeasurementRecord],
    origin_lat: f64,
    origin_lon: f64,
) -> Vec<EnuSample> {
    records
        .iter()
        .map(|r| {
            let (east, north) = geo_to_enu(r.lat, r.lon, origin_lat, origin_lon);
            EnuSample {
                east,
                north,
                rssi_dbm: r.rssi_dbm,
            }
        })
        .collect()
}

/// Aggregate projected samples onto a grid: per cell the powers are averaged
/// in milliwatts and converted back to dBm. Returns the map and the number of
/// samples that fell outside the grid.
pub fn aggregate_to_grid(samples: &[EnuSample], spec: GridSpec) -> (RadioMap, usize) {
    let n = spec.cells();
    let mut sum_mw = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    // Welford accumulators for the dB-domain std.
    let mut mean_db = vec![0.0f64; n];
    let mut m2_db = vec![0.0f64; n];
    let mut dropped = 0usize;

    for s in samples {
        match spec.cell_of(s.east, s.north) {
            None => dropped += 1,
            Some((row, col)) => {
                let i = row * spec.width + col;
                sum_mw[i] += 10f64.powf(s.rssi_dbm / 10.0);
                count[i] += 1;
                let k = count[i] as f64;
                let delta = s.rssi_dbm - mean_db[i];
                mean_db[i] += delta / k;
                m2_db[i] += delta * (s.rssi_dbm - mean_db[i]);
            }
        }
    }

    let mut map = RadioMap::empty(spec);
    let mut std = Grid::filled(spec.height, spec.width, f64::NAN);
    let mut counts = Grid::filled(spec.height, spec.width, 0u32);
    for i in 0..n {
        counts.data[i] = count[i];
        if count[i] > 0 {
            map.values.data[i] = 10.0 * (sum_mw[i] / count[i] as f64).log10();
            map.mask.data[i] = 1;
        }
        if count[i] >= 2 {
            std.data[i] = (m2_db[i] / (count[i] as f64 - 1.0)).sqrt();
        }
    }
    map.count = Some(counts);
    map.cell_std = Some(std);
    (map, dropped)
}

/// Drop unreliable cells: first every cell with fewer than `min_count`
/// measurements, then the `drop_fraction` of the remaining cells with the
/// highest `variance / count`. Values are retained; only the mask changes.
pub fn filter_cells(
    map: &RadioMap,
    min_count: u32,
    drop_fraction: f64,
) -> Result<RadioMap, IngestError> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(IngestError::Config(format!(
            "drop_fraction must be in [0, 1), got {drop_fraction}"
        )));
    }
    let count = map
        .count
        .as_ref()
        .ok_or_else(|| IngestError::Config("map has no count grid".into()))?;
    let std = map
        .cell_std
        .as_ref()
        .ok_or_else(|| IngestError::Config("map has no cell_std grid".into()))?;

    let mut out = map.clone();
    let mut survivors: Vec<usize> = Vec::new();
    for i in 0..map.mask.data.len() {
        if map.mask.data[i] == 0 {
            continue;
        }
        if count.data[i] < min_count {
            out.mask.data[i] = 0;
        } else {
            survivors.push(i);
        }
    }
    let to_drop = (drop_fraction * survivors.len() as f64).ceil() as usize;
    if to_drop > 0 {
        let mut scored: Vec<(f64, usize)> = survivors
            .iter()
            .map(|&i| {
                let s = std.data[i];
                let s2 = if s.is_finite() { s * s } else { 0.0 };
                (s2 / count.data[i] as f64, i)
            })
            .collect();
        // Highest score first; ties resolved by row-major index.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in scored.iter().take(to_drop) {
            out.mask.data[i] = 0;
        }
    }
    Ok(out)
}

/// Partition masked cells into train and validation maps, uniformly at random
/// by seed. The two masks are disjoint and cover the input mask exactly.
pub fn split_train_val(map: &RadioMap, val_fraction: f64, seed: u64) -> (RadioMap, RadioMap) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idxs = map.masked_indices();
    idxs.shuffle(&mut rng);
    let n_val = (val_fraction * idxs.len() as f64).round() as usize;

    let mut train = map.clone();
    let mut val = map.clone();
    for m in val.mask.data.iter_mut() {
        *m = 0;
    }
    for &i in idxs.iter().take(n_val) {
        train.mask.data[i] = 0;
        val.mask.data[i] = 1;
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CSV_HEADER: &str = "gateway_id,device_id,rssi_dbm,lat,lon,time\n";

    #[test]
    fn parses_a_standard_row() {
        let input = format!(
            "{CSV_HEADER}7276ff002e0701e5,70b3d5499b4922dc,-95,45.199308,5.712627,2021-08-29T13:46:35\n"
        );
        let out = parse_measurements(&input).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.rejects.is_empty());
        let r = &out.records[0];
        assert_eq!(r.gateway_id, "7276ff002e0701e5");
        assert_eq!(r.device_id, "70b3d5499b4922dc");
        assert_eq!(r.rssi_dbm, -95.0);
        assert!((r.lat - 45.199308).abs() < 1e-12);
        assert!((r.lon - 5.712627).abs() < 1e-12);
    }

    #[test]
    fn empty_stream_is_empty_list() {
        let out = parse_measurements("").unwrap();
        assert!(out.records.is_empty());
        assert!(out.rejects.is_empty());
    }

    #[test]
    fn out_of_range_latitude_is_rejected_with_line_number() {
        let input = format!("{CSV_HEADER}gw,dev,-95,95.0,5.7,2021-08-29T13:46:35\n");
        let out = parse_measurements(&input).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line, 2);
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let input = "gateway_id,device_id,rssi_dbm,lat,lon\ngw,dev,-95,45.0,5.7\n";
        assert!(matches!(
            parse_measurements(input),
            Err(IngestError::BadHeader(5))
        ));
        let input = "gateway_id,device_id,power,lat,lon,time\n";
        assert!(matches!(
            parse_measurements(input),
            Err(IngestError::MissingColumn(c)) if c == "rssi_dbm"
        ));
    }

    #[test]
    fn unparsable_time_is_rejected() {
        let input = format!("{CSV_HEADER}gw,dev,-95,45.0,5.7,yesterday\n");
        let out = parse_measurements(&input).unwrap();
        assert_eq!(out.rejects.len(), 1);
        assert!(out.rejects[0].reason.contains("time"));
    }

    #[test]
    fn iso8601_matches_known_epochs() {
        assert_eq!(parse_iso8601("1970-01-01T00:00:00"), Some(0));
        assert_eq!(parse_iso8601("2021-08-29T13:46:35"), Some(1_630_244_795));
        assert_eq!(parse_iso8601("2021-08-29 13:46:35Z"), Some(1_630_244_795));
        assert_eq!(parse_iso8601("2021-08-29T13:46:35.250"), Some(1_630_244_795));
        assert_eq!(parse_iso8601("not-a-time"), None);
    }

    fn rec(device: &str, gateway: &str, rssi: f64, lat: f64, t: i64) -> MeasurementRecord {
        MeasurementRecord {
            gateway_id: gateway.into(),
            device_id: device.into(),
            rssi_dbm: rssi,
            lat,
            lon: 5.7,
            time_unix: t,
        }
    }

    #[test]
    fn charging_device_is_removed_across_gateways() {
        let mut records = Vec::new();
        // Two hours of -50 dBm at a fixed position on gateway A.
        for k in 0..24 {
            records.push(rec("dev1", "gwA", -50.0, 45.0, k * 300));
        }
        // Same device heard by gateway B inside the window, weaker.
        records.push(rec("dev1", "gwB", -80.0, 45.0, 3_600));
        // A moving device stays.
        records.push(rec("dev2", "gwA", -80.0, 45.001, 100));
        records.push(rec("dev2", "gwA", -90.0, 45.002, 200));

        let (kept, removed) = filter_artifacts(&records, -55.0, 1_800);
        assert_eq!(removed, 25);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|r| r.device_id == "dev2"));
    }

    #[test]
    fn alternating_mobile_device_is_unchanged() {
        let records = vec![
            rec("dev1", "gwA", -80.0, 45.0, 0),
            rec("dev1", "gwA", -90.0, 45.001, 60),
            rec("dev1", "gwA", -80.0, 45.002, 120),
        ];
        let (kept, removed) = filter_artifacts(&records, -55.0, 1_800);
        assert_eq!(removed, 0);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn short_loud_burst_is_kept() {
        // Static and loud, but only 10 minutes.
        let records: Vec<_> = (0..3).map(|k| rec("dev1", "gwA", -50.0, 45.0, k * 300)).collect();
        let (kept, removed) = filter_artifacts(&records, -55.0, 1_800);
        assert_eq!(removed, 0);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn filter_artifacts_empty_input() {
        let (kept, removed) = filter_artifacts(&[], -55.0, 1_800);
        assert!(kept.is_empty());
        assert_eq!(removed, 0);
    }

    #[test]
    fn enu_projection_reference_values() {
        let (e, n) = geo_to_enu(45.0, 5.0, 45.0, 5.0);
        assert_eq!((e, n), (0.0, 0.0));
        let (e, n) = geo_to_enu(46.0, 5.0, 45.0, 5.0);
        assert!(e.abs() < 1e-9);
        assert!((n - 111_319.490_793).abs() < 1e-3, "north {n}");
        // Odd symmetry in longitude.
        let (e1, n1) = geo_to_enu(45.0, 5.5, 45.0, 5.0);
        let (e2, n2) = geo_to_enu(45.0, 4.5, 45.0, 5.0);
        assert!((e1 + e2).abs() < 1e-9);
        assert_eq!(n1, n2);
    }

    #[test]
    fn mw_domain_mean_fixture() {
        let spec = GridSpec::new(0.0, 0.0, 10.0, 2, 2).unwrap();
        let samples = vec![
            EnuSample { east: 5.0, north: 5.0, rssi_dbm: -90.0 },
            EnuSample { east: 6.0, north: 4.0, rssi_dbm: -100.0 },
        ];
        let (map, dropped) = aggregate_to_grid(&samples, spec);
        assert_eq!(dropped, 0);
        let v = map.values.get(0, 0);
        assert!((v - -92.596_373_105).abs() < 1e-6, "got {v}");
        assert_eq!(map.count.as_ref().unwrap().get(0, 0), 2);
    }

    #[test]
    fn equal_records_have_zero_std() {
        let spec = GridSpec::new(0.0, 0.0, 10.0, 1, 1).unwrap();
        let samples = vec![
            EnuSample { east: 5.0, north: 5.0, rssi_dbm: -90.0 },
            EnuSample { east: 2.0, north: 8.0, rssi_dbm: -90.0 },
        ];
        let (map, _) = aggregate_to_grid(&samples, spec);
        assert!((map.values.get(0, 0) - -90.0).abs() < 1e-9);
        assert!(map.cell_std.as_ref().unwrap().get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn out_of_grid_samples_are_counted() {
        let spec = GridSpec::new(0.0, 0.0, 10.0, 1, 1).unwrap();
        let samples = vec![
            EnuSample { east: 5.0, north: 5.0, rssi_dbm: -90.0 },
            EnuSample { east: 50.0, north: 5.0, rssi_dbm: -90.0 },
        ];
        let (map, dropped) = aggregate_to_grid(&samples, spec);
        assert_eq!(dropped, 1);
        assert_eq!(map.masked_cells(), 1);
    }

    #[test]
    fn filter_cells_uniform_scores_drop_by_index() {
        // 5x5 grid, identical variance/count everywhere: ceil(0.1 * 25) = 3
        // cells dropped, the lowest row-major indices first.
        let spec = GridSpec::new(0.0, 0.0, 10.0, 5, 5).unwrap();
        let mut map = RadioMap::empty(spec);
        for i in 0..25 {
            map.values.data[i] = -90.0;
            map.mask.data[i] = 1;
        }
        map.count = Some(Grid::filled(5, 5, 4));
        map.cell_std = Some(Grid::filled(5, 5, 2.0));
        let out = filter_cells(&map, 3, 0.10).unwrap();
        assert_eq!(out.masked_cells(), 22);
        assert_eq!(out.mask.data[0], 0);
        assert_eq!(out.mask.data[1], 0);
        assert_eq!(out.mask.data[2], 0);
        assert_eq!(out.mask.data[3], 1);
    }

    #[test]
    fn filter_cells_all_singletons_unmasks_everything() {
        let spec = GridSpec::new(0.0, 0.0, 10.0, 3, 3).unwrap();
        let mut map = RadioMap::empty(spec);
        for i in 0..9 {
            map.values.data[i] = -90.0;
            map.mask.data[i] = 1;
        }
        map.count = Some(Grid::filled(3, 3, 1));
        map.cell_std = Some(Grid::filled(3, 3, f64::NAN));
        let out = filter_cells(&map, 3, 0.10).unwrap();
        assert_eq!(out.masked_cells(), 0);
    }

    #[test]
    fn filter_cells_zero_fraction_keeps_mask() {
        let spec = GridSpec::new(0.0, 0.0, 10.0, 3, 3).unwrap();
        let mut map = RadioMap::empty(spec);
        for i in 0..9 {
            map.values.data[i] = -90.0;
            map.mask.data[i] = 1;
        }
        map.count = Some(Grid::filled(3, 3, 5));
        map.cell_std = Some(Grid::filled(3, 3, 2.0));
        let out = filter_cells(&map, 3, 0.0).unwrap();
        assert_eq!(out.mask, map.mask);
        assert!(filter_cells(&map, 3, 1.0).is_err());
        assert!(filter_cells(&map, 3, -0.1).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let spec = GridSpec::new(0.0, 0.0, 10.0, 10, 10).unwrap();
        let mut map = RadioMap::empty(spec);
        for i in 0..100 {
            map.values.data[i] = -80.0;
            map.mask.data[i] = 1;
        }
        let (train, val) = split_train_val(&map, 0.10, 7);
        assert_eq!(val.masked_cells(), 10);
        assert_eq!(train.masked_cells(), 90);
        for i in 0..100 {
            assert_eq!(train.mask.data[i] & val.mask.data[i], 0);
            assert_eq!(train.mask.data[i] | val.mask.data[i], map.mask.data[i]);
        }
        let (train2, val2) = split_train_val(&map, 0.10, 7);
        assert_eq!(train.mask, train2.mask);
        assert_eq!(val.mask, val2.mask);

        let (_, val0) = split_train_val(&map, 0.0, 7);
        assert_eq!(val0.masked_cells(), 0);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let spec = GridSpec::new(0.0, 0.0, 10.0, 4, 4).unwrap();
            let samples: Vec<EnuSample> = (0..60)
                .map(|_| EnuSample {
                    east: rand::Rng::random_range(&mut rng, 0.0..40.0),
                    north: rand::Rng::random_range(&mut rng, 0.0..40.0),
                    rssi_dbm: rand::Rng::random_range(&mut rng, -120.0..-60.0),
                })
                .collect();
            let mut reversed = samples.clone();
            reversed.reverse();
            let (a, _) = aggregate_to_grid(&samples, spec);
            let (b, _) = aggregate_to_grid(&reversed, spec);
            for i in 0..16 {
                prop_assert_eq!(a.mask.data[i], b.mask.data[i]);
                if a.mask.data[i] == 1 {
                    prop_assert!((a.values.data[i] - b.values.data[i]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn mw_mean_dominates_db_mean(seed in 0u64..1000) {
            // Jensen: averaging powers in mW can only raise the dB value.
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let spec = GridSpec::new(0.0, 0.0, 10.0, 1, 1).unwrap();
            let vals: Vec<f64> = (0..8)
                .map(|_| rand::Rng::random_range(&mut rng, -120.0..-60.0))
                .collect();
            let samples: Vec<EnuSample> = vals
                .iter()
                .map(|&v| EnuSample { east: 5.0, north: 5.0, rssi_dbm: v })
                .collect();
            let (map, _) = aggregate_to_grid(&samples, spec);
            let db_mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!(map.values.get(0, 0) >= db_mean - 1e-12);
        }

        #[test]
        fn enu_roundtrip_below_nanometer(
            lat in -70.0f64..70.0,
            lon in -170.0f64..170.0,
            dlat in -0.05f64..0.05,
            dlon in -0.05f64..0.05,
        ) {
            let (e, n) = geo_to_enu(lat + dlat, lon + dlon, lat, lon);
            let (lat2, lon2) = enu_to_geo(e, n, lat, lon);
            let (e2, n2) = geo_to_enu(lat2, lon2, lat, lon);
            prop_assert!((e - e2).abs() < 1e-9);
            prop_assert!((n - n2).abs() < 1e-9);
        }

        #[test]
        fn filter_cells_never_adds_mask_bits(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let spec = GridSpec::new(0.0, 0.0, 10.0, 6, 6).unwrap();
            let mut map = RadioMap::empty(spec);
            let mut count = Grid::filled(6, 6, 0u32);
            let mut std = Grid::filled(6, 6, f64::NAN);
            for i in 0..36 {
                if rand::Rng::random_bool(&mut rng, 0.7) {
                    map.mask.data[i] = 1;
                    map.values.data[i] = -90.0;
                    count.data[i] = rand::Rng::random_range(&mut rng, 1..10);
                    if count.data[i] >= 2 {
                        std.data[i] = rand::Rng::random_range(&mut rng, 0.0..10.0);
                    }
                }
            }
            map.count = Some(count);
            map.cell_std = Some(std);
            let out = filter_cells(&map, 3, 0.10).unwrap();
            for i in 0..36 {
                prop_assert!(out.mask.data[i] <= map.mask.data[i]);
            }
        }
    }
}
