//! Synthetic cities and measurement campaigns: random street-grid scenes
//! with block buildings, a coarse surface model, path-loss ground truth with
//! per-building attenuation, and GPS-tagged measurement logs sampled along
//! the roads. Everything is reproducible from the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridSpec, RadioMap};
use crate::ingest::{enu_to_geo, MeasurementRecord};
use crate::pathloss::{predict_rssi, PathLossError, PathLossParams};
use crate::sidechannels::{building_count_channel, BuildingScene, Footprint, Raster};
use crate::tiles::mix_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    PathLoss(#[from] PathLossError),
    #[error(transparent)]
    Channel(#[from] crate::sidechannels::ChannelError),
    #[error("scene needs at least one non-building road cell for a base station")]
    NoRoomForBs,
}

/// Geometry knobs of the generated city.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityParams {
    /// Probability that a street block hosts a building.
    pub building_density: f64,
    /// Cells between street centerlines.
    pub road_pitch: usize,
    pub bs_count: usize,
    /// WGS-84 anchor of the ENU origin, for emitting GPS-tagged logs.
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            building_density: 0.5,
            road_pitch: 8,
            bs_count: 4,
            origin_lat: 45.19,
            origin_lon: 5.71,
        }
    }
}

/// A generated city.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: GridSpec,
    pub params: CityParams,
    pub seed: u64,
    pub buildings: BuildingScene,
    pub dsm: Raster,
    /// 1 on street cells.
    pub roads: Grid<u8>,
    pub bs_cells: Vec<(usize, usize)>,
}

/// Generate a reproducible scene: a street lattice every `road_pitch` cells,
/// block buildings sampled off-road, a 30 m surface model (terrain ramp plus
/// building heights), and base stations snapped to road cells.
pub fn gen_city(seed: u64, spec: GridSpec, params: &CityParams) -> Result<SynthScene, SynthError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pitch = params.road_pitch.max(3);

    let mut roads = Grid::filled(spec.height, spec.width, 0u8);
    for r in 0..spec.height {
        for c in 0..spec.width {
            if r % pitch == 0 || c % pitch == 0 {
                roads.set(r, c, 1);
            }
        }
    }

    // One candidate building per street block, aligned to cell boundaries.
    let mut footprints = Vec::new();
    let mut heights = Vec::new();
    let mut next_id = 0u32;
    let blocks_r = spec.height / pitch + 1;
    let blocks_c = spec.width / pitch + 1;
    for br in 0..blocks_r {
        for bc in 0..blocks_c {
            // Interior of the block, one cell clear of every road.
            let r0 = br * pitch + 1;
            let c0 = bc * pitch + 1;
            let r1 = ((br + 1) * pitch).min(spec.height);
            let c1 = ((bc + 1) * pitch).min(spec.width);
            if r1 <= r0 + 1 || c1 <= c0 + 1 {
                continue;
            }
            if !rng.random_bool(params.building_density.clamp(0.0, 1.0)) {
                continue;
            }
            let max_h = r1 - r0;
            let max_w = c1 - c0;
            let bh = rng.random_range(2..=max_h.min(pitch - 2).max(2));
            let bw = rng.random_range(2..=max_w.min(pitch - 2).max(2));
            let rr = r0 + rng.random_range(0..=max_h - bh);
            let cc = c0 + rng.random_range(0..=max_w - bw);
            let e0 = spec.origin_east + cc as f64 * spec.cell_m;
            let n0 = spec.origin_north + rr as f64 * spec.cell_m;
            let e1 = e0 + bw as f64 * spec.cell_m;
            let n1 = n0 + bh as f64 * spec.cell_m;
            footprints.push(Footprint {
                rings: vec![vec![(e0, n0), (e1, n0), (e1, n1), (e0, n1), (e0, n0)]],
                id: Some(next_id),
            });
            heights.push(rng.random_range(6.0..30.0f64));
            next_id += 1;
        }
    }
    let buildings = BuildingScene::rasterize(footprints, &spec);

    // 30 m surface model with margin: gentle terrain ramp plus buildings.
    let dsm_cell = 30.0;
    let margin = 2.0 * dsm_cell;
    let dsm_spec = GridSpec::new(
        spec.origin_east - margin,
        spec.origin_north - margin,
        dsm_cell,
        ((spec.width as f64 * spec.cell_m + 2.0 * margin) / dsm_cell).ceil() as usize + 1,
        ((spec.height as f64 * spec.cell_m + 2.0 * margin) / dsm_cell).ceil() as usize + 1,
    )
    .expect("dsm spec is valid");
    let mut dsm_data = Grid::filled(dsm_spec.height, dsm_spec.width, 0.0f64);
    for r in 0..dsm_spec.height {
        for c in 0..dsm_spec.width {
            let (e, n) = dsm_spec.cell_center(r, c);
            let mut z = 200.0 + 0.01 * (e - spec.origin_east) + 0.005 * (n - spec.origin_north);
            if let Some((row, col)) = spec.cell_of(e, n) {
                if buildings.raster.get(row, col) != 0 {
                    let id = buildings
                        .ids
                        .as_ref()
                        .map(|g| g.get(row, col))
                        .unwrap_or(0);
                    if id > 0 {
                        z += heights[(id - 1) as usize];
                    }
                }
            }
            dsm_data.set(r, c, z);
        }
    }
    let dsm = Raster {
        spec: dsm_spec,
        data: dsm_data,
    };

    // Base stations: snap spread-out anchor points to road cells.
    let anchors: Vec<(f64, f64)> = (0..params.bs_count)
        .map(|k| match k {
            0 => (0.3, 0.3),
            1 => (0.3, 0.7),
            2 => (0.7, 0.3),
            3 => (0.7, 0.7),
            _ => (
                0.15 + 0.7 * ((k * 2654435761) % 97) as f64 / 97.0,
                0.15 + 0.7 * ((k * 40503) % 89) as f64 / 89.0,
            ),
        })
        .collect();
    let mut bs_cells = Vec::with_capacity(params.bs_count);
    for (fr, fc) in anchors {
        let target = (
            (fr * spec.height as f64) as isize,
            (fc * spec.width as f64) as isize,
        );
        let mut best: Option<(i64, (usize, usize))> = None;
        for r in 0..spec.height {
            for c in 0..spec.width {
                if roads.get(r, c) == 0 || buildings.raster.get(r, c) != 0 {
                    continue;
                }
                if bs_cells.contains(&(r, c)) {
                    continue;
                }
                let d = (r as isize - target.0).pow(2) + (c as isize - target.1).pow(2);
                if best.map(|(bd, _)| (d as i64) < bd).unwrap_or(true) {
                    best = Some((d as i64, (r, c)));
                }
            }
        }
        bs_cells.push(best.ok_or(SynthError::NoRoomForBs)?.1);
    }

    Ok(SynthScene {
        spec,
        params: params.clone(),
        seed,
        buildings,
        dsm,
        roads,
        bs_cells,
    })
}

/// Measurement campaign knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementParams {
    /// Signal loss per building crossed, dB.
    pub per_building_loss: f64,
    /// Receiver sensitivity floor, dBm.
    pub floor_dbm: f64,
    /// Fraction of road cells that get visited.
    pub sample_fraction: f64,
    /// Extra per-record noise on top of the cell truth, dB.
    pub record_noise_db: f64,
    pub seed: u64,
}

impl Default for MeasurementParams {
    fn default() -> Self {
        MeasurementParams {
            per_building_loss: 6.0,
            floor_dbm: -120.0,
            sample_fraction: 0.5,
            record_noise_db: 0.0,
            seed: 0,
        }
    }
}

/// Ground truth plus sampled records for every base station of a scene.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub records: Vec<MeasurementRecord>,
    /// Per base station, in `scene.bs_cells` order; masked off buildings.
    pub truth: Vec<RadioMap>,
    /// Buildings crossed, one raster per base station.
    pub counts: Vec<Grid<f64>>,
}

/// Simulate the measurement campaign: per-cell truth follows the path-loss
/// model minus `per_building_loss` per crossed building plus shadowing,
/// clamped at the sensitivity floor; records are drawn on road cells with
/// Poisson(3)+1 repeats per visited cell.
pub fn gen_measurements(
    scene: &SynthScene,
    params: &PathLossParams,
    mp: &MeasurementParams,
) -> Result<Campaign, SynthError> {
    let spec = scene.spec;
    let mut records = Vec::new();
    let mut truth_maps = Vec::with_capacity(scene.bs_cells.len());
    let mut counts_out = Vec::with_capacity(scene.bs_cells.len());
    let poisson = Poisson::new(3.0).expect("valid Poisson");

    for (b, &bs) in scene.bs_cells.iter().enumerate() {
        let counts = building_count_channel(&scene.buildings, &spec, bs)?;
        let mut shadow_rng = ChaCha12Rng::seed_from_u64(mix_seed(mp.seed, b as u64));
        let mut truth = RadioMap::empty(spec);
        for r in 0..spec.height {
            for c in 0..spec.width {
                let d = spec.cell_distance(bs, (r, c)).max(params.d0_m);
                let mut v = predict_rssi(params, d)?
                    - mp.per_building_loss * counts.get(r, c);
                if params.sigma_db > 0.0 {
                    let noise = Normal::new(0.0, params.sigma_db).expect("sigma >= 0");
                    v += noise.sample(&mut shadow_rng);
                } else {
                    // Keep the rng stream aligned whether or not shadowing
                    // is enabled.
                    let _: f64 = shadow_rng.random();
                }
                v = v.max(mp.floor_dbm);
                truth.values.set(r, c, v);
                if scene.buildings.raster.get(r, c) == 0 {
                    truth.mask.set(r, c, 1);
                }
            }
        }

        let mut sample_rng = ChaCha12Rng::seed_from_u64(mix_seed(mp.seed, 0x5a5a + b as u64));
        let mut t = 1_600_000_000i64 + b as i64;
        for r in 0..spec.height {
            for c in 0..spec.width {
                if scene.roads.get(r, c) == 0 || scene.buildings.raster.get(r, c) != 0 {
                    continue;
                }
                if !sample_rng.random_bool(mp.sample_fraction.clamp(0.0, 1.0)) {
                    continue;
                }
                let repeats = poisson.sample(&mut sample_rng) as usize + 1;
                let (e, n) = spec.cell_center(r, c);
                let (lat, lon) = enu_to_geo(e, n, scene.params.origin_lat, scene.params.origin_lon);
                let cell_truth = truth.values.get(r, c);
                for _ in 0..repeats {
                    let mut v = cell_truth;
                    if mp.record_noise_db > 0.0 {
                        let noise = Normal::new(0.0, mp.record_noise_db).expect("noise >= 0");
                        v += noise.sample(&mut sample_rng);
                    }
                    records.push(MeasurementRecord {
                        gateway_id: format!("BS{}", b + 1),
                        device_id: format!("dev{:02}", (r * spec.width + c) % 20),
                        rssi_dbm: v.clamp(-200.0, 0.0),
                        lat,
                        lon,
                        time_unix: t,
                    });
                    t += 7;
                }
            }
        }
        truth_maps.push(truth);
        counts_out.push(counts);
    }
    Ok(Campaign {
        records,
        truth: truth_maps,
        counts: counts_out,
    })
}

// ---------------------------------------------------------------------------
// Writers for the on-disk artifact formats
// ---------------------------------------------------------------------------

/// Render records as the ingest CSV schema.
pub fn records_to_csv(records: &[MeasurementRecord]) -> String {
    let mut s = String::from("gateway_id,device_id,rssi_dbm,lat,lon,time\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.4},{:.8},{:.8},{}\n",
            r.gateway_id,
            r.device_id,
            r.rssi_dbm,
            r.lat,
            r.lon,
            format_iso8601(r.time_unix),
        ));
    }
    s
}

fn format_iso8601(unix: i64) -> String {
    // Inverse of the ingest parser's days-from-civil conversion.
    let days = unix.div_euclid(86_400);
    let secs = unix.rem_euclid(86_400);
    let (y, m, d) = civil_from_days(days);
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}",
        secs / 3600,
        (secs % 3600) / 60,
        secs % 60
    )
}

fn civil_from_days(z: i64) -> (i64, i64, i64) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (if m <= 2 { y + 1 } else { y }, m, d)
}

/// Footprints as a GeoJSON FeatureCollection in WGS-84.
pub fn scene_to_geojson(scene: &SynthScene) -> String {
    let mut features = Vec::new();
    for f in &scene.buildings.footprints {
        let rings: Vec<Vec<[f64; 2]>> = f
            .rings
            .iter()
            .map(|ring| {
                ring.iter()
                    .map(|&(e, n)| {
                        let (lat, lon) =
                            enu_to_geo(e, n, scene.params.origin_lat, scene.params.origin_lon);
                        [lon, lat]
                    })
                    .collect()
            })
            .collect();
        features.push(serde_json::json!({
            "type": "Feature",
            "properties": { "id": f.id },
            "geometry": { "type": "Polygon", "coordinates": rings }
        }));
    }
    serde_json::to_string_pretty(&serde_json::json!({
        "type": "FeatureCollection",
        "features": features
    }))
    .expect("geojson serializes")
}

/// Scene summary manifest.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub spec: GridSpec,
    pub params: CityParams,
    pub bs_cells: Vec<(usize, usize)>,
    pub building_count: usize,
}

pub fn scene_manifest(scene: &SynthScene) -> SceneManifest {
    SceneManifest {
        seed: scene.seed,
        spec: scene.spec,
        params: scene.params.clone(),
        bs_cells: scene.bs_cells.clone(),
        building_count: scene.buildings.footprints.len(),
    }
}
