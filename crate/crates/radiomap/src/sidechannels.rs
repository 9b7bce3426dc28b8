//! Side-information rasters fed to the model as extra input channels:
//! distance to the base station, building presence, buildings crossed by the
//! direct path, and terrain elevation, plus the per-channel normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridSpec};
use crate::ingest::geo_to_enu;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("base-station cell ({0}, {1}) outside the grid")]
    BsOutOfGrid(usize, usize),
    #[error("DSM does not cover the target extent: needs east [{need_e0:.1}, {need_e1:.1}] north [{need_n0:.1}, {need_n1:.1}], has east [{have_e0:.1}, {have_e1:.1}] north [{have_n0:.1}, {have_n1:.1}]")]
    DsmExtent {
        need_e0: f64,
        need_e1: f64,
        need_n0: f64,
        need_n1: f64,
        have_e0: f64,
        have_e1: f64,
        have_n0: f64,
        have_n1: f64,
    },
    #[error("raster shape {got_h}x{got_w} does not match grid spec {want_h}x{want_w}")]
    ShapeMismatch {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("geojson: {0}")]
    GeoJson(String),
}

/// The side channels in their canonical stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum ChannelId {
    Measurements,
    Distance,
    Elevation,
    BuildingCount,
    Buildings,
}

impl ChannelId {
    pub const CANONICAL: [ChannelId; 5] = [
        ChannelId::Measurements,
        ChannelId::Distance,
        ChannelId::Elevation,
        ChannelId::BuildingCount,
        ChannelId::Buildings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::Measurements => "msm",
            ChannelId::Distance => "dist",
            ChannelId::Elevation => "elev",
            ChannelId::BuildingCount => "count",
            ChannelId::Buildings => "bld",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.trim() {
            "msm" | "measurements" => Some(ChannelId::Measurements),
            "dist" | "distance" => Some(ChannelId::Distance),
            "elev" | "elevation" => Some(ChannelId::Elevation),
            "count" | "building_count" => Some(ChannelId::BuildingCount),
            "bld" | "buildings" => Some(ChannelId::Buildings),
            _ => None,
        }
    }

    fn rank(self) -> usize {
        Self::CANONICAL.iter().position(|&c| c == self).unwrap()
    }
}

/// Per-channel affine normalization constants recorded before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub min: f64,
    pub max: f64,
}

impl ChannelNorm {
    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.max > self.min {
            (x - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

/// Normalized side-information rasters in canonical channel order.
#[derive(Debug, Clone)]
pub struct ChannelStack {
    pub spec: GridSpec,
    pub channels: Vec<(ChannelId, Grid<f64>)>,
    pub norms: Vec<ChannelNorm>,
}

impl ChannelStack {
    pub fn channel(&self, id: ChannelId) -> Option<(&Grid<f64>, ChannelNorm)> {
        self.channels
            .iter()
            .position(|(c, _)| *c == id)
            .map(|i| (&self.channels[i].1, self.norms[i]))
    }

    pub fn ids(&self) -> Vec<ChannelId> {
        self.channels.iter().map(|(c, _)| *c).collect()
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Min-max scale each raster to [0, 1] over the whole map, recording the
/// constants for inversion. Constant channels map to all zeros. Non-finite
/// cells are excluded from the scan and come out as 0.
pub fn normalize_stack(
    spec: GridSpec,
    rasters: Vec<(ChannelId, Grid<f64>)>,
) -> Result<ChannelStack, ChannelError> {
    let mut out = normalize_stacks_shared(spec, vec![rasters])?;
    Ok(out.remove(0))
}

/// Normalize one stack per base station with constants shared across all of
/// them, so a given physical value encodes identically everywhere and models
/// transfer between base stations. Every group must carry the same channels.
pub fn normalize_stacks_shared(
    spec: GridSpec,
    groups: Vec<Vec<(ChannelId, Grid<f64>)>>,
) -> Result<Vec<ChannelStack>, ChannelError> {
    let mut groups: Vec<Vec<(ChannelId, Grid<f64>)>> = groups;
    for rasters in groups.iter_mut() {
        rasters.sort_by_key(|(id, _)| id.rank());
        for (_, raster) in rasters.iter() {
            if raster.height != spec.height || raster.width != spec.width {
                return Err(ChannelError::ShapeMismatch {
                    want_h: spec.height,
                    want_w: spec.width,
                    got_h: raster.height,
                    got_w: raster.width,
                });
            }
        }
    }
    let ids: Vec<ChannelId> = groups
        .first()
        .map(|g| g.iter().map(|(id, _)| *id).collect())
        .unwrap_or_default();
    for g in &groups {
        let got: Vec<ChannelId> = g.iter().map(|(id, _)| *id).collect();
        if got != ids {
            return Err(ChannelError::GeoJson(format!(
                "stacks disagree on channels: {ids:?} vs {got:?}"
            )));
        }
    }

    let mut norms = Vec::with_capacity(ids.len());
    for k in 0..ids.len() {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for g in &groups {
            for &v in &g[k].1.data {
                if v.is_finite() {
                    min = min.min(v);
                    max = max.max(v);
                }
            }
        }
        if !min.is_finite() {
            min = 0.0;
            max = 0.0;
        }
        norms.push(ChannelNorm { min, max });
    }

    Ok(groups
        .into_iter()
        .map(|g| ChannelStack {
            spec,
            channels: g
                .into_iter()
                .enumerate()
                .map(|(k, (id, raster))| {
                    let norm = norms[k];
                    (id, raster.map(|v| if v.is_finite() { norm.normalize(v) } else { 0.0 }))
                })
                .collect(),
            norms: norms.clone(),
        })
        .collect())
}

/// Distance channel: `-log10(d)` of the center-to-center distance to the
/// base-station cell, with the distance clamped below at 1 m.
pub fn distance_channel(spec: &GridSpec, bs_cell: (usize, usize)) -> Result<Grid<f64>, ChannelError> {
    if !spec.contains_cell(bs_cell.0, bs_cell.1) {
        return Err(ChannelError::BsOutOfGrid(bs_cell.0, bs_cell.1));
    }
    let mut out = Grid::filled(spec.height, spec.width, 0.0);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let d = spec.cell_distance(bs_cell, (row, col)).max(1.0);
            out.set(row, col, -d.log10());
        }
    }
    Ok(out)
}

/// A building footprint in ENU meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    /// Outer ring first, optional hole rings after; even-odd filling.
    pub rings: Vec<Vec<(f64, f64)>>,
    pub id: Option<u32>,
}

/// Building footprints plus their rasterization onto a grid.
#[derive(Debug, Clone)]
pub struct BuildingScene {
    pub footprints: Vec<Footprint>,
    /// 1 where the cell center falls inside any footprint.
    pub raster: Grid<u8>,
    /// Building id + 1 per cell when every footprint carries an id.
    pub ids: Option<Grid<u32>>,
}

impl BuildingScene {
    /// Rasterize footprints by cell-center point-in-polygon tests.
    pub fn rasterize(footprints: Vec<Footprint>, spec: &GridSpec) -> Self {
        let all_ids = !footprints.is_empty() && footprints.iter().all(|f| f.id.is_some());
        let mut raster = Grid::filled(spec.height, spec.width, 0u8);
        let mut ids = Grid::filled(spec.height, spec.width, 0u32);
        for row in 0..spec.height {
            for col in 0..spec.width {
                let (e, n) = spec.cell_center(row, col);
                for f in &footprints {
                    if point_in_footprint(e, n, f) {
                        raster.set(row, col, 1);
                        if let Some(id) = f.id {
                            ids.set(row, col, id + 1);
                        }
                        break;
                    }
                }
            }
        }
        BuildingScene {
            footprints,
            raster,
            ids: if all_ids { Some(ids) } else { None },
        }
    }

    /// Wrap a pre-rasterized binary grid.
    pub fn from_raster(raster: Grid<u8>) -> Self {
        BuildingScene {
            footprints: Vec::new(),
            raster,
            ids: None,
        }
    }
}

fn point_in_footprint(e: f64, n: f64, f: &Footprint) -> bool {
    // Even-odd rule over all rings, so holes subtract.
    let mut inside = false;
    for ring in &f.rings {
        if ring.len() < 3 {
            continue;
        }
        let mut j = ring.len() - 1;
        for i in 0..ring.len() {
            let (xi, yi) = ring[i];
            let (xj, yj) = ring[j];
            if (yi > n) != (yj > n) && e < (xj - xi) * (n - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
    }
    inside
}

/// Binary building-presence channel.
pub fn buildings_channel(scene: &BuildingScene, spec: &GridSpec) -> Result<Grid<f64>, ChannelError> {
    if scene.raster.height != spec.height || scene.raster.width != spec.width {
        return Err(ChannelError::ShapeMismatch {
            want_h: spec.height,
            want_w: spec.width,
            got_h: scene.raster.height,
            got_w: scene.raster.width,
        });
    }
    Ok(scene.raster.map(|v| if v != 0 { 1.0 } else { 0.0 }))
}

/// All cells whose interior the open segment between the two cell centers
/// intersects, in traversal order. Source and destination are included.
///
/// The segment is cut at every grid-line crossing; the midpoint of each
/// non-degenerate piece identifies the cell it lies in, so corner touches
/// (which intersect no interior) are skipped.
pub fn supercover_cells(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (x0, y0) = (from.1 as f64 + 0.5, from.0 as f64 + 0.5);
    let (x1, y1) = (to.1 as f64 + 0.5, to.0 as f64 + 0.5);
    let dx = x1 - x0;
    let dy = y1 - y0;

    let mut ts = vec![0.0f64, 1.0];
    for (p0, dp) in [(x0, dx), (y0, dy)] {
        if dp.abs() > 0.0 {
            let (lo, hi) = if dp > 0.0 { (p0, p0 + dp) } else { (p0 + dp, p0) };
            let mut k = lo.ceil();
            if k == lo {
                k += 1.0;
            }
            while k < hi {
                ts.push((k - p0) / dp);
                k += 1.0;
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(ts.len());
    for w in ts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= 1e-12 {
            continue;
        }
        let tm = (t0 + t1) / 2.0;
        let cx = (x0 + tm * dx).floor() as isize;
        let cy = (y0 + tm * dy).floor() as isize;
        let cell = (cy.max(0) as usize, cx.max(0) as usize);
        if cells.last() != Some(&cell) {
            cells.push(cell);
        }
    }
    if cells.is_empty() {
        cells.push(from);
    }
    cells
}

/// Buildings crossed by the direct path from the base-station cell to every
/// cell: contiguous building runs along the supercover traversal, or distinct
/// building ids when the scene carries them.
pub fn building_count_channel(
    scene: &BuildingScene,
    spec: &GridSpec,
    bs_cell: (usize, usize),
) -> Result<Grid<f64>, ChannelError> {
    if !spec.contains_cell(bs_cell.0, bs_cell.1) {
        return Err(ChannelError::BsOutOfGrid(bs_cell.0, bs_cell.1));
    }
    if scene.raster.height != spec.height || scene.raster.width != spec.width {
        return Err(ChannelError::ShapeMismatch {
            want_h: spec.height,
            want_w: spec.width,
            got_h: scene.raster.height,
            got_w: scene.raster.width,
        });
    }
    let width = spec.width;
    let data: Vec<f64> = (0..spec.cells())
        .into_par_iter()
        .map(|i| {
            let cell = (i / width, i % width);
            count_crossed_buildings(scene, bs_cell, cell) as f64
        })
        .collect();
    Ok(Grid {
        width: spec.width,
        height: spec.height,
        data,
    })
}

/// Count buildings along the supercover path between two cells.
pub fn count_crossed_buildings(
    scene: &BuildingScene,
    from: (usize, usize),
    to: (usize, usize),
) -> u32 {
    let path = supercover_cells(from, to);
    match &scene.ids {
        Some(ids) => {
            let mut seen: Vec<u32> = Vec::new();
            for (r, c) in path {
                let id = ids.get(r, c);
                if id != 0 && !seen.contains(&id) {
                    seen.push(id);
                }
            }
            seen.len() as u32
        }
        None => {
            let mut runs = 0u32;
            let mut prev = false;
            for (r, c) in path {
                let b = scene.raster.get(r, c) != 0;
                if b && !prev {
                    runs += 1;
                }
                prev = b;
            }
            runs
        }
    }
}

/// A raster with its own placement, e.g. a digital surface model.
#[derive(Debug, Clone)]
pub struct Raster {
    pub spec: GridSpec,
    pub data: Grid<f64>,
}

/// Nearest-neighbor resampling of a DSM onto the target grid.
pub fn elevation_channel(dsm: &Raster, spec: &GridSpec) -> Result<Grid<f64>, ChannelError> {
    // Every target cell center must fall inside the DSM extent.
    let (e0, n0) = spec.cell_center(0, 0);
    let (e1, n1) = spec.cell_center(spec.height - 1, spec.width - 1);
    let have_e1 = dsm.spec.origin_east + dsm.spec.width as f64 * dsm.spec.cell_m;
    let have_n1 = dsm.spec.origin_north + dsm.spec.height as f64 * dsm.spec.cell_m;
    if e0 < dsm.spec.origin_east || n0 < dsm.spec.origin_north || e1 >= have_e1 || n1 >= have_n1 {
        return Err(ChannelError::DsmExtent {
            need_e0: e0,
            need_e1: e1,
            need_n0: n0,
            need_n1: n1,
            have_e0: dsm.spec.origin_east,
            have_e1,
            have_n0: dsm.spec.origin_north,
            have_n1,
        });
    }
    let mut out = Grid::filled(spec.height, spec.width, 0.0);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (e, n) = spec.cell_center(row, col);
            let (sr, sc) = dsm.spec.cell_of(e, n).expect("extent checked above");
            out.set(row, col, dsm.data.get(sr, sc));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File formats: GeoJSON building footprints and ESRI ASCII grids
// ---------------------------------------------------------------------------

/// Parse a GeoJSON FeatureCollection of Polygon / MultiPolygon footprints.
/// Coordinates are WGS-84 and get projected into the ENU frame of
/// `(origin_lat, origin_lon)`. An integer `id` or `building_id` property is
/// kept when present.
pub fn parse_geojson_buildings(
    text: &str,
    origin_lat: f64,
    origin_lon: f64,
) -> Result<Vec<Footprint>, ChannelError> {
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ChannelError::GeoJson(e.to_string()))?;
    let mut out = Vec::new();
    let features: Vec<&serde_json::Value> = match root.get("type").and_then(|t| t.as_str()) {
        Some("FeatureCollection") => root
            .get("features")
            .and_then(|f| f.as_array())
            .map(|a| a.iter().collect())
            .unwrap_or_default(),
        Some("Feature") => vec![&root],
        Some(other) => {
            return Err(ChannelError::GeoJson(format!(
                "expected FeatureCollection, got {other}"
            )))
        }
        None => return Err(ChannelError::GeoJson("missing `type`".into())),
    };
    for feature in features {
        let id = feature
            .get("properties")
            .and_then(|p| p.get("id").or_else(|| p.get("building_id")))
            .and_then(|v| v.as_u64())
            .map(|v| v as u32);
        let Some(geom) = feature.get("geometry") else {
            continue;
        };
        match geom.get("type").and_then(|t| t.as_str()) {
            Some("Polygon") => {
                if let Some(rings) = parse_polygon_rings(geom.get("coordinates"), origin_lat, origin_lon) {
                    out.push(Footprint { rings, id });
                }
            }
            Some("MultiPolygon") => {
                if let Some(polys) = geom.get("coordinates").and_then(|c| c.as_array()) {
                    for poly in polys {
                        if let Some(rings) = parse_polygon_rings(Some(poly), origin_lat, origin_lon) {
                            out.push(Footprint { rings, id });
                        }
                    }
                }
            }
            _ => continue,
        }
    }
    Ok(out)
}

fn parse_polygon_rings(
    coords: Option<&serde_json::Value>,
    origin_lat: f64,
    origin_lon: f64,
) -> Option<Vec<Vec<(f64, f64)>>> {
    let rings = coords?.as_array()?;
    let mut out = Vec::new();
    for ring in rings {
        let pts = ring.as_array()?;
        let mut r = Vec::with_capacity(pts.len());
        for p in pts {
            let pair = p.as_array()?;
            let lon = pair.first()?.as_f64()?;
            let lat = pair.get(1)?.as_f64()?;
            r.push(geo_to_enu(lat, lon, origin_lat, origin_lon));
        }
        if r.len() >= 3 {
            out.push(r);
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Parse an ESRI ASCII grid (`ncols/nrows/xllcorner/yllcorner/cellsize/
/// NODATA_value` header followed by rows north to south). NODATA becomes NaN.
pub fn parse_esri_ascii(text: &str) -> Result<Raster, ChannelError> {
    let mut ncols: Option<usize> = None;
    let mut nrows: Option<usize> = None;
    let mut xll: Option<f64> = None;
    let mut yll: Option<f64> = None;
    let mut cell: Option<f64> = None;
    let mut nodata: Option<f64> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut header_done = false;

    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let first = parts.next().unwrap();
        if !header_done {
            let key = first.to_ascii_lowercase();
            let parse_val = |p: Option<&str>| -> Result<f64, ChannelError> {
                p.ok_or_else(|| ChannelError::Parse {
                    line: i + 1,
                    msg: "missing header value".into(),
                })?
                .parse()
                .map_err(|_| ChannelError::Parse {
                    line: i + 1,
                    msg: format!("bad header value in `{line}`"),
                })
            };
            match key.as_str() {
                "ncols" => {
                    ncols = Some(parse_val(parts.next())? as usize);
                    continue;
                }
                "nrows" => {
                    nrows = Some(parse_val(parts.next())? as usize);
                    continue;
                }
                "xllcorner" => {
                    xll = Some(parse_val(parts.next())?);
                    continue;
                }
                "yllcorner" => {
                    yll = Some(parse_val(parts.next())?);
                    continue;
                }
                "cellsize" => {
                    cell = Some(parse_val(parts.next())?);
                    continue;
                }
                "nodata_value" => {
                    nodata = Some(parse_val(parts.next())?);
                    continue;
                }
                _ => header_done = true,
            }
        }
        for tok in std::iter::once(first).chain(parts) {
            let v: f64 = tok.parse().map_err(|_| ChannelError::Parse {
                line: i + 1,
                msg: format!("bad data value `{tok}`"),
            })?;
            values.push(v);
        }
    }

    let (ncols, nrows) = match (ncols, nrows) {
        (Some(c), Some(r)) if c > 0 && r > 0 => (c, r),
        _ => {
            return Err(ChannelError::Parse {
                line: 1,
                msg: "missing or invalid ncols/nrows".into(),
            })
        }
    };
    let cell = cell.filter(|c| *c > 0.0).ok_or(ChannelError::Parse {
        line: 1,
        msg: "missing or invalid cellsize".into(),
    })?;
    if values.len() != ncols * nrows {
        return Err(ChannelError::Parse {
            line: 1,
            msg: format!("expected {} values, found {}", ncols * nrows, values.len()),
        });
    }
    let nodata = nodata.unwrap_or(-9999.0);
    // File rows run north to south; grid row 0 is the southernmost.
    let mut data = vec![0.0f64; ncols * nrows];
    for r in 0..nrows {
        for c in 0..ncols {
            let v = values[r * ncols + c];
            let v = if v == nodata { f64::NAN } else { v };
            data[(nrows - 1 - r) * ncols + c] = v;
        }
    }
    let spec = GridSpec::new(xll.unwrap_or(0.0), yll.unwrap_or(0.0), cell, ncols, nrows)
        .map_err(|e| ChannelError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    Ok(Raster {
        spec,
        data: Grid::from_vec(nrows, ncols, data).expect("sized above"),
    })
}

/// Render a raster as an ESRI ASCII grid.
pub fn write_esri_ascii(raster: &Raster) -> String {
    let mut s = String::new();
    s.push_str(&format!("ncols {}\n", raster.spec.width));
    s.push_str(&format!("nrows {}\n", raster.spec.height));
    s.push_str(&format!("xllcorner {}\n", raster.spec.origin_east));
    s.push_str(&format!("yllcorner {}\n", raster.spec.origin_north));
    s.push_str(&format!("cellsize {}\n", raster.spec.cell_m));
    s.push_str("NODATA_value -9999\n");
    for r in (0..raster.spec.height).rev() {
        let row: Vec<String> = (0..raster.spec.width)
            .map(|c| {
                let v = raster.data.get(r, c);
                if v.is_finite() {
                    format!("{v}")
                } else {
                    "-9999".to_string()
                }
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}
