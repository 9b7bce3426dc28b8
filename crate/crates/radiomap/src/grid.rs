//! Metric grids, radio maps and the on-disk grid container.
//!
//! A [`GridSpec`] anchors an H×W raster in a local ENU frame: row 0 sits at
//! the minimum north coordinate, column 0 at the minimum east coordinate, and
//! a cell's reference point is its center. Rasters are persisted as flat
//! little-endian `f32` grids in row-major order next to a JSON sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value written to disk for cells that carry no data.
pub const NODATA: f32 = -999.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimensionMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("grid file {path}: expected {expected} values, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sidecar {path}: {msg}")]
    Sidecar { path: PathBuf, msg: String },
}

/// Placement of an H×W cell grid in the local ENU frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// East coordinate of the grid's west edge, meters.
    pub origin_east: f64,
    /// North coordinate of the grid's south edge, meters.
    pub origin_north: f64,
    /// Cell side length, meters.
    pub cell_m: f64,
    /// Number of columns.
    pub width: usize,
    /// Number of rows.
    pub height: usize,
}

impl GridSpec {
    pub fn new(
        origin_east: f64,
        origin_north: f64,
        cell_m: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GridError> {
        if !(cell_m > 0.0) {
            return Err(GridError::InvalidSpec(format!(
                "cell_m must be > 0, got {cell_m}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GridError::InvalidSpec(format!(
                "width and height must be >= 1, got {width}x{height}"
            )));
        }
        Ok(Self {
            origin_east,
            origin_north,
            cell_m,
            width,
            height,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Center of cell (row, col) in ENU meters.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_east + (col as f64 + 0.5) * self.cell_m,
            self.origin_north + (row as f64 + 0.5) * self.cell_m,
        )
    }

    /// Cell containing an ENU point, or `None` when outside the grid.
    ///
    /// Cells are half-open intervals: a point exactly on a boundary belongs
    /// to the higher-index cell.
    pub fn cell_of(&self, east: f64, north: f64) -> Option<(usize, usize)> {
        let col = (east - self.origin_east) / self.cell_m;
        let row = (north - self.origin_north) / self.cell_m;
        if col < 0.0 || row < 0.0 {
            return None;
        }
        let (row, col) = (row.floor() as usize, col.floor() as usize);
        if row >= self.height || col >= self.width {
            return None;
        }
        Some((row, col))
    }

    /// Euclidean center-to-center distance between two cells, meters.
    pub fn cell_distance(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let (ae, an) = self.cell_center(a.0, a.1);
        let (be, bn) = self.cell_center(b.0, b.1);
        ((ae - be).powi(2) + (an - bn).powi(2)).sqrt()
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width
    }
}

/// Dense row-major raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::DimensionMismatch {
                expected_h: height,
                expected_w: width,
                got_h: if width == 0 { 0 } else { data.len() / width },
                got_w: width,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i / w, i % w, v))
    }

    pub fn same_shape<U: Copy>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U: Copy, F: Fn(T) -> U>(&self, f: F) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Grid<u8> {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// A reconstructed or measured signal-strength map over a [`GridSpec`].
///
/// `mask` marks cells that carry a value. For maps produced by measurement
/// aggregation, `count` and `cell_std` hold per-cell statistics; maps produced
/// by interpolation or model inference leave them `None`.
#[derive(Debug, Clone)]
pub struct RadioMap {
    pub spec: GridSpec,
    /// dBm per cell; meaningful where `mask` is set.
    pub values: Grid<f64>,
    /// 1 where a value is available.
    pub mask: Grid<u8>,
    /// Measurements aggregated into each cell.
    pub count: Option<Grid<u32>>,
    /// Sample std of the dB values per cell, defined where count >= 2.
    pub cell_std: Option<Grid<f64>>,
}

impl RadioMap {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            values: Grid::filled(spec.height, spec.width, f64::NAN),
            mask: Grid::filled(spec.height, spec.width, 0),
            count: None,
            cell_std: None,
        }
    }

    pub fn masked_cells(&self) -> usize {
        self.mask.count_ones()
    }

    /// Row-major indices of cells with mask set.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    cell_m: f64,
    origin_east: f64,
    origin_north: f64,
    nodata: f32,
}

fn io_err(path: &Path, source: std::io::Error) -> GridError {
    GridError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write a raster as little-endian `f32`, row-major. Non-finite values are
/// stored as the nodata marker.
pub fn write_grid_f32(path: &Path, grid: &Grid<f64>) -> Result<(), GridError> {
    let mut buf = Vec::with_capacity(grid.data.len() * 4);
    for &v in &grid.data {
        let v = if v.is_finite() { v as f32 } else { NODATA };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Read a raster written by [`write_grid_f32`]; nodata becomes NaN.
pub fn read_grid_f32(path: &Path, height: usize, width: usize) -> Result<Grid<f64>, GridError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() != width * height * 4 {
        return Err(GridError::LengthMismatch {
            path: path.to_path_buf(),
            expected: width * height,
            found: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v == NODATA {
                f64::NAN
            } else {
                v as f64
            }
        })
        .collect();
    Ok(Grid {
        width,
        height,
        data,
    })
}

/// Persist a radio map as `<prefix>.json` plus `<prefix>.<field>.f32` grids.
pub fn save_radiomap(prefix: &Path, map: &RadioMap) -> Result<(), GridError> {
    let sidecar = Sidecar {
        width: map.spec.width,
        height: map.spec.height,
        cell_m: map.spec.cell_m,
        origin_east: map.spec.origin_east,
        origin_north: map.spec.origin_north,
        nodata: NODATA,
    };
    let json_path = prefix.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    write_grid_f32(&field_path(prefix, "values"), &map.values)?;
    write_grid_f32(&field_path(prefix, "mask"), &map.mask.map(|m| m as f64))?;
    if let Some(count) = &map.count {
        write_grid_f32(&field_path(prefix, "count"), &count.map(|c| c as f64))?;
    }
    if let Some(std) = &map.cell_std {
        write_grid_f32(&field_path(prefix, "std"), std)?;
    }
    Ok(())
}

pub fn load_radiomap(prefix: &Path) -> Result<RadioMap, GridError> {
    let json_path = prefix.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| GridError::Sidecar {
        path: json_path.clone(),
        msg: e.to_string(),
    })?;
    let spec = GridSpec::new(sc.origin_east, sc.origin_north, sc.cell_m, sc.width, sc.height)?;
    let values = read_grid_f32(&field_path(prefix, "values"), sc.height, sc.width)?;
    let mask_f = read_grid_f32(&field_path(prefix, "mask"), sc.height, sc.width)?;
    let mask = mask_f.map(|v| if v.is_finite() && v != 0.0 { 1u8 } else { 0u8 });
    let count_path = field_path(prefix, "count");
    let count = if count_path.exists() {
        Some(read_grid_f32(&count_path, sc.height, sc.width)?.map(|v| {
            if v.is_finite() {
                v as u32
            } else {
                0
            }
        }))
    } else {
        None
    };
    let std_path = field_path(prefix, "std");
    let cell_std = if std_path.exists() {
        Some(read_grid_f32(&std_path, sc.height, sc.width)?)
    } else {
        None
    };
    Ok(RadioMap {
        spec,
        values,
        mask,
        count,
        cell_std,
    })
}

fn field_path(prefix: &Path, field: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push('.');
    name.push_str(field);
    name.push_str(".f32");
    prefix.with_file_name(name)
}
