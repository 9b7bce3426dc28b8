//! Semi-supervised training corpus: RBF pseudo-labels on the unmeasured
//! cells, overlapping tile cutting, flip augmentation and cutout masking.
//!
//! Each tile carries three pairwise-disjoint masks over non-building cells:
//! labeled training pixels, held-out validation pixels, and pseudo-labeled
//! pixels whose targets start as RBF interpolations (and are later replaced
//! by model predictions in the self-training round).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridSpec, RadioMap};
use crate::interp::{AnchorSet, InterpError, RbfModel};
use crate::sidechannels::{ChannelId, ChannelNorm, ChannelStack};

/// Cutout rectangles have side lengths uniform in this range, cells.
pub const CUTOUT_SIDE_RANGE: (usize, usize) = (8, 32);

#[derive(Debug, Error)]
pub enum TileError {
    #[error("grid {h}x{w} is smaller than the tile size {tile}")]
    GridTooSmall { h: usize, w: usize, tile: usize },
    #[error("shape mismatch between {0} and the grid spec")]
    ShapeMismatch(&'static str),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("corpus io {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Dihedral flips applied to augmented tiles. Every element is an involution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Id,
    HFlip,
    VFlip,
    HVFlip,
}

impl Transform {
    pub const ALL: [Transform; 4] = [Transform::Id, Transform::HFlip, Transform::VFlip, Transform::HVFlip];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Id => "id",
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
            Transform::HVFlip => "hvflip",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Apply the flip to a raster. `HFlip` mirrors columns, `VFlip` rows.
    pub fn apply<T: Copy>(self, g: &Grid<T>) -> Grid<T> {
        let (h, w) = (g.height, g.width);
        let mut out = g.clone();
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = match self {
                    Transform::Id => (r, c),
                    Transform::HFlip => (r, w - 1 - c),
                    Transform::VFlip => (h - 1 - r, c),
                    Transform::HVFlip => (h - 1 - r, w - 1 - c),
                };
                out.set(r, c, g.get(sr, sc));
            }
        }
        out
    }
}

/// One training tile cut from a base station's maps.
#[derive(Debug, Clone)]
pub struct TileSample {
    /// Top-left corner (row, col) in the parent grid.
    pub origin: (usize, usize),
    pub size: usize,
    /// Index of the base station this tile came from.
    pub bs_id: usize,
    pub transform: Transform,
    /// Normalized side-information planes, canonical channel order, without
    /// the measurements plane (assembled from the labels at train time).
    pub inputs: Vec<(ChannelId, Grid<f32>)>,
    /// Measured dBm values over the labeled and validation pixels.
    pub labels: Grid<f32>,
    pub label_mask: Grid<u8>,
    pub val_mask: Grid<u8>,
    pub pseudo_mask: Grid<u8>,
    /// Pseudo-label targets, dBm, finite wherever `pseudo_mask` is set.
    pub pseudo_values: Grid<f32>,
}

impl TileSample {
    pub fn masks_disjoint(&self) -> bool {
        self.label_mask
            .data
            .iter()
            .zip(&self.val_mask.data)
            .zip(&self.pseudo_mask.data)
            .all(|((&l, &v), &p)| l as u32 + v as u32 + p as u32 <= 1)
    }
}

/// The training corpus for one experiment.
#[derive(Debug, Clone)]
pub struct TileCorpus {
    pub tile: usize,
    pub stride: usize,
    /// Full model input channel list, canonical order, measurements first.
    pub channel_ids: Vec<ChannelId>,
    /// City-level normalization constants aligned with `channel_ids`.
    pub norms: Vec<ChannelNorm>,
    pub bs_count: usize,
    pub samples: Vec<TileSample>,
}

impl TileCorpus {
    pub fn measurement_norm(&self) -> ChannelNorm {
        let i = self
            .channel_ids
            .iter()
            .position(|&c| c == ChannelId::Measurements)
            .expect("corpus always carries the measurements channel");
        self.norms[i]
    }
}

/// RBF pseudo-label map over a base station's grid.
#[derive(Debug, Clone)]
pub struct PseudoMap {
    /// Measured cells keep their values; unmeasured non-building cells get
    /// the RBF interpolation; building cells are NaN.
    pub values: Grid<f64>,
    /// 1 exactly on unmeasured non-building cells.
    pub domain: Grid<u8>,
}

/// Interpolate the unmeasured non-building cells of a train map with the
/// linear-kernel RBF fitted to its anchors.
pub fn interpolate_unlabeled(
    train_map: &RadioMap,
    buildings: Option<&Grid<u8>>,
) -> Result<PseudoMap, TileError> {
    let anchors = AnchorSet::from_map(train_map)?;
    let model = RbfModel::fit(&anchors)?;
    let spec = train_map.spec;
    let mut values = Grid::filled(spec.height, spec.width, f64::NAN);
    let mut domain = Grid::filled(spec.height, spec.width, 0u8);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let i = values.idx(r, c);
            let building = buildings.map(|b| b.data[i] != 0).unwrap_or(false);
            if train_map.mask.data[i] != 0 {
                values.data[i] = train_map.values.data[i];
            } else if !building {
                let (e, n) = spec.cell_center(r, c);
                values.data[i] = model.eval(e, n);
                domain.data[i] = 1;
            }
        }
    }
    Ok(PseudoMap { values, domain })
}

/// Tile origins along one axis: multiples of `stride`, plus a final position
/// flush with the far edge when the last stride does not land on it.
pub fn tile_positions(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let span = extent - tile;
    let mut out: Vec<usize> = (0..=span / stride).map(|k| k * stride).collect();
    if span % stride != 0 {
        out.push(span);
    }
    out
}

fn slice<T: Copy>(g: &Grid<T>, origin: (usize, usize), size: usize) -> Grid<T> {
    let mut out = Grid::filled(size, size, g.get(origin.0, origin.1));
    for r in 0..size {
        for c in 0..size {
            out.set(r, c, g.get(origin.0 + r, origin.1 + c));
        }
    }
    out
}

/// Cut one base station's maps into overlapping tiles.
///
/// `stack` provides the normalized side channels; the measurements channel,
/// when present in the stack, is skipped here because tile inputs rebuild it
/// from the labels. Masks are forced off building cells.
pub fn cut_tiles(
    stack: &ChannelStack,
    train_map: &RadioMap,
    val_map: &RadioMap,
    pseudo: &PseudoMap,
    buildings: Option<&Grid<u8>>,
    bs_id: usize,
    tile: usize,
    stride: usize,
) -> Result<Vec<TileSample>, TileError> {
    let spec: GridSpec = train_map.spec;
    if spec.height < tile || spec.width < tile {
        return Err(TileError::GridTooSmall {
            h: spec.height,
            w: spec.width,
            tile,
        });
    }
    if !train_map.values.same_shape(&val_map.values) || !train_map.values.same_shape(&pseudo.values) {
        return Err(TileError::ShapeMismatch("train/val/pseudo maps"));
    }
    if let Some(b) = buildings {
        if !train_map.values.same_shape(b) {
            return Err(TileError::ShapeMismatch("building raster"));
        }
    }

    // Combined dBm target over measured cells (train and val share values).
    let mut labels_city = Grid::filled(spec.height, spec.width, 0.0f32);
    for i in 0..spec.cells() {
        if train_map.mask.data[i] != 0 {
            labels_city.data[i] = train_map.values.data[i] as f32;
        } else if val_map.mask.data[i] != 0 {
            labels_city.data[i] = val_map.values.data[i] as f32;
        }
    }
    let pseudo_city = pseudo.values.map(|v| if v.is_finite() { v as f32 } else { 0.0f32 });

    let side_channels: Vec<(ChannelId, Grid<f32>)> = stack
        .channels
        .iter()
        .filter(|(id, _)| *id != ChannelId::Measurements)
        .map(|(id, g)| (*id, g.map(|v| v as f32)))
        .collect();

    let rows = tile_positions(spec.height, tile, stride);
    let cols = tile_positions(spec.width, tile, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let origin = (r0, c0);
            let mut label_mask = slice(&train_map.mask, origin, tile);
            let mut val_mask = slice(&val_map.mask, origin, tile);
            let mut pseudo_mask = slice(&pseudo.domain, origin, tile);
            // Validation pixels are unmeasured from the train map's point of
            // view, so the pseudo domain covers them; keep the three masks
            // disjoint.
            for i in 0..tile * tile {
                if val_mask.data[i] != 0 {
                    pseudo_mask.data[i] = 0;
                }
            }
            if let Some(b) = buildings {
                let b_tile = slice(b, origin, tile);
                for i in 0..tile * tile {
                    if b_tile.data[i] != 0 {
                        label_mask.data[i] = 0;
                        val_mask.data[i] = 0;
                        pseudo_mask.data[i] = 0;
                    }
                }
            }
            out.push(TileSample {
                origin,
                size: tile,
                bs_id,
                transform: Transform::Id,
                inputs: side_channels
                    .iter()
                    .map(|(id, g)| (*id, slice(g, origin, tile)))
                    .collect(),
                labels: slice(&labels_city, origin, tile),
                label_mask,
                val_mask,
                pseudo_mask,
                pseudo_values: slice(&pseudo_city, origin, tile),
            });
        }
    }
    Ok(out)
}

/// Expand every tile into its four flip variants.
pub fn augment(tiles: &[TileSample]) -> Vec<TileSample> {
    let mut out = Vec::with_capacity(tiles.len() * 4);
    for t in tiles {
        for tf in Transform::ALL {
            if tf == Transform::Id {
                out.push(t.clone());
                continue;
            }
            out.push(TileSample {
                origin: t.origin,
                size: t.size,
                bs_id: t.bs_id,
                transform: tf,
                inputs: t.inputs.iter().map(|(id, g)| (*id, tf.apply(g))).collect(),
                labels: tf.apply(&t.labels),
                label_mask: tf.apply(&t.label_mask),
                val_mask: tf.apply(&t.val_mask),
                pseudo_mask: tf.apply(&t.pseudo_mask),
                pseudo_values: tf.apply(&t.pseudo_values),
            });
        }
    }
    out
}

/// Cutout regularization: when the tile is labeled densely enough, one random
/// rectangle of labeled pixels is demoted to pseudo-labels (keeping their RBF
/// values). Below the threshold the tile is returned unchanged.
pub fn cutout_mask(tile: &mut TileSample, min_label_fraction: f64, rng: &mut ChaCha12Rng) {
    let area = (tile.size * tile.size) as f64;
    let labeled = tile.label_mask.count_ones() as f64;
    if labeled / area <= min_label_fraction {
        return;
    }
    let (lo, hi) = CUTOUT_SIDE_RANGE;
    let w = rng.random_range(lo..=hi).min(tile.size);
    let h = rng.random_range(lo..=hi).min(tile.size);
    let c0 = rng.random_range(0..=tile.size - w);
    let r0 = rng.random_range(0..=tile.size - h);
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            let i = tile.label_mask.idx(r, c);
            if tile.label_mask.data[i] != 0 {
                tile.label_mask.data[i] = 0;
                tile.pseudo_mask.data[i] = 1;
                // The rectangle keeps interpolated targets; labels that had
                // no RBF value (measured cells sit outside the pseudo
                // domain) fall back to the measured value itself.
                if tile.pseudo_values.data[i] == 0.0 {
                    tile.pseudo_values.data[i] = tile.labels.data[i];
                }
            }
        }
    }
}

/// Apply cutout to a whole corpus with per-tile rng streams derived from
/// `(seed, tile index)`, so parallel emission order can never change output.
pub fn apply_cutout(corpus: &mut TileCorpus, min_label_fraction: f64, seed: u64) {
    for (idx, tile) in corpus.samples.iter_mut().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, idx as u64));
        cutout_mask(tile, min_label_fraction, &mut rng);
    }
}

/// splitmix64-style mixing for derived rng streams.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Corpus persistence: per-tile binary planes plus a JSON manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTile {
    file: String,
    origin: [usize; 2],
    bs_id: usize,
    transform: String,
    labeled: usize,
    validation: usize,
    pseudo: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tile: usize,
    stride: usize,
    bs_count: usize,
    channels: Vec<String>,
    norms: Vec<ChannelNorm>,
    tiles: Vec<ManifestTile>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TileError {
    TileError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Write the corpus as `manifest.json` plus one raw `f32` plane file per tile.
pub fn save_corpus(dir: &Path, corpus: &TileCorpus) -> Result<(), TileError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tiles = Vec::with_capacity(corpus.samples.len());
    for (i, t) in corpus.samples.iter().enumerate() {
        let file = format!("tile_{i:05}.f32");
        let path = dir.join(&file);
        let mut buf: Vec<u8> = Vec::new();
        let mut push_plane_f32 = |g: &Grid<f32>| {
            for &v in &g.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, g) in &t.inputs {
            push_plane_f32(g);
        }
        push_plane_f32(&t.labels);
        push_plane_f32(&t.pseudo_values);
        push_plane_f32(&t.label_mask.map(|v| v as f32));
        push_plane_f32(&t.val_mask.map(|v| v as f32));
        push_plane_f32(&t.pseudo_mask.map(|v| v as f32));
        fs::write(&path, &buf).map_err(|e| io_err(&path, e))?;
        tiles.push(ManifestTile {
            file,
            origin: [t.origin.0, t.origin.1],
            bs_id: t.bs_id,
            transform: t.transform.name().to_string(),
            labeled: t.label_mask.count_ones(),
            validation: t.val_mask.count_ones(),
            pseudo: t.pseudo_mask.count_ones(),
        });
    }
    let manifest = Manifest {
        tile: corpus.tile,
        stride: corpus.stride,
        bs_count: corpus.bs_count,
        channels: corpus.channel_ids.iter().map(|c| c.name().to_string()).collect(),
        norms: corpus.norms.clone(),
        tiles,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<TileCorpus, TileError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err(&mpath, e))?;
    let channel_ids: Vec<ChannelId> = manifest
        .channels
        .iter()
        .map(|s| ChannelId::from_name(s).ok_or_else(|| io_err(&mpath, format!("unknown channel `{s}`"))))
        .collect::<Result<_, _>>()?;
    let side_ids: Vec<ChannelId> = channel_ids
        .iter()
        .copied()
        .filter(|&c| c != ChannelId::Measurements)
        .collect();
    let size = manifest.tile;
    let plane = size * size;
    let mut samples = Vec::with_capacity(manifest.tiles.len());
    for mt in &manifest.tiles {
        let path = dir.join(&mt.file);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let expected = (side_ids.len() + 5) * plane * 4;
        if bytes.len() != expected {
            return Err(io_err(&path, format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let take = |k: usize| -> Grid<f32> {
            Grid {
                width: size,
                height: size,
                data: floats[k * plane..(k + 1) * plane].to_vec(),
            }
        };
        let inputs: Vec<(ChannelId, Grid<f32>)> =
            side_ids.iter().enumerate().map(|(k, id)| (*id, take(k))).collect();
        let base = side_ids.len();
        let to_mask = |g: Grid<f32>| g.map(|v| if v != 0.0 { 1u8 } else { 0u8 });
        let transform = Transform::from_name(&mt.transform)
            .ok_or_else(|| io_err(&path, format!("unknown transform `{}`", mt.transform)))?;
        samples.push(TileSample {
            origin: (mt.origin[0], mt.origin[1]),
            size,
            bs_id: mt.bs_id,
            transform,
            inputs,
            labels: take(base),
            pseudo_values: take(base + 1),
            label_mask: to_mask(take(base + 2)),
            val_mask: to_mask(take(base + 3)),
            pseudo_mask: to_mask(take(base + 4)),
        });
    }
    Ok(TileCorpus {
        tile: manifest.tile,
        stride: manifest.stride,
        channel_ids,
        norms: manifest.norms,
        bs_count: manifest.bs_count,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidechannels::normalize_stack;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new(0.0, 0.0, 10.0, w, h).unwrap()
    }

    fn toy_maps(h: usize, w: usize, seed: u64) -> (RadioMap, RadioMap, PseudoMap, Grid<u8>) {
        let s = spec(h, w);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut train = RadioMap::empty(s);
        let mut val = RadioMap::empty(s);
        let mut buildings = Grid::filled(h, w, 0u8);
        for i in 0..h * w {
            let r = rng.random_range(0.0..1.0);
            if r < 0.08 {
                buildings.data[i] = 1;
            } else if r < 0.30 {
                train.values.data[i] = rng.random_range(-110.0..-60.0);
                train.mask.data[i] = 1;
                val.values.data[i] = train.values.data[i];
            } else if r < 0.36 {
                val.values.data[i] = rng.random_range(-110.0..-60.0);
                val.mask.data[i] = 1;
                train.values.data[i] = val.values.data[i];
            }
        }
        let pseudo = interpolate_unlabeled(&train, Some(&buildings)).unwrap();
        (train, val, pseudo, buildings)
    }

    fn toy_stack(h: usize, w: usize) -> ChannelStack {
        let s = spec(h, w);
        let dist = crate::sidechannels::distance_channel(&s, (h / 2, w / 2)).unwrap();
        normalize_stack(
            s,
            vec![
                (ChannelId::Measurements, Grid::filled(h, w, -90.0)),
                (ChannelId::Distance, dist),
            ],
        )
        .unwrap()
    }

    #[test]
    fn pseudo_domain_is_unmasked_non_building() {
        let (train, _, pseudo, buildings) = toy_maps(32, 32, 5);
        for i in 0..32 * 32 {
            let expect = train.mask.data[i] == 0 && buildings.data[i] == 0;
            assert_eq!(pseudo.domain.data[i] != 0, expect);
            if train.mask.data[i] != 0 {
                assert_eq!(pseudo.values.data[i], train.values.data[i]);
            }
            if buildings.data[i] != 0 {
                assert!(pseudo.values.data[i].is_nan());
            }
        }
    }

    #[test]
    fn constant_anchors_give_constant_pseudo_values() {
        let s = spec(16, 16);
        let mut train = RadioMap::empty(s);
        for i in [3usize, 40, 100, 200] {
            train.values.data[i] = -77.0;
            train.mask.data[i] = 1;
        }
        let pseudo = interpolate_unlabeled(&train, None).unwrap();
        for i in 0..256 {
            assert!((pseudo.values.data[i] - -77.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pseudo_values_match_direct_rbf() {
        let (train, _, pseudo, buildings) = toy_maps(24, 24, 9);
        let anchors = AnchorSet::from_map(&train).unwrap();
        let model = RbfModel::fit(&anchors).unwrap();
        for r in 0..24 {
            for c in 0..24 {
                let i = r * 24 + c;
                if pseudo.domain.data[i] != 0 {
                    let (e, n) = train.spec.cell_center(r, c);
                    assert!((pseudo.values.data[i] - model.eval(e, n)).abs() < 1e-6);
                    assert_eq!(buildings.data[i], 0);
                }
            }
        }
    }

    #[test]
    fn tile_position_arithmetic() {
        assert_eq!(tile_positions(96, 96, 20), vec![0]);
        let p = tile_positions(368, 96, 20);
        assert_eq!(p.len(), 15);
        assert_eq!(p[13], 260);
        assert_eq!(*p.last().unwrap(), 272);
        // Exact cover without a flush position.
        assert_eq!(tile_positions(136, 96, 20), vec![0, 20, 40]);
    }

    #[test]
    fn cut_tiles_slices_bit_exact() {
        let (train, val, pseudo, buildings) = toy_maps(48, 48, 11);
        let stack = toy_stack(48, 48);
        let tiles = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 8).unwrap();
        assert_eq!(tiles.len(), 9);
        for t in &tiles {
            assert!(t.masks_disjoint());
            for r in 0..32 {
                for c in 0..32 {
                    let (pr, pc) = (t.origin.0 + r, t.origin.1 + c);
                    if t.label_mask.get(r, c) != 0 {
                        assert_eq!(t.labels.get(r, c), train.values.get(pr, pc) as f32);
                    }
                    if buildings.get(pr, pc) != 0 {
                        assert_eq!(t.label_mask.get(r, c), 0);
                        assert_eq!(t.val_mask.get(r, c), 0);
                        assert_eq!(t.pseudo_mask.get(r, c), 0);
                    }
                }
            }
        }
        // Too-small grid errors.
        assert!(cut_tiles(&stack, &train, &val, &pseudo, None, 0, 96, 20).is_err());
    }

    #[test]
    fn augment_quadruples_and_preserves_populations() {
        let (train, val, pseudo, buildings) = toy_maps(40, 40, 13);
        let stack = toy_stack(40, 40);
        let tiles = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 8).unwrap();
        let aug = augment(&tiles);
        assert_eq!(aug.len(), 4 * tiles.len());
        for (k, t) in aug.iter().enumerate() {
            let base = &tiles[k / 4];
            assert_eq!(t.label_mask.count_ones(), base.label_mask.count_ones());
            assert_eq!(t.val_mask.count_ones(), base.val_mask.count_ones());
            assert_eq!(t.pseudo_mask.count_ones(), base.pseudo_mask.count_ones());
            assert!(t.masks_disjoint());
        }
    }

    #[test]
    fn flips_are_involutions() {
        let mut g = Grid::filled(8, 8, 0.0f32);
        for i in 0..64 {
            g.data[i] = i as f32;
        }
        for tf in Transform::ALL {
            assert_eq!(tf.apply(&tf.apply(&g)), g);
        }
        // hflip of vflip equals hvflip.
        assert_eq!(
            Transform::HFlip.apply(&Transform::VFlip.apply(&g)),
            Transform::HVFlip.apply(&g)
        );
    }

    #[test]
    fn cutout_below_threshold_is_identity() {
        let (train, val, pseudo, buildings) = toy_maps(40, 40, 17);
        let stack = toy_stack(40, 40);
        let tiles = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 8).unwrap();
        let mut sparse = tiles[0].clone();
        // Keep only ~1% of labels.
        let keep = sparse.label_mask.count_ones() / 100 + 1;
        let mut seen = 0;
        for i in 0..sparse.label_mask.data.len() {
            if sparse.label_mask.data[i] != 0 {
                seen += 1;
                if seen > keep {
                    sparse.label_mask.data[i] = 0;
                }
            }
        }
        let before = sparse.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        cutout_mask(&mut sparse, 0.03, &mut rng);
        assert_eq!(sparse.label_mask, before.label_mask);
        assert_eq!(sparse.pseudo_mask, before.pseudo_mask);
    }

    #[test]
    fn cutout_moves_labels_to_pseudo() {
        let (train, val, pseudo, buildings) = toy_maps(40, 40, 19);
        let stack = toy_stack(40, 40);
        let tiles = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 8).unwrap();
        let mut t = tiles[3].clone();
        let labeled_before = t.label_mask.count_ones();
        let pseudo_before = t.pseudo_mask.count_ones();
        let coverage_before = labeled_before + pseudo_before + t.val_mask.count_ones();
        assert!(labeled_before as f64 / (32.0 * 32.0) > 0.03);

        let mut rng = ChaCha12Rng::seed_from_u64(77);
        cutout_mask(&mut t, 0.03, &mut rng);
        assert!(t.label_mask.count_ones() <= labeled_before);
        assert!(t.pseudo_mask.count_ones() >= pseudo_before);
        assert_eq!(
            t.label_mask.count_ones() + t.pseudo_mask.count_ones() + t.val_mask.count_ones(),
            coverage_before
        );
        assert!(t.masks_disjoint());
        for i in 0..t.pseudo_mask.data.len() {
            if t.pseudo_mask.data[i] != 0 {
                assert!(t.pseudo_values.data[i].is_finite());
            }
        }

        // Same seed, same rectangle.
        let mut t2 = tiles[3].clone();
        let mut rng2 = ChaCha12Rng::seed_from_u64(77);
        cutout_mask(&mut t2, 0.03, &mut rng2);
        assert_eq!(t.label_mask, t2.label_mask);
    }

    #[test]
    fn reassembling_id_tiles_reproduces_parent_labels() {
        let (train, val, pseudo, buildings) = toy_maps(48, 48, 23);
        let stack = toy_stack(48, 48);
        let tiles = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 8).unwrap();
        let mut rebuilt = Grid::filled(48, 48, f32::NAN);
        let mut covered = Grid::filled(48, 48, 0u8);
        for t in &tiles {
            for r in 0..t.size {
                for c in 0..t.size {
                    if t.label_mask.get(r, c) != 0 {
                        rebuilt.set(t.origin.0 + r, t.origin.1 + c, t.labels.get(r, c));
                    }
                    covered.set(t.origin.0 + r, t.origin.1 + c, 1);
                }
            }
        }
        for i in 0..48 * 48 {
            assert_eq!(covered.data[i], 1);
            if train.mask.data[i] != 0 && buildings.data[i] == 0 {
                assert_eq!(rebuilt.data[i], train.values.data[i] as f32);
            }
        }
    }

    #[test]
    fn corpus_roundtrip_through_disk() {
        let (train, val, pseudo, buildings) = toy_maps(40, 40, 29);
        let stack = toy_stack(40, 40);
        let tiles = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 8).unwrap();
        let corpus = TileCorpus {
            tile: 32,
            stride: 8,
            channel_ids: stack.ids(),
            norms: stack.norms.clone(),
            bs_count: 1,
            samples: augment(&tiles),
        };
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.samples.len(), corpus.samples.len());
        assert_eq!(back.channel_ids, corpus.channel_ids);
        for (a, b) in corpus.samples.iter().zip(&back.samples) {
            assert_eq!(a.origin, b.origin);
            assert_eq!(a.transform, b.transform);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.label_mask, b.label_mask);
            assert_eq!(a.val_mask, b.val_mask);
            assert_eq!(a.pseudo_mask, b.pseudo_mask);
            assert_eq!(a.inputs, b.inputs);
        }
    }
}
