//! Semi-supervised training of the searched models and full-map inference.
//!
//! The loss has two L1 terms per tile, one over labeled pixels and one over
//! pseudo-labeled pixels; tile losses are averaged within each base station
//! and then across base stations. Scenario 1 trains against RBF pseudo
//! labels; scenario 2 replaces the pseudo labels with the scenario-1 model's
//! reassembled predictions and retrains from scratch.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, RadioMap};
use crate::nas::{build_model, ArchGenome, Metric, NasError, Skeleton};
use crate::nn::{self, Adam, Tensor, UNetModel};
use crate::sidechannels::{ChannelId, ChannelNorm, ChannelStack};
use crate::tiles::{mix_seed, TileCorpus, TileSample, Transform};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {epoch}, batch of tiles {tiles:?}")]
    NonFiniteLoss { epoch: usize, tiles: Vec<usize> },
    #[error("channel mismatch: model expects {expect:?}, got {got:?}")]
    ChannelMismatch {
        expect: Vec<ChannelId>,
        got: Vec<ChannelId>,
    },
    #[error("prediction for base station {0} missing")]
    MissingPrediction(usize),
    #[error(transparent)]
    Nas(#[from] NasError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early-stopping patience on the validation MAE, epochs.
    pub patience: usize,
    pub seed: u64,
    /// Weight of the pseudo-label term (1 = as in the loss definition).
    pub pseudo_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            patience: 10,
            seed: 0,
            pseudo_weight: 1.0,
        }
    }
}

/// A trained network plus everything needed to run it on new maps.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub genome: ArchGenome,
    pub skeleton: Skeleton,
    pub model: UNetModel,
    pub channel_ids: Vec<ChannelId>,
    pub norms: Vec<ChannelNorm>,
}

/// Per-run bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub val_mae: Vec<Option<f64>>,
    pub best_val_mae: Option<f64>,
    pub best_epoch: usize,
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Per-tile semi-supervised loss: mean absolute error over the labeled
/// pixels plus mean absolute error over the pseudo-labeled pixels, either
/// term vanishing with an empty mask. Units follow the inputs.
pub fn ssl_tile_loss(pred: &Grid<f32>, sample: &TileSample) -> f64 {
    ssl_tile_loss_weighted(pred, sample, 1.0)
}

fn ssl_tile_loss_weighted(pred: &Grid<f32>, sample: &TileSample, pseudo_weight: f64) -> f64 {
    let mut labeled = 0.0f64;
    let mut n_l = 0usize;
    let mut pseudo = 0.0f64;
    let mut n_p = 0usize;
    for i in 0..pred.data.len() {
        if sample.label_mask.data[i] != 0 {
            labeled += (sample.labels.data[i] as f64 - pred.data[i] as f64).abs();
            n_l += 1;
        }
        if sample.pseudo_mask.data[i] != 0 {
            pseudo += (sample.pseudo_values.data[i] as f64 - pred.data[i] as f64).abs();
            n_p += 1;
        }
    }
    let mut loss = 0.0;
    if n_l > 0 {
        loss += labeled / n_l as f64;
    }
    if n_p > 0 {
        loss += pseudo_weight * pseudo / n_p as f64;
    }
    loss
}

/// Combine per-tile losses: average within each base station, then across
/// base stations.
pub fn ssl_batch_loss(tile_losses: &[(usize, f64)]) -> f64 {
    use std::collections::BTreeMap;
    let mut per_bs: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(bs, l) in tile_losses {
        let e = per_bs.entry(bs).or_insert((0.0, 0));
        e.0 += l;
        e.1 += 1;
    }
    if per_bs.is_empty() {
        return 0.0;
    }
    per_bs.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_bs.len() as f64
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Stack tile inputs into an NCHW tensor: channel 0 is the normalized
/// measurements plane rebuilt from the labels, the rest are the stored side
/// channels.
fn batch_inputs(corpus: &TileCorpus, idxs: &[usize]) -> Tensor {
    let size = corpus.tile;
    let c = corpus.channel_ids.len();
    let norm = corpus.measurement_norm();
    let mut x = Tensor::zeros(idxs.len(), c, size, size);
    for (b, &ti) in idxs.iter().enumerate() {
        let t = &corpus.samples[ti];
        {
            // The dense map the tiles were cut from: measured values on the
            // labeled pixels, interpolated pseudo values elsewhere.
            let plane = x.plane_mut(b, 0);
            for i in 0..size * size {
                if t.label_mask.data[i] != 0 {
                    plane[i] = norm.normalize(t.labels.data[i] as f64) as f32;
                } else if t.pseudo_mask.data[i] != 0 {
                    plane[i] = norm.normalize(t.pseudo_values.data[i] as f64) as f32;
                }
            }
        }
        for (k, (_, g)) in t.inputs.iter().enumerate() {
            x.plane_mut(b, 1 + k).copy_from_slice(&g.data);
        }
    }
    x
}

/// Normalized label / pseudo targets for a tile.
fn normalized_targets(t: &TileSample, norm: ChannelNorm) -> (Vec<f32>, Vec<f32>) {
    let labels = t
        .labels
        .data
        .iter()
        .map(|&v| norm.normalize(v as f64) as f32)
        .collect();
    let pseudo = t
        .pseudo_values
        .data
        .iter()
        .map(|&v| norm.normalize(v as f64) as f32)
        .collect();
    (labels, pseudo)
}

/// Loss and prediction gradient for one batch, in normalized units.
fn batch_loss_and_grad(
    corpus: &TileCorpus,
    idxs: &[usize],
    pred: &Tensor,
    pseudo_weight: f64,
) -> (f64, Tensor) {
    use std::collections::BTreeMap;
    let norm = corpus.measurement_norm();
    let plane = corpus.tile * corpus.tile;
    let mut m_per_bs: BTreeMap<usize, usize> = BTreeMap::new();
    for &ti in idxs {
        *m_per_bs.entry(corpus.samples[ti].bs_id).or_insert(0) += 1;
    }
    let n_bs = m_per_bs.len() as f64;

    let mut dpred = Tensor::zeros(pred.n, 1, pred.h, pred.w);
    let mut tile_losses = Vec::with_capacity(idxs.len());
    for (b, &ti) in idxs.iter().enumerate() {
        let t = &corpus.samples[ti];
        let (labels, pseudo) = normalized_targets(t, norm);
        let p = pred.plane(b, 0);
        let n_l = t.label_mask.count_ones();
        let n_p = t.pseudo_mask.count_ones();
        let weight = 1.0 / (n_bs * m_per_bs[&t.bs_id] as f64);
        let mut loss = 0.0f64;
        let g = dpred.plane_mut(b, 0);
        for i in 0..plane {
            if t.label_mask.data[i] != 0 {
                let d = p[i] as f64 - labels[i] as f64;
                loss += d.abs() / n_l as f64;
                g[i] += (weight * d.signum() / n_l as f64) as f32;
            }
            if t.pseudo_mask.data[i] != 0 {
                let d = p[i] as f64 - pseudo[i] as f64;
                loss += pseudo_weight * d.abs() / n_p as f64;
                g[i] += (weight * pseudo_weight * d.signum() / n_p as f64) as f32;
            }
        }
        tile_losses.push((t.bs_id, loss));
    }
    (ssl_batch_loss(&tile_losses), dpred)
}

/// Validation MAE in dB over the id-transform tiles, or `None` when the
/// corpus has no validation pixels.
pub fn validation_mae(model: &UNetModel, corpus: &TileCorpus, batch: usize) -> Option<f64> {
    let norm = corpus.measurement_norm();
    let ids: Vec<usize> = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, t)| t.transform == Transform::Id && t.val_mask.count_ones() > 0)
        .map(|(i, _)| i)
        .collect();
    if ids.is_empty() {
        return None;
    }
    let mut abs = 0.0f64;
    let mut n = 0usize;
    for chunk in ids.chunks(batch.max(1)) {
        let x = batch_inputs(corpus, chunk);
        let pred = model.forward(&x);
        for (b, &ti) in chunk.iter().enumerate() {
            let t = &corpus.samples[ti];
            let p = pred.plane(b, 0);
            for i in 0..p.len() {
                if t.val_mask.data[i] != 0 {
                    let pred_dbm = norm.denormalize(p[i] as f64);
                    abs += (pred_dbm - t.labels.data[i] as f64).abs();
                    n += 1;
                }
            }
        }
    }
    Some(abs / n as f64)
}

/// Validation fitness for architecture ranking: MAE or the distance-weighted
/// NMAE, in dB over validation pixels of id tiles.
pub fn validation_fitness(
    model: &UNetModel,
    corpus: &TileCorpus,
    metric: Metric,
    batch: usize,
) -> Option<f64> {
    match metric {
        Metric::Mae => validation_mae(model, corpus, batch),
        Metric::Nmae => {
            let norm = corpus.measurement_norm();
            let ids: Vec<usize> = corpus
                .samples
                .iter()
                .enumerate()
                .filter(|(_, t)| t.transform == Transform::Id && t.val_mask.count_ones() > 0)
                .map(|(i, _)| i)
                .collect();
            if ids.is_empty() {
                return None;
            }
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for chunk in ids.chunks(batch.max(1)) {
                let x = batch_inputs(corpus, chunk);
                let pred = model.forward(&x);
                for (b, &ti) in chunk.iter().enumerate() {
                    let t = &corpus.samples[ti];
                    let dist = t
                        .inputs
                        .iter()
                        .find(|(id, _)| *id == ChannelId::Distance)
                        .map(|(_, g)| g);
                    let p = pred.plane(b, 0);
                    for i in 0..p.len() {
                        if t.val_mask.data[i] != 0 {
                            let w = dist.map(|g| g.data[i] as f64).unwrap_or(1.0);
                            let pred_dbm = norm.denormalize(p[i] as f64);
                            acc += w * (pred_dbm - t.labels.data[i] as f64).abs();
                            wsum += w;
                        }
                    }
                }
            }
            if wsum > 0.0 {
                Some(acc / wsum)
            } else {
                None
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn train_model(
    mut model: UNetModel,
    corpus: &TileCorpus,
    cfg: &TrainConfig,
) -> Result<(UNetModel, TrainReport), TrainError> {
    if corpus.samples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut opt = Adam::new(&model, cfg.lr);
    let mut order: Vec<usize> = (0..corpus.samples.len()).collect();
    let mut best_params = nn::flatten_params(&model);
    let mut best_val: Option<f64> = None;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut report = TrainReport {
        epochs_run: 0,
        train_loss: Vec::new(),
        val_mae: Vec::new(),
        best_val_mae: None,
        best_epoch: 0,
    };

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = batch_inputs(corpus, chunk);
            let trace = model.forward_trace(&x);
            let (loss, dpred) = batch_loss_and_grad(corpus, chunk, &trace.prediction, cfg.pseudo_weight);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    tiles: chunk.to_vec(),
                });
            }
            let grads = model.backward(&trace, &dpred);
            opt.step(&mut model, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let val = validation_mae(&model, corpus, cfg.batch_size);
        report.train_loss.push(train_loss);
        report.val_mae.push(val);
        report.epochs_run = epoch + 1;

        match (val, best_val) {
            (Some(v), Some(b)) if v < b => {
                best_val = Some(v);
                best_epoch = epoch;
                best_params = nn::flatten_params(&model);
                since_best = 0;
            }
            (Some(_), Some(_)) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            (Some(v), None) => {
                best_val = Some(v);
                best_epoch = epoch;
                best_params = nn::flatten_params(&model);
            }
            (None, _) => {
                // No validation pixels: keep the latest weights.
                best_params = nn::flatten_params(&model);
                best_epoch = epoch;
            }
        }
    }
    nn::load_params(&mut model, &best_params).expect("own params fit");
    report.best_val_mae = best_val;
    report.best_epoch = best_epoch;
    Ok((model, report))
}

/// Scenario 1: train on labeled pixels plus the corpus's RBF pseudo labels.
pub fn train_scenario1(
    genome: &ArchGenome,
    skeleton: &Skeleton,
    corpus: &TileCorpus,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainReport), TrainError> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, genome.hash64()));
    let model = build_model(genome, skeleton, corpus.channel_ids.len(), &mut rng)?;
    let (model, report) = train_model(model, corpus, cfg)?;
    Ok((
        TrainedModel {
            genome: genome.clone(),
            skeleton: skeleton.clone(),
            model,
            channel_ids: corpus.channel_ids.clone(),
            norms: corpus.norms.clone(),
        },
        report,
    ))
}

/// Replace every tile's pseudo values by the per-base-station predicted maps
/// (dBm), honoring the tile transform. Label and validation masks and values
/// are untouched.
pub fn relabel_pseudo(corpus: &mut TileCorpus, preds: &[RadioMap]) -> Result<(), TrainError> {
    for t in corpus.samples.iter_mut() {
        let pred = preds.get(t.bs_id).ok_or(TrainError::MissingPrediction(t.bs_id))?;
        let mut patch = Grid::filled(t.size, t.size, 0.0f32);
        for r in 0..t.size {
            for c in 0..t.size {
                patch.set(r, c, pred.values.get(t.origin.0 + r, t.origin.1 + c) as f32);
            }
        }
        let patch = t.transform.apply(&patch);
        for i in 0..t.size * t.size {
            if t.pseudo_mask.data[i] != 0 && patch.data[i].is_finite() {
                t.pseudo_values.data[i] = patch.data[i];
            }
        }
    }
    Ok(())
}

/// Scenario 2: one self-training round. The scenario-1 model's reassembled
/// predictions become the new pseudo labels and a fresh model is trained
/// with the same budget. Returns the new model and the relabeled corpus.
pub fn train_scenario2(
    f1: &TrainedModel,
    corpus: &TileCorpus,
    city_stacks: &[ChannelStack],
    buildings: &[Option<Grid<u8>>],
    tile: usize,
    stride: usize,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainReport, TileCorpus), TrainError> {
    let mut preds = Vec::with_capacity(city_stacks.len());
    for (bs, stack) in city_stacks.iter().enumerate() {
        let b = buildings.get(bs).and_then(|o| o.as_ref());
        preds.push(predict_full(f1, stack, b, tile, stride)?);
    }
    let mut relabeled = corpus.clone();
    relabel_pseudo(&mut relabeled, &preds)?;
    let cfg2 = TrainConfig {
        seed: mix_seed(cfg.seed, 2),
        ..cfg.clone()
    };
    let (model, report) = train_scenario1(&f1.genome, &f1.skeleton, &relabeled, &cfg2)?;
    Ok((model, report, relabeled))
}

// ---------------------------------------------------------------------------
// Full-map inference
// ---------------------------------------------------------------------------

/// Sliding-window inference over the same tiling grid as the corpus cutter
/// (id transform only). Overlapping predictions are averaged per cell;
/// building cells come out as NaN with mask 0.
pub fn predict_full(
    trained: &TrainedModel,
    stack: &ChannelStack,
    buildings: Option<&Grid<u8>>,
    tile: usize,
    stride: usize,
) -> Result<RadioMap, TrainError> {
    if stack.ids() != trained.channel_ids {
        return Err(TrainError::ChannelMismatch {
            expect: trained.channel_ids.clone(),
            got: stack.ids(),
        });
    }
    let spec = stack.spec;
    let rows = crate::tiles::tile_positions(spec.height, tile, stride);
    let cols = crate::tiles::tile_positions(spec.width, tile, stride);
    let positions: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();

    let c = stack.len();
    let msm_norm = stack
        .channel(ChannelId::Measurements)
        .map(|(_, n)| n)
        .unwrap_or(ChannelNorm { min: 0.0, max: 1.0 });

    let mut sum = vec![0.0f64; spec.cells()];
    let mut cnt = vec![0u32; spec.cells()];
    for chunk in positions.chunks(16) {
        let mut x = Tensor::zeros(chunk.len(), c, tile, tile);
        for (b, &(r0, c0)) in chunk.iter().enumerate() {
            for (k, (_, g)) in stack.channels.iter().enumerate() {
                let plane = x.plane_mut(b, k);
                for r in 0..tile {
                    for cc in 0..tile {
                        plane[r * tile + cc] = g.get(r0 + r, c0 + cc) as f32;
                    }
                }
            }
        }
        let pred = trained.model.forward(&x);
        for (b, &(r0, c0)) in chunk.iter().enumerate() {
            let p = pred.plane(b, 0);
            for r in 0..tile {
                for cc in 0..tile {
                    let i = (r0 + r) * spec.width + (c0 + cc);
                    sum[i] += p[r * tile + cc] as f64;
                    cnt[i] += 1;
                }
            }
        }
    }

    let mut out = RadioMap::empty(spec);
    for i in 0..spec.cells() {
        let building = buildings.map(|b| b.data[i] != 0).unwrap_or(false);
        if building || cnt[i] == 0 {
            continue;
        }
        out.values.data[i] = msm_norm.denormalize(sum[i] / cnt[i] as f64);
        out.mask.data[i] = 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub genome: ArchGenome,
    pub skeleton: Skeleton,
    pub channels: Vec<String>,
    pub norms: Vec<ChannelNorm>,
    pub seed: u64,
    pub report: Option<TrainReport>,
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Write `<prefix>.json` metadata and `<prefix>.weights` (f32 LE blob).
pub fn save_checkpoint(
    prefix: &Path,
    trained: &TrainedModel,
    seed: u64,
    report: Option<&TrainReport>,
) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        genome: trained.genome.clone(),
        skeleton: trained.skeleton.clone(),
        channels: trained.channel_ids.iter().map(|c| c.name().to_string()).collect(),
        norms: trained.norms.clone(),
        seed,
        report: report.cloned(),
    };
    let jpath = prefix.with_extension("json");
    fs::write(&jpath, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|e| ck_err(&jpath, e))?;
    let wpath = prefix.with_extension("weights");
    let flat = nn::flatten_params(&trained.model);
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&wpath, bytes).map_err(|e| ck_err(&wpath, e))
}

pub fn load_checkpoint(prefix: &Path) -> Result<(TrainedModel, CheckpointMeta), TrainError> {
    let jpath = prefix.with_extension("json");
    let text = fs::read_to_string(&jpath).map_err(|e| ck_err(&jpath, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ck_err(&jpath, e))?;
    let channel_ids: Vec<ChannelId> = meta
        .channels
        .iter()
        .map(|s| ChannelId::from_name(s).ok_or_else(|| ck_err(&jpath, format!("unknown channel `{s}`"))))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut model = build_model(&meta.genome, &meta.skeleton, channel_ids.len(), &mut rng)?;
    let wpath = prefix.with_extension("weights");
    let bytes = fs::read(&wpath).map_err(|e| ck_err(&wpath, e))?;
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    nn::load_params(&mut model, &flat).map_err(|e| ck_err(&wpath, e))?;
    Ok((
        TrainedModel {
            genome: meta.genome.clone(),
            skeleton: meta.skeleton.clone(),
            model,
            channel_ids,
            norms: meta.norms.clone(),
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::nas::random_genome;
    use crate::sidechannels::{distance_channel, normalize_stack};
    use crate::tiles::{cut_tiles, interpolate_unlabeled};
    use rand::Rng;

    fn tile_fixture(size: usize) -> TileSample {
        TileSample {
            origin: (0, 0),
            size,
            bs_id: 0,
            transform: Transform::Id,
            inputs: vec![],
            labels: Grid::filled(size, size, 0.0),
            label_mask: Grid::filled(size, size, 0),
            val_mask: Grid::filled(size, size, 0),
            pseudo_mask: Grid::filled(size, size, 0),
            pseudo_values: Grid::filled(size, size, 0.0),
        }
    }

    #[test]
    fn ssl_loss_hand_fixture() {
        // One labeled pixel (y = 0.5, f = 0.3), two pseudo pixels
        // (0.2 vs 0.4 and 0.6 vs 0.6): 0.2 + (0.2 + 0)/2 = 0.3.
        let mut t = tile_fixture(2);
        t.labels.set(0, 0, 0.5);
        t.label_mask.set(0, 0, 1);
        t.pseudo_values.set(0, 1, 0.2);
        t.pseudo_mask.set(0, 1, 1);
        t.pseudo_values.set(1, 0, 0.6);
        t.pseudo_mask.set(1, 0, 1);
        let pred = Grid::from_vec(2, 2, vec![0.3f32, 0.4, 0.6, 0.9]).unwrap();
        let loss = ssl_tile_loss(&pred, &t);
        assert!((loss - 0.3).abs() < 1e-7, "loss {loss}");
    }

    #[test]
    fn ssl_loss_zero_when_exact_and_supervised_only_when_no_pseudo() {
        let mut t = tile_fixture(2);
        t.labels.set(0, 0, 0.5);
        t.label_mask.set(0, 0, 1);
        let pred = Grid::from_vec(2, 2, vec![0.5f32, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ssl_tile_loss(&pred, &t), 0.0);
        let pred = Grid::from_vec(2, 2, vec![0.8f32, 0.0, 0.0, 0.0]).unwrap();
        assert!((ssl_tile_loss(&pred, &t) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn batch_loss_averages_per_bs_then_across() {
        // BS 0 has tiles with losses 1 and 3 (mean 2); BS 1 has loss 4.
        let losses = vec![(0, 1.0), (0, 3.0), (1, 4.0)];
        assert!((ssl_batch_loss(&losses) - 3.0).abs() < 1e-12);
        // Duplicating one base station's tiles leaves the loss unchanged.
        let doubled = vec![(0, 1.0), (0, 3.0), (0, 1.0), (0, 3.0), (1, 4.0)];
        assert!((ssl_batch_loss(&doubled) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn building_pixels_leave_loss_bit_identical() {
        let mut t = tile_fixture(4);
        t.labels.set(0, 0, 0.5);
        t.label_mask.set(0, 0, 1);
        t.pseudo_values.set(2, 2, 0.1);
        t.pseudo_mask.set(2, 2, 1);
        let mut pred = Grid::filled(4, 4, 0.25f32);
        let base = ssl_tile_loss(&pred, &t);
        // Perturb only pixels outside every mask (building cells are never
        // masked, so this is exactly the building-pixel case).
        pred.set(3, 3, 123.0);
        pred.set(0, 1, -77.0);
        let perturbed = ssl_tile_loss(&pred, &t);
        assert_eq!(base.to_bits(), perturbed.to_bits());
    }

    /// L1 loss gradient vs central differences on a 4x4 tile and a linear
    /// two-parameter model f = a*x + b.
    #[test]
    fn toy_linear_model_gradient_check() {
        let mut t = tile_fixture(4);
        // A fixed input channel.
        let mut x = Grid::filled(4, 4, 0.0f32);
        for i in 0..16 {
            x.data[i] = (i as f32) / 16.0 - 0.4;
        }
        // Labels and pseudo targets away from the kinks.
        for (i, v) in [(0usize, 0.9f32), (5, -0.3), (10, 0.5)] {
            t.labels.data[i] = v;
            t.label_mask.data[i] = 1;
        }
        for (i, v) in [(3usize, 0.2f32), (12, -0.6)] {
            t.pseudo_values.data[i] = v;
            t.pseudo_mask.data[i] = 1;
        }
        let loss_of = |a: f64, b: f64| -> f64 {
            let pred = x.map(|v| (a * v as f64 + b) as f32);
            ssl_tile_loss(&pred, &t)
        };
        let (a0, b0) = (0.7, 0.05);
        // Analytic gradient of the two-term L1 loss.
        let (mut da, mut db) = (0.0f64, 0.0f64);
        for i in 0..16 {
            let f = a0 * x.data[i] as f64 + b0;
            if t.label_mask.data[i] != 0 {
                let s = (f - t.labels.data[i] as f64).signum() / 3.0;
                da += s * x.data[i] as f64;
                db += s;
            }
            if t.pseudo_mask.data[i] != 0 {
                let s = (f - t.pseudo_values.data[i] as f64).signum() / 2.0;
                da += s * x.data[i] as f64;
                db += s;
            }
        }
        // The loss is piecewise linear in (a, b); any step that stays on the
        // current linear piece gives an exact difference quotient, and a
        // larger step keeps f32 rounding of the predictions negligible.
        let eps = 1e-2;
        let fd_a = (loss_of(a0 + eps, b0) - loss_of(a0 - eps, b0)) / (2.0 * eps);
        let fd_b = (loss_of(a0, b0 + eps) - loss_of(a0, b0 - eps)) / (2.0 * eps);
        assert!((da - fd_a).abs() / da.abs().max(1e-9) < 1e-4, "{da} vs {fd_a}");
        assert!((db - fd_b).abs() / db.abs().max(1e-9) < 1e-4, "{db} vs {fd_b}");
    }

    fn tiny_corpus(seed: u64) -> (TileCorpus, ChannelStack, Grid<u8>) {
        let h = 48;
        let spec = GridSpec::new(0.0, 0.0, 10.0, h, h).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut train = RadioMap::empty(spec);
        let mut val = RadioMap::empty(spec);
        let buildings = Grid::filled(h, h, 0u8);
        for i in 0..h * h {
            let r = rng.random_range(0.0..1.0f64);
            let v = -60.0 - 50.0 * ((i % h) as f64 / h as f64);
            if r < 0.25 {
                train.values.data[i] = v;
                train.mask.data[i] = 1;
                val.values.data[i] = v;
            } else if r < 0.32 {
                val.values.data[i] = v;
                val.mask.data[i] = 1;
                train.values.data[i] = v;
            }
        }
        let pseudo = interpolate_unlabeled(&train, Some(&buildings)).unwrap();
        let dist = distance_channel(&spec, (h / 2, h / 2)).unwrap();
        let mut msm_city = Grid::filled(h, h, f64::NAN);
        for i in 0..h * h {
            if train.mask.data[i] != 0 {
                msm_city.data[i] = train.values.data[i];
            }
        }
        let stack = normalize_stack(
            spec,
            vec![
                (ChannelId::Measurements, msm_city),
                (ChannelId::Distance, dist),
            ],
        )
        .unwrap();
        let samples = cut_tiles(&stack, &train, &val, &pseudo, Some(&buildings), 0, 32, 16).unwrap();
        let corpus = TileCorpus {
            tile: 32,
            stride: 16,
            channel_ids: stack.ids(),
            norms: stack.norms.clone(),
            bs_count: 1,
            samples,
        };
        (corpus, stack, buildings)
    }

    fn small_skeleton() -> Skeleton {
        Skeleton::with_widths([4, 4, 8, 8])
    }

    #[test]
    fn scenario1_trains_and_records_finite_losses() {
        let (corpus, _, _) = tiny_corpus(1);
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(2));
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        };
        let (trained, report) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        assert_eq!(report.epochs_run, 3);
        assert!(report.train_loss.iter().all(|l| l.is_finite()));
        assert!(report.val_mae.iter().all(|v| v.unwrap().is_finite()));
        assert_eq!(trained.channel_ids, corpus.channel_ids);
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, _, _) = tiny_corpus(3);
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(4));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 11,
            ..Default::default()
        };
        let (_, r1) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        let (_, r2) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        assert_eq!(r1.val_mae, r2.val_mae);
        assert_eq!(r1.train_loss, r2.train_loss);
    }

    #[test]
    fn constant_label_tile_converges_without_pseudo() {
        // A single tile fully labeled with one constant: the model output
        // should approach that constant in normalized space.
        let size = 32;
        let mut t = tile_fixture(size);
        for i in 0..size * size {
            t.labels.data[i] = -85.0;
            t.label_mask.data[i] = 1;
        }
        let corpus = TileCorpus {
            tile: size,
            stride: size,
            channel_ids: vec![ChannelId::Measurements],
            norms: vec![ChannelNorm { min: -110.0, max: -60.0 }],
            bs_count: 1,
            samples: vec![t],
        };
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(6));
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 1,
            pseudo_weight: 0.0,
            seed: 7,
            lr: 3e-3,
            ..Default::default()
        };
        let (trained, _) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        let x = batch_inputs(&corpus, &[0]);
        let pred = trained.model.forward(&x);
        let norm = corpus.measurement_norm();
        let target = norm.normalize(-85.0);
        let mean: f64 = pred.data.iter().map(|&v| v as f64).sum::<f64>() / pred.data.len() as f64;
        assert!((mean - target).abs() < 0.05, "mean {mean} target {target}");
    }

    #[test]
    fn predict_full_averages_overlaps_and_masks_buildings() {
        let (corpus, stack, _) = tiny_corpus(8);
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(9));
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 13,
            ..Default::default()
        };
        let (trained, _) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        let mut buildings = Grid::filled(48, 48, 0u8);
        buildings.set(5, 5, 1);
        let pred = predict_full(&trained, &stack, Some(&buildings), 32, 16).unwrap();
        assert_eq!(pred.mask.get(5, 5), 0);
        assert!(pred.values.get(5, 5).is_nan());
        assert_eq!(pred.mask.get(0, 0), 1);
        assert!(pred.values.get(0, 0).is_finite());

        // Mismatched channel config errors.
        let bad = normalize_stack(
            stack.spec,
            vec![(ChannelId::Measurements, Grid::filled(48, 48, -90.0))],
        )
        .unwrap();
        assert!(matches!(
            predict_full(&trained, &bad, None, 32, 16),
            Err(TrainError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn predict_full_single_tile_equals_direct_forward() {
        let (mut corpus, stack, _) = tiny_corpus(10);
        corpus.stride = 48; // single position when tile = grid
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(11));
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 17,
            ..Default::default()
        };
        let (trained, _) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        let pred = predict_full(&trained, &stack, None, 48, 48).unwrap();

        let mut x = Tensor::zeros(1, stack.len(), 48, 48);
        for (k, (_, g)) in stack.channels.iter().enumerate() {
            for i in 0..48 * 48 {
                x.plane_mut(0, k)[i] = g.data[i] as f32;
            }
        }
        let direct = trained.model.forward(&x);
        let norm = corpus.measurement_norm();
        for i in 0..48 * 48 {
            let want = norm.denormalize(direct.data[i] as f64);
            assert!((pred.values.data[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn scenario2_relabels_from_reassembled_predictions() {
        let (corpus, stack, buildings) = tiny_corpus(12);
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(13));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 19,
            ..Default::default()
        };
        let (f1, _) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        let (f2, _, relabeled) = train_scenario2(
            &f1,
            &corpus,
            std::slice::from_ref(&stack),
            &[Some(buildings.clone())],
            32,
            16,
            &cfg,
        )
        .unwrap();
        // Pseudo values now equal the reassembled prediction at those pixels.
        let pred = predict_full(&f1, &stack, Some(&buildings), 32, 16).unwrap();
        for t in &relabeled.samples {
            let mut patch = Grid::filled(t.size, t.size, 0.0f32);
            for r in 0..t.size {
                for c in 0..t.size {
                    patch.set(r, c, pred.values.get(t.origin.0 + r, t.origin.1 + c) as f32);
                }
            }
            let patch = t.transform.apply(&patch);
            for i in 0..t.size * t.size {
                if t.pseudo_mask.data[i] != 0 {
                    assert!((t.pseudo_values.data[i] - patch.data[i]).abs() < 1e-5);
                }
            }
        }
        // Labels and validation untouched.
        for (a, b) in corpus.samples.iter().zip(&relabeled.samples) {
            assert_eq!(a.label_mask, b.label_mask);
            assert_eq!(a.val_mask, b.val_mask);
            assert_eq!(a.labels, b.labels);
        }
        assert_eq!(f2.channel_ids, f1.channel_ids);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (corpus, _, _) = tiny_corpus(14);
        let sk = small_skeleton();
        let genome = random_genome(&sk, &mut ChaCha12Rng::seed_from_u64(15));
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 23,
            ..Default::default()
        };
        let (trained, report) = train_scenario1(&genome, &sk, &corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        save_checkpoint(&prefix, &trained, cfg.seed, Some(&report)).unwrap();
        let (back, meta) = load_checkpoint(&prefix).unwrap();
        assert_eq!(meta.seed, cfg.seed);
        assert_eq!(back.genome, trained.genome);
        assert_eq!(nn::flatten_params(&back.model), nn::flatten_params(&trained.model));
    }
}
