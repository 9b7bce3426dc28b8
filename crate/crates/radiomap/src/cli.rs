//! The `rmap` command line: every pipeline stage as a subcommand, staged
//! through on-disk artifacts in the workdir so expensive stages can be
//! resumed and audited.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, RunManifest};
use crate::evalreport::{self, TruthPoint};
use crate::grid::{load_radiomap, save_radiomap, Grid, GridSpec, RadioMap};
use crate::ingest;
use crate::interp::{self, AnchorSet, KnnDomain};
use crate::nas::{self, ArchGenome, SearchConfig, Skeleton};
use crate::pathloss::{fit_pathloss, PathLossParams};
use crate::plot;
use crate::sidechannels::{self, ChannelId, ChannelStack};
use crate::synthcity::{self, CityParams, MeasurementParams};
use crate::tiles::{self, TileCorpus};
use crate::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "rmap", version, about = "Signal-strength map reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config workdir.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override the channel list, e.g. `msm,dist,elev`.
    #[arg(long, global = true)]
    channels: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city and measurement campaign.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        building_density: f64,
        #[arg(long, default_value_t = 8)]
        road_pitch: usize,
        #[arg(long, default_value_t = 4)]
        bs: usize,
        #[arg(long, default_value_t = -51.88)]
        p0: f64,
        #[arg(long, default_value_t = 2.89)]
        n: f64,
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        #[arg(long, default_value_t = 6.0)]
        per_building_loss: f64,
        #[arg(long, default_value_t = -120.0)]
        floor: f64,
        #[arg(long, default_value_t = 0.5)]
        sample_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        record_noise: f64,
    },
    /// Parse, filter and aggregate measurements into per-gateway maps.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the log-distance path-loss model per base station.
    FitPathloss {
        #[command(flatten)]
        common: Common,
    },
    /// Build the side-information channel stacks per base station.
    Channels {
        #[command(flatten)]
        common: Common,
    },
    /// Run a classical interpolation baseline on one base station.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["rbf", "knn", "tv"])]
        method: String,
        /// Base station index; defaults to the held-out one.
        #[arg(long)]
        bs: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Average neighbours in milliwatts instead of dB.
        #[arg(long, default_value_t = false)]
        mw: bool,
    },
    /// Cut the semi-supervised tile corpus from the training base stations.
    Tiles {
        #[command(flatten)]
        common: Common,
    },
    /// Evolutionary architecture search over the corpus.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Train the selected genome (scenario 1 or 2) and predict the test map.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        #[arg(long)]
        epochs: Option<usize>,
        /// Genome JSON; defaults to the search output, else all-conv3.
        #[arg(long)]
        genome: Option<PathBuf>,
    },
    /// Evaluate every prediction in the workdir against the test points.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Render curves, CDFs and heatmaps from the report.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

/// Entry point used by `main` and the CLI tests. Returns the process exit
/// code: 0 ok, 1 runtime/config error, 2 usage error.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth {
            common,
            building_density,
            road_pitch,
            bs,
            p0,
            n,
            sigma,
            per_building_loss,
            floor,
            sample_fraction,
            record_noise,
        } => cmd_synth(
            &common,
            building_density,
            road_pitch,
            bs,
            p0,
            n,
            sigma,
            per_building_loss,
            floor,
            sample_fraction,
            record_noise,
        ),
        Command::Ingest { common } => cmd_ingest(&common),
        Command::FitPathloss { common } => cmd_fit_pathloss(&common),
        Command::Channels { common } => cmd_channels(&common),
        Command::Interpolate {
            common,
            method,
            bs,
            k,
            max_iters,
            tol,
            mw,
        } => cmd_interpolate(&common, &method, bs, k, max_iters, tol, mw),
        Command::Tiles { common } => cmd_tiles(&common),
        Command::Search { common, generations } => cmd_search(&common, generations),
        Command::Train {
            common,
            scenario,
            epochs,
            genome,
        } => cmd_train(&common, scenario, epochs, genome),
        Command::Eval { common } => cmd_eval(&common),
        Command::Plot { common } => cmd_plot(&common),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log_line("error", &format!("{e:#}"));
            1
        }
    }
}

fn log_line(level: &str, msg: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "level": level, "msg": msg })
    );
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml("seed = 0\n")?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(wd) = &common.workdir {
        cfg.paths.workdir = wd.clone();
    }
    if let Some(ch) = &common.channels {
        cfg.channels = ch.split(',').map(|s| s.trim().to_string()).collect();
    }
    cfg.validate()?;
    if cfg.paths.workdir.as_os_str().is_empty() {
        cfg.paths.workdir = PathBuf::from("work");
    }
    Ok(cfg)
}

fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let dir = &cfg.paths.workdir;
    fs::create_dir_all(dir)?;
    let manifest = RunManifest::new(command, cfg);
    let path = dir.join(format!("manifest-{command}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn grid_spec(cfg: &ExperimentConfig) -> Result<GridSpec> {
    Ok(GridSpec::new(
        cfg.grid.origin_east,
        cfg.grid.origin_north,
        cfg.grid.cell_m,
        cfg.grid.width,
        cfg.grid.height,
    )?)
}

fn scene_manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.workdir.join("scene.json")
}

fn load_scene_manifest(cfg: &ExperimentConfig) -> Result<synthcity::SceneManifest> {
    let path = scene_manifest_path(cfg);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run `rmap synth` first?)", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn gateway_name(bs: usize) -> String {
    format!("BS{}", bs + 1)
}

fn maps_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.workdir.join("maps")
}

fn test_bs_index(manifest: &synthcity::SceneManifest) -> usize {
    manifest.bs_cells.len().saturating_sub(1)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    common: &Common,
    building_density: f64,
    road_pitch: usize,
    bs: usize,
    p0: f64,
    n: f64,
    sigma: f64,
    per_building_loss: f64,
    floor: f64,
    sample_fraction: f64,
    record_noise: f64,
) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = grid_spec(&cfg)?;
    let dir = &cfg.paths.workdir;
    fs::create_dir_all(dir)?;

    let params = CityParams {
        building_density,
        road_pitch,
        bs_count: bs,
        origin_lat: cfg.grid.origin_lat,
        origin_lon: cfg.grid.origin_lon,
    };
    let scene = synthcity::gen_city(cfg.seed, spec, &params)?;
    let pl = PathLossParams::new(p0, n, sigma, 1.0)?;
    let mp = MeasurementParams {
        per_building_loss,
        floor_dbm: floor,
        sample_fraction,
        record_noise_db: record_noise,
        seed: cfg.seed,
    };
    let campaign = synthcity::gen_measurements(&scene, &pl, &mp)?;

    fs::write(dir.join("measurements.csv"), synthcity::records_to_csv(&campaign.records))?;
    fs::write(dir.join("buildings.geojson"), synthcity::scene_to_geojson(&scene))?;
    fs::write(dir.join("dsm.asc"), sidechannels::write_esri_ascii(&scene.dsm))?;
    for (k, truth) in campaign.truth.iter().enumerate() {
        save_radiomap(&dir.join(format!("truth_bs{k}")), truth)?;
    }
    fs::write(
        scene_manifest_path(&cfg),
        serde_json::to_string_pretty(&synthcity::scene_manifest(&scene))?,
    )?;
    write_manifest(&cfg, "synth")?;
    log_line(
        "info",
        &format!(
            "synth: {} records, {} buildings, {} base stations",
            campaign.records.len(),
            scene.buildings.footprints.len(),
            scene.bs_cells.len()
        ),
    );
    Ok(())
}

fn cmd_ingest(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = grid_spec(&cfg)?;
    let csv_path = cfg
        .paths
        .measurements
        .clone()
        .unwrap_or_else(|| cfg.paths.workdir.join("measurements.csv"));
    if !csv_path.exists() {
        bail!("measurements file {} does not exist", csv_path.display());
    }
    let text = fs::read_to_string(&csv_path)?;
    let parsed = ingest::parse_measurements(&text)?;
    let (kept, removed) = ingest::filter_artifacts(
        &parsed.records,
        cfg.preprocess.rssi_ceiling_dbm,
        (cfg.preprocess.static_window_min * 60.0) as i64,
    );

    let mut gateways: Vec<String> = kept.iter().map(|r| r.gateway_id.clone()).collect();
    gateways.sort();
    gateways.dedup();

    let dir = maps_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let mut stats = Vec::new();
    for gw in &gateways {
        let records: Vec<_> = kept.iter().filter(|r| &r.gateway_id == gw).cloned().collect();
        let samples = ingest::project_records(&records, cfg.grid.origin_lat, cfg.grid.origin_lon);
        let (map, dropped) = ingest::aggregate_to_grid(&samples, spec);
        let filtered = ingest::filter_cells(&map, cfg.preprocess.min_count, cfg.preprocess.drop_fraction)?;
        let (train, val) = ingest::split_train_val(&filtered, cfg.preprocess.val_fraction, cfg.seed);
        save_radiomap(&dir.join(gw), &filtered)?;
        save_radiomap(&dir.join(format!("{gw}.train")), &train)?;
        save_radiomap(&dir.join(format!("{gw}.val")), &val)?;
        stats.push(serde_json::json!({
            "gateway": gw,
            "records": records.len(),
            "cells": filtered.masked_cells(),
            "train_cells": train.masked_cells(),
            "val_cells": val.masked_cells(),
            "out_of_grid": dropped,
        }));
    }
    fs::write(
        cfg.paths.workdir.join("ingest_stats.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "parsed": parsed.records.len(),
            "rejected_rows": parsed.rejects.len(),
            "artifact_removed": removed,
            "gateways": stats,
        }))?,
    )?;
    write_manifest(&cfg, "ingest")?;
    log_line(
        "info",
        &format!(
            "ingest: {} rows parsed, {} rejected, {} artifact-filtered, {} gateways",
            parsed.records.len(),
            parsed.rejects.len(),
            removed,
            gateways.len()
        ),
    );
    Ok(())
}

fn cmd_fit_pathloss(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = load_scene_manifest(&cfg)?;
    let spec = grid_spec(&cfg)?;
    let mut csv = String::from("bs_id,n,sigma_db,p0_dbm,sample_count\n");
    for (k, &bs_cell) in manifest.bs_cells.iter().enumerate() {
        let gw = gateway_name(k);
        let map = load_radiomap(&maps_dir(&cfg).join(&gw))?;
        let bs = spec.cell_center(bs_cell.0, bs_cell.1);
        let samples: Vec<(f64, f64)> = map
            .mask
            .iter_cells()
            .filter(|&(_, _, m)| m != 0)
            .map(|(r, c, _)| {
                let (e, n) = spec.cell_center(r, c);
                let d = ((e - bs.0).powi(2) + (n - bs.1).powi(2)).sqrt().max(1.0);
                (d, map.values.get(r, c))
            })
            .collect();
        let fit = fit_pathloss(&samples, 1.0)?;
        csv.push_str(&format!(
            "{gw},{:.4},{:.4},{:.4},{}\n",
            fit.n,
            fit.sigma_db,
            fit.p0_dbm,
            samples.len()
        ));
    }
    let out = cfg.paths.workdir.join("pathloss.csv");
    fs::write(&out, &csv)?;
    write_manifest(&cfg, "fit-pathloss")?;
    print!("{csv}");
    Ok(())
}

/// Rasterize the buildings file when one is available.
fn load_building_scene(cfg: &ExperimentConfig) -> Result<Option<sidechannels::BuildingScene>> {
    let spec = grid_spec(cfg)?;
    let buildings_path = cfg
        .paths
        .buildings
        .clone()
        .unwrap_or_else(|| cfg.paths.workdir.join("buildings.geojson"));
    if !buildings_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&buildings_path)?;
    let fps = sidechannels::parse_geojson_buildings(&text, cfg.grid.origin_lat, cfg.grid.origin_lon)?;
    Ok(Some(sidechannels::BuildingScene::rasterize(fps, &spec)))
}

/// Build (and persist) the channel stack for one base station.
fn build_stack(
    cfg: &ExperimentConfig,
    manifest: &synthcity::SceneManifest,
    bs: usize,
    train_map: &RadioMap,
) -> Result<(ChannelStack, Option<Grid<u8>>)> {
    let spec = grid_spec(cfg)?;
    let bs_cell = manifest.bs_cells[bs];
    let ids = cfg.channel_ids();

    let scene = load_building_scene(cfg)?;
    let building_raster = scene.as_ref().map(|s| s.raster.clone());

    let mut rasters: Vec<(ChannelId, Grid<f64>)> = Vec::new();
    for id in &ids {
        match id {
            ChannelId::Measurements => {
                let mut msm = Grid::filled(spec.height, spec.width, f64::NAN);
                for i in 0..spec.cells() {
                    if train_map.mask.data[i] != 0 {
                        msm.data[i] = train_map.values.data[i];
                    }
                }
                rasters.push((ChannelId::Measurements, msm));
            }
            ChannelId::Distance => {
                rasters.push((ChannelId::Distance, sidechannels::distance_channel(&spec, bs_cell)?));
            }
            ChannelId::Elevation => {
                let dsm_path = cfg
                    .paths
                    .dsm
                    .clone()
                    .unwrap_or_else(|| cfg.paths.workdir.join("dsm.asc"));
                let dsm = sidechannels::parse_esri_ascii(&fs::read_to_string(&dsm_path)?)?;
                rasters.push((ChannelId::Elevation, sidechannels::elevation_channel(&dsm, &spec)?));
            }
            ChannelId::BuildingCount => {
                let scene = scene
                    .as_ref()
                    .ok_or_else(|| anyhow!("building-count channel needs a buildings file"))?;
                rasters.push((
                    ChannelId::BuildingCount,
                    sidechannels::building_count_channel(scene, &spec, bs_cell)?,
                ));
            }
            ChannelId::Buildings => {
                let scene = scene
                    .as_ref()
                    .ok_or_else(|| anyhow!("buildings channel needs a buildings file"))?;
                rasters.push((ChannelId::Buildings, sidechannels::buildings_channel(scene, &spec)?));
            }
        }
    }
    Ok((sidechannels::normalize_stack(spec, rasters)?, building_raster))
}

fn cmd_channels(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = load_scene_manifest(&cfg)?;
    let dir = cfg.paths.workdir.join("channels");
    fs::create_dir_all(&dir)?;
    for bs in 0..manifest.bs_cells.len() {
        let train = load_radiomap(&maps_dir(&cfg).join(format!("{}.train", gateway_name(bs))))?;
        let (stack, _) = build_stack(&cfg, &manifest, bs, &train)?;
        for (id, grid) in &stack.channels {
            crate::grid::write_grid_f32(&dir.join(format!("bs{bs}.{}.f32", id.name())), grid)?;
        }
        let norms = serde_json::json!({
            "channels": stack.ids().iter().map(|c| c.name()).collect::<Vec<_>>(),
            "norms": stack.norms,
        });
        fs::write(dir.join(format!("bs{bs}.norms.json")), serde_json::to_string_pretty(&norms)?)?;
    }
    write_manifest(&cfg, "channels")?;
    log_line("info", &format!("channels: {} stacks built", manifest.bs_cells.len()));
    Ok(())
}

fn pred_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.workdir.join("pred")
}

fn cmd_interpolate(
    common: &Common,
    method: &str,
    bs: Option<usize>,
    k: usize,
    max_iters: usize,
    tol: f64,
    mw: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = load_scene_manifest(&cfg)?;
    let spec = grid_spec(&cfg)?;
    let bs = bs.unwrap_or_else(|| test_bs_index(&manifest));
    let train = load_radiomap(&maps_dir(&cfg).join(format!("{}.train", gateway_name(bs))))?;
    let pred = match method {
        "rbf" => interp::rbf_interpolate(&AnchorSet::from_map(&train)?, spec)?,
        "knn" => {
            let domain = if mw { KnnDomain::MilliWatt } else { KnnDomain::Db };
            interp::knn_interpolate(&AnchorSet::from_map(&train)?, spec, k, domain)?
        }
        "tv" => interp::tv_inpaint(&train, max_iters, tol)?.map,
        other => bail!("unknown method `{other}`"),
    };
    fs::create_dir_all(pred_dir(&cfg))?;
    save_radiomap(&pred_dir(&cfg).join(format!("{method}_bs{bs}")), &pred)?;
    write_manifest(&cfg, "interpolate")?;
    log_line("info", &format!("interpolate: {method} on bs{bs}"));
    Ok(())
}

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.workdir.join("corpus")
}

fn cmd_tiles(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = load_scene_manifest(&cfg)?;
    let test_bs = test_bs_index(&manifest);
    let mut samples = Vec::new();
    let mut channel_ids = None;
    let mut norms = None;
    let mut bs_count = 0;
    for bs in 0..manifest.bs_cells.len() {
        if bs == test_bs {
            continue;
        }
        let gw = gateway_name(bs);
        let train = load_radiomap(&maps_dir(&cfg).join(format!("{gw}.train")))?;
        let val = load_radiomap(&maps_dir(&cfg).join(format!("{gw}.val")))?;
        let (stack, buildings) = build_stack(&cfg, &manifest, bs, &train)?;
        let pseudo = tiles::interpolate_unlabeled(&train, buildings.as_ref())?;
        let cut = tiles::cut_tiles(
            &stack,
            &train,
            &val,
            &pseudo,
            buildings.as_ref(),
            bs_count,
            cfg.tiles.tile,
            cfg.tiles.stride,
        )?;
        samples.extend(tiles::augment(&cut));
        channel_ids = Some(stack.ids());
        norms = Some(stack.norms.clone());
        bs_count += 1;
    }
    let mut corpus = TileCorpus {
        tile: cfg.tiles.tile,
        stride: cfg.tiles.stride,
        channel_ids: channel_ids.ok_or_else(|| anyhow!("no training base stations"))?,
        norms: norms.unwrap(),
        bs_count,
        samples,
    };
    tiles::apply_cutout(&mut corpus, cfg.tiles.min_label_fraction, cfg.seed);
    tiles::save_corpus(&corpus_dir(&cfg), &corpus)?;
    write_manifest(&cfg, "tiles")?;
    log_line(
        "info",
        &format!("tiles: {} samples from {} base stations", corpus.samples.len(), bs_count),
    );
    Ok(())
}

fn search_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.workdir.join("search")
}

fn cmd_search(common: &Common, generations: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = tiles::load_corpus(&corpus_dir(&cfg))?;
    let skeleton = Skeleton::with_widths(cfg.model.widths);
    let search_cfg = SearchConfig {
        population: cfg.nas.population,
        generations: generations.unwrap_or(cfg.nas.generations),
        metric: cfg.nas.metric,
        seed: cfg.seed,
        budget_epochs: cfg.nas.budget_epochs,
        workers: cfg.nas.workers,
    };
    let budget = TrainConfig {
        epochs: search_cfg.budget_epochs,
        batch_size: cfg.train.batch,
        lr: cfg.train.lr,
        patience: usize::MAX,
        seed: cfg.seed,
        pseudo_weight: 1.0,
    };
    let metric = search_cfg.metric;
    let outcome = nas::evolve(&skeleton, &search_cfg, |genome, seed| {
        let cfg_one = TrainConfig {
            seed,
            ..budget.clone()
        };
        let (trained, _) = trainer::train_scenario1(genome, &skeleton, &corpus, &cfg_one)
            .map_err(|e| e.to_string())?;
        trainer::validation_fitness(&trained.model, &corpus, metric, budget.batch_size)
            .ok_or_else(|| "no validation pixels".to_string())
    })?;

    let dir = search_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let mut jsonl = String::new();
    for h in &outcome.history {
        jsonl.push_str(&serde_json::to_string(h)?);
        jsonl.push('\n');
    }
    fs::write(dir.join("history.jsonl"), jsonl)?;
    fs::write(dir.join("best_genome.json"), serde_json::to_string_pretty(&outcome.best)?)?;
    write_manifest(&cfg, "search")?;
    log_line(
        "info",
        &format!(
            "search: best fitness {:.4} dB after {} evaluations",
            outcome.best.fitness.unwrap_or(f64::NAN),
            outcome.history.len()
        ),
    );
    Ok(())
}

fn default_genome(skeleton: &Skeleton) -> ArchGenome {
    use crate::nas::{OpChoice, SlotKind};
    ArchGenome {
        genes: skeleton
            .slots
            .iter()
            .map(|k| match k {
                SlotKind::Conv => OpChoice::Conv3,
                SlotKind::Pool => OpChoice::MaxPool4,
            })
            .collect(),
        age: 0,
        fitness: None,
    }
}

fn cmd_train(common: &Common, scenario: u8, epochs: Option<usize>, genome: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = load_scene_manifest(&cfg)?;
    let corpus = tiles::load_corpus(&corpus_dir(&cfg))?;
    let skeleton = Skeleton::with_widths(cfg.model.widths);
    let genome: ArchGenome = match genome {
        Some(path) => serde_json::from_str(&fs::read_to_string(&path)?)?,
        None => {
            let best = search_dir(&cfg).join("best_genome.json");
            if best.exists() {
                serde_json::from_str(&fs::read_to_string(&best)?)?
            } else {
                default_genome(&skeleton)
            }
        }
    };
    let train_cfg = TrainConfig {
        lr: cfg.train.lr,
        batch_size: cfg.train.batch,
        epochs: epochs.unwrap_or(cfg.train.epochs),
        patience: cfg.train.patience,
        seed: cfg.seed,
        pseudo_weight: 1.0,
    };

    let (f1, report1) = trainer::train_scenario1(&genome, &skeleton, &corpus, &train_cfg)?;
    let (trained, report) = if scenario == 2 {
        let mut stacks = Vec::new();
        let mut buildings = Vec::new();
        let test_bs = test_bs_index(&manifest);
        for bs in 0..manifest.bs_cells.len() {
            if bs == test_bs {
                continue;
            }
            let train_map = load_radiomap(&maps_dir(&cfg).join(format!("{}.train", gateway_name(bs))))?;
            let (stack, b) = build_stack(&cfg, &manifest, bs, &train_map)?;
            stacks.push(stack);
            buildings.push(b);
        }
        let (f2, report2, _) = trainer::train_scenario2(
            &f1,
            &corpus,
            &stacks,
            &buildings,
            cfg.tiles.tile,
            cfg.tiles.stride,
            &train_cfg,
        )?;
        (f2, report2)
    } else if scenario == 1 {
        (f1, report1)
    } else {
        bail!("scenario must be 1 or 2, got {scenario}");
    };

    let ckpt_dir = cfg.paths.workdir.join("ckpt");
    fs::create_dir_all(&ckpt_dir)?;
    trainer::save_checkpoint(
        &ckpt_dir.join(format!("scenario{scenario}")),
        &trained,
        cfg.seed,
        Some(&report),
    )?;

    // Predict the held-out base station's map.
    let test_bs = test_bs_index(&manifest);
    let test_train = load_radiomap(&maps_dir(&cfg).join(format!("{}.train", gateway_name(test_bs))))?;
    let (stack, buildings) = build_stack(&cfg, &manifest, test_bs, &test_train)?;
    let pred = trainer::predict_full(&trained, &stack, buildings.as_ref(), cfg.tiles.tile, cfg.tiles.stride)?;
    fs::create_dir_all(pred_dir(&cfg))?;
    save_radiomap(&pred_dir(&cfg).join(format!("model_s{scenario}_bs{test_bs}")), &pred)?;
    write_manifest(&cfg, "train")?;
    log_line(
        "info",
        &format!(
            "train: scenario {scenario}, {} epochs, best val MAE {:?}",
            report.epochs_run, report.best_val_mae
        ),
    );
    Ok(())
}

/// Held-out test points of the test base station: its validation cells.
fn test_points(cfg: &ExperimentConfig, manifest: &synthcity::SceneManifest) -> Result<Vec<TruthPoint>> {
    let test_bs = test_bs_index(manifest);
    let val = load_radiomap(&maps_dir(cfg).join(format!("{}.val", gateway_name(test_bs))))?;
    let spec = val.spec;
    Ok(val
        .mask
        .iter_cells()
        .filter(|&(_, _, m)| m != 0)
        .map(|(r, c, _)| {
            let (east, north) = spec.cell_center(r, c);
            TruthPoint {
                east,
                north,
                dbm: val.values.get(r, c),
            }
        })
        .collect())
}

fn cmd_eval(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = load_scene_manifest(&cfg)?;
    let test_bs = test_bs_index(&manifest);
    let truth = test_points(&cfg, &manifest)?;

    let mut methods: Vec<(String, RadioMap)> = Vec::new();
    let dir = pred_dir(&cfg);
    let suffix = format!("_bs{test_bs}.json");
    let mut names: Vec<String> = Vec::new();
    if dir.exists() {
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(&suffix) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    for stem in names {
        let map = load_radiomap(&dir.join(format!("{stem}_bs{test_bs}")))?;
        methods.push((stem, map));
    }
    if methods.is_empty() {
        bail!("no predictions for bs{test_bs} under {}", dir.display());
    }
    let refs: Vec<(String, &RadioMap)> = methods.iter().map(|(n, m)| (n.clone(), m)).collect();
    let buildings = load_building_scene(&cfg)?.map(|s| s.raster);
    let report = evalreport::assemble_report(
        &refs,
        &truth,
        manifest.bs_cells[test_bs],
        &cfg.eval.radii_m,
        cfg.eval.bin_width_m,
        buildings.as_ref(),
    )?;
    fs::write(
        cfg.paths.workdir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    fs::write(cfg.paths.workdir.join("zone_table.csv"), evalreport::zone_table_csv(&report))?;
    write_manifest(&cfg, "eval")?;
    println!("{}", evalreport::zone_table_csv(&report));
    Ok(())
}

fn cmd_plot(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report: evalreport::EvalReport =
        serde_json::from_str(&fs::read_to_string(cfg.paths.workdir.join("report.json"))?)?;
    let dir = cfg.paths.workdir.join("plots");
    fs::create_dir_all(&dir)?;
    let curves: Vec<(String, Vec<evalreport::CurvePoint>)> = report
        .methods
        .iter()
        .map(|m| (m.method.clone(), m.curve.clone()))
        .collect();
    plot::plot_curves(&dir.join("mae_vs_distance"), "MAE vs distance to base station", &curves)?;
    let cdfs: Vec<(String, Vec<(f64, f64)>)> = report
        .methods
        .iter()
        .map(|m| (m.method.clone(), m.cdf.clone()))
        .collect();
    plot::plot_cdfs(&dir.join("error_cdf"), "Empirical CDF of absolute errors", &cdfs)?;
    let manifest = load_scene_manifest(&cfg)?;
    let spec = grid_spec(&cfg)?;
    let bs_cell = manifest.bs_cells[test_bs_index(&manifest)];
    plot::plot_heatmap(
        &dir.join("error_heatmap"),
        &format!("Signed errors, best method ({})", report.best_method),
        &report.heatmap_best,
        spec.cell_center(bs_cell.0, bs_cell.1),
    )?;
    write_manifest(&cfg, "plot")?;
    log_line("info", "plot: wrote mae_vs_distance, error_cdf, error_heatmap");
    Ok(())
}
