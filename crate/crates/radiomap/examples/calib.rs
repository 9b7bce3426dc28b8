// temporary calibration harness for the directional criteria
use radiomap::grid::{Grid, GridSpec, RadioMap};
use radiomap::ingest::{aggregate_to_grid, filter_cells, project_records, split_train_val};
use radiomap::interp::{rbf_interpolate, AnchorSet};
use radiomap::nas::{ArchGenome, OpChoice, Skeleton, SlotKind};
use radiomap::pathloss::PathLossParams;
use radiomap::sidechannels::{
    distance_channel, elevation_channel, normalize_stacks_shared, ChannelId, ChannelStack,
};
use radiomap::synthcity::{gen_city, gen_measurements, CityParams, MeasurementParams, SynthScene};
use radiomap::tiles::{apply_cutout, augment, cut_tiles, interpolate_unlabeled, TileCorpus};
use radiomap::trainer::{predict_full, train_scenario1, train_scenario2, TrainConfig};

const CITY_N: usize = 96;
const TILE: usize = 48;
const STRIDE: usize = 24;

struct City {
    spec: GridSpec,
    scene: SynthScene,
    train_maps: Vec<RadioMap>,
    val_maps: Vec<RadioMap>,
    stacks: Vec<ChannelStack>,
    truth: Vec<RadioMap>,
}

fn build_city(seed: u64) -> City {
    let spec = GridSpec::new(0.0, 0.0, 10.0, CITY_N, CITY_N).unwrap();
    let params = CityParams {
        building_density: 0.35,
        road_pitch: 8,
        bs_count: 4,
        origin_lat: 45.19,
        origin_lon: 5.71,
    };
    let scene = gen_city(seed, spec, &params).unwrap();
    let pl = PathLossParams::new(-51.88, 2.2, 1.0, 1.0).unwrap();
    let mp = MeasurementParams {
        per_building_loss: 6.0,
        floor_dbm: -120.0,
        sample_fraction: 0.10,
        record_noise_db: 5.0,
        seed,
    };
    let campaign = gen_measurements(&scene, &pl, &mp).unwrap();
    let mut train_maps = Vec::new();
    let mut val_maps = Vec::new();
    let mut groups = Vec::new();
    for b in 0..4 {
        let gw = format!("BS{}", b + 1);
        let records: Vec<_> = campaign.records.iter().filter(|r| r.gateway_id == gw).cloned().collect();
        let samples = project_records(&records, params.origin_lat, params.origin_lon);
        let (map, _) = aggregate_to_grid(&samples, spec);
        let filtered = filter_cells(&map, 3, 0.10).unwrap();
        let (train, val) = split_train_val(&filtered, 0.20, seed.wrapping_add(b as u64));
        // Dense measurements channel: anchors plus the RBF fill.
        let msm = interpolate_unlabeled(&train, Some(&scene.buildings.raster))
            .unwrap()
            .values;
        let dist = distance_channel(&spec, scene.bs_cells[b]).unwrap();
        let elev = elevation_channel(&scene.dsm, &spec).unwrap();
        groups.push(vec![
            (ChannelId::Measurements, msm),
            (ChannelId::Distance, dist),
            (ChannelId::Elevation, elev),
        ]);
        train_maps.push(train);
        val_maps.push(val);
    }
    let stacks = normalize_stacks_shared(spec, groups).unwrap();
    City { spec, scene, train_maps, val_maps, stacks, truth: campaign.truth }
}

fn subset_stack(stack: &ChannelStack, ids: &[ChannelId]) -> ChannelStack {
    let mut channels = Vec::new();
    let mut norms = Vec::new();
    for (k, (id, g)) in stack.channels.iter().enumerate() {
        if ids.contains(id) {
            channels.push((*id, g.clone()));
            norms.push(stack.norms[k]);
        }
    }
    ChannelStack { spec: stack.spec, channels, norms }
}

fn build_corpus(city: &City, ids: &[ChannelId], seed: u64) -> TileCorpus {
    let mut samples = Vec::new();
    let mut channel_ids = None;
    let mut norms = None;
    for b in 0..3 {
        let stack = subset_stack(&city.stacks[b], ids);
        let buildings = &city.scene.buildings.raster;
        let pseudo = interpolate_unlabeled(&city.train_maps[b], Some(buildings)).unwrap();
        let cut = cut_tiles(&stack, &city.train_maps[b], &city.val_maps[b], &pseudo, Some(buildings), b, TILE, STRIDE).unwrap();
        samples.extend(augment(&cut));
        channel_ids = Some(stack.ids());
        norms = Some(stack.norms.clone());
    }
    let mut corpus = TileCorpus {
        tile: TILE,
        stride: STRIDE,
        channel_ids: channel_ids.unwrap(),
        norms: norms.unwrap(),
        bs_count: 3,
        samples,
    };
    apply_cutout(&mut corpus, 0.03, seed);
    corpus
}

fn test_points(city: &City) -> Vec<radiomap::evalreport::TruthPoint> {
    // Ground truth on road cells the interpolators never saw as anchors.
    let truth = &city.truth[3];
    let train = &city.train_maps[3];
    city.scene
        .roads
        .iter_cells()
        .filter(|&(r, c, m)| {
            m != 0
                && city.scene.buildings.raster.get(r, c) == 0
                && train.mask.get(r, c) == 0
        })
        .map(|(r, c, _)| {
            let (east, north) = city.spec.cell_center(r, c);
            radiomap::evalreport::TruthPoint { east, north, dbm: truth.values.get(r, c) }
        })
        .collect()
}

fn mae_at(pred: &RadioMap, city: &City, radius: f64) -> Option<f64> {
    let zones = radiomap::evalreport::zone_mae(pred, &test_points(city), city.scene.bs_cells[3], &[radius], Some(&city.scene.buildings.raster));
    zones[0].mae_db
}

fn annulus_mae(pred: &RadioMap, city: &City, lo: f64, hi: f64) -> Option<f64> {
    let bs = city.spec.cell_center(city.scene.bs_cells[3].0, city.scene.bs_cells[3].1);
    let pts = test_points(city);
    let (mut acc, mut n) = (0.0, 0usize);
    for p in &pts {
        let d = ((p.east - bs.0).powi(2) + (p.north - bs.1).powi(2)).sqrt();
        if d > lo && d <= hi {
            if let Some((r, c)) = city.spec.cell_of(p.east, p.north) {
                if pred.mask.get(r, c) != 0 {
                    acc += (p.dbm - pred.values.get(r, c)).abs();
                    n += 1;
                }
            }
        }
    }
    if n > 0 { Some(acc / n as f64) } else { None }
}

fn truth_points_for(city: &City, bs: usize) -> Vec<radiomap::evalreport::TruthPoint> {
    let truth = &city.truth[bs];
    let train = &city.train_maps[bs];
    city.scene
        .roads
        .iter_cells()
        .filter(|&(r, c, m)| {
            m != 0 && city.scene.buildings.raster.get(r, c) == 0 && train.mask.get(r, c) == 0
        })
        .map(|(r, c, _)| {
            let (east, north) = city.spec.cell_center(r, c);
            radiomap::evalreport::TruthPoint { east, north, dbm: truth.values.get(r, c) }
        })
        .collect()
}

fn annuli_report(name: &str, pred: &RadioMap, city: &City, bs: usize) {
    let bsc = city.spec.cell_center(city.scene.bs_cells[bs].0, city.scene.bs_cells[bs].1);
    let pts = truth_points_for(city, bs);
    let mut line = format!("{name} bs{bs}:");
    for (lo, hi) in [(0.0, 100.0), (100.0, 200.0), (200.0, 300.0), (300.0, 400.0), (400.0, 700.0)] {
        let (mut mae, mut bias, mut n) = (0.0, 0.0, 0usize);
        for p in &pts {
            let d = ((p.east - bsc.0).powi(2) + (p.north - bsc.1).powi(2)).sqrt();
            if d > lo && d <= hi {
                if let Some((r, c)) = city.spec.cell_of(p.east, p.north) {
                    if pred.mask.get(r, c) != 0 {
                        let e = p.dbm - pred.values.get(r, c);
                        mae += e.abs();
                        bias += e;
                        n += 1;
                    }
                }
            }
        }
        if n > 0 {
            line += &format!(" [{lo:.0}-{hi:.0}: mae {:.2} bias {:+.2} n {n}]", mae / n as f64, bias / n as f64);
        }
    }
    println!("{line}");
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let skeleton = Skeleton::with_widths([8, 16, 32, 64]);
    let genome = ArchGenome {
        genes: skeleton.slots.iter().map(|k| match k {
            SlotKind::Conv => OpChoice::Conv3,
            SlotKind::Pool => OpChoice::MaxPool4,
        }).collect(),
        age: 0,
        fitness: None,
    };
    let sets: [&[ChannelId]; 3] = [
        &[ChannelId::Measurements],
        &[ChannelId::Measurements, ChannelId::Distance],
        &[ChannelId::Measurements, ChannelId::Distance, ChannelId::Elevation],
    ];
    let t0 = std::time::Instant::now();
    let city = build_city(1000 + seed);
    let buildings = city.scene.buildings.raster.clone();
    let cfg = TrainConfig { lr: 2e-3, batch_size: 16, epochs, patience: 15, seed, pseudo_weight: 1.0 };
    let anchors = AnchorSet::from_map(&city.train_maps[3]).unwrap();
    let rbf = rbf_interpolate(&anchors, city.spec).unwrap();
    annuli_report("rbf", &rbf, &city, 3);
    println!("city + rbf in {:.1}s; test points {}; rbf200 {:.3} rbf400 {:.3}",
        t0.elapsed().as_secs_f64(), test_points(&city).len(),
        mae_at(&rbf, &city, 200.0).unwrap_or(f64::NAN), mae_at(&rbf, &city, 400.0).unwrap_or(f64::NAN));
    if std::env::var("SKIP_TRAIN").is_ok() {
        return;
    }
    let mut f1_full = None;
    for (k, ids) in sets.iter().enumerate() {
        let t = std::time::Instant::now();
        let corpus = build_corpus(&city, ids, 1000 + seed);
        let (trained, report) = train_scenario1(&genome, &skeleton, &corpus, &cfg).unwrap();
        let stack = subset_stack(&city.stacks[3], ids);
        let pred = predict_full(&trained, &stack, Some(&buildings), TILE, STRIDE).unwrap();
        println!(
            "set {k}: {} tiles, {} epochs (best {} val {:.3}), {:.1}s | mae200 {:.3} mae400 {:.3}",
            corpus.samples.len(), report.epochs_run, report.best_epoch,
            report.best_val_mae.unwrap_or(f64::NAN), t.elapsed().as_secs_f64(),
            mae_at(&pred, &city, 200.0).unwrap_or(f64::NAN),
            mae_at(&pred, &city, 400.0).unwrap_or(f64::NAN)
        );
        annuli_report(&format!("model set{k}"), &pred, &city, 3);
        if k == 1 {
            // Self-test on a training city.
            let stack0 = subset_stack(&city.stacks[0], ids);
            let pred0 = predict_full(&trained, &stack0, Some(&buildings), TILE, STRIDE).unwrap();
            annuli_report("model set1 SELF", &pred0, &city, 0);
        }
        if k == 2 {
            f1_full = Some((trained, corpus, pred));
        }
    }
    let (f1, corpus, p1) = f1_full.unwrap();
    let stacks: Vec<_> = (0..3).map(|b| subset_stack(&city.stacks[b], sets[2])).collect();
    let bmaps: Vec<Option<Grid<u8>>> = (0..3).map(|_| Some(buildings.clone())).collect();
    let t = std::time::Instant::now();
    let (f2, _, _) = train_scenario2(&f1, &corpus, &stacks, &bmaps, TILE, STRIDE, &cfg).unwrap();
    let stack3 = subset_stack(&city.stacks[3], sets[2]);
    let p2 = predict_full(&f2, &stack3, Some(&buildings), TILE, STRIDE).unwrap();
    println!(
        "scenario2 {:.1}s | annulus s1 {:.3} s2 {:.3}",
        t.elapsed().as_secs_f64(),
        annulus_mae(&p1, &city, 200.0, 400.0).unwrap_or(f64::NAN),
        annulus_mae(&p2, &city, 200.0, 400.0).unwrap_or(f64::NAN)
    );
}
