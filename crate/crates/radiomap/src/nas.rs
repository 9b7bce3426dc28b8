//! Evolutionary architecture search over the fixed encoder-decoder skeleton.
//!
//! The macro topology never changes; the search picks one operation per slot:
//! convolutions of kernel 3, 5 or 7 at the conv slots, average or max pooling
//! (filter 4) at the stage boundaries. Selection follows aging evolution: the
//! best-ranked genome is mutated, the child is trained and inserted, and the
//! worst-ranked member (ties toward the oldest) is removed to keep the
//! population size fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::nn::{PoolKind, UNetModel};

#[derive(Debug, Error)]
pub enum NasError {
    #[error("genome has {got} genes, skeleton expects {want}")]
    GenomeLength { got: usize, want: usize },
    #[error("gene {slot} ({op:?}) is illegal at a {kind:?} slot")]
    IllegalGene {
        slot: usize,
        op: OpChoice,
        kind: SlotKind,
    },
    #[error("population member {0} has no fitness (not trained)")]
    Untrained(usize),
    #[error("population is empty")]
    EmptyPopulation,
}

/// Candidate operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum OpChoice {
    Conv3,
    Conv5,
    Conv7,
    #[serde(rename = "avgpool4")]
    AvgPool4,
    #[serde(rename = "maxpool4")]
    MaxPool4,
}

impl OpChoice {
    pub fn kernel(self) -> Option<usize> {
        match self {
            OpChoice::Conv3 => Some(3),
            OpChoice::Conv5 => Some(5),
            OpChoice::Conv7 => Some(7),
            _ => None,
        }
    }

    pub fn pool(self) -> Option<PoolKind> {
        match self {
            OpChoice::AvgPool4 => Some(PoolKind::Avg),
            OpChoice::MaxPool4 => Some(PoolKind::Max),
            _ => None,
        }
    }
}

/// What a searchable slot accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Conv,
    Pool,
}

impl SlotKind {
    pub fn legal_ops(self) -> &'static [OpChoice] {
        match self {
            SlotKind::Conv => &[OpChoice::Conv3, OpChoice::Conv5, OpChoice::Conv7],
            SlotKind::Pool => &[OpChoice::AvgPool4, OpChoice::MaxPool4],
        }
    }
}

/// The fixed macro skeleton: 4 encoder stages (conv slot + pool slot each)
/// and 4 decoder stages (conv slot each, after a fixed x2 upsample and skip
/// concatenation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub slots: Vec<SlotKind>,
    pub widths: [usize; 4],
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::with_widths([32, 64, 128, 256])
    }
}

impl Skeleton {
    pub fn with_widths(widths: [usize; 4]) -> Self {
        let mut slots = Vec::with_capacity(12);
        for _ in 0..4 {
            slots.push(SlotKind::Conv);
            slots.push(SlotKind::Pool);
        }
        for _ in 0..4 {
            slots.push(SlotKind::Conv);
        }
        Skeleton { slots, widths }
    }

    pub fn node_count(&self) -> usize {
        self.slots.len()
    }
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchGenome {
    pub genes: Vec<OpChoice>,
    /// Generations survived.
    pub age: u32,
    /// Validation error in dB; lower is better. `None` until trained.
    pub fitness: Option<f64>,
}

impl ArchGenome {
    pub fn validate(&self, skeleton: &Skeleton) -> Result<(), NasError> {
        if self.genes.len() != skeleton.node_count() {
            return Err(NasError::GenomeLength {
                got: self.genes.len(),
                want: skeleton.node_count(),
            });
        }
        for (slot, (&op, &kind)) in self.genes.iter().zip(&skeleton.slots).enumerate() {
            if !kind.legal_ops().contains(&op) {
                return Err(NasError::IllegalGene { slot, op, kind });
            }
        }
        Ok(())
    }

    /// FNV-1a over the gene sequence, for deriving per-candidate rng streams.
    pub fn hash64(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &g in &self.genes {
            h ^= g as u64 + 1;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// Draw a genome uniformly over the legal ops of every slot.
pub fn random_genome(skeleton: &Skeleton, rng: &mut ChaCha12Rng) -> ArchGenome {
    let genes = skeleton
        .slots
        .iter()
        .map(|kind| {
            let ops = kind.legal_ops();
            ops[rng.random_range(0..ops.len())]
        })
        .collect();
    ArchGenome {
        genes,
        age: 0,
        fitness: None,
    }
}

/// Resample one uniformly chosen gene to a different legal op.
pub fn mutate(parent: &ArchGenome, skeleton: &Skeleton, rng: &mut ChaCha12Rng) -> ArchGenome {
    let slot = rng.random_range(0..skeleton.node_count());
    let ops: Vec<OpChoice> = skeleton.slots[slot]
        .legal_ops()
        .iter()
        .copied()
        .filter(|&op| op != parent.genes[slot])
        .collect();
    let mut genes = parent.genes.clone();
    genes[slot] = ops[rng.random_range(0..ops.len())];
    ArchGenome {
        genes,
        age: 0,
        fitness: None,
    }
}

/// Instantiate the model a genome describes.
pub fn build_model(
    genome: &ArchGenome,
    skeleton: &Skeleton,
    in_channels: usize,
    rng: &mut ChaCha12Rng,
) -> Result<UNetModel, NasError> {
    genome.validate(skeleton)?;
    let mut enc_kernels = [3usize; 4];
    let mut pools = [PoolKind::Avg; 4];
    let mut dec_kernels = [3usize; 4];
    for s in 0..4 {
        enc_kernels[s] = genome.genes[2 * s].kernel().expect("validated conv slot");
        pools[s] = genome.genes[2 * s + 1].pool().expect("validated pool slot");
        dec_kernels[s] = genome.genes[8 + s].kernel().expect("validated conv slot");
    }
    Ok(UNetModel::new(
        in_channels,
        skeleton.widths,
        enc_kernels,
        pools,
        dec_kernels,
        rng,
    ))
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

/// Ranking metric over validation pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Mae,
    Nmae,
}

/// Mean absolute error over the masked pixels.
pub fn masked_mae(pred: &Grid<f32>, target: &Grid<f32>, mask: &Grid<u8>) -> Option<f64> {
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for i in 0..mask.data.len() {
        if mask.data[i] != 0 {
            acc += (pred.data[i] as f64 - target.data[i] as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(acc / n as f64)
    }
}

/// Distance-weighted MAE: pixel errors weighted by `weights` (the normalized
/// distance channel) and renormalized by the total weight.
pub fn masked_nmae(
    pred: &Grid<f32>,
    target: &Grid<f32>,
    mask: &Grid<u8>,
    weights: &Grid<f32>,
) -> Option<f64> {
    let mut acc = 0.0f64;
    let mut wsum = 0.0f64;
    for i in 0..mask.data.len() {
        if mask.data[i] != 0 {
            let w = weights.data[i] as f64;
            acc += w * (pred.data[i] as f64 - target.data[i] as f64).abs();
            wsum += w;
        }
    }
    if wsum > 0.0 {
        Some(acc / wsum)
    } else {
        None
    }
}

/// Indices of the population ordered best to worst: ascending fitness, ties
/// by lower age, then by insertion order.
pub fn rank(population: &[ArchGenome]) -> Result<Vec<usize>, NasError> {
    if population.is_empty() {
        return Err(NasError::EmptyPopulation);
    }
    for (i, g) in population.iter().enumerate() {
        if g.fitness.is_none() {
            return Err(NasError::Untrained(i));
        }
    }
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = population[a].fitness.unwrap();
        let fb = population[b].fitness.unwrap();
        fa.partial_cmp(&fb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(population[a].age.cmp(&population[b].age))
            .then(a.cmp(&b))
    });
    Ok(order)
}

// ---------------------------------------------------------------------------
// Aging evolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub metric: Metric,
    pub seed: u64,
    /// Training epochs per candidate during the search.
    pub budget_epochs: usize,
    /// Accepted for compatibility; candidate evaluation runs serialized so
    /// searches stay reproducible (inner training is already parallel).
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 20,
            generations: 25,
            metric: Metric::Mae,
            seed: 0,
            budget_epochs: 2,
            workers: 1,
        }
    }
}

/// One evaluated candidate in the search log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub generation: usize,
    pub genes: Vec<OpChoice>,
    pub fitness: f64,
    pub population_size: usize,
    pub best_so_far: f64,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: ArchGenome,
    pub history: Vec<HistoryEntry>,
    pub population: Vec<ArchGenome>,
}

/// Run aging evolution. `evaluate` trains a candidate and returns its
/// validation fitness; failures are logged as +inf fitness and the search
/// continues. The evaluation seed is derived from `(config.seed, genome)`.
pub fn evolve<F>(
    skeleton: &Skeleton,
    config: &SearchConfig,
    mut evaluate: F,
) -> Result<SearchOutcome, NasError>
where
    F: FnMut(&ArchGenome, u64) -> Result<f64, String>,
{
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut population: Vec<ArchGenome> = Vec::with_capacity(config.population);
    let mut history = Vec::new();
    let mut best: Option<ArchGenome> = None;

    let eval_into = |genome: &mut ArchGenome,
                         generation: usize,
                         population_len: usize,
                         best: &mut Option<ArchGenome>,
                         history: &mut Vec<HistoryEntry>,
                         evaluate: &mut F| {
        let seed = crate::tiles::mix_seed(config.seed, genome.hash64());
        let fitness = match evaluate(genome, seed) {
            Ok(f) if f.is_finite() => f,
            Ok(_) => f64::INFINITY,
            Err(_) => f64::INFINITY,
        };
        genome.fitness = Some(fitness);
        let improved = best
            .as_ref()
            .map(|b| fitness < b.fitness.unwrap())
            .unwrap_or(true);
        if improved {
            *best = Some(genome.clone());
        }
        history.push(HistoryEntry {
            generation,
            genes: genome.genes.clone(),
            fitness,
            population_size: population_len,
            best_so_far: best.as_ref().unwrap().fitness.unwrap(),
        });
    };

    for _ in 0..config.population {
        let mut g = random_genome(skeleton, &mut rng);
        eval_into(&mut g, 0, population.len() + 1, &mut best, &mut history, &mut evaluate);
        population.push(g);
    }

    for generation in 1..=config.generations {
        let order = rank(&population)?;
        let parent = population[order[0]].clone();
        let mut child = mutate(&parent, skeleton, &mut rng);
        eval_into(
            &mut child,
            generation,
            population.len() + 1,
            &mut best,
            &mut history,
            &mut evaluate,
        );
        population.push(child);
        while population.len() > config.population {
            let order = rank(&population)?;
            // Worst fitness; ties resolved toward the oldest member.
            let worst_fitness = population[*order.last().unwrap()].fitness.unwrap();
            let victim = population
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    let f = g.fitness.unwrap();
                    f == worst_fitness || (f.is_infinite() && worst_fitness.is_infinite())
                })
                .max_by_key(|(i, g)| (g.age, usize::MAX - i))
                .map(|(i, _)| i)
                .unwrap();
            population.remove(victim);
        }
        for g in population.iter_mut() {
            g.age += 1;
        }
    }

    Ok(SearchOutcome {
        best: best.ok_or(NasError::EmptyPopulation)?,
        history,
        population,
    })
}
