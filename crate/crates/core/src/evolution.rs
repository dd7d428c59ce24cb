//! Integer differential evolution with the rand/1 mutation.
//!
//! Each generation builds one trial per member as
//! `x_r1 + F * (x_r2 - x_r3)` (rounded half away from zero, then clamped),
//! with no crossover. A trial replaces its own parent only when strictly
//! fitter. Every trial is kept in the archive in evaluation order.
//!
//! Trials for a generation are drawn sequentially from a single seeded stream
//! and only then evaluated, possibly in parallel, so the outcome does not
//! depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeError<E> {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("rand/1 needs at least 4 members, population has {0}")]
    PopulationTooSmall(usize),
    #[error("fitness evaluation failed at {position:?}: {source}")]
    Fitness {
        position: Vec<i64>,
        #[source]
        source: E,
    },
    #[error("fitness returned non-finite value {value} at {position:?}")]
    NonFiniteFitness { position: Vec<i64>, value: f64 },
}

/// Inclusive integer bounds per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchBounds<const D: usize> {
    lower: [i64; D],
    upper: [i64; D],
}

impl<const D: usize> SearchBounds<D> {
    pub fn new(lower: [i64; D], upper: [i64; D]) -> Result<Self, String> {
        if let Some(d) = (0..D).find(|&d| lower[d] > upper[d]) {
            return Err(format!(
                "dimension {d}: lower bound {} exceeds upper bound {}",
                lower[d], upper[d]
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[i64; D] {
        &self.lower
    }

    pub fn upper(&self) -> &[i64; D] {
        &self.upper
    }

    pub fn contains(&self, position: &[i64; D]) -> bool {
        (0..D).all(|d| (self.lower[d]..=self.upper[d]).contains(&position[d]))
    }

    /// Round half away from zero, then clamp into the box.
    pub fn realize(&self, point: [f64; D]) -> [i64; D] {
        let mut out = [0i64; D];
        for d in 0..D {
            let lo = self.lower[d] as f64;
            let hi = self.upper[d] as f64;
            out[d] = point[d].round().clamp(lo, hi) as i64;
        }
        out
    }
}

/// How one dimension of the initial population is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitDistribution {
    /// Uniform over the dimension's inclusive bounds.
    Uniform,
    /// Normal draw, rounded and clamped into the bounds.
    Gaussian { mean: f64, std_dev: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeConfig {
    pub population_size: usize,
    pub generations: usize,
    /// Scale factor `F` of the difference vector.
    pub scale_factor: f64,
    /// `None` seeds from OS entropy.
    pub seed: Option<u64>,
    /// Worker threads for fitness evaluation; `None` uses the global pool,
    /// `Some(1)` evaluates inline.
    pub threads: Option<usize>,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            population_size: 200,
            generations: 60,
            scale_factor: 0.5,
            seed: None,
            threads: None,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.population_size < 4 {
            return Err(format!(
                "population_size must be at least 4, got {}",
                self.population_size
            ));
        }
        if self.generations == 0 {
            return Err("generations must be at least 1".into());
        }
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return Err(format!(
                "scale_factor must be positive, got {}",
                self.scale_factor
            ));
        }
        if self.threads == Some(0) {
            return Err("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        match self.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluatedMember<const D: usize> {
    pub position: [i64; D],
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeOutcome<const D: usize> {
    pub population: Vec<EvaluatedMember<D>>,
    /// Every trial, in evaluation order: `population_size * generations` entries.
    pub archive: Vec<EvaluatedMember<D>>,
    /// Best population fitness after initialization and after each generation.
    pub best_history: Vec<f64>,
}

impl<const D: usize> DeOutcome<D> {
    pub fn best(&self) -> &EvaluatedMember<D> {
        self.population
            .iter()
            .reduce(|best, m| if m.fitness > best.fitness { m } else { best })
            .expect("population is never empty")
    }

    /// Total fitness evaluations, initial population included.
    pub fn evaluations(&self) -> usize {
        self.population.len() + self.archive.len()
    }
}

pub fn initialize_population<const D: usize, R: Rng + ?Sized>(
    bounds: &SearchBounds<D>,
    size: usize,
    init: &[InitDistribution; D],
    rng: &mut R,
) -> Vec<[i64; D]> {
    (0..size)
        .map(|_| {
            let mut point = [0.0f64; D];
            for d in 0..D {
                point[d] = match init[d] {
                    InitDistribution::Uniform => {
                        rng.gen_range(bounds.lower[d]..=bounds.upper[d]) as f64
                    }
                    InitDistribution::Gaussian { mean, std_dev } => {
                        // std_dev is validated by Normal::new; degenerate specs collapse to the mean
                        Normal::new(mean, std_dev).map_or(mean, |n| n.sample(rng))
                    }
                };
            }
            bounds.realize(point)
        })
        .collect()
}

/// Distinct `r1, r2, r3`, all different from `index`.
fn pick_donors<R: Rng + ?Sized>(n: usize, index: usize, rng: &mut R) -> [usize; 3] {
    let mut picked = [usize::MAX; 3];
    let mut k = 0;
    while k < 3 {
        let r = rng.gen_range(0..n);
        if r != index && !picked[..k].contains(&r) {
            picked[k] = r;
            k += 1;
        }
    }
    picked
}

/// One rand/1 trial for member `index`.
pub fn mutate_rand1<const D: usize, R: Rng + ?Sized>(
    population: &[[i64; D]],
    index: usize,
    scale_factor: f64,
    bounds: &SearchBounds<D>,
    rng: &mut R,
) -> Result<[i64; D], DeError<std::convert::Infallible>> {
    if population.len() < 4 {
        return Err(DeError::PopulationTooSmall(population.len()));
    }
    let [r1, r2, r3] = pick_donors(population.len(), index, rng);
    Ok(combine(
        &population[r1],
        &population[r2],
        &population[r3],
        scale_factor,
        bounds,
    ))
}

/// `base + F * (a - b)`, realized into the bounds.
pub fn combine<const D: usize>(
    base: &[i64; D],
    a: &[i64; D],
    b: &[i64; D],
    scale_factor: f64,
    bounds: &SearchBounds<D>,
) -> [i64; D] {
    let mut point = [0.0f64; D];
    for d in 0..D {
        point[d] = base[d] as f64 + scale_factor * (a[d] - b[d]) as f64;
    }
    bounds.realize(point)
}

enum Executor {
    Inline,
    Global,
    Pool(rayon::ThreadPool),
}

fn evaluate_all<const D: usize, F, E>(
    positions: &[[i64; D]],
    fitness: &F,
    exec: &Executor,
) -> Result<Vec<f64>, DeError<E>>
where
    F: Fn(&[i64; D]) -> Result<f64, E> + Sync,
    E: Send,
{
    let eval = |p: &[i64; D]| -> Result<f64, DeError<E>> {
        match fitness(p) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(value) => Err(DeError::NonFiniteFitness {
                position: p.to_vec(),
                value,
            }),
            Err(source) => Err(DeError::Fitness {
                position: p.to_vec(),
                source,
            }),
        }
    };
    match exec {
        Executor::Inline => positions.iter().map(eval).collect(),
        Executor::Global => positions.par_iter().map(eval).collect(),
        Executor::Pool(pool) => pool.install(|| positions.par_iter().map(eval).collect()),
    }
}

/// Runs the optimizer, maximizing `fitness`.
pub fn run<const D: usize, F, E>(
    config: &DeConfig,
    bounds: &SearchBounds<D>,
    init: &[InitDistribution; D],
    fitness: F,
) -> Result<DeOutcome<D>, DeError<E>>
where
    F: Fn(&[i64; D]) -> Result<f64, E> + Sync,
    E: Send,
{
    config.validate().map_err(DeError::InvalidConfig)?;
    let exec = match config.threads {
        Some(1) => Executor::Inline,
        None => Executor::Global,
        Some(threads) => Executor::Pool(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| DeError::InvalidConfig(e.to_string()))?,
        ),
    };
    let mut rng = config.rng();
    let n = config.population_size;

    let mut positions = initialize_population(bounds, n, init, &mut rng);
    let mut scores = evaluate_all(&positions, &fitness, &exec)?;
    let best_of = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best_history = Vec::with_capacity(config.generations + 1);
    best_history.push(best_of(&scores));
    let mut archive = Vec::with_capacity(n * config.generations);

    for generation in 0..config.generations {
        let trials: Vec<[i64; D]> = (0..n)
            .map(|i| {
                let [r1, r2, r3] = pick_donors(n, i, &mut rng);
                combine(
                    &positions[r1],
                    &positions[r2],
                    &positions[r3],
                    config.scale_factor,
                    bounds,
                )
            })
            .collect();
        let trial_scores = evaluate_all(&trials, &fitness, &exec)?;
        for (i, (trial, score)) in trials.into_iter().zip(trial_scores).enumerate() {
            archive.push(EvaluatedMember {
                position: trial,
                fitness: score,
            });
            if score > scores[i] {
                positions[i] = trial;
                scores[i] = score;
            }
        }
        best_history.push(best_of(&scores));
        tracing::trace!(
            generation,
            best = best_history[generation + 1],
            "de generation"
        );
    }

    let population = positions
        .into_iter()
        .zip(scores)
        .map(|(position, fitness)| EvaluatedMember { position, fitness })
        .collect();
    Ok(DeOutcome {
        population,
        archive,
        best_history,
    })
}
