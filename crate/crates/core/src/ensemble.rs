//! Random-matrix checks on block-structured population covariances.
//!
//! Samples are `Σ̃ = (1/T) Ã Ãᵀ` with `Ã = L Z`, `L` the symmetric square root
//! of `Σ₀` and `Z` a K×T matrix of independent standard normals.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`). Sample `i` of a run with
//! seed `s` draws from the generator seeded with `s` on stream `i`, so every
//! sample is reproducible on its own and batches can be split across threads
//! without changing any value.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_range, try_map_range, Execution};
use crate::matrices::{mean_with_diagonal, mirror_upper, MatrixKind, SymmetricMatrix};
use crate::spectral::{eigendecompose, SpectralError, PSD_TOLERANCE};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error(
        "population covariance is not positive semidefinite (smallest eigenvalue {min_eigenvalue})"
    )]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid block spec: {0}")]
    InvalidSpec(String),

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("need at least 1 column per sample")]
    NoColumns,

    #[error("dimensions must be strictly increasing, got {0:?}")]
    NotIncreasing(Vec<usize>),

    #[error(transparent)]
    Spectral(#[from] SpectralError),

    #[error("config: {0}")]
    Config(String),
}

/// Block-diagonal population covariance with a uniform market overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_sizes: Vec<usize>,
    /// In-block covariance per block.
    pub block_values: Vec<f64>,
    /// Added to every off-diagonal entry.
    pub market_offset: f64,
    pub diagonal_value: f64,
}

impl BlockSpec {
    /// `k / block_size` blocks of equal size (the last one takes the remainder).
    pub fn equal_blocks(
        k: usize,
        block_size: usize,
        value: f64,
        offset: f64,
        diagonal: f64,
    ) -> Self {
        let block_size = block_size.clamp(1, k.max(1));
        let mut sizes = vec![block_size; k / block_size];
        let rest = k % block_size;
        if rest > 0 {
            sizes.push(rest);
        }
        BlockSpec {
            block_values: vec![value; sizes.len()],
            block_sizes: sizes,
            market_offset: offset,
            diagonal_value: diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// Block index of each instrument.
    pub fn membership(&self) -> Vec<usize> {
        self.block_sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat_n(b, n))
            .collect()
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::InvalidSpec(m));
        if self.block_sizes.is_empty() {
            return bad("no blocks".into());
        }
        if self.block_sizes.contains(&0) {
            return bad("block sizes must be positive".into());
        }
        if self.block_values.len() != self.block_sizes.len() {
            return bad(format!(
                "{} block values for {} blocks",
                self.block_values.len(),
                self.block_sizes.len()
            ));
        }
        if let Some(v) = self
            .block_values
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return bad(format!(
                "block values must be finite and non-negative, got {v}"
            ));
        }
        if !self.market_offset.is_finite() {
            return bad("market offset must be finite".into());
        }
        if !(self.diagonal_value.is_finite() && self.diagonal_value > 0.0) {
            return bad(format!(
                "diagonal must be positive, got {}",
                self.diagonal_value
            ));
        }
        Ok(())
    }
}

/// Σ₀ with `offset + b_k` inside block k, `offset` between blocks and
/// `diagonal_value` on the diagonal.
pub fn build_population(spec: &BlockSpec) -> Result<SymmetricMatrix, EnsembleError> {
    spec.validate()?;
    let member = spec.membership();
    let k = member.len();
    let m = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            spec.diagonal_value
        } else if member[i] == member[j] {
            spec.market_offset + spec.block_values[member[i]]
        } else {
            spec.market_offset
        }
    });
    let sigma = SymmetricMatrix::from_upper(MatrixKind::Covariance, m).expect("square");
    let d = eigendecompose(&sigma)?;
    if d.smallest() < -PSD_TOLERANCE * sigma.max_abs() {
        return Err(EnsembleError::NotPsd {
            min_eigenvalue: d.smallest(),
        });
    }
    Ok(sigma)
}

/// Generator for sample `stream` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws sample covariance matrices for a fixed population.
#[derive(Debug, Clone)]
pub struct WishartSampler {
    factor: DMatrix<f64>,
}

impl WishartSampler {
    pub fn new(population: &SymmetricMatrix) -> Result<Self, EnsembleError> {
        let d = eigendecompose(population)?;
        if d.dim() > 0 && d.smallest() < -PSD_TOLERANCE * population.max_abs() {
            return Err(EnsembleError::NotPsd {
                min_eigenvalue: d.smallest(),
            });
        }
        let k = d.dim();
        let u = d.eigenvectors();
        let roots = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                d.clamped_eigenvalue(i).max(0.0).sqrt()
            } else {
                0.0
            }
        });
        Ok(Self {
            factor: u * roots * u.transpose(),
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// The K×T data matrix Ã = L Z.
    pub fn sample_data(&self, t: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let k = self.dim();
        let z = DMatrix::from_fn(k, t, |_, _| StandardNormal.sample(rng));
        &self.factor * z
    }

    pub fn sample(&self, t: usize, rng: &mut ChaCha8Rng) -> SymmetricMatrix {
        let a = self.sample_data(t, rng);
        let mut s = &a * a.transpose();
        s /= t as f64;
        mirror_upper(&mut s);
        SymmetricMatrix::from_upper(MatrixKind::Covariance, s).expect("square")
    }
}

/// One sample Σ̃ = (1/T) Ã Ãᵀ, deterministic in `seed`.
pub fn sample_wishart(
    population: &SymmetricMatrix,
    t: usize,
    seed: u64,
) -> Result<SymmetricMatrix, EnsembleError> {
    if t == 0 {
        return Err(EnsembleError::NoColumns);
    }
    let sampler = WishartSampler::new(population)?;
    Ok(sampler.sample(t, &mut sample_rng(seed, 0)))
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.carry);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Shifted first and second moments per entry; shifting by the population
/// value keeps the variance estimate free of cancellation.
#[derive(Debug, Clone)]
struct MomentAccumulator {
    n: usize,
    first: Vec<CompensatedSum>,
    second: Vec<CompensatedSum>,
    scalar_first: CompensatedSum,
    scalar_second: CompensatedSum,
}

impl MomentAccumulator {
    fn new(entries: usize) -> Self {
        Self {
            n: 0,
            first: vec![CompensatedSum::default(); entries],
            second: vec![CompensatedSum::default(); entries],
            scalar_first: CompensatedSum::default(),
            scalar_second: CompensatedSum::default(),
        }
    }

    fn push(&mut self, sample: &SymmetricMatrix, shift: &DMatrix<f64>, scalar_shift: f64) {
        self.n += 1;
        for (idx, (x, c)) in sample.as_matrix().iter().zip(shift.iter()).enumerate() {
            let d = x - c;
            self.first[idx].add(d);
            self.second[idx].add(d * d);
        }
        let d = mean_with_diagonal(sample) - scalar_shift;
        self.scalar_first.add(d);
        self.scalar_second.add(d * d);
    }

    fn merge(&mut self, other: &MomentAccumulator) {
        self.n += other.n;
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            a.merge(b);
        }
        for (a, b) in self.second.iter_mut().zip(&other.second) {
            a.merge(b);
        }
        self.scalar_first.merge(&other.scalar_first);
        self.scalar_second.merge(&other.scalar_second);
    }
}

/// Mean and standard error from shifted sums.
fn mean_and_se(first: f64, second: f64, n: usize, shift: f64) -> (f64, f64) {
    let nf = n as f64;
    let mean_dev = first / nf;
    let var = ((second - first * mean_dev) / (nf - 1.0)).max(0.0);
    (shift + mean_dev, (var / nf).sqrt())
}

#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub sample_count: usize,
    pub columns: usize,
    pub population: SymmetricMatrix,
    /// Elementwise sample mean of Σ̃.
    pub mean: DMatrix<f64>,
    /// Elementwise standard error of the mean.
    pub std_error: DMatrix<f64>,
    pub max_abs_deviation: f64,
    /// Largest |mean − Σ₀| / SE over entries with a positive standard error.
    pub max_z: f64,
    /// Sample mean of ⟨cov⟩ (diagonal included) and its standard error.
    pub scalar_mean: f64,
    pub scalar_std_error: f64,
    /// (1/K²) Σ_ij Σ₀_ij.
    pub scalar_analytic: f64,
}

impl EnsembleReport {
    /// z-scores of the upper-triangle entries, diagonal included.
    pub fn z_scores(&self) -> Vec<f64> {
        let k = self.population.dim();
        let mut z = Vec::with_capacity(k * (k + 1) / 2);
        for j in 0..k {
            for i in 0..=j {
                let se = self.std_error[(i, j)];
                if se > 0.0 {
                    z.push((self.mean[(i, j)] - self.population.get(i, j)) / se);
                }
            }
        }
        z
    }

    pub fn scalar_z(&self) -> f64 {
        if self.scalar_std_error > 0.0 {
            (self.scalar_mean - self.scalar_analytic) / self.scalar_std_error
        } else {
            0.0
        }
    }
}

const CHUNK: usize = 64;

pub fn ensemble_mean_check(
    spec: &BlockSpec,
    t: usize,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleReport, EnsembleError> {
    if n_samples < 2 {
        return Err(EnsembleError::TooFewSamples(n_samples));
    }
    if t == 0 {
        return Err(EnsembleError::NoColumns);
    }
    let population = build_population(spec)?;
    ensemble_mean_for(&population, t, n_samples, seed, exec)
}

/// [`ensemble_mean_check`] for an arbitrary PSD population.
pub fn ensemble_mean_for(
    population: &SymmetricMatrix,
    t: usize,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleReport, EnsembleError> {
    if n_samples < 2 {
        return Err(EnsembleError::TooFewSamples(n_samples));
    }
    let sampler = WishartSampler::new(population)?;
    let k = population.dim();
    let shift = population.as_matrix();
    let scalar_analytic = mean_with_diagonal(population);

    let chunks = n_samples.div_ceil(CHUNK);
    let partials = map_range(chunks, exec, |c| {
        let mut acc = MomentAccumulator::new(k * k);
        for i in (c * CHUNK)..((c + 1) * CHUNK).min(n_samples) {
            let s = sampler.sample(t, &mut sample_rng(seed, i as u64));
            acc.push(&s, shift, scalar_analytic);
        }
        acc
    });
    let mut total = MomentAccumulator::new(k * k);
    for p in &partials {
        total.merge(p);
    }

    let mut mean = DMatrix::zeros(k, k);
    let mut std_error = DMatrix::zeros(k, k);
    for idx in 0..k * k {
        let (m, se) = mean_and_se(
            total.first[idx].value(),
            total.second[idx].value(),
            n_samples,
            shift[idx],
        );
        mean[idx] = m;
        std_error[idx] = se;
    }
    let mut max_abs_deviation: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    for idx in 0..k * k {
        let dev = (mean[idx] - shift[idx]).abs();
        max_abs_deviation = max_abs_deviation.max(dev);
        if std_error[idx] > 0.0 {
            max_z = max_z.max(dev / std_error[idx]);
        }
    }
    let (scalar_mean, scalar_std_error) = mean_and_se(
        total.scalar_first.value(),
        total.scalar_second.value(),
        n_samples,
        scalar_analytic,
    );
    Ok(EnsembleReport {
        sample_count: n_samples,
        columns: t,
        population: population.clone(),
        mean,
        std_error,
        max_abs_deviation,
        max_z,
        scalar_mean,
        scalar_std_error,
        scalar_analytic,
    })
}

/// Mean over entries in different blocks of `sample`, minus the market
/// offset. `None` when there is only one block.
pub fn offblock_mean(sample: &SymmetricMatrix, spec: &BlockSpec) -> Option<f64> {
    let member = spec.membership();
    let k = member.len();
    let mut sum = CompensatedSum::default();
    let mut count = 0usize;
    for j in 0..k {
        for i in 0..j {
            if member[i] != member[j] {
                sum.add(sample.get(i, j));
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum.value() / count as f64 - spec.market_offset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAveragingRow {
    pub dim: usize,
    pub blocks: usize,
    pub samples: usize,
    /// Median over seeds of |off-block mean|; `None` when not applicable.
    pub median_abs_offblock: Option<f64>,
    pub mean_abs_offblock: Option<f64>,
}

/// For each spec, draws one sample per seed and summarizes the magnitude of
/// the offset-subtracted off-block mean.
pub fn self_averaging_check(
    specs: &[BlockSpec],
    t: usize,
    n_seeds: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SelfAveragingRow>, EnsembleError> {
    let dims: Vec<usize> = specs.iter().map(BlockSpec::dim).collect();
    if dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EnsembleError::NotIncreasing(dims));
    }
    if t == 0 {
        return Err(EnsembleError::NoColumns);
    }
    specs
        .iter()
        .map(|spec| {
            let population = build_population(spec)?;
            let sampler = WishartSampler::new(&population)?;
            let values: Vec<Option<f64>> = try_map_range(n_seeds, exec, |s| {
                let sample = sampler.sample(t, &mut sample_rng(seed, s as u64));
                Ok::<_, EnsembleError>(offblock_mean(&sample, spec).map(f64::abs))
            })?;
            let mut present: Vec<f64> = values.into_iter().flatten().collect();
            present.sort_by(f64::total_cmp);
            Ok(SelfAveragingRow {
                dim: spec.dim(),
                blocks: spec.block_sizes.len(),
                samples: n_seeds,
                median_abs_offblock: median_sorted(&present),
                mean_abs_offblock: (!present.is_empty())
                    .then(|| present.iter().sum::<f64>() / present.len() as f64),
            })
        })
        .collect()
}

pub fn median_sorted(v: &[f64]) -> Option<f64> {
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Ensemble run description as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub block_sizes: Vec<usize>,
    pub block_values: Vec<f64>,
    #[serde(default)]
    pub market_offset: f64,
    #[serde(default = "default_diagonal")]
    pub diagonal_value: f64,
    #[serde(default = "default_columns")]
    pub t: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub self_averaging: Option<SelfAveragingConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfAveragingConfig {
    pub dims: Vec<usize>,
    pub block_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_diagonal() -> f64 {
    1.0
}

fn default_columns() -> usize {
    42
}

fn default_samples() -> usize {
    5000
}

fn default_seeds() -> usize {
    50
}

impl Default for EnsembleConfig {
    /// Two blocks of three, in-block 0.4, offset 0.1, unit diagonal, T = 42.
    fn default() -> Self {
        Self {
            block_sizes: vec![3, 3],
            block_values: vec![0.4, 0.4],
            market_offset: 0.1,
            diagonal_value: 1.0,
            t: default_columns(),
            n_samples: default_samples(),
            seed: 0,
            self_averaging: None,
        }
    }
}

impl EnsembleConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, EnsembleError> {
        toml::from_str(text).map_err(|e| EnsembleError::Config(e.to_string()))
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            block_sizes: self.block_sizes.clone(),
            block_values: self.block_values.clone(),
            market_offset: self.market_offset,
            diagonal_value: self.diagonal_value,
        }
    }

    /// The equal-block family for the self-averaging run, if configured. It
    /// reuses the first block value, the offset and the diagonal.
    pub fn self_averaging_specs(&self) -> Option<Vec<BlockSpec>> {
        let sa = self.self_averaging.as_ref()?;
        let value = self.block_values.first().copied().unwrap_or(0.0);
        Some(
            sa.dims
                .iter()
                .map(|&k| {
                    BlockSpec::equal_blocks(
                        k,
                        sa.block_size,
                        value,
                        self.market_offset,
                        self.diagonal_value,
                    )
                })
                .collect(),
        )
    }
}
