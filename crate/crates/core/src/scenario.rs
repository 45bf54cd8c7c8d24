//! Normal operating data: country-level load profiles mixed onto load buses,
//! economic dispatch, DC flows, measurement noise and time-ordered splits.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimation::{EstimationError, NoiseModel};
use crate::grid::{check_balance, DcGrid, FeatureLayout, GridError};
use crate::seeds;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing data at row {row}, column {column}")]
    MissingData { row: usize, column: String },
    #[error("negative load {value} at row {row}, column {column}")]
    NonnegativityViolation { row: usize, column: String, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("format version mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("checksum mismatch: metadata {expected}, file {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("splits need {needed} hours but the source has {available}")]
    SplitTooLarge { needed: usize, available: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Hourly load series per country (rows are hours), in MW.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfileSource {
    pub series: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    /// Hour of day of the first row.
    pub first_hour_of_day: usize,
}

impl LoadProfileSource {
    pub fn hours(&self) -> usize {
        self.series.len()
    }

    pub fn n_countries(&self) -> usize {
        self.labels.len()
    }
}

/// Reads a load-source CSV: a header row, then one row per hour whose first
/// column is an ISO timestamp or hour index and whose remaining columns are
/// per-country loads in MW.
pub fn ingest_load_csv(
    path: &Path,
    expected_columns: Option<usize>,
) -> Result<LoadProfileSource, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| ScenarioError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(ScenarioError::Parse {
            line: 1,
            message: "need a time column and at least one load column".into(),
        });
    }
    let labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if let Some(n) = expected_columns {
        if labels.len() != n {
            return Err(ScenarioError::DimensionMismatch {
                expected: n,
                got: labels.len(),
            });
        }
    }

    let mut series = Vec::new();
    let mut first_hour_of_day = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| ScenarioError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(ScenarioError::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        if i == 0 {
            first_hour_of_day = hour_of_day(&record[0]);
        }
        let mut row = Vec::with_capacity(labels.len());
        for (j, cell) in record.iter().skip(1).enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                return Err(ScenarioError::MissingData {
                    row: line,
                    column: labels[j].clone(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| ScenarioError::Parse {
                line,
                message: format!("invalid number `{cell}` in column {}", labels[j]),
            })?;
            if v < 0.0 {
                return Err(ScenarioError::NonnegativityViolation {
                    row: line,
                    column: labels[j].clone(),
                    value: v,
                });
            }
            row.push(v);
        }
        series.push(row);
    }
    Ok(LoadProfileSource {
        series,
        labels,
        first_hour_of_day,
    })
}

/// Hour of day from `YYYY-MM-DDTHH...` / `YYYY-MM-DD HH...`, or from a plain
/// hour index.
fn hour_of_day(cell: &str) -> usize {
    if let Ok(idx) = cell.parse::<usize>() {
        return idx % 24;
    }
    cell.get(11..13)
        .filter(|_| matches!(cell.as_bytes().get(10), Some(b'T' | b' ')))
        .and_then(|h| h.parse::<usize>().ok())
        .map_or(0, |h| h % 24)
}

/// Deterministic offline stand-in for historical national load data.
///
/// Each country's series is a base level (log-spaced across countries between
/// 5 GW and 50 GW) modulated by daily, weekly and annual cycles and multiplied
/// by lognormal noise.
pub fn synthesize_load_source(hours: usize, n_countries: usize, seed: u64) -> LoadProfileSource {
    use std::f64::consts::TAU;
    let mut rng = seeds::rng(seeds::child_seed(seed, "load-source"));
    struct Country {
        base: f64,
        daily_amp: f64,
        daily_peak: f64,
        morning_amp: f64,
        weekend_dip: f64,
        annual_amp: f64,
        annual_phase: f64,
        noise: f64,
    }
    let countries: Vec<Country> = (0..n_countries)
        .map(|k| {
            let frac = if n_countries > 1 {
                k as f64 / (n_countries - 1) as f64
            } else {
                0.5
            };
            Country {
                base: 5_000.0 * 10f64.powf(frac),
                daily_amp: rng.random_range(0.12..0.20),
                daily_peak: rng.random_range(16.0..20.0),
                morning_amp: rng.random_range(0.03..0.07),
                weekend_dip: rng.random_range(0.04..0.10),
                annual_amp: rng.random_range(0.06..0.14),
                annual_phase: rng.random_range(-0.3..0.3),
                noise: rng.random_range(0.015..0.03),
            }
        })
        .collect();

    let series = (0..hours)
        .map(|h| {
            let mut hr = seeds::indexed_rng(seed, "load-source-noise", h as u64);
            let t = h as f64;
            let day = (h / 24) % 7;
            countries
                .iter()
                .map(|c| {
                    let daily = c.daily_amp * (TAU * (t - c.daily_peak) / 24.0).cos()
                        + c.morning_amp * (2.0 * TAU * (t - 9.0) / 24.0).cos();
                    let weekly = if day >= 5 { -c.weekend_dip } else { 0.0 };
                    let annual = c.annual_amp * (TAU * t / 8760.0 + c.annual_phase).cos();
                    let eps: f64 = hr.sample(StandardNormal);
                    let shape = (1.0 + daily + weekly + annual).max(0.05);
                    c.base * shape * (c.noise * eps - 0.5 * c.noise * c.noise).exp()
                })
                .collect()
        })
        .collect();
    LoadProfileSource {
        series,
        labels: (1..=n_countries).map(|k| format!("C{k:02}")).collect(),
        first_hour_of_day: 0,
    }
}

/// Per-load convex weights over the country series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadMapping {
    pub weights: Vec<Vec<f64>>,
    /// Divisor applied to the source series.
    pub scale: f64,
}

pub const DEFAULT_SOURCE_SCALE: f64 = 1000.0;

/// Draws each load's weights from a flat Dirichlet(1, ..., 1), i.e. uniformly
/// on the simplex, by normalizing i.i.d. Exp(1) variates.
pub fn sample_load_mapping(n_loads: usize, n_countries: usize, seed: u64) -> LoadMapping {
    let mut rng = seeds::rng(seeds::child_seed(seed, "load-mapping"));
    let weights = (0..n_loads)
        .map(|_| {
            let e: Vec<f64> = (0..n_countries).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|x| x / total).collect()
        })
        .collect();
    LoadMapping {
        weights,
        scale: DEFAULT_SOURCE_SCALE,
    }
}

/// Deterministic per-hour mixture `sum_k w(l,k) * series(t,k) / scale`.
pub fn mix_loads(source: &LoadProfileSource, mapping: &LoadMapping, hour: usize) -> Vec<f64> {
    let row = &source.series[hour];
    mapping
        .weights
        .iter()
        .map(|w| w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / mapping.scale)
        .collect()
}

/// Bus-level loads for one hour with relative Gaussian variation, floored at 0.
pub fn bus_loads_for_hour(
    source: &LoadProfileSource,
    mapping: &LoadMapping,
    variation_std: f64,
    seed: u64,
    hour: usize,
) -> Vec<f64> {
    let mut rng = seeds::indexed_rng(seed, "load-variation", hour as u64);
    mix_loads(source, mapping, hour)
        .into_iter()
        .map(|m| {
            let eps: f64 = if variation_std > 0.0 {
                variation_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (m * (1.0 + eps)).max(0.0)
        })
        .collect()
}

/// Bus loads for every hour of the source (`T x N`).
pub fn synthesize_bus_loads(
    source: &LoadProfileSource,
    mapping: &LoadMapping,
    variation_std: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ScenarioError> {
    check_mapping(source, mapping)?;
    Ok((0..source.hours())
        .into_par_iter()
        .map(|t| bus_loads_for_hour(source, mapping, variation_std, seed, t))
        .collect())
}

fn check_mapping(source: &LoadProfileSource, mapping: &LoadMapping) -> Result<(), ScenarioError> {
    for w in &mapping.weights {
        if w.len() != source.n_countries() {
            return Err(ScenarioError::DimensionMismatch {
                expected: source.n_countries(),
                got: w.len(),
            });
        }
    }
    Ok(())
}

/// Quadratic generation costs `c2 * P^2 + c1 * P` per generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c2: Vec<f64>,
    pub c1: Vec<f64>,
}

pub const C2_RANGE: (f64, f64) = (0.085, 0.1225);
pub const C1_RANGE: (f64, f64) = (1.0, 5.0);

impl CostModel {
    pub fn sample(n_generators: usize, rng: &mut impl Rng) -> Self {
        let mut c2 = Vec::with_capacity(n_generators);
        let mut c1 = Vec::with_capacity(n_generators);
        for _ in 0..n_generators {
            c2.push(rng.random_range(C2_RANGE.0..=C2_RANGE.1));
            c1.push(rng.random_range(C1_RANGE.0..=C1_RANGE.1));
        }
        Self { c2, c1 }
    }

    pub fn cost(&self, generation: &[f64]) -> f64 {
        generation
            .iter()
            .zip(self.c2.iter().zip(&self.c1))
            .map(|(p, (a, b))| a * p * p + b * p)
            .sum()
    }
}

/// Equal-incremental-cost dispatch without generator limits:
/// `P_g = (lambda - c1_g) / (2 c2_g)` with `lambda` chosen so that the
/// generations sum to `total_load`. Returns the generations and `lambda`.
pub fn economic_dispatch(cost: &CostModel, total_load: f64) -> (Vec<f64>, f64) {
    let inv: Vec<f64> = cost.c2.iter().map(|c| 0.5 / c).collect();
    let sum_inv: f64 = inv.iter().sum();
    let offset: f64 = cost.c1.iter().zip(&inv).map(|(c1, i)| c1 * i).sum();
    let lambda = (total_load + offset) / sum_inv;
    let mut p: Vec<f64> = cost
        .c1
        .iter()
        .zip(&inv)
        .map(|(c1, i)| (lambda - c1) * i)
        .collect();
    // absorb round-off so the balance holds to machine precision
    let residual = total_load - p.iter().sum::<f64>();
    for (pg, i) in p.iter_mut().zip(&inv) {
        *pg += residual * i / sum_inv;
    }
    (p, lambda)
}

/// One hour of loads, generations and branch flows, all in MW.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingSnapshot {
    pub loads: Vec<f64>,
    pub generations: Vec<f64>,
    pub flows: Vec<f64>,
    pub hour: usize,
}

impl OperatingSnapshot {
    /// Feature vector in fixed order: loads, generations, flows.
    pub fn to_features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.loads.len() + self.generations.len() + self.flows.len());
        v.extend_from_slice(&self.loads);
        v.extend_from_slice(&self.generations);
        v.extend_from_slice(&self.flows);
        v
    }

    pub fn from_features(
        layout: &FeatureLayout,
        features: &[f64],
        hour: usize,
    ) -> Result<Self, ScenarioError> {
        if features.len() != layout.dim() {
            return Err(ScenarioError::DimensionMismatch {
                expected: layout.dim(),
                got: features.len(),
            });
        }
        let (l, g, f) = layout.split(features);
        Ok(Self {
            loads: l.to_vec(),
            generations: g.to_vec(),
            flows: f.to_vec(),
            hour,
        })
    }
}

/// Builds a snapshot from balanced loads and generations; flows via PTDF.
pub fn assemble_snapshot(
    grid: &DcGrid,
    loads: &[f64],
    generations: &[f64],
    hour: usize,
) -> Result<OperatingSnapshot, ScenarioError> {
    let layout = &grid.layout;
    if loads.len() != layout.n_loads() {
        return Err(ScenarioError::DimensionMismatch {
            expected: layout.n_loads(),
            got: loads.len(),
        });
    }
    if generations.len() != layout.n_generators() {
        return Err(ScenarioError::DimensionMismatch {
            expected: layout.n_generators(),
            got: generations.len(),
        });
    }
    let imbalance = generations.iter().sum::<f64>() - loads.iter().sum::<f64>();
    if imbalance.abs() > 1e-6 {
        return Err(GridError::UnbalancedInjections { sum: imbalance }.into());
    }
    let injections = layout.injections(loads, generations);
    check_balance(&injections)?;
    let flows = grid.ptdf.flows_slice(&injections);
    Ok(OperatingSnapshot {
        loads: loads.to_vec(),
        generations: generations.to_vec(),
        flows,
        hour,
    })
}

/// Adds truncated relative Gaussian noise: `e ~ N(0, (rel_std |v|)^2)`
/// conditioned on `|e| < rel_cap |v|`, sampled by rejection. Zero features
/// stay zero.
pub fn add_measurement_noise(
    features: &[f64],
    rel_std: f64,
    rel_cap: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(rel_cap > 0.0, "rel_cap must be positive");
    features
        .iter()
        .map(|&v| {
            let sd = rel_std * v.abs();
            if sd == 0.0 {
                return v;
            }
            let cap = rel_cap * v.abs();
            loop {
                let e = sd * rng.sample::<f64, _>(StandardNormal);
                if e.abs() < cap {
                    return v + e;
                }
            }
        })
        .collect()
}

/// Seeded form of [`add_measurement_noise`].
pub fn add_measurement_noise_seeded(
    features: &[f64],
    rel_std: f64,
    rel_cap: f64,
    seed: u64,
) -> Vec<f64> {
    add_measurement_noise(features, rel_std, rel_cap, &mut seeds::rng(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// 60/20/20 split of `hours`.
    pub fn proportional(hours: usize) -> Self {
        let validation = hours / 5;
        let test = hours / 5;
        Self {
            train: hours - validation - test,
            validation,
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub variation_std: f64,
    pub noise_rel_std: f64,
    pub noise_rel_cap: f64,
    pub splits: SplitSizes,
    /// Draw new cost coefficients every hour instead of once per run.
    pub resample_costs_per_hour: bool,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(splits: SplitSizes, seed: u64) -> Self {
        Self {
            variation_std: 0.05,
            noise_rel_std: 0.0033,
            noise_rel_cap: 0.01,
            splits,
            resample_costs_per_hour: false,
            seed,
        }
    }
}

/// Per-hour generator for normal operating snapshots.
pub struct ScenarioGenerator<'a> {
    pub grid: &'a DcGrid,
    pub source: &'a LoadProfileSource,
    pub mapping: &'a LoadMapping,
    pub config: &'a ScenarioConfig,
    pub costs: CostModel,
}

impl<'a> ScenarioGenerator<'a> {
    pub fn new(
        grid: &'a DcGrid,
        source: &'a LoadProfileSource,
        mapping: &'a LoadMapping,
        config: &'a ScenarioConfig,
    ) -> Result<Self, ScenarioError> {
        check_mapping(source, mapping)?;
        if mapping.weights.len() != grid.layout.n_loads() {
            return Err(ScenarioError::DimensionMismatch {
                expected: grid.layout.n_loads(),
                got: mapping.weights.len(),
            });
        }
        if !(config.noise_rel_cap > 0.0) || config.noise_rel_std < 0.0 || config.variation_std < 0.0 {
            return Err(ScenarioError::InvalidParameter(
                "noise_rel_cap must be > 0 and standard deviations >= 0".into(),
            ));
        }
        let costs = CostModel::sample(
            grid.layout.n_generators(),
            &mut seeds::rng(seeds::child_seed(config.seed, "costs")),
        );
        Ok(Self {
            grid,
            source,
            mapping,
            config,
            costs,
        })
    }

    fn costs_for_hour(&self, hour: usize) -> std::borrow::Cow<'_, CostModel> {
        if self.config.resample_costs_per_hour {
            std::borrow::Cow::Owned(CostModel::sample(
                self.grid.layout.n_generators(),
                &mut seeds::indexed_rng(self.config.seed, "costs-hourly", hour as u64),
            ))
        } else {
            std::borrow::Cow::Borrowed(&self.costs)
        }
    }

    /// Noise-free snapshot for source hour `hour`.
    pub fn clean_snapshot(&self, hour: usize) -> Result<OperatingSnapshot, ScenarioError> {
        let loads = bus_loads_for_hour(
            self.source,
            self.mapping,
            self.config.variation_std,
            self.config.seed,
            hour,
        );
        let total: f64 = loads.iter().sum();
        let (gens, _) = economic_dispatch(&self.costs_for_hour(hour), total);
        assemble_snapshot(self.grid, &loads, &gens, hour)
    }

    /// Measured (noisy) feature vector for source hour `hour`.
    pub fn noisy_features(&self, snapshot: &OperatingSnapshot) -> Vec<f64> {
        let mut rng = seeds::indexed_rng(self.config.seed, "measurement-noise", snapshot.hour as u64);
        add_measurement_noise(
            &snapshot.to_features(),
            self.config.noise_rel_std,
            self.config.noise_rel_cap,
            &mut rng,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: u64,
    pub splits: SplitSizes,
    /// Source hour index of the first row.
    pub start_hour: usize,
    pub first_hour_of_day: usize,
    pub case_sha256: String,
    pub feature_names: Vec<String>,
    pub source_scale: f64,
    pub variation_std: f64,
    pub noise_rel_std: f64,
    pub noise_rel_cap: f64,
    pub resample_costs_per_hour: bool,
    pub cost_model: CostModel,
    pub negative_generation_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Time-ordered train/validation/test feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Vec<f64>>,
    pub validation: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
    pub metadata: DatasetMetadata,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Vec<f64>] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Source hour index of row `i` of `split`.
    pub fn hour_index(&self, split: Split, i: usize) -> usize {
        let offset = match split {
            Split::Train => 0,
            Split::Validation => self.train.len(),
            Split::Test => self.train.len() + self.validation.len(),
        };
        self.metadata.start_hour + offset + i
    }

    pub fn hour_of_day(&self, split: Split, i: usize) -> usize {
        (self.metadata.first_hour_of_day + self.hour_index(split, i)) % 24
    }

    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

pub fn case_checksum(grid: &DcGrid) -> String {
    hex::encode(Sha256::digest(grid.network.to_case_string().as_bytes()))
}

/// Generates one snapshot per hour and splits the series in time order.
pub fn build_dataset(
    grid: &DcGrid,
    source: &LoadProfileSource,
    mapping: &LoadMapping,
    config: &ScenarioConfig,
) -> Result<Dataset, ScenarioError> {
    let total = config.splits.total();
    if total > source.hours() {
        return Err(ScenarioError::SplitTooLarge {
            needed: total,
            available: source.hours(),
        });
    }
    let generator = ScenarioGenerator::new(grid, source, mapping, config)?;
    let rows = (0..total)
        .into_par_iter()
        .map(|t| {
            let snap = generator.clean_snapshot(t)?;
            let negative = snap.generations.iter().filter(|g| **g < 0.0).count();
            Ok((generator.noisy_features(&snap), negative))
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let negative_generation_count = rows.iter().map(|r| r.1).sum();
    let mut rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.0).collect();
    let test = rows.split_off(config.splits.train + config.splits.validation);
    let validation = rows.split_off(config.splits.train);
    let train = rows;

    let cost_model = if config.resample_costs_per_hour {
        CostModel {
            c2: Vec::new(),
            c1: Vec::new(),
        }
    } else {
        generator.costs.clone()
    };
    Ok(Dataset {
        train,
        validation,
        test,
        metadata: DatasetMetadata {
            seed: config.seed,
            splits: config.splits,
            start_hour: 0,
            first_hour_of_day: source.first_hour_of_day,
            case_sha256: case_checksum(grid),
            feature_names: grid.layout.names.clone(),
            source_scale: mapping.scale,
            variation_std: config.variation_std,
            noise_rel_std: config.noise_rel_std,
            noise_rel_cap: config.noise_rel_cap,
            resample_costs_per_hour: config.resample_costs_per_hour,
            cost_model,
            negative_generation_count,
        },
    })
}

/// Nodal noise model implied by relative feature noise: an injection's
/// variance is the sum of its devices' variances, averaged over `rows`.
/// Standard deviations are floored at 1e-3 of their median so that
/// zero-injection buses keep a finite weight.
pub fn nodal_noise_model(
    layout: &FeatureLayout,
    rows: &[Vec<f64>],
    rel_std: f64,
) -> Result<NoiseModel, ScenarioError> {
    if rows.is_empty() || !(rel_std > 0.0) {
        return Err(ScenarioError::InvalidParameter(
            "noise model needs rows and rel_std > 0".into(),
        ));
    }
    let mut var = vec![0.0; layout.n_measurements()];
    for row in rows {
        let (loads, gens, flows) = layout.split(row);
        for (&l, &b) in loads.iter().zip(&layout.load_buses) {
            var[b] += l * l;
        }
        for (&g, &b) in gens.iter().zip(&layout.generator_buses) {
            var[b] += g * g;
        }
        for (t, f) in flows.iter().enumerate() {
            var[layout.n_buses + t] += f * f;
        }
    }
    let n = rows.len() as f64;
    let mut sd: Vec<f64> = var.iter().map(|v| rel_std * (v / n).sqrt()).collect();
    let mut sorted = sd.clone();
    sorted.sort_by(f64::total_cmp);
    let floor = (sorted[sorted.len() / 2] * 1e-3).max(f64::MIN_POSITIVE);
    for s in &mut sd {
        *s = s.max(floor);
    }
    Ok(NoiseModel::new(sd)?)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    data_sha256: String,
    metadata: DatasetMetadata,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn dataset_csv(ds: &Dataset) -> String {
    let mut s = String::from("hour");
    for n in &ds.metadata.feature_names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (i, row) in ds.rows().enumerate() {
        let _ = write!(s, "{}", ds.metadata.start_hour + i);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Writes the dataset CSV and its JSON metadata sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), ScenarioError> {
    let csv = dataset_csv(ds);
    let sidecar = Sidecar {
        format_version: DATASET_FORMAT_VERSION,
        data_sha256: hex::encode(Sha256::digest(csv.as_bytes())),
        metadata: ds.metadata.clone(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| ScenarioError::InvalidParameter(e.to_string()))?;
    json.push('\n');
    write_file(path, csv.as_bytes())?;
    write_file(&sidecar_path(path), json.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ScenarioError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, ScenarioError> {
    let meta_path = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&meta_text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        message: format!("{}: {e}", meta_path.display()),
    })?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(DATASET_FORMAT_VERSION) => {}
        other => {
            return Err(ScenarioError::FormatVersionMismatch(format!(
                "metadata version {other:?}, expected {DATASET_FORMAT_VERSION}"
            )))
        }
    }
    let sidecar: Sidecar = serde_json::from_value(raw).map_err(|e| ScenarioError::Parse {
        line: 0,
        message: format!("{}: {e}", meta_path.display()),
    })?;
    let meta = sidecar.metadata;

    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut expected = String::from("hour");
    for n in &meta.feature_names {
        expected.push(',');
        expected.push_str(n);
    }
    if header != expected {
        return Err(ScenarioError::FormatVersionMismatch(
            "dataset header does not match the metadata feature names".into(),
        ));
    }

    let dim = meta.feature_names.len();
    let mut rows = Vec::with_capacity(meta.splits.total());
    for (i, line) in lines.enumerate() {
        let row_index = i + 1;
        let mut fields = line.split(',');
        let hour = fields.next().unwrap_or("");
        if hour.parse::<usize>().ok() != Some(meta.start_hour + i) {
            return Err(ScenarioError::Parse {
                line: row_index,
                message: format!("unexpected hour index `{hour}`"),
            });
        }
        let row = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| ScenarioError::Parse {
                line: row_index,
                message: e.to_string(),
            })?;
        if row.len() != dim {
            return Err(ScenarioError::Parse {
                line: row_index,
                message: format!("expected {dim} values, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.len() != meta.splits.total() {
        return Err(ScenarioError::Parse {
            line: rows.len() + 1,
            message: format!("expected {} rows, found {}", meta.splits.total(), rows.len()),
        });
    }
    let actual = hex::encode(Sha256::digest(text.as_bytes()));
    if actual != sidecar.data_sha256 {
        return Err(ScenarioError::ChecksumMismatch {
            expected: sidecar.data_sha256,
            actual,
        });
    }
    let test = rows.split_off(meta.splits.train + meta.splits.validation);
    let validation = rows.split_off(meta.splits.train);
    Ok(Dataset {
        train: rows,
        validation,
        test,
        metadata: meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, NetworkModel};

    pub(crate) fn small_grid() -> DcGrid {
        DcGrid::new(
            NetworkModel::new(
                5,
                vec![
                    Branch::new(0, 1, 0.1),
                    Branch::new(0, 2, 0.25),
                    Branch::new(1, 2, 0.2),
                    Branch::new(1, 3, 0.15),
                    Branch::new(2, 3, 0.3),
                    Branch::new(3, 4, 0.05),
                    Branch::new(2, 4, 0.4),
                ],
                2,
                vec![0, 3],
                vec![1, 2, 4],
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn small_dataset(seed: u64) -> Dataset {
        let grid = small_grid();
        let source = synthesize_load_source(20, 4, seed);
        let mapping = sample_load_mapping(3, 4, seed);
        let config = ScenarioConfig::new(
            SplitSizes {
                train: 10,
                validation: 5,
                test: 5,
            },
            seed,
        );
        build_dataset(&grid, &source, &mapping, &config).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn ingest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "ok.csv",
            "utc_timestamp,DE,FR\n2017-01-01T05:00:00Z,100,200\n2017-01-01T06:00:00Z,110,210\n2017-01-01T07:00:00Z,120,220\n",
        );
        let src = ingest_load_csv(&ok, Some(2)).unwrap();
        assert_eq!((src.hours(), src.n_countries()), (3, 2));
        assert_eq!(src.first_hour_of_day, 5);
        assert_eq!(src.series[2], vec![120.0, 220.0]);

        let missing = write(dir.path(), "m.csv", "hour,DE,FR\n0,1,2\n1,,2\n");
        match ingest_load_csv(&missing, None).unwrap_err() {
            ScenarioError::MissingData { row, column } => assert_eq!((row, column.as_str()), (3, "DE")),
            e => panic!("{e}"),
        }
        let neg = write(dir.path(), "n.csv", "hour,DE,FR\n0,1,-2\n");
        assert!(matches!(
            ingest_load_csv(&neg, None).unwrap_err(),
            ScenarioError::NonnegativityViolation { row: 2, .. }
        ));
        assert!(matches!(
            ingest_load_csv(&ok, Some(3)).unwrap_err(),
            ScenarioError::DimensionMismatch { .. }
        ));
        let garbage = write(dir.path(), "g.csv", "hour,DE\n0,abc\n");
        assert!(matches!(ingest_load_csv(&garbage, None).unwrap_err(), ScenarioError::Parse { line: 2, .. }));
    }

    #[test]
    fn synthetic_source_properties() {
        let a = synthesize_load_source(24 * 40, 5, 9);
        assert_eq!(a, synthesize_load_source(24 * 40, 5, 9));
        assert!(synthesize_load_source(24, 32, 1).series.iter().flatten().all(|v| *v > 0.0));
        for k in 0..5 {
            let x: Vec<f64> = a.series.iter().map(|r| r[k]).collect();
            let r = crate::stats::pearson(&x[..x.len() - 24], &x[24..]);
            assert!(r > 0.5, "lag-24 autocorrelation {r}");
        }
    }

    #[test]
    fn dirichlet_rows_on_simplex() {
        let m = sample_load_mapping(10_000, 32, 4);
        for row in &m.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|w| *w >= 0.0));
        }
        for k in 0..32 {
            let mean = m.weights.iter().map(|r| r[k]).sum::<f64>() / 10_000.0;
            assert!((mean - 1.0 / 32.0).abs() < 0.005, "{mean}");
        }
        assert_eq!(m, sample_load_mapping(10_000, 32, 4));
    }

    #[test]
    fn two_country_dirichlet_is_uniform() {
        let m = sample_load_mapping(10_000, 2, 77);
        let mut u: Vec<f64> = m.weights.iter().map(|r| r[0]).collect();
        for r in &m.weights {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        }
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, x)| ((i as f64 + 1.0) / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS {ks}");
    }

    #[test]
    fn bus_load_synthesis() {
        let source = LoadProfileSource {
            series: vec![vec![3000.0, 3000.0], vec![5000.0, 5000.0]],
            labels: vec!["A".into(), "B".into()],
            first_hour_of_day: 0,
        };
        let mapping = LoadMapping {
            weights: vec![vec![0.5, 0.5], vec![0.25, 0.75]],
            scale: 1000.0,
        };
        let loads = synthesize_bus_loads(&source, &mapping, 0.0, 1).unwrap();
        assert_eq!(loads, vec![vec![3.0, 3.0], vec![5.0, 5.0]]);

        let bad = LoadMapping {
            weights: vec![vec![1.0]],
            scale: 1000.0,
        };
        assert!(matches!(
            synthesize_bus_loads(&source, &bad, 0.0, 1).unwrap_err(),
            ScenarioError::DimensionMismatch { .. }
        ));

        let source = LoadProfileSource {
            series: vec![vec![1000.0, 4000.0]; 10_000],
            labels: vec!["A".into(), "B".into()],
            first_hour_of_day: 0,
        };
        let mapping = LoadMapping {
            weights: vec![vec![0.3, 0.7]],
            scale: 1000.0,
        };
        let mix = 0.3 + 2.8;
        let loads = synthesize_bus_loads(&source, &mapping, 0.05, 3).unwrap();
        let rel: Vec<f64> = loads.iter().map(|r| r[0] / mix - 1.0).collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let sd = (rel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.003, "{sd}");
    }

    #[test]
    fn dispatch_examples() {
        let cost = CostModel {
            c2: vec![0.1, 0.1],
            c1: vec![1.0, 5.0],
        };
        let (p, lambda) = economic_dispatch(&cost, 100.0);
        assert!((p[0] - 60.0).abs() < 1e-9 && (p[1] - 40.0).abs() < 1e-9);
        assert!((lambda - 13.0).abs() < 1e-9);

        let same = CostModel {
            c2: vec![0.09; 4],
            c1: vec![2.0; 4],
        };
        let (p, _) = economic_dispatch(&same, 80.0);
        assert!(p.iter().all(|x| (x - 20.0).abs() < 1e-12));
        let (p, _) = economic_dispatch(&same, 0.0);
        assert!(p.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn dispatch_is_locally_optimal() {
        let mut rng = seeds::rng(99);
        for _ in 0..20 {
            let cost = CostModel::sample(6, &mut rng);
            let load = rng.random_range(10.0..500.0);
            let (p, _) = economic_dispatch(&cost, load);
            assert!((p.iter().sum::<f64>() - load).abs() <= 1e-9 * load);
            let best = cost.cost(&p);
            for _ in 0..1000 {
                let mut d: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mean = d.iter().sum::<f64>() / 6.0;
                let scale = rng.random_range(0.0..0.1) * load / 6.0;
                for (x, pg) in d.iter_mut().zip(&p) {
                    *x = pg + (*x - mean) * scale;
                }
                assert!(cost.cost(&d) >= best - 1e-9 * best.abs());
            }
        }
    }

    #[test]
    fn snapshot_examples() {
        let grid = small_grid();
        let snap = assemble_snapshot(&grid, &[0.0; 3], &[0.0; 2], 0).unwrap();
        assert!(snap.flows.iter().all(|f| *f == 0.0));

        let net = NetworkModel::new(2, vec![Branch::new(0, 1, 0.2)], 0, vec![0], vec![1]).unwrap();
        let two = DcGrid::new(net).unwrap();
        let snap = assemble_snapshot(&two, &[42.0], &[42.0], 3).unwrap();
        assert!((snap.flows[0] - 42.0).abs() < 1e-12);
        let feats = snap.to_features();
        assert_eq!(OperatingSnapshot::from_features(&two.layout, &feats, 3).unwrap(), snap);
        assert!(matches!(
            assemble_snapshot(&two, &[42.0], &[40.0], 0).unwrap_err(),
            ScenarioError::Grid(GridError::UnbalancedInjections { .. })
        ));
    }

    #[test]
    fn measurement_noise_examples() {
        let x = vec![100.0, -50.0, 0.0, 3.0];
        assert_eq!(add_measurement_noise_seeded(&x, 0.0, 0.01, 1), x);
        let mut rng = seeds::rng(5);
        let mut sum_sq = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let y = add_measurement_noise(&[100.0, 0.0], 0.0033, 0.01, &mut rng);
            let e = y[0] - 100.0;
            assert!(e.abs() < 1.0);
            assert_eq!(y[1], 0.0);
            sum_sq += (e / 100.0).powi(2);
        }
        let sd = (sum_sq / n as f64).sqrt();
        assert!((sd - 0.0033).abs() < 0.0002, "{sd}");
    }

    #[test]
    fn dataset_splits_and_determinism() {
        let ds = small_dataset(5);
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (10, 5, 5));
        assert_eq!(ds.hour_index(Split::Test, 0), 15);
        assert!(ds.rows().all(|r| r.len() == 3 + 2 + 7));
        assert_eq!(ds, small_dataset(5));
        assert_ne!(ds, small_dataset(6));

        let grid = small_grid();
        let source = synthesize_load_source(43_717, 2, 1);
        let mapping = sample_load_mapping(3, 2, 1);
        let splits = SplitSizes {
            train: 26_197,
            validation: 8_760,
            test: 8_760,
        };
        assert_eq!(splits.total(), 43_717);
        let ds = build_dataset(&grid, &source, &mapping, &ScenarioConfig::new(splits, 1)).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (26_197, 8_760, 8_760));

        let too_many = SplitSizes {
            train: 50_000,
            validation: 0,
            test: 0,
        };
        assert!(matches!(
            build_dataset(&grid, &source, &mapping, &ScenarioConfig::new(too_many, 1)),
            Err(ScenarioError::SplitTooLarge { .. })
        ));
    }

    #[test]
    fn clean_snapshots_balance() {
        let grid = small_grid();
        let source = synthesize_load_source(50, 4, 2);
        let mapping = sample_load_mapping(3, 4, 2);
        let mut config = ScenarioConfig::new(SplitSizes::proportional(50), 2);
        config.resample_costs_per_hour = true;
        let gen = ScenarioGenerator::new(&grid, &source, &mapping, &config).unwrap();
        let a = grid.network.incidence();
        for t in 0..50 {
            let s = gen.clean_snapshot(t).unwrap();
            assert!((s.generations.iter().sum::<f64>() - s.loads.iter().sum::<f64>()).abs() < 1e-6);
            let p = grid.layout.injections(&s.loads, &s.generations);
            let af = &a * nalgebra::DVector::from_vec(s.flows.clone());
            let scale = p.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in af.iter().zip(&p) {
                assert!((x - y).abs() < 1e-9 * scale);
            }
        }
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = small_dataset(3);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let bytes = std::fs::read(&path).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);

        let text = String::from_utf8(bytes).unwrap();
        std::fs::write(&path, text.replacen("load_2", "lod_2", 1)).unwrap();
        assert!(matches!(load_dataset(&path).unwrap_err(), ScenarioError::FormatVersionMismatch(_)));

        let mut lines: Vec<&str> = text.lines().collect();
        let truncated = lines[4].rsplit_once(',').unwrap().0.to_string();
        lines[4] = &truncated;
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(&path).unwrap_err(), ScenarioError::Parse { line: 4, .. }));

        std::fs::write(&path, text.replacen(",", ",1", 30)).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, ScenarioError::FormatVersionMismatch(_) | ScenarioError::ChecksumMismatch { .. }));

        std::fs::write(&path, &text).unwrap();
        let meta = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        std::fs::write(sidecar_path(&path), meta.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert!(matches!(load_dataset(&path).unwrap_err(), ScenarioError::FormatVersionMismatch(_)));
    }

    #[test]
    fn checksum_guards_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&small_dataset(3), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut fields: Vec<String> = lines[2].split(',').map(str::to_string).collect();
        fields[1] = "12345".into();
        lines[2] = fields.join(",");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(&path).unwrap_err(), ScenarioError::ChecksumMismatch { .. }));
    }
}
