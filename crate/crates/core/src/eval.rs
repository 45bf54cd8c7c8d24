//! Detector evaluation: single-attack traces, confusion counts, detection
//! probability sweeps over attack magnitude and attacker knowledge deviation,
//! and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{apply_attack, perturb_reactances, AttackError, AttackSpec, Attacker};
use crate::autoencoder::{AeError, DetectorState};
use crate::estimation::{threshold_from_norms, EstimationError, WlsEstimator};
use crate::grid::{DcGrid, GridError};
use crate::scenario::{Dataset, Split};
use crate::seeds;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Autoencoder(#[from] AeError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Anything that scores feature vectors and alarms above a threshold.
pub trait Detector: Sync {
    fn label(&self) -> &str;
    fn threshold(&self) -> f64;
    /// Anomaly scores of MW feature vectors, in input order.
    fn scores(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, EvalError>;

    fn flags(&self, rows: &[Vec<f64>]) -> Result<Vec<bool>, EvalError> {
        let tau = self.threshold();
        Ok(self.scores(rows)?.into_iter().map(|s| s > tau).collect())
    }

    fn count_detected(&self, rows: &[Vec<f64>]) -> Result<usize, EvalError> {
        Ok(self.flags(rows)?.into_iter().filter(|f| *f).count())
    }
}

/// Calibrated autoencoder.
pub struct AeDetector<'a> {
    state: &'a DetectorState,
    threshold: f64,
}

impl<'a> AeDetector<'a> {
    pub fn new(state: &'a DetectorState) -> Result<Self, EvalError> {
        let threshold = state.threshold()?;
        Ok(Self { state, threshold })
    }
}

impl Detector for AeDetector<'_> {
    fn label(&self) -> &str {
        "autoencoder"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn scores(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
        Ok(self.state.scores(rows)?)
    }
}

const BDD_CHUNK: usize = 512;

/// Residual-norm detector applied to feature vectors through their nodal
/// measurement form.
pub struct BddFeatureDetector<'a> {
    grid: &'a DcGrid,
    estimator: WlsEstimator,
    /// `I - H K`, so that `r = P z`.
    projector: DMatrix<f64>,
    threshold: f64,
}

impl<'a> BddFeatureDetector<'a> {
    pub fn new(grid: &'a DcGrid, estimator: WlsEstimator, threshold: f64) -> Result<Self, EvalError> {
        if !(threshold >= 0.0) {
            return Err(EstimationError::NegativeThreshold(threshold).into());
        }
        let h = &estimator.measurement().values;
        let m = h.nrows();
        let projector = DMatrix::identity(m, m) - h * estimator.gain();
        Ok(Self {
            grid,
            estimator,
            projector,
            threshold,
        })
    }

    /// Threshold at the nearest-rank `quantile` of residual norms over
    /// `validation` rows.
    pub fn calibrated(
        grid: &'a DcGrid,
        estimator: WlsEstimator,
        validation: &[Vec<f64>],
        quantile: f64,
    ) -> Result<Self, EvalError> {
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(EstimationError::BadQuantile(quantile).into());
        }
        if validation.is_empty() {
            return Err(EvalError::EmptySet("validation"));
        }
        let mut det = Self::new(grid, estimator, 0.0)?;
        let norms = det.scores(validation)?;
        det.threshold = threshold_from_norms(&norms, quantile);
        Ok(det)
    }

    pub fn estimator(&self) -> &WlsEstimator {
        &self.estimator
    }
}

impl Detector for BddFeatureDetector<'_> {
    fn label(&self) -> &str {
        "bdd"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn scores(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
        let layout = &self.grid.layout;
        let m = layout.n_measurements();
        let chunks = rows
            .par_chunks(BDD_CHUNK)
            .map(|chunk| {
                let mut z = DMatrix::zeros(m, chunk.len());
                for (c, row) in chunk.iter().enumerate() {
                    z.set_column(c, &layout.to_nodal(row)?);
                }
                let r = &self.projector * z;
                Ok(r.column_iter().map(|c| c.norm()).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, GridError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub false_positive: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ConfusionCounts {
    pub fn attacked(&self) -> usize {
        self.true_positive + self.false_negative
    }

    pub fn normal(&self) -> usize {
        self.true_negative + self.false_positive
    }

    pub fn total(&self) -> usize {
        self.attacked() + self.normal()
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.true_positive, self.attacked())
    }

    pub fn fnr(&self) -> f64 {
        ratio(self.false_negative, self.attacked())
    }

    pub fn tnr(&self) -> f64 {
        ratio(self.true_negative, self.normal())
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.false_positive, self.normal())
    }

    /// `(class, count, rate)` rows in a fixed order.
    pub fn rows(&self) -> [(&'static str, usize, f64); 4] {
        [
            ("true_positive", self.true_positive, self.tpr()),
            ("false_negative", self.false_negative, self.fnr()),
            ("true_negative", self.true_negative, self.tnr()),
            ("false_positive", self.false_positive, self.fpr()),
        ]
    }
}

/// Detection probability against a sweep variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurve {
    pub detector: String,
    pub x: Vec<f64>,
    pub n_trials: Vec<usize>,
    pub detected: Vec<usize>,
}

impl DetectionCurve {
    pub fn new(detector: impl Into<String>) -> Self {
        Self {
            detector: detector.into(),
            x: Vec::new(),
            n_trials: Vec::new(),
            detected: Vec::new(),
        }
    }

    pub fn push(&mut self, x: f64, n_trials: usize, detected: usize) -> Result<(), EvalError> {
        if let Some(last) = self.x.last() {
            if !(x > *last) {
                return Err(EvalError::InvalidParameter(format!(
                    "sweep values must strictly increase ({last} then {x})"
                )));
            }
        }
        if detected > n_trials {
            return Err(EvalError::InvalidParameter("more detections than trials".into()));
        }
        self.x.push(x);
        self.n_trials.push(n_trials);
        self.detected.push(detected);
        Ok(())
    }

    pub fn y(&self) -> Vec<f64> {
        self.detected
            .iter()
            .zip(&self.n_trials)
            .map(|(d, n)| ratio(*d, *n))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Attacked copies of `rows`, built from each row's own measurements.
pub fn attack_rows(attacker: &Attacker, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
    rows.par_iter()
        .map(|row| {
            let atk = attacker.build_from_features(row)?;
            Ok(apply_attack(row, &atk)?)
        })
        .collect()
}

/// One hour of an effectiveness trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub hour_index: usize,
    pub hour_of_day: usize,
    pub clean_score: f64,
    /// Score of the attacked measurements, at the attacked hour only.
    pub attacked_score: Option<f64>,
    pub threshold: f64,
    pub flag: bool,
}

/// Scores the rows of `split` in `window` (row indices) and, at
/// `attack_row`, additionally the attacked measurements.
pub fn run_effectiveness_trace(
    detector: &dyn Detector,
    dataset: &Dataset,
    split: Split,
    spec: &AttackSpec,
    grid: &DcGrid,
    window: std::ops::Range<usize>,
    attack_row: usize,
) -> Result<Vec<TracePoint>, EvalError> {
    let rows = dataset.split(split);
    if window.is_empty() || window.end > rows.len() {
        return Err(EvalError::InvalidParameter(format!(
            "window {window:?} outside 0..{}",
            rows.len()
        )));
    }
    if !window.contains(&attack_row) {
        return Err(EvalError::InvalidParameter(format!(
            "attack row {attack_row} outside window {window:?}"
        )));
    }
    let attacker = Attacker::new(grid, spec.clone())?;
    let clean = detector.scores(&rows[window.clone()])?;
    let attacked = attack_rows(&attacker, std::slice::from_ref(&rows[attack_row]))?;
    let attacked_score = detector.scores(&attacked)?[0];
    let tau = detector.threshold();
    Ok(window
        .zip(clean)
        .map(|(i, s)| {
            let a = (i == attack_row).then_some(attacked_score);
            TracePoint {
                hour_index: dataset.hour_index(split, i),
                hour_of_day: dataset.hour_of_day(split, i),
                clean_score: s,
                attacked_score: a,
                threshold: tau,
                flag: a.unwrap_or(s) > tau,
            }
        })
        .collect())
}

/// Strict-threshold classification of normal and attacked samples.
pub fn evaluate_confusion(
    detector: &dyn Detector,
    normal: &[Vec<f64>],
    attacked: &[Vec<f64>],
) -> Result<ConfusionCounts, EvalError> {
    if normal.is_empty() {
        return Err(EvalError::EmptySet("normal"));
    }
    if attacked.is_empty() {
        return Err(EvalError::EmptySet("attacked"));
    }
    let fp = detector.count_detected(normal)?;
    let tp = detector.count_detected(attacked)?;
    Ok(ConfusionCounts {
        true_positive: tp,
        false_negative: attacked.len() - tp,
        true_negative: normal.len() - fp,
        false_positive: fp,
    })
}

/// Detection probability of `base_spec` scaled to each load-reduction
/// magnitude (`beta = -magnitude`), over `rows`.
pub fn magnitude_curve(
    detector: &dyn Detector,
    grid: &DcGrid,
    rows: &[Vec<f64>],
    base_spec: &AttackSpec,
    magnitudes: &[f64],
    label: impl Into<String>,
) -> Result<DetectionCurve, EvalError> {
    if magnitudes.is_empty() {
        return Err(EvalError::InvalidParameter("no magnitudes".into()));
    }
    if rows.is_empty() {
        return Err(EvalError::EmptySet("test"));
    }
    let mut curve = DetectionCurve::new(label);
    for &m in magnitudes {
        let attacker = Attacker::new(grid, base_spec.with_uniform_rate(-m))?;
        let attacked = attack_rows(&attacker, rows)?;
        curve.push(m, rows.len(), detector.count_detected(&attacked)?)?;
    }
    Ok(curve)
}

/// One magnitude curve per requested hour of day, over the test rows at that
/// hour. Curves are labelled `<detector>@<hh>`.
pub fn sweep_magnitude(
    detector: &dyn Detector,
    grid: &DcGrid,
    dataset: &Dataset,
    base_spec: &AttackSpec,
    magnitudes: &[f64],
    hours_of_day: &[usize],
) -> Result<Vec<DetectionCurve>, EvalError> {
    let test = dataset.split(Split::Test);
    hours_of_day
        .iter()
        .map(|&h| {
            if h >= 24 {
                return Err(EvalError::InvalidParameter(format!("hour of day {h}")));
            }
            let rows: Vec<Vec<f64>> = (0..test.len())
                .filter(|&i| dataset.hour_of_day(Split::Test, i) == h)
                .map(|i| test[i].clone())
                .collect();
            magnitude_curve(
                detector,
                grid,
                &rows,
                base_spec,
                magnitudes,
                format!("{}@{h:02}", detector.label()),
            )
        })
        .collect()
}

/// Result of the knowledge-deviation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ae: DetectionCurve,
    pub bdd: DetectionCurve,
    /// Sign seed used for each `(gamma, repetition)` pair, keyed `gamma=<g>/<k>`.
    pub seed_ledger: BTreeMap<String, u64>,
}

/// For each deviation magnitude, draws `seeds_per_point` sign patterns, lets
/// the attacker build `base_spec` attacks from the perturbed reactances
/// against every row, and records both detectors' detection probabilities.
pub fn compare_bdd_ae(
    ae: &dyn Detector,
    bdd: &dyn Detector,
    grid: &DcGrid,
    rows: &[Vec<f64>],
    base_spec: &AttackSpec,
    gamma_magnitudes: &[f64],
    seeds_per_point: usize,
    master_seed: u64,
) -> Result<Comparison, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptySet("test"));
    }
    if gamma_magnitudes.is_empty() || seeds_per_point == 0 {
        return Err(EvalError::InvalidParameter("empty deviation sweep".into()));
    }
    let sign_master = seeds::child_seed(master_seed, "attack-signs");
    let mut ae_curve = DetectionCurve::new(ae.label());
    let mut bdd_curve = DetectionCurve::new(bdd.label());
    let mut ledger = BTreeMap::new();
    for (gi, &gamma) in gamma_magnitudes.iter().enumerate() {
        let (mut ae_hits, mut bdd_hits) = (0, 0);
        for k in 0..seeds_per_point {
            let seed = seeds::indexed_seed(sign_master, "gamma", (gi * seeds_per_point + k) as u64);
            ledger.insert(format!("gamma={gamma}/{k}"), seed);
            let deviation = perturb_reactances(grid.network.n_branches(), gamma, seed);
            let attacker = Attacker::new(grid, base_spec.with_deviation(deviation))?;
            let attacked = attack_rows(&attacker, rows)?;
            ae_hits += ae.count_detected(&attacked)?;
            bdd_hits += bdd.count_detected(&attacked)?;
        }
        let n = rows.len() * seeds_per_point;
        ae_curve.push(gamma, n, ae_hits)?;
        bdd_curve.push(gamma, n, bdd_hits)?;
    }
    Ok(Comparison {
        ae: ae_curve,
        bdd: bdd_curve,
        seed_ledger: ledger,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Everything a run reports, plus enough context to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub curves: Vec<DetectionCurve>,
    pub confusion: Option<ConfusionCounts>,
    pub trace: Vec<TracePoint>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub const CURVE_HEADER: &str = "sweep_value,detector,n_trials,detected,probability";
pub const CONFUSION_HEADER: &str = "class,count,rate";

pub fn curves_to_csv(curves: &[DetectionCurve]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for c in curves {
        for (i, y) in c.y().into_iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.x[i], c.detector, c.n_trials[i], c.detected[i], y
            ));
        }
    }
    s
}

pub fn confusion_to_csv(counts: &ConfusionCounts) -> String {
    let mut s = String::from(CONFUSION_HEADER);
    s.push('\n');
    for (class, count, rate) in counts.rows() {
        s.push_str(&format!("{class},{count},{rate}\n"));
    }
    s
}

/// Parses a curve CSV back into curves, grouping rows by detector label in
/// order of first appearance.
pub fn curves_from_csv(text: &str) -> Result<Vec<DetectionCurve>, EvalError> {
    let bad = |line: usize, m: &str| EvalError::InvalidParameter(format!("curve CSV line {line}: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut curves: Vec<DetectionCurve> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 2, "expected 5 fields"));
        }
        let x: f64 = f[0].parse().map_err(|_| bad(i + 2, "sweep_value"))?;
        let n: usize = f[2].parse().map_err(|_| bad(i + 2, "n_trials"))?;
        let d: usize = f[3].parse().map_err(|_| bad(i + 2, "detected"))?;
        let idx = match curves.iter().position(|c| c.detector == f[1]) {
            Some(idx) => idx,
            None => {
                curves.push(DetectionCurve::new(f[1]));
                curves.len() - 1
            }
        };
        curves[idx].push(x, n, d)?;
    }
    Ok(curves)
}

/// Path of the confusion table written next to a CSV report.
pub fn confusion_path(path: &Path) -> PathBuf {
    path.with_extension("confusion.csv")
}

/// CSV: curves at `path`, and the confusion table (if any) at
/// [`confusion_path`]. JSON: the whole report at `path`.
pub fn write_report(report: &Report, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    match format {
        ReportFormat::Csv => {
            std::fs::write(path, curves_to_csv(&report.curves)).map_err(|e| io_err(path, e))?;
            if let Some(c) = &report.confusion {
                let p = confusion_path(path);
                std::fs::write(&p, confusion_to_csv(c)).map_err(|e| io_err(&p, e))?;
            }
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| io_err(path, e))?;
            s.push('\n');
            std::fs::write(path, s).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}
