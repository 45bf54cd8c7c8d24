use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fdia_core::attack::{AttackSpec, Attacker};
use fdia_core::autoencoder::{
    calibrate_threshold, load_model, save_model, train_with_progress, DetectorState, NetworkArchitecture,
};
use fdia_core::eval::{
    attack_rows, compare_bdd_ae, evaluate_confusion, magnitude_curve, run_effectiveness_trace, sweep_magnitude,
    write_report, AeDetector, BddFeatureDetector, Detector, Report, ReportFormat,
};
use fdia_core::grid::{DcGrid, NetworkModel};
use fdia_core::scenario::{
    build_dataset, ingest_load_csv, load_dataset, nodal_noise_model, sample_load_mapping, save_dataset,
    synthesize_load_source, Dataset, ScenarioConfig, Split, SplitSizes,
};
use fdia_core::seeds;
use fdia_core::WlsEstimator;

use crate::config::{Settings, HOURS_PER_YEAR};

const BUNDLED_CASE: &str = include_str!("../../../data/case118.txt");

/// Failure caused by configuration or missing inputs (exit code 2) rather
/// than by the computation itself.
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(config_err(anyhow!("{what} not found: {}", path.display())));
    }
    Ok(())
}

/// Named child seeds derived from the master seed.
pub fn seed_ledger(master: u64) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    m.insert("master".to_string(), master);
    for label in ["data", "init", "shuffle", "attack-signs"] {
        m.insert(label.to_string(), seeds::child_seed(master, label));
    }
    m
}

fn load_grid(s: &Settings) -> Result<DcGrid> {
    let net = match &s.case {
        Some(p) => {
            require(p, "case file")?;
            NetworkModel::from_case_file(p).map_err(|e| config_err(anyhow!(e)))?
        }
        None => NetworkModel::parse_case(BUNDLED_CASE)?,
    };
    Ok(DcGrid::new(net)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn out_path(s: &Settings, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&s.out).with_context(|| format!("cannot create {}", s.out.display()))?;
    Ok(s.out.join(name))
}

fn read_dataset(s: &Settings) -> Result<Dataset> {
    require(&s.dataset, "dataset")?;
    Ok(load_dataset(&s.dataset)?)
}

fn read_model(s: &Settings) -> Result<DetectorState> {
    require(&s.model, "model")?;
    Ok(load_model(&s.model)?)
}

fn check_case(grid: &DcGrid, ds: &Dataset) -> Result<()> {
    let sum = fdia_core::scenario::case_checksum(grid);
    if sum != ds.metadata.case_sha256 {
        return Err(config_err(anyhow!(
            "dataset was generated for a different case (sha256 {}, current {sum})",
            ds.metadata.case_sha256
        )));
    }
    Ok(())
}

fn report(s: &Settings, curves: Vec<fdia_core::eval::DetectionCurve>) -> Report {
    Report {
        config: serde_json::to_value(s).expect("settings serialize"),
        seeds: seed_ledger(s.seed),
        curves,
        confusion: None,
        trace: Vec::new(),
    }
}

pub fn gen_data(s: &Settings) -> Result<()> {
    let grid = load_grid(s)?;
    let data_seed = seeds::child_seed(s.seed, "data");
    let source = match &s.load_csv {
        Some(p) => ingest_load_csv(p, None).map_err(|e| config_err(anyhow!(e)))?,
        None => synthesize_load_source(s.hours.unwrap_or(3 * HOURS_PER_YEAR), s.countries, data_seed),
    };
    let hours = s.hours.unwrap_or(source.hours());
    let splits = s.splits.unwrap_or_else(|| SplitSizes::proportional(hours));
    if splits.total() > source.hours() {
        return Err(config_err(anyhow!(
            "{} hours requested but the source has {}",
            splits.total(),
            source.hours()
        )));
    }
    let mut mapping = sample_load_mapping(grid.layout.n_loads(), source.n_countries(), data_seed);
    mapping.scale = s.source_scale;
    let cfg = ScenarioConfig {
        variation_std: s.variation_std,
        noise_rel_std: s.noise_rel_std,
        noise_rel_cap: s.noise_rel_cap,
        splits,
        resample_costs_per_hour: s.resample_costs,
        seed: data_seed,
    };
    let ds = build_dataset(&grid, &source, &mapping, &cfg)?;
    if let Some(dir) = s.dataset.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&ds, &s.dataset)?;
    let total_load: Vec<f64> = ds
        .rows()
        .map(|r| grid.layout.split(r).0.iter().sum::<f64>())
        .collect();
    let (lo, hi) = total_load
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    println!(
        "wrote {} rows ({} train, {} validation, {} test) x {} features to {}",
        splits.total(),
        splits.train,
        splits.validation,
        splits.test,
        grid.layout.dim(),
        s.dataset.display()
    );
    println!("total load range {lo:.1} .. {hi:.1} MW; every snapshot passed the nodal and generation balance checks");
    println!("negative generator outputs: {}", ds.metadata.negative_generation_count);
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    let ds = read_dataset(s)?;
    let d0 = ds.metadata.feature_names.len();
    let arch = match &s.layer_dims {
        Some(dims) => NetworkArchitecture::with_default_activations(dims.clone()),
        None => NetworkArchitecture::paper(d0),
    }
    .map_err(|e| config_err(anyhow!(e)))?;
    if arch.input_dim() != d0 {
        return Err(config_err(anyhow!(
            "layer-dims start with {} but the dataset has {d0} features",
            arch.input_dim()
        )));
    }
    let every = (s.train.epochs / 20).max(1);
    let (mut state, log) = train_with_progress(&arch, &s.train, &ds.train, &ds.validation, |e, j| {
        if e % every == 0 {
            eprintln!("epoch {e:>5}  J = {j:.6e}");
        }
    })?;
    state.alpha = s.alpha;
    let model = &s.model;
    if let Some(dir) = model.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_model(&state, model)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, j) in log.epoch_loss.iter().enumerate() {
        writeln!(csv, "{e},{j}").unwrap();
    }
    write_file(&out_path(s, "loss_log.csv")?, &csv)?;
    println!(
        "trained {} epochs: final J = {:.6e}, validation J = {:.6e}; model written to {}",
        s.train.epochs,
        log.final_loss,
        log.validation_loss.unwrap_or(f64::NAN),
        model.display()
    );
    Ok(())
}

pub fn calibrate(s: &Settings) -> Result<()> {
    let ds = read_dataset(s)?;
    let state = read_model(s)?;
    let (cal, sorted) = calibrate_threshold(&state, &ds.validation, s.alpha)?;
    save_model(&cal, &s.model)?;
    let mut csv = String::from("rank,error\n");
    for (i, e) in sorted.iter().enumerate() {
        writeln!(csv, "{},{e}", i + 1).unwrap();
    }
    write_file(&out_path(s, "validation_errors.csv")?, &csv)?;
    let tau = cal.threshold()?;
    let flagged = sorted.iter().filter(|e| **e > tau).count();
    println!(
        "threshold at the {}th percentile of {} validation errors: {tau:.6e} ({} above)",
        s.alpha,
        sorted.len(),
        flagged
    );
    Ok(())
}

fn attack_spec(s: &Settings, grid: &DcGrid) -> Result<AttackSpec> {
    s.attack_config()
        .to_spec(grid)
        .map_err(|e| config_err(anyhow!("invalid attack: {e}")))
}

pub fn attack(s: &Settings) -> Result<()> {
    let grid = load_grid(s)?;
    let ds = read_dataset(s)?;
    check_case(&grid, &ds)?;
    let state = read_model(s)?;
    let ae = AeDetector::new(&state)?;
    let spec = attack_spec(s, &grid)?;
    let test = ds.split(Split::Test);

    let start = (0..test.len())
        .filter(|&i| ds.hour_of_day(Split::Test, i) == 9)
        .nth(s.trace_day)
        .ok_or_else(|| config_err(anyhow!("test split has no day {} with a 09:00 hour", s.trace_day)))?;
    let end = (start + 12).min(test.len());
    let attack_row = start + (s.attack_hour - 9);
    if attack_row >= end {
        return Err(config_err(anyhow!("trace day {} is cut off by the end of the test split", s.trace_day)));
    }
    let trace = run_effectiveness_trace(&ae, &ds, Split::Test, &spec, &grid, start..end, attack_row)?;

    let attacker = Attacker::new(&grid, spec)?;
    let attacked = attack_rows(&attacker, test)?;
    let counts = evaluate_confusion(&ae, test, &attacked)?;

    let mut csv = String::from("hour_index,hour_of_day,clean_score,attacked_score,threshold,flag\n");
    for p in &trace {
        let a = p.attacked_score.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{a},{},{}",
            p.hour_index, p.hour_of_day, p.clean_score, p.threshold, p.flag
        )
        .unwrap();
    }
    write_file(&out_path(s, "attack_trace.csv")?, &csv)?;
    let mut rep = report(s, Vec::new());
    rep.confusion = Some(counts);
    rep.trace = trace;
    write_report(&rep, &out_path(s, "attack.json")?, ReportFormat::Json)?;
    write_report(&rep, &out_path(s, "attack.csv")?, ReportFormat::Csv)?;
    println!(
        "attack `{}` on {} test hours: TPR {:.4} ({} of {}), FPR {:.4} ({} of {})",
        s.attack,
        test.len(),
        counts.tpr(),
        counts.true_positive,
        counts.attacked(),
        counts.fpr(),
        counts.false_positive,
        counts.normal()
    );
    Ok(())
}

pub fn evaluate(s: &Settings) -> Result<()> {
    let grid = load_grid(s)?;
    let ds = read_dataset(s)?;
    check_case(&grid, &ds)?;
    let state = read_model(s)?;
    let ae = AeDetector::new(&state)?;
    let spec = attack_spec(s, &grid)?;
    let test = ds.split(Split::Test);

    let mut curves = vec![magnitude_curve(&ae, &grid, test, &spec, &s.magnitudes, ae.label())?];
    curves.extend(sweep_magnitude(&ae, &grid, &ds, &spec, &s.magnitudes, &s.hours_of_day)?);
    let attacked = attack_rows(&Attacker::new(&grid, spec)?, test)?;
    let counts = evaluate_confusion(&ae, test, &attacked)?;

    for c in &curves {
        let ys: Vec<String> = c.x.iter().zip(c.y()).map(|(x, y)| format!("{x}:{y:.4}")).collect();
        println!("{:<16} {}", c.detector, ys.join(" "));
    }
    println!(
        "configured attack: TPR {:.4}, FPR {:.4}, FNR {:.4}, TNR {:.4}",
        counts.tpr(),
        counts.fpr(),
        counts.fnr(),
        counts.tnr()
    );
    let mut rep = report(s, curves);
    rep.confusion = Some(counts);
    write_report(&rep, &out_path(s, "evaluate.csv")?, ReportFormat::Csv)?;
    write_report(&rep, &out_path(s, "evaluate.json")?, ReportFormat::Json)?;
    Ok(())
}

pub fn compare(s: &Settings) -> Result<()> {
    let grid = load_grid(s)?;
    let ds = read_dataset(s)?;
    check_case(&grid, &ds)?;
    let state = read_model(s)?;
    let ae = AeDetector::new(&state)?;
    if !(state.alpha < 100.0) {
        bail!(config_err(anyhow!("compare needs alpha < 100 to calibrate the residual detector")));
    }
    let noise = nodal_noise_model(&grid.layout, &ds.train, ds.metadata.noise_rel_std)?;
    let est = WlsEstimator::new(grid.measurement.clone(), noise)?;
    let bdd = BddFeatureDetector::calibrated(&grid, est, &ds.validation, state.alpha / 100.0)?;
    let val_n = ds.validation.len() as f64;
    let ae_far = ae.count_detected(&ds.validation)? as f64 / val_n;
    let bdd_far = bdd.count_detected(&ds.validation)? as f64 / val_n;

    let mut cfg = s.attack_config();
    cfg.gamma = 0.0;
    let spec = cfg.to_spec(&grid).map_err(|e| config_err(anyhow!("invalid attack: {e}")))?;
    let cmp = compare_bdd_ae(
        &ae,
        &bdd,
        &grid,
        ds.split(Split::Test),
        &spec,
        &s.gammas,
        s.sign_seeds,
        s.seed,
    )?;
    println!("validation false-alarm rate: autoencoder {ae_far:.4}, bdd {bdd_far:.4}");
    println!("gamma      autoencoder  bdd");
    for (i, g) in cmp.ae.x.iter().enumerate() {
        println!("{g:<10} {:<12.4} {:.4}", cmp.ae.y()[i], cmp.bdd.y()[i]);
    }
    let mut rep = report(s, vec![cmp.ae.clone(), cmp.bdd.clone()]);
    rep.seeds.extend(cmp.seed_ledger.clone());
    rep.config["validation_false_alarm_rate"] = serde_json::json!({"autoencoder": ae_far, "bdd": bdd_far});
    write_report(&rep, &out_path(s, "compare.csv")?, ReportFormat::Csv)?;
    write_report(&rep, &out_path(s, "compare.json")?, ReportFormat::Json)?;
    Ok(())
}

/// Feature rows from a CSV whose header holds the feature names, optionally
/// preceded by an `hour` column.
fn read_feature_csv(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let skip = usize::from(header.first().map(String::as_str) == Some("hour"));
    if header[skip..] != *names {
        return Err(config_err(anyhow!(
            "{}: header does not match the model's {} feature names",
            path.display(),
            names.len()
        )));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            rec.iter()
                .skip(skip)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| anyhow!("{} row {}: invalid number `{v}`", path.display(), i + 1))
                })
                .collect()
        })
        .collect()
}

pub fn detect(s: &Settings) -> Result<()> {
    let ds = read_dataset(s)?;
    let state = read_model(s)?;
    let ae = AeDetector::new(&state)?;
    let rows = match &s.input {
        Some(p) => read_feature_csv(p, &ds.metadata.feature_names)?,
        None => ds.test.clone(),
    };
    let scores = ae.scores(&rows)?;
    let tau = ae.threshold();
    let mut csv = String::from("row,score,flag\n");
    let mut flagged = 0;
    for (i, r) in scores.iter().enumerate() {
        flagged += usize::from(*r > tau);
        writeln!(csv, "{i},{r},{}", *r > tau).unwrap();
    }
    write_file(&out_path(s, "detections.csv")?, &csv)?;
    println!("{flagged} of {} samples flagged (threshold {tau:.6e})", rows.len());
    Ok(())
}
