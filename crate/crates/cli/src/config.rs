//! Run configuration: a TOML file and command-line flags with identical
//! (kebab-case) names. Flags override file values; anything unset falls back
//! to the defaults below.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use fdia_core::attack::AttackConfig;
use fdia_core::autoencoder::TrainConfig;
use fdia_core::scenario::SplitSizes;
use serde::{Deserialize, Serialize};

pub const HOURS_PER_YEAR: usize = 8760;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 200 epochs, learning rate 1e-3, batch 64.
    Desk,
    /// 2000 epochs, learning rate 1e-5, batch 256.
    Paper,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// Network case file (defaults to the bundled 118-bus case)
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    /// Hourly per-country load CSV used instead of synthetic profiles
    #[arg(long, global = true)]
    pub load_csv: Option<PathBuf>,
    /// Generate synthetic load profiles (the default data source)
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub synthetic: Option<bool>,
    /// Hours of data to generate [default: 26280]
    #[arg(long, global = true)]
    pub hours: Option<usize>,
    /// Number of synthetic source countries [default: 32]
    #[arg(long, global = true)]
    pub countries: Option<usize>,
    /// Training split size in hours (set all three split sizes or none)
    #[arg(long, global = true)]
    pub train_hours: Option<usize>,
    /// Validation split size in hours
    #[arg(long, global = true)]
    pub validation_hours: Option<usize>,
    /// Test split size in hours
    #[arg(long, global = true)]
    pub test_hours: Option<usize>,
    /// Divisor applied to source loads [default: 1000]
    #[arg(long, global = true)]
    pub source_scale: Option<f64>,
    /// Relative std of per-bus load variation [default: 0.05]
    #[arg(long, global = true)]
    pub variation_std: Option<f64>,
    /// Relative std of measurement noise [default: 0.0033]
    #[arg(long, global = true)]
    pub noise_rel_std: Option<f64>,
    /// Relative truncation bound of measurement noise [default: 0.01]
    #[arg(long, global = true)]
    pub noise_rel_cap: Option<f64>,
    /// Redraw generator cost coefficients every hour
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub resample_costs: Option<bool>,
    /// Master seed [default: 1]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset CSV [default: <out>/dataset.csv]
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Model file [default: <out>/model.json]
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Worker threads [default: 1]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Training profile [default: desk]
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Training epochs [default: from profile]
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: from profile]
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: from profile]
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Comma-separated layer widths [default: d0,d0,256,128,64,32,64,128,256,d0]
    #[arg(long, global = true, value_delimiter = ',')]
    pub layer_dims: Option<Vec<usize>>,
    /// Threshold percentile [default: 97]
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Attack spec, e.g. "loads 108:-0.15,109:-0.15; gens 110:1,111:1"
    #[arg(long, global = true)]
    pub attack: Option<String>,
    /// Load-reduction magnitudes for the sweep [default: 0.01,0.05,0.1,0.15,0.2,0.25,0.3]
    #[arg(long, global = true, value_delimiter = ',')]
    pub magnitudes: Option<Vec<f64>>,
    /// Hours of day with their own sweep curve [default: 2,14,21]
    #[arg(long, global = true, value_delimiter = ',')]
    pub hours_of_day: Option<Vec<usize>>,
    /// Reactance deviation magnitudes for compare [default: 0,0.01,0.05,0.1,0.15,0.2]
    #[arg(long, global = true, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Sign draws per deviation magnitude [default: 20]
    #[arg(long, global = true)]
    pub sign_seeds: Option<usize>,
    /// Test-set day of the 09:00-20:00 trace [default: 0]
    #[arg(long, global = true)]
    pub trace_day: Option<usize>,
    /// Hour of day attacked in the trace [default: 14]
    #[arg(long, global = true)]
    pub attack_hour: Option<usize>,
    /// Feature CSV scored by `detect` [default: the test split]
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
}

macro_rules! overlay {
    ($lo:expr, $hi:expr, $($f:ident),* $(,)?) => {
        Options { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl Options {
    /// `self` with every field set in `over` replaced.
    pub fn overridden_by(self, over: Options) -> Options {
        overlay!(
            self, over, case, load_csv, synthetic, hours, countries, train_hours, validation_hours,
            test_hours, source_scale, variation_std, noise_rel_std, noise_rel_cap, resample_costs,
            seed, out, dataset, model, threads, profile, epochs, batch_size, learning_rate,
            layer_dims, alpha, attack, magnitudes, hours_of_day, gammas, sign_seeds, trace_day,
            attack_hour, input,
        )
    }

    pub fn from_file(path: &Path) -> Result<Options> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub case: Option<PathBuf>,
    pub load_csv: Option<PathBuf>,
    pub hours: Option<usize>,
    pub countries: usize,
    pub splits: Option<SplitSizes>,
    pub source_scale: f64,
    pub variation_std: f64,
    pub noise_rel_std: f64,
    pub noise_rel_cap: f64,
    pub resample_costs: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub threads: usize,
    pub profile: Profile,
    pub train: TrainConfig,
    pub layer_dims: Option<Vec<usize>>,
    pub alpha: f64,
    pub attack: String,
    pub magnitudes: Vec<f64>,
    pub hours_of_day: Vec<usize>,
    pub gammas: Vec<f64>,
    pub sign_seeds: usize,
    pub trace_day: usize,
    pub attack_hour: usize,
    pub input: Option<PathBuf>,
}

fn check_increasing(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        bail!("{name} must not be empty");
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        bail!("{name} must be strictly increasing");
    }
    Ok(())
}

impl Settings {
    pub fn resolve(o: Options) -> Result<Settings> {
        if o.load_csv.is_some() && o.synthetic == Some(true) {
            bail!("choose one data source: load-csv or synthetic");
        }
        if o.synthetic == Some(false) && o.load_csv.is_none() {
            bail!("synthetic = false requires load-csv");
        }
        let seed = o.seed.unwrap_or(1);
        let out = o.out.unwrap_or_else(|| PathBuf::from("out"));
        let profile = o.profile.unwrap_or(Profile::Desk);
        let mut train = match profile {
            Profile::Desk => TrainConfig::desk(seed),
            Profile::Paper => TrainConfig::paper(seed),
        };
        if let Some(e) = o.epochs {
            train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            train.batch_size = b;
        }
        if let Some(lr) = o.learning_rate {
            train.learning_rate = lr;
        }
        train.validate().map_err(|e| anyhow!(e))?;

        let splits = match (o.train_hours, o.validation_hours, o.test_hours) {
            (None, None, None) => None,
            (Some(train), Some(validation), Some(test)) => Some(SplitSizes {
                train,
                validation,
                test,
            }),
            _ => bail!("set all of train-hours, validation-hours and test-hours, or none"),
        };
        if let (Some(s), Some(h)) = (splits, o.hours) {
            if s.total() != h {
                bail!("split sizes sum to {} but hours = {h}", s.total());
            }
        }
        let alpha = o.alpha.unwrap_or(97.0);
        if !(alpha > 0.0 && alpha < 100.0) && alpha != 100.0 {
            bail!("alpha must lie in (0, 100], got {alpha}");
        }
        let attack = o.attack.unwrap_or_else(|| AttackConfig::reference(0.15).to_string());
        attack
            .parse::<AttackConfig>()
            .map_err(|e| anyhow!("invalid attack: {e}"))?;
        let magnitudes = o
            .magnitudes
            .unwrap_or_else(|| vec![0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]);
        check_increasing("magnitudes", &magnitudes)?;
        let gammas = o.gammas.unwrap_or_else(|| vec![0.0, 0.01, 0.05, 0.1, 0.15, 0.2]);
        check_increasing("gammas", &gammas)?;
        if gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
            bail!("gammas must lie in [0, 1)");
        }
        let hours_of_day = o.hours_of_day.unwrap_or_else(|| vec![2, 14, 21]);
        if hours_of_day.iter().any(|h| *h >= 24) {
            bail!("hours-of-day must lie in 0..24");
        }
        let attack_hour = o.attack_hour.unwrap_or(14);
        if !(9..21).contains(&attack_hour) {
            bail!("attack-hour must lie in the 09:00-20:00 trace window");
        }
        let threads = o.threads.unwrap_or(1);
        if threads == 0 {
            bail!("threads must be >= 1");
        }
        let sign_seeds = o.sign_seeds.unwrap_or(20);
        if sign_seeds == 0 {
            bail!("sign-seeds must be >= 1");
        }
        let countries = o.countries.unwrap_or(32);
        if countries == 0 {
            bail!("countries must be >= 1");
        }
        if let Some(h) = o.hours {
            if h < 3 {
                bail!("hours must be >= 3");
            }
        }
        for (name, p) in [("case", &o.case), ("load-csv", &o.load_csv), ("input", &o.input)] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{name} file not found: {}", p.display());
                }
            }
        }
        Ok(Settings {
            case: o.case,
            load_csv: o.load_csv,
            hours: o.hours,
            countries,
            splits,
            source_scale: o.source_scale.unwrap_or(fdia_core::scenario::DEFAULT_SOURCE_SCALE),
            variation_std: o.variation_std.unwrap_or(0.05),
            noise_rel_std: o.noise_rel_std.unwrap_or(0.0033),
            noise_rel_cap: o.noise_rel_cap.unwrap_or(0.01),
            resample_costs: o.resample_costs.unwrap_or(false),
            seed,
            dataset: o.dataset.unwrap_or_else(|| out.join("dataset.csv")),
            model: o.model.unwrap_or_else(|| out.join("model.json")),
            out,
            threads,
            profile,
            train,
            layer_dims: o.layer_dims,
            alpha,
            attack,
            magnitudes,
            hours_of_day,
            gammas,
            sign_seeds,
            trace_day: o.trace_day.unwrap_or(0),
            attack_hour,
            input: o.input,
        })
    }

    pub fn attack_config(&self) -> AttackConfig {
        self.attack.parse().expect("validated in resolve")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: Options = toml::from_str("seed = 5\nalpha = 95.0\nmagnitudes = [0.1, 0.2]\n").unwrap();
        let cli = Options {
            seed: Some(9),
            ..Options::default()
        };
        let s = Settings::resolve(file.overridden_by(cli)).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.alpha, 95.0);
        assert_eq!(s.magnitudes, vec![0.1, 0.2]);
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.dataset, PathBuf::from("out/dataset.csv"));
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |text: &str| Settings::resolve(toml::from_str(text).unwrap()).is_err();
        assert!(bad("alpha = 0.0"));
        assert!(bad("alpha = 101.0"));
        assert!(bad("attack = \"loads 108:-0.1; gens 110:x\""));
        assert!(bad("magnitudes = [0.3, 0.1]"));
        assert!(bad("train-hours = 10"));
        assert!(bad("case = \"/nonexistent/case.txt\""));
        assert!(bad("synthetic = true\nload-csv = \"x.csv\""));
        assert!(toml::from_str::<Options>("no-such-key = 1").is_err());
    }
}
