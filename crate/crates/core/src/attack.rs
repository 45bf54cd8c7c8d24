//! False data injection attack construction.
//!
//! An attack is defined in feature space (loads, generations, flows) and
//! projected to nodal space `a = [dP^I; dP^F]` for the residual detector.
//! With exact topology knowledge the nodal vector equals `H * dP^I` and is
//! invisible to the BDD; with perturbed reactances the attacker computes flows
//! with the wrong distribution factors.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use thiserror::Error;

use crate::grid::{build_ptdf, DcGrid, GridError, PtdfMatrix};
use crate::scenario::OperatingSnapshot;
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("no {0} targets given")]
    EmptyTargets(&'static str),
    #[error("bus {bus} has no {kind}")]
    TargetNotFound { kind: &'static str, bus: usize },
    #[error("generator ratios must be positive with a positive sum")]
    BadRatios,
    #[error("knowledge deviation {value} at branch {branch} must satisfy |gamma| < 1")]
    BadDeviation { branch: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state delta at bus {bus} has no load or generator to carry it")]
    ZeroInjectionBus { bus: usize },
    #[error("attack spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Attacker specification: targeted loads with change rates, generators that
/// absorb the imbalance in fixed ratios, and per-branch reactance deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    /// `(load bus, beta)`; 0-based bus index, signed fractional change.
    pub load_targets: Vec<(usize, f64)>,
    /// `(generator bus, lambda)`; every generator at the bus takes the ratio.
    pub gen_targets: Vec<(usize, f64)>,
    /// Per-branch deviation ratios; empty means exact knowledge.
    pub knowledge_deviation: Vec<f64>,
}

impl AttackSpec {
    pub fn validate(&self, grid: &DcGrid) -> Result<(), AttackError> {
        let layout = &grid.layout;
        if self.load_targets.is_empty() {
            return Err(AttackError::EmptyTargets("load"));
        }
        if self.gen_targets.is_empty() {
            return Err(AttackError::EmptyTargets("generator"));
        }
        for &(bus, _) in &self.load_targets {
            if !layout.load_buses.contains(&bus) {
                return Err(AttackError::TargetNotFound {
                    kind: "load",
                    bus: bus + 1,
                });
            }
        }
        for &(bus, ratio) in &self.gen_targets {
            if !layout.generator_buses.contains(&bus) {
                return Err(AttackError::TargetNotFound {
                    kind: "generator",
                    bus: bus + 1,
                });
            }
            if !(ratio > 0.0) {
                return Err(AttackError::BadRatios);
            }
        }
        if !self.knowledge_deviation.is_empty() {
            if self.knowledge_deviation.len() != layout.n_branches {
                return Err(AttackError::DimensionMismatch {
                    expected: layout.n_branches,
                    got: self.knowledge_deviation.len(),
                });
            }
            for (t, &g) in self.knowledge_deviation.iter().enumerate() {
                if !(g.abs() < 1.0) {
                    return Err(AttackError::BadDeviation {
                        branch: t + 1,
                        value: g,
                    });
                }
            }
        }
        Ok(())
    }

    /// Same targets with every `beta` replaced by `beta`.
    pub fn with_uniform_rate(&self, beta: f64) -> Self {
        let mut s = self.clone();
        for t in &mut s.load_targets {
            t.1 = beta;
        }
        s
    }

    pub fn with_deviation(&self, gamma: Vec<f64>) -> Self {
        Self {
            knowledge_deviation: gamma,
            ..self.clone()
        }
    }
}

/// Additive attack in both feature space and nodal measurement space.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackVector {
    pub feature_delta: Vec<f64>,
    pub nodal_delta: DVector<f64>,
}

/// An attacker bound to a spec, holding its own (possibly wrong) PTDF.
#[derive(Debug, Clone)]
pub struct Attacker<'a> {
    grid: &'a DcGrid,
    spec: AttackSpec,
    ptdf: PtdfMatrix,
    /// Generator feature index and its share of the total load change.
    gen_shares: Vec<(usize, f64)>,
    load_indices: Vec<(usize, f64)>,
}

impl<'a> Attacker<'a> {
    pub fn new(grid: &'a DcGrid, spec: AttackSpec) -> Result<Self, AttackError> {
        spec.validate(grid)?;
        let ptdf = if spec.knowledge_deviation.iter().all(|g| *g == 0.0) {
            grid.ptdf.clone()
        } else {
            build_ptdf(&grid.network.with_reactance_deviation(&spec.knowledge_deviation)?)?
        };
        let layout = &grid.layout;
        let mut gen_shares = Vec::new();
        for &(bus, ratio) in &spec.gen_targets {
            for (g, _) in layout
                .generator_buses
                .iter()
                .enumerate()
                .filter(|(_, b)| **b == bus)
            {
                gen_shares.push((g, ratio));
            }
        }
        let total: f64 = gen_shares.iter().map(|s| s.1).sum();
        if !(total > 0.0) {
            return Err(AttackError::BadRatios);
        }
        for s in &mut gen_shares {
            s.1 /= total;
        }
        let load_indices = spec
            .load_targets
            .iter()
            .map(|&(bus, beta)| {
                let l = layout.load_buses.iter().position(|b| *b == bus).unwrap_or(0);
                (l, beta)
            })
            .collect();
        Ok(Self {
            grid,
            spec,
            ptdf,
            gen_shares,
            load_indices,
        })
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    /// The attacker's distribution factors.
    pub fn ptdf(&self) -> &PtdfMatrix {
        &self.ptdf
    }

    /// Builds the attack against the reported loads of `snapshot`.
    pub fn build(&self, snapshot: &OperatingSnapshot) -> Result<AttackVector, AttackError> {
        self.build_from_loads(&snapshot.loads)
    }

    /// Builds the attack from a measured feature vector.
    pub fn build_from_features(&self, features: &[f64]) -> Result<AttackVector, AttackError> {
        let layout = &self.grid.layout;
        if features.len() != layout.dim() {
            return Err(AttackError::DimensionMismatch {
                expected: layout.dim(),
                got: features.len(),
            });
        }
        self.build_from_loads(layout.split(features).0)
    }

    fn build_from_loads(&self, loads: &[f64]) -> Result<AttackVector, AttackError> {
        let layout = &self.grid.layout;
        if loads.len() != layout.n_loads() {
            return Err(AttackError::DimensionMismatch {
                expected: layout.n_loads(),
                got: loads.len(),
            });
        }
        let mut load_delta = vec![0.0; layout.n_loads()];
        for &(l, beta) in &self.load_indices {
            load_delta[l] += beta * loads[l];
        }
        let total: f64 = load_delta.iter().sum();
        let mut gen_delta = vec![0.0; layout.n_generators()];
        for &(g, share) in &self.gen_shares {
            gen_delta[g] += total * share;
        }
        let injections = layout.injections(&load_delta, &gen_delta);
        let flow_delta = self.ptdf.flows_slice(&injections);

        let mut feature_delta = load_delta;
        feature_delta.extend_from_slice(&gen_delta);
        feature_delta.extend_from_slice(&flow_delta);
        let mut nodal = injections;
        nodal.extend_from_slice(&flow_delta);
        Ok(AttackVector {
            feature_delta,
            nodal_delta: DVector::from_vec(nodal),
        })
    }
}

/// One-shot form of [`Attacker::build`].
pub fn build_attack_vector(
    grid: &DcGrid,
    spec: &AttackSpec,
    snapshot: &OperatingSnapshot,
) -> Result<AttackVector, AttackError> {
    Attacker::new(grid, spec.clone())?.build(snapshot)
}

/// Reactance deviation ratios `gamma_t = +/- magnitude` with independent
/// equiprobable signs.
pub fn perturb_reactances(n_branches: usize, gamma_magnitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeds::rng(seed);
    (0..n_branches)
        .map(|_| {
            if rng.random_bool(0.5) {
                gamma_magnitude
            } else {
                -gamma_magnitude
            }
        })
        .collect()
}

/// Stealthy attack `a = H c` for a state (injection) delta `c`.
///
/// The feature-space delta books `c_b` on the bus's generators when it has
/// any, otherwise as a negative change of its load.
pub fn stealthy_from_state_delta(grid: &DcGrid, c: &DVector<f64>) -> Result<AttackVector, AttackError> {
    let layout = &grid.layout;
    if c.len() != layout.n_buses {
        return Err(AttackError::DimensionMismatch {
            expected: layout.n_buses,
            got: c.len(),
        });
    }
    let nodal_delta = &grid.measurement.values * c;
    let mut load_delta = vec![0.0; layout.n_loads()];
    let mut gen_delta = vec![0.0; layout.n_generators()];
    for (bus, &cb) in c.iter().enumerate() {
        if cb == 0.0 {
            continue;
        }
        let gens: Vec<usize> = (0..layout.n_generators())
            .filter(|&g| layout.generator_buses[g] == bus)
            .collect();
        if !gens.is_empty() {
            for g in &gens {
                gen_delta[*g] += cb / gens.len() as f64;
            }
        } else if let Some(l) = layout.load_buses.iter().position(|b| *b == bus) {
            load_delta[l] -= cb;
        } else {
            return Err(AttackError::ZeroInjectionBus { bus: bus + 1 });
        }
    }
    let mut feature_delta = load_delta;
    feature_delta.extend_from_slice(&gen_delta);
    feature_delta.extend(nodal_delta.rows(layout.n_buses, layout.n_branches).iter());
    Ok(AttackVector {
        feature_delta,
        nodal_delta,
    })
}

/// Measured features plus the attack's feature delta.
pub fn apply_attack(features: &[f64], attack: &AttackVector) -> Result<Vec<f64>, AttackError> {
    if features.len() != attack.feature_delta.len() {
        return Err(AttackError::DimensionMismatch {
            expected: attack.feature_delta.len(),
            got: features.len(),
        });
    }
    Ok(features
        .iter()
        .zip(&attack.feature_delta)
        .map(|(a, b)| a + b)
        .collect())
}

/// Textual attack description used by the CLI:
///
/// ```text
/// loads 108:-0.10,109:-0.10,110:-0.10; gens 110:1,111:1; gamma 0.05; seed 7
/// ```
///
/// Bus numbers are 1-based. `gamma` (reactance deviation magnitude) and
/// `seed` (sign draw) are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// `(bus, beta)` with 1-based bus numbers.
    pub loads: Vec<(usize, f64)>,
    pub gens: Vec<(usize, f64)>,
    pub gamma: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// Load-reduction attack on loads 108, 109, 110 balanced by the
    /// generators at 110 and 111 in equal ratio.
    pub fn reference(magnitude: f64) -> Self {
        Self {
            loads: vec![(108, -magnitude), (109, -magnitude), (110, -magnitude)],
            gens: vec![(110, 1.0), (111, 1.0)],
            gamma: 0.0,
            seed: 0,
        }
    }

    /// Resolves bus numbers and draws the deviation signs.
    pub fn to_spec(&self, grid: &DcGrid) -> Result<AttackSpec, AttackError> {
        let zero_based = |v: &[(usize, f64)]| -> Result<Vec<(usize, f64)>, AttackError> {
            v.iter()
                .map(|&(b, x)| {
                    if b == 0 {
                        Err(AttackError::Parse("bus numbers are 1-based".into()))
                    } else {
                        Ok((b - 1, x))
                    }
                })
                .collect()
        };
        let knowledge_deviation = if self.gamma == 0.0 {
            Vec::new()
        } else {
            perturb_reactances(grid.layout.n_branches, self.gamma, self.seed)
        };
        let spec = AttackSpec {
            load_targets: zero_based(&self.loads)?,
            gen_targets: zero_based(&self.gens)?,
            knowledge_deviation,
        };
        spec.validate(grid)?;
        Ok(spec)
    }
}

impl FromStr for AttackConfig {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        fn pairs(body: &str) -> Result<Vec<(usize, f64)>, AttackError> {
            body.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|tok| {
                    let (b, v) = tok
                        .split_once(':')
                        .ok_or_else(|| AttackError::Parse(format!("expected <bus>:<value>, found `{tok}`")))?;
                    let bus = b
                        .trim()
                        .parse()
                        .map_err(|_| AttackError::Parse(format!("invalid bus `{}` in `{tok}`", b.trim())))?;
                    let val = v
                        .trim()
                        .parse()
                        .map_err(|_| AttackError::Parse(format!("invalid value `{}` in `{tok}`", v.trim())))?;
                    Ok((bus, val))
                })
                .collect()
        }

        let mut cfg = AttackConfig {
            loads: Vec::new(),
            gens: Vec::new(),
            gamma: 0.0,
            seed: 0,
        };
        for clause in s.split(';').map(str::trim).filter(|c| !c.is_empty()) {
            let (key, body) = clause
                .split_once(char::is_whitespace)
                .ok_or_else(|| AttackError::Parse(format!("clause `{clause}` has no value")))?;
            let body = body.trim();
            match key {
                "loads" => cfg.loads = pairs(body)?,
                "gens" => cfg.gens = pairs(body)?,
                "gamma" => {
                    cfg.gamma = body
                        .parse()
                        .map_err(|_| AttackError::Parse(format!("invalid gamma `{body}`")))?
                }
                "seed" => {
                    cfg.seed = body
                        .parse()
                        .map_err(|_| AttackError::Parse(format!("invalid seed `{body}`")))?
                }
                other => return Err(AttackError::Parse(format!("unknown clause `{other}`"))),
            }
        }
        if cfg.loads.is_empty() {
            return Err(AttackError::EmptyTargets("load"));
        }
        if cfg.gens.is_empty() {
            return Err(AttackError::EmptyTargets("generator"));
        }
        if !(0.0..1.0).contains(&cfg.gamma) {
            return Err(AttackError::Parse(format!("gamma {} outside [0, 1)", cfg.gamma)));
        }
        Ok(cfg)
    }
}

impl fmt::Display for AttackConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[(usize, f64)]| {
            v.iter()
                .map(|(b, x)| format!("{b}:{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "loads {}; gens {}; gamma {}; seed {}",
            join(&self.loads),
            join(&self.gens),
            self.gamma,
            self.seed
        )
    }
}
