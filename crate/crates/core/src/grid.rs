//! Network description and the DC power-flow model.
//!
//! Bus indices are 0-based everywhere in the API. The case-file format and
//! all user-facing names (`load_108`, error messages) use 1-based numbers.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("network is disconnected: bus {bus} is unreachable from bus 1")]
    DisconnectedGraph { bus: usize },
    #[error("branch {branch} ({from}-{to}) has non-positive reactance {reactance}")]
    NonpositiveReactance {
        branch: usize,
        from: usize,
        to: usize,
        reactance: f64,
    },
    #[error("bad bus index in {element}: {bus}")]
    BadBusIndex { element: String, bus: usize },
    #[error("reduced susceptance matrix is not positive definite")]
    SingularSystem,
    #[error("injections are unbalanced: sum = {sum} MW")]
    UnbalancedInjections { sum: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("case file line {line}: {message}")]
    CaseParse { line: usize, message: String },
    #[error("cannot read case file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series reactance in per unit.
    pub reactance: f64,
}

impl Branch {
    pub fn new(from: usize, to: usize, reactance: f64) -> Self {
        Self {
            from,
            to,
            reactance,
        }
    }
}

/// Buses, branches, reference bus and device placement.
///
/// Generator and load bus lists are kept sorted ascending; that order is the
/// feature order of every dataset built on this network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub n_buses: usize,
    pub branches: Vec<Branch>,
    pub reference_bus: usize,
    pub generator_buses: Vec<usize>,
    pub load_buses: Vec<usize>,
}

impl NetworkModel {
    /// Builds and validates a network.
    pub fn new(
        n_buses: usize,
        branches: Vec<Branch>,
        reference_bus: usize,
        mut generator_buses: Vec<usize>,
        mut load_buses: Vec<usize>,
    ) -> Result<Self, GridError> {
        generator_buses.sort_unstable();
        load_buses.sort_unstable();
        validate_network(Self {
            n_buses,
            branches,
            reference_bus,
            generator_buses,
            load_buses,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Number of nodal measurements, `n_b + n_t`.
    pub fn n_measurements(&self) -> usize {
        self.n_buses + self.branches.len()
    }

    /// Node-branch incidence matrix `A` (`n_b x n_t`): +1 at the from bus,
    /// -1 at the to bus, so that `A * flows` gives nodal injections.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_buses, self.branches.len());
        for (t, br) in self.branches.iter().enumerate() {
            a[(br.from, t)] = 1.0;
            a[(br.to, t)] = -1.0;
        }
        a
    }

    /// Copy of the network with every reactance scaled by `1 + deviation[t]`.
    pub fn with_reactance_deviation(&self, deviation: &[f64]) -> Result<Self, GridError> {
        if deviation.len() != self.branches.len() {
            return Err(GridError::DimensionMismatch {
                expected: self.branches.len(),
                got: deviation.len(),
            });
        }
        let mut net = self.clone();
        for (br, g) in net.branches.iter_mut().zip(deviation) {
            br.reactance *= 1.0 + g;
        }
        validate_network(net)
    }

    /// Column names of the feature vector in feature order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(
            self.load_buses.len() + self.generator_buses.len() + self.branches.len(),
        );
        names.extend(self.load_buses.iter().map(|b| format!("load_{}", b + 1)));
        let mut gen_seen = std::collections::HashMap::new();
        for b in &self.generator_buses {
            let k = gen_seen.entry(*b).or_insert(0usize);
            *k += 1;
            if *k == 1 {
                names.push(format!("gen_{}", b + 1));
            } else {
                names.push(format!("gen_{}_{}", b + 1, k));
            }
        }
        let mut seen = std::collections::HashMap::new();
        for br in &self.branches {
            let k = seen.entry((br.from, br.to)).or_insert(0usize);
            *k += 1;
            if *k == 1 {
                names.push(format!("flow_{}_{}", br.from + 1, br.to + 1));
            } else {
                // parallel circuit
                names.push(format!("flow_{}_{}_{}", br.from + 1, br.to + 1, k));
            }
        }
        names
    }

    /// Serializes the network in case-file format.
    pub fn to_case_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "buses {} ref {}", self.n_buses, self.reference_bus + 1);
        for br in &self.branches {
            let _ = writeln!(s, "branch {} {} {}", br.from + 1, br.to + 1, br.reactance);
        }
        for g in &self.generator_buses {
            let _ = writeln!(s, "gen {}", g + 1);
        }
        for l in &self.load_buses {
            let _ = writeln!(s, "load {}", l + 1);
        }
        s
    }

    /// Parses the line-oriented case format:
    ///
    /// ```text
    /// buses <n_b> ref <r>
    /// branch <from> <to> <x>
    /// gen <bus>
    /// load <bus>
    /// ```
    ///
    /// `#` starts a comment. Bus numbers are 1-based.
    pub fn parse_case(text: &str) -> Result<Self, GridError> {
        let mut header: Option<(usize, usize)> = None;
        let mut branches = Vec::new();
        let mut gens = Vec::new();
        let mut loads = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let err = |message: &str| GridError::CaseParse {
                line: line_no,
                message: message.to_string(),
            };
            let bus = |tok: &str| -> Result<usize, GridError> {
                let b: usize = tok
                    .parse()
                    .map_err(|_| err(&format!("invalid bus number `{tok}`")))?;
                if b == 0 {
                    return Err(err("bus numbers are 1-based"));
                }
                Ok(b - 1)
            };
            match toks[0] {
                "buses" => {
                    if toks.len() != 4 || toks[2] != "ref" {
                        return Err(err("expected `buses <n> ref <r>`"));
                    }
                    if header.is_some() {
                        return Err(err("duplicate header"));
                    }
                    let n: usize = toks[1]
                        .parse()
                        .map_err(|_| err(&format!("invalid bus count `{}`", toks[1])))?;
                    header = Some((n, bus(toks[3])?));
                }
                "branch" => {
                    if toks.len() != 4 {
                        return Err(err("expected `branch <from> <to> <x>`"));
                    }
                    let x: f64 = toks[3]
                        .parse()
                        .map_err(|_| err(&format!("invalid reactance `{}`", toks[3])))?;
                    branches.push(Branch::new(bus(toks[1])?, bus(toks[2])?, x));
                }
                "gen" | "load" => {
                    if toks.len() != 2 {
                        return Err(err(&format!("expected `{} <bus>`", toks[0])));
                    }
                    let b = bus(toks[1])?;
                    if toks[0] == "gen" {
                        gens.push(b);
                    } else {
                        loads.push(b);
                    }
                }
                other => return Err(err(&format!("unknown record `{other}`"))),
            }
        }
        let (n_buses, reference_bus) = header.ok_or(GridError::CaseParse {
            line: 0,
            message: "missing `buses <n> ref <r>` header".into(),
        })?;
        Self::new(n_buses, branches, reference_bus, gens, loads)
    }

    pub fn from_case_file(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path).map_err(|e| GridError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_case(&text)
    }
}

/// Checks every structural invariant of a network and returns it unchanged.
pub fn validate_network(net: NetworkModel) -> Result<NetworkModel, GridError> {
    let n = net.n_buses;
    let bad = |element: String, bus: usize| GridError::BadBusIndex { element, bus: bus + 1 };
    if n == 0 {
        return Err(GridError::BadBusIndex {
            element: "bus count".into(),
            bus: 0,
        });
    }
    if net.reference_bus >= n {
        return Err(bad("reference bus".into(), net.reference_bus));
    }
    for (t, br) in net.branches.iter().enumerate() {
        for b in [br.from, br.to] {
            if b >= n {
                return Err(bad(format!("branch {}", t + 1), b));
            }
        }
        if br.from == br.to {
            return Err(bad(format!("branch {} (self loop)", t + 1), br.from));
        }
        if !(br.reactance > 0.0) || !br.reactance.is_finite() {
            return Err(GridError::NonpositiveReactance {
                branch: t + 1,
                from: br.from + 1,
                to: br.to + 1,
                reactance: br.reactance,
            });
        }
    }
    for &g in &net.generator_buses {
        if g >= n {
            return Err(bad("generator".into(), g));
        }
    }
    for w in net.load_buses.windows(2) {
        if w[0] == w[1] {
            return Err(bad("load (duplicate)".into(), w[0]));
        }
    }
    for &l in &net.load_buses {
        if l >= n {
            return Err(bad("load".into(), l));
        }
    }

    let mut adj = vec![Vec::new(); n];
    for br in &net.branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(b) = queue.pop_front() {
        for &nb in &adj[b] {
            if !seen[nb] {
                seen[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    if let Some(b) = seen.iter().position(|s| !s) {
        return Err(GridError::DisconnectedGraph { bus: b + 1 });
    }
    Ok(net)
}

/// Power transfer distribution factors, `n_t x n_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PtdfMatrix {
    pub values: DMatrix<f64>,
}

impl PtdfMatrix {
    pub fn flows(&self, injections: &DVector<f64>) -> DVector<f64> {
        &self.values * injections
    }

    pub fn flows_slice(&self, injections: &[f64]) -> Vec<f64> {
        let p = DVector::from_column_slice(injections);
        (&self.values * p).as_slice().to_vec()
    }
}

/// Measurement matrix `H = [I; H^F]`, `(n_b + n_t) x n_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    pub values: DMatrix<f64>,
}

impl MeasurementMatrix {
    pub fn new(ptdf: &PtdfMatrix) -> Self {
        let (nt, nb) = ptdf.values.shape();
        let mut h = DMatrix::zeros(nb + nt, nb);
        h.view_mut((0, 0), (nb, nb)).fill_with_identity();
        h.view_mut((nb, 0), (nt, nb)).copy_from(&ptdf.values);
        Self { values: h }
    }

    pub fn n_states(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_measurements(&self) -> usize {
        self.values.nrows()
    }
}

/// Reduced susceptance matrix `B_r = A_r X^{-1} A_r^T` with the reference bus
/// row and column removed.
fn reduced_susceptance(net: &NetworkModel) -> DMatrix<f64> {
    let n = net.n_buses - 1;
    let r = net.reference_bus;
    let idx = |b: usize| if b < r { Some(b) } else if b > r { Some(b - 1) } else { None };
    let mut b = DMatrix::zeros(n, n);
    for br in &net.branches {
        let y = 1.0 / br.reactance;
        let (i, j) = (idx(br.from), idx(br.to));
        if let Some(i) = i {
            b[(i, i)] += y;
        }
        if let Some(j) = j {
            b[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (i, j) {
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
    }
    b
}

fn remove_reference(net: &NetworkModel, v: &DVector<f64>) -> DVector<f64> {
    let r = net.reference_bus;
    DVector::from_iterator(
        net.n_buses - 1,
        v.iter()
            .enumerate()
            .filter(|(i, _)| *i != r)
            .map(|(_, x)| *x),
    )
}

/// Builds `H^F = X^{-1} A^T B^{-1}` over the reduced system and re-inserts a
/// zero column for the reference bus.
pub fn build_ptdf(net: &NetworkModel) -> Result<PtdfMatrix, GridError> {
    let nb = net.n_buses;
    let nt = net.n_branches();
    let r = net.reference_bus;
    if nb == 1 {
        return Ok(PtdfMatrix {
            values: DMatrix::zeros(nt, 1),
        });
    }
    let chol = reduced_susceptance(net)
        .cholesky()
        .ok_or(GridError::SingularSystem)?;
    let x_inv = chol.inverse();
    let mut values = DMatrix::zeros(nt, nb);
    for (t, br) in net.branches.iter().enumerate() {
        let y = 1.0 / br.reactance;
        // row t of H^F = y * (e_from - e_to)^T B_r^{-1}, restricted to non-reference buses
        for (col, bus) in (0..nb).filter(|&b| b != r).enumerate() {
            let mut v = 0.0;
            if br.from != r {
                let i = if br.from < r { br.from } else { br.from - 1 };
                v += x_inv[(i, col)];
            }
            if br.to != r {
                let j = if br.to < r { br.to } else { br.to - 1 };
                v -= x_inv[(j, col)];
            }
            values[(t, bus)] = y * v;
        }
    }
    Ok(PtdfMatrix { values })
}

/// Injections, flows and angles of a DC power-flow solution.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub injections: DVector<f64>,
    pub flows: DVector<f64>,
    /// Bus voltage angles with the reference angle fixed at 0 (radians when
    /// injections are given in per unit).
    pub angles: DVector<f64>,
}

/// Checks `|sum(p)| <= 1e-6 * max(1, ||p||_inf)`.
pub fn check_balance(injections: &[f64]) -> Result<(), GridError> {
    let sum: f64 = injections.iter().sum();
    let scale = injections.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if sum.abs() > 1e-6 * scale {
        return Err(GridError::UnbalancedInjections { sum });
    }
    Ok(())
}

/// Solves the DC power flow for a balanced injection vector.
pub fn dc_power_flow(
    net: &NetworkModel,
    injections: &DVector<f64>,
) -> Result<PowerFlowSolution, GridError> {
    let nb = net.n_buses;
    if injections.len() != nb {
        return Err(GridError::DimensionMismatch {
            expected: nb,
            got: injections.len(),
        });
    }
    check_balance(injections.as_slice())?;
    let mut angles = DVector::zeros(nb);
    if nb > 1 {
        let chol = reduced_susceptance(net)
            .cholesky()
            .ok_or(GridError::SingularSystem)?;
        let theta_r = chol.solve(&remove_reference(net, injections));
        let r = net.reference_bus;
        for (k, b) in (0..nb).filter(|&b| b != r).enumerate() {
            angles[b] = theta_r[k];
        }
    }
    let flows = DVector::from_iterator(
        net.n_branches(),
        net.branches
            .iter()
            .map(|br| (angles[br.from] - angles[br.to]) / br.reactance),
    );
    Ok(PowerFlowSolution {
        injections: injections.clone(),
        flows,
        angles,
    })
}

/// Index map between the feature vector (loads, generations, flows) and the
/// nodal measurement vector `z = [P^I; P^F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub n_buses: usize,
    pub load_buses: Vec<usize>,
    pub generator_buses: Vec<usize>,
    pub n_branches: usize,
    pub names: Vec<String>,
}

impl FeatureLayout {
    pub fn new(net: &NetworkModel) -> Self {
        Self {
            n_buses: net.n_buses,
            load_buses: net.load_buses.clone(),
            generator_buses: net.generator_buses.clone(),
            n_branches: net.n_branches(),
            names: net.feature_names(),
        }
    }

    pub fn n_loads(&self) -> usize {
        self.load_buses.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generator_buses.len()
    }

    /// Feature dimension `N + M + n_t`.
    pub fn dim(&self) -> usize {
        self.n_loads() + self.n_generators() + self.n_branches
    }

    pub fn n_measurements(&self) -> usize {
        self.n_buses + self.n_branches
    }

    pub fn load_offset(&self) -> usize {
        0
    }

    pub fn generator_offset(&self) -> usize {
        self.n_loads()
    }

    pub fn flow_offset(&self) -> usize {
        self.n_loads() + self.n_generators()
    }

    /// Splits a feature vector into (loads, generations, flows).
    pub fn split<'a>(&self, features: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (loads, rest) = features.split_at(self.n_loads());
        let (gens, flows) = rest.split_at(self.n_generators());
        (loads, gens, flows)
    }

    /// Nodal injections `P^I_b = sum(gen at b) - sum(load at b)`.
    pub fn injections(&self, loads: &[f64], generations: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n_buses];
        for (&g, &b) in generations.iter().zip(&self.generator_buses) {
            p[b] += g;
        }
        for (&l, &b) in loads.iter().zip(&self.load_buses) {
            p[b] -= l;
        }
        p
    }

    /// Maps a feature vector to the nodal measurement vector.
    pub fn to_nodal(&self, features: &[f64]) -> Result<DVector<f64>, GridError> {
        if features.len() != self.dim() {
            return Err(GridError::DimensionMismatch {
                expected: self.dim(),
                got: features.len(),
            });
        }
        let (loads, gens, flows) = self.split(features);
        let mut z = self.injections(loads, gens);
        z.extend_from_slice(flows);
        Ok(DVector::from_vec(z))
    }
}

/// A validated network bundled with its PTDF, measurement matrix and
/// feature layout.
#[derive(Debug, Clone)]
pub struct DcGrid {
    pub network: NetworkModel,
    pub ptdf: PtdfMatrix,
    pub measurement: MeasurementMatrix,
    pub layout: FeatureLayout,
}

impl DcGrid {
    pub fn new(network: NetworkModel) -> Result<Self, GridError> {
        let network = validate_network(network)?;
        let ptdf = build_ptdf(&network)?;
        let measurement = MeasurementMatrix::new(&ptdf);
        let layout = FeatureLayout::new(&network);
        Ok(Self {
            network,
            ptdf,
            measurement,
            layout,
        })
    }
}
