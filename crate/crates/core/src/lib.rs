//! Synthetic power-system operating data, false data injection attack (FDIA)
//! synthesis against DC state estimation, and an autoencoder anomaly detector.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: network description, PTDF and measurement matrices, DC power flow.
//! - [`estimation`]: weighted least squares state estimation and the
//!   residual-norm bad data detector.
//! - [`scenario`]: load profiles, economic dispatch, noisy snapshots and datasets.
//! - [`attack`]: load-targeted, stealthy and knowledge-limited attack vectors.
//! - [`autoencoder`]: a fully connected autoencoder trained with Adam.
//! - [`eval`]: confusion counts, detection curves and report serialization.

pub mod attack;
pub mod autoencoder;
pub mod estimation;
pub mod eval;
pub mod grid;
pub mod scenario;
pub mod seeds;
pub mod stats;

pub use attack::{AttackConfig, AttackSpec, AttackVector, Attacker};
pub use autoencoder::{DetectorState, NetworkArchitecture, TrainConfig};
pub use estimation::{BddDetector, NoiseModel, WlsEstimator};
pub use grid::{DcGrid, FeatureLayout, NetworkModel, PtdfMatrix};
pub use scenario::{Dataset, OperatingSnapshot};
