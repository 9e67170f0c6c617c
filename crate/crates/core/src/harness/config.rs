use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{AttackPolicy, InputPolicy};
use crate::dynamics::Activation;
use crate::error::{invalid, Result};
use crate::estimators::{Norm, SolverConfig};
use crate::features::DEFAULT_REG_GRID;

pub const DESK_MAX_STATE_DIM: usize = 20;
pub const DESK_MAX_HORIZON: usize = 2000;
pub const DESK_MAX_SEEDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    CompareLsL2,
    CompareNorms,
    SweepTauRho,
    LowerBound,
    Custom,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::CompareLsL2 => "CompareLsL2",
            ExperimentKind::CompareNorms => "CompareNorms",
            ExperimentKind::SweepTauRho => "SweepTauRho",
            ExperimentKind::LowerBound => "LowerBound",
            ExperimentKind::Custom => "Custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Paper,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(invalid(format!("unknown scale {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemBlock {
    #[serde(rename = "n")]
    pub state_dim: usize,
    #[serde(rename = "m")]
    pub input_dim: usize,
    #[serde(rename = "r")]
    pub obs_dim: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// ρ grid. Empty means the experiment's default.
    pub rho: Vec<f64>,
    /// τ grid. Empty means the experiment's default.
    pub tau: Vec<usize>,
    pub activation: Activation,
    /// Every coordinate of x₀.
    pub x0: f64,
}

impl Default for SystemBlock {
    fn default() -> Self {
        SystemBlock {
            state_dim: 20,
            input_dim: 5,
            obs_dim: 10,
            horizon: 500,
            rho: Vec::new(),
            tau: Vec::new(),
            activation: Activation::Tanh,
            x0: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackBlock {
    /// Attack probability; `None` means 1/(2τ+1) for each τ.
    pub p: Option<f64>,
    pub kind: String,
    pub params: Vec<f64>,
    /// Whether the run claims p < 1/(2τ). Violations are then rejected.
    pub claims_restriction: bool,
}

impl Default for AttackBlock {
    fn default() -> Self {
        AttackBlock {
            p: None,
            kind: "SignedMeanGaussian".into(),
            params: vec![300.0, 1000.0, 25.0],
            claims_restriction: true,
        }
    }
}

impl AttackBlock {
    pub fn policy(&self, tau: usize) -> Result<AttackPolicy> {
        let p = self.p.unwrap_or_else(|| AttackPolicy::probability_for_memory(tau));
        let value = serde_json::json!({ "p": p, "kind": self.kind, "params": self.params });
        let policy: AttackPolicy = serde_json::from_value(value).map_err(|e| invalid(format!("attack block: {e}")))?;
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisBlock {
    /// Number of kernel sections M.
    #[serde(rename = "M")]
    pub count: usize,
    pub degree: i32,
    /// Entries of kernel centers and ground-truth windows are Unif[lo, hi].
    pub window_lo: f64,
    pub window_hi: f64,
    pub gt_samples: usize,
    pub train_fraction: f64,
    pub reg_grid: Vec<f64>,
    pub excitation_samples: usize,
    pub lipschitz_pairs: usize,
}

impl Default for BasisBlock {
    fn default() -> Self {
        BasisBlock {
            count: 25,
            degree: 3,
            window_lo: -15.0,
            window_hi: 15.0,
            gt_samples: 1000,
            train_fraction: 0.8,
            reg_grid: DEFAULT_REG_GRID.to_vec(),
            excitation_samples: 20_000,
            lipschitz_pairs: 3_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksBlock {
    pub n_directions: usize,
    pub delta: f64,
}

impl Default for ChecksBlock {
    fn default() -> Self {
        ChecksBlock {
            n_directions: 10_000,
            delta: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowerBoundBlock {
    pub rho: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub tau: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub delta: f64,
    pub kappa: f64,
    pub n_seeds: usize,
    pub excitation_samples: usize,
}

impl Default for LowerBoundBlock {
    fn default() -> Self {
        LowerBoundBlock {
            rho: 0.5,
            l: 1.0,
            tau: 5,
            horizon: 500,
            delta: 0.1,
            kappa: crate::theory::DEFAULT_KAPPA,
            n_seeds: 1000,
            excitation_samples: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub scale: Scale,
    pub system: SystemBlock,
    /// Input families. Empty means the experiment's default.
    pub inputs: Vec<InputPolicy>,
    pub attack: AttackBlock,
    pub basis: BasisBlock,
    pub solver: SolverConfig,
    /// Estimators to run. Empty means the experiment's default.
    pub estimators: Vec<Norm>,
    pub n_seeds: usize,
    pub base_seed: u64,
    /// Number of evaluation horizons; Δ = T / eval_points.
    pub eval_points: usize,
    pub checks: ChecksBlock,
    pub lower_bound: LowerBoundBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::CompareLsL2,
            scale: Scale::Desk,
            system: SystemBlock::default(),
            inputs: Vec::new(),
            attack: AttackBlock::default(),
            basis: BasisBlock::default(),
            solver: SolverConfig::default(),
            estimators: Vec::new(),
            n_seeds: 10,
            base_seed: 0,
            eval_points: 50,
            checks: ChecksBlock::default(),
            lower_bound: LowerBoundBlock::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for one experiment at one scale.
    pub fn preset(experiment: ExperimentKind, scale: Scale) -> Self {
        let mut cfg = ExperimentConfig {
            experiment,
            scale,
            ..Default::default()
        };
        if scale == Scale::Paper {
            cfg.system.state_dim = 100;
        }
        cfg.resolve_defaults();
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.resolve_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills every "empty means default" field.
    pub fn resolve_defaults(&mut self) {
        let sweep = self.experiment == ExperimentKind::SweepTauRho;
        if self.system.rho.is_empty() {
            self.system.rho = if sweep { vec![0.25, 0.5] } else { vec![0.5] };
        }
        if self.system.tau.is_empty() {
            self.system.tau = if sweep { vec![5, 10] } else { vec![5] };
        }
        if self.inputs.is_empty() {
            self.inputs = if sweep {
                vec![InputPolicy::uniform(-8.0, 10.0)]
            } else {
                vec![InputPolicy::gaussian(100.0), InputPolicy::uniform(-8.0, 10.0)]
            };
        }
        if self.estimators.is_empty() {
            self.estimators = match self.experiment {
                ExperimentKind::CompareLsL2 => vec![Norm::SquaredL2, Norm::L2],
                ExperimentKind::CompareNorms => vec![Norm::L1, Norm::L2, Norm::Linf],
                ExperimentKind::SweepTauRho | ExperimentKind::LowerBound => vec![Norm::L2],
                ExperimentKind::Custom => vec![Norm::SquaredL2, Norm::L1, Norm::L2, Norm::Linf],
            };
        }
    }

    /// Clamps the size parameters to the desk caps when `scale` is Desk.
    pub fn apply_scale(&mut self, scale: Scale) {
        self.scale = scale;
        if scale == Scale::Desk {
            self.system.state_dim = self.system.state_dim.min(DESK_MAX_STATE_DIM);
            self.system.horizon = self.system.horizon.min(DESK_MAX_HORIZON);
            self.n_seeds = self.n_seeds.min(DESK_MAX_SEEDS);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.state_dim == 0 || s.input_dim == 0 || s.obs_dim == 0 {
            return Err(invalid("system dimensions must be positive"));
        }
        if self.scale == Scale::Desk
            && (s.state_dim > DESK_MAX_STATE_DIM || s.horizon > DESK_MAX_HORIZON || self.n_seeds > DESK_MAX_SEEDS)
        {
            return Err(invalid(format!(
                "desk scale caps n ≤ {DESK_MAX_STATE_DIM}, T ≤ {DESK_MAX_HORIZON}, seeds ≤ {DESK_MAX_SEEDS}"
            )));
        }
        if self.n_seeds == 0 {
            return Err(invalid("n_seeds must be at least 1"));
        }
        if s.rho.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(invalid("every ρ must lie in (0, 1)"));
        }
        for &tau in &s.tau {
            if s.horizon <= tau + 1 {
                return Err(invalid(format!("horizon {} too short for τ = {tau}", s.horizon)));
            }
            let policy = self.attack.policy(tau)?;
            policy.check_rate(tau, self.attack.claims_restriction)?;
        }
        for input in &self.inputs {
            input.validate(s.input_dim)?;
        }
        if self.eval_points == 0 {
            return Err(invalid("eval_points must be positive"));
        }
        if self.basis.count == 0 || self.basis.degree < 1 || !(self.basis.window_hi > self.basis.window_lo) {
            return Err(invalid("basis block needs M ≥ 1, degree ≥ 1 and a non-empty window range"));
        }
        if self.basis.gt_samples < self.basis.count {
            return Err(invalid("gt_samples must be at least M"));
        }
        if self.checks.n_directions == 0 || !(self.checks.delta > 0.0 && self.checks.delta < 1.0) {
            return Err(invalid("checks need n_directions ≥ 1 and 0 < δ < 1"));
        }
        self.solver.validate()
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.base_seed + k)
    }

    /// SHA-256 of the canonical JSON of everything that affects results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// First 16 hex digits of `hash`, used in CSV rows.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}
