//! Control-input designs and filtration-adapted adversarial disturbances.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq)]
pub enum InputKind {
    GaussianIso { mean: Vec<f64>, variance: f64 },
    UniformBox { lo: f64, hi: f64 },
    Rademacher,
    Zero,
}

/// Distribution of the i.i.d. control inputs u_t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InputPolicyDoc", into = "InputPolicyDoc")]
pub struct InputPolicy {
    pub kind: InputKind,
    /// Sub-Gaussian proxy: standard deviation, box half-width, or 1 for signs.
    pub sigma_u: f64,
}

impl InputPolicy {
    pub fn gaussian(variance: f64) -> Self {
        Self::gaussian_with_mean(Vec::new(), variance)
    }

    /// An empty `mean` means zero mean in every coordinate.
    pub fn gaussian_with_mean(mean: Vec<f64>, variance: f64) -> Self {
        InputPolicy {
            kind: InputKind::GaussianIso { mean, variance },
            sigma_u: variance.sqrt(),
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        InputPolicy {
            kind: InputKind::UniformBox { lo, hi },
            sigma_u: 0.5 * (hi - lo),
        }
    }

    pub fn rademacher() -> Self {
        InputPolicy {
            kind: InputKind::Rademacher,
            sigma_u: 1.0,
        }
    }

    pub fn zero() -> Self {
        InputPolicy {
            kind: InputKind::Zero,
            sigma_u: 0.0,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        match &self.kind {
            InputKind::GaussianIso { mean, variance } => {
                if !(*variance > 0.0) || !variance.is_finite() {
                    return Err(invalid("Gaussian input variance must be positive"));
                }
                if !mean.is_empty() && mean.len() != input_dim {
                    return Err(invalid(format!(
                        "Gaussian input mean has {} entries, input_dim is {input_dim}",
                        mean.len()
                    )));
                }
            }
            InputKind::UniformBox { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(invalid("uniform input box needs finite lo < hi"));
                }
            }
            InputKind::Rademacher | InputKind::Zero => {}
        }
        Ok(())
    }

    /// One draw of u_t in dimension `dim`.
    pub fn draw(&self, dim: usize, rng: &mut StreamRng) -> Array1<f64> {
        match &self.kind {
            InputKind::Zero => Array1::zeros(dim),
            InputKind::Rademacher => {
                Array1::from_shape_fn(dim, |_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            }
            InputKind::UniformBox { lo, hi } => {
                Array1::from_shape_fn(dim, |_| rng.random_range(*lo..*hi))
            }
            InputKind::GaussianIso { mean, variance } => {
                let normal = Normal::new(0.0, variance.sqrt()).expect("validated variance");
                Array1::from_shape_fn(dim, |i| {
                    mean.get(i).copied().unwrap_or(0.0) + normal.sample(rng)
                })
            }
        }
    }

    /// Short family name used in result tables, e.g. `gaussian:100` or `uniform:-8:10`.
    pub fn label(&self) -> String {
        match &self.kind {
            InputKind::GaussianIso { mean, variance } if mean.iter().all(|&m| m == 0.0) => {
                format!("gaussian:{variance}")
            }
            InputKind::GaussianIso { variance, .. } => format!("gaussian-shifted:{variance}"),
            InputKind::UniformBox { lo, hi } => format!("uniform:{lo}:{hi}"),
            InputKind::Rademacher => "rademacher".into(),
            InputKind::Zero => "zero".into(),
        }
    }

    /// Per-coordinate mean of the input distribution.
    pub fn coordinate_mean(&self, i: usize) -> f64 {
        match &self.kind {
            InputKind::GaussianIso { mean, .. } => mean.get(i).copied().unwrap_or(0.0),
            InputKind::UniformBox { lo, hi } => 0.5 * (lo + hi),
            InputKind::Rademacher | InputKind::Zero => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdversaryKind {
    /// w^i = sgn(x^i)·γ with γ ~ N(mean_pos, variance) if x^i ≥ 0, N(mean_neg, variance) otherwise.
    SignedMeanGaussian {
        mean_pos: f64,
        mean_neg: f64,
        variance: f64,
    },
    /// Every coordinate equals `value` whenever the attack fires.
    ConstantSigma { value: f64 },
    None,
}

/// Bernoulli(p) attack schedule plus the map the adversary uses when it fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AttackPolicyDoc", into = "AttackPolicyDoc")]
pub struct AttackPolicy {
    pub p: f64,
    pub kind: AdversaryKind,
    pub sigma_w: f64,
}

impl AttackPolicy {
    pub fn none() -> Self {
        AttackPolicy {
            p: 0.0,
            kind: AdversaryKind::None,
            sigma_w: 0.0,
        }
    }

    pub fn signed_mean_gaussian(p: f64, mean_pos: f64, mean_neg: f64, variance: f64) -> Self {
        AttackPolicy {
            p,
            kind: AdversaryKind::SignedMeanGaussian {
                mean_pos,
                mean_neg,
                variance,
            },
            sigma_w: mean_pos.abs().max(mean_neg.abs()) + variance.sqrt(),
        }
    }

    pub fn constant(p: f64, value: f64) -> Self {
        AttackPolicy {
            p,
            kind: AdversaryKind::ConstantSigma { value },
            sigma_w: value.abs(),
        }
    }

    /// The attack probability used by the experiments: 1/(2τ+1).
    pub fn probability_for_memory(tau: usize) -> f64 {
        1.0 / (2.0 * tau as f64 + 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid(format!("attack probability {} outside [0, 1]", self.p)));
        }
        if let AdversaryKind::SignedMeanGaussian { variance, .. } = self.kind {
            if !(variance >= 0.0) {
                return Err(invalid("adversary variance must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Whether p < 1/(2τ), the attack-rate restriction under which ℓ2 recovery is guaranteed.
    pub fn satisfies_rate_restriction(&self, tau: usize) -> bool {
        tau == 0 || self.p < 1.0 / (2.0 * tau as f64)
    }

    /// Enforces the rate restriction when the run claims it; otherwise returns
    /// a warning string for ablation runs that knowingly violate it.
    pub fn check_rate(&self, tau: usize, claims_restriction: bool) -> Result<Option<String>> {
        if self.satisfies_rate_restriction(tau) {
            return Ok(None);
        }
        let msg = format!(
            "attack probability {} is not below 1/(2τ) = {} for τ = {tau}",
            self.p,
            1.0 / (2.0 * tau as f64)
        );
        if claims_restriction {
            Err(invalid(msg))
        } else {
            Ok(Some(msg))
        }
    }

    pub fn draw_flag(&self, rng: &mut StreamRng) -> bool {
        rng.random::<f64>() < self.p
    }

    /// Disturbance for the current step. The adversary sees the current state
    /// x_t; a zero flag always yields the zero vector.
    pub fn draw_disturbance(
        &self,
        state: ArrayView1<f64>,
        dist_dim: usize,
        attacked: bool,
        rng: &mut StreamRng,
    ) -> Array1<f64> {
        if !attacked {
            return Array1::zeros(dist_dim);
        }
        match self.kind {
            AdversaryKind::None => Array1::zeros(dist_dim),
            AdversaryKind::ConstantSigma { value } => Array1::from_elem(dist_dim, value),
            AdversaryKind::SignedMeanGaussian {
                mean_pos,
                mean_neg,
                variance,
            } => {
                let sd = variance.sqrt();
                Array1::from_shape_fn(dist_dim, |i| {
                    let xi = state.get(i).copied().unwrap_or(0.0);
                    // sgn(0) := +1, so the nonnegative branch is inclusive.
                    let (sign, mean) = if xi >= 0.0 {
                        (1.0, mean_pos)
                    } else {
                        (-1.0, mean_neg)
                    };
                    let z: f64 = rand_distr::StandardNormal.sample(rng);
                    sign * (mean + sd * z)
                })
            }
        }
    }
}

/// Length of the longest run of consecutive attack-free steps.
pub fn max_attack_free_run(flags: &[bool]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for &attacked in flags {
        if attacked {
            cur = 0;
        } else {
            cur += 1;
            best = best.max(cur);
        }
    }
    best
}

// ---- JSON documents -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InputPolicyDoc {
    kind: String,
    #[serde(default)]
    params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_u: Option<f64>,
}

impl TryFrom<InputPolicyDoc> for InputPolicy {
    type Error = crate::error::Error;

    fn try_from(doc: InputPolicyDoc) -> Result<Self> {
        let need = |n: usize| -> Result<()> {
            if doc.params.len() != n {
                Err(invalid(format!(
                    "input kind {} takes {n} params, got {}",
                    doc.kind,
                    doc.params.len()
                )))
            } else {
                Ok(())
            }
        };
        let mut policy = match doc.kind.as_str() {
            "GaussianIso" => {
                need(1)?;
                InputPolicy::gaussian_with_mean(doc.mean.clone(), doc.params[0])
            }
            "UniformBox" => {
                need(2)?;
                InputPolicy::uniform(doc.params[0], doc.params[1])
            }
            "Rademacher" => InputPolicy::rademacher(),
            "Zero" => InputPolicy::zero(),
            other => return Err(invalid(format!("unknown input kind {other}"))),
        };
        if let Some(s) = doc.sigma_u {
            policy.sigma_u = s;
        }
        Ok(policy)
    }
}

impl From<InputPolicy> for InputPolicyDoc {
    fn from(p: InputPolicy) -> Self {
        let (kind, params, mean) = match p.kind {
            InputKind::GaussianIso { mean, variance } => ("GaussianIso", vec![variance], mean),
            InputKind::UniformBox { lo, hi } => ("UniformBox", vec![lo, hi], Vec::new()),
            InputKind::Rademacher => ("Rademacher", Vec::new(), Vec::new()),
            InputKind::Zero => ("Zero", Vec::new(), Vec::new()),
        };
        InputPolicyDoc {
            kind: kind.to_string(),
            params,
            mean,
            sigma_u: Some(p.sigma_u),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AttackPolicyDoc {
    p: f64,
    kind: String,
    #[serde(default)]
    params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_w: Option<f64>,
}

impl TryFrom<AttackPolicyDoc> for AttackPolicy {
    type Error = crate::error::Error;

    fn try_from(doc: AttackPolicyDoc) -> Result<Self> {
        let mut policy = match (doc.kind.as_str(), doc.params.as_slice()) {
            ("SignedMeanGaussian", [pos, neg, var]) => {
                AttackPolicy::signed_mean_gaussian(doc.p, *pos, *neg, *var)
            }
            ("ConstantSigma", [value]) => AttackPolicy::constant(doc.p, *value),
            ("None", []) => AttackPolicy {
                p: doc.p,
                ..AttackPolicy::none()
            },
            (kind, params) => {
                return Err(invalid(format!(
                    "attack kind {kind} with {} params is not recognised",
                    params.len()
                )))
            }
        };
        if let Some(s) = doc.sigma_w {
            policy.sigma_w = s;
        }
        policy.validate()?;
        Ok(policy)
    }
}

impl From<AttackPolicy> for AttackPolicyDoc {
    fn from(a: AttackPolicy) -> Self {
        let (kind, params) = match a.kind {
            AdversaryKind::SignedMeanGaussian {
                mean_pos,
                mean_neg,
                variance,
            } => ("SignedMeanGaussian", vec![mean_pos, mean_neg, variance]),
            AdversaryKind::ConstantSigma { value } => ("ConstantSigma", vec![value]),
            AdversaryKind::None => ("None", Vec::new()),
        };
        AttackPolicyDoc {
            p: a.p,
            kind: kind.to_string(),
            params,
            sigma_w: Some(a.sigma_w),
        }
    }
}
