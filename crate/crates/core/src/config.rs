//! Run configuration, read from TOML.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design_cycle::{DesignOptions, MarginVector};
use crate::error::{Error, Result};
use crate::gp::{ErrorModel, GpConfig};
use crate::optim::cmaes::CmaesOptions;
use crate::problems::{beam_problem, build_doe, toy_problem, BeamParameters, DesignProblem, DoeConfig, LinearConstraint, ToyParameters};
use crate::rbdo::{find_mpp, mean_limit_state, percentile_conservative, solve_rbdo, ConservativeMode, ConservativeValues, MeanModel, RbdoOptions};

/// Reference configuration for the cantilever beam.
pub const BEAM_CONFIG: &str = include_str!("../configs/beam.toml");
/// Reference configuration for the one-dimensional toy problem.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Beam,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub beam: Option<BeamParameters>,
    pub toy: Option<ToyParameters>,
    /// Average the objective over aleatory samples instead of evaluating it
    /// once.
    #[serde(default)]
    pub objective_uses_aleatory: bool,
    #[serde(default)]
    pub constraints: Vec<LinearConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConservativeConfig {
    pub mode: ConservativeMode,
    pub mean_model: MeanModel,
    pub rbdo: RbdoOptions,
}

impl Default for ConservativeConfig {
    fn default() -> Self {
        ConservativeConfig { mode: ConservativeMode::RbdoMpp, mean_model: MeanModel::default(), rbdo: RbdoOptions::default() }
    }
}

impl ConservativeConfig {
    /// Conservative aleatory values. The error model is only needed in
    /// `rbdo_mpp` mode.
    pub fn compute(&self, problem: &DesignProblem, model: Option<&ErrorModel>) -> Result<ConservativeValues> {
        match &self.mode {
            ConservativeMode::Percentile { levels } => percentile_conservative(&problem.aleatory, levels),
            ConservativeMode::RbdoMpp => {
                let model = model.ok_or_else(|| Error::input("rbdo_mpp conservative values need an error model"))?;
                let g = mean_limit_state(problem, model, self.mean_model);
                let rbdo = solve_rbdo(problem, &g, &self.rbdo)?;
                find_mpp(problem, &g, &rbdo.x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginsConfig {
    /// Futures per objective evaluation.
    pub futures: usize,
    pub caps: Vec<f64>,
    pub objective_samples: usize,
    pub cmaes: CmaesOptions,
}

impl Default for MarginsConfig {
    fn default() -> Self {
        MarginsConfig {
            futures: 500,
            caps: vec![0.05, 0.10, 0.20, 0.30],
            objective_samples: 64,
            cmaes: CmaesOptions { f_tol: 1e-9, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub futures: usize,
    /// Margin vector to propagate. When absent the tradeoff point for `cap`
    /// is used.
    pub k: Option<[f64; 4]>,
    pub cap: f64,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig { futures: 2500, k: None, cap: 0.20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub doe: DoeConfig,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub conservative: ConservativeConfig,
    #[serde(default)]
    pub design: DesignOptions,
    #[serde(default)]
    pub margins: MarginsConfig,
    #[serde(default)]
    pub uq: UqConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn beam() -> Self {
        RunConfig::from_toml(BEAM_CONFIG).expect("shipped beam config parses")
    }

    pub fn toy() -> Self {
        RunConfig::from_toml(TOY_CONFIG).expect("shipped toy config parses")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        match (p.kind, &p.beam, &p.toy) {
            (ProblemKind::Beam, _, Some(_)) => return Err(Error::Config("beam problem with a [problem.toy] table".into())),
            (ProblemKind::Toy, Some(_), _) => return Err(Error::Config("toy problem with a [problem.beam] table".into())),
            _ => {}
        }
        if self.margins.futures < 100 {
            return Err(Error::Config(format!("margins.futures must be at least 100, got {}", self.margins.futures)));
        }
        if self.margins.caps.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("margins.caps must lie in [0,1]".into()));
        }
        if self.uq.futures < 1000 {
            return Err(Error::Config(format!("uq.futures must be at least 1000, got {}", self.uq.futures)));
        }
        if let Some(k) = self.uq.k {
            MarginVector::from_slice(&k).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.uq.cap) {
            return Err(Error::Config("uq.cap must lie in [0,1]".into()));
        }
        self.problem().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn problem(&self) -> Result<DesignProblem> {
        let p = &self.problem;
        let mut problem = match p.kind {
            ProblemKind::Beam => beam_problem(&p.beam.clone().unwrap_or_default())?,
            ProblemKind::Toy => toy_problem(&p.toy.clone().unwrap_or_default())?,
        };
        problem.objective_uses_aleatory = p.objective_uses_aleatory;
        if p.constraints.is_empty() {
            Ok(problem)
        } else {
            problem.with_constraints(p.constraints.clone())
        }
    }

    /// Build the DOE and fit the error model.
    pub fn fit_model(&self, problem: &DesignProblem) -> Result<ErrorModel> {
        let (points, values) = build_doe(problem, &self.doe)?;
        ErrorModel::fit(&points, &values, &self.gp)
    }

    /// SHA-256 of the canonical JSON form, so formatting and comments in the
    /// TOML do not change it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
