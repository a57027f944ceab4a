//! JSON experiment configurations. Unknown keys are rejected.

use mlgem_core::select::{log_spaced, DEFAULT_FOLDS, DEFAULT_GAMMA};
use mlgem_core::{Architecture, Criterion, FitMethod, LambdaGrid, ScenarioSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn default_m() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub architecture: Architecture,
    pub p: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub systemic: bool,
}

impl Scenario {
    /// Scenario for replicate `r`: seeds advance by one per replicate.
    pub fn spec(&self, replicate: u64) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(
            self.architecture,
            self.p,
            self.n,
            self.k,
            self.m,
            self.rho,
            self.seed.wrapping_add(replicate),
        );
        spec.alphas = self.alphas.clone();
        spec.systemic = self.systemic;
        spec
    }

    pub fn validate(&self) -> CliResult<()> {
        self.spec(0).validate().map_err(CliError::from)
    }

    pub fn label(&self) -> String {
        format!(
            "{:?}/p={}/n={}/K={}/rho={}",
            self.architecture, self.p, self.n, self.k, self.rho
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
}

impl GridConfig {
    pub fn to_grid(&self) -> CliResult<LambdaGrid> {
        LambdaGrid::new(self.lambda1_values.clone(), self.lambda2_values.clone())
            .map_err(CliError::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub schema_version: u32,
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
}

impl GridFile {
    pub fn to_grid(&self) -> CliResult<LambdaGrid> {
        LambdaGrid::new(self.lambda1_values.clone(), self.lambda2_values.clone())
            .map_err(CliError::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CriterionConfig {
    Ebic {
        #[serde(default)]
        gamma: Option<f64>,
    },
    Cv {
        #[serde(default)]
        folds: Option<usize>,
    },
}

impl CriterionConfig {
    /// Command-line values win over the config, which wins over the defaults.
    pub fn resolve(self, gamma: Option<f64>, folds: Option<usize>, seed: u64) -> Criterion {
        match self {
            CriterionConfig::Ebic { gamma: g } => Criterion::Ebic {
                gamma: gamma.or(g).unwrap_or(DEFAULT_GAMMA),
            },
            CriterionConfig::Cv { folds: f } => Criterion::Cv {
                folds: folds.or(f).unwrap_or(DEFAULT_FOLDS),
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub replicates: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub points: usize,
    pub methods: Vec<FitMethod>,
}

impl RocConfig {
    pub fn grid(&self) -> CliResult<LambdaGrid> {
        if !(self.lambda_min > 0.0 && self.lambda_max > self.lambda_min) || self.points < 2 {
            return Err(CliError::Validation(
                "need 0 < lambda_min < lambda_max and at least 2 points".into(),
            ));
        }
        LambdaGrid::tied(log_spaced(self.lambda_min, self.lambda_max, self.points))
            .map_err(CliError::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub replicates: u64,
    pub methods: Vec<FitMethod>,
    pub criteria: Vec<CriterionConfig>,
    /// Defaults to the library grid for the scenario's `p` and `n`.
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

impl Table1Config {
    pub fn grid(&self) -> CliResult<LambdaGrid> {
        match &self.grid {
            Some(g) => g.to_grid(),
            None => Ok(LambdaGrid::default_for(self.scenario.p, self.scenario.n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"schema_version":1,"scenario":{"architecture":"I","p":10,"n":50,"K":3}}"#;
        let cfg: SimulateConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.scenario.m, 5);
        assert!(cfg.scenario.systemic);
        let bad =
            r#"{"schema_version":1,"scenario":{"architecture":"I","p":10,"n":50,"K":3,"bogus":1}}"#;
        let err = serde_json::from_str::<SimulateConfig>(bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn criteria_resolve_with_fallbacks() {
        let c: CriterionConfig = serde_json::from_str(r#"{"kind":"ebic"}"#).unwrap();
        assert_eq!(
            c.resolve(None, None, 0),
            Criterion::Ebic {
                gamma: DEFAULT_GAMMA
            }
        );
        assert_eq!(
            c.resolve(Some(0.5), None, 0),
            Criterion::Ebic { gamma: 0.5 }
        );
        let c: CriterionConfig = serde_json::from_str(r#"{"kind":"cv","folds":3}"#).unwrap();
        assert_eq!(
            c.resolve(None, None, 7),
            Criterion::Cv { folds: 3, seed: 7 }
        );
        assert_eq!(
            c.resolve(None, Some(10), 7),
            Criterion::Cv { folds: 10, seed: 7 }
        );
    }

    #[test]
    fn replicate_seeds_advance() {
        let s: Scenario =
            serde_json::from_str(r#"{"architecture":"II","p":5,"n":20,"K":2,"seed":10}"#).unwrap();
        assert_eq!(s.spec(3).seed, 13);
    }
}
