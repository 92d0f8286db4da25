use std::collections::BTreeSet;

use opdisc::galerkin_fem::{ConvexNonlinearity, GalerkinKind};
use opdisc::layers::{LayerDoc, LayerSpec};
use opdisc::{BasisKind, BasisSpec, CoordinateActivation};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// A batch of experiments sharing a seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Required; kept optional here so a missing seed gets a validation message.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    MonotoneCheck(MonotoneCheck),
    DiscretizeScan(DiscretizeScan),
    Decompose(DecomposeExperiment),
    Invert(InvertExperiment),
    NogoGalerkin(NogoGalerkin),
    NogoIsotopy(NogoIsotopy),
    FemSolve(FemSolve),
    QuantReport(QuantReportExperiment),
    Accept(Accept),
}

impl Experiment {
    pub fn name(&self) -> &str {
        match self {
            Experiment::MonotoneCheck(e) => &e.name,
            Experiment::DiscretizeScan(e) => &e.name,
            Experiment::Decompose(e) => &e.name,
            Experiment::Invert(e) => &e.name,
            Experiment::NogoGalerkin(e) => &e.name,
            Experiment::NogoIsotopy(e) => &e.name,
            Experiment::FemSolve(e) => &e.name,
            Experiment::QuantReport(e) => &e.name,
            Experiment::Accept(e) => &e.name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::MonotoneCheck(_) => "monotone_check",
            Experiment::DiscretizeScan(_) => "discretize_scan",
            Experiment::Decompose(_) => "decompose",
            Experiment::Invert(_) => "invert",
            Experiment::NogoGalerkin(_) => "nogo_galerkin",
            Experiment::NogoIsotopy(_) => "nogo_isotopy",
            Experiment::FemSolve(_) => "fem_solve",
            Experiment::QuantReport(_) => "quant_report",
            Experiment::Accept(_) => "accept",
        }
    }

    fn own_seed(&mut self) -> Option<&mut Option<u64>> {
        match self {
            Experiment::MonotoneCheck(e) => Some(&mut e.seed),
            Experiment::DiscretizeScan(e) => Some(&mut e.seed),
            Experiment::Decompose(e) => Some(&mut e.seed),
            Experiment::Invert(e) => Some(&mut e.seed),
            Experiment::QuantReport(e) => Some(&mut e.seed),
            Experiment::Accept(e) => Some(&mut e.seed),
            Experiment::NogoGalerkin(_) | Experiment::NogoIsotopy(_) | Experiment::FemSolve(_) => None,
        }
    }
}

/// A layer given inline or generated from a seeded recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSource {
    Generate {
        space: BasisSpec,
        spec: LayerSpec,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Doc(LayerDoc),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotoneCheck {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub layer: LayerSource,
    pub dims: Vec<usize>,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizeScan {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub layer: LayerSource,
    pub dims: Vec<usize>,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub expect_decreasing: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeExperiment {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub layer: LayerSource,
    pub epsilon: f64,
    #[serde(default = "one")]
    pub r1: f64,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub pairs: Option<usize>,
    #[serde(default)]
    pub composite_samples: Option<usize>,
    #[serde(default)]
    pub composite_tol: Option<f64>,
    #[serde(default)]
    pub max_blocks: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub ambient_dim: usize,
    pub n: usize,
    pub blocks: usize,
    /// Hidden widths; defaults to two layers of width `4 n`.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default = "groupsort")]
    pub activation: CoordinateActivation,
    pub lip: f64,
    #[serde(default)]
    pub cert_radius: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertExperiment {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub chain: ChainSpec,
    pub delta: f64,
    #[serde(default = "default_invert_samples")]
    pub samples: usize,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "default_invert_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_roundtrip_tol")]
    pub roundtrip_tol: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NogoGalerkin {
    pub name: String,
    pub path: GalerkinKind,
    pub n: usize,
    /// Defaults to Fourier for kind `a` and hats for kind `b`.
    #[serde(default)]
    pub basis: Option<BasisKind>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_bisect_tol")]
    pub bisect_tol: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NogoIsotopy {
    pub name: String,
    pub m: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Extra points `1/2 - 2^-k` approaching the midpoint.
    #[serde(default = "default_dyadic")]
    pub dyadic: usize,
    #[serde(default = "default_isotopy_tol")]
    pub bisect_tol: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemSolve {
    pub name: String,
    pub g: ConvexNonlinearity,
    pub meshes: Vec<usize>,
    /// Source `x(t) = amplitude sin(pi t)`; defaults to the manufactured `u = sin(pi t)` for
    /// zero and linear `g`, and to `-10` for cubic `g`.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default = "default_fem_tol")]
    pub tol: f64,
    /// Accepted band for successive H1 error ratios.
    #[serde(default)]
    pub expect_ratio: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantReportExperiment {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub layer: LayerSource,
    pub dims: Vec<usize>,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accept {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Defaults to all ten.
    #[serde(default)]
    pub criteria: Option<Vec<u8>>,
}

fn one() -> f64 {
    1.0
}
fn default_samples() -> usize {
    32
}
fn default_probes() -> usize {
    4
}
fn groupsort() -> CoordinateActivation {
    CoordinateActivation::Groupsort2
}
fn default_invert_samples() -> usize {
    100
}
fn default_invert_tol() -> f64 {
    1e-11
}
fn default_max_iter() -> usize {
    10_000
}
fn default_roundtrip_tol() -> f64 {
    1e-8
}
fn default_grid() -> usize {
    201
}
fn default_bisect_tol() -> f64 {
    1e-13
}
fn default_dyadic() -> usize {
    30
}
fn default_isotopy_tol() -> f64 {
    1e-12
}
fn default_fem_tol() -> f64 {
    1e-12
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("invalid config: {e}"))
    }

    /// Checks the schema, applies a seed override and gives every seeded experiment its seed.
    pub fn validate(mut self, seed_override: Option<u64>) -> Result<Self, String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Some(s) = seed_override {
            self.seed = Some(s);
        }
        let seed = self.seed.ok_or("config has no seed")?;
        let mut names = BTreeSet::new();
        for e in &mut self.experiments {
            let name = e.name().to_string();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(format!("experiment name {name:?} must be nonempty [A-Za-z0-9_-]"));
            }
            if !names.insert(name.clone()) {
                return Err(format!("duplicate experiment name {name:?}"));
            }
            if let Some(own) = e.own_seed() {
                if seed_override.is_some() || own.is_none() {
                    *own = Some(seed);
                }
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys_and_missing_seed() {
        assert!(ExperimentConfig::parse(r#"{"seed": 1, "bogus": 2}"#).is_err());
        let text = r#"{"seed": 1, "experiments": [{"kind": "nogo_isotopy", "name": "a", "m": 7, "extra": 1}]}"#;
        assert!(ExperimentConfig::parse(text).is_err());
        let cfg = ExperimentConfig::parse(r#"{"experiments": []}"#).unwrap();
        assert!(cfg.validate(None).is_err());
        let cfg = ExperimentConfig::parse(r#"{"experiments": []}"#).unwrap();
        assert_eq!(cfg.validate(Some(4)).unwrap().seed, Some(4));
    }

    #[test]
    fn seeds_propagate() {
        let text = r#"{"seed": 3, "experiments": [
            {"kind": "accept", "name": "a", "criteria": [8]},
            {"kind": "accept", "name": "b", "seed": 9}
        ]}"#;
        let cfg = ExperimentConfig::parse(text).unwrap().validate(None).unwrap();
        let seeds: Vec<Option<u64>> = cfg
            .experiments
            .iter()
            .map(|e| match e {
                Experiment::Accept(a) => a.seed,
                _ => None,
            })
            .collect();
        assert_eq!(seeds, vec![Some(3), Some(9)]);
        let dup = r#"{"seed": 3, "experiments": [
            {"kind": "accept", "name": "a"}, {"kind": "accept", "name": "a"}
        ]}"#;
        assert!(ExperimentConfig::parse(dup).unwrap().validate(None).is_err());
    }
}
