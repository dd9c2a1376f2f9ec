//! JSON run configuration.
//!
//! ```json
//! {
//!   "model":   { "name": "decay_homodyne", "params": { "gamma": 1.0, "u_max": 5.0 },
//!                "mode": "diffusive", "rho0": [0, 0, 1] },
//!   "cost":    { "running_base": [[1, 0], [0, 0]], "control_penalty": 0.01,
//!                "terminal": [[1, 0], [0, 0]] },
//!   "run":     { "T": 1.0, "dt": 0.001, "n_traj": 1000, "seed": 0, "scheme": "kraus" },
//!   "bellman": { "grid_n": 41, "time_steps": 200, "control_grid": 11 }
//! }
//! ```
//!
//! Matrix entries are numbers or `[re, im]` pairs. `rho0` is a Bloch triple or
//! a matrix. The model name `custom` takes its coefficients from a `custom`
//! block: `L(u) = l0 + u·l1`, `H(u) = h0 + u·h1`, constant `xi` and `upsilon`.
//! Unknown keys anywhere are errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    builtin_model, validate, AdmissibleRange, CoefficientMap, CostSpec, ObservationMode,
    SystemModel,
};
use crate::error::{Error, Result};
use crate::matcore::{ComplexMatrix, DensityMatrix, C64};
use crate::sme::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixEntry {
    Real(f64),
    Complex([f64; 2]),
}

impl MatrixEntry {
    pub fn value(self) -> C64 {
        match self {
            Self::Real(x) => C64::new(x, 0.0),
            Self::Complex([re, im]) => C64::new(re, im),
        }
    }

    pub fn from_complex(z: C64) -> Self {
        if z.im == 0.0 {
            Self::Real(z.re)
        } else {
            Self::Complex([z.re, z.im])
        }
    }
}

pub type MatrixSpec = Vec<Vec<MatrixEntry>>;

fn matrix_from_spec(spec: &MatrixSpec, field: &str) -> Result<ComplexMatrix> {
    let rows: Vec<Vec<C64>> = spec
        .iter()
        .map(|r| r.iter().map(|e| e.value()).collect())
        .collect();
    ComplexMatrix::from_rows(&rows).map_err(|e| Error::InvalidParameter {
        field: field.to_string(),
        reason: e.to_string(),
    })
}

pub fn matrix_to_spec(m: &ComplexMatrix) -> MatrixSpec {
    (0..m.dim())
        .map(|i| {
            (0..m.dim())
                .map(|j| MatrixEntry::from_complex(m[(i, j)]))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Bloch([f64; 3]),
    Matrix(MatrixSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    pub l0: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h0: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<MatrixSpec>,
    #[serde(default)]
    pub xi: f64,
    #[serde(default = "one_entry")]
    pub upsilon: MatrixEntry,
}

fn one_entry() -> MatrixEntry {
    MatrixEntry::Real(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ObservationMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<StateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_base: Option<MatrixSpec>,
    #[serde(default)]
    pub control_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<MatrixSpec>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            running_base: None,
            control_penalty: 0.0,
            terminal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(rename = "T", default = "default_t")]
    pub t_final: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_t() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_n_traj() -> usize {
    1000
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_final: default_t(),
            dt: default_dt(),
            n_traj: default_n_traj(),
            seed: 0,
            scheme: Scheme::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlGridSpec {
    /// Number of equally spaced levels over the admissible interval.
    Levels(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BellmanSection {
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_grid: Option<ControlGridSpec>,
}

fn default_grid_n() -> usize {
    41
}
fn default_time_steps() -> usize {
    200
}

impl Default for BellmanSection {
    fn default() -> Self {
        Self {
            grid_n: default_grid_n(),
            time_steps: default_time_steps(),
            control_grid: None,
        }
    }
}

/// The structured form of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub model: ModelSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub bellman: BellmanSection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub t_final: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanConfig {
    pub grid_n: usize,
    pub time_steps: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub document: ConfigDocument,
    pub model: SystemModel,
    pub cost: CostSpec,
    pub run: RunConfig,
    pub bellman: BellmanConfig,
}

/// Parses and validates a configuration document.
pub fn load_config(text: &str) -> Result<LoadedConfig> {
    let document: ConfigDocument =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    build(document)
}

/// As [`load_config`], from an already parsed JSON value.
pub fn load_config_value(value: Value) -> Result<LoadedConfig> {
    let document: ConfigDocument =
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    build(document)
}

/// Pretty JSON that [`load_config`] parses back to the same document.
pub fn emit_config(document: &ConfigDocument) -> String {
    serde_json::to_string_pretty(document).expect("config documents always serialize")
}

fn build(document: ConfigDocument) -> Result<LoadedConfig> {
    let m = &document.model;
    let mut model = if m.name == "custom" {
        let c = m
            .custom
            .as_ref()
            .ok_or_else(|| Error::Config("model `custom` needs a `custom` block".into()))?;
        custom_model(c, m.mode.unwrap_or(ObservationMode::Diffusive), &m.params)?
    } else {
        if m.custom.is_some() {
            return Err(Error::Config(format!(
                "`custom` block given for builtin model `{}`",
                m.name
            )));
        }
        let model = builtin_model(&m.name, &m.params)?;
        if let Some(mode) = m.mode {
            if mode != model.mode {
                return Err(Error::InvalidParameter {
                    field: "mode".into(),
                    reason: format!("model `{}` is {}", m.name, model.mode),
                });
            }
        }
        model
    };

    if let Some(spec) = &m.rho0 {
        let rho0 = match spec {
            StateSpec::Bloch(b) => DensityMatrix::from_bloch(*b),
            StateSpec::Matrix(rows) => DensityMatrix::new(matrix_from_spec(rows, "rho0")?),
        }
        .map_err(|e| Error::InvalidParameter {
            field: "rho0".into(),
            reason: e.to_string(),
        })?;
        model.rho0 = rho0;
    }

    if let Some(grid) = &document.bellman.control_grid {
        let r = &model.range;
        model.range = match grid {
            ControlGridSpec::Levels(n) => AdmissibleRange::uniform(r.u_min, r.u_max, *n)?,
            ControlGridSpec::Values(v) => AdmissibleRange::new(r.u_min, r.u_max, v.clone())?,
        };
    }

    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }

    let dim = model.dim;
    let c = &document.cost;
    let matrix_or_zero = |spec: &Option<MatrixSpec>, field: &str| -> Result<ComplexMatrix> {
        match spec {
            Some(s) => {
                let mat = matrix_from_spec(s, field)?;
                if mat.dim() != dim {
                    return Err(Error::InvalidParameter {
                        field: field.into(),
                        reason: format!(
                            "dimension {} differs from model dimension {dim}",
                            mat.dim()
                        ),
                    });
                }
                Ok(mat)
            }
            None => Ok(ComplexMatrix::zeros(dim)),
        }
    };
    let cost = CostSpec::new(
        matrix_or_zero(&c.running_base, "cost.running_base")?,
        c.control_penalty,
        matrix_or_zero(&c.terminal, "cost.terminal")?,
    );
    let violations = cost.violations(&model.range);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }

    let r = &document.run;
    positive("run.T", r.t_final)?;
    positive("run.dt", r.dt)?;
    if r.n_traj == 0 {
        return Err(param("run.n_traj", "must be at least 1"));
    }
    let b = &document.bellman;
    if b.grid_n < 3 || b.grid_n.is_multiple_of(2) {
        return Err(param("bellman.grid_n", "must be odd and at least 3"));
    }
    if b.time_steps == 0 {
        return Err(param("bellman.time_steps", "must be at least 1"));
    }

    Ok(LoadedConfig {
        run: RunConfig {
            t_final: r.t_final,
            dt: r.dt,
            n_traj: r.n_traj,
            seed: r.seed,
            scheme: r.scheme,
        },
        bellman: BellmanConfig {
            grid_n: b.grid_n,
            time_steps: b.time_steps,
        },
        model,
        cost,
        document,
    })
}

fn custom_model(
    c: &CustomSection,
    mode: ObservationMode,
    params: &BTreeMap<String, f64>,
) -> Result<SystemModel> {
    for key in params.keys() {
        if !["u_min", "u_max", "levels"].contains(&key.as_str()) {
            return Err(param(key, "not a parameter of the custom model"));
        }
    }
    let l0 = matrix_from_spec(&c.l0, "custom.l0")?;
    let dim = l0.dim();
    let opt = |s: &Option<MatrixSpec>, field: &str| -> Result<ComplexMatrix> {
        let m = match s {
            Some(s) => matrix_from_spec(s, field)?,
            None => ComplexMatrix::zeros(dim),
        };
        if m.dim() != dim {
            return Err(param(field, "dimension differs from custom.l0"));
        }
        Ok(m)
    };
    let l1 = opt(&c.l1, "custom.l1")?;
    let h0 = opt(&c.h0, "custom.h0")?;
    let h1 = opt(&c.h1, "custom.h1")?;
    let u_max = params.get("u_max").copied().unwrap_or(0.0);
    let u_min = params.get("u_min").copied().unwrap_or(-u_max);
    let levels = params.get("levels").copied().unwrap_or(1.0);
    if levels < 1.0 || levels.fract() != 0.0 {
        return Err(param("levels", "must be a positive integer"));
    }
    let range = AdmissibleRange::uniform(u_min, u_max, levels as usize)?;
    let coeffs = CoefficientMap::affine(l0, l1, h0, h1, c.xi, c.upsilon.value());
    let mut rho0 = vec![C64::new(0.0, 0.0); dim];
    rho0[0] = C64::new(1.0, 0.0);
    Ok(SystemModel::new(
        "custom",
        coeffs,
        mode,
        range,
        DensityMatrix::pure(&rho0)?,
    ))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(param(field, &format!("must be positive, got {v}")))
    }
}

fn param(field: &str, reason: &str) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::pauli;

    const MINIMAL: &str = r#"{ "model": { "name": "decay_homodyne", "params": { "gamma": 1 } } }"#;

    #[test]
    fn minimal_document() {
        let c = load_config(MINIMAL).unwrap();
        assert_eq!(c.model.dim, 2);
        assert_eq!(c.run.dt, 1e-3);
        assert_eq!(c.run.scheme, Scheme::Kraus);
        assert_eq!(c.bellman.grid_n, 41);
        assert_eq!(c.cost, CostSpec::zero(2));
    }

    #[test]
    fn negative_gamma_names_field() {
        let text = r#"{ "model": { "name": "decay_homodyne", "params": { "gamma": -1 } } }"#;
        match load_config(text) {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "gamma"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bloch_rho0_override() {
        let text = r#"{ "model": { "name": "decay_homodyne", "rho0": [0, 0, 1] } }"#;
        let c = load_config(text).unwrap();
        assert_eq!(c.model.rho0.matrix(), &pauli::excited_projector());
        let text = r#"{ "model": { "name": "decay_homodyne", "rho0": [[0.5, [0, -0.5]], [[0, 0.5], 0.5]] } }"#;
        let c = load_config(text).unwrap();
        assert!((c.model.rho0.bloch().unwrap()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{ "model": { "name": "decay_homodyne" }, "runn": {} }"#;
        let err = load_config(text).unwrap_err().to_string();
        assert!(err.contains("runn"), "{err}");
        let text = r#"{ "model": { "name": "decay_homodyne" }, "run": { "dtt": 1 } }"#;
        assert!(load_config(text).unwrap_err().to_string().contains("dtt"));
    }

    #[test]
    fn parse_errors_report_position() {
        let err = load_config("{ \"model\": ").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn mode_must_match_builtin() {
        let text = r#"{ "model": { "name": "decay_homodyne", "mode": "counting" } }"#;
        assert!(load_config(text).is_err());
    }

    #[test]
    fn custom_frozen_model() {
        let text = r#"{ "model": { "name": "custom", "mode": "counting",
            "custom": { "l0": [[0, 0], [0, 0]], "xi": 1.0, "upsilon": 1.0 } } }"#;
        let c = load_config(text).unwrap();
        assert_eq!(c.model.mode, ObservationMode::Counting);
        assert_eq!(c.model.coeffs.l(0.0).max_abs(), 0.0);
    }

    #[test]
    fn control_grid_override() {
        let text = r#"{ "model": { "name": "decay_homodyne", "params": { "u_max": 5 } },
            "bellman": { "control_grid": [-5, 0, 5] } }"#;
        assert_eq!(
            load_config(text).unwrap().model.range.grid,
            vec![-5.0, 0.0, 5.0]
        );
        let text = r#"{ "model": { "name": "decay_homodyne", "params": { "u_max": 5 } },
            "bellman": { "control_grid": 3 } }"#;
        assert_eq!(
            load_config(text).unwrap().model.range.grid,
            vec![-5.0, 0.0, 5.0]
        );
        let text =
            r#"{ "model": { "name": "decay_homodyne" }, "bellman": { "control_grid": [0, 7] } }"#;
        assert!(load_config(text).is_err());
    }

    #[test]
    fn negative_cost_rejected() {
        let text = r#"{ "model": { "name": "decay_homodyne" }, "cost": { "terminal": [[1, 0], [0, -1]] } }"#;
        assert!(matches!(load_config(text), Err(Error::Validation(_))));
    }

    #[test]
    fn emit_then_load_is_identity() {
        let text = r#"{ "model": { "name": "decay_counting", "params": { "gamma": 2, "epsilon0": 0 },
            "rho0": [0.1, 0.2, 0.3] },
            "cost": { "running_base": [[1, [0, 0.1]], [[0, -0.1], 0.5]], "control_penalty": 0.5 },
            "run": { "T": 2, "dt": 0.002, "n_traj": 7, "seed": 9, "scheme": "euler" },
            "bellman": { "grid_n": 21, "time_steps": 50, "control_grid": [0.0, 0.5] } }"#;
        let doc: ConfigDocument = serde_json::from_str(text).unwrap();
        let again = load_config(&emit_config(&doc)).unwrap().document;
        assert_eq!(again, doc);
    }
}
