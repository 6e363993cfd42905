use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::call::{ParamValue, ToolCall};
use super::kernels;
use super::ToolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Linear,
    Srgb,
    LuminanceMasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Range {
        min: f64,
        max: f64,
        default: f64,
    },
    Choice {
        options: Vec<f64>,
        default: f64,
    },
    /// Monotone control points on `[0,1]²`; the default is the diagonal.
    Curve {
        max_points: usize,
    },
    /// A nested pixelwise tool call; the default is no adjustment.
    Adjustment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    pub space: ColorSpace,
    pub semantics: String,
    #[serde(rename = "param", default)]
    pub params: Vec<ParamSpec>,
}

impl ToolSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Outcome of validating one tool call; never an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub name_ok: bool,
    pub params_ok_fraction: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.name_ok && self.params_ok_fraction == 1.0
    }
}

/// Immutable set of tool specifications.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    tools: BTreeMap<String, ToolSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(rename = "tool")]
    tools: Vec<ToolSpec>,
}

impl Registry {
    /// The fourteen built-in tools with their default ranges.
    pub fn builtin() -> Self {
        Self::from_specs(kernels::builtin_specs()).expect("builtin specs are consistent")
    }

    pub fn from_specs(specs: Vec<ToolSpec>) -> Result<Self, ToolError> {
        let mut tools = BTreeMap::new();
        for spec in specs {
            kernels::check_spec(&spec)?;
            let name = spec.name.clone();
            if tools.insert(name.clone(), spec).is_some() {
                return Err(ToolError::Registry(format!("duplicate tool `{name}`")));
            }
        }
        Ok(Self { tools })
    }

    pub fn from_toml(text: &str) -> Result<Self, ToolError> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| ToolError::Registry(e.to_string()))?;
        Self::from_specs(file.tools)
    }

    pub fn to_toml(&self) -> String {
        let file = RegistryFile {
            tools: self.tools.values().cloned().collect(),
        };
        toml::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn validate(&self, call: &ToolCall) -> ValidationReport {
        let Some(spec) = self.get(&call.name) else {
            return ValidationReport {
                name_ok: false,
                params_ok_fraction: 0.0,
            };
        };
        if call.params.is_empty() {
            return ValidationReport {
                name_ok: true,
                params_ok_fraction: 1.0,
            };
        }
        let ok = call
            .params
            .iter()
            .filter(|(k, v)| spec.param(k).is_some_and(|p| self.value_ok(&p.kind, v)))
            .count();
        ValidationReport {
            name_ok: true,
            params_ok_fraction: ok as f64 / call.params.len() as f64,
        }
    }

    fn value_ok(&self, kind: &ParamKind, value: &ParamValue) -> bool {
        match (kind, value) {
            (ParamKind::Range { min, max, .. }, ParamValue::Number(v)) => {
                v.is_finite() && *min <= *v && *v <= *max
            }
            (ParamKind::Choice { options, .. }, ParamValue::Number(v)) => options.contains(v),
            (ParamKind::Curve { max_points }, ParamValue::Curve(pts)) => curve_ok(pts, *max_points),
            (ParamKind::Adjustment, ParamValue::Call(inner)) => {
                kernels::is_pixelwise(&inner.name) && self.validate(inner).is_valid()
            }
            _ => false,
        }
    }
}

fn curve_ok(pts: &[[f64; 2]], max_points: usize) -> bool {
    if pts.len() < 2 || pts.len() > max_points {
        return false;
    }
    let in_unit = pts
        .iter()
        .all(|p| p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    in_unit
        && pts
            .windows(2)
            .all(|w| w[0][0] < w[1][0] && w[0][1] <= w[1][1])
}
