use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatagenError;

/// Maximum number of manual reviewer verdicts per sample.
pub const MAX_REVIEWERS: usize = 3;

/// Minimum automated grades (0 to 10) for a pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_adherence: f64,
    pub min_aesthetics: f64,
    pub min_consistency: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_adherence: 6.0,
            min_aesthetics: 6.0,
            min_consistency: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoGrades {
    pub adherence: f64,
    pub aesthetics: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutomatedVerdict {
    pub pass: bool,
    pub grades: AutoGrades,
    pub reasons: Vec<String>,
}

/// `manual` is only populated when `automated.pass`; `final_pass` implies
/// `automated.pass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub automated: AutomatedVerdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manual: Vec<bool>,
    pub final_pass: bool,
}

/// Parses the first JSON object in `text` into grades in `[0, 10]`.
pub fn parse_grades(text: &str) -> Result<AutoGrades, String> {
    #[derive(Deserialize)]
    struct Reply {
        adherence: f64,
        aesthetics: f64,
        consistency: f64,
    }
    let (a, b) = match (text.find('{'), text.rfind('}')) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => return Err("no JSON object in reply".into()),
    };
    let r: Reply = serde_json::from_str(&text[a..=b]).map_err(|e| e.to_string())?;
    for (name, v) in [
        ("adherence", r.adherence),
        ("aesthetics", r.aesthetics),
        ("consistency", r.consistency),
    ] {
        if !(0.0..=10.0).contains(&v) {
            return Err(format!("{name} = {v} outside [0, 10]"));
        }
    }
    Ok(AutoGrades {
        adherence: r.adherence,
        aesthetics: r.aesthetics,
        consistency: r.consistency,
    })
}

pub fn automated_verdict(grades: AutoGrades, cfg: &FilterConfig) -> AutomatedVerdict {
    let mut reasons = Vec::new();
    for (name, v, min) in [
        ("adherence", grades.adherence, cfg.min_adherence),
        ("aesthetics", grades.aesthetics, cfg.min_aesthetics),
        ("consistency", grades.consistency, cfg.min_consistency),
    ] {
        if v < min {
            reasons.push(format!("{name} {v} below {min}"));
        }
    }
    AutomatedVerdict {
        pass: reasons.is_empty(),
        grades,
        reasons,
    }
}

/// Strict majority; a tie fails.
pub fn majority(verdicts: &[bool]) -> bool {
    let yes = verdicts.iter().filter(|&&v| v).count();
    2 * yes > verdicts.len()
}

pub fn combine(automated: AutomatedVerdict, manual: Option<&[bool]>) -> FilterVerdict {
    if !automated.pass {
        return FilterVerdict {
            automated,
            manual: Vec::new(),
            final_pass: false,
        };
    }
    let manual = manual.map(<[bool]>::to_vec).unwrap_or_default();
    let final_pass = manual.is_empty() || majority(&manual);
    FilterVerdict {
        automated,
        manual,
        final_pass,
    }
}

/// Reviewer verdicts keyed by record id, read from JSONL lines
/// `{"id": "...", "verdicts": [true, false, true]}`.
pub fn load_reviews(path: &Path) -> Result<BTreeMap<String, Vec<bool>>, DatagenError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        id: String,
        verdicts: Vec<bool>,
    }
    let file = std::fs::File::open(path)
        .map_err(|e| DatagenError::Io(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatagenError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DatagenError::Schema {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let l: Line = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if l.verdicts.is_empty() || l.verdicts.len() > MAX_REVIEWERS {
            return Err(schema(format!(
                "expected 1 to {MAX_REVIEWERS} verdicts, got {}",
                l.verdicts.len()
            )));
        }
        if out.insert(l.id.clone(), l.verdicts).is_some() {
            return Err(schema(format!("duplicate id {}", l.id)));
        }
    }
    Ok(out)
}
