//! Pipeline definitions and their resolution into concrete steps.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::expr::{Context, Expr, Ref};

pub const MAX_RETRIES: u32 = 3;
pub const DEFAULT_INFER_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_RENDER_QUALITY: u8 = 90;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

/// A blob location whose parts are binding expressions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub container: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessOp {
    Compress,
    Slice,
    ValidateDims,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub thickness: u32,
    pub color: [u8; 3],
    pub label: bool,
    pub quality: u8,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            thickness: 2,
            color: [255, 0, 0],
            label: false,
            quality: DEFAULT_RENDER_QUALITY,
        }
    }
}

fn default_infer_timeout() -> u64 {
    DEFAULT_INFER_TIMEOUT_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ActivitySpec {
    Copy {
        source: Location,
        sink: Location,
    },
    Process {
        op: ProcessOp,
        #[serde(default)]
        params: serde_json::Map<String, Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sink: Option<Location>,
    },
    Infer {
        endpoint: String,
        auth_key_ref: String,
        #[serde(default = "default_infer_timeout")]
        timeout_ms: u64,
    },
    Render {
        detections_from: String,
        sink: Location,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detections_sink: Option<Location>,
        #[serde(default)]
        style: RenderStyle,
    },
}

impl ActivitySpec {
    pub fn kind(&self) -> ActivityKind {
        match self {
            ActivitySpec::Copy { .. } => ActivityKind::Copy,
            ActivitySpec::Process { .. } => ActivityKind::Process,
            ActivitySpec::Infer { .. } => ActivityKind::Infer,
            ActivitySpec::Render { .. } => ActivityKind::Render,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivityKind {
    Copy,
    Process,
    Infer,
    Render,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub name: String,
    /// Extra attempts after a failure, at most [`MAX_RETRIES`].
    #[serde(default, skip_serializing_if = "is_zero")]
    pub retries: u32,
    #[serde(flatten)]
    pub spec: ActivitySpec,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDefinition {
    pub name: String,
    #[serde(default)]
    pub parameters: Vec<ParamDecl>,
    pub activities: Vec<Activity>,
}

/// A Process operation with its parameters checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessStep {
    Compress { quality: u8 },
    Slice { k: u32, quality: u8 },
    ValidateDims { width: u32, height: u32 },
}

impl ProcessStep {
    pub fn from_params(op: ProcessOp, params: &serde_json::Map<String, Value>) -> Result<Self, String> {
        let allowed: &[&str] = match op {
            ProcessOp::Compress => &["quality"],
            ProcessOp::Slice => &["k", "quality"],
            ProcessOp::ValidateDims => &["width", "height"],
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(format!("unknown parameter {k:?}"));
        }
        let int = |key: &str, default: Option<u64>, lo: u64, hi: u64| -> Result<u64, String> {
            let v = match params.get(key) {
                None => default.ok_or_else(|| format!("parameter {key:?} is required"))?,
                Some(v) => v
                    .as_u64()
                    .ok_or_else(|| format!("parameter {key:?} must be a non-negative integer"))?,
            };
            if v < lo || v > hi {
                return Err(format!("parameter {key:?} = {v} outside {lo}..={hi}"));
            }
            Ok(v)
        };
        let q = u64::from(bloompipe_core::imaging::DEFAULT_JPEG_QUALITY);
        Ok(match op {
            ProcessOp::Compress => ProcessStep::Compress {
                quality: int("quality", Some(q), 1, 100)? as u8,
            },
            ProcessOp::Slice => ProcessStep::Slice {
                k: int("k", Some(5), 1, 10_000)? as u32,
                quality: int("quality", Some(q), 1, 100)? as u8,
            },
            ProcessOp::ValidateDims => ProcessStep::ValidateDims {
                width: int("width", None, 1, u64::from(u32::MAX))? as u32,
                height: int("height", None, 1, u64::from(u32::MAX))? as u32,
            },
        })
    }
}

pub(crate) fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl PipelineDefinition {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut v = Vec::new();
        if !valid_name(&self.name) {
            v.push(format!(
                "pipeline name {:?} must be 1-128 characters of [A-Za-z0-9_.-]",
                self.name
            ));
        }
        let mut declared = HashSet::new();
        for p in &self.parameters {
            if !valid_name(&p.name) {
                v.push(format!("parameter name {:?} is invalid", p.name));
            }
            if !declared.insert(p.name.as_str()) {
                v.push(format!("parameter {:?} declared twice", p.name));
            }
        }
        if self.activities.is_empty() {
            v.push("pipeline needs at least one activity".into());
        }
        let mut seen: Vec<(&str, ActivityKind)> = Vec::new();
        for a in &self.activities {
            let at = format!("activity {:?}", a.name);
            if a.name.is_empty() {
                v.push("activity name must not be empty".into());
            }
            if seen.iter().any(|(n, _)| *n == a.name) {
                v.push(format!("{at}: duplicate activity name"));
            }
            if a.retries > MAX_RETRIES {
                v.push(format!("{at}: retries {} exceeds {MAX_RETRIES}", a.retries));
            }
            match &a.spec {
                ActivitySpec::Copy { source, sink } => {
                    check_loc(&mut v, &at, "source", source, &declared);
                    check_loc(&mut v, &at, "sink", sink, &declared);
                }
                ActivitySpec::Process { op, params, sink } => {
                    if let Err(e) = ProcessStep::from_params(*op, params) {
                        v.push(format!("{at}: {e}"));
                    }
                    match (op, sink) {
                        (ProcessOp::Slice, None) => {
                            v.push(format!("{at}: slice needs a sink (path is the slice prefix)"))
                        }
                        (ProcessOp::ValidateDims, Some(_)) => v.push(format!("{at}: validate_dims takes no sink")),
                        (_, Some(s)) => check_loc(&mut v, &at, "sink", s, &declared),
                        _ => {}
                    }
                }
                ActivitySpec::Infer {
                    endpoint,
                    auth_key_ref,
                    timeout_ms,
                } => {
                    if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                        v.push(format!("{at}: endpoint {endpoint:?} must be an http(s) URL"));
                    }
                    if auth_key_ref.is_empty() {
                        v.push(format!("{at}: auth_key_ref must name a secret"));
                    }
                    if *timeout_ms == 0 {
                        v.push(format!("{at}: timeout_ms must be positive"));
                    }
                }
                ActivitySpec::Render {
                    detections_from,
                    sink,
                    detections_sink,
                    style,
                } => {
                    if !seen
                        .iter()
                        .any(|(n, k)| n == detections_from && *k == ActivityKind::Infer)
                    {
                        v.push(format!(
                            "{at}: detections_from {detections_from:?} must name an earlier Infer activity"
                        ));
                    }
                    check_loc(&mut v, &at, "sink", sink, &declared);
                    if let Some(d) = detections_sink {
                        check_loc(&mut v, &at, "detections_sink", d, &declared);
                    }
                    if style.thickness == 0 {
                        v.push(format!("{at}: style.thickness must be positive"));
                    }
                    if !(1..=100).contains(&style.quality) {
                        v.push(format!("{at}: style.quality must be within 1..=100"));
                    }
                }
            }
            seen.push((&a.name, a.spec.kind()));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Applies defaults and checks that every parameter is known and supplied.
    pub fn bind_parameters(&self, supplied: &BTreeMap<String, String>) -> Result<BTreeMap<String, String>, BindError> {
        if let Some(k) = supplied.keys().find(|k| !self.parameters.iter().any(|p| &p.name == *k)) {
            return Err(BindError::UnknownParameter(k.clone()));
        }
        let mut out = BTreeMap::new();
        for p in &self.parameters {
            let value = supplied
                .get(&p.name)
                .or(p.default.as_ref())
                .ok_or_else(|| BindError::MissingParameter(p.name.clone()))?;
            out.insert(p.name.clone(), value.clone());
        }
        Ok(out)
    }

    /// Resolves every expression against bound parameters.
    pub fn resolve(&self, params: &BTreeMap<String, String>) -> Result<Vec<ResolvedActivity>, BindError> {
        let ctx = Context {
            params: Some(params),
            ..Context::default()
        };
        let eval = |text: &str| -> Result<String, BindError> {
            let e = Expr::parse(text).map_err(|e| BindError::Expression(e.to_string()))?;
            e.eval(&ctx).map_err(|e| BindError::Expression(e.to_string()))
        };
        let loc = |l: &Location| -> Result<BlobRef, BindError> {
            Ok(BlobRef {
                container: eval(&l.container)?,
                path: eval(&l.path)?,
            })
        };
        self.activities
            .iter()
            .map(|a| {
                let step = match &a.spec {
                    ActivitySpec::Copy { source, sink } => Step::Copy {
                        source: loc(source)?,
                        sink: loc(sink)?,
                    },
                    ActivitySpec::Process { op, params, sink } => Step::Process {
                        step: ProcessStep::from_params(*op, params).map_err(BindError::Expression)?,
                        sink: sink.as_ref().map(loc).transpose()?,
                    },
                    ActivitySpec::Infer {
                        endpoint,
                        auth_key_ref,
                        timeout_ms,
                    } => Step::Infer {
                        endpoint: endpoint.clone(),
                        auth_key_ref: auth_key_ref.clone(),
                        timeout_ms: *timeout_ms,
                    },
                    ActivitySpec::Render {
                        detections_from,
                        sink,
                        detections_sink,
                        style,
                    } => {
                        let sink = loc(sink)?;
                        let detections_sink = match detections_sink {
                            Some(d) => loc(d)?,
                            None => BlobRef {
                                container: sink.container.clone(),
                                path: format!("{}.json", sink.path),
                            },
                        };
                        Step::Render {
                            detections_from: detections_from.clone(),
                            sink,
                            detections_sink,
                            style: style.clone(),
                        }
                    }
                };
                Ok(ResolvedActivity {
                    name: a.name.clone(),
                    retries: a.retries,
                    step,
                })
            })
            .collect()
    }
}

fn check_loc(v: &mut Vec<String>, at: &str, what: &str, loc: &Location, declared: &HashSet<&str>) {
    for (part, text) in [("container", &loc.container), ("path", &loc.path)] {
        check_expr(v, &format!("{at}: {what}.{part}"), text, declared);
    }
}

fn check_expr(v: &mut Vec<String>, at: &str, text: &str, declared: &HashSet<&str>) {
    match Expr::parse(text) {
        Err(e) => v.push(format!("{at}: {e}")),
        Ok(e) => {
            for r in e.refs() {
                match r {
                    Ref::Param(p) if declared.contains(p.as_str()) => {}
                    Ref::Param(p) => v.push(format!("{at}: references undeclared parameter {p:?}")),
                    other => v.push(format!("{at}: {other} is not available in pipelines; use @param.NAME")),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BindError {
    #[error("MissingParameter: {0}")]
    MissingParameter(String),
    #[error("UnknownParameter: {0}")]
    UnknownParameter(String),
    #[error("expression error: {0}")]
    Expression(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub container: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Copy {
        source: BlobRef,
        sink: BlobRef,
    },
    Process {
        step: ProcessStep,
        sink: Option<BlobRef>,
    },
    Infer {
        endpoint: String,
        auth_key_ref: String,
        timeout_ms: u64,
    },
    Render {
        detections_from: String,
        sink: BlobRef,
        detections_sink: BlobRef,
        style: RenderStyle,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedActivity {
    pub name: String,
    pub retries: u32,
    pub step: Step,
}
