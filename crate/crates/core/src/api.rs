//! The search request/response contract shared by the HTTP service, the
//! one-shot CLI query, and the web UI.

use serde::{Deserialize, Serialize};

use crate::rerank::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Graph,
    Ivfpq,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Graph => "graph",
            Mode::Ivfpq => "ivfpq",
        })
    }
}

/// Inclusive bounds every request parameter is checked against. The web UI
/// validates against the same table, published at `/v1/stats`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub k: (usize, usize),
    pub big_k: (usize, usize),
    pub n_probe: (usize, usize),
    pub l: (usize, usize),
    pub w: (usize, usize),
    pub lambda: (f32, f32),
    pub query_chars: (usize, usize),
}

pub const BOUNDS: Bounds = Bounds {
    k: (1, 1000),
    big_k: (1, 100_000),
    n_probe: (1, 65_536),
    l: (1, 100_000),
    w: (1, 64),
    lambda: (0.0, 1.0),
    query_chars: (1, 10_000),
};

/// Server-side defaults; every one can be overridden per request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestDefaults {
    pub k: usize,
    #[serde(rename = "K")]
    pub big_k: usize,
    pub mode: Mode,
    pub exact: bool,
    pub diverse: bool,
    pub n_probe: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub lambda: f32,
}

impl Default for RequestDefaults {
    fn default() -> Self {
        Self {
            k: 10,
            big_k: 1000,
            mode: Mode::Graph,
            exact: false,
            diverse: false,
            n_probe: 256,
            l: 128,
            w: 4,
            lambda: 0.5,
        }
    }
}

/// `POST /v1/search` body. Omitted fields take the server defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverse: Option<bool>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub big_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_probe: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f32>,
}

impl SearchRequest {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// A request with defaults applied and bounds checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub mode: Mode,
    pub k: usize,
    #[serde(rename = "K")]
    pub big_k: usize,
    pub exact: bool,
    pub diverse: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_probe: Option<usize>,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(rename = "W", skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    pub lambda: f32,
}

fn check_range<T: PartialOrd + std::fmt::Display + Copy>(
    errors: &mut Vec<FieldError>,
    field: &str,
    value: T,
    (lo, hi): (T, T),
) {
    // written so that NaN fails
    if !(value >= lo && value <= hi) {
        errors.push(FieldError {
            field: field.into(),
            message: format!("must be in [{lo}, {hi}], got {value}"),
        });
    }
}

/// Applies defaults and validates. Parameters that do not apply to the
/// selected mode are dropped with a warning.
pub fn resolve(
    req: &SearchRequest,
    defaults: &RequestDefaults,
) -> Result<(ResolvedParams, Vec<String>), Vec<FieldError>> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mode = req.mode.unwrap_or(defaults.mode);
    let k = req.k.unwrap_or(defaults.k);
    let big_k = req.big_k.unwrap_or(defaults.big_k.max(k));
    let lambda = req.lambda.unwrap_or(defaults.lambda);
    let n_probe = req.n_probe.unwrap_or(defaults.n_probe);
    let l = req.l.unwrap_or(defaults.l);
    let w = req.w.unwrap_or(defaults.w);

    check_range(&mut errors, "query", req.query.trim().chars().count(), BOUNDS.query_chars);
    check_range(&mut errors, "k", k, BOUNDS.k);
    check_range(&mut errors, "K", big_k, BOUNDS.big_k);
    if big_k < k {
        errors.push(FieldError {
            field: "K".into(),
            message: format!("must be >= k ({k}), got {big_k}"),
        });
    }
    check_range(&mut errors, "lambda", lambda, BOUNDS.lambda);
    match mode {
        Mode::Ivfpq => {
            check_range(&mut errors, "n_probe", n_probe, BOUNDS.n_probe);
            for (name, given) in [("L", req.l.is_some()), ("W", req.w.is_some())] {
                if given {
                    warnings.push(format!("{name} ignored in ivfpq mode"));
                }
            }
        }
        Mode::Graph => {
            check_range(&mut errors, "L", l, BOUNDS.l);
            check_range(&mut errors, "W", w, BOUNDS.w);
            if w > l {
                errors.push(FieldError {
                    field: "W".into(),
                    message: format!("must be <= L ({l}), got {w}"),
                });
            }
            if req.n_probe.is_some() {
                warnings.push("n_probe ignored in graph mode".into());
            }
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let (n_probe, l, w) = match mode {
        Mode::Ivfpq => (Some(n_probe), None, None),
        Mode::Graph => (None, Some(l), Some(w)),
    };
    Ok((
        ResolvedParams {
            mode,
            k,
            big_k,
            exact: req.exact.unwrap_or(defaults.exact),
            diverse: req.diverse.unwrap_or(defaults.diverse),
            n_probe,
            l,
            w,
            lambda,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub rank: usize,
    pub chunk_id: u64,
    pub doc_id: String,
    pub source: String,
    pub text: String,
    pub score: f32,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub ann_ms: f64,
    pub exact_ms: f64,
    pub mmr_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReport {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub timings: Timings,
    pub cache: CacheReport,
    pub warnings: Vec<String>,
    /// True when an optional stage failed and its input was returned instead.
    pub degraded: bool,
    /// The parameters actually used.
    pub params: ResolvedParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let (p, w) = resolve(&SearchRequest::new("q"), &RequestDefaults::default()).unwrap();
        assert_eq!((p.k, p.big_k, p.l, p.w, p.n_probe), (10, 1000, Some(128), Some(4), None));
        assert_eq!(p.lambda, 0.5);
        assert!(w.is_empty());
    }

    #[test]
    fn field_level_errors() {
        let req = SearchRequest {
            k: Some(0),
            lambda: Some(1.5),
            big_k: Some(0),
            ..SearchRequest::new(" ")
        };
        let errs = resolve(&req, &RequestDefaults::default()).unwrap_err();
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["query", "k", "K", "lambda"]);
        let nan = SearchRequest {
            lambda: Some(f32::NAN),
            ..SearchRequest::new("x")
        };
        assert!(resolve(&nan, &RequestDefaults::default()).is_err());
        let small_big_k = SearchRequest {
            k: Some(20),
            big_k: Some(10),
            ..SearchRequest::new("x")
        };
        assert_eq!(resolve(&small_big_k, &RequestDefaults::default()).unwrap_err()[0].field, "K");
    }

    #[test]
    fn foreign_mode_params_warn() {
        let req = SearchRequest {
            mode: Some(Mode::Ivfpq),
            l: Some(5),
            ..SearchRequest::new("x")
        };
        let (p, w) = resolve(&req, &RequestDefaults::default()).unwrap();
        assert_eq!(p.l, None);
        assert_eq!(p.n_probe, Some(256));
        assert_eq!(w, ["L ignored in ivfpq mode"]);
    }

    #[test]
    fn wire_names() {
        let req: SearchRequest =
            serde_json::from_str(r#"{"query":"a","K":50,"L":64,"W":2,"lambda":0.3}"#).unwrap();
        assert_eq!((req.big_k, req.l, req.w), (Some(50), Some(64), Some(2)));
        assert!(serde_json::from_str::<SearchRequest>(r#"{"query":"a","bogus":1}"#).is_err());
    }
}
