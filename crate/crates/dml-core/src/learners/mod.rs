//! Regression learners behind one fit/predict contract, plus the textual
//! learner-spec codec used in task payloads.
//!
//! Three families: ridge regression, CART regression trees, and random
//! forests built from those trees. Fitting is a pure function of
//! `(spec, data, seed XOR seed_salt)`; forests derive one sub-stream per
//! tree so any fitting order produces identical models.
//!
//! Spec grammar: `kind(key=value,...)`. Canonical rendering sorts keys
//! alphabetically, uses no whitespace, and prints floats in their
//! shortest round-trip form, so `render(parse(s))` is byte-stable.

mod forest;
mod ridge;
mod tree;

pub use tree::{Node, RegressionTree, TreeParams};

use thiserror::Error;

use crate::rng::{derive_seed, domain, DetRng};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("unknown learner kind '{0}'")]
    UnknownLearner(String),
    #[error("bad parameter '{name}': {reason}")]
    BadParam { name: String, reason: String },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("singular system: ridge with lambda=0 needs a full-rank design")]
    SingularSystem,
    #[error("feature width mismatch: model trained on {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
}

/// How many features a forest samples as split candidates at each node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxFeatures {
    All,
    Sqrt,
    Fraction(f64),
}

impl MaxFeatures {
    /// Resolved candidate count for `q` features (always in 1..=q).
    pub fn resolve(&self, q: usize) -> usize {
        match self {
            MaxFeatures::All => q,
            MaxFeatures::Sqrt => ((q as f64).sqrt().floor() as usize).clamp(1, q),
            MaxFeatures::Fraction(f) => ((f * q as f64).floor() as usize).clamp(1, q),
        }
    }
}

/// A parsed, validated learner configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerSpec {
    Ridge {
        lambda: f64,
        seed_salt: u64,
    },
    Tree {
        max_depth: Option<u32>,
        min_leaf: usize,
        seed_salt: u64,
    },
    RandomForest {
        n_estimators: usize,
        max_features: MaxFeatures,
        min_leaf: usize,
        max_depth: Option<u32>,
        seed_salt: u64,
    },
}

impl LearnerSpec {
    pub fn seed_salt(&self) -> u64 {
        match self {
            LearnerSpec::Ridge { seed_salt, .. }
            | LearnerSpec::Tree { seed_salt, .. }
            | LearnerSpec::RandomForest { seed_salt, .. } => *seed_salt,
        }
    }

    /// Canonical string form: kind, then `key=value` pairs sorted by key.
    pub fn render(&self) -> String {
        fn depth(d: &Option<u32>) -> String {
            d.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
        }
        match self {
            LearnerSpec::Ridge { lambda, seed_salt } => {
                format!("ridge(lambda={lambda},seed_salt={seed_salt})")
            }
            LearnerSpec::Tree { max_depth, min_leaf, seed_salt } => format!(
                "tree(max_depth={},min_leaf={min_leaf},seed_salt={seed_salt})",
                depth(max_depth)
            ),
            LearnerSpec::RandomForest {
                n_estimators,
                max_features,
                min_leaf,
                max_depth,
                seed_salt,
            } => {
                let mf = match max_features {
                    MaxFeatures::All => "all".to_string(),
                    MaxFeatures::Sqrt => "sqrt".to_string(),
                    MaxFeatures::Fraction(f) => format!("{f}"),
                };
                format!(
                    "random_forest(max_depth={},max_features={mf},min_leaf={min_leaf},n_estimators={n_estimators},seed_salt={seed_salt})",
                    depth(max_depth)
                )
            }
        }
    }
}

impl std::fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for LearnerSpec {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_learner_spec(s)
    }
}

/// Parses `kind(key=value,...)`; missing keys take documented defaults.
pub fn parse_learner_spec(text: &str) -> Result<LearnerSpec, LearnerError> {
    let text = text.trim();
    let (kind, body) = match text.find('(') {
        Some(open) => {
            let close = text.rfind(')').ok_or_else(|| LearnerError::BadParam {
                name: "spec".into(),
                reason: "missing closing parenthesis".into(),
            })?;
            (&text[..open], &text[open + 1..close])
        }
        None => (text, ""),
    };
    let kind = kind.trim();
    let mut pairs = Vec::new();
    for part in body.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (k, v) = part.split_once('=').ok_or_else(|| LearnerError::BadParam {
            name: part.to_string(),
            reason: "expected key=value".into(),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }

    let mut take = |key: &str| -> Option<String> {
        pairs
            .iter()
            .position(|(k, _)| k == key)
            .map(|i| pairs.remove(i).1)
    };
    let bad = |name: &str, reason: &str| LearnerError::BadParam {
        name: name.to_string(),
        reason: reason.to_string(),
    };

    let parse_f64 = |name: &str, v: &str| -> Result<f64, LearnerError> {
        let x: f64 = v.parse().map_err(|_| bad(name, "not a number"))?;
        if !x.is_finite() {
            return Err(bad(name, "must be finite"));
        }
        Ok(x)
    };
    let parse_u64 = |name: &str, v: &str| -> Result<u64, LearnerError> {
        v.parse().map_err(|_| bad(name, "not an unsigned integer"))
    };
    let parse_depth = |name: &str, v: &str| -> Result<Option<u32>, LearnerError> {
        if v == "none" {
            return Ok(None);
        }
        let d: u32 = v.parse().map_err(|_| bad(name, "expected a positive integer or 'none'"))?;
        if d == 0 {
            return Err(bad(name, "must be >= 1 (use 'none' for unlimited)"));
        }
        Ok(Some(d))
    };
    let parse_min_leaf = |name: &str, v: &str| -> Result<usize, LearnerError> {
        let m: usize = v.parse().map_err(|_| bad(name, "not a positive integer"))?;
        if m == 0 {
            return Err(bad(name, "must be >= 1"));
        }
        Ok(m)
    };

    let spec = match kind {
        "ridge" => {
            let lambda = match take("lambda") {
                Some(v) => {
                    let l = parse_f64("lambda", &v)?;
                    if l < 0.0 {
                        return Err(bad("lambda", "must be >= 0"));
                    }
                    l
                }
                None => 1.0,
            };
            let seed_salt = match take("seed_salt") {
                Some(v) => parse_u64("seed_salt", &v)?,
                None => 0,
            };
            LearnerSpec::Ridge { lambda, seed_salt }
        }
        "tree" => {
            let max_depth = match take("max_depth") {
                Some(v) => parse_depth("max_depth", &v)?,
                None => None,
            };
            let min_leaf = match take("min_leaf") {
                Some(v) => parse_min_leaf("min_leaf", &v)?,
                None => 1,
            };
            let seed_salt = match take("seed_salt") {
                Some(v) => parse_u64("seed_salt", &v)?,
                None => 0,
            };
            LearnerSpec::Tree { max_depth, min_leaf, seed_salt }
        }
        "random_forest" => {
            let n_estimators = match take("n_estimators") {
                Some(v) => {
                    let n: usize = v.parse().map_err(|_| bad("n_estimators", "not a positive integer"))?;
                    if n == 0 {
                        return Err(bad("n_estimators", "must be >= 1"));
                    }
                    n
                }
                None => 100,
            };
            let max_features = match take("max_features") {
                Some(v) => match v.as_str() {
                    "all" => MaxFeatures::All,
                    "sqrt" => MaxFeatures::Sqrt,
                    other => {
                        let f = parse_f64("max_features", other)?;
                        if f <= 0.0 || f > 1.0 {
                            return Err(bad("max_features", "fraction must be in (0, 1]"));
                        }
                        MaxFeatures::Fraction(f)
                    }
                },
                None => MaxFeatures::All,
            };
            let min_leaf = match take("min_leaf") {
                Some(v) => parse_min_leaf("min_leaf", &v)?,
                None => 1,
            };
            let max_depth = match take("max_depth") {
                Some(v) => parse_depth("max_depth", &v)?,
                None => None,
            };
            let seed_salt = match take("seed_salt") {
                Some(v) => parse_u64("seed_salt", &v)?,
                None => 0,
            };
            LearnerSpec::RandomForest { n_estimators, max_features, min_leaf, max_depth, seed_salt }
        }
        other => return Err(LearnerError::UnknownLearner(other.to_string())),
    };

    if let Some((k, _)) = pairs.first() {
        return Err(bad(k, &format!("unknown parameter for '{kind}'")));
    }
    Ok(spec)
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { n_rows, n_cols, data }
    }

    pub fn from_row_major(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * n_cols);
        Self { n_rows, n_cols, data }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Learner state after fitting; predictions are a pure function of it.
#[derive(Debug, Clone)]
pub enum ModelState {
    Ridge { coefficients: Vec<f64>, intercept: f64 },
    Tree(RegressionTree),
    Forest(Vec<RegressionTree>),
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    spec: LearnerSpec,
    n_features: usize,
    state: ModelState,
}

impl FittedModel {
    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }
}

/// Fits a learner. Deterministic given `(spec, x, y, seed ^ spec.seed_salt)`;
/// forest tree `i` uses the sub-stream `derive_seed(effective, [TREE, i])`
/// regardless of fitting order.
pub fn fit(spec: &LearnerSpec, x: &Matrix, y: &[f64], seed: u64) -> Result<FittedModel, LearnerError> {
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(LearnerError::DegenerateInput("empty design matrix".into()));
    }
    if x.n_rows() != y.len() {
        return Err(LearnerError::DegenerateInput(format!(
            "{} rows but {} targets",
            x.n_rows(),
            y.len()
        )));
    }
    if !x.all_finite() {
        return Err(LearnerError::NonFiniteInput("feature matrix"));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(LearnerError::NonFiniteInput("target vector"));
    }

    let effective = seed ^ spec.seed_salt();
    let state = match spec {
        LearnerSpec::Ridge { lambda, .. } => {
            let (coefficients, intercept) = ridge::fit_ridge(x, y, *lambda)?;
            ModelState::Ridge { coefficients, intercept }
        }
        LearnerSpec::Tree { max_depth, min_leaf, .. } => {
            let params = TreeParams { max_depth: *max_depth, min_leaf: *min_leaf };
            if x.n_rows() < params.min_leaf {
                return Err(LearnerError::DegenerateInput(format!(
                    "{} rows < min_leaf {}",
                    x.n_rows(),
                    params.min_leaf
                )));
            }
            let rows: Vec<usize> = (0..x.n_rows()).collect();
            ModelState::Tree(tree::grow(x, y, &rows, &params, x.n_cols(), None))
        }
        LearnerSpec::RandomForest { n_estimators, max_features, min_leaf, max_depth, .. } => {
            if x.n_rows() < *min_leaf {
                return Err(LearnerError::DegenerateInput(format!(
                    "{} rows < min_leaf {min_leaf}",
                    x.n_rows()
                )));
            }
            let params = TreeParams { max_depth: *max_depth, min_leaf: *min_leaf };
            ModelState::Forest(forest::fit_forest(
                x,
                y,
                *n_estimators,
                max_features.resolve(x.n_cols()),
                &params,
                effective,
            ))
        }
    };
    Ok(FittedModel { spec: spec.clone(), n_features: x.n_cols(), state })
}

/// Predicts targets for `x`; the forest prediction is the mean over trees.
pub fn predict(model: &FittedModel, x: &Matrix) -> Result<Vec<f64>, LearnerError> {
    if x.n_cols() != model.n_features {
        return Err(LearnerError::WidthMismatch { expected: model.n_features, got: x.n_cols() });
    }
    if !x.all_finite() {
        return Err(LearnerError::NonFiniteInput("feature matrix"));
    }
    let out = match &model.state {
        ModelState::Ridge { coefficients, intercept } => (0..x.n_rows())
            .map(|i| {
                let row = x.row(i);
                intercept + row.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect(),
        ModelState::Tree(tree) => (0..x.n_rows()).map(|i| tree.predict_row(x.row(i))).collect(),
        ModelState::Forest(trees) => forest::predict_forest(trees, x),
    };
    Ok(out)
}

pub(crate) fn tree_stream(effective_seed: u64, tree_index: usize) -> DetRng {
    DetRng::from_seed(derive_seed(effective_seed, &[domain::TREE, tree_index as u64]))
}
