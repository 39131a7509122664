//! Key-value scenario files.
//!
//! ```text
//! # Model 1, desk scale
//! kind = precision
//! model = ar1
//! p = 10
//! tau = 0.7
//! n = 100
//! mechanism = mcar
//! levels = 0, 0.1, 0.2, 0.3, 0.4, 0.5
//! methods = missglasso, meanimpute, mle
//! runs = 20
//! seed = 1
//! ```
//!
//! Levels are deletion fractions for `mcar`, deletion probabilities for
//! `mcar-bernoulli`, and normal quantiles `q` (threshold `Φ⁻¹(q)`) for
//! `mar` and `nmar`.

use std::path::Path;

use missglasso::io::read_csv;
use missglasso::linalg::SymMatrix;

use crate::error::{Result, SimError};
use crate::missingness::{normal_quantile, Mechanism};
use crate::models::CovModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Precision,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MechanismKind {
    Mcar,
    McarBernoulli,
    Mar,
    Nmar,
}

impl MechanismKind {
    pub fn at(self, level: f64) -> Mechanism {
        match self {
            MechanismKind::Mcar => Mechanism::Mcar(level),
            MechanismKind::McarBernoulli => Mechanism::McarBernoulli(level),
            MechanismKind::Mar => Mechanism::Mar(normal_quantile(level)),
            MechanismKind::Nmar => Mechanism::Nmar(normal_quantile(level)),
        }
    }

    /// Expected percentage of missing cells at `level`.
    pub fn missing_pct(self, level: f64) -> f64 {
        match self {
            MechanismKind::Mcar => 100.0 * level,
            _ => 100.0 * level / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tuning {
    /// Twice the observed negative log-likelihood on held-out rows.
    Validation,
    Cv,
    Bic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    // precision estimation
    MissGlasso,
    MeanImpute,
    Mle,
    // regression
    Complete,
    Mean,
    Knn,
    Missgl,
    TwoStage,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MissGlasso => "missglasso",
            Method::MeanImpute => "meanimpute",
            Method::Mle => "mle",
            Method::Complete => "complete",
            Method::Mean => "mean",
            Method::Knn => "knn",
            Method::Missgl => "missgl",
            Method::TwoStage => "two-stage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "missglasso" => Method::MissGlasso,
            "meanimpute" => Method::MeanImpute,
            "mle" => Method::Mle,
            "complete" => Method::Complete,
            "mean" => Method::Mean,
            "knn" => Method::Knn,
            "missgl" => Method::Missgl,
            "two-stage" => Method::TwoStage,
            _ => return None,
        })
    }

    pub fn kind(self) -> Kind {
        match self {
            Method::MissGlasso | Method::MeanImpute | Method::Mle => Kind::Precision,
            _ => Kind::Regression,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub kind: Kind,
    pub model: CovModel,
    /// Training rows.
    pub n: usize,
    pub n_validation: usize,
    pub mechanism: MechanismKind,
    pub levels: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Penalty selection for the precision estimators (first-stage penalty
    /// in regression scenarios).
    pub tuning: Tuning,
    pub lambda_count: usize,
    pub lambda_ratio: f64,
    pub cv_folds: usize,
    /// Regression only.
    pub beta: Vec<f64>,
    pub noise_sd: f64,
    /// Fixed neighbour count; chosen by held-out cells when absent.
    pub knn_k: Option<usize>,
    pub timing: bool,
}

impl ScenarioConfig {
    pub fn precision(model: CovModel, n: usize, mechanism: MechanismKind, levels: Vec<f64>) -> Self {
        ScenarioConfig {
            kind: Kind::Precision,
            model,
            n,
            n_validation: n,
            mechanism,
            levels,
            runs: 20,
            seed: 1,
            methods: vec![Method::MissGlasso, Method::MeanImpute],
            tuning: Tuning::Validation,
            lambda_count: 20,
            lambda_ratio: 0.01,
            cv_folds: 5,
            beta: Vec::new(),
            noise_sd: 1.0,
            knn_k: None,
            timing: false,
        }
    }

    pub fn regression(model: CovModel, n: usize, beta: Vec<f64>, noise_sd: f64, levels: Vec<f64>) -> Self {
        ScenarioConfig {
            kind: Kind::Regression,
            methods: vec![Method::Mean, Method::Knn, Method::Missgl, Method::TwoStage],
            tuning: Tuning::Cv,
            beta,
            noise_sd,
            ..Self::precision(model, n, MechanismKind::Mcar, levels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config { line: 0, message: m });
        let p = self.model.dim();
        if let Err(e) = self.model.generate() {
            return bad(format!("invalid model: {e}"));
        }
        if self.runs == 0 {
            return bad("runs must be >= 1".into());
        }
        if self.n < 2 || self.n_validation < 1 {
            return bad("need n >= 2 and n_validation >= 1".into());
        }
        if self.levels.is_empty() {
            return bad("no missingness levels".into());
        }
        for &l in &self.levels {
            let ok = match self.mechanism {
                MechanismKind::Mcar => (0.0..1.0).contains(&l),
                MechanismKind::McarBernoulli => (0.0..=1.0).contains(&l),
                _ => l > 0.0 && l < 1.0,
            };
            if !ok {
                return bad(format!("level {l} out of range for {:?}", self.mechanism));
            }
        }
        if self.mechanism != MechanismKind::Mcar && p % 3 != 0 {
            return bad(format!("block mechanisms need p divisible by 3, got {p}"));
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if let Some(m) = self.methods.iter().find(|m| m.kind() != self.kind) {
            return bad(format!("method {} does not apply to {:?} scenarios", m.name(), self.kind));
        }
        if self.kind == Kind::Regression {
            if self.beta.len() != p {
                return bad(format!("beta has {} entries, model has p = {p}", self.beta.len()));
            }
            if !(self.noise_sd > 0.0) {
                return bad("noise_sd must be positive".into());
            }
        }
        if self.lambda_count < 2 || !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return bad("need lambda_count >= 2 and 0 < lambda_ratio < 1".into());
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be >= 2".into());
        }
        if self.knn_k == Some(0) {
            return bad("knn_k must be >= 1".into());
        }
        Ok(())
    }

    /// Parses a scenario file; relative `sigma_file` paths resolve against
    /// `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut kv: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SimError::Config {
                    line: i + 1,
                    message: format!("expected `key = value`, found {line:?}"),
                });
            };
            let k = k.trim().to_string();
            if kv.iter().any(|(_, prev, _)| *prev == k) {
                return Err(SimError::Config {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
            kv.push((i + 1, k, v.trim().to_string()));
        }
        let get = |key: &str| kv.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()));
        fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| SimError::Config {
                line,
                message: format!("cannot parse `{key}` value {v:?}"),
            })
        }
        fn list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|s| num(line, key, s.trim())).collect()
        }
        let req = |key: &str| {
            get(key).ok_or_else(|| SimError::Config {
                line: 0,
                message: format!("missing required key `{key}`"),
            })
        };
        const KEYS: [&str; 22] = [
            "kind", "model", "p", "tau", "block", "rho", "sigma_file", "n", "n_validation", "mechanism", "levels",
            "runs", "seed", "methods", "tuning", "lambda_count", "lambda_ratio", "cv_folds", "beta", "noise_sd",
            "knn_k", "timing",
        ];
        if let Some((line, k, _)) = kv.iter().find(|(_, k, _)| !KEYS.contains(&k.as_str())) {
            return Err(SimError::Config {
                line: *line,
                message: format!("unknown key `{k}`"),
            });
        }

        let (l, kind) = get("kind").unwrap_or((0, "precision"));
        let kind = match kind {
            "precision" => Kind::Precision,
            "regression" => Kind::Regression,
            other => {
                return Err(SimError::Config {
                    line: l,
                    message: format!("unknown kind {other:?}"),
                })
            }
        };
        let (ml, model_name) = req("model")?;
        let p = |()| -> Result<usize> {
            let (l, v) = req("p")?;
            num(l, "p", v)
        };
        let model = match model_name {
            "ar1" => {
                let tau = match get("tau") {
                    Some((l, v)) => num(l, "tau", v)?,
                    None => 0.7,
                };
                CovModel::Ar1 { p: p(())?, tau }
            }
            "ar4" => CovModel::Ar4 { p: p(())? },
            "block" => CovModel::Block { p: p(())? },
            "equicorrelated" => {
                let block = match get("block") {
                    Some((l, v)) => num(l, "block", v)?,
                    None => 9,
                };
                let rho = match get("rho") {
                    Some((l, v)) => num(l, "rho", v)?,
                    None => 0.5,
                };
                CovModel::Equicorrelated { p: p(())?, block, rho }
            }
            "custom" => {
                let (l, file) = req("sigma_file")?;
                let path = match base {
                    Some(b) if Path::new(file).is_relative() => b.join(file),
                    _ => Path::new(file).to_path_buf(),
                };
                let f = std::fs::File::open(&path).map_err(|e| SimError::Config {
                    line: l,
                    message: format!("cannot open {}: {e}", path.display()),
                })?;
                let t = read_csv(f, false)?;
                if !t.data.is_complete() || t.data.nrows() != t.data.ncols() {
                    return Err(SimError::Config {
                        line: l,
                        message: "covariance file must be a complete square matrix".into(),
                    });
                }
                let s = SymMatrix::new(t.data.filled(|_, _| 0.0))?;
                CovModel::Custom(s)
            }
            other => {
                return Err(SimError::Config {
                    line: ml,
                    message: format!("unknown model {other:?}"),
                })
            }
        };
        let (l, n) = req("n")?;
        let n: usize = num(l, "n", n)?;
        let (l, mech) = get("mechanism").unwrap_or((0, "mcar"));
        let mechanism = match mech {
            "mcar" => MechanismKind::Mcar,
            "mcar-bernoulli" => MechanismKind::McarBernoulli,
            "mar" => MechanismKind::Mar,
            "nmar" => MechanismKind::Nmar,
            other => {
                return Err(SimError::Config {
                    line: l,
                    message: format!("unknown mechanism {other:?}"),
                })
            }
        };
        let (l, lv) = req("levels")?;
        let levels = list(l, "levels", lv)?;
        let mut cfg = match kind {
            Kind::Precision => ScenarioConfig::precision(model, n, mechanism, levels),
            Kind::Regression => {
                let (l, b) = req("beta")?;
                let beta = list(l, "beta", b)?;
                let sd = match get("noise_sd") {
                    Some((l, v)) => num(l, "noise_sd", v)?,
                    None => 1.0,
                };
                ScenarioConfig {
                    mechanism,
                    ..ScenarioConfig::regression(model, n, beta, sd, levels)
                }
            }
        };
        if let Some((l, v)) = get("n_validation") {
            cfg.n_validation = num(l, "n_validation", v)?;
        }
        if let Some((l, v)) = get("runs") {
            cfg.runs = num(l, "runs", v)?;
        }
        if let Some((l, v)) = get("seed") {
            cfg.seed = num(l, "seed", v)?;
        }
        if let Some((l, v)) = get("methods") {
            cfg.methods = v
                .split(',')
                .map(|s| {
                    Method::parse(s.trim()).ok_or_else(|| SimError::Config {
                        line: l,
                        message: format!("unknown method {:?}", s.trim()),
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some((l, v)) = get("tuning") {
            cfg.tuning = match v {
                "validation" => Tuning::Validation,
                "cv" => Tuning::Cv,
                "bic" => Tuning::Bic,
                other => {
                    return Err(SimError::Config {
                        line: l,
                        message: format!("unknown tuning {other:?}"),
                    })
                }
            };
        }
        if let Some((l, v)) = get("lambda_count") {
            cfg.lambda_count = num(l, "lambda_count", v)?;
        }
        if let Some((l, v)) = get("lambda_ratio") {
            cfg.lambda_ratio = num(l, "lambda_ratio", v)?;
        }
        if let Some((l, v)) = get("cv_folds") {
            cfg.cv_folds = num(l, "cv_folds", v)?;
        }
        if let Some((l, v)) = get("knn_k") {
            cfg.knn_k = Some(num(l, "knn_k", v)?);
        }
        if let Some((l, v)) = get("timing") {
            cfg.timing = num(l, "timing", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }
}
