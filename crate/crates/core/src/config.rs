//! Run configuration: `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::neural::Activation;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Splits config text into trimmed `(key, value)` pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthScaling {
    /// `hamming / (1 + |l_q - l_t| / l_max)`
    #[default]
    Divide,
    /// `hamming * (1 + |l_q - l_t| / l_max)`
    Multiply,
}

impl FromStr for LengthScaling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "divide" => Ok(Self::Divide),
            "multiply" => Ok(Self::Multiply),
            _ => Err(format!("unknown length scaling `{s}`")),
        }
    }
}

impl std::fmt::Display for LengthScaling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Divide => "divide",
            Self::Multiply => "multiply",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnnSpace {
    #[default]
    Calpha,
    Features,
}

impl FromStr for KnnSpace {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "calpha" => Ok(Self::Calpha),
            "features" => Ok(Self::Features),
            _ => Err(format!("unknown knn metric `{s}`")),
        }
    }
}

impl std::fmt::Display for KnnSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Calpha => "calpha",
            Self::Features => "features",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub negatives: usize,
    pub accumulation: usize,
    pub n_layers: usize,
    pub code_length: usize,
    pub rho: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Optimizer steps; 0 derives the count from `epochs`.
    pub steps: usize,
    pub alpha: f64,
    pub k_nn: usize,
    pub hidden: usize,
    pub n_rbf: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
    pub knn_metric: KnnSpace,
    pub activation: Activation,
    pub length_scaling: LengthScaling,
    /// Substructure sampling of positives (needs chains, not only graphs).
    pub substructures: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            lambda: 0.5,
            tau: 0.07,
            negatives: 62,
            accumulation: 40,
            n_layers: 6,
            code_length: 400,
            rho: 0.9,
            lr: 3e-4,
            epochs: 100,
            steps: 0,
            alpha: 0.9,
            k_nn: 30,
            hidden: 128,
            n_rbf: 16,
            rbf_min: 0.0,
            rbf_max: 20.0,
            knn_metric: KnnSpace::Calpha,
            activation: Activation::Relu,
            length_scaling: LengthScaling::Divide,
            substructures: true,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "gamma" => self.gamma = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "negatives" => self.negatives = parse(key, value)?,
            "accumulation" => self.accumulation = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "code_length" => self.code_length = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "k_nn" => self.k_nn = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "n_rbf" => self.n_rbf = parse(key, value)?,
            "rbf_min" => self.rbf_min = parse(key, value)?,
            "rbf_max" => self.rbf_max = parse(key, value)?,
            "knn_metric" => self.knn_metric = parse(key, value)?,
            "activation" => self.activation = parse(key, value)?,
            "length_scaling" => self.length_scaling = parse(key, value)?,
            "substructures" => self.substructures = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let checks: [(bool, &str); 16] = [
            (self.gamma >= 0.0, "gamma must be >= 0"),
            (self.lambda >= 0.0, "lambda must be >= 0"),
            (self.tau > 0.0, "tau must be > 0"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (self.accumulation >= 1, "accumulation must be >= 1"),
            (self.n_layers >= 1, "n_layers must be >= 1"),
            (self.code_length >= 1, "code_length must be >= 1"),
            (self.rho > 0.0 && self.rho < 1.0, "rho must be in (0, 1)"),
            (self.lr > 0.0, "lr must be > 0"),
            (self.alpha > 0.0 && self.alpha <= 1.0, "alpha must be in (0, 1]"),
            (self.k_nn >= 1, "k_nn must be >= 1"),
            (self.hidden >= 1, "hidden must be >= 1"),
            (self.n_rbf >= 2, "n_rbf must be >= 2"),
            (self.rbf_max > self.rbf_min, "rbf_max must exceed rbf_min"),
            (self.epochs >= 1 || self.steps >= 1, "epochs or steps must be >= 1"),
            (self.code_length <= u32::MAX as usize, "code_length too large"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("gamma", &self.gamma);
        put("lambda", &self.lambda);
        put("tau", &self.tau);
        put("negatives", &self.negatives);
        put("accumulation", &self.accumulation);
        put("n_layers", &self.n_layers);
        put("code_length", &self.code_length);
        put("rho", &self.rho);
        put("lr", &self.lr);
        put("epochs", &self.epochs);
        put("steps", &self.steps);
        put("alpha", &self.alpha);
        put("k_nn", &self.k_nn);
        put("hidden", &self.hidden);
        put("n_rbf", &self.n_rbf);
        put("rbf_min", &self.rbf_min);
        put("rbf_max", &self.rbf_max);
        put("knn_metric", &self.knn_metric);
        put("activation", &self.activation);
        put("length_scaling", &self.length_scaling);
        put("substructures", &self.substructures);
        put("seed", &self.seed);
        s
    }

    pub fn featurize_config(&self) -> Result<crate::featurize::FeaturizeConfig, ConfigError> {
        let rbf = crate::featurize::RbfBank::linear(self.n_rbf, self.rbf_min, self.rbf_max)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let metric = match self.knn_metric {
            KnnSpace::Calpha => crate::featurize::KnnMetric::CalphaCoords,
            KnnSpace::Features => crate::featurize::KnnMetric::NodeFeatures,
        };
        Ok(crate::featurize::FeaturizeConfig { k: self.k_nn, rbf, metric })
    }

    pub fn encoder_config(&self) -> crate::encoder::EncoderConfig {
        crate::encoder::EncoderConfig {
            hidden_dim: self.hidden,
            n_layers: self.n_layers,
            code_length: self.code_length,
            node_in: crate::featurize::NODE_FEATURE_DIM,
            edge_in: crate::featurize::ATOM_PAIRS * self.n_rbf,
            k: self.k_nn,
            activation: self.activation,
        }
    }

    pub fn loss_config(&self) -> crate::objective::LossConfig {
        crate::objective::LossConfig { gamma: self.gamma, lambda: self.lambda, tau: self.tau, negatives: self.negatives }
    }
}
