//! Run configuration: a TOML file with full defaulting, overridable from the
//! command line with repeated `--set key=value` flags.

use serde::{Deserialize, Serialize};

use l2gd_core::CompressorKind;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    L2gd,
    FedAvg,
}

/// Stepsize choice: "auto" (1/(2 gamma) for l2gd, 1/L for fedavg), an
/// explicit positive number, or "local:<a>" to hold the effective per-device
/// stepsize at `a` across a p-grid (eta = a * n * (1-p) for l2gd).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eta {
    Auto,
    Fixed(f64),
    LocalStepsize(f64),
}

impl Serialize for Eta {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Eta::Auto => s.serialize_str("auto"),
            Eta::Fixed(v) => s.serialize_f64(*v),
            Eta::LocalStepsize(v) => s.serialize_str(&format!("local:{v}")),
        }
    }
}

impl<'de> Deserialize<'de> for Eta {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Eta::Fixed(v)),
            Raw::Text(s) if s == "auto" => Ok(Eta::Auto),
            Raw::Text(s) => match s.strip_prefix("local:").map(str::parse::<f64>) {
                Some(Ok(v)) => Ok(Eta::LocalStepsize(v)),
                _ => Err(serde::de::Error::custom(format!(
                    "eta must be a number, \"auto\", or \"local:<stepsize>\", got `{s}`"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// LIBSVM text file; `target_d` pads the dimension upward.
    Libsvm {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_d: Option<usize>,
    },
    /// Seeded synthetic instance (shifted-Gaussian features, logistic labels).
    Synth {
        d: usize,
        per_client: usize,
        #[serde(default = "default_heterogeneity")]
        heterogeneity: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_heterogeneity() -> f64 {
    1.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            d: 20,
            per_client: 50,
            heterogeneity: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorsConfig {
    #[serde(default = "identity")]
    pub client: CompressorKind,
    #[serde(default = "identity")]
    pub master: CompressorKind,
}

fn identity() -> CompressorKind {
    CompressorKind::Identity
}

impl Default for CompressorsConfig {
    fn default() -> Self {
        CompressorsConfig {
            client: CompressorKind::Identity,
            master: CompressorKind::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrids {
    /// Explicit p values; defaults to the single configured p.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    /// Explicit lambda values; defaults to the single configured lambda.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    /// Monte-Carlo samples for the beta / E||G(x*)||^2 estimators.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Precision target for the nonconvex budget numbers.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Points for the optimal-p grid cross-checks.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_samples() -> usize {
    20_000
}
fn default_epsilon() -> f64 {
    0.3
}
fn default_grid_points() -> usize {
    100_000
}

impl Default for TheoryParams {
    fn default() -> Self {
        TheoryParams {
            samples: default_samples(),
            epsilon: default_epsilon(),
            grid_points: default_grid_points(),
        }
    }
}

/// The raw file schema: everything optional so absent fields take their
/// documented defaults and algorithm-specific fields can be told apart from
/// explicitly set ones.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algorithm: Option<Algorithm>,
    n: Option<usize>,
    p: Option<f64>,
    lambda: Option<f64>,
    l2: Option<f64>,
    eta: Option<Eta>,
    steps: Option<usize>,
    local_steps: Option<usize>,
    seed: Option<u64>,
    seeds: Option<usize>,
    out: Option<String>,
    dataset: Option<DatasetConfig>,
    compressors: Option<CompressorsConfig>,
    sweep: Option<SweepGrids>,
    theory: Option<TheoryParams>,
}

/// A fully defaulted, validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub algorithm: Algorithm,
    pub n: usize,
    pub p: f64,
    pub lambda: f64,
    pub l2: f64,
    pub eta: Eta,
    pub steps: usize,
    pub local_steps: usize,
    pub seed: u64,
    pub seeds: usize,
    pub out: String,
    pub dataset: DatasetConfig,
    pub compressors: CompressorsConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrids>,
    pub theory: TheoryParams,
}

pub const DEFAULT_P: f64 = 0.4;
pub const DEFAULT_LAMBDA: f64 = 10.0;

impl Config {
    fn from_raw(raw: RawConfig) -> Result<Config, CliError> {
        let algorithm = raw.algorithm.unwrap_or(Algorithm::L2gd);
        match algorithm {
            Algorithm::L2gd => {
                if raw.local_steps.is_some() {
                    return Err(CliError::config(
                        "local_steps only applies to algorithm = \"fedavg\"",
                    ));
                }
            }
            Algorithm::FedAvg => {
                if raw.p.is_some() || raw.lambda.is_some() {
                    return Err(CliError::config(
                        "p and lambda only apply to algorithm = \"l2gd\"",
                    ));
                }
            }
        }
        let cfg = Config {
            algorithm,
            n: raw.n.unwrap_or(5),
            p: raw.p.unwrap_or(DEFAULT_P),
            lambda: raw.lambda.unwrap_or(DEFAULT_LAMBDA),
            l2: raw.l2.unwrap_or(0.01),
            eta: raw.eta.unwrap_or(Eta::Auto),
            steps: raw.steps.unwrap_or(100),
            local_steps: raw.local_steps.unwrap_or(5),
            seed: raw.seed.unwrap_or(1),
            seeds: raw.seeds.unwrap_or(1),
            out: raw.out.unwrap_or_else(|| "out".to_string()),
            dataset: raw.dataset.unwrap_or_default(),
            compressors: raw.compressors.unwrap_or_default(),
            sweep: raw.sweep,
            theory: raw.theory.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.n == 0 {
            return Err(CliError::config("n must be at least 1"));
        }
        if self.steps == 0 {
            return Err(CliError::config("steps must be at least 1"));
        }
        if self.seeds == 0 {
            return Err(CliError::config("seeds must be at least 1"));
        }
        if self.algorithm == Algorithm::L2gd && !(self.p > 0.0 && self.p < 1.0) {
            return Err(CliError::config(format!(
                "p must lie strictly in (0, 1); got {}",
                self.p
            )));
        }
        if self.lambda < 0.0 {
            return Err(CliError::config("lambda must be non-negative"));
        }
        if self.l2 < 0.0 {
            return Err(CliError::config("l2 must be non-negative"));
        }
        if let Eta::Fixed(v) | Eta::LocalStepsize(v) = self.eta {
            if v.is_nan() || v <= 0.0 {
                return Err(CliError::config(format!("eta must be positive; got {v}")));
            }
        }
        if self.algorithm == Algorithm::FedAvg && self.local_steps == 0 {
            return Err(CliError::config("local_steps must be at least 1"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.p.as_deref() == Some(&[]) || sweep.lambda.as_deref() == Some(&[]) {
                return Err(CliError::config("sweep grids must be non-empty"));
            }
            if let Some(ps) = &sweep.p {
                if ps.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(CliError::config("sweep p values must lie in (0, 1)"));
                }
            }
            if let Some(ls) = &sweep.lambda {
                if ls.iter().any(|l| *l < 0.0) {
                    return Err(CliError::config("sweep lambda values must be non-negative"));
                }
            }
        }
        match &self.dataset {
            DatasetConfig::Synth { d, per_client, .. } => {
                if *d == 0 || *per_client == 0 {
                    return Err(CliError::config("synth dataset needs d, per_client >= 1"));
                }
            }
            DatasetConfig::Libsvm { path, .. } => {
                if path.is_empty() {
                    return Err(CliError::config("dataset path must not be empty"));
                }
            }
        }
        Ok(())
    }

    /// Normalized TOML with algorithm-irrelevant fields dropped, so a
    /// config file round-trips: parse(to_toml(parse(file))) = parse(file).
    pub fn to_toml(&self) -> String {
        let mut value = toml::Table::try_from(self).expect("config serializes");
        match self.algorithm {
            Algorithm::L2gd => {
                value.remove("local_steps");
            }
            Algorithm::FedAvg => {
                value.remove("p");
                value.remove("lambda");
            }
        }
        toml::to_string(&value).expect("table serializes")
    }

    /// The sweep grids with the configured single values as defaults.
    pub fn sweep_grids(&self) -> (Vec<f64>, Vec<f64>) {
        let (p, lambda) = match &self.sweep {
            Some(grids) => (grids.p.clone(), grids.lambda.clone()),
            None => (None, None),
        };
        (
            p.unwrap_or_else(|| vec![self.p]),
            lambda.unwrap_or_else(|| vec![self.lambda]),
        )
    }
}

fn parse_set_value(value: &str) -> toml::Value {
    // Try the TOML scalar grammar first; fall back to a plain string so
    // paths and compressor names need no quoting.
    if let Ok(v) = value.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = value.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = value.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    if value.starts_with('[') || value.starts_with('{') || value.starts_with('"') {
        if let Ok(table) = format!("x = {value}").parse::<toml::Table>() {
            return table["x"].clone();
        }
    }
    toml::Value::String(value.to_string())
}

fn apply_override(root: &mut toml::Table, key: &str, value: &str) -> Result<(), CliError> {
    let mut parts = key.split('.').peekable();
    let mut table = root;
    loop {
        let part = parts
            .next()
            .ok_or_else(|| CliError::config(format!("empty key in --set {key}")))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), parse_set_value(value));
            return Ok(());
        }
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::config(format!("--set {key}: `{part}` is not a table"))
        })?;
    }
}

/// Loads the configuration: file (when given), then `--set` overrides, then
/// defaulting and validation.
pub fn load(path: Option<&str>, sets: &[String]) -> Result<Config, CliError> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {p}: {e}")))?;
            text.parse()
                .map_err(|e| CliError::config(format!("config {p}: {e}")))?
        }
        None => toml::Table::new(),
    };
    for set in sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set needs key=value, got `{set}`")))?;
        apply_override(&mut table, key.trim(), value.trim())?;
    }
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::config(format!("config: {e}")))?;
    Config::from_raw(raw)
}
