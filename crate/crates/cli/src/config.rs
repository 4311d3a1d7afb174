//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 0
//!
//! [q0]
//! kind = "standard_normal"
//! dim = 2
//!
//! [q1]
//! kind = "checkerboard"
//!
//! [coupler]
//! kind = "batch_ot"        # uniform | batch_ot | batch_eot | stable | heuristic
//!
//! [cost]
//! kind = "sqeuclidean"     # sqeuclidean | l1 | cosine | weighted
//!
//! [train]
//! batch_size = 128
//! steps = 3000
//! lr = [0.001]
//!
//! [eval]
//! metrics = ["transport_cost", "straightness"]
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use mfm_core::coupling::{Coupler, CouplerKind, Epsilon};
use mfm_core::cost::{random_weight_matrix, CostFn};
use mfm_core::data::{load_batch, make_random_gmm, Gmm, Source};
use mfm_core::nn::{default_param_budget, NetSpec, TimeEmbedding};
use mfm_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub q0: SourceConfig,
    pub q1: SourceConfig,
    #[serde(default)]
    pub coupler: CouplerConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Parent directory for artifacts; each run writes to `<out_dir>/<config hash>/`.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Checkerboard,
    StandardNormal {
        dim: usize,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<f64>,
    },
    /// Equal-weight mixture with centers drawn from `seed`.
    RandomGmm {
        dim: usize,
        centers: usize,
        spread: f64,
        std: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl SourceConfig {
    pub fn build(&self) -> Result<Source, CliError> {
        Ok(match self {
            SourceConfig::Checkerboard => Source::Checkerboard,
            SourceConfig::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(CliError::Usage("standard_normal dim must be positive".into()));
                }
                Source::Gmm(Gmm::standard_normal(*dim))
            }
            SourceConfig::Gmm {
                weights,
                means,
                stds,
            } => Source::Gmm(Gmm::new(weights.clone(), means.clone(), stds.clone())?),
            SourceConfig::RandomGmm {
                dim,
                centers,
                spread,
                std,
                seed,
            } => Source::Gmm(make_random_gmm(*dim, *centers, *spread, *std, &mut Rng::new(*seed))?),
            SourceConfig::Csv { path } => Source::Empirical(load_batch(path)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplerName {
    Uniform,
    BatchOt,
    BatchEot,
    Stable,
    Heuristic,
}

impl CouplerName {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "uniform" | "condot" => CouplerName::Uniform,
            "batch_ot" => CouplerName::BatchOt,
            "batch_eot" => CouplerName::BatchEot,
            "stable" => CouplerName::Stable,
            "heuristic" => CouplerName::Heuristic,
            other => return Err(CliError::Usage(format!("unknown coupler {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplerConfig {
    pub kind: CouplerName,
    /// Entropic strength relative to the mean batch cost.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Absolute entropic strength; overrides `epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_abs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

impl Default for CouplerConfig {
    fn default() -> Self {
        CouplerConfig {
            kind: CouplerName::BatchOt,
            epsilon: None,
            epsilon_abs: None,
            max_iter: None,
            tol: None,
        }
    }
}

impl CouplerConfig {
    pub fn named(kind: CouplerName) -> Self {
        CouplerConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn build(&self, cost: CostFn) -> Result<Coupler, CliError> {
        let kind = match self.kind {
            CouplerName::Uniform => CouplerKind::Uniform,
            CouplerName::BatchOt => CouplerKind::BatchOt,
            CouplerName::Stable => CouplerKind::Stable,
            CouplerName::Heuristic => CouplerKind::Heuristic,
            CouplerName::BatchEot => {
                let epsilon = match (self.epsilon_abs, self.epsilon) {
                    (Some(e), _) => Epsilon::Absolute(e),
                    (None, Some(e)) => Epsilon::RelativeToMean(e),
                    (None, None) => Epsilon::default(),
                };
                let mut kind = CouplerKind::batch_eot(epsilon);
                if let CouplerKind::BatchEot { max_iter, tol, .. } = &mut kind {
                    *max_iter = self.max_iter.unwrap_or(*max_iter);
                    *tol = self.tol.unwrap_or(*tol);
                }
                kind
            }
        };
        Ok(Coupler::new(kind, cost)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub kind: String,
    /// Seed for the random matrix of the `weighted` cost (entries uniform in [-1, 1]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_seed: Option<u64>,
    /// CSV file holding the matrix of the `weighted` cost; overrides `weight_seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_path: Option<PathBuf>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            kind: "sqeuclidean".into(),
            weight_seed: None,
            weight_path: None,
        }
    }
}

impl CostConfig {
    pub fn named(kind: &str) -> Self {
        CostConfig {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn build(&self, dim: usize) -> Result<CostFn, CliError> {
        let weight = if self.kind == "weighted" {
            Some(match (&self.weight_path, self.weight_seed) {
                (Some(path), _) => load_batch(path)?.into_points(),
                (None, Some(seed)) => random_weight_matrix(dim, &mut Rng::new(seed)),
                (None, None) => {
                    return Err(CliError::Usage(
                        "weighted cost needs weight_seed or weight_path".into(),
                    ))
                }
            })
        } else {
            None
        };
        Ok(CostFn::from_tag(&self.kind, weight)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Coupling block size; defaults to the batch size and must divide it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub steps: usize,
    /// Learning-rate candidates; the first is used unless sweeping.
    pub lr: Vec<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            k: None,
            steps: 1000,
            lr: vec![1e-3],
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn coupling_k(&self) -> usize {
        self.k.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let k = self.coupling_k();
        if self.batch_size == 0 || k == 0 || self.batch_size % k != 0 {
            return Err(CliError::Usage(format!(
                "train.k = {k} must be positive and divide batch_size = {}",
                self.batch_size
            )));
        }
        if self.lr.is_empty() || self.lr.iter().any(|&lr| !(lr > 0.0)) {
            return Err(CliError::Usage("train.lr needs positive candidates".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Explicit hidden widths; otherwise `depth` equal layers sized to `param_budget`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_embedding: Option<TimeEmbedding>,
}

impl NetConfig {
    /// Time-conditioned vector field for `dim`-dimensional data.
    pub fn flow_spec(&self, dim: usize) -> Result<NetSpec, CliError> {
        let emb = self
            .time_embedding
            .unwrap_or_else(|| NetSpec::default_time_embedding(dim));
        self.spec(dim, emb)
    }

    /// Static map with the same widths and no time input.
    pub fn static_spec(&self, dim: usize) -> Result<NetSpec, CliError> {
        self.spec(dim, TimeEmbedding::None)
    }

    fn spec(&self, dim: usize, emb: TimeEmbedding) -> Result<NetSpec, CliError> {
        Ok(match &self.hidden {
            Some(h) => NetSpec::new(dim, h.clone(), emb)?,
            None => NetSpec::with_budget(
                dim,
                self.depth.unwrap_or(3),
                self.param_budget.unwrap_or_else(|| default_param_budget(dim)),
                emb,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Straightness,
    TransportCost,
    Kl,
    Consistency,
    VarianceProxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub metrics: Vec<MetricName>,
    #[serde(default = "default_eval_n")]
    pub n: usize,
    /// Euler step counts at which generated samples are written.
    #[serde(default)]
    pub nfe_grid: Vec<usize>,
    #[serde(default = "default_consistency_m")]
    pub consistency_m: Vec<usize>,
    /// Adaptive solver tolerance (atol = rtol).
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_proxy_batches")]
    pub proxy_batches: usize,
}

fn default_eval_n() -> usize {
    1000
}

fn default_consistency_m() -> Vec<usize> {
    vec![4, 6, 8, 12]
}

fn default_tol() -> f64 {
    1e-5
}

fn default_proxy_batches() -> usize {
    50
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: Vec::new(),
            n: default_eval_n(),
            nfe_grid: Vec::new(),
            consistency_m: default_consistency_m(),
            tol: default_tol(),
            proxy_batches: default_proxy_batches(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub k_list: Vec<usize>,
    pub resamples: usize,
    #[serde(default = "default_sweep_couplers")]
    pub couplers: Vec<CouplerName>,
    /// Also train a BatchOT flow per `k` and report its transport cost.
    #[serde(default)]
    pub train_flows: bool,
}

fn default_sweep_couplers() -> Vec<CouplerName> {
    vec![CouplerName::Uniform, CouplerName::BatchOt]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.eval.n < 2 {
            return Err(CliError::Usage("eval.n must be at least 2".into()));
        }
        if self.eval.consistency_m.iter().any(|m| m % 2 != 0 || *m == 0) {
            return Err(CliError::Usage("eval.consistency_m must hold positive even values".into()));
        }
        if let Some(s) = &self.sweep {
            if s.k_list.is_empty() || s.k_list.contains(&0) {
                return Err(CliError::Usage("sweep.k_list must hold positive sizes".into()));
            }
            if s.resamples < 2 {
                return Err(CliError::Usage("sweep.resamples must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form,
    /// ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.hash())
    }

    pub fn sources(&self) -> Result<(Source, Source), CliError> {
        let (q0, q1) = (self.q0.build()?, self.q1.build()?);
        if q0.dim() != q1.dim() {
            return Err(CliError::Usage(format!(
                "q0 has dimension {} but q1 has {}",
                q0.dim(),
                q1.dim()
            )));
        }
        Ok((q0, q1))
    }

    pub fn coupler(&self, dim: usize) -> Result<Coupler, CliError> {
        self.coupler.build(self.cost.build(dim)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[q0]
kind = "standard_normal"
dim = 2
[q1]
kind = "checkerboard"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.coupling_k(), 128);
        assert_eq!(cfg.coupler.kind, CouplerName::BatchOt);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nbatch_size = 8\nsteps = 1\nlr = [0.1]\nbogus = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
        let text = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn block_size_must_divide_batch() {
        let text = format!("{MINIMAL}\n[train]\nbatch_size = 10\nk = 4\nsteps = 1\nlr = [0.1]\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Usage(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn toml_round_trip() {
        let text = format!(
            "{MINIMAL}\n[coupler]\nkind = \"batch_eot\"\nepsilon = 0.05\n[net]\nhidden = [8, 8]\n[sweep]\nk_list = [1, 2]\nresamples = 5\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn weighted_cost_from_seed() {
        let c = CostConfig {
            kind: "weighted".into(),
            weight_seed: Some(1),
            weight_path: None,
        };
        assert!(matches!(c.build(3).unwrap(), CostFn::WeightedSquared(a) if a.dim() == (3, 3)));
        assert!(CostConfig::named("weighted").build(3).is_err());
    }

    #[test]
    fn default_specs() {
        let net = NetConfig::default();
        let spec = net.flow_spec(2).unwrap();
        assert_eq!(spec.time_embedding, TimeEmbedding::Concat);
        assert_eq!(net.static_spec(2).unwrap().time_embedding, TimeEmbedding::None);
    }
}
