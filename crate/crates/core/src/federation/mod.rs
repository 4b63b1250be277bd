//! Training protocols: the dual-classifier federated method, its ablations,
//! and the baseline methods it is compared against.
//!
//! The privacy boundary is structural: the server-side state only ever holds
//! the labeled source shard, and the only client→server values are the
//! serialized [`UploadMsg`] contents. The one deliberate exception is the
//! oracle baseline, which reads target shards on the server and is flagged
//! `privacy_violating` in its report.

pub mod baselines;
pub mod dualadapt;
pub mod eval;
pub mod optimizer;
pub mod sampler;

use serde::{Deserialize, Serialize};

use crate::costs::CostLedger;
use crate::data::BenchmarkData;
use crate::density::GmmParams;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{Activation, ModelConfig, ModelParams};

pub use eval::{evaluate, ClientModel, TrainedModels};

/// Network shape settings; input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub feature_dim: usize,
    #[serde(default)]
    pub g_hidden: Vec<usize>,
    #[serde(default)]
    pub f_hidden: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn to_model_config(
        &self,
        input_dim: usize,
        num_classes: usize,
        init_seed: u64,
    ) -> ModelConfig {
        ModelConfig {
            input_dim,
            feature_dim: self.feature_dim,
            num_classes,
            g_hidden: self.g_hidden.clone(),
            f_hidden: self.f_hidden.clone(),
            activation: self.activation,
            init_seed,
        }
    }
}

/// All knobs of a training run. Iteration counts accept zero so degenerate
/// runs (evaluate-only, pretrain-only) stay expressible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_clients: usize,
    pub rounds: usize,
    /// Local gradient steps per client per round.
    pub client_steps: usize,
    /// Server alignment + fine-tune iterations per round.
    pub server_iters: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub loss: LossConfig,
    /// Pseudo-label term in the client objective.
    pub use_self_training: bool,
    /// Mixture-confidence weighting on both client and server objectives.
    pub use_gmm_weighting: bool,
    /// Re-clone the local head from the global head every round instead of
    /// only at the first round.
    pub fl_reinit_each_round: bool,
    pub model: ModelSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 1 {
            return Err(Error::Config("n_clients must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.client_lr > 0.0) || !(self.server_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(Error::Config("server momentum must lie in [0, 1)".into()));
        }
        self.loss.validate()?;
        if self.model.feature_dim < 1 {
            return Err(Error::Config("feature_dim must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Server→client payload: current extractor, global head, and the source
/// feature-density summary.
#[derive(Clone, Serialize, Deserialize)]
pub struct BroadcastMsg {
    pub g: ModelParams,
    pub f_g: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_s: Option<GmmParams>,
}

/// Client→server payload: the adapted local head and the client's feature
/// density summary — never raw examples or per-example features.
#[derive(Clone, Serialize, Deserialize)]
pub struct UploadMsg {
    pub client_id: usize,
    pub f_l: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_t: Option<GmmParams>,
}

/// One evaluated round. Round 0 is the post-pretrain snapshot; objective
/// fields are `None` where a round has no such phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub per_target_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub client_flops: u64,
    pub server_flops: u64,
    pub upload_params: u64,
    pub broadcast_params: u64,
    pub client_objective: Option<f64>,
    pub server_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    pub privacy_violating: bool,
    pub config: TrainConfig,
    pub rounds: Vec<RoundRecord>,
    pub ledger: CostLedger,
}

impl TrainReport {
    pub fn final_record(&self) -> &RoundRecord {
        self.rounds.last().expect("report always holds the pretrain record")
    }

    pub fn final_mean_accuracy(&self) -> f64 {
        self.final_record().mean_accuracy
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub models: TrainedModels,
}

/// Test-only knobs threaded through a run: reorder client execution and
/// observe the exact serialized upload payloads.
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Execution order of client rounds; must be a permutation of 0..N.
    pub client_order: Option<Vec<usize>>,
    /// Called with (round, serialized upload) for every client upload.
    #[allow(clippy::type_complexity)]
    pub on_upload: Option<Box<dyn FnMut(usize, &serde_json::Value) + 'a>>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Method {
    SourceOnly,
    DualAdapt,
    /// Self-training but no mixture weighting.
    DualAdaptSt,
    /// Neither self-training nor mixture weighting: proxy alignment only.
    DualAdaptMcdOnly,
    FedMcd,
    FedOracle,
    CentMcdOne2One,
    CentMcdOne2Combined,
    CentMcdOne2Multiple,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::SourceOnly,
        Method::DualAdapt,
        Method::DualAdaptSt,
        Method::DualAdaptMcdOnly,
        Method::FedMcd,
        Method::FedOracle,
        Method::CentMcdOne2One,
        Method::CentMcdOne2Combined,
        Method::CentMcdOne2Multiple,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::DualAdapt => "dualadapt",
            Method::DualAdaptSt => "dualadapt_st",
            Method::DualAdaptMcdOnly => "dualadapt_mcd_only",
            Method::FedMcd => "fed_mcd",
            Method::FedOracle => "fed_oracle",
            Method::CentMcdOne2One => "cent_mcd_one2one",
            Method::CentMcdOne2Combined => "cent_mcd_one2combined",
            Method::CentMcdOne2Multiple => "cent_mcd_one2multiple",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }
}

/// Runs one method on one benchmark with one seed.
pub fn run_method(method: Method, cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<TrainOutcome> {
    match method {
        Method::SourceOnly => baselines::run_source_only(cfg, data, seed),
        Method::DualAdapt => dualadapt::run_dualadapt(cfg, data, seed),
        Method::DualAdaptSt => {
            let cfg = TrainConfig { use_gmm_weighting: false, ..cfg.clone() };
            let mut out = dualadapt::run_dualadapt(&cfg, data, seed)?;
            out.report.method = Method::DualAdaptSt.name().to_string();
            Ok(out)
        }
        Method::DualAdaptMcdOnly => {
            let cfg = TrainConfig {
                use_self_training: false,
                use_gmm_weighting: false,
                ..cfg.clone()
            };
            let mut out = dualadapt::run_dualadapt(&cfg, data, seed)?;
            out.report.method = Method::DualAdaptMcdOnly.name().to_string();
            Ok(out)
        }
        Method::FedMcd => baselines::run_fed_mcd(cfg, data, seed),
        Method::FedOracle => dualadapt::run_fed_oracle(cfg, data, seed),
        Method::CentMcdOne2One => baselines::run_cent_mcd(baselines::CentMode::One2One, cfg, data, seed),
        Method::CentMcdOne2Combined => {
            baselines::run_cent_mcd(baselines::CentMode::One2Combined, cfg, data, seed)
        }
        Method::CentMcdOne2Multiple => {
            baselines::run_cent_mcd(baselines::CentMode::One2Multiple, cfg, data, seed)
        }
    }
}

/// Checks a config against the shards it will train on.
pub fn check_against_data(cfg: &TrainConfig, data: &BenchmarkData) -> Result<()> {
    cfg.validate()?;
    if cfg.n_clients != data.targets.len() {
        return Err(Error::Config(format!(
            "config names {} clients but the benchmark has {} targets",
            cfg.n_clients,
            data.targets.len()
        )));
    }
    if data.source.labels.is_none() {
        return Err(Error::Config("source shard must be labeled".into()));
    }
    for pair in &data.targets {
        if pair.train.labels.is_some() {
            return Err(Error::Config(format!(
                "target training shard {} must be unlabeled",
                pair.train.domain
            )));
        }
        if pair.test.labels.is_none() {
            return Err(Error::Config(format!(
                "target test shard {} must be labeled",
                pair.test.domain
            )));
        }
    }
    Ok(())
}

/// Total numeric leaves under the named keys of a serialized message: the
/// transmitted parameter count of those payload parts.
pub(crate) fn subtree_leaves(msg: &serde_json::Value, keys: &[&str]) -> u64 {
    keys.iter()
        .filter_map(|k| msg.get(k))
        .map(crate::costs::numeric_leaves)
        .sum()
}

/// Class count observed in a labeled shard (labels are 0-based).
pub fn num_classes(data: &BenchmarkData) -> usize {
    data.source
        .labels
        .as_ref()
        .expect("source is labeled")
        .iter()
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(matches!(
            Method::parse("fed_dann"),
            Err(Error::UnknownMethod(_))
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = crate::presets::default_train_config();
        assert!(cfg.validate().is_ok());
        cfg.rounds = 0;
        assert!(cfg.validate().is_ok(), "zero rounds stays expressible");
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 8;
        cfg.server_momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.server_momentum = 0.9;
        cfg.client_lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}
