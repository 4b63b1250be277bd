//! Ensemble inference and accuracy evaluation.

use crate::data::DomainShard;
use crate::losses::argmax_row;
use crate::nn::{forward_classifier, forward_features, ModelParams};
use crate::tensor::{add, scale, Tensor};

/// What one client needs at inference time: the extractor plus the two heads
/// whose averaged probabilities form the prediction.
#[derive(Clone)]
pub struct ClientModel {
    pub g: ModelParams,
    pub f_global: ModelParams,
    pub f_local: ModelParams,
}

/// Per-client inference views. Federated methods share one extractor across
/// entries; centralized one-to-one keeps fully distinct models.
#[derive(Clone)]
pub struct TrainedModels {
    pub per_client: Vec<ClientModel>,
}

impl TrainedModels {
    /// Same extractor and head for every client: prediction reduces to the
    /// global classifier alone.
    pub fn global_only(g: ModelParams, f_g: ModelParams, n_clients: usize) -> Self {
        let view = ClientModel { g: g.clone(), f_global: f_g.clone(), f_local: f_g };
        TrainedModels { per_client: vec![view; n_clients] }
    }

    pub fn view(&self, client: usize) -> &ClientModel {
        assert!(client < self.per_client.len(), "unknown client id {}", client);
        &self.per_client[client]
    }

    /// Ensemble probabilities `(F_global(G x) + F_local(G x)) / 2`, one row
    /// per example. Rows stay on the simplex since both terms do.
    pub fn probs(&self, x: &Tensor, client: usize) -> Tensor {
        let view = self.view(client);
        let z = forward_features(&view.g, x);
        let p_g = forward_classifier(&view.f_global, &z);
        let p_l = forward_classifier(&view.f_local, &z);
        scale(&add(&p_g, &p_l), 0.5)
    }

    /// Probabilities plus argmax labels; ties break to the lowest class.
    pub fn predict(&self, x: &Tensor, client: usize) -> (Tensor, Vec<usize>) {
        let probs = self.probs(x, client);
        let labels = (0..probs.rows()).map(|r| argmax_row(probs.row(r))).collect();
        (probs, labels)
    }
}

/// Fraction of correct ensemble predictions per target test shard, plus the
/// unweighted mean across targets.
pub fn evaluate(models: &TrainedModels, tests: &[&DomainShard]) -> (Vec<f64>, f64) {
    assert_eq!(models.per_client.len(), tests.len(), "one test shard per client");
    let mut per_target = Vec::with_capacity(tests.len());
    for (i, shard) in tests.iter().enumerate() {
        assert!(!shard.is_empty(), "cannot evaluate an empty test shard");
        let truth = shard.labels.as_ref().expect("test shards are labeled");
        let (_, predicted) = models.predict(&shard.inputs, i);
        let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
        per_target.push(correct as f64 / shard.len() as f64);
    }
    let mean = per_target.iter().sum::<f64>() / per_target.len() as f64;
    (per_target, mean)
}
