//! Baseline methods: source-only, the federated two-classifier-discrepancy
//! method, and its centralized variants.
//!
//! The two-classifier core trains a shared extractor with two classifier
//! heads: labeled source batches minimize both heads' cross-entropy, and
//! target batches drive a simultaneous min-max on the heads' discrepancy —
//! heads ascend to expose the domain gap while the extractor descends to
//! close it. Predictions average the two heads.

use crate::costs::{module_cost, CostLedger, FlopCounter, LedgerRow, ModuleCost};
use crate::data::{BenchmarkData, DomainShard, Split};
use crate::error::Result;
use crate::federation::dualadapt::{one_hot, pretrain, ServerState};
use crate::federation::optimizer::Momentum;
use crate::federation::sampler::BatchSampler;
use crate::federation::{
    check_against_data, evaluate, num_classes, subtree_leaves, ClientModel, Method, RoundRecord,
    TrainConfig, TrainOutcome, TrainReport, TrainedModels,
};
use crate::losses::{cross_entropy_traced, discrepancy_traced};
use crate::nn::{forward_classifier_traced, forward_features_traced, init_model, ModelParams};
use crate::seed::{derive, TAG_CLIENT_SAMPLER, TAG_MODEL_INIT, TAG_SECOND_HEAD, TAG_SERVER_SAMPLER};
use crate::tensor::{Tape, Tensor};

/// Pretrain on the labeled source, then evaluate the global model as-is on
/// every target. No adaptation, no communication.
pub fn run_source_only(cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<TrainOutcome> {
    check_against_data(cfg, data)?;
    let classes = num_classes(data);
    let model_cfg =
        cfg.model
            .to_model_config(data.source.dim(), classes, derive(seed, &[TAG_MODEL_INIT]));
    model_cfg.validate()?;
    let (g, f_g) = init_model(&model_cfg);
    let mut server = ServerState::new(g, f_g, data.source.clone(), cfg, seed);

    let mut counter = FlopCounter::new();
    pretrain(&mut server, cfg.pretrain_epochs, &mut counter);
    let flops = counter.take();

    let mut ledger = CostLedger::default();
    ledger.push(LedgerRow {
        participant: "server".into(),
        round: 0,
        flops,
        upload_params: 0,
        broadcast_params: 0,
    });

    let models = TrainedModels::global_only(server.g, server.f_g, data.targets.len());
    let tests: Vec<&DomainShard> = data.targets.iter().map(|p| &p.test).collect();
    let (per_target, mean) = evaluate(&models, &tests);
    let record = RoundRecord {
        round: 0,
        per_target_accuracy: per_target,
        mean_accuracy: mean,
        client_flops: 0,
        server_flops: flops,
        upload_params: 0,
        broadcast_params: 0,
        client_objective: None,
        server_objective: None,
    };
    Ok(TrainOutcome {
        report: TrainReport {
            method: Method::SourceOnly.name().to_string(),
            seed,
            privacy_violating: false,
            config: cfg.clone(),
            rounds: vec![record],
            ledger,
        },
        models,
    })
}

// ── Two-classifier-discrepancy core ──────────────────────────────────────

struct McdModel {
    g: ModelParams,
    f1: ModelParams,
    f2: ModelParams,
}

impl McdModel {
    fn view(&self) -> ClientModel {
        ClientModel { g: self.g.clone(), f_global: self.f1.clone(), f_local: self.f2.clone() }
    }
}

struct McdCosts {
    g: ModuleCost,
    f: ModuleCost,
}

struct McdOpts {
    g: Momentum,
    f1: Momentum,
    f2: Momentum,
}

impl McdOpts {
    fn plain_sgd(lr: f64) -> Self {
        McdOpts { g: Momentum::new(lr, 0.0), f1: Momentum::new(lr, 0.0), f2: Momentum::new(lr, 0.0) }
    }

    fn momentum(lr: f64, beta: f64) -> Self {
        McdOpts { g: Momentum::new(lr, beta), f1: Momentum::new(lr, beta), f2: Momentum::new(lr, beta) }
    }
}

fn init_mcd(cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<(McdModel, usize)> {
    let classes = num_classes(data);
    let model_cfg =
        cfg.model
            .to_model_config(data.source.dim(), classes, derive(seed, &[TAG_MODEL_INIT]));
    model_cfg.validate()?;
    let (g, f1) = init_model(&model_cfg);
    let f2 = ModelParams::glorot(
        &model_cfg.f_dims(),
        model_cfg.activation,
        derive(seed, &[TAG_SECOND_HEAD]),
    );
    Ok((McdModel { g, f1, f2 }, classes))
}

/// Supervised step: both heads' cross-entropy on a labeled batch, descending
/// extractor and heads together.
fn mcd_source_step(
    m: &mut McdModel,
    opts: &mut McdOpts,
    x: Tensor,
    y: Tensor,
    costs: &McdCosts,
    counter: &mut FlopCounter,
) {
    let b = x.rows();
    let mut tape = Tape::new();
    let tg = m.g.trace(&mut tape);
    let tf1 = m.f1.trace(&mut tape);
    let tf2 = m.f2.trace(&mut tape);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let z = forward_features_traced(&mut tape, &tg, xv);
    counter.forward(&costs.g, b);
    let p1 = forward_classifier_traced(&mut tape, &tf1, z);
    let p2 = forward_classifier_traced(&mut tape, &tf2, z);
    counter.forward(&costs.f, 2 * b);
    let ce1 = cross_entropy_traced(&mut tape, p1, yv);
    let ce2 = cross_entropy_traced(&mut tape, p2, yv);
    let loss = tape.add(ce1, ce2);

    let (g_vars, f1_vars, f2_vars) = (tg.vars(), tf1.vars(), tf2.vars());
    let mut vars = g_vars.clone();
    vars.extend(&f1_vars);
    vars.extend(&f2_vars);
    let grads = tape.grad(loss, &vars);
    counter.backward(&costs.g, b);
    counter.backward(&costs.f, 2 * b);
    let (g_grads, rest) = grads.split_at(g_vars.len());
    let (f1_grads, f2_grads) = rest.split_at(f1_vars.len());
    opts.g.step(&mut m.g, g_grads);
    opts.f1.step(&mut m.f1, f1_grads);
    opts.f2.step(&mut m.f2, f2_grads);
}

/// Adversarial step on an unlabeled batch: heads ascend the discrepancy, the
/// extractor descends it. Returns the discrepancy value before the step.
fn mcd_target_step(
    m: &mut McdModel,
    opts: &mut McdOpts,
    x: Tensor,
    costs: &McdCosts,
    counter: &mut FlopCounter,
) -> f64 {
    let b = x.rows();
    let mut tape = Tape::new();
    let tg = m.g.trace(&mut tape);
    let tf1 = m.f1.trace(&mut tape);
    let tf2 = m.f2.trace(&mut tape);
    let xv = tape.constant(x);
    let z = forward_features_traced(&mut tape, &tg, xv);
    counter.forward(&costs.g, b);
    let p1 = forward_classifier_traced(&mut tape, &tf1, z);
    let p2 = forward_classifier_traced(&mut tape, &tf2, z);
    counter.forward(&costs.f, 2 * b);
    let d = discrepancy_traced(&mut tape, p1, p2);
    let value = tape.value(d).scalar_value();

    let (g_vars, f1_vars, f2_vars) = (tg.vars(), tf1.vars(), tf2.vars());
    let mut vars = g_vars.clone();
    vars.extend(&f1_vars);
    vars.extend(&f2_vars);
    let grads = tape.grad(d, &vars);
    counter.backward(&costs.g, b);
    counter.backward(&costs.f, 2 * b);
    let (g_grads, rest) = grads.split_at(g_vars.len());
    let (f1_grads, f2_grads) = rest.split_at(f1_vars.len());
    opts.g.step(&mut m.g, g_grads);
    opts.f1.step_ascend(&mut m.f1, f1_grads);
    opts.f2.step_ascend(&mut m.f2, f2_grads);
    value
}

/// Warm-up with the server's momentum optimizer, mirroring the main
/// protocol's pretraining phase.
fn mcd_pretrain(
    m: &mut McdModel,
    source: &DomainShard,
    cfg: &TrainConfig,
    classes: usize,
    run_seed: u64,
    costs: &McdCosts,
    counter: &mut FlopCounter,
) {
    let mut sampler = BatchSampler::new(
        source.len(),
        cfg.batch_size,
        derive(run_seed, &[TAG_SERVER_SAMPLER]),
    );
    let mut opts = McdOpts::momentum(cfg.server_lr, cfg.server_momentum);
    let steps = sampler.batches_per_epoch() * cfg.pretrain_epochs;
    for _ in 0..steps {
        let idx = sampler.next_batch();
        let (x, labels) = source.gather(&idx);
        let y = one_hot(&labels.expect("source is labeled"), classes);
        mcd_source_step(m, &mut opts, x, y, costs, counter);
    }
}

/// Samplers one participant uses for its paired source/target steps.
struct PairSamplers {
    source: BatchSampler,
    target: BatchSampler,
}

impl PairSamplers {
    fn new(idx: usize, source_len: usize, target_len: usize, cfg: &TrainConfig, run_seed: u64) -> Self {
        PairSamplers {
            source: BatchSampler::new(
                source_len,
                cfg.batch_size,
                derive(run_seed, &[TAG_CLIENT_SAMPLER, idx as u64, 1]),
            ),
            target: BatchSampler::new(
                target_len,
                cfg.batch_size,
                derive(run_seed, &[TAG_CLIENT_SAMPLER, idx as u64, 0]),
            ),
        }
    }
}

/// One participant-round: `client_steps` iterations of a supervised source
/// step followed by an adversarial target step. Returns the last target
/// discrepancy.
#[allow(clippy::too_many_arguments)]
fn mcd_round(
    m: &mut McdModel,
    opts: &mut McdOpts,
    samplers: &mut PairSamplers,
    source: &DomainShard,
    target: &DomainShard,
    cfg: &TrainConfig,
    classes: usize,
    costs: &McdCosts,
    counter: &mut FlopCounter,
) -> Option<f64> {
    let mut last = None;
    for _ in 0..cfg.client_steps {
        let idx = samplers.source.next_batch();
        let (x, labels) = source.gather(&idx);
        let y = one_hot(&labels.expect("source is labeled"), classes);
        mcd_source_step(m, opts, x, y, costs, counter);

        let idx = samplers.target.next_batch();
        let (x, _) = target.gather(&idx);
        last = Some(mcd_target_step(m, opts, x, costs, counter));
    }
    last
}

fn average_models(models: &[&ModelParams]) -> ModelParams {
    let mut avg = models[0].clone();
    let mut flats: Vec<Tensor> = avg.flat_params();
    let n = models.len() as f64;
    for (k, tensor) in flats.iter_mut().enumerate() {
        let mut data = vec![0.0; tensor.len()];
        for m in models {
            let part = &m.flat_params()[k];
            assert_eq!(part.shape(), tensor.shape(), "averaging mismatched models");
            for (d, v) in data.iter_mut().zip(part.data()) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= n;
        }
        *tensor = Tensor::new(tensor.shape().to_vec(), data);
    }
    avg.set_flat_params(&flats);
    avg
}

/// Federated variant: every client holds a source copy plus its target,
/// runs the two-classifier rounds locally, and the server averages the
/// uploaded models uniformly each round.
pub fn run_fed_mcd(cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<TrainOutcome> {
    check_against_data(cfg, data)?;
    let (mut global, classes) = init_mcd(cfg, data, seed)?;
    let costs = McdCosts { g: module_cost(&global.g), f: module_cost(&global.f1) };
    let n = data.targets.len();
    let tests: Vec<&DomainShard> = data.targets.iter().map(|p| &p.test).collect();

    let mut ledger = CostLedger::default();
    let mut rounds = Vec::new();

    let mut counter = FlopCounter::new();
    mcd_pretrain(&mut global, &data.source, cfg, classes, seed, &costs, &mut counter);
    let pretrain_flops = counter.take();
    ledger.push(LedgerRow {
        participant: "server".into(),
        round: 0,
        flops: pretrain_flops,
        upload_params: 0,
        broadcast_params: 0,
    });
    let view = TrainedModels { per_client: vec![global.view(); n] };
    let (per_target, mean) = evaluate(&view, &tests);
    rounds.push(RoundRecord {
        round: 0,
        per_target_accuracy: per_target,
        mean_accuracy: mean,
        client_flops: 0,
        server_flops: pretrain_flops,
        upload_params: 0,
        broadcast_params: 0,
        client_objective: None,
        server_objective: None,
    });

    let mut samplers: Vec<PairSamplers> = data
        .targets
        .iter()
        .enumerate()
        .map(|(i, p)| PairSamplers::new(i, data.source.len(), p.train.len(), cfg, seed))
        .collect();

    for round in 1..=cfg.rounds {
        let broadcast_json =
            serde_json::json!({"g": &global.g, "f1": &global.f1, "f2": &global.f2});
        let per_client_broadcast = subtree_leaves(&broadcast_json, &["g", "f1", "f2"]);

        let mut locals: Vec<McdModel> = Vec::with_capacity(n);
        let mut round_client_flops = 0;
        let mut round_upload = 0;
        let mut discrepancies = Vec::with_capacity(n);
        for i in 0..n {
            let mut local =
                McdModel { g: global.g.clone(), f1: global.f1.clone(), f2: global.f2.clone() };
            let mut opts = McdOpts::plain_sgd(cfg.client_lr);
            let mut counter = FlopCounter::new();
            let disc = mcd_round(
                &mut local,
                &mut opts,
                &mut samplers[i],
                &data.source,
                &data.targets[i].train,
                cfg,
                classes,
                &costs,
                &mut counter,
            );
            discrepancies.push(disc);
            let upload_json = serde_json::json!({
                "client_id": i, "g": &local.g, "f1": &local.f1, "f2": &local.f2,
            });
            let upload_params = subtree_leaves(&upload_json, &["g", "f1", "f2"]);
            round_upload += upload_params;
            let flops = counter.take();
            round_client_flops += flops;
            ledger.push(LedgerRow {
                participant: format!("client{}", i),
                round: round as u64,
                flops,
                upload_params,
                broadcast_params: per_client_broadcast,
            });
            locals.push(local);
        }

        global.g = average_models(&locals.iter().map(|m| &m.g).collect::<Vec<_>>());
        global.f1 = average_models(&locals.iter().map(|m| &m.f1).collect::<Vec<_>>());
        global.f2 = average_models(&locals.iter().map(|m| &m.f2).collect::<Vec<_>>());
        ledger.push(LedgerRow {
            participant: "server".into(),
            round: round as u64,
            flops: 0,
            upload_params: 0,
            broadcast_params: 0,
        });

        let view = TrainedModels { per_client: vec![global.view(); n] };
        let (per_target, mean) = evaluate(&view, &tests);
        let client_objective = discrepancies
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        rounds.push(RoundRecord {
            round,
            per_target_accuracy: per_target,
            mean_accuracy: mean,
            client_flops: round_client_flops,
            server_flops: 0,
            upload_params: round_upload,
            broadcast_params: per_client_broadcast * n as u64,
            client_objective,
            server_objective: None,
        });
    }

    let models = TrainedModels { per_client: vec![global.view(); n] };
    Ok(TrainOutcome {
        report: TrainReport {
            method: Method::FedMcd.name().to_string(),
            seed,
            privacy_violating: false,
            config: cfg.clone(),
            rounds,
            ledger,
        },
        models,
    })
}

// ── Centralized variants ─────────────────────────────────────────────────

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CentMode {
    /// Independent model per target.
    One2One,
    /// One model on the pooled targets.
    One2Combined,
    /// Shared extractor, per-target head pairs.
    One2Multiple,
}

impl CentMode {
    fn method(&self) -> Method {
        match self {
            CentMode::One2One => Method::CentMcdOne2One,
            CentMode::One2Combined => Method::CentMcdOne2Combined,
            CentMode::One2Multiple => Method::CentMcdOne2Multiple,
        }
    }
}

fn pool_targets(data: &BenchmarkData) -> DomainShard {
    let rows: Vec<Vec<f64>> = data
        .targets
        .iter()
        .flat_map(|p| (0..p.train.len()).map(|r| p.train.inputs.row(r).to_vec()))
        .collect();
    DomainShard {
        inputs: Tensor::from_rows(&rows),
        labels: None,
        domain: "combined".into(),
        split: Split::Train,
    }
}

/// Centralized two-classifier training without the federation boundary. The
/// per-round iteration budget per target matches the federated variant.
pub fn run_cent_mcd(
    mode: CentMode,
    cfg: &TrainConfig,
    data: &BenchmarkData,
    seed: u64,
) -> Result<TrainOutcome> {
    check_against_data(cfg, data)?;
    let (mut base, classes) = init_mcd(cfg, data, seed)?;
    let costs = McdCosts { g: module_cost(&base.g), f: module_cost(&base.f1) };
    let n = data.targets.len();
    let tests: Vec<&DomainShard> = data.targets.iter().map(|p| &p.test).collect();

    let mut ledger = CostLedger::default();
    let mut rounds = Vec::new();

    let mut counter = FlopCounter::new();
    mcd_pretrain(&mut base, &data.source, cfg, classes, seed, &costs, &mut counter);
    let pretrain_flops = counter.take();
    ledger.push(LedgerRow {
        participant: "centralized".into(),
        round: 0,
        flops: pretrain_flops,
        upload_params: 0,
        broadcast_params: 0,
    });

    // Training plan per mode: (model, optimizer, samplers, target shard)
    // tuples advanced each round. One2Multiple shares the extractor and its
    // optimizer across head pairs.
    let pooled;
    let mut models: Vec<McdModel>;
    let mut opts: Vec<McdOpts>;
    let mut samplers: Vec<PairSamplers>;
    let targets: Vec<&DomainShard> = match mode {
        CentMode::One2One => {
            models = (0..n)
                .map(|_| McdModel { g: base.g.clone(), f1: base.f1.clone(), f2: base.f2.clone() })
                .collect();
            opts = (0..n).map(|_| McdOpts::plain_sgd(cfg.client_lr)).collect();
            samplers = (0..n)
                .map(|t| PairSamplers::new(t, data.source.len(), data.targets[t].train.len(), cfg, seed))
                .collect();
            data.targets.iter().map(|p| &p.train).collect()
        }
        CentMode::One2Combined => {
            pooled = pool_targets(data);
            models = vec![McdModel { g: base.g.clone(), f1: base.f1.clone(), f2: base.f2.clone() }];
            opts = vec![McdOpts::plain_sgd(cfg.client_lr)];
            samplers = vec![PairSamplers::new(0, data.source.len(), pooled.len(), cfg, seed)];
            vec![&pooled]
        }
        CentMode::One2Multiple => {
            models = (0..n)
                .map(|_| McdModel { g: base.g.clone(), f1: base.f1.clone(), f2: base.f2.clone() })
                .collect();
            opts = (0..n).map(|_| McdOpts::plain_sgd(cfg.client_lr)).collect();
            samplers = (0..n)
                .map(|t| PairSamplers::new(t, data.source.len(), data.targets[t].train.len(), cfg, seed))
                .collect();
            data.targets.iter().map(|p| &p.train).collect()
        }
    };

    let (per_target, mean) = {
        let view = TrainedModels { per_client: models.iter().map(|m| m.view()).cycle().take(n).collect() };
        evaluate(&view, &tests)
    };
    rounds.push(RoundRecord {
        round: 0,
        per_target_accuracy: per_target,
        mean_accuracy: mean,
        client_flops: 0,
        server_flops: pretrain_flops,
        upload_params: 0,
        broadcast_params: 0,
        client_objective: None,
        server_objective: None,
    });

    for round in 1..=cfg.rounds {
        let mut counter = FlopCounter::new();
        let mut discrepancies = Vec::with_capacity(models.len());
        for k in 0..models.len() {
            let disc = mcd_round(
                &mut models[k],
                &mut opts[k],
                &mut samplers[k],
                &data.source,
                targets[k],
                cfg,
                classes,
                &costs,
                &mut counter,
            );
            discrepancies.push(disc);
            if mode == CentMode::One2Multiple && k + 1 < models.len() {
                // Shared extractor: the next pair continues from this one's
                // update.
                models[k + 1].g = models[k].g.clone();
            }
        }
        if mode == CentMode::One2Multiple {
            // All pairs share the last-updated extractor.
            let g = models.last().expect("≥1 model").g.clone();
            for m in &mut models {
                m.g = g.clone();
            }
        }
        let flops = counter.take();
        ledger.push(LedgerRow {
            participant: "centralized".into(),
            round: round as u64,
            flops,
            upload_params: 0,
            broadcast_params: 0,
        });

        let view = TrainedModels { per_client: models.iter().map(|m| m.view()).cycle().take(n).collect() };
        let (per_target, mean) = evaluate(&view, &tests);
        let client_objective = discrepancies
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        rounds.push(RoundRecord {
            round,
            per_target_accuracy: per_target,
            mean_accuracy: mean,
            client_flops: 0,
            server_flops: flops,
            upload_params: 0,
            broadcast_params: 0,
            client_objective,
            server_objective: None,
        });
    }

    let models = TrainedModels { per_client: models.iter().map(|m| m.view()).cycle().take(n).collect() };
    Ok(TrainOutcome {
        report: TrainReport {
            method: mode.method().name().to_string(),
            seed,
            privacy_violating: false,
            config: cfg.clone(),
            rounds,
            ledger,
        },
        models,
    })
}
