//! The dual-classifier federated adaptation protocol.
//!
//! Per round: the server refits its source feature-density summary and
//! broadcasts (extractor, global head, summary); each client adapts only its
//! local head against the frozen broadcast models, refits its own density
//! summary, and uploads both; the server then aligns the extractor on a
//! mixup proxy of source examples — weighted toward each client's density —
//! and fine-tunes on labeled source data.
//!
//! FLOP accounting instruments each module-level pass at the batch sizes
//! actually executed. Density fitting and the feature passes feeding it are
//! excluded: they run once per round, not per optimization step.

use serde_json::Value;

use crate::costs::{module_cost, CostLedger, FlopCounter, LedgerRow, ModuleCost};
use crate::data::{BenchmarkData, DomainShard};
use crate::density::{confidence_weights, fit_gmm, GmmParams};
use crate::error::Result;
use crate::federation::optimizer::Momentum;
use crate::federation::sampler::BatchSampler;
use crate::federation::{
    check_against_data, num_classes, subtree_leaves, BroadcastMsg, ClientModel, Method,
    RoundRecord, RunHooks, TrainConfig, TrainOutcome, TrainReport, TrainedModels, UploadMsg,
};
use crate::losses::{client_objective_traced, cross_entropy_traced, server_objective_traced, LossConfig};
use crate::nn::{
    clone_classifier, forward_classifier, forward_classifier_traced, forward_features,
    forward_features_traced, init_model, ModelParams,
};
use crate::seed::{
    derive, TAG_CLIENT_GMM, TAG_CLIENT_SAMPLER, TAG_MODEL_INIT, TAG_ORACLE_SAMPLER, TAG_PROXY,
    TAG_SERVER_SAMPLER, TAG_SOURCE_GMM,
};
use crate::tensor::{Tape, Tensor};

/// Everything the server owns. Holds the labeled source shard and never any
/// target shard; the oracle baseline passes target data through a separate
/// code path that is flagged in its report.
pub struct ServerState {
    pub g: ModelParams,
    pub f_g: ModelParams,
    pub w_s: Option<GmmParams>,
    pub source: DomainShard,
    mom_g: Momentum,
    mom_fg: Momentum,
    sampler: BatchSampler,
    g_cost: ModuleCost,
    f_cost: ModuleCost,
}

impl ServerState {
    pub fn new(
        g: ModelParams,
        f_g: ModelParams,
        source: DomainShard,
        cfg: &TrainConfig,
        run_seed: u64,
    ) -> Self {
        let sampler = BatchSampler::new(
            source.len(),
            cfg.batch_size,
            derive(run_seed, &[TAG_SERVER_SAMPLER]),
        );
        let g_cost = module_cost(&g);
        let f_cost = module_cost(&f_g);
        ServerState {
            g,
            f_g,
            w_s: None,
            source,
            mom_g: Momentum::new(cfg.server_lr, cfg.server_momentum),
            mom_fg: Momentum::new(cfg.server_lr, cfg.server_momentum),
            sampler,
            g_cost,
            f_cost,
        }
    }
}

/// One client's persistent state across rounds.
pub struct ClientState {
    pub id: usize,
    pub target: DomainShard,
    /// Local head; `None` until the first broadcast clones it from the
    /// global head.
    pub f_l: Option<ModelParams>,
    pub w_t: Option<GmmParams>,
    sampler: BatchSampler,
    /// When set, the client runs the oracle variant: unit self-training
    /// weights and no density summary in its upload.
    oracle: bool,
    last_objective: Option<f64>,
}

impl ClientState {
    pub fn new(
        id: usize,
        target: DomainShard,
        cfg: &TrainConfig,
        run_seed: u64,
        oracle: bool,
    ) -> Self {
        let sampler = BatchSampler::new(
            target.len(),
            cfg.batch_size,
            derive(run_seed, &[TAG_CLIENT_SAMPLER, id as u64]),
        );
        ClientState { id, target, f_l: None, w_t: None, sampler, oracle, last_objective: None }
    }
}

pub(crate) fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (r, &c) in labels.iter().enumerate() {
        assert!(c < num_classes, "label {} out of range", c);
        data[r * num_classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Splits a gradient list produced for `g_vars ++ f_vars` back into the two
/// models' parts.
fn split_grads(grads: Vec<Tensor>, g_len: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut grads = grads;
    let f = grads.split_off(g_len);
    (grads, f)
}

/// Supervised warm-up of extractor and global head on the labeled source.
pub fn pretrain(server: &mut ServerState, epochs: usize, counter: &mut FlopCounter) {
    assert!(!server.source.is_empty(), "pretraining needs source data");
    let classes = server.f_g.output_dim();
    let steps = server.sampler.batches_per_epoch() * epochs;
    for _ in 0..steps {
        let idx = server.sampler.next_batch();
        let (x, labels) = server.source.gather(&idx);
        let y = one_hot(&labels.expect("source is labeled"), classes);
        let b = idx.len();

        let mut tape = Tape::new();
        let tg = server.g.trace(&mut tape);
        let tf = server.f_g.trace(&mut tape);
        let xv = tape.constant(x);
        let z = forward_features_traced(&mut tape, &tg, xv);
        counter.forward(&server.g_cost, b);
        let p = forward_classifier_traced(&mut tape, &tf, z);
        counter.forward(&server.f_cost, b);
        let yv = tape.constant(y);
        let loss = cross_entropy_traced(&mut tape, p, yv);

        let mut vars = tg.vars();
        let g_len = vars.len();
        vars.extend(tf.vars());
        let grads = tape.grad(loss, &vars);
        counter.backward(&server.g_cost, b);
        counter.backward(&server.f_cost, b);
        let (g_grads, f_grads) = split_grads(grads, g_len);
        server.mom_g.step(&mut server.g, &g_grads);
        server.mom_fg.step(&mut server.f_g, &f_grads);
    }
}

/// One client round: adapt the local head for `client_steps` mini-batches
/// with the broadcast models frozen, refit the client's density summary, and
/// return the upload.
pub fn client_round(
    client: &mut ClientState,
    msg: &BroadcastMsg,
    cfg: &TrainConfig,
    round: usize,
    run_seed: u64,
    counter: &mut FlopCounter,
) -> Result<UploadMsg> {
    if client.f_l.is_none() || cfg.fl_reinit_each_round {
        client.f_l = Some(clone_classifier(&msg.f_g));
    }
    let g_cost = module_cost(&msg.g);
    let f_cost = module_cost(&msg.f_g);
    let weighted = cfg.use_gmm_weighting && !client.oracle;
    let loss_cfg = LossConfig {
        lambda_st: if cfg.use_self_training { cfg.loss.lambda_st } else { 0.0 },
    };
    let mut opt = Momentum::new(cfg.client_lr, 0.0);
    client.last_objective = None;

    for _ in 0..cfg.client_steps {
        let idx = client.sampler.next_batch();
        let (x, _) = client.target.gather(&idx);
        let b = idx.len();

        // Broadcast models run forward only; their outputs enter the tape as
        // constants, so gradients reach the local head alone.
        let z = forward_features(&msg.g, &x);
        counter.forward(&g_cost, b);
        let p_g = forward_classifier(&msg.f_g, &z);
        counter.forward(&f_cost, b);
        let w = if weighted {
            let gmm = msg.w_s.as_ref().expect("weighting enabled but no density summary broadcast");
            confidence_weights(gmm, &z)
        } else {
            Tensor::ones(vec![b])
        };

        let f_l = client.f_l.as_mut().expect("local head initialized above");
        let mut tape = Tape::new();
        let tf_l = f_l.trace(&mut tape);
        let zc = tape.constant(z);
        let pgc = tape.constant(p_g);
        let wc = tape.constant(w);
        let p_l = forward_classifier_traced(&mut tape, &tf_l, zc);
        counter.forward(&f_cost, b);
        let obj = client_objective_traced(&mut tape, pgc, p_l, wc, &loss_cfg);
        client.last_objective = Some(tape.value(obj).scalar_value());

        let grads = tape.grad(obj, &tf_l.vars());
        counter.backward(&f_cost, b);
        opt.step(f_l, &grads);
    }

    let w_t = if client.oracle {
        None
    } else {
        // Fit on the full shard's current features; runs once per round and
        // is excluded from the per-step FLOP account.
        let z_all = forward_features(&msg.g, &client.target.inputs);
        Some(fit_gmm(
            &z_all,
            msg.f_g.output_dim(),
            derive(run_seed, &[TAG_CLIENT_GMM, client.id as u64, round as u64]),
        )?)
    };
    client.w_t = w_t.clone();

    Ok(UploadMsg {
        client_id: client.id,
        f_l: client.f_l.clone().expect("initialized above"),
        w_t,
    })
}

/// Where the server's alignment batches come from: the mixup proxy built
/// from source examples, or (oracle only) the clients' real target shards.
pub enum AlignmentData<'a> {
    MixupProxy,
    RealTargets { shards: &'a [DomainShard], samplers: &'a mut [BatchSampler] },
}

/// One server round: `server_iters` iterations of {sample source batch,
/// alignment step on the extractor, supervised fine-tune of extractor and
/// global head}. Returns the last alignment objective, if any step ran.
pub fn server_round(
    server: &mut ServerState,
    uploads: &[UploadMsg],
    cfg: &TrainConfig,
    round: usize,
    run_seed: u64,
    alignment: &mut AlignmentData<'_>,
    counter: &mut FlopCounter,
) -> Option<f64> {
    assert!(!uploads.is_empty(), "server round requires at least one upload");
    assert!(
        uploads.windows(2).all(|w| w[0].client_id < w[1].client_id),
        "uploads must be sorted by client id"
    );
    let classes = server.f_g.output_dim();
    let mut last_objective = None;

    for iter in 0..cfg.server_iters {
        let idx = server.sampler.next_batch();
        let (xb, labels) = server.source.gather(&idx);
        let b = idx.len();

        // Alignment: minimize the weighted global/local head discrepancy
        // w.r.t. the extractor only; heads are traced frozen.
        let mut tape = Tape::new();
        let tg = server.g.trace(&mut tape);
        let tf_g = server.f_g.trace_frozen(&mut tape);
        let mut per_client = Vec::with_capacity(uploads.len());
        match alignment {
            AlignmentData::MixupProxy => {
                let proxy = crate::proxy::build_proxy_batch(
                    &xb,
                    derive(run_seed, &[TAG_PROXY, round as u64, iter as u64]),
                );
                let xp = tape.constant(proxy.inputs);
                let z = forward_features_traced(&mut tape, &tg, xp);
                counter.forward(&server.g_cost, b);
                let p_g = forward_classifier_traced(&mut tape, &tf_g, z);
                counter.forward(&server.f_cost, b);
                let z_value = tape.value(z).clone();
                for up in uploads {
                    let w = match (&up.w_t, cfg.use_gmm_weighting) {
                        (Some(gmm), true) => confidence_weights(gmm, &z_value),
                        _ => Tensor::ones(vec![b]),
                    };
                    let tf_l = up.f_l.trace_frozen(&mut tape);
                    let p_l = forward_classifier_traced(&mut tape, &tf_l, z);
                    counter.forward(&server.f_cost, b);
                    let wv = tape.constant(w);
                    per_client.push((wv, p_g, p_l));
                }
            }
            AlignmentData::RealTargets { shards, samplers } => {
                for up in uploads {
                    let sampler = &mut samplers[up.client_id];
                    let tidx = sampler.next_batch();
                    let (xt, _) = shards[up.client_id].gather(&tidx);
                    let xv = tape.constant(xt);
                    let z = forward_features_traced(&mut tape, &tg, xv);
                    counter.forward(&server.g_cost, b);
                    let p_g = forward_classifier_traced(&mut tape, &tf_g, z);
                    counter.forward(&server.f_cost, b);
                    let tf_l = up.f_l.trace_frozen(&mut tape);
                    let p_l = forward_classifier_traced(&mut tape, &tf_l, z);
                    counter.forward(&server.f_cost, b);
                    let wv = tape.constant(Tensor::ones(vec![b]));
                    per_client.push((wv, p_g, p_l));
                }
            }
        }
        let obj = server_objective_traced(&mut tape, &per_client);
        last_objective = Some(tape.value(obj).scalar_value());
        let grads = tape.grad(obj, &tg.vars());
        // The reverse sweep retraces every module the forward pass touched.
        match alignment {
            AlignmentData::MixupProxy => {
                counter.backward(&server.g_cost, b);
                counter.backward(&server.f_cost, b * (1 + uploads.len()));
            }
            AlignmentData::RealTargets { .. } => {
                counter.backward(&server.g_cost, b * uploads.len());
                counter.backward(&server.f_cost, b * 2 * uploads.len());
            }
        }
        server.mom_g.step(&mut server.g, &grads);

        // Supervised fine-tune of extractor and global head on the same
        // labeled source batch.
        let y = one_hot(&labels.expect("source is labeled"), classes);
        let mut tape = Tape::new();
        let tg = server.g.trace(&mut tape);
        let tf = server.f_g.trace(&mut tape);
        let xv = tape.constant(xb);
        let z = forward_features_traced(&mut tape, &tg, xv);
        counter.forward(&server.g_cost, b);
        let p = forward_classifier_traced(&mut tape, &tf, z);
        counter.forward(&server.f_cost, b);
        let yv = tape.constant(y);
        let loss = cross_entropy_traced(&mut tape, p, yv);
        let mut vars = tg.vars();
        let g_len = vars.len();
        vars.extend(tf.vars());
        let grads = tape.grad(loss, &vars);
        counter.backward(&server.g_cost, b);
        counter.backward(&server.f_cost, b);
        let (g_grads, f_grads) = split_grads(grads, g_len);
        server.mom_g.step(&mut server.g, &g_grads);
        server.mom_fg.step(&mut server.f_g, &f_grads);
    }
    last_objective
}

/// Transmitted parameters of a serialized upload (head + density summary;
/// the client id is envelope, not payload).
pub fn upload_param_count(msg: &Value) -> u64 {
    subtree_leaves(msg, &["f_l", "w_t"])
}

/// Transmitted parameters of a serialized broadcast.
pub fn broadcast_param_count(msg: &Value) -> u64 {
    subtree_leaves(msg, &["g", "f_g", "w_s"])
}

pub fn run_dualadapt(cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<TrainOutcome> {
    run_dualadapt_with_hooks(cfg, data, seed, RunHooks::default())
}

pub fn run_dualadapt_with_hooks(
    cfg: &TrainConfig,
    data: &BenchmarkData,
    seed: u64,
    hooks: RunHooks<'_>,
) -> Result<TrainOutcome> {
    run_protocol(cfg, data, seed, hooks, false)
}

/// Diagnostic upper bound: the server aligns on real target batches instead
/// of the proxy and all confidence weights collapse to one. Reads target
/// shards on the server, hence `privacy_violating` in the report.
pub fn run_fed_oracle(cfg: &TrainConfig, data: &BenchmarkData, seed: u64) -> Result<TrainOutcome> {
    run_protocol(cfg, data, seed, RunHooks::default(), true)
}

fn run_protocol(
    cfg: &TrainConfig,
    data: &BenchmarkData,
    seed: u64,
    mut hooks: RunHooks<'_>,
    oracle: bool,
) -> Result<TrainOutcome> {
    check_against_data(cfg, data)?;
    let classes = num_classes(data);
    let model_cfg =
        cfg.model
            .to_model_config(data.source.dim(), classes, derive(seed, &[TAG_MODEL_INIT]));
    model_cfg.validate()?;
    let (g, f_g) = init_model(&model_cfg);
    let mut server = ServerState::new(g, f_g, data.source.clone(), cfg, seed);
    let mut clients: Vec<ClientState> = data
        .targets
        .iter()
        .enumerate()
        .map(|(i, pair)| ClientState::new(i, pair.train.clone(), cfg, seed, oracle))
        .collect();
    let order: Vec<usize> = match hooks.client_order.take() {
        Some(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(
                sorted,
                (0..clients.len()).collect::<Vec<_>>(),
                "client_order must be a permutation of 0..n_clients"
            );
            order
        }
        None => (0..clients.len()).collect(),
    };
    let tests: Vec<&DomainShard> = data.targets.iter().map(|p| &p.test).collect();

    // The oracle's deliberate privacy violation: target shards visible on
    // the server side, sampled by server-owned samplers.
    let oracle_shards: Vec<DomainShard> = if oracle {
        data.targets.iter().map(|p| p.train.clone()).collect()
    } else {
        Vec::new()
    };
    let mut oracle_samplers: Vec<BatchSampler> = oracle_shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            BatchSampler::new(
                shard.len(),
                cfg.batch_size,
                derive(seed, &[TAG_ORACLE_SAMPLER, i as u64]),
            )
        })
        .collect();

    let mut ledger = CostLedger::default();
    let mut rounds = Vec::new();

    let mut counter = FlopCounter::new();
    pretrain(&mut server, cfg.pretrain_epochs, &mut counter);
    let pretrain_flops = counter.take();
    ledger.push(LedgerRow {
        participant: "server".into(),
        round: 0,
        flops: pretrain_flops,
        upload_params: 0,
        broadcast_params: 0,
    });
    let initial = TrainedModels::global_only(server.g.clone(), server.f_g.clone(), clients.len());
    let (per_target, mean) = crate::federation::evaluate(&initial, &tests);
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
        if cfg.use_gmm_weighting && !oracle {
            let z = forward_features(&server.g, &server.source.inputs);
            server.w_s = Some(fit_gmm(
                &z,
                classes,
                derive(seed, &[TAG_SOURCE_GMM, round as u64]),
            )?);
        }
        let broadcast = BroadcastMsg {
            g: server.g.clone(),
            f_g: server.f_g.clone(),
            w_s: server.w_s.clone(),
        };
        let broadcast_json = serde_json::to_value(&broadcast)
            .expect("broadcast serialization cannot fail");
        let per_client_broadcast = broadcast_param_count(&broadcast_json);

        let mut uploads: Vec<UploadMsg> = Vec::with_capacity(clients.len());
        let mut client_rows: Vec<Option<LedgerRow>> = vec![None; clients.len()];
        for &i in &order {
            let mut counter = FlopCounter::new();
            let upload = client_round(&mut clients[i], &broadcast, cfg, round, seed, &mut counter)?;
            let upload_json =
                serde_json::to_value(&upload).expect("upload serialization cannot fail");
            if let Some(observe) = hooks.on_upload.as_mut() {
                observe(round, &upload_json);
            }
            client_rows[i] = Some(LedgerRow {
                participant: format!("client{}", i),
                round: round as u64,
                flops: counter.take(),
                upload_params: upload_param_count(&upload_json),
                broadcast_params: per_client_broadcast,
            });
            uploads.push(upload);
        }
        // Rows enter the ledger in client-id order so reports do not depend
        // on execution order.
        let mut round_client_flops = 0;
        let mut round_upload = 0;
        for row in client_rows.into_iter().map(|r| r.expect("every client ran")) {
            round_client_flops += row.flops;
            round_upload += row.upload_params;
            ledger.push(row);
        }
        uploads.sort_by_key(|u| u.client_id);

        let mut alignment = if oracle {
            AlignmentData::RealTargets {
                shards: &oracle_shards,
                samplers: &mut oracle_samplers,
            }
        } else {
            AlignmentData::MixupProxy
        };
        let mut counter = FlopCounter::new();
        let server_objective = server_round(
            &mut server,
            &uploads,
            cfg,
            round,
            seed,
            &mut alignment,
            &mut counter,
        );
        let server_flops = counter.take();
        ledger.push(LedgerRow {
            participant: "server".into(),
            round: round as u64,
            flops: server_flops,
            upload_params: 0,
            broadcast_params: 0,
        });

        let models = TrainedModels {
            per_client: clients
                .iter()
                .map(|c| ClientModel {
                    g: server.g.clone(),
                    f_global: server.f_g.clone(),
                    f_local: c.f_l.clone().expect("initialized in round 1"),
                })
                .collect(),
        };
        let (per_target, mean) = crate::federation::evaluate(&models, &tests);
        let client_objective = clients
            .iter()
            .map(|c| c.last_objective)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        rounds.push(RoundRecord {
            round,
            per_target_accuracy: per_target,
            mean_accuracy: mean,
            client_flops: round_client_flops,
            server_flops,
            upload_params: round_upload,
            broadcast_params: per_client_broadcast * clients.len() as u64,
            client_objective,
            server_objective,
        });
    }

    let models = TrainedModels {
        per_client: clients
            .iter()
            .map(|c| ClientModel {
                g: server.g.clone(),
                f_global: server.f_g.clone(),
                f_local: c.f_l.clone().unwrap_or_else(|| server.f_g.clone()),
            })
            .collect(),
    };
    let method = if oracle { Method::FedOracle } else { Method::DualAdapt };
    Ok(TrainOutcome {
        report: TrainReport {
            method: method.name().to_string(),
            seed,
            privacy_violating: oracle,
            config: cfg.clone(),
            rounds,
            ledger,
        },
        models,
    })
}
