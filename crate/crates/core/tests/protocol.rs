//! End-to-end behavior of the training protocols, checked against
//! independent oracles: a from-scratch logistic regression, finite-difference
//! gradients, manual SGD recomputation, and paired-run comparisons.

use dualadapt::costs::FlopCounter;
use dualadapt::data::{gen_benchmark, BenchmarkSpec, DomainShard, ShiftSpec};
use dualadapt::density::fit_gmm;
use dualadapt::federation::dualadapt::{
    client_round, pretrain, run_dualadapt, server_round, AlignmentData, ClientState, ServerState,
};
use dualadapt::federation::sampler::BatchSampler;
use dualadapt::federation::{
    evaluate, run_method, BroadcastMsg, Method, TrainConfig, TrainedModels, UploadMsg,
};
use dualadapt::losses::{discrepancy, server_objective};
use dualadapt::nn::{forward_classifier, forward_features, init_model, ModelParams};
use dualadapt::presets;
use dualadapt::proxy::build_proxy_batch;
use dualadapt::seed::{derive, TAG_PROXY, TAG_SERVER_SAMPLER};
use dualadapt::tensor::Tensor;

fn two_class_spec(shifts: Vec<ShiftSpec>) -> BenchmarkSpec {
    BenchmarkSpec {
        name: "proto".into(),
        classes: 2,
        dims: 4,
        per_domain: 200,
        shifts,
        target_fraction: 0.5,
        class_separation: 6.0,
        within_class_stddev: 1.0,
    }
}

fn small_cfg(n_clients: usize) -> TrainConfig {
    TrainConfig {
        n_clients,
        rounds: 2,
        client_steps: 5,
        server_iters: 5,
        pretrain_epochs: 10,
        batch_size: 32,
        model: dualadapt::federation::ModelSpec {
            feature_dim: 8,
            g_hidden: vec![16],
            f_hidden: vec![],
            activation: dualadapt::nn::Activation::Relu,
        },
        ..presets::default_train_config()
    }
}

/// From-scratch logistic regression: full-batch gradient descent on the
/// two-class cross-entropy. Independent of the crate's autodiff.
fn logreg_accuracy(shard: &DomainShard) -> f64 {
    let labels = shard.labels.as_ref().unwrap();
    let (n, d) = (shard.len(), shard.dim());
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for i in 0..n {
            let row = shard.inputs.row(i);
            let t = labels[i] as f64;
            let logit: f64 = row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - t;
            for j in 0..d {
                gw[j] += err * row[j];
            }
            gb += err;
        }
        for j in 0..d {
            w[j] -= 0.5 * gw[j] / n as f64;
        }
        b -= 0.5 * gb / n as f64;
    }
    let mut correct = 0;
    for i in 0..n {
        let logit: f64 =
            shard.inputs.row(i).iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
        let predicted = usize::from(logit > 0.0);
        if predicted == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[test]
fn pretraining_reaches_linearly_separable_accuracy() {
    let spec = two_class_spec(vec![ShiftSpec::identity()]);
    let data = gen_benchmark(&spec, 11).unwrap();
    assert!(
        logreg_accuracy(&data.source) >= 0.95,
        "oracle: the generated source must itself be separable"
    );

    let cfg = small_cfg(1);
    let model_cfg = cfg.model.to_model_config(4, 2, 77);
    let (g, f_g) = init_model(&model_cfg);
    let mut server = ServerState::new(g, f_g, data.source.clone(), &cfg, 5);
    pretrain(&mut server, 20, &mut FlopCounter::new());

    let models = TrainedModels::global_only(server.g, server.f_g, 1);
    let (_, acc) = evaluate(&models, &[&data.source]);
    assert!(acc >= 0.95, "post-pretrain source accuracy {}", acc);
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let data = gen_benchmark(&two_class_spec(vec![ShiftSpec::identity()]), 3).unwrap();
    let cfg = small_cfg(1);
    let (g, f_g) = init_model(&cfg.model.to_model_config(4, 2, 9));
    let mut server = ServerState::new(g.clone(), f_g.clone(), data.source.clone(), &cfg, 5);
    pretrain(&mut server, 0, &mut FlopCounter::new());
    assert_eq!(flat(&server.g), flat(&g));
    assert_eq!(flat(&server.f_g), flat(&f_g));
}

fn flat(m: &ModelParams) -> Vec<f64> {
    m.flat_params().iter().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn zero_client_steps_return_the_broadcast_head() {
    let data = gen_benchmark(&two_class_spec(vec![ShiftSpec::identity()]), 21).unwrap();
    let mut cfg = small_cfg(1);
    cfg.rounds = 1;
    cfg.client_steps = 0;
    cfg.server_iters = 0;
    let out = run_dualadapt(&cfg, &data, 42).unwrap();
    let view = &out.models.per_client[0];
    assert_eq!(flat(&view.f_local), flat(&view.f_global));
    let z = forward_features(&view.g, &data.targets[0].test.inputs);
    let d = discrepancy(
        &forward_classifier(&view.f_global, &z),
        &forward_classifier(&view.f_local, &z),
    );
    assert_eq!(d, 0.0);
}

#[test]
fn without_self_training_the_local_head_drifts_to_disagree() {
    // The objective reduces to −discrepancy, so steps push the local head
    // away from the global one on target data — provided they differ at all.
    let shift = ShiftSpec { rotation: 0.5, translation: vec![], scale: 1.0, noise: 0.1 };
    let data = gen_benchmark(&two_class_spec(vec![shift]), 8).unwrap();
    let mut cfg = small_cfg(1);
    cfg.rounds = 1;
    cfg.client_steps = 25;
    cfg.server_iters = 0;
    cfg.use_self_training = false;
    cfg.use_gmm_weighting = false;

    let model_cfg = cfg.model.to_model_config(4, 2, 19);
    let (g, f_g) = init_model(&model_cfg);
    let target = data.targets[0].train.clone();
    let z = forward_features(&g, &target.inputs);

    let mut client = ClientState::new(0, target.clone(), &cfg, 13, false);
    client.f_l = Some(ModelParams::glorot(&model_cfg.f_dims(), model_cfg.activation, 333));
    let before = discrepancy(
        &forward_classifier(&f_g, &z),
        &forward_classifier(client.f_l.as_ref().unwrap(), &z),
    );
    assert!(before > 0.0, "perturbed heads must start apart");

    let msg = BroadcastMsg { g: g.clone(), f_g: f_g.clone(), w_s: None };
    let upload = client_round(&mut client, &msg, &cfg, 1, 13, &mut FlopCounter::new()).unwrap();
    let after =
        discrepancy(&forward_classifier(&f_g, &z), &forward_classifier(&upload.f_l, &z));
    assert!(after >= before, "discrepancy {} should not shrink from {}", after, before);
    assert!(after > before, "25 adversarial steps should strictly grow it");

    // From an exactly symmetric start the absolute-difference gradient
    // vanishes, so the head stays put: the drift needs self-training (or any
    // asymmetry) to get off the saddle.
    let mut stuck = ClientState::new(0, target, &cfg, 13, false);
    let u2 = client_round(&mut stuck, &msg, &cfg, 1, 13, &mut FlopCounter::new()).unwrap();
    assert_eq!(flat(&u2.f_l), flat(&f_g));
}

#[test]
fn server_single_step_matches_manual_sgd() {
    // Momentum 0, one server iteration: the update must equal one plain
    // gradient step on the alignment objective followed by one on the
    // fine-tune loss, with all gradients recomputed by central differences.
    let spec = two_class_spec(vec![ShiftSpec::identity()]);
    let data = gen_benchmark(&spec, 31).unwrap();
    let mut cfg = small_cfg(1);
    cfg.server_iters = 1;
    cfg.server_momentum = 0.0;
    cfg.server_lr = 0.005;
    let seed = 99;

    let model_cfg = cfg.model.to_model_config(4, 2, 55);
    let (g0, f_g0) = init_model(&model_cfg);
    let f_l = ModelParams::glorot(&model_cfg.f_dims(), model_cfg.activation, 123);
    let z_all = forward_features(&g0, &data.targets[0].train.inputs);
    let w_t = fit_gmm(&z_all, 2, 7).unwrap();
    let uploads = vec![UploadMsg { client_id: 0, f_l: f_l.clone(), w_t: Some(w_t.clone()) }];

    // Predict the source batch and proxy the server round will use.
    let mut shadow = BatchSampler::new(
        data.source.len(),
        cfg.batch_size,
        derive(seed, &[TAG_SERVER_SAMPLER]),
    );
    let idx = shadow.next_batch();
    let (xb, labels) = data.source.gather(&idx);
    let labels = labels.unwrap();
    let proxy = build_proxy_batch(&xb, derive(seed, &[TAG_PROXY, 1, 0]));

    // Weights are treated as constants, frozen at the pre-step extractor.
    let z_proxy = forward_features(&g0, &proxy.inputs);
    let w_frozen = dualadapt::density::confidence_weights(&w_t, &z_proxy);

    let rebuild = |template: &ModelParams, flat: &[f64]| -> ModelParams {
        let mut m = template.clone();
        let mut parts = Vec::new();
        let mut at = 0;
        for t in m.flat_params() {
            parts.push(Tensor::new(t.shape().to_vec(), flat[at..at + t.len()].to_vec()));
            at += t.len();
        }
        m.set_flat_params(&parts);
        m
    };

    let align_value = |gf: &[f64]| -> f64 {
        let g = rebuild(&g0, gf);
        let z = forward_features(&g, &proxy.inputs);
        let p_g = forward_classifier(&f_g0, &z);
        let p_l = forward_classifier(&f_l, &z);
        server_objective(&[(w_frozen.clone(), p_g, p_l)])
    };
    let ce_value = |gf: &[f64], ff: &[f64]| -> f64 {
        let g = rebuild(&g0, gf);
        let f = rebuild(&f_g0, ff);
        let z = forward_features(&g, &xb);
        let p = forward_classifier(&f, &z);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            total -= (p.at(r, label) + 1e-12).ln();
        }
        total / labels.len() as f64
    };
    let fd = |f: &dyn Fn(&[f64]) -> f64, at: &[f64]| -> Vec<f64> {
        let h = 1e-5;
        let mut grad = vec![0.0; at.len()];
        let mut x = at.to_vec();
        for i in 0..at.len() {
            x[i] = at[i] + h;
            let up = f(&x);
            x[i] = at[i] - h;
            let down = f(&x);
            x[i] = at[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    };

    // Manual recomputation of the two sub-steps.
    let lr = cfg.server_lr;
    let g_flat0 = flat(&g0);
    let f_flat0 = flat(&f_g0);
    let grad_align = fd(&|gf| align_value(gf), &g_flat0);
    let g_flat1: Vec<f64> =
        g_flat0.iter().zip(&grad_align).map(|(p, g)| p - lr * g).collect();
    let grad_ce_g = fd(&|gf| ce_value(gf, &f_flat0), &g_flat1);
    let grad_ce_f = fd(&|ff| ce_value(&g_flat1, ff), &f_flat0);
    let g_expected: Vec<f64> =
        g_flat1.iter().zip(&grad_ce_g).map(|(p, g)| p - lr * g).collect();
    let f_expected: Vec<f64> =
        f_flat0.iter().zip(&grad_ce_f).map(|(p, g)| p - lr * g).collect();

    // The implementation's step.
    let mut server = ServerState::new(g0.clone(), f_g0.clone(), data.source.clone(), &cfg, seed);
    server_round(
        &mut server,
        &uploads,
        &cfg,
        1,
        seed,
        &mut AlignmentData::MixupProxy,
        &mut FlopCounter::new(),
    );

    for (a, e) in flat(&server.g).iter().zip(&g_expected) {
        assert!((a - e).abs() <= 1e-8 + 1e-5 * e.abs(), "extractor mismatch: {} vs {}", a, e);
    }
    for (a, e) in flat(&server.f_g).iter().zip(&f_expected) {
        assert!((a - e).abs() <= 1e-8 + 1e-5 * e.abs(), "head mismatch: {} vs {}", a, e);
    }
}

#[test]
fn no_domain_gap_keeps_target_accuracy_near_source() {
    // Identity shifts: adapting must not cost more than 3 accuracy points
    // relative to the post-pretrain model, averaged over 5 seeds.
    let spec = two_class_spec(vec![ShiftSpec::identity(), ShiftSpec::identity()]);
    let mut cfg = small_cfg(2);
    cfg.rounds = 3;
    let mut gap_sum = 0.0;
    for seed in 0..5 {
        let data = gen_benchmark(&spec, 100 + seed).unwrap();
        let out = run_dualadapt(&cfg, &data, seed).unwrap();
        let pre = out.report.rounds[0].mean_accuracy;
        let post = out.report.final_mean_accuracy();
        gap_sum += pre - post;
    }
    let mean_gap = gap_sum / 5.0;
    assert!(mean_gap <= 0.03, "adaptation lost {} accuracy with no domain gap", mean_gap);
}

#[test]
fn single_client_fed_mcd_equals_centralized_one2one() {
    let shift = ShiftSpec { rotation: 0.6, translation: vec![], scale: 1.1, noise: 0.1 };
    let data = gen_benchmark(&two_class_spec(vec![shift]), 17).unwrap();
    let mut cfg = small_cfg(1);
    cfg.rounds = 3;
    let fed = run_method(Method::FedMcd, &cfg, &data, 7).unwrap();
    let cent = run_method(Method::CentMcdOne2One, &cfg, &data, 7).unwrap();

    let fed_acc: Vec<f64> = fed.report.rounds.iter().map(|r| r.mean_accuracy).collect();
    let cent_acc: Vec<f64> = cent.report.rounds.iter().map(|r| r.mean_accuracy).collect();
    assert_eq!(fed_acc, cent_acc, "per-round trajectories must match exactly");

    let fv = &fed.models.per_client[0];
    let cv = &cent.models.per_client[0];
    assert_eq!(flat(&fv.g), flat(&cv.g));
    assert_eq!(flat(&fv.f_global), flat(&cv.f_global));
    assert_eq!(flat(&fv.f_local), flat(&cv.f_local));
}

#[test]
fn zero_rounds_report_only_pretrain_metrics() {
    let data = gen_benchmark(&two_class_spec(vec![ShiftSpec::identity()]), 5).unwrap();
    let mut cfg = small_cfg(1);
    cfg.rounds = 0;
    let out = run_dualadapt(&cfg, &data, 1).unwrap();
    assert_eq!(out.report.rounds.len(), 1);
    assert_eq!(out.report.rounds[0].round, 0);
    assert!(out.report.rounds[0].client_objective.is_none());
    assert_eq!(out.report.ledger.rows.len(), 1, "only the pretrain ledger row");
}

#[test]
fn oracle_baseline_is_flagged_and_adapts() {
    let shift = ShiftSpec { rotation: 0.5, translation: vec![], scale: 1.0, noise: 0.1 };
    let data = gen_benchmark(&two_class_spec(vec![shift]), 23).unwrap();
    let cfg = small_cfg(1);
    let out = run_method(Method::FedOracle, &cfg, &data, 3).unwrap();
    assert!(out.report.privacy_violating);
    assert_eq!(out.report.method, "fed_oracle");
    // Uploads carry no density summary in oracle mode.
    let upload_rows: Vec<_> = out
        .report
        .ledger
        .rows
        .iter()
        .filter(|r| r.participant.starts_with("client"))
        .collect();
    assert!(!upload_rows.is_empty());
    for row in upload_rows {
        let f_params = out.models.per_client[0].f_local.param_count();
        assert_eq!(row.upload_params, f_params);
    }
    for m in [Method::SourceOnly, Method::DualAdapt, Method::FedMcd] {
        let other = run_method(m, &cfg, &data, 3).unwrap();
        assert!(!other.report.privacy_violating, "{} must not be flagged", m.name());
    }
}

#[test]
fn client_round_needs_enough_data_for_the_mixture() {
    // 2 classes → 4 mixture components; a 3-example shard cannot fit one.
    let data = gen_benchmark(&two_class_spec(vec![ShiftSpec::identity()]), 2).unwrap();
    let cfg = small_cfg(1);
    let model_cfg = cfg.model.to_model_config(4, 2, 1);
    let (g, f_g) = init_model(&model_cfg);
    let tiny = DomainShard {
        inputs: Tensor::from_rows(&[vec![0.0; 4], vec![1.0; 4], vec![2.0; 4]]),
        labels: None,
        domain: "target0".into(),
        split: dualadapt::data::Split::Train,
    };
    let mut client = ClientState::new(0, tiny, &cfg, 1, false);
    let msg = BroadcastMsg { g, f_g, w_s: None };
    let mut cfg2 = cfg.clone();
    cfg2.use_gmm_weighting = false;
    let err = client_round(&mut client, &msg, &cfg2, 1, 1, &mut FlopCounter::new());
    assert!(err.is_err(), "undersized shard must fail the density fit");
    let _ = data;
}
