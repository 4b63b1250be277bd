//! Scalar training objectives.
//!
//! All objectives consume probability rows (the classifiers already apply
//! softmax) and average per-example terms over the batch, so hyper-parameter
//! weights are batch-size independent. Each objective exists in a pure form
//! (plain number, for reporting) and a traced form (for gradients).

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var, LOG_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the self-training term in the client objective.
    pub lambda_st: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_st: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if !(self.lambda_st >= 0.0) {
            return Err(crate::Error::Config("lambda_st must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Index of the row maximum; ties break toward the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over the batch of −Σ_c y_c · ln(p_c + ε).
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> f64 {
    assert_eq!(probs.shape(), labels.shape(), "cross_entropy: shape mismatch");
    let (b, c) = (probs.rows(), probs.cols());
    let mut total = 0.0;
    for r in 0..b {
        for j in 0..c {
            total -= labels.at(r, j) * (probs.at(r, j) + LOG_EPS).ln();
        }
    }
    total / b as f64
}

pub fn cross_entropy_traced(tape: &mut Tape, probs: Var, labels: Var) -> Var {
    let logp = tape.log_eps(probs);
    let picked = tape.mul(labels, logp);
    let rows = tape.sum_rows(picked);
    let neg = tape.neg(rows);
    tape.mean_all(neg)
}

/// Mean per-example L1 distance between two probability rows; in [0, 2].
pub fn discrepancy(p_g: &Tensor, p_l: &Tensor) -> f64 {
    assert_eq!(p_g.shape(), p_l.shape(), "discrepancy: shape mismatch");
    let b = p_g.rows();
    let mut total = 0.0;
    for r in 0..b {
        for j in 0..p_g.cols() {
            total += (p_g.at(r, j) - p_l.at(r, j)).abs();
        }
    }
    total / b as f64
}

fn discrepancy_rows_traced(tape: &mut Tape, p_g: Var, p_l: Var) -> Var {
    let diff = tape.sub(p_g, p_l);
    let abs = tape.abs(diff);
    tape.sum_rows(abs)
}

pub fn discrepancy_traced(tape: &mut Tape, p_g: Var, p_l: Var) -> Var {
    let rows = discrepancy_rows_traced(tape, p_g, p_l);
    tape.mean_all(rows)
}

/// One-hot at each row's argmax; ties go to the lowest class index.
pub fn pseudo_labels(p_g: &Tensor) -> Tensor {
    let (b, c) = (p_g.rows(), p_g.cols());
    let mut data = vec![0.0; b * c];
    for r in 0..b {
        data[r * c + argmax_row(p_g.row(r))] = 1.0;
    }
    Tensor::new(vec![b, c], data)
}

fn check_weights(w: &Tensor, batch: usize) {
    assert_eq!(w.shape(), &[batch], "weights must be one scalar per example");
    assert!(
        w.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
        "confidence weights must lie in [0, 1]"
    );
}

/// Client objective: mean over the batch of
/// `−ℓ_adv(x) + λ_st · w_s(x) · ℓ_st(x)`, where ℓ_adv is the per-example L1
/// discrepancy and ℓ_st is the per-example cross-entropy of `p_l` against
/// pseudo-labels from `p_g`.
pub fn client_objective(p_g: &Tensor, p_l: &Tensor, w_s: &Tensor, cfg: &LossConfig) -> f64 {
    assert_eq!(p_g.shape(), p_l.shape(), "client_objective: shape mismatch");
    assert!(cfg.lambda_st >= 0.0);
    let (b, c) = (p_g.rows(), p_g.cols());
    check_weights(w_s, b);
    let pseudo = pseudo_labels(p_g);
    let mut total = 0.0;
    for r in 0..b {
        let mut adv = 0.0;
        let mut st = 0.0;
        for j in 0..c {
            adv += (p_g.at(r, j) - p_l.at(r, j)).abs();
            st -= pseudo.at(r, j) * (p_l.at(r, j) + LOG_EPS).ln();
        }
        total += -adv + cfg.lambda_st * w_s.data()[r] * st;
    }
    total / b as f64
}

/// Traced client objective. The `p_g` pathway is stop-gradiented inside:
/// gradients reach only whatever produced `p_l` (the local head).
pub fn client_objective_traced(
    tape: &mut Tape,
    p_g: Var,
    p_l: Var,
    w_s: Var,
    cfg: &LossConfig,
) -> Var {
    assert!(cfg.lambda_st >= 0.0);
    let batch = tape.value(p_g).rows();
    check_weights(tape.value(w_s), batch);
    let pseudo = pseudo_labels(tape.value(p_g));

    let p_g = tape.stop_grad(p_g);
    let w_s = tape.stop_grad(w_s);
    let adv_rows = discrepancy_rows_traced(tape, p_g, p_l);
    let neg_adv = tape.neg(adv_rows);

    let pseudo = tape.constant(pseudo);
    let logp = tape.log_eps(p_l);
    let picked = tape.mul(pseudo, logp);
    let st_sum = tape.sum_rows(picked);
    let st_rows = tape.neg(st_sum);

    let weighted = tape.mul(w_s, st_rows);
    let scaled = tape.scale(weighted, cfg.lambda_st);
    let per_example = tape.add(neg_adv, scaled);
    tape.mean_all(per_example)
}

/// Server alignment objective: Σ over clients of the mean weighted
/// per-example discrepancy on the proxy batch.
pub fn server_objective(per_client: &[(Tensor, Tensor, Tensor)]) -> f64 {
    assert!(!per_client.is_empty(), "server objective needs at least one client");
    let mut total = 0.0;
    for (w, p_g, p_l) in per_client {
        let b = p_g.rows();
        check_weights(w, b);
        assert_eq!(p_g.shape(), p_l.shape());
        let mut acc = 0.0;
        for r in 0..b {
            let mut adv = 0.0;
            for j in 0..p_g.cols() {
                adv += (p_g.at(r, j) - p_l.at(r, j)).abs();
            }
            acc += w.data()[r] * adv;
        }
        total += acc / b as f64;
    }
    total
}

/// Traced server objective; weights are stop-gradiented. Freezing of the
/// classifier heads is the caller's choice of traced-frozen parameters, so
/// gradients flow through `p_g`/`p_l` into the feature extractor only.
pub fn server_objective_traced(tape: &mut Tape, per_client: &[(Var, Var, Var)]) -> Var {
    assert!(!per_client.is_empty(), "server objective needs at least one client");
    let mut total: Option<Var> = None;
    for &(w, p_g, p_l) in per_client {
        let batch = tape.value(p_g).rows();
        check_weights(tape.value(w), batch);
        let w = tape.stop_grad(w);
        let adv_rows = discrepancy_rows_traced(tape, p_g, p_l);
        let weighted = tape.mul(w, adv_rows);
        let term = tape.mean_all(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.unwrap()
}
