//! FLOP and parameter accounting.
//!
//! Conventions: a multiply-add counts as 2 FLOPs, a bias add as 1, an
//! activation as 1 per affected element (so only non-final layers pay it);
//! a backward pass costs the same as the forward pass it mirrors. Density
//! fitting is excluded from per-example training FLOPs — it happens once
//! per round, not per example.

use serde::{Deserialize, Serialize};

use crate::nn::ModelParams;

/// Per-example forward cost and parameter count of one dense network.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub params: u64,
    pub forward_flops: u64,
}

/// `params = Σ (in·out + out)`; `forward_flops = Σ (2·in·out + out)` plus
/// one activation FLOP per hidden unit of every non-final layer.
pub fn module_cost(m: &ModelParams) -> ModuleCost {
    let dims = m.layer_dims();
    let mut params = 0;
    let mut flops = 0;
    for (i, &(nin, nout)) in dims.iter().enumerate() {
        params += (nin * nout + nout) as u64;
        flops += (2 * nin * nout + nout) as u64;
        if i + 1 < dims.len() {
            flops += nout as u64;
        }
    }
    ModuleCost { params, forward_flops: flops }
}

/// Module sizes a method's closed-form costs are built from. `d_flops` is
/// the domain-discriminator forward cost (adversarial baseline only);
/// `w_params` is the transmitted mixture-summary size.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub g_flops: u64,
    pub f_flops: u64,
    #[serde(default)]
    pub d_flops: u64,
    pub g_params: u64,
    pub f_params: u64,
    #[serde(default)]
    pub w_params: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CostMethod {
    FedDann,
    FedMcd,
    DualAdapt,
}

impl CostMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CostMethod::FedDann => "fed_dann",
            CostMethod::FedMcd => "fed_mcd",
            CostMethod::DualAdapt => "dualadapt",
        }
    }
}

/// Per-example on-device training FLOPs.
///
/// * adversarial-discriminator baseline: `2(‖G‖+‖D‖) + 2(‖G‖+‖F‖+‖D‖)`
/// * two-classifier-discrepancy baseline: `2(‖G‖+2‖F‖) + 2(‖G‖+2‖F‖)`
/// * this crate's main method: `‖G‖ + 3‖F‖` (extractor and global head run
///   forward only; just the local head trains)
pub fn method_client_flops(method: CostMethod, arch: &ArchSpec) -> u64 {
    let (g, f, d) = (arch.g_flops, arch.f_flops, arch.d_flops);
    match method {
        CostMethod::FedDann => 2 * (g + d) + 2 * (g + f + d),
        CostMethod::FedMcd => 2 * (g + 2 * f) + 2 * (g + 2 * f),
        CostMethod::DualAdapt => g + 3 * f,
    }
}

/// `(upload, broadcast)` parameters per client per round.
pub fn method_communication(method: CostMethod, arch: &ArchSpec) -> (u64, u64) {
    let (g, f, w) = (arch.g_params, arch.f_params, arch.w_params);
    match method {
        CostMethod::FedDann => (g + f, g + f),
        CostMethod::FedMcd => (g + 2 * f, g + 2 * f),
        CostMethod::DualAdapt => (f + w, g + f + w),
    }
}

/// One participant's measured costs for one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub participant: String,
    pub round: u64,
    pub flops: u64,
    pub upload_params: u64,
    pub broadcast_params: u64,
}

/// Measured per-round accounting; totals must equal the closed-form method
/// formulas with the executed batch counts substituted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub rows: Vec<LedgerRow>,
}

impl CostLedger {
    pub fn push(&mut self, row: LedgerRow) {
        self.rows.push(row);
    }

    pub fn client_rows(&self, client: usize) -> impl Iterator<Item = &LedgerRow> {
        let name = format!("client{}", client);
        self.rows.iter().filter(move |r| r.participant == name)
    }

    pub fn total_upload(&self) -> u64 {
        self.rows.iter().map(|r| r.upload_params).sum()
    }

    pub fn total_broadcast(&self) -> u64 {
        self.rows.iter().map(|r| r.broadcast_params).sum()
    }
}

/// Counts numeric leaves in a JSON value — the parameter count of a
/// serialized message payload.
pub fn numeric_leaves(v: &serde_json::Value) -> u64 {
    match v {
        serde_json::Value::Number(_) => 1,
        serde_json::Value::Array(items) => items.iter().map(numeric_leaves).sum(),
        serde_json::Value::Object(map) => map.values().map(numeric_leaves).sum(),
        _ => 0,
    }
}

/// Running FLOP total, incremented once per module pass.
#[derive(Default)]
pub struct FlopCounter {
    total: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, cost: &ModuleCost, batch: usize) {
        self.total += cost.forward_flops * batch as u64;
    }

    /// Backward modeled at forward cost.
    pub fn backward(&mut self, cost: &ModuleCost, batch: usize) {
        self.total += cost.forward_flops * batch as u64;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn take(&mut self) -> u64 {
        std::mem::take(&mut self.total)
    }
}
