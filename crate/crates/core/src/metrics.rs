//! Accuracy indexes: the four threshold-exceedance proportions and the
//! validation loss used to judge a trained surrogate.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::flows;
use crate::grid::PreparedGrid;
use crate::nn::Network;
use crate::sampling::Normalizer;

/// Absolute error thresholds for the exceedance proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyThresholds {
    /// Voltage magnitude, per unit.
    pub vm_pu: f64,
    /// Voltage angle, radians.
    pub va_rad: f64,
    /// Branch active/reactive flow, MW (MVAr), compared after scaling by
    /// the system base.
    pub flow_mw: f64,
}

impl Default for AccuracyThresholds {
    fn default() -> Self {
        Self {
            vm_pu: 1e-4,
            va_rad: 0.01,
            flow_mw: 5.0,
        }
    }
}

/// The four exceedance proportions plus the split loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    /// Half mean squared error of normalized outputs over the split.
    pub v_loss: f64,
    /// Proportion of |ΔV| entries above the magnitude threshold.
    pub p_vm: f64,
    /// Proportion of |Δθ| entries above the angle threshold.
    pub p_va: f64,
    /// Proportion of |ΔP_branch| entries above the flow threshold.
    pub p_pf: f64,
    /// Proportion of |ΔQ_branch| entries above the flow threshold.
    pub p_qf: f64,
}

impl IndexReport {
    pub fn all_within(&self, target: f64) -> bool {
        self.p_vm <= target && self.p_va <= target && self.p_pf <= target && self.p_qf <= target
    }
}

/// Full evaluation artifact for one trained model on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub v_loss: f64,
    pub p_vm: f64,
    pub p_va: f64,
    pub p_pf: f64,
    pub p_qf: f64,
    /// Epochs the producing training run executed (0 when untrained).
    pub n_epoch: usize,
    pub thresholds: AccuracyThresholds,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn from_indexes(indexes: IndexReport, n_epoch: usize, thresholds: AccuracyThresholds, n_samples: usize) -> Self {
        Self {
            v_loss: indexes.v_loss,
            p_vm: indexes.p_vm,
            p_va: indexes.p_va,
            p_pf: indexes.p_pf,
            p_qf: indexes.p_qf,
            n_epoch,
            thresholds,
            n_samples,
        }
    }
}

/// Evaluate the accuracy indexes of `network` on one split.
///
/// `x` and `y` are normalized (features × samples) matrices; labels are
/// denormalized with `y_norm`, predictions likewise, and branch flows are
/// recomputed from both voltage solutions so the flow indexes measure the
/// model end to end rather than against stored flow labels.
pub fn compute_indexes(
    network: &Network,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    y_norm: &Normalizer,
    grid: &PreparedGrid,
    thresholds: &AccuracyThresholds,
) -> IndexReport {
    let n_bus = grid.n_bus;
    let n_samples = x.ncols();
    let y_hat = network.forward(x);

    // Split loss on normalized outputs: (1/2m)·Σ(ŷ − y)².
    let mut sq_sum = 0.0;
    for (a, b) in y_hat.iter().zip(y.iter()) {
        let d = a - b;
        sq_sum += d * d;
    }
    let v_loss = sq_sum / (2.0 * n_samples.max(1) as f64);

    let pred_raw = y_norm.invert(&y_hat.view());
    let label_raw = y_norm.invert(y);

    let mut vm_exceed = 0usize;
    let mut va_exceed = 0usize;
    for s in 0..n_samples {
        for i in 0..n_bus {
            if (pred_raw[(i, s)] - label_raw[(i, s)]).abs() > thresholds.vm_pu {
                vm_exceed += 1;
            }
            if (pred_raw[(n_bus + i, s)] - label_raw[(n_bus + i, s)]).abs() > thresholds.va_rad {
                va_exceed += 1;
            }
        }
    }

    let split_vt = |raw: &ndarray::Array2<f64>| {
        let v = raw.slice(ndarray::s![..n_bus, ..]).to_owned();
        let t = raw.slice(ndarray::s![n_bus.., ..]).to_owned();
        (v, t)
    };
    let (v_pred, t_pred) = split_vt(&pred_raw);
    let (v_label, t_label) = split_vt(&label_raw);
    let (pf_pred, qf_pred) = flows::branch_flows_batch(&grid.branches, &v_pred, &t_pred);
    let (pf_label, qf_label) = flows::branch_flows_batch(&grid.branches, &v_label, &t_label);
    let flow_threshold_pu = thresholds.flow_mw / grid.base_mva;
    let mut pf_exceed = 0usize;
    let mut qf_exceed = 0usize;
    for (a, b) in pf_pred.iter().zip(pf_label.iter()) {
        if (a - b).abs() > flow_threshold_pu {
            pf_exceed += 1;
        }
    }
    for (a, b) in qf_pred.iter().zip(qf_label.iter()) {
        if (a - b).abs() > flow_threshold_pu {
            qf_exceed += 1;
        }
    }

    let bus_entries = (n_bus * n_samples).max(1) as f64;
    let branch_entries = (grid.n_branch() * n_samples).max(1) as f64;
    IndexReport {
        v_loss,
        p_vm: vm_exceed as f64 / bus_entries,
        p_va: va_exceed as f64 / bus_entries,
        p_pf: pf_exceed as f64 / branch_entries,
        p_qf: qf_exceed as f64 / branch_entries,
    }
}
