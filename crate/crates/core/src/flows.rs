//! Branch power flows through series admittances and their closed-form
//! sensitivities to bus voltage magnitudes and angles.
//!
//! For a branch with series admittance `g + jb` from bus `i` to bus `j`,
//! with `θ = θ_i − θ_j`:
//!
//! ```text
//! P_ij =  g·(V_i² − V_i V_j cos θ) − b·V_i V_j sin θ
//! Q_ij = −b·(V_i² − V_i V_j cos θ) − g·V_i V_j sin θ
//! ```
//!
//! The receiving-end flow is the same formula with endpoints swapped.
//! Sensitivities are exact partial derivatives of these expressions; both
//! flows depend on the angles only through the difference, so
//! `∂/∂θ_j = −∂/∂θ_i` holds identically.

use ndarray::Array2;

use crate::grid::SeriesBranch;

/// Sending-end active and reactive flow of one branch.
pub fn flow_pair(br: &SeriesBranch, v_i: f64, v_j: f64, theta_ij: f64) -> (f64, f64) {
    let (sin, cos) = theta_ij.sin_cos();
    let vivj = v_i * v_j;
    let p = br.g * (v_i * v_i - vivj * cos) - br.b * vivj * sin;
    let q = -br.b * (v_i * v_i - vivj * cos) - br.g * vivj * sin;
    (p, q)
}

/// Sending-end flows of every branch for one operating point.
/// Returns `(p, q)` in branch order.
pub fn branch_flows(branches: &[SeriesBranch], v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(branches.len());
    let mut q = Vec::with_capacity(branches.len());
    for br in branches {
        let (pf, qf) = flow_pair(br, v[br.from], v[br.to], theta[br.from] - theta[br.to]);
        p.push(pf);
        q.push(qf);
    }
    (p, q)
}

/// Batched sending-end flows: `v` and `theta` are `(n_bus, m)` matrices with
/// one operating point per column; outputs are `(n_branch, m)`.
pub fn branch_flows_batch(
    branches: &[SeriesBranch],
    v: &Array2<f64>,
    theta: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let m = v.ncols();
    let mut p = Array2::zeros((branches.len(), m));
    let mut q = Array2::zeros((branches.len(), m));
    for (k, br) in branches.iter().enumerate() {
        for s in 0..m {
            let (pf, qf) = flow_pair(
                br,
                v[(br.from, s)],
                v[(br.to, s)],
                theta[(br.from, s)] - theta[(br.to, s)],
            );
            p[(k, s)] = pf;
            q[(k, s)] = qf;
        }
    }
    (p, q)
}

/// Exact partial derivatives of one branch's sending-end flows with respect
/// to the sending/receiving voltage magnitudes and the sending angle.
/// Angle-difference symmetry gives the receiving-angle partials for free:
/// `∂P/∂θ_j = −dp_dth_i`, `∂Q/∂θ_j = −dq_dth_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchSense {
    pub dp_dth_i: f64,
    pub dp_dv_i: f64,
    pub dp_dv_j: f64,
    pub dq_dth_i: f64,
    pub dq_dv_i: f64,
    pub dq_dv_j: f64,
}

impl BranchSense {
    /// `∂P/∂θ_j`, exactly `−∂P/∂θ_i` (flows depend on the angle difference).
    pub fn dp_dth_j(&self) -> f64 {
        -self.dp_dth_i
    }

    /// `∂Q/∂θ_j`, exactly `−∂Q/∂θ_i`.
    pub fn dq_dth_j(&self) -> f64 {
        -self.dq_dth_i
    }
}

/// Evaluate all six closed-form partials at one operating point.
pub fn branch_sensitivities(br: &SeriesBranch, v_i: f64, v_j: f64, theta_ij: f64) -> BranchSense {
    let (sin, cos) = theta_ij.sin_cos();
    let vivj = v_i * v_j;
    BranchSense {
        dp_dth_i: br.g * vivj * sin - br.b * vivj * cos,
        dp_dv_i: br.g * (2.0 * v_i - v_j * cos) - br.b * v_j * sin,
        dp_dv_j: -br.g * v_i * cos - br.b * v_i * sin,
        dq_dth_i: -br.b * vivj * sin - br.g * vivj * cos,
        dq_dv_i: -br.b * (2.0 * v_i - v_j * cos) - br.g * v_j * sin,
        dq_dv_j: br.b * v_i * cos - br.g * v_i * sin,
    }
}
