//! Model training: loss variants, the physics-residual gradient terms,
//! the M0–M6 mode lattice, RMSProp, and the mini-batch epoch loop.
//!
//! ## Gradient conventions
//!
//! All per-batch error terms (`d1`, `d2`, `d3`) are gradients of
//! `m · loss` with respect to the network's normalized output matrix
//! (features × batch); the `1/m` factor enters once, in the parameter
//! gradients `dw = δ·aᵀ/m` and `db = row-mean(δ)`.
//!
//! * `d1 = Ŷ − Y`: gradient of the standard half-MSE fitting loss.
//! * `d2`, `d3`: gradients of the active/reactive branch-flow penalty,
//!   obtained by scattering per-branch flow residuals through the flow
//!   sensitivities evaluated at the *predicted* denormalized operating
//!   point, then mapping back to normalized outputs via the per-row
//!   output standard deviations.
//! * The guided modes blend them as
//!   `dL = d1 + α·(d2+d3)|V-rows + β·(d2+d3)|θ-rows`,
//!   with `α`, `β` recomputed each batch so the guidance magnitude stays
//!   at half the fitting-gradient magnitude.
//!
//! The published derivation of the reduced modes is notationally
//! inconsistent (its angle-row formula nests the fitting term inside
//! itself); this implementation follows the stated intent: magnitude
//! rows keep the fitting gradient only, angle rows keep the fitting
//! gradient plus the retained scaled penalty terms.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::flows::{branch_sensitivities, flow_pair};
use crate::grid::{PreparedGrid, SeriesBranch};
use crate::metrics::{compute_indexes, AccuracyThresholds, IndexReport};
use crate::nn::{relu_derivative, Activation, InitScheme, Model, ModelMeta, Network};
use crate::sampling::{Dataset, Normalizer};

/// Training mode: which output activation, initialization scheme, and
/// physics-guidance terms are active.
///
/// | mode | output | init               | guidance                          |
/// |------|--------|--------------------|-----------------------------------|
/// | M0   | ReLU   | fan-in             | none                              |
/// | M1   | linear | fan-in             | none                              |
/// | M2   | linear | fan-in             | full (V and θ rows, P and Q)      |
/// | M3   | linear | variance-balanced  | none                              |
/// | M4   | linear | variance-balanced  | full (V and θ rows, P and Q)      |
/// | M5   | linear | variance-balanced  | θ rows only, P and Q residuals    |
/// | M6   | linear | variance-balanced  | θ rows only, P residuals only     |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::M0,
        Mode::M1,
        Mode::M2,
        Mode::M3,
        Mode::M4,
        Mode::M5,
        Mode::M6,
    ];

    pub fn output_activation(self) -> Activation {
        match self {
            Mode::M0 => Activation::Relu,
            _ => Activation::Linear,
        }
    }

    pub fn init_scheme(self) -> InitScheme {
        match self {
            Mode::M0 | Mode::M1 | Mode::M2 => InitScheme::He,
            _ => InitScheme::VarianceBalanced,
        }
    }

    pub fn penalty_plan(self) -> PenaltyPlan {
        match self {
            Mode::M2 | Mode::M4 => PenaltyPlan {
                v_rows: true,
                th_active: true,
                th_reactive: true,
            },
            Mode::M5 => PenaltyPlan {
                v_rows: false,
                th_active: true,
                th_reactive: true,
            },
            Mode::M6 => PenaltyPlan {
                v_rows: false,
                th_active: true,
                th_reactive: false,
            },
            _ => PenaltyPlan::NONE,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", *self as u8)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "M0" => Ok(Mode::M0),
            "M1" => Ok(Mode::M1),
            "M2" => Ok(Mode::M2),
            "M3" => Ok(Mode::M3),
            "M4" => Ok(Mode::M4),
            "M5" => Ok(Mode::M5),
            "M6" => Ok(Mode::M6),
            other => Err(format!("unknown mode '{other}' (expected M0..M6)")),
        }
    }
}

/// Which blocks of the penalty gradient a mode retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PenaltyPlan {
    /// Scatter flow residuals onto voltage-magnitude rows (α-scaled).
    pub v_rows: bool,
    /// Scatter active-power residuals onto angle rows (β-scaled).
    pub th_active: bool,
    /// Scatter reactive-power residuals onto angle rows (β-scaled).
    pub th_reactive: bool,
}

impl PenaltyPlan {
    pub const NONE: PenaltyPlan = PenaltyPlan {
        v_rows: false,
        th_active: false,
        th_reactive: false,
    };

    pub fn any(self) -> bool {
        self.v_rows || self.th_active || self.th_reactive
    }

    /// Whether reactive flows must be evaluated at all.
    pub fn needs_reactive(self) -> bool {
        self.v_rows || self.th_reactive
    }
}

/// Stopping rule for the epoch loop. Exactly one protocol is chosen;
/// `max_epochs` always applies as the outer budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "protocol")]
pub enum StopProtocol {
    /// Run the full epoch budget.
    FixedEpochs,
    /// Stop after `patience` epochs without a new best validation loss;
    /// the returned model is the best-validation snapshot.
    EarlyStop { patience: usize },
    /// Stop as soon as all four accuracy indexes on the validation split
    /// are at or below `target`; checked every `check_interval` epochs.
    /// The returned model is the passing iterate itself.
    StopOnAccuracy { target: f64, check_interval: usize },
}

impl Default for StopProtocol {
    fn default() -> Self {
        StopProtocol::EarlyStop { patience: 20 }
    }
}

/// Hyperparameters and protocol for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Hidden layer widths; input/output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// RMSProp accumulator decay ρ.
    pub decay_rate: f64,
    /// RMSProp denominator guard ε.
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop: StopProtocol,
    pub thresholds: AccuracyThresholds,
    /// Master seed: weight initialization and all epoch shuffles derive
    /// from it deterministically.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::M4,
            hidden: vec![100, 100, 100],
            learning_rate: 1e-3,
            decay_rate: 0.99,
            epsilon: 1e-8,
            batch_size: 100,
            max_epochs: 1000,
            stop: StopProtocol::default(),
            thresholds: AccuracyThresholds::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(TrainError::BadConfig(
                "learning_rate and epsilon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.decay_rate) {
            return Err(TrainError::BadConfig("decay_rate must be in [0, 1)".into()));
        }
        if let StopProtocol::StopOnAccuracy { check_interval, .. } = self.stop {
            if check_interval == 0 {
                return Err(TrainError::BadConfig("check_interval must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Why the epoch loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Accuracy,
}

/// One epoch's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean standard (fitting) loss over this epoch's batches.
    pub train_loss: f64,
    /// Standard loss on the full validation split after the epoch.
    pub val_loss: f64,
    /// Mean active-flow penalty over batches (guided modes only).
    pub j_p: Option<f64>,
    /// Mean reactive-flow penalty over batches (guided modes that
    /// evaluate reactive flows only).
    pub j_q: Option<f64>,
    /// Mean magnitude-row guidance weight over batches.
    pub alpha: Option<f64>,
    /// Mean angle-row guidance weight over batches.
    pub beta: Option<f64>,
    /// Wall-clock seconds this epoch took.
    pub seconds: f64,
}

/// Full training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epochs executed.
    pub n_epoch: usize,
    /// Best validation loss seen (f64::INFINITY if no epoch ran).
    pub best_val_loss: f64,
    /// Epoch at which the accuracy protocol fired, if it did.
    pub accuracy_epoch: Option<usize>,
}

impl TrainHistory {
    /// CSV with one row per epoch. Optional fields render empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,J_P,J_Q,alpha,beta,seconds\n");
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{},{},{},{},{:.6}\n",
                r.epoch,
                r.train_loss,
                r.val_loss,
                fmt_opt(r.j_p),
                fmt_opt(r.j_q),
                fmt_opt(r.alpha),
                fmt_opt(r.beta),
                r.seconds
            ));
        }
        out
    }
}

/// Standard fitting loss: `(1/2m)·Σ(ŷ − y)²` over a batch.
pub fn standard_loss(y_hat: &ArrayView2<f64>, y: &ArrayView2<f64>) -> f64 {
    let m = y.ncols().max(1) as f64;
    let mut sum = 0.0;
    for (a, b) in y_hat.iter().zip(y.iter()) {
        let d = a - b;
        sum += d * d;
    }
    sum / (2.0 * m)
}

/// Everything the penalty computation needs besides the iterate: branch
/// structure and the three normalizers tying raw and normalized spaces
/// together, plus the normalized flow labels of the batch.
pub struct PenaltyContext<'a> {
    pub branches: &'a [SeriesBranch],
    pub n_bus: usize,
    pub y_norm: &'a Normalizer,
    pub pbr_norm: &'a Normalizer,
    pub qbr_norm: &'a Normalizer,
}

/// Raw penalty gradients (unscaled by α/β) and penalty values for one
/// batch, evaluated at the predicted operating point.
pub struct PenaltyTerms {
    /// `d2 + d3` (features × batch); only rows the plan retains are
    /// populated.
    pub grad: Array2<f64>,
    pub j_p: f64,
    pub j_q: Option<f64>,
}

/// Normalize one flow row the way [`Normalizer::apply`] would.
fn normalize_scalar(raw: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (raw - mean) / std
    } else {
        raw - mean
    }
}

/// Evaluate the branch-flow penalty and its output-space gradient at the
/// predicted (denormalized) voltages.
///
/// For every branch the residual between the predicted normalized flow
/// and its label is scattered onto the retained output rows through the
/// flow sensitivities, times the chain-rule factor `std(output row)` from
/// denormalization. Degenerate output rows (std = 0) therefore receive no
/// gradient: their denormalized value is pinned to the mean.
pub fn penalty_terms(
    ctx: &PenaltyContext<'_>,
    y_hat: &ArrayView2<f64>,
    p_label: &ArrayView2<f64>,
    q_label: &ArrayView2<f64>,
    plan: PenaltyPlan,
) -> PenaltyTerms {
    let m = y_hat.ncols();
    let n_bus = ctx.n_bus;
    let raw = ctx.y_norm.invert(y_hat);
    let mut grad = Array2::zeros(y_hat.raw_dim());
    let mut j_p_sum = 0.0;
    let mut j_q_sum = 0.0;
    let needs_q = plan.needs_reactive();

    for (k, br) in ctx.branches.iter().enumerate() {
        let (i, j) = (br.from, br.to);
        let (p_mu, p_sd) = (ctx.pbr_norm.mean[k], ctx.pbr_norm.std[k]);
        let (q_mu, q_sd) = (ctx.qbr_norm.mean[k], ctx.qbr_norm.std[k]);
        // d(normalized flow)/d(raw flow) under the apply() convention.
        let p_scale = if p_sd > 0.0 { 1.0 / p_sd } else { 1.0 };
        let q_scale = if q_sd > 0.0 { 1.0 / q_sd } else { 1.0 };
        let sd_v_i = ctx.y_norm.std[i];
        let sd_v_j = ctx.y_norm.std[j];
        let sd_th_i = ctx.y_norm.std[n_bus + i];
        let sd_th_j = ctx.y_norm.std[n_bus + j];

        for s in 0..m {
            let v_i = raw[(i, s)];
            let v_j = raw[(j, s)];
            let th_ij = raw[(n_bus + i, s)] - raw[(n_bus + j, s)];
            let (p_hat, q_hat) = flow_pair(br, v_i, v_j, th_ij);
            let sense = branch_sensitivities(br, v_i, v_j, th_ij);

            let p_resid = normalize_scalar(p_hat, p_mu, p_sd) - p_label[(k, s)];
            j_p_sum += p_resid * p_resid;
            // Gradient of ½·resid² with respect to the raw flow.
            let rp = p_resid * p_scale;
            if plan.th_active {
                grad[(n_bus + i, s)] += rp * sense.dp_dth_i * sd_th_i;
                grad[(n_bus + j, s)] -= rp * sense.dp_dth_i * sd_th_j;
            }
            if plan.v_rows {
                grad[(i, s)] += rp * sense.dp_dv_i * sd_v_i;
                grad[(j, s)] += rp * sense.dp_dv_j * sd_v_j;
            }

            if needs_q {
                let q_resid = normalize_scalar(q_hat, q_mu, q_sd) - q_label[(k, s)];
                j_q_sum += q_resid * q_resid;
                let rq = q_resid * q_scale;
                if plan.th_reactive {
                    grad[(n_bus + i, s)] += rq * sense.dq_dth_i * sd_th_i;
                    grad[(n_bus + j, s)] -= rq * sense.dq_dth_i * sd_th_j;
                }
                if plan.v_rows {
                    grad[(i, s)] += rq * sense.dq_dv_i * sd_v_i;
                    grad[(j, s)] += rq * sense.dq_dv_j * sd_v_j;
                }
            }
        }
    }

    let denom = 2.0 * m.max(1) as f64;
    PenaltyTerms {
        grad,
        j_p: j_p_sum / denom,
        j_q: needs_q.then_some(j_q_sum / denom),
    }
}

/// Guidance weights: half the ratio of the largest fitting-gradient entry
/// to the largest penalty-gradient entry, per output block. Zero when the
/// block's penalty gradient vanishes.
pub fn guidance_weights(
    d1: &Array2<f64>,
    penalty_grad: &Array2<f64>,
    n_bus: usize,
    plan: PenaltyPlan,
) -> (f64, f64) {
    let block_max = |a: &Array2<f64>, rows: std::ops::Range<usize>| -> f64 {
        a.slice(s![rows, ..])
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    };
    let alpha = if plan.v_rows {
        let denom = block_max(penalty_grad, 0..n_bus);
        if denom > 0.0 {
            0.5 * block_max(d1, 0..n_bus) / denom
        } else {
            0.0
        }
    } else {
        0.0
    };
    let n_out = d1.nrows();
    let beta = if plan.th_active || plan.th_reactive {
        let denom = block_max(penalty_grad, n_bus..n_out);
        if denom > 0.0 {
            0.5 * block_max(d1, n_bus..n_out) / denom
        } else {
            0.0
        }
    } else {
        0.0
    };
    (alpha, beta)
}

/// Per-batch scalar diagnostics of one gradient evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub loss: f64,
    pub j_p: Option<f64>,
    pub j_q: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

/// Full parameter gradient of one batch.
pub struct BatchGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub stats: BatchStats,
}

/// Forward + backward pass of one batch under `plan`.
///
/// `frozen_weights`: `Some((α, β))` freezes the guidance weights (used by
/// gradient verification, where the adaptive weights must be held
/// constant); `None` recomputes them from this batch.
pub fn batch_gradients(
    network: &Network,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    p_label: &ArrayView2<f64>,
    q_label: &ArrayView2<f64>,
    ctx: &PenaltyContext<'_>,
    plan: PenaltyPlan,
    frozen_weights: Option<(f64, f64)>,
) -> BatchGradients {
    let m = x.ncols().max(1) as f64;
    let trace = network.forward_trace(x);
    let y_hat = trace.output();
    let loss = standard_loss(&y_hat.view(), y);

    // d1: gradient of m·(standard loss) w.r.t. the output matrix.
    let mut d_out = y_hat - y;

    let stats;
    if plan.any() {
        let penalty = penalty_terms(ctx, &y_hat.view(), p_label, q_label, plan);
        let (alpha, beta) = match frozen_weights {
            Some(ab) => ab,
            None => guidance_weights(&d_out, &penalty.grad, ctx.n_bus, plan),
        };
        let n_out = d_out.nrows();
        if plan.v_rows && alpha != 0.0 {
            let mut v_block = d_out.slice_mut(s![..ctx.n_bus, ..]);
            v_block += &(&penalty.grad.slice(s![..ctx.n_bus, ..]) * alpha);
        }
        if (plan.th_active || plan.th_reactive) && beta != 0.0 {
            let mut th_block = d_out.slice_mut(s![ctx.n_bus..n_out, ..]);
            th_block += &(&penalty.grad.slice(s![ctx.n_bus..n_out, ..]) * beta);
        }
        stats = BatchStats {
            loss,
            j_p: Some(penalty.j_p),
            j_q: penalty.j_q,
            alpha: plan.v_rows.then_some(alpha),
            beta: Some(beta),
        };
    } else {
        stats = BatchStats {
            loss,
            j_p: None,
            j_q: None,
            alpha: None,
            beta: None,
        };
    }

    // Backpropagation. Output-layer delta includes the output activation
    // derivative (identity for linear, step for ReLU outputs).
    let n_layers = network.layers.len();
    let mut weights = vec![Array2::zeros((0, 0)); n_layers];
    let mut biases = vec![Array1::zeros(0); n_layers];
    let mut delta = d_out;
    if network.layers[n_layers - 1].activation == Activation::Relu {
        delta.zip_mut_with(&trace.pre[n_layers - 1], |d, &z| *d *= relu_derivative(z));
    }
    for l in (0..n_layers).rev() {
        weights[l] = delta.dot(&trace.post[l].t()) / m;
        biases[l] = delta.mean_axis(Axis(1)).expect("batch nonempty");
        if l > 0 {
            let mut back = network.layers[l].weights.t().dot(&delta);
            back.zip_mut_with(&trace.pre[l - 1], |d, &z| *d *= relu_derivative(z));
            delta = back;
        }
    }

    BatchGradients {
        weights,
        biases,
        stats,
    }
}

/// The frozen-weights objective whose gradient `batch_gradients` computes
/// for a guided mode, used by finite-difference verification.
///
/// The adaptive weights (α, β) and the "other block's" predictions are
/// held fixed at the baseline iterate: the α-term varies only through the
/// magnitude rows (angles pinned to `frozen` predictions) and the β-term
/// varies only through the angle rows. At the baseline iterate its
/// gradient equals the guided training gradient exactly.
#[allow(clippy::too_many_arguments)]
pub fn check_loss(
    network: &Network,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    p_label: &ArrayView2<f64>,
    q_label: &ArrayView2<f64>,
    ctx: &PenaltyContext<'_>,
    plan: PenaltyPlan,
    alpha: f64,
    beta: f64,
    frozen: &Array2<f64>,
) -> f64 {
    let y_hat = network.forward(x);
    let mut total = standard_loss(&y_hat.view(), y);
    if !plan.any() {
        return total;
    }
    let n_bus = ctx.n_bus;
    let n_out = y_hat.nrows();

    // Penalty value on a mixed prediction: selected rows from `live`,
    // the rest from the frozen baseline.
    let mixed_penalty = |v_from_live: bool, plan_eval: PenaltyPlan| -> PenaltyTerms {
        let mut mixed = frozen.clone();
        if v_from_live {
            mixed
                .slice_mut(s![..n_bus, ..])
                .assign(&y_hat.slice(s![..n_bus, ..]));
        } else {
            mixed
                .slice_mut(s![n_bus..n_out, ..])
                .assign(&y_hat.slice(s![n_bus..n_out, ..]));
        }
        penalty_terms(ctx, &mixed.view(), p_label, q_label, plan_eval)
    };

    if plan.v_rows && alpha != 0.0 {
        // Magnitude-row term: both flow components contribute.
        let t = mixed_penalty(true, plan);
        total += alpha * (t.j_p + t.j_q.unwrap_or(0.0));
    }
    if (plan.th_active || plan.th_reactive) && beta != 0.0 {
        let t = mixed_penalty(false, plan);
        let mut j = 0.0;
        if plan.th_active {
            j += t.j_p;
        }
        if plan.th_reactive {
            j += t.j_q.unwrap_or(0.0);
        }
        total += beta * j;
    }
    total
}

/// RMSProp accumulators, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct RmspropState {
    pub r_weights: Vec<Array2<f64>>,
    pub r_biases: Vec<Array1<f64>>,
}

impl RmspropState {
    pub fn new(network: &Network) -> Self {
        Self {
            r_weights: network
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            r_biases: network
                .layers
                .iter()
                .map(|l| Array1::zeros(l.biases.raw_dim()))
                .collect(),
        }
    }
}

/// One RMSProp update: the accumulator moves first
/// (`R ← ρR + (1−ρ)g⊙g`), then the freshly updated accumulator scales the
/// step `Δ = η·g/√(R+ε)`.
pub fn rmsprop_step(
    network: &mut Network,
    state: &mut RmspropState,
    grads: &BatchGradients,
    learning_rate: f64,
    decay_rate: f64,
    epsilon: f64,
) {
    for (l, layer) in network.layers.iter_mut().enumerate() {
        let r = &mut state.r_weights[l];
        r.zip_mut_with(&grads.weights[l], |r, &g| {
            *r = decay_rate * *r + (1.0 - decay_rate) * g * g;
        });
        ndarray::Zip::from(&mut layer.weights)
            .and(&grads.weights[l])
            .and(&*r)
            .for_each(|w, &g, &r| *w -= learning_rate * g / (r + epsilon).sqrt());

        let rb = &mut state.r_biases[l];
        rb.zip_mut_with(&grads.biases[l], |r, &g| {
            *r = decay_rate * *r + (1.0 - decay_rate) * g * g;
        });
        ndarray::Zip::from(&mut layer.biases)
            .and(&grads.biases[l])
            .and(&*rb)
            .for_each(|b, &g, &r| *b -= learning_rate * g / (r + epsilon).sqrt());
    }
}

/// Deterministic Fisher–Yates shuffle of `0..n` driven by the given RNG.
fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Train a model on the dataset's training split.
///
/// Deterministic by construction: weight initialization draws from stream
/// 0 of the master seed, the epoch-`e` shuffle from stream `e + 1`; the
/// loop itself is single-threaded.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    grid: &PreparedGrid,
) -> Result<(Model, TrainHistory), TrainError> {
    config.validate()?;
    if dataset.n_bus != grid.n_bus || dataset.n_branch != grid.n_branch() {
        return Err(TrainError::Shape(format!(
            "dataset is for {} buses / {} branches, case has {} / {}",
            dataset.n_bus,
            dataset.n_branch,
            grid.n_bus,
            grid.n_branch()
        )));
    }

    let n_in = dataset.x.nrows();
    let n_out = dataset.y.nrows();
    let mut sizes = Vec::with_capacity(config.hidden.len() + 2);
    sizes.push(n_in);
    sizes.extend_from_slice(&config.hidden);
    sizes.push(n_out);

    let mut init_rng = ChaCha20Rng::seed_from_u64(config.seed);
    init_rng.set_stream(0);
    let mut network = Network::init(
        &sizes,
        config.mode.init_scheme(),
        config.mode.output_activation(),
        &mut init_rng,
    );
    let mut optimizer = RmspropState::new(&network);
    let plan = config.mode.penalty_plan();
    let ctx = PenaltyContext {
        branches: &grid.branches,
        n_bus: grid.n_bus,
        y_norm: &dataset.y_norm,
        pbr_norm: &dataset.pbr_norm,
        qbr_norm: &dataset.qbr_norm,
    };

    let train_range = dataset.train_range();
    let val_range = dataset.val_range();
    let n_train = train_range.len();
    let x_train = dataset.x.slice(s![.., train_range.clone()]);
    let y_train = dataset.y.slice(s![.., train_range.clone()]);
    let p_train = dataset.p_br.slice(s![.., train_range.clone()]);
    let q_train = dataset.q_br.slice(s![.., train_range.clone()]);
    let x_val = dataset.x.slice(s![.., val_range.clone()]);
    let y_val = dataset.y.slice(s![.., val_range.clone()]);

    let mut history = TrainHistory {
        epochs: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        n_epoch: 0,
        best_val_loss: f64::INFINITY,
        accuracy_epoch: None,
    };
    let mut best_snapshot: Option<Network> = None;
    let mut epochs_since_best = 0usize;
    // Scratch buffers reused across batches.
    let mut bx = Array2::zeros((n_in, config.batch_size));
    let mut by = Array2::zeros((n_out, config.batch_size));
    let mut bp = Array2::zeros((dataset.n_branch, config.batch_size));
    let mut bq = Array2::zeros((dataset.n_branch, config.batch_size));

    'epochs: for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        let order = shuffled_indices(n_train, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut jp_sum = 0.0;
        let mut jq_sum = 0.0;
        let mut alpha_sum = 0.0;
        let mut beta_sum = 0.0;
        let mut n_batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            // The trailing short batch (if any) is processed at its own
            // size; gradients stay correctly normalized by that size.
            let bsz = chunk.len();
            for (col, &src) in chunk.iter().enumerate() {
                bx.column_mut(col).assign(&x_train.column(src));
                by.column_mut(col).assign(&y_train.column(src));
                if plan.any() {
                    bp.column_mut(col).assign(&p_train.column(src));
                    bq.column_mut(col).assign(&q_train.column(src));
                }
            }
            let grads = batch_gradients(
                &network,
                &bx.slice(s![.., ..bsz]),
                &by.slice(s![.., ..bsz]),
                &bp.slice(s![.., ..bsz]),
                &bq.slice(s![.., ..bsz]),
                &ctx,
                plan,
                None,
            );
            if !grads.stats.loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += grads.stats.loss;
            jp_sum += grads.stats.j_p.unwrap_or(0.0);
            jq_sum += grads.stats.j_q.unwrap_or(0.0);
            alpha_sum += grads.stats.alpha.unwrap_or(0.0);
            beta_sum += grads.stats.beta.unwrap_or(0.0);
            n_batches += 1;
            rmsprop_step(
                &mut network,
                &mut optimizer,
                &grads,
                config.learning_rate,
                config.decay_rate,
                config.epsilon,
            );
        }

        let nb = n_batches.max(1) as f64;
        let val_pred = network.forward(&x_val);
        let val_loss = standard_loss(&val_pred.view(), &y_val);
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            best_snapshot = Some(network.clone());
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }

        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / nb,
            val_loss,
            j_p: plan.any().then_some(jp_sum / nb),
            j_q: plan.needs_reactive().then_some(jq_sum / nb),
            alpha: plan.v_rows.then_some(alpha_sum / nb),
            beta: plan.any().then_some(beta_sum / nb),
            seconds: started.elapsed().as_secs_f64(),
        });
        history.n_epoch = epoch;

        match config.stop {
            StopProtocol::FixedEpochs => {}
            StopProtocol::EarlyStop { patience } => {
                if epochs_since_best >= patience {
                    history.stop_reason = StopReason::Patience;
                    break 'epochs;
                }
            }
            StopProtocol::StopOnAccuracy {
                target,
                check_interval,
            } => {
                if epoch % check_interval == 0 {
                    let report = compute_indexes(
                        &network,
                        &x_val,
                        &y_val,
                        &dataset.y_norm,
                        grid,
                        &config.thresholds,
                    );
                    if report.all_within(target) {
                        history.stop_reason = StopReason::Accuracy;
                        history.accuracy_epoch = Some(epoch);
                        break 'epochs;
                    }
                }
            }
        }
    }

    // The accuracy protocol returns the passing iterate itself; every
    // other path returns the best-validation snapshot.
    let final_network = if history.stop_reason == StopReason::Accuracy {
        network
    } else {
        best_snapshot.unwrap_or(network)
    };

    let model = Model {
        network: final_network,
        x_norm: dataset.x_norm.clone(),
        y_norm: dataset.y_norm.clone(),
        meta: ModelMeta {
            case_name: dataset.case_name.clone(),
            mode: config.mode.to_string(),
            seed: config.seed,
        },
    };
    Ok((model, history))
}

/// Evaluate a trained network's accuracy indexes on one split of the
/// dataset ("val" or "test" by range).
pub fn evaluate_on_range(
    network: &Network,
    dataset: &Dataset,
    grid: &PreparedGrid,
    range: std::ops::Range<usize>,
    thresholds: &AccuracyThresholds,
) -> IndexReport {
    let x = dataset.x.slice(s![.., range.clone()]);
    let y = dataset.y.slice(s![.., range]);
    compute_indexes(network, &x, &y, &dataset.y_norm, grid, thresholds)
}
