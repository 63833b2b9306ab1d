//! End-to-end acceptance gate.
//!
//! One sequential test that exercises the full pipeline and prints one
//! PASS/FAIL line per criterion, then fails if any criterion failed.
//! The criteria, in order:
//!
//! 1. Gradient correctness: analytic backprop matches central finite
//!    differences of the frozen-weights objective for every mode M0-M6.
//! 2. Sensitivity correctness: branch-flow partial derivatives match
//!    finite differences of the flow equations; angle antisymmetry is
//!    exact.
//! 3. Solver correctness: two-bus closed form, 30-bus convergence, and
//!    Kirchhoff bus-balance reconstruction over a full dataset.
//! 4. Initialization: per-layer weight variances hit their targets and
//!    signal variance through a deep stack stays within a factor of 2.
//! 5. Desk-scale training study on the 30-bus case: (a) M4 reaches all
//!    four accuracy indexes <= 5%, (b) M4 stops in fewer epochs than M1,
//!    (c) M5 and M6 also reach <= 5%.
//! 6. Per-epoch cost ordering on a 118-bus-scale run:
//!    t(M1) < t(M6) <= t(M5) < t(M4), median over >= 20 epochs.
//! 7. Speedup: model-based PPF evaluation of 10,000 samples is >= 100x
//!    faster than the single-threaded Newton loop.
//! 8. Statistical fidelity: model-path PPF voltage-magnitude means within
//!    1e-3 p.u. of the solver-path means on the same draw.
//! 9. Determinism: datasets, training, and PPF statistics are
//!    bit-reproducible across runs and worker counts.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use gridflow::flows::{branch_sensitivities, flow_pair};
use gridflow::grid::{
    Branch, Bus, BusKind, ImportOptions, NetworkCase, PreparedGrid, SeriesBranch,
};
use gridflow::metrics::AccuracyThresholds;
use gridflow::nn::{init_std, Activation, ForwardTrace, InitScheme, Model, Network};
use gridflow::powerflow::{bus_injections, solve, SolverSettings};
use gridflow::ppf::{run_ppf, PpfEngine, PpfStatistics};
use gridflow::sampling::{
    build_dataset, BusUncertainty, Dataset, SplitSpec, Uncertainty, UncertaintySpec,
};
use gridflow::training::{
    batch_gradients, check_loss, evaluate_on_range, train, Mode, PenaltyContext, StopProtocol,
    StopReason, TrainConfig, TrainHistory,
};

/// Collects per-criterion outcomes and prints one line each.
struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Gate {
            failures: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {verdict} — {detail}");
        if !pass {
            self.failures.push(format!("{name} ({detail})"));
        }
    }
}

fn case_path(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../cases")
        .join(file)
}

fn load_grid(file: &str) -> PreparedGrid {
    let case = NetworkCase::load(&case_path(file), ImportOptions::default())
        .unwrap_or_else(|e| panic!("loading {file}: {e}"));
    PreparedGrid::new(&case).unwrap_or_else(|e| panic!("preparing {file}: {e}"))
}

fn load_spec(file: &str) -> UncertaintySpec {
    UncertaintySpec::load(&case_path(file)).unwrap_or_else(|e| panic!("loading {file}: {e}"))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values[values.len() / 2]
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness via central finite differences.
// ---------------------------------------------------------------------------

/// A 4-bus radial-plus-chord toy case used for the gradient checks.
fn toy_case() -> NetworkCase {
    let pq = |id: u32, p: f64, q: f64| Bus {
        id,
        kind: BusKind::Pq,
        p_load_mw: p,
        q_load_mvar: q,
        v_setpoint: 1.0,
        shunt_g: 0.0,
        shunt_b: 0.0,
    };
    let line = |from: u32, to: u32, r: f64, x: f64| Branch {
        from,
        to,
        r,
        x,
        b_charge: 0.0,
        tap: 0.0,
    };
    NetworkCase {
        name: "toy4".into(),
        base_mva: 100.0,
        buses: vec![
            Bus {
                id: 1,
                kind: BusKind::Slack,
                p_load_mw: 0.0,
                q_load_mvar: 0.0,
                v_setpoint: 1.02,
                shunt_g: 0.0,
                shunt_b: 0.0,
            },
            pq(2, 20.0, 6.0),
            pq(3, 15.0, 4.0),
            pq(4, 10.0, 2.0),
        ],
        branches: vec![
            line(1, 2, 0.02, 0.08),
            line(2, 3, 0.04, 0.12),
            line(1, 3, 0.03, 0.10),
            line(3, 4, 0.05, 0.15),
        ],
        gens: vec![],
    }
}

/// Uncertainty spec perturbing the three toy PQ loads.
fn toy_spec() -> UncertaintySpec {
    let entry = |bus: u32, p_mean: f64, q_mean: f64| BusUncertainty {
        bus,
        p: Some(Uncertainty::Normal {
            mean: p_mean,
            std: 0.15 * p_mean.abs(),
        }),
        q: Some(Uncertainty::Normal {
            mean: q_mean,
            std: 0.15 * q_mean.abs(),
        }),
    };
    UncertaintySpec {
        entries: vec![
            entry(2, -0.20, -0.06),
            entry(3, -0.15, -0.04),
            entry(4, -0.10, -0.02),
        ],
    }
}

/// Whether any ReLU pre-activation changes sign between two forward
/// traces. A central difference straddling such a kink is not a
/// derivative estimate, so those coordinates are excluded (and counted).
fn crosses_relu_kink(network: &Network, a: &ForwardTrace, b: &ForwardTrace) -> bool {
    network.layers.iter().enumerate().any(|(l, layer)| {
        layer.activation == Activation::Relu
            && a.pre[l]
                .iter()
                .zip(b.pre[l].iter())
                .any(|(&zp, &zm)| (zp > 0.0) != (zm > 0.0))
    })
}

/// Worst vector-relative deviation between the analytic gradient and a
/// central finite difference of the frozen-weights objective, over all
/// parameters of one random small network, plus the number of
/// kink-straddling coordinates that had to be excluded.
fn gradient_check_instance(
    grid: &PreparedGrid,
    dataset: &Dataset,
    mode: Mode,
    batch_start: usize,
    rng: &mut ChaCha20Rng,
) -> (f64, usize) {
    const STEP: f64 = 1e-6;
    const BATCH: usize = 6;

    let n_io = dataset.y.nrows();
    let sizes = [n_io, 10, 10, n_io];
    let mut network = Network::init(
        &sizes,
        mode.init_scheme(),
        mode.output_activation(),
        rng,
    );

    let cols = batch_start..batch_start + BATCH;
    let x = dataset.x.slice(s![.., cols.clone()]);
    let y = dataset.y.slice(s![.., cols.clone()]);
    let p_label = dataset.p_br.slice(s![.., cols.clone()]);
    let q_label = dataset.q_br.slice(s![.., cols]);
    let ctx = PenaltyContext {
        branches: &grid.branches,
        n_bus: grid.n_bus,
        y_norm: &dataset.y_norm,
        pbr_norm: &dataset.pbr_norm,
        qbr_norm: &dataset.qbr_norm,
    };
    let plan = mode.penalty_plan();

    // Analytic gradient with adaptive guidance weights, then freeze those
    // weights and the baseline prediction for the finite-difference pass.
    let grads = batch_gradients(&network, &x, &y, &p_label, &q_label, &ctx, plan, None);
    let alpha = grads.stats.alpha.unwrap_or(0.0);
    let beta = grads.stats.beta.unwrap_or(0.0);
    let frozen = network.forward(&x);

    let eval = |net: &Network| -> (f64, ForwardTrace) {
        let loss = check_loss(net, &x, &y, &p_label, &q_label, &ctx, plan, alpha, beta, &frozen);
        (loss, net.forward_trace(&x))
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut skipped = 0usize;
    let n_layers = network.layers.len();
    for l in 0..n_layers {
        let (rows, cols) = grads.weights[l].dim();
        for r in 0..rows {
            for c in 0..cols {
                let original = network.layers[l].weights[(r, c)];
                network.layers[l].weights[(r, c)] = original + STEP;
                let (plus, trace_plus) = eval(&network);
                network.layers[l].weights[(r, c)] = original - STEP;
                let (minus, trace_minus) = eval(&network);
                network.layers[l].weights[(r, c)] = original;
                if crosses_relu_kink(&network, &trace_plus, &trace_minus) {
                    skipped += 1;
                    continue;
                }
                analytic.push(grads.weights[l][(r, c)]);
                numeric.push((plus - minus) / (2.0 * STEP));
            }
        }
        for i in 0..grads.biases[l].len() {
            let original = network.layers[l].biases[i];
            network.layers[l].biases[i] = original + STEP;
            let (plus, trace_plus) = eval(&network);
            network.layers[l].biases[i] = original - STEP;
            let (minus, trace_minus) = eval(&network);
            network.layers[l].biases[i] = original;
            if crosses_relu_kink(&network, &trace_plus, &trace_minus) {
                skipped += 1;
                continue;
            }
            analytic.push(grads.biases[l][i]);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }

    let scale = numeric.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (&a, &n)| m.max((a - n).abs()));
    (worst / scale, skipped)
}

fn criterion_gradients(gate: &mut Gate) {
    const INSTANCES: usize = 20;
    const TOLERANCE: f64 = 1e-6;

    let case = toy_case();
    let grid = PreparedGrid::new(&case).expect("toy case prepares");
    let dataset = build_dataset(
        &grid,
        &toy_spec(),
        64,
        21,
        SplitSpec {
            train: 48,
            val: 8,
            test: 8,
        },
        &SolverSettings::default(),
    )
    .expect("toy dataset builds");

    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let mut worst_mode = Mode::M0;
    let mut total_skipped = 0usize;
    let mut total_coords = 0usize;
    for &mode in Mode::ALL.iter() {
        for instance in 0..INSTANCES {
            let start = (instance * 2) % (dataset.train - 6);
            let (err, skipped) = gradient_check_instance(&grid, &dataset, mode, start, &mut rng);
            if err > worst {
                worst = err;
                worst_mode = mode;
            }
            total_skipped += skipped;
            total_coords += 288; // 3 layers of [8,10,10,8]: weights + biases
        }
    }
    // The kink exclusion must stay negligible, or it could mask errors.
    let skip_budget = total_coords / 1000;
    gate.check(
        "1 (gradient correctness)",
        worst <= TOLERANCE && total_skipped <= skip_budget,
        format!(
            "worst relative deviation {worst:.3e} (mode {worst_mode}, {INSTANCES} instances \
             per mode, all modes, step 1e-6, tolerance {TOLERANCE:.0e}); \
             {total_skipped}/{total_coords} kink-straddling coordinates excluded"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: branch-flow sensitivity correctness.
// ---------------------------------------------------------------------------

fn criterion_sensitivities(gate: &mut Gate) {
    const POINTS: usize = 1000;
    const STEP: f64 = 1e-6;
    const TOLERANCE: f64 = 1e-6;

    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut antisymmetric = true;
    for _ in 0..POINTS {
        let branch = SeriesBranch {
            from: 0,
            to: 1,
            g: rng.gen_range(0.1..10.0),
            b: rng.gen_range(-30.0..-0.1),
        };
        let v_i = rng.gen_range(0.9..1.1);
        let v_j = rng.gen_range(0.9..1.1);
        let theta = rng.gen_range(-0.6..0.6);

        let sense = branch_sensitivities(&branch, v_i, v_j, theta);
        let analytic = [
            sense.dp_dth_i,
            sense.dp_dv_i,
            sense.dp_dv_j,
            sense.dq_dth_i,
            sense.dq_dv_i,
            sense.dq_dv_j,
        ];

        let central = |f: &dyn Fn(f64) -> (f64, f64)| -> (f64, f64) {
            let (p_plus, q_plus) = f(STEP);
            let (p_minus, q_minus) = f(-STEP);
            (
                (p_plus - p_minus) / (2.0 * STEP),
                (q_plus - q_minus) / (2.0 * STEP),
            )
        };
        let (dp_dth, dq_dth) = central(&|h| flow_pair(&branch, v_i, v_j, theta + h));
        let (dp_dvi, dq_dvi) = central(&|h| flow_pair(&branch, v_i + h, v_j, theta));
        let (dp_dvj, dq_dvj) = central(&|h| flow_pair(&branch, v_i, v_j + h, theta));
        let numeric = [dp_dth, dp_dvi, dp_dvj, dq_dth, dq_dvi, dq_dvj];

        let scale = numeric.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / scale);
        }

        // Antisymmetry of the angle partials must hold bit for bit.
        if sense.dp_dth_j() != -sense.dp_dth_i || sense.dq_dth_j() != -sense.dq_dth_i {
            antisymmetric = false;
        }
    }
    gate.check(
        "2 (sensitivity correctness)",
        worst <= TOLERANCE && antisymmetric,
        format!(
            "worst relative deviation {worst:.3e} over {POINTS} operating points, \
             angle antisymmetry exact: {antisymmetric}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: Newton solver correctness.
// ---------------------------------------------------------------------------

fn criterion_solver(gate: &mut Gate, grid30: &PreparedGrid, dataset30: &Dataset) {
    // (i) Two-bus fixture against the closed-form solution.
    let twobus = load_grid("twobus.json");
    let solution = solve(
        &twobus,
        &twobus.base_p_inj,
        &twobus.base_q_inj,
        &SolverSettings::default(),
    )
    .expect("two-bus case converges");
    let theta_err = (solution.theta[1] - (-0.050084)).abs();
    let v_err = (solution.v[1] - 0.998746).abs();
    let twobus_ok = theta_err <= 1e-6 && v_err <= 1e-6;

    // (ii) Full 30-bus base case: <= 10 iterations to <= 1e-8 p.u.
    let ieee30 = load_grid("ieee30.json");
    let base = solve(
        &ieee30,
        &ieee30.base_p_inj,
        &ieee30.base_q_inj,
        &SolverSettings::default(),
    )
    .expect("30-bus base case converges");
    let base_ok = base.iterations <= 10 && base.max_mismatch <= 1e-8;

    // (iii) Kirchhoff reconstruction: injections implied by every stored
    // dataset solution must match the sampled injections at every bus
    // where they were specified.
    let x_raw = dataset30.x_norm.invert(&dataset30.x.view());
    let y_raw = dataset30.y_norm.invert(&dataset30.y.view());
    let n_bus = grid30.n_bus;
    let mut worst_balance = 0.0f64;
    for col in 0..dataset30.n_samples() {
        let v: Vec<f64> = (0..n_bus).map(|i| y_raw[(i, col)]).collect();
        let theta: Vec<f64> = (0..n_bus).map(|i| y_raw[(n_bus + i, col)]).collect();
        let (p, q) = bus_injections(grid30, &v, &theta);
        for i in 0..n_bus {
            match grid30.kinds[i] {
                BusKind::Slack => {}
                BusKind::Pv => {
                    worst_balance = worst_balance.max((p[i] - x_raw[(i, col)]).abs());
                }
                BusKind::Pq => {
                    worst_balance = worst_balance.max((p[i] - x_raw[(i, col)]).abs());
                    worst_balance =
                        worst_balance.max((q[i] - x_raw[(n_bus + i, col)]).abs());
                }
            }
        }
    }
    let balance_ok = worst_balance <= 1e-8;

    gate.check(
        "3 (solver correctness)",
        twobus_ok && base_ok && balance_ok,
        format!(
            "two-bus deltas ({theta_err:.1e} rad, {v_err:.1e} p.u.) <= 1e-6; 30-bus base \
             case {} iterations, mismatch {:.1e}; worst bus-balance error {worst_balance:.1e} \
             over {} samples",
            base.iterations,
            base.max_mismatch,
            dataset30.n_samples()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: initialization variances and signal propagation.
// ---------------------------------------------------------------------------

fn empirical_variance(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut sq_sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        sq_sum += v * v;
        n += 1;
    }
    let mean = sum / n as f64;
    (sq_sum / n as f64 - mean * mean, n)
}

/// Largest relative deviation of per-layer empirical weight variance from
/// the scheme's target, over layers with at least `min_entries` weights.
fn layer_variance_deviation(
    scheme: InitScheme,
    sizes: &[usize],
    min_entries: usize,
    rng: &mut ChaCha20Rng,
) -> f64 {
    let network = Network::init(sizes, scheme, Activation::Linear, rng);
    let n_layers = network.layers.len();
    let mut worst = 0.0f64;
    for (l, layer) in network.layers.iter().enumerate() {
        if layer.weights.len() < min_entries {
            continue;
        }
        let (var, _) = empirical_variance(layer.weights.iter().copied());
        let target = init_std(scheme, l, n_layers, layer.weights.ncols(), layer.weights.nrows())
            .powi(2);
        worst = worst.max((var / target - 1.0).abs());
    }
    worst
}

/// Mean and 3-sigma half-width of the output/input variance ratio through
/// a 5-layer width-500 ReLU stack, over independent (weights, batch)
/// draws.
fn signal_propagation_band(scheme: InitScheme, rng: &mut ChaCha20Rng) -> (f64, f64) {
    const WIDTH: usize = 500;
    const DEPTH: usize = 5;
    const BATCHES: usize = 16;
    const BATCH_SAMPLES: usize = 100;

    let sizes = vec![WIDTH; DEPTH + 1];
    let mut ratios = Vec::with_capacity(BATCHES);
    for _ in 0..BATCHES {
        let network = Network::init(&sizes, scheme, Activation::Relu, rng);
        let x = Array2::from_shape_simple_fn((WIDTH, BATCH_SAMPLES), || {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let out = network.forward(&x.view());
        let (var_in, _) = empirical_variance(x.iter().copied());
        let (var_out, _) = empirical_variance(out.iter().copied());
        ratios.push(var_out / var_in);
    }
    let mean = ratios.iter().sum::<f64>() / BATCHES as f64;
    let var = ratios
        .iter()
        .map(|r| (r - mean) * (r - mean))
        .sum::<f64>()
        / (BATCHES - 1) as f64;
    let sem = (var / BATCHES as f64).sqrt();
    (mean, 3.0 * sem)
}

fn criterion_initialization(gate: &mut Gate) {
    let mut rng = ChaCha20Rng::seed_from_u64(99);

    // Per-layer weight variance within 5% of target for big layers.
    let he_dev = layer_variance_deviation(InitScheme::He, &[500, 500, 500], 10_000, &mut rng);
    let vb_dev = layer_variance_deviation(
        InitScheme::VarianceBalanced,
        &[200, 300, 300, 200],
        10_000,
        &mut rng,
    );
    let variance_ok = he_dev <= 0.05 && vb_dev <= 0.05;

    // Signal propagation through 5 width-500 ReLU layers: the variance
    // ratio must sit within a factor of 2 of the input variance with
    // 3-sigma confidence.
    let (he_ratio, he_half) = signal_propagation_band(InitScheme::He, &mut rng);
    let (vb_ratio, vb_half) = signal_propagation_band(InitScheme::VarianceBalanced, &mut rng);
    let in_band = |ratio: f64, half: f64| ratio - half > 0.5 && ratio + half < 2.0;
    let signal_ok = in_band(he_ratio, he_half) && in_band(vb_ratio, vb_half);

    gate.check(
        "4 (initialization)",
        variance_ok && signal_ok,
        format!(
            "worst layer-variance deviation: fan-in {:.2}%, variance-balanced {:.2}% \
             (<= 5%); 5-layer variance ratio: fan-in {he_ratio:.3} ± {he_half:.3}, \
             variance-balanced {vb_ratio:.3} ± {vb_half:.3} (both within [0.5, 2])",
            he_dev * 100.0,
            vb_dev * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale training study on the 30-bus case.
// ---------------------------------------------------------------------------

struct StudyRun {
    model: Model,
    history: TrainHistory,
    test_indexes: gridflow::metrics::IndexReport,
}

fn run_study_mode(mode: Mode, dataset: &Dataset, grid: &PreparedGrid) -> StudyRun {
    let config = TrainConfig {
        mode,
        hidden: vec![100, 100, 100],
        learning_rate: 1e-3,
        decay_rate: 0.99,
        epsilon: 1e-8,
        batch_size: 100,
        max_epochs: 1200,
        stop: StopProtocol::StopOnAccuracy {
            target: 0.05,
            check_interval: 5,
        },
        thresholds: AccuracyThresholds::default(),
        seed: 0,
    };
    let (model, history) = train(&config, dataset, grid).expect("training succeeds");
    let test_indexes = evaluate_on_range(
        &model.network,
        dataset,
        grid,
        dataset.test_range(),
        &config.thresholds,
    );
    StudyRun {
        model,
        history,
        test_indexes,
    }
}

fn index_summary(r: &gridflow::metrics::IndexReport) -> String {
    format!(
        "p_vm {:.4}, p_va {:.4}, p_pf {:.4}, p_qf {:.4}",
        r.p_vm, r.p_va, r.p_pf, r.p_qf
    )
}

fn criterion_training_study(
    gate: &mut Gate,
    dataset30: &Dataset,
    grid30: &PreparedGrid,
) -> Model {
    let m1 = run_study_mode(Mode::M1, dataset30, grid30);
    let m4 = run_study_mode(Mode::M4, dataset30, grid30);
    let m5 = run_study_mode(Mode::M5, dataset30, grid30);
    let m6 = run_study_mode(Mode::M6, dataset30, grid30);

    let reached = |run: &StudyRun| {
        run.history.stop_reason == StopReason::Accuracy && run.test_indexes.all_within(0.05)
    };

    gate.check(
        "5a (M4 reaches all indexes <= 5%)",
        reached(&m4),
        format!(
            "stopped on accuracy at epoch {} ({}), test split: {}",
            m4.history.n_epoch,
            m4.history.accuracy_epoch.map_or("never".into(), |e| e.to_string()),
            index_summary(&m4.test_indexes)
        ),
    );
    gate.check(
        "5b (M4 stops in fewer epochs than M1)",
        m4.history.stop_reason == StopReason::Accuracy && m4.history.n_epoch < m1.history.n_epoch,
        format!(
            "M4 stopped at epoch {} vs M1 at epoch {} (same seed, same stop rule; M1 test \
             split: {})",
            m4.history.n_epoch,
            m1.history.n_epoch,
            index_summary(&m1.test_indexes)
        ),
    );
    gate.check(
        "5c (M5 and M6 reach all indexes <= 5%)",
        reached(&m5) && reached(&m6),
        format!(
            "M5 stopped at epoch {} ({}); M6 stopped at epoch {} ({})",
            m5.history.n_epoch,
            index_summary(&m5.test_indexes),
            m6.history.n_epoch,
            index_summary(&m6.test_indexes)
        ),
    );
    m4.model
}

// ---------------------------------------------------------------------------
// Criterion 6: per-epoch cost ordering at 118-bus scale.
// ---------------------------------------------------------------------------

fn criterion_epoch_cost(gate: &mut Gate) {
    const EPOCHS_PER_RUN: usize = 25;
    const RUNS: usize = 3;

    let grid = load_grid("synth118.json");
    let spec = load_spec("specs/synth118_loads.json");
    let dataset = build_dataset(
        &grid,
        &spec,
        2900,
        11,
        SplitSpec {
            train: 2000,
            val: 400,
            test: 400,
        },
        &SolverSettings::default(),
    )
    .expect("118-bus dataset builds");

    let run = |mode: Mode, seed: u64| -> Vec<f64> {
        let config = TrainConfig {
            mode,
            max_epochs: EPOCHS_PER_RUN,
            stop: StopProtocol::FixedEpochs,
            seed,
            ..TrainConfig::default()
        };
        let (_, history) = train(&config, &dataset, &grid).expect("training succeeds");
        history.epochs.iter().map(|e| e.seconds).collect()
    };

    // Warm up caches and the allocator before timing anything.
    run(Mode::M4, 0);

    // Interleave the modes across repetitions so slow drift in machine
    // load cannot systematically favor one mode; pool all epochs per mode
    // and compare medians.
    let modes = [Mode::M1, Mode::M6, Mode::M5, Mode::M4];
    let mut seconds: [Vec<f64>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for rep in 0..RUNS {
        for (slot, &mode) in modes.iter().enumerate() {
            seconds[slot].extend(run(mode, rep as u64));
        }
    }
    let [t_m1, t_m6, t_m5, t_m4] = seconds.map(|mut s| median(&mut s));
    gate.check(
        "6 (per-epoch cost ordering)",
        t_m1 < t_m6 && t_m6 <= t_m5 && t_m5 < t_m4,
        format!(
            "median seconds/epoch over {RUNS} interleaved runs x {EPOCHS_PER_RUN} epochs: \
             M1 {t_m1:.4} < M6 {t_m6:.4} <= M5 {t_m5:.4} < M4 {t_m4:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 7 and 8: speedup and statistical fidelity of model-based PPF.
// ---------------------------------------------------------------------------

fn criterion_ppf(gate: &mut Gate, grid30: &PreparedGrid, spec30: &UncertaintySpec, m4: &Model) {
    const SAMPLES: usize = 10_000;
    const SEED: u64 = 7;

    let (mut model_stats, model_timing) = run_ppf(
        PpfEngine::Model(m4),
        grid30,
        spec30,
        SAMPLES,
        SEED,
        None,
    )
    .expect("model-path PPF runs");
    let (solver_stats, solver_timing) = run_ppf(
        PpfEngine::Solver(&SolverSettings::default()),
        grid30,
        spec30,
        SAMPLES,
        SEED,
        None,
    )
    .expect("solver-path PPF runs");

    let ratio = solver_timing.evaluation_seconds / model_timing.evaluation_seconds;
    gate.check(
        "7 (PPF speedup >= 100x)",
        ratio >= 100.0,
        format!(
            "model {:.4} s vs single-threaded Newton {:.4} s for {SAMPLES} samples: {ratio:.1}x",
            model_timing.evaluation_seconds, solver_timing.evaluation_seconds
        ),
    );

    model_stats.compare_against(&solver_stats);
    let deltas = model_stats.comparison.expect("comparison attached");
    gate.check(
        "8 (statistical fidelity)",
        deltas.v_mean <= 1e-3,
        format!(
            "max |mean V| delta {:.3e} p.u. (<= 1e-3); max |mean theta| delta {:.3e} rad",
            deltas.v_mean, deltas.theta_mean
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: bit-reproducibility across runs and worker counts.
// ---------------------------------------------------------------------------

fn datasets_identical(a: &Dataset, b: &Dataset) -> bool {
    a.x == b.x
        && a.y == b.y
        && a.p_br == b.p_br
        && a.q_br == b.q_br
        && a.x_norm == b.x_norm
        && a.y_norm == b.y_norm
        && a.pbr_norm == b.pbr_norm
        && a.qbr_norm == b.qbr_norm
        && (a.train, a.val, a.test, a.discarded) == (b.train, b.val, b.test, b.discarded)
}

fn networks_identical(a: &Network, b: &Network) -> bool {
    a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.weights == y.weights && x.biases == y.biases)
}

fn ppf_statistics(
    engine: PpfEngine<'_>,
    grid: &PreparedGrid,
    spec: &UncertaintySpec,
) -> PpfStatistics {
    let (stats, _) = run_ppf(engine, grid, spec, 300, 9, None).expect("PPF runs");
    stats
}

fn criterion_determinism(gate: &mut Gate, grid30: &PreparedGrid, spec30: &UncertaintySpec) {
    let split = SplitSpec {
        train: 300,
        val: 50,
        test: 50,
    };
    let settings = SolverSettings::default();
    let build = || build_dataset(grid30, spec30, 400, 3, split, &settings).expect("builds");

    // Same seed, repeated runs, and explicit 1- and 3-worker thread pools.
    let reference = build();
    let repeat = build();
    let pool1 = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool builds");
    let pool3 = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .expect("pool builds");
    let single = pool1.install(build);
    let triple = pool3.install(build);
    let dataset_ok = datasets_identical(&reference, &repeat)
        && datasets_identical(&reference, &single)
        && datasets_identical(&reference, &triple);

    // Training twice from the same seed must give identical parameters
    // and an identical epoch log.
    let config = TrainConfig {
        mode: Mode::M4,
        hidden: vec![20, 20],
        max_epochs: 8,
        stop: StopProtocol::FixedEpochs,
        batch_size: 50,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model_a, hist_a) = train(&config, &reference, grid30).expect("training succeeds");
    let (model_b, hist_b) = train(&config, &reference, grid30).expect("training succeeds");
    let losses = |h: &TrainHistory| -> Vec<(f64, f64)> {
        h.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    };
    let train_ok =
        networks_identical(&model_a.network, &model_b.network) && losses(&hist_a) == losses(&hist_b);

    // PPF statistics must be identical run to run on both engines.
    let solver_settings = SolverSettings::default();
    let ppf_ok = ppf_statistics(PpfEngine::Solver(&solver_settings), grid30, spec30)
        == ppf_statistics(PpfEngine::Solver(&solver_settings), grid30, spec30)
        && ppf_statistics(PpfEngine::Model(&model_a), grid30, spec30)
            == ppf_statistics(PpfEngine::Model(&model_a), grid30, spec30);

    gate.check(
        "9 (determinism)",
        dataset_ok && train_ok && ppf_ok,
        format!(
            "dataset bit-identical across reruns and 1/3-worker pools: {dataset_ok}; \
             training bit-identical: {train_ok}; PPF statistics identical: {ppf_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut gate = Gate::new();

    criterion_gradients(&mut gate);
    criterion_sensitivities(&mut gate);

    // Shared 30-bus artifacts: the light-load case, its uncertainty spec,
    // and the 22,000-sample dataset used by criteria 3, 5, 7, and 8.
    let grid30 = load_grid("ieee30_light.json");
    let spec30 = load_spec("specs/ieee30_light_loads.json");
    let dataset30 = build_dataset(
        &grid30,
        &spec30,
        22_000,
        7,
        SplitSpec {
            train: 10_000,
            val: 2_000,
            test: 10_000,
        },
        &SolverSettings::default(),
    )
    .expect("30-bus dataset builds");
    assert_eq!(dataset30.discarded, 0, "all draws must converge");

    criterion_solver(&mut gate, &grid30, &dataset30);
    criterion_initialization(&mut gate);
    let m4_model = criterion_training_study(&mut gate, &dataset30, &grid30);
    criterion_epoch_cost(&mut gate);
    criterion_ppf(&mut gate, &grid30, &spec30, &m4_model);
    criterion_determinism(&mut gate, &grid30, &spec30);

    assert!(
        gate.failures.is_empty(),
        "acceptance criteria failed: {}",
        gate.failures.join("; ")
    );
}
