//! Probabilistic power flow: Monte-Carlo evaluation through either the
//! trained surrogate (one batched matrix pass) or the Newton–Raphson
//! solver (per-sample solves), output statistics with histograms, the
//! mode-comparison harness, and the speedup benchmark.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SamplingError;
use crate::flows;
use crate::grid::PreparedGrid;
use crate::metrics::MetricsReport;
use crate::nn::Model;
use crate::powerflow::{self, SolverSettings};
use crate::sampling::{draw_samples, Dataset, UncertaintySpec};
use crate::training::{self, Mode, StopReason, TrainConfig};

/// Which evaluator produces the per-sample voltage solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Trained surrogate model.
    Dnn,
    /// Newton–Raphson solver.
    Nr,
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" => Ok(Engine::Dnn),
            "nr" => Ok(Engine::Nr),
            other => Err(format!("unknown engine '{other}' (expected dnn|nr)")),
        }
    }
}

/// A density histogram over one scalar quantity. Bin `k` covers
/// `[lo + k·width, lo + (k+1)·width)`, the last bin closed on the right;
/// `masses` are bin probabilities and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub masses: Vec<f64>,
}

impl Histogram {
    /// Build from samples. `bins = None` applies the Freedman–Diaconis
    /// rule (bin width `2·IQR·n^(−1/3)`); a degenerate spread collapses
    /// to a single full-mass bin.
    pub fn build(values: &ArrayView1<f64>, bins: Option<usize>) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                lo: 0.0,
                bin_width: 0.0,
                masses: Vec::new(),
            };
        }
        let mut sorted: Vec<f64> = values.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let (min, max) = (sorted[0], sorted[n - 1]);
        let span = max - min;
        let n_bins = match bins {
            Some(b) => b.max(1),
            None => {
                let iqr = percentile(&sorted, 0.75) - percentile(&sorted, 0.25);
                let width = 2.0 * iqr * (n as f64).powf(-1.0 / 3.0);
                if width <= 0.0 || span <= 0.0 {
                    1
                } else {
                    // Safety valve against adversarial spreads.
                    ((span / width).ceil() as usize).clamp(1, 10_000)
                }
            }
        };
        if span <= 0.0 {
            return Self {
                lo: min,
                bin_width: 0.0,
                masses: vec![1.0],
            };
        }
        let width = span / n_bins as f64;
        let mut counts = vec![0usize; n_bins];
        for &v in &sorted {
            let idx = (((v - min) / width) as usize).min(n_bins - 1);
            counts[idx] += 1;
        }
        Self {
            lo: min,
            bin_width: width,
            masses: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

/// Mean, standard deviation, and histogram for every element of one
/// output quantity (rows = buses or branches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

impl QuantityStats {
    fn from_rows(data: &Array2<f64>, bins: Option<usize>) -> Self {
        let n = data.ncols().max(1) as f64;
        let mut mean = Vec::with_capacity(data.nrows());
        let mut std = Vec::with_capacity(data.nrows());
        let mut histograms = Vec::with_capacity(data.nrows());
        for row in data.rows() {
            let mu = row.sum() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt());
            histograms.push(Histogram::build(&row, bins));
        }
        Self {
            mean,
            std,
            histograms,
        }
    }
}

/// Largest absolute difference between two per-element statistic vectors,
/// one pair per quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDeltas {
    pub v_mean: f64,
    pub v_std: f64,
    pub theta_mean: f64,
    pub theta_std: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub q_mean: f64,
    pub q_std: f64,
}

/// Monte-Carlo output statistics of one PPF run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpfStatistics {
    pub n_samples: usize,
    /// Samples dropped because the solver did not converge (0 on the
    /// model path).
    pub n_discarded: usize,
    pub bus_v: QuantityStats,
    pub bus_theta: QuantityStats,
    pub branch_p: QuantityStats,
    pub branch_q: QuantityStats,
    /// Per-quantity deltas against a benchmark run, when one was attached.
    pub comparison: Option<ComparisonDeltas>,
}

impl PpfStatistics {
    /// Attach max-absolute-difference deltas against a benchmark run.
    pub fn compare_against(&mut self, benchmark: &PpfStatistics) {
        let max_delta = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        self.comparison = Some(ComparisonDeltas {
            v_mean: max_delta(&self.bus_v.mean, &benchmark.bus_v.mean),
            v_std: max_delta(&self.bus_v.std, &benchmark.bus_v.std),
            theta_mean: max_delta(&self.bus_theta.mean, &benchmark.bus_theta.mean),
            theta_std: max_delta(&self.bus_theta.std, &benchmark.bus_theta.std),
            p_mean: max_delta(&self.branch_p.mean, &benchmark.branch_p.mean),
            p_std: max_delta(&self.branch_p.std, &benchmark.branch_p.std),
            q_mean: max_delta(&self.branch_q.mean, &benchmark.branch_q.mean),
            q_std: max_delta(&self.branch_q.std, &benchmark.branch_q.std),
        });
    }
}

/// Pure evaluation time of one PPF run: sampling, flow reconstruction,
/// and statistics are excluded on both engines so the comparison isolates
/// "produce voltage solutions for n injections".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpfTiming {
    pub engine: Engine,
    pub n_samples: usize,
    pub evaluation_seconds: f64,
    pub per_sample_seconds: f64,
}

/// The evaluator for [`run_ppf`].
pub enum PpfEngine<'a> {
    Model(&'a Model),
    Solver(&'a SolverSettings),
}

impl PpfEngine<'_> {
    fn kind(&self) -> Engine {
        match self {
            PpfEngine::Model(_) => Engine::Dnn,
            PpfEngine::Solver(_) => Engine::Nr,
        }
    }
}

/// Run Monte-Carlo PPF: draw `n` injection samples, evaluate voltages
/// with the chosen engine, reconstruct branch flows, and reduce to
/// statistics.
///
/// The solver path runs single-threaded (its timing is the benchmark
/// baseline) and discards non-converged samples, failing if they exceed
/// 1% of the draw. The model path evaluates all samples in one batched
/// forward pass.
pub fn run_ppf(
    engine: PpfEngine<'_>,
    grid: &PreparedGrid,
    spec: &UncertaintySpec,
    n: usize,
    seed: u64,
    bins: Option<usize>,
) -> Result<(PpfStatistics, PpfTiming), SamplingError> {
    let (p_inj, q_inj) = draw_samples(grid, spec, n, seed)?;
    let kind = engine.kind();
    let (voltages, n_discarded, seconds) = match engine {
        PpfEngine::Model(model) => {
            let mut x = Array2::zeros((2 * grid.n_bus, n));
            x.slice_mut(s![..grid.n_bus, ..]).assign(&p_inj);
            x.slice_mut(s![grid.n_bus.., ..]).assign(&q_inj);
            let started = Instant::now();
            let y = model.predict_raw(&x.view());
            (y, 0, started.elapsed().as_secs_f64())
        }
        PpfEngine::Solver(settings) => {
            let mut solutions: Vec<Option<powerflow::PowerFlowSolution>> = Vec::with_capacity(n);
            let mut p_col = vec![0.0; grid.n_bus];
            let mut q_col = vec![0.0; grid.n_bus];
            let started = Instant::now();
            for s_i in 0..n {
                for b in 0..grid.n_bus {
                    p_col[b] = p_inj[(b, s_i)];
                    q_col[b] = q_inj[(b, s_i)];
                }
                solutions.push(powerflow::solve(grid, &p_col, &q_col, settings).ok());
            }
            let seconds = started.elapsed().as_secs_f64();
            let failed = solutions.iter().filter(|s| s.is_none()).count();
            if failed * 100 > n {
                return Err(SamplingError::TooManyFailures { failed, total: n });
            }
            let kept = n - failed;
            let mut y = Array2::zeros((2 * grid.n_bus, kept));
            let mut col = 0;
            for sol in solutions.into_iter().flatten() {
                for b in 0..grid.n_bus {
                    y[(b, col)] = sol.v[b];
                    y[(grid.n_bus + b, col)] = sol.theta[b];
                }
                col += 1;
            }
            (y, failed, seconds)
        }
    };

    let kept = voltages.ncols();
    let v = voltages.slice(s![..grid.n_bus, ..]).to_owned();
    let theta = voltages.slice(s![grid.n_bus.., ..]).to_owned();
    let (p_flow, q_flow) = flows::branch_flows_batch(&grid.branches, &v, &theta);

    let stats = PpfStatistics {
        n_samples: kept,
        n_discarded,
        bus_v: QuantityStats::from_rows(&v, bins),
        bus_theta: QuantityStats::from_rows(&theta, bins),
        branch_p: QuantityStats::from_rows(&p_flow, bins),
        branch_q: QuantityStats::from_rows(&q_flow, bins),
        comparison: None,
    };
    let timing = PpfTiming {
        engine: kind,
        n_samples: n,
        evaluation_seconds: seconds,
        per_sample_seconds: seconds / n.max(1) as f64,
    };
    Ok((stats, timing))
}

/// One row of the mode-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    /// Epochs executed; for the accuracy protocol this is the epoch at
    /// which all indexes first passed.
    pub n_epoch: usize,
    pub stop_reason: Option<StopReason>,
    /// Median wall-clock seconds per epoch.
    pub epoch_seconds_median: f64,
    /// Test-split metrics of the returned model.
    pub metrics: Option<MetricsReport>,
    /// Training failure, if this mode diverged (other modes still run).
    pub error: Option<String>,
}

/// Comparison of several training modes on identical data and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub protocol: String,
    pub seed: u64,
    pub rows: Vec<ModeRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,n_epoch,stop_reason,epoch_seconds_median,v_loss,p_vm,p_va,p_pf,p_qf,error\n",
        );
        for r in &self.rows {
            let reason = r
                .stop_reason
                .map(|s| format!("{s:?}").to_lowercase())
                .unwrap_or_default();
            let (v_loss, p_vm, p_va, p_pf, p_qf) = match &r.metrics {
                Some(m) => (
                    format!("{:.17e}", m.v_loss),
                    format!("{:.6}", m.p_vm),
                    format!("{:.6}", m.p_va),
                    format!("{:.6}", m.p_pf),
                    format!("{:.6}", m.p_qf),
                ),
                None => Default::default(),
            };
            out.push_str(&format!(
                "{},{},{},{:.6},{},{},{},{},{},{}\n",
                r.mode,
                r.n_epoch,
                reason,
                r.epoch_seconds_median,
                v_loss,
                p_vm,
                p_va,
                p_pf,
                p_qf,
                r.error.clone().unwrap_or_default()
            ));
        }
        out
    }
}

/// Train each mode on the same dataset and seed, then evaluate on the
/// test split. A diverging mode contributes an error row and the
/// remaining modes still run.
pub fn compare_methods(
    modes: &[Mode],
    base_config: &TrainConfig,
    dataset: &Dataset,
    grid: &PreparedGrid,
) -> ComparisonTable {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let config = TrainConfig {
            mode,
            ..base_config.clone()
        };
        match training::train(&config, dataset, grid) {
            Ok((model, history)) => {
                let indexes = training::evaluate_on_range(
                    &model.network,
                    dataset,
                    grid,
                    dataset.test_range(),
                    &config.thresholds,
                );
                let mut epoch_secs: Vec<f64> =
                    history.epochs.iter().map(|e| e.seconds).collect();
                epoch_secs.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
                let median = if epoch_secs.is_empty() {
                    0.0
                } else {
                    epoch_secs[epoch_secs.len() / 2]
                };
                let n_epoch = history.accuracy_epoch.unwrap_or(history.n_epoch);
                rows.push(ModeRow {
                    mode: mode.to_string(),
                    n_epoch,
                    stop_reason: Some(history.stop_reason),
                    epoch_seconds_median: median,
                    metrics: Some(MetricsReport::from_indexes(
                        indexes,
                        n_epoch,
                        config.thresholds,
                        dataset.test_range().len(),
                    )),
                    error: None,
                });
            }
            Err(err) => rows.push(ModeRow {
                mode: mode.to_string(),
                n_epoch: 0,
                stop_reason: None,
                epoch_seconds_median: 0.0,
                metrics: None,
                error: Some(err.to_string()),
            }),
        }
    }
    ComparisonTable {
        protocol: match base_config.stop {
            training::StopProtocol::FixedEpochs => "fixed-epochs".into(),
            training::StopProtocol::EarlyStop { .. } => "early-stop".into(),
            training::StopProtocol::StopOnAccuracy { .. } => "stop-on-accuracy".into(),
        },
        seed: base_config.seed,
        rows,
    }
}

/// Timing comparison between the surrogate and the solver on identical
/// samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_samples: usize,
    pub dnn: PpfTiming,
    pub solver_single_thread: PpfTiming,
    /// The same solve loop parallelized across samples.
    pub solver_parallel: PpfTiming,
    pub parallel_threads: usize,
    /// Single-thread solver time over surrogate time.
    pub speedup_vs_single_thread: f64,
    /// Parallel solver time over surrogate time.
    pub speedup_vs_parallel: f64,
}

/// Benchmark the surrogate against the solver on `n` fresh samples:
/// single-threaded solver loop (the reference baseline) plus a
/// sample-parallel solver run as the strongest fair baseline.
pub fn bench(
    model: &Model,
    grid: &PreparedGrid,
    spec: &UncertaintySpec,
    settings: &SolverSettings,
    n: usize,
    seed: u64,
) -> Result<BenchReport, SamplingError> {
    let (_, dnn_timing) = run_ppf(PpfEngine::Model(model), grid, spec, n, seed, Some(16))?;
    let (_, nr_timing) = run_ppf(PpfEngine::Solver(settings), grid, spec, n, seed, Some(16))?;

    // Parallel solver pass over the same draw.
    let (p_inj, q_inj) = draw_samples(grid, spec, n, seed)?;
    let started = Instant::now();
    let results: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|s_i| {
            let p: Vec<f64> = (0..grid.n_bus).map(|b| p_inj[(b, s_i)]).collect();
            let q: Vec<f64> = (0..grid.n_bus).map(|b| q_inj[(b, s_i)]).collect();
            powerflow::solve(grid, &p, &q, settings).is_ok()
        })
        .collect();
    let par_seconds = started.elapsed().as_secs_f64();
    let failed = results.iter().filter(|ok| !**ok).count();
    if failed * 100 > n {
        return Err(SamplingError::TooManyFailures { failed, total: n });
    }
    let solver_parallel = PpfTiming {
        engine: Engine::Nr,
        n_samples: n,
        evaluation_seconds: par_seconds,
        per_sample_seconds: par_seconds / n.max(1) as f64,
    };

    Ok(BenchReport {
        n_samples: n,
        speedup_vs_single_thread: nr_timing.evaluation_seconds
            / dnn_timing.evaluation_seconds.max(f64::MIN_POSITIVE),
        speedup_vs_parallel: solver_parallel.evaluation_seconds
            / dnn_timing.evaluation_seconds.max(f64::MIN_POSITIVE),
        dnn: dnn_timing,
        solver_single_thread: nr_timing,
        solver_parallel,
        parallel_threads: rayon::current_num_threads(),
    })
}

/// The full JSON report artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpfReport {
    pub statistics: PpfStatistics,
    pub timing: PpfTiming,
    pub metrics: Option<MetricsReport>,
}

/// Write the report as `report.json` plus plotting-friendly CSVs: one
/// statistics table per quantity and one histogram CSV per quantity.
/// Field order is fixed by the types, so identical inputs produce
/// identical bytes.
pub fn export_report(report: &PpfReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(dir.join("report.json"), json.as_bytes())?;

    let quantities: [(&str, &QuantityStats); 4] = [
        ("bus_v", &report.statistics.bus_v),
        ("bus_theta", &report.statistics.bus_theta),
        ("branch_p", &report.statistics.branch_p),
        ("branch_q", &report.statistics.branch_q),
    ];
    for (name, stats) in quantities {
        let mut table = String::from("index,mean,std\n");
        for (i, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
            table.push_str(&format!("{i},{m:.17e},{s:.17e}\n"));
        }
        std::fs::write(dir.join(format!("{name}_stats.csv")), table.as_bytes())?;

        let mut hist = String::from("index,bin_lo,bin_hi,mass\n");
        for (i, h) in stats.histograms.iter().enumerate() {
            for (k, &mass) in h.masses.iter().enumerate() {
                let lo = h.lo + k as f64 * h.bin_width;
                let hi = lo + h.bin_width;
                hist.push_str(&format!("{i},{lo:.17e},{hi:.17e},{mass:.17e}\n"));
            }
        }
        std::fs::write(dir.join(format!("{name}_hist.csv")), hist.as_bytes())?;
    }
    Ok(())
}
