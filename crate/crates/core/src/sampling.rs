//! Monte-Carlo sampling of uncertain injections, z-score normalization,
//! and training-dataset assembly.
//!
//! Reproducibility contract: every uncertain bus quantity draws from its
//! own counter-based RNG stream — stream `2·i` for bus `i`'s active power,
//! stream `2·i + 1` for its reactive power, all derived from one master
//! seed. Sample `s` is the `s`-th draw of the stream, so generated
//! datasets are bit-identical for a given seed regardless of how the
//! per-sample work is parallelized.

use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution as _, Normal, Uniform, Weibull};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{FormatError, SamplingError};
use crate::flows;
use crate::grid::PreparedGrid;
use crate::powerflow::{self, SolverSettings};

/// A marginal distribution for one uncertain quantity, in per-unit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Uncertainty {
    /// Gaussian; `std = 0` degenerates to the mean exactly.
    Normal { mean: f64, std: f64 },
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Beta(alpha, beta) scaled by `scale`.
    Beta { alpha: f64, beta: f64, scale: f64 },
    /// Weibull with the given shape `k` and scale `lambda`.
    Weibull { shape: f64, scale: f64 },
}

impl Uncertainty {
    /// Draw `n` samples into `out` using the given stream RNG.
    fn fill(&self, rng: &mut ChaCha20Rng, out: &mut [f64]) -> Result<(), SamplingError> {
        match *self {
            Uncertainty::Normal { mean, std } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| SamplingError::BadDistribution(format!("normal: {e}")))?;
                out.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            Uncertainty::Uniform { lo, hi } => {
                if lo > hi {
                    return Err(SamplingError::BadDistribution(format!(
                        "uniform: lo {lo} > hi {hi}"
                    )));
                }
                if lo == hi {
                    out.iter_mut().for_each(|v| *v = lo);
                } else {
                    let dist = Uniform::new_inclusive(lo, hi);
                    out.iter_mut().for_each(|v| *v = dist.sample(rng));
                }
            }
            Uncertainty::Beta { alpha, beta, scale } => {
                let dist = Beta::new(alpha, beta)
                    .map_err(|e| SamplingError::BadDistribution(format!("beta: {e}")))?;
                out.iter_mut().for_each(|v| *v = scale * dist.sample(rng));
            }
            Uncertainty::Weibull { shape, scale } => {
                let dist = Weibull::new(scale, shape)
                    .map_err(|e| SamplingError::BadDistribution(format!("weibull: {e}")))?;
                out.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
        }
        Ok(())
    }
}

/// Uncertain injections for one bus. Quantities without an entry keep
/// their deterministic base-case value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusUncertainty {
    pub bus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Uncertainty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Uncertainty>,
}

/// Per-bus uncertainty model for Monte-Carlo sampling. Draws are
/// independent across buses and between P and Q (no correlation model).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub entries: Vec<BusUncertainty>,
}

impl UncertaintySpec {
    pub fn from_json(text: &str) -> Result<Self, SamplingError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SamplingError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }
}

/// Draw `n` joint injection samples. Returns `(p, q)` as `(n_bus, n)`
/// matrices, columns = samples, seeded deterministically from `seed`.
pub fn draw_samples(
    grid: &PreparedGrid,
    spec: &UncertaintySpec,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>), SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptySample);
    }
    let nb = grid.n_bus;
    let mut p = Array2::zeros((nb, n));
    let mut q = Array2::zeros((nb, n));
    for i in 0..nb {
        p.row_mut(i).fill(grid.base_p_inj[i]);
        q.row_mut(i).fill(grid.base_q_inj[i]);
    }
    for entry in &spec.entries {
        let i = entry
            .bus
            .try_into()
            .ok()
            .and_then(|id| grid.index_of(id))
            .ok_or(SamplingError::UnknownBus(entry.bus))?;
        if let Some(dist) = &entry.p {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(2 * i as u64);
            dist.fill(&mut rng, p.row_mut(i).as_slice_mut().expect("row-major"))?;
        }
        if let Some(dist) = &entry.q {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(2 * i as u64 + 1);
            dist.fill(&mut rng, q.row_mut(i).as_slice_mut().expect("row-major"))?;
        }
    }
    Ok((p, q))
}

/// Per-feature z-score statistics with the degenerate (zero-spread)
/// fallback: constant features normalize as `v − mean` (hence exactly 0
/// for data) and denormalize to the constant itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population standard deviation (1/N convention) per feature.
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit per-row statistics over the given columns.
    pub fn fit(data: &ArrayView2<f64>) -> Self {
        let n = data.ncols().max(1) as f64;
        let mut mean = Vec::with_capacity(data.nrows());
        let mut std = Vec::with_capacity(data.nrows());
        for row in data.rows() {
            let mu = row.sum() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt());
        }
        Self { mean, std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Normalize in place; rows = features.
    pub fn apply_mut(&self, data: &mut Array2<f64>) {
        debug_assert_eq!(data.nrows(), self.len());
        for (i, mut row) in data.rows_mut().into_iter().enumerate() {
            let (mu, sd) = (self.mean[i], self.std[i]);
            if sd > 0.0 {
                row.mapv_inplace(|v| (v - mu) / sd);
            } else {
                row.mapv_inplace(|v| v - mu);
            }
        }
    }

    pub fn apply(&self, data: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        self.apply_mut(&mut out);
        out
    }

    /// Denormalize in place: `v = z·std + mean` for every feature.
    ///
    /// Degenerate (std = 0) features therefore map back to their constant
    /// value exactly, whatever the normalized entry holds. Dataset values
    /// still round-trip losslessly (a zero-spread feature only ever holds
    /// its mean), and model predictions for structurally constant outputs
    /// — a slack magnitude, a fixed setpoint — are pinned to the constant
    /// instead of inheriting regression jitter.
    pub fn invert_mut(&self, data: &mut Array2<f64>) {
        debug_assert_eq!(data.nrows(), self.len());
        for (i, mut row) in data.rows_mut().into_iter().enumerate() {
            let (mu, sd) = (self.mean[i], self.std[i]);
            row.mapv_inplace(|v| v * sd + mu);
        }
    }

    pub fn invert(&self, data: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        self.invert_mut(&mut out);
        out
    }
}

/// Requested split sizes, in drawn-sample counts. When some samples are
/// discarded for non-convergence, the realized split keeps these
/// proportions over the surviving samples (largest-remainder rounding),
/// so an occasional discard shrinks splits instead of failing the build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Realized counts over `kept` samples, preserving proportions.
    fn realize(&self, kept: usize) -> (usize, usize, usize) {
        let total = self.total();
        if total == 0 || kept == 0 {
            return (0, 0, 0);
        }
        if kept >= total {
            return (self.train, self.val, self.test);
        }
        let quota = [self.train, self.val, self.test]
            .map(|c| (c * kept) as f64 / total as f64);
        let mut counts = quota.map(|q| q.floor() as usize);
        let mut assigned: usize = counts.iter().sum();
        // Distribute the remainder by largest fractional part, ties to the
        // earlier split (train before val before test).
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = quota[a] - quota[a].floor();
            let fb = quota[b] - quota[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        let mut k = 0;
        while assigned < kept {
            counts[order[k % 3]] += 1;
            assigned += 1;
            k += 1;
        }
        (counts[0], counts[1], counts[2])
    }
}

/// A fully assembled, normalized training dataset.
///
/// All matrices are feature-major (`rows = features`, `cols = samples`)
/// and z-scored with statistics fitted on the training split only.
/// Column order is sample order: train block, then validation, then test.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub case_name: String,
    pub n_bus: usize,
    pub n_branch: usize,
    pub seed: u64,
    /// Drawn samples that failed to converge and were discarded.
    pub discarded: usize,
    /// Realized split sizes.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Inputs: per-bus net active injection over reactive injection, `2·n_bus` rows.
    pub x: Array2<f64>,
    /// Labels: voltage magnitudes over angles, `2·n_bus` rows.
    pub y: Array2<f64>,
    /// Branch active-flow labels, `n_branch` rows.
    pub p_br: Array2<f64>,
    /// Branch reactive-flow labels, `n_branch` rows.
    pub q_br: Array2<f64>,
    pub x_norm: Normalizer,
    pub y_norm: Normalizer,
    pub pbr_norm: Normalizer,
    pub qbr_norm: Normalizer,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train..self.train + self.val
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train + self.val..self.train + self.val + self.test
    }

    pub fn x_cols(&self, r: Range<usize>) -> ArrayView2<'_, f64> {
        self.x.slice(s![.., r])
    }

    pub fn y_cols(&self, r: Range<usize>) -> ArrayView2<'_, f64> {
        self.y.slice(s![.., r])
    }

    pub fn pbr_cols(&self, r: Range<usize>) -> ArrayView2<'_, f64> {
        self.p_br.slice(s![.., r])
    }

    pub fn qbr_cols(&self, r: Range<usize>) -> ArrayView2<'_, f64> {
        self.q_br.slice(s![.., r])
    }
}

const DATASET_MAGIC: &[u8] = b"GFDATA1\n";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    case_name: String,
    n_bus: usize,
    n_branch: usize,
    seed: u64,
    discarded: usize,
    train: usize,
    val: usize,
    test: usize,
    n_samples: usize,
    x_norm: Normalizer,
    y_norm: Normalizer,
    pbr_norm: Normalizer,
    qbr_norm: Normalizer,
}

impl Dataset {
    /// Serialize as a single binary container: versioned magic,
    /// little-endian u64 header length, JSON header (shapes, seed, split
    /// sizes, normalizer statistics), then the four matrices as raw
    /// little-endian f64 blocks in row-major order (x, y, p_br, q_br).
    /// Doubles round-trip bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = DatasetHeader {
            case_name: self.case_name.clone(),
            n_bus: self.n_bus,
            n_branch: self.n_branch,
            seed: self.seed,
            discarded: self.discarded,
            train: self.train,
            val: self.val,
            test: self.test,
            n_samples: self.n_samples(),
            x_norm: self.x_norm.clone(),
            y_norm: self.y_norm.clone(),
            pbr_norm: self.pbr_norm.clone(),
            qbr_norm: self.qbr_norm.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for block in [&self.x, &self.y, &self.p_br, &self.q_br] {
            binio::write_f64_slice(&mut w, block.as_slice().expect("row-major"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != DATASET_MAGIC {
            return Err(FormatError::BadMagic { expected: "GFDATA1" });
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json)?;
        let h: DatasetHeader = serde_json::from_slice(&header_json)?;

        let n = h.n_samples;
        let mut read_block = |rows: usize| -> Result<Array2<f64>, FormatError> {
            let data = binio::read_f64_vec(&mut r, rows * n)?;
            Ok(Array2::from_shape_vec((rows, n), data).expect("shape checked"))
        };
        let x = read_block(2 * h.n_bus)?;
        let y = read_block(2 * h.n_bus)?;
        let p_br = read_block(h.n_branch)?;
        let q_br = read_block(h.n_branch)?;
        Ok(Self {
            case_name: h.case_name,
            n_bus: h.n_bus,
            n_branch: h.n_branch,
            seed: h.seed,
            discarded: h.discarded,
            train: h.train,
            val: h.val,
            test: h.test,
            x,
            y,
            p_br,
            q_br,
            x_norm: h.x_norm,
            y_norm: h.y_norm,
            pbr_norm: h.pbr_norm,
            qbr_norm: h.qbr_norm,
        })
    }

    /// Write inspection CSVs (`x.csv`, `y.csv`) into `dir`: one sample
    /// per row, normalized values, feature-named columns plus the split
    /// each sample belongs to.
    pub fn export_csv(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let split_of = |s: usize| {
            if s < self.train {
                "train"
            } else if s < self.train + self.val {
                "val"
            } else {
                "test"
            }
        };
        let write_matrix = |name: &str,
                            data: &Array2<f64>,
                            feature: &dyn Fn(usize) -> String|
         -> std::io::Result<()> {
            let mut out = String::from("sample,split");
            for row in 0..data.nrows() {
                out.push(',');
                out.push_str(&feature(row));
            }
            out.push('\n');
            for s in 0..data.ncols() {
                out.push_str(&format!("{s},{}", split_of(s)));
                for row in 0..data.nrows() {
                    out.push_str(&format!(",{:.17e}", data[(row, s)]));
                }
                out.push('\n');
            }
            std::fs::write(dir.join(name), out.as_bytes())
        };
        let n_bus = self.n_bus;
        write_matrix("x.csv", &self.x, &|row| {
            if row < n_bus {
                format!("p_inj_{row}")
            } else {
                format!("q_inj_{}", row - n_bus)
            }
        })?;
        write_matrix("y.csv", &self.y, &|row| {
            if row < n_bus {
                format!("v_{row}")
            } else {
                format!("theta_{}", row - n_bus)
            }
        })?;
        Ok(())
    }
}

/// Draw `n` samples, solve each with the Newton oracle, discard (and
/// count) non-converged draws, and assemble the normalized dataset.
///
/// Fails if more than 1% of draws do not converge — that signals an
/// ill-posed uncertainty spec rather than occasional bad luck.
pub fn build_dataset(
    grid: &PreparedGrid,
    spec: &UncertaintySpec,
    n: usize,
    seed: u64,
    split: SplitSpec,
    settings: &SolverSettings,
) -> Result<Dataset, SamplingError> {
    let (p, q) = draw_samples(grid, spec, n, seed)?;
    let solutions: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let ps = p.column(s).to_vec();
            let qs = q.column(s).to_vec();
            powerflow::solve(grid, &ps, &qs, settings)
                .ok()
                .map(|sol| (sol.v, sol.theta))
        })
        .collect();

    let kept: Vec<usize> = (0..n).filter(|&s| solutions[s].is_some()).collect();
    let discarded = n - kept.len();
    if discarded * 100 > n {
        return Err(SamplingError::TooManyFailures {
            failed: discarded,
            total: n,
        });
    }
    if discarded > 0 {
        log::warn!("discarded {discarded} non-converged samples out of {n}");
    }
    if split.total() > n {
        return Err(SamplingError::SplitTooLarge {
            requested: split.total(),
            available: n,
        });
    }
    let (train, val, test) = split.realize(kept.len());
    let used = train + val + test;

    let nb = grid.n_bus;
    let nbr = grid.n_branch();
    let mut x = Array2::zeros((2 * nb, used));
    let mut y = Array2::zeros((2 * nb, used));
    let mut p_br = Array2::zeros((nbr, used));
    let mut q_br = Array2::zeros((nbr, used));
    for (col, &s) in kept.iter().take(used).enumerate() {
        let (v, theta) = solutions[s].as_ref().expect("kept implies solved");
        for i in 0..nb {
            x[(i, col)] = p[(i, s)];
            x[(nb + i, col)] = q[(i, s)];
            y[(i, col)] = v[i];
            y[(nb + i, col)] = theta[i];
        }
        let (pf, qf) = flows::branch_flows(&grid.branches, v, theta);
        for k in 0..nbr {
            p_br[(k, col)] = pf[k];
            q_br[(k, col)] = qf[k];
        }
    }

    let x_norm = Normalizer::fit(&x.slice(s![.., 0..train]));
    let y_norm = Normalizer::fit(&y.slice(s![.., 0..train]));
    let pbr_norm = Normalizer::fit(&p_br.slice(s![.., 0..train]));
    let qbr_norm = Normalizer::fit(&q_br.slice(s![.., 0..train]));
    x_norm.apply_mut(&mut x);
    y_norm.apply_mut(&mut y);
    pbr_norm.apply_mut(&mut p_br);
    qbr_norm.apply_mut(&mut q_br);

    Ok(Dataset {
        case_name: grid.name.clone(),
        n_bus: nb,
        n_branch: nbr,
        seed,
        discarded,
        train,
        val,
        test,
        x,
        y,
        p_br,
        q_br,
        x_norm,
        y_norm,
        pbr_norm,
        qbr_norm,
    })
}
