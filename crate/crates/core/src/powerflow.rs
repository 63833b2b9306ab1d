//! Full-Newton AC power flow in polar coordinates.
//!
//! Unknowns are the voltage angles at every non-slack bus and the voltage
//! magnitudes at PQ buses; the mismatch vector stacks active-power errors
//! at non-slack buses over reactive-power errors at PQ buses. Each Newton
//! step solves the full Jacobian system (no decoupling approximations) —
//! dense LU up to [`crate::linsolve::DENSE_LIMIT`] buses, sparse
//! elimination above.
//!
//! Defaults mirror common production-solver settings: convergence when the
//! infinity norm of the mismatch drops below `1e-8` p.u., at most 20
//! iterations, flat start. Convergence is checked before the first
//! correction, so an already-solved operating point reports zero
//! iterations. PV-bus reactive limits are not enforced: the label map the
//! network learns must stay a smooth function of the injections.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::SolveError;
use crate::grid::{BusKind, PreparedGrid};
use crate::linsolve::{self, DENSE_LIMIT};

/// Initial iterate for the Newton loop.
#[derive(Debug, Clone, Default)]
pub enum Start {
    /// Setpoint magnitudes at slack/PV buses, 1.0 p.u. at PQ buses, zero
    /// angles everywhere.
    #[default]
    Flat,
    /// Caller-provided starting point (e.g. the previous Monte-Carlo
    /// solution). Off by default so benchmark timings stay honest.
    Warm { v: Vec<f64>, theta: Vec<f64> },
}

/// Newton solver settings.
#[derive(Debug, Clone)]
pub struct SolverSettings {
    /// Convergence threshold on the mismatch infinity norm, p.u.
    pub tolerance: f64,
    /// Iteration budget.
    pub max_iterations: u32,
    pub start: Start,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 20,
            start: Start::Flat,
        }
    }
}

/// A converged operating point.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Voltage magnitudes, p.u., by bus index.
    pub v: Vec<f64>,
    /// Voltage angles, radians, by bus index (slack at zero under flat start).
    pub theta: Vec<f64>,
    /// Newton iterations performed (zero if the start point already met
    /// tolerance).
    pub iterations: u32,
    /// Final mismatch infinity norm, p.u.
    pub max_mismatch: f64,
}

/// Net complex bus injections implied by a voltage profile:
/// `S = V ∘ conj(Y·V)`. Used for mismatch evaluation, slack/PV outputs,
/// and Kirchhoff balance checks.
pub fn bus_injections(grid: &PreparedGrid, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let vc: Vec<Complex64> = v
        .iter()
        .zip(theta)
        .map(|(&vm, &th)| Complex64::from_polar(vm, th))
        .collect();
    let current = grid.ybus.mul(&vc);
    let mut p = Vec::with_capacity(grid.n_bus);
    let mut q = Vec::with_capacity(grid.n_bus);
    for (vi, ii) in vc.iter().zip(&current) {
        let s = vi * ii.conj();
        p.push(s.re);
        q.push(s.im);
    }
    (p, q)
}

/// Solve the power flow for specified net injections `p_spec`, `q_spec`
/// (p.u., full bus vectors; the slack entries and PV reactive entries are
/// ignored as unknown outputs).
pub fn solve(
    grid: &PreparedGrid,
    p_spec: &[f64],
    q_spec: &[f64],
    settings: &SolverSettings,
) -> Result<PowerFlowSolution, SolveError> {
    let n = grid.n_bus;
    if p_spec.len() != n || q_spec.len() != n {
        return Err(SolveError::BadInjections {
            expected: n,
            got: p_spec.len().min(q_spec.len()),
        });
    }

    // Unknown layout: angles for non-slack buses, then magnitudes for PQ.
    let mut ang_pos = vec![usize::MAX; n];
    let mut vm_pos = vec![usize::MAX; n];
    let mut n_ang = 0;
    for i in 0..n {
        if grid.kinds[i] != BusKind::Slack {
            ang_pos[i] = n_ang;
            n_ang += 1;
        }
    }
    let mut n_vm = 0;
    for i in 0..n {
        if grid.kinds[i] == BusKind::Pq {
            vm_pos[i] = n_ang + n_vm;
            n_vm += 1;
        }
    }
    let n_unknown = n_ang + n_vm;

    let (mut v, mut theta) = match &settings.start {
        Start::Flat => {
            let v = (0..n)
                .map(|i| match grid.kinds[i] {
                    BusKind::Pq => 1.0,
                    _ => grid.v_setpoint[i],
                })
                .collect::<Vec<_>>();
            (v, vec![0.0; n])
        }
        Start::Warm { v, theta } => {
            if v.len() != n || theta.len() != n {
                return Err(SolveError::BadInjections {
                    expected: n,
                    got: v.len().min(theta.len()),
                });
            }
            (v.clone(), theta.clone())
        }
    };

    let mut mismatch = vec![0.0; n_unknown];
    for iteration in 0..=settings.max_iterations {
        let (p_calc, q_calc) = bus_injections(grid, &v, &theta);
        let mut norm = 0.0f64;
        for i in 0..n {
            if ang_pos[i] != usize::MAX {
                let dp = p_spec[i] - p_calc[i];
                mismatch[ang_pos[i]] = dp;
                norm = norm.max(dp.abs());
            }
            if vm_pos[i] != usize::MAX {
                let dq = q_spec[i] - q_calc[i];
                mismatch[vm_pos[i]] = dq;
                norm = norm.max(dq.abs());
            }
        }
        if norm < settings.tolerance {
            return Ok(PowerFlowSolution {
                v,
                theta,
                iterations: iteration,
                max_mismatch: norm,
            });
        }
        if iteration == settings.max_iterations {
            return Err(SolveError::NotConverged {
                iterations: iteration,
                mismatch: norm,
            });
        }

        let delta = newton_step(
            grid, &v, &theta, &p_calc, &q_calc, &ang_pos, &vm_pos, n_unknown, &mismatch,
        )
        .ok_or(SolveError::SingularJacobian { iteration })?;
        for i in 0..n {
            if ang_pos[i] != usize::MAX {
                theta[i] += delta[ang_pos[i]];
            }
            if vm_pos[i] != usize::MAX {
                v[i] += delta[vm_pos[i]];
            }
        }
    }
    unreachable!("loop returns on convergence or exhaustion");
}

/// Assemble the polar Jacobian and solve one correction step.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    grid: &PreparedGrid,
    v: &[f64],
    theta: &[f64],
    p_calc: &[f64],
    q_calc: &[f64],
    ang_pos: &[usize],
    vm_pos: &[usize],
    n_unknown: usize,
    mismatch: &[f64],
) -> Option<Vec<f64>> {
    let n = grid.n_bus;
    // One sparse row of Jacobian entries per equation, in unknown order.
    let mut rows: Vec<linsolve::SparseRow> = vec![Vec::new(); n_unknown];
    for i in 0..n {
        let p_row = ang_pos[i];
        let q_row = vm_pos[i];
        if p_row == usize::MAX && q_row == usize::MAX {
            continue;
        }
        let mut p_entries: linsolve::SparseRow = Vec::new();
        let mut q_entries: linsolve::SparseRow = Vec::new();
        for &(j, y) in grid.ybus.row(i) {
            let (g, b) = (y.re, y.im);
            if j == i {
                let vi = v[i];
                if p_row != usize::MAX {
                    p_entries.push((ang_pos[i], -q_calc[i] - b * vi * vi));
                    if vm_pos[i] != usize::MAX {
                        p_entries.push((vm_pos[i], p_calc[i] / vi + g * vi));
                    }
                }
                if q_row != usize::MAX {
                    q_entries.push((ang_pos[i], p_calc[i] - g * vi * vi));
                    q_entries.push((vm_pos[i], q_calc[i] / vi - b * vi));
                }
            } else {
                let th_ij = theta[i] - theta[j];
                let (sin, cos) = th_ij.sin_cos();
                let vivj = v[i] * v[j];
                let gc_bs = g * cos + b * sin;
                let gs_bc = g * sin - b * cos;
                if p_row != usize::MAX {
                    if ang_pos[j] != usize::MAX {
                        p_entries.push((ang_pos[j], vivj * gs_bc));
                    }
                    if vm_pos[j] != usize::MAX {
                        p_entries.push((vm_pos[j], v[i] * gc_bs));
                    }
                }
                if q_row != usize::MAX {
                    if ang_pos[j] != usize::MAX {
                        q_entries.push((ang_pos[j], -vivj * gc_bs));
                    }
                    if vm_pos[j] != usize::MAX {
                        q_entries.push((vm_pos[j], v[i] * gs_bc));
                    }
                }
            }
        }
        if p_row != usize::MAX {
            p_entries.sort_unstable_by_key(|&(c, _)| c);
            rows[p_row] = p_entries;
        }
        if q_row != usize::MAX {
            q_entries.sort_unstable_by_key(|&(c, _)| c);
            rows[q_row] = q_entries;
        }
    }

    if n <= DENSE_LIMIT {
        let mut a = DMatrix::zeros(n_unknown, n_unknown);
        for (r, row) in rows.iter().enumerate() {
            for &(c, val) in row {
                a[(r, c)] = val;
            }
        }
        let x = linsolve::solve_dense(a, DVector::from_column_slice(mismatch))?;
        Some(x.iter().copied().collect())
    } else {
        linsolve::solve_sparse(rows, mismatch.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ImportOptions, NetworkCase};

    fn two_bus_grid(p_load_mw: f64, q_load_mvar: f64) -> PreparedGrid {
        let text = format!(
            r#"{{
                "name": "twobus",
                "base_mva": 100.0,
                "buses": [
                    {{"id": 1, "kind": "slack", "v_setpoint": 1.0}},
                    {{"id": 2, "kind": "pq", "p_load_mw": {p_load_mw}, "q_load_mvar": {q_load_mvar}}}
                ],
                "branches": [{{"from": 1, "to": 2, "r": 0.0, "x": 0.1}}]
            }}"#
        );
        let case = NetworkCase::from_json(&text, ImportOptions::default()).unwrap();
        PreparedGrid::new(&case).unwrap()
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // Pure-reactance branch (x = 0.1) with a 50 MW, 0 MVAr load has the
        // closed-form solution  sin(2θ₂) = −2·P·x,  V₂ = cos θ₂:
        //   P₂ = (V₁V₂/x)·sin(θ₂ − θ₁) and Q₂ = 0 forces V₂ = cos θ₂.
        let grid = two_bus_grid(50.0, 0.0);
        let sol = solve(
            &grid,
            &grid.base_p_inj,
            &grid.base_q_inj,
            &SolverSettings::default(),
        )
        .unwrap();
        let theta2 = -f64::asin(2.0 * 0.5 * 0.1) / 2.0;
        let v2 = theta2.cos();
        assert!((sol.theta[1] - theta2).abs() < 1e-10);
        assert!((sol.v[1] - v2).abs() < 1e-10);
        // Pinned fixture values.
        assert!((sol.theta[1] - (-0.050084)).abs() < 1e-6);
        assert!((sol.v[1] - 0.998746).abs() < 1e-6);
    }

    #[test]
    fn zero_load_converges_without_iterating() {
        let grid = two_bus_grid(0.0, 0.0);
        let sol = solve(
            &grid,
            &grid.base_p_inj,
            &grid.base_q_inj,
            &SolverSettings::default(),
        )
        .unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.max_mismatch < 1e-8);
    }

    #[test]
    fn infeasible_load_is_not_converged() {
        // Far beyond the maximum power transfer of a 0.1 p.u. reactance.
        let grid = two_bus_grid(2000.0, 900.0);
        let err = solve(
            &grid,
            &grid.base_p_inj,
            &grid.base_q_inj,
            &SolverSettings::default(),
        )
        .unwrap_err();
        match err {
            SolveError::NotConverged { .. } | SolveError::SingularJacobian { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn solution_satisfies_kirchhoff_balance() {
        let grid = two_bus_grid(50.0, 10.0);
        let sol = solve(
            &grid,
            &grid.base_p_inj,
            &grid.base_q_inj,
            &SolverSettings::default(),
        )
        .unwrap();
        let (p, q) = bus_injections(&grid, &sol.v, &sol.theta);
        assert!((p[1] - grid.base_p_inj[1]).abs() < 1e-8);
        assert!((q[1] - grid.base_q_inj[1]).abs() < 1e-8);
    }

    #[test]
    fn warm_start_from_solution_takes_zero_iterations() {
        let grid = two_bus_grid(50.0, 10.0);
        let sol = solve(
            &grid,
            &grid.base_p_inj,
            &grid.base_q_inj,
            &SolverSettings::default(),
        )
        .unwrap();
        let warm = SolverSettings {
            start: Start::Warm {
                v: sol.v.clone(),
                theta: sol.theta.clone(),
            },
            ..Default::default()
        };
        let again = solve(&grid, &grid.base_p_inj, &grid.base_q_inj, &warm).unwrap();
        assert_eq!(again.iterations, 0);
    }
}
