//! Linear solves for the Newton correction step.
//!
//! Systems up to [`DENSE_LIMIT`] unknowns use dense LU with partial
//! pivoting; larger systems use sparse Gaussian elimination on sorted
//! adjacency rows. Results agree to solver tolerance; the split is purely
//! a performance decision.

use nalgebra::{DMatrix, DVector};

/// Bus-count threshold below which the Newton step uses dense LU.
pub const DENSE_LIMIT: usize = 200;

/// A linear system row as sorted `(column, coefficient)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

/// Solve `A x = b` with dense LU (partial pivoting). Returns `None` when
/// the factorization detects singularity.
pub fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.lu();
    let x = lu.solve(&b)?;
    // nalgebra's LU can "solve" numerically singular systems into NaNs or
    // infinities; reject those explicitly so the caller sees a singular
    // Jacobian rather than a poisoned iterate.
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Solve `A x = b` by sparse Gaussian elimination with partial pivoting.
///
/// `rows` holds one sorted sparse row per equation and is consumed. The
/// algorithm repeatedly picks the largest-magnitude coefficient in the
/// pivot column among remaining rows, then eliminates that column from the
/// rows below it by merging sorted row pairs (fill-in appears naturally in
/// the merge). Suitable for power-system Jacobians of a few thousand
/// unknowns; returns `None` on structural or numerical singularity.
pub fn solve_sparse(mut rows: Vec<SparseRow>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = rows.len();
    debug_assert_eq!(b.len(), n);
    // Row permutation: order[k] is the original index of the k-th pivot row.
    let mut order: Vec<usize> = (0..n).collect();
    for col in 0..n {
        // Find the best pivot among not-yet-used rows.
        let mut best: Option<(usize, f64)> = None;
        for (pos, &r) in order.iter().enumerate().skip(col) {
            if let Ok(idx) = rows[r].binary_search_by_key(&col, |&(c, _)| c) {
                let val = rows[r][idx].1;
                if val != 0.0 && best.map_or(true, |(_, v)| val.abs() > v.abs()) {
                    best = Some((pos, val));
                }
            }
        }
        let (pivot_pos, pivot_val) = best?;
        if pivot_val.abs() < 1e-300 {
            return None;
        }
        order.swap(col, pivot_pos);
        let prow = order[col];
        let pivot_row = std::mem::take(&mut rows[prow]);
        let pivot_rhs = b[prow];
        // Eliminate `col` from every remaining row that contains it.
        for &r in order.iter().skip(col + 1) {
            let Ok(idx) = rows[r].binary_search_by_key(&col, |&(c, _)| c) else {
                continue;
            };
            let factor = rows[r][idx].1 / pivot_val;
            if factor == 0.0 {
                continue;
            }
            rows[r] = merge_eliminate(&rows[r], &pivot_row, factor, col);
            b[r] -= factor * pivot_rhs;
        }
        rows[prow] = pivot_row;
    }
    // Back substitution over the pivot ordering.
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let r = order[col];
        let mut acc = b[r];
        let mut diag = 0.0;
        for &(c, v) in &rows[r] {
            if c == col {
                diag = v;
            } else if c > col {
                acc -= v * x[c];
            }
        }
        if diag == 0.0 {
            return None;
        }
        x[col] = acc / diag;
    }
    Some(x)
}

/// `target − factor · pivot_row`, dropping the eliminated column; both
/// inputs sorted by column, output sorted.
fn merge_eliminate(
    target: &[(usize, f64)],
    pivot_row: &[(usize, f64)],
    factor: f64,
    col: usize,
) -> SparseRow {
    let mut out = Vec::with_capacity(target.len() + pivot_row.len());
    let mut a = target.iter().peekable();
    let mut p = pivot_row.iter().peekable();
    loop {
        match (a.peek(), p.peek()) {
            (Some(&&(ca, va)), Some(&&(cp, vp))) => {
                if ca < cp {
                    if ca != col {
                        out.push((ca, va));
                    }
                    a.next();
                } else if cp < ca {
                    if cp != col {
                        out.push((cp, -factor * vp));
                    }
                    p.next();
                } else {
                    if ca != col {
                        out.push((ca, va - factor * vp));
                    }
                    a.next();
                    p.next();
                }
            }
            (Some(&&(ca, va)), None) => {
                if ca != col {
                    out.push((ca, va));
                }
                a.next();
            }
            (None, Some(&&(cp, vp))) => {
                if cp != col {
                    out.push((cp, -factor * vp));
                }
                p.next();
            }
            (None, None) => break,
        }
    }
    out
}
