//! Self-contained exact-rational simplex and the IP's LP relaxation.
//!
//! Two-phase tableau method over `BigRational` with Bland's rule, so results
//! carry no floating-point tolerance and cycling cannot occur. Intended for
//! desk-scale programs only (tens of variables) — the sandwich tests that
//! call it never go larger.

use num::{BigInt, BigRational, Signed, Zero};

use crate::model::Instance;

use super::{default_horizon, default_start_cap, HindsightError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Relation {
    Eq,
    Le,
}

/// `min c·x` subject to rows `a·x (=|≤) b` with `x ≥ 0` and every `b ≥ 0`.
pub(crate) struct LinearProgram {
    pub objective: Vec<BigRational>,
    pub rows: Vec<(Vec<BigRational>, Relation, BigRational)>,
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum SimplexError {
    Infeasible,
    Unbounded,
}

fn ratio(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

pub(crate) fn solve(lp: &LinearProgram) -> Result<BigRational, SimplexError> {
    let n = lp.objective.len();
    let m = lp.rows.len();
    let slacks = lp.rows.iter().filter(|r| r.1 == Relation::Le).count();
    let artificials = m - slacks;
    let total = n + slacks + artificials;

    // Build the tableau with slack columns for ≤ rows and artificial columns
    // (initially basic) for = rows; rhs sits in the last column.
    let mut tableau: Vec<Vec<BigRational>> = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut next_slack = n;
    let mut next_art = n + slacks;
    for (coeffs, relation, rhs) in &lp.rows {
        assert!(!rhs.is_negative(), "rows must be normalized to rhs >= 0");
        let mut row = vec![BigRational::zero(); total + 1];
        row[..n].clone_from_slice(coeffs);
        row[total] = rhs.clone();
        match relation {
            Relation::Le => {
                row[next_slack] = BigRational::from_integer(BigInt::from(1));
                basis.push(next_slack);
                next_slack += 1;
            }
            Relation::Eq => {
                row[next_art] = BigRational::from_integer(BigInt::from(1));
                basis.push(next_art);
                next_art += 1;
            }
        }
        tableau.push(row);
    }

    let art_start = n + slacks;
    if artificials > 0 {
        // Phase 1: minimize the sum of artificials.
        let mut phase1 = vec![BigRational::zero(); total + 1];
        for j in art_start..total {
            phase1[j] = BigRational::from_integer(BigInt::from(1));
        }
        canonicalize(&mut phase1, &tableau, &basis);
        iterate(&mut tableau, &mut phase1, &mut basis, total)?;
        if (-&phase1[total]).is_positive() {
            return Err(SimplexError::Infeasible);
        }
        // Pivot lingering zero-level artificials out (any nonzero entry in a
        // real column works, since the row's rhs is 0); a row with no such
        // entry restates another constraint and can be dropped.
        let mut i = 0;
        while i < tableau.len() {
            if basis[i] >= art_start {
                if let Some(j) = (0..art_start).find(|&j| !tableau[i][j].is_zero()) {
                    pivot(&mut tableau, &mut phase1, &mut basis, i, j);
                    i += 1;
                } else {
                    tableau.remove(i);
                    basis.remove(i);
                }
            } else {
                i += 1;
            }
        }
        // Delete artificial columns; the rhs slides down to index art_start.
        for row in &mut tableau {
            let rhs = row.pop().unwrap();
            row.truncate(art_start);
            row.push(rhs);
        }
    }

    // Phase 2 over the real objective (slack costs are zero).
    let rhs_col = art_start;
    let mut cost = vec![BigRational::zero(); rhs_col + 1];
    cost[..n].clone_from_slice(&lp.objective);
    canonicalize(&mut cost, &tableau, &basis);
    iterate(&mut tableau, &mut cost, &mut basis, rhs_col)?;
    Ok(-cost[rhs_col].clone())
}

/// Zero the cost row on basic columns: subtract `c[basis[i]] · row_i`.
fn canonicalize(cost: &mut [BigRational], tableau: &[Vec<BigRational>], basis: &[usize]) {
    for (i, &b) in basis.iter().enumerate() {
        if !cost[b].is_zero() {
            let factor = cost[b].clone();
            for (c, t) in cost.iter_mut().zip(&tableau[i]) {
                *c -= &factor * t;
            }
        }
    }
}

fn pivot(
    tableau: &mut [Vec<BigRational>],
    cost: &mut [BigRational],
    basis: &mut [usize],
    row: usize,
    col: usize,
) {
    let denom = tableau[row][col].clone();
    for v in tableau[row].iter_mut() {
        *v /= &denom;
    }
    for i in 0..tableau.len() {
        if i != row && !tableau[i][col].is_zero() {
            let factor = tableau[i][col].clone();
            for j in 0..tableau[i].len() {
                let delta = &factor * &tableau[row][j];
                tableau[i][j] -= delta;
            }
        }
    }
    if !cost[col].is_zero() {
        let factor = cost[col].clone();
        for (c, t) in cost.iter_mut().zip(&tableau[row]) {
            *c -= &factor * t;
        }
    }
    basis[row] = col;
}

/// Bland's rule iterations until no negative reduced cost remains.
fn iterate(
    tableau: &mut [Vec<BigRational>],
    cost: &mut [BigRational],
    basis: &mut [usize],
    rhs_col: usize,
) -> Result<(), SimplexError> {
    loop {
        let Some(entering) = (0..rhs_col).find(|&j| cost[j].is_negative()) else {
            return Ok(());
        };
        let mut leaving: Option<usize> = None;
        for i in 0..tableau.len() {
            if tableau[i][entering].is_positive() {
                let better = match leaving {
                    None => true,
                    Some(l) => {
                        let lhs = &tableau[i][rhs_col] * &tableau[l][entering];
                        let rhs = &tableau[l][rhs_col] * &tableau[i][entering];
                        lhs < rhs || (lhs == rhs && basis[i] < basis[l])
                    }
                };
                if better {
                    leaving = Some(i);
                }
            }
        }
        let Some(row) = leaving else {
            return Err(SimplexError::Unbounded);
        };
        pivot(tableau, cost, basis, row, entering);
    }
}

/// Value of the continuous relaxation of the latency IP: one fractional start
/// distribution per request, per-round memory rows. Always at most the exact
/// optimum. Desk-scale instances only.
pub fn lp_relaxation(instance: &Instance) -> Result<BigRational, HindsightError> {
    if instance.is_empty() {
        return Ok(BigRational::zero());
    }
    let memory_limit = instance.memory_limit();
    for r in instance.requests() {
        if r.peak_memory() > memory_limit {
            return Err(HindsightError::RequestTooLarge {
                id: r.id,
                needed: r.peak_memory(),
                limit: memory_limit,
            });
        }
    }
    let start_cap = default_start_cap(instance);
    let horizon = default_horizon(instance);

    // Flat variable layout: for each request (in instance order) one variable
    // per candidate start in [arrival, start_cap].
    let offsets: Vec<usize> = instance
        .requests()
        .iter()
        .scan(0usize, |acc, r| {
            let here = *acc;
            *acc += (start_cap - r.arrival + 1) as usize;
            Some(here)
        })
        .collect();
    let total_vars = offsets.last().unwrap()
        + (start_cap - instance.requests().last().unwrap().arrival + 1) as usize;

    let mut objective = vec![BigRational::zero(); total_vars];
    let mut rows = Vec::new();
    for (pos, r) in instance.requests().iter().enumerate() {
        let mut row = vec![BigRational::zero(); total_vars];
        for tau in r.arrival..=start_cap {
            let var = offsets[pos] + (tau - r.arrival) as usize;
            objective[var] = ratio(tau + r.output_len - r.arrival);
            row[var] = ratio(1);
        }
        rows.push((row, Relation::Eq, ratio(1)));
    }
    for t in 1..=horizon {
        let mut row = vec![BigRational::zero(); total_vars];
        let mut any = false;
        for (pos, r) in instance.requests().iter().enumerate() {
            let lo = t.saturating_sub(r.output_len).max(r.arrival);
            for tau in lo..t.min(start_cap + 1) {
                let var = offsets[pos] + (tau - r.arrival) as usize;
                row[var] = ratio(r.prompt_size + t - tau);
                any = true;
            }
        }
        if any {
            rows.push((row, Relation::Le, ratio(memory_limit)));
        }
    }

    let lp = LinearProgram { objective, rows };
    match solve(&lp) {
        Ok(value) => Ok(value),
        Err(err) => unreachable!(
            "relaxation of a fits-alone instance is feasible and bounded: {err:?}"
        ),
    }
}
