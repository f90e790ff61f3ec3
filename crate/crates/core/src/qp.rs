//! Dense quadratic programming kernel.
//!
//! Equality-constrained problems are solved with a single factorization of the
//! KKT matrix `[H Aᵀ; A 0]`. Inequality-constrained problems use a dual
//! active-set method (Goldfarb–Idnani) on the null space of the equality
//! constraints, followed by one KKT solve with the final working set pinned to
//! equality. The working set at termination is exact, which is what the
//! gradient machinery in [`crate::grad`] relies on.

use std::cell::Cell;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::scalar::Scalar;

/// Per-thread totals of the expensive solver operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverCounters {
    pub kkt_factorizations: usize,
    pub active_set_iterations: usize,
}

thread_local! {
    static COUNTERS: Cell<SolverCounters> = const { Cell::new(SolverCounters { kkt_factorizations: 0, active_set_iterations: 0 }) };
}

/// Counters accumulated on the calling thread since it started.
pub fn solver_counters() -> SolverCounters {
    COUNTERS.with(Cell::get)
}

fn bump(f: impl FnOnce(&mut SolverCounters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Equality-constrained QP: minimize `½ zᵀHz + gᵀz` subject to `Az = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqQp<T: Scalar> {
    pub h: DMatrix<T>,
    pub g: DVector<T>,
    pub a: DMatrix<T>,
    pub b: DVector<T>,
}

/// Inequality-constrained QP: an [`EqQp`] plus `Gz ≤ l`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqQp<T: Scalar> {
    pub eq: EqQp<T>,
    pub g_ineq: DMatrix<T>,
    pub l: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Counters describing how a solve went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QpStats {
    /// Active-set iterations (zero for pure equality solves).
    pub iterations: usize,
    /// KKT matrix factorizations performed.
    pub factorizations: usize,
    /// Equality rows dropped as consistent duplicates of other rows.
    pub dropped_rows: usize,
    /// Zero-length steps taken by the active-set loop.
    pub degenerate_steps: usize,
    /// Whether the smallest-index (Bland) selection rule had to be engaged.
    pub bland_fallback: bool,
    /// Whether a supplied warm-start working set was accepted.
    pub warm_started: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult<T: Scalar> {
    pub z: DVector<T>,
    /// Multipliers for every equality row (zero on dropped rows).
    pub lambda: DVector<T>,
    /// Multipliers for every inequality row (zero on inactive rows).
    pub nu: DVector<T>,
    /// Working set at termination, sorted.
    pub active_rows: Vec<usize>,
    pub status: QpStatus,
    pub stats: QpStats,
    /// Inequality row that could not be satisfied when `status` is `Infeasible`.
    pub blocking_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    DimensionMismatch(String),
    Asymmetric { max_relative: f64 },
    SingularKkt { cond: f64 },
    InconsistentConstraints { row: usize, residual: f64 },
    NonFinite,
}

impl fmt::Display for QpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QpError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            QpError::Asymmetric { max_relative } => {
                write!(f, "cost matrix is not symmetric (relative asymmetry {max_relative:.3e})")
            }
            QpError::SingularKkt { cond } => {
                write!(f, "KKT matrix is numerically singular (condition estimate {cond:.3e})")
            }
            QpError::InconsistentConstraints { row, residual } => write!(
                f,
                "equality row {row} is linearly dependent on other rows but inconsistent (residual {residual:.3e})"
            ),
            QpError::NonFinite => write!(f, "problem data contains non-finite values"),
        }
    }
}

impl std::error::Error for QpError {}

impl<T: Scalar> EqQp<T> {
    /// Builds a problem after checking dimensions and symmetry of `h`.
    pub fn new(
        h: DMatrix<T>,
        g: DVector<T>,
        a: DMatrix<T>,
        b: DVector<T>,
    ) -> Result<Self, QpError> {
        let problem = EqQp { h, g, a, b };
        problem.validate()?;
        Ok(problem)
    }

    pub fn unconstrained(h: DMatrix<T>, g: DVector<T>) -> Result<Self, QpError> {
        let n = h.ncols();
        Self::new(h, g, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.h.nrows();
        if self.h.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.g.len() != n {
            return Err(QpError::DimensionMismatch(format!("g has length {}, expected {n}", self.g.len())));
        }
        if self.a.ncols() != n || self.a.nrows() != self.b.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A is {}x{}, b has length {}, decision dimension {n}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.len()
            )));
        }
        let finite = self.h.iter().chain(self.g.iter()).chain(self.a.iter()).chain(self.b.iter());
        if !all_finite(finite) {
            return Err(QpError::NonFinite);
        }
        let asym = relative_asymmetry(&self.h);
        if asym > T::tol(1e-12) {
            return Err(QpError::Asymmetric { max_relative: asym.to_f64_lossy() });
        }
        Ok(())
    }
}

impl<T: Scalar> IqQp<T> {
    pub fn new(eq: EqQp<T>, g_ineq: DMatrix<T>, l: DVector<T>) -> Result<Self, QpError> {
        let problem = IqQp { eq, g_ineq, l };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        self.eq.validate()?;
        let n = self.eq.dim();
        if self.g_ineq.ncols() != n || self.g_ineq.nrows() != self.l.len() {
            return Err(QpError::DimensionMismatch(format!(
                "G is {}x{}, l has length {}, decision dimension {n}",
                self.g_ineq.nrows(),
                self.g_ineq.ncols(),
                self.l.len()
            )));
        }
        if !all_finite(self.g_ineq.iter().chain(self.l.iter())) {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }
}

fn all_finite<'a, T: Scalar>(mut values: impl Iterator<Item = &'a T>) -> bool {
    values.all(|v| v.is_finite())
}

fn relative_asymmetry<T: Scalar>(h: &DMatrix<T>) -> T {
    let scale = h.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() {
        return T::zero();
    }
    let mut worst = T::zero();
    for i in 0..h.nrows() {
        for j in (i + 1)..h.ncols() {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Splits the rows of `a` into a linearly independent subset and the rest,
/// using modified Gram–Schmidt with reorthogonalization.
pub fn independent_rows<T: Scalar>(a: &DMatrix<T>, rel_tol: T) -> (Vec<usize>, Vec<usize>) {
    let mut basis: Vec<DVector<T>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..a.nrows() {
        let mut v: DVector<T> = a.row(i).transpose();
        let norm0 = v.norm();
        if norm0 == T::zero() {
            dropped.push(i);
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, T::one());
            }
        }
        let norm = v.norm();
        if norm <= rel_tol * norm0 {
            dropped.push(i);
        } else {
            v /= norm;
            basis.push(v);
            kept.push(i);
        }
    }
    (kept, dropped)
}

fn one_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    m.column_iter()
        .map(|c| c.iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |acc, v| acc.max(v))
}

/// Hager's estimate of `‖K⁻¹‖₁` for a symmetric `K` given its LU factors.
fn inverse_one_norm_estimate<T: Scalar>(lu: &LU<T, Dyn, Dyn>, dim: usize) -> Option<T> {
    if dim == 0 {
        return Some(T::zero());
    }
    let mut x = DVector::from_element(dim, T::one() / T::lit(dim as f64));
    let mut estimate = T::zero();
    for _ in 0..5 {
        let y = lu.solve(&x)?;
        estimate = y.iter().fold(T::zero(), |acc, v| acc + v.abs());
        let xi = y.map(|v| if v >= T::zero() { T::one() } else { -T::one() });
        // K is symmetric, so K⁻ᵀ = K⁻¹
        let w = lu.solve(&xi)?;
        let (jmax, wmax) = w
            .iter()
            .enumerate()
            .fold((0, T::zero()), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
        if wmax <= w.dot(&x) {
            break;
        }
        x.fill(T::zero());
        x[jmax] = T::one();
    }
    // Higham's alternating-sign vector guards against badly scaled iterates.
    let alt = DVector::from_fn(dim, |i, _| {
        let sign = if i % 2 == 0 { T::one() } else { -T::one() };
        sign * (T::one() + T::lit(i as f64) / T::lit((dim.max(2) - 1) as f64))
    });
    let y = lu.solve(&alt)?;
    let alt_est = T::lit(2.0) * y.iter().fold(T::zero(), |acc, v| acc + v.abs()) / T::lit(3.0 * dim as f64);
    Some(estimate.max(alt_est))
}

/// LU factorization of a KKT matrix `[H Aᵀ; A 0]`, reusable across right-hand sides.
///
/// Rows of `A` that are linearly dependent on earlier rows are left out of the
/// factorization; [`KktFactorization::solve`] verifies afterwards that the
/// solution also satisfies them.
#[derive(Debug, Clone)]
pub struct KktFactorization<T: Scalar> {
    lu: LU<T, Dyn, Dyn>,
    a: DMatrix<T>,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    cond: T,
}

impl<T: Scalar> KktFactorization<T> {
    pub fn new(h: &DMatrix<T>, a: &DMatrix<T>) -> Result<Self, QpError> {
        let nz = h.nrows();
        if h.ncols() != nz || a.ncols() != nz {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, A is {}x{}",
                h.nrows(),
                h.ncols(),
                a.nrows(),
                a.ncols()
            )));
        }
        let (kept, dropped) = independent_rows(a, T::tol(1e-9));
        let ne = kept.len();
        let dim = nz + ne;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (nz, nz)).copy_from(h);
        for (r, &i) in kept.iter().enumerate() {
            for j in 0..nz {
                let v = a[(i, j)];
                k[(nz + r, j)] = v;
                k[(j, nz + r)] = v;
            }
        }
        let norm = one_norm(&k);
        bump(|c| c.kkt_factorizations += 1);
        let lu = k.lu();
        let singular = || QpError::SingularKkt { cond: f64::INFINITY };
        if !lu.is_invertible() {
            return Err(singular());
        }
        let inv_norm = inverse_one_norm_estimate(&lu, dim).ok_or_else(singular)?;
        let cond = norm * inv_norm;
        if !cond.is_finite() || cond > T::cond_limit() {
            return Err(QpError::SingularKkt { cond: cond.to_f64_lossy() });
        }
        Ok(KktFactorization { lu, a: a.clone(), kept, dropped, cond })
    }

    pub fn condition_estimate(&self) -> T {
        self.cond
    }

    pub fn dropped_rows(&self) -> &[usize] {
        &self.dropped
    }

    /// Solves for the stationary point with linear term `g` and right-hand side `b`.
    /// Returns `(z, λ)` with one multiplier per row of `A`.
    pub fn solve(&self, g: &DVector<T>, b: &DVector<T>) -> Result<(DVector<T>, DVector<T>), QpError> {
        let nz = self.a.ncols();
        if g.len() != nz || b.len() != self.a.nrows() {
            return Err(QpError::DimensionMismatch(format!(
                "rhs lengths ({}, {}) do not match KKT ({nz}, {})",
                g.len(),
                b.len(),
                self.a.nrows()
            )));
        }
        let ne = self.kept.len();
        let mut rhs = DVector::zeros(nz + ne);
        rhs.rows_mut(0, nz).copy_from(&(-g));
        for (r, &i) in self.kept.iter().enumerate() {
            rhs[nz + r] = b[i];
        }
        let sol = self.lu.solve(&rhs).ok_or(QpError::SingularKkt { cond: f64::INFINITY })?;
        if !all_finite(sol.iter()) {
            return Err(QpError::NonFinite);
        }
        let z = sol.rows(0, nz).into_owned();
        let mut lambda = DVector::zeros(self.a.nrows());
        for (r, &i) in self.kept.iter().enumerate() {
            lambda[i] = sol[nz + r];
        }
        let zmax = z.amax();
        for &i in &self.dropped {
            let row = self.a.row(i);
            let residual = (row * &z)[0] - b[i];
            let scale = T::one() + b[i].abs() + row.amax() * zmax;
            if residual.abs() > T::tol(1e-8) * scale {
                return Err(QpError::InconsistentConstraints { row: i, residual: residual.to_f64_lossy() });
            }
        }
        Ok((z, lambda))
    }
}

/// Solves an equality-constrained QP through one KKT factorization.
pub fn solve_eq_qp<T: Scalar>(problem: &EqQp<T>) -> Result<QpResult<T>, QpError> {
    problem.validate()?;
    let kkt = KktFactorization::new(&problem.h, &problem.a)?;
    let (z, lambda) = kkt.solve(&problem.g, &problem.b)?;
    Ok(QpResult {
        z,
        lambda,
        nu: DVector::zeros(0),
        active_rows: Vec::new(),
        status: QpStatus::Optimal,
        stats: QpStats { factorizations: 1, dropped_rows: kkt.dropped.len(), ..QpStats::default() },
        blocking_row: None,
    })
}

/// Solves an inequality-constrained QP with a cold start.
pub fn solve_iq_qp<T: Scalar>(problem: &IqQp<T>, max_iter: usize) -> Result<QpResult<T>, QpError> {
    solve_iq_qp_warm(problem, max_iter, &[])
}

/// Solves an inequality-constrained QP starting from the working set `warm`.
///
/// The warm set is trimmed to a dual-feasible subset before the active-set
/// loop starts, so any index list is accepted.
pub fn solve_iq_qp_warm<T: Scalar>(
    problem: &IqQp<T>,
    max_iter: usize,
    warm: &[usize],
) -> Result<QpResult<T>, QpError> {
    problem.validate()?;
    if problem.l.is_empty() {
        return solve_eq_qp(&problem.eq);
    }
    let eq = &problem.eq;
    let nz = eq.dim();
    let q = problem.l.len();

    let (kept, dropped) = independent_rows(&eq.a, T::tol(1e-9));
    let ne = kept.len();
    let a_kept = eq.a.select_rows(kept.iter());
    let b_kept = DVector::from_iterator(ne, kept.iter().map(|&i| eq.b[i]));

    // QR of [Aᵀ | I]: the first ne columns of Q span range(Aᵀ), the rest its complement.
    let mut stacked = DMatrix::zeros(nz, ne + nz);
    stacked.view_mut((0, 0), (nz, ne)).copy_from(&a_kept.transpose());
    stacked.view_mut((0, ne), (nz, nz)).fill_with_identity();
    let qr = stacked.qr();
    let qmat = qr.q();
    let rmat = qr.r();
    let r11 = rmat.view((0, 0), (ne, ne)).into_owned();
    let w = r11
        .transpose()
        .solve_lower_triangular(&b_kept)
        .ok_or(QpError::SingularKkt { cond: f64::INFINITY })?;
    let z0: DVector<T> = qmat.columns(0, ne) * w;
    for &i in &dropped {
        let residual = (eq.a.row(i) * &z0)[0] - eq.b[i];
        if residual.abs() > T::tol(1e-8) * (T::one() + eq.b[i].abs()) {
            return Err(QpError::InconsistentConstraints { row: i, residual: residual.to_f64_lossy() });
        }
    }
    let nr = nz - ne;
    let zbasis = qmat.columns(ne, nr).into_owned();
    let mut hr = zbasis.transpose() * &eq.h * &zbasis;
    hr = (&hr + hr.transpose()) * T::lit(0.5);
    let grad0 = &eq.h * &z0 + &eq.g;
    let gr = zbasis.transpose() * &grad0;

    let mut stats = QpStats { dropped_rows: dropped.len(), ..QpStats::default() };

    let chol = if nr > 0 {
        match Cholesky::new(hr.clone()) {
            Some(c) => Some(c),
            None => {
                return Ok(QpResult {
                    z: z0,
                    lambda: DVector::zeros(eq.a.nrows()),
                    nu: DVector::zeros(q),
                    active_rows: Vec::new(),
                    status: QpStatus::Unbounded,
                    stats,
                    blocking_row: None,
                })
            }
        }
    } else {
        None
    };

    let nmat = &problem.g_ineq * &zbasis;
    let s = &problem.l - &problem.g_ineq * &z0;
    let y0 = match &chol {
        Some(c) => -c.solve(&gr),
        None => DVector::zeros(0),
    };

    let outcome = dual_active_set(&hr, &gr, y0, &nmat, &s, max_iter, warm, &mut stats);
    let (y, working, status, blocking) = match outcome {
        DualOutcome::Done { y, working } => (y, working, QpStatus::Optimal, None),
        DualOutcome::Infeasible { y, working, row } => (y, working, QpStatus::Infeasible, Some(row)),
        DualOutcome::MaxIter { y, working } => (y, working, QpStatus::MaxIter, None),
    };

    if status != QpStatus::Optimal {
        let z = &z0 + &zbasis * &y;
        let mut active_rows = working;
        active_rows.sort_unstable();
        return Ok(QpResult {
            z,
            lambda: DVector::zeros(eq.a.nrows()),
            nu: DVector::zeros(q),
            active_rows,
            status,
            stats,
            blocking_row: blocking,
        });
    }

    // Polish: one KKT solve with the working set pinned to equality.
    let mut active_rows = working;
    active_rows.sort_unstable();
    let na = active_rows.len();
    let mut a_all = DMatrix::zeros(eq.a.nrows() + na, nz);
    a_all.view_mut((0, 0), (eq.a.nrows(), nz)).copy_from(&eq.a);
    let mut b_all = DVector::zeros(eq.a.nrows() + na);
    b_all.rows_mut(0, eq.a.nrows()).copy_from(&eq.b);
    for (r, &i) in active_rows.iter().enumerate() {
        a_all.row_mut(eq.a.nrows() + r).copy_from(&problem.g_ineq.row(i));
        b_all[eq.a.nrows() + r] = problem.l[i];
    }
    let kkt = KktFactorization::new(&eq.h, &a_all)?;
    stats.factorizations += 1;
    let (z, mult) = kkt.solve(&eq.g, &b_all)?;
    let lambda = mult.rows(0, eq.a.nrows()).into_owned();
    let mut nu = DVector::zeros(q);
    for (r, &i) in active_rows.iter().enumerate() {
        nu[i] = mult[eq.a.nrows() + r];
    }
    Ok(QpResult { z, lambda, nu, active_rows, status, stats, blocking_row: None })
}

enum DualOutcome<T: Scalar> {
    Done { y: DVector<T>, working: Vec<usize> },
    Infeasible { y: DVector<T>, working: Vec<usize>, row: usize },
    MaxIter { y: DVector<T>, working: Vec<usize> },
}

/// Solves `[Hr N_Wᵀ; N_W 0] [y; ν] = [top; bottom]` from scratch.
fn working_set_solve<T: Scalar>(
    hr: &DMatrix<T>,
    nmat: &DMatrix<T>,
    working: &[usize],
    top: &DVector<T>,
    bottom: &DVector<T>,
) -> Option<(DVector<T>, DVector<T>)> {
    let nr = hr.nrows();
    let nw = working.len();
    let dim = nr + nw;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (nr, nr)).copy_from(hr);
    for (r, &i) in working.iter().enumerate() {
        for j in 0..nr {
            let v = nmat[(i, j)];
            k[(nr + r, j)] = v;
            k[(j, nr + r)] = v;
        }
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, nr).copy_from(top);
    rhs.rows_mut(nr, nw).copy_from(bottom);
    bump(|c| c.kkt_factorizations += 1);
    let sol = k.lu().solve(&rhs)?;
    if !all_finite(sol.iter()) {
        return None;
    }
    Some((sol.rows(0, nr).into_owned(), sol.rows(nr, nw).into_owned()))
}

/// Goldfarb–Idnani dual active-set iteration for
/// `min ½ yᵀHr y + grᵀy  s.t.  N y ≤ s` with `Hr` positive definite.
#[allow(clippy::too_many_arguments)]
fn dual_active_set<T: Scalar>(
    hr: &DMatrix<T>,
    gr: &DVector<T>,
    mut y: DVector<T>,
    nmat: &DMatrix<T>,
    s: &DVector<T>,
    max_iter: usize,
    warm: &[usize],
    stats: &mut QpStats,
) -> DualOutcome<T> {
    let q = nmat.nrows();
    let nr = hr.nrows();
    let row_norms: Vec<T> = (0..q).map(|i| nmat.row(i).norm()).collect();
    let feas_tol = |i: usize| T::tol(1e-10) * (T::one() + s[i].abs());
    let hr_scale = hr.amax().max(T::lit(1e-300).max(T::default_epsilon() * T::default_epsilon()));
    let tiny = T::tol(1e-14);

    // Rows that do not depend on the free variables are either always satisfied
    // or make the problem infeasible.
    for i in 0..q {
        if row_norms[i] <= tiny * (T::one() + s[i].abs()) && s[i] < -feas_tol(i) {
            return DualOutcome::Infeasible { y, working: Vec::new(), row: i };
        }
    }
    let is_free_row = |i: usize| row_norms[i] > tiny * (T::one() + s[i].abs());

    let mut working: Vec<usize> = Vec::new();
    let mut nu: Vec<T> = Vec::new();

    if !warm.is_empty() && nr > 0 {
        let mut cand: Vec<usize> = Vec::new();
        for &i in warm {
            if i < q && is_free_row(i) && !cand.contains(&i) {
                cand.push(i);
            }
        }
        let (kept, _) = independent_rows(&nmat.select_rows(cand.iter()), T::tol(1e-9));
        cand = kept.into_iter().map(|k| cand[k]).collect();
        // Drop rows with negative multipliers until the point is dual feasible.
        while !cand.is_empty() {
            let bottom = DVector::from_iterator(cand.len(), cand.iter().map(|&i| s[i]));
            match working_set_solve(hr, nmat, &cand, &(-gr), &bottom) {
                Some((yw, mult)) => {
                    // stationarity Hr y + gr + N_Wᵀ ν = 0 gives ν = mult
                    let (kmin, vmin) = mult
                        .iter()
                        .enumerate()
                        .fold((0, T::zero()), |(bk, bv), (k, &v)| if v < bv { (k, v) } else { (bk, bv) });
                    if vmin < -T::tol(1e-12) {
                        cand.remove(kmin);
                        stats.iterations += 1;
                        bump(|c| c.active_set_iterations += 1);
                        continue;
                    }
                    y = yw;
                    working = cand.clone();
                    nu = mult.iter().map(|&v| v.max(T::zero())).collect();
                    stats.warm_started = true;
                    break;
                }
                None => break,
            }
        }
    }

    let dim = nr + q;
    let mut since_progress = 0usize;
    let mut bland = false;

    loop {
        // Pick the constraint to add.
        let viol = nmat * &y - s;
        let mut pick: Option<(usize, T)> = None;
        for i in 0..q {
            if working.contains(&i) || !is_free_row(i) {
                continue;
            }
            if viol[i] > feas_tol(i) {
                let score = viol[i] / row_norms[i];
                match pick {
                    None => pick = Some((i, score)),
                    Some((_, best)) if !bland && score > best => pick = Some((i, score)),
                    _ => {}
                }
            }
        }
        let Some((p, _)) = pick else {
            return DualOutcome::Done { y, working };
        };
        let np: DVector<T> = nmat.row(p).transpose();
        let mut nu_p = T::zero();

        loop {
            if stats.iterations >= max_iter {
                return DualOutcome::MaxIter { y, working };
            }
            stats.iterations += 1;
            bump(|c| c.active_set_iterations += 1);
            let zeros_w = DVector::zeros(working.len());
            let Some((d, r)) = working_set_solve(hr, nmat, &working, &(-&np), &zeros_w) else {
                return DualOutcome::Infeasible { y, working, row: p };
            };
            let curvature = -np.dot(&d);
            let dependent = curvature <= T::tol(1e-12) * row_norms[p] * row_norms[p] / hr_scale;

            // Largest dual step that keeps working multipliers nonnegative.
            let mut t2: Option<(T, usize)> = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk < T::zero() {
                    let t = nu[k] / (-rk);
                    if t2.is_none_or(|(best, _)| t < best) {
                        t2 = Some((t, k));
                    }
                }
            }
            let violation = (np.transpose() * &y)[0] - s[p];
            let (t, full) = if dependent {
                match t2 {
                    None => return DualOutcome::Infeasible { y, working, row: p },
                    Some((t, _)) => (t, false),
                }
            } else {
                let t1 = violation.max(T::zero()) / curvature;
                match t2 {
                    Some((tb, _)) if tb < t1 => (tb, false),
                    _ => (t1, true),
                }
            };

            if t <= tiny {
                stats.degenerate_steps += 1;
                since_progress += 1;
                if since_progress > 3 * dim && !bland {
                    bland = true;
                    stats.bland_fallback = true;
                }
            } else {
                since_progress = 0;
            }

            if !dependent {
                y.axpy(t, &d, T::one());
            }
            for (k, &rk) in r.iter().enumerate() {
                nu[k] += t * rk;
            }
            nu_p += t;

            if full {
                working.push(p);
                nu.push(nu_p);
                break;
            }
            let (_, kblock) = t2.expect("partial step requires a blocking constraint");
            working.remove(kblock);
            nu.remove(kblock);
        }
    }
}
