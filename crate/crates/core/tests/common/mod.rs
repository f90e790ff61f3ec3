//! Random instance generators and independent reference solvers shared by the
//! integration tests. Nothing here calls into the solvers under test.

#![allow(dead_code)]

use diffmpc::lmpc::{LmpcProblem, Stage};
use diffmpc::systems::{box_constraints, LinearSystem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// `MᵀM + shift·I`.
pub fn random_spd(rng: &mut impl Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    m.transpose() * m + DMatrix::identity(n, n) * shift
}

pub fn random_diag(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(0.2..3.0)))
}

/// Tracking problem with random stable-ish dynamics, diagonal weights and a
/// random reference. Box rows on the controls are added when `u_bd` is set.
pub fn random_tracking(rng: &mut impl Rng, n: usize, m: usize, horizon: usize, u_bd: Option<f64>) -> LmpcProblem<f64> {
    let a = DMatrix::identity(n, n) + random_matrix(rng, n, n) * 0.3;
    let b = random_matrix(rng, n, m);
    let q = random_diag(rng, n);
    let r = random_diag(rng, m);
    let refs = (0..horizon).map(|_| random_vector(rng, n + m)).collect();
    let (g, l) = match u_bd {
        Some(bd) => box_constraints(n, m, bd),
        None => (DMatrix::zeros(0, n + m), DVector::zeros(0)),
    };
    LmpcProblem::tracking(&a, &b, &q, &r, refs, &g, &l, random_vector(rng, n)).unwrap()
}

/// General problem: dense SPD stage costs, random linear terms and offsets.
pub fn random_general(rng: &mut impl Rng, n: usize, m: usize, horizon: usize) -> LmpcProblem<f64> {
    let stages = (0..horizon)
        .map(|_| {
            let f = random_matrix(rng, n, n + m) * 0.8;
            Stage::new(random_spd(rng, n + m, 0.5), random_vector(rng, n + m), f, random_vector(rng, n) * 0.2)
        })
        .collect();
    LmpcProblem { n, m, stages, x_init: random_vector(rng, n), reference: None }
}

pub fn double_integrator_lqr(q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize, x_init: DVector<f64>) -> LmpcProblem<f64> {
    let (a, b) = LinearSystem::double_integrator(0.01).discrete();
    let refs = vec![DVector::zeros(3); horizon];
    LmpcProblem::tracking(&a, &b, q, r, refs, &DMatrix::zeros(0, 3), &DVector::zeros(0), x_init).unwrap()
}

/// Backward Riccati recursion for `Σ_t ½(xᵀQx + uᵀRu)` over stages `0..T`
/// with dynamics linking consecutive stages. The last control influences
/// nothing and is zero, so its stage contributes `P = Q`.
pub fn riccati_first_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let m = b.ncols();
    if horizon == 1 {
        return DMatrix::zeros(m, a.nrows());
    }
    let mut p = q.clone();
    let mut k = DMatrix::zeros(m, a.nrows());
    for _ in 0..horizon - 1 {
        let s = r + b.transpose() * &p * b;
        k = s.lu().solve(&(b.transpose() * &p * a)).unwrap();
        p = q + a.transpose() * &p * (a - b * &k);
        p = (&p + p.transpose()) * 0.5;
    }
    k
}

/// Equality-constrained QP by null-space elimination: a particular solution
/// from the pseudo-inverse of `A` plus a step inside the kernel of `A`.
pub fn null_space_solve(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 {
        return h.clone().cholesky().expect("positive definite").solve(&(-g));
    }
    let z_p = a.clone().svd(true, true).solve(b, 1e-12).unwrap();
    let eig = (a.transpose() * a).symmetric_eigen();
    let basis: Vec<_> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i].abs() < 1e-10)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if basis.is_empty() {
        return z_p;
    }
    let kernel = DMatrix::from_columns(&basis);
    let reduced_h = kernel.transpose() * h * &kernel;
    let rhs = -(kernel.transpose() * (g + h * &z_p));
    let w = reduced_h.cholesky().expect("reduced Hessian positive definite").solve(&rhs);
    z_p + kernel * w
}

/// Result of the active-set enumeration oracle.
pub struct Enumerated {
    pub z: DVector<f64>,
    pub active: Vec<usize>,
    pub objective: f64,
}

/// Solves `min ½zᵀHz + gᵀz  s.t. Az = b, Gz ≤ l` by trying every subset of
/// inequality rows as equalities and keeping the KKT-consistent one.
pub fn enumerate_active_sets(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    gi: &DMatrix<f64>,
    l: &DVector<f64>,
) -> Option<Enumerated> {
    let q = gi.nrows();
    assert!(q <= 12, "enumeration is exponential");
    let nz = h.nrows();
    let e = a.nrows();
    let mut best: Option<Enumerated> = None;
    for mask in 0u32..(1 << q) {
        let rows: Vec<usize> = (0..q).filter(|i| mask & (1 << i) != 0).collect();
        let k = e + rows.len();
        let mut kkt = DMatrix::zeros(nz + k, nz + k);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(h);
        let mut aa = DMatrix::zeros(k, nz);
        let mut bb = DVector::zeros(k);
        aa.view_mut((0, 0), (e, nz)).copy_from(a);
        bb.rows_mut(0, e).copy_from(b);
        for (r, &i) in rows.iter().enumerate() {
            aa.set_row(e + r, &gi.row(i));
            bb[e + r] = l[i];
        }
        kkt.view_mut((nz, 0), (k, nz)).copy_from(&aa);
        kkt.view_mut((0, nz), (nz, k)).copy_from(&aa.transpose());
        let mut rhs = DVector::zeros(nz + k);
        rhs.rows_mut(0, nz).copy_from(&(-g));
        rhs.rows_mut(nz, k).copy_from(&bb);
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        // singular working sets can yield garbage without an error
        if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
            continue;
        }
        let z = sol.rows(0, nz).into_owned();
        let feasible = (gi * &z - l).iter().all(|v| *v <= 1e-9);
        let duals_ok = (0..rows.len()).all(|r| sol[nz + e + r] >= -1e-9);
        if feasible && duals_ok {
            let objective = 0.5 * (z.transpose() * h * &z)[0] + g.dot(&z);
            if best.as_ref().is_none_or(|b| objective < b.objective - 1e-12) {
                best = Some(Enumerated { z, active: rows, objective });
            }
        }
    }
    best
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

/// Adds inequality rows to every stage that are inactive at the current
/// optimum with slack at least `margin`.
pub fn with_interior_rows(rng: &mut impl Rng, problem: &LmpcProblem<f64>, rows: usize, margin: f64) -> LmpcProblem<f64> {
    let sol = diffmpc::lmpc::solve_lmpc(problem).unwrap();
    let nm = problem.n + problem.m;
    let mut p = problem.clone();
    for (s, tau) in p.stages.iter_mut().zip(&sol.tau) {
        let g = random_matrix(rng, rows, nm);
        let slack = DVector::from_fn(rows, |_, _| margin + rng.gen_range(0.0..1.0));
        s.ineq_rhs = &g * tau + slack;
        s.ineq = g;
    }
    p
}

/// Random strictly-interior instance with `n ≤ 4`, `m ≤ 2`, `T ≤ 10`.
/// Tracking instances carry a reference so weight targets apply.
pub fn random_interior(rng: &mut impl Rng, tracking: bool) -> LmpcProblem<f64> {
    let n = rng.gen_range(1..=4);
    let m = rng.gen_range(1..=2);
    let horizon = rng.gen_range(1..=10);
    let base = if tracking { random_tracking(rng, n, m, horizon, None) } else { random_general(rng, n, m, horizon) };
    let rows = rng.gen_range(1..=3);
    with_interior_rows(rng, &base, rows, 0.5)
}

/// Largest `|analytic − FD| / (1 + |FD|)` over the given targets.
pub fn worst_fd_mismatch(problem: &LmpcProblem<f64>, targets: &[diffmpc::grad::GradTarget], h: f64) -> f64 {
    let sol = diffmpc::lmpc::solve_lmpc(problem).unwrap();
    let solver = diffmpc::grad::GradientSolver::new(problem, &sol).unwrap();
    assert!(solver.active_sets().iter().all(Vec::is_empty), "instance must be strictly interior");
    let mut worst = 0.0f64;
    for target in targets {
        let analytic = solver.solve(target).unwrap().du1;
        let fd = diffmpc::grad::fd_gradient(problem, target, h).unwrap();
        for i in 0..fd.len() {
            worst = worst.max((analytic[i] - fd[i]).abs() / (1.0 + fd[i].abs()));
        }
    }
    worst
}
