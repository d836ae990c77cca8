//! Solvers for [`ApproxProgram`]s.
//!
//! Quadratic programs go through a dual active-set method: it starts at the
//! unconstrained minimizer `H⁻¹c`, repeatedly adds the lowest-index violated
//! constraint, and keeps the dual iterate feasible throughout. The final
//! working set is polished by solving its equality KKT system. When no
//! feasible point exists a least-infeasibility program is solved to report
//! how far the constraints are from being satisfiable.
//!
//! Smooth programs use sequential quadratic programming from a feasible start
//! with an Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::program::{ApproxProgram, ProgramKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Primal feasibility and stationarity tolerance.
    pub tol: f64,
    /// Slack below which a constraint counts as active.
    pub tol_active: f64,
    /// Override for the iteration guard (default `10·(k+r)`, at least 50).
    pub max_iter: Option<usize>,
    /// KKT target for smooth programs.
    pub smooth_tol: f64,
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            tol_active: 1e-7,
            max_iter: None,
            smooth_tol: 1e-7,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub beta: Vec<f64>,
    /// One multiplier per constraint row; zero off the active set.
    pub gamma: Vec<f64>,
    /// Working set at termination, ascending.
    pub active: Vec<usize>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Active rows with both multiplier and slack near zero.
    pub sc_flags: Vec<usize>,
    /// Whether the active rows are linearly independent.
    pub licq: bool,
    /// Least achievable `max(Cβ − d)` when infeasible.
    pub infeasibility: Option<f64>,
    pub warnings: Vec<String>,
}

impl SolveResult {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Fails unless the solve reached an optimum.
    pub fn require_optimal(&self) -> Result<()> {
        match self.status {
            SolveStatus::Optimal => Ok(()),
            SolveStatus::Infeasible => Err(Error::Solver(format!(
                "constraints are infeasible (least violation {:.3e})",
                self.infeasibility.unwrap_or(f64::NAN)
            ))),
            SolveStatus::IterationLimit => Err(Error::Solver(format!(
                "iteration limit reached after {} iterations",
                self.iterations
            ))),
            SolveStatus::Unbounded => Err(Error::Solver("objective is unbounded below".into())),
        }
    }
}

/// KKT residual of `min ½βᵀHβ − cᵀβ s.t. Cβ ≤ d` at `(β, γ)`: the largest of
/// stationarity, primal infeasibility, complementarity and dual sign
/// violations, all in the max norm.
pub fn kkt_residual(
    grad: &DVector<f64>,
    cmat: &DMatrix<f64>,
    d: &DVector<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> f64 {
    let station = if cmat.nrows() > 0 {
        (grad + cmat.tr_mul(gamma)).amax()
    } else {
        grad.amax()
    };
    let mut worst = station;
    let slack = cmat * beta - d;
    for j in 0..d.len() {
        worst = worst.max(slack[j].max(0.0));
        worst = worst.max((gamma[j] * slack[j]).abs());
        worst = worst.max((-gamma[j]).max(0.0));
    }
    worst
}

fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigen().eigenvalues.min()
}

struct DualOutcome {
    beta: DVector<f64>,
    active: Vec<usize>,
    mult: Vec<f64>,
    iterations: usize,
    status: SolveStatus,
}

/// Dual active-set core. `h` must be positive definite.
fn dual_active_set(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    cmat: &DMatrix<f64>,
    d: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DualOutcome> {
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("QP Hessian is not positive definite".into()))?;
    let hinv = chol.inverse();
    let k = c.len();
    let r = d.len();
    let mut x = chol.solve(c);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let slack = |x: &DVector<f64>, j: usize| d[j] - cmat.row(j).dot(&x.transpose());
    let row_scale: Vec<f64> = (0..r).map(|j| 1.0 + cmat.row(j).amax()).collect();

    loop {
        let p = (0..r).find(|&j| !active.contains(&j) && slack(&x, j) < -tol * row_scale[j]);
        let Some(p) = p else {
            return Ok(DualOutcome {
                beta: x,
                active,
                mult: u,
                iterations,
                status: SolveStatus::Optimal,
            });
        };
        // constraint normal in the `n·x ≥ b` convention
        let np: DVector<f64> = -cmat.row(p).transpose();
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(DualOutcome {
                    beta: x,
                    active,
                    mult: u,
                    iterations,
                    status: SolveStatus::IterationLimit,
                });
            }
            let q = active.len();
            let (z, rv) = if q == 0 {
                (&hinv * &np, DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(k, q, |i, j| -cmat[(active[j], i)]);
                let hn = &hinv * &nmat;
                let m = nmat.tr_mul(&hn);
                let rhs = hn.tr_mul(&np);
                let rv = m
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Solver("working set became linearly dependent".into()))?;
                (&hinv * &np - &hn * &rv, rv)
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (idx, &rj) in rv.iter().enumerate() {
                if rj > 1e-14 {
                    let t = u[idx] / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(idx);
                    }
                }
            }
            let zn = z.dot(&np);
            let z_zero = z.amax() <= 1e-13 * (1.0 + (&hinv * &np).amax());
            let t2 = if !z_zero && zn > 0.0 {
                -slack(&x, p) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if t.is_infinite() {
                return Ok(DualOutcome {
                    beta: x,
                    active,
                    mult: u,
                    iterations,
                    status: SolveStatus::Infeasible,
                });
            }
            for (idx, &rj) in rv.iter().enumerate() {
                u[idx] = (u[idx] - t * rj).max(0.0);
            }
            up += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t2 <= t1 {
                active.push(p);
                u.push(up);
                break;
            }
            let drop = drop.expect("finite partial step names a constraint");
            active.remove(drop);
            u.remove(drop);
        }
    }
}

/// Solves the equality system of the working set.
fn polish(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    cmat: &DMatrix<f64>,
    d: &DVector<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let k = c.len();
    let q = active.len();
    let mut kkt = DMatrix::zeros(k + q, k + q);
    kkt.view_mut((0, 0), (k, k)).copy_from(h);
    let mut rhs = DVector::zeros(k + q);
    rhs.rows_mut(0, k).copy_from(c);
    for (a, &j) in active.iter().enumerate() {
        for i in 0..k {
            kkt[(k + a, i)] = cmat[(j, i)];
            kkt[(i, k + a)] = cmat[(j, i)];
        }
        rhs[k + a] = d[j];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, k).into_owned(), sol.rows(k, q).into_owned()))
}

fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|&&s| s > tol * top.max(1.0)).count()
}

/// Minimizes `½βᵀHβ − cᵀβ` subject to `Cβ ≤ d` for a PSD `H`.
pub fn solve_dense_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    cmat: &DMatrix<f64>,
    d: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let k = c.len();
    let r = d.len();
    if h.nrows() != k || h.ncols() != k || cmat.nrows() != r || (r > 0 && cmat.ncols() != k) {
        return Err(Error::Argument("QP dimensions are inconsistent".into()));
    }
    if h.iter().chain(c.iter()).chain(cmat.iter()).chain(d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("QP data contain non-finite values".into()));
    }
    let cmat = if r == 0 { DMatrix::zeros(0, k) } else { cmat.clone() };
    let mut warnings = Vec::new();
    let mut heff = (h + h.transpose()) * 0.5;
    if min_eigenvalue(&heff) < 1e-10 {
        let ridge = 1e-10 * heff.trace().max(1.0);
        for i in 0..k {
            heff[(i, i)] += ridge;
        }
        let w = format!("Hessian is near-singular; added ridge {ridge:.3e}");
        log::warn!("{w}");
        warnings.push(w);
    }
    let max_iter = opts.max_iter.unwrap_or((10 * (k + r)).max(50));
    let out = dual_active_set(&heff, c, &cmat, d, opts.tol, max_iter)?;

    let mut beta = out.beta;
    let mut active = out.active;
    let mut gamma = DVector::zeros(r);
    for (&j, &g) in active.iter().zip(&out.mult) {
        gamma[j] = g;
    }
    let grad = |b: &DVector<f64>| &heff * b - c;

    if out.status == SolveStatus::Infeasible {
        let (b, v) = least_infeasible(&cmat, d);
        let objective = 0.5 * b.dot(&(h * &b)) - c.dot(&b);
        return Ok(SolveResult {
            beta: b.iter().copied().collect(),
            gamma: vec![0.0; r],
            active: Vec::new(),
            objective,
            kkt_residual: f64::INFINITY,
            iterations: out.iterations,
            status: SolveStatus::Infeasible,
            sc_flags: Vec::new(),
            licq: true,
            infeasibility: Some(v),
            warnings,
        });
    }

    if opts.polish && out.status == SolveStatus::Optimal && !active.is_empty() {
        let before = kkt_residual(&grad(&beta), &cmat, d, &beta, &gamma);
        if let Some((pb, pg)) = polish(&heff, c, &cmat, d, &active) {
            let mut g2 = DVector::zeros(r);
            for (a, &j) in active.iter().enumerate() {
                g2[j] = pg[a];
            }
            let after = kkt_residual(&grad(&pb), &cmat, d, &pb, &g2);
            if after <= before && pg.iter().all(|&v| v >= -opts.tol_active) {
                beta = pb;
                gamma = g2.map(|v| v.max(0.0));
            }
        }
    }
    active.sort_unstable();

    let slack = d - &cmat * &beta;
    let sc_flags: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&j| gamma[j].abs() < 10.0 * opts.tol && slack[j].abs() < 10.0 * opts.tol)
        .collect();
    let act_rows = DMatrix::from_fn(active.len(), k, |a, i| cmat[(active[a], i)]);
    let licq = rank(&act_rows, 1e-10) == active.len();
    if !licq {
        warnings.push("active constraint rows are linearly dependent".into());
    }
    let kkt = kkt_residual(&grad(&beta), &cmat, d, &beta, &gamma);
    let objective = 0.5 * beta.dot(&(h * &beta)) - c.dot(&beta);
    Ok(SolveResult {
        beta: beta.iter().copied().collect(),
        gamma: gamma.iter().copied().collect(),
        active,
        objective,
        kkt_residual: kkt,
        iterations: out.iterations,
        status: out.status,
        sc_flags,
        licq,
        infeasibility: None,
        warnings,
    })
}

/// `min ½‖s‖² + ½ρ‖β‖²` subject to `Cβ − s ≤ d`; returns `β` and the
/// resulting largest violation `max_j (Cβ − d)_j`.
fn least_infeasible(cmat: &DMatrix<f64>, d: &DVector<f64>) -> (DVector<f64>, f64) {
    let (r, k) = (cmat.nrows(), cmat.ncols());
    let rho = 1e-8;
    let mut h = DMatrix::zeros(k + r, k + r);
    for i in 0..k {
        h[(i, i)] = rho;
    }
    for j in 0..r {
        h[(k + j, k + j)] = 1.0;
    }
    let mut a = DMatrix::zeros(r, k + r);
    a.view_mut((0, 0), (r, k)).copy_from(cmat);
    for j in 0..r {
        a[(j, k + j)] = -1.0;
    }
    let zero = DVector::zeros(k + r);
    let beta = match dual_active_set(&h, &zero, &a, d, 1e-12, 50 * (k + 2 * r)) {
        Ok(o) => o.beta.rows(0, k).into_owned(),
        Err(_) => DVector::zeros(k),
    };
    let v = (cmat * &beta - d).max().max(0.0);
    (beta, v)
}

/// Solves a quadratic or smooth convex program.
pub fn solve(program: &ApproxProgram, opts: &SolveOptions) -> Result<SolveResult> {
    match program.kind {
        ProgramKind::Quadratic => solve_dense_qp(&program.hessian(), &program.c, &program.cmat, &program.d, opts),
        ProgramKind::SmoothConvex => solve_smooth(program, opts),
    }
}

/// Quadratic-program entry point; panics on malformed programs, which the
/// builders never produce.
pub fn solve_qp(program: &ApproxProgram, opts: &SolveOptions) -> SolveResult {
    solve_dense_qp(&program.hessian(), &program.c, &program.cmat, &program.d, opts)
        .expect("builder programs are well formed")
}

/// Sequential quadratic programming for [`ProgramKind::SmoothConvex`].
pub fn solve_smooth(program: &ApproxProgram, opts: &SolveOptions) -> Result<SolveResult> {
    let obj = program
        .smooth
        .as_ref()
        .ok_or_else(|| Error::Config("program has no smooth objective".into()))?;
    let k = program.k();
    let r = program.r();
    let (cmat, d) = (&program.cmat, &program.d);
    let mut warnings = Vec::new();

    let zero = DVector::zeros(k);
    let mut beta = if r == 0 || (cmat * &zero - d).max() <= 0.0 {
        zero
    } else {
        let proj = solve_dense_qp(&DMatrix::identity(k, k), &DVector::zeros(k), cmat, d, opts)?;
        if proj.status != SolveStatus::Optimal {
            return Ok(SolveResult { status: proj.status, ..proj });
        }
        proj.beta_vector()
    };

    let max_iter = opts.max_iter.unwrap_or(200);
    let mut gamma = DVector::zeros(r);
    let mut active = Vec::new();
    let mut kkt = f64::INFINITY;
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (f, g, hess) = obj.evaluate(&beta);
        // subproblem in the step p: ½pᵀHp + gᵀp s.t. Cp ≤ d − Cβ
        let rhs = d - cmat * &beta;
        let sub_opts = SolveOptions { polish: true, ..*opts };
        let sub = solve_dense_qp(&hess, &(-&g), cmat, &rhs, &sub_opts)?;
        if sub.status != SolveStatus::Optimal {
            return Err(Error::Solver(format!("SQP subproblem ended with status {:?}", sub.status)));
        }
        let p = sub.beta_vector();
        gamma = DVector::from_column_slice(&sub.gamma);
        active = sub.active.clone();
        kkt = kkt_residual(&g, cmat, d, &beta, &gamma);
        if kkt <= opts.smooth_tol {
            status = SolveStatus::Optimal;
            break;
        }
        let slope = g.dot(&p);
        if slope >= 0.0 {
            // no descent available at this precision
            if kkt <= 1e3 * opts.smooth_tol {
                status = SolveStatus::Optimal;
            }
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &p * alpha;
            let fc = obj.value(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * alpha * slope {
                beta = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            warnings.push("line search stalled".into());
            break;
        }
        if beta.amax() > 1e8 {
            status = SolveStatus::Unbounded;
            break;
        }
    }
    if status == SolveStatus::IterationLimit {
        warnings.push(format!("SQP stopped after {iterations} iterations with KKT residual {kkt:.3e}"));
    }
    let slack = d - cmat * &beta;
    let sc_flags = active
        .iter()
        .copied()
        .filter(|&j: &usize| gamma[j].abs() < 10.0 * opts.tol && slack[j].abs() < 10.0 * opts.tol)
        .collect();
    let act_rows = DMatrix::from_fn(active.len(), k, |a, i| cmat[(active[a], i)]);
    let licq = rank(&act_rows, 1e-10) == active.len();
    Ok(SolveResult {
        objective: obj.value(&beta),
        beta: beta.iter().copied().collect(),
        gamma: gamma.iter().copied().collect(),
        active,
        kkt_residual: kkt,
        iterations,
        status,
        sc_flags,
        licq,
        infeasibility: None,
        warnings,
    })
}
