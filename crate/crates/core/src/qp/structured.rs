//! Multiple-shooting QP
//!
//! ```text
//! min  sum_j 0.5 [dx_j; du_j]' H_j [dx_j; du_j] + g_j'[dx_j; du_j] + 0.5 dx_M' H_N dx_M + g_N' dx_M
//! s.t. dx_0 = dx0_fixed
//!      dx_{j+1} = A_j dx_j + B_j du_j + a_j
//!      lb_j <= C_j dx_j + D_j du_j <= ub_j
//!      lb_N <= C_N dx_M + D_N du_{M-1} <= ub_N
//! ```
//!
//! Solved by eliminating the states and running the dense solver over the stacked controls.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dense::{kkt_residuals_dense, solve_dense, DenseQp, KktResiduals, QpSettings, QpStatus};
use crate::error::{Error, Result};

mod bounds_serde {
    //! Infinite bounds are written as `null`.
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        out.serialize(s)
    }

    fn read<'de, D: Deserializer<'de>>(d: D, fill: f64) -> Result<DVector<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(DVector::from_iterator(
            raw.len(),
            raw.into_iter().map(|x| x.unwrap_or(fill)),
        ))
    }

    pub mod lower {
        pub use super::serialize;
        pub fn deserialize<'de, D: serde::Deserializer<'de>>(
            d: D,
        ) -> Result<nalgebra::DVector<f64>, D::Error> {
            super::read(d, f64::NEG_INFINITY)
        }
    }

    pub mod upper {
        pub use super::serialize;
        pub fn deserialize<'de, D: serde::Deserializer<'de>>(
            d: D,
        ) -> Result<nalgebra::DVector<f64>, D::Error> {
            super::read(d, f64::INFINITY)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpStage {
    /// Hessian over `[dx; du]`.
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    /// Continuity defect `phi(x_j, u_j) - x_{j+1}`.
    pub a_vec: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    pub d_mat: DMatrix<f64>,
    #[serde(with = "bounds_serde::lower")]
    pub lb: DVector<f64>,
    #[serde(with = "bounds_serde::upper")]
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpTerminal {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    /// Coupling of the terminal rows to the last control.
    pub d_mat: DMatrix<f64>,
    #[serde(with = "bounds_serde::lower")]
    pub lb: DVector<f64>,
    #[serde(with = "bounds_serde::upper")]
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub nx: usize,
    pub nu: usize,
    pub stages: Vec<QpStage>,
    pub terminal: QpTerminal,
    /// Initial-value embedding: the fixed first state step.
    pub dx0: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub dx: Vec<DVector<f64>>,
    pub du: Vec<DVector<f64>>,
    /// Multiplier of the embedding constraint `dx_0 = dx0`.
    pub lambda_init: DVector<f64>,
    /// Continuity multipliers, one per interval.
    pub lambda: Vec<DVector<f64>>,
    /// Signed inequality multipliers per stage (positive on an active upper bound).
    pub mu: Vec<DVector<f64>>,
    pub mu_terminal: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

impl QpProblem {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.nx, self.nu);
        if self.stages.is_empty() {
            return Err(Error::invalid("QP needs at least one interval"));
        }
        if self.dx0.len() != nx {
            return Err(Error::invalid("embedding vector has wrong dimension"));
        }
        for (j, s) in self.stages.iter().enumerate() {
            let nr = s.lb.len();
            let ok = s.h.shape() == (nx + nu, nx + nu)
                && s.g.len() == nx + nu
                && s.a_mat.shape() == (nx, nx)
                && s.b_mat.shape() == (nx, nu)
                && s.a_vec.len() == nx
                && s.c_mat.shape() == (nr, nx)
                && s.d_mat.shape() == (nr, nu)
                && s.ub.len() == nr;
            if !ok {
                return Err(Error::invalid(format!(
                    "stage {j} has inconsistent dimensions"
                )));
            }
        }
        let t = &self.terminal;
        let nr = t.lb.len();
        if t.h.shape() != (nx, nx)
            || t.g.len() != nx
            || t.c_mat.shape() != (nr, nx)
            || t.d_mat.shape() != (nr, nu)
            || t.ub.len() != nr
        {
            return Err(Error::invalid("terminal block has inconsistent dimensions"));
        }
        Ok(())
    }

    fn x_offset(&self, j: usize) -> usize {
        j * (self.nx + self.nu)
    }

    fn u_offset(&self, j: usize) -> usize {
        j * (self.nx + self.nu) + self.nx
    }

    /// The same QP over all stacked variables `[x_0, u_0, x_1, u_1, .., x_M]` with explicit
    /// equality constraints: first the embedding, then continuity per interval.
    pub fn to_dense(&self) -> DenseQp {
        let (nx, nu, m) = (self.nx, self.nu, self.horizon());
        let n = m * (nx + nu) + nx;
        let n_eq = nx * (m + 1);
        let n_in: usize =
            self.stages.iter().map(|s| s.lb.len()).sum::<usize>() + self.terminal.lb.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut e_mat = DMatrix::zeros(n_eq, n);
        let mut e_vec = DVector::zeros(n_eq);
        let mut c_mat = DMatrix::zeros(n_in, n);
        let mut lb = DVector::zeros(n_in);
        let mut ub = DVector::zeros(n_in);
        for i in 0..nx {
            e_mat[(i, i)] = 1.0;
            e_vec[i] = self.dx0[i];
        }
        let mut row = 0;
        for (j, s) in self.stages.iter().enumerate() {
            let xo = self.x_offset(j);
            h.view_mut((xo, xo), (nx + nu, nx + nu)).copy_from(&s.h);
            g.rows_mut(xo, nx + nu).copy_from(&s.g);
            let er = nx * (j + 1);
            e_mat.view_mut((er, xo), (nx, nx)).copy_from(&s.a_mat);
            e_mat
                .view_mut((er, self.u_offset(j)), (nx, nu))
                .copy_from(&s.b_mat);
            let xn = self.x_offset(j + 1);
            for i in 0..nx {
                e_mat[(er + i, xn + i)] = -1.0;
                e_vec[er + i] = -s.a_vec[i];
            }
            let nr = s.lb.len();
            c_mat.view_mut((row, xo), (nr, nx)).copy_from(&s.c_mat);
            c_mat
                .view_mut((row, self.u_offset(j)), (nr, nu))
                .copy_from(&s.d_mat);
            lb.rows_mut(row, nr).copy_from(&s.lb);
            ub.rows_mut(row, nr).copy_from(&s.ub);
            row += nr;
        }
        let t = &self.terminal;
        let xo = self.x_offset(m);
        h.view_mut((xo, xo), (nx, nx)).copy_from(&t.h);
        g.rows_mut(xo, nx).copy_from(&t.g);
        let nr = t.lb.len();
        c_mat.view_mut((row, xo), (nr, nx)).copy_from(&t.c_mat);
        c_mat
            .view_mut((row, self.u_offset(m - 1)), (nr, nu))
            .copy_from(&t.d_mat);
        lb.rows_mut(row, nr).copy_from(&t.lb);
        ub.rows_mut(row, nr).copy_from(&t.ub);
        DenseQp {
            h,
            g,
            e_mat,
            e_vec,
            c_mat,
            lb,
            ub,
        }
    }

    /// Objective value at a primal point.
    pub fn objective(&self, dx: &[DVector<f64>], du: &[DVector<f64>]) -> f64 {
        let mut f = 0.0;
        for (j, s) in self.stages.iter().enumerate() {
            let w = stack(&dx[j], &du[j]);
            f += 0.5 * w.dot(&(&s.h * &w)) + s.g.dot(&w);
        }
        let xm = &dx[self.horizon()];
        f + 0.5 * xm.dot(&(&self.terminal.h * xm)) + self.terminal.g.dot(xm)
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut w = DVector::zeros(x.len() + u.len());
    w.rows_mut(0, x.len()).copy_from(x);
    w.rows_mut(x.len(), u.len()).copy_from(u);
    w
}

impl QpSolution {
    /// Primal-dual point in the ordering of [`QpProblem::to_dense`].
    pub fn to_dense_point(&self, qp: &QpProblem) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (nx, nu, m) = (qp.nx, qp.nu, qp.horizon());
        let mut z = DVector::zeros(m * (nx + nu) + nx);
        for j in 0..m {
            z.rows_mut(qp.x_offset(j), nx).copy_from(&self.dx[j]);
            z.rows_mut(qp.u_offset(j), nu).copy_from(&self.du[j]);
        }
        z.rows_mut(qp.x_offset(m), nx).copy_from(&self.dx[m]);
        let mut lambda = DVector::zeros(nx * (m + 1));
        lambda.rows_mut(0, nx).copy_from(&self.lambda_init);
        for j in 0..m {
            lambda.rows_mut(nx * (j + 1), nx).copy_from(&self.lambda[j]);
        }
        let mut mu: Vec<f64> = self.mu.iter().flat_map(|v| v.iter().copied()).collect();
        mu.extend(self.mu_terminal.iter());
        (z, lambda, DVector::from_vec(mu))
    }
}

/// KKT residuals of a candidate solution, evaluated on the uncondensed problem.
pub fn kkt_residuals(qp: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let dense = qp.to_dense();
    let (z, lambda, mu) = sol.to_dense_point(qp);
    kkt_residuals_dense(&dense, &z, &lambda, &mu)
}

/// Where a condensed inequality row came from.
#[derive(Clone, Copy)]
enum RowOrigin {
    Stage(usize, usize),
    Terminal(usize),
}

/// Solves the structured QP by condensing. On `Optimal` the returned point satisfies every
/// KKT residual to `settings.tol`; a solution that fails the certificate is reported as
/// `MaxIter`.
pub fn solve(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    qp.validate()?;
    let (nx, nu, m) = (qp.nx, qp.nu, qp.horizon());
    let nv = m * nu;
    // dx_j = P_j U + p_j; P_j only touches the first j controls
    let mut p_mats: Vec<DMatrix<f64>> = Vec::with_capacity(m + 1);
    let mut p_vecs: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
    p_mats.push(DMatrix::zeros(nx, 0));
    p_vecs.push(qp.dx0.clone());
    for (j, s) in qp.stages.iter().enumerate() {
        let mut next = DMatrix::zeros(nx, (j + 1) * nu);
        if j > 0 {
            next.columns_mut(0, j * nu)
                .copy_from(&(&s.a_mat * &p_mats[j]));
        }
        next.columns_mut(j * nu, nu).copy_from(&s.b_mat);
        p_vecs.push(&s.a_mat * &p_vecs[j] + &s.a_vec);
        p_mats.push(next);
    }

    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut lbs = Vec::new();
    let mut ubs = Vec::new();
    let mut origins = Vec::new();
    let mut constant_violation: f64 = 0.0;
    let mut push_row = |coef: DVector<f64>, off: f64, lb: f64, ub: f64, origin: RowOrigin| {
        if lb == f64::NEG_INFINITY && ub == f64::INFINITY {
            return;
        }
        if coef.amax() == 0.0 {
            constant_violation = constant_violation.max(lb - off).max(off - ub);
            return;
        }
        rows.push(coef);
        lbs.push(lb - off);
        ubs.push(ub - off);
        origins.push(origin);
    };

    for (j, s) in qp.stages.iter().enumerate() {
        let cols = (j + 1) * nu;
        // T = [P_j (padded); E_j]
        let mut t = DMatrix::zeros(nx + nu, cols);
        t.view_mut((0, 0), (nx, j * nu)).copy_from(&p_mats[j]);
        for i in 0..nu {
            t[(nx + i, j * nu + i)] = 1.0;
        }
        let off = stack(&p_vecs[j], &DVector::zeros(nu));
        let ht = &s.h * &t;
        let mut hv = h.view_mut((0, 0), (cols, cols));
        hv += t.tr_mul(&ht);
        let mut gv = g.rows_mut(0, cols);
        gv += t.tr_mul(&(&s.h * &off + &s.g));
        let coef = &s.c_mat * t.rows(0, nx) + &s.d_mat * t.rows(nx, nu);
        let offs = &s.c_mat * &p_vecs[j];
        for r in 0..s.lb.len() {
            let mut full = DVector::zeros(nv);
            full.rows_mut(0, cols).copy_from(&coef.row(r).transpose());
            push_row(full, offs[r], s.lb[r], s.ub[r], RowOrigin::Stage(j, r));
        }
    }
    let t = &qp.terminal;
    let pm = &p_mats[m];
    let hp = &t.h * pm;
    h += pm.tr_mul(&hp);
    g += pm.tr_mul(&(&t.h * &p_vecs[m] + &t.g));
    let mut coef = &t.c_mat * pm;
    {
        let mut last = coef.columns_mut((m - 1) * nu, nu);
        last += &t.d_mat;
    }
    let offs = &t.c_mat * &p_vecs[m];
    for r in 0..t.lb.len() {
        push_row(
            coef.row(r).transpose(),
            offs[r],
            t.lb[r],
            t.ub[r],
            RowOrigin::Terminal(r),
        );
    }

    let n_rows = rows.len();
    let mut c_mat = DMatrix::zeros(n_rows, nv);
    for (i, r) in rows.iter().enumerate() {
        c_mat.set_row(i, &r.transpose());
    }
    let condensed = DenseQp {
        h,
        g,
        e_mat: DMatrix::zeros(0, nv),
        e_vec: DVector::zeros(0),
        c_mat,
        lb: DVector::from_vec(lbs),
        ub: DVector::from_vec(ubs),
    };
    let dense = solve_dense(&condensed, settings)?;

    let du: Vec<DVector<f64>> = (0..m)
        .map(|j| dense.z.rows(j * nu, nu).into_owned())
        .collect();
    let mut dx = Vec::with_capacity(m + 1);
    dx.push(qp.dx0.clone());
    for (j, s) in qp.stages.iter().enumerate() {
        dx.push(&s.a_mat * &dx[j] + &s.b_mat * &du[j] + &s.a_vec);
    }
    let mut mu: Vec<DVector<f64>> = qp
        .stages
        .iter()
        .map(|s| DVector::zeros(s.lb.len()))
        .collect();
    let mut mu_terminal = DVector::zeros(t.lb.len());
    for (i, origin) in origins.iter().enumerate() {
        match *origin {
            RowOrigin::Stage(j, r) => mu[j][r] = dense.mu[i],
            RowOrigin::Terminal(r) => mu_terminal[r] = dense.mu[i],
        }
    }
    // continuity multipliers from state stationarity, backwards
    let mut lambda = vec![DVector::zeros(nx); m];
    lambda[m - 1] = &t.h * &dx[m] + &t.g + t.c_mat.tr_mul(&mu_terminal);
    for j in (1..m).rev() {
        let s = &qp.stages[j];
        let w = stack(&dx[j], &du[j]);
        let grad_x = (&s.h * &w + &s.g).rows(0, nx).into_owned();
        lambda[j - 1] = grad_x + s.c_mat.tr_mul(&mu[j]) + s.a_mat.tr_mul(&lambda[j]);
    }
    let s0 = &qp.stages[0];
    let w0 = stack(&dx[0], &du[0]);
    let grad0 = (&s0.h * &w0 + &s0.g).rows(0, nx).into_owned();
    let lambda_init = -(grad0 + s0.c_mat.tr_mul(&mu[0]) + s0.a_mat.tr_mul(&lambda[0]));

    let mut status = dense.status;
    if constant_violation > settings.tol {
        status = QpStatus::Infeasible;
    }
    let objective = qp.objective(&dx, &du);
    let mut sol = QpSolution {
        dx,
        du,
        lambda_init,
        lambda,
        mu,
        mu_terminal,
        status,
        iterations: dense.iterations,
        objective,
    };
    if sol.status == QpStatus::Optimal && kkt_residuals(qp, &sol).max() > settings.tol {
        sol.status = QpStatus::MaxIter;
    }
    Ok(sol)
}

pub fn save_qp_dump(path: &Path, qp: &QpProblem) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(qp)?)?;
    Ok(())
}

pub fn load_qp_dump(path: &Path) -> Result<QpProblem> {
    let qp: QpProblem = serde_json::from_str(&fs::read_to_string(path)?)?;
    qp.validate()?;
    Ok(qp)
}
