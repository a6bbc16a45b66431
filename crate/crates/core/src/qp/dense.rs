//! Dense strictly convex QP
//!
//! ```text
//! min 0.5 z'Hz + g'z   s.t.  E z = e,   lb <= C z <= ub
//! ```
//!
//! solved with the Goldfarb-Idnani dual active-set method. Infinite bounds are ignored.
//! Multipliers follow the Lagrangian `0.5 z'Hz + g'z + lambda'(Ez - e) + mu'Cz`, so an active
//! upper bound has `mu > 0` and an active lower bound `mu < 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub e_mat: DMatrix<f64>,
    pub e_vec: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Objective after each primal step; non-decreasing for the dual method.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_equality: f64,
    pub primal_inequality: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_equality)
            .max(self.primal_inequality)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 2000,
        }
    }
}

impl DenseQp {
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            e_mat: DMatrix::zeros(0, n),
            e_vec: DVector::zeros(0),
            c_mat: DMatrix::zeros(0, n),
            lb: DVector::zeros(0),
            ub: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.h.shape() != (n, n)
            || self.e_mat.ncols() != n
            || self.e_mat.nrows() != self.e_vec.len()
            || self.c_mat.ncols() != n
            || self.c_mat.nrows() != self.lb.len()
            || self.c_mat.nrows() != self.ub.len()
        {
            return Err(Error::invalid("QP dimensions are inconsistent"));
        }
        if self
            .lb
            .iter()
            .zip(self.ub.iter())
            .any(|(l, u)| l > u || l.is_nan() || u.is_nan())
        {
            return Err(Error::invalid("QP bounds must satisfy lb <= ub"));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }
}

/// KKT residuals of a candidate primal-dual point, computed from the problem data alone.
pub fn kkt_residuals_dense(
    qp: &DenseQp,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let grad = &qp.h * z + &qp.g + qp.e_mat.transpose() * lambda + qp.c_mat.transpose() * mu;
    let eq = &qp.e_mat * z - &qp.e_vec;
    let cz = &qp.c_mat * z;
    let mut viol: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..cz.len() {
        let (l, u, c, m) = (qp.lb[i], qp.ub[i], cz[i], mu[i]);
        viol = viol.max(l - c).max(c - u);
        if m > 0.0 {
            comp = comp.max(if u.is_finite() { m * (u - c).abs() } else { m });
        } else if m < 0.0 {
            comp = comp.max(if l.is_finite() {
                -m * (c - l).abs()
            } else {
                -m
            });
        }
    }
    KktResiduals {
        stationarity: grad.amax(),
        primal_equality: eq.amax(),
        primal_inequality: viol.max(0.0),
        complementarity: comp,
    }
}

/// One-sided constraint `n'z >= b` (or `= b` for equalities).
struct Row {
    n: DVector<f64>,
    b: f64,
    /// Dense row index and side: +1 upper, -1 lower, 0 equality, 2 pinned inequality row.
    origin: usize,
    side: i8,
}

struct ActiveSet {
    /// Orthogonal factor, columns `0..q` span the active normals.
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    rows: Vec<usize>,
    u: Vec<f64>,
}

impl ActiveSet {
    fn q(&self) -> usize {
        self.rows.len()
    }

    fn compute_d(&self, n: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(n)
    }

    fn step_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.q();
        let nv = self.j.nrows();
        let mut z = DVector::zeros(nv);
        for c in q..nv {
            z.axpy(d[c], &self.j.column(c), 1.0);
        }
        z
    }

    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut sum = d[i];
            for k in i + 1..q {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        r
    }

    /// Appends a normal whose transformed vector is `d`; false when it is linearly dependent.
    fn add(&mut self, d: &mut DVector<f64>, row: usize, u: f64) -> bool {
        let nv = self.j.nrows();
        let q = self.q();
        for jj in (q + 1..nv).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..nv {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj - 1)] = a;
                self.j[(k, jj)] = xny * (t1 + a) - t2;
            }
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        if d[q].abs() <= f64::EPSILON * self.r_norm {
            for i in 0..=q {
                self.r[(i, q)] = 0.0;
            }
            return false;
        }
        self.r_norm = self.r_norm.max(d[q].abs());
        self.rows.push(row);
        self.u.push(u);
        true
    }

    /// Removes active position `pos`, restoring the triangular factor with Givens rotations.
    fn remove(&mut self, pos: usize) {
        let nv = self.j.nrows();
        let q = self.q();
        for c in pos..q - 1 {
            for i in 0..nv {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..nv {
            self.r[(i, q - 1)] = 0.0;
        }
        self.rows.remove(pos);
        self.u.remove(pos);
        let q = q - 1;
        for jj in pos..q {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..q {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(jj, k)] = a;
                self.r[(jj + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..nv {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj)] = a;
                self.j[(k, jj + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

fn infeasible(n: usize, p: usize, m: usize, iterations: usize, trace: Vec<f64>) -> DenseSolution {
    DenseSolution {
        z: DVector::zeros(n),
        lambda: DVector::zeros(p),
        mu: DVector::zeros(m),
        status: QpStatus::Infeasible,
        iterations,
        objective_trace: trace,
    }
}

/// Solves a strictly convex dense QP. `H` must be positive definite.
pub fn solve_dense(qp: &DenseQp, settings: &QpSettings) -> Result<DenseSolution> {
    qp.validate()?;
    let n = qp.n();
    let p = qp.e_vec.len();
    let m = qp.lb.len();
    let chol =
        qp.h.clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("QP Hessian is not positive definite"))?;
    let l = chol.l();
    // J = L^{-T}
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    let mut set = ActiveSet {
        j: linv.transpose(),
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
        rows: Vec::new(),
        u: Vec::new(),
    };

    let mut rows: Vec<Row> = Vec::with_capacity(p + 2 * m);
    for i in 0..p {
        rows.push(Row {
            n: qp.e_mat.row(i).transpose(),
            b: qp.e_vec[i],
            origin: i,
            side: 0,
        });
    }
    // rows pinned by equal bounds behave as equalities
    for i in 0..m {
        if qp.lb[i] == qp.ub[i] {
            rows.push(Row {
                n: qp.c_mat.row(i).transpose(),
                b: qp.lb[i],
                origin: i,
                side: 2,
            });
        }
    }
    let p_all = rows.len();
    for i in 0..m {
        if qp.lb[i] == qp.ub[i] {
            continue;
        }
        let c = qp.c_mat.row(i).transpose();
        if qp.ub[i].is_finite() {
            rows.push(Row {
                n: -&c,
                b: -qp.ub[i],
                origin: i,
                side: 1,
            });
        }
        if qp.lb[i].is_finite() {
            rows.push(Row {
                n: c,
                b: qp.lb[i],
                origin: i,
                side: -1,
            });
        }
    }

    let mut x = -chol.solve(&qp.g);
    let mut f = 0.5 * qp.g.dot(&x);
    let mut trace = vec![f];
    let mut iterations = 0;

    for k in 0..p_all {
        let np = &rows[k].n;
        let mut d = set.compute_d(np);
        let z = set.step_direction(&d);
        let r = set.dual_direction(&d);
        let zn = z.dot(np);
        let t2 = if zn.abs() > f64::EPSILON {
            (rows[k].b - np.dot(&x)) / zn
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        for (ui, ri) in set.u.iter_mut().zip(&r) {
            *ui -= t2 * ri;
        }
        f += 0.5 * t2 * t2 * zn;
        if !set.add(&mut d, k, t2) {
            return Ok(infeasible(n, p, m, iterations, trace));
        }
    }
    trace.push(f);

    let scale_tol = |row: &Row| 1e-10 * (1.0 + row.b.abs());
    let mut status = QpStatus::Optimal;
    'outer: loop {
        // most violated inactive constraint
        let mut ip = None;
        let mut worst = 0.0;
        for (i, row) in rows.iter().enumerate().skip(p_all) {
            let s = row.n.dot(&x) - row.b;
            if s < -scale_tol(row) && s < worst && !set.rows.contains(&i) {
                worst = s;
                ip = Some(i);
            }
        }
        let Some(ip) = ip else { break };
        let mut u_new = 0.0;
        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                status = QpStatus::MaxIter;
                break 'outer;
            }
            let np = &rows[ip].n;
            let mut d = set.compute_d(np);
            let z = set.step_direction(&d);
            let r = set.dual_direction(&d);
            // partial step: first active inequality whose multiplier reaches zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (pos, (&row, (&ui, &ri))) in set.rows.iter().zip(set.u.iter().zip(&r)).enumerate() {
                if row >= p_all && ri > 0.0 && ui / ri < t1 {
                    t1 = ui / ri;
                    drop = Some(pos);
                }
            }
            let zn = z.dot(np);
            let t2 = if z.norm_squared() > f64::EPSILON * f64::EPSILON {
                -(np.dot(&x) - rows[ip].b) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Ok(infeasible(n, p, m, iterations, trace));
            }
            if !t2.is_finite() {
                for (ui, ri) in set.u.iter_mut().zip(&r) {
                    *ui -= t * ri;
                }
                u_new += t;
                set.remove(drop.expect("finite partial step has a blocking constraint"));
                continue;
            }
            x.axpy(t, &z, 1.0);
            f += t * zn * (0.5 * t + u_new);
            trace.push(f);
            for (ui, ri) in set.u.iter_mut().zip(&r) {
                *ui -= t * ri;
            }
            u_new += t;
            if t == t2 {
                if !set.add(&mut d, ip, u_new) {
                    return Ok(infeasible(n, p, m, iterations, trace));
                }
                continue 'outer;
            }
            set.remove(drop.expect("partial step has a blocking constraint"));
        }
    }

    let mut lambda = DVector::zeros(p);
    let mut mu = DVector::zeros(m);
    for (&row, &u) in set.rows.iter().zip(&set.u) {
        let r = &rows[row];
        match r.side {
            0 => lambda[r.origin] = -u,
            2 => mu[r.origin] = -u,
            1 => mu[r.origin] += u,
            _ => mu[r.origin] -= u,
        }
    }
    Ok(DenseSolution {
        z: x,
        lambda,
        mu,
        status,
        iterations,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipped_scalar() {
        let mut qp =
            DenseQp::unconstrained(DMatrix::identity(1, 1), DVector::from_element(1, -10.0));
        qp.c_mat = DMatrix::identity(1, 1);
        qp.lb = DVector::from_element(1, f64::NEG_INFINITY);
        qp.ub = DVector::from_element(1, 2.0);
        let sol = solve_dense(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 2.0).abs() < 1e-14);
        assert!((sol.mu[0] - 8.0).abs() < 1e-12);
        let k = kkt_residuals_dense(&qp, &sol.z, &sol.lambda, &sol.mu);
        assert!(k.max() < 1e-12);
    }

    #[test]
    fn lower_bound_sign() {
        let mut qp =
            DenseQp::unconstrained(DMatrix::identity(1, 1), DVector::from_element(1, 10.0));
        qp.c_mat = DMatrix::identity(1, 1);
        qp.lb = DVector::from_element(1, -2.0);
        qp.ub = DVector::from_element(1, 5.0);
        let sol = solve_dense(&qp, &QpSettings::default()).unwrap();
        assert!((sol.z[0] + 2.0).abs() < 1e-14);
        assert!((sol.mu[0] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn equality_and_inconsistency() {
        let mut qp = DenseQp::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        qp.e_mat = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.e_vec = DVector::from_element(1, 2.0);
        let sol = solve_dense(&qp, &QpSettings::default()).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-14 && (sol.z[1] - 1.0).abs() < 1e-14);
        assert!(kkt_residuals_dense(&qp, &sol.z, &sol.lambda, &sol.mu).max() < 1e-12);
        qp.e_mat = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        qp.e_vec = DVector::from_vec(vec![2.0, 5.0]);
        let sol = solve_dense(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasible_bounds() {
        let mut qp = DenseQp::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.c_mat = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        qp.lb = DVector::from_vec(vec![1.0, f64::NEG_INFINITY]);
        qp.ub = DVector::from_vec(vec![f64::INFINITY, 0.0]);
        let sol = solve_dense(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn zero_candidate_stationarity_is_gradient_norm() {
        let qp = DenseQp::unconstrained(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![1.0, -4.0, 2.0]),
        );
        let k = kkt_residuals_dense(
            &qp,
            &DVector::zeros(3),
            &DVector::zeros(0),
            &DVector::zeros(0),
        );
        assert_eq!(k.stationarity, 4.0);
    }
}
