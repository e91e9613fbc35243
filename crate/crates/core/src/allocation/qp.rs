//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves
//!
//! ```text
//! minimize    1/2 x^T H x + c^T x
//! subject to  A x  = b
//!             C x >= d
//! ```
//!
//! with `H` symmetric positive definite. The method starts from the
//! unconstrained minimum and adds violated constraints one at a time while
//! keeping dual feasibility, so every iterate is optimal for the subset of
//! constraints currently active.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_ineq: DMatrix<f64>,
    pub d_ineq: DVector<f64>,
}

impl DenseQp {
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn num_ineq(&self) -> usize {
        self.c_ineq.nrows()
    }

    /// Value `n_k^T x - b_k` of constraint `k` in the combined numbering (equalities first).
    fn slack(&self, k: usize, x: &DVector<f64>) -> f64 {
        let me = self.num_eq();
        if k < me {
            self.a_eq.row(k).tr_dot(x) - self.b_eq[k]
        } else {
            self.c_ineq.row(k - me).tr_dot(x) - self.d_ineq[k - me]
        }
    }

    fn row_vector(&self, k: usize) -> (DVector<f64>, f64) {
        let me = self.num_eq();
        if k < me {
            (self.a_eq.row(k).transpose(), self.b_eq[k])
        } else {
            (self.c_ineq.row(k - me).transpose(), self.d_ineq[k - me])
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Largest equality residual and largest inequality violation at `x`.
    pub fn violations(&self, x: &DVector<f64>) -> (f64, f64) {
        let eq = (&self.a_eq * x - &self.b_eq).amax();
        let ineq = (&self.d_ineq - &self.c_ineq * x).iter().fold(0.0f64, |m, &v| m.max(v));
        (if self.num_eq() == 0 { 0.0 } else { eq }, ineq)
    }
}

#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Active constraints in combined numbering.
    pub active: Vec<usize>,
    /// Lagrange multiplier of every constraint (zero when inactive).
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("infeasible: constraint {constraint} cannot be satisfied (violation {violation:e})")]
    Infeasible { constraint: usize, violation: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Inequality violation (scaled by the row norm) treated as satisfied.
    pub feasibility_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { feasibility_tol: 1e-12, max_iterations: 2000 }
    }
}

/// Orthogonal factor `J` and triangular `R` with `J^T N = [R; 0]` for the
/// active normals `N`, where `J = L^{-T} Q` and `H = L L^T`.
struct Factors {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factors {
    fn rotate_columns(&mut self, a: usize, b: usize, c: f64, s: f64) {
        for k in 0..self.j.nrows() {
            let (x, y) = (self.j[(k, a)], self.j[(k, b)]);
            self.j[(k, a)] = c * x + s * y;
            self.j[(k, b)] = -s * x + c * y;
        }
    }

    /// Append a constraint whose transformed normal is `d = J^T n`.
    /// Returns false if the normal is linearly dependent on the active set.
    fn add(&mut self, mut d: DVector<f64>) -> bool {
        let n = d.len();
        let q = self.q;
        for k in (q + 1..n).rev() {
            let (a, b) = (d[k - 1], d[k]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[k - 1] = h;
            d[k] = 0.0;
            self.rotate_columns(k - 1, k, c, s);
        }
        let scale = d.amax().max(1.0);
        if q >= n || d[q].abs() <= 1e-13 * scale {
            return false;
        }
        for k in 0..=q {
            self.r[(k, q)] = d[k];
        }
        self.q += 1;
        true
    }

    /// Remove the active constraint at position `l` and restore triangularity.
    fn drop(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for k in l..q - 1 {
            let (a, b) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q - 1 {
                let (x, y) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * x + s * y;
                self.r[(k + 1, col)] = -s * x + c * y;
            }
            self.rotate_columns(k, k + 1, c, s);
        }
        self.q -= 1;
    }

    /// `R^{-1} d[..q]` by back substitution.
    fn back_substitute(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.q;
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }
}

/// Solve `qp`. `warm` lists constraints active at a previous, similar
/// solution; they are tried first when several constraints are violated.
pub fn solve(qp: &DenseQp, warm: &[usize], opts: &SolverOptions) -> Result<DenseSolution, QpError> {
    let n = qp.dim();
    let me = qp.num_eq();
    let m = me + qp.num_ineq();

    let chol = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| QpError::Numerical("Hessian is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| QpError::Numerical("singular Cholesky factor".into()))?;
    let mut f = Factors { j: l_inv.transpose(), r: DMatrix::zeros(n, n), q: 0 };
    let mut x = chol.solve(&(-&qp.linear));

    let row_norm: Vec<f64> = (0..m).map(|k| qp.row_vector(k).0.norm().max(1e-300)).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut sign: Vec<f64> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut in_active = vec![false; m];
    let mut warm_mask = vec![false; m];
    for &k in warm {
        if k < m {
            warm_mask[k] = true;
        }
    }
    let mut iterations = 0;

    loop {
        // Pick the next constraint: pending equalities first, then the most
        // violated inequality, preferring warm-start candidates.
        let mut pick: Option<(usize, f64)> = None;
        for k in 0..me {
            if !in_active[k] {
                pick = Some((k, qp.slack(k, &x)));
                break;
            }
        }
        if pick.is_none() {
            let mut best: Option<(usize, f64, bool)> = None;
            for k in me..m {
                if in_active[k] {
                    continue;
                }
                let scaled = qp.slack(k, &x) / row_norm[k];
                if scaled < -opts.feasibility_tol {
                    let better = match best {
                        None => true,
                        Some((_, bs, bw)) => (warm_mask[k] && !bw) || (warm_mask[k] == bw && scaled < bs),
                    };
                    if better {
                        best = Some((k, scaled, warm_mask[k]));
                    }
                }
            }
            pick = best.map(|(k, _, _)| (k, qp.slack(k, &x)));
        }
        let Some((p, s0)) = pick else { break };

        let (np_raw, bp_raw) = qp.row_vector(p);
        let sp = if p < me && s0 > 0.0 { -1.0 } else { 1.0 };
        let np = np_raw * sp;
        let bp = bp_raw * sp;
        let mut s = np.dot(&x) - bp;
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > opts.max_iterations {
                return Err(QpError::IterationLimit(opts.max_iterations));
            }
            let d = f.j.transpose() * &np;
            let q = f.q;
            let z = f.j.columns(q, n - q) * d.rows(q, n - q);
            let r = f.back_substitute(&d);

            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (idx, &k) in active.iter().enumerate() {
                if k >= me && r[idx] > 0.0 {
                    let ratio = u[idx] / r[idx];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(idx);
                    }
                }
            }
            let zn = z.dot(&np);
            let z_scale = np.norm() * np.norm();
            let t2 = if z.norm() > 1e-14 * np.norm().max(1.0) && zn > 1e-15 * z_scale { -s / zn } else { f64::INFINITY };

            if t2.is_infinite() && t1.is_infinite() {
                if p < me && s.abs() <= 1e-9 * (1.0 + bp.abs()) {
                    // Redundant equality already satisfied.
                    in_active[p] = true;
                    active.push(p);
                    sign.push(sp);
                    u.push(0.0);
                    break;
                }
                return Err(QpError::Infeasible { constraint: p, violation: -s / row_norm[p] });
            }

            if t2.is_infinite() {
                for (idx, ui) in u.iter_mut().enumerate() {
                    *ui -= t1 * r[idx];
                }
                u_p += t1;
                let l = drop_at.expect("finite t1 has a blocking constraint");
                in_active[active[l]] = false;
                active.remove(l);
                sign.remove(l);
                u.remove(l);
                f.drop(l);
                continue;
            }

            let t = t1.min(t2);
            x += &z * t;
            for (idx, ui) in u.iter_mut().enumerate() {
                *ui -= t * r[idx];
            }
            u_p += t;

            if t2 <= t1 {
                let d = f.j.transpose() * &np;
                if !f.add(d) {
                    return Err(QpError::Numerical(format!("constraint {p} is linearly dependent on the active set")));
                }
                in_active[p] = true;
                active.push(p);
                sign.push(sp);
                u.push(u_p);
                break;
            }
            let l = drop_at.expect("partial step has a blocking constraint");
            in_active[active[l]] = false;
            active.remove(l);
            sign.remove(l);
            u.remove(l);
            f.drop(l);
            s = np.dot(&x) - bp;
        }
    }

    let mut multipliers = DVector::zeros(m);
    for ((&k, &sg), &ui) in active.iter().zip(&sign).zip(&u) {
        multipliers[k] = sg * ui;
    }
    let objective = qp.objective(&x);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(QpError::Numerical("non-finite iterate".into()));
    }
    Ok(DenseSolution { x, objective, active, multipliers, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unconstrained(h: &[f64], c: &[f64]) -> DenseQp {
        let n = h.len();
        DenseQp {
            hessian: DMatrix::from_diagonal(&DVector::from_column_slice(h)),
            linear: DVector::from_column_slice(c),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            c_ineq: DMatrix::zeros(0, n),
            d_ineq: DVector::zeros(0),
        }
    }

    #[test]
    fn unconstrained_minimum() {
        let qp = unconstrained(&[2.0, 4.0], &[-2.0, 4.0]);
        let s = solve(&qp, &[], &SolverOptions::default()).unwrap();
        assert_relative_eq!(s.x, DVector::from_vec(vec![1.0, -1.0]), epsilon = 1e-14);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn equality_projection() {
        // min x^2 + y^2 s.t. x + y = 2 -> (1, 1).
        let mut qp = unconstrained(&[2.0, 2.0], &[0.0, 0.0]);
        qp.a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.b_eq = DVector::from_vec(vec![2.0]);
        let s = solve(&qp, &[], &SolverOptions::default()).unwrap();
        assert_relative_eq!(s.x, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-14);
        assert_relative_eq!(s.multipliers[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn inequality_becomes_active_then_drops() {
        // min (x-3)^2 + (y-3)^2 s.t. x <= 1, x + y <= 3, y >= 0.
        let mut qp = unconstrained(&[2.0, 2.0], &[-6.0, -6.0]);
        qp.c_ineq = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, -1.0, -1.0, 0.0, 1.0]);
        qp.d_ineq = DVector::from_vec(vec![-1.0, -3.0, 0.0]);
        let s = solve(&qp, &[], &SolverOptions::default()).unwrap();
        assert_relative_eq!(s.x, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-12);
        let (eq, ineq) = qp.violations(&s.x);
        assert_eq!(eq, 0.0);
        assert!(ineq <= 1e-12);
    }

    #[test]
    fn reports_infeasible_constraint() {
        let mut qp = unconstrained(&[1.0], &[0.0]);
        qp.c_ineq = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        qp.d_ineq = DVector::from_vec(vec![2.0, -1.0]);
        match solve(&qp, &[], &SolverOptions::default()) {
            Err(QpError::Infeasible { .. }) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_gives_same_answer() {
        let mut qp = unconstrained(&[2.0, 2.0], &[-6.0, -6.0]);
        qp.c_ineq = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, -1.0, -1.0, 0.0, 1.0]);
        qp.d_ineq = DVector::from_vec(vec![-1.0, -3.0, 0.0]);
        let cold = solve(&qp, &[], &SolverOptions::default()).unwrap();
        let warm = solve(&qp, &cold.active, &SolverOptions::default()).unwrap();
        assert_relative_eq!(cold.x, warm.x, epsilon = 1e-12);
        assert!(warm.iterations <= cold.iterations);
    }

    /// Projected-gradient reference solution for box-constrained problems.
    fn box_reference(h: &[f64], c: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
        (0..h.len()).map(|i| (-c[i] / h[i]).clamp(lo[i], hi[i])).collect()
    }

    proptest! {
        #[test]
        fn diagonal_box_problems_match_clamped_minimum(
            h in proptest::collection::vec(0.1f64..10.0, 4),
            c in proptest::collection::vec(-10.0f64..10.0, 4),
            w in proptest::collection::vec(0.1f64..2.0, 4),
        ) {
            let mut qp = unconstrained(&h, &c);
            let n = 4;
            let mut rows = DMatrix::zeros(2 * n, n);
            let mut d = DVector::zeros(2 * n);
            for i in 0..n {
                rows[(2 * i, i)] = 1.0;
                d[2 * i] = -w[i];
                rows[(2 * i + 1, i)] = -1.0;
                d[2 * i + 1] = -w[i];
            }
            qp.c_ineq = rows;
            qp.d_ineq = d;
            let s = solve(&qp, &[], &SolverOptions::default()).unwrap();
            let lo: Vec<f64> = w.iter().map(|v| -v).collect();
            let expect = box_reference(&h, &c, &lo, &w);
            for i in 0..n {
                prop_assert!((s.x[i] - expect[i]).abs() < 1e-10);
            }
        }
    }
}
