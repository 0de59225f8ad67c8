//! Dense primal active-set solver for small strictly convex QPs
//!
//! ```text
//! minimize   ½ xᵀ H x + gᵀ x
//! subject to A x ≤ b
//! ```
//!
//! starting from a feasible point. Ties (blocking constraints, most negative
//! multiplier) resolve to the lowest constraint index.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, solve_dense, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub g: Vector,
    pub a: Matrix,
    pub b: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vector,
    /// Multipliers for every row of `A` (zero for inactive rows).
    pub multipliers: Vector,
    pub active: Vec<usize>,
    pub iterations: usize,
    /// False when the iteration budget ran out before optimality.
    pub converged: bool,
}

/// Feasibility slack used when classifying constraints as active or violated.
pub const FEAS_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-12;
const MULT_TOL: f64 = 1e-10;
/// Relative residual below which a row counts as dependent on the working set.
const DEP_TOL: f64 = 1e-9;

impl QpProblem {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        0.5 * dot(x, &self.h.matvec(x)) + dot(&self.g, x)
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        (0..self.m())
            .map(|i| dot(self.a.row(i), x) - self.b[i])
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.h.rows() != n || self.h.cols() != n {
            return Err(Error::dim("qp hessian", n * n, self.h.rows() * self.h.cols()));
        }
        if (m > 0 && self.a.cols() != n) || self.a.rows() != m {
            return Err(Error::dim("qp constraint matrix", m * n, self.a.rows() * self.a.cols()));
        }
        Ok(())
    }
}

/// Solves the equality-constrained subproblem on working set `w` at `x`:
/// returns the step `p` and the multipliers of `w`.
fn eqp(prob: &QpProblem, x: &[f64], w: &[usize]) -> Result<(Vector, Vector)> {
    let n = prob.n();
    let k = w.len();
    let mut kkt = Matrix::zeros(n + k, n + k);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = prob.h[(i, j)];
        }
    }
    for (r, &ci) in w.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(ci, j)];
            kkt[(j, n + r)] = prob.a[(ci, j)];
        }
    }
    let grad: Vector = prob.h.matvec(x).iter().zip(&prob.g).map(|(a, b)| a + b).collect();
    let mut rhs = vec![0.0; n + k];
    for i in 0..n {
        rhs[i] = -grad[i];
    }
    let sol = solve_dense(&kkt, &rhs).ok_or_else(|| {
        Error::InvalidParameter("qp working-set system is singular (Hessian not positive definite?)".into())
    })?;
    Ok((sol[..n].to_vec(), sol[n..].to_vec()))
}

/// Orthonormal basis of the working-set rows (modified Gram-Schmidt).
fn orthonormal_rows(prob: &QpProblem, w: &[usize]) -> Vec<Vector> {
    let mut basis: Vec<Vector> = Vec::new();
    for &i in w {
        let r = residual(prob.a.row(i), &basis);
        let nr = dot(&r, &r).sqrt();
        if nr > 0.0 {
            basis.push(r.iter().map(|x| x / nr).collect());
        }
    }
    basis
}

fn residual(a: &[f64], basis: &[Vector]) -> Vector {
    let mut r = a.to_vec();
    for q in basis {
        let c = dot(&r, q);
        r.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
    }
    r
}

/// Rows in the span of the working set cannot block a step in its null
/// space; adding them would make the working-set system singular.
fn depends_on(a: &[f64], basis: &[Vector]) -> bool {
    let r = residual(a, basis);
    dot(&r, &r).sqrt() <= DEP_TOL * dot(a, a).sqrt()
}

pub fn solve(prob: &QpProblem, x0: &[f64], max_iter: usize) -> Result<QpSolution> {
    prob.check()?;
    let (n, m) = (prob.n(), prob.m());
    if x0.len() != n {
        return Err(Error::dim("qp start", n, x0.len()));
    }
    let viol = prob.max_violation(x0);
    if viol > FEAS_TOL * (1.0 + norm_inf(&prob.b)) {
        return Err(Error::InvalidParameter(format!("qp start point infeasible by {viol:e}")));
    }
    let mut x = x0.to_vec();
    let mut w: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (p, lam) = eqp(prob, &x, &w)?;
        if norm_inf(&p) <= STEP_TOL * (1.0 + norm_inf(&x)) {
            // most negative multiplier, lowest index on ties
            let mut drop: Option<(usize, f64)> = None;
            for (pos, &l) in lam.iter().enumerate() {
                if l < -MULT_TOL {
                    let better = match drop {
                        None => true,
                        Some((dp, dl)) => l < dl || (l == dl && w[pos] < w[dp]),
                    };
                    if better {
                        drop = Some((pos, l));
                    }
                }
            }
            match drop {
                None => {
                    let mut multipliers = vec![0.0; m];
                    for (pos, &ci) in w.iter().enumerate() {
                        multipliers[ci] = lam[pos];
                    }
                    let mut active = w.clone();
                    active.sort_unstable();
                    return Ok(QpSolution {
                        x,
                        multipliers,
                        active,
                        iterations,
                        converged: true,
                    });
                }
                Some((pos, _)) => {
                    w.remove(pos);
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        let basis = orthonormal_rows(prob, &w);
        for i in 0..m {
            if w.contains(&i) || depends_on(prob.a.row(i), &basis) {
                continue;
            }
            let ap = dot(prob.a.row(i), &p);
            if ap > 0.0 {
                let slack = (prob.b[i] - dot(prob.a.row(i), &x)).max(0.0);
                let t = slack / ap;
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        if let Some(i) = blocking {
            w.push(i);
        }
    }
    let mut active = w.clone();
    active.sort_unstable();
    Ok(QpSolution {
        x,
        multipliers: vec![0.0; m],
        active,
        iterations,
        converged: false,
    })
}
