//! Small dense convex QP solver.
//!
//! Solves
//!
//! ```text
//!   min  ½ xᵀ P x + qᵀ x
//!   s.t. G x ≤ h
//! ```
//!
//! with a primal-dual interior-point method (Mehrotra predictor-corrector).
//! Rows of `G` are stored sparsely since the scheduling programs are mostly
//! bound and band-like rows; the Newton system is reduced to the normal
//! matrix `P + Gᵀ diag(z/s) G` and factored with a dense Cholesky.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::SolveError;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub entries: Vec<(usize, f64)>,
}

impl SparseRow {
    fn dot(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: Vec<f64>,
    pub g: Vec<SparseRow>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    /// Target for the complementarity gap `sᵀz`, relative to `max(1, |objective|)`.
    pub gap_tol: f64,
    /// Primal and dual residual tolerance (relative to the data scale).
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            gap_tol: 1e-9,
            feas_tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of `G x ≤ h`.
    pub z: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Incremental construction of a QP with diagonal quadratic term.
#[derive(Debug, Default, Clone)]
pub struct QpBuilder {
    lin: Vec<f64>,
    quad: Vec<f64>,
    rows: Vec<SparseRow>,
    rhs: Vec<f64>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.lin.len()
    }

    /// Adds a variable with objective `quad·x² + lin·x` (note: no ½ on `quad`).
    pub fn add_var(&mut self, lin: f64, quad: f64, lower: Option<f64>, upper: Option<f64>) -> usize {
        let j = self.lin.len();
        self.lin.push(lin);
        self.quad.push(quad);
        if let Some(lo) = lower {
            self.add_le(vec![(j, -1.0)], -lo);
        }
        if let Some(hi) = upper {
            self.add_le(vec![(j, 1.0)], hi);
        }
        j
    }

    /// Adds the row `Σ a_j x_j ≤ rhs`.
    pub fn add_le(&mut self, entries: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(SparseRow { entries });
        self.rhs.push(rhs);
    }

    pub fn build(self) -> QpProblem {
        let n = self.lin.len();
        let mut p = DMatrix::zeros(n, n);
        for (j, &c) in self.quad.iter().enumerate() {
            p[(j, j)] = 2.0 * c;
        }
        QpProblem {
            p,
            q: self.lin,
            g: self.rows,
            h: self.rhs,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest step in (0, 1] keeping `v + a·dv ≥ 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.p * &xv)) + self.q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gx(&self, x: &[f64]) -> Vec<f64> {
        self.g.iter().map(|r| r.dot(x)).collect()
    }

    fn gt_mul(&self, y: &[f64], out: &mut [f64]) {
        for (row, &yi) in self.g.iter().zip(y) {
            for &(j, a) in &row.entries {
                out[j] += a * yi;
            }
        }
    }

    fn normal_matrix(&self, d: &[f64], reg: f64) -> DMatrix<f64> {
        let n = self.num_vars();
        let mut m = self.p.clone();
        for (row, &di) in self.g.iter().zip(d) {
            for &(j, aj) in &row.entries {
                let w = di * aj;
                for &(k, ak) in &row.entries {
                    m[(j, k)] += w * ak;
                }
            }
        }
        for j in 0..n {
            m[(j, j)] += reg;
        }
        m
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution, SolveError> {
        let n = self.num_vars();
        let m = self.g.len();
        if n == 0 {
            return Ok(QpSolution {
                x: Vec::new(),
                z: vec![0.0; m],
                objective: 0.0,
                iterations: 0,
                gap: 0.0,
                primal_residual: 0.0,
                dual_residual: 0.0,
            });
        }
        if m == 0 {
            return self.solve_unconstrained();
        }

        let h_scale = inf_norm(&self.h).max(1.0);
        let q_scale = inf_norm(&self.q).max(1.0);

        // Starting point: least-squares fit of Gx + s = h, shifted into the
        // positive orthant.
        let mut x = {
            let ones = vec![1.0; m];
            let mut rhs = self.q.iter().map(|v| -v).collect::<Vec<_>>();
            self.gt_mul(&self.h, &mut rhs);
            let mat = self.normal_matrix(&ones, 1e-8);
            match mat.cholesky() {
                Some(c) => c.solve(&DVector::from_vec(rhs)).as_slice().to_vec(),
                None => vec![0.0; n],
            }
        };
        let gx0 = self.gx(&x);
        let mut s: Vec<f64> = self.h.iter().zip(&gx0).map(|(h, g)| h - g).collect();
        let mut z: Vec<f64> = s.iter().map(|v| -v).collect();
        let shift_s = -s.iter().cloned().fold(f64::INFINITY, f64::min);
        if shift_s >= 0.0 {
            s.iter_mut().for_each(|v| *v += 1.0 + shift_s);
        }
        let shift_z = -z.iter().cloned().fold(f64::INFINITY, f64::min);
        if shift_z >= 0.0 {
            z.iter_mut().for_each(|v| *v += 1.0 + shift_z);
        }

        let mut r_d = vec![0.0; n];
        let mut r_p = vec![0.0; m];
        let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut best_dres = f64::INFINITY;
        let mut stalled = 0usize;
        for iter in 0..settings.max_iter {
            // Residuals.
            let xv = DVector::from_column_slice(&x);
            let px = &self.p * &xv;
            let mut gtz = vec![0.0; n];
            self.gt_mul(&z, &mut gtz);
            for j in 0..n {
                r_d[j] = px[j] + self.q[j] + gtz[j];
            }
            let gx = self.gx(&x);
            for i in 0..m {
                r_p[i] = gx[i] + s[i] - self.h[i];
            }
            let gap: f64 = s.iter().zip(&z).map(|(a, b)| a * b).sum();
            let mu = gap / m as f64;
            let objective = 0.5 * xv.dot(&px) + self.q.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            let pres = inf_norm(&r_p) / h_scale.max(inf_norm(&gx)).max(inf_norm(&s));
            let dres = inf_norm(&r_d)
                / q_scale
                    .max(inf_norm(px.as_slice()))
                    .max(inf_norm(&gtz));
            last = (pres, dres, gap);
            let gap_ok = gap <= settings.gap_tol * objective.abs().max(1.0);
            if dres < best_dres * 0.5 {
                best_dres = dres;
                stalled = 0;
            } else {
                stalled += 1;
            }
            // Normal equations limit attainable accuracy; once the gap is
            // closed and the dual residual stops improving, a residual at
            // the square-root level only perturbs the objective negligibly.
            let stalled_ok = stalled >= 10 && dres <= settings.feas_tol.sqrt();
            if pres <= settings.feas_tol && gap_ok && (dres <= settings.feas_tol || stalled_ok) {
                log::trace!("qp converged: n={n} m={m} iterations={iter}");
                return Ok(QpSolution {
                    x,
                    z,
                    objective,
                    iterations: iter,
                    gap,
                    primal_residual: pres,
                    dual_residual: dres,
                });
            }

            let d: Vec<f64> = z.iter().zip(&s).map(|(zi, si)| zi / si).collect();
            let factor = {
                let base = self.normal_matrix(&d, 0.0);
                let diag_max = (0..n).map(|j| base[(j, j)].abs()).fold(1.0, f64::max);
                let mut reg = 1e-14 * diag_max;
                loop {
                    let mut mat = base.clone();
                    for j in 0..n {
                        mat[(j, j)] += reg;
                    }
                    if let Some(c) = mat.cholesky() {
                        break c;
                    }
                    reg *= 100.0;
                    if reg > 1e-4 * diag_max {
                        return Err(SolveError::Numerical(format!(
                            "normal matrix not positive definite at iteration {iter}"
                        )));
                    }
                }
            };

            let newton = |r_c: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                let corr: Vec<f64> = (0..m).map(|i| (r_c[i] - z[i] * r_p[i]) / s[i]).collect();
                let mut rhs: Vec<f64> = r_d.iter().map(|v| -v).collect();
                self.gt_mul(&corr, &mut rhs);
                let dx = factor.solve(&DVector::from_vec(rhs)).as_slice().to_vec();
                let gdx = self.gx(&dx);
                let dz: Vec<f64> = (0..m).map(|i| d[i] * gdx[i] - corr[i]).collect();
                let ds: Vec<f64> = (0..m).map(|i| -r_p[i] - gdx[i]).collect();
                (dx, ds, dz)
            };

            let rc: Vec<f64> = if gap_ok {
                // Gap already small enough: pure centering, work on feasibility.
                (0..m).map(|i| s[i] * z[i] - mu).collect()
            } else {
                // Predictor.
                let rc_aff: Vec<f64> = s.iter().zip(&z).map(|(a, b)| a * b).collect();
                let (_, ds_a, dz_a) = newton(&rc_aff);
                let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
                let mu_aff: f64 = (0..m)
                    .map(|i| (s[i] + a_aff * ds_a[i]) * (z[i] + a_aff * dz_a[i]))
                    .sum::<f64>()
                    / m as f64;
                let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
                // Corrector.
                (0..m)
                    .map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu)
                    .collect()
            };
            let (dx, ds, dz) = newton(&rc);
            let step = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
            if !step.is_finite() || step < 1e-14 {
                return Err(SolveError::Numerical(format!("step collapsed at iteration {iter}")));
            }
            for j in 0..n {
                x[j] += step * dx[j];
            }
            for i in 0..m {
                s[i] = (s[i] + step * ds[i]).max(1e-300);
                z[i] = (z[i] + step * dz[i]).max(1e-300);
            }
        }
        Err(SolveError::NotConverged {
            iterations: settings.max_iter,
            primal_residual: last.0,
            dual_residual: last.1,
            gap: last.2,
        })
    }

    fn solve_unconstrained(&self) -> Result<QpSolution, SolveError> {
        let n = self.num_vars();
        let chol = self
            .p
            .clone()
            .cholesky()
            .ok_or_else(|| SolveError::Numerical("unconstrained QP is not strictly convex".into()))?;
        let rhs = DVector::from_iterator(n, self.q.iter().map(|v| -v));
        let x = chol.solve(&rhs).as_slice().to_vec();
        let objective = self.objective(&x);
        Ok(QpSolution {
            x,
            z: Vec::new(),
            objective,
            iterations: 1,
            gap: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
        })
    }
}
