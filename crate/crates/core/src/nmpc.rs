//! Receding-horizon controller over the cascaded LSTM model.
//!
//! With a control horizon of one the decision vector condenses to the
//! normalized control `v ∈ R³` and a scalar NOx slack `s ≥ 0`. Each SQP
//! iteration linearizes the horizon through the model Jacobians, forms a
//! Gauss-Newton QP, solves it with [`crate::qp`] and takes a damped step on
//! an exact-penalty merit function.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{AugmentedState, Channel, ControlInput, EngineModel, EngineOutputs, NOX_MAX};
use crate::error::{Error, Result};
use crate::linalg::{norm_inf, Matrix, Vector};
use crate::qp::{self, QpProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpWeights {
    pub torque: f64,
    pub nox: f64,
    pub fq: f64,
    pub du: f64,
    pub slack: f64,
}

impl Default for OcpWeights {
    fn default() -> Self {
        OcpWeights {
            torque: 1.0,
            nox: 0.2,
            fq: 0.2,
            du: 0.1,
            slack: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: usize,
    pub weights: OcpWeights,
    /// Torque error that costs `w_torque`, N·m.
    pub torque_scale: f64,
    pub nox_max: f64,
    pub u_lower: ControlInput,
    pub u_upper: ControlInput,
    /// Optional bounds on the 104 model states, normalized units.
    pub state_lower: Option<Vec<f64>>,
    pub state_upper: Option<Vec<f64>>,
    pub max_sqp_steps: usize,
    pub max_qp_iterations: usize,
    pub kkt_tol: f64,
    /// Added to the Hessian diagonal so the QP stays strictly convex.
    pub hessian_reg: f64,
    pub min_step: f64,
    /// Seed SOI and VGT values of the multi-start. Each pair, with the
    /// fuel of the warm-started solution, is screened by its cost.
    pub start_soi: Vec<f64>,
    pub start_vgt: Vec<f64>,
    /// Best screened seeds refined by a full SQP run; 0 disables the
    /// multi-start.
    pub refined_starts: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        OcpConfig {
            horizon: 5,
            weights: OcpWeights::default(),
            torque_scale: 20.0,
            nox_max: NOX_MAX,
            u_lower: ControlInput::lower(),
            u_upper: ControlInput::upper(),
            state_lower: None,
            state_upper: None,
            max_sqp_steps: 5,
            max_qp_iterations: 50,
            kkt_tol: 1e-6,
            hessian_reg: 1e-8,
            min_step: 1.0 / 1024.0,
            start_soi: vec![-1.0, 2.5, 6.0, 9.5],
            start_vgt: vec![75.0, 92.0],
            refined_starts: 8,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let weights_ok = [w.torque, w.nox, w.fq, w.du, w.slack].iter().all(|v| v.is_finite() && *v >= 0.0);
        let (lo, hi) = (self.u_lower.to_array(), self.u_upper.to_array());
        let bounds_ok = (0..3).all(|i| lo[i] < hi[i])
            && self.u_lower.clamped() == self.u_lower
            && self.u_upper.clamped() == self.u_upper;
        let ok = self.horizon >= 1
            && weights_ok
            && bounds_ok
            && self.torque_scale > 0.0
            && self.nox_max.is_finite()
            && self.max_sqp_steps >= 1
            && self.max_qp_iterations >= 1
            && self.kkt_tol > 0.0
            && self.hessian_reg > 0.0
            && self.min_step > 0.0
            && self.min_step <= 1.0
            && self.start_soi.iter().all(|v| v.is_finite())
            && self.start_vgt.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid OCP configuration: {self:?}")))
        }
    }
}

/// Centers and scales that turn physical quantities into cost units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostScales {
    pub torque_scale: f64,
    pub nox_center: f64,
    pub nox_scale: f64,
    pub fq_center: f64,
    pub fq_scale: f64,
    pub u_scale: [f64; 3],
}

impl CostScales {
    /// Physical quantities are already in cost units.
    pub fn unit() -> Self {
        CostScales {
            torque_scale: 1.0,
            nox_center: 0.0,
            nox_scale: 1.0,
            fq_center: 0.0,
            fq_scale: 1.0,
            u_scale: [1.0; 3],
        }
    }

    /// z-scores from the model's normalizer; torque uses the tracking scale.
    pub fn from_model(model: &EngineModel, cfg: &OcpConfig) -> Self {
        let n = &model.normalizer;
        CostScales {
            torque_scale: cfg.torque_scale,
            nox_center: n.mean[Channel::Nox.index()],
            nox_scale: n.std[Channel::Nox.index()],
            fq_center: n.mean[Channel::Fq.index()],
            fq_scale: n.std[Channel::Fq.index()],
            u_scale: [n.std[0], n.std[1], n.std[2]],
        }
    }
}

/// `w_T·ΔT² + w_N·NOx² + w_F·FQ² + w_Δu·‖Δu‖² + w_s·s²` in cost units.
pub fn stage_cost(
    y: &EngineOutputs,
    u: &ControlInput,
    u_prev: &ControlInput,
    t_ref: f64,
    s: f64,
    w: &OcpWeights,
    sc: &CostScales,
) -> f64 {
    let et = (y.torque - t_ref) / sc.torque_scale;
    let nox = (y.nox - sc.nox_center) / sc.nox_scale;
    let fq = (u.fq - sc.fq_center) / sc.fq_scale;
    let (a, b) = (u.to_array(), u_prev.to_array());
    let du: f64 = (0..3).map(|j| ((a[j] - b[j]) / sc.u_scale[j]).powi(2)).sum();
    w.torque * et * et + w.nox * nox * nox + w.fq * fq * fq + w.du * du + w.slack * s * s
}

/// Condensed objective: stage costs over the horizon under constant `u`,
/// with the move penalty on the first stage only and one slack term.
pub fn horizon_cost(
    outputs: &[EngineOutputs],
    u: &ControlInput,
    u_prev: &ControlInput,
    t_ref: f64,
    s: f64,
    w: &OcpWeights,
    sc: &CostScales,
) -> f64 {
    outputs
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let (prev, slack) = if i == 0 { (u_prev, s) } else { (u, 0.0) };
            stage_cost(y, u, prev, t_ref, slack, w, sc)
        })
        .sum()
}

/// Predicted trajectory under a constant normalized control, with output
/// sensitivities `dy_i/dv` (normalized outputs) and state sensitivities
/// `dx_{i+1}/dv`.
#[derive(Debug, Clone)]
pub struct HorizonPrediction {
    pub outputs: Vec<EngineOutputs>,
    pub y_normalized: Vec<[f64; 3]>,
    /// States after each step, `x_1 .. x_p`.
    pub states: Vec<AugmentedState>,
    pub dy_dv: Vec<Matrix>,
    pub dx_dv: Vec<Matrix>,
}

pub fn predict_horizon(model: &EngineModel, x0: &AugmentedState, v: &[f64; 3], p: usize) -> Result<HorizonPrediction> {
    if p == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let nx = model.state_dim();
    let mut x = x0.clone();
    let mut sens = Matrix::zeros(nx, 3);
    let mut out = HorizonPrediction {
        outputs: Vec::with_capacity(p),
        y_normalized: Vec::with_capacity(p),
        states: Vec::with_capacity(p),
        dy_dv: Vec::with_capacity(p),
        dx_dv: Vec::with_capacity(p),
    };
    for _ in 0..p {
        let (step, jac) = model.step_with_jacobians(&x, v)?;
        let mut dy = jac.dy_dx.matmul(&sens);
        dy.add_assign(&jac.dy_du);
        let mut next = jac.dx_dx.matmul(&sens);
        next.add_assign(&jac.dx_du);
        sens = next;
        out.outputs.push(model.decode_outputs(&step.y));
        out.y_normalized.push(step.y);
        out.dy_dv.push(dy);
        out.dx_dv.push(sens.clone());
        out.states.push(step.next.clone());
        x = step.next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub x: AugmentedState,
    pub u_prev: ControlInput,
}

impl ControllerState {
    pub fn new(model: &EngineModel, u_prev: ControlInput) -> Self {
        ControllerState {
            x: model.zero_state(),
            u_prev,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u_opt: ControlInput,
    /// Slack on the normalized NOx bound.
    pub slack: f64,
    pub cost: f64,
    /// Iterations of the run that produced `u_opt`.
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Solver failed and `u_prev` was returned.
    pub fallback: bool,
    /// Predicted outputs over the horizon at `u_opt`.
    pub predicted: Vec<EngineOutputs>,
    /// Merit before and after every accepted step.
    pub merit_trace: Vec<(f64, f64)>,
    /// SQP runs made, warm start included.
    pub runs: usize,
    pub solve_time_s: f64,
}

/// Gauss-Newton residual form of the condensed objective.
struct Linearization {
    pred: HorizonPrediction,
    r: Vector,
    jr: Matrix,
    /// `(NOx_i − nox_max)/σ_N` and its gradient in `v`.
    nox_excess: Vec<f64>,
    nox_grad: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct Nmpc {
    pub cfg: OcpConfig,
    pub model: EngineModel,
    pub scales: CostScales,
}

impl Nmpc {
    pub fn new(cfg: OcpConfig, model: EngineModel) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let nx = model.state_dim();
        for b in [&cfg.state_lower, &cfg.state_upper].into_iter().flatten() {
            if b.len() != nx {
                return Err(Error::dim("state bound", nx, b.len()));
            }
        }
        let scales = CostScales::from_model(&model, &cfg);
        Ok(Nmpc { cfg, model, scales })
    }

    pub fn to_normalized(&self, u: &ControlInput) -> [f64; 3] {
        self.model.normalizer.normalize_input(u)
    }

    pub fn to_physical(&self, v: &[f64; 3]) -> ControlInput {
        self.model.normalizer.denormalize_input(v)
    }

    fn v_bounds(&self) -> ([f64; 3], [f64; 3]) {
        (self.to_normalized(&self.cfg.u_lower), self.to_normalized(&self.cfg.u_upper))
    }

    fn clamp_v(&self, v: &[f64; 3]) -> [f64; 3] {
        let (lo, hi) = self.v_bounds();
        [0, 1, 2].map(|j| v[j].clamp(lo[j], hi[j]))
    }

    fn nox_excess(&self, y: &EngineOutputs) -> f64 {
        (y.nox - self.cfg.nox_max) / self.scales.nox_scale
    }

    /// Smallest admissible slack for the predicted NOx trajectory.
    pub fn required_slack(&self, outputs: &[EngineOutputs]) -> f64 {
        outputs.iter().map(|y| self.nox_excess(y)).fold(0.0, f64::max)
    }

    /// Condensed objective at a physical control.
    pub fn cost(&self, ctrl: &ControllerState, u: &ControlInput, t_ref: f64, s: f64) -> Result<f64> {
        let outputs = self.model.rollout(&ctrl.x, &vec![*u; self.cfg.horizon])?;
        Ok(horizon_cost(&outputs, u, &ctrl.u_prev, t_ref, s, &self.cfg.weights, &self.scales))
    }

    /// Cost with the slack at its optimal value for `u`.
    pub fn cost_at(&self, ctrl: &ControllerState, u: &ControlInput, t_ref: f64) -> Result<f64> {
        let outputs = self.model.rollout(&ctrl.x, &vec![*u; self.cfg.horizon])?;
        let s = self.required_slack(&outputs);
        Ok(horizon_cost(&outputs, u, &ctrl.u_prev, t_ref, s, &self.cfg.weights, &self.scales))
    }

    fn linearize(&self, ctrl: &ControllerState, v: &[f64; 3], s: f64, t_ref: f64) -> Result<Linearization> {
        let p = self.cfg.horizon;
        let pred = predict_horizon(&self.model, &ctrl.x, v, p)?;
        let w = &self.cfg.weights;
        let sc = &self.scales;
        let norm = &self.model.normalizer;
        let (sig_t, sig_n) = (norm.std[Channel::Torque.index()], norm.std[Channel::Nox.index()]);
        let v_prev = self.to_normalized(&ctrl.u_prev);
        let u = self.to_physical(v);

        let rows = 3 * p + 4;
        let mut r = Vec::with_capacity(rows);
        let mut jr = Matrix::zeros(rows, 4);
        let mut nox_excess = Vec::with_capacity(p);
        let mut nox_grad = Vec::with_capacity(p);
        let (wt, wn, wf) = (w.torque.sqrt(), w.nox.sqrt(), w.fq.sqrt());
        for i in 0..p {
            let y = &pred.outputs[i];
            let d = &pred.dy_dv[i];
            let row = r.len();
            r.push(wt * (y.torque - t_ref) / sc.torque_scale);
            r.push(wn * (y.nox - sc.nox_center) / sc.nox_scale);
            r.push(wf * (u.fq - sc.fq_center) / sc.fq_scale);
            for j in 0..3 {
                jr[(row, j)] = wt * sig_t / sc.torque_scale * d[(0, j)];
                jr[(row + 1, j)] = wn * sig_n / sc.nox_scale * d[(2, j)];
            }
            jr[(row + 2, 0)] = wf * norm.std[Channel::Fq.index()] / sc.fq_scale;
            nox_excess.push(self.nox_excess(y));
            nox_grad.push([0, 1, 2].map(|j| sig_n / sc.nox_scale * d[(2, j)]));
        }
        let wd = w.du.sqrt();
        for j in 0..3 {
            let row = r.len();
            r.push(wd * (v[j] - v_prev[j]) * norm.std[j] / sc.u_scale[j]);
            jr[(row, j)] = wd * norm.std[j] / sc.u_scale[j];
        }
        let row = r.len();
        r.push(w.slack.sqrt() * s);
        jr[(row, 3)] = w.slack.sqrt();
        if !r.iter().all(|x| x.is_finite()) || !jr.is_finite() {
            return Err(Error::NonFinite {
                layer: "OCP linearization".into(),
            });
        }
        Ok(Linearization {
            pred,
            r,
            jr,
            nox_excess,
            nox_grad,
        })
    }

    /// Total-cost value and gradient with respect to `(v, s)`.
    pub fn cost_and_gradient(&self, ctrl: &ControllerState, v: &[f64; 3], s: f64, t_ref: f64) -> Result<(f64, [f64; 4])> {
        let lin = self.linearize(ctrl, v, s, t_ref)?;
        let cost = lin.r.iter().map(|x| x * x).sum();
        let mut g = vec![0.0; 4];
        lin.jr.matvec_t_acc(&lin.r, &mut g);
        Ok((cost, [2.0 * g[0], 2.0 * g[1], 2.0 * g[2], 2.0 * g[3]]))
    }

    fn merit(&self, ctrl: &ControllerState, v: &[f64; 3], s: f64, t_ref: f64, rho: f64) -> Result<f64> {
        let u = self.to_physical(v);
        let outputs = self.model.rollout(&ctrl.x, &vec![u; self.cfg.horizon])?;
        let j = horizon_cost(&outputs, &u, &ctrl.u_prev, t_ref, s, &self.cfg.weights, &self.scales);
        let viol: f64 = outputs.iter().map(|y| (self.nox_excess(y) - s).max(0.0)).sum();
        let m = j + rho * (viol + (-s).max(0.0));
        if m.is_finite() {
            Ok(m)
        } else {
            Err(Error::NonFinite { layer: "merit".into() })
        }
    }

    fn build_qp(&self, lin: &Linearization, v: &[f64; 3], s: f64) -> (QpProblem, Vector) {
        let mut h = lin.jr.transpose().matmul(&lin.jr);
        for i in 0..4 {
            for j in 0..4 {
                h[(i, j)] *= 2.0;
            }
            h[(i, i)] += self.cfg.hessian_reg;
        }
        let mut g = vec![0.0; 4];
        lin.jr.matvec_t_acc(&lin.r, &mut g);
        g.iter_mut().for_each(|x| *x *= 2.0);

        let (lo, hi) = self.v_bounds();
        let mut a_rows: Vec<[f64; 4]> = Vec::new();
        let mut b = Vec::new();
        for j in 0..3 {
            let mut e = [0.0; 4];
            e[j] = 1.0;
            a_rows.push(e);
            b.push((hi[j] - v[j]).max(0.0));
            e[j] = -1.0;
            a_rows.push(e);
            b.push((v[j] - lo[j]).max(0.0));
        }
        a_rows.push([0.0, 0.0, 0.0, -1.0]);
        b.push(s);
        for (c, dc) in lin.nox_excess.iter().zip(&lin.nox_grad) {
            a_rows.push([dc[0], dc[1], dc[2], -1.0]);
            b.push(s - c);
        }
        let nx = self.model.state_dim();
        for (bound, sign) in [(&self.cfg.state_lower, -1.0), (&self.cfg.state_upper, 1.0)] {
            let Some(bound) = bound else { continue };
            for (x, dx) in lin.pred.states.iter().zip(&lin.pred.dx_dv) {
                let xv = x.to_vec();
                for k in 0..nx {
                    if !bound[k].is_finite() {
                        continue;
                    }
                    a_rows.push([sign * dx[(k, 0)], sign * dx[(k, 1)], sign * dx[(k, 2)], 0.0]);
                    b.push(sign * (bound[k] - xv[k]));
                }
            }
        }
        let a = Matrix::from_fn(a_rows.len(), 4, |i, j| a_rows[i][j]);
        // d0 = (0, ds0) with ds0 covering every linearized NOx row
        let ds0 = lin.nox_excess.iter().map(|c| c - s).fold(0.0, f64::max);
        (QpProblem { h, g, a, b }, vec![0.0, 0.0, 0.0, ds0])
    }

    /// SQP warm-started at `u_prev`, then refined from the best screened
    /// multi-start seeds; returns the lowest-cost run.
    pub fn sqp_solve(&self, ctrl: &ControllerState, t_ref: f64) -> OcpSolution {
        let start = Instant::now();
        let mut best = self.sqp_solve_from(ctrl, t_ref, &ctrl.u_prev);
        if best.fallback || self.cfg.refined_starts == 0 {
            return best;
        }
        let mut seeds: Vec<(f64, ControlInput)> = Vec::new();
        for &soi in &self.cfg.start_soi {
            for &vgt in &self.cfg.start_vgt {
                let u = ControlInput::new(best.u_opt.fq, soi, vgt).clamped();
                if let Ok(c) = self.cost_at(ctrl, &u, t_ref) {
                    if c.is_finite() {
                        seeds.push((c, u));
                    }
                }
            }
        }
        // stable sort keeps the listed order on ties
        seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut runs = 1;
        for (_, u) in seeds.iter().take(self.cfg.refined_starts) {
            let sol = self.sqp_solve_from(ctrl, t_ref, u);
            runs += 1;
            if !sol.fallback && sol.cost < best.cost {
                best = sol;
            }
        }
        best.runs = runs;
        best.solve_time_s = start.elapsed().as_secs_f64();
        best
    }

    pub fn sqp_solve_from(&self, ctrl: &ControllerState, t_ref: f64, warm: &ControlInput) -> OcpSolution {
        let start = Instant::now();
        let mut sol = match self.sqp_inner(ctrl, t_ref, warm) {
            Ok(s) if s.u_opt.is_finite() && s.cost.is_finite() => s,
            _ => OcpSolution {
                u_opt: ctrl.u_prev,
                slack: 0.0,
                cost: f64::NAN,
                sqp_iterations: 0,
                qp_iterations: 0,
                kkt_residual: f64::NAN,
                converged: false,
                fallback: true,
                predicted: Vec::new(),
                merit_trace: Vec::new(),
                runs: 1,
                solve_time_s: 0.0,
            },
        };
        sol.solve_time_s = start.elapsed().as_secs_f64();
        sol
    }

    fn sqp_inner(&self, ctrl: &ControllerState, t_ref: f64, warm: &ControlInput) -> Result<OcpSolution> {
        if !t_ref.is_finite() {
            return Err(Error::InvalidParameter("torque reference is not finite".into()));
        }
        let mut v = self.clamp_v(&self.to_normalized(&warm.clamped()));
        let outputs = self.model.rollout(&ctrl.x, &vec![self.to_physical(&v); self.cfg.horizon])?;
        let mut s = self.required_slack(&outputs);
        let mut rho = 10.0 * self.cfg.weights.slack.max(1.0);
        let mut qp_iters = 0;
        let mut kkt = f64::INFINITY;
        let mut iters = 0;
        let mut converged = false;
        let mut merit_trace = Vec::new();
        for _ in 0..self.cfg.max_sqp_steps {
            iters += 1;
            let lin = self.linearize(ctrl, &v, s, t_ref)?;
            let (prob, d0) = self.build_qp(&lin, &v, s);
            let qs = qp::solve(&prob, &d0, self.cfg.max_qp_iterations)?;
            qp_iters += qs.iterations;
            let d = qs.x;
            kkt = norm_inf(&d);
            if kkt <= self.cfg.kkt_tol {
                converged = true;
                break;
            }
            // rows 0..7 are the control box and s >= 0
            let lam_max = qs.multipliers.iter().skip(7).fold(0.0, |m: f64, l| m.max(*l));
            rho = rho.max(2.0 * lam_max);
            let m0 = self.merit(ctrl, &v, s, t_ref, rho)?;
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= self.cfg.min_step {
                let vt = self.clamp_v(&[0, 1, 2].map(|j| v[j] + alpha * d[j]));
                let st = (s + alpha * d[3]).max(0.0);
                let mt = self.merit(ctrl, &vt, st, t_ref, rho)?;
                if mt <= m0 {
                    merit_trace.push((m0, mt));
                    accepted = Some((vt, st));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((vt, st)) = accepted else { break };
            v = vt;
            s = st;
            // slack above the predicted excess only adds cost
            let outputs = self.model.rollout(&ctrl.x, &vec![self.to_physical(&v); self.cfg.horizon])?;
            let need = self.required_slack(&outputs);
            if s > need {
                s = need;
            }
        }
        let u_opt = self.to_physical(&v).clamped();
        let predicted = self.model.rollout(&ctrl.x, &vec![u_opt; self.cfg.horizon])?;
        let slack = self.required_slack(&predicted);
        let cost = horizon_cost(&predicted, &u_opt, &ctrl.u_prev, t_ref, slack, &self.cfg.weights, &self.scales);
        Ok(OcpSolution {
            u_opt,
            slack,
            cost,
            sqp_iterations: iters,
            qp_iterations: qp_iters,
            kkt_residual: kkt,
            converged,
            fallback: false,
            predicted,
            merit_trace,
            runs: 1,
            solve_time_s: 0.0,
        })
    }

    /// Open-loop propagation of the model state with the applied control.
    pub fn estimator_update(&self, ctrl: &ControllerState, u_applied: &ControlInput) -> Result<ControllerState> {
        if !u_applied.within_bounds() {
            return Err(Error::OutOfBounds(format!("applied control {u_applied:?} outside bounds")));
        }
        let (_, x) = self.model.forward_step(&ctrl.x, u_applied)?;
        Ok(ControllerState {
            x,
            u_prev: *u_applied,
        })
    }

    /// Solve, apply the first move, propagate the estimator.
    pub fn control_cycle(&self, ctrl: &ControllerState, t_ref: f64) -> Result<(ControlInput, OcpSolution, ControllerState)> {
        let sol = self.sqp_solve(ctrl, t_ref);
        let u = sol.u_opt;
        let next = self.estimator_update(ctrl, &u)?;
        Ok((u, sol, next))
    }
}
