//! Synthetic diesel-engine plant and the feedforward calibration-map
//! benchmark controller.
//!
//! One call to [`plant_step`] advances one engine cycle:
//!
//! ```text
//! v        = v0 + (1 - v0)·(vgt - 70)/30
//! p_target = 1 + k_b·v·(n/1500)^e_n·(f_b + fq/80)
//! p'       = p + (p_target - p)/τ_p
//! η        = 1 - c_η·(soi - soi_opt)²
//! ψ        = 1 - exp(-k_ψ·k_λ·p'/fq)
//! torque   = k_t·fq·η·ψ - (f0 + f1·(n/1000)²)
//! θ*       = a_p·(p' - 1) + a_f·fq/80 - a_s·soi
//! θ'       = θ + (θ* - θ)/τ_θ
//! nox      = k_n·(1500/n)^e_s·exp(a·θ')·(fq/40)^b
//! ```
//!
//! Outputs are evaluated on the updated state. Measurement noise is added
//! by [`Plant`], never by [`plant_step`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::read_text;
use crate::engine::{ControlInput, EngineOutputs, FQ_BOUNDS, SOI_BOUNDS, VGT_BOUNDS};
use crate::error::{Error, Result};

pub const SPEED_RANGE: (f64, f64) = (1000.0, 2000.0);
pub const AMBIENT_PRESSURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Manifold-pressure time constant, cycles.
    pub tau_p: f64,
    pub boost_gain: f64,
    pub boost_speed_exp: f64,
    pub boost_fuel_base: f64,
    /// Effective turbine opening at the lowest VGT rate.
    pub vgt_floor: f64,
    /// Torque per mg of fuel at full efficiency.
    pub k_torque: f64,
    pub soi_opt: f64,
    pub eta_curvature: f64,
    pub afr_gain: f64,
    pub psi_rate: f64,
    pub friction_base: f64,
    pub friction_speed: f64,
    pub theta_pressure: f64,
    pub theta_fuel: f64,
    pub theta_soi: f64,
    /// Thermal-state time constant, cycles.
    pub tau_theta: f64,
    pub k_nox: f64,
    pub nox_theta_gain: f64,
    pub nox_fuel_exp: f64,
    pub nox_speed_exp: f64,
    pub noise_torque: f64,
    pub noise_p_man: f64,
    pub noise_nox: f64,
    pub seed: u64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            tau_p: 4.0,
            boost_gain: 0.9,
            boost_speed_exp: 1.0,
            boost_fuel_base: 0.3,
            vgt_floor: 0.2,
            k_torque: 5.0,
            soi_opt: 2.0,
            eta_curvature: 0.003,
            afr_gain: 50.0,
            psi_rate: 3.0,
            friction_base: 15.0,
            friction_speed: 6.0,
            theta_pressure: 0.3,
            theta_fuel: 0.35,
            theta_soi: 0.1,
            tau_theta: 2.0,
            k_nox: 200.0,
            nox_theta_gain: 1.0,
            nox_fuel_exp: 0.5,
            nox_speed_exp: 2.0,
            noise_torque: 0.5,
            noise_p_man: 0.005,
            noise_nox: 2.0,
            seed: 0,
        }
    }
}

impl PlantParams {
    /// Defaults with all measurement noise switched off.
    pub fn noiseless() -> Self {
        PlantParams {
            noise_torque: 0.0,
            noise_p_man: 0.0,
            noise_nox: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_p", self.tau_p), ("tau_theta", self.tau_theta)] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::InvalidParameter(format!("plant `{name}` must be >= 1 cycle (got {v})")));
            }
        }
        let positive = [
            ("k_torque", self.k_torque),
            ("afr_gain", self.afr_gain),
            ("psi_rate", self.psi_rate),
            ("k_nox", self.k_nox),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("plant `{name}` must be > 0 (got {v})")));
            }
        }
        for (name, v) in [
            ("noise_torque", self.noise_torque),
            ("noise_p_man", self.noise_p_man),
            ("noise_nox", self.noise_nox),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("plant `{name}` must be >= 0 (got {v})")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let p: PlantParams = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Intake manifold pressure, bar.
    pub p_man: f64,
    /// Pseudo combustion temperature driving NOx.
    pub t_thermal: f64,
}

impl PlantState {
    pub fn rest() -> Self {
        PlantState {
            p_man: AMBIENT_PRESSURE,
            t_thermal: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.p_man.is_finite() && self.t_thermal.is_finite() && self.p_man >= AMBIENT_PRESSURE
    }
}

fn check_inputs(u: &ControlInput, speed: f64) -> Result<()> {
    let checks = [
        ("fq", u.fq, FQ_BOUNDS),
        ("soi", u.soi, SOI_BOUNDS),
        ("vgt", u.vgt, VGT_BOUNDS),
        ("speed", speed, SPEED_RANGE),
    ];
    for (name, v, (lo, hi)) in checks {
        if !(v >= lo && v <= hi) {
            return Err(Error::OutOfBounds(format!("{name} = {v} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

pub fn p_target(params: &PlantParams, u: &ControlInput, speed: f64) -> f64 {
    let v = params.vgt_floor + (1.0 - params.vgt_floor) * (u.vgt - VGT_BOUNDS.0) / (VGT_BOUNDS.1 - VGT_BOUNDS.0);
    AMBIENT_PRESSURE
        + params.boost_gain
            * v
            * (speed / 1500.0).powf(params.boost_speed_exp)
            * (params.boost_fuel_base + u.fq / FQ_BOUNDS.1)
}

fn theta_target(params: &PlantParams, u: &ControlInput, p_man: f64) -> f64 {
    params.theta_pressure * (p_man - AMBIENT_PRESSURE) + params.theta_fuel * u.fq / FQ_BOUNDS.1
        - params.theta_soi * u.soi
}

pub fn efficiency(params: &PlantParams, soi: f64) -> f64 {
    1.0 - params.eta_curvature * (soi - params.soi_opt).powi(2)
}

fn outputs(params: &PlantParams, u: &ControlInput, speed: f64, s: &PlantState) -> EngineOutputs {
    let psi = 1.0 - (-params.psi_rate * params.afr_gain * s.p_man / u.fq).exp();
    let friction = params.friction_base + params.friction_speed * (speed / 1000.0).powi(2);
    let torque = params.k_torque * u.fq * efficiency(params, u.soi) * psi - friction;
    let nox = params.k_nox
        * (1500.0 / speed).powf(params.nox_speed_exp)
        * (params.nox_theta_gain * s.t_thermal).exp()
        * (u.fq / 40.0).powf(params.nox_fuel_exp);
    EngineOutputs {
        torque,
        p_man: s.p_man,
        nox,
    }
}

/// Advances one noise-free engine cycle.
pub fn plant_step(
    params: &PlantParams,
    state: &PlantState,
    u: &ControlInput,
    speed: f64,
) -> Result<(EngineOutputs, PlantState)> {
    check_inputs(u, speed)?;
    let pt = p_target(params, u, speed);
    let p_man = (state.p_man + (pt - state.p_man) / params.tau_p).max(AMBIENT_PRESSURE);
    let th = theta_target(params, u, p_man);
    let next = PlantState {
        p_man,
        t_thermal: state.t_thermal + (th - state.t_thermal) / params.tau_theta,
    };
    Ok((outputs(params, u, speed, &next), next))
}

/// Equilibrium of the plant under constant `u`.
pub fn steady_state(params: &PlantParams, u: &ControlInput, speed: f64) -> Result<(EngineOutputs, PlantState)> {
    check_inputs(u, speed)?;
    let p_man = p_target(params, u, speed);
    let s = PlantState {
        p_man,
        t_thermal: theta_target(params, u, p_man),
    };
    Ok((outputs(params, u, speed, &s), s))
}

/// Plant with its own measurement-noise stream.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: PlantParams,
    pub state: PlantState,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(params: PlantParams) -> Result<Self> {
        params.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Ok(Plant {
            params,
            state: PlantState::rest(),
            rng,
        })
    }

    pub fn with_seed(mut params: PlantParams, seed: u64) -> Result<Self> {
        params.seed = seed;
        Plant::new(params)
    }

    /// Steps the plant and returns measured outputs.
    pub fn step(&mut self, u: &ControlInput, speed: f64) -> Result<EngineOutputs> {
        let (y, next) = plant_step(&self.params, &self.state, u, speed)?;
        self.state = next;
        let mut noise = |sd: f64| {
            if sd > 0.0 {
                Normal::new(0.0, sd).expect("sd > 0").sample(&mut self.rng)
            } else {
                0.0
            }
        };
        let (nt, np, nn) = (
            noise(self.params.noise_torque),
            noise(self.params.noise_p_man),
            noise(self.params.noise_nox),
        );
        Ok(EngineOutputs {
            torque: y.torque + nt,
            p_man: y.p_man + np,
            nox: (y.nox + nn).max(0.0),
        })
    }
}

/// Fixed, speed-scheduled injection timing and turbine rate used to
/// calibrate the benchmark map. Not emission-optimal by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPolicy {
    /// SOI at `speed_lo` and its change per rpm.
    pub soi_at_lo: f64,
    pub soi_slope: f64,
    pub vgt_at_lo: f64,
    pub vgt_slope: f64,
    pub speed_lo: f64,
}

impl Default for BenchmarkPolicy {
    fn default() -> Self {
        BenchmarkPolicy {
            soi_at_lo: -2.0,
            soi_slope: 2.0 / 600.0,
            vgt_at_lo: 100.0,
            vgt_slope: -20.0 / 600.0,
            speed_lo: 1200.0,
        }
    }
}

impl BenchmarkPolicy {
    pub fn soi_vgt(&self, speed: f64) -> (f64, f64) {
        let d = speed - self.speed_lo;
        (
            (self.soi_at_lo + self.soi_slope * d).clamp(SOI_BOUNDS.0, SOI_BOUNDS.1),
            (self.vgt_at_lo + self.vgt_slope * d).clamp(VGT_BOUNDS.0, VGT_BOUNDS.1),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkMap {
    /// Reference torque axis, N·m, strictly increasing.
    pub torque_grid: Vec<f64>,
    /// Speed axis, rpm, strictly increasing.
    pub speed_grid: Vec<f64>,
    /// Tables indexed `[torque][speed]`.
    pub fq: Vec<Vec<f64>>,
    pub soi: Vec<Vec<f64>>,
    pub vgt: Vec<Vec<f64>>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.len() >= 2 && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

/// Bracketing cell and local coordinate of `x` on `grid`, clamped to the hull.
fn locate(grid: &[f64], x: f64) -> (usize, f64, bool) {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let clamped = !(x >= lo && x <= hi);
    let x = x.clamp(lo, hi);
    let i = grid.partition_point(|g| *g <= x).clamp(1, grid.len() - 1) - 1;
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]), clamped)
}

impl BenchmarkMap {
    pub fn validate(&self) -> Result<()> {
        if !strictly_increasing(&self.torque_grid) || !strictly_increasing(&self.speed_grid) {
            return Err(Error::InvalidParameter(
                "benchmark grids must be finite and strictly increasing with at least two nodes".into(),
            ));
        }
        let tables = [("fq", &self.fq, FQ_BOUNDS), ("soi", &self.soi, SOI_BOUNDS), ("vgt", &self.vgt, VGT_BOUNDS)];
        for (name, t, (lo, hi)) in tables {
            if t.len() != self.torque_grid.len() || t.iter().any(|r| r.len() != self.speed_grid.len()) {
                return Err(Error::InvalidParameter(format!("benchmark table `{name}` has the wrong shape")));
            }
            if t.iter().flatten().any(|v| !(*v >= lo && *v <= hi)) {
                return Err(Error::InvalidParameter(format!("benchmark table `{name}` leaves [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn interp(&self, table: &[Vec<f64>], it: usize, wt: f64, is: usize, ws: f64) -> f64 {
        let a = table[it][is] * (1.0 - ws) + table[it][is + 1] * ws;
        let b = table[it + 1][is] * (1.0 - ws) + table[it + 1][is + 1] * ws;
        a * (1.0 - wt) + b * wt
    }

    /// Bilinear lookup. The flag is set when the query was clamped to the hull.
    pub fn lookup(&self, t_ref: f64, speed: f64) -> (ControlInput, bool) {
        let (it, wt, ct) = locate(&self.torque_grid, t_ref);
        let (is, ws, cs) = locate(&self.speed_grid, speed);
        let u = ControlInput::new(
            self.interp(&self.fq, it, wt, is, ws),
            self.interp(&self.soi, it, wt, is, ws),
            self.interp(&self.vgt, it, wt, is, ws),
        );
        // convex combinations of in-bound nodes stay in bounds up to rounding
        (u.clamped(), ct || cs)
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let m: BenchmarkMap = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("benchmark map serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, &path.display().to_string())
    }
}

/// `benchmark_control`: the map's control for `(t_ref, speed)` and whether
/// the query had to be clamped.
pub fn benchmark_control(t_ref: f64, speed: f64, map: &BenchmarkMap) -> (ControlInput, bool) {
    map.lookup(t_ref, speed)
}

/// Fuel quantity giving steady torque `t_ref` at the policy's SOI/VGT.
pub fn steady_fuel_for_torque(
    params: &PlantParams,
    policy: &BenchmarkPolicy,
    t_ref: f64,
    speed: f64,
) -> Result<f64> {
    let (soi, vgt) = policy.soi_vgt(speed);
    let fail = |reason: &str| Error::Calibration {
        torque: t_ref,
        speed,
        reason: reason.to_string(),
    };
    let torque = |fq: f64| -> Result<f64> { Ok(steady_state(params, &ControlInput::new(fq, soi, vgt), speed)?.0.torque - t_ref) };
    let (mut lo, mut hi) = FQ_BOUNDS;
    let (flo, fhi) = (torque(lo)?, torque(hi)?);
    if flo > 0.0 || fhi < 0.0 {
        return Err(fail(&format!(
            "target not bracketed by fuel bounds (torque error {flo:.2} .. {fhi:.2} N·m)"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if torque(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn calibrate_benchmark(
    params: &PlantParams,
    policy: &BenchmarkPolicy,
    speed_grid: &[f64],
    torque_grid: &[f64],
) -> Result<BenchmarkMap> {
    if !strictly_increasing(speed_grid) || !strictly_increasing(torque_grid) {
        return Err(Error::InvalidParameter("calibration grids must be strictly increasing".into()));
    }
    let mut map = BenchmarkMap {
        torque_grid: torque_grid.to_vec(),
        speed_grid: speed_grid.to_vec(),
        fq: Vec::new(),
        soi: Vec::new(),
        vgt: Vec::new(),
    };
    for &t in torque_grid {
        let mut rows = (Vec::new(), Vec::new(), Vec::new());
        for &n in speed_grid {
            let (soi, vgt) = policy.soi_vgt(n);
            rows.0.push(steady_fuel_for_torque(params, policy, t, n)?);
            rows.1.push(soi);
            rows.2.push(vgt);
        }
        map.fq.push(rows.0);
        map.soi.push(rows.1);
        map.vgt.push(rows.2);
    }
    map.validate()?;
    Ok(map)
}

/// Grid used by the default benchmark calibration.
pub fn default_grids() -> (Vec<f64>, Vec<f64>) {
    let speed = (0..=5).map(|i| 1000.0 + 200.0 * i as f64).collect();
    let torque = (0..=6).map(|i| 80.0 + 40.0 * i as f64).collect();
    (speed, torque)
}
