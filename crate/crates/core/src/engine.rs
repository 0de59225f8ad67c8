//! Two-level cascaded LSTM surrogate of the engine.
//!
//! The performance net maps the controls `u = [FQ, SOI, VGT]` to torque and
//! intake manifold pressure. The emission net sees `u` concatenated with the
//! performance net's outputs and predicts NOx. Each net owns one LSTM layer;
//! the four recurrent vectors form the controller state
//! `x = [h1, h2, c1, c2]`.
//!
//! All network arithmetic happens in normalized coordinates. Inputs are
//! z-scored with the training statistics. Outputs of a linear head are
//! z-scored too; outputs of a ReLU head are scaled by `σ` only, so that the
//! ReLU floor coincides with the physical zero of the channel.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_model, write_model, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::nn::{Activation, LstmState};
use crate::recurrent::{NetShape, RecurrentNet};

/// Hidden width of both LSTM layers and of the interior FC layers.
pub const ENGINE_WIDTH: usize = 26;

pub const FQ_BOUNDS: (f64, f64) = (10.0, 80.0);
pub const SOI_BOUNDS: (f64, f64) = (-2.0, 11.0);
pub const VGT_BOUNDS: (f64, f64) = (70.0, 100.0);
pub const NOX_MAX: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Fuel quantity, mg/cycle.
    pub fq: f64,
    /// Start of main injection, CAD aTDC.
    pub soi: f64,
    /// Variable geometry turbine rate, %.
    pub vgt: f64,
}

impl ControlInput {
    pub fn new(fq: f64, soi: f64, vgt: f64) -> Self {
        ControlInput { fq, soi, vgt }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.fq, self.soi, self.vgt]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        ControlInput::new(a[0], a[1], a[2])
    }

    pub fn lower() -> Self {
        ControlInput::new(FQ_BOUNDS.0, SOI_BOUNDS.0, VGT_BOUNDS.0)
    }

    pub fn upper() -> Self {
        ControlInput::new(FQ_BOUNDS.1, SOI_BOUNDS.1, VGT_BOUNDS.1)
    }

    pub fn within_bounds(&self) -> bool {
        let (lo, hi) = (Self::lower().to_array(), Self::upper().to_array());
        self.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= lo[i] && *v <= hi[i])
    }

    pub fn clamped(&self) -> Self {
        let (lo, hi) = (Self::lower().to_array(), Self::upper().to_array());
        let a = self.to_array();
        ControlInput::from_array([0, 1, 2].map(|i| a[i].clamp(lo[i], hi[i])))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOutputs {
    /// Output torque, N·m.
    pub torque: f64,
    /// Intake manifold pressure, bar.
    pub p_man: f64,
    /// Engine-out NOx, ppm.
    pub nox: f64,
}

impl EngineOutputs {
    pub fn to_array(self) -> [f64; 3] {
        [self.torque, self.p_man, self.nox]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        EngineOutputs {
            torque: a[0],
            p_man: a[1],
            nox: a[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Fq,
    Soi,
    Vgt,
    Torque,
    PMan,
    Nox,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Fq,
        Channel::Soi,
        Channel::Vgt,
        Channel::Torque,
        Channel::PMan,
        Channel::Nox,
    ];
    pub const INPUTS: [Channel; 3] = [Channel::Fq, Channel::Soi, Channel::Vgt];
    pub const OUTPUTS: [Channel; 3] = [Channel::Torque, Channel::PMan, Channel::Nox];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Fq => "fq",
            Channel::Soi => "soi",
            Channel::Vgt => "vgt",
            Channel::Torque => "torque",
            Channel::PMan => "p_man",
            Channel::Nox => "nox",
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownChannel(s.to_string()))
    }
}

/// Per-channel z-score statistics, computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl Normalizer {
    pub fn new(mean: [f64; 6], std: [f64; 6]) -> Result<Self> {
        let n = Normalizer { mean, std };
        n.validate()?;
        Ok(n)
    }

    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; 6],
            std: [1.0; 6],
        }
    }

    /// Mean and (population) standard deviation of each channel.
    pub fn fit(inputs: &[ControlInput], outputs: &[EngineOutputs]) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::Data("normalizer needs equal, non-empty input/output series".into()));
        }
        let rows: Vec<[f64; 6]> = inputs
            .iter()
            .zip(outputs)
            .map(|(u, y)| {
                let (u, y) = (u.to_array(), y.to_array());
                [u[0], u[1], u[2], y[0], y[1], y[2]]
            })
            .collect();
        let n = rows.len() as f64;
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for ch in 0..6 {
            mean[ch] = rows.iter().map(|r| r[ch]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[ch] - mean[ch]).powi(2)).sum::<f64>() / n;
            std[ch] = var.sqrt();
        }
        Normalizer::new(mean, std)
    }

    pub fn validate(&self) -> Result<()> {
        for ch in Channel::ALL {
            let (m, s) = (self.mean[ch.index()], self.std[ch.index()]);
            if !m.is_finite() || !s.is_finite() || s <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "normalizer channel `{}` needs finite mean and std > 0 (got {m}, {s})",
                    ch.name()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn normalize(&self, ch: Channel, raw: f64) -> f64 {
        (raw - self.mean[ch.index()]) / self.std[ch.index()]
    }

    #[inline]
    pub fn denormalize(&self, ch: Channel, z: f64) -> f64 {
        self.mean[ch.index()] + self.std[ch.index()] * z
    }

    pub fn normalize_named(&self, channel: &str, raw: f64) -> Result<f64> {
        Ok(self.normalize(channel.parse()?, raw))
    }

    pub fn denormalize_named(&self, channel: &str, z: f64) -> Result<f64> {
        Ok(self.denormalize(channel.parse()?, z))
    }

    pub fn normalize_input(&self, u: &ControlInput) -> [f64; 3] {
        let a = u.to_array();
        [0, 1, 2].map(|i| self.normalize(Channel::INPUTS[i], a[i]))
    }

    pub fn denormalize_input(&self, z: &[f64]) -> ControlInput {
        ControlInput::from_array([0, 1, 2].map(|i| self.denormalize(Channel::INPUTS[i], z[i])))
    }
}

/// The 104-dimensional controller state `[h1, h2, c1, c2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub h1: Vector,
    pub h2: Vector,
    pub c1: Vector,
    pub c2: Vector,
}

impl AugmentedState {
    pub fn zeros(n: usize) -> Self {
        AugmentedState {
            h1: vec![0.0; n],
            h2: vec![0.0; n],
            c1: vec![0.0; n],
            c2: vec![0.0; n],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.h1.len()
    }

    pub fn dim(&self) -> usize {
        4 * self.h1.len()
    }

    pub fn to_vec(&self) -> Vector {
        [&self.h1, &self.h2, &self.c1, &self.c2]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() % 4 != 0 {
            return Err(Error::dim("augmented state", 4 * (x.len() / 4), x.len()));
        }
        let n = x.len() / 4;
        Ok(AugmentedState {
            h1: x[..n].to_vec(),
            h2: x[n..2 * n].to_vec(),
            c1: x[2 * n..3 * n].to_vec(),
            c2: x[3 * n..].to_vec(),
        })
    }

    pub fn performance(&self) -> LstmState {
        LstmState {
            h: self.h1.clone(),
            c: self.c1.clone(),
        }
    }

    pub fn emission(&self) -> LstmState {
        LstmState {
            h: self.h2.clone(),
            c: self.c2.clone(),
        }
    }

    pub fn from_parts(perf: LstmState, emis: LstmState) -> Self {
        AugmentedState {
            h1: perf.h,
            c1: perf.c,
            h2: emis.h,
            c2: emis.c,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Jacobians of one model step in normalized coordinates. Output rows are
/// ordered `[torque, p_man, nox]`; state columns/rows follow
/// [`AugmentedState::to_vec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelJacobians {
    pub dx_dx: Matrix,
    pub dx_du: Matrix,
    pub dy_dx: Matrix,
    pub dy_du: Matrix,
}

/// Result of one step in normalized coordinates.
#[derive(Debug, Clone)]
pub struct NormalizedStep {
    /// Network outputs `[torque, p_man, nox]` in encoded units.
    pub y: [f64; 3],
    pub next: AugmentedState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineModel {
    /// FC1 → LSTM1 → FC2 → FC3, predicting `[torque, p_man]`.
    pub performance: RecurrentNet,
    /// FC4 → LSTM2 → FC5 → FC6, predicting NOx.
    pub emission: RecurrentNet,
    pub normalizer: Normalizer,
}

/// Head activations of the two nets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineArchitecture {
    pub width: usize,
    pub performance_head: Activation,
    pub emission_head: Activation,
}

impl Default for EngineArchitecture {
    fn default() -> Self {
        EngineArchitecture {
            width: ENGINE_WIDTH,
            performance_head: Activation::Relu,
            emission_head: Activation::Relu,
        }
    }
}

impl EngineArchitecture {
    pub fn performance_shape(&self) -> NetShape {
        NetShape {
            inputs: 3,
            fc_width: self.width,
            hidden: self.width,
            outputs: 2,
            head: self.performance_head,
        }
    }

    pub fn emission_shape(&self) -> NetShape {
        NetShape {
            inputs: 5,
            fc_width: self.width,
            hidden: self.width,
            outputs: 1,
            head: self.emission_head,
        }
    }
}

const MODEL_KIND: &str = "engine";

impl EngineModel {
    pub fn zeros(arch: EngineArchitecture, normalizer: Normalizer) -> Self {
        EngineModel {
            performance: RecurrentNet::zeros(arch.performance_shape()),
            emission: RecurrentNet::zeros(arch.emission_shape()),
            normalizer,
        }
    }

    pub fn init<R: Rng>(arch: EngineArchitecture, normalizer: Normalizer, rng: &mut R) -> Self {
        EngineModel {
            performance: RecurrentNet::init(arch.performance_shape(), rng),
            emission: RecurrentNet::init(arch.emission_shape(), rng),
            normalizer,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.performance.hidden_size()
    }

    pub fn state_dim(&self) -> usize {
        4 * self.hidden_size()
    }

    pub fn zero_state(&self) -> AugmentedState {
        AugmentedState::zeros(self.hidden_size())
    }

    pub fn validate(&self) -> Result<()> {
        self.performance.validate("performance")?;
        self.emission.validate("emission")?;
        self.normalizer.validate()?;
        let checks = [
            ("performance inputs", 3, self.performance.inputs()),
            ("performance outputs", 2, self.performance.outputs()),
            ("emission inputs", 5, self.emission.inputs()),
            ("emission outputs", 1, self.emission.outputs()),
            ("emission hidden size", self.performance.hidden_size(), self.emission.hidden_size()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::dim(what, expected, got));
            }
        }
        Ok(())
    }

    fn head_activation(&self, ch: Channel) -> Activation {
        match ch {
            Channel::Nox => self.emission.head.activation,
            _ => self.performance.head.activation,
        }
    }

    /// Offset subtracted before scaling an output channel into network units.
    pub fn output_offset(&self, ch: Channel) -> f64 {
        match self.head_activation(ch) {
            Activation::Relu => 0.0,
            Activation::Linear => self.normalizer.mean[ch.index()],
        }
    }

    pub fn encode_output(&self, ch: Channel, raw: f64) -> f64 {
        (raw - self.output_offset(ch)) / self.normalizer.std[ch.index()]
    }

    pub fn decode_output(&self, ch: Channel, z: f64) -> f64 {
        self.output_offset(ch) + self.normalizer.std[ch.index()] * z
    }

    pub fn encode_outputs(&self, y: &EngineOutputs) -> [f64; 3] {
        let a = y.to_array();
        [0, 1, 2].map(|i| self.encode_output(Channel::OUTPUTS[i], a[i]))
    }

    pub fn decode_outputs(&self, z: &[f64; 3]) -> EngineOutputs {
        EngineOutputs::from_array([0, 1, 2].map(|i| self.decode_output(Channel::OUTPUTS[i], z[i])))
    }

    fn check_finite(values: &[f64], layer: &str) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { layer: layer.into() })
        }
    }

    /// One step with normalized controls `u_n`.
    pub fn step_normalized(&self, x: &AugmentedState, u_n: &[f64; 3]) -> Result<NormalizedStep> {
        Self::check_finite(u_n, "normalized input")?;
        let (yp, perf) = self.performance.step(u_n, &x.performance())?;
        Self::check_finite(&yp, "performance head (FC3)")?;
        Self::check_finite(&perf.c, "LSTM1")?;
        let e = [u_n[0], u_n[1], u_n[2], yp[0], yp[1]];
        let (ye, emis) = self.emission.step(&e, &x.emission())?;
        Self::check_finite(&ye, "emission head (FC6)")?;
        Self::check_finite(&emis.c, "LSTM2")?;
        Ok(NormalizedStep {
            y: [yp[0], yp[1], ye[0]],
            next: AugmentedState::from_parts(perf, emis),
        })
    }

    pub fn forward_step(&self, x: &AugmentedState, u: &ControlInput) -> Result<(EngineOutputs, AugmentedState)> {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                layer: "augmented state".into(),
            });
        }
        let step = self.step_normalized(x, &self.normalizer.normalize_input(u))?;
        Ok((self.decode_outputs(&step.y), step.next))
    }

    /// Step plus Jacobians, both in normalized coordinates.
    pub fn step_with_jacobians(&self, x: &AugmentedState, u_n: &[f64; 3]) -> Result<(NormalizedStep, ModelJacobians)> {
        let n = self.hidden_size();
        let pc = self.performance.step_cached(u_n, &x.performance())?;
        let pj = self.performance.jacobians_from_cache(&pc);
        let yp = &pc.out;
        let e = [u_n[0], u_n[1], u_n[2], yp[0], yp[1]];
        let ec = self.emission.step_cached(&e, &x.emission())?;
        let ej = self.emission.jacobians_from_cache(&ec);
        let y = [yp[0], yp[1], ec.out[0]];
        Self::check_finite(&y, "model outputs")?;

        // emission input e = [u, yp(u, h1, c1)]
        let mut de_du = Matrix::zeros(5, 3);
        for i in 0..3 {
            de_du[(i, i)] = 1.0;
        }
        de_du.set_block(3, 0, &pj.dy_du);
        let e_yp_h = |m: &Matrix| m.col_block(3, 2);

        let dx = 4 * n;
        let (h1, h2, c1, c2) = (0, n, 2 * n, 3 * n);
        let mut dx_dx = Matrix::zeros(dx, dx);
        let mut dx_du = Matrix::zeros(dx, 3);
        let mut dy_dx = Matrix::zeros(3, dx);
        let mut dy_du = Matrix::zeros(3, 3);

        // performance block
        dx_dx.set_block(h1, h1, &pj.dh_dh);
        dx_dx.set_block(h1, c1, &pj.dh_dc);
        dx_dx.set_block(c1, h1, &pj.dc_dh);
        dx_dx.set_block(c1, c1, &pj.dc_dc);
        dx_du.set_block(h1, 0, &pj.dh_du);
        dx_du.set_block(c1, 0, &pj.dc_du);
        dy_dx.set_block(0, h1, &pj.dy_dh);
        dy_dx.set_block(0, c1, &pj.dy_dc);
        dy_du.set_block(0, 0, &pj.dy_du);

        // emission block, including coupling through yp
        let dh2_dyp = e_yp_h(&ej.dh_du);
        let dc2_dyp = e_yp_h(&ej.dc_du);
        let dnox_dyp = e_yp_h(&ej.dy_du);
        dx_dx.set_block(h2, h1, &dh2_dyp.matmul(&pj.dy_dh));
        dx_dx.set_block(h2, c1, &dh2_dyp.matmul(&pj.dy_dc));
        dx_dx.set_block(c2, h1, &dc2_dyp.matmul(&pj.dy_dh));
        dx_dx.set_block(c2, c1, &dc2_dyp.matmul(&pj.dy_dc));
        dx_dx.set_block(h2, h2, &ej.dh_dh);
        dx_dx.set_block(h2, c2, &ej.dh_dc);
        dx_dx.set_block(c2, h2, &ej.dc_dh);
        dx_dx.set_block(c2, c2, &ej.dc_dc);
        dx_du.set_block(h2, 0, &ej.dh_du.matmul(&de_du));
        dx_du.set_block(c2, 0, &ej.dc_du.matmul(&de_du));
        dy_dx.set_block(2, h1, &dnox_dyp.matmul(&pj.dy_dh));
        dy_dx.set_block(2, c1, &dnox_dyp.matmul(&pj.dy_dc));
        dy_dx.set_block(2, h2, &ej.dy_dh);
        dy_dx.set_block(2, c2, &ej.dy_dc);
        dy_du.set_block(2, 0, &ej.dy_du.matmul(&de_du));

        let next = AugmentedState::from_parts(pc.next_state(), ec.next_state());
        Ok((
            NormalizedStep { y, next },
            ModelJacobians {
                dx_dx,
                dx_du,
                dy_dx,
                dy_du,
            },
        ))
    }

    pub fn forward_jacobians(&self, x: &AugmentedState, u: &ControlInput) -> Result<ModelJacobians> {
        Ok(self.step_with_jacobians(x, &self.normalizer.normalize_input(u))?.1)
    }

    pub fn rollout(&self, x0: &AugmentedState, u_seq: &[ControlInput]) -> Result<Vec<EngineOutputs>> {
        if u_seq.is_empty() {
            return Err(Error::Data("rollout needs a non-empty control sequence".into()));
        }
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(u_seq.len());
        for u in u_seq {
            let (y, next) = self.forward_step(&x, u)?;
            out.push(y);
            x = next;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        write_model(path, MODEL_KIND, provenance, self)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let (model, prov): (EngineModel, Provenance) = read_model(path, MODEL_KIND)?;
        model.validate().map_err(|e| Error::ModelFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok((model, prov))
    }
}

/// Root-mean-square error normalized by the range of the reference signal.
pub fn nrmse(predicted: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(predicted.len(), reference.len());
    let n = reference.len() as f64;
    let mse = predicted
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        / n;
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    mse.sqrt() / (hi - lo)
}
