//! Behavior cloning of the NMPC: expert data collection over randomized
//! speed and load steps, the imitation network, its training and inference.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_model, write_model, Provenance, Table};
use crate::engine::{ControlInput, FQ_BOUNDS, SOI_BOUNDS, VGT_BOUNDS};
use crate::error::{Error, Result};
use crate::harness::{initial_measurement, run_episode, NmpcController, Observation, ReferenceProfile, SimLog};
use crate::linalg::Vector;
use crate::nmpc::Nmpc;
use crate::nn::{Activation, LstmState};
use crate::plant::{PlantParams, SPEED_RANGE};
use crate::recurrent::{NetShape, RecurrentNet};
use crate::training::{init_head_bias, train_net, LossHistory, SequenceData, TrainConfig};

pub const IMITATION_WIDTH: usize = 32;
pub const INPUT_NAMES: [&str; 5] = ["torque", "torque_error", "nox", "p_man", "speed"];

/// Width of each control channel's admissible range.
pub fn control_ranges() -> [f64; 3] {
    [
        FQ_BOUNDS.1 - FQ_BOUNDS.0,
        SOI_BOUNDS.1 - SOI_BOUNDS.0,
        VGT_BOUNDS.1 - VGT_BOUNDS.0,
    ]
}

/// What the imitation controller sees at the start of a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImitationInputs {
    /// Last measured torque, N·m.
    pub torque: f64,
    /// `T_ref − T_out`, N·m.
    pub torque_error: f64,
    pub nox: f64,
    pub p_man: f64,
    pub speed: f64,
}

impl ImitationInputs {
    pub fn from_observation(obs: &Observation) -> Self {
        ImitationInputs {
            torque: obs.measured.torque,
            torque_error: obs.t_ref - obs.measured.torque,
            nox: obs.measured.nox,
            p_man: obs.measured.p_man,
            speed: obs.speed,
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.torque, self.torque_error, self.nox, self.p_man, self.speed]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        ImitationInputs {
            torque: a[0],
            torque_error: a[1],
            nox: a[2],
            p_man: a[3],
            speed: a[4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImitationSample {
    pub inputs: ImitationInputs,
    /// Control the expert applied.
    pub target: ControlInput,
    /// Solver fell back on this cycle; not used for training.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImitationConfig {
    /// Simulated time to collect, s.
    pub seconds: f64,
    /// Speed used to convert seconds into engine cycles.
    pub nominal_speed: f64,
    pub speed_range: (f64, f64),
    pub torque_range: (f64, f64),
    /// Hold time of each speed/load step, cycles.
    pub hold_min: usize,
    pub hold_max: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            seconds: 2000.0,
            nominal_speed: 1500.0,
            speed_range: (1200.0, 1800.0),
            torque_range: (120.0, 320.0),
            hold_min: 100,
            hold_max: 300,
            train_fraction: 0.8,
            seed: 11,
        }
    }
}

impl ImitationConfig {
    /// Four-stroke cycles in `seconds` at the nominal speed.
    pub fn cycles(&self) -> usize {
        (self.seconds * self.nominal_speed / 120.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("imitation config: {m}")));
        let (lo, hi) = self.speed_range;
        if !(lo <= hi && lo >= SPEED_RANGE.0 && hi <= SPEED_RANGE.1) {
            return bad("speed_range must lie within the plant speed range");
        }
        if !(self.torque_range.0 <= self.torque_range.1 && self.torque_range.0 >= 0.0) {
            return bad("torque_range must be ordered and non-negative");
        }
        if self.hold_min < 1 || self.hold_max < self.hold_min {
            return bad("need 1 <= hold_min <= hold_max");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(self.seconds > 0.0 && self.nominal_speed > 0.0) || self.cycles() < 10 {
            return bad("need at least 10 cycles of data");
        }
        Ok(())
    }
}

/// Piecewise-constant random speed and load reference.
pub fn random_profile(cfg: &ImitationConfig) -> Result<ReferenceProfile> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.cycles();
    let mut steps = Vec::new();
    let mut k = 0;
    while k < n {
        let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
        let torque = rng.gen_range(cfg.torque_range.0..=cfg.torque_range.1);
        steps.push((k, speed, torque));
        k += rng.gen_range(cfg.hold_min..=cfg.hold_max);
    }
    ReferenceProfile::from_steps(&steps, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationDataset {
    pub samples: Vec<ImitationSample>,
    /// Index of the first validation sample.
    pub split: usize,
    pub provenance: Provenance,
}

const DATASET_COLUMNS: [&str; 10] = [
    "cycle",
    "torque",
    "torque_error",
    "nox",
    "p_man",
    "speed",
    "fq",
    "soi",
    "vgt",
    "excluded",
];

impl ImitationDataset {
    /// Builds samples from an expert log: inputs from the previous cycle's
    /// measurement, target the control applied.
    pub fn from_log(log: &SimLog, train_fraction: f64) -> Result<Self> {
        if log.rows.is_empty() {
            return Err(Error::Data("expert log is empty".into()));
        }
        let mut measured = initial_measurement();
        let mut samples = Vec::with_capacity(log.rows.len());
        for r in &log.rows {
            let obs = Observation {
                cycle: r.cycle,
                t_ref: r.t_ref,
                speed: r.speed,
                measured,
            };
            samples.push(ImitationSample {
                inputs: ImitationInputs::from_observation(&obs),
                target: r.u,
                excluded: r.fallback,
            });
            measured = r.measured;
        }
        let split = ((samples.len() as f64) * train_fraction).round() as usize;
        let ds = ImitationDataset {
            samples,
            split,
            provenance: log.provenance.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn excluded_count(&self) -> usize {
        self.samples.iter().filter(|s| s.excluded).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.split == 0 || self.split >= self.samples.len() {
            return Err(Error::Data(format!(
                "imitation split {} invalid for {} samples",
                self.split,
                self.samples.len()
            )));
        }
        for (k, s) in self.samples.iter().enumerate() {
            if !s.inputs.to_array().iter().all(|v| v.is_finite()) || !s.target.is_finite() {
                return Err(Error::Data(format!("imitation sample {k} is not finite")));
            }
            if !s.target.within_bounds() {
                return Err(Error::Data(format!("imitation target {k} outside the control bounds")));
            }
        }
        Ok(())
    }

    /// Kept samples of the train and validation segments.
    pub fn segments(&self) -> (Vec<&ImitationSample>, Vec<&ImitationSample>) {
        let keep = |s: &&ImitationSample| !s.excluded;
        (
            self.samples[..self.split].iter().filter(keep).collect(),
            self.samples[self.split..].iter().filter(keep).collect(),
        )
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&DATASET_COLUMNS);
        t.comments = self.provenance.header_lines();
        t.comments.push(format!("split: {}", self.split));
        t.rows = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut row = vec![k as f64];
                row.extend(s.inputs.to_array());
                row.extend(s.target.to_array());
                row.push(s.excluded as u8 as f64);
                row
            })
            .collect();
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        let cols: Vec<Vec<f64>> = DATASET_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
        let split = t
            .comment_value("split")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: missing `# split:` header", path.display())))?;
        let samples = (0..t.rows.len())
            .map(|k| ImitationSample {
                inputs: ImitationInputs::from_array([cols[1][k], cols[2][k], cols[3][k], cols[4][k], cols[5][k]]),
                target: ControlInput::new(cols[6][k], cols[7][k], cols[8][k]),
                excluded: cols[9][k] != 0.0,
            })
            .collect();
        let ds = ImitationDataset {
            samples,
            split,
            provenance: Provenance::new(
                t.comment_value("config_fingerprint").unwrap_or_default(),
                t.comment_value("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
            ),
        };
        ds.validate().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(ds)
    }
}

/// Runs the NMPC over a random speed/load profile and records the expert
/// actions. The plant noise is seeded from the collection seed.
pub fn collect_dataset(
    nmpc: &Nmpc,
    plant: &PlantParams,
    cfg: &ImitationConfig,
    u_init: ControlInput,
    provenance: &Provenance,
) -> Result<(ImitationDataset, SimLog)> {
    let profile = random_profile(cfg)?;
    let plant = PlantParams {
        seed: cfg.seed,
        ..plant.clone()
    };
    let mut ctrl = NmpcController::new(nmpc.clone(), u_init);
    let res = run_episode(&mut ctrl, &plant, &profile, provenance)?;
    if let Some(fault) = res.fault {
        return Err(fault);
    }
    let ds = ImitationDataset::from_log(&res.log, cfg.train_fraction)?;
    Ok((ds, res.log))
}

/// Imitation network with its input scaling and output encoding. Outputs
/// are encoded as `(u − lower bound)/σ` so the ReLU head covers the whole
/// admissible range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationNet {
    pub net: RecurrentNet,
    pub input_mean: [f64; 5],
    pub input_std: [f64; 5],
    pub output_std: [f64; 3],
}

fn mean_std<const N: usize>(rows: &[[f64; N]]) -> ([f64; N], [f64; N]) {
    let n = rows.len() as f64;
    let mut mean = [0.0; N];
    let mut std = [0.0; N];
    for j in 0..N {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}

impl ImitationNet {
    pub fn shape() -> NetShape {
        NetShape {
            inputs: 5,
            fc_width: IMITATION_WIDTH,
            hidden: IMITATION_WIDTH,
            outputs: 3,
            head: Activation::Relu,
        }
    }

    pub fn zeros() -> Self {
        ImitationNet {
            net: RecurrentNet::zeros(Self::shape()),
            input_mean: [0.0; 5],
            input_std: [1.0; 5],
            output_std: [1.0; 3],
        }
    }

    /// Fits the scalings on the given training samples and draws weights.
    pub fn init<R: Rng>(train: &[&ImitationSample], rng: &mut R) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let xs: Vec<[f64; 5]> = train.iter().map(|s| s.inputs.to_array()).collect();
        let us: Vec<[f64; 3]> = train.iter().map(|s| s.target.to_array()).collect();
        let (input_mean, input_std) = mean_std(&xs);
        let (_, output_std) = mean_std(&us);
        Ok(ImitationNet {
            net: RecurrentNet::init(Self::shape(), rng),
            input_mean,
            input_std,
            output_std,
        })
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState::zeros(self.net.hidden_size())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate("imitation")?;
        let s = self.net.shape();
        if s.inputs != 5 || s.outputs != 3 {
            return Err(Error::dim("imitation net", 5 * 3, s.inputs * s.outputs));
        }
        if self.input_std.iter().chain(&self.output_std).any(|v| !(*v > 0.0 && v.is_finite()))
            || self.input_mean.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("imitation scalings must be finite with σ > 0".into()));
        }
        Ok(())
    }

    pub fn encode_inputs(&self, x: &ImitationInputs) -> Vector {
        x.to_array()
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn encode_target(&self, u: &ControlInput) -> Vector {
        let lo = ControlInput::lower().to_array();
        u.to_array()
            .iter()
            .zip(lo.iter().zip(&self.output_std))
            .map(|(v, (l, s))| (v - l) / s)
            .collect()
    }

    /// Network output back to physical units, before clamping.
    pub fn decode(&self, z: &[f64]) -> ControlInput {
        let lo = ControlInput::lower().to_array();
        ControlInput::from_array([0, 1, 2].map(|j| lo[j] + self.output_std[j] * z[j]))
    }

    /// One forward pass: the clamped action and the next recurrent state.
    pub fn act(&self, inputs: &ImitationInputs, state: &LstmState) -> Result<(ControlInput, LstmState)> {
        let (z, next) = self.net.step(&self.encode_inputs(inputs), state)?;
        let u = self.decode(&z);
        if !u.is_finite() || !next.is_finite() {
            return Err(Error::NonFinite {
                layer: "imitation".into(),
            });
        }
        Ok((u.clamped(), next))
    }

    /// Clamped actions over a sequence from the zero state.
    pub fn replay(&self, inputs: &[ImitationInputs]) -> Result<Vec<ControlInput>> {
        let mut state = self.zero_state();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (u, next) = self.act(x, &state)?;
            out.push(u);
            state = next;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        write_model(path, "imitation", provenance, self)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let (net, prov): (Self, Provenance) = read_model(path, "imitation")?;
        net.validate().map_err(|e| Error::ModelFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok((net, prov))
    }
}

/// Per-channel RMSE as % of the control range (FQ, SOI, VGT).
pub fn rmse_pct(pred: &[ControlInput], expert: &[ControlInput]) -> [f64; 3] {
    let ranges = control_ranges();
    let n = pred.len().max(1) as f64;
    [0, 1, 2].map(|j| {
        let sse: f64 = pred
            .iter()
            .zip(expert)
            .map(|(p, e)| (p.to_array()[j] - e.to_array()[j]).powi(2))
            .sum();
        100.0 * (sse / n).sqrt() / ranges[j]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationReport {
    pub history: LossHistory,
    pub train_rmse_pct: [f64; 3],
    pub val_rmse_pct: [f64; 3],
}

/// Fits the imitation network; RMSE comes from a continuous replay over the
/// kept samples, scored separately on each segment.
pub fn train_imitation(ds: &ImitationDataset, cfg: &TrainConfig) -> Result<(ImitationNet, ImitationReport)> {
    ds.validate()?;
    let (train, val) = ds.segments();
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Data("imitation dataset needs kept samples in both segments".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ImitationNet::init(&train, &mut rng)?;
    let enc = |set: &[&ImitationSample]| -> (Vec<Vector>, Vec<Vector>) {
        (
            set.iter().map(|s| net.encode_inputs(&s.inputs)).collect(),
            set.iter().map(|s| net.encode_target(&s.target)).collect(),
        )
    };
    let (train_inputs, train_targets) = enc(&train);
    let (val_inputs, val_targets) = enc(&val);
    let data = SequenceData {
        train_inputs,
        train_targets,
        val_inputs,
        val_targets,
    };
    init_head_bias(&mut net.net, &data.train_targets);
    let (best, history) = train_net(&net.net, &data, cfg)?;
    net.net = best;

    let all: Vec<&ImitationSample> = train.iter().chain(&val).copied().collect();
    let pred = net.replay(&all.iter().map(|s| s.inputs).collect::<Vec<_>>())?;
    let expert: Vec<ControlInput> = all.iter().map(|s| s.target).collect();
    let s = train.len();
    Ok((
        net,
        ImitationReport {
            history,
            train_rmse_pct: rmse_pct(&pred[..s], &expert[..s]),
            val_rmse_pct: rmse_pct(&pred[s..], &expert[s..]),
        },
    ))
}
