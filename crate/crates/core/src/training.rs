//! Excitation data, the regularized MSE loss, BPTT over fixed-length chunks,
//! Adam with a step learning-rate schedule, and the two-phase cascade fit of
//! [`EngineModel`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{Provenance, Table};
use crate::engine::{
    nrmse, ControlInput, EngineArchitecture, EngineModel, EngineOutputs, Normalizer, FQ_BOUNDS,
    SOI_BOUNDS, VGT_BOUNDS,
};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::nn::{Activation, LstmState};
use crate::plant::{Plant, PlantParams};
use crate::recurrent::{NetGrad, RecurrentNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    pub n_cycles: usize,
    pub fq_range: (f64, f64),
    pub soi_range: (f64, f64),
    pub vgt_range: (f64, f64),
    /// Hold time of each level, cycles, drawn uniformly from `[hold_min, hold_max]`.
    pub hold_min: usize,
    pub hold_max: usize,
    pub speed: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        ExcitationConfig {
            n_cycles: 100_000,
            fq_range: FQ_BOUNDS,
            soi_range: SOI_BOUNDS,
            vgt_range: VGT_BOUNDS,
            hold_min: 3,
            hold_max: 40,
            speed: 1500.0,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let ranges = [
            ("fq_range", self.fq_range, FQ_BOUNDS),
            ("soi_range", self.soi_range, SOI_BOUNDS),
            ("vgt_range", self.vgt_range, VGT_BOUNDS),
        ];
        for (name, (lo, hi), (blo, bhi)) in ranges {
            if !(lo < hi && lo >= blo && hi <= bhi) {
                return bad(format!("excitation `{name}` must satisfy {blo} <= lo < hi <= {bhi}"));
            }
        }
        if self.hold_min < 1 || self.hold_max < self.hold_min {
            return bad("excitation hold times need 1 <= hold_min <= hold_max".into());
        }
        if self.n_cycles < 10 {
            return bad("excitation needs at least 10 cycles".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// A recorded plant trajectory with its chronological train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<ControlInput>,
    pub targets: Vec<EngineOutputs>,
    /// First validation cycle.
    pub split: usize,
    pub speed: f64,
    pub provenance: Provenance,
}

const DATASET_COLUMNS: [&str; 7] = ["cycle", "fq", "soi", "vgt", "torque", "p_man", "nox"];

impl Dataset {
    pub fn new(inputs: Vec<ControlInput>, targets: Vec<EngineOutputs>, split: usize, speed: f64) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Data(format!(
                "dataset has {} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if split == 0 || split >= inputs.len() {
            return Err(Error::Data(format!("split {split} not strictly inside 0..{}", inputs.len())));
        }
        Ok(Dataset {
            inputs,
            targets,
            split,
            speed,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn normalizer(&self) -> Result<Normalizer> {
        Normalizer::fit(&self.inputs[..self.split], &self.targets[..self.split])
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&DATASET_COLUMNS);
        t.comments = self.provenance.header_lines();
        t.comments.push(format!("split: {}", self.split));
        t.comments.push(format!("speed: {}", self.speed));
        t.rows = self
            .inputs
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(k, (u, y))| vec![k as f64, u.fq, u.soi, u.vgt, y.torque, y.p_man, y.nox])
            .collect();
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        for c in DATASET_COLUMNS {
            t.column(c)?;
        }
        let col = |n: &str| t.column(n).expect("checked above");
        let (fq, soi, vgt) = (col("fq"), col("soi"), col("vgt"));
        let (tq, pm, nox) = (col("torque"), col("p_man"), col("nox"));
        let inputs = (0..t.rows.len()).map(|k| ControlInput::new(fq[k], soi[k], vgt[k])).collect();
        let targets = (0..t.rows.len())
            .map(|k| EngineOutputs {
                torque: tq[k],
                p_man: pm[k],
                nox: nox[k],
            })
            .collect();
        let meta = |key: &str| -> Result<f64> {
            t.comment_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: missing `# {key}:` header", path.display())))
        };
        let mut ds = Dataset::new(inputs, targets, meta("split")? as usize, meta("speed")?)?;
        ds.provenance = Provenance::new(
            t.comment_value("config_fingerprint").unwrap_or_default(),
            meta("seed")? as u64,
        );
        Ok(ds)
    }
}

/// Amplitude-modulated pseudo-random step signal on each control channel,
/// applied to the plant from rest.
pub fn generate_excitation(cfg: &ExcitationConfig, plant: &PlantParams) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ranges = [cfg.fq_range, cfg.soi_range, cfg.vgt_range];
    let mut level = [0.0; 3];
    let mut left = [0usize; 3];
    let mut p = Plant::new(plant.clone())?;
    let mut inputs = Vec::with_capacity(cfg.n_cycles);
    let mut targets = Vec::with_capacity(cfg.n_cycles);
    for _ in 0..cfg.n_cycles {
        for ch in 0..3 {
            if left[ch] == 0 {
                level[ch] = rng.gen_range(ranges[ch].0..=ranges[ch].1);
                left[ch] = rng.gen_range(cfg.hold_min..=cfg.hold_max);
            }
            left[ch] -= 1;
        }
        let u = ControlInput::from_array(level);
        targets.push(p.step(&u, cfg.speed)?);
        inputs.push(u);
    }
    let split = ((cfg.n_cycles as f64) * cfg.train_fraction).round() as usize;
    Dataset::new(inputs, targets, split, cfg.speed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub mini_batch: usize,
    pub lr0: f64,
    pub lr_drop_period: usize,
    pub lr_drop_factor: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_frequency: usize,
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            mini_batch: 512,
            lr0: 0.001,
            lr_drop_period: 150,
            lr_drop_factor: 0.5,
            l2: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            validation_frequency: 1,
            chunk_len: 64,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Settings of the imitation network.
    pub fn imitation() -> Self {
        TrainConfig {
            max_epochs: 400,
            lr0: 0.02,
            l2: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_epochs > 0
            && self.mini_batch > 0
            && self.lr0 > 0.0
            && self.lr_drop_period > 0
            && self.lr_drop_factor > 0.0
            && self.l2 >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.validation_frequency > 0
            && self.chunk_len >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid training configuration: {self:?}")))
        }
    }

    /// Learning rate for a zero-based epoch index.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_drop_factor.powi((epoch / self.lr_drop_period) as i32)
    }

    pub fn chunks_per_batch(&self) -> usize {
        (self.mini_batch / self.chunk_len).max(1)
    }
}

/// One training subsequence in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Cuts a sequence into contiguous chunks; a short tail of fewer than two
/// cycles is dropped.
pub fn make_chunks(inputs: &[Vector], targets: &[Vector], len: usize) -> Vec<Chunk> {
    inputs
        .chunks(len)
        .zip(targets.chunks(len))
        .filter(|(i, _)| i.len() >= 2)
        .map(|(i, t)| Chunk {
            inputs: i.to_vec(),
            targets: t.to_vec(),
        })
        .collect()
}

/// `(1/m) Σ (ŷ − y)² + (λ/2m) Σ ‖W‖²` over a batch of chunks, each started
/// from the zero state. `m` counts cycles.
pub fn loss(net: &RecurrentNet, batch: &[Chunk], l2: f64) -> Result<f64> {
    let m: usize = batch.iter().map(Chunk::len).sum();
    if m == 0 {
        return Err(Error::Data("loss needs a non-empty batch".into()));
    }
    let zero = LstmState::zeros(net.hidden_size());
    let mut sse = 0.0;
    for c in batch {
        let out = net.run(&c.inputs, &zero)?;
        for (y, t) in out.iter().zip(&c.targets) {
            sse += y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    let m = m as f64;
    Ok(sse / m + l2 / (2.0 * m) * net.weight_norm_sq())
}

/// Loss and its gradient with respect to every weight and bias.
pub fn bptt_gradients(net: &RecurrentNet, batch: &[Chunk], l2: f64) -> Result<(f64, NetGrad)> {
    let m: usize = batch.iter().map(Chunk::len).sum();
    if m == 0 {
        return Err(Error::Data("gradient needs a non-empty batch".into()));
    }
    let zero = LstmState::zeros(net.hidden_size());
    let mut grad = NetGrad::zeros_like(net);
    let mut sse = 0.0;
    for c in batch {
        sse += net.bptt(&c.inputs, &c.targets, &zero, &mut grad)?;
    }
    let m = m as f64;
    grad.scale(1.0 / m);
    grad.add_weight_decay(net, l2 / m);
    Ok((sse / m + l2 / (2.0 * m) * net.weight_norm_sq(), grad))
}

/// Adam moments for a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Vector>,
    pub v: Vec<Vector>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    pub fn for_net(net: &RecurrentNet, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = NetGrad::zeros_like(net).all().iter().map(|s| s.len()).collect();
        Adam::new(&sizes, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// `adam_step` applied to a whole network.
pub fn adam_step(net: &mut RecurrentNet, grad: &NetGrad, opt: &mut Adam, lr: f64) {
    let params: Vec<&mut [f64]> = net.param_slices_mut().into_iter().map(|(p, _)| p).collect();
    opt.step(params, &grad.all(), lr);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl LossHistory {
    pub fn to_table(&self, provenance: &Provenance, stage: &str) -> Table {
        let mut t = Table::new(&["epoch", "train_loss", "val_loss", "lr"]);
        t.comments = provenance.header_lines();
        t.comments.push(format!("stage: {stage}"));
        t.comments.push(format!("best_epoch: {}", self.best_epoch));
        t.rows = self
            .records
            .iter()
            .map(|r| vec![r.epoch as f64, r.train_loss, r.val_loss, r.lr])
            .collect();
        t
    }
}

/// Sequences of one network in network units, already split.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub train_inputs: Vec<Vector>,
    pub train_targets: Vec<Vector>,
    pub val_inputs: Vec<Vector>,
    pub val_targets: Vec<Vector>,
}

/// Cycles of training data replayed before the validation segment so the
/// recurrent state is warm.
const VAL_WARMUP: usize = 200;

/// Mean squared error per cycle over the validation segment.
pub fn validation_loss(net: &RecurrentNet, data: &SequenceData) -> Result<f64> {
    let warm = VAL_WARMUP.min(data.train_inputs.len());
    let mut state = LstmState::zeros(net.hidden_size());
    for u in &data.train_inputs[data.train_inputs.len() - warm..] {
        state = net.step(u, &state)?.1;
    }
    let out = net.run(&data.val_inputs, &state)?;
    let sse: f64 = out
        .iter()
        .zip(&data.val_targets)
        .map(|(y, t)| y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(sse / data.val_inputs.len() as f64)
}

/// Sets each head bias to the mean target so ReLU heads start active.
pub fn init_head_bias(net: &mut RecurrentNet, targets: &[Vector]) {
    let n = targets.len() as f64;
    for (j, b) in net.head.bias.iter_mut().enumerate() {
        *b = targets.iter().map(|t| t[j]).sum::<f64>() / n;
    }
    if net.head.activation == Activation::Relu {
        for b in net.head.bias.iter_mut() {
            *b = b.max(0.05);
        }
    }
}

/// Mini-batch Adam over shuffled chunks; returns the parameters with the
/// lowest validation loss.
pub fn train_net(net: &RecurrentNet, data: &SequenceData, cfg: &TrainConfig) -> Result<(RecurrentNet, LossHistory)> {
    cfg.validate()?;
    if data.val_inputs.is_empty() {
        return Err(Error::Data("training needs a non-empty validation segment".into()));
    }
    let chunks = make_chunks(&data.train_inputs, &data.train_targets, cfg.chunk_len);
    if chunks.is_empty() {
        return Err(Error::Data("training segment shorter than two cycles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = net.clone();
    let mut opt = Adam::for_net(&net, cfg);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut best = net.clone();
    let mut history = LossHistory {
        best_val_loss: validation_loss(&net, data)?,
        ..Default::default()
    };
    let per_batch = cfg.chunks_per_batch();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(per_batch) {
            let batch: Vec<Chunk> = idx.iter().map(|i| chunks[*i].clone()).collect();
            let (l, grad) = bptt_gradients(&net, &batch, cfg.l2).map_err(|e| Error::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "training loss is not finite".into(),
                });
            }
            adam_step(&mut net, &grad, &mut opt, lr);
            total += l;
            batches += 1;
        }
        if (epoch + 1) % cfg.validation_frequency != 0 && epoch + 1 != cfg.max_epochs {
            continue;
        }
        let val = validation_loss(&net, data).map_err(|e| Error::Diverged {
            epoch,
            reason: e.to_string(),
        })?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "validation loss is not finite".into(),
            });
        }
        if val < history.best_val_loss {
            history.best_val_loss = val;
            history.best_epoch = epoch + 1;
            best = net.clone();
        }
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: total / batches as f64,
            val_loss: val,
            lr,
        });
    }
    Ok((best, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineTrainReport {
    pub performance: LossHistory,
    pub emission: LossHistory,
    /// Validation NRMSE (fraction of range) for torque, p_man, NOx.
    pub nrmse: [f64; 3],
}

fn encode_inputs(norm: &Normalizer, us: &[ControlInput]) -> Vec<Vector> {
    us.iter().map(|u| norm.normalize_input(u).to_vec()).collect()
}

/// Cascade fit: the performance net first, then the emission net on the
/// frozen performance net's outputs.
pub fn train_engine_model(
    ds: &Dataset,
    arch: EngineArchitecture,
    cfg: &TrainConfig,
) -> Result<(EngineModel, EngineTrainReport)> {
    let norm = ds.normalizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EngineModel::init(arch, norm.clone(), &mut rng);
    let u_n = encode_inputs(&norm, &ds.inputs);
    let y_n: Vec<[f64; 3]> = ds.targets.iter().map(|y| model.encode_outputs(y)).collect();
    let s = ds.split;

    let perf_targets: Vec<Vector> = y_n.iter().map(|y| vec![y[0], y[1]]).collect();
    let perf_data = SequenceData {
        train_inputs: u_n[..s].to_vec(),
        train_targets: perf_targets[..s].to_vec(),
        val_inputs: u_n[s..].to_vec(),
        val_targets: perf_targets[s..].to_vec(),
    };
    init_head_bias(&mut model.performance, &perf_data.train_targets);
    let (perf, perf_hist) = train_net(&model.performance, &perf_data, cfg)?;
    model.performance = perf;

    let yp = model
        .performance
        .run(&u_n, &LstmState::zeros(model.hidden_size()))?;
    let e: Vec<Vector> = u_n
        .iter()
        .zip(&yp)
        .map(|(u, y)| vec![u[0], u[1], u[2], y[0], y[1]])
        .collect();
    let nox_targets: Vec<Vector> = y_n.iter().map(|y| vec![y[2]]).collect();
    let emis_data = SequenceData {
        train_inputs: e[..s].to_vec(),
        train_targets: nox_targets[..s].to_vec(),
        val_inputs: e[s..].to_vec(),
        val_targets: nox_targets[s..].to_vec(),
    };
    init_head_bias(&mut model.emission, &emis_data.train_targets);
    let emis_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let (emis, emis_hist) = train_net(&model.emission, &emis_data, &emis_cfg)?;
    model.emission = emis;

    let nrmse = validation_nrmse(&model, ds)?;
    Ok((
        model,
        EngineTrainReport {
            performance: perf_hist,
            emission: emis_hist,
            nrmse,
        },
    ))
}

/// Per-channel NRMSE on the validation segment, running the model
/// continuously over the whole record.
pub fn validation_nrmse(model: &EngineModel, ds: &Dataset) -> Result<[f64; 3]> {
    let pred = model.rollout(&model.zero_state(), &ds.inputs)?;
    let mut out = [0.0; 3];
    for i in 0..3 {
        let p: Vec<f64> = pred[ds.split..].iter().map(|y| y.to_array()[i]).collect();
        let r: Vec<f64> = ds.targets[ds.split..].iter().map(|y| y.to_array()[i]).collect();
        out[i] = nrmse(&p, &r);
    }
    Ok(out)
}
