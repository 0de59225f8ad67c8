//! Closed-loop co-simulation of any controller against the plant, episode
//! logs, metrics and controller comparison.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_text, Provenance, Table};
use crate::engine::{ControlInput, EngineOutputs};
use crate::error::{Error, Result};
use crate::imitation::ImitationNet;
use crate::nmpc::{ControllerState, Nmpc};
use crate::nn::LstmState;
use crate::plant::{benchmark_control, BenchmarkMap, Plant, PlantParams, SPEED_RANGE};

/// What a controller may see at the start of a cycle: the reference and the
/// outputs measured on the previous cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub cycle: usize,
    pub t_ref: f64,
    pub speed: f64,
    pub measured: EngineOutputs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub u: ControlInput,
    /// Model prediction for this cycle, when the controller has a model.
    pub predicted: Option<EngineOutputs>,
    pub slack: f64,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub fallback: bool,
    /// The reference fell outside the controller's lookup range.
    pub clamped: bool,
}

impl ControlDecision {
    pub fn plain(u: ControlInput) -> Self {
        ControlDecision {
            u,
            predicted: None,
            slack: 0.0,
            sqp_iterations: 0,
            qp_iterations: 0,
            fallback: false,
            clamped: false,
        }
    }
}

pub trait Controller {
    fn kind(&self) -> ControllerKind;
    /// Called at the start of every episode.
    fn reset(&mut self);
    fn act(&mut self, obs: &Observation) -> Result<ControlDecision>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Benchmark,
    Nmpc,
    Imitation,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Benchmark, ControllerKind::Nmpc, ControllerKind::Imitation];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Benchmark => "benchmark",
            ControllerKind::Nmpc => "nmpc",
            ControllerKind::Imitation => "imitation",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown controller `{s}` (benchmark|nmpc|imitation)")))
    }
}

pub struct BenchmarkController {
    pub map: BenchmarkMap,
}

impl Controller for BenchmarkController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Benchmark
    }

    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observation) -> Result<ControlDecision> {
        let (u, clamped) = benchmark_control(obs.t_ref, obs.speed, &self.map);
        Ok(ControlDecision {
            clamped,
            ..ControlDecision::plain(u)
        })
    }
}

pub struct NmpcController {
    pub nmpc: Nmpc,
    pub u_init: ControlInput,
    pub state: ControllerState,
}

impl NmpcController {
    pub fn new(nmpc: Nmpc, u_init: ControlInput) -> Self {
        let state = ControllerState::new(&nmpc.model, u_init);
        NmpcController { nmpc, u_init, state }
    }
}

impl Controller for NmpcController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Nmpc
    }

    fn reset(&mut self) {
        self.state = ControllerState::new(&self.nmpc.model, self.u_init);
    }

    fn act(&mut self, obs: &Observation) -> Result<ControlDecision> {
        let (u, sol, next) = self.nmpc.control_cycle(&self.state, obs.t_ref)?;
        self.state = next;
        Ok(ControlDecision {
            u,
            predicted: sol.predicted.first().copied(),
            slack: sol.slack,
            sqp_iterations: sol.sqp_iterations,
            qp_iterations: sol.qp_iterations,
            fallback: sol.fallback,
            clamped: false,
        })
    }
}

pub struct ImitationController {
    pub net: ImitationNet,
    pub state: LstmState,
}

impl ImitationController {
    pub fn new(net: ImitationNet) -> Self {
        let state = net.zero_state();
        ImitationController { net, state }
    }
}

impl Controller for ImitationController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Imitation
    }

    fn reset(&mut self) {
        self.state = self.net.zero_state();
    }

    fn act(&mut self, obs: &Observation) -> Result<ControlDecision> {
        let inputs = crate::imitation::ImitationInputs::from_observation(obs);
        let (u, next) = self.net.act(&inputs, &self.state)?;
        self.state = next;
        Ok(ControlDecision::plain(u))
    }
}

/// Per-cycle speed and torque reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    pub speed: Vec<f64>,
    pub torque: Vec<f64>,
}

impl ReferenceProfile {
    pub fn len(&self) -> usize {
        self.torque.len()
    }

    pub fn is_empty(&self) -> bool {
        self.torque.is_empty()
    }

    pub fn constant(speed: f64, torque: f64, cycles: usize) -> Self {
        ReferenceProfile {
            speed: vec![speed; cycles],
            torque: vec![torque; cycles],
        }
    }

    /// Expands `(start_cycle, speed, torque)` steps over `cycles` cycles.
    pub fn from_steps(steps: &[(usize, f64, f64)], cycles: usize) -> Result<Self> {
        if steps.is_empty() || steps[0].0 != 0 {
            return Err(Error::Data("reference steps must start at cycle 0".into()));
        }
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data("reference step cycles must be strictly increasing".into()));
        }
        let mut p = ReferenceProfile {
            speed: Vec::with_capacity(cycles),
            torque: Vec::with_capacity(cycles),
        };
        let mut idx = 0;
        for k in 0..cycles {
            while idx + 1 < steps.len() && steps[idx + 1].0 <= k {
                idx += 1;
            }
            p.speed.push(steps[idx].1);
            p.torque.push(steps[idx].2);
        }
        p.validate()?;
        Ok(p)
    }

    /// Reads a step file with columns `start_cycle, speed, torque`.
    pub fn load_steps(path: &Path, cycles: usize) -> Result<Self> {
        let t = Table::read(path)?;
        let (c, s, q) = (t.column("start_cycle")?, t.column("speed")?, t.column("torque")?);
        let steps: Vec<(usize, f64, f64)> = (0..c.len()).map(|i| (c[i] as usize, s[i], q[i])).collect();
        Self::from_steps(&steps, cycles).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.speed.len() != self.torque.len() || self.is_empty() {
            return Err(Error::Data("reference profile needs equal, non-empty speed and torque series".into()));
        }
        if self.speed.iter().any(|n| !(*n >= SPEED_RANGE.0 && *n <= SPEED_RANGE.1)) {
            return Err(Error::Data(format!("reference speed outside {SPEED_RANGE:?}")));
        }
        if self.torque.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("reference torque is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub cycle: usize,
    pub speed: f64,
    pub t_ref: f64,
    pub u: ControlInput,
    pub measured: EngineOutputs,
    pub predicted: Option<EngineOutputs>,
    pub slack: f64,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub fallback: bool,
    pub clamped: bool,
}

/// Episode record. Wall-clock samples are kept apart from the
/// deterministic rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub controller: ControllerKind,
    pub provenance: Provenance,
    pub rows: Vec<LogRow>,
    /// Controller wall time per cycle, ms.
    pub time_ms: Vec<f64>,
}

const LOG_COLUMNS: [&str; 17] = [
    "cycle",
    "speed",
    "t_ref",
    "fq",
    "soi",
    "vgt",
    "torque",
    "p_man",
    "nox",
    "pred_torque",
    "pred_p_man",
    "pred_nox",
    "slack",
    "sqp_iterations",
    "qp_iterations",
    "fallback",
    "clamped",
];

impl SimLog {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&LOG_COLUMNS);
        t.comments = self.provenance.header_lines();
        t.comments.push(format!("controller: {}", self.controller.name()));
        t.rows = self
            .rows
            .iter()
            .map(|r| {
                let p = r.predicted.map(|p| p.to_array()).unwrap_or([f64::NAN; 3]);
                vec![
                    r.cycle as f64,
                    r.speed,
                    r.t_ref,
                    r.u.fq,
                    r.u.soi,
                    r.u.vgt,
                    r.measured.torque,
                    r.measured.p_man,
                    r.measured.nox,
                    p[0],
                    p[1],
                    p[2],
                    r.slack,
                    r.sqp_iterations as f64,
                    r.qp_iterations as f64,
                    r.fallback as u8 as f64,
                    r.clamped as u8 as f64,
                ]
            })
            .collect();
        t
    }

    pub fn timing_table(&self) -> Table {
        let mut t = Table::new(&["cycle", "time_ms"]);
        t.comments = self.provenance.header_lines();
        t.comments.push(format!("controller: {}", self.controller.name()));
        t.rows = self
            .time_ms
            .iter()
            .enumerate()
            .map(|(k, ms)| vec![k as f64, *ms])
            .collect();
        t
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let cols: Vec<Vec<f64>> = LOG_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
        let controller = t
            .comment_value("controller")
            .ok_or_else(|| Error::Data("log lacks a `# controller:` header".into()))?
            .parse()?;
        let rows = (0..t.rows.len())
            .map(|k| {
                let c = |i: usize| cols[i][k];
                let predicted = (!c(9).is_nan()).then(|| EngineOutputs {
                    torque: c(9),
                    p_man: c(10),
                    nox: c(11),
                });
                LogRow {
                    cycle: c(0) as usize,
                    speed: c(1),
                    t_ref: c(2),
                    u: ControlInput::new(c(3), c(4), c(5)),
                    measured: EngineOutputs {
                        torque: c(6),
                        p_man: c(7),
                        nox: c(8),
                    },
                    predicted,
                    slack: c(12),
                    sqp_iterations: c(13) as usize,
                    qp_iterations: c(14) as usize,
                    fallback: c(15) != 0.0,
                    clamped: c(16) != 0.0,
                }
            })
            .collect();
        Ok(SimLog {
            controller,
            provenance: Provenance::new(
                t.comment_value("config_fingerprint").unwrap_or_default(),
                t.comment_value("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
            ),
            rows,
            time_ms: Vec::new(),
        })
    }

    /// Writes `<stem>.csv` and `<stem>_timing.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let log = dir.join(format!("{stem}.csv"));
        let timing = dir.join(format!("{stem}_timing.csv"));
        self.to_table().write(&log)?;
        self.timing_table().write(&timing)?;
        Ok((log, timing))
    }

    pub fn read(log: &Path) -> Result<Self> {
        let mut s = Self::from_table(&Table::read(log)?)?;
        let stem = log.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let timing = log.with_file_name(format!("{stem}_timing.csv"));
        if timing.exists() {
            s.time_ms = Table::read(&timing)?.column("time_ms")?;
        }
        Ok(s)
    }
}

/// Measurement assumed before the first plant cycle.
pub fn initial_measurement() -> EngineOutputs {
    EngineOutputs {
        torque: 0.0,
        p_man: crate::plant::AMBIENT_PRESSURE,
        nox: 0.0,
    }
}

#[derive(Debug)]
pub struct EpisodeResult {
    pub log: SimLog,
    /// Set when the episode stopped early; the log holds the cycles run.
    pub fault: Option<Error>,
}

/// Runs one closed-loop episode from a plant at rest.
pub fn run_episode(
    controller: &mut dyn Controller,
    plant: &PlantParams,
    profile: &ReferenceProfile,
    provenance: &Provenance,
) -> Result<EpisodeResult> {
    profile.validate()?;
    let mut p = Plant::new(plant.clone())?;
    controller.reset();
    let mut log = SimLog {
        controller: controller.kind(),
        provenance: provenance.clone(),
        rows: Vec::with_capacity(profile.len()),
        time_ms: Vec::with_capacity(profile.len()),
    };
    let mut measured = initial_measurement();
    for k in 0..profile.len() {
        let obs = Observation {
            cycle: k,
            t_ref: profile.torque[k],
            speed: profile.speed[k],
            measured,
        };
        let start = Instant::now();
        let decision = controller.act(&obs);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let d = match decision {
            Ok(d) if d.u.within_bounds() => d,
            Ok(d) => {
                return Ok(EpisodeResult {
                    log,
                    fault: Some(Error::ControllerFault {
                        cycle: k,
                        reason: format!("control {:?} outside bounds", d.u),
                    }),
                })
            }
            Err(e) => {
                return Ok(EpisodeResult {
                    log,
                    fault: Some(Error::ControllerFault {
                        cycle: k,
                        reason: e.to_string(),
                    }),
                })
            }
        };
        measured = p.step(&d.u, obs.speed)?;
        log.time_ms.push(elapsed);
        log.rows.push(LogRow {
            cycle: k,
            speed: obs.speed,
            t_ref: obs.t_ref,
            u: d.u,
            measured,
            predicted: d.predicted,
            slack: d.slack,
            sqp_iterations: d.sqp_iterations,
            qp_iterations: d.qp_iterations,
            fallback: d.fallback,
            clamped: d.clamped,
        });
    }
    Ok(EpisodeResult { log, fault: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub controller: ControllerKind,
    pub cycles: usize,
    /// Σ NOx, ppm.
    pub cumulative_nox: f64,
    pub average_nox: f64,
    /// 100 · Σ|T − T_ref| / Σ T_ref.
    pub load_error_pct: f64,
    /// Σ FQ, g.
    pub cumulative_fq_g: f64,
    pub average_fq_mg: f64,
    pub mean_time_ms: f64,
    pub max_time_ms: f64,
}

pub fn compute_metrics(log: &SimLog) -> Result<MetricsReport> {
    if log.rows.is_empty() {
        return Err(Error::Data("metrics need a non-empty log".into()));
    }
    let n = log.rows.len() as f64;
    let cumulative_nox: f64 = log.rows.iter().map(|r| r.measured.nox).sum();
    let abs_err: f64 = log.rows.iter().map(|r| (r.measured.torque - r.t_ref).abs()).sum();
    let ref_sum: f64 = log.rows.iter().map(|r| r.t_ref).sum();
    let fq_mg: f64 = log.rows.iter().map(|r| r.u.fq).sum();
    let (mean_time_ms, max_time_ms) = if log.time_ms.is_empty() {
        (0.0, 0.0)
    } else {
        (
            log.time_ms.iter().sum::<f64>() / log.time_ms.len() as f64,
            log.time_ms.iter().fold(0.0, |m: f64, t| m.max(*t)),
        )
    };
    Ok(MetricsReport {
        controller: log.controller,
        cycles: log.rows.len(),
        cumulative_nox,
        average_nox: cumulative_nox / n,
        load_error_pct: 100.0 * abs_err / ref_sum,
        cumulative_fq_g: fq_mg / 1000.0,
        average_fq_mg: fq_mg / n,
        mean_time_ms,
        max_time_ms,
    })
}

const METRIC_COLUMNS: [&str; 9] = [
    "controller",
    "cycles",
    "cumulative_nox_ppm",
    "average_nox_ppm",
    "load_error_pct",
    "cumulative_fq_g",
    "average_fq_mg",
    "mean_time_ms",
    "max_time_ms",
];

fn csv_text(comments: &[String], header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut out: String = comments.iter().map(|c| format!("# {c}\n")).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    out.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).expect("utf8"));
    Ok(out)
}

/// Metrics as CSV. Timing columns are included only when `with_timing`.
pub fn metrics_csv(reports: &[MetricsReport], provenance: &Provenance, with_timing: bool) -> Result<String> {
    let cols = if with_timing { &METRIC_COLUMNS[..] } else { &METRIC_COLUMNS[..7] };
    let rows = reports
        .iter()
        .map(|r| {
            let mut v = vec![
                r.controller.name().to_string(),
                r.cycles.to_string(),
                format!("{}", r.cumulative_nox),
                format!("{}", r.average_nox),
                format!("{}", r.load_error_pct),
                format!("{}", r.cumulative_fq_g),
                format!("{}", r.average_fq_mg),
            ];
            if with_timing {
                v.push(format!("{}", r.mean_time_ms));
                v.push(format!("{}", r.max_time_ms));
            }
            v
        })
        .collect();
    csv_text(&provenance.header_lines(), cols, rows)
}

pub fn metrics_summary(r: &MetricsReport) -> String {
    format!(
        "{:<10} cycles {:>6}  NOx cum {:>12.1} ppm  avg {:>7.1} ppm  load error {:>5.2} %  FQ cum {:>7.1} g  avg {:>5.2} mg  time mean {:.4} ms  max {:.4} ms",
        r.controller.name(),
        r.cycles,
        r.cumulative_nox,
        r.average_nox,
        r.load_error_pct,
        r.cumulative_fq_g,
        r.average_fq_mg,
        r.mean_time_ms,
        r.max_time_ms
    )
}

/// One row of the improvement table relative to the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub controller: ControllerKind,
    /// `100·(avg − base)/base`; negative is a reduction.
    pub nox_pct: f64,
    pub fq_pct: f64,
    /// `base − candidate`, percentage points.
    pub load_error_delta: f64,
}

pub fn compare_controllers(reports: &[MetricsReport], baseline: ControllerKind) -> Result<Vec<Improvement>> {
    let base = reports
        .iter()
        .find(|r| r.controller == baseline)
        .ok_or_else(|| Error::Data(format!("baseline `{}` missing from reports", baseline.name())))?;
    Ok(reports
        .iter()
        .map(|r| Improvement {
            controller: r.controller,
            nox_pct: 100.0 * (r.average_nox - base.average_nox) / base.average_nox,
            fq_pct: 100.0 * (r.average_fq_mg - base.average_fq_mg) / base.average_fq_mg,
            load_error_delta: base.load_error_pct - r.load_error_pct,
        })
        .collect())
}

/// Ratio of mean per-cycle controller time, `slow / fast`.
pub fn speedup(slow: &MetricsReport, fast: &MetricsReport) -> f64 {
    slow.mean_time_ms / fast.mean_time_ms
}

pub fn improvement_csv(rows: &[Improvement], provenance: &Provenance, baseline: ControllerKind) -> Result<String> {
    let mut comments = provenance.header_lines();
    comments.push(format!("baseline: {}", baseline.name()));
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.controller.name().to_string(),
                format!("{:.2}", r.nox_pct),
                format!("{:.2}", r.fq_pct),
                format!("{:+.2}", r.load_error_delta),
            ]
        })
        .collect();
    csv_text(&comments, &["controller", "nox_pct", "fq_pct", "load_error_pts"], body)
}

/// Top-level experiment configuration, one TOML file per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Plant parameter file, relative to the config file.
    pub plant: PathBuf,
    pub out_dir: PathBuf,
    /// Master seed; every stage seed derives from it.
    pub seed: u64,
    /// Control assumed applied before the first NMPC cycle.
    #[serde(default = "default_initial_control")]
    pub initial_control: ControlInput,
    #[serde(default)]
    pub excitation: crate::training::ExcitationConfig,
    #[serde(default)]
    pub training: crate::training::TrainConfig,
    #[serde(default)]
    pub ocp: crate::nmpc::OcpConfig,
    #[serde(default)]
    pub imitation: crate::imitation::ImitationConfig,
    #[serde(default = "crate::training::TrainConfig::imitation")]
    pub imitation_training: crate::training::TrainConfig,
    #[serde(default)]
    pub episodes: Vec<EpisodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub name: String,
    /// Step file with columns `start_cycle, speed, torque`.
    pub profile: PathBuf,
    pub cycles: usize,
}

fn default_initial_control() -> ControlInput {
    ControlInput::new(30.0, 5.0, 85.0)
}

impl ExperimentConfig {
    /// Overwrites the stage seeds with values derived from `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.excitation.seed = seed;
        self.training.seed = seed.wrapping_add(1);
        self.imitation.seed = seed.wrapping_add(2);
        self.imitation_training.seed = seed.wrapping_add(3);
    }

    /// Seed of the plant measurement noise.
    pub fn plant_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = origin.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.plant = rel(&cfg.plant);
        cfg.out_dir = rel(&cfg.out_dir);
        for e in &mut cfg.episodes {
            e.profile = rel(&e.profile);
        }
        cfg.apply_seed(cfg.seed);
        if !cfg.initial_control.within_bounds() {
            return Err(Error::InvalidParameter("initial_control outside the control bounds".into()));
        }
        cfg.excitation.validate()?;
        cfg.training.validate()?;
        cfg.imitation_training.validate()?;
        cfg.ocp.validate()?;
        cfg.imitation.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = read_text(path)?;
        let cfg = Self::parse(&text, path)?;
        Ok((cfg, crate::artifact::fingerprint(text.as_bytes())))
    }

    /// Plant parameters with the noise seed taken from [`Self::plant_seed`].
    pub fn plant_params(&self) -> Result<PlantParams> {
        Ok(PlantParams {
            seed: self.plant_seed(),
            ..PlantParams::load(&self.plant)?
        })
    }

    pub fn episode(&self, name: &str) -> Result<&EpisodeConfig> {
        self.episodes
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidParameter(format!("no episode named `{name}` in the config")))
    }
}
