use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lstm_nmpc::artifact::{fingerprint, read_text, write_text, Provenance, Table};
use lstm_nmpc::engine::{EngineArchitecture, EngineModel};
use lstm_nmpc::harness::{
    compare_controllers, compute_metrics, improvement_csv, metrics_csv, metrics_summary, run_episode, speedup,
    BenchmarkController, Controller, ControllerKind, EpisodeConfig, ExperimentConfig, ImitationController,
    MetricsReport, NmpcController, ReferenceProfile, SimLog,
};
use lstm_nmpc::imitation::{collect_dataset, train_imitation, ImitationDataset, ImitationNet};
use lstm_nmpc::nmpc::Nmpc;
use lstm_nmpc::plant::{calibrate_benchmark, default_grids, BenchmarkMap, BenchmarkPolicy};
use lstm_nmpc::training::{generate_excitation, train_engine_model, Dataset};

#[derive(Parser)]
#[command(name = "lstm-nmpc", version, about = "LSTM surrogate NMPC pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the plant and record the identification dataset.
    GenData(Common),
    /// Fit the engine model on the recorded dataset.
    TrainModel(Common),
    /// Run closed-loop episodes with one controller.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "nmpc")]
        controller: ControllerKind,
        /// Episode name; all episodes when omitted.
        #[arg(long)]
        episode: Option<String>,
    },
    /// Record NMPC actions over a random speed/load profile.
    CollectImitation(Common),
    /// Fit the imitation network on the recorded expert data.
    TrainImitation(Common),
    /// Metrics and improvement tables from the episode logs.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episode: Option<String>,
        #[arg(long, default_value = "benchmark")]
        baseline: ControllerKind,
    },
    /// Per-cycle series of every controller, one CSV per episode.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episode: Option<String>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    provenance: Provenance,
}

impl Ctx {
    fn load(c: &Common) -> Result<Self> {
        let text = read_text(&c.config)?;
        let mut cfg = ExperimentConfig::parse(&text, &c.config)?;
        if let Some(seed) = c.seed {
            cfg.apply_seed(seed);
        }
        if let Some(out) = &c.out {
            cfg.out_dir = out.clone();
        }
        std::fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
        let provenance = Provenance::new(fingerprint(format!("{text}\nseed={}", cfg.seed).as_bytes()), cfg.seed);
        Ok(Ctx { cfg, provenance })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn episodes(&self, name: &Option<String>) -> Result<Vec<EpisodeConfig>> {
        match name {
            Some(n) => Ok(vec![self.cfg.episode(n)?.clone()]),
            None if self.cfg.episodes.is_empty() => bail!("config defines no episodes"),
            None => Ok(self.cfg.episodes.clone()),
        }
    }

    fn log_path(&self, episode: &str, kind: ControllerKind) -> PathBuf {
        self.path(&format!("run_{episode}_{}.csv", kind.name()))
    }

    fn model(&self) -> Result<EngineModel> {
        Ok(EngineModel::load(&self.path("model.json"))?.0)
    }

    fn nmpc(&self) -> Result<Nmpc> {
        Ok(Nmpc::new(self.cfg.ocp.clone(), self.model()?)?)
    }
}

fn note(path: &Path) {
    println!("wrote {}", path.display());
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let mut ds = generate_excitation(&ctx.cfg.excitation, &ctx.cfg.plant_params()?)?;
    ds.provenance = ctx.provenance.clone();
    let p = ctx.path("dataset.csv");
    ds.save(&p)?;
    note(&p);
    Ok(())
}

fn train_model(ctx: &Ctx) -> Result<()> {
    let ds = Dataset::load(&ctx.path("dataset.csv"))?;
    let (model, report) = train_engine_model(&ds, EngineArchitecture::default(), &ctx.cfg.training)?;
    let p = ctx.path("model.json");
    model.save(&p, &ctx.provenance)?;
    note(&p);
    for (stage, hist) in [("performance", &report.performance), ("emission", &report.emission)] {
        let p = ctx.path(&format!("loss_{stage}.csv"));
        hist.to_table(&ctx.provenance, stage).write(&p)?;
        note(&p);
    }
    let mut t = Table::new(&["channel", "nrmse_pct"]);
    t.comments = ctx.provenance.header_lines();
    t.comments.push("channel: 0 torque, 1 p_man, 2 nox".into());
    t.rows = (0..3).map(|i| vec![i as f64, 100.0 * report.nrmse[i]]).collect();
    let p = ctx.path("model_nrmse.csv");
    t.write(&p)?;
    note(&p);
    println!(
        "validation NRMSE: torque {:.2}%  p_man {:.2}%  nox {:.2}%",
        100.0 * report.nrmse[0],
        100.0 * report.nrmse[1],
        100.0 * report.nrmse[2]
    );
    Ok(())
}

fn benchmark_map(ctx: &Ctx) -> Result<BenchmarkMap> {
    let (speeds, torques) = default_grids();
    let map = calibrate_benchmark(&ctx.cfg.plant_params()?, &BenchmarkPolicy::default(), &speeds, &torques)?;
    let p = ctx.path("benchmark_map.toml");
    write_text(&p, &map.to_toml())?;
    note(&p);
    Ok(map)
}

fn controller(ctx: &Ctx, kind: ControllerKind) -> Result<Box<dyn Controller>> {
    Ok(match kind {
        ControllerKind::Benchmark => Box::new(BenchmarkController { map: benchmark_map(ctx)? }),
        ControllerKind::Nmpc => Box::new(NmpcController::new(ctx.nmpc()?, ctx.cfg.initial_control)),
        ControllerKind::Imitation => {
            Box::new(ImitationController::new(ImitationNet::load(&ctx.path("imitation.json"))?.0))
        }
    })
}

fn run(ctx: &Ctx, kind: ControllerKind, episode: &Option<String>) -> Result<()> {
    let plant = ctx.cfg.plant_params()?;
    let mut ctrl = controller(ctx, kind)?;
    for ep in ctx.episodes(episode)? {
        let profile = ReferenceProfile::load_steps(&ep.profile, ep.cycles)?;
        let res = run_episode(ctrl.as_mut(), &plant, &profile, &ctx.provenance)?;
        let log_path = ctx.log_path(&ep.name, kind);
        let stem = log_path.file_stem().and_then(|s| s.to_str()).expect("utf8 stem");
        let (log, timing) = res.log.write(&ctx.cfg.out_dir, stem)?;
        note(&log);
        note(&timing);
        if let Some(fault) = res.fault {
            bail!("episode `{}` aborted after {} cycles: {fault}", ep.name, res.log.rows.len());
        }
        println!("{}", metrics_summary(&compute_metrics(&res.log)?));
    }
    Ok(())
}

fn collect_imitation(ctx: &Ctx) -> Result<()> {
    let (ds, log) = collect_dataset(
        &ctx.nmpc()?,
        &ctx.cfg.plant_params()?,
        &ctx.cfg.imitation,
        ctx.cfg.initial_control,
        &ctx.provenance,
    )?;
    let p = ctx.path("imitation_data.csv");
    ds.save(&p)?;
    note(&p);
    let (l, t) = log.write(&ctx.cfg.out_dir, "imitation_expert")?;
    note(&l);
    note(&t);
    println!("{} samples, {} excluded fallback cycles", ds.len(), ds.excluded_count());
    Ok(())
}

fn train_imitation_cmd(ctx: &Ctx) -> Result<()> {
    let ds = ImitationDataset::load(&ctx.path("imitation_data.csv"))?;
    let (net, report) = train_imitation(&ds, &ctx.cfg.imitation_training)?;
    let p = ctx.path("imitation.json");
    net.save(&p, &ctx.provenance)?;
    note(&p);
    let p = ctx.path("loss_imitation.csv");
    report.history.to_table(&ctx.provenance, "imitation").write(&p)?;
    note(&p);
    let mut t = Table::new(&["channel", "train_rmse_pct", "val_rmse_pct"]);
    t.comments = ctx.provenance.header_lines();
    t.comments.push("channel: 0 fq, 1 soi, 2 vgt".into());
    t.rows = (0..3)
        .map(|i| vec![i as f64, report.train_rmse_pct[i], report.val_rmse_pct[i]])
        .collect();
    let p = ctx.path("imitation_rmse.csv");
    t.write(&p)?;
    note(&p);
    println!(
        "validation RMSE: fq {:.2}%  soi {:.2}%  vgt {:.2}% of range",
        report.val_rmse_pct[0], report.val_rmse_pct[1], report.val_rmse_pct[2]
    );
    Ok(())
}

fn read_logs(ctx: &Ctx, episode: &str) -> Result<Vec<SimLog>> {
    let mut logs = Vec::new();
    for kind in ControllerKind::ALL {
        let p = ctx.log_path(episode, kind);
        if p.exists() {
            logs.push(SimLog::read(&p)?);
        }
    }
    if logs.is_empty() {
        bail!("no episode logs for `{episode}` in {}", ctx.cfg.out_dir.display());
    }
    Ok(logs)
}

fn compare(ctx: &Ctx, episode: &Option<String>, baseline: ControllerKind) -> Result<()> {
    for ep in ctx.episodes(episode)? {
        let reports: Vec<MetricsReport> = read_logs(ctx, &ep.name)?
            .iter()
            .map(compute_metrics)
            .collect::<lstm_nmpc::Result<_>>()?;
        let p = ctx.path(&format!("metrics_{}.csv", ep.name));
        write_text(&p, &metrics_csv(&reports, &ctx.provenance, false)?)?;
        note(&p);
        let p = ctx.path(&format!("timing_{}.csv", ep.name));
        write_text(&p, &metrics_csv(&reports, &ctx.provenance, true)?)?;
        note(&p);
        let rows = compare_controllers(&reports, baseline)?;
        let p = ctx.path(&format!("improvement_{}.csv", ep.name));
        write_text(&p, &improvement_csv(&rows, &ctx.provenance, baseline)?)?;
        note(&p);
        for r in &reports {
            println!("{}", metrics_summary(r));
        }
        for r in &rows {
            println!(
                "{:<10} NOx {:+7.2} %  FQ {:+6.2} %  load error {:+5.2} pts",
                r.controller.name(),
                r.nox_pct,
                r.fq_pct,
                r.load_error_delta
            );
        }
        let find = |k| reports.iter().find(|r| r.controller == k);
        if let (Some(n), Some(i)) = (find(ControllerKind::Nmpc), find(ControllerKind::Imitation)) {
            println!("imitation speedup over nmpc: {:.0}x", speedup(n, i));
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, episode: &Option<String>) -> Result<()> {
    for ep in ctx.episodes(episode)? {
        let logs = read_logs(ctx, &ep.name)?;
        let n = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
        let mut cols = vec!["cycle".to_string(), "speed".into(), "t_ref".into()];
        for l in &logs {
            for ch in ["torque", "nox", "p_man", "fq", "soi", "vgt", "slack"] {
                cols.push(format!("{}_{ch}", l.controller.name()));
            }
        }
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut t = Table::new(&col_refs);
        t.comments = ctx.provenance.header_lines();
        t.comments.push(format!("episode: {}", ep.name));
        t.rows = (0..n)
            .map(|k| {
                let base = &logs[0].rows[k];
                let mut row = vec![k as f64, base.speed, base.t_ref];
                for l in &logs {
                    let r = &l.rows[k];
                    row.extend([
                        r.measured.torque,
                        r.measured.nox,
                        r.measured.p_man,
                        r.u.fq,
                        r.u.soi,
                        r.u.vgt,
                        r.slack,
                    ]);
                }
                row
            })
            .collect();
        let p = ctx.path(&format!("series_{}.csv", ep.name));
        t.write(&p)?;
        note(&p);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(&Ctx::load(c)?),
        Command::TrainModel(c) => train_model(&Ctx::load(c)?),
        Command::Run {
            common,
            controller,
            episode,
        } => run(&Ctx::load(common)?, *controller, episode),
        Command::CollectImitation(c) => collect_imitation(&Ctx::load(c)?),
        Command::TrainImitation(c) => train_imitation_cmd(&Ctx::load(c)?),
        Command::Compare {
            common,
            episode,
            baseline,
        } => compare(&Ctx::load(common)?, episode, *baseline),
        Command::Report { common, episode } => report(&Ctx::load(common)?, episode),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
