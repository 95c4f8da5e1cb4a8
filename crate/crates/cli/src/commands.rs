use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use fdd_diffcore::Real;
use fdd_precoding::channels::{generate, load_dataset, save_dataset, ChannelDataset, TaskConfig};
use fdd_precoding::endtoend::{ModelBundle, TaskKind};
use fdd_precoding::metrics::{
    append_metrics_csv, count_flops, count_params, evaluate_baseline, evaluate_model, scaling_study,
    scaling_to_csv, ExperimentConfig, MetricsRecord, ScalingAxis, Scheme, WmmseSettings,
};
use fdd_precoding::training::{
    finetune, init_bundle, load_checkpoint, save_checkpoint, train_cep, train_dsc, LossHistory, TaskData,
    TrainMode, TrainPlan, Trainer,
};

use crate::Command;

pub struct Context {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Context {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let path = &self.config;
        let mut cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.plan.seed = s;
            if let Some(p) = cfg.finetune_plan.as_mut() {
                p.seed = s;
            }
            cfg.eval.seed = s;
        }
        Ok(cfg)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset_path(&self, task_id: &str) -> PathBuf {
        self.path(&format!("{task_id}.fddc"))
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

pub fn run<T: Real>(ctx: &Context, command: &Command) -> Result<()> {
    let cfg = ctx.experiment()?;
    ctx.ensure_out()?;
    match command {
        Command::GenData => gen_data(ctx, &cfg),
        Command::Train { task, resume } => train::<T>(ctx, &cfg, task.as_deref(), *resume),
        Command::Finetune { task, checkpoint, save } => {
            finetune_cmd::<T>(ctx, &cfg, task, checkpoint.as_deref(), save.as_deref())
        }
        Command::Eval {
            scheme,
            task,
            dataset,
            checkpoint,
            snr,
        } => {
            let scheme: Scheme = scheme.parse()?;
            let task = pick_task(&cfg, task.as_deref())?;
            let ds = match dataset {
                Some(p) => load_dataset(p).with_context(|| format!("dataset {}", p.display()))?,
                None => task_dataset(ctx, &cfg, task)?,
            };
            let model = load_model::<T>(ctx, scheme, checkpoint.as_deref())?;
            let row = score(&cfg, task, &ds, scheme, model.as_ref(), snr.unwrap_or(task.snr_db))?;
            write_metrics(ctx, &cfg, std::slice::from_ref(&row))
        }
        Command::Compare { task, checkpoint } => compare::<T>(ctx, &cfg, task.as_deref(), checkpoint.as_deref()),
        Command::Scaling { axis, grid, task } => {
            let axis: ScalingAxis = axis.parse()?;
            let task = pick_task(&cfg, task.as_deref())?;
            let ds = task_dataset(ctx, &cfg, task)?;
            let ds = ds.with_train_fraction(cfg.train_fraction)?;
            let plan = TrainPlan {
                mode: TrainMode::Stl,
                ..cfg.plan.clone()
            };
            let rows = scaling_study::<T>(&cfg.arch, task, &ds, &plan, axis, grid, cfg.eval.seed)?;
            let path = ctx.path("scaling.csv");
            std::fs::write(&path, scaling_to_csv(&rows)?)?;
            for r in &rows {
                println!(
                    "{} {}: params {}, {:.4} MFLOPs, {:.4} bps/Hz",
                    axis_name(axis),
                    r.value,
                    r.params,
                    r.flops_m,
                    r.spectral_efficiency
                );
            }
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn axis_name(axis: ScalingAxis) -> &'static str {
    match axis {
        ScalingAxis::Experts => "experts",
        ScalingAxis::Width => "width",
    }
}

fn pick_task<'a>(cfg: &'a ExperimentConfig, id: Option<&str>) -> Result<&'a TaskConfig> {
    match id {
        Some(id) => Ok(cfg.task(id)?),
        None => Ok(&cfg.tasks[0]),
    }
}

fn gen_data(ctx: &Context, cfg: &ExperimentConfig) -> Result<()> {
    for task in cfg.tasks.iter().chain(&cfg.finetune_tasks) {
        let ds = generate(task, cfg.samples, cfg.data_seed(task))?;
        let path = ctx.dataset_path(&task.task_id);
        save_dataset(&ds, &path).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

/// The saved dataset of a task, or a fresh one from the configuration
/// when none has been written.
fn task_dataset(ctx: &Context, cfg: &ExperimentConfig, task: &TaskConfig) -> Result<ChannelDataset> {
    let path = ctx.dataset_path(&task.task_id);
    if !path.exists() {
        return Ok(generate(task, cfg.samples, cfg.data_seed(task))?);
    }
    let ds = load_dataset(&path).with_context(|| format!("dataset {}", path.display()))?;
    // stored configurations carry the effective data seed
    let expected = TaskConfig {
        seed: cfg.data_seed(task),
        ..task.clone()
    };
    if ds.config() != &expected {
        bail!("dataset {} was generated from a different configuration or seed", path.display());
    }
    Ok(ds)
}

fn train<T: Real>(ctx: &Context, cfg: &ExperimentConfig, task: Option<&str>, resume: bool) -> Result<()> {
    let plan = &cfg.plan;
    let ckpt_path = ctx.path("model.ckpt");
    let history = match plan.mode {
        TrainMode::Mtl | TrainMode::Stl => {
            let tasks: Vec<&TaskConfig> = if plan.mode == TrainMode::Mtl {
                cfg.tasks.iter().collect()
            } else {
                vec![pick_task(cfg, task)?]
            };
            let sets = tasks
                .iter()
                .map(|t| task_dataset(ctx, cfg, t))
                .collect::<Result<Vec<_>>>()?;
            let data = tasks
                .iter()
                .zip(&sets)
                .map(|(t, ds)| Ok(TaskData::new(&t.task_id, ds.split(cfg.train_fraction)?.0)))
                .collect::<Result<Vec<_>>>()?;
            let mut trainer = if resume {
                let ckpt = load_checkpoint::<T>(&ckpt_path).with_context(|| format!("checkpoint {}", ckpt_path.display()))?;
                let mut history = LossHistory::default();
                let loss_path = ctx.path("loss.csv");
                if loss_path.exists() {
                    history = LossHistory::from_csv(&std::fs::read_to_string(&loss_path)?)?;
                }
                Trainer::resume(ckpt, plan.clone())?.with_history(history)
            } else {
                let heads: Vec<(TaskConfig, TaskKind)> =
                    tasks.iter().map(|t| ((*t).clone(), TaskKind::Feedback)).collect();
                Trainer::new(init_bundle::<T>(cfg.arch.clone(), &heads, plan.seed)?, plan.clone())?
            };
            trainer.run(&data)?;
            let ck = trainer.checkpoint();
            save_checkpoint(&ckpt_path, &ck.bundle, ck.optimizer.as_ref(), ck.epochs_done)?;
            trainer.into_parts().1
        }
        TrainMode::Dsc | TrainMode::Cep => {
            if resume {
                bail!("--resume supports mtl and stl plans only");
            }
            let t = pick_task(cfg, task)?;
            let ds = task_dataset(ctx, cfg, t)?;
            let (train, _) = ds.split(cfg.train_fraction)?;
            let (bundle, history) = match (&plan.mode, &cfg.kind) {
                (TrainMode::Dsc, TaskKind::Dsc { dec_hidden }) => {
                    train_dsc::<T>(cfg.arch.clone(), t, dec_hidden.clone(), train, plan)?
                }
                (TrainMode::Cep, TaskKind::Estimation { est_hidden }) => {
                    let out = train_cep::<T>(cfg.arch.clone(), t, est_hidden.clone(), train, plan)?;
                    out.estimation.write_csv(ctx.path("estimation_loss.csv"))?;
                    (out.bundle, out.precoding)
                }
                (mode, kind) => bail!("plan mode {mode:?} needs a matching head kind, got {}", kind.name()),
            };
            save_checkpoint(&ckpt_path, &bundle, None, plan.epochs)?;
            history
        }
        TrainMode::Finetune => bail!("use the finetune subcommand for finetune plans"),
    };
    history.write_csv(ctx.path("loss.csv"))?;
    if let Some(last) = history.totals().last() {
        println!("final loss {last:.6}");
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

fn finetune_cmd<T: Real>(
    ctx: &Context,
    cfg: &ExperimentConfig,
    task: &str,
    checkpoint: Option<&Path>,
    save: Option<&Path>,
) -> Result<()> {
    let t = cfg.task(task)?;
    let src = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("model.ckpt"));
    let ckpt = load_checkpoint::<T>(&src).with_context(|| format!("checkpoint {}", src.display()))?;
    let plan = cfg.finetune_plan.clone().unwrap_or_else(|| TrainPlan {
        mode: TrainMode::Finetune,
        freeze: vec!["trunk/".into()],
        ..cfg.plan.clone()
    });
    let ds = task_dataset(ctx, cfg, t)?;
    let (train, _) = ds.split(cfg.train_fraction)?;
    let (bundle, history) = finetune(ckpt.bundle, t, train, &plan)?;
    let dst = save.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(&format!("finetune-{task}.ckpt")));
    save_checkpoint(&dst, &bundle, None, plan.epochs)?;
    history.write_csv(ctx.path(&format!("finetune-{task}-loss.csv")))?;
    println!("{}", dst.display());
    Ok(())
}

fn load_model<T: Real>(ctx: &Context, scheme: Scheme, path: Option<&Path>) -> Result<Option<ModelBundle<T>>> {
    if scheme != Scheme::Model {
        return Ok(None);
    }
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("model.ckpt"));
    let ckpt = load_checkpoint::<T>(&path).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(Some(ckpt.bundle))
}

/// One metrics row for `scheme` on the test split at `snr_db`. Baseline
/// rows report zero parameters and FLOPs.
fn score<T: Real>(
    cfg: &ExperimentConfig,
    task: &TaskConfig,
    ds: &ChannelDataset,
    scheme: Scheme,
    model: Option<&ModelBundle<T>>,
    snr_db: f64,
) -> Result<MetricsRecord> {
    let at_snr = TaskConfig {
        snr_db,
        ..task.clone()
    };
    let sigma2 = at_snr.resolve()?.sigma2();
    let (_, test) = ds.split(cfg.train_fraction)?;
    let seed = cfg.eval.seed;
    let (eval, params, flops_m) = match (scheme, model) {
        (Scheme::Model, Some(b)) => (
            evaluate_model(b, &task.task_id, test, sigma2, seed)?,
            count_params(b).total as u64,
            count_flops(b, &task.task_id, 1)?.millions(),
        ),
        (Scheme::Model, None) => bail!("model scheme needs a checkpoint"),
        (s, _) => {
            let wmmse = WmmseSettings {
                max_iters: cfg.eval.wmmse_iters,
                tol: cfg.eval.wmmse_tol,
            };
            (evaluate_baseline(s, test, task.power, sigma2, seed, wmmse)?, 0, 0.0)
        }
    };
    Ok(MetricsRecord {
        scheme: scheme.name().to_owned(),
        task_id: task.task_id.clone(),
        snr_db,
        spectral_efficiency: eval.spectral_efficiency(),
        params,
        flops_m,
        seed,
        wall_ms: eval.wall_ms,
    })
}

/// Appends rows to metrics.csv and refreshes the JSON sidecar holding the
/// effective configuration.
fn write_metrics(ctx: &Context, cfg: &ExperimentConfig, rows: &[MetricsRecord]) -> Result<()> {
    let path = ctx.path("metrics.csv");
    append_metrics_csv(&path, rows)?;
    std::fs::write(ctx.path("metrics.json"), cfg.to_json()?)?;
    for r in rows {
        println!(
            "{:<8} {:<12} {:>6.1} dB  {:.4} bps/Hz",
            r.scheme, r.task_id, r.snr_db, r.spectral_efficiency
        );
    }
    println!("{}", path.display());
    Ok(())
}

fn compare<T: Real>(ctx: &Context, cfg: &ExperimentConfig, task: Option<&str>, checkpoint: Option<&Path>) -> Result<()> {
    let schemes = cfg
        .eval
        .schemes
        .iter()
        .map(|s| Ok(s.parse::<Scheme>()?))
        .collect::<Result<Vec<_>>>()?;
    if schemes.is_empty() {
        bail!("no schemes configured");
    }
    let model = if schemes.contains(&Scheme::Model) {
        load_model::<T>(ctx, Scheme::Model, checkpoint)?
    } else {
        None
    };
    let tasks: Vec<&TaskConfig> = match task {
        Some(id) => vec![cfg.task(id)?],
        None => cfg.tasks.iter().collect(),
    };
    let mut rows = Vec::new();
    for t in tasks {
        let ds = task_dataset(ctx, cfg, t)?;
        let grid = if cfg.eval.snr_grid.is_empty() {
            vec![t.snr_db]
        } else {
            cfg.eval.snr_grid.clone()
        };
        for &snr in &grid {
            for &s in &schemes {
                rows.push(score(cfg, t, &ds, s, model.as_ref(), snr)?);
            }
        }
    }
    write_metrics(ctx, cfg, &rows)
}
