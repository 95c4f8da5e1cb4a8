use fdd_diffcore::{Real, Tensor};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::OptimizerState;
use super::checkpoint::Checkpoint;
use super::history::{EpochRecord, LossHistory, TOTAL_ROW};
use super::plan::{StepMode, TrainMode, TrainPlan};
use super::step::{joint_gradients, Objective, StepOutput, TaskBatch};
use crate::channels::{DatasetView, TaskConfig};
use crate::endtoend::{sample_pilot_noise, ArchConfig, Mode, ModelBundle, TaskKind};
use crate::error::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const NOISE_STREAM: u64 = 0x6e6f_6973;
const DROPOUT_STREAM: u64 = 0x6472_6f70;
const INIT_STREAM: u64 = 0x696e_6974;

/// Independent stream per `(seed, purpose, a, b)`, so any epoch can be
/// replayed without running the ones before it.
fn stream_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.rotate_left(32));
    rng.set_stream((a << 32) ^ b);
    rng
}

/// Fresh parameters for `tasks`, seeded by `seed` alone.
pub fn init_bundle<T: Real>(arch: ArchConfig, tasks: &[(TaskConfig, TaskKind)], seed: u64) -> Result<ModelBundle<T>> {
    let mut rng = stream_rng(seed, INIT_STREAM, 0, 0);
    let mut bundle = ModelBundle::new(arch, &mut rng)?;
    for (cfg, kind) in tasks {
        bundle.register_task(cfg.clone(), kind.clone(), &mut rng)?;
    }
    Ok(bundle)
}

/// Training split of one registered task.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub task_id: &'a str,
    pub train: DatasetView<'a>,
}

impl<'a> TaskData<'a> {
    pub fn new(task_id: &'a str, train: DatasetView<'a>) -> Self {
        Self { task_id, train }
    }
}

pub struct Trainer<T: Real> {
    pub bundle: ModelBundle<T>,
    pub optimizer: OptimizerState<T>,
    pub plan: TrainPlan,
    objective: Objective,
    epochs_done: usize,
    history: LossHistory,
}

impl<T: Real> Trainer<T> {
    pub fn new(bundle: ModelBundle<T>, plan: TrainPlan) -> Result<Self> {
        let optimizer = OptimizerState::new(plan.optimizer)?;
        Ok(Self {
            bundle,
            optimizer,
            plan,
            objective: Objective::SumRate,
            epochs_done: 0,
            history: LossHistory::default(),
        })
    }

    /// Continues from a checkpoint; a checkpoint without optimizer state
    /// starts fresh moments.
    pub fn resume(ckpt: Checkpoint<T>, plan: TrainPlan) -> Result<Self> {
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => OptimizerState::new(plan.optimizer)?,
        };
        Ok(Self {
            bundle: ckpt.bundle,
            optimizer,
            plan,
            objective: Objective::SumRate,
            epochs_done: ckpt.epochs_done,
            history: LossHistory::default(),
        })
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    /// Prepends earlier epochs, e.g. when resuming from a saved run.
    pub fn with_history(mut self, history: LossHistory) -> Self {
        self.history = history;
        self
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            bundle: self.bundle.clone(),
            optimizer: Some(self.optimizer.clone()),
            epochs_done: self.epochs_done,
        }
    }

    pub fn into_parts(self) -> (ModelBundle<T>, LossHistory) {
        (self.bundle, self.history)
    }

    fn apply(&mut self, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.optimizer.begin_step();
        for (name, g) in grads {
            let p = self.bundle.param_mut(name)?;
            self.optimizer.update(name, p, g)?;
        }
        Ok(())
    }

    /// Trains until `plan.epochs` epochs are done in total.
    pub fn run(&mut self, data: &[TaskData<'_>]) -> Result<()> {
        while self.epochs_done < self.plan.epochs {
            self.train_epoch(data)?;
        }
        Ok(())
    }

    pub fn train_epoch(&mut self, data: &[TaskData<'_>]) -> Result<Vec<EpochRecord>> {
        self.plan.validate(data.len())?;
        let plan = self.plan.clone();
        let epoch = self.epochs_done as u64;
        let mut sizes = Vec::with_capacity(data.len());
        for d in data {
            self.bundle.task(d.task_id)?;
            if d.train.is_empty() {
                return Err(Error::Empty("training set"));
            }
            sizes.push(d.train.len());
        }
        let weights = plan.weighting.resolve(&sizes)?;

        let mut orders = Vec::with_capacity(data.len());
        let mut per_task_batches = Vec::with_capacity(data.len());
        for (n, d) in data.iter().enumerate() {
            let mut order: Vec<usize> = (0..d.train.len()).collect();
            order.shuffle(&mut stream_rng(plan.seed, SHUFFLE_STREAM, epoch, n as u64));
            let m = plan.batch_size.min(order.len());
            per_task_batches.push((m, order.len() / m));
            orders.push(order);
        }
        let rounds = plan
            .batches_per_epoch
            .unwrap_or_else(|| per_task_batches.iter().map(|b| b.1).max().unwrap_or(1));

        let trainable = |name: &str| plan.is_trainable(name);
        let mut loss_sums = vec![0.0; data.len()];
        let mut total_sum = 0.0;
        let mut accumulated: Option<IndexMap<String, Tensor<T>>> = None;
        for round in 0..rounds {
            let mut batches = Vec::with_capacity(data.len());
            for (n, d) in data.iter().enumerate() {
                let (m, count) = per_task_batches[n];
                let b = round % count;
                let idx = &orders[n][b * m..(b + 1) * m];
                let h = d.train.batch::<T>(idx);
                let noise = if plan.pilot_noise {
                    let r = self.bundle.task(d.task_id)?.resolved()?;
                    let mut rng = stream_rng(plan.seed, NOISE_STREAM, epoch, (round * data.len() + n) as u64);
                    Some(sample_pilot_noise(&mut rng, h.re.rows(), r.pilot_len, r.sigma2()))
                } else {
                    None
                };
                batches.push(TaskBatch {
                    task_id: d.task_id.to_owned(),
                    h,
                    noise,
                });
            }
            let mut rng = stream_rng(plan.seed, DROPOUT_STREAM, epoch, round as u64);
            let StepOutput {
                task_losses,
                total,
                grads,
            } = joint_gradients(
                &self.bundle,
                &batches,
                &weights,
                self.objective,
                plan.quantizer,
                Mode::Train,
                &trainable,
                &mut rng,
            )?;
            for (s, l) in loss_sums.iter_mut().zip(&task_losses) {
                *s += l;
            }
            total_sum += total;
            match plan.step_mode {
                StepMode::PerBatch => self.apply(&grads)?,
                StepMode::PerEpoch => match accumulated.as_mut() {
                    None => accumulated = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            match acc.get_mut(&name) {
                                Some(a) => a.add_assign(&g),
                                None => {
                                    acc.insert(name, g);
                                }
                            }
                        }
                    }
                },
            }
        }
        if let Some(mut acc) = accumulated {
            let inv = T::of(1.0 / rounds as f64);
            for g in acc.values_mut() {
                *g = g.map(|v| v * inv);
            }
            self.apply(&acc)?;
        }

        let rate_based = self.objective == Objective::SumRate;
        let mut records: Vec<EpochRecord> = data
            .iter()
            .zip(&loss_sums)
            .map(|(d, s)| {
                let loss = s / rounds as f64;
                EpochRecord {
                    epoch: self.epochs_done,
                    task_id: d.task_id.to_owned(),
                    loss,
                    sum_rate: rate_based.then_some(-loss),
                }
            })
            .collect();
        records.push(EpochRecord {
            epoch: self.epochs_done,
            task_id: TOTAL_ROW.to_owned(),
            loss: total_sum / rounds as f64,
            sum_rate: None,
        });
        self.epochs_done += 1;
        self.history.records.extend(records.iter().cloned());
        Ok(records)
    }
}

fn require_mode(plan: &TrainPlan, mode: TrainMode) -> Result<()> {
    if plan.mode != mode {
        return Err(Error::Config(format!("plan mode {:?} used for {mode:?} training", plan.mode)));
    }
    Ok(())
}

/// Joint multi-task training of the shared trunk and every task's
/// specific parameters.
pub fn pretrain_mtl<T: Real>(
    bundle: ModelBundle<T>,
    data: &[TaskData<'_>],
    plan: &TrainPlan,
) -> Result<(ModelBundle<T>, LossHistory)> {
    require_mode(plan, TrainMode::Mtl)?;
    let mut t = Trainer::new(bundle, plan.clone())?;
    t.run(data)?;
    Ok(t.into_parts())
}

/// A private model for one configuration; equal to single-task
/// [`pretrain_mtl`] from [`init_bundle`] with the same seed.
pub fn train_stl<T: Real>(
    arch: ArchConfig,
    config: &TaskConfig,
    train: DatasetView<'_>,
    plan: &TrainPlan,
) -> Result<(ModelBundle<T>, LossHistory)> {
    require_mode(plan, TrainMode::Stl)?;
    let bundle = init_bundle(arch, &[(config.clone(), TaskKind::Feedback)], plan.seed)?;
    let mut t = Trainer::new(bundle, plan.clone())?;
    t.run(&[TaskData::new(&config.task_id, train)])?;
    Ok(t.into_parts())
}

/// Adds a fresh task to a bundle and trains only its parameters.
pub fn finetune<T: Real>(
    mut bundle: ModelBundle<T>,
    config: &TaskConfig,
    train: DatasetView<'_>,
    plan: &TrainPlan,
) -> Result<(ModelBundle<T>, LossHistory)> {
    require_mode(plan, TrainMode::Finetune)?;
    plan.validate(1)?;
    if bundle.has_task(&config.task_id) {
        return Err(Error::TaskExists(config.task_id.clone()));
    }
    let mut rng = stream_rng(plan.seed, INIT_STREAM, 1, 0);
    bundle.register_task(config.clone(), TaskKind::Feedback, &mut rng)?;
    let mut t = Trainer::new(bundle, plan.clone())?;
    t.run(&[TaskData::new(&config.task_id, train)])?;
    Ok(t.into_parts())
}

/// User encoders with an MLP decoder over the stacked feedback; no trunk.
pub fn train_dsc<T: Real>(
    arch: ArchConfig,
    config: &TaskConfig,
    dec_hidden: Vec<usize>,
    train: DatasetView<'_>,
    plan: &TrainPlan,
) -> Result<(ModelBundle<T>, LossHistory)> {
    require_mode(plan, TrainMode::Dsc)?;
    let arch = ArchConfig { blocks: 0, ..arch };
    let bundle = init_bundle(arch, &[(config.clone(), TaskKind::Dsc { dec_hidden })], plan.seed)?;
    let mut t = Trainer::new(bundle, plan.clone())?;
    t.run(&[TaskData::new(&config.task_id, train)])?;
    Ok(t.into_parts())
}

#[derive(Clone, Debug)]
pub struct CepOutcome<T: Real> {
    pub bundle: ModelBundle<T>,
    pub estimation: LossHistory,
    pub precoding: LossHistory,
}

/// Two stages: pilot and estimator under the channel MSE for
/// `plan.estimation_epochs`, then the BS model on the estimates under the
/// sum-rate loss for `plan.epochs` with stage-one parameters frozen.
pub fn train_cep<T: Real>(
    arch: ArchConfig,
    config: &TaskConfig,
    est_hidden: Vec<usize>,
    train: DatasetView<'_>,
    plan: &TrainPlan,
) -> Result<CepOutcome<T>> {
    require_mode(plan, TrainMode::Cep)?;
    let id = config.task_id.as_str();
    let bundle = init_bundle(arch, &[(config.clone(), TaskKind::Estimation { est_hidden })], plan.seed)?;
    let data = [TaskData::new(id, train)];

    let stage1 = TrainPlan {
        epochs: plan.estimation_epochs,
        ..plan.clone()
    };
    let mut t = Trainer::new(bundle, stage1)?.with_objective(Objective::EstimationMse);
    t.run(&data)?;
    let (bundle, estimation) = t.into_parts();

    let mut freeze = plan.freeze.clone();
    freeze.push(format!("task/{id}/pilot."));
    freeze.push(format!("task/{id}/est."));
    let stage2 = TrainPlan {
        freeze,
        seed: plan.seed.wrapping_add(1),
        ..plan.clone()
    };
    let mut t = Trainer::new(bundle, stage2)?;
    t.run(&data)?;
    let (bundle, precoding) = t.into_parts();
    Ok(CepOutcome {
        bundle,
        estimation,
        precoding,
    })
}
