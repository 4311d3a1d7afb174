use mfm_core::coupling::{sample_training_pairs, CouplerKind};
use mfm_core::flow::{barycentric_loss, jcfm_loss, make_train_samples};
use mfm_core::nn::{adam_step, AdamState, Checkpoint, VectorFieldModel};
use mfm_core::Rng;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Sub-stream indices of the experiment seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const STATIC_INIT: u64 = 2;
    pub const STATIC_DATA: u64 = 3;
    pub const EVAL: u64 = 16;
    pub const SWEEP: u64 = 32;
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VectorFieldModel,
    pub adam: AdamState,
    pub lr: f64,
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of the last tenth of the loss curve (at least one step).
    pub fn final_loss(&self) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        let tail = (self.losses.len() / 10).max(1);
        let xs = &self.losses[self.losses.len() - tail..];
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            seed: cfg.seed,
            step: self.losses.len() as u64,
        }
    }
}

/// Called with the step count and current state every `checkpoint_every` steps.
pub type CheckpointHook<'a> = dyn FnMut(usize, &VectorFieldModel, &AdamState) -> Result<(), CliError> + 'a;

fn adam_for(cfg: &ExperimentConfig, n: usize, lr: f64) -> AdamState {
    let mut adam = AdamState::new(n, lr);
    adam.beta1 = cfg.train.beta1;
    adam.beta2 = cfg.train.beta2;
    adam.weight_decay = cfg.train.weight_decay;
    adam
}

fn fail(cfg: &ExperimentConfig, step: usize) -> impl Fn(mfm_core::Error) -> CliError + '_ {
    move |source| CliError::Training {
        step,
        config_hash: cfg.hash(),
        source,
    }
}

/// Trains a time-conditioned vector field with the joint flow-matching loss.
pub fn train_flow(
    cfg: &ExperimentConfig,
    lr: f64,
    hook: Option<&mut CheckpointHook<'_>>,
) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let (q0, q1) = cfg.sources()?;
    let dim = q0.dim();
    let coupler = cfg.coupler(dim)?;
    let root = Rng::new(cfg.seed);
    let model = VectorFieldModel::init(cfg.net.flow_spec(dim)?, &mut root.split(streams::INIT))?;
    let mut data = root.split(streams::DATA);
    run_loop(cfg, model, lr, hook, |step, model| {
        let pairs = sample_training_pairs(
            &coupler,
            &q0,
            &q1,
            cfg.train.batch_size,
            cfg.train.coupling_k(),
            &mut data,
        )
        .map_err(fail(cfg, step))?;
        let samples = make_train_samples(&pairs, &mut data).map_err(fail(cfg, step))?;
        jcfm_loss(model, &samples).map_err(fail(cfg, step))
    })
}

/// Trains a static map `psi(x0) ~ x1` on pairs from an OT-family coupler.
pub fn train_static(
    cfg: &ExperimentConfig,
    lr: f64,
    hook: Option<&mut CheckpointHook<'_>>,
) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let (q0, q1) = cfg.sources()?;
    let dim = q0.dim();
    let coupler = cfg.coupler(dim)?;
    if !matches!(coupler.kind, CouplerKind::BatchOt | CouplerKind::BatchEot { .. }) {
        return Err(CliError::Usage(format!(
            "static maps are trained on batch_ot or batch_eot pairs, not {}",
            coupler.name()
        )));
    }
    let root = Rng::new(cfg.seed);
    let model = VectorFieldModel::init(cfg.net.static_spec(dim)?, &mut root.split(streams::STATIC_INIT))?;
    let mut data = root.split(streams::STATIC_DATA);
    run_loop(cfg, model, lr, hook, |step, model| {
        let pairs = sample_training_pairs(
            &coupler,
            &q0,
            &q1,
            cfg.train.batch_size,
            cfg.train.coupling_k(),
            &mut data,
        )
        .map_err(fail(cfg, step))?;
        barycentric_loss(model, &pairs).map_err(fail(cfg, step))
    })
}

fn run_loop<F>(
    cfg: &ExperimentConfig,
    mut model: VectorFieldModel,
    lr: f64,
    mut hook: Option<&mut CheckpointHook<'_>>,
    mut loss_and_grad: F,
) -> Result<TrainOutcome, CliError>
where
    F: FnMut(usize, &VectorFieldModel) -> Result<(f64, Vec<f64>), CliError>,
{
    let mut adam = adam_for(cfg, model.params().len(), lr);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let (loss, grad) = loss_and_grad(step, &model)?;
        adam_step(&mut model, &mut adam, &grad).map_err(fail(cfg, step))?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(fail(cfg, step)(mfm_core::Error::NonFinite("parameters after update".into())));
        }
        losses.push(loss);
        let every = cfg.train.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 {
            if let Some(h) = hook.as_deref_mut() {
                h(step + 1, &model, &adam)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        lr,
        losses,
    })
}

/// Trains once per learning-rate candidate and keeps the lowest final loss
/// (ties go to the earlier candidate).
pub fn sweep_lr<F>(cfg: &ExperimentConfig, mut train: F) -> Result<(TrainOutcome, Vec<(f64, f64)>), CliError>
where
    F: FnMut(&ExperimentConfig, f64) -> Result<TrainOutcome, CliError>,
{
    let mut best: Option<TrainOutcome> = None;
    let mut table = Vec::new();
    for &lr in &cfg.train.lr {
        let out = train(cfg, lr)?;
        let fl = out.final_loss();
        table.push((lr, fl));
        if best.as_ref().is_none_or(|b| fl < b.final_loss()) {
            best = Some(out);
        }
    }
    Ok((best.expect("at least one learning rate"), table))
}
