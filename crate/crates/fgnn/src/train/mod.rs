//! The optimization loop: Adam with L2 weight decay on the gradients,
//! step (or linear) learning-rate decay, seeded shuffling, mini-batches
//! with summed cross-entropy, and per-epoch logging.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{FgnnError, Result};
use crate::eval::{evaluate, ModelRanker};
use crate::model::{forward_logits, loss_on_tape, Architecture, ModelParams};
use crate::session_graph::SessionGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// lr · factor^⌊epoch / every⌋
    Step,
    /// lr · max(0, 1 − factor·⌊epoch / every⌋)
    Linear,
}

impl std::str::FromStr for Schedule {
    type Err = FgnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Schedule::Step),
            "linear" => Ok(Schedule::Linear),
            other => Err(FgnnError::Usage(format!(
                "unknown schedule '{other}' (expected step|linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub schedule: Schedule,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Compute test R@20 / MRR@20 after each epoch.
    pub eval_each_epoch: bool,
    pub arch: Architecture,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every_epochs: 3,
            schedule: Schedule::Step,
            l2: 1e-5,
            batch_size: 100,
            epochs: 10,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_each_epoch: false,
            arch: Architecture::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.lr <= 0.0 {
            return Err(FgnnError::Usage("lr must be positive".into()));
        }
        if self.decay_factor <= 0.0 || self.decay_every_epochs == 0 {
            return Err(FgnnError::Usage(
                "decay_factor and decay_every_epochs must be positive".into(),
            ));
        }
        if self.l2 < 0.0 {
            return Err(FgnnError::Usage("l2 must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(FgnnError::Usage("batch_size must be positive".into()));
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0)
            || self.adam_eps <= 0.0
        {
            return Err(FgnnError::Usage("invalid Adam moment parameters".into()));
        }
        Ok(())
    }

    /// Flat key=value view (the config-echo format).
    pub fn flat_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), format!("{}", self.lr)),
            ("decay_factor".into(), format!("{}", self.decay_factor)),
            (
                "decay_every_epochs".into(),
                format!("{}", self.decay_every_epochs),
            ),
            (
                "schedule".into(),
                match self.schedule {
                    Schedule::Step => "step".into(),
                    Schedule::Linear => "linear".into(),
                },
            ),
            ("l2".into(), format!("{}", self.l2)),
            ("batch_size".into(), format!("{}", self.batch_size)),
            ("epochs".into(), format!("{}", self.epochs)),
            ("seed".into(), format!("{}", self.seed)),
            ("adam_beta1".into(), format!("{}", self.adam_beta1)),
            ("adam_beta2".into(), format!("{}", self.adam_beta2)),
            ("adam_eps".into(), format!("{}", self.adam_eps)),
            (
                "eval_each_epoch".into(),
                format!("{}", self.eval_each_epoch),
            ),
            ("embed_dim".into(), format!("{}", self.arch.embed_dim)),
            ("layers".into(), format!("{}", self.arch.layers)),
            ("heads".into(), format!("{}", self.arch.heads)),
            (
                "readout_steps".into(),
                format!("{}", self.arch.readout_steps),
            ),
            (
                "combine".into(),
                match self.arch.combine {
                    crate::wgat::HeadCombine::Mean => "mean".into(),
                    crate::wgat::HeadCombine::Concat => "concat".into(),
                },
            ),
            ("readout".into(), self.arch.readout.as_str().into()),
            (
                "edge_weight_norm".into(),
                match self.arch.edge_weight_norm {
                    crate::wgat::EdgeWeightNorm::None => "none".into(),
                    crate::wgat::EdgeWeightNorm::OutDegree => "out_degree".into(),
                },
            ),
            (
                "selfloop_clamp".into(),
                format!("{}", self.arch.selfloop_clamp),
            ),
        ]
    }
}

/// Effective learning rate for an epoch.
pub fn lr_schedule(epoch: usize, config: &TrainingConfig) -> f64 {
    let periods = (epoch / config.decay_every_epochs) as f64;
    match config.schedule {
        Schedule::Step => config.lr * config.decay_factor.powf(periods),
        Schedule::Linear => config.lr * (1.0 - config.decay_factor * periods).max(0.0),
    }
}

/// First and second moment estimates per parameter, in the model's
/// named-parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub slots: Vec<AdamSlot>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn for_model(params: &ModelParams) -> Self {
        AdamState {
            slots: params
                .named_parameters()
                .into_iter()
                .map(|(name, t)| AdamSlot {
                    name,
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over all parameters, in place. L2
/// enters as `l2 · θ` added to each gradient before the moments.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    config: &TrainingConfig,
    lr_effective: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - config.adam_beta1.powi(t as i32);
    let bias2 = 1.0 - config.adam_beta2.powi(t as i32);

    let mut named = params.named_parameters_mut();
    if named.len() != state.slots.len() {
        return Err(FgnnError::Contract(format!(
            "optimizer state has {} slots for {} parameters",
            state.slots.len(),
            named.len()
        )));
    }
    for ((name, param), slot) in named.iter_mut().zip(&mut state.slots) {
        let grad = param
            .grad()
            .ok_or_else(|| FgnnError::Contract(format!("parameter {name} has no gradient")))?
            .to_vec();
        let theta = param.values_mut();
        for i in 0..theta.len() {
            let g = grad[i] + config.l2 * theta[i];
            slot.m[i] = config.adam_beta1 * slot.m[i] + (1.0 - config.adam_beta1) * g;
            slot.v[i] = config.adam_beta2 * slot.v[i] + (1.0 - config.adam_beta2) * g * g;
            let m_hat = slot.m[i] / bias1;
            let v_hat = slot.v[i] / bias2;
            theta[i] -= lr_effective * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss_sum: f64,
    pub loss_mean: f64,
    pub examples: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall20: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr20: Option<f64>,
}

#[derive(Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub state: AdamState,
    pub epoch_log: Vec<EpochStats>,
}

/// Gaussian(0, 0.1) parameters with orthogonal readout GRU gate blocks;
/// a fixed seed fixes the whole model.
pub fn init_model(config: &TrainingConfig, vocab_size: usize) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    ModelParams::init(&config.arch, vocab_size, &mut rng)
}

/// Full training run over the dataset's train split. Deterministic in
/// (seed, config, dataset bytes).
pub fn train(config: &TrainingConfig, dataset: &Dataset) -> Result<TrainRun> {
    config.validate()?;
    if dataset.train_examples.is_empty() {
        return Err(FgnnError::Usage("train split has no examples".into()));
    }
    let mut params = init_model(config, dataset.vocab.len())?;
    let mut state = AdamState::for_model(&params);
    // Shuffling draws from a stream separate from initialization so the
    // model seed and the data order stay independently reproducible.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5e55_10f5));
    let mut epoch_log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let mut order: Vec<usize> = (0..dataset.train_examples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let mut batch_loss = None;
            for &index in batch {
                let example = &dataset.train_examples[index];
                let graph = SessionGraph::build_with(&example.prefix, config.arch.graph_config())?;
                let logits = forward_logits(&mut tape, &config.arch, &binding, &graph)?;
                let loss = loss_on_tape(&mut tape, logits, example.label)?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("batches are non-empty");
            loss_sum += tape.value_scalar(total);
            tape.backward(total)?;
            params.absorb_grads(&tape, &binding)?;
            adam_step(&mut params, &mut state, config, lr)?;
            params.zero_grads();
            steps += 1;
        }

        let (recall20, mrr20) = if config.eval_each_epoch && !dataset.test_examples.is_empty() {
            let report = evaluate(
                &ModelRanker { params: &params },
                &dataset.test_examples,
                &[20],
            )?;
            let m = &report.at_k[0];
            (Some(m.recall), Some(m.mrr))
        } else {
            (None, None)
        };
        epoch_log.push(EpochStats {
            epoch,
            lr,
            loss_sum,
            loss_mean: loss_sum / dataset.train_examples.len() as f64,
            examples: dataset.train_examples.len(),
            steps,
            recall20,
            mrr20,
        });
    }

    Ok(TrainRun {
        params,
        state,
        epoch_log,
    })
}
