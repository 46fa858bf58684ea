//! Episodic meta-training and evaluation.
//!
//! Training is sequential: sample an episode, run the differentiable
//! pipeline (encode, co-adapt, prototype, classify), backpropagate, take an
//! Adam step. Evaluation parallelizes across episodes with one RNG stream
//! per episode index, so reports are identical regardless of thread count.
//! `CAD_THREADS` caps the evaluation pool when set.

pub mod adam;
pub mod checkpoint;

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    co_adapt_on, init_mab, AdaptMode, MabParameters, MabVars, QueryAdapted, QueryAggregation,
};
use crate::encoder::{init_encoder, encode_on, EncoderKind, EncoderParameters};
use crate::episodes::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::head::{
    classify_on, classify_per_class_on, episode_accuracy, episode_loss_on, prototypes_on,
    DistanceKind,
};
use crate::numerics::tape::Tape;
use crate::numerics::{Precision, Scalar, Tensor};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, peek_meta, save_checkpoint, CheckpointMeta};

fn default_way() -> usize {
    5
}
fn default_shot() -> usize {
    1
}
fn default_query() -> usize {
    15
}
fn default_epochs() -> usize {
    60
}
fn default_tasks_per_epoch() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    0.003
}
fn default_mode() -> AdaptMode {
    AdaptMode::Full
}
fn default_embed_dim() -> usize {
    64
}
fn default_precision() -> Precision {
    Precision::F64
}
fn default_val_episodes() -> usize {
    200
}

/// Everything a training run needs; serializable so checkpoints and run
/// manifests can reproduce it. Defaults are desk-scale; call
/// [`TrainConfig::paper_scale`] for the published protocol sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_way")]
    pub way: usize,
    #[serde(default = "default_shot")]
    pub shot: usize,
    /// Queries per class in every episode.
    #[serde(default = "default_query")]
    pub query: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_tasks_per_epoch")]
    pub tasks_per_epoch: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_mode")]
    pub mode: AdaptMode,
    #[serde(default)]
    pub distance: DistanceKind,
    #[serde(default)]
    pub query_aggregation: QueryAggregation,
    #[serde(default)]
    pub seed: u64,
    pub encoder: EncoderKind,
    /// Embedding dimension m.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Seeded validation episodes run after every epoch.
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
}

impl TrainConfig {
    pub fn new(encoder: EncoderKind) -> Self {
        TrainConfig {
            way: default_way(),
            shot: default_shot(),
            query: default_query(),
            epochs: default_epochs(),
            tasks_per_epoch: default_tasks_per_epoch(),
            learning_rate: default_learning_rate(),
            mode: default_mode(),
            distance: DistanceKind::default(),
            query_aggregation: QueryAggregation::default(),
            seed: 0,
            encoder,
            embed_dim: default_embed_dim(),
            precision: default_precision(),
            val_episodes: default_val_episodes(),
        }
    }

    /// Published protocol sizes: 200 tasks per epoch, 300 epochs for
    /// 1-shot (60,000 tasks), 200 epochs otherwise (40,000 tasks).
    pub fn paper_scale(&mut self) {
        self.tasks_per_epoch = 200;
        self.epochs = if self.shot == 1 { 300 } else { 200 };
    }

    pub fn total_tasks(&self) -> usize {
        self.epochs * self.tasks_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::InvalidArgument(format!(
                "way must be at least 2, got {}",
                self.way
            )));
        }
        for (name, v) in [
            ("shot", self.shot),
            ("query", self.query),
            ("epochs", self.epochs),
            ("tasks_per_epoch", self.tasks_per_epoch),
            ("embed_dim", self.embed_dim),
            ("val_episodes", self.val_episodes),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        // Zero is allowed so a null training step stays expressible.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// All trainable state: the encoder and, for parametric modes, the shared
/// attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f64> {
    pub encoder: EncoderParameters<T>,
    pub mab: Option<MabParameters<T>>,
}

impl<T: Scalar> Params<T> {
    /// Fresh parameters for a config; the attention block exists only when
    /// the mode trains one.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let encoder = init_encoder(config.encoder.clone(), config.embed_dim, config.seed)?;
        let mab = config
            .mode
            .is_parametric()
            .then(|| init_mab(config.embed_dim, config.seed.wrapping_add(1)))
            .transpose()?;
        Ok(Params { encoder, mab })
    }

    /// Trainable tensors: encoder layers first, then the attention block.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = self.encoder.parameters();
        if let Some(mab) = &self.mab {
            out.extend(mab.trainable());
        }
        out
    }

    pub fn trainable_owned(&self) -> Vec<Tensor<T>> {
        self.trainable().into_iter().cloned().collect()
    }

    /// Names parallel to [`Self::trainable`].
    pub fn names(&self) -> Vec<String> {
        let mut out = self.encoder.parameter_names();
        if let Some(mab) = &self.mab {
            out.extend(mab.trainable_names());
        }
        out
    }

    pub fn set_trainable(&mut self, mut tensors: Vec<Tensor<T>>) -> Result<()> {
        let enc_count = self.encoder.parameters().len();
        let expected = enc_count + self.mab.as_ref().map_or(0, |m| m.trainable().len());
        if tensors.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "model has {expected} trainable tensors, got {}",
                tensors.len()
            )));
        }
        let mab_part = tensors.split_off(enc_count);
        self.encoder.set_parameters(tensors)?;
        if let Some(mab) = &mut self.mab {
            mab.set_trainable(mab_part)?;
        }
        Ok(())
    }

    /// Rebuilds parameters from checkpoint tensors named as in
    /// [`Self::names`].
    pub fn from_named(config: &TrainConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut encoder_tensors = Vec::new();
        let mut mab_named = Vec::new();
        for (name, tensor) in named {
            if name.starts_with("encoder.") {
                encoder_tensors.push(tensor);
            } else if name.starts_with("mab.") {
                mab_named.push((name, tensor));
            } else {
                return Err(Error::BadCheckpoint(format!("unknown tensor name {name:?}")));
            }
        }
        let encoder =
            EncoderParameters::from_parameters(config.encoder.clone(), config.embed_dim, encoder_tensors)?;
        let mab = if config.mode.is_parametric() {
            Some(mab_from_named(config.embed_dim, mab_named)?)
        } else if mab_named.is_empty() {
            None
        } else {
            return Err(Error::BadCheckpoint(format!(
                "mode {} carries no attention parameters but the file stores {}",
                config.mode,
                mab_named.len()
            )));
        };
        Ok(Params { encoder, mab })
    }
}

fn mab_from_named<T: Scalar>(
    m: usize,
    named: Vec<(String, Tensor<T>)>,
) -> Result<MabParameters<T>> {
    let mut params = MabParameters::identity(m);
    params.parametric = true;
    params.use_norm = false;
    let mut seen = [false; 4];
    for (name, tensor) in named {
        let (slot, want_shape, idx): (&mut Tensor<T>, Vec<usize>, Option<usize>) = match name.as_str() {
            "mab.w_q" => (&mut params.w_q, vec![m, m], Some(0)),
            "mab.w_k" => (&mut params.w_k, vec![m, m], Some(1)),
            "mab.w_v" => (&mut params.w_v, vec![m, m], Some(2)),
            "mab.w_o" => (&mut params.w_o, vec![m, m], Some(3)),
            "mab.norm_gain" => (&mut params.norm_gain, vec![m], None),
            "mab.norm_bias" => (&mut params.norm_bias, vec![m], None),
            other => {
                return Err(Error::BadCheckpoint(format!("unknown tensor name {other:?}")))
            }
        };
        if tensor.shape() != want_shape.as_slice() {
            return Err(Error::BadCheckpoint(format!(
                "{name} has shape {:?}, expected {:?}",
                tensor.shape(),
                want_shape
            )));
        }
        if let Some(i) = idx {
            seen[i] = true;
        } else {
            params.use_norm = true;
        }
        *slot = tensor;
    }
    if seen != [true; 4] {
        return Err(Error::BadCheckpoint(
            "attention block is missing one of w_q/w_k/w_v/w_o".into(),
        ));
    }
    Ok(params)
}

/// Serializable snapshot of the training RNG, so a checkpoint pins the
/// exact sampling position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Everything a finished run produces. `best` is the parameter snapshot at
/// the highest validation accuracy (earliest epoch on ties).
#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f64> {
    pub params: Params<T>,
    pub best: Params<T>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub rng: RngState,
}

/// Accuracy summary over sampled test episodes. The interval half-width is
/// 1.96 standard errors; per-episode accuracies are kept so the summary is
/// recomputable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let e = accuracies.len();
        let mean = mean(&accuracies);
        let ci95 = if e > 1 {
            let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (e as f64 - 1.0);
            1.96 * var.sqrt() / (e as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            mean_accuracy: mean,
            ci95,
            episodes: e,
            accuracies,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Full differentiable pipeline for one episode; returns the loss and the
/// query probability handle.
fn forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &crate::encoder::EncoderVars,
    mab: &MabVars,
    episode: &Episode<T>,
    mode: AdaptMode,
    aggregation: QueryAggregation,
    distance: DistanceKind,
) -> Result<(crate::numerics::tape::Var, crate::numerics::tape::Var)> {
    let (n, k) = (episode.way(), episode.shot());
    let support = tape.input(&episode.support_flat());
    let query = tape.input(&episode.query);
    let zs_flat = encode_on(tape, enc, support)?;
    let m = tape.value(zs_flat)?.shape()[1];
    let z_s = tape.reshape(zs_flat, vec![n, k, m])?;
    let z_q = encode_on(tape, enc, query)?;
    let adapted = co_adapt_on(tape, z_s, z_q, mab, mode, aggregation)?;
    let protos = prototypes_on(tape, adapted.z_s_adapted)?;
    let probs = match adapted.z_q_adapted {
        QueryAdapted::Shared(zq) => classify_on(tape, zq, protos, distance)?,
        QueryAdapted::PerClass(zq) => classify_per_class_on(tape, zq, protos, distance)?,
    };
    let loss = episode_loss_on(tape, probs, &episode.query_labels)?;
    Ok((loss, probs))
}

fn require_mab<T: Scalar>(params: &Params<T>, mode: AdaptMode) -> Result<()> {
    if mode.is_parametric() && params.mab.is_none() {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} needs attention parameters but none are present"
        )));
    }
    Ok(())
}

/// Query probabilities and loss for one episode, values only. This is the
/// exact inference path: nothing is dropped relative to training.
pub fn episode_scores<T: Scalar>(
    params: &Params<T>,
    episode: &Episode<T>,
    mode: AdaptMode,
    aggregation: QueryAggregation,
    distance: DistanceKind,
) -> Result<(Tensor<T>, f64)> {
    require_mab(params, mode)?;
    let mut tape = Tape::new();
    let enc = params.encoder.register(&mut tape);
    let mab = params
        .mab
        .as_ref()
        .map_or(MabVars::Identity, |m| m.register(&mut tape));
    let (loss, probs) = forward_on(&mut tape, &enc, &mab, episode, mode, aggregation, distance)?;
    Ok((
        tape.value(probs)?.clone(),
        tape.value(loss)?.item()?.as_f64(),
    ))
}

/// One training step: loss value plus gradients aligned with
/// [`Params::trainable`].
fn train_step<T: Scalar>(
    params: &Params<T>,
    episode: &Episode<T>,
    config: &TrainConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let enc = params.encoder.register(&mut tape);
    let mab = params
        .mab
        .as_ref()
        .map_or(MabVars::Identity, |m| m.register(&mut tape));
    let (loss, _) = forward_on(
        &mut tape,
        &enc,
        &mab,
        episode,
        config.mode,
        config.query_aggregation,
        config.distance,
    )?;
    let loss_value = tape.value(loss)?.item()?.as_f64();
    if !loss_value.is_finite() {
        // Caller attaches the task index.
        return Ok((loss_value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let mut vars = enc.parameter_vars();
    vars.extend(mab.trainable_vars());
    let per_param = vars
        .into_iter()
        .map(|v| grads.get(v).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, per_param))
}

fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("CAD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("evaluation thread pool")
    })
}

/// Accuracy per episode, parallel but deterministic: episode i always
/// samples from stream `stream_base + i` of `seed`.
fn episode_accuracies<T: Scalar>(
    params: &Params<T>,
    ds: &Dataset<T>,
    config: &TrainConfig,
    episodes: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<f64>> {
    require_mab(params, config.mode)?;
    eval_pool().install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_base + i as u64);
                let episode = ds.sample_episode(config.way, config.shot, config.query, &mut rng)?;
                let (probs, _) = episode_scores(
                    params,
                    &episode,
                    config.mode,
                    config.query_aggregation,
                    config.distance,
                )?;
                episode_accuracy(&probs, &episode.query_labels)
            })
            .collect::<Result<Vec<f64>>>()
    })
}

/// Validation streams sit far away from the training stream (0) and from
/// evaluation streams (0..episodes).
const VAL_STREAM_BASE: u64 = 1 << 32;
const VAL_STREAM_STRIDE: u64 = 1 << 20;

/// Meta-trains a model. Deterministic for a fixed config: the sampling RNG
/// trace depends only on the seed and episode counts.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_ds: &Dataset<T>,
    val_ds: &Dataset<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut params = Params::init(config)?;
    let mut opt = Adam::new(config.learning_rate, &params.trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut best = params.clone();
    let mut best_val_accuracy = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for task in 0..config.tasks_per_epoch {
            let episode = train_ds.sample_episode(config.way, config.shot, config.query, &mut rng)?;
            let (loss, grads) = train_step(&params, &episode, config)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: epoch * config.tasks_per_epoch + task,
                    value: loss,
                });
            }
            let updated = opt.step(params.trainable_owned(), &grads)?;
            params.set_trainable(updated)?;
            loss_sum += loss;
        }
        let val_accs = episode_accuracies(
            &params,
            val_ds,
            config,
            config.val_episodes,
            config.seed,
            VAL_STREAM_BASE + epoch as u64 * VAL_STREAM_STRIDE,
        )?;
        let val_accuracy = mean(&val_accs);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / config.tasks_per_epoch as f64,
            val_accuracy,
        });
        if val_accuracy > best_val_accuracy {
            best_val_accuracy = val_accuracy;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        params,
        best,
        best_epoch,
        best_val_accuracy,
        history,
        rng: RngState::capture(&rng),
    })
}

/// Accuracy over `episodes` sampled test tasks. Episode i uses stream i of
/// `seed`, so reports are reproducible and independent of thread count.
pub fn evaluate<T: Scalar>(
    params: &Params<T>,
    ds: &Dataset<T>,
    config: &TrainConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one episode".into(),
        ));
    }
    let accs = episode_accuracies(params, ds, config, episodes, seed, 0)?;
    Ok(EvalReport::from_accuracies(accs))
}

/// Trains and evaluates one model per mode with identical seeds, so every
/// mode sees the same training episodes and the same test episodes.
pub fn ablation_sweep<T: Scalar>(
    base: &TrainConfig,
    train_ds: &Dataset<T>,
    val_ds: &Dataset<T>,
    test_ds: &Dataset<T>,
    modes: &[AdaptMode],
    episodes: usize,
    eval_seed: u64,
) -> Result<Vec<(AdaptMode, EvalReport)>> {
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut config = base.clone();
        config.mode = mode;
        let outcome = train(&config, train_ds, val_ds)?;
        let report = evaluate(&outcome.best, test_ds, &config, episodes, eval_seed)?;
        out.push((mode, report));
    }
    Ok(out)
}
