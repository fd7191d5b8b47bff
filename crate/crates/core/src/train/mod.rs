//! Seeded mini-batch training with Adam, plus checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Direction};
use crate::matching::DEFAULT_MARGIN;
use crate::model::Model;
use crate::tensor::{ParamStore, Precision, TensorError};
use crate::text::CaptionGraph;
use crate::video::ExpertFeatures;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            margin: DEFAULT_MARGIN,
            lr: 1e-4,
            seed: 7,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 (the loss needs negatives), got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam step using the gradients stored on `params`.
/// Nothing is modified when any gradient is non-finite.
pub fn optimizer_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, precision: Precision) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.len() != t.len() {
                return Err(Error::Invalid(format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    g.len(),
                    t.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.step += 1;
    let t_step = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t_step);
    let c2 = 1.0 - BETA2.powi(t_step);
    for (name, t) in params.iter_mut() {
        if !t.requires_grad() {
            continue;
        }
        let n = t.len();
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let data = t.data_mut();
        for i in 0..n {
            m[i] = precision.round(BETA1 * m[i] + (1.0 - BETA1) * grad[i]);
            v[i] = precision.round(BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i]);
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            data[i] = precision.round(data[i] - update);
        }
    }
    Ok(())
}

/// Summary metrics attached to an epoch log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<EpochMetrics>,
}

impl fmt::Display for EpochLog {
    /// `epoch loss [R@1 R@5 R@10 MedR]`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:e}", self.epoch, self.loss)?;
        if let Some(m) = &self.metrics {
            write!(f, " {:.4} {:.4} {:.4} {}", m.r1, m.r5, m.r10, m.medr)?;
        }
        Ok(())
    }
}

/// Model, optimizer state and RNG for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh model for `corpus`. Draw order from the seeded generator: random
    /// word vectors (when no embeddings file is set), then weights in
    /// parameter-name order, then one shuffle per epoch.
    pub fn from_config(run: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let mut run = run.clone();
        run.adopt_corpus(&corpus.manifest);
        run.train.validate()?;
        run.model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let table = corpus.embedding_table(run.embeddings.as_deref(), run.model.word_dim, &mut rng)?;
        let model = Model::init(run.model.clone(), table, &mut rng)?;
        Ok(Self {
            run,
            model,
            adam: AdamState::default(),
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let (run, model, adam, rng, epoch) = ckpt.into_parts()?;
        Ok(Self {
            run,
            model,
            adam,
            rng,
            epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.run, &self.model, &self.adam, &self.rng, self.epoch)
    }

    /// Forward, backward and Adam update on one aligned batch; returns the loss.
    pub fn step(&mut self, clips: &[&ExpertFeatures], captions: &[&CaptionGraph]) -> Result<f64> {
        let mut tape = self.model.tape();
        let loss = match self.model.batch_loss(&mut tape, clips, captions, self.run.train.margin) {
            Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                return Err(Error::Diverged { epoch: self.epoch + 1 });
            }
            other => other?,
        };
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch + 1 });
        }
        let grads = tape.backward(loss)?;
        grads.assign(&tape, &mut self.model.params);
        optimizer_step(
            &mut self.model.params,
            &mut self.adam,
            self.run.train.lr,
            self.model.config.precision,
        )?;
        Ok(value)
    }

    /// One pass over every caption in shuffled batches; returns the mean batch loss.
    /// A trailing batch of a single pair is skipped.
    pub fn run_epoch(&mut self, corpus: &Corpus, feats: &[ExpertFeatures]) -> Result<f64> {
        let mut order: Vec<usize> = (0..corpus.captions.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.run.train.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let caps: Vec<&CaptionGraph> = chunk.iter().map(|&i| &corpus.captions[i]).collect();
            let clips: Vec<&ExpertFeatures> = caps.iter().map(|g| &feats[corpus.clip_of(g)]).collect();
            total += self.step(&clips, &caps)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Invalid("corpus has fewer than two captions".into()));
        }
        Ok(total / batches as f64)
    }

    pub fn expert_features(&self, corpus: &Corpus) -> Result<Vec<ExpertFeatures>> {
        corpus.clips.iter().map(|c| self.model.expert_features(c)).collect()
    }

    /// Runs `epochs` more epochs. Every `eval_every` epochs text→video metrics on
    /// `corpus` are attached to the log. On a non-finite loss the trainer is
    /// rolled back to the last completed epoch, which is also written to
    /// `checkpoint_path` when given.
    pub fn train(
        &mut self,
        corpus: &Corpus,
        epochs: usize,
        checkpoint_path: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let feats = self.expert_features(corpus)?;
        let mut logs = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let snapshot = (self.model.params.clone(), self.adam.clone(), self.rng.clone());
            let loss = match self.run_epoch(corpus, &feats) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Diverged { .. }) | Err(Error::NonFiniteGradient(_)) => {
                    (self.model.params, self.adam, self.rng) = snapshot;
                    if let Some(path) = checkpoint_path {
                        save_checkpoint(&self.checkpoint(), path)?;
                    }
                    return Err(Error::Diverged { epoch: self.epoch + 1 });
                }
                Err(e) => return Err(e),
            };
            self.epoch += 1;
            let every = self.run.train.eval_every;
            let metrics = if every > 0 && self.epoch % every == 0 {
                let r = evaluate(&self.model, corpus, Direction::TextToVideo)?;
                Some(EpochMetrics {
                    r1: r.recall(1),
                    r5: r.recall(5),
                    r10: r.recall(10),
                    medr: r.median_rank,
                })
            } else {
                None
            };
            let log = EpochLog {
                epoch: self.epoch,
                loss,
                metrics,
            };
            log::info!("{log}");
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
