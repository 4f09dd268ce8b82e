use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusSpec};
use super::masking::{mask_tokens, MaskPolicy, Masked};
use super::model::{masked_accuracy, masked_cross_entropy, Model, ModelConfig};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_eval_batches() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_policy: MaskPolicy,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Reuse the first batch (and its mask) at every step.
    #[serde(default)]
    pub overfit_single_batch: bool,
    /// Held-out batches scored for the final log-perplexity.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batches == 0 {
            return Err(Error::Config(
                "batch_size and eval_batches must be at least 1".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        self.mask_policy.validate()
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate(self.corpus.seq_len)?;
        self.train.validate()
    }

    /// Fresh model for this config; initialization draws from the train seed.
    pub fn init_model(&self) -> Result<Model> {
        Model::init(
            &self.model,
            self.corpus.vocab_size,
            self.corpus.seq_len,
            &Rng::new(self.train.seed).fork("model"),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    /// Loss on the step's batch before the update.
    pub loss: f64,
    pub masked_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    pub final_log_perplexity: f64,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,masked_accuracy\n");
        for s in &self.steps {
            writeln!(out, "{},{},{}", s.step, s.loss, s.masked_accuracy).unwrap();
        }
        out
    }
}

/// The step's masked batch. A mask that selects nothing is redrawn from the
/// next attempt's stream.
fn train_batch(corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Result<Masked> {
    let step = if cfg.overfit_single_batch {
        0
    } else {
        step as u64
    };
    let batch = corpus.batch(
        cfg.batch_size,
        &mut Rng::new(corpus.spec().seed).fork("train").fork_index(step),
    );
    let masks = Rng::new(cfg.seed).fork("mask").fork_index(step);
    for attempt in 0..100 {
        let masked = mask_tokens(&batch, &cfg.mask_policy, &mut masks.fork_index(attempt));
        if !masked.targets.is_empty() {
            return Ok(masked);
        }
    }
    Err(Error::DegenerateBatch)
}

/// Runs Adam on every parameter for `cfg.steps` steps.
pub fn train(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let adam = cfg.optimizer;
    let zeros = |t: &Tensor| vec![0.0; t.len()];
    let mut m: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| zeros(t)).collect();
    let mut v = m.clone();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let masked = train_batch(corpus, cfg, step)?;
        let mut tape = Tape::new();
        let (vars, logits) = model.forward(&mut tape, &masked.inputs)?;
        let loss_var = masked_cross_entropy(&mut tape, logits, &masked.targets)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            let tensor = tape.first_non_finite().unwrap_or("loss").to_string();
            return Err(Error::Diverged { step, tensor });
        }
        let grads = tape.backward(loss_var)?;
        log.push(TrainStep {
            step,
            loss,
            masked_accuracy: masked_accuracy(tape.value(logits), &masked.targets),
        });

        let t = (step + 1) as i32;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        for (k, (name, param)) in model.params_mut().enumerate() {
            let g = grads.get(vars[k]).expect("every parameter is a leaf");
            for (i, (p, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k][i] = adam.beta1 * m[k][i] + (1.0 - adam.beta1) * gi;
                v[k][i] = adam.beta2 * v[k][i] + (1.0 - adam.beta2) * gi * gi;
                let update =
                    cfg.learning_rate * (m[k][i] / c1) / ((v[k][i] / c2).sqrt() + adam.eps);
                *p -= update;
            }
            if !param.all_finite() {
                return Err(Error::Diverged {
                    step,
                    tensor: name.to_string(),
                });
            }
        }
    }

    let final_log_perplexity = eval_log_perplexity(
        model,
        corpus,
        &cfg.mask_policy,
        cfg.eval_batches,
        cfg.batch_size,
    )?;
    Ok(TrainLog {
        steps: log,
        final_log_perplexity,
    })
}

/// Mean masked cross-entropy over `batches` held-out batches drawn from a
/// fixed evaluation stream of the corpus seed.
pub fn eval_log_perplexity(
    model: &Model,
    corpus: &Corpus,
    policy: &MaskPolicy,
    batches: usize,
    batch_size: usize,
) -> Result<f64> {
    let eval = Rng::new(corpus.spec().seed).fork("eval");
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..batches as u64 {
        let batch = corpus.batch(batch_size, &mut eval.fork("data").fork_index(i));
        let masked = mask_tokens(&batch, policy, &mut eval.fork("mask").fork_index(i));
        if masked.targets.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let (_, logits) = model.forward(&mut tape, &masked.inputs)?;
        let loss = masked_cross_entropy(&mut tape, logits, &masked.targets)?;
        total += tape.value(loss).item()? * masked.targets.len() as f64;
        count += masked.targets.len();
    }
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(total / count as f64)
}
