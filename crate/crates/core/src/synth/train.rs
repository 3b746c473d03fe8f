use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{derive_seed, Utterance};
use super::model::{Params, ToyModel};
use crate::ctc::{ctc_loss_and_gradient, LabelSequence};
use crate::error::{Error, Result};
use crate::vocab::{encode_tagged_text, Role, TagRegistry, Vocabulary};

/// What the model is asked to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Transcription interleaved with event tags.
    Tagged,
    /// Transcription only; tags stripped from the targets.
    TranscriptionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub context: usize,
    /// Global gradient-norm clip applied per batch; `None` disables it.
    pub clip_norm: Option<f64>,
    pub supervision: Supervision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch: 16,
            seed: 42,
            hidden: 64,
            context: 5,
            clip_norm: Some(5.0),
            supervision: Supervision::Tagged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss over the corpus at the initial weights.
    pub initial_loss: f64,
    /// Mean training loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped: Vec<String>,
}

/// Target label sequence for an utterance under the given supervision.
pub fn target_labels(
    text: &str,
    vocab: &Vocabulary,
    registry: &TagRegistry,
    supervision: Supervision,
) -> Result<LabelSequence> {
    let mut ids = encode_tagged_text(vocab, registry, text)?;
    if supervision == Supervision::TranscriptionOnly {
        ids.retain(|&id| vocab.role(id) == Some(Role::Transcription));
    }
    LabelSequence::new(ids, vocab.blank_id())
}

struct Example<'a> {
    utt: &'a Utterance,
    labels: LabelSequence,
}

fn mean_loss(model: &ToyModel, examples: &[Example<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let fwd = model.forward(ex.utt.features.view())?;
        total += ctc_loss_and_gradient(fwd.logits.view(), &ex.labels)?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Minimises mean CTC loss with minibatch SGD and momentum. Utterances whose
/// targets cannot be aligned to their frames are skipped with a warning.
pub fn train(
    corpus: &[Utterance],
    vocab: &Vocabulary,
    registry: &TagRegistry,
    cfg: &TrainConfig,
) -> Result<(ToyModel, TrainLog)> {
    if cfg.batch == 0 || cfg.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!(
            "batch {} lr {} momentum {} out of range",
            cfg.batch, cfg.lr, cfg.momentum
        )));
    }
    let feature_dim = corpus
        .first()
        .map(|u| u.features.ncols())
        .ok_or_else(|| Error::Config("empty training corpus".into()))?;
    let mut examples = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for utt in corpus {
        let labels = target_labels(&utt.tagged_text, vocab, registry, cfg.supervision)?;
        let frames = utt.features.nrows();
        if labels.required_frames() > frames || utt.features.ncols() != feature_dim {
            warn!(
                "skipping {}: {} labels need {} frames, have {frames}",
                utt.id,
                labels.len(),
                labels.required_frames()
            );
            skipped.push(utt.id.clone());
            continue;
        }
        examples.push(Example { utt, labels });
    }
    if examples.is_empty() {
        return Err(Error::Config("no trainable utterances".into()));
    }

    let mut model = ToyModel::new(
        feature_dim,
        cfg.context,
        cfg.hidden,
        vocab.total(),
        derive_seed(cfg.seed, "init", 0),
    )?;
    let initial_loss = mean_loss(&model, &examples)?;
    let mut velocity = Params::zeros_like(&model);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut grad = Params::zeros_like(&model);
            for &i in batch {
                let ex = &examples[i];
                let fwd = model.forward(ex.utt.features.view())?;
                let (loss, dlogits) = ctc_loss_and_gradient(fwd.logits.view(), &ex.labels)?;
                epoch_loss += loss;
                grad.scaled_add(1.0, &model.backward(&fwd, &dlogits));
            }
            grad.scale(1.0 / batch.len() as f64);
            if let Some(clip) = cfg.clip_norm {
                let norm = grad.norm();
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            velocity.scale(cfg.momentum);
            velocity.scaled_add(-cfg.lr, &grad);
            model.apply(&velocity);
        }
        epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    Ok((
        model,
        TrainLog {
            initial_loss,
            epoch_losses,
            skipped,
        },
    ))
}
