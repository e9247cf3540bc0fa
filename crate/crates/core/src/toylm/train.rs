//! Fine-tuning loop: label-only generative loss or a discriminative head,
//! AdamW with linear decay, and validation-driven early stopping.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::classify_generative;
use super::lora::LoraConfig;
use super::model::{shuffle, Gradients, ToyLm};
use super::optim::{AdamW, AdamWConfig};
use super::tokenizer::{build_prompt, label_tokens};
use crate::error::{Error, Result};
use crate::metrics::strict_match;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    /// Next-token prediction of the label text.
    #[default]
    Generative,
    /// K-way linear head on the last-token representation.
    Discriminative,
}

impl TuningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Generative => "generative",
            TuningMode::Discriminative => "discriminative",
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(TuningMode::Generative),
            "discriminative" => Ok(TuningMode::Discriminative),
            other => Err(Error::Config(format!("unknown tuning mode {other:?}"))),
        }
    }
}

/// Which parameters fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Frozen base, trainable low-rank adapters.
    #[default]
    Lora,
    /// Every base parameter is trainable.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TuningMode,
    pub adapter: AdapterKind,
    pub lora: LoraConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Consecutive validation declines that trigger a stop...
    pub patience: usize,
    /// ...once the epoch number exceeds this.
    pub min_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TuningMode::Generative,
            adapter: AdapterKind::Lora,
            lora: LoraConfig::default(),
            optimizer: AdamWConfig::default(),
            epochs: 50,
            batch_size: 8,
            patience: 6,
            min_epochs: 15,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        self.lora.validate()
    }
}

/// Early-stopping bookkeeping. A decline is a strict decrease against the
/// previous epoch; anything else resets the run of declines. Training stops
/// once `patience` consecutive declines have been seen and the (1-based)
/// epoch exceeds `min_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_epochs: usize,
    previous: Option<f64>,
    declines: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_epochs: usize) -> Self {
        EarlyStopping {
            patience,
            min_epochs,
            previous: None,
            declines: 0,
        }
    }

    pub fn declines(&self) -> usize {
        self.declines
    }

    /// Records the validation value of `epoch`; true means stop now.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.previous {
            Some(prev) if value < prev => self.declines += 1,
            _ => self.declines = 0,
        }
        self.previous = Some(value);
        self.declines >= self.patience && epoch > self.min_epochs
    }
}

/// A labeled training sentence; `label` indexes the class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: usize,
}

/// One row of a training curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl CurvePoint {
    pub fn new(epoch: usize, split: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        CurvePoint {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub curves: Vec<CurvePoint>,
}

/// A tokenized example ready for the loss.
struct Prepared {
    tokens: Vec<u32>,
    /// `(position, next token)` pairs scored by the generative loss.
    targets: Vec<(usize, u32)>,
    label: usize,
}

fn prepare(model: &ToyLm, ex: &Example, class_names: &[String], mode: TuningMode) -> Result<Prepared> {
    let prompt = build_prompt(&ex.text, model.config.context)?;
    match mode {
        TuningMode::Discriminative => Ok(Prepared {
            tokens: prompt,
            targets: Vec::new(),
            label: ex.label,
        }),
        TuningMode::Generative => {
            let label = label_tokens(&class_names[ex.label]);
            let p = prompt.len();
            let mut tokens = prompt;
            tokens.extend(&label);
            if tokens.len() > model.config.context {
                return Err(Error::ContextOverflow {
                    len: tokens.len(),
                    context: model.config.context,
                });
            }
            // The token at position i is predicted from position i - 1, so
            // only label tokens and the closing EOS are targets.
            let targets = (p..tokens.len()).map(|i| (i - 1, tokens[i])).collect();
            Ok(Prepared {
                tokens,
                targets,
                label: ex.label,
            })
        }
    }
}

/// Loss of one prepared example; accumulates gradients when `grads` is given.
fn example_loss(model: &ToyLm, ex: &Prepared, mode: TuningMode, grads: Option<&mut Gradients>) -> Result<f64> {
    let trace = model.forward(&ex.tokens)?;
    match grads {
        Some(g) => {
            let (loss, dz) = match mode {
                TuningMode::Generative => model.lm_loss(&trace, &ex.targets, Some(&mut *g)),
                TuningMode::Discriminative => model.classifier_loss(&trace, ex.label, Some(&mut *g))?,
            };
            model.backward(&trace, &dz, g);
            Ok(loss)
        }
        None => Ok(match mode {
            TuningMode::Generative => model.lm_loss(&trace, &ex.targets, None).0,
            TuningMode::Discriminative => model.classifier_loss(&trace, ex.label, None)?.0,
        }),
    }
}

/// Loss and gradients of a single example; exposed for gradient checks.
pub fn loss_and_grads(
    model: &ToyLm,
    ex: &Example,
    class_names: &[String],
    mode: TuningMode,
) -> Result<(f64, Gradients)> {
    let prepared = prepare(model, ex, class_names, mode)?;
    let mut grads = model.zero_grads();
    let loss = example_loss(model, &prepared, mode, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Loss of a single example without gradients.
pub fn loss_only(model: &ToyLm, ex: &Example, class_names: &[String], mode: TuningMode) -> Result<f64> {
    let prepared = prepare(model, ex, class_names, mode)?;
    example_loss(model, &prepared, mode, None)
}

/// Loss for an explicit token sequence and target list; exposed so tests can
/// check masking directly.
pub fn sequence_loss(model: &ToyLm, tokens: &[u32], targets: &[(usize, u32)]) -> Result<(f64, Gradients)> {
    let prepared = Prepared {
        tokens: tokens.to_vec(),
        targets: targets.to_vec(),
        label: 0,
    };
    let mut grads = model.zero_grads();
    let loss = example_loss(model, &prepared, TuningMode::Generative, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Top-1 accuracy (discriminative) or strict-match accuracy of greedy decoding.
pub fn validation_accuracy(model: &ToyLm, val: &[Example], class_names: &[String], mode: TuningMode) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let max_len = class_names.iter().map(|c| c.len()).max().unwrap_or(0) + 2;
    let mut hits = 0usize;
    for ex in val {
        let ok = match mode {
            TuningMode::Generative => {
                strict_match(&classify_generative(model, &ex.text, max_len)?, &class_names[ex.label])
            }
            TuningMode::Discriminative => predict_class(model, &ex.text)? == ex.label,
        };
        hits += ok as usize;
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Argmax of the classifier head on the templated sentence.
pub fn predict_class(model: &ToyLm, text: &str) -> Result<usize> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classifier head".into()))?;
    let prompt = build_prompt(text, model.config.context)?;
    let trace = model.forward(&prompt)?;
    let logits = head.logits(trace.z.row(trace.len() - 1).as_slice().unwrap());
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Attaches what `cfg` needs (adapters, classifier head) to a base model.
pub fn prepare_model(model: &mut ToyLm, num_classes: usize, cfg: &TrainConfig) -> Result<()> {
    if cfg.adapter == AdapterKind::Lora && model.lora.is_none() {
        model.attach_lora(cfg.lora, cfg.seed)?;
    }
    if cfg.mode == TuningMode::Discriminative && model.head.is_none() {
        model.attach_classifier(num_classes, cfg.seed);
    }
    Ok(())
}

/// Trains with the default validator (accuracy on `val`).
pub fn train(
    model: &mut ToyLm,
    train_set: &[Example],
    val: &[Example],
    class_names: &[String],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &ToyLm) -> Result<Vec<CurvePoint>>,
) -> Result<TrainOutcome> {
    let mode = cfg.mode;
    train_with_validator(
        model,
        train_set,
        class_names,
        cfg,
        &mut |_, m| validation_accuracy(m, val, class_names, mode),
        on_epoch,
    )
}

/// The training loop proper. `validate` supplies the per-epoch value that
/// drives early stopping and snapshot selection; `on_epoch` may record extra
/// curve points (e.g. OOD metrics). The model is left at the best snapshot:
/// the latest epoch achieving the maximum validation value.
pub fn train_with_validator(
    model: &mut ToyLm,
    train_set: &[Example],
    class_names: &[String],
    cfg: &TrainConfig,
    validate: &mut dyn FnMut(usize, &ToyLm) -> Result<f64>,
    on_epoch: &mut dyn FnMut(usize, &ToyLm) -> Result<Vec<CurvePoint>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let k = class_names.len();
    for class in 0..k {
        if !train_set.iter().any(|e| e.label == class) {
            return Err(Error::EmptyClass {
                class: class_names[class].clone(),
            });
        }
    }
    if let Some(bad) = train_set.iter().find(|e| e.label >= k) {
        return Err(Error::Config(format!(
            "example {} has label {} of {k}",
            bad.id, bad.label
        )));
    }
    prepare_model(model, k, cfg)?;
    let prepared: Vec<Prepared> = train_set
        .iter()
        .map(|e| prepare(model, e, class_names, cfg.mode))
        .collect::<Result<_>>()?;

    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let shapes: Vec<usize> = model.trainable_tensors().iter().map(|t| t.2.len()).collect();
    let mut opt = AdamW::new(cfg.optimizer, &shapes, (cfg.epochs * steps_per_epoch) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_epochs);
    let mut best: Option<(usize, f64, ToyLm)> = None;
    let mut curves = Vec::new();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            for &i in batch {
                epoch_loss += example_loss(model, &prepared[i], cfg.mode, Some(&mut grads))?;
            }
            grads.scale(1.0 / batch.len() as f64);
            let g = grads.tensors();
            opt.step(model.trainable_mut(), g);
        }
        epochs_run = epoch;
        let val = validate(epoch, model)?;
        curves.push(CurvePoint::new(
            epoch,
            "train",
            "loss",
            epoch_loss / prepared.len() as f64,
        ));
        curves.push(CurvePoint::new(epoch, "val", "accuracy", val));
        curves.extend(on_epoch(epoch, model)?);
        if best.as_ref().is_none_or(|(_, b, _)| val >= *b) {
            best = Some((epoch, val, model.clone()));
        }
        if stopper.observe(epoch, val) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch ran");
    *model = snapshot;
    Ok(TrainOutcome {
        epochs_run,
        best_epoch,
        best_val,
        stopped_early,
        curves,
    })
}

/// Plain next-token pretraining of every base parameter on token sequences
/// (every position after the first is a target).
pub fn pretrain_lm(
    model: &mut ToyLm,
    seqs: &[Vec<u32>],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if model.lora.is_some() || model.head.is_some() {
        return Err(Error::Config("pretraining expects a bare base model".into()));
    }
    if epochs == 0 || seqs.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(s) = seqs.iter().find(|s| s.len() > model.config.context) {
        return Err(Error::ContextOverflow {
            len: s.len(),
            context: model.config.context,
        });
    }
    let batch_size = batch_size.max(1);
    let shapes: Vec<usize> = model.trainable_tensors().iter().map(|t| t.2.len()).collect();
    let steps = epochs * seqs.len().div_ceil(batch_size);
    let cfg = AdamWConfig {
        lr,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &shapes, steps as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4554);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let mut grads = model.zero_grads();
            for &i in batch {
                let seq = &seqs[i];
                let targets: Vec<(usize, u32)> = (1..seq.len()).map(|p| (p - 1, seq[p])).collect();
                let prepared = Prepared {
                    tokens: seq.clone(),
                    targets,
                    label: 0,
                };
                total += example_loss(model, &prepared, TuningMode::Generative, Some(&mut grads))?;
            }
            grads.scale(1.0 / batch.len() as f64);
            let g = grads.tensors();
            opt.step(model.trainable_mut(), g);
        }
        losses.push(total / seqs.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_trace() {
        // Rising to epoch 9, then declining every epoch from 10 on.
        let mut s = EarlyStopping::new(6, 15);
        let mut stop_at = None;
        for epoch in 1..=50 {
            let v = if epoch < 10 {
                epoch as f64
            } else {
                9.0 - (epoch - 9) as f64
            };
            if s.observe(epoch, v) {
                stop_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stop_at, Some(16));
    }

    #[test]
    fn flat_values_reset_declines() {
        let mut s = EarlyStopping::new(2, 0);
        assert!(!s.observe(1, 1.0));
        assert!(!s.observe(2, 0.5));
        assert!(!s.observe(3, 0.5));
        assert_eq!(s.declines(), 0);
        assert!(!s.observe(4, 0.4));
        assert!(s.observe(5, 0.3));
    }

    #[test]
    fn increasing_never_stops() {
        let mut s = EarlyStopping::new(6, 15);
        assert!((1..=50).all(|e| !s.observe(e, e as f64)));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("generative".parse::<TuningMode>().unwrap(), TuningMode::Generative);
        assert!("other".parse::<TuningMode>().is_err());
    }
}
