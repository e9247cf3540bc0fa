//! A byte-level toy decoder used as a desk-scale generative classifier.

mod checkpoint;
mod infer;
mod lora;
mod model;
mod optim;
mod quantize;
mod tokenizer;
mod train;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use infer::{classify_generative, extract_dump, greedy_decode, ExtractInput, Extraction};
pub use lora::{LoraConfig, LoraPair, LoraWeights};
pub use model::{BaseWeights, Block, ClassifierHead, Gradients, KvCache, LayerNorm, ModelConfig, ToyLm, Trace};
pub use optim::{AdamW, AdamWConfig};
pub use quantize::{quantize_sim, Precision};
pub use tokenizer::{build_prompt, decode_bytes, label_tokens, BOS, EOS, PROMPT_PREFIX, PROMPT_SUFFIX, VOCAB_SIZE};
pub use train::{
    loss_and_grads, loss_only, predict_class, prepare_model, pretrain_lm, sequence_loss, train, train_with_validator,
    validation_accuracy, AdapterKind, CurvePoint, EarlyStopping, Example, TrainConfig, TrainOutcome, TuningMode,
};
