//! Greedy decoding and extraction of embeddings and class-token logits.

use super::model::{KvCache, ToyLm};
use super::tokenizer::{build_prompt, decode_bytes, EOS};
use crate::detectors::{logsumexp, ClassTokenMap};
use crate::dump::{EmbeddingDump, EmbeddingRecord};
use crate::error::{Error, Result};

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until EOS or `max_len` new tokens. Returns the generated
/// ids (without EOS) and their text.
pub fn greedy_decode(model: &ToyLm, prompt: &[u32], max_len: usize) -> Result<(Vec<u32>, String)> {
    let trace = model.forward(prompt)?;
    let mut cache = KvCache::from_trace(&trace);
    let mut z = trace.z.row(trace.len() - 1).to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = argmax_lowest(&model.lm_logits(&z)) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == max_len || cache.len() >= model.config.context {
            break;
        }
        z = model.forward_step(&mut cache, next)?;
    }
    let text = decode_bytes(&out);
    Ok((out, text))
}

/// Convenience wrapper: template the sentence and decode a label.
pub fn classify_generative(model: &ToyLm, sentence: &str, max_len: usize) -> Result<String> {
    let prompt = build_prompt(sentence, model.config.context)?;
    Ok(greedy_decode(model, &prompt, max_len)?.1)
}

/// One sentence to extract.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractInput<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub label: Option<u32>,
}

/// An extracted split plus the full-vocabulary log-partition of each record,
/// which full-vocabulary MSP needs but the dump format does not carry.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub dump: EmbeddingDump,
    pub log_partition: Vec<f64>,
}

/// Runs each templated prompt and records `z` at the final prompt position
/// and the class-token logits selected through `class_map` (or the
/// classifier head's logits when one is attached).
pub fn extract_dump(model: &ToyLm, inputs: &[ExtractInput<'_>], class_map: &ClassTokenMap) -> Result<Extraction> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("sentences to extract"));
    }
    let class_names = class_map.names();
    if let Some(head) = &model.head {
        if head.num_classes() != class_names.len() {
            return Err(Error::Inconsistent(format!(
                "classifier head has {} classes, map has {}",
                head.num_classes(),
                class_names.len()
            )));
        }
    }
    let ids = class_map.token_ids();
    let mut records = Vec::with_capacity(inputs.len());
    let mut log_partition = Vec::with_capacity(inputs.len());
    for input in inputs {
        let prompt = build_prompt(input.text, model.config.context)?;
        let trace = model.forward(&prompt)?;
        let z = trace.z.row(trace.len() - 1).to_vec();
        let (selected, lp) = match &model.head {
            Some(head) => {
                let logits = head.logits(&z);
                let lp = logsumexp(&logits);
                (logits, lp)
            }
            None if ids.is_empty() => (Vec::new(), 0.0),
            None => {
                let full = model.lm_logits(&z);
                let lp = logsumexp(&full);
                (ids.iter().map(|&t| full[t as usize]).collect(), lp)
            }
        };
        records.push(EmbeddingRecord {
            id: input.id.to_owned(),
            label: input.label,
            embedding: z.iter().map(|&v| v as f32).collect(),
            class_logits: (!selected.is_empty()).then(|| selected.iter().map(|&v| v as f32).collect()),
        });
        log_partition.push(lp);
    }
    let dump = EmbeddingDump {
        dim: model.config.d_model,
        class_names,
        records,
    };
    dump.validate()?;
    Ok(Extraction { dump, log_partition })
}
