//! The two training phases: cross-domain pretraining on temporal and answer
//! tokens, then answer-only fine-tuning.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyLm;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Module};
use crate::prompt::{tokenize_prompt, PromptMode, PromptRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            warmup_ratio: 0.05,
            clip_norm: 1.0,
            batch_size: 8,
            steps: 300,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn finetune_default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("clip_norm and learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).floor() as usize
    }
}

/// Learning rate at 0-based `step`: `base * (step + 1) / w` during the
/// `w = floor(ratio * steps)` warm-up steps, then
/// `base * 0.5 * (1 + cos(pi * (step - w) / (steps - w)))`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let w = cfg.warmup_steps();
    if step < w {
        return cfg.learning_rate * (step + 1) as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (cfg.steps - w) as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Mean loss over the first or last `n` steps.
    pub fn mean_loss(&self, n: usize, tail: bool) -> f64 {
        let n = n.clamp(1, self.steps.len().max(1));
        let slice = if tail {
            &self.steps[self.steps.len().saturating_sub(n)..]
        } else {
            &self.steps[..n.min(self.steps.len())]
        };
        slice.iter().map(|s| s.loss).sum::<f64>() / slice.len().max(1) as f64
    }
}

struct Encoded {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

fn encode_all(model: &ToyLm, prompts: &[PromptRecord], mode: PromptMode) -> Result<Vec<Encoded>> {
    prompts
        .iter()
        .map(|p| {
            let p = PromptRecord { mode, ..p.clone() };
            let (ids, mask) = tokenize_prompt(&p, &model.vocab)?;
            if !mask[1..].iter().any(|&m| m) {
                return Err(Error::invalid(format!(
                    "a {} prompt of domain {} has no trainable tokens",
                    mode.as_str(),
                    p.domain
                )));
            }
            Ok(Encoded { ids, mask })
        })
        .collect()
}

/// Shuffled passes over one stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn train_loop(model: &mut ToyLm, streams: &[Vec<Encoded>], cfg: &TrainConfig, phase: Phase) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samplers: Vec<Sampler> = streams.iter().map(|s| Sampler::new(s.len())).collect();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let si = step % streams.len();
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| samplers[si].next(&mut rng)).collect();
        let denom: usize = batch
            .iter()
            .map(|&i| streams[si][i].mask[1..].iter().filter(|&&m| m).count())
            .sum();
        model.zero_grad();
        let mut loss = 0.0;
        for &i in &batch {
            let e = &streams[si][i];
            loss += model.accumulate_gradients(&e.ids, &e.mask, denom as f64)?.0;
        }
        let lr = lr_at(cfg, step);
        let mut params = model.params_mut();
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut params, cfg.clip_norm);
        opt.step(&mut params, lr);
        log.steps.push(StepMetrics {
            step,
            phase,
            loss: loss / denom as f64,
            lr,
            grad_norm,
            clipped_norm,
        });
    }
    model.zero_grad();
    Ok(log)
}

/// Next-token training on temporal and answer tokens, cycling through the
/// corpora one batch per domain in turn. Prompts are re-masked for
/// pretraining regardless of the mode they were built with.
pub fn pretrain(model: &mut ToyLm, corpora: &[Vec<PromptRecord>], cfg: &TrainConfig) -> Result<TrainLog> {
    if corpora.is_empty() || corpora.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("pretraining needs at least one non-empty corpus"));
    }
    let streams = corpora
        .iter()
        .map(|c| encode_all(model, c, PromptMode::Pretrain))
        .collect::<Result<Vec<_>>>()?;
    train_loop(model, &streams, cfg, Phase::Pretrain)
}

/// Supervised training on answer tokens only. Every prompt must carry an
/// answer; this is checked before any update.
pub fn finetune(model: &mut ToyLm, data: &[PromptRecord], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one prompt"));
    }
    if let Some(i) = data.iter().position(|p| p.answer.trim().is_empty()) {
        return Err(Error::invalid(format!("fine-tuning prompt {i} has an empty answer")));
    }
    let stream = encode_all(model, data, PromptMode::Finetune)?;
    train_loop(model, &[stream], cfg, Phase::Finetune)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 5);
        assert!((lr_at(&cfg, 0) - 2e-4).abs() < 1e-15);
        assert!((lr_at(&cfg, 4) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&cfg, 5) - 1e-3).abs() < 1e-15);
        assert!(lr_at(&cfg, 99) < 1e-6);
        let none = TrainConfig {
            warmup_ratio: 0.0,
            ..cfg
        };
        assert_eq!(lr_at(&none, 0), 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            warmup_ratio: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            clip_norm: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
