//! Small decoder-only transformer over the hybrid text/temporal vocabulary.
//!
//! Text ids embed through a table; temporal ids embed as
//! `projector(codebook[code])` with the codebook held fixed.

mod layers;
pub mod train;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Attention, Block, LayerNorm, Projector, ProjectorConfig};
pub use train::{finetune, lr_at, pretrain, Phase, StepMetrics, TrainConfig, TrainLog};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{prefixed, softmax_rows, Linear, Module, Param};
use crate::prompt::{detokenize, VocabEntry, VocabSpec, EOS_ID};
use layers::{BlockCache, LnCache, ProjCache};

pub const MAX_NEW_TOKENS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub projector_hidden: Vec<usize>,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            context: 512,
            projector_hidden: vec![128],
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be a positive multiple of n_heads".into()));
        }
        if self.context < 2 || self.d_ff == 0 {
            return Err(Error::Config("context must be at least 2 and d_ff positive".into()));
        }
        if self.projector_hidden.contains(&0) {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub config: LmConfig,
    pub vocab: VocabSpec,
    /// One frozen codebook per entry of `vocab.domains`.
    pub codebooks: Vec<Array2<f64>>,
    pub text_embedding: Param,
    pub positional: Param,
    pub projector: Projector,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

pub(crate) struct LmCache {
    ids: Vec<usize>,
    temporal_rows: Vec<usize>,
    proj: Option<ProjCache>,
    pub(crate) blocks: Vec<BlockCache>,
    ln_f: LnCache,
    h_final: Array2<f64>,
}

impl ToyLm {
    /// `codebooks` pairs each domain of `vocab` with its frozen code vectors.
    pub fn new(config: LmConfig, vocab: VocabSpec, codebooks: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        if codebooks.len() != vocab.domains.len() {
            return Err(Error::invalid("need one codebook per vocabulary domain"));
        }
        let d_code = codebooks.first().map_or(1, |c| c.ncols());
        for (cb, block) in codebooks.iter().zip(&vocab.domains) {
            if cb.nrows() != block.size || cb.ncols() != d_code {
                return Err(Error::shape(format!(
                    "codebook for {} is {:?}, expected {} x {d_code}",
                    block.domain,
                    cb.dim(),
                    block.size
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = config.init_std;
        let projector = Projector::new(
            &ProjectorConfig {
                input: d_code,
                hidden: config.projector_hidden.clone(),
                output: d,
            },
            &mut rng,
        );
        let text_embedding = Param::normal(vocab.text_size(), d, std, &mut rng);
        let positional = Param::normal(config.context, d, std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(d, config.n_heads, config.d_ff, std, &mut rng))
            .collect();
        let head = Linear::with_std(d, vocab.size(), std, &mut rng);
        Ok(ToyLm {
            ln_f: LayerNorm::new(d),
            config,
            vocab,
            codebooks,
            text_embedding,
            positional,
            projector,
            blocks,
            head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Embeddings of temporal ids: the projector applied to codebook rows.
    pub fn project_temporal(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let rows = self.codebook_rows(ids)?;
        Ok(self.projector.forward(&rows).0)
    }

    fn codebook_rows(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let d_code = self.projector.input_dim();
        let mut rows = Array2::zeros((ids.len(), d_code));
        for (r, &id) in ids.iter().enumerate() {
            let (bi, code) = self
                .vocab
                .domains
                .iter()
                .enumerate()
                .find(|(_, b)| (b.offset..b.offset + b.size).contains(&id))
                .map(|(i, b)| (i, id - b.offset))
                .ok_or_else(|| Error::invalid(format!("id {id} is not a temporal token")))?;
            rows.row_mut(r).assign(&self.codebooks[bi].row(code));
        }
        Ok(rows)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty id sequence"));
        }
        if ids.len() > self.config.context {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the context of {}",
                ids.len(),
                self.config.context
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(Error::invalid(format!("id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Logits for every position, `len(ids) x vocab`.
    pub fn forward(&self, ids: &[usize]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(ids)?.0)
    }

    pub(crate) fn forward_cached(&self, ids: &[usize]) -> Result<(Array2<f64>, LmCache)> {
        self.check_ids(ids)?;
        let t = ids.len();
        let text = self.vocab.text_size();
        let mut x = self.positional.value.slice(ndarray::s![..t, ..]).to_owned();
        let temporal_rows: Vec<usize> = (0..t).filter(|&i| ids[i] >= text).collect();
        for (i, &id) in ids.iter().enumerate() {
            if id < text {
                let mut row = x.row_mut(i);
                row += &self.text_embedding.value.row(id);
            }
        }
        let proj = if temporal_rows.is_empty() {
            None
        } else {
            let tids: Vec<usize> = temporal_rows.iter().map(|&i| ids[i]).collect();
            let (emb, cache) = self.projector.forward(&self.codebook_rows(&tids)?);
            for (r, &i) in temporal_rows.iter().enumerate() {
                let mut row = x.row_mut(i);
                row += &emb.row(r);
            }
            Some(cache)
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x);
            x = y;
            caches.push(c);
        }
        let (h_final, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(h_final.view());
        Ok((
            logits,
            LmCache {
                ids: ids.to_vec(),
                temporal_rows,
                proj,
                blocks: caches,
                ln_f,
                h_final,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits`.
    pub(crate) fn backward(&mut self, c: &LmCache, dlogits: &Array2<f64>) {
        let dh = self.head.backward(c.h_final.view(), dlogits.view());
        let mut dx = self.ln_f.backward(&c.ln_f, &dh);
        for (b, bc) in self.blocks.iter_mut().zip(&c.blocks).rev() {
            dx = b.backward(bc, &dx);
        }
        let t = c.ids.len();
        {
            let mut pg = self.positional.grad.slice_mut(ndarray::s![..t, ..]);
            pg += &dx;
        }
        let text = self.vocab.text_size();
        for (i, &id) in c.ids.iter().enumerate() {
            if id < text {
                let mut row = self.text_embedding.grad.row_mut(id);
                row += &dx.row(i);
            }
        }
        if let Some(pc) = &c.proj {
            let demb = dx.select(Axis(0), &c.temporal_rows);
            self.projector.backward(pc, &demb);
        }
    }

    /// Forward and backward on one sequence. Targets are `ids[1..]`;
    /// `mask[i]` says whether predicting `ids[i]` counts. Gradients are
    /// scaled by `1 / denom`. Returns the summed cross-entropy and the
    /// number of counted targets.
    pub fn accumulate_gradients(&mut self, ids: &[usize], mask: &[bool], denom: f64) -> Result<(f64, usize)> {
        if ids.len() != mask.len() || ids.len() < 2 {
            return Err(Error::shape("ids and mask must align and hold at least two tokens"));
        }
        let (logits, cache) = self.forward_cached(&ids[..ids.len() - 1])?;
        let (sum, count, dlogits) = cross_entropy_grad(&logits, &ids[1..], &mask[1..], denom)?;
        self.backward(&cache, &dlogits);
        Ok((sum, count))
    }

    /// Mean masked next-token loss of one sequence.
    pub fn sequence_loss(&self, ids: &[usize], mask: &[bool]) -> Result<f64> {
        if ids.len() != mask.len() || ids.len() < 2 {
            return Err(Error::shape("ids and mask must align and hold at least two tokens"));
        }
        let logits = self.forward(&ids[..ids.len() - 1])?;
        lm_loss(&logits, &ids[1..], &mask[1..])
    }

    /// Greedy continuation of `prompt`, stopping at `<eos>`, after
    /// [`MAX_NEW_TOKENS`], or when the context is full. Returns the new ids.
    pub fn generate_ids(&self, prompt: &[usize]) -> Result<Vec<usize>> {
        self.check_ids(prompt)?;
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < MAX_NEW_TOKENS && ids.len() < self.config.context {
            let logits = self.forward(&ids)?;
            let last = logits.row(logits.nrows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            if best == EOS_ID {
                break;
            }
            ids.push(best);
            out.push(best);
        }
        Ok(out)
    }

    pub fn generate(&self, prompt: &[usize]) -> Result<String> {
        Ok(detokenize(&self.generate_ids(prompt)?, &self.vocab))
    }

    /// Attention probabilities of every block and head for `ids`.
    pub fn attention_maps(&self, ids: &[usize]) -> Result<Vec<Vec<Array2<f64>>>> {
        let (_, cache) = self.forward_cached(ids)?;
        Ok(cache.blocks.iter().map(|b| b.attn.probs.clone()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "lm",
            serde_json::json!({
                "lm_config": self.config,
                "vocab": self.vocab,
            }),
        );
        ck.push_params(self.params());
        for (cb, b) in self.codebooks.iter().zip(&self.vocab.domains) {
            ck.push(format!("codebook.{}", b.domain), cb);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("lm")?;
        let config: LmConfig = serde_json::from_value(ck.config["lm_config"].clone())?;
        let stored: VocabSpec = serde_json::from_value(ck.config["vocab"].clone())?;
        let vocab = VocabSpec::from_parts(stored.words, stored.domains);
        let codebooks = vocab
            .domains
            .iter()
            .map(|b| ck.matrix(&format!("codebook.{}", b.domain)))
            .collect::<Result<Vec<_>>>()?;
        let mut model = ToyLm::new(config, vocab, codebooks)?;
        ck.load_params(model.params_mut())?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for ToyLm {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("text_embedding".to_string(), &self.text_embedding),
            ("positional".to_string(), &self.positional),
        ];
        out.extend(prefixed("projector", self.projector.params()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.params()));
        }
        out.extend(prefixed("ln_f", self.ln_f.params()));
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = vec![
            ("text_embedding".to_string(), &mut self.text_embedding),
            ("positional".to_string(), &mut self.positional),
        ];
        out.extend(prefixed("projector", self.projector.params_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.params_mut()));
        }
        out.extend(prefixed("ln_f", self.ln_f.params_mut()));
        out.extend(prefixed("head", self.head.params_mut()));
        out
    }
}

fn check_loss_args(logits: &Array2<f64>, targets: &[usize], mask: &[bool]) -> Result<()> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("every position is masked out"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::invalid(format!("target {t} outside the vocabulary")));
    }
    Ok(())
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `targets` under `logits` over positions where
/// `mask` is true.
pub fn lm_loss(logits: &Array2<f64>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    check_loss_args(logits, targets, mask)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            let row = logits.row(i);
            sum += log_sum_exp(row) - row[t];
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Summed masked cross-entropy, the number of counted positions, and
/// `d(sum)/d(logits) / denom`. Masked-out rows of the gradient are zero.
pub fn cross_entropy_grad(
    logits: &Array2<f64>,
    targets: &[usize],
    mask: &[bool],
    denom: f64,
) -> Result<(f64, usize, Array2<f64>)> {
    check_loss_args(logits, targets, mask)?;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(i);
        sum += log_sum_exp(row) - row[t];
        n += 1;
        let p = softmax_rows(&row.to_owned().insert_axis(Axis(0)));
        let mut g = grad.row_mut(i);
        g.assign(&(p.row(0).to_owned() / denom));
        g[t] -= 1.0 / denom;
    }
    Ok((sum, n, grad))
}

/// Lexicon labels mentioned in `text`, matched case-insensitively as
/// substrings. Where matches overlap the longest one wins. Returned in
/// lexicon order.
pub fn extract_labels(text: &str, lexicon: &[String]) -> Vec<String> {
    let hay = text.to_lowercase();
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    for (li, label) in lexicon.iter().enumerate() {
        let needle = label.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = hay[from..].find(&needle) {
            let start = from + pos;
            spans.push((start, start + needle.len(), li));
            from = start + needle.chars().next().map_or(1, char::len_utf8);
        }
    }
    spans.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut hit = vec![false; lexicon.len()];
    for (s, e, li) in spans {
        if taken.iter().all(|&(ts, te)| e <= ts || s >= te) {
            taken.push((s, e));
            hit[li] = true;
        }
    }
    lexicon
        .iter()
        .zip(hit)
        .filter(|(_, h)| *h)
        .map(|(l, _)| l.clone())
        .collect()
}

/// Which vocabulary entry each id maps to; used by reports.
pub fn describe_id(vocab: &VocabSpec, id: usize) -> String {
    match vocab.entry(id) {
        Some(VocabEntry::Special(s)) | Some(VocabEntry::Word(s)) => s.to_string(),
        Some(VocabEntry::Temporal { domain, code }) => format!("{domain}:{code}"),
        None => format!("#{id}"),
    }
}
