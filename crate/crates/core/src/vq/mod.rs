//! Vector-quantized patch tokenizer.
//!
//! A series is cut into patches, each patch is embedded by a shared linear
//! (kernel = stride = patch length) convolution, run through a causal TCN
//! encoder and snapped to its nearest codebook entry. A second TCN decodes
//! the quantized sequence back to patches. Encoder and decoder are trained
//! on reconstruction plus commitment with the straight-through estimator;
//! the codebook follows exponential moving averages of encoder outputs.

mod codebook;
pub mod tcn;

pub use codebook::{quantize, straight_through, straight_through_backward, Codebook};
pub use tcn::{Segments, Tcn, TcnConfig};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{segment_patches, unpatch, Dataset, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::nn::{prefixed, AdamW, Linear, Module, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub patch_len: usize,
    pub beta: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub tcn: TcnConfig,
    /// Steps a code may spend with `ema_count < epsilon` before it is reseeded.
    pub dead_code_patience: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 64,
            code_dim: 64,
            patch_len: 16,
            beta: 0.25,
            decay: 0.99,
            epsilon: 1e-5,
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            tcn: TcnConfig::default(),
            dead_code_patience: 100,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::invalid("codebook_size must be at least 2"));
        }
        if self.code_dim == 0 || self.patch_len == 0 || self.batch_size == 0 {
            return Err(Error::invalid("code_dim, patch_len and batch_size must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("decay must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::invalid("epsilon and learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Codes for one series. `series_len` is the original length when known,
/// so decoding can drop patch padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub domain: String,
    pub codes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub codebook_term: f64,
    pub commit: f64,
    pub total: f64,
}

/// Objective terms. Reconstruction is the mean squared error over the
/// elements where `mask` is 1 (all elements when `mask` is `None`); the
/// codebook and commitment terms are mean squared distances between encoder
/// outputs and their codes, the latter scaled by `beta`.
pub fn vq_loss_masked(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    z_e: ArrayView2<f64>,
    z_q: ArrayView2<f64>,
    beta: f64,
) -> Result<LossBreakdown> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    if x.dim() != x_hat.dim() || z_e.dim() != z_q.dim() {
        return Err(Error::shape("loss inputs disagree in shape"));
    }
    let (sq, n) = match mask {
        Some(m) => {
            if m.dim() != x.dim() {
                return Err(Error::shape("mask shape differs from targets"));
            }
            let mut sq = 0.0;
            for ((a, b), w) in x.iter().zip(x_hat.iter()).zip(m.iter()) {
                sq += w * (a - b) * (a - b);
            }
            (sq, m.sum())
        }
        None => (
            x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
            x.len() as f64,
        ),
    };
    let recon = if n > 0.0 { sq / n } else { 0.0 };
    let dist = z_e.iter().zip(z_q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z_e.len().max(1) as f64;
    let codebook_term = dist;
    let commit = beta * dist;
    Ok(LossBreakdown {
        recon,
        codebook_term,
        commit,
        total: recon + codebook_term + commit,
    })
}

pub fn vq_loss(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    z_e: ArrayView2<f64>,
    z_q: ArrayView2<f64>,
    beta: f64,
) -> Result<LossBreakdown> {
    vq_loss_masked(x, x_hat, None, z_e, z_q, beta)
}

/// Patches of several instances packed row-wise.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub patches: Array2<f64>,
    pub mask: Array2<f64>,
    pub segs: Segments,
}

impl PatchBatch {
    pub fn from_instances(insts: &[&TimeSeriesInstance], patch_len: usize) -> Result<Self> {
        Self::from_series(insts.iter().map(|i| i.values.view()), patch_len)
    }

    pub fn from_series<'a>(series: impl IntoIterator<Item = ArrayView2<'a, f64>>, patch_len: usize) -> Result<Self> {
        let mut patches = Vec::new();
        let mut masks = Vec::new();
        let mut lens = Vec::new();
        for x in series {
            let g = segment_patches(x, patch_len)?;
            masks.push(g.valid_mask());
            lens.push(g.num_patches());
            patches.push(g.patches);
        }
        if patches.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let pv: Vec<_> = patches.iter().map(|p| p.view()).collect();
        let mv: Vec<_> = masks.iter().map(|p| p.view()).collect();
        Ok(PatchBatch {
            patches: concatenate(Axis(0), &pv).map_err(|e| Error::shape(e.to_string()))?,
            mask: concatenate(Axis(0), &mv).map_err(|e| Error::shape(e.to_string()))?,
            segs: Segments::new(lens),
        })
    }
}

/// Result of [`TokenizerModel::compute_gradients`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub codes: Vec<usize>,
    pub z_e: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    pub config: TokenizerConfig,
    pub domain: String,
    pub channels: usize,
    pub patch_embed: Linear,
    pub encoder: Tcn,
    pub decoder: Tcn,
    pub codebook: Codebook,
}

impl TokenizerModel {
    /// Randomly initialized model; the codebook starts as standard normal draws.
    pub fn new(domain: &str, channels: usize, config: &TokenizerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let patch_dim = config.patch_len * channels;
        let patch_embed = Linear::new(patch_dim, config.code_dim, rng);
        let encoder = Tcn::new(config.code_dim, config.code_dim, &config.tcn, rng)?;
        let decoder = Tcn::new(config.code_dim, patch_dim, &config.tcn, rng)?;
        let vectors =
            Array2::from_shape_simple_fn((config.codebook_size, config.code_dim), || StandardNormal.sample(rng));
        let codebook = Codebook::new(vectors, config.decay, config.epsilon)?;
        Ok(TokenizerModel {
            config: config.clone(),
            domain: domain.to_string(),
            channels,
            patch_embed,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn patch_dim(&self) -> usize {
        self.config.patch_len * self.channels
    }

    /// Continuous encoder outputs `z_e` for packed patches.
    pub fn encode_continuous(&self, batch: &PatchBatch) -> Array2<f64> {
        let emb = self.patch_embed.forward(batch.patches.view());
        self.encoder.forward(&emb, &batch.segs).0
    }

    pub fn lookup(&self, codes: &[usize]) -> Array2<f64> {
        let d = self.codebook.dim();
        let mut out = Array2::zeros((codes.len(), d));
        for (i, &k) in codes.iter().enumerate() {
            out.row_mut(i).assign(&self.codebook.vectors.row(k));
        }
        out
    }

    pub fn decode_quantized(&self, z_q: &Array2<f64>, segs: &Segments) -> Array2<f64> {
        self.decoder.forward(z_q, segs).0
    }

    /// Forward and backward pass on one batch. Gradients of the
    /// straight-through objective are left in the encoder, decoder and patch
    /// embedding parameters; the codebook is not touched.
    pub fn compute_gradients(&mut self, batch: &PatchBatch) -> Result<StepOutput> {
        self.zero_grad();
        let emb = self.patch_embed.forward(batch.patches.view());
        let (z_e, enc_cache) = self.encoder.forward(&emb, &batch.segs);
        if z_e.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("encoder produced non-finite outputs"));
        }
        let codes = self.codebook.assign(z_e.view());
        let z_q = self.lookup(&codes);
        let (x_hat, dec_cache) = self.decoder.forward(&z_q, &batch.segs);
        let loss = vq_loss_masked(
            batch.patches.view(),
            x_hat.view(),
            Some(batch.mask.view()),
            z_e.view(),
            z_q.view(),
            self.config.beta,
        )?;

        let n_valid = batch.mask.sum().max(1.0);
        let mut d_xhat = &x_hat - &batch.patches;
        d_xhat *= &batch.mask;
        d_xhat *= 2.0 / n_valid;
        // Straight-through: the decoder-input gradient lands on z_e unchanged.
        let mut d_ze = self.decoder.backward(&dec_cache, &d_xhat);
        let commit_scale = 2.0 * self.config.beta / z_e.len() as f64;
        d_ze.scaled_add(commit_scale, &(&z_e - &z_q));
        let d_emb = self.encoder.backward(&enc_cache, &d_ze);
        self.patch_embed.backward(batch.patches.view(), d_emb.view());
        Ok(StepOutput { loss, codes, z_e })
    }

    pub fn encode_series(&self, x: ArrayView2<f64>) -> Result<TokenSequence> {
        if x.nrows() != self.channels {
            return Err(Error::shape(format!(
                "series has {} channels, tokenizer expects {}",
                x.nrows(),
                self.channels
            )));
        }
        let batch = PatchBatch::from_series([x], self.config.patch_len)?;
        let z_e = self.encode_continuous(&batch);
        if z_e.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("encoder produced non-finite outputs"));
        }
        Ok(TokenSequence {
            domain: self.domain.clone(),
            codes: self.codebook.assign(z_e.view()),
            series_len: Some(x.ncols()),
        })
    }

    pub fn decode_tokens(&self, t: &TokenSequence) -> Result<Array2<f64>> {
        let k = self.codebook.size();
        if let Some(&bad) = t.codes.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(format!("code {bad} out of range for K={k}")));
        }
        if t.codes.is_empty() {
            return Err(Error::invalid("cannot decode an empty token sequence"));
        }
        let z_q = self.lookup(&t.codes);
        let patches = self.decode_quantized(&z_q, &Segments::single(t.codes.len()));
        let len = t.series_len.unwrap_or(t.codes.len() * self.config.patch_len);
        Ok(unpatch(patches.view(), self.channels, self.config.patch_len, len))
    }

    /// Code usage counts over every instance of `data`.
    pub fn token_usage_histogram(&self, data: &Dataset) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; self.codebook.size()];
        for inst in &data.instances {
            for c in self.encode_series(inst.values.view())?.codes {
                counts[c] += 1;
            }
        }
        Ok(counts)
    }

    /// Mean squared error of `decode(encode(x))` over all samples of `data`.
    pub fn reconstruction_mse(&self, data: &Dataset) -> Result<f64> {
        let mut sq = 0.0;
        let mut n = 0usize;
        for inst in &data.instances {
            let rec = self.decode_tokens(&self.encode_series(inst.values.view())?)?;
            sq += (&rec - &inst.values).mapv(|v| v * v).sum();
            n += inst.values.len();
        }
        if n == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        Ok(sq / n as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "tokenizer",
            serde_json::json!({
                "domain": self.domain,
                "channels": self.channels,
                "codebook_size": self.config.codebook_size,
                "code_dim": self.config.code_dim,
                "patch_len": self.config.patch_len,
                "beta": self.config.beta,
                "decay": self.config.decay,
                "seed": self.config.seed,
                "tokenizer_config": self.config,
            }),
        );
        ck.push_params(self.params());
        ck.push("codebook.vectors", &self.codebook.vectors);
        ck.push(
            "codebook.ema_counts",
            &self.codebook.ema_counts.clone().insert_axis(Axis(0)),
        );
        ck.push("codebook.ema_sums", &self.codebook.ema_sums);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("tokenizer")?;
        let field = |k: &str| {
            ck.config
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("config is missing {k}")))
        };
        let config: TokenizerConfig = serde_json::from_value(field("tokenizer_config")?)?;
        let domain: String = serde_json::from_value(field("domain")?)?;
        let channels: usize = serde_json::from_value(field("channels")?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TokenizerModel::new(&domain, channels, &config, &mut rng)?;
        ck.load_params(model.params_mut())?;
        let vectors = ck.matrix("codebook.vectors")?;
        if vectors.dim() != model.codebook.vectors.dim() {
            return Err(Error::Checkpoint("codebook shape mismatch".into()));
        }
        model.codebook.vectors = vectors;
        model.codebook.ema_counts = ck.matrix("codebook.ema_counts")?.row(0).to_owned();
        model.codebook.ema_sums = ck.matrix("codebook.ema_sums")?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for TokenizerModel {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("patch_embed", self.patch_embed.params());
        v.extend(prefixed("encoder", self.encoder.params()));
        v.extend(prefixed("decoder", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed("patch_embed", self.patch_embed.params_mut());
        v.extend(prefixed("encoder", self.encoder.params_mut()));
        v.extend(prefixed("decoder", self.decoder.params_mut()));
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLog {
    pub steps: Vec<LossBreakdown>,
    pub warnings: Vec<String>,
    pub codes_reseeded: usize,
}

/// Trains one domain's tokenizer. Deterministic for a fixed config seed.
pub fn train_tokenizer(data: &Dataset, config: &TokenizerConfig) -> Result<(TokenizerModel, TokenizerLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train a tokenizer on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TokenizerModel::new(&data.domain, data.channels, config, &mut rng)?;
    let mut log = TokenizerLog::default();
    let mut sampler = EpochSampler::new(data.len(), config.batch_size);

    let first = sampler.next_batch(&mut rng);
    let first_batch = batch_of(data, &first, config.patch_len)?;
    init_codebook(&mut model, &first_batch, &mut rng, &mut log)?;

    let mut opt = AdamW::new(0.0);
    let mut dead_for = vec![0usize; config.codebook_size];
    let mut pending = Some(first_batch);
    for step in 0..config.steps {
        let batch = match pending.take() {
            Some(b) => b,
            None => batch_of(data, &sampler.next_batch(&mut rng), config.patch_len)?,
        };
        let out = model.compute_gradients(&batch)?;
        if !out.loss.total.is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {step}")));
        }
        opt.step(&mut model.params_mut(), config.learning_rate);
        model
            .codebook
            .ema_update(out.codes.iter().zip(out.z_e.outer_iter()).map(|(&k, z)| (k, z)))?;

        for (k, dead) in dead_for.iter_mut().enumerate() {
            if model.codebook.ema_counts[k] < config.epsilon {
                *dead += 1;
                if *dead >= config.dead_code_patience {
                    let row = rng.random_range(0..out.z_e.nrows());
                    model.codebook.reset_code(k, out.z_e.row(row));
                    log.codes_reseeded += 1;
                    *dead = 0;
                }
            } else {
                *dead = 0;
            }
        }
        log.steps.push(out.loss);
    }
    model.zero_grad();
    Ok((model, log))
}

fn batch_of(data: &Dataset, idx: &[usize], patch_len: usize) -> Result<PatchBatch> {
    let insts: Vec<&TimeSeriesInstance> = idx.iter().map(|&i| &data.instances[i]).collect();
    PatchBatch::from_instances(&insts, patch_len)
}

fn init_codebook(
    model: &mut TokenizerModel,
    batch: &PatchBatch,
    rng: &mut ChaCha8Rng,
    log: &mut TokenizerLog,
) -> Result<()> {
    let k = model.config.codebook_size;
    let z_e = model.encode_continuous(batch);
    if z_e.nrows() >= k {
        let picks = rand::seq::index::sample(rng, z_e.nrows(), k);
        let mut vectors = Array2::zeros((k, z_e.ncols()));
        for (row, src) in picks.iter().enumerate() {
            vectors.row_mut(row).assign(&z_e.row(src));
        }
        model.codebook = Codebook::new(vectors, model.config.decay, model.config.epsilon)?;
    } else {
        log.warnings.push(format!(
            "first batch has {} patches, fewer than K={k}; codebook initialized from a standard normal",
            z_e.nrows()
        ));
    }
    Ok(())
}

/// Shuffled passes over instance indices, one fresh permutation per epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl EpochSampler {
    fn new(n: usize, batch: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

pub fn encode_series(model: &TokenizerModel, x: ArrayView2<f64>) -> Result<TokenSequence> {
    model.encode_series(x)
}

pub fn decode_tokens(model: &TokenizerModel, t: &TokenSequence) -> Result<Array2<f64>> {
    model.decode_tokens(t)
}

pub fn token_usage_histogram(model: &TokenizerModel, data: &Dataset) -> Result<Vec<u64>> {
    model.token_usage_histogram(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_examples() {
        let l = vq_loss(
            array![[1.0]].view(),
            array![[0.0]].view(),
            array![[0.5]].view(),
            array![[0.0]].view(),
            0.25,
        )
        .unwrap();
        assert_eq!(l.recon, 1.0);
        assert_eq!(l.codebook_term, 0.25);
        assert_eq!(l.commit, 0.0625);
        assert_eq!(l.total, 1.3125);

        let z = array![[0.3, -0.2]];
        let zero = vq_loss(z.view(), z.view(), z.view(), z.view(), 0.25).unwrap();
        assert_eq!(zero.total, 0.0);

        let x = array![[1.0, 2.0]];
        let xh = array![[0.5, 2.5]];
        let ze = array![[0.1, 0.4]];
        let zq = array![[0.3, -0.1]];
        let a = vq_loss(x.view(), xh.view(), ze.view(), zq.view(), 0.25).unwrap();
        let b = vq_loss(x.view(), xh.view(), ze.view(), zq.view(), 0.5).unwrap();
        assert_eq!(b.commit, 2.0 * a.commit);
        assert_eq!((a.recon, a.codebook_term), (b.recon, b.codebook_term));
        assert_eq!(a.total, a.recon + a.codebook_term + a.commit);

        assert!(vq_loss(x.view(), xh.view(), ze.view(), zq.view(), 0.0).is_err());
    }

    fn tiny_config() -> TokenizerConfig {
        TokenizerConfig {
            codebook_size: 8,
            code_dim: 4,
            patch_len: 4,
            steps: 20,
            batch_size: 4,
            tcn: TcnConfig {
                hidden: 6,
                kernel: 3,
                dilations: vec![1, 2],
            },
            ..Default::default()
        }
    }

    fn tiny_data() -> Dataset {
        let mut spec = crate::dataset::sinusoid_corpus(1).unwrap().remove(0);
        spec.instances.truncate(12);
        spec.normalized()
    }

    #[test]
    fn encode_decode_bookkeeping() {
        let data = tiny_data();
        let (model, _) = train_tokenizer(&data, &tiny_config()).unwrap();
        let x = data.instances[0].values.slice(ndarray::s![.., ..30]).to_owned();
        let t = model.encode_series(x.view()).unwrap();
        assert_eq!(t.codes.len(), 8);
        assert_eq!(model.decode_tokens(&t).unwrap().dim(), (1, 30));
        assert_eq!(model.encode_series(x.view()).unwrap(), t);

        let bad = TokenSequence {
            domain: t.domain.clone(),
            codes: vec![999],
            series_len: None,
        };
        assert!(model.decode_tokens(&bad).is_err());
        assert!(model.encode_series(Array2::zeros((2, 16)).view()).is_err());
    }

    #[test]
    fn small_first_batch_falls_back_with_warning() {
        let data = tiny_data();
        let cfg = TokenizerConfig {
            codebook_size: 200,
            steps: 2,
            ..tiny_config()
        };
        let (_, log) = train_tokenizer(&data, &cfg).unwrap();
        assert_eq!(log.warnings.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = tiny_data();
        let (model, _) = train_tokenizer(&data, &tiny_config()).unwrap();
        let back = TokenizerModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn histogram_conserves_counts() {
        let data = tiny_data();
        let (model, _) = train_tokenizer(&data, &tiny_config()).unwrap();
        let few = data.with_instances(data.instances[..3].to_vec());
        let h = model.token_usage_histogram(&few).unwrap();
        assert_eq!(h.iter().sum::<u64>(), 3 * 32);
    }

    #[test]
    fn constant_encoder_uses_one_bin() {
        let data = tiny_data();
        let (mut model, _) = train_tokenizer(&data, &tiny_config()).unwrap();
        for (_, p) in model.params_mut() {
            p.value.fill(0.0);
        }
        let h = model.token_usage_histogram(&data).unwrap();
        assert_eq!(h.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = tiny_data().with_instances(vec![]);
        assert!(train_tokenizer(&data, &tiny_config()).is_err());
    }
}
