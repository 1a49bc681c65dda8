//! End-to-end run driven by a [`RunConfig`]: data, tokenizers, implicit
//! features, prompts, both LM phases, evaluation and plots. Every stage
//! writes its artifacts under the configured output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ProviderKind, RunConfig};
use crate::dataset::{load_dataset, synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::features::{blocks_to_text, extract_instance, StatFeatureSet};
use crate::harness::{
    ablation_annotations, ablation_csv, ablation_table, evaluate, few_shot_split, holdout_split, report_text,
    AblationCell, AblationRow, EvalItem, EvalReport,
};
use crate::lm::{finetune, pretrain, ToyLm, TrainLog};
use crate::plots::{overlay_panels, usage_heatmap};
use crate::prompt::{build_prompt, serialize_prompt, PromptMode, PromptOptions, PromptRecord, VocabSpec};
use crate::vision::{
    caption_many, render_series_image, CaptionCache, CaptionProvider, CaptionRequest, MockProvider, RemoteConfig,
    RemoteProvider,
};
use crate::vq::{train_tokenizer, TokenSequence, TokenizerModel};

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn write_jsonl<T: Serialize>(p: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    write_file(p, out)
}

/// Loads or generates every configured domain, in config order. Synthetic
/// domains are seeded by the run seed and their position.
pub fn load_domains(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    cfg.domains
        .iter()
        .enumerate()
        .map(|(i, d)| match (&d.path, &d.synth) {
            (Some(p), _) => load_dataset(p, &d.name),
            (None, Some(spec)) => synth_generate(spec, cfg.seed.wrapping_add(i as u64)),
            (None, None) => Err(Error::Config(format!("domain {} has no source", d.name))),
        })
        .collect()
}

/// Training data per domain plus the held-out split of the target domain.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Dataset>,
    pub eval: Dataset,
    pub target: usize,
}

impl PreparedData {
    pub fn target_train(&self) -> &Dataset {
        &self.train[self.target]
    }
}

/// Everything the LM phases consume.
#[derive(Debug, Clone)]
pub struct PromptSets {
    pub pretrain: Vec<Vec<PromptRecord>>,
    pub finetune: Vec<PromptRecord>,
    pub eval: Vec<EvalItem>,
}

#[derive(Serialize)]
struct TokenRow<'a> {
    id: &'a str,
    codes: &'a [usize],
}

#[derive(Serialize)]
struct FeatureRow<'a> {
    id: &'a str,
    blocks: &'a [StatFeatureSet],
    text: String,
}

#[derive(Serialize)]
struct CaptionRow<'a> {
    id: &'a str,
    caption: &'a str,
}

/// Statistical description of every instance (raw values).
pub fn feature_blocks(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Vec<StatFeatureSet>>> {
    ds.instances
        .iter()
        .map(|inst| extract_instance(inst, &cfg.features.params))
        .collect()
}

pub fn make_provider(kind: ProviderKind) -> Result<Box<dyn CaptionProvider>> {
    Ok(match kind {
        ProviderKind::Mock => Box::new(MockProvider::new()),
        ProviderKind::Remote => Box::new(RemoteProvider::new(RemoteConfig::from_env()?)),
    })
}

/// Captions of every instance, rendered from raw values.
pub fn captions_for(
    ds: &Dataset,
    provider: &dyn CaptionProvider,
    cache: Option<&CaptionCache>,
    render: &crate::vision::RenderSpec,
    focus_prompt: &str,
    concurrency: usize,
) -> Result<Vec<String>> {
    let reqs = ds
        .instances
        .iter()
        .map(|inst| {
            let png = render_series_image(inst.values.view(), render)?;
            CaptionRequest::new(png, focus_prompt, &ds.domain)
        })
        .collect::<Result<Vec<_>>>()?;
    caption_many(provider, &reqs, cache, concurrency)
        .into_iter()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// One prompt per instance.
pub fn prompts_for(
    ds: &Dataset,
    codes: &[TokenSequence],
    implicit: &[String],
    mode: PromptMode,
    opts: &PromptOptions,
) -> Result<Vec<PromptRecord>> {
    if codes.len() != ds.len() || implicit.len() != ds.len() {
        return Err(Error::shape("codes, implicit texts and instances differ in count"));
    }
    ds.instances
        .iter()
        .zip(codes)
        .zip(implicit)
        .map(|((inst, c), text)| build_prompt(ds, inst, c, text, mode, opts))
        .collect()
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        Ok(Pipeline { cfg, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Writes the resolved config next to the outputs.
    pub fn write_resolved_config(&self) -> Result<()> {
        write_file(&self.path("config.resolved.toml"), self.cfg.to_toml()?)
    }

    /// Loads the domains and splits the target into train and eval parts.
    /// Deterministic for a given config.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let domains = load_domains(&self.cfg)?;
        let target = self
            .cfg
            .domains
            .iter()
            .position(|d| d.name == self.cfg.target_domain)
            .expect("validated config has the target domain");
        let (train, eval) = holdout_split(&domains[target], self.cfg.eval_fraction, self.cfg.seed)?;
        let mut all = domains;
        all[target] = train;
        create_dir(&self.path("data"))?;
        for ds in &all {
            ds.save(self.path(&format!("data/{}-train.jsonl", ds.domain)))?;
        }
        eval.save(self.path(&format!("data/{}-eval.jsonl", eval.domain)))?;
        Ok(PreparedData {
            train: all,
            eval,
            target,
        })
    }

    fn tokenizer_path(&self, domain: &str) -> PathBuf {
        self.path(&format!("tokenizers/{domain}.ckpt"))
    }

    /// Trains one tokenizer per domain on its normalized training split.
    pub fn train_tokenizers(&self, data: &PreparedData) -> Result<Vec<TokenizerModel>> {
        create_dir(&self.path("tokenizers"))?;
        let mut out = Vec::new();
        for (i, ds) in data.train.iter().enumerate() {
            let mut tcfg = self.cfg.tokenizer.clone();
            tcfg.seed = tcfg.seed.wrapping_add(self.cfg.seed).wrapping_add(i as u64);
            log::info!("training tokenizer for {} on {} instances", ds.domain, ds.len());
            let (model, tlog) = train_tokenizer(&ds.normalized(), &tcfg)?;
            for w in &tlog.warnings {
                log::warn!("{}: {w}", ds.domain);
            }
            model.save(self.tokenizer_path(&ds.domain))?;
            write_file(
                &self.path(&format!("tokenizers/{}-log.json", ds.domain)),
                serde_json::to_vec(&tlog)?,
            )?;
            out.push(model);
        }
        Ok(out)
    }

    pub fn load_tokenizers(&self, data: &PreparedData) -> Result<Vec<TokenizerModel>> {
        data.train
            .iter()
            .map(|ds| {
                let p = self.tokenizer_path(&ds.domain);
                TokenizerModel::load(&p).map_err(|e| match e {
                    Error::Io { .. } => {
                        Error::Config(format!("no tokenizer at {} (run train-tokenizer first)", p.display()))
                    }
                    other => other,
                })
            })
            .collect()
    }

    /// Encodes the normalized instances and writes `tokens/<tag>.jsonl`.
    pub fn tokenize_split(&self, tok: &TokenizerModel, ds: &Dataset, tag: &str) -> Result<Vec<TokenSequence>> {
        let codes = ds
            .normalized()
            .instances
            .iter()
            .map(|inst| tok.encode_series(inst.values.view()))
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(
            &self.path(&format!("tokens/{tag}.jsonl")),
            ds.instances.iter().zip(&codes).map(|(inst, c)| TokenRow {
                id: &inst.id,
                codes: &c.codes,
            }),
        )?;
        Ok(codes)
    }

    /// Statistical descriptions as text; writes `features/<tag>.jsonl`.
    pub fn stat_texts(&self, ds: &Dataset, tag: &str) -> Result<Vec<String>> {
        let blocks = feature_blocks(&self.cfg, ds)?;
        let rows: Vec<FeatureRow> = ds
            .instances
            .iter()
            .zip(&blocks)
            .map(|(inst, b)| FeatureRow {
                id: &inst.id,
                blocks: b,
                text: blocks_to_text(b),
            })
            .collect();
        write_jsonl(&self.path(&format!("features/{tag}.jsonl")), &rows)?;
        Ok(rows.into_iter().map(|r| r.text).collect())
    }

    /// Captions through the configured provider and cache; writes
    /// `captions/<tag>.jsonl`.
    pub fn caption_texts(&self, ds: &Dataset, tag: &str) -> Result<Vec<String>> {
        let c = &self.cfg.caption;
        let provider = make_provider(c.provider)?;
        let cache_dir = if c.cache_dir.is_relative() {
            self.out.join(&c.cache_dir)
        } else {
            c.cache_dir.clone()
        };
        let cache = CaptionCache::open(cache_dir)?;
        let caps = captions_for(
            ds,
            provider.as_ref(),
            Some(&cache),
            &c.render,
            &c.focus_prompt,
            c.concurrency,
        )?;
        write_jsonl(
            &self.path(&format!("captions/{tag}.jsonl")),
            ds.instances.iter().zip(&caps).map(|(inst, cap)| CaptionRow {
                id: &inst.id,
                caption: cap,
            }),
        )?;
        Ok(caps)
    }

    /// Statistical text and captions joined, per instance; empty strings
    /// when both sources are off.
    fn implicit(&self, ds: &Dataset, tag: &str) -> Result<Vec<String>> {
        let mut texts = vec![String::new(); ds.len()];
        if self.cfg.features.enabled {
            texts = self.stat_texts(ds, tag)?;
        }
        if self.cfg.caption.enabled {
            for (t, cap) in texts.iter_mut().zip(self.caption_texts(ds, tag)?) {
                if !t.is_empty() && !cap.is_empty() {
                    t.push(' ');
                }
                t.push_str(&cap);
            }
        }
        Ok(texts)
    }

    /// Every split with its file tag, target eval split last.
    pub fn splits<'a>(&self, data: &'a PreparedData) -> Vec<(&'a Dataset, String)> {
        let mut v: Vec<_> = data.train.iter().map(|d| (d, format!("{}-train", d.domain))).collect();
        v.push((&data.eval, format!("{}-eval", data.eval.domain)));
        v
    }

    fn write_prompts(&self, name: &str, prompts: &[PromptRecord]) -> Result<()> {
        let mut s = String::new();
        for p in prompts {
            s.push_str(&serialize_prompt(p));
            s.push('\n');
        }
        write_file(&self.path(&format!("prompts/{name}.txt")), s)
    }

    pub fn build_prompt_sets(&self, data: &PreparedData, toks: &[TokenizerModel]) -> Result<PromptSets> {
        let opts = &self.cfg.prompt;
        let mut pretrain_sets = Vec::new();
        let mut finetune_set = Vec::new();
        for (i, (ds, tok)) in data.train.iter().zip(toks).enumerate() {
            let codes = self.tokenize_split(tok, ds, &format!("{}-train", ds.domain))?;
            let implicit = self.implicit(ds, &format!("{}-train", ds.domain))?;
            let pre = prompts_for(ds, &codes, &implicit, PromptMode::Pretrain, opts)?;
            self.write_prompts(&format!("pretrain-{}", ds.domain), &pre)?;
            pretrain_sets.push(pre);
            if i == data.target {
                let subset = few_shot_split(ds, self.cfg.finetune.train_fraction, self.cfg.seed)?;
                let keep: Vec<usize> = ds
                    .instances
                    .iter()
                    .enumerate()
                    .filter(|(_, inst)| subset.instances.iter().any(|s| s.id == inst.id))
                    .map(|(j, _)| j)
                    .collect();
                let sub_codes: Vec<_> = keep.iter().map(|&j| codes[j].clone()).collect();
                let sub_implicit: Vec<_> = keep.iter().map(|&j| implicit[j].clone()).collect();
                finetune_set = prompts_for(&subset, &sub_codes, &sub_implicit, PromptMode::Finetune, opts)?;
                self.write_prompts("finetune", &finetune_set)?;
            }
        }
        let tok = &toks[data.target];
        let codes = self.tokenize_split(tok, &data.eval, &format!("{}-eval", data.eval.domain))?;
        let implicit = self.implicit(&data.eval, &format!("{}-eval", data.eval.domain))?;
        let eval_prompts = prompts_for(&data.eval, &codes, &implicit, PromptMode::Infer, opts)?;
        self.write_prompts("eval", &eval_prompts)?;
        let eval = data
            .eval
            .instances
            .iter()
            .zip(eval_prompts)
            .map(|(inst, prompt)| EvalItem {
                id: inst.id.clone(),
                prompt,
                gold: inst.labels.clone(),
            })
            .collect();
        Ok(PromptSets {
            pretrain: pretrain_sets,
            finetune: finetune_set,
            eval,
        })
    }

    /// Fresh model whose vocabulary covers the training prompts and every
    /// label of every domain.
    pub fn init_lm(&self, data: &PreparedData, sets: &PromptSets, toks: &[TokenizerModel]) -> Result<ToyLm> {
        let mut corpus: Vec<PromptRecord> = sets.pretrain.iter().flatten().cloned().collect();
        corpus.extend(sets.finetune.iter().cloned());
        let lexicons: Vec<(String, Vec<String>)> = data
            .train
            .iter()
            .map(|d| (d.domain.clone(), d.label_lexicon.clone()))
            .collect();
        let blocks: Vec<(String, usize)> = toks.iter().map(|t| (t.domain.clone(), t.codebook.size())).collect();
        let vocab = VocabSpec::from_prompts(&corpus, &lexicons, &blocks)?;
        let codebooks = toks.iter().map(|t| t.codebook.vectors.clone()).collect();
        let mut lm_cfg = self.cfg.lm.clone();
        lm_cfg.seed = lm_cfg.seed.wrapping_add(self.cfg.seed);
        ToyLm::new(lm_cfg, vocab, codebooks)
    }

    fn with_seed(&self, train: &crate::lm::TrainConfig) -> crate::lm::TrainConfig {
        let mut t = train.clone();
        t.seed = t.seed.wrapping_add(self.cfg.seed);
        t
    }

    pub fn run_pretrain(&self, lm: &mut ToyLm, sets: &PromptSets) -> Result<TrainLog> {
        let log = if self.cfg.pretrain.enabled {
            pretrain(lm, &sets.pretrain, &self.with_seed(&self.cfg.pretrain.train))?
        } else {
            TrainLog::default()
        };
        log.write_jsonl(self.path("metrics-pretrain.jsonl"))?;
        lm.save(self.path("lm-pretrained.ckpt"))?;
        Ok(log)
    }

    pub fn run_finetune(&self, lm: &mut ToyLm, sets: &PromptSets) -> Result<TrainLog> {
        let log = finetune(lm, &sets.finetune, &self.with_seed(&self.cfg.finetune.train))?;
        log.write_jsonl(self.path("metrics-finetune.jsonl"))?;
        lm.save(self.path("lm.ckpt"))?;
        Ok(log)
    }

    pub fn run_evaluate(&self, lm: &ToyLm, data: &PreparedData, sets: &PromptSets) -> Result<EvalReport> {
        let lexicon = &data.eval.label_lexicon;
        let report = evaluate(lm, &sets.eval, lexicon)?;
        write_file(&self.path("report.json"), serde_json::to_vec_pretty(&report)?)?;
        write_file(&self.path("report.txt"), report_text(&report, lexicon))?;
        write_jsonl(&self.path("predictions.jsonl"), &report.predictions)?;
        Ok(report)
    }

    /// Token-usage heatmap over each domain's training data and
    /// reconstruction overlays for the first few eval instances.
    pub fn run_plots(&self, data: &PreparedData, toks: &[TokenizerModel]) -> Result<()> {
        let mut rows = Vec::new();
        for (ds, tok) in data.train.iter().zip(toks) {
            rows.push((ds.domain.clone(), tok.token_usage_histogram(&ds.normalized())?));
        }
        let (png, csv) = usage_heatmap(&rows)?;
        write_file(&self.path("plots/token_usage.png"), png)?;
        write_file(&self.path("plots/token_usage.csv"), csv)?;

        let tok = &toks[data.target];
        let eval = data.eval.normalized();
        let n = self.cfg.plots.overlay_instances.min(eval.len());
        if n > 0 {
            let recon = eval.instances[..n]
                .iter()
                .map(|inst| tok.decode_tokens(&tok.encode_series(inst.values.view())?))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = eval.instances[..n]
                .iter()
                .zip(&recon)
                .map(|(inst, r)| (inst.values.view(), r.view()))
                .collect();
            let png = overlay_panels(&pairs, self.cfg.plots.width, self.cfg.plots.panel_height)?;
            write_file(&self.path("plots/reconstruction.png"), png)?;
        }
        Ok(())
    }

    /// The full pipeline. `tokenizers` may carry models trained earlier on
    /// the same data; otherwise they are trained here.
    pub fn run_all_with(&self, tokenizers: Option<Vec<TokenizerModel>>) -> Result<(EvalReport, Vec<TokenizerModel>)> {
        create_dir(&self.out)?;
        self.write_resolved_config()?;
        let data = self.prepare_data()?;
        let toks = match tokenizers {
            Some(t) => {
                create_dir(&self.path("tokenizers"))?;
                for m in &t {
                    m.save(self.tokenizer_path(&m.domain))?;
                }
                t
            }
            None => self.train_tokenizers(&data)?,
        };
        let sets = self.build_prompt_sets(&data, &toks)?;
        let mut lm = self.init_lm(&data, &sets, &toks)?;
        log::info!("language model has {} parameters", crate::nn::Module::num_params(&lm));
        let pre = self.run_pretrain(&mut lm, &sets)?;
        let fine = self.run_finetune(&mut lm, &sets)?;
        write_jsonl(&self.path("metrics.jsonl"), pre.steps.iter().chain(&fine.steps))?;
        let report = self.run_evaluate(&lm, &data, &sets)?;
        self.run_plots(&data, &toks)?;
        Ok((report, toks))
    }

    pub fn run_all(&self) -> Result<EvalReport> {
        Ok(self.run_all_with(None)?.0)
    }
}

/// Runs one full pipeline per cell, each in its own subdirectory of
/// `<output_dir>/ablation`, sharing tokenizers and the eval split. Writes
/// `ablation.csv` and `ablation.txt`.
pub fn run_ablation(base: &RunConfig, grid: &[AblationCell]) -> Result<Vec<AblationRow>> {
    let root = base.output_dir.join("ablation");
    let mut rows = Vec::new();
    let mut shared: Option<Vec<TokenizerModel>> = None;
    for cell in grid {
        let mut cfg = base.clone();
        cfg.output_dir = root.join(cell.name());
        cfg.prompt.use_instruction = cell.use_instruction_text;
        cfg.features.enabled = cell.use_statistical_features;
        cfg.caption.enabled = cell.use_visual_features;
        cfg.pretrain.enabled = cell.use_pretraining;
        log::info!("ablation cell {}", cell.name());
        let (report, toks) = Pipeline::new(cfg)?.run_all_with(shared.take())?;
        shared = Some(toks);
        rows.push(AblationRow {
            cell: *cell,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            n: report.n,
        });
    }
    write_file(&root.join("ablation.csv"), ablation_csv(&rows))?;
    let mut f = fs::File::create(root.join("ablation.txt")).map_err(|e| Error::io(&root, e))?;
    let text = format!("{}\n{}", ablation_table(&rows), ablation_annotations(&rows));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&root, e))?;
    Ok(rows)
}
