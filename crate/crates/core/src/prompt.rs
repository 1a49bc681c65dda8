//! Prompt assembly, the hybrid text/temporal vocabulary, and the one-line
//! serialized prompt format.
//!
//! Serialized form (fields separated by single spaces, values escaped):
//!
//! ```text
//! [mode] finetune [domain] d [instruction] ... [labels] a | b [context] ...
//! [implicit] ... <BET> 12 7 <pad> <EET> [answer] The correct answer is a.
//! ```
//!
//! Inside values `\`, `<`, `[`, `|`, newline and carriage return are
//! backslash-escaped, so an unescaped `[` or `<` always starts a field.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::vq::TokenSequence;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const BET: &str = "<BET>";
pub const EET: &str = "<EET>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const BET_ID: usize = 4;
pub const EET_ID: usize = 5;
pub const NUM_SPECIAL: usize = 6;

const ANSWER_PREFIX: &str = "The correct answer is ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Pretrain,
    Finetune,
    Infer,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Pretrain => "pretrain",
            PromptMode::Finetune => "finetune",
            PromptMode::Infer => "infer",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(PromptMode::Pretrain),
            "finetune" => Ok(PromptMode::Finetune),
            "infer" => Ok(PromptMode::Infer),
            other => Err(Error::invalid(format!("unknown prompt mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Instruction,
    Labels,
    Context,
    Implicit,
    Temporal,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptToken {
    Word(String),
    Bet,
    Eet,
    Code(usize),
    Pad,
}

impl fmt::Display for PromptToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptToken::Word(w) => f.write_str(w),
            PromptToken::Bet => f.write_str(BET),
            PromptToken::Eet => f.write_str(EET),
            PromptToken::Code(c) => write!(f, "{c}"),
            PromptToken::Pad => f.write_str(PAD),
        }
    }
}

/// One assembled prompt. `temporal` holds the length-normalized codes,
/// `None` marking padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRecord {
    pub mode: PromptMode,
    pub domain: String,
    pub instruction: String,
    pub candidate_labels: Vec<String>,
    pub context: String,
    pub implicit_text: String,
    pub temporal: Vec<Option<usize>>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    /// Length of the temporal region after padding or truncation.
    pub target_len: usize,
    pub use_instruction: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            target_len: 8,
            use_instruction: true,
        }
    }
}

/// Codes padded or truncated to a fixed length. `truncated` records how
/// many codes were dropped from the tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedCodes {
    pub slots: Vec<Option<usize>>,
    pub truncated: usize,
}

pub fn normalize_token_length(codes: &TokenSequence, target: usize) -> Result<NormalizedCodes> {
    if target == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    let mut slots: Vec<Option<usize>> = codes.codes.iter().take(target).map(|&c| Some(c)).collect();
    let truncated = codes.codes.len().saturating_sub(target);
    if truncated > 0 {
        log::warn!("temporal sequence of {} codes truncated to {target}", codes.codes.len());
    }
    slots.resize(target, None);
    Ok(NormalizedCodes { slots, truncated })
}

pub fn answer_sentence(labels: &[String]) -> String {
    format!("{ANSWER_PREFIX}{}.", labels.join(", "))
}

/// True when `s` has the form `The correct answer is <l>[, <l>...].` with
/// every label taken from `lexicon`.
pub fn is_answer_sentence(s: &str, lexicon: &[String]) -> bool {
    let Some(body) = s.strip_prefix(ANSWER_PREFIX).and_then(|b| b.strip_suffix('.')) else {
        return false;
    };
    !body.is_empty() && body.split(", ").all(|l| lexicon.iter().any(|x| x == l))
}

pub fn build_prompt(
    ds: &Dataset,
    inst: &TimeSeriesInstance,
    codes: &TokenSequence,
    implicit_text: &str,
    mode: PromptMode,
    opts: &PromptOptions,
) -> Result<PromptRecord> {
    if inst.domain != ds.domain {
        return Err(Error::invalid(format!(
            "instance {} belongs to domain {:?}, dataset is {:?}",
            inst.id, inst.domain, ds.domain
        )));
    }
    if codes.domain != ds.domain {
        return Err(Error::invalid(format!(
            "codes come from domain {:?}, dataset is {:?}",
            codes.domain, ds.domain
        )));
    }
    let temporal = normalize_token_length(codes, opts.target_len)?.slots;
    let answer = match mode {
        PromptMode::Infer => String::new(),
        _ => answer_sentence(&ds.canonical_labels(&inst.labels)),
    };
    Ok(PromptRecord {
        mode,
        domain: ds.domain.clone(),
        instruction: if opts.use_instruction {
            ds.instruction.clone()
        } else {
            String::new()
        },
        candidate_labels: ds.label_lexicon.clone(),
        context: inst.context.clone(),
        implicit_text: implicit_text.to_string(),
        temporal,
        answer,
    })
}

fn words(s: &str) -> impl Iterator<Item = PromptToken> + '_ {
    s.split_whitespace().map(|w| PromptToken::Word(w.to_string()))
}

impl PromptRecord {
    /// Token stream and the span of each segment, in template order. Empty
    /// optional sections produce empty spans.
    pub fn tokens_with_segments(&self) -> (Vec<PromptToken>, Vec<(SegmentKind, Range<usize>)>) {
        let mut toks = Vec::new();
        let mut segs = Vec::new();
        let mut section = |kind: SegmentKind, toks: &mut Vec<PromptToken>, items: Vec<PromptToken>| {
            let start = toks.len();
            toks.extend(items);
            segs.push((kind, start..toks.len()));
        };
        section(SegmentKind::Instruction, &mut toks, words(&self.instruction).collect());
        let labels = if self.candidate_labels.is_empty() {
            Vec::new()
        } else {
            let text = format!("Candidate labels: {}.", self.candidate_labels.join(", "));
            words(&text).collect()
        };
        section(SegmentKind::Labels, &mut toks, labels);
        let context = if self.context.trim().is_empty() {
            Vec::new()
        } else {
            words("Context:").chain(words(&self.context)).collect()
        };
        section(SegmentKind::Context, &mut toks, context);
        let implicit = if self.implicit_text.trim().is_empty() {
            Vec::new()
        } else {
            words("Implicit features:").chain(words(&self.implicit_text)).collect()
        };
        section(SegmentKind::Implicit, &mut toks, implicit);
        let mut temporal = vec![PromptToken::Bet];
        temporal.extend(
            self.temporal
                .iter()
                .map(|s| s.map_or(PromptToken::Pad, PromptToken::Code)),
        );
        temporal.push(PromptToken::Eet);
        section(SegmentKind::Temporal, &mut toks, temporal);
        section(SegmentKind::Answer, &mut toks, words(&self.answer).collect());
        (toks, segs)
    }

    pub fn tokens(&self) -> Vec<PromptToken> {
        self.tokens_with_segments().0
    }

    pub fn segments(&self) -> Vec<(SegmentKind, Range<usize>)> {
        self.tokens_with_segments().1
    }

    /// Per-token loss flags: temporal codes and answer words when
    /// pretraining, answer words only when fine-tuning, nothing at inference.
    pub fn loss_mask(&self) -> Vec<bool> {
        let (toks, segs) = self.tokens_with_segments();
        let mut mask = vec![false; toks.len()];
        for (kind, range) in segs {
            let on = match (self.mode, kind) {
                (PromptMode::Infer, _) => false,
                (_, SegmentKind::Answer) => true,
                (PromptMode::Pretrain, SegmentKind::Temporal) => true,
                _ => false,
            };
            if on {
                for i in range {
                    mask[i] = kind == SegmentKind::Answer || matches!(toks[i], PromptToken::Code(_));
                }
            }
        }
        mask
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens()
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The prompt with the answer removed, as used to start generation.
    pub fn without_answer(&self) -> PromptRecord {
        PromptRecord {
            mode: PromptMode::Infer,
            answer: String::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainBlock {
    pub domain: String,
    pub offset: usize,
    pub size: usize,
}

/// Id layout: the six special tokens, then the sorted word list, then one
/// block of `K` temporal ids per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub words: Vec<String>,
    pub domains: Vec<DomainBlock>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// What an id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabEntry<'a> {
    Special(&'a str),
    Word(&'a str),
    Temporal { domain: &'a str, code: usize },
}

impl VocabSpec {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, domains: &[(String, usize)]) -> Result<Self> {
        let mut list: Vec<String> = words
            .into_iter()
            .filter(|w| ![PAD, BOS, EOS, UNK, BET, EET].contains(w))
            .map(str::to_string)
            .collect();
        list.sort();
        list.dedup();
        let mut blocks = Vec::new();
        let mut offset = NUM_SPECIAL + list.len();
        for (domain, size) in domains {
            if *size == 0 {
                return Err(Error::invalid(format!("domain {domain} has an empty codebook")));
            }
            if blocks.iter().any(|b: &DomainBlock| &b.domain == domain) {
                return Err(Error::invalid(format!("domain {domain} listed twice")));
            }
            blocks.push(DomainBlock {
                domain: domain.clone(),
                offset,
                size: *size,
            });
            offset += size;
        }
        Ok(VocabSpec::from_parts(list, blocks))
    }

    /// Reassembles a vocabulary from stored parts, rebuilding the word index.
    pub fn from_parts(words: Vec<String>, domains: Vec<DomainBlock>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIAL + i))
            .collect();
        VocabSpec { words, domains, index }
    }

    /// Vocabulary from the words of `prompts` plus every single-label answer
    /// sentence of each domain's lexicon.
    pub fn from_prompts(
        prompts: &[PromptRecord],
        lexicons: &[(String, Vec<String>)],
        domains: &[(String, usize)],
    ) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        for p in prompts {
            for t in p.tokens() {
                if let PromptToken::Word(w) = t {
                    words.push(w);
                }
            }
        }
        for (_, lexicon) in lexicons {
            for l in lexicon {
                words.extend(
                    answer_sentence(std::slice::from_ref(l))
                        .split_whitespace()
                        .map(str::to_string),
                );
            }
        }
        Self::build(words.iter().map(String::as_str), domains)
    }

    pub fn size(&self) -> usize {
        self.domains
            .last()
            .map_or(NUM_SPECIAL + self.words.len(), |b| b.offset + b.size)
    }

    /// Number of ids that are special tokens or words.
    pub fn text_size(&self) -> usize {
        NUM_SPECIAL + self.words.len()
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn block(&self, domain: &str) -> Option<&DomainBlock> {
        self.domains.iter().find(|b| b.domain == domain)
    }

    pub fn entry(&self, id: usize) -> Option<VocabEntry<'_>> {
        const SPECIAL: [&str; NUM_SPECIAL] = [PAD, BOS, EOS, UNK, BET, EET];
        if id < NUM_SPECIAL {
            return Some(VocabEntry::Special(SPECIAL[id]));
        }
        if id < self.text_size() {
            return Some(VocabEntry::Word(&self.words[id - NUM_SPECIAL]));
        }
        self.domains
            .iter()
            .find(|b| (b.offset..b.offset + b.size).contains(&id))
            .map(|b| VocabEntry::Temporal {
                domain: &b.domain,
                code: id - b.offset,
            })
    }

    pub fn token_id(&self, t: &PromptToken, domain: &str) -> Result<usize> {
        Ok(match t {
            PromptToken::Word(w) => self.word_id(w),
            PromptToken::Bet => BET_ID,
            PromptToken::Eet => EET_ID,
            PromptToken::Pad => PAD_ID,
            PromptToken::Code(c) => {
                let b = self
                    .block(domain)
                    .ok_or_else(|| Error::invalid(format!("no temporal block for domain {domain}")))?;
                if *c >= b.size {
                    return Err(Error::invalid(format!(
                        "code {c} out of range for domain {domain} (K={})",
                        b.size
                    )));
                }
                b.offset + c
            }
        })
    }
}

/// Ids framed by `<bos>` and, when the prompt has an answer, `<eos>`, with
/// the loss mask aligned index for index. `<eos>` is trained with the answer.
pub fn tokenize_prompt(p: &PromptRecord, v: &VocabSpec) -> Result<(Vec<usize>, Vec<bool>)> {
    let toks = p.tokens();
    let mask = p.loss_mask();
    let mut ids = Vec::with_capacity(toks.len() + 2);
    let mut out_mask = Vec::with_capacity(toks.len() + 2);
    ids.push(BOS_ID);
    out_mask.push(false);
    for (t, m) in toks.iter().zip(mask) {
        ids.push(v.token_id(t, &p.domain)?);
        out_mask.push(m);
    }
    if !p.answer.trim().is_empty() {
        ids.push(EOS_ID);
        out_mask.push(p.mode != PromptMode::Infer);
    }
    Ok((ids, out_mask))
}

/// Renders ids as space-separated text; `<bos>` and `<eos>` are dropped and
/// temporal ids print as their code number.
pub fn detokenize(ids: &[usize], v: &VocabSpec) -> String {
    let mut out: Vec<String> = Vec::with_capacity(ids.len());
    for &id in ids {
        match v.entry(id) {
            Some(VocabEntry::Special(s)) if s == BOS || s == EOS => {}
            Some(VocabEntry::Special(s)) | Some(VocabEntry::Word(s)) => out.push(s.to_string()),
            Some(VocabEntry::Temporal { code, .. }) => out.push(code.to_string()),
            None => out.push(UNK.to_string()),
        }
    }
    out.join(" ")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '<' | '[' | '|' => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out
}

pub fn serialize_prompt(p: &PromptRecord) -> String {
    let labels: Vec<String> = p.candidate_labels.iter().map(|l| escape(l)).collect();
    let temporal: Vec<String> = p
        .temporal
        .iter()
        .map(|s| s.map_or(PAD.to_string(), |c| c.to_string()))
        .collect();
    let mut out = format!(
        "[mode] {} [domain] {} [instruction] {} [labels] {} [context] {} [implicit] {} {BET}",
        p.mode.as_str(),
        escape(&p.domain),
        escape(&p.instruction),
        labels.join(" | "),
        escape(&p.context),
        escape(&p.implicit_text),
    );
    for t in &temporal {
        out.push(' ');
        out.push_str(t);
    }
    out.push_str(&format!(" {EET} [answer] {}", escape(&p.answer)));
    out
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset,
            msg: msg.into(),
        })
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.s[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(self.pos, format!("expected {lit:?}"))
        }
    }

    /// Raw (still escaped) text up to the next unescaped `[` or `<`, or the
    /// end of input.
    fn raw_value(&mut self) -> Result<&'a str> {
        let bytes = self.s.as_bytes();
        let start = self.pos;
        let mut i = start;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => {
                    if i + 1 >= bytes.len() {
                        return self.err(i, "dangling escape");
                    }
                    i += 2;
                }
                b'[' | b'<' => break,
                _ => i += 1,
            }
        }
        self.pos = i;
        Ok(&self.s[start..i])
    }

    /// A field value followed by the single separating space.
    fn field(&mut self, tag: &str) -> Result<(usize, &'a str)> {
        self.expect(tag)?;
        self.expect(" ")?;
        let start = self.pos;
        let raw = self.raw_value()?;
        if self.pos >= self.s.len() {
            return self.err(self.pos, format!("unexpected end of input after {tag}"));
        }
        match raw.strip_suffix(' ') {
            Some(v) => Ok((start, v)),
            None => self.err(self.pos, "missing space before next field"),
        }
    }
}

fn unescape(raw: &str, base: usize) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.char_indices();
    while let Some((i, c)) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some((_, 'n')) => out.push('\n'),
            Some((_, 'r')) => out.push('\r'),
            Some((_, e @ ('\\' | '<' | '[' | '|'))) => out.push(e),
            _ => {
                return Err(Error::Parse {
                    offset: base + i,
                    msg: "invalid escape sequence".into(),
                })
            }
        }
    }
    Ok(out)
}

fn split_labels(raw: &str, base: usize) -> Result<Vec<String>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let bytes = raw.as_bytes();
    let mut parts = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'|' => {
                parts.push((start, i));
                start = i + 1;
                i += 1;
            }
            _ => i += 1,
        }
    }
    parts.push((start, bytes.len()));
    let last = parts.len() - 1;
    parts
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let mut part = &raw[a..b];
            let mut offset = base + a;
            if k > 0 {
                part = part.strip_prefix(' ').ok_or(Error::Parse {
                    offset,
                    msg: "expected space after label separator".into(),
                })?;
                offset += 1;
            }
            if k < last {
                part = part.strip_suffix(' ').ok_or(Error::Parse {
                    offset: base + b,
                    msg: "expected space before label separator".into(),
                })?;
            }
            unescape(part, offset)
        })
        .collect()
}

/// Inverse of [`serialize_prompt`]. Errors carry the byte offset at which
/// the input stopped matching the format.
pub fn parse_prompt(s: &str) -> Result<PromptRecord> {
    let mut p = Parser { s, pos: 0 };
    let (at, mode) = p.field("[mode]")?;
    let mode: PromptMode = mode.parse().map_err(|_| Error::Parse {
        offset: at,
        msg: format!("unknown mode {mode:?}"),
    })?;
    let (at, domain) = p.field("[domain]")?;
    let domain = unescape(domain, at)?;
    let (at, instruction) = p.field("[instruction]")?;
    let instruction = unescape(instruction, at)?;
    let (at, labels) = p.field("[labels]")?;
    let candidate_labels = split_labels(labels, at)?;
    let (at, context) = p.field("[context]")?;
    let context = unescape(context, at)?;
    let (at, implicit) = p.field("[implicit]")?;
    let implicit_text = unescape(implicit, at)?;
    p.expect(BET)?;
    let mut temporal = Vec::new();
    loop {
        p.expect(" ")?;
        let rest = &s[p.pos..];
        if rest.starts_with(EET) {
            p.pos += EET.len();
            break;
        }
        let end = rest.find(' ').unwrap_or(rest.len());
        let tok = &rest[..end];
        if tok == PAD {
            temporal.push(None);
        } else {
            match tok.parse::<usize>() {
                Ok(c) => temporal.push(Some(c)),
                Err(_) => return p.err(p.pos, format!("expected a code, {PAD} or {EET}, found {tok:?}")),
            }
        }
        p.pos += end;
    }
    p.expect(" ")?;
    p.expect("[answer]")?;
    p.expect(" ")?;
    let at = p.pos;
    let raw = p.raw_value()?;
    if p.pos != s.len() {
        return p.err(p.pos, "unexpected text after answer");
    }
    let answer = unescape(raw, at)?;
    Ok(PromptRecord {
        mode,
        domain,
        instruction,
        candidate_labels,
        context,
        implicit_text,
        temporal,
        answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn har() -> Dataset {
        let labels = ["walking", "upstairs", "downstairs", "sitting", "standing", "lying"];
        let mut ds = Dataset::new(
            "har",
            3,
            labels.iter().map(|s| s.to_string()).collect(),
            "Identify the activity from the motion signal.",
        )
        .unwrap();
        ds.push(TimeSeriesInstance {
            id: "har-0".into(),
            domain: "har".into(),
            values: Array2::zeros((3, 32)),
            labels: vec!["walking".into()],
            context: "Sensor worn at the waist.".into(),
        })
        .unwrap();
        ds
    }

    fn codes(n: usize) -> TokenSequence {
        TokenSequence {
            domain: "har".into(),
            codes: (0..n).map(|i| i % 7).collect(),
            series_len: None,
        }
    }

    #[test]
    fn finetune_prompt_structure() {
        let ds = har();
        let p = build_prompt(
            &ds,
            &ds.instances[0],
            &codes(2),
            "",
            PromptMode::Finetune,
            &PromptOptions::default(),
        )
        .unwrap();
        assert_eq!(p.answer, "The correct answer is walking.");
        assert!(is_answer_sentence(&p.answer, &ds.label_lexicon));
        let text = p.text();
        for l in &ds.label_lexicon {
            assert!(text.contains(l.as_str()));
        }
        assert_eq!(text.matches(BET).count(), 1);
        assert_eq!(text.matches(EET).count(), 1);
        assert_eq!(p.temporal.len(), 8);
        let mask = p.loss_mask();
        let (_, segs) = p.tokens_with_segments();
        let answer = segs.iter().find(|(k, _)| *k == SegmentKind::Answer).unwrap().1.clone();
        for (i, m) in mask.iter().enumerate() {
            assert_eq!(*m, answer.contains(&i));
        }
    }

    #[test]
    fn optional_implicit_section() {
        let ds = har();
        let opts = PromptOptions::default();
        let with = build_prompt(&ds, &ds.instances[0], &codes(3), "mean 0.1", PromptMode::Infer, &opts).unwrap();
        let without = build_prompt(&ds, &ds.instances[0], &codes(3), "", PromptMode::Infer, &opts).unwrap();
        assert!(with.text().contains("Implicit features: mean 0.1"));
        assert!(!without.text().contains("Implicit"));
        assert_eq!(with.text().replace(" Implicit features: mean 0.1", ""), without.text());
        assert_eq!(without.answer, "");
    }

    #[test]
    fn domain_mismatch_is_rejected() {
        let ds = har();
        let mut inst = ds.instances[0].clone();
        inst.domain = "ecg".into();
        assert!(build_prompt(&ds, &inst, &codes(2), "", PromptMode::Infer, &PromptOptions::default()).is_err());
    }

    #[test]
    fn length_normalization() {
        let n = normalize_token_length(&codes(50), 64).unwrap();
        assert_eq!(n.slots.iter().filter(|s| s.is_none()).count(), 14);
        assert_eq!(n.slots.len(), 64);
        let n = normalize_token_length(&codes(80), 64).unwrap();
        assert_eq!((n.slots.len(), n.truncated), (64, 16));
        assert_eq!(n.slots[63], Some(63 % 7));
        let n = normalize_token_length(&codes(64), 64).unwrap();
        assert_eq!(n.slots, codes(64).codes.into_iter().map(Some).collect::<Vec<_>>());
        assert!(normalize_token_length(&codes(3), 0).is_err());
    }

    #[test]
    fn pretrain_mask_covers_codes_and_answer() {
        let ds = har();
        let p = build_prompt(
            &ds,
            &ds.instances[0],
            &codes(5),
            "",
            PromptMode::Pretrain,
            &PromptOptions::default(),
        )
        .unwrap();
        let toks = p.tokens();
        let mask = p.loss_mask();
        let codes_on = toks
            .iter()
            .zip(&mask)
            .filter(|(t, m)| matches!(t, PromptToken::Code(_)) && **m)
            .count();
        assert_eq!(codes_on, 5);
        for (t, m) in toks.iter().zip(&mask) {
            if matches!(t, PromptToken::Pad | PromptToken::Bet | PromptToken::Eet) {
                assert!(!m);
            }
        }
    }

    #[test]
    fn tokenize_offsets_and_round_trip() {
        let ds = har();
        let p = build_prompt(
            &ds,
            &ds.instances[0],
            &codes(7),
            "",
            PromptMode::Finetune,
            &PromptOptions::default(),
        )
        .unwrap();
        let mut v = VocabSpec::from_prompts(std::slice::from_ref(&p), &[], &[("har".into(), 16)]).unwrap();
        let (ids, mask) = tokenize_prompt(&p, &v).unwrap();
        assert_eq!(ids.len(), mask.len());
        assert_eq!((ids[0], *ids.last().unwrap()), (BOS_ID, EOS_ID));
        assert_eq!(detokenize(&ids, &v), p.text());

        v.domains[0].offset = 1000;
        assert_eq!(v.token_id(&PromptToken::Code(12), "har").unwrap(), 1012);
        assert!(v.token_id(&PromptToken::Code(16), "har").is_err());

        let small = VocabSpec::build(["The", "correct"], &[("har".into(), 16)]).unwrap();
        let (ids, _) = tokenize_prompt(&p, &small).unwrap();
        let expected: Vec<String> = p
            .tokens()
            .iter()
            .map(|t| match t {
                PromptToken::Word(w) if w != "The" && w != "correct" => UNK.to_string(),
                t => t.to_string(),
            })
            .collect();
        assert_eq!(detokenize(&ids, &small), expected.join(" "));
    }

    #[test]
    fn serialize_examples() {
        let ds = har();
        let mut p = build_prompt(
            &ds,
            &ds.instances[0],
            &codes(3),
            "a [b] <c> | d\\e\nf",
            PromptMode::Finetune,
            &PromptOptions::default(),
        )
        .unwrap();
        let s = serialize_prompt(&p);
        assert!(!s.contains('\n'));
        assert!(s.contains("<BET> 0 1 2 <pad>"));
        assert_eq!(parse_prompt(&s).unwrap(), p);

        p.answer.clear();
        p.mode = PromptMode::Infer;
        let s = serialize_prompt(&p);
        assert!(s.ends_with("[answer] "));
        assert_eq!(parse_prompt(&s).unwrap().answer, "");

        let broken = s.replace(" <EET>", "");
        match parse_prompt(&broken) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, broken.find("[answer]").unwrap()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn answer_template_check() {
        let lex: Vec<String> = ["a b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(is_answer_sentence("The correct answer is a b, c.", &lex));
        assert!(!is_answer_sentence("The correct answer is d.", &lex));
        assert!(!is_answer_sentence("The correct answer is c", &lex));
        assert_eq!(answer_sentence(&lex), "The correct answer is a b, c.");
    }
}
