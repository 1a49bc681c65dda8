//! Labeled multichannel time series, the line-delimited dataset format,
//! normalization, patch segmentation and the synthetic corpus generator.
//!
//! File format: line 1 is a header object
//! `{"domain", "channels", "label_lexicon", "instruction"}`; each following
//! line is one instance `{"id", "series", "labels", "context"}` where
//! `series` is a list of `channels` equal-length numeric lists.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled series. `values` is `(channels, length)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesInstance {
    pub id: String,
    pub domain: String,
    pub values: Array2<f64>,
    pub labels: Vec<String>,
    pub context: String,
}

impl TimeSeriesInstance {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Mean over channels at each time step.
    pub fn channel_mean(&self) -> Vec<f64> {
        let h = self.channels() as f64;
        (0..self.len()).map(|t| self.values.column(t).sum() / h).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: String,
    pub channels: usize,
    pub instances: Vec<TimeSeriesInstance>,
    pub label_lexicon: Vec<String>,
    pub instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    domain: String,
    channels: usize,
    label_lexicon: Vec<String>,
    instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    series: Vec<Vec<f64>>,
    labels: Vec<String>,
    #[serde(default)]
    context: String,
}

impl Dataset {
    pub fn new(
        domain: impl Into<String>,
        channels: usize,
        label_lexicon: Vec<String>,
        instruction: impl Into<String>,
    ) -> Result<Self> {
        check_lexicon(&label_lexicon).map_err(Error::invalid)?;
        if channels == 0 {
            return Err(Error::invalid("channel count must be positive"));
        }
        Ok(Dataset {
            domain: domain.into(),
            channels,
            instances: Vec::new(),
            label_lexicon,
            instruction: instruction.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Validates and appends an instance; labels are reordered to lexicon order.
    pub fn push(&mut self, mut inst: TimeSeriesInstance) -> Result<()> {
        self.validate(&mut inst).map_err(Error::invalid)?;
        self.instances.push(inst);
        Ok(())
    }

    fn validate(&self, inst: &mut TimeSeriesInstance) -> std::result::Result<(), String> {
        if inst.domain != self.domain {
            return Err(format!(
                "instance {} has domain {:?}, dataset is {:?}",
                inst.id, inst.domain, self.domain
            ));
        }
        if inst.channels() != self.channels {
            return Err(format!(
                "instance {} has {} channels, expected {}",
                inst.id,
                inst.channels(),
                self.channels
            ));
        }
        if inst.len() == 0 {
            return Err(format!("instance {} has an empty series", inst.id));
        }
        if inst.values.iter().any(|v| !v.is_finite()) {
            return Err(format!("instance {} contains a non-finite value", inst.id));
        }
        if inst.labels.is_empty() {
            return Err(format!("instance {} has no labels", inst.id));
        }
        for label in &inst.labels {
            if !self.label_lexicon.contains(label) {
                return Err(format!("label {label:?} is not in the lexicon"));
            }
        }
        inst.labels = self.canonical_labels(&inst.labels);
        Ok(())
    }

    /// Deduplicates and sorts labels into lexicon order.
    pub fn canonical_labels(&self, labels: &[String]) -> Vec<String> {
        self.label_lexicon
            .iter()
            .filter(|l| labels.contains(l))
            .cloned()
            .collect()
    }

    /// A copy with the same header and the selected instances.
    pub fn with_instances(&self, instances: Vec<TimeSeriesInstance>) -> Dataset {
        Dataset {
            domain: self.domain.clone(),
            channels: self.channels,
            instances,
            label_lexicon: self.label_lexicon.clone(),
            instruction: self.instruction.clone(),
        }
    }

    /// Per-channel z-normalization of every instance.
    pub fn normalized(&self) -> Dataset {
        let instances = self
            .instances
            .iter()
            .map(|inst| TimeSeriesInstance {
                values: znormalize(inst.values.view()),
                ..inst.clone()
            })
            .collect();
        self.with_instances(instances)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write_line = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
        write_line(serde_json::to_string(&HeaderLine {
            domain: self.domain.clone(),
            channels: self.channels,
            label_lexicon: self.label_lexicon.clone(),
            instruction: self.instruction.clone(),
        })?)?;
        for inst in &self.instances {
            write_line(serde_json::to_string(&RecordLine {
                id: inst.id.clone(),
                series: inst.values.outer_iter().map(|r| r.to_vec()).collect(),
                labels: inst.labels.clone(),
                context: inst.context.clone(),
            })?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_lexicon(lexicon: &[String]) -> std::result::Result<(), String> {
    if lexicon.is_empty() {
        return Err("label lexicon is empty".into());
    }
    let mut seen = HashSet::new();
    for label in lexicon {
        if label.trim().is_empty() {
            return Err("label lexicon contains an empty label".into());
        }
        if !seen.insert(label.to_lowercase()) {
            return Err(format!("duplicate label {label:?} in lexicon"));
        }
    }
    Ok(())
}

/// Reads a dataset file. `domain`, when non-empty, must match the header.
pub fn load_dataset(path: impl AsRef<Path>, domain: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let fmt = |line: usize, msg: String| Error::Format { line, msg };

    let header: HeaderLine = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| fmt(1, format!("malformed header: {e}")))?
        }
        None => return Err(fmt(1, "missing header line".into())),
    };
    if !domain.is_empty() && header.domain != domain {
        return Err(fmt(
            1,
            format!("header domain {:?} does not match {:?}", header.domain, domain),
        ));
    }
    let mut ds = Dataset::new(header.domain, header.channels, header.label_lexicon, header.instruction)
        .map_err(|e| fmt(1, e.to_string()))?;

    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| fmt(lineno, format!("malformed record: {e}")))?;
        if rec.series.len() != ds.channels {
            return Err(fmt(
                lineno,
                format!(
                    "record {} has {} channels, header declares {}",
                    rec.id,
                    rec.series.len(),
                    ds.channels
                ),
            ));
        }
        let len = rec.series[0].len();
        if rec.series.iter().any(|c| c.len() != len) {
            return Err(fmt(lineno, format!("record {} has ragged channels", rec.id)));
        }
        let flat: Vec<f64> = rec.series.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((ds.channels, len), flat).map_err(|e| fmt(lineno, e.to_string()))?;
        let mut inst = TimeSeriesInstance {
            id: rec.id,
            domain: ds.domain.clone(),
            values,
            labels: rec.labels,
            context: rec.context,
        };
        ds.validate(&mut inst).map_err(|m| fmt(lineno, m))?;
        ds.instances.push(inst);
    }
    Ok(ds)
}

/// Per-channel z-normalization with population standard deviation.
/// Zero-variance channels map to zeros.
pub fn znormalize(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= f64::EPSILON * mean.abs().max(1.0) {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    out
}

/// Non-overlapping patches of `patch_len` steps. Each row is one patch with
/// the channel segments laid out one after another in channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f64>,
    pub patch_len: usize,
    pub channels: usize,
    pub pad_count: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    /// Original series length.
    pub fn series_len(&self) -> usize {
        self.num_patches() * self.patch_len - self.pad_count
    }

    /// Inverse of [`segment_patches`] (drops the padding).
    pub fn unpatch(&self) -> Array2<f64> {
        unpatch(self.patches.view(), self.channels, self.patch_len, self.series_len())
    }

    /// 1.0 for real samples, 0.0 for padding, same layout as `patches`.
    pub fn valid_mask(&self) -> Array2<f64> {
        let p = self.num_patches();
        let mut mask = Array2::ones(self.patches.raw_dim());
        if self.pad_count > 0 {
            for c in 0..self.channels {
                for j in self.patch_len - self.pad_count..self.patch_len {
                    mask[[p - 1, c * self.patch_len + j]] = 0.0;
                }
            }
        }
        mask
    }
}

pub fn segment_patches(x: ArrayView2<f64>, patch_len: usize) -> Result<PatchGrid> {
    if patch_len == 0 {
        return Err(Error::invalid("patch_len must be at least 1"));
    }
    let (h, l) = x.dim();
    if l == 0 {
        return Err(Error::invalid("cannot segment an empty series"));
    }
    let p = l.div_ceil(patch_len);
    let pad_count = p * patch_len - l;
    let mut patches = Array2::zeros((p, patch_len * h));
    for (pi, mut row) in patches.outer_iter_mut().enumerate() {
        for c in 0..h {
            for j in 0..patch_len {
                let t = pi * patch_len + j;
                if t < l {
                    row[c * patch_len + j] = x[[c, t]];
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        patch_len,
        channels: h,
        pad_count,
    })
}

/// Reassembles patch rows into a `(channels, len)` array, trimming padding.
pub fn unpatch(patches: ArrayView2<f64>, channels: usize, patch_len: usize, len: usize) -> Array2<f64> {
    let mut out = Array2::zeros((channels, len));
    for (pi, row) in patches.outer_iter().enumerate() {
        for c in 0..channels {
            for j in 0..patch_len {
                let t = pi * patch_len + j;
                if t < len {
                    out[[c, t]] = row[c * patch_len + j];
                }
            }
        }
    }
    out
}

/// One class of the synthetic generator: a sinusoid whose frequency
/// (cycles per step) and amplitude are drawn uniformly from the bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub label: String,
    pub freq_band: [f64; 2],
    pub amp_band: [f64; 2],
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domain: String,
    pub instruction: String,
    pub length: usize,
    pub channels: usize,
    pub noise: f64,
    pub classes: Vec<SynthClass>,
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("a synthetic spec needs at least two classes"));
        }
        if self.length == 0 || self.channels == 0 {
            return Err(Error::invalid("length and channels must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        for c in &self.classes {
            let [lo, hi] = c.freq_band;
            let [alo, ahi] = c.amp_band;
            if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
                return Err(Error::invalid(format!(
                    "class {:?}: frequency band must satisfy 0 < lo <= hi <= 0.5",
                    c.label
                )));
            }
            if !(alo > 0.0 && alo <= ahi) {
                return Err(Error::invalid(format!(
                    "class {:?}: amplitude band must satisfy 0 < lo <= hi",
                    c.label
                )));
            }
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.freq_band[0] <= b.freq_band[1] && b.freq_band[0] <= a.freq_band[1] {
                    return Err(Error::invalid(format!(
                        "frequency bands of {:?} and {:?} overlap",
                        a.label, b.label
                    )));
                }
            }
        }
        Ok(())
    }

    fn amplitude_range(&self) -> (f64, f64) {
        let lo = self.classes.iter().map(|c| c.amp_band[0]).fold(f64::INFINITY, f64::min);
        let hi = self
            .classes
            .iter()
            .map(|c| c.amp_band[1])
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

fn amplitude_bucket(amp: f64, lo: f64, hi: f64) -> &'static str {
    if hi - lo <= 0.0 {
        return "medium";
    }
    let u = (amp - lo) / (hi - lo);
    if u < 1.0 / 3.0 {
        "low"
    } else if u < 2.0 / 3.0 {
        "medium"
    } else {
        "high"
    }
}

/// Generates a labeled sinusoid corpus. Instances are shuffled; the result
/// is a pure function of `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.check()?;
    let lexicon: Vec<String> = spec.classes.iter().map(|c| c.label.clone()).collect();
    let mut ds = Dataset::new(&spec.domain, spec.channels, lexicon, &spec.instruction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (amp_lo, amp_hi) = spec.amplitude_range();

    let mut drafts = Vec::new();
    for class in &spec.classes {
        for _ in 0..class.count {
            let freq = sample_band(&mut rng, class.freq_band);
            let amp = sample_band(&mut rng, class.amp_band);
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let mut values = Array2::zeros((spec.channels, spec.length));
            for c in 0..spec.channels {
                let offset = c as f64 * 0.5;
                for t in 0..spec.length {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    values[[c, t]] =
                        amp * (std::f64::consts::TAU * freq * t as f64 + phase + offset).sin() + spec.noise * noise;
                }
            }
            let bucket = amplitude_bucket(amp, amp_lo, amp_hi);
            drafts.push((class.label.clone(), values, bucket));
        }
    }
    drafts.shuffle(&mut rng);

    for (i, (label, values, bucket)) in drafts.into_iter().enumerate() {
        ds.push(TimeSeriesInstance {
            id: format!("{}-{:05}", spec.domain, i),
            domain: spec.domain.clone(),
            values,
            labels: vec![label],
            context: format!("The recorded amplitude level is {bucket}."),
        })?;
    }
    Ok(ds)
}

fn sample_band(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Two-domain sinusoid corpus (200 instances per domain, length 128) used as
/// the tokenizer fixture.
pub fn sinusoid_corpus(seed: u64) -> Result<Vec<Dataset>> {
    let specs = [
        SynthSpec {
            domain: "sine-a".into(),
            instruction: "Identify the oscillation regime of the signal.".into(),
            length: 128,
            channels: 1,
            noise: 0.02,
            classes: vec![
                SynthClass {
                    label: "slow".into(),
                    freq_band: [0.035, 0.045],
                    amp_band: [0.5, 2.0],
                    count: 100,
                },
                SynthClass {
                    label: "fast".into(),
                    freq_band: [0.09, 0.11],
                    amp_band: [0.5, 2.0],
                    count: 100,
                },
            ],
        },
        SynthSpec {
            domain: "sine-b".into(),
            instruction: "Identify the rhythm of the signal.".into(),
            length: 128,
            channels: 1,
            noise: 0.02,
            classes: vec![
                SynthClass {
                    label: "steady".into(),
                    freq_band: [0.05, 0.06],
                    amp_band: [1.0, 3.0],
                    count: 100,
                },
                SynthClass {
                    label: "rapid".into(),
                    freq_band: [0.14, 0.16],
                    amp_band: [1.0, 3.0],
                    count: 100,
                },
            ],
        },
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| synth_generate(s, seed.wrapping_add(i as u64)))
        .collect()
}
