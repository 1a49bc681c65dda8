//! Line-plot rendering of series and caption providers for the rendered images.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use image::{ImageFormat, Rgb, RgbImage};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_FOCUS_PROMPT: &str = "Describe the structure of this time series plot: \
the global trend, the local shapes, and the fine-grained fluctuations.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Overlaid,
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub width: u32,
    pub channel_height: u32,
    pub stroke: u32,
    pub layout: Layout,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            width: 896,
            channel_height: 256,
            stroke: 2,
            layout: Layout::Stacked,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.channel_height < 64 {
            return Err(Error::invalid("render width and height must be at least 64 pixels"));
        }
        if self.stroke == 0 {
            return Err(Error::invalid("stroke width must be positive"));
        }
        Ok(())
    }
}

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
    Rgb([23, 190, 207]),
];
const MARGIN: f64 = 8.0;

/// Draws lines into horizontal panels of a white image.
pub struct Canvas {
    pub image: RgbImage,
    stroke: u32,
}

impl Canvas {
    pub fn new(width: u32, height: u32, stroke: u32) -> Self {
        Canvas {
            image: RgbImage::from_pixel(width, height, BACKGROUND),
            stroke,
        }
    }

    fn dot(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        let s = self.stroke as i64;
        let lo = -(s - 1) / 2;
        for dy in lo..lo + s {
            for dx in lo..lo + s {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < self.image.width() && (py as u32) < self.image.height() {
                    self.image.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.dot(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Plots `values` across the full width of the panel starting at row
    /// `top`, mapping `[lo, hi]` to the panel's vertical extent. A degenerate
    /// range puts every point on the panel's middle row.
    pub fn trace(&mut self, values: &[f64], lo: f64, hi: f64, top: u32, height: u32, color: Rgb<u8>) {
        let n = values.len();
        let w = self.image.width() as f64;
        let usable = height as f64 - 2.0 * MARGIN - 1.0;
        let row = |v: f64| {
            let s = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            (top as f64 + MARGIN + (1.0 - s) * usable).round() as i64
        };
        let col = |i: usize| ((i as f64) * (w - 1.0) / (n - 1).max(1) as f64).round() as i64;
        let mut prev = (col(0), row(values[0]));
        for (i, &v) in values.iter().enumerate().skip(1) {
            let next = (col(i), row(v));
            self.line(prev, next, color);
            prev = next;
        }
        if n == 1 {
            self.dot(prev.0, prev.1, color);
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(&self.image)
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Renders an `H x L` series as a PNG line plot. Each channel is min-max
/// scaled on its own; stacked layout gives each channel a panel.
pub fn render_series_image(x: ArrayView2<f64>, spec: &RenderSpec) -> Result<Vec<u8>> {
    encode_png(&render_series(x, spec)?)
}

pub fn render_series(x: ArrayView2<f64>, spec: &RenderSpec) -> Result<RgbImage> {
    spec.validate()?;
    if x.ncols() < 2 {
        return Err(Error::invalid("rendering needs at least two time steps"));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("rendering needs at least one channel"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot render non-finite values"));
    }
    let h = spec.channel_height;
    let panels = match spec.layout {
        Layout::Stacked => x.nrows() as u32,
        Layout::Overlaid => 1,
    };
    let mut canvas = Canvas::new(spec.width, h * panels, spec.stroke);
    for (c, row) in x.outer_iter().enumerate() {
        let v = row.to_vec();
        let (lo, hi) = min_max(&v);
        let top = match spec.layout {
            Layout::Stacked => c as u32 * h,
            Layout::Overlaid => 0,
        };
        canvas.trace(&v, lo, hi, top, h, PALETTE[c % PALETTE.len()]);
    }
    Ok(canvas.image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRequest {
    pub image: Vec<u8>,
    pub focus_prompt: String,
    pub domain: String,
}

impl CaptionRequest {
    pub fn new(image: Vec<u8>, focus_prompt: impl Into<String>, domain: impl Into<String>) -> Result<Self> {
        if image.is_empty() {
            return Err(Error::invalid("caption request image is empty"));
        }
        Ok(CaptionRequest {
            image,
            focus_prompt: focus_prompt.into(),
            domain: domain.into(),
        })
    }

    /// Hex SHA-256 over the length-prefixed image, focus prompt and domain,
    /// so distinct field splits never collide.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.image[..], self.focus_prompt.as_bytes(), self.domain.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("caption transport failed after {attempts} attempt(s): {msg}")]
    Transport { attempts: u32, msg: String },
    #[error("caption provider rejected the request (status {status}): {msg}")]
    Rejected { status: u16, msg: String },
    #[error("caption provider misconfigured: {0}")]
    Config(String),
}

impl CaptionError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CaptionError::Transport { .. })
    }
}

pub trait CaptionProvider: Send + Sync {
    fn caption(&self, req: &CaptionRequest) -> std::result::Result<String, CaptionError>;
}

/// Offline provider whose caption depends only on the request hash.
#[derive(Debug, Default)]
pub struct MockProvider {
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn caption_for_hash(hash: &str) -> String {
        const TRENDS: [&str; 4] = ["an upward trend", "a downward trend", "a flat trend", "a cyclic trend"];
        let b = hash.as_bytes();
        let trend = TRENDS[(b[0] as usize) % TRENDS.len()];
        let peaks = 2 + (b[1] as usize) % 5;
        format!("The series shows {trend} with {peaks} prominent peaks.")
    }
}

impl CaptionProvider for MockProvider {
    fn caption(&self, req: &CaptionRequest) -> std::result::Result<String, CaptionError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Self::caption_for_hash(&req.content_hash()))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: String,
    pub model: String,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            model: model.into(),
            max_attempts: 3,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads `VLM_ENDPOINT`, `VLM_API_KEY` and `VLM_MODEL`.
    pub fn from_env() -> std::result::Result<Self, CaptionError> {
        let var = |name: &str| std::env::var(name).map_err(|_| CaptionError::Config(format!("{name} is not set")));
        Ok(Self::new(var("VLM_ENDPOINT")?, var("VLM_API_KEY")?, var("VLM_MODEL")?))
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint. The endpoint
/// is the full URL of the completions route.
pub struct RemoteProvider {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteProvider { config, agent }
    }

    pub fn request_body(&self, req: &CaptionRequest) -> serde_json::Value {
        let data = base64::engine::general_purpose::STANDARD.encode(&req.image);
        serde_json::json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": format!("Domain: {}. {}", req.domain, req.focus_prompt)},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{data}")}},
                ],
            }],
            "temperature": 0,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, AttemptError> {
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::StatusCode(s) if s == 429 || s >= 500 => AttemptError::Retry(format!("status {s}")),
                ureq::Error::StatusCode(s) => AttemptError::Fatal(s, "request rejected".into()),
                other => AttemptError::Retry(other.to_string()),
            })?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| AttemptError::Retry(format!("unreadable response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| AttemptError::Fatal(200, "response has no message content".into()))
    }
}

enum AttemptError {
    Retry(String),
    Fatal(u16, String),
}

impl CaptionProvider for RemoteProvider {
    fn caption(&self, req: &CaptionRequest) -> std::result::Result<String, CaptionError> {
        let body = self.request_body(req);
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(i - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(AttemptError::Fatal(status, msg)) => return Err(CaptionError::Rejected { status, msg }),
                Err(AttemptError::Retry(msg)) => {
                    log::warn!("caption attempt {} of {attempts} failed: {msg}", i + 1);
                    last = msg;
                }
            }
        }
        Err(CaptionError::Transport { attempts, msg: last })
    }
}

/// Content-addressed directory of caption text files, one per request hash.
pub struct CaptionCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl CaptionCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CaptionCache {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path(key)).ok()
    }

    /// Writes through a temporary file and rename so readers never observe
    /// a partial entry.
    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.path(key))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }
}

/// Returns the cached caption for `req` or asks `provider` and stores the
/// answer. A failed cache write only logs a warning.
pub fn caption_image(
    provider: &dyn CaptionProvider,
    req: &CaptionRequest,
    cache: Option<&CaptionCache>,
) -> std::result::Result<String, CaptionError> {
    let Some(cache) = cache else {
        return provider.caption(req);
    };
    let key = req.content_hash();
    let lock = cache.key_lock(&key);
    let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(text) = cache.get(&key) {
        return Ok(text);
    }
    let text = provider.caption(req)?;
    if let Err(e) = cache.put(&key, &text) {
        log::warn!("could not write caption cache entry {key}: {e}");
    }
    Ok(text)
}

/// Captions every request with at most `concurrency` calls in flight.
/// Results keep the order of `reqs`.
pub fn caption_many(
    provider: &dyn CaptionProvider,
    reqs: &[CaptionRequest],
    cache: Option<&CaptionCache>,
    concurrency: usize,
) -> Vec<std::result::Result<String, CaptionError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<std::result::Result<String, CaptionError>>>> =
        reqs.iter().map(|_| Mutex::new(None)).collect();
    let workers = concurrency.max(1).min(reqs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= reqs.len() {
                    break;
                }
                let r = caption_image(provider, &reqs[i], cache);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}
