use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{gelu_backward, gelu_forward, prefixed, Linear, Module, Param};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::ones(1, dim),
            beta: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let mut xhat = x - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let mut y = &xhat * &self.gamma.value.row(0);
        y += &self.beta.value.row(0);
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward(&mut self, c: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gamma.grad += &(dy * &c.xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma.value.row(0);
        let sum_d = dxhat.sum_axis(Axis(1));
        let sum_dx = (&dxhat * &c.xhat).sum_axis(Axis(1));
        let mut dx = dxhat * d;
        dx -= &sum_d.view().insert_axis(Axis(1));
        dx -= &(&c.xhat * &sum_dx.view().insert_axis(Axis(1)));
        dx *= &(&c.inv_std / d).view().insert_axis(Axis(1));
        dx
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

/// Multi-head causal self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub(crate) struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    pub(crate) probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl Attention {
    pub fn new(d: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::with_std(d, d, std, rng),
            k: Linear::with_std(d, d, std, rng),
            v: Linear::with_std(d, d, std, rng),
            o: Linear::with_std(d, d, std, rng),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.output_dim() / self.heads
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let t = x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(x.view());
        let k = self.k.forward(x.view());
        let v = self.v.forward(x.view());
        let mut concat = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for i in 0..t {
                let mut row = scores.row_mut(i);
                row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|p| p / sum);
            }
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let y = self.o.forward(concat.view());
        (
            y,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub(crate) fn backward(&mut self, c: &AttnCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.o.backward(c.concat.view(), dy.view());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dconcat.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let dp = dout.dot(&c.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp - &row_dot.view().insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dx = self.q.backward(c.x.view(), dq.view());
        dx += &self.k.backward(c.x.view(), dk.view());
        dx += &self.v.backward(c.x.view(), dv.view());
        dx
    }
}

impl Module for Attention {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("q", self.q.params());
        out.extend(prefixed("k", self.k.params()));
        out.extend(prefixed("v", self.v.params()));
        out.extend(prefixed("o", self.o.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("q", self.q.params_mut());
        out.extend(prefixed("k", self.k.params_mut()));
        out.extend(prefixed("v", self.v.params_mut()));
        out.extend(prefixed("o", self.o.params_mut()));
        out
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    pub(crate) attn: AttnCache,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

impl Block {
    pub fn new(d: usize, heads: usize, ff: usize, std: f64, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, heads, std, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::with_std(d, ff, std, rng),
            fc2: Linear::with_std(ff, d, std, rng),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1);
        let x2 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x2);
        let u = self.fc1.forward(h2.view());
        let g = gelu_forward(&u);
        let y = &x2 + &self.fc2.forward(g.view());
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                u,
                g,
            },
        )
    }

    pub(crate) fn backward(&mut self, c: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dg = self.fc2.backward(c.g.view(), dy.view());
        let du = gelu_backward(&c.u, &dg);
        let dh2 = self.fc1.backward(c.h2.view(), du.view());
        let dx2 = dy + &self.ln2.backward(&c.ln2, &dh2);
        let dh1 = self.attn.backward(&c.attn, &dx2);
        &dx2 + &self.ln1.backward(&c.ln1, &dh1)
    }
}

impl Module for Block {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("ln1", self.ln1.params());
        out.extend(prefixed("attn", self.attn.params()));
        out.extend(prefixed("ln2", self.ln2.params()));
        out.extend(prefixed("fc1", self.fc1.params()));
        out.extend(prefixed("fc2", self.fc2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("ln1", self.ln1.params_mut());
        out.extend(prefixed("attn", self.attn.params_mut()));
        out.extend(prefixed("ln2", self.ln2.params_mut()));
        out.extend(prefixed("fc1", self.fc1.params_mut()));
        out.extend(prefixed("fc2", self.fc2.params_mut()));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

/// Feed-forward map from codebook vectors into the model's embedding space,
/// with GELU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub layers: Vec<Linear>,
}

pub(crate) struct ProjCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Projector {
    pub fn new(cfg: &ProjectorConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![cfg.input];
        dims.extend(&cfg.hidden);
        dims.push(cfg.output);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Projector { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("projector has layers").output_dim()
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ProjCache) {
        let mut cache = ProjCache {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            cache.inputs.push(h);
            h = if i < last { gelu_forward(&z) } else { z.clone() };
            cache.pre.push(z);
        }
        (h, cache)
    }

    pub(crate) fn backward(&mut self, c: &ProjCache, dy: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d = gelu_backward(&c.pre[i], &d);
            }
            d = self.layers[i].backward(c.inputs[i].view(), d.view());
        }
        d
    }
}

impl Module for Projector {
    fn params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params_mut()))
            .collect()
    }
}
