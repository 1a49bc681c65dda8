//! Temporal convolutional network: residual blocks of dilated causal 1-D
//! convolutions over sequences stored as rows of a matrix.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu_backward, gelu_forward, prefixed, Linear, Module, Param};

/// Lengths of the sequences packed row-wise into one activation matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Self {
        Segments { lens }
    }

    pub fn single(len: usize) -> Self {
        Segments { lens: vec![len] }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Segments { lens: vec![len; count] }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// `(start, len)` of every sequence.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().scan(0usize, |start, &len| {
            let s = *start;
            *start += len;
            Some((s, len))
        })
    }
}

/// `out[t] = x[t - shift]` inside each sequence, zero before the start.
fn delay(x: &Array2<f64>, shift: usize, segs: &Segments) -> Array2<f64> {
    if shift == 0 {
        return x.clone();
    }
    let mut out = Array2::zeros(x.raw_dim());
    for (start, len) in segs.spans() {
        if shift < len {
            out.slice_mut(s![start + shift..start + len, ..])
                .assign(&x.slice(s![start..start + len - shift, ..]));
        }
    }
    out
}

/// `out[t] = x[t + shift]` inside each sequence, zero past the end.
fn advance(x: &Array2<f64>, shift: usize, segs: &Segments) -> Array2<f64> {
    if shift == 0 {
        return x.clone();
    }
    let mut out = Array2::zeros(x.raw_dim());
    for (start, len) in segs.spans() {
        if shift < len {
            out.slice_mut(s![start..start + len - shift, ..])
                .assign(&x.slice(s![start + shift..start + len, ..]));
        }
    }
    out
}

/// Dilated causal convolution. Tap `j` (of `k`) reads the input
/// `(k - 1 - j) * dilation` steps in the past.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv {
    pub taps: Vec<Param>,
    pub bias: Param,
    pub dilation: usize,
}

impl CausalConv {
    pub fn new(input: usize, output: usize, kernel: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / (input * kernel) as f64).sqrt();
        CausalConv {
            taps: (0..kernel).map(|_| Param::normal(input, output, std, rng)).collect(),
            bias: Param::zeros(1, output),
            dilation,
        }
    }

    fn shift(&self, j: usize) -> usize {
        (self.taps.len() - 1 - j) * self.dilation
    }

    pub fn forward(&self, x: &Array2<f64>, segs: &Segments) -> Array2<f64> {
        let out = self.taps[0].value.ncols();
        let mut y = Array2::zeros((x.nrows(), out));
        for (j, w) in self.taps.iter().enumerate() {
            y += &delay(&x.dot(&w.value), self.shift(j), segs);
        }
        y += &self.bias.value.row(0);
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>, segs: &Segments) -> Array2<f64> {
        let mut dx = Array2::zeros(x.raw_dim());
        for j in 0..self.taps.len() {
            let g = advance(dy, self.shift(j), segs);
            let w = &mut self.taps[j];
            w.grad += &x.t().dot(&g);
            dx += &g.dot(&w.value.t());
        }
        self.bias.grad += &dy.sum_axis(Axis(0));
        dx
    }
}

impl Module for CausalConv {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v: Vec<(String, &Param)> = self
            .taps
            .iter()
            .enumerate()
            .map(|(j, p)| (format!("tap{j}"), p))
            .collect();
        v.push(("bias".into(), &self.bias));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v: Vec<(String, &mut Param)> = self
            .taps
            .iter_mut()
            .enumerate()
            .map(|(j, p)| (format!("tap{j}"), p))
            .collect();
        v.push(("bias".into(), &mut self.bias));
        v
    }
}

/// `y = skip(x) + conv2(gelu(conv1(x)))`, skip being a 1x1 projection
/// (initialized to the identity when widths agree).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    pub skip: Linear,
}

struct BlockCache {
    x: Array2<f64>,
    a: Array2<f64>,
    g: Array2<f64>,
}

impl ResidualBlock {
    pub fn new(input: usize, hidden: usize, output: usize, kernel: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let conv1 = CausalConv::new(input, hidden, kernel, dilation, rng);
        let conv2 = CausalConv::new(hidden, output, kernel, dilation, rng);
        let skip = if input == output {
            Linear {
                weight: Param::new(Array2::eye(input)),
                bias: Param::zeros(1, output),
            }
        } else {
            Linear::new(input, output, rng)
        };
        ResidualBlock { conv1, conv2, skip }
    }

    fn forward(&self, x: &Array2<f64>, segs: &Segments) -> (Array2<f64>, BlockCache) {
        let a = self.conv1.forward(x, segs);
        let g = gelu_forward(&a);
        let mut y = self.conv2.forward(&g, segs);
        y += &self.skip.forward(x.view());
        (y, BlockCache { x: x.clone(), a, g })
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>, segs: &Segments) -> Array2<f64> {
        let dg = self.conv2.backward(&cache.g, dy, segs);
        let da = gelu_backward(&cache.a, &dg);
        let mut dx = self.conv1.backward(&cache.x, &da, segs);
        dx += &self.skip.backward(cache.x.view(), dy.view());
        dx
    }
}

impl Module for ResidualBlock {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("conv1", self.conv1.params());
        v.extend(prefixed("conv2", self.conv2.params()));
        v.extend(prefixed("skip", self.skip.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed("conv1", self.conv1.params_mut());
        v.extend(prefixed("conv2", self.conv2.params_mut()));
        v.extend(prefixed("skip", self.skip.params_mut()));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            hidden: 64,
            kernel: 3,
            dilations: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tcn {
    pub blocks: Vec<ResidualBlock>,
    input: usize,
    output: usize,
}

pub struct TcnCache {
    blocks: Vec<BlockCache>,
    segs: Segments,
}

impl Tcn {
    pub fn new(input: usize, output: usize, cfg: &TcnConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.dilations.is_empty() || cfg.kernel == 0 || cfg.hidden == 0 {
            return Err(Error::invalid(
                "TCN needs at least one block, kernel >= 1 and hidden >= 1",
            ));
        }
        let n = cfg.dilations.len();
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let bin = if i == 0 { input } else { cfg.hidden };
                let bout = if i + 1 == n { output } else { cfg.hidden };
                ResidualBlock::new(bin, cfg.hidden, bout, cfg.kernel, d, rng)
            })
            .collect();
        Ok(Tcn { blocks, input, output })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    /// Runs packed sequences through the network and keeps activations for
    /// [`Tcn::backward`].
    pub fn forward(&self, x: &Array2<f64>, segs: &Segments) -> (Array2<f64>, TcnCache) {
        assert_eq!(x.nrows(), segs.total(), "rows must match segment lengths");
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, segs);
            caches.push(c);
            h = y;
        }
        (
            h,
            TcnCache {
                blocks: caches,
                segs: segs.clone(),
            },
        )
    }

    pub fn backward(&mut self, cache: &TcnCache, dy: &Array2<f64>) -> Array2<f64> {
        let mut g = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g, &cache.segs);
        }
        g
    }

    /// Single-sequence forward pass with dimension checks.
    pub fn forward_seq(&self, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        if u.nrows() == 0 {
            return Err(Error::invalid("TCN input sequence is empty"));
        }
        if u.ncols() != self.input {
            return Err(Error::shape(format!(
                "TCN expects {}-dimensional inputs, got {}",
                self.input,
                u.ncols()
            )));
        }
        Ok(self.forward(&u.to_owned(), &Segments::single(u.nrows())).0)
    }
}

impl Module for Tcn {
    fn params(&self) -> Vec<(String, &Param)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("block{i}"), b.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("block{i}"), b.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{central_difference, check_module, rel_err, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn small() -> (Tcn, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TcnConfig {
            hidden: 5,
            kernel: 3,
            dilations: vec![1, 2, 4],
        };
        (Tcn::new(3, 4, &cfg, &mut rng).unwrap(), rng)
    }

    #[test]
    fn default_architecture() {
        let cfg = TcnConfig::default();
        assert_eq!(
            (cfg.hidden, cfg.kernel, cfg.dilations.as_slice()),
            (64, 3, &[1, 2, 4][..])
        );
    }

    #[test]
    fn causal_under_future_perturbation() {
        let (tcn, mut rng) = small();
        let u = randn(12, 3, &mut rng);
        let y = tcn.forward_seq(u.view()).unwrap();
        for t in 0..11 {
            let mut v = u.clone();
            v.row_mut(t + 1).mapv_inplace(|x| x + 10.0);
            let z = tcn.forward_seq(v.view()).unwrap();
            assert_eq!(y.slice(s![..=t, ..]), z.slice(s![..=t, ..]));
            assert_ne!(y.row(t + 1), z.row(t + 1));
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let (mut tcn, mut rng) = small();
        for (_, p) in tcn.params_mut() {
            p.value.fill(0.0);
        }
        let y = tcn.forward_seq(randn(7, 3, &mut rng).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (tcn, mut rng) = small();
        assert!(tcn.forward_seq(randn(4, 2, &mut rng).view()).is_err());
        assert!(tcn.forward_seq(Array2::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn segments_do_not_leak() {
        let (tcn, mut rng) = small();
        let a = randn(5, 3, &mut rng);
        let b = randn(6, 3, &mut rng);
        let packed = ndarray::concatenate![Axis(0), a, b];
        let (y, _) = tcn.forward(&packed, &Segments::new(vec![5, 6]));
        assert_eq!(y.slice(s![..5, ..]), tcn.forward_seq(a.view()).unwrap());
        assert_eq!(y.slice(s![5.., ..]), tcn.forward_seq(b.view()).unwrap());
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let (mut tcn, mut rng) = small();
        let segs = Segments::new(vec![6, 4]);
        let x = randn(10, 3, &mut rng);
        let dir = randn(10, 3, &mut rng);
        let probe = randn(10, 4, &mut rng);
        // <probe, J dir> through the backward pass ...
        let (_, cache) = tcn.forward(&x, &segs);
        let dx = tcn.backward(&cache, &probe);
        let analytic = (&dx * &dir).sum();
        // ... and through differences of the forward pass.
        let numeric = central_difference(
            |eps| {
                let xe = &x + &(&dir * eps);
                (&tcn.forward(&xe, &segs).0 * &probe).sum()
            },
            0.0,
            DEFAULT_STEP,
        );
        assert!(rel_err(analytic, numeric) < 1e-6, "{analytic} vs {numeric}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (mut tcn, mut rng) = small();
        let segs = Segments::new(vec![6, 4]);
        let x = randn(10, 3, &mut rng);
        let probe = randn(10, 4, &mut rng);
        let loss = |m: &Tcn| {
            let y = m.forward(&x, &segs).0;
            (&y * &probe).sum() + 0.5 * y.mapv(|v| v * v).sum()
        };
        tcn.zero_grad();
        let (y, cache) = tcn.forward(&x, &segs);
        let dy = &probe + &y;
        tcn.backward(&cache, &dy);
        let report = check_module(&mut tcn, loss, |_| true, DEFAULT_STEP);
        assert!(report.passes(1e-6), "{report:?}");
        assert!(report.checked > 100);
    }
}
