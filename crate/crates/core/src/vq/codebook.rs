use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Per-domain codebook with exponential-moving-average statistics.
///
/// Invariant after every [`Codebook::ema_update`]:
/// `vectors[k] = ema_sums[k] / max(ema_counts[k], epsilon)`. Fresh or reset
/// codes keep their given vectors exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Array2<f64>,
    pub ema_counts: Array1<f64>,
    pub ema_sums: Array2<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

impl Codebook {
    /// Starts with zero counts and sums of `epsilon * vector`, so the
    /// invariant already holds (up to rounding) and a code that never
    /// receives an assignment immediately counts as dead.
    pub fn new(vectors: Array2<f64>, decay: f64, epsilon: f64) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(Error::invalid("a codebook needs at least two codes"));
        }
        if vectors.ncols() == 0 {
            return Err(Error::invalid("codebook vectors must be non-empty"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook vectors must be finite"));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid("decay must lie in [0, 1]"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(Codebook {
            ema_counts: Array1::zeros(vectors.nrows()),
            ema_sums: &vectors * epsilon,
            vectors,
            decay,
            epsilon,
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Index of the nearest code under squared Euclidean distance; ties go to
    /// the lowest index. Uses partial-distance elimination: a candidate is
    /// abandoned as soon as its running sum reaches the best distance.
    pub fn nearest(&self, z: ArrayView1<f64>) -> usize {
        let mut best = f64::INFINITY;
        let mut best_k = 0;
        'codes: for (k, e) in self.vectors.outer_iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in z.iter().zip(e.iter()) {
                let diff = a - b;
                d += diff * diff;
                if d >= best {
                    continue 'codes;
                }
            }
            best = d;
            best_k = k;
        }
        best_k
    }

    pub fn quantize(&self, z: ArrayView1<f64>) -> Result<(usize, Array1<f64>)> {
        if z.len() != self.dim() {
            return Err(Error::shape(format!(
                "vector has dimension {}, codebook has {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cannot quantize a non-finite vector"));
        }
        let k = self.nearest(z);
        Ok((k, self.vectors.row(k).to_owned()))
    }

    /// Codes for each row of `z` (already validated).
    pub fn assign(&self, z: ArrayView2<f64>) -> Vec<usize> {
        z.outer_iter().map(|row| self.nearest(row)).collect()
    }

    /// `N_k <- g N_k + (1-g) n_k`, `m_k <- g m_k + (1-g) sum z`, then
    /// `e_k <- m_k / max(N_k, eps)`. Codes without assignments only decay.
    pub fn ema_update<'a>(
        &mut self,
        assignments: impl IntoIterator<Item = (usize, ArrayView1<'a, f64>)>,
    ) -> Result<()> {
        let k_total = self.size();
        let mut counts = Array1::<f64>::zeros(k_total);
        let mut sums = Array2::<f64>::zeros(self.vectors.raw_dim());
        for (k, z) in assignments {
            if k >= k_total {
                return Err(Error::invalid(format!("code {k} out of range for K={k_total}")));
            }
            if z.len() != self.dim() {
                return Err(Error::shape("assigned vector has the wrong dimension"));
            }
            counts[k] += 1.0;
            let mut row = sums.row_mut(k);
            row += &z;
        }
        let g = self.decay;
        for k in 0..k_total {
            self.ema_counts[k] = g * self.ema_counts[k] + (1.0 - g) * counts[k];
            let denom = self.ema_counts[k].max(self.epsilon);
            for j in 0..self.dim() {
                let m = g * self.ema_sums[[k, j]] + (1.0 - g) * sums[[k, j]];
                self.ema_sums[[k, j]] = m;
                self.vectors[[k, j]] = m / denom;
            }
        }
        Ok(())
    }

    /// Replaces code `k` with `z` and clears its statistics.
    pub fn reset_code(&mut self, k: usize, z: ArrayView1<f64>) {
        self.vectors.row_mut(k).assign(&z);
        self.ema_sums.row_mut(k).assign(&(&z * self.epsilon));
        self.ema_counts[k] = 0.0;
    }
}

/// Free-function form of [`Codebook::quantize`].
pub fn quantize(z: ArrayView1<f64>, codebook: &Codebook) -> Result<(usize, Array1<f64>)> {
    codebook.quantize(z)
}

/// Straight-through estimator. The forward value is `z_q`.
pub fn straight_through(z_e: ArrayView1<f64>, z_q: ArrayView1<f64>) -> Result<Array1<f64>> {
    if z_e.len() != z_q.len() {
        return Err(Error::shape("z_e and z_q differ in length"));
    }
    Ok(z_q.to_owned())
}

/// Backward rule of the straight-through estimator: the output gradient is
/// routed to `z_e` unchanged, `z_q` receives nothing.
pub fn straight_through_backward(grad_out: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    (grad_out.to_owned(), Array1::zeros(grad_out.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn book(v: Array2<f64>) -> Codebook {
        Codebook::new(v, 0.99, 1e-5).unwrap()
    }

    fn scan(z: &[f64], cb: &Array2<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..cb.nrows() {
            let d: f64 = (0..z.len()).map(|j| (z[j] - cb[[k, j]]).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    #[test]
    fn quantize_examples() {
        let cb = book(array![[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(cb.quantize(array![0.1, 0.2].view()).unwrap().0, 0);
        assert_eq!(cb.quantize(array![0.5, 0.5].view()).unwrap().0, 0);
        let (k, q) = cb.quantize(array![0.9, 0.7].view()).unwrap();
        assert_eq!((k, q), (1, array![1.0, 1.0]));
        assert!(cb.quantize(array![f64::NAN, 0.0].view()).is_err());
        assert!(cb.quantize(array![0.0].view()).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let v = Array2::from_shape_simple_fn((16, 4), || rng.random_range(-1.0..1.0));
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let cb = book(v);
            assert_eq!(cb.nearest(ndarray::aview1(&z)), scan(&z, &cb.vectors));
        }
    }

    #[test]
    fn ema_examples() {
        let mut cb = book(array![[3.0, 3.0], [1.0, -1.0]]);
        cb.decay = 1.0;
        let before = cb.clone();
        cb.ema_update([(0, array![7.0, 7.0].view())]).unwrap();
        assert_eq!(cb, before);

        let mut cb = book(array![[5.0, 5.0], [9.0, 9.0]]);
        cb.decay = 0.0;
        let (a, b) = (array![0.0, 2.0], array![2.0, 0.0]);
        cb.ema_update([(0, a.view()), (0, b.view())]).unwrap();
        assert_eq!(cb.vectors.row(0), array![1.0, 1.0]);
        assert_eq!(cb.ema_counts[0], 2.0);

        assert!(cb.ema_update([(2, a.view())]).is_err());
    }

    #[test]
    fn ema_invariant_holds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cb = book(Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0)));
        for _ in 0..50 {
            let zs: Vec<(usize, Array1<f64>)> = (0..5)
                .map(|_| {
                    (
                        rng.random_range(0..4),
                        Array1::from_shape_simple_fn(3, || rng.random_range(-2.0..2.0)),
                    )
                })
                .collect();
            cb.ema_update(zs.iter().map(|(k, z)| (*k, z.view()))).unwrap();
            for k in 0..4 {
                for j in 0..3 {
                    assert_eq!(
                        cb.vectors[[k, j]],
                        cb.ema_sums[[k, j]] / cb.ema_counts[k].max(cb.epsilon)
                    );
                }
            }
        }
    }

    #[test]
    fn straight_through_contract() {
        let out = straight_through(array![1.0, 2.0].view(), array![0.0, 3.0].view()).unwrap();
        assert_eq!(out, array![0.0, 3.0]);
        let g = array![0.25, -4.0];
        let (to_ze, to_zq) = straight_through_backward(g.view());
        assert_eq!(to_ze, g);
        assert_eq!(to_zq, array![0.0, 0.0]);
    }
}
