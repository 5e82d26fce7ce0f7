//! Dense f64 matrices plus the handful of forward/backward kernels the text
//! encoder needs. Every backward here is derived by hand for exactly one
//! forward; there is no tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("cannot normalize a vector of norm {0:e}")]
    DegenerateNorm(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dims");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    /// Column sums, i.e. the gradient of a broadcast row bias.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v · m` for a row vector `v` (len = m.rows).
pub fn vec_matmul(v: &[f64], m: &Matrix) -> Vec<f64> {
    assert_eq!(v.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
    out
}

/// `m · v` for a column vector `v` (len = m.cols).
pub fn matmul_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), m.cols());
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

/// Cosine similarity; zero when either side has no length.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom <= MIN_NORM {
        0.0
    } else {
        dot(a, b) / denom
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, TensorError> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(TensorError::DegenerateNorm(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of [`l2_normalize`]: `(I/‖v‖ − v vᵀ/‖v‖³)·grad_out`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Result<Vec<f64>, TensorError> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(TensorError::DegenerateNorm(n));
    }
    let proj = dot(v, grad_out) / (n * n * n);
    Ok(v
        .iter()
        .zip(grad_out)
        .map(|(x, g)| g / n - x * proj)
        .collect())
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log(Σ exp(logits))`, stable.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// What layer-norm backward needs from its forward.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm(v: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    layer_norm_cached(v, gain, shift, eps).0
}

pub fn layer_norm_cached(
    v: &[f64],
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = v.iter().map(|x| (x - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain.iter().zip(shift))
        .map(|(x, (g, b))| x * g + b)
        .collect();
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `(d_input, d_gain, d_shift)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = grad_out.len() as f64;
    let d_shift = grad_out.to_vec();
    let d_gain: Vec<f64> = grad_out
        .iter()
        .zip(&cache.normalized)
        .map(|(g, x)| g * x)
        .collect();
    let dxhat: Vec<f64> = grad_out.iter().zip(gain).map(|(g, w)| g * w).collect();
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, x)| d * x)
        .sum::<f64>()
        / n;
    let d_input = dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, x)| cache.inv_std * (d - mean_dxhat - x * mean_dxhat_xhat))
        .collect();
    (d_input, d_gain, d_shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    None,
    /// Position `i` attends to positions `0..=i`.
    Causal,
}

/// Single-head `softmax(QKᵀ/√d + mask)·V`. Returns the output together with
/// the attention probabilities (needed by the backward pass).
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: AttentionMask,
) -> (Matrix, Matrix) {
    assert_eq!(q.cols(), k.cols());
    assert_eq!(k.rows(), v.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut probs = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let limit = match mask {
            AttentionMask::None => k.rows(),
            AttentionMask::Causal => (i + 1).min(k.rows()),
        };
        let scores: Vec<f64> = (0..limit)
            .map(|j| dot(q.row(i), k.row(j)) * scale)
            .collect();
        let p = softmax_row(&scores);
        probs.row_mut(i)[..limit].copy_from_slice(&p);
    }
    let out = probs.matmul(v);
    (out, probs)
}

/// Backward of [`scaled_dot_attention`]; returns `(dQ, dK, dV)`.
pub fn scaled_dot_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    grad_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = probs.t_matmul(grad_out);
    let dp = grad_out.matmul_t(v);
    // softmax backward per row; masked entries have p = 0 and drop out.
    let mut ds = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = dp.row(i);
        let inner = dot(p, g);
        for (j, s) in ds.row_mut(i).iter_mut().enumerate() {
            *s = p[j] * (g[j] - inner) * scale;
        }
    }
    let dq = ds.matmul(k);
    let dk = ds.t_matmul(q);
    (dq, dk, dv)
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, random_vec(rng, r * c)).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(TensorError::DegenerateNorm(_))
        ));
        assert!(l2_normalize_backward(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn normalize_backward_examples() {
        assert_eq!(
            l2_normalize_backward(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            l2_normalize_backward(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax_row(&[100.0, 0.0]);
        assert_eq!(p[0], 1.0);
        // e^-100 / (1 + e^-100) in f64
        assert!((p[1] - 3.720075976020836e-44).abs() < 1e-56);
    }

    #[test]
    fn layer_norm_examples() {
        let one = [1.0; 3];
        let zero = [0.0; 3];
        assert_eq!(layer_norm(&[1.0, 1.0, 1.0], &one, &zero, LAYER_NORM_EPS), vec![0.0; 3]);
        let out = layer_norm(&[-1.0, 1.0], &[1.0; 2], &[0.0; 2], 1e-300);
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_matrix(&mut rng, 1, 4);
        let k = random_matrix(&mut rng, 1, 4);
        let v = random_matrix(&mut rng, 1, 4);
        let (out, _) = scaled_dot_attention(&q, &k, &v, AttentionMask::None);
        assert_eq!(out.row(0), v.row(0));

        let q = random_matrix(&mut rng, 3, 4);
        let krow = random_vec(&mut rng, 4);
        let k = Matrix::from_rows(&[krow.clone(), krow.clone(), krow]).unwrap();
        let v = random_matrix(&mut rng, 3, 4);
        let (out, _) = scaled_dot_attention(&q, &k, &v, AttentionMask::None);
        let mean: Vec<f64> = (0..4)
            .map(|c| (v.get(0, c) + v.get(1, c) + v.get(2, c)) / 3.0)
            .collect();
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.get(i, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.5, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    const TRIALS: u64 = 100;
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-5;

    #[test]
    fn normalize_backward_matches_finite_differences() {
        for seed in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..8);
            let v = random_vec(&mut rng, n);
            let g = random_vec(&mut rng, n);
            let analytic = l2_normalize_backward(&v, &g).unwrap();
            let numeric = finite_diff_grad(|x| dot(&l2_normalize(x).unwrap(), &g), &v, STEP);
            assert!(relative_error(&analytic, &numeric) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        for seed in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Two-element inputs saturate to ±1 and leave a near-zero gradient.
            let n = rng.random_range(3..10);
            let v = random_vec(&mut rng, n);
            let gain = random_vec(&mut rng, n);
            let shift = random_vec(&mut rng, n);
            let g = random_vec(&mut rng, n);
            let (_, cache) = layer_norm_cached(&v, &gain, &shift, LAYER_NORM_EPS);
            let (dx, dgain, dshift) = layer_norm_backward(&cache, &gain, &g);
            let num_x = finite_diff_grad(
                |x| dot(&layer_norm(x, &gain, &shift, LAYER_NORM_EPS), &g),
                &v,
                STEP,
            );
            let num_gain = finite_diff_grad(
                |w| dot(&layer_norm(&v, w, &shift, LAYER_NORM_EPS), &g),
                &gain,
                STEP,
            );
            let num_shift = finite_diff_grad(
                |b| dot(&layer_norm(&v, &gain, b, LAYER_NORM_EPS), &g),
                &shift,
                STEP,
            );
            let err = relative_error(&dx, &num_x);
            assert!(err < 1e-6, "seed {seed}: {err:e} n={n} v={v:?}");
            assert!(relative_error(&dgain, &num_gain) < TOL);
            assert!(relative_error(&dshift, &num_shift) < TOL);
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        for seed in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = rng.random_range(1..6);
            let d = rng.random_range(1..5);
            let mask = if seed % 2 == 0 {
                AttentionMask::Causal
            } else {
                AttentionMask::None
            };
            let q = random_matrix(&mut rng, l, d);
            let k = random_matrix(&mut rng, l, d);
            let v = random_matrix(&mut rng, l, d);
            let g = random_matrix(&mut rng, l, d);
            let (_, probs) = scaled_dot_attention(&q, &k, &v, mask);
            let (dq, dk, dv) = scaled_dot_attention_backward(&q, &k, &v, &probs, &g);
            let objective = |qq: &Matrix, kk: &Matrix, vv: &Matrix| {
                dot(scaled_dot_attention(qq, kk, vv, mask).0.data(), g.data())
            };
            let num_q = finite_diff_grad(
                |x| objective(&Matrix::from_vec(l, d, x.to_vec()).unwrap(), &k, &v),
                q.data(),
                STEP,
            );
            let num_k = finite_diff_grad(
                |x| objective(&q, &Matrix::from_vec(l, d, x.to_vec()).unwrap(), &v),
                k.data(),
                STEP,
            );
            let num_v = finite_diff_grad(
                |x| objective(&q, &k, &Matrix::from_vec(l, d, x.to_vec()).unwrap()),
                v.data(),
                STEP,
            );
            assert!(relative_error(dq.data(), &num_q) < TOL, "seed {seed} dq");
            // A single key makes dK identically zero; both sides agree on that.
            assert!(relative_error(dk.data(), &num_k) < TOL, "seed {seed} dk");
            assert!(relative_error(dv.data(), &num_v) < TOL, "seed {seed} dv");
        }
    }

    #[test]
    fn operations_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_matrix(&mut rng, 4, 3);
        let a = scaled_dot_attention(&q, &q, &q, AttentionMask::Causal);
        let b = scaled_dot_attention(&q, &q, &q, AttentionMask::Causal);
        assert_eq!(a.0, b.0);
        assert_eq!(softmax_row(q.data()), softmax_row(q.data()));
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax_row(&logits);
            let total: f64 = p.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-9);
            proptest::prop_assert!(p.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax_row(&shifted);
            for (a, b) in p.iter().zip(&q) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_gives_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
            proptest::prop_assume!(norm(&v) > MIN_NORM);
            let u = l2_normalize(&v).unwrap();
            proptest::prop_assert!((norm(&u) - 1.0).abs() < 1e-9);
        }
    }
}
