//! Dense numerical kernels shared by the model, the attacks and the bound
//! verifiers.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; [`Matrix`] is a row-major dense
//! matrix. Everything is 64-bit so the bound checks have headroom.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// Variance guard used by [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

// ── Vector helpers ──────────────────────────────────────────────────────────

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in a.iter().enumerate().skip(1) {
        if x > a[best] {
            best = i;
        }
    }
    best
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(invalid_arg!("softmax of an empty vector"));
    }
    if !all_finite(z) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Natural-log softmax, stable for large logits.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias`, population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != gain.len() || x.len() != bias.len() {
        return Err(invalid_arg!(
            "layer_norm dimension mismatch: x={}, gain={}, bias={}",
            x.len(),
            gain.len(),
            bias.len()
        ));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect())
}

// ── Matrix ──────────────────────────────────────────────────────────────────

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid_arg!("matrix dimensions must be positive ({rows}x{cols})"));
        }
        if data.len() != rows * cols {
            return Err(invalid_arg!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid_arg!("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `M x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `M[r0..r1, :] x`, used for head-partitioned projections.
    pub fn matvec_rows(&self, r0: usize, r1: usize, x: &[f64]) -> Vec<f64> {
        (r0..r1).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Mᵀ x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            axpy(&mut out, *xr, self.row(r));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid_arg!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                axpy(dst, a, other.row(k));
            }
        }
        Ok(out)
    }

    /// Columns `c0..c1` as a new matrix.
    pub fn column_block(&self, c0: usize, c1: usize) -> Matrix {
        let w = c1 - c0;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[c0..c1]);
        }
        Matrix { rows: self.rows, cols: w, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// `sqrt(Σ m²)`
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Stops once successive estimates differ by less than `tol` (relative to
/// `max(1, σ)`) or after `iters` rounds. The zero matrix yields 0.
pub fn spectral_norm(m: &Matrix, iters: usize, tol: f64) -> f64 {
    let mut rng = SeededRng::new(0x5eed_5eed);
    let mut v: Vec<f64> = (0..m.cols).map(|_| rng.normal()).collect();
    let n0 = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mv = m.matvec(&v);
        let est = norm2(&mv);
        let w = m.matvec_t(&mv);
        let nw = norm2(&w);
        if nw == 0.0 {
            return est;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        let done = (est - sigma).abs() < tol * sigma.max(1.0);
        sigma = est;
        if done {
            break;
        }
    }
    // One more Rayleigh evaluation on the final iterate.
    norm2(&m.matvec(&v)).max(sigma)
}

/// Exact sine/cosine for multiples of 90°, libm otherwise.
fn sin_cos_degrees(theta: f64) -> (f64, f64) {
    let r = theta.rem_euclid(360.0);
    match r {
        x if x == 0.0 => (0.0, 1.0),
        x if x == 90.0 => (1.0, 0.0),
        x if x == 180.0 => (0.0, -1.0),
        x if x == 270.0 => (-1.0, 0.0),
        _ => r.to_radians().sin_cos(),
    }
}

/// Block-diagonal rotation by `theta_deg` on consecutive coordinate pairs
/// `(0,1), (2,3), …`. Requires even `d`.
pub fn givens_rotation(theta_deg: f64, d: usize) -> Result<Matrix> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(invalid_arg!("givens rotation needs a positive even dimension, got {d}"));
    }
    if !theta_deg.is_finite() {
        return Err(Error::NonFinite("rotation angle".into()));
    }
    let (s, c) = sin_cos_degrees(theta_deg);
    let mut m = Matrix::zeros(d, d);
    for p in (0..d).step_by(2) {
        m.set(p, p, c);
        m.set(p, p + 1, -s);
        m.set(p + 1, p, s);
        m.set(p + 1, p + 1, c);
    }
    Ok(m)
}

/// Rotation by `theta_deg` inside one random 2-plane (identity on its
/// orthogonal complement).
pub fn random_plane_rotation(theta_deg: f64, d: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if d < 2 {
        return Err(invalid_arg!("plane rotation needs d >= 2, got {d}"));
    }
    let u = loop {
        let g = gaussian_sample(rng, 1.0, d)?;
        let n = norm2(&g);
        if n > 1e-8 {
            break scale(&g, 1.0 / n);
        }
    };
    let w = loop {
        let mut g = gaussian_sample(rng, 1.0, d)?;
        let proj = dot(&g, &u);
        axpy(&mut g, -proj, &u);
        let n = norm2(&g);
        if n > 1e-8 {
            break scale(&g, 1.0 / n);
        }
    };
    let (s, c) = sin_cos_degrees(theta_deg);
    let mut m = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            let v = m.get(i, j)
                + (c - 1.0) * (u[i] * u[j] + w[i] * w[j])
                + s * (w[i] * u[j] - u[i] * w[j]);
            m.set(i, j, v);
        }
    }
    Ok(m)
}

// ── Randomness ──────────────────────────────────────────────────────────────

/// Deterministic counter-based generator (ChaCha8).
///
/// [`SeededRng::stream`] addresses an independent sub-stream by a path of
/// integers (trial, step, layer, …) so concurrent runs never share state and
/// every draw is reproducible from its coordinates alone.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream keyed by `seed` and the coordinates in `path`.
    pub fn stream(seed: u64, path: &[u64]) -> Self {
        let mut h = 0x6b76_6c61_625f_7273_u64;
        for p in path {
            h = splitmix64(h ^ splitmix64(*p));
        }
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(h);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// True with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            return true;
        }
        if p <= 0.0 {
            return false;
        }
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// `d` independent draws from N(0, σ²).
pub fn gaussian_sample(rng: &mut SeededRng, sigma: f64, d: usize) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid_arg!("sigma must be finite and non-negative, got {sigma}"));
    }
    Ok((0..d).map(|_| sigma * rng.normal()).collect())
}
