//! Dense vector/matrix primitives, cosine distance, softmax/cross-entropy
//! and the seeded random source shared by all modules.
//!
//! Everything here is a pure function of its inputs. Reductions run in a
//! fixed order so results do not depend on caller-side parallelism.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to probabilities before taking the log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the total of a [`MassDistribution`].
pub const MASS_TOL: f64 = 1e-9;

/// Dot product with four independent accumulators, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let d0 = x[0] - y[0];
        let d1 = x[1] - y[1];
        let d2 = x[2] - y[2];
        let d3 = x[3] - y[3];
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Row-major dense matrix of doubles. Rows are the natural unit: a set of
/// feature vectors is a matrix with one vector per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(m: RawMatrix) -> Result<Self> {
        Matrix::from_vec(m.rows, m.cols, m.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MassDistribution(Vec<f64>);

impl MassDistribution {
    /// Validates weights that are already normalised.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::DegenerateMarginal("empty distribution"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DegenerateMarginal("negative or non-finite weight"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::DegenerateMarginal("weights do not sum to one"));
        }
        Ok(Self(weights))
    }

    /// Normalises arbitrary nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DegenerateMarginal("negative or non-finite weight"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateMarginal("zero total mass"));
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::DegenerateMarginal("empty distribution"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MassDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MassDistribution> for Vec<f64> {
    fn from(m: MassDistribution) -> Self {
        m.0
    }
}

impl std::ops::Index<usize> for MassDistribution {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `1 - cos(u, v)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = norm(u);
    if nu == 0.0 {
        return Err(Error::ZeroNormVector { index: 0 });
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Err(Error::ZeroNormVector { index: 1 });
    }
    Ok((1.0 - dot(u, v) / (nu * nv)).clamp(0.0, 2.0))
}

/// Cosine ground cost between every real feature (row of `reals`) and every
/// centroid (row of `centroids`). A zero-norm vector is reported by its row
/// index, counting reals first and centroids after them.
pub fn cost_matrix(reals: &Matrix, centroids: &Matrix) -> Result<Matrix> {
    if reals.cols() != centroids.cols() {
        return Err(Error::DimensionMismatch {
            expected: reals.cols(),
            found: centroids.cols(),
        });
    }
    let real_norms = row_norms(reals, 0)?;
    let cent_norms = row_norms(centroids, reals.rows())?;
    let mut cost = Matrix::zeros(reals.rows(), centroids.rows());
    for (n, x) in reals.iter_rows().enumerate() {
        for (k, e) in centroids.iter_rows().enumerate() {
            let c = 1.0 - dot(x, e) / (real_norms[n] * cent_norms[k]);
            cost.set(n, k, c.clamp(0.0, 2.0));
        }
    }
    Ok(cost)
}

fn row_norms(m: &Matrix, offset: usize) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNormVector { index: offset + i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Max-shifted softmax. Writes into `out`, which must match `logits` in length.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Result<MassDistribution> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax of no logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    // Normalised by construction; skip the tolerance check.
    Ok(MassDistribution(out))
}

/// `-ln(p[label] + PROB_FLOOR)`.
pub fn cross_entropy(probs: &MassDistribution, label: usize) -> Result<f64> {
    cross_entropy_raw(probs.weights(), label)
}

pub(crate) fn cross_entropy_raw(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok((-(p + PROB_FLOOR).ln()).max(0.0))
}

/// Identity of a random stream plus its position; enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, kept as a decimal string because it is 128-bit.
    pub word_pos: String,
}

/// Seeded, splittable, counter-based random source (ChaCha8).
///
/// A child stream produced by [`RngState::split`] depends only on the parent's
/// seed, stream id and the split label, never on how far the parent has been
/// advanced.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `label`.
    pub fn split(&self, label: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(s: &RngSnapshot) -> Result<Self> {
        let pos: u128 = s
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad rng word_pos {:?}", s.word_pos)))?;
        let mut r = Self::with_stream(s.seed, s.stream);
        r.inner.set_word_pos(pos);
        Ok(r)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Sample through u64 so the result does not depend on pointer width.
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// `dim` independent standard-normal draws.
pub fn gaussian_sample(rng: &mut RngState, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::EmptyInput("gaussian_sample with dim 0"));
    }
    let mut v = vec![0.0; dim];
    rng.fill_normal(&mut v);
    Ok(v)
}

/// Errors unless every entry is finite.
pub fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
