//! Dense row-major tensors and the seeded random stream used everywhere else.
//!
//! Matrix products accumulate every output element in ascending inner-index
//! order starting from `0.0`, so results are bit-reproducible regardless of
//! how rows are distributed across threads.
//!
//! The random stream is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Its position is fully described by `(seed, word_pos)`, which is what
//! checkpoints persist.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row work above this many multiply-adds is spread across the rayon pool.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds an `m×n` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let data = matmul_raw(&a.data, &b.data, m, k, n);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Unchecked kernel over raw row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n.max(1)).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n.max(1)).enumerate().for_each(row_kernel);
    }
    out
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::arg("argmax of an empty vector"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Serializable position of an [`Rng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Deterministic single-owner random stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// One draw from `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        Uniform::new(0.0, 1.0).sample(&mut self.inner)
    }

    /// `n` draws from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64, n: usize) -> Result<Tensor> {
        let values = self.uniform_vec(lo, hi, n)?;
        if n == 0 {
            return Err(Error::arg("uniform: n must be positive"));
        }
        Tensor::vector(values)
    }

    pub fn uniform_vec(&mut self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::arg(format!("uniform range requires lo < hi, got [{lo}, {hi})")));
        }
        let dist = Uniform::new(lo, hi);
        Ok((0..n).map(|_| dist.sample(&mut self.inner)).collect())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        Uniform::new(0, n).sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// A full permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expected = Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(matmul(&proj, &b).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = Tensor::matrix(7, 5, rng.uniform_vec(-1.0, 1.0, 35).unwrap()).unwrap();
        let b = Tensor::matrix(5, 3, rng.uniform_vec(-1.0, 1.0, 15).unwrap()).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive(&a, &b).as_slice());

        // Large enough to take the parallel path.
        let a = Tensor::matrix(64, 300, rng.uniform_vec(-1.0, 1.0, 64 * 300).unwrap()).unwrap();
        let b = Tensor::matrix(300, 40, rng.uniform_vec(-1.0, 1.0, 300 * 40).unwrap()).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive(&a, &b).as_slice());
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::vector(vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn uniform_is_deterministic() {
        let a = Rng::new(42).uniform(0.0, 1.0, 4).unwrap();
        let b = Rng::new(42).uniform(0.0, 1.0, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_mean_near_half() {
        let t = Rng::new(9).uniform(0.0, 1.0, 100_000).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn uniform_degenerate_range() {
        assert!(matches!(
            Rng::new(1).uniform(1.0, 1.0, 3),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rng_state_restores_stream() {
        let mut rng = Rng::new(77);
        for _ in 0..13 {
            rng.next_u64();
        }
        let state = rng.state();
        let ahead: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        let mut restored = Rng::from_state(state);
        let again: Vec<u64> = (0..5).map(|_| restored.next_u64()).collect();
        assert_eq!(ahead, again);
    }

    #[test]
    fn rng_first_million_outputs_agree() {
        let mut a = Rng::new(2024);
        let mut b = Rng::new(2024);
        assert!((0..1_000_000).all(|_| a.next_u64() == b.next_u64()));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(argmax(&[5.0, 5.0, 5.0]).unwrap(), 0);
        assert!(argmax(&[]).is_err());

        let v = Rng::new(5).uniform_vec(-10.0, 10.0, 100).unwrap();
        let mut best = 0;
        for i in 0..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        assert_eq!(argmax(&v).unwrap(), best);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn int_matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-50i32..50, r * c)
                .prop_map(move |v| Tensor::matrix(r, c, v.into_iter().map(f64::from).collect()).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_associative_on_small_integers(
                a in int_matrix(3, 4), b in int_matrix(4, 5), c in int_matrix(5, 2)
            ) {
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert_eq!(left, right);
            }

            #[test]
            fn argmax_shift_invariant(
                v in proptest::collection::vec(-100i32..100, 1..50), shift in -1000i32..1000
            ) {
                let v: Vec<f64> = v.into_iter().map(f64::from).collect();
                let shifted: Vec<f64> = v.iter().map(|x| x + f64::from(shift)).collect();
                prop_assert_eq!(argmax(&v).unwrap(), argmax(&shifted).unwrap());
            }
        }
    }
}
