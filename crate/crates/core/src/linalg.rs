//! Dense row-major 2-D arrays of `f64`.
//!
//! [`Matrix2`] carries weights, masks, activations and gradients. There are no
//! strided views; transposed products are exposed as separate kernels
//! ([`Matrix2::matmul_tn`], [`Matrix2::matmul_nt`]) so callers never
//! materialize a transpose on the hot path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which p-norm to take over a flattened array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PNorm {
    L1,
    L2,
}

impl PNorm {
    pub fn p(self) -> u8 {
        match self {
            PNorm::L1 => 1,
            PNorm::L2 => 2,
        }
    }
}

impl TryFrom<u8> for PNorm {
    type Error = Error;

    fn try_from(p: u8) -> Result<Self> {
        match p {
            1 => Ok(PNorm::L1),
            2 => Ok(PNorm::L2),
            _ => Err(Error::invalid(format!("p-norm must be 1 or 2, got {p}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn check_same_shape(&self, other: &Matrix2, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix2::zeros(m, n);
        gemm(
            m,
            k,
            n,
            (&self.data, k as isize, 1),
            (&other.data, n as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn matmul_tn(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}ᵀ · {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Matrix2::zeros(m, n);
        gemm(
            m,
            k,
            n,
            (&self.data, 1, self.cols as isize),
            (&other.data, n as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without forming the transpose.
    pub fn matmul_nt(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix2::zeros(m, n);
        gemm(
            m,
            k,
            n,
            (&self.data, k as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix2 {
        Matrix2::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix2) -> Result<Matrix2> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix2 {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn hadamard_in_place(&mut self, other: &Matrix2) -> Result<()> {
        self.check_same_shape(other, "hadamard_in_place")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix2) -> Result<Matrix2> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix2) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix2) -> Result<Matrix2> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix2 {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix2 {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix2 {
        Matrix2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_in_place(&mut self, f: impl Fn(f64) -> f64) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Per-column sums, length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    /// p-norm of the flattened matrix.
    pub fn pnorm(&self, p: PNorm) -> f64 {
        match p {
            PNorm::L1 => self.data.iter().map(|x| x.abs()).sum(),
            PNorm::L2 => self.data.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// Number of nonzero entries.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = a · b` for row-major `c` of shape (m, n); `a` and `b` are given with
/// explicit (row, col) strides so transposed operands need no copy.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds row-major (or transposed
    // row-major) layouts of slices whose lengths were validated by the caller,
    // and `c` is an exclusively borrowed m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix2 {
        Matrix2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Matrix2, b: &Matrix2) -> Matrix2 {
        let mut out = Matrix2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn assert_close(a: &Matrix2, b: &Matrix2, rel: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = x.abs().max(y.abs()).max(1e-300);
            assert!((x - y).abs() / scale <= rel, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_matmul() {
        let eye = Matrix2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Matrix2::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Matrix2::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix2::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        assert_close(&a.matmul(&b).unwrap(), &triple_loop(&a, &b), 1e-12);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(6, 4, &mut rng);
        let b = random(6, 5, &mut rng);
        let c = random(3, 4, &mut rng);
        assert_close(
            &a.matmul_tn(&b).unwrap(),
            &triple_loop(&a.transpose(), &b),
            1e-12,
        );
        assert_close(
            &a.matmul_nt(&c).unwrap(),
            &triple_loop(&a, &c.transpose()),
            1e-12,
        );
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix2::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn pnorm_examples() {
        let m = Matrix2::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(m.pnorm(PNorm::L2), 5.0);
        let m = Matrix2::from_rows(&[[1.0, -1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(m.pnorm(PNorm::L1), 4.0);
    }

    #[test]
    fn pnorm_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random(4, 4, &mut rng);
        let mut sq = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                sq += m.get(i, j).powi(2);
            }
        }
        assert!((m.pnorm(PNorm::L2) - sq.sqrt()).abs() <= 1e-12 * sq.sqrt());
    }

    #[test]
    fn pnorm_rejects_other_p() {
        assert!(PNorm::try_from(3).is_err());
        assert_eq!(PNorm::try_from(2).unwrap(), PNorm::L2);
    }

    #[test]
    fn hadamard_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        assert_eq!(a.hadamard(&Matrix2::ones(3, 4)).unwrap(), a);
        assert_eq!(
            a.hadamard(&Matrix2::zeros(3, 4)).unwrap().count_nonzero(),
            0
        );
        let h = a.hadamard(&b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(h.get(i, j), a.get(i, j) * b.get(i, j));
            }
        }
        assert!(a.hadamard(&Matrix2::zeros(4, 3)).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = Matrix2> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-1e3f64..1e3, r * c)
                .prop_map(move |v| Matrix2::from_vec(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn l1_dominates_l2(m in arb_matrix()) {
            prop_assert!(m.pnorm(PNorm::L1) >= m.pnorm(PNorm::L2) * (1.0 - 1e-15));
        }

        #[test]
        fn hadamard_commutes_bitwise(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(r, c, &mut rng);
            let b = random(r, c, &mut rng);
            prop_assert_eq!(a.hadamard(&b).unwrap(), b.hadamard(&a).unwrap());
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), d in proptest::array::uniform4(1usize..7)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(d[0], d[1], &mut rng);
            let b = random(d[1], d[2], &mut rng);
            let c = random(d[2], d[3], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                // Relative to the magnitude of the summed terms, which bounds
                // cancellation error.
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / scale <= 1e-9);
            }
        }
    }
}
