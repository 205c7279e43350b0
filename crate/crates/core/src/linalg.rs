//! Dense complex matrices backed by BLAS/LAPACK.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Column-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    C,
}

impl Op {
    fn flag(self) -> i8 {
        match self {
            Op::N => b'N' as i8,
            Op::C => b'C' as i8,
        }
    }
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[i + j * rows] = f(i, j);
            }
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = C64::new(x, 0.0);
        }
        m
    }

    pub fn col(&self, j: usize) -> &[C64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [C64] {
        let r = self.rows;
        &mut self.data[j * r..(j + 1) * r]
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: C64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn add_assign(&mut self, other: &CMat, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        let mut out = self.clone();
        out.add_assign(other, -1.0);
        out
    }

    /// Largest deviation from Hermitian symmetry.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.cols {
            for i in 0..=j.min(self.rows - 1) {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// `op(a) * op(b)`.
    pub fn mul(a: &CMat, opa: Op, b: &CMat, opb: Op) -> CMat {
        let (m, ka) = match opa {
            Op::N => (a.rows, a.cols),
            Op::C => (a.cols, a.rows),
        };
        let (kb, n) = match opb {
            Op::N => (b.rows, b.cols),
            Op::C => (b.cols, b.rows),
        };
        assert_eq!(ka, kb, "inner dimensions differ");
        let mut c = CMat::zeros(m, n);
        gemm(opa, opb, ONE, a, b, ZERO, &mut c);
        c
    }

    pub fn matmul(&self, b: &CMat) -> CMat {
        Self::mul(self, Op::N, b, Op::N)
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![ZERO; self.rows];
        for j in 0..self.cols {
            let xj = x[j];
            if xj == ZERO {
                continue;
            }
            for (yi, a) in y.iter_mut().zip(self.col(j)) {
                *yi += a * xj;
            }
        }
        y
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i + j * self.rows]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i + j * self.rows]
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm(opa: Op, opb: Op, alpha: C64, a: &CMat, b: &CMat, beta: C64, c: &mut CMat) {
    let m = c.rows as i32;
    let n = c.cols as i32;
    let k = match opa {
        Op::N => a.cols,
        Op::C => a.rows,
    } as i32;
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let lda = a.rows.max(1) as i32;
    let ldb = b.rows.max(1) as i32;
    let ldc = c.rows.max(1) as i32;
    let (ta, tb) = (opa.flag(), opb.flag());
    unsafe {
        blas_sys::zgemm_(
            &ta,
            &tb,
            &m,
            &n,
            &k,
            &alpha as *const C64 as *const _,
            a.data.as_ptr() as *const _,
            &lda,
            b.data.as_ptr() as *const _,
            &ldb,
            &beta as *const C64 as *const _,
            c.data.as_mut_ptr() as *mut _,
            &ldc,
        );
    }
}

/// Eigenpairs of a Hermitian matrix.
pub struct Eigh {
    pub values: Vec<f64>,
    /// Columns are eigenvectors (absent when only values were requested).
    pub vectors: Option<CMat>,
}

/// Lowest `count` eigenpairs (all when `count >= n`) of the Hermitian matrix `a`.
/// Only the lower triangle of `a` is read.
pub fn eigh(a: &CMat, count: usize, vectors: bool) -> Result<Eigh> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    if n == 0 || count == 0 {
        return Ok(Eigh { values: vec![], vectors: vectors.then(|| CMat::zeros(n, 0)) });
    }
    let count = count.min(n);
    let mut work_a = a.data.clone();
    let ni = n as i32;
    let jobz = if vectors { b'V' } else { b'N' } as i8;
    let range = if count < n { b'I' } else { b'A' } as i8;
    let uplo = b'L' as i8;
    let il = 1i32;
    let iu = count as i32;
    let mut w = vec![0.0f64; n];
    let zcols = if vectors { count } else { 1 };
    let mut z = vec![ZERO; n * zcols];
    let mut isuppz = vec![0i32; 2 * n];
    let mut found = 0i32;
    let mut info = 0i32;
    let mut work = vec![ZERO; 1];
    let mut rwork = vec![0.0f64; 1];
    let mut iwork = vec![0i32; 1];
    let abstol = 0.0f64;
    for pass in 0..2 {
        let (lw, lrw, liw) = if pass == 0 {
            (-1, -1, -1)
        } else {
            (work.len() as i32, rwork.len() as i32, iwork.len() as i32)
        };
        unsafe {
            lapack_sys::zheevr_(
                &jobz,
                &range,
                &uplo,
                &ni,
                work_a.as_mut_ptr() as *mut _,
                &ni,
                &0.0,
                &0.0,
                &il,
                &iu,
                &abstol,
                &mut found,
                w.as_mut_ptr(),
                z.as_mut_ptr() as *mut _,
                &ni,
                isuppz.as_mut_ptr(),
                work.as_mut_ptr() as *mut _,
                &lw,
                rwork.as_mut_ptr(),
                &lrw,
                iwork.as_mut_ptr(),
                &liw,
                &mut info,
            );
        }
        if info != 0 {
            return Err(Error::Lapack { routine: "zheevr", info });
        }
        if pass == 0 {
            work = vec![ZERO; work[0].re as usize];
            rwork = vec![0.0; rwork[0] as usize];
            iwork = vec![0; iwork[0] as usize];
        }
    }
    w.truncate(count);
    let vectors = vectors.then(|| CMat { rows: n, cols: count, data: z });
    Ok(Eigh { values: w, vectors })
}

/// Solve `a x = b` for a general square `a` (LU with partial pivoting).
pub fn solve(a: &CMat, b: &CMat) -> Result<CMat> {
    assert_eq!(a.rows, a.cols);
    assert_eq!(a.rows, b.rows);
    let n = a.rows as i32;
    let nrhs = b.cols as i32;
    let mut lu = a.data.clone();
    let mut x = b.clone();
    let mut ipiv = vec![0i32; a.rows];
    let mut info = 0i32;
    unsafe {
        lapack_sys::zgesv_(
            &n,
            &nrhs,
            lu.as_mut_ptr() as *mut _,
            &n,
            ipiv.as_mut_ptr(),
            x.data.as_mut_ptr() as *mut _,
            &n,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "zgesv", info });
    }
    Ok(x)
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = CMat::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let z = if i == j {
                    C64::new(rng.gen_range(-1.0..1.0), 0.0)
                } else {
                    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                };
                a[(i, j)] = z.conj();
                a[(j, i)] = z;
            }
        }
        a
    }

    #[test]
    fn eigh_reconstructs_matrix() {
        let a = random_hermitian(12, 3);
        let e = eigh(&a, 12, true).unwrap();
        let v = e.vectors.unwrap();
        let vd = CMat::mul(&CMat::diag(&e.values), Op::N, &v, Op::C);
        let back = v.matmul(&vd);
        assert!(back.sub(&a).frobenius() < 1e-12);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn partial_spectrum_matches_full() {
        let a = random_hermitian(20, 5);
        let full = eigh(&a, 20, false).unwrap();
        let low = eigh(&a, 4, true).unwrap();
        for i in 0..4 {
            assert!((full.values[i] - low.values[i]).abs() < 1e-12);
        }
        let v = low.vectors.unwrap();
        let ov = CMat::mul(&v, Op::C, &v, Op::N);
        assert!(ov.sub(&CMat::identity(4)).frobenius() < 1e-12);
    }

    #[test]
    fn solve_inverts() {
        let a = random_hermitian(8, 9);
        let mut shifted = a.clone();
        for i in 0..8 {
            shifted[(i, i)] += C64::new(5.0, 0.0);
        }
        let b = CMat::from_fn(8, 2, |i, j| C64::new(i as f64, j as f64));
        let x = solve(&shifted, &b).unwrap();
        assert!(shifted.matmul(&x).sub(&b).frobenius() < 1e-12);
    }

    #[test]
    fn gemm_adjoint_flags() {
        let a = random_hermitian(5, 1);
        let b = CMat::from_fn(5, 3, |i, j| C64::new((i * j) as f64, 1.0));
        let direct = a.adjoint().matmul(&b);
        let flagged = CMat::mul(&a, Op::C, &b, Op::N);
        assert!(direct.sub(&flagged).frobenius() < 1e-13);
    }
}
