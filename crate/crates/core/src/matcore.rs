//! Dense symmetric-matrix primitives.
//!
//! Everything here is small and dense (d up to a few dozen). Eigenvalues come
//! from nalgebra's symmetric eigensolver; the types in this module add the
//! invariants the rest of the crate relies on: exact symmetry, positive
//! definiteness of `H`, and an isometric flattening of symmetric matrices.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Column vector in `R^d`.
pub type Vector = DVector<f64>;

/// Serializes a vector as a flat JSON array.
pub fn serialize_vector<S: Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

/// Relative tolerance used when certifying that a matrix is positive definite.
pub const SPD_REL_TOL: f64 = 1e-12;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// A real symmetric matrix. Construction symmetrizes `(M + M^T) / 2`, so
/// `get(i, j) == get(j, i)` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat(DMatrix<f64>);

impl SymMat {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without validation. Used on results of arithmetic whose
    /// inputs were already valid.
    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        let d = m.nrows();
        let mut out = m;
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        SymMat(out)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        for r in rows {
            check_dim(d, r.len())?;
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn zeros(d: usize) -> Self {
        SymMat(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMat(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// `x x^T`.
    pub fn outer(x: &Vector) -> Self {
        SymMat::symmetrized(x * x.transpose())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim() == 0 {
            return Vec::new();
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().last().copied().unwrap_or(0.0)
    }

    pub fn spectral_norm(&self) -> f64 {
        let ev = self.eigenvalues();
        ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// `Q^T M Q`.
    pub fn congruence(&self, q: &DMatrix<f64>) -> Result<SymMat> {
        check_dim(self.dim(), q.nrows())?;
        Ok(SymMat::symmetrized(q.transpose() * &self.0 * q))
    }

    /// Trace inner product `Tr(A B)`.
    pub fn trace_inner(&self, other: &SymMat) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.component_mul(&other.0).sum())
    }

    /// Bilinear form `x^T M x`.
    pub fn quad_form(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(x.dot(&(&self.0 * x)))
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.0.row(i).iter().copied().collect())
            .collect()
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol * (1.0 + self.spectral_norm())
    }
}

impl Serialize for SymMat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.dim()))?;
        for row in self.rows() {
            seq.serialize_element(&row)?;
        }
        seq.end()
    }
}

impl Add for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        assert_eq!(self.dim(), rhs.dim(), "SymMat add: dimension mismatch");
        SymMat(&self.0 + &rhs.0)
    }
}

impl Sub for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        assert_eq!(self.dim(), rhs.dim(), "SymMat sub: dimension mismatch");
        SymMat(&self.0 - &rhs.0)
    }
}

impl Mul<f64> for &SymMat {
    type Output = SymMat;
    fn mul(self, rhs: f64) -> SymMat {
        SymMat(&self.0 * rhs)
    }
}

/// A symmetric positive definite matrix with its spectral data cached.
#[derive(Clone, Debug)]
pub struct SpdMat {
    base: SymMat,
    min_eig: f64,
    max_eig: f64,
    inverse: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    sqrt: DMatrix<f64>,
}

impl SpdMat {
    pub fn new(base: SymMat) -> Result<Self> {
        let d = base.dim();
        if d == 0 {
            return Err(Error::InvalidSpec("empty matrix".into()));
        }
        let eig = SymmetricEigen::new(base.as_matrix().clone());
        let min_eig = eig.eigenvalues.min();
        let max_eig = eig.eigenvalues.max();
        if !(max_eig > 0.0) || min_eig <= SPD_REL_TOL * max_eig {
            return Err(Error::NotPositiveDefinite { min_eig, max_eig });
        }
        let q = &eig.eigenvectors;
        let spectral = |f: fn(f64) -> f64| {
            let diag = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            let m = q * diag * q.transpose();
            SymMat::symmetrized(m).into_matrix()
        };
        Ok(SpdMat {
            inverse: spectral(|v| 1.0 / v),
            inv_sqrt: spectral(|v| 1.0 / v.sqrt()),
            sqrt: spectral(f64::sqrt),
            base,
            min_eig,
            max_eig,
        })
    }

    pub fn identity(d: usize) -> Self {
        SpdMat::new(SymMat::identity(d)).expect("identity is SPD")
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        SpdMat::new(SymMat::from_diagonal(diag)?)
    }

    pub fn as_sym(&self) -> &SymMat {
        &self.base
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.base.as_matrix()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eig
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `A^{-1/2}`.
    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    /// Symmetric square root `A^{1/2}`.
    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }
}

impl Serialize for SpdMat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.base.serialize(s)
    }
}

/// `x^T A x`.
pub fn weighted_norm_sq(x: &Vector, a: &SpdMat) -> Result<f64> {
    a.as_sym().quad_form(x)
}

/// Induced norm `||M||_A = ||A^{-1/2} M A^{-1/2}||`.
pub fn matrix_norm_under(m: &SymMat, a: &SpdMat) -> Result<f64> {
    check_dim(a.dim(), m.dim())?;
    Ok(m.congruence(a.inv_sqrt())?.spectral_norm())
}

/// `A <= B` in the PSD order, up to `tol * (1 + ||B||)`.
pub fn psd_order_leq(a: &SymMat, b: &SymMat, tol: f64) -> Result<bool> {
    check_dim(a.dim(), b.dim())?;
    let diff = b - a;
    Ok(diff.min_eigenvalue() >= -tol * (1.0 + b.spectral_norm()))
}

/// Orthonormal coordinates for the space of `d x d` symmetric matrices:
/// the `d` diagonal entries first, then the strict upper triangle in
/// row-major order scaled by `sqrt(2)`. Dot products of coordinate vectors
/// equal trace inner products `Tr(A B)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SymVecIndex {
    d: usize,
}

impl SymVecIndex {
    pub fn new(d: usize) -> Self {
        SymVecIndex { d }
    }

    /// Recovers `d` from a coordinate length, if it is triangular.
    pub fn from_len(len: usize) -> Result<Self> {
        let mut d = 0;
        while d * (d + 1) / 2 < len {
            d += 1;
        }
        if d * (d + 1) / 2 == len {
            Ok(SymVecIndex { d })
        } else {
            Err(Error::InvalidSymVecLength(len))
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    /// Matrix position `(i, j)` with `i <= j` of coordinate `k`.
    pub fn position(&self, k: usize) -> (usize, usize) {
        assert!(k < self.len());
        if k < self.d {
            return (k, k);
        }
        let mut rem = k - self.d;
        for i in 0..self.d {
            let row = self.d - i - 1;
            if rem < row {
                return (i, i + 1 + rem);
            }
            rem -= row;
        }
        unreachable!()
    }

    pub fn to_vec(&self, m: &SymMat) -> Result<Vector> {
        check_dim(self.d, m.dim())?;
        let mut v = Vector::zeros(self.len());
        for i in 0..self.d {
            v[i] = m.get(i, i);
        }
        let mut k = self.d;
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                v[k] = std::f64::consts::SQRT_2 * m.get(i, j);
                k += 1;
            }
        }
        Ok(v)
    }

    pub fn to_sym(&self, v: &Vector) -> Result<SymMat> {
        if v.len() != self.len() {
            return Err(Error::InvalidSymVecLength(v.len()));
        }
        let mut m = DMatrix::zeros(self.d, self.d);
        for i in 0..self.d {
            m[(i, i)] = v[i];
        }
        let mut k = self.d;
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                let val = v[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = val;
                m[(j, i)] = val;
                k += 1;
            }
        }
        Ok(SymMat(m))
    }

    /// The symmetric matrix whose coordinates are the `k`-th unit vector.
    pub fn basis(&self, k: usize) -> SymMat {
        let mut e = Vector::zeros(self.len());
        e[k] = 1.0;
        self.to_sym(&e).expect("length is consistent")
    }
}

pub fn sym_to_vec(m: &SymMat) -> Vector {
    SymVecIndex::new(m.dim())
        .to_vec(m)
        .expect("index built from the matrix dimension")
}

pub fn vec_to_sym(v: &Vector) -> Result<SymMat> {
    SymVecIndex::from_len(v.len())?.to_sym(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(rows: &[&[f64]]) -> SymMat {
        SymMat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_sym(d: usize, vals: &[f64]) -> SymMat {
        SymMat::new(DMatrix::from_fn(d, d, |i, j| vals[i * d + j])).unwrap()
    }

    #[test]
    fn weighted_norm_examples() {
        let i2 = SpdMat::identity(2);
        assert_eq!(
            weighted_norm_sq(&Vector::from_vec(vec![1.0, 0.0]), &i2).unwrap(),
            1.0
        );
        let diag = SpdMat::from_diagonal(&[2.0, 3.0]).unwrap();
        assert_eq!(
            weighted_norm_sq(&Vector::from_vec(vec![1.0, 1.0]), &diag).unwrap(),
            5.0
        );
        let a = SpdMat::new(sym(&[&[2.0, 1.0], &[1.0, 3.0]])).unwrap();
        assert_eq!(
            weighted_norm_sq(&Vector::from_vec(vec![1.0, 2.0]), &a).unwrap(),
            18.0
        );
    }

    #[test]
    fn weighted_norm_dimension_mismatch() {
        let err = weighted_norm_sq(&Vector::zeros(3), &SpdMat::identity(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn matrix_norm_examples() {
        let a = SpdMat::new(sym(&[&[2.0, 1.0], &[1.0, 3.0]])).unwrap();
        assert!((matrix_norm_under(a.as_sym(), &a).unwrap() - 1.0).abs() < 1e-12);
        let two_i = &SymMat::identity(2) * 2.0;
        assert!((matrix_norm_under(&two_i, &SpdMat::identity(2)).unwrap() - 2.0).abs() < 1e-12);
        let m = SymMat::from_diagonal(&[4.0, 1.0]).unwrap();
        let a = SpdMat::from_diagonal(&[2.0, 1.0]).unwrap();
        assert!((matrix_norm_under(&m, &a).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn psd_order_examples() {
        let z = SymMat::zeros(2);
        let i = SymMat::identity(2);
        assert!(psd_order_leq(&z, &i, 0.0).unwrap());
        assert!(!psd_order_leq(&i, &z, 0.0).unwrap());
        let a = SymMat::from_diagonal(&[1.0, 3.0]).unwrap();
        let b = SymMat::from_diagonal(&[2.0, 3.0]).unwrap();
        assert!(psd_order_leq(&a, &b, 0.0).unwrap());
    }

    #[test]
    fn sym_vec_examples() {
        let v = sym_to_vec(&SymMat::identity(2));
        assert_eq!(v.as_slice(), &[1.0, 1.0, 0.0]);
        let v = sym_to_vec(&sym(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(v.as_slice(), &[0.0, 0.0, std::f64::consts::SQRT_2]);
        assert!(matches!(
            vec_to_sym(&Vector::zeros(4)),
            Err(Error::InvalidSymVecLength(4))
        ));
    }

    #[test]
    fn symvec_positions_cover_upper_triangle() {
        let idx = SymVecIndex::new(4);
        let pos: Vec<_> = (0..idx.len()).map(|k| idx.position(k)).collect();
        assert_eq!(&pos[..4], &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(&pos[4..], &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMat::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0])).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
    }

    #[test]
    fn spd_rejects_singular() {
        let m = SymMat::from_diagonal(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            SpdMat::new(m),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let m = SymMat::from_diagonal(&[1.0, 1e-13]).unwrap();
        assert!(SpdMat::new(m).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(SymMat::new(m), Err(Error::NonFinite(_))));
    }

    fn spd_strategy(d: usize) -> impl Strategy<Value = SpdMat> {
        prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| {
            let g = DMatrix::from_row_slice(d, d, &v);
            let a = &g * g.transpose() + DMatrix::identity(d, d) * 0.1;
            SpdMat::new(SymMat::new(a).unwrap()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn eigenvalue_sandwich(a in spd_strategy(4), x in prop::collection::vec(-3.0f64..3.0, 4)) {
            let x = Vector::from_vec(x);
            let q = weighted_norm_sq(&x, &a).unwrap();
            let n2 = x.norm_squared();
            let slack = 1e-10 * (1.0 + a.max_eigenvalue() * n2);
            prop_assert!(q >= a.min_eigenvalue() * n2 - slack);
            prop_assert!(q <= a.max_eigenvalue() * n2 + slack);
        }

        #[test]
        fn induced_norm_congruence_invariant(
            a in spd_strategy(3),
            mvals in prop::collection::vec(-2.0f64..2.0, 9),
            qvals in prop::collection::vec(-1.0f64..1.0, 9),
        ) {
            let q = DMatrix::from_row_slice(3, 3, &qvals) + DMatrix::identity(3, 3) * 2.0;
            prop_assume!(q.determinant().abs() > 0.1);
            let m = random_sym(3, &mvals);
            let before = matrix_norm_under(&m, &a).unwrap();
            let a2 = SpdMat::new(a.as_sym().congruence(&q).unwrap()).unwrap();
            let m2 = m.congruence(&q).unwrap();
            let after = matrix_norm_under(&m2, &a2).unwrap();
            prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0));
        }

        #[test]
        fn symvec_preserves_trace_inner_product(
            d in 1usize..=10,
            seed in prop::collection::vec(-1.0f64..1.0, 200),
        ) {
            let a = random_sym(d, &seed[..d * d]);
            let b = random_sym(d, &seed[100..100 + d * d]);
            let lhs = sym_to_vec(&a).dot(&sym_to_vec(&b));
            let rhs = (a.as_matrix() * b.as_matrix()).trace();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            let back = vec_to_sym(&sym_to_vec(&a)).unwrap();
            let err = (back.as_matrix() - a.as_matrix()).amax();
            prop_assert!(err <= 4.0 * f64::EPSILON * a.as_matrix().amax().max(1.0));
        }

        #[test]
        fn psd_order_reflexive_transitive(
            base in prop::collection::vec(-1.0f64..1.0, 9),
            p1 in spd_strategy(3),
            p2 in spd_strategy(3),
        ) {
            let a = random_sym(3, &base);
            let b = &a + p1.as_sym();
            let c = &b + p2.as_sym();
            let tol = 1e-12;
            prop_assert!(psd_order_leq(&a, &a, tol).unwrap());
            prop_assert!(psd_order_leq(&a, &b, tol).unwrap());
            prop_assert!(psd_order_leq(&b, &c, tol).unwrap());
            prop_assert!(psd_order_leq(&a, &c, 2.0 * tol).unwrap());
        }
    }
}
