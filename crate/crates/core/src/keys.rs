//! Secret-key primitives: permutation keys, orthogonal frames, and
//! invertible matrix pairs with bounded conditioning.
//!
//! Permutations are stored as index arrays, never as dense 0/1 matrices.
//! The single convention used everywhere: applying a key `p` to a row
//! vector `e` yields `e'` with `e'[j] = e[map[j]]` (right-multiplication by
//! the permutation matrix whose column `j` has a 1 in row `map[j]`).

use crate::error::{Error, Result};
use crate::matrix::{invert, orthonormal_q, singular_values, Matrix};
use crate::prng::PrngStream;
use serde::{Deserialize, Serialize};

/// Permutation of `[0, d)` stored as an index map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermKey {
    map: Vec<usize>,
}

impl PermKey {
    pub fn identity(d: usize) -> Self {
        Self {
            map: (0..d).collect(),
        }
    }

    /// Validate that `map` is a bijection on `[0, len)`.
    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let d = map.len();
        let mut seen = vec![false; d];
        for &m in &map {
            if m >= d || seen[m] {
                return Err(Error::InvalidArgument(
                    "permutation map is not a bijection".into(),
                ));
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> PermKey {
        let mut inv = vec![0usize; self.map.len()];
        for (j, &m) in self.map.iter().enumerate() {
            inv[m] = j;
        }
        PermKey { map: inv }
    }

    /// Apply to a row vector: `out[j] = v[map[j]]`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.map.len());
        self.map.iter().map(|&m| v[m]).collect()
    }

    /// Apply into a caller-provided buffer (hot path for null sampling).
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.map.len());
        assert_eq!(out.len(), self.map.len());
        for (o, &m) in out.iter_mut().zip(self.map.iter()) {
            *o = v[m];
        }
    }
}

/// Uniformly random permutation via Fisher-Yates on the stream.
pub fn gen_permutation(prng: &mut PrngStream, d: usize) -> PermKey {
    assert!(d >= 1, "permutation dimension must be at least 1");
    let mut map: Vec<usize> = (0..d).collect();
    fisher_yates(prng, &mut map);
    PermKey { map }
}

pub(crate) fn fisher_yates(prng: &mut PrngStream, map: &mut [usize]) {
    for i in (1..map.len()).rev() {
        let j = prng.gen_range(i + 1);
        map.swap(i, j);
    }
}

/// Permute the columns of `m`: column `j` of the result is column `map[j]`
/// of the input (i.e. `m * P`, every row permuted by the key).
pub fn permute_columns(m: &Matrix, p: &PermKey) -> Result<Matrix> {
    if p.len() != m.cols() {
        return Err(Error::InvalidArgument(format!(
            "permutation length {} does not match column count {}",
            p.len(),
            m.cols()
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let src = m.row(i);
        let dst = out.row_mut(i);
        for (o, &mp) in dst.iter_mut().zip(p.map().iter()) {
            *o = src[mp];
        }
    }
    Ok(out)
}

/// Permute the rows of `m`: row `i` of the result is row `map[i]` of the
/// input (i.e. `P^T * m`).
pub fn permute_rows(m: &Matrix, p: &PermKey) -> Result<Matrix> {
    if p.len() != m.rows() {
        return Err(Error::InvalidArgument(format!(
            "permutation length {} does not match row count {}",
            p.len(),
            m.rows()
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &mp) in p.map().iter().enumerate() {
        out.set_row(i, m.row(mp));
    }
    Ok(out)
}

/// Orthogonal noise frame. `b * b^T` stays within 1e-10 of the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoKey {
    pub b: Matrix,
}

impl OrthoKey {
    pub fn identity(d: usize) -> Self {
        Self {
            b: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.rows()
    }

    pub fn orthogonality_defect(&self) -> f64 {
        let prod = self.b.matmul_transpose_b(&self.b).expect("square");
        let mut max_dev = 0.0f64;
        for i in 0..self.b.rows() {
            for j in 0..self.b.cols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((prod.get(i, j) - expect).abs());
            }
        }
        max_dev
    }
}

const GEN_RETRIES: usize = 8;

/// Orthogonal matrix from QR of a standard-normal draw.
pub fn gen_orthogonal(prng: &mut PrngStream, d: usize) -> Result<OrthoKey> {
    if d < 1 {
        return Err(Error::InvalidArgument("orthogonal dimension must be at least 1".into()));
    }
    for _ in 0..GEN_RETRIES {
        let data: Vec<f64> = (0..d * d).map(|_| prng.normal()).collect();
        let g = Matrix::from_vec(d, d, data)?;
        match orthonormal_q(&g) {
            Ok(q) => {
                let key = OrthoKey { b: q };
                if key.orthogonality_defect() <= 1e-10 {
                    return Ok(key);
                }
            }
            Err(Error::GenerationFailure(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationFailure(
        "no usable orthogonal draw after retries".into(),
    ))
}

/// Invertible matrix with its precomputed inverse.
/// `m * m_inv` stays within 1e-8 of the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertiblePair {
    pub m: Matrix,
    pub m_inv: Matrix,
}

impl InvertiblePair {
    /// Swap the roles of matrix and inverse.
    pub fn swapped(&self) -> InvertiblePair {
        InvertiblePair {
            m: self.m_inv.clone(),
            m_inv: self.m.clone(),
        }
    }

    pub fn inverse_defect(&self) -> f64 {
        let prod = self.m.matmul(&self.m_inv).expect("square");
        let mut max_dev = 0.0f64;
        for i in 0..self.m.rows() {
            for j in 0..self.m.cols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((prod.get(i, j) - expect).abs());
            }
        }
        max_dev
    }
}

const INVERTIBLE_COND_CAP: f64 = 1e4;

/// Near-identity invertible draw: `I + G` with `G` standard normal scaled by
/// `0.5 / sqrt(d)`. Redrawn until the condition number is at most 1e4.
pub fn gen_invertible(prng: &mut PrngStream, d: usize) -> Result<InvertiblePair> {
    if d < 1 {
        return Err(Error::InvalidArgument("invertible dimension must be at least 1".into()));
    }
    let sigma = 0.5 / (d as f64).sqrt();
    for _ in 0..GEN_RETRIES {
        let mut m = Matrix::identity(d);
        for v in m.data_mut() {
            *v += sigma * prng.normal();
        }
        let sv = singular_values(&m);
        let smax = sv[0];
        let smin = sv[d - 1];
        if smin <= 0.0 || smax / smin > INVERTIBLE_COND_CAP {
            continue;
        }
        let m_inv = match invert(&m) {
            Ok(inv) => inv,
            Err(Error::SingularMatrix(_)) => continue,
            Err(e) => return Err(e),
        };
        let pair = InvertiblePair { m, m_inv };
        if pair.inverse_defect() <= 1e-8 {
            return Ok(pair);
        }
    }
    Err(Error::GenerationFailure(
        "no well-conditioned invertible draw after retries".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;

    #[test]
    fn identity_permutation_for_d1() {
        let mut prng = PrngStream::new(1);
        let p = gen_permutation(&mut prng, 1);
        assert_eq!(p.map(), &[0]);
    }

    #[test]
    fn same_seed_same_permutation() {
        let p1 = gen_permutation(&mut PrngStream::new(44), 64);
        let p2 = gen_permutation(&mut PrngStream::new(44), 64);
        assert_eq!(p1, p2);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut prng = PrngStream::new(9);
        for d in [1usize, 2, 5, 17, 64] {
            let p = gen_permutation(&mut prng, d);
            let inv = p.inverse();
            let v: Vec<f64> = (0..d).map(|i| i as f64).collect();
            let round = inv.apply(&p.apply(&v));
            assert_eq!(round, v);
        }
    }

    #[test]
    fn permutation_frequencies_uniform_at_d4() {
        // 10^4 draws over the 24 permutations of 4 elements; every cell
        // count must sit within 4 sigma of the uniform expectation.
        let mut prng = PrngStream::new(2024);
        let n = 10_000usize;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let p = gen_permutation(&mut prng, 4);
            *counts.entry(p.map().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let p0 = 1.0 / 24.0;
        let expect = n as f64 * p0;
        let sigma = (n as f64 * p0 * (1.0 - p0)).sqrt();
        for (perm, count) in counts {
            let dev = (count as f64 - expect).abs();
            assert!(dev <= 4.0 * sigma, "{perm:?}: count {count}, dev {dev}");
        }
    }

    #[test]
    fn from_map_rejects_non_bijection() {
        assert!(PermKey::from_map(vec![0, 0, 1]).is_err());
        assert!(PermKey::from_map(vec![0, 3]).is_err());
        assert!(PermKey::from_map(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn orthogonal_d1_is_sign() {
        let mut prng = PrngStream::new(3);
        let k = gen_orthogonal(&mut prng, 1).unwrap();
        let v = k.b.get(0, 0);
        assert!((v.abs() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_defect_bound() {
        let mut prng = PrngStream::new(17);
        for d in [2usize, 8, 64] {
            let k = gen_orthogonal(&mut prng, d).unwrap();
            assert!(k.orthogonality_defect() <= 1e-10);
        }
    }

    #[test]
    fn orthogonal_preserves_norms() {
        let mut prng = PrngStream::new(23);
        let k = gen_orthogonal(&mut prng, 32).unwrap();
        for _ in 0..50 {
            let v: Vec<f64> = (0..32).map(|_| prng.normal()).collect();
            let vb = crate::matrix::vec_mat(&v, &k.b);
            let n0 = dot(&v, &v).sqrt();
            let n1 = dot(&vb, &vb).sqrt();
            assert!((n1 - n0).abs() <= 1e-9 * n0.max(1e-300), "{n0} vs {n1}");
        }
    }

    #[test]
    fn invertible_d1_is_reciprocal() {
        let mut prng = PrngStream::new(4);
        let pair = gen_invertible(&mut prng, 1).unwrap();
        let m = pair.m.get(0, 0);
        let mi = pair.m_inv.get(0, 0);
        assert!((m * mi - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn invertible_defect_bound() {
        let mut prng = PrngStream::new(8);
        for d in [2usize, 16, 64] {
            let pair = gen_invertible(&mut prng, d).unwrap();
            assert!(pair.inverse_defect() <= 1e-8);
        }
    }

    #[test]
    fn invertible_round_trips_vectors() {
        let mut prng = PrngStream::new(12);
        let pair = gen_invertible(&mut prng, 24).unwrap();
        for _ in 0..20 {
            let v: Vec<f64> = (0..24).map(|_| prng.normal()).collect();
            let fwd = crate::matrix::vec_mat(&v, &pair.m);
            let back = crate::matrix::vec_mat(&fwd, &pair.m_inv);
            let norm = dot(&v, &v).sqrt();
            for (a, b) in v.iter().zip(back.iter()) {
                assert!((a - b).abs() <= 1e-7 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn permute_rows_and_columns_agree_with_apply() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let p = PermKey::from_map(vec![2, 0, 1]).unwrap();
        let pc = permute_columns(&m, &p).unwrap();
        assert_eq!(pc.row(0), &[3.0, 1.0, 2.0]);
        assert_eq!(pc.row(1), &[6.0, 4.0, 5.0]);

        let q = PermKey::from_map(vec![1, 0]).unwrap();
        let pr = permute_rows(&m, &q).unwrap();
        assert_eq!(pr.row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(pr.row(1), &[1.0, 2.0, 3.0]);
    }
}
