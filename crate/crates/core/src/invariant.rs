//! The watermark-carrying invariant: selected embedding rows projected
//! through the first layer's `W_q W_k^T`, plus the machinery that keeps it
//! usable after functional-equivalence attacks — condition measurement,
//! key permutations, permutation recovery, and frame correction.
//!
//! Why `W_q W_k^T` carries through attacks: the invertible factor planted
//! in `W_q` meets its inverse planted in `W_k`, so the product only picks
//! up the attacker's row frame and a positive scale, both of which the
//! recovery below removes.

use crate::error::{Error, Result};
use crate::keys::{permute_columns, permute_rows, PermKey};
use crate::matrix::{dot, singular_values, vec_mat, Matrix};
use crate::model::ModelBundle;

/// `t x d` invariant matrix together with the rows it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMatrix {
    pub a_m: Matrix,
    pub source_rows: Vec<usize>,
}

/// Row `i` of the result is `W_e[rows[i]] * W_q1 * W_k1^T`.
pub fn compute_invariants(
    w_e: &Matrix,
    w_q1: &Matrix,
    w_k1: &Matrix,
    rows: &[usize],
) -> Result<InvariantMatrix> {
    let d = w_e.cols();
    if w_q1.rows() != d || w_q1.cols() != d || w_k1.rows() != d || w_k1.cols() != d {
        return Err(Error::InvalidArgument(
            "attention weights do not match the embedding dimension".into(),
        ));
    }
    if rows.len() > d {
        return Err(Error::InvalidArgument(format!(
            "asked for {} invariant rows but the dimension is only {d}",
            rows.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &r in rows {
        if r >= w_e.rows() {
            return Err(Error::InvalidArgument(format!(
                "invariant row {r} out of range for vocabulary {}",
                w_e.rows()
            )));
        }
        if !seen.insert(r) {
            return Err(Error::InvalidArgument(format!("invariant row {r} repeats")));
        }
    }

    let mut a_m = Matrix::zeros(rows.len(), d);
    for (i, &r) in rows.iter().enumerate() {
        let projected = vec_mat(w_e.row(r), w_q1);
        let row: Vec<f64> = (0..d).map(|j| dot(&projected, w_k1.row(j))).collect();
        a_m.set_row(i, &row);
    }
    Ok(InvariantMatrix {
        a_m,
        source_rows: rows.to_vec(),
    })
}

/// Apply one key per invariant row: row `j` of the result is row `j` of
/// `A_m` permuted by `keys[j]`.
pub fn permute_invariant_rows(inv: &InvariantMatrix, keys: &[PermKey]) -> Result<Matrix> {
    if keys.len() != inv.a_m.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} keys for {} invariant rows",
            keys.len(),
            inv.a_m.rows()
        )));
    }
    let mut out = Matrix::zeros(inv.a_m.rows(), inv.a_m.cols());
    for (j, key) in keys.iter().enumerate() {
        if key.len() != inv.a_m.cols() {
            return Err(Error::InvalidArgument(
                "permutation key length does not match invariant width".into(),
            ));
        }
        let permuted = key.apply(inv.a_m.row(j));
        out.set_row(j, &permuted);
    }
    Ok(out)
}

/// Ratio of extreme singular values of a square matrix.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    if m.rows() != m.cols() {
        return Err(Error::InvalidArgument(
            "condition number needs a square matrix".into(),
        ));
    }
    let sv = singular_values(m);
    let smax = sv[0];
    let smin = sv[sv.len() - 1];
    if !(smin > smax * f64::EPSILON) {
        return Err(Error::SingularMatrix(format!(
            "smallest singular value {smin:e} is zero to machine precision"
        )));
    }
    Ok(smax / smin)
}

/// Recover an attacker's embedding-dimension permutation by cosine
/// similarity between suspect and reference columns.
///
/// The returned key maps each suspect column to its best reference column;
/// the assignment must be a bijection. Positive column scaling does not
/// disturb the match; sign flips are out of scope.
pub fn recover_permutation(reference: &Matrix, suspect: &Matrix) -> Result<PermKey> {
    if reference.rows() != suspect.rows() || reference.cols() != suspect.cols() {
        return Err(Error::InvalidArgument(
            "reference and suspect shapes differ".into(),
        ));
    }
    let d = reference.cols();
    let ref_cols: Vec<Vec<f64>> = (0..d).map(|j| reference.column(j)).collect();
    let sus_cols: Vec<Vec<f64>> = (0..d).map(|j| suspect.column(j)).collect();
    let ref_norms: Vec<f64> = ref_cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let sus_norms: Vec<f64> = sus_cols.iter().map(|c| dot(c, c).sqrt()).collect();

    let mut map = vec![0usize; d];
    let mut used = vec![false; d];
    for j in 0..d {
        let mut best = f64::NEG_INFINITY;
        let mut best_k = 0usize;
        for k in 0..d {
            let denom = sus_norms[j] * ref_norms[k];
            let cos = if denom == 0.0 {
                0.0
            } else {
                dot(&sus_cols[j], &ref_cols[k]) / denom
            };
            if cos > best {
                best = cos;
                best_k = k;
            }
        }
        if used[best_k] {
            return Err(Error::AmbiguousRecovery(format!(
                "reference column {best_k} claimed by more than one suspect column"
            )));
        }
        used[best_k] = true;
        map[j] = best_k;
    }
    PermKey::from_map(map)
}

/// Undo a recovered dimension permutation so invariant recomputation runs
/// in the original coordinate frame: embedding columns are un-permuted and
/// the first layer's `W_q`/`W_k` rows re-permuted to match. Any residual
/// positive scale cancels inside the detection statistic.
pub fn apply_frame_correction(suspect: &ModelBundle, pi_hat: &PermKey) -> Result<ModelBundle> {
    if pi_hat.len() != suspect.d {
        return Err(Error::InvalidArgument(
            "recovered permutation length does not match the embedding dimension".into(),
        ));
    }
    let inv = pi_hat.inverse();
    let mut corrected = suspect.clone();
    corrected.w_e = permute_columns(&suspect.w_e, &inv)?;
    corrected.layers[0].w_q = permute_rows(&suspect.layers[0].w_q, &inv)?;
    corrected.layers[0].w_k = permute_rows(&suspect.layers[0].w_k, &inv)?;
    Ok(corrected)
}
