//! Single-user watermarking: position selection, conditioned permutation
//! search, the linear-system solve that plants the watermark, and the
//! rank-statistic extraction pipeline.
//!
//! Insertion solves, per marked row, a `t x t` system so the invariant
//! matrix annihilates the (key-permuted, rescaled) row. Extraction replays
//! the statistic with the owner's keys and ranks it against the same
//! statistic under fresh random keys; a watermarked row ranks at the very
//! bottom of that null distribution.

use crate::error::{Error, Result};
use crate::invariant::{
    apply_frame_correction, compute_invariants, condition_number, permute_invariant_rows,
    recover_permutation,
};
use crate::keys::{gen_permutation, PermKey};
use crate::keystore::SingleUserKey;
use crate::matrix::{dot, lu_factor, LuFactors, Matrix};
use crate::model::ModelBundle;
use crate::prng::{mix64, PrngStream};
use rayon::prelude::*;
use serde::Serialize;

/// Sub-stream layout under an insertion root seed. Single- and multi-user
/// insertion share the tags; identical roots then yield identical draws in
/// the degenerate configuration where the two schemes coincide.
pub(crate) mod tags {
    pub const INVARIANT_ROWS: u64 = 1;
    pub const CONDITIONED_PERMS: u64 = 2;
    pub const WATERMARK_ROWS: u64 = 3;
    pub const ROW_PERMS: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const NULLS: u64 = 6;
}

/// Insertion parameters.
#[derive(Debug, Clone, Serialize)]
pub struct InsertionConfig {
    /// Invariant rows / unknowns per watermark row.
    pub t: usize,
    /// Number of watermarked rows.
    pub l: usize,
    /// Divisor hiding solved values on write, multiplied back on read.
    pub scale_wm: f64,
    /// Condition-number threshold for the solve block.
    pub tau: f64,
    /// Permutation draws attempted before giving up.
    pub max_times: usize,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            t: 10,
            l: 50,
            scale_wm: 1000.0,
            tau: 1e3,
            max_times: 100,
        }
    }
}

impl InsertionConfig {
    pub fn validate(&self, s: usize, d: usize) -> Result<()> {
        if self.t == 0 || self.t > d {
            return Err(Error::InvalidArgument(format!(
                "t={} must be in [1, d={d}]",
                self.t
            )));
        }
        if self.l + self.t > s {
            return Err(Error::InvalidArgument(format!(
                "l + t = {} exceeds vocabulary {s}",
                self.l + self.t
            )));
        }
        if self.max_times == 0 {
            return Err(Error::InvalidArgument("max_times must be at least 1".into()));
        }
        if !(self.scale_wm > 0.0) {
            return Err(Error::InvalidArgument("scale_wm must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Per-position detection outcome.
#[derive(Debug, Clone, Serialize)]
pub struct PositionRecord {
    pub position: usize,
    pub statistic: f64,
    pub rank: usize,
    pub num_it: usize,
}

/// Full detection outcome for one key.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionReport {
    pub per_position: Vec<PositionRecord>,
    pub detect_count: usize,
    pub beta: f64,
    pub rho: usize,
    pub num_it: usize,
    pub success: bool,
    /// Estimated per-position match ratio, `detect_count / l`.
    pub p_hat: f64,
}

impl DetectionReport {
    pub(crate) fn from_records(
        records: Vec<PositionRecord>,
        beta: f64,
        rho: usize,
        num_it: usize,
    ) -> Self {
        let detect_count = records
            .iter()
            .filter(|r| (r.rank as f64) / (num_it as f64) < beta)
            .count();
        let l = records.len();
        DetectionReport {
            per_position: records,
            detect_count,
            beta,
            rho,
            num_it,
            success: detect_count > rho,
            p_hat: if l == 0 {
                0.0
            } else {
                detect_count as f64 / l as f64
            },
        }
    }

    /// Fraction of positions whose rank falls below `threshold * num_it`.
    pub fn match_fraction(&self, threshold: f64) -> f64 {
        if self.per_position.is_empty() {
            return 0.0;
        }
        let hits = self
            .per_position
            .iter()
            .filter(|r| (r.rank as f64) / (r.num_it as f64) < threshold)
            .count();
        hits as f64 / self.per_position.len() as f64
    }

    /// CSV block: `position,statistic,rank,num_it`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,statistic,rank,num_it\n");
        for r in &self.per_position {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.position, r.statistic, r.rank, r.num_it
            ));
        }
        out
    }

    /// CSV block with a leading user-id column.
    pub fn to_csv_with_user(&self, user_id: &str) -> String {
        let mut out = String::from("user_id,position,statistic,rank,num_it\n");
        for r in &self.per_position {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                user_id, r.position, r.statistic, r.rank, r.num_it
            ));
        }
        out
    }

    /// JSON summary of the decision fields.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "detect_count": self.detect_count,
            "beta": self.beta,
            "rho": self.rho,
            "num_it": self.num_it,
            "success": self.success,
            "p_hat": self.p_hat,
        })
    }
}

/// Draw `l` distinct watermark positions uniformly from the vocabulary,
/// avoiding the invariant rows.
pub fn select_watermark_positions(
    prng: &mut PrngStream,
    s: usize,
    l: usize,
    invariant_rows: &[usize],
) -> Result<Vec<usize>> {
    if l + invariant_rows.len() > s {
        return Err(Error::InvalidArgument(format!(
            "cannot place {l} watermark rows outside {} reserved rows in a vocabulary of {s}",
            invariant_rows.len()
        )));
    }
    Ok(prng.sample_distinct(l, s, invariant_rows))
}

/// Draw per-row permutations for the invariant matrix until the trailing
/// `t x t` block is well conditioned.
///
/// Returns the accepted keys, the permuted invariant matrix, and the solve
/// block (its last `t` columns).
pub fn choose_conditioned_permutations(
    inv: &crate::invariant::InvariantMatrix,
    tau: f64,
    max_times: usize,
    prng: &mut PrngStream,
) -> Result<(Vec<PermKey>, Matrix, Matrix)> {
    let t = inv.a_m.rows();
    let d = inv.a_m.cols();
    if t > d {
        return Err(Error::InvalidArgument("more invariant rows than dimensions".into()));
    }
    for _ in 0..max_times {
        let keys: Vec<PermKey> = (0..t).map(|_| gen_permutation(prng, d)).collect();
        let permuted = permute_invariant_rows(inv, &keys)?;
        let block = trailing_block(&permuted, t);
        match condition_number(&block) {
            Ok(cond) if cond < tau => return Ok((keys, permuted, block)),
            Ok(_) => continue,
            Err(Error::SingularMatrix(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::ConditioningFailure(format!(
        "no permutation draw reached condition number below {tau} in {max_times} attempts"
    )))
}

fn trailing_block(permuted: &Matrix, t: usize) -> Matrix {
    let d = permuted.cols();
    let mut block = Matrix::zeros(t, t);
    for i in 0..t {
        let row = permuted.row(i);
        block.row_mut(i).copy_from_slice(&row[d - t..]);
    }
    block
}

/// Solve for the watermark row: the first `d - t` slots keep `x_known`, the
/// last `t` hold `u / scale_wm` where `A2 u^T = -A1 x_known^T`.
pub fn solve_watermark_row(
    a_perm: &Matrix,
    x_known: &[f64],
    scale_wm: f64,
) -> Result<Vec<f64>> {
    let t = a_perm.rows();
    let d = a_perm.cols();
    if x_known.len() != d - t {
        return Err(Error::InvalidArgument(format!(
            "known slot count {} does not match d - t = {}",
            x_known.len(),
            d - t
        )));
    }
    let block = trailing_block(a_perm, t);
    let lu = lu_factor(&block)?;
    solve_watermark_row_with(a_perm, &lu, x_known, scale_wm)
}

pub(crate) fn solve_watermark_row_with(
    a_perm: &Matrix,
    lu: &LuFactors,
    x_known: &[f64],
    scale_wm: f64,
) -> Result<Vec<f64>> {
    let t = a_perm.rows();
    let d = a_perm.cols();
    let rhs: Vec<f64> = (0..t)
        .map(|i| -dot(&a_perm.row(i)[..d - t], x_known))
        .collect();
    let u = lu.solve(&rhs);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix(
            "watermark solve produced non-finite values".into(),
        ));
    }
    let mut row = Vec::with_capacity(d);
    row.extend_from_slice(x_known);
    row.extend(u.iter().map(|v| v / scale_wm));
    Ok(row)
}

/// The detection statistic: permute the row with the key, multiply the
/// last `t` slots back up by `scale_wm`, and take the absolute value of
/// the summed invariant residuals.
pub fn watermark_statistic(
    a_perm: &Matrix,
    row: &[f64],
    key: &PermKey,
    scale_wm: f64,
    t: usize,
) -> f64 {
    let d = row.len();
    let mut e = key.apply(row);
    for v in e[d - t..].iter_mut() {
        *v *= scale_wm;
    }
    statistic_inner(a_perm, &e)
}

fn statistic_inner(a_perm: &Matrix, scaled_row: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a_perm.rows() {
        sum += dot(a_perm.row(i), scaled_row);
    }
    sum.abs()
}

/// `num_it` statistics of the row under fresh uniform permutation keys.
pub fn null_distribution(
    a_perm: &Matrix,
    row: &[f64],
    scale_wm: f64,
    t: usize,
    num_it: usize,
    prng: &mut PrngStream,
) -> Vec<f64> {
    assert!(num_it >= 1, "num_it must be at least 1");
    let d = row.len();
    let mut map: Vec<usize> = (0..d).collect();
    let mut scratch = vec![0.0; d];
    let mut out = Vec::with_capacity(num_it);
    for _ in 0..num_it {
        for (i, slot) in map.iter_mut().enumerate() {
            *slot = i;
        }
        crate::keys::fisher_yates(prng, &mut map);
        for (j, &m) in map.iter().enumerate() {
            scratch[j] = row[m];
        }
        for v in scratch[d - t..].iter_mut() {
            *v *= scale_wm;
        }
        out.push(statistic_inner(a_perm, &scratch));
    }
    out
}

/// Number of samples at or below `value`; ties count against the
/// watermark.
pub fn rank_of(value: f64, samples: &[f64]) -> usize {
    assert!(!samples.is_empty(), "rank_of needs samples");
    samples.iter().filter(|&&x| x <= value).count()
}

/// Embed a watermark. Draws the invariant rows, conditions the permuted
/// invariant matrix, then rewrites each selected embedding row so exactly
/// `t` of its coordinates carry solved values. Everything outside those
/// rows is untouched.
pub fn insert_watermark(
    model: &ModelBundle,
    cfg: &InsertionConfig,
    prng: &mut PrngStream,
) -> Result<(ModelBundle, SingleUserKey)> {
    model.validate()?;
    cfg.validate(model.s, model.d)?;
    let root = prng.next_u64();

    let invariant_positions = PrngStream::derived(root, tags::INVARIANT_ROWS)
        .sample_distinct(cfg.t, model.s, &[]);
    let inv = compute_invariants(
        &model.w_e,
        &model.layers[0].w_q,
        &model.layers[0].w_k,
        &invariant_positions,
    )?;
    let mut cond_prng = PrngStream::derived(root, tags::CONDITIONED_PERMS);
    let (invariant_perms, a_perm, block) =
        choose_conditioned_permutations(&inv, cfg.tau, cfg.max_times, &mut cond_prng)?;

    let watermark_positions = select_watermark_positions(
        &mut PrngStream::derived(root, tags::WATERMARK_ROWS),
        model.s,
        cfg.l,
        &invariant_positions,
    )?;
    let mut perm_prng = PrngStream::derived(root, tags::ROW_PERMS);
    let row_perms: Vec<PermKey> = (0..cfg.l)
        .map(|_| gen_permutation(&mut perm_prng, model.d))
        .collect();

    let lu = lu_factor(&block)?;
    let mut watermarked = model.clone();
    for (i, &pos) in watermark_positions.iter().enumerate() {
        let permuted = row_perms[i].apply(model.w_e.row(pos));
        let solved = solve_watermark_row_with(&a_perm, &lu, &permuted[..model.d - cfg.t], cfg.scale_wm)?;
        let restored = row_perms[i].inverse().apply(&solved);
        watermarked.w_e.set_row(pos, &restored);
    }
    watermarked.w_e.ensure_finite("watermarked embedding")?;

    let key = SingleUserKey {
        invariant_positions,
        watermark_positions,
        row_perms,
        invariant_perms,
        scale_wm: cfg.scale_wm,
        t: cfg.t,
        l: cfg.l,
        seed: root,
    };
    Ok((watermarked, key))
}

/// Score every watermark position of a key against its null distribution.
/// Rows are read from `row_source`; null streams are derived from the key
/// seed per position, so reports are reproducible and attack-invariant.
pub(crate) fn score_positions(
    row_source: &Matrix,
    a_perm: &Matrix,
    key: &SingleUserKey,
    num_it: usize,
) -> Vec<PositionRecord> {
    let null_root = mix64(key.seed, tags::NULLS);
    key.watermark_positions
        .par_iter()
        .enumerate()
        .map(|(i, &pos)| {
            let row = row_source.row(pos);
            let statistic =
                watermark_statistic(a_perm, row, &key.row_perms[i], key.scale_wm, key.t);
            let mut prng = PrngStream::new(mix64(null_root, i as u64));
            let nulls = null_distribution(a_perm, row, key.scale_wm, key.t, num_it, &mut prng);
            PositionRecord {
                position: pos,
                statistic,
                rank: rank_of(statistic, &nulls),
                num_it,
            }
        })
        .collect()
}

/// Extract a watermark from a suspect model.
///
/// Pipeline: recover the attacker's dimension permutation against the
/// reference embedding, correct the frame, recompute the invariant matrix
/// from the corrected suspect, then rank each position's statistic inside
/// its null distribution. Success requires strictly more than `rho`
/// positions below the `beta` rank threshold.
pub fn extract_watermark(
    reference: &ModelBundle,
    suspect: &ModelBundle,
    key: &SingleUserKey,
    beta: f64,
    rho: usize,
    num_it: usize,
) -> Result<DetectionReport> {
    if reference.s != suspect.s || reference.d != suspect.d {
        return Err(Error::InvalidArgument(
            "reference and suspect dimensions differ".into(),
        ));
    }
    key.validate(suspect.s, suspect.d)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    if num_it == 0 {
        return Err(Error::InvalidArgument("num_it must be at least 1".into()));
    }

    let pi_hat = recover_permutation(&reference.w_e, &suspect.w_e)?;
    let corrected = apply_frame_correction(suspect, &pi_hat)?;
    let inv = compute_invariants(
        &corrected.w_e,
        &corrected.layers[0].w_q,
        &corrected.layers[0].w_k,
        &key.invariant_positions,
    )?;
    let a_perm = permute_invariant_rows(&inv, &key.invariant_perms)?;
    let records = score_positions(&corrected.w_e, &a_perm, key, num_it);
    Ok(DetectionReport::from_records(records, beta, rho, num_it))
}
