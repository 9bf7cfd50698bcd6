//! Multi-user scheme: orthogonal-frame noise that hides watermark
//! positions, per-user insertion in that frame, and extraction with user
//! attribution.
//!
//! Each user's copy gets fresh noise drawn from a per-user seed. With
//! shared noise, a pairwise diff of two copies would expose exactly the
//! union of their watermark rows; per-user noise makes every row differ.

use crate::error::{Error, Result};
use crate::invariant::{
    apply_frame_correction, compute_invariants, permute_invariant_rows, recover_permutation,
};
use crate::keys::{gen_permutation, OrthoKey, PermKey};
use crate::keystore::{MultiUserContext, SingleUserKey, UserKey};
use crate::matrix::{mean_std, Matrix};
use crate::model::ModelBundle;
use crate::prng::{mix64, PrngStream};
use crate::single::{
    choose_conditioned_permutations, score_positions, select_watermark_positions, tags,
    DetectionReport, InsertionConfig,
};
use crate::keys::gen_orthogonal;
use crate::matrix::lu_factor;

impl MultiUserContext {
    /// Fresh context for a base embedding: draws the orthogonal frame and
    /// the shared invariant rows, and records the noise amplitude.
    pub fn new(
        base_w_e: &Matrix,
        t: usize,
        num_noise: usize,
        prng: &mut PrngStream,
    ) -> Result<Self> {
        let d = base_w_e.cols();
        let s = base_w_e.rows();
        if t == 0 || t > d {
            return Err(Error::InvalidArgument(format!("t={t} must be in [1, {d}]")));
        }
        if num_noise > d {
            return Err(Error::InvalidArgument(format!(
                "num_noise={num_noise} exceeds dimension {d}"
            )));
        }
        let root = prng.next_u64();
        let b = gen_orthogonal(&mut PrngStream::derived(root, 7), d)?;
        let invariant_positions =
            PrngStream::derived(root, tags::INVARIANT_ROWS).sample_distinct(t, s, &[]);
        let (_, sigma_e) = mean_std(base_w_e.data());
        Ok(MultiUserContext {
            b,
            invariant_positions,
            num_noise,
            sigma_e,
            users: Vec::new(),
        })
    }
}

/// Plant `num_noise` entries of value +/- sigma_E per row in the frame of
/// `b`, skipping `skip_rows`, where sigma_E is the standard deviation of
/// all input entries. The whole matrix round-trips through the frame, so
/// skipped rows come back bit-identical to `(W_e B) B^T`.
pub fn add_noise(
    w_e: &Matrix,
    b: &OrthoKey,
    num_noise: usize,
    skip_rows: &[usize],
    prng: &mut PrngStream,
) -> Result<Matrix> {
    let d = w_e.cols();
    if b.dim() != d {
        return Err(Error::InvalidArgument(
            "orthogonal frame does not match the embedding dimension".into(),
        ));
    }
    if num_noise > d {
        return Err(Error::InvalidArgument(format!(
            "num_noise={num_noise} exceeds dimension {d}"
        )));
    }
    let (_, sigma_e) = mean_std(w_e.data());
    let skip: std::collections::HashSet<usize> = skip_rows.iter().copied().collect();
    let mut framed = w_e.matmul(&b.b)?;
    for i in 0..framed.rows() {
        if skip.contains(&i) {
            continue;
        }
        let coords = prng.sample_distinct(num_noise, d, &[]);
        let row = framed.row_mut(i);
        for (j, &c) in coords.iter().enumerate() {
            row[c] = if j % 2 == 0 { sigma_e } else { -sigma_e };
        }
    }
    framed.matmul_transpose_b(&b.b)
}

/// Insert one user's watermark on top of the shared base embedding.
///
/// Pipeline: draw the user's positions away from the shared invariant
/// rows, add per-user noise everywhere else, recompute the invariants from
/// the noisy embedding, solve each row in the orthogonal frame, and map
/// the solved rows back. The user's key is registered in the context and
/// returned.
pub fn insert_watermark_user(
    base_w_e: &Matrix,
    model: &ModelBundle,
    ctx: &mut MultiUserContext,
    user_id: &str,
    cfg: &InsertionConfig,
    prng: &mut PrngStream,
) -> Result<(ModelBundle, UserKey)> {
    model.validate()?;
    cfg.validate(model.s, model.d)?;
    if base_w_e.rows() != model.s || base_w_e.cols() != model.d {
        return Err(Error::InvalidArgument(
            "base embedding does not match the model dimensions".into(),
        ));
    }
    if ctx.invariant_positions.len() != cfg.t {
        return Err(Error::InvalidArgument(
            "context invariant rows do not match cfg.t".into(),
        ));
    }
    if ctx.users.iter().any(|u| u.user_id == user_id) {
        return Err(Error::InvalidArgument(format!("duplicate user id {user_id}")));
    }

    let root = prng.next_u64();
    let watermark_positions = select_watermark_positions(
        &mut PrngStream::derived(root, tags::WATERMARK_ROWS),
        model.s,
        cfg.l,
        &ctx.invariant_positions,
    )?;

    let noise_seed = mix64(root, tags::NOISE);
    let noisy = add_noise(
        base_w_e,
        &ctx.b,
        ctx.num_noise,
        &watermark_positions,
        &mut PrngStream::new(noise_seed),
    )?;

    let inv = compute_invariants(
        &noisy,
        &model.layers[0].w_q,
        &model.layers[0].w_k,
        &ctx.invariant_positions,
    )?;
    let mut cond_prng = PrngStream::derived(root, tags::CONDITIONED_PERMS);
    let (invariant_perms, a_perm, block) =
        choose_conditioned_permutations(&inv, cfg.tau, cfg.max_times, &mut cond_prng)?;

    let mut perm_prng = PrngStream::derived(root, tags::ROW_PERMS);
    let row_perms: Vec<PermKey> = (0..cfg.l)
        .map(|_| gen_permutation(&mut perm_prng, model.d))
        .collect();

    let lu = lu_factor(&block)?;
    let mut user_model = model.clone();
    user_model.w_e = noisy;
    for (i, &pos) in watermark_positions.iter().enumerate() {
        // Solve in the orthogonal frame, then map back row by row.
        let framed = crate::matrix::vec_mat(user_model.w_e.row(pos), &ctx.b.b);
        let permuted = row_perms[i].apply(&framed);
        let solved = crate::single::solve_watermark_row_with(
            &a_perm,
            &lu,
            &permuted[..model.d - cfg.t],
            cfg.scale_wm,
        )?;
        let unpermuted = row_perms[i].inverse().apply(&solved);
        let restored = mat_vec_transpose(&ctx.b.b, &unpermuted);
        user_model.w_e.set_row(pos, &restored);
    }
    user_model.w_e.ensure_finite("user embedding")?;

    let key = SingleUserKey {
        invariant_positions: ctx.invariant_positions.clone(),
        watermark_positions,
        row_perms,
        invariant_perms,
        scale_wm: cfg.scale_wm,
        t: cfg.t,
        l: cfg.l,
        seed: root,
    };
    let user = UserKey {
        user_id: user_id.to_string(),
        key,
        noise_seed,
        num_noise: ctx.num_noise,
    };
    ctx.add_user(user.clone())?;
    Ok((user_model, user))
}

/// `v * m^T` for a row vector.
fn mat_vec_transpose(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| crate::matrix::dot(m.row(i), v))
        .collect()
}

/// Multi-user extraction outcome.
#[derive(Debug, Clone)]
pub struct MultiDetection {
    /// Users whose detection count exceeded the threshold.
    pub detected: Vec<String>,
    /// Per-user reports, in context registration order.
    pub reports: Vec<(String, DetectionReport)>,
}

/// Extract against every registered user key and return all users whose
/// watermark clears the threshold.
pub fn extract_watermark_multi(
    reference_base: &ModelBundle,
    suspect: &ModelBundle,
    ctx: &MultiUserContext,
    beta: f64,
    rho: usize,
    num_it: usize,
) -> Result<MultiDetection> {
    if ctx.users.is_empty() {
        return Err(Error::InvalidArgument("context has no registered users".into()));
    }
    if reference_base.s != suspect.s || reference_base.d != suspect.d {
        return Err(Error::InvalidArgument(
            "reference and suspect dimensions differ".into(),
        ));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    if num_it == 0 {
        return Err(Error::InvalidArgument("num_it must be at least 1".into()));
    }

    let pi_hat = recover_permutation(&reference_base.w_e, &suspect.w_e)?;
    let corrected = apply_frame_correction(suspect, &pi_hat)?;
    let inv = compute_invariants(
        &corrected.w_e,
        &corrected.layers[0].w_q,
        &corrected.layers[0].w_k,
        &ctx.invariant_positions,
    )?;
    let framed = corrected.w_e.matmul(&ctx.b.b)?;

    let mut detected = Vec::new();
    let mut reports = Vec::with_capacity(ctx.users.len());
    for user in &ctx.users {
        user.key.validate(suspect.s, suspect.d)?;
        let a_perm = permute_invariant_rows(&inv, &user.key.invariant_perms)?;
        let records = score_positions(&framed, &a_perm, &user.key, num_it);
        let report = DetectionReport::from_records(records, beta, rho, num_it);
        if report.success {
            detected.push(user.user_id.clone());
        }
        reports.push((user.user_id.clone(), report));
    }
    Ok(MultiDetection { detected, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_synthetic_model;

    #[test]
    fn zero_noise_round_trips_through_the_frame() {
        let model = gen_synthetic_model(40, 64, 16, 32, 1, 0.02).unwrap();
        let mut prng = PrngStream::new(1);
        let b = gen_orthogonal(&mut prng, 16).unwrap();
        let out = add_noise(&model.w_e, &b, 0, &[], &mut prng).unwrap();
        let mut max_dev = 0.0f64;
        for (a, c) in model.w_e.data().iter().zip(out.data().iter()) {
            max_dev = max_dev.max((a - c).abs());
        }
        assert!(max_dev <= 1e-10, "max deviation {max_dev}");
    }

    #[test]
    fn skipping_every_row_plants_nothing() {
        let model = gen_synthetic_model(41, 48, 16, 32, 1, 0.02).unwrap();
        let mut prng = PrngStream::new(2);
        let b = gen_orthogonal(&mut prng, 16).unwrap();
        let all: Vec<usize> = (0..48).collect();
        let out = add_noise(&model.w_e, &b, 5, &all, &mut prng).unwrap();
        for (a, c) in model.w_e.data().iter().zip(out.data().iter()) {
            assert!((a - c).abs() <= 1e-10);
        }
    }

    #[test]
    fn too_many_noise_coordinates_is_invalid() {
        let model = gen_synthetic_model(42, 48, 16, 32, 1, 0.02).unwrap();
        let mut prng = PrngStream::new(3);
        let b = gen_orthogonal(&mut prng, 16).unwrap();
        assert!(matches!(
            add_noise(&model.w_e, &b, 17, &[], &mut prng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn noise_keeps_row_norms_roughly_stable() {
        // Mean relative change of the row 2-norm stays within 5% at
        // num_noise = 5, d = 64, over 100 modified rows.
        let model = gen_synthetic_model(43, 128, 64, 64, 1, 0.02).unwrap();
        let mut prng = PrngStream::new(4);
        let b = gen_orthogonal(&mut prng, 64).unwrap();
        let out = add_noise(&model.w_e, &b, 5, &[], &mut prng).unwrap();
        let mut rel_sum = 0.0;
        for i in 0..100 {
            let before: f64 = model.w_e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let after: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            rel_sum += (after - before).abs() / before;
        }
        let mean_rel = rel_sum / 100.0;
        assert!(mean_rel <= 0.05, "mean relative norm change {mean_rel}");
    }

    #[test]
    fn context_sigma_matches_recomputation() {
        let model = gen_synthetic_model(44, 96, 16, 32, 1, 0.02).unwrap();
        let ctx = MultiUserContext::new(&model.w_e, 4, 4, &mut PrngStream::new(5)).unwrap();
        let (_, sigma) = mean_std(model.w_e.data());
        assert!((ctx.sigma_e - sigma).abs() <= 1e-12);
    }
}
