//! Robust weight watermarks for transformer embedding matrices.
//!
//! The crate embeds owner- or user-specific watermarks into the rows of an
//! embedding matrix by solving linear constraints against an attack-stable
//! invariant of the model, extracts them with a rank statistic against
//! random-key null distributions, and ships the attack suite (functional
//! equivalence, pruning, quantization, perturbation, collusion) plus the
//! closed-form detection probabilities used to pick thresholds.
//!
//! Everything is deterministic in explicit 64-bit seeds.

pub mod attack;
pub mod error;
pub mod invariant;
pub mod io;
pub mod keys;
pub mod keystore;
pub mod matrix;
pub mod model;
pub mod multi;
pub mod prng;
pub mod prob;
pub mod single;

pub use attack::{
    apply_equiv_transform, collude, gen_equiv_params, perturb, prune_global, quantize,
    CollusionMode, EquivParams,
};
pub use error::{Error, Result};
pub use invariant::{
    apply_frame_correction, compute_invariants, condition_number, permute_invariant_rows,
    recover_permutation, InvariantMatrix,
};
pub use io::{load_model, save_model, save_model_with_meta};
pub use keys::{
    gen_invertible, gen_orthogonal, gen_permutation, InvertiblePair, OrthoKey, PermKey,
};
pub use keystore::{
    load_keystore, save_keystore, KeyStore, MultiUserContext, SingleUserKey, UserKey,
};
pub use matrix::Matrix;
pub use model::{gen_synthetic_model, LayerWeights, ModelBundle};
pub use multi::{add_noise, extract_watermark_multi, insert_watermark_user, MultiDetection};
pub use prng::PrngStream;
pub use prob::{binom_upper_tail, estimate_p, pr_u_random, pr_u_wrong, pr_wm_success, ProbParams};
pub use single::{
    choose_conditioned_permutations, extract_watermark, insert_watermark, null_distribution,
    rank_of, select_watermark_positions, solve_watermark_row, watermark_statistic,
    DetectionReport, InsertionConfig, PositionRecord,
};
