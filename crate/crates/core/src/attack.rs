//! Attack transforms: functional-equivalence rewrites, global magnitude
//! pruning, symmetric quantization, a Gaussian perturbation proxy for
//! fine-tuning, and collusion combiners.
//!
//! All transforms are pure model-to-model functions.

use crate::error::{Error, Result};
use crate::keys::{gen_invertible, gen_permutation, permute_columns, permute_rows, InvertiblePair, PermKey};
use crate::matrix::{mean_std, Matrix};
use crate::model::ModelBundle;
use crate::prng::PrngStream;

/// Parameters of a functional-equivalence rewrite: an embedding-dimension
/// permutation, per-layer hidden permutations, invertible factor pairs for
/// the attention projections, and strictly positive scaling lists.
#[derive(Debug, Clone)]
pub struct EquivParams {
    pub pi: PermKey,
    pub pi_ffn: Vec<PermKey>,
    pub l_b: Vec<InvertiblePair>,
    pub l_c: Vec<InvertiblePair>,
    /// `n_layers + 1` entries; the last one lands on the output head.
    pub l_a: Vec<f64>,
    pub l_d: Vec<f64>,
    pub l_e: Vec<f64>,
}

impl EquivParams {
    pub fn validate(&self, model: &ModelBundle) -> Result<()> {
        let n = model.n_layers;
        if self.pi.len() != model.d {
            return Err(Error::InvalidArgument("pi length does not match d".into()));
        }
        if self.pi_ffn.len() != n || self.l_b.len() != n || self.l_c.len() != n {
            return Err(Error::InvalidArgument("per-layer list lengths are off".into()));
        }
        if self.l_a.len() != n + 1 || self.l_d.len() != n || self.l_e.len() != n {
            return Err(Error::InvalidArgument("scale list lengths are off".into()));
        }
        if self.pi_ffn.iter().any(|p| p.len() != model.d_ff) {
            return Err(Error::InvalidArgument("pi_ffn length does not match d_ff".into()));
        }
        if self
            .l_b
            .iter()
            .chain(&self.l_c)
            .any(|p| p.m.rows() != model.d || p.m.cols() != model.d)
        {
            return Err(Error::InvalidArgument("invertible shapes do not match d".into()));
        }
        if self
            .l_a
            .iter()
            .chain(&self.l_d)
            .chain(&self.l_e)
            .any(|&s| !(s > 0.0))
        {
            return Err(Error::InvalidArgument(
                "scaling factors must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    /// Identity parameters: applying them leaves the model bit-identical.
    pub fn identity(model: &ModelBundle) -> Self {
        let n = model.n_layers;
        let id_pair = InvertiblePair {
            m: Matrix::identity(model.d),
            m_inv: Matrix::identity(model.d),
        };
        EquivParams {
            pi: PermKey::identity(model.d),
            pi_ffn: vec![PermKey::identity(model.d_ff); n],
            l_b: vec![id_pair.clone(); n],
            l_c: vec![id_pair; n],
            l_a: vec![1.0; n + 1],
            l_d: vec![1.0; n],
            l_e: vec![1.0; n],
        }
    }

    /// Parameters that undo this rewrite: transposed permutations, swapped
    /// invertible pairs, reciprocal scales.
    pub fn inverse(&self) -> Self {
        EquivParams {
            pi: self.pi.inverse(),
            pi_ffn: self.pi_ffn.iter().map(|p| p.inverse()).collect(),
            l_b: self.l_b.iter().map(|p| p.swapped()).collect(),
            l_c: self.l_c.iter().map(|p| p.swapped()).collect(),
            l_a: self.l_a.iter().map(|s| 1.0 / s).collect(),
            l_d: self.l_d.iter().map(|s| 1.0 / s).collect(),
            l_e: self.l_e.iter().map(|s| 1.0 / s).collect(),
        }
    }
}

/// Draw random equivalence parameters: uniform permutations, near-identity
/// invertibles, and log-uniform scales in [0.5, 2].
pub fn gen_equiv_params(prng: &mut PrngStream, model: &ModelBundle) -> Result<EquivParams> {
    let n = model.n_layers;
    let pi = gen_permutation(prng, model.d);
    let mut pi_ffn = Vec::with_capacity(n);
    let mut l_b = Vec::with_capacity(n);
    let mut l_c = Vec::with_capacity(n);
    for _ in 0..n {
        pi_ffn.push(gen_permutation(prng, model.d_ff));
        l_b.push(gen_invertible(prng, model.d)?);
        l_c.push(gen_invertible(prng, model.d)?);
    }
    let mut log_uniform = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|_| (std::f64::consts::LN_2 * (2.0 * prng.next_f64() - 1.0)).exp())
            .collect()
    };
    let params = EquivParams {
        pi,
        pi_ffn,
        l_b,
        l_c,
        l_a: log_uniform(n + 1),
        l_d: log_uniform(n),
        l_e: log_uniform(n),
    };
    params.validate(model)?;
    Ok(params)
}

/// Rewrite every tensor so the model computes the same function in a
/// permuted, rescaled coordinate frame. The embedding picks up
/// `a_1 * W_e * pi`; each layer's projections absorb the matching inverse
/// factors; the output head removes the final scale and permutation.
pub fn apply_equiv_transform(model: &ModelBundle, params: &EquivParams) -> Result<ModelBundle> {
    model.validate()?;
    params.validate(model)?;
    let pi = &params.pi;
    let mut out = model.clone();

    out.w_e = permute_columns(&model.w_e, pi)?.scaled(params.l_a[0]);

    for (i, layer) in model.layers.iter().enumerate() {
        let a_i = params.l_a[i];
        let a_next = params.l_a[i + 1];
        let d_i = params.l_d[i];
        let e_i = params.l_e[i];
        let b = &params.l_b[i];
        let c = &params.l_c[i];
        let pi_f = &params.pi_ffn[i];
        let dst = &mut out.layers[i];

        dst.w_q = permute_rows(&layer.w_q, pi)?.matmul(&b.m)?.scaled(1.0 / a_i);
        dst.w_k = permute_rows(&layer.w_k, pi)?
            .matmul_transpose_b(&b.m_inv)?
            .scaled(1.0 / a_i);
        dst.w_v = permute_rows(&layer.w_v, pi)?.matmul(&c.m)?.scaled(1.0 / a_i);
        dst.w_o = permute_columns(&c.m_inv.matmul(&layer.w_o)?, pi)?.scaled(a_i);
        dst.w_1 = permute_columns(&permute_rows(&layer.w_1, pi)?, pi_f)?.scaled(e_i);
        dst.w_2 = permute_columns(&permute_rows(&layer.w_2, pi_f)?, pi)?.scaled(1.0 / e_i);
        dst.gamma1 = permute_columns(&layer.gamma1, pi)?.scaled(d_i);
        dst.beta1 = permute_columns(&layer.beta1, pi)?.scaled(d_i);
        dst.gamma2 = permute_columns(&layer.gamma2, pi)?.scaled(a_next);
        dst.beta2 = permute_columns(&layer.beta2, pi)?.scaled(a_next);
    }

    let a_last = params.l_a[model.n_layers];
    out.w_c = permute_rows(&model.w_c, pi)?.scaled(1.0 / a_last);
    Ok(out)
}

/// Zero the `floor(r * N)` smallest-magnitude entries across all tensors,
/// breaking ties by flat index order.
pub fn prune_global(model: &ModelBundle, r: f64) -> Result<ModelBundle> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "pruning ratio {r} outside [0, 1]"
        )));
    }
    let mut out = model.clone();
    if r == 0.0 {
        return Ok(out);
    }
    let mut magnitudes: Vec<(f64, usize)> = Vec::new();
    {
        let mut flat = 0usize;
        for (_, tensor) in model.tensors() {
            for &v in tensor.data() {
                magnitudes.push((v.abs(), flat));
                flat += 1;
            }
        }
    }
    let total = magnitudes.len();
    let k = (r * total as f64).floor() as usize;
    if k == 0 {
        return Ok(out);
    }
    magnitudes.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mut zeroed = vec![false; total];
    for &(_, idx) in magnitudes.iter().take(k) {
        zeroed[idx] = true;
    }
    let mut flat = 0usize;
    for (_, tensor) in out.tensors_mut() {
        for v in tensor.data_mut() {
            if zeroed[flat] {
                *v = 0.0;
            }
            flat += 1;
        }
    }
    Ok(out)
}

/// Symmetric uniform quantization per tensor: the step is
/// `max|w| / (2^(bits-1) - 1)`; all-zero tensors pass through untouched.
pub fn quantize(model: &ModelBundle, bits: u8) -> Result<ModelBundle> {
    if bits != 4 && bits != 8 {
        return Err(Error::InvalidArgument(format!(
            "quantization bits must be 4 or 8, got {bits}"
        )));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = model.clone();
    for (_, tensor) in out.tensors_mut() {
        let max_abs = tensor.max_abs();
        if max_abs == 0.0 {
            continue;
        }
        let step = max_abs / levels;
        for v in tensor.data_mut() {
            *v = (*v / step).round() * step;
        }
    }
    Ok(out)
}

/// Additive Gaussian noise with per-tensor standard deviation
/// `sigma_rel * std(tensor)`; a desk-scale stand-in for fine-tuning drift.
pub fn perturb(model: &ModelBundle, sigma_rel: f64, prng: &mut PrngStream) -> Result<ModelBundle> {
    if !(sigma_rel >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_rel must be non-negative, got {sigma_rel}"
        )));
    }
    let mut out = model.clone();
    if sigma_rel == 0.0 {
        return Ok(out);
    }
    for (_, tensor) in out.tensors_mut() {
        let (_, std) = mean_std(tensor.data());
        if std == 0.0 {
            continue;
        }
        let sigma = sigma_rel * std;
        for v in tensor.data_mut() {
            *v += sigma * prng.normal();
        }
    }
    Ok(out)
}

/// How colluders combine their copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollusionMode {
    Average,
    Max,
    Median,
    /// Each embedding row comes from a uniformly chosen source model;
    /// remaining tensors are taken from the first model.
    CopyPaste,
}

impl std::str::FromStr for CollusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            "median" => Ok(Self::Median),
            "copy_paste" | "copy-paste" => Ok(Self::CopyPaste),
            other => Err(Error::InvalidArgument(format!(
                "unknown collusion mode {other}"
            ))),
        }
    }
}

/// Combine several users' copies element-wise (or row-wise for
/// copy-paste).
pub fn collude(
    models: &[ModelBundle],
    mode: CollusionMode,
    prng: &mut PrngStream,
) -> Result<ModelBundle> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("collusion needs at least one model".into()))?;
    for m in models {
        if m.s != first.s || m.d != first.d || m.d_ff != first.d_ff || m.n_layers != first.n_layers
        {
            return Err(Error::InvalidArgument(
                "colluding models have mismatched shapes".into(),
            ));
        }
    }
    let mut out = first.clone();
    match mode {
        CollusionMode::CopyPaste => {
            for i in 0..out.s {
                let src = prng.gen_range(models.len());
                out.w_e.set_row(i, models[src].w_e.row(i));
            }
        }
        _ => {
            let sources: Vec<Vec<(String, &Matrix)>> =
                models.iter().map(|m| m.tensors()).collect();
            let mut combined = out.tensors_mut();
            for (ti, (_, tensor)) in combined.iter_mut().enumerate() {
                let n = tensor.data().len();
                let mut column = vec![0.0f64; models.len()];
                for idx in 0..n {
                    for (mi, src) in sources.iter().enumerate() {
                        column[mi] = src[ti].1.data()[idx];
                    }
                    let v = match mode {
                        CollusionMode::Average => {
                            column.iter().sum::<f64>() / column.len() as f64
                        }
                        CollusionMode::Max => {
                            column.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        }
                        CollusionMode::Median => {
                            column.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                            let mid = column.len() / 2;
                            if column.len() % 2 == 1 {
                                column[mid]
                            } else {
                                0.5 * (column[mid - 1] + column[mid])
                            }
                        }
                        CollusionMode::CopyPaste => unreachable!(),
                    };
                    tensor.data_mut()[idx] = v;
                }
            }
        }
    }
    Ok(out)
}
