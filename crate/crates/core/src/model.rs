//! Synthetic transformer bundles and the toy forward pass.
//!
//! The architecture is deliberately minimal: per layer, self-attention
//! (`softmax(QK^T/sqrt(d)) V W_o`) followed by LayerNorm, then a ReLU MLP
//! followed by LayerNorm, with no residual connections and no variance
//! floor in the norm. That exact shape is what makes the scale/permutation
//! equivalence transforms in [`crate::attack`] preserve outputs bit-tightly.

use crate::error::{Error, Result};
use crate::matrix::{mean_std, Matrix};
use crate::prng::PrngStream;

/// Per-layer attention and MLP tensors. Norm parameters are 1 x d rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub w_2: Matrix,
    pub gamma1: Matrix,
    pub beta1: Matrix,
    pub gamma2: Matrix,
    pub beta2: Matrix,
}

/// A synthetic transformer's full named tensor set plus dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub s: usize,
    pub d: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub w_e: Matrix,
    pub layers: Vec<LayerWeights>,
    pub w_c: Matrix,
}

impl ModelBundle {
    /// Check that every tensor shape is consistent with `(s, d, d_ff)`.
    pub fn validate(&self) -> Result<()> {
        let shape_err = |name: &str| {
            Err(Error::InvalidArgument(format!(
                "tensor {name} has inconsistent shape"
            )))
        };
        if self.n_layers == 0 || self.layers.len() != self.n_layers {
            return Err(Error::InvalidArgument(
                "layer count must be at least 1 and match the layer list".into(),
            ));
        }
        if self.w_e.rows() != self.s || self.w_e.cols() != self.d {
            return shape_err("w_e");
        }
        if self.w_c.rows() != self.d || self.w_c.cols() != self.s {
            return shape_err("w_c");
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let square = [
                ("w_q", &layer.w_q),
                ("w_k", &layer.w_k),
                ("w_v", &layer.w_v),
                ("w_o", &layer.w_o),
            ];
            for (name, m) in square {
                if m.rows() != self.d || m.cols() != self.d {
                    return shape_err(&format!("layers.{i}.{name}"));
                }
            }
            if layer.w_1.rows() != self.d || layer.w_1.cols() != self.d_ff {
                return shape_err(&format!("layers.{i}.w_1"));
            }
            if layer.w_2.rows() != self.d_ff || layer.w_2.cols() != self.d {
                return shape_err(&format!("layers.{i}.w_2"));
            }
            for (name, m) in [
                ("gamma1", &layer.gamma1),
                ("beta1", &layer.beta1),
                ("gamma2", &layer.gamma2),
                ("beta2", &layer.beta2),
            ] {
                if m.rows() != 1 || m.cols() != self.d {
                    return shape_err(&format!("layers.{i}.{name}"));
                }
            }
        }
        Ok(())
    }

    /// Canonical (name, tensor) listing, used by serialization and by the
    /// whole-model attacks.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("w_e".to_string(), &self.w_e)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("w_q", &layer.w_q),
                ("w_k", &layer.w_k),
                ("w_v", &layer.w_v),
                ("w_o", &layer.w_o),
                ("w_1", &layer.w_1),
                ("w_2", &layer.w_2),
                ("gamma1", &layer.gamma1),
                ("beta1", &layer.beta1),
                ("gamma2", &layer.gamma2),
                ("beta2", &layer.beta2),
            ] {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("w_c".to_string(), &self.w_c));
        out
    }

    /// Mutable variant of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![("w_e".to_string(), &mut self.w_e)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in [
                ("w_q", &mut layer.w_q),
                ("w_k", &mut layer.w_k),
                ("w_v", &mut layer.w_v),
                ("w_o", &mut layer.w_o),
                ("w_1", &mut layer.w_1),
                ("w_2", &mut layer.w_2),
                ("gamma1", &mut layer.gamma1),
                ("beta1", &mut layer.beta1),
                ("gamma2", &mut layer.gamma2),
                ("beta2", &mut layer.beta2),
            ] {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("w_c".to_string(), &mut self.w_c));
        out
    }

    /// Row-stochastic token distribution for a token sequence; see module
    /// docs for the exact per-layer pipeline.
    pub fn forward(&self, token_ids: &[usize]) -> Result<Matrix> {
        if token_ids.is_empty() {
            return Err(Error::InvalidArgument("token sequence is empty".into()));
        }
        for &t in token_ids {
            if t >= self.s {
                return Err(Error::InvalidArgument(format!(
                    "token id {t} out of range for vocabulary size {}",
                    self.s
                )));
            }
        }
        let len = token_ids.len();
        let mut x = Matrix::zeros(len, self.d);
        for (i, &t) in token_ids.iter().enumerate() {
            x.set_row(i, self.w_e.row(t));
        }

        let inv_sqrt_d = 1.0 / (self.d as f64).sqrt();
        for layer in &self.layers {
            let q = x.matmul(&layer.w_q)?;
            let k = x.matmul(&layer.w_k)?;
            let v = x.matmul(&layer.w_v)?;
            let mut scores = q.matmul_transpose_b(&k)?;
            for s in scores.data_mut() {
                *s *= inv_sqrt_d;
            }
            let attn = softmax_rows(&scores);
            let ctx = attn.matmul(&v)?.matmul(&layer.w_o)?;
            x = layer_norm(&ctx, &layer.gamma1, &layer.beta1)?;

            let mut hidden = x.matmul(&layer.w_1)?;
            for h in hidden.data_mut() {
                if *h < 0.0 {
                    *h = 0.0;
                }
            }
            let mlp = hidden.matmul(&layer.w_2)?;
            x = layer_norm(&mlp, &layer.gamma2, &layer.beta2)?;
        }

        let logits = x.matmul(&self.w_c)?;
        let out = softmax_rows(&logits);
        out.ensure_finite("forward output")?;
        Ok(out)
    }
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row LayerNorm with epsilon 0 and population standard deviation.
/// A zero-variance row is an error rather than being floored: the exact
/// scale invariance of the norm is load-bearing for equivalence attacks.
fn layer_norm(m: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<Matrix> {
    let d = m.cols();
    let mut out = Matrix::zeros(m.rows(), d);
    let g = gamma.row(0);
    let b = beta.row(0);
    for i in 0..m.rows() {
        let row = m.row(i);
        let (mean, std) = mean_std(row);
        if std == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "zero-variance vector at row {i} ahead of normalization"
            )));
        }
        let dst = out.row_mut(i);
        for j in 0..d {
            dst[j] = g[j] * (row[j] - mean) / std + b[j];
        }
    }
    Ok(out)
}

/// Generate a synthetic transformer with i.i.d. `Normal(0, sigma_init)`
/// weights, all-ones norm gains, and all-zeros norm biases. Deterministic
/// in the seed.
pub fn gen_synthetic_model(
    seed: u64,
    s: usize,
    d: usize,
    d_ff: usize,
    n_layers: usize,
    sigma_init: f64,
) -> Result<ModelBundle> {
    if d < 8 || s <= d {
        return Err(Error::InvalidArgument(format!(
            "need vocabulary s > embedding d >= 8, got s={s}, d={d}"
        )));
    }
    if d_ff < d {
        return Err(Error::InvalidArgument(format!(
            "need d_ff >= d, got d_ff={d_ff}, d={d}"
        )));
    }
    if n_layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    if !(sigma_init > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_init must be positive, got {sigma_init}"
        )));
    }

    let mut prng = PrngStream::new(seed);
    let mut gaussian = |rows: usize, cols: usize| -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| sigma_init * prng.normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("shape by construction")
    };

    let w_e = gaussian(s, d);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(LayerWeights {
            w_q: gaussian(d, d),
            w_k: gaussian(d, d),
            w_v: gaussian(d, d),
            w_o: gaussian(d, d),
            w_1: gaussian(d, d_ff),
            w_2: gaussian(d_ff, d),
            gamma1: Matrix::from_vec(1, d, vec![1.0; d])?,
            beta1: Matrix::zeros(1, d),
            gamma2: Matrix::from_vec(1, d, vec![1.0; d])?,
            beta2: Matrix::zeros(1, d),
        });
    }
    let w_c = gaussian(d, s);

    let model = ModelBundle {
        s,
        d,
        d_ff,
        n_layers,
        w_e,
        layers,
        w_c,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_matches_requested_sigma() {
        let m = gen_synthetic_model(7, 512, 64, 128, 2, 0.02).unwrap();
        assert_eq!(m.w_e.rows(), 512);
        assert_eq!(m.w_e.cols(), 64);
        let (_, std) = mean_std(m.w_e.data());
        assert!((0.018..=0.022).contains(&std), "sample std {std}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic_model(7, 64, 16, 32, 2, 0.02).unwrap();
        let b = gen_synthetic_model(7, 64, 16, 32, 2, 0.02).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_inconsistent_dimensions() {
        assert!(matches!(
            gen_synthetic_model(7, 8, 16, 32, 1, 0.02),
            Err(Error::InvalidArgument(_))
        ));
        assert!(gen_synthetic_model(7, 32, 16, 8, 1, 0.02).is_err());
        assert!(gen_synthetic_model(7, 32, 16, 16, 0, 0.02).is_err());
        assert!(gen_synthetic_model(7, 32, 16, 16, 1, 0.0).is_err());
    }

    #[test]
    fn forward_rows_are_stochastic() {
        let m = gen_synthetic_model(3, 96, 16, 32, 2, 0.05).unwrap();
        let out = m.forward(&[0, 5, 17, 95]).unwrap();
        assert_eq!(out.rows(), 4);
        assert_eq!(out.cols(), 96);
        for i in 0..out.rows() {
            let sum: f64 = out.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn forward_rejects_out_of_range_token() {
        let m = gen_synthetic_model(3, 32, 8, 16, 1, 0.05).unwrap();
        assert!(matches!(
            m.forward(&[32]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn zero_variance_pre_norm_is_degenerate() {
        let mut m = gen_synthetic_model(3, 32, 8, 16, 1, 0.05).unwrap();
        // Zero attention output projection forces a constant pre-norm vector.
        m.layers[0].w_o = Matrix::zeros(8, 8);
        assert!(matches!(
            m.forward(&[1, 2]),
            Err(Error::DegenerateInput(_))
        ));
    }

    // Independent straight-line evaluator over nested Vecs; kept separate
    // from the Matrix code paths on purpose.
    fn naive_forward(m: &ModelBundle, tokens: &[usize]) -> Vec<Vec<f64>> {
        let to_vecs = |mat: &Matrix| -> Vec<Vec<f64>> {
            (0..mat.rows()).map(|i| mat.row(i).to_vec()).collect()
        };
        let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let n = a.len();
            let k = b.len();
            let mcols = b[0].len();
            let mut out = vec![vec![0.0; mcols]; n];
            for i in 0..n {
                for kk in 0..k {
                    for j in 0..mcols {
                        out[i][j] += a[i][kk] * b[kk][j];
                    }
                }
            }
            out
        };
        let transpose = |a: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; a.len()]; a[0].len()];
            for (i, row) in a.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[j][i] = *v;
                }
            }
            out
        };
        let softmax = |a: &mut Vec<Vec<f64>>| {
            for row in a.iter_mut() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        };
        let ln = |a: &Vec<Vec<f64>>, g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
            a.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let std = var.sqrt();
                    row.iter()
                        .enumerate()
                        .map(|(j, x)| g[j] * (x - mean) / std + b[j])
                        .collect()
                })
                .collect()
        };

        let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| m.w_e.row(t).to_vec()).collect();
        for layer in &m.layers {
            let q = mul(&x, &to_vecs(&layer.w_q));
            let k = mul(&x, &to_vecs(&layer.w_k));
            let v = mul(&x, &to_vecs(&layer.w_v));
            let mut scores = mul(&q, &transpose(&k));
            let scale = 1.0 / (m.d as f64).sqrt();
            for row in scores.iter_mut() {
                for s in row.iter_mut() {
                    *s *= scale;
                }
            }
            softmax(&mut scores);
            let ctx = mul(&mul(&scores, &v), &to_vecs(&layer.w_o));
            x = ln(&ctx, layer.gamma1.row(0), layer.beta1.row(0));
            let mut h = mul(&x, &to_vecs(&layer.w_1));
            for row in h.iter_mut() {
                for v in row.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let f = mul(&h, &to_vecs(&layer.w_2));
            x = ln(&f, layer.gamma2.row(0), layer.beta2.row(0));
        }
        let mut logits = mul(&x, &to_vecs(&m.w_c));
        softmax(&mut logits);
        logits
    }

    #[test]
    fn forward_matches_independent_evaluator() {
        // Identity-like single-layer toy plus a generic model; both must
        // agree with the naive evaluator to near machine precision.
        let mut toy = gen_synthetic_model(21, 24, 8, 8, 1, 0.5).unwrap();
        toy.layers[0].w_q = Matrix::identity(8);
        toy.layers[0].w_k = Matrix::identity(8);
        toy.layers[0].w_v = Matrix::identity(8);
        toy.layers[0].w_o = Matrix::identity(8);
        toy.layers[0].w_1 = Matrix::identity(8);
        toy.layers[0].w_2 = Matrix::identity(8);
        let generic = gen_synthetic_model(5, 40, 16, 24, 2, 0.1).unwrap();

        for (model, tokens) in [(&toy, vec![3usize]), (&toy, vec![1, 7, 2]), (&generic, vec![0, 9, 39, 4])] {
            let got = model.forward(&tokens).unwrap();
            let want = naive_forward(model, &tokens);
            for i in 0..tokens.len() {
                for j in 0..model.s {
                    assert!(
                        (got.get(i, j) - want[i][j]).abs() <= 1e-12,
                        "mismatch at ({i},{j})"
                    );
                }
            }
        }
    }
}
