//! Decoupled cross-attention: a text branch and a parallel user branch with
//! separate key/value projections, combined additively.

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Key/value projections for one context branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchProjections {
    pub w_k: Array2<f64>, // (d_ctx, d_k)
    pub w_v: Array2<f64>, // (d_ctx, d_v)
}

impl BranchProjections {
    pub fn seeded(d_ctx: usize, d_k: usize, d_v: usize, seed: u64, tag: &str) -> Self {
        let mut rng = seeds::child_rng(seed, tag, 0);
        BranchProjections {
            w_k: linalg::gaussian_matrix(&mut rng, d_ctx, d_k, 1.0 / (d_ctx as f64).sqrt()),
            w_v: linalg::gaussian_matrix(&mut rng, d_ctx, d_v, 1.0 / (d_ctx as f64).sqrt()),
        }
    }

    pub fn identity(d: usize) -> Self {
        BranchProjections {
            w_k: Array2::eye(d),
            w_v: Array2::eye(d),
        }
    }
}

/// Shared query projection plus per-branch key/value projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoupledAttentionParams {
    pub w_q: Array2<f64>, // (d_q_in, d_k)
    pub text: BranchProjections,
    pub user: BranchProjections,
}

impl DecoupledAttentionParams {
    pub fn seeded(d_q_in: usize, d_ctx: usize, d_k: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = seeds::child_rng(seed, "attn_query", 0);
        DecoupledAttentionParams {
            w_q: linalg::gaussian_matrix(&mut rng, d_q_in, d_k, 1.0 / (d_q_in as f64).sqrt()),
            text: BranchProjections::seeded(d_ctx, d_k, d_v, seed, "attn_text"),
            user: BranchProjections::seeded(d_ctx, d_k, d_v, seed, "attn_user"),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.text.w_v.ncols()
    }
}

/// Everything the backward pass needs, per query row and branch.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub q_in: Array2<f64>,
    pub q_proj: Array2<f64>,
    pub text_ctx: Array2<f64>,
    pub user_ctx: Array2<f64>,
    pub text_weights: Array2<f64>, // (n, n_text)
    pub user_weights: Array2<f64>, // (n, n_user)
    pub text_v: Array2<f64>,
    pub user_v: Array2<f64>,
    pub text_out: Array2<f64>,
    pub user_out: Array2<f64>, // unscaled branch output
    pub user_scale: f64,
}

fn branch(
    q_proj: &Array2<f64>,
    ctx: &ArrayView2<f64>,
    proj: &BranchProjections,
    scale: f64,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let keys = ctx.dot(&proj.w_k); // (n_ctx, d_k)
    let values = ctx.dot(&proj.w_v); // (n_ctx, d_v)
    let n = q_proj.nrows();
    let n_ctx = keys.nrows();
    let mut weights = Array2::zeros((n, n_ctx));
    for (i, q) in q_proj.rows().into_iter().enumerate() {
        let logits: Vec<f64> = keys
            .rows()
            .into_iter()
            .map(|k| {
                linalg::dot(q.as_slice().expect("contiguous"), k.as_slice().expect("contiguous"))
                    * scale
            })
            .collect();
        let sm = linalg::softmax(&logits);
        for (j, w) in sm.iter().enumerate() {
            weights[[i, j]] = *w;
        }
    }
    let out = weights.dot(&values);
    (weights, values, out)
}

/// softmax(Q K^T / sqrt(d_k)) V + user_scale * softmax(Q K'^T / sqrt(d_k)) V'
/// with separate key/value projections per branch. Scale factor is the
/// square root of the key dimension.
pub fn decoupled_cross_attention(
    queries: &ArrayView2<f64>,
    text_ctx: &ArrayView2<f64>,
    user_ctx: &ArrayView2<f64>,
    params: &DecoupledAttentionParams,
    user_scale: f64,
) -> Result<(Array2<f64>, AttnCache)> {
    if text_ctx.nrows() == 0 || user_ctx.nrows() == 0 {
        return Err(Error::validation("attention context must be non-empty"));
    }
    if queries.ncols() != params.w_q.nrows() {
        return Err(Error::dimension(params.w_q.nrows(), queries.ncols(), "query width"));
    }
    if text_ctx.ncols() != params.text.w_k.nrows() {
        return Err(Error::dimension(params.text.w_k.nrows(), text_ctx.ncols(), "text context width"));
    }
    if user_ctx.ncols() != params.user.w_k.nrows() {
        return Err(Error::dimension(params.user.w_k.nrows(), user_ctx.ncols(), "user context width"));
    }
    let scale = 1.0 / (params.d_k() as f64).sqrt();
    let q_proj = queries.dot(&params.w_q);
    let (text_weights, text_v, text_out) = branch(&q_proj, text_ctx, &params.text, scale);
    let (user_weights, user_v, user_out) = branch(&q_proj, user_ctx, &params.user, scale);
    let out = &text_out + &(&user_out * user_scale);
    Ok((
        out,
        AttnCache {
            q_in: queries.to_owned(),
            q_proj,
            text_ctx: text_ctx.to_owned(),
            user_ctx: user_ctx.to_owned(),
            text_weights,
            user_weights,
            text_v,
            user_v,
            text_out,
            user_out,
            user_scale,
        },
    ))
}

/// Gradients of the attention output with respect to the user-branch
/// projections (accumulated into `g_user_k` / `g_user_v`) and the incoming
/// queries (returned). The text branch and query projection stay frozen but
/// still route gradient to the queries.
pub fn attention_backward(
    cache: &AttnCache,
    params: &DecoupledAttentionParams,
    d_out: &Array2<f64>,
    g_user_k: &mut Array2<f64>,
    g_user_v: &mut Array2<f64>,
) -> Array2<f64> {
    let scale = 1.0 / (params.d_k() as f64).sqrt();
    let n = d_out.nrows();
    let d_k = params.d_k();
    let mut d_q_proj = Array2::zeros((n, d_k));

    // user branch: out += user_scale * S' V'
    {
        let gamma = cache.user_scale;
        let keys = cache.user_ctx.dot(&params.user.w_k);
        for i in 0..n {
            let dout_row = d_out.row(i);
            // dV'[j] = gamma * S'[i,j] * dout
            for j in 0..cache.user_ctx.nrows() {
                let w = gamma * cache.user_weights[[i, j]];
                // W_v' grad: ctx[j]^T (w * dout)
                for (c, ctx_c) in cache.user_ctx.row(j).iter().enumerate() {
                    for (v, dv) in dout_row.iter().enumerate() {
                        g_user_v[[c, v]] += ctx_c * w * dv;
                    }
                }
            }
            // dS'[j] = gamma * dout . V'[j]
            let ds: Vec<f64> = (0..cache.user_ctx.nrows())
                .map(|j| {
                    gamma
                        * linalg::dot(
                            dout_row.as_slice().expect("contiguous"),
                            cache.user_v.row(j).as_slice().expect("contiguous"),
                        )
                })
                .collect();
            // softmax jacobian
            let s_row: Vec<f64> = cache.user_weights.row(i).to_vec();
            let dot_sd: f64 = s_row.iter().zip(&ds).map(|(s, d)| s * d).sum();
            let dl: Vec<f64> = s_row
                .iter()
                .zip(&ds)
                .map(|(s, d)| s * (d - dot_sd))
                .collect();
            // logits l_j = q . K'_j * scale
            for (j, &dlj) in dl.iter().enumerate() {
                let kj = keys.row(j);
                for t in 0..d_k {
                    d_q_proj[[i, t]] += dlj * kj[t] * scale;
                }
                // K'_j = ctx_j W_k': grad into W_k'
                for (c, ctx_c) in cache.user_ctx.row(j).iter().enumerate() {
                    for t in 0..d_k {
                        g_user_k[[c, t]] += ctx_c * dlj * cache.q_proj[[i, t]] * scale;
                    }
                }
            }
        }
    }
    // text branch: frozen params, but the query path still carries gradient
    {
        let keys = cache.text_ctx.dot(&params.text.w_k);
        for i in 0..n {
            let dout_row = d_out.row(i);
            let ds: Vec<f64> = (0..cache.text_ctx.nrows())
                .map(|j| {
                    linalg::dot(
                        dout_row.as_slice().expect("contiguous"),
                        cache.text_v.row(j).as_slice().expect("contiguous"),
                    )
                })
                .collect();
            let s_row: Vec<f64> = cache.text_weights.row(i).to_vec();
            let dot_sd: f64 = s_row.iter().zip(&ds).map(|(s, d)| s * d).sum();
            for (j, (&s, &d)) in s_row.iter().zip(&ds).enumerate() {
                let dlj = s * (d - dot_sd);
                let kj = keys.row(j);
                for t in 0..d_k {
                    d_q_proj[[i, t]] += dlj * kj[t] * scale;
                }
            }
        }
    }
    // back through the query projection
    d_q_proj.dot(&params.w_q.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seeded_ctx(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeds::rng(seed);
        use rand::Rng;
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_user_values_reduce_to_text_only_attention() {
        let mut params = DecoupledAttentionParams::seeded(4, 6, 4, 4, 1);
        params.user.w_v.fill(0.0);
        let q = seeded_ctx(3, 4, 2);
        let text = seeded_ctx(5, 6, 3);
        let user = seeded_ctx(2, 6, 4);
        let (with_user, _) =
            decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, 1.0)
                .unwrap();
        // text-only reference: user branch with zero scale
        let (text_only, cache) =
            decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, 0.0)
                .unwrap();
        assert_eq!(with_user, text_only);
        assert_eq!(cache.text_out, text_only);
    }

    #[test]
    fn identity_projections_single_token_doubles_the_value() {
        let d = 3;
        let params = DecoupledAttentionParams {
            w_q: Array2::eye(d),
            text: BranchProjections::identity(d),
            user: BranchProjections::identity(d),
        };
        let q = array![[0.5, -0.2, 0.9]];
        let ctx = array![[1.0, 2.0, 3.0]];
        let (out, _) =
            decoupled_cross_attention(&q.view(), &ctx.view(), &ctx.view(), &params, 1.0).unwrap();
        for (o, v) in out.row(0).iter().zip(ctx.row(0)) {
            assert!((o - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_weights_sum_to_one_per_query_row() {
        let params = DecoupledAttentionParams::seeded(4, 6, 5, 4, 7);
        let q = seeded_ctx(4, 4, 8);
        let text = seeded_ctx(7, 6, 9);
        let user = seeded_ctx(3, 6, 10);
        let (_, cache) =
            decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, 0.6)
                .unwrap();
        for i in 0..4 {
            let ts: f64 = cache.text_weights.row(i).sum();
            let us: f64 = cache.user_weights.row(i).sum();
            assert!((ts - 1.0).abs() < 1e-12);
            assert!((us - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_decomposes_into_branches() {
        let params = DecoupledAttentionParams::seeded(4, 6, 5, 4, 11);
        let q = seeded_ctx(2, 4, 12);
        let text = seeded_ctx(5, 6, 13);
        let user = seeded_ctx(4, 6, 14);
        let gamma = 0.6;
        let (out, cache) =
            decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, gamma)
                .unwrap();
        let recomposed = &cache.text_out + &(&cache.user_out * gamma);
        assert_eq!(out, recomposed);
    }

    #[test]
    fn empty_context_rejected() {
        let params = DecoupledAttentionParams::seeded(4, 6, 4, 4, 15);
        let q = seeded_ctx(1, 4, 16);
        let text = Array2::<f64>::zeros((0, 6));
        let user = seeded_ctx(1, 6, 17);
        assert!(decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, 1.0)
            .is_err());
    }

    #[test]
    fn user_branch_gradients_match_central_differences() {
        let params = DecoupledAttentionParams::seeded(4, 5, 4, 4, 19);
        let q = seeded_ctx(2, 4, 20);
        let text = seeded_ctx(3, 5, 21);
        let user = seeded_ctx(3, 5, 22);
        let gamma = 0.6;
        // scalar objective: sum of squared outputs
        let loss_of = |p: &DecoupledAttentionParams| -> f64 {
            let (out, _) =
                decoupled_cross_attention(&q.view(), &text.view(), &user.view(), p, gamma)
                    .unwrap();
            out.iter().map(|v| v * v).sum()
        };
        let (out, cache) =
            decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, gamma)
                .unwrap();
        let d_out = out.mapv(|v| 2.0 * v);
        let mut gk = Array2::zeros(params.user.w_k.dim());
        let mut gv = Array2::zeros(params.user.w_v.dim());
        let dq = attention_backward(&cache, &params, &d_out, &mut gk, &mut gv);
        assert_eq!(dq.dim(), q.dim());

        let eps = 1e-6;
        for (c, t) in [(0usize, 0usize), (1, 2), (4, 3), (2, 1)] {
            let mut up = params.clone();
            let mut dn = params.clone();
            up.user.w_k[[c, t]] += eps;
            dn.user.w_k[[c, t]] -= eps;
            let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
            let got = gk[[c, t]];
            assert!(
                (got - num).abs() / got.abs().max(num.abs()).max(1e-8) < 1e-4,
                "w_k[{c},{t}]: {got} vs {num}"
            );
            let mut up = params.clone();
            let mut dn = params.clone();
            up.user.w_v[[c, t]] += eps;
            dn.user.w_v[[c, t]] -= eps;
            let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
            let got = gv[[c, t]];
            assert!(
                (got - num).abs() / got.abs().max(num.abs()).max(1e-8) < 1e-4,
                "w_v[{c},{t}]: {got} vs {num}"
            );
        }
        // query-path gradient via finite differences on q
        for (i, j) in [(0usize, 0usize), (1, 3)] {
            let mut qu = q.clone();
            let mut qd = q.clone();
            qu[[i, j]] += eps;
            qd[[i, j]] -= eps;
            let lu = {
                let (o, _) = decoupled_cross_attention(
                    &qu.view(),
                    &text.view(),
                    &user.view(),
                    &params,
                    gamma,
                )
                .unwrap();
                o.iter().map(|v| v * v).sum::<f64>()
            };
            let ld = {
                let (o, _) = decoupled_cross_attention(
                    &qd.view(),
                    &text.view(),
                    &user.view(),
                    &params,
                    gamma,
                )
                .unwrap();
                o.iter().map(|v| v * v).sum::<f64>()
            };
            let num = (lu - ld) / (2.0 * eps);
            let got = dq[[i, j]];
            assert!(
                (got - num).abs() / got.abs().max(num.abs()).max(1e-8) < 1e-4,
                "q[{i},{j}]: {got} vs {num}"
            );
        }
    }
}
