//! Attention primitives: temperature-scaled dot-product attention,
//! multi-head composition, and the pre-norm transformer block used by
//! the latent self-attention stack.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::layers::{Binding, LayerNorm, Linear, Mlp, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Attention geometry: per-head key width and head count. The default
/// temperature is sqrt(d_k) so the logits stay decoupled from the key
/// width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d_k: usize,
    pub heads: usize,
    pub temperature: f64,
}

impl AttentionConfig {
    pub fn new(d_k: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            d_k,
            heads,
            temperature: default_temperature(d_k),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.heads == 0 {
            return Err(CoreError::Config(format!(
                "attention needs d_k >= 1 and heads >= 1, got d_k={}, heads={}",
                self.d_k, self.heads
            )));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::Parameter(format!(
                "attention temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Total projection width across heads.
    pub fn inner_width(&self) -> usize {
        self.d_k * self.heads
    }
}

pub fn default_temperature(d_k: usize) -> f64 {
    libm::sqrt(d_k as f64)
}

/// softmax(Q K^T / temperature) V over one head.
///
/// Returns the attended output and the attention weights; rows of the
/// weight matrix are probability distributions over the n context rows.
pub fn scaled_dot_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    temperature: F,
) -> Result<(TensorId, TensorId)> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(CoreError::Dimension(format!(
            "attention expects rank-2 Q/K/V, got {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    if sk[0] == 0 {
        return Err(CoreError::EmptyInput("attention over an empty context"));
    }
    if sq[1] != sk[1] {
        return Err(CoreError::Dimension(format!(
            "attention: Q width {:?} and K width {:?} differ",
            sq, sk
        )));
    }
    if sk[0] != sv[0] {
        return Err(CoreError::Dimension(format!(
            "attention: K rows {:?} and V rows {:?} differ",
            sk, sv
        )));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let weights = g.softmax(logits, temperature)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Query/key/value/output projections of one multi-head attention layer.
/// Q/K/V are bias-free linear maps; the output projection is a plain
/// weight matrix mapping heads*d_k back to the model width.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub config: AttentionConfig,
}

impl MhaParams {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        query_width: usize,
        context_width: usize,
        out_width: usize,
        config: AttentionConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let inner = config.inner_width();
        Ok(MhaParams {
            w_q: Linear::new(ps, &format!("{prefix}.w_q"), query_width, inner, false, rng),
            w_k: Linear::new(ps, &format!("{prefix}.w_k"), context_width, inner, false, rng),
            w_v: Linear::new(ps, &format!("{prefix}.w_v"), context_width, inner, false, rng),
            w_o: Linear::new(ps, &format!("{prefix}.w_o"), inner, out_width, false, rng),
            config,
        })
    }

    /// Full multi-head attention: project, attend per head, concatenate,
    /// project out.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        queries: TensorId,
        context: TensorId,
    ) -> Result<TensorId> {
        let q = self.w_q.forward(g, bind, queries)?;
        let k = self.w_k.forward(g, bind, context)?;
        let v = self.w_v.forward(g, bind, context)?;
        let heads = attend_heads(g, q, k, v, &self.config)?;
        self.w_o.forward(g, bind, heads)
    }
}

/// Split projected Q/K/V into heads, attend each with the configured
/// temperature, and concatenate the outputs.
pub fn attend_heads<F: Scalar>(
    g: &mut Graph<F>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    config: &AttentionConfig,
) -> Result<TensorId> {
    let inner = config.inner_width();
    if g.shape(q)[1] != inner || g.shape(k)[1] != inner || g.shape(v)[1] != inner {
        return Err(CoreError::Config(format!(
            "projected width {} is not heads*d_k = {inner}",
            g.shape(q)[1]
        )));
    }
    let tau = F::from_f64(config.temperature);
    let mut outs = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = g.slice_cols(q, h * config.d_k, config.d_k)?;
        let kh = g.slice_cols(k, h * config.d_k, config.d_k)?;
        let vh = g.slice_cols(v, h * config.d_k, config.d_k)?;
        let (oh, _) = scaled_dot_attention(g, qh, kh, vh, tau)?;
        outs.push(oh);
    }
    g.concat_cols(&outs)
}

/// Pre-norm residual transformer block:
/// x + MHA(LN(x)), then + MLP(LN(.)). The MLP hidden width is 2x the
/// model width with GELU.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub mha: MhaParams,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(CoreError::Config(format!(
                "block width {width} is not divisible by {heads} heads"
            )));
        }
        let config = AttentionConfig::new(width / heads, heads)?;
        Ok(TransformerBlock {
            ln_attn: LayerNorm::new(ps, &format!("{prefix}.ln_attn"), width),
            mha: MhaParams::new(ps, &format!("{prefix}.attn"), width, width, width, config, rng)?,
            ln_mlp: LayerNorm::new(ps, &format!("{prefix}.ln_mlp"), width),
            mlp: Mlp::new(ps, &format!("{prefix}.mlp"), width, 2 * width, width, rng),
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: TensorId,
    ) -> Result<TensorId> {
        let normed = self.ln_attn.forward(g, bind, x)?;
        let attn = self.mha.forward(g, bind, normed, normed)?;
        let x = g.add(x, attn)?;
        let normed = self.ln_mlp.forward(g, bind, x)?;
        let ff = self.mlp.forward(g, bind, normed)?;
        g.add(x, ff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn constant(g: &mut Graph<f64>, shape: &[usize], vals: &[f64]) -> TensorId {
        g.constant(Tensor::from_vec(shape, vals.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn single_key_attends_fully() {
        let mut g = Graph::new();
        let q = constant(&mut g, &[1, 2], &[0.3, -0.7]);
        let k = constant(&mut g, &[1, 2], &[1.0, 2.0]);
        let v = constant(&mut g, &[1, 3], &[5.0, 6.0, 7.0]);
        let (out, w) = scaled_dot_attention(&mut g, q, k, v, 1.0).unwrap();
        assert_eq!(g.value(w), &[1.0]);
        assert_eq!(g.value(out), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut g = Graph::new();
        let q = constant(&mut g, &[1, 2], &[0.0, 1.0]);
        let k = constant(&mut g, &[2, 2], &[1.0, 0.0, -1.0, 0.0]);
        let v = constant(&mut g, &[2, 1], &[2.0, 4.0]);
        let (out, w) = scaled_dot_attention(&mut g, q, k, v, 1.0).unwrap();
        assert!((g.value(w)[0] - 0.5).abs() < 1e-12);
        assert!((g.value(out)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_two_key_evaluation() {
        let mut g = Graph::new();
        let q = constant(&mut g, &[1, 2], &[1.0, 0.0]);
        let k = constant(&mut g, &[2, 2], &[1.0, 0.0, -1.0, 0.0]);
        let v = constant(&mut g, &[2, 1], &[2.0, 4.0]);
        let (out, w) = scaled_dot_attention(&mut g, q, k, v, 1.0).unwrap();
        assert!((g.value(w)[0] - 0.8808).abs() < 1e-3);
        assert!((g.value(w)[1] - 0.1192).abs() < 1e-3);
        assert!((g.value(out)[0] - 2.2384).abs() < 1e-3);
    }

    #[test]
    fn empty_context_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let k = g.constant(Tensor::zeros(&[0, 2])).unwrap();
        let v = g.constant(Tensor::zeros(&[0, 1])).unwrap();
        assert!(matches!(
            scaled_dot_attention(&mut g, q, k, v, 1.0),
            Err(CoreError::EmptyInput(_))
        ));
    }

    #[test]
    fn weight_rows_are_distributions() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let q = g
            .constant(Tensor::<f64>::trunc_normal(&[3, 4], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
            .unwrap();
        let k = g
            .constant(Tensor::trunc_normal(&[6, 4], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
            .unwrap();
        let v = g
            .constant(Tensor::trunc_normal(&[6, 2], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
            .unwrap();
        let (_, w) = scaled_dot_attention(&mut g, q, k, v, 2.0).unwrap();
        for row in g.value(w).chunks(6) {
            assert!(row.iter().all(|&x| x >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn kv_joint_permutation_invariance() {
        let mut rng = Rng::new(8);
        let qv: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        let kv: Vec<f64> = (0..12).map(|_| rng.next_f64()).collect();
        let vv: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();

        let run = |perm: &[usize]| {
            let mut g = Graph::new();
            let q = constant(&mut g, &[1, 4], &qv);
            let kp: Vec<f64> = perm.iter().flat_map(|&i| kv[i * 4..(i + 1) * 4].to_vec()).collect();
            let vp: Vec<f64> = perm.iter().flat_map(|&i| vv[i * 2..(i + 1) * 2].to_vec()).collect();
            let k = constant(&mut g, &[3, 4], &kp);
            let v = constant(&mut g, &[3, 2], &vp);
            let (out, _) = scaled_dot_attention(&mut g, q, k, v, 1.0).unwrap();
            g.value(out).to_vec()
        };
        let base = run(&[0, 1, 2]);
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0], [0, 2, 1], [2, 0, 1]] {
            let p = run(&perm);
            for (a, b) in base.iter().zip(&p) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn low_temperature_approaches_max_pooling() {
        let mut g = Graph::new();
        let q = constant(&mut g, &[1, 2], &[1.0, 0.0]);
        let k = constant(&mut g, &[3, 2], &[0.9, 0.0, 0.1, 0.0, -0.5, 0.0]);
        let v = constant(&mut g, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (out, _) = scaled_dot_attention(&mut g, q, k, v, 1e-3).unwrap();
        // Unique max logit at row 0 -> output converges to V row 0.
        assert!((g.value(out)[0] - 1.0).abs() < 1e-6);
        assert!((g.value(out)[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn single_head_with_identity_projections_matches_sda() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(2);
        let config = AttentionConfig::new(2, 1).unwrap();
        let mha = MhaParams::new(&mut ps, "mha", 2, 2, 2, config, &mut rng).unwrap();
        let eye = Tensor::from_vec(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for lin in [mha.w_q, mha.w_k, mha.w_v, mha.w_o] {
            ps.set_values(lin.w, eye.clone()).unwrap();
        }
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false).unwrap();
        let queries = constant(&mut g, &[2, 2], &[0.5, -0.2, 0.1, 0.9]);
        let context = constant(&mut g, &[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let out = mha.forward(&mut g, &bind, queries, context).unwrap();

        let tau = config.temperature;
        let (direct, _) = scaled_dot_attention(&mut g, queries, context, context, tau).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(direct)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_output_shape_is_queries_by_out_width() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(3);
        let config = AttentionConfig::new(3, 2).unwrap();
        let mha = MhaParams::new(&mut ps, "mha", 4, 5, 7, config, &mut rng).unwrap();
        for n in [1usize, 4, 16] {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false).unwrap();
            let q = g
                .constant(Tensor::trunc_normal(&[3, 4], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
                .unwrap();
            let ctx = g
                .constant(Tensor::trunc_normal(&[n, 5], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
                .unwrap();
            let out = mha.forward(&mut g, &bind, q, ctx).unwrap();
            assert_eq!(g.shape(out), &[3, 7]);
        }
    }

    #[test]
    fn block_is_identity_with_zero_output_projections() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(4);
        let block = TransformerBlock::new(&mut ps, "blk", 4, 2, &mut rng).unwrap();
        ps.set_values(block.mha.w_o.w, Tensor::zeros(&[4, 4])).unwrap();
        ps.set_values(block.mlp.fc2.w, Tensor::zeros(&[8, 4])).unwrap();
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false).unwrap();
        let x = g
            .constant(Tensor::trunc_normal(&[3, 4], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
            .unwrap();
        let y = block.forward(&mut g, &bind, x).unwrap();
        for (a, b) in g.value(x).iter().zip(g.value(y)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn block_preserves_shape() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(6);
        let block = TransformerBlock::new(&mut ps, "blk", 6, 3, &mut rng).unwrap();
        for m in [1usize, 2, 5] {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false).unwrap();
            let x = g
                .constant(Tensor::trunc_normal(&[m, 6], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
                .unwrap();
            let y = block.forward(&mut g, &bind, x).unwrap();
            assert_eq!(g.shape(y), &[m, 6]);
        }
    }

    #[test]
    fn block_is_row_equivariant() {
        // Self-attention plus row-wise maps commute with row permutations;
        // checked by brute force over all 4! orderings.
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(7);
        let block = TransformerBlock::new(&mut ps, "blk", 4, 2, &mut rng).unwrap();
        let base: Vec<f64> = (0..16).map(|_| rng.next_f64() * 2.0 - 1.0).collect();

        let run = |rows: &[usize]| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false).unwrap();
            let vals: Vec<f64> = rows.iter().flat_map(|&r| base[r * 4..(r + 1) * 4].to_vec()).collect();
            let x = g
                .constant(Tensor::from_vec(&[4, 4], vals).unwrap())
                .unwrap();
            let y = block.forward(&mut g, &bind, x).unwrap();
            g.value(y).to_vec()
        };

        let identity = run(&[0, 1, 2, 3]);
        let mut perm = [0usize, 1, 2, 3];
        // Heap's algorithm over all 24 permutations.
        let mut stack = [0usize; 4];
        let mut i = 0;
        loop {
            let out = run(&perm);
            for (slot, &row) in perm.iter().enumerate() {
                for j in 0..4 {
                    let got = out[slot * 4 + j];
                    let want = identity[row * 4 + j];
                    assert!((got - want).abs() < 1e-9, "perm {perm:?}");
                }
            }
            // advance permutation
            if i >= 4 {
                break;
            }
            if stack[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(stack[i], i);
                }
                stack[i] += 1;
                i = 0;
            } else {
                stack[i] = 0;
                i += 1;
                if i >= 4 {
                    break;
                }
            }
        }
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(1);
        assert!(matches!(
            TransformerBlock::new(&mut ps, "blk", 5, 2, &mut rng),
            Err(CoreError::Config(_))
        ));
    }
}
