//! The dual-query aggregation model.
//!
//! One cross-attention module holds two learned query arrays over shared
//! key/value projections of the fused bag:
//!
//! * Q1 (M x D latents) compresses the bag into a latent array that a
//!   stack of self-attention blocks refines; mean pooling yields the
//!   self-attention token `t_sa`.
//! * Q2 (1 x D latent) scores every instance with a single softmax,
//!   producing the MIL-attention token `t_mil = sum_i a_i v_i` and the
//!   attention scores `a`.
//!
//! Each token feeds its own classifier head; at inference the two
//! distributions are blended as `p = b*p_sa + (1-b)*p_mil`. Variants gate
//! the pathways so each sub-network can be trained and measured alone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{attend_heads, scaled_dot_attention, AttentionConfig};
use crate::dme::{MetaEmbedder, SourceEmbeddingSet, SourceSpec};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::layers::{Binding, ClassifierHead, LayerNorm, Linear, Mlp, ParamId, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which pathways run and which distribution becomes the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Single-query MIL attention only; p = p_mil.
    MilOnly,
    /// Latent pathway only; p = p_sa.
    PerceiverOnly,
    /// Both pathways, plain cross-entropy supervision on both heads.
    DqCe,
    /// Both pathways with the self-distillation objective.
    DqSd,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::MilOnly => "mil-only",
            Variant::PerceiverOnly => "perceiver-only",
            Variant::DqCe => "dq-ce",
            Variant::DqSd => "dq-sd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mil-only" => Ok(Variant::MilOnly),
            "perceiver-only" => Ok(Variant::PerceiverOnly),
            "dq-ce" => Ok(Variant::DqCe),
            "dq-sd" => Ok(Variant::DqSd),
            other => Err(CoreError::Config(format!(
                "unknown variant '{other}' (expected mil-only | perceiver-only | dq-ce | dq-sd)"
            ))),
        }
    }

    pub fn has_sa_path(&self) -> bool {
        !matches!(self, Variant::MilOnly)
    }

    pub fn has_mil_path(&self) -> bool {
        !matches!(self, Variant::PerceiverOnly)
    }
}

/// Aggregator hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DqConfig {
    /// Latent slot count M.
    pub latents: usize,
    /// Latent width D.
    pub latent_width: usize,
    /// Per-head key width; heads * d_k must equal D so both pathways share
    /// the same key/value space and t_mil is a D-vector.
    pub d_k: usize,
    /// Latent transformer depth J.
    pub depth: usize,
    pub heads: usize,
    /// Class count K.
    pub classes: usize,
    /// Cross-attention temperature; the latent transformer always uses
    /// sqrt of its per-head width.
    pub tau: f64,
    /// Blend weight b for p = b*p_sa + (1-b)*p_mil.
    pub blend: f64,
    pub variant: Variant,
}

impl DqConfig {
    pub fn new(classes: usize) -> Self {
        let d_k = 64;
        DqConfig {
            latents: 16,
            latent_width: 256,
            d_k,
            depth: 2,
            heads: 4,
            classes,
            tau: crate::attention::default_temperature(d_k),
            blend: 0.5,
            variant: Variant::DqSd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latents == 0 {
            return Err(CoreError::Config("latent slot count M must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::Config(format!(
                "class count must be >= 2, got {}",
                self.classes
            )));
        }
        if self.heads == 0 || self.d_k == 0 {
            return Err(CoreError::Config("heads and d_k must be >= 1".into()));
        }
        if self.heads * self.d_k != self.latent_width {
            return Err(CoreError::Config(format!(
                "attention width heads*d_k = {} must equal latent width D = {}",
                self.heads * self.d_k,
                self.latent_width
            )));
        }
        if self.tau <= 0.0 {
            return Err(CoreError::Parameter(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(CoreError::Parameter(format!(
                "blend weight must lie in [0, 1], got {}",
                self.blend
            )));
        }
        Ok(())
    }
}

/// One pathway's result on a bag.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutput<F: Scalar> {
    pub token: Vec<F>,
    pub dist: Vec<F>,
}

/// Everything the model says about one bag. Pathways a variant skips
/// are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput<F: Scalar> {
    pub sa: Option<PathOutput<F>>,
    pub mil: Option<PathOutput<F>>,
    /// Instance attention scores from the MIL pathway (sums to 1).
    pub attention: Option<Vec<F>>,
    /// Final (blended) class distribution.
    pub p: Vec<F>,
}

/// Graph-side handles of a forward pass, for building losses.
pub struct BagOutputIds {
    pub sa_token: Option<TensorId>,
    pub sa_dist: Option<TensorId>,
    pub mil_token: Option<TensorId>,
    pub mil_dist: Option<TensorId>,
    pub attention: Option<TensorId>,
    pub p: TensorId,
}

impl BagOutputIds {
    pub fn values<F: Scalar>(&self, g: &Graph<F>) -> BagOutput<F> {
        let path = |tok: Option<TensorId>, dist: Option<TensorId>| match (tok, dist) {
            (Some(t), Some(d)) => Some(PathOutput {
                token: g.value(t).to_vec(),
                dist: g.value(d).to_vec(),
            }),
            _ => None,
        };
        BagOutput {
            sa: path(self.sa_token, self.sa_dist),
            mil: path(self.mil_token, self.mil_dist),
            attention: self.attention.map(|a| g.value(a).to_vec()),
            p: g.value(self.p).to_vec(),
        }
    }
}

struct SaPath {
    latent: ParamId,
    ln_q: LayerNorm,
    w_q: Linear,
    w_o: Linear,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    blocks: Vec<crate::attention::TransformerBlock>,
    /// Closing norm of the pre-norm stack; keeps the pooled token at a
    /// bounded scale so the hint term stays proportionate.
    ln_final: LayerNorm,
    head: ClassifierHead,
}

struct MilPath {
    latent: ParamId,
    w_q: Linear,
    head: ClassifierHead,
}

/// All trainable state plus the wiring between components.
pub struct DqModel<F: Scalar> {
    pub config: DqConfig,
    pub params: ParamSet<F>,
    embedder: MetaEmbedder,
    active_source: Option<usize>,
    w_k: Linear,
    w_v: Linear,
    sa: Option<SaPath>,
    mil: Option<MilPath>,
}

impl<F: Scalar> DqModel<F> {
    /// Build a fresh model. `active_source` selects single-source mode by
    /// source id; `None` fuses all declared sources.
    pub fn new(
        config: DqConfig,
        specs: &[SourceSpec],
        active_source: Option<&str>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut ps = ParamSet::new();
        let embedder = MetaEmbedder::new(&mut ps, specs, &mut rng)?;
        let active_source = match active_source {
            Some(id) => Some(embedder.source_index(id)?),
            None => None,
        };
        let input_width = match active_source {
            Some(i) => specs[i].proj_width,
            None => embedder.fused_width(),
        };
        let d = config.latent_width;

        let w_k = Linear::new(&mut ps, "cross.w_k", input_width, d, false, &mut rng);
        let w_v = Linear::new(&mut ps, "cross.w_v", input_width, d, false, &mut rng);

        let sa = if config.variant.has_sa_path() {
            let latent = ps.add(
                "sa.latent",
                Tensor::trunc_normal(&[config.latents, d], 0.0, 0.02, -2.0, 2.0, &mut rng)?,
                false,
            );
            let ln_q = LayerNorm::new(&mut ps, "sa.ln_q", d);
            let w_q = Linear::new(&mut ps, "sa.w_q", d, d, false, &mut rng);
            let w_o = Linear::new(&mut ps, "sa.w_o", d, d, false, &mut rng);
            let ln_mlp = LayerNorm::new(&mut ps, "sa.ln_mlp", d);
            let mlp = Mlp::new(&mut ps, "sa.mlp", d, 2 * d, d, &mut rng);
            let mut blocks = Vec::with_capacity(config.depth);
            for j in 0..config.depth {
                blocks.push(crate::attention::TransformerBlock::new(
                    &mut ps,
                    &format!("sa.block{j}"),
                    d,
                    config.heads,
                    &mut rng,
                )?);
            }
            let ln_final = LayerNorm::new(&mut ps, "sa.ln_final", d);
            let head = ClassifierHead::new(&mut ps, "sa.head", d, config.classes, &mut rng);
            Some(SaPath {
                latent,
                ln_q,
                w_q,
                w_o,
                ln_mlp,
                mlp,
                blocks,
                ln_final,
                head,
            })
        } else {
            None
        };

        let mil = if config.variant.has_mil_path() {
            let latent = ps.add(
                "mil.latent",
                Tensor::trunc_normal(&[1, d], 0.0, 0.02, -2.0, 2.0, &mut rng)?,
                false,
            );
            let w_q = Linear::new(&mut ps, "mil.w_q", d, d, false, &mut rng);
            let head = ClassifierHead::new(&mut ps, "mil.head", d, config.classes, &mut rng);
            Some(MilPath { latent, w_q, head })
        } else {
            None
        };

        Ok(DqModel {
            config,
            params: ps,
            embedder,
            active_source,
            w_k,
            w_v,
            sa,
            mil,
        })
    }

    pub fn source_specs(&self) -> &[SourceSpec] {
        self.embedder.specs()
    }

    pub fn active_source(&self) -> Option<&str> {
        self.active_source
            .map(|i| self.embedder.specs()[i].id.as_str())
    }

    /// Width the shared key/value projections expect.
    pub fn input_width(&self) -> usize {
        match self.active_source {
            Some(i) => self.embedder.specs()[i].proj_width,
            None => self.embedder.fused_width(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Record one forward pass into `g` with the model's configured
    /// temperature.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        bag: &SourceEmbeddingSet<F>,
    ) -> Result<BagOutputIds> {
        self.forward_with_tau(g, bind, bag, self.config.tau)
    }

    /// Forward pass with an explicit cross-attention temperature, so a
    /// trained model can be probed across the temperature grid without
    /// retraining.
    pub fn forward_with_tau(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        bag: &SourceEmbeddingSet<F>,
        tau: f64,
    ) -> Result<BagOutputIds> {
        if tau <= 0.0 {
            return Err(CoreError::Parameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if bag.instances() == 0 {
            return Err(CoreError::EmptyInput("forward on an empty bag"));
        }
        let fused = match self.active_source {
            Some(i) => self.embedder.project_single(g, bind, bag, i)?,
            None => self.embedder.fuse(g, bind, bag)?,
        };

        // Shared key/value projections, computed once for both queries.
        let k = self.w_k.forward(g, bind, fused)?;
        let v = self.w_v.forward(g, bind, fused)?;

        let tau_f = F::from_f64(tau);
        let d = self.config.latent_width;

        let mut sa_token = None;
        let mut sa_dist = None;
        if let Some(sa) = &self.sa {
            let latent = bind.id(sa.latent);
            let normed = sa.ln_q.forward(g, bind, latent)?;
            let q = sa.w_q.forward(g, bind, normed)?;
            let cross_cfg = AttentionConfig {
                d_k: self.config.d_k,
                heads: self.config.heads,
                temperature: tau,
            };
            let attended = attend_heads(g, q, k, v, &cross_cfg)?;
            let attended = sa.w_o.forward(g, bind, attended)?;
            let x = g.add(latent, attended)?;
            let normed = sa.ln_mlp.forward(g, bind, x)?;
            let ff = sa.mlp.forward(g, bind, normed)?;
            let mut x = g.add(x, ff)?;
            for block in &sa.blocks {
                x = block.forward(g, bind, x)?;
            }
            let x = sa.ln_final.forward(g, bind, x)?;
            let token = g.mean_axis(x, 0)?;
            let token_row = g.reshape(token, &[1, d])?;
            let logits = sa.head.forward(g, bind, token_row)?;
            let dist = g.softmax(logits, F::ONE)?;
            sa_token = Some(token);
            sa_dist = Some(g.reshape(dist, &[self.config.classes])?);
        }

        let mut mil_token = None;
        let mut mil_dist = None;
        let mut attention = None;
        if let Some(mil) = &self.mil {
            let latent = bind.id(mil.latent);
            let q = mil.w_q.forward(g, bind, latent)?;
            let (token_row, weights) = scaled_dot_attention(g, q, k, v, tau_f)?;
            let token = g.reshape(token_row, &[d])?;
            let logits = mil.head.forward(g, bind, token_row)?;
            let dist = g.softmax(logits, F::ONE)?;
            mil_token = Some(token);
            mil_dist = Some(g.reshape(dist, &[self.config.classes])?);
            attention = Some(g.reshape(weights, &[bag.instances()])?);
        }

        let p = match (sa_dist, mil_dist) {
            (Some(psa), Some(pmil)) => {
                let b = F::from_f64(self.config.blend);
                let left = g.scale(psa, b)?;
                let right = g.scale(pmil, F::ONE - b)?;
                g.add(left, right)?
            }
            (Some(psa), None) => psa,
            (None, Some(pmil)) => pmil,
            (None, None) => unreachable!("every variant keeps at least one pathway"),
        };

        Ok(BagOutputIds {
            sa_token,
            sa_dist,
            mil_token,
            mil_dist,
            attention,
            p,
        })
    }

    /// Evaluation convenience: fresh graph, constant parameters.
    pub fn evaluate(&self, bag: &SourceEmbeddingSet<F>) -> Result<BagOutput<F>> {
        self.evaluate_with_tau(bag, self.config.tau)
    }

    pub fn evaluate_with_tau(&self, bag: &SourceEmbeddingSet<F>, tau: f64) -> Result<BagOutput<F>> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false)?;
        let ids = self.forward_with_tau(&mut g, &bind, bag, tau)?;
        Ok(ids.values(&g))
    }

    /// Replace every parameter with same-named values (checkpoint load).
    pub fn load_values(&mut self, values: &[(String, Tensor<F>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(CoreError::Config(format!(
                "checkpoint carries {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in values {
            let id = self.params.by_name(name)?;
            self.params.set_values(id, tensor.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(variant: Variant) -> DqConfig {
        DqConfig {
            latents: 4,
            latent_width: 16,
            d_k: 8,
            depth: 1,
            heads: 2,
            classes: 2,
            tau: crate::attention::default_temperature(8),
            blend: 0.5,
            variant,
        }
    }

    fn toy_specs() -> Vec<SourceSpec> {
        alloc::vec![SourceSpec::new("src", 12, 16).unwrap()]
    }

    fn toy_bag(n: usize, seed: u64) -> SourceEmbeddingSet<f64> {
        let mut rng = Rng::new(seed);
        SourceEmbeddingSet::new(alloc::vec![Tensor::trunc_normal(
            &[n, 12],
            0.0,
            1.0,
            -4.0,
            4.0,
            &mut rng
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn config_rejects_mismatched_widths() {
        let mut cfg = toy_config(Variant::DqSd);
        cfg.d_k = 7;
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn config_rejects_blend_outside_unit_interval() {
        let mut cfg = toy_config(Variant::DqSd);
        cfg.blend = 1.5;
        assert!(matches!(cfg.validate(), Err(CoreError::Parameter(_))));
    }

    #[test]
    fn single_instance_attention_is_one() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 1).unwrap();
        let out = model.evaluate(&toy_bag(1, 2)).unwrap();
        let a = out.attention.unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_instance_gets_uniform_attention() {
        let mut rng = Rng::new(3);
        let row: Vec<f64> = (0..12).map(|_| rng.next_f64()).collect();
        let n = 6;
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let bag = SourceEmbeddingSet::new(alloc::vec![
            Tensor::from_vec(&[n, 12], data).unwrap()
        ])
        .unwrap();
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 4).unwrap();
        let out = model.evaluate(&bag).unwrap();
        for &a in out.attention.as_ref().unwrap() {
            assert!((a - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn mil_only_prediction_is_exactly_p_mil() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::MilOnly), &toy_specs(), None, 5).unwrap();
        let out = model.evaluate(&toy_bag(7, 6)).unwrap();
        assert!(out.sa.is_none());
        assert_eq!(out.p, out.mil.unwrap().dist);
    }

    #[test]
    fn perceiver_only_prediction_is_exactly_p_sa() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::PerceiverOnly), &toy_specs(), None, 5).unwrap();
        let out = model.evaluate(&toy_bag(7, 6)).unwrap();
        assert!(out.mil.is_none());
        assert!(out.attention.is_none());
        assert_eq!(out.p, out.sa.unwrap().dist);
    }

    #[test]
    fn distributions_are_simplices() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 7).unwrap();
        let out = model.evaluate(&toy_bag(9, 8)).unwrap();
        for dist in [
            &out.sa.as_ref().unwrap().dist,
            &out.mil.as_ref().unwrap().dist,
            &out.p,
        ] {
            assert!(dist.iter().all(|&x| x >= 0.0));
            let s: f64 = dist.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let a = out.attention.unwrap();
        assert!(a.iter().all(|&x| x >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blend_is_convex_combination() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 9).unwrap();
        let out = model.evaluate(&toy_bag(5, 10)).unwrap();
        let sa = out.sa.unwrap().dist;
        let mil = out.mil.unwrap().dist;
        for i in 0..2 {
            let want = 0.5 * sa[i] + 0.5 * mil[i];
            assert!((out.p[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_bag_is_rejected() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 11).unwrap();
        let bag = SourceEmbeddingSet::new(alloc::vec![Tensor::zeros(&[0, 12])]).unwrap();
        assert!(matches!(
            model.evaluate(&bag),
            Err(CoreError::EmptyInput(_))
        ));
    }

    #[test]
    fn latent_shapes_independent_of_bag_size() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 12).unwrap();
        let count = model.parameter_count();
        for n in [1usize, 10, 1000] {
            let out = model.evaluate(&toy_bag(n, n as u64)).unwrap();
            assert_eq!(out.sa.as_ref().unwrap().token.len(), 16);
            assert_eq!(out.mil.as_ref().unwrap().token.len(), 16);
            assert_eq!(out.attention.unwrap().len(), n);
            assert_eq!(model.parameter_count(), count);
        }
    }

    #[test]
    fn unknown_active_source_is_lookup_error() {
        assert!(matches!(
            DqModel::<f64>::new(toy_config(Variant::DqSd), &toy_specs(), Some("nope"), 1),
            Err(CoreError::Lookup(_))
        ));
    }

    #[test]
    fn temperature_scaling_preserves_attention_ranking() {
        let model: DqModel<f64> =
            DqModel::new(toy_config(Variant::DqSd), &toy_specs(), None, 13).unwrap();
        let bag = toy_bag(12, 14);
        let rank = |a: &[f64]| {
            let mut idx: Vec<usize> = (0..a.len()).collect();
            idx.sort_by(|&i, &j| a[i].partial_cmp(&a[j]).unwrap());
            idx
        };
        let base = model.evaluate_with_tau(&bag, 8.0).unwrap().attention.unwrap();
        for tau in [1.0, 0.125, 0.0625] {
            let probe = model.evaluate_with_tau(&bag, tau).unwrap().attention.unwrap();
            assert_eq!(rank(&base), rank(&probe), "tau {tau}");
        }
    }
}
