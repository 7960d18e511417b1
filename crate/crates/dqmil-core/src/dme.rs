//! Dynamic meta-embedding: per-source trainable projections over frozen
//! instance features, concatenated into one fused representation.
//!
//! Upstream encoders are out of scope; sources arrive as precomputed
//! N x C_s matrices. Only the projections learn, driven by the bag-level
//! training signal.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::layers::{Binding, Linear, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One frozen feature source: its id, incoming width, and the width its
/// trainable projection maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpec {
    pub id: String,
    pub input_width: usize,
    pub proj_width: usize,
}

impl SourceSpec {
    pub fn new(id: impl Into<String>, input_width: usize, proj_width: usize) -> Result<Self> {
        let id = id.into();
        if input_width == 0 || proj_width == 0 {
            return Err(CoreError::Schema(format!(
                "source '{id}': widths must be >= 1, got input {input_width}, projection {proj_width}"
            )));
        }
        Ok(SourceSpec {
            id,
            input_width,
            proj_width,
        })
    }
}

/// Per-source instance matrices for one bag, all N x C_s over the same N
/// instances in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEmbeddingSet<F: Scalar> {
    sources: Vec<Tensor<F>>,
}

impl<F: Scalar> SourceEmbeddingSet<F> {
    pub fn new(sources: Vec<Tensor<F>>) -> Result<Self> {
        if sources.is_empty() {
            return Err(CoreError::Schema("a bag needs at least one source".into()));
        }
        let n = sources[0].shape().first().copied().unwrap_or(0);
        for (i, s) in sources.iter().enumerate() {
            if s.shape().len() != 2 {
                return Err(CoreError::Schema(format!(
                    "source #{i} must be rank-2, got {:?}",
                    s.shape()
                )));
            }
            if s.shape()[0] != n {
                return Err(CoreError::Alignment(format!(
                    "source #{i} has {} instances, expected {n}",
                    s.shape()[0]
                )));
            }
        }
        Ok(SourceEmbeddingSet { sources })
    }

    pub fn instances(&self) -> usize {
        self.sources[0].shape()[0]
    }

    pub fn sources(&self) -> &[Tensor<F>] {
        &self.sources
    }

    /// New set with instances reordered by `perm` (for invariance tests).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            let c = s.shape()[1];
            let mut data = Vec::with_capacity(s.numel());
            for &i in perm {
                data.extend_from_slice(&s.data()[i * c..(i + 1) * c]);
            }
            out.push(Tensor::from_vec(s.shape(), data)?);
        }
        SourceEmbeddingSet::new(out)
    }
}

/// The trainable fusion layer: one affine projection per source.
#[derive(Debug, Clone)]
pub struct MetaEmbedder {
    specs: Vec<SourceSpec>,
    projections: Vec<Linear>,
}

impl MetaEmbedder {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        specs: &[SourceSpec],
        rng: &mut Rng,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(CoreError::Schema("at least one source spec required".into()));
        }
        let mut projections = Vec::with_capacity(specs.len());
        for spec in specs {
            projections.push(Linear::new(
                ps,
                &format!("dme.{}", spec.id),
                spec.input_width,
                spec.proj_width,
                true,
                rng,
            ));
        }
        Ok(MetaEmbedder {
            specs: specs.to_vec(),
            projections,
        })
    }

    pub fn specs(&self) -> &[SourceSpec] {
        &self.specs
    }

    /// Width of the fused representation.
    pub fn fused_width(&self) -> usize {
        self.specs.iter().map(|s| s.proj_width).sum()
    }

    pub fn source_index(&self, id: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| CoreError::Lookup(format!("unknown source id '{id}'")))
    }

    fn check_set<F: Scalar>(&self, set: &SourceEmbeddingSet<F>) -> Result<()> {
        if set.sources().len() != self.specs.len() {
            return Err(CoreError::Schema(format!(
                "bag carries {} sources, manifest declares {}",
                set.sources().len(),
                self.specs.len()
            )));
        }
        for (spec, s) in self.specs.iter().zip(set.sources()) {
            if s.shape()[1] != spec.input_width {
                return Err(CoreError::Schema(format!(
                    "source '{}': expected width {}, got {}",
                    spec.id,
                    spec.input_width,
                    s.shape()[1]
                )));
            }
        }
        Ok(())
    }

    /// Project every source and concatenate along the feature axis in
    /// manifest order. Output is N x sum(proj_width).
    pub fn fuse<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        set: &SourceEmbeddingSet<F>,
    ) -> Result<TensorId> {
        self.check_set(set)?;
        let mut parts = Vec::with_capacity(self.specs.len());
        for (proj, src) in self.projections.iter().zip(set.sources()) {
            let x = g.constant(src.clone())?;
            parts.push(proj.forward(g, bind, x)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_cols(&parts)
        }
    }

    /// Project only the source at `index`, bypassing fusion (the
    /// single-embedder ablation path).
    pub fn project_single<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        set: &SourceEmbeddingSet<F>,
        index: usize,
    ) -> Result<TensorId> {
        self.check_set(set)?;
        if index >= self.specs.len() {
            return Err(CoreError::Lookup(format!(
                "source index {index} out of {} sources",
                self.specs.len()
            )));
        }
        let x = g.constant(set.sources()[index].clone())?;
        self.projections[index].forward(g, bind, x)
    }
}
