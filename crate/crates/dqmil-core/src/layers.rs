//! Named trainable parameters and the small layers built from them.
//!
//! Parameters live outside any graph in a `ParamSet`; each forward pass
//! binds them into a fresh `Graph` as leaves. Registration order is the
//! canonical order for optimizer state, checkpoints and gradient maps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter within its `ParamSet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamDef<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    /// Whether decoupled weight decay applies (false for biases,
    /// layer-norm affine terms and latent arrays).
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    params: Vec<ParamDef<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> ParamId {
        self.params.push(ParamDef {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn def(&self, id: ParamId) -> &ParamDef<F> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamDef<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| CoreError::Lookup(format!("no parameter named '{name}'")))
    }

    /// Overwrite one parameter's values, keeping shape.
    pub fn set_values(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let cur = &self.params[id.0];
        if cur.value.shape() != value.shape() {
            return Err(CoreError::Dimension(format!(
                "parameter '{}' has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Insert every parameter into a graph. `trainable` controls whether
    /// gradients are tracked (training) or not (evaluation).
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let id = if trainable {
                g.trainable(p.value.clone())?
            } else {
                g.constant(p.value.clone())?
            };
            ids.push(id);
        }
        Ok(Binding { ids })
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| ParamDef {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Graph-side ids of one bound `ParamSet`, parallel to registration order.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[index_of(p)]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

fn index_of(p: ParamId) -> usize {
    p.0
}

// ── Layers ──────────────────────────────────────────────────────────

/// Affine map x -> x W + b. Weight is Xavier-initialized; bias optional.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = ps.add(
            format!("{prefix}.w"),
            Tensor::xavier_uniform(in_width, out_width, rng),
            true,
        );
        let b = bias.then(|| ps.add(format!("{prefix}.b"), Tensor::zeros(&[out_width]), false));
        Linear { w, b }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: TensorId,
    ) -> Result<TensorId> {
        let y = g.matmul(x, bind.id(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, bind.id(b)),
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and bias; eps fixed at construction.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, prefix: &str, width: usize) -> Self {
        let gain = ps.add(format!("{prefix}.gain"), Tensor::full(&[width], F::ONE), false);
        let bias = ps.add(format!("{prefix}.bias"), Tensor::zeros(&[width]), false);
        LayerNorm {
            gain,
            bias,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: TensorId,
    ) -> Result<TensorId> {
        g.layer_norm(x, bind.id(self.gain), bind.id(self.bias), F::from_f64(self.eps))
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        width: usize,
        hidden: usize,
        out: usize,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{prefix}.fc1"), width, hidden, true, rng),
            fc2: Linear::new(ps, &format!("{prefix}.fc2"), hidden, out, true, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: TensorId,
    ) -> Result<TensorId> {
        let h = self.fc1.forward(g, bind, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, bind, h)
    }
}

/// Classifier head: input layer norm, then a GELU MLP to class logits.
/// The input norm keeps the logits scale-free in the incoming token, so
/// cross-entropy cannot inflate token magnitudes.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl ClassifierHead {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        width: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        ClassifierHead {
            norm: LayerNorm::new(ps, &format!("{prefix}.norm"), width),
            mlp: Mlp::new(ps, prefix, width, width, classes, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: TensorId,
    ) -> Result<TensorId> {
        let normed = self.norm.forward(g, bind, x)?;
        self.mlp.forward(g, bind, normed)
    }
}
