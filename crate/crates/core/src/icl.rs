//! Outcome decoration and masked cross-batch attention over CLS embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Fwd, Linear, Mlp, Norm};
use crate::numeric::{softplus_inv, Mask, Tape, Tensor, Var};
use crate::params::{Group, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Queries, keys and values all read the decorated tokens.
    Nonlinear,
    /// Queries and keys read the undecorated tokens; only values see responses.
    Linearized,
}

/// Which case weight enters the decorator's credibility weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaSource {
    Exposure,
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclConfig {
    pub layers: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub kappa_source: KappaSource,
    pub kappa_init: f64,
    pub kappa_trainable: bool,
    pub decorator_hidden: usize,
    pub ffn_mult: usize,
    /// Start every layer as an exact pass-through.
    pub identity_init: bool,
    /// Let context rows attend to target rows. Off by default: with more
    /// than one layer that path carries one target's features into another
    /// target's prediction.
    pub context_attends_targets: bool,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            variant: Variant::Nonlinear,
            dropout: 0.1,
            kappa_source: KappaSource::Unit,
            kappa_init: 1.0,
            kappa_trainable: true,
            decorator_hidden: 16,
            ffn_mult: 4,
            identity_init: true,
            context_attends_targets: false,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Linearized && self.layers > 1 {
            return Err(Error::Config(format!(
                "the linearized variant supports a single ICL layer, got {}",
                self.layers
            )));
        }
        if !(self.kappa_init > 0.0) {
            return Err(Error::Config(format!("kappa_init must be positive, got {}", self.kappa_init)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.decorator_hidden == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// `v / (v + κ)`.
pub fn credibility_weight(v: f64, kappa: f64) -> f64 {
    v / (v + kappa)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decorator {
    pub response: Mlp,
    pub kappa_raw: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IclLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ln1: Norm,
    pub ffn: Mlp,
    pub ln2: Norm,
    /// Residual blend: `out = C + g·(layer(C) − C)`.
    pub gate: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IclStack {
    pub config: IclConfig,
    pub decorator: Decorator,
    pub layers: Vec<IclLayer>,
}

impl IclStack {
    pub fn new<R: Rng + ?Sized>(
        s: &mut ParamStore,
        config: IclConfig,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dg = Group::Decorator;
        let decorator = Decorator {
            response: Mlp {
                l1: Linear::new(s, "deco.l1", dg, 1, config.decorator_hidden, rng),
                l2: Linear::new(s, "deco.l2", dg, config.decorator_hidden, d, rng),
            },
            kappa_raw: s.add("deco.kappa_raw", dg, Tensor::vector(vec![softplus_inv(config.kappa_init)])),
        };
        if !config.kappa_trainable {
            s.set_pinned(decorator.kappa_raw, true);
        }
        let ig = Group::Icl;
        let hidden = d * config.ffn_mult;
        let g0 = if config.identity_init { 0.0 } else { 1.0 };
        let layers = (0..config.layers)
            .map(|l| {
                let n = |x: &str| format!("icl{l}.{x}");
                IclLayer {
                    q: Linear::new(s, &n("q"), ig, d, d, rng),
                    k: Linear::new(s, &n("k"), ig, d, d, rng),
                    v: Linear::new(s, &n("v"), ig, d, d, rng),
                    ln1: Norm::new(s, &n("ln1"), ig, d),
                    ffn: Mlp {
                        l1: Linear::new(s, &n("ff1"), ig, d, hidden, rng),
                        l2: Linear::new(s, &n("ff2"), ig, hidden, d, rng),
                    },
                    ln2: Norm::new(s, &n("ln2"), ig, d),
                    gate: s.add(n("gate"), ig, Tensor::vector(vec![g0])),
                }
            })
            .collect();
        Ok(Self {
            config,
            decorator,
            layers,
        })
    }
}

/// `[context ‖ target]` batch bookkeeping. Responses of target rows are never
/// read by the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTargetBatch {
    pub n_context: usize,
    pub n_target: usize,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub ids: Vec<u64>,
}

impl ContextTargetBatch {
    pub fn new(n_context: usize, n_target: usize, y: Vec<f64>, v: Vec<f64>, ids: Vec<u64>) -> Result<Self> {
        let n = n_context + n_target;
        if n == 0 || y.len() != n || v.len() != n || ids.len() != n {
            return Err(Error::Contract(format!(
                "batch of {n_context} context and {n_target} target rows with {} responses",
                y.len()
            )));
        }
        Ok(Self {
            n_context,
            n_target,
            y,
            v,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.n_context + self.n_target
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_context(&self, i: usize) -> bool {
        i < self.n_context
    }

    pub fn membership(&self) -> Vec<f64> {
        (0..self.len()).map(|i| if self.is_context(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn target_rows(&self) -> std::ops::Range<usize> {
        self.n_context..self.len()
    }

    pub fn mask(&self) -> Mask {
        build_mask(self.n_target, self.n_context)
    }

    /// Mask used inside the ICL layers.
    pub fn layer_mask(&self, context_attends_targets: bool) -> Mask {
        if context_attends_targets {
            self.mask()
        } else {
            build_isolating_mask(self.n_target, self.n_context)
        }
    }

    /// Sample weights of the training loss: 0 for context, `v` for targets.
    pub fn loss_weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| if self.is_context(i) { 0.0 } else { self.v[i] })
            .collect()
    }
}

/// Pairwise mask for a context-first batch: distinct target pairs are masked.
pub fn build_mask(n_target: usize, n_context: usize) -> Mask {
    let n = n_target + n_context;
    Mask::from_fn(n, n, |i, j| i >= n_context && j >= n_context && i != j)
}

/// [`build_mask`] with every context-to-target entry masked as well, so each
/// target row only ever sees the context rows and itself.
pub fn build_isolating_mask(n_target: usize, n_context: usize) -> Mask {
    let n = n_target + n_context;
    Mask::from_fn(n, n, |i, j| j >= n_context && i != j)
}

/// Values recorded for one ICL layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `[n, n]` attention probabilities.
    pub attention: Tensor,
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    /// Head output `A·V`.
    pub head: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attention: Var,
    pub queries: Var,
    pub keys: Var,
    pub values: Var,
    pub head: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct IclOutput {
    pub decorated: Var,
    pub layers: Vec<LayerVars>,
    /// `[n, 2b]` rows after the last layer.
    pub rows: Var,
}

impl IclOutput {
    pub fn trace(&self, tape: &Tape) -> AttentionTrace {
        AttentionTrace {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let sq = |v: Var| {
                        let t = tape.value(v);
                        let n = t.shape()[t.rank() - 2];
                        let d = t.last_dim();
                        t.clone().reshaped(vec![n, d]).expect("same size")
                    };
                    LayerTrace {
                        attention: sq(l.attention),
                        queries: tape.value(l.queries).clone(),
                        keys: tape.value(l.keys).clone(),
                        values: tape.value(l.values).clone(),
                        head: sq(l.head),
                    }
                })
                .collect(),
        }
    }
}

/// Adds `w_i·z(y_i)` to context rows, `w_i = m_i·v_i/(v_i + κ)`.
pub fn decorate(stack: &IclStack, f: &mut Fwd, c: Var, batch: &ContextTargetBatch) -> Result<Var> {
    let n = batch.len();
    let p = f.params;
    let t = &mut *f.tape;
    let y: Vec<f64> = (0..n)
        .map(|i| if batch.is_context(i) { batch.y[i] } else { 0.0 })
        .collect();
    let yv = t.constant(Tensor::new(vec![n, 1], y)?);
    let z = stack.decorator.response.forward(t, p, yv)?;
    let kappa = t.softplus(p.var(stack.decorator.kappa_raw));
    let v = match stack.config.kappa_source {
        KappaSource::Unit => vec![1.0; n],
        KappaSource::Exposure => batch.v.clone(),
    };
    let w = t.credibility_weights(kappa, v, batch.membership())?;
    let deco = t.row_scale(z, w)?;
    t.add(c, deco)
}

/// Decorates once, then applies every ICL layer. `c_cred` is `[n, 2b]` in
/// batch order.
pub fn icl_forward(stack: &IclStack, f: &mut Fwd, c_cred: Var, batch: &ContextTargetBatch) -> Result<IclOutput> {
    stack.config.validate()?;
    let n = batch.len();
    if f.tape.shape(c_cred).first() != Some(&n) {
        return Err(Error::dim("icl_forward", f.tape.shape(c_cred), &[n]));
    }
    let d = f.tape.shape(c_cred)[1];
    let mask = batch.layer_mask(stack.config.context_attends_targets);
    let scale = 1.0 / (d as f64).sqrt();
    let rate = stack.config.dropout;
    let decorated = decorate(stack, f, c_cred, batch)?;
    let mut c = decorated;
    let mut layers = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (t, p) = (&mut *f.tape, f.params);
        let qk_in = match stack.config.variant {
            Variant::Nonlinear => c,
            Variant::Linearized => c_cred,
        };
        let q = layer.q.forward(t, p, qk_in)?;
        let k = layer.k.forward(t, p, qk_in)?;
        let v = layer.v.forward(t, p, c)?;
        let q3 = t.reshape(q, vec![1, n, d])?;
        let k3 = t.reshape(k, vec![1, n, d])?;
        let v3 = t.reshape(v, vec![1, n, d])?;
        let s = t.bmm(q3, k3, true)?;
        let s = t.scale(s, scale);
        let a = t.masked_softmax(s, Some(&mask))?;
        let h3 = t.bmm(a, v3, false)?;
        let h = t.reshape(h3, vec![n, d])?;
        let hd = t.dropout(h, rate, f.training, f.rng)?;
        let r = t.add(c, hd)?;
        let mid = layer.ln1.forward(t, p, r)?;
        let ff = layer.ffn.forward(t, p, mid)?;
        let ff = t.dropout(ff, rate, f.training, f.rng)?;
        let r = t.add(mid, ff)?;
        let full = layer.ln2.forward(t, p, r)?;
        let delta = t.sub(full, c)?;
        let delta = t.scale_by(delta, p.var(layer.gate))?;
        let out = t.add(c, delta)?;
        layers.push(LayerVars {
            attention: a,
            queries: q,
            keys: k,
            values: v,
            head: h3,
            output: out,
        });
        c = out;
    }
    Ok(IclOutput {
        decorated,
        layers,
        rows: c,
    })
}
