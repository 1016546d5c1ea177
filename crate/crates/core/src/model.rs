//! Base credibility transformer: feature tokenizer, self-attention encoder,
//! credibility gate and log-rate decoder.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedInstance, N_CAT, N_CONT, N_FEATURES};
use crate::error::{Error, Result};
use crate::icl::{IclConfig, IclStack};
use crate::numeric::{softplus_inv, Tape, Tensor, Var};
use crate::params::{glorot, normal, Bound, Group, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;
/// Tokens per instance: CLS plus one per feature.
pub const N_TOKENS: usize = N_FEATURES + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `2b`.
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Probability that the gate keeps the instance token during training.
    pub gate_p: f64,
    /// Initial evaluation blend weight of the instance token.
    pub alpha_init: f64,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            encoder_layers: 2,
            ffn_mult: 4,
            dropout: 0.1,
            gate_p: 0.9,
            alpha_init: 0.9,
            decoder_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if !(self.gate_p > 0.0 && self.gate_p <= 1.0) {
            return Err(Error::Config(format!("gate_p {} outside (0, 1]", self.gate_p)));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(Error::Config(format!("alpha_init {} outside (0, 1)", self.alpha_init)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ffn_mult == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), group, glorot(rng, fan_in, fan_out)),
            b: store.add(format!("{name}.b"), group, Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = t.matmul(x, p.var(self.w))?;
        t.add_row(y, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        t.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Two-layer GELU network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, p, x)?;
        let h = t.gelu(h);
        self.l2.forward(t, p, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub tables: Vec<ParamId>,
    pub cont_w: Vec<ParamId>,
    pub cont_b: Vec<ParamId>,
    pub identity: Vec<ParamId>,
    pub cls: ParamId,
    pub cardinalities: [usize; N_CAT],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: Norm,
    pub ffn: Mlp,
    pub ln2: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub collective: ParamId,
    pub alpha_raw: ParamId,
}

/// Index that moves `[a, b, c, d]` to `[a, c, b, d]`.
fn swap_middle(a: usize, b: usize, c: usize, d: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(a * b * c * d);
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                let base = ((i * b + j) * c + k) * d;
                idx.extend(base..base + d);
            }
        }
    }
    Arc::new(idx)
}

/// Per-run forward context: tape, bound parameters, mode and randomness.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

/// Encoder outputs retained for inspection.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub tokens: Var,
    /// Per layer `[B·heads, T, T]` attention probabilities.
    pub attention: Vec<Var>,
}

/// Intermediate representations of one embedding pass.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub c_inst: Var,
    pub c_cred: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub encoder: Vec<EncoderLayer>,
    pub gate: Gate,
    pub decoder: Mlp,
    pub icl: Option<IclStack>,
}

impl Model {
    pub fn new(config: ModelConfig, cardinalities: [usize; N_CAT], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut s = ParamStore::new();
        let tg = Group::Tokenizer;
        let tables = (0..N_CAT)
            .map(|f| s.add(format!("cat{f}.table"), tg, normal(&mut rng, &[cardinalities[f], d], 0.1)))
            .collect();
        let cont_w = (0..N_CONT)
            .map(|k| s.add(format!("cont{k}.w"), tg, normal(&mut rng, &[d], 0.1)))
            .collect();
        let cont_b = (0..N_CONT)
            .map(|k| s.add(format!("cont{k}.b"), tg, normal(&mut rng, &[d], 0.1)))
            .collect();
        let identity = (0..N_FEATURES)
            .map(|f| s.add(format!("ident{f}"), tg, normal(&mut rng, &[d], 0.1)))
            .collect();
        let cls = s.add("cls", tg, normal(&mut rng, &[d], 0.1));
        let tokenizer = Tokenizer {
            tables,
            cont_w,
            cont_b,
            identity,
            cls,
            cardinalities,
        };

        let eg = Group::Encoder;
        let hidden = d * config.ffn_mult;
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let n = |x: &str| format!("enc{l}.{x}");
                EncoderLayer {
                    q: Linear::new(&mut s, &n("q"), eg, d, d, &mut rng),
                    k: Linear::new(&mut s, &n("k"), eg, d, d, &mut rng),
                    v: Linear::new(&mut s, &n("v"), eg, d, d, &mut rng),
                    o: Linear::new(&mut s, &n("o"), eg, d, d, &mut rng),
                    ln1: Norm::new(&mut s, &n("ln1"), eg, d),
                    ffn: Mlp {
                        l1: Linear::new(&mut s, &n("ff1"), eg, d, hidden, &mut rng),
                        l2: Linear::new(&mut s, &n("ff2"), eg, hidden, d, &mut rng),
                    },
                    ln2: Norm::new(&mut s, &n("ln2"), eg, d),
                }
            })
            .collect();

        let alpha = config.alpha_init;
        let gate = Gate {
            collective: s.add("collective", Group::Gate, normal(&mut rng, &[d], 0.1)),
            alpha_raw: s.add(
                "alpha_raw",
                Group::Gate,
                Tensor::vector(vec![(alpha / (1.0 - alpha)).ln()]),
            ),
        };
        let decoder = Mlp {
            l1: Linear::new(&mut s, "dec.l1", Group::Decoder, d, config.decoder_hidden, &mut rng),
            l2: Linear::new(&mut s, "dec.l2", Group::Decoder, config.decoder_hidden, 1, &mut rng),
        };
        Ok(Self {
            config,
            store: s,
            tokenizer,
            encoder,
            gate,
            decoder,
            icl: None,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Inserts freshly initialised decorator and ICL layers.
    pub fn attach_icl(&mut self, config: IclConfig, seed: u64) -> Result<()> {
        if self.icl.is_some() {
            return Err(Error::Contract("ICL layers already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1c1_57ac);
        self.icl = Some(IclStack::new(&mut self.store, config, self.config.width, &mut rng)?);
        Ok(())
    }

    /// Sets the evaluation blend weight of the credibility gate.
    pub fn set_alpha(&mut self, alpha: f64) {
        let raw = if alpha <= 0.0 {
            -745.0
        } else if alpha >= 1.0 {
            745.0
        } else {
            (alpha / (1.0 - alpha)).ln()
        };
        self.store.get_mut(self.gate.alpha_raw).data_mut()[0] = raw;
    }

    pub fn alpha(&self) -> f64 {
        crate::numeric::sigmoid(self.store.get(self.gate.alpha_raw).item())
    }

    /// Learned credibility coefficient κ of the decorator, if attached.
    pub fn kappa(&self) -> Option<f64> {
        self.icl
            .as_ref()
            .map(|s| crate::numeric::softplus(self.store.get(s.decorator.kappa_raw).item()))
    }

    pub fn set_kappa(&mut self, kappa: f64) -> Result<()> {
        let id = self
            .icl
            .as_ref()
            .ok_or_else(|| Error::Contract("no decorator attached".into()))?
            .decorator
            .kappa_raw;
        if !(kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        self.store.get_mut(id).data_mut()[0] = softplus_inv(kappa);
        Ok(())
    }

    /// `[B·T, 2b]` token matrix, instance-major, CLS first in each instance.
    pub fn tokenize(&self, f: &mut Fwd, batch: &[&EncodedInstance]) -> Result<Var> {
        let b = batch.len();
        let d = self.config.width;
        let tk = &self.tokenizer;
        let (t, p) = (&mut *f.tape, f.params);
        let mut parts = Vec::with_capacity(N_TOKENS);
        parts.push(t.broadcast_rows(p.var(tk.cls), b)?);
        for feat in 0..N_CAT {
            let card = tk.cardinalities[feat];
            let idx: Vec<usize> = batch.iter().map(|e| e.cat[feat]).collect();
            if let Some(&bad) = idx.iter().find(|&&i| i >= card) {
                return Err(Error::Contract(format!(
                    "categorical index {bad} out of range for feature {feat} with {card} levels"
                )));
            }
            let rows = t.select_rows(p.var(tk.tables[feat]), &idx)?;
            parts.push(t.add_row(rows, p.var(tk.identity[feat]))?);
        }
        for k in 0..N_CONT {
            let x = t.constant(Tensor::vector(batch.iter().map(|e| e.cont[k]).collect()));
            let w = t.broadcast_rows(p.var(tk.cont_w[k]), b)?;
            let tok = t.row_scale(w, x)?;
            let tok = t.add_row(tok, p.var(tk.cont_b[k]))?;
            parts.push(t.add_row(tok, p.var(tk.identity[N_CAT + k]))?);
        }
        let feature_major = t.concat(&parts)?;
        t.gather(feature_major, swap_middle(1, N_TOKENS, b, d), vec![b * N_TOKENS, d])
    }

    /// Post-norm self-attention encoder over `[B·T, 2b]` tokens.
    pub fn encode(&self, f: &mut Fwd, tokens: Var, b: usize, n_tok: usize) -> Result<EncoderOutput> {
        let d = self.config.width;
        let h = self.config.heads;
        let dh = d / h;
        let split = swap_middle(b, n_tok, h, dh);
        let merge = swap_middle(b, h, n_tok, dh);
        let scale = 1.0 / (dh as f64).sqrt();
        let rate = self.config.dropout;
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (t, p) = (&mut *f.tape, f.params);
            let q = layer.q.forward(t, p, x)?;
            let k = layer.k.forward(t, p, x)?;
            let v = layer.v.forward(t, p, x)?;
            let heads = vec![b * h, n_tok, dh];
            let q = t.gather(q, split.clone(), heads.clone())?;
            let k = t.gather(k, split.clone(), heads.clone())?;
            let v = t.gather(v, split.clone(), heads)?;
            let s = t.bmm(q, k, true)?;
            let s = t.scale(s, scale);
            let a = t.masked_softmax(s, None)?;
            attention.push(a);
            let o = t.bmm(a, v, false)?;
            let o = t.gather(o, merge.clone(), vec![b * n_tok, d])?;
            let o = layer.o.forward(t, p, o)?;
            let o = t.dropout(o, rate, f.training, f.rng)?;
            let r = t.add(x, o)?;
            let x1 = layer.ln1.forward(t, p, r)?;
            let ff = layer.ffn.forward(t, p, x1)?;
            let ff = t.dropout(ff, rate, f.training, f.rng)?;
            let r = t.add(x1, ff)?;
            x = layer.ln2.forward(t, p, r)?;
        }
        Ok(EncoderOutput {
            tokens: x,
            attention,
        })
    }

    /// Blends instance and collective tokens. In training each row keeps its
    /// instance token with probability `gate_p`; in evaluation the rows are
    /// averaged with weight `sigmoid(alpha_raw)`.
    pub fn credibilitize(&self, f: &mut Fwd, c_inst: Var) -> Result<Var> {
        let b = f.tape.shape(c_inst)[0];
        let p = f.params;
        if f.training {
            let keep: Vec<f64> = (0..b)
                .map(|_| if f.rng.gen_bool(self.config.gate_p) { 1.0 } else { 0.0 })
                .collect();
            if keep.iter().all(|&z| z == 1.0) {
                return Ok(c_inst);
            }
            let t = &mut *f.tape;
            let drop: Vec<f64> = keep.iter().map(|z| 1.0 - z).collect();
            let zk = t.constant(Tensor::vector(keep));
            let zd = t.constant(Tensor::vector(drop));
            let a = t.row_scale(c_inst, zk)?;
            let coll = t.broadcast_rows(p.var(self.gate.collective), b)?;
            let c = t.row_scale(coll, zd)?;
            t.add(a, c)
        } else {
            let t = &mut *f.tape;
            let alpha = t.sigmoid(p.var(self.gate.alpha_raw));
            let one = t.constant(Tensor::vector(vec![1.0]));
            let rest = t.sub(one, alpha)?;
            let a = t.scale_by(c_inst, alpha)?;
            let coll = t.broadcast_rows(p.var(self.gate.collective), b)?;
            let c = t.scale_by(coll, rest)?;
            t.add(a, c)
        }
    }

    /// tokenize → encode → read CLS → credibilitize.
    pub fn embed(&self, f: &mut Fwd, batch: &[&EncodedInstance]) -> Result<Embedding> {
        let b = batch.len();
        let tokens = self.tokenize(f, batch)?;
        let enc = self.encode(f, tokens, b, N_TOKENS)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * N_TOKENS).collect();
        let c_inst = f.tape.select_rows(enc.tokens, &cls_rows)?;
        let c_cred = self.credibilitize(f, c_inst)?;
        Ok(Embedding { c_inst, c_cred })
    }

    /// `[B, 2b]` → `[B]` log-rates.
    pub fn decode(&self, f: &mut Fwd, c: Var) -> Result<Var> {
        let z = self.decoder.forward(f.tape, f.params, c)?;
        let b = f.tape.shape(z)[0];
        f.tape.reshape(z, vec![b])
    }

    /// Evaluation-mode CLS embeddings (`c_inst`, `c_cred`) as `[B, 2b]` tensors.
    pub fn embed_eval(&self, batch: &[&EncodedInstance]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Fwd {
            tape: &mut tape,
            params: &bound,
            training: false,
            rng: &mut rng,
        };
        let e = self.embed(&mut f, batch)?;
        Ok((tape.value(e.c_inst).clone(), tape.value(e.c_cred).clone()))
    }

    /// Evaluation-mode log-rates of arbitrary `[B, 2b]` rows.
    pub fn decode_eval(&self, c: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(c.clone());
        let mut f = Fwd {
            tape: &mut tape,
            params: &bound,
            training: false,
            rng: &mut rng,
        };
        let z = self.decode(&mut f, x)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Embeds `rows` in evaluation mode, `batch` at a time, into one `[n, 2b]` tensor.
    pub fn embed_all(&self, rows: &[EncodedInstance], batch: usize) -> Result<Tensor> {
        let d = self.config.width;
        let mut out = Vec::with_capacity(rows.len() * d);
        for chunk in rows.chunks(batch.max(1)) {
            let refs: Vec<&EncodedInstance> = chunk.iter().collect();
            let (_, c) = self.embed_eval(&refs)?;
            out.extend_from_slice(c.data());
        }
        Tensor::new(vec![rows.len(), d], out)
    }

    /// Plain (no-context) evaluation-mode log-rates.
    pub fn log_rates(&self, rows: &[EncodedInstance], batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(batch.max(1)) {
            let refs: Vec<&EncodedInstance> = chunk.iter().collect();
            let (_, c) = self.embed_eval(&refs)?;
            out.extend(self.decode_eval(&c)?);
        }
        Ok(out)
    }
}
