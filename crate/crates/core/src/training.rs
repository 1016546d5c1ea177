//! Three-phase training, early stopping, ICL inference and evaluation.

use std::collections::HashSet;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{frozen_groups, Config, PhaseConfig, RetrievalConfig};
use crate::data::{validation_indices, EncodedInstance};
use crate::decoder::{deviance_pct, ensemble_mean, predict};
use crate::error::{Error, Result};
use crate::icl::{icl_forward, AttentionTrace, ContextTargetBatch};
use crate::model::{Fwd, Model};
use crate::numeric::{Tape, Tensor, Var};
use crate::params::{Group, Optimizer};
use crate::retrieval::{assemble_context, chunk_ranges, ContextAssembly, EmbeddingIndex};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, phase, epoch, batch)` cell.
pub fn derive_rng(seed: u64, phase: u64, epoch: u64, batch: u64) -> ChaCha8Rng {
    let s = [phase, epoch, batch]
        .into_iter()
        .fold(splitmix(seed), |acc, x| splitmix(acc ^ splitmix(x)));
    ChaCha8Rng::seed_from_u64(s)
}

/// Keeps a seeded random subset of `n` rows, in original order.
pub fn subsample<T: Clone>(rows: &[T], n: usize, seed: u64) -> Vec<T> {
    if n == 0 || n >= rows.len() {
        return rows.to_vec();
    }
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut derive_rng(seed, 0, 0, 0xda7a));
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| rows[i].clone()).collect()
}

/// Fitting rows and the held-out validation rows of one run.
#[derive(Clone, Debug)]
pub struct TrainSplit {
    pub fit: Vec<EncodedInstance>,
    pub val: Vec<EncodedInstance>,
}

impl TrainSplit {
    pub fn new(train: &[EncodedInstance], fraction: f64, seed: u64) -> Self {
        let (fit, val) = validation_indices(train.len(), fraction, seed);
        Self {
            fit: fit.into_iter().map(|i| train[i].clone()).collect(),
            val: val.into_iter().map(|i| train[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss in 10⁻² units; absent for the baseline epoch 0.
    pub train_loss: Option<f64>,
    /// Validation deviance in 10⁻² units.
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub phase: u8,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub param_count: usize,
    pub trainable_count: usize,
    pub hyper: PhaseConfig,
    pub frozen: Vec<Group>,
    #[serde(skip, default)]
    pub wall_time_s: f64,
}

impl TrainingReport {
    pub fn initial_val(&self) -> f64 {
        self.epochs[0].val_loss
    }
}

/// Evaluation-mode embeddings of a row set together with its search index.
pub struct ContextSource<'a> {
    pub rows: &'a [EncodedInstance],
    pub emb: Tensor,
    pub index: EmbeddingIndex,
}

impl<'a> ContextSource<'a> {
    pub fn new(model: &Model, rows: &'a [EncodedInstance], embed_batch: usize) -> Result<Self> {
        let emb = model.embed_all(rows, embed_batch)?;
        Self::from_embeddings(rows, emb)
    }

    pub fn from_embeddings(rows: &'a [EncodedInstance], emb: Tensor) -> Result<Self> {
        let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
        let index = EmbeddingIndex::build(&emb, &ids)?;
        Ok(Self { rows, emb, index })
    }
}

fn gather_rows(t: &Tensor, rows: impl IntoIterator<Item = usize>) -> Result<Tensor> {
    let d = t.last_dim();
    let data: Vec<f64> = rows.into_iter().flat_map(|r| t.row(r).to_vec()).collect();
    Tensor::new(vec![data.len() / d.max(1), d], data)
}

/// Builds the `[context ‖ target]` batch for `targets` drawn from `context`.
pub fn batch_for(
    context: &[&EncodedInstance],
    targets: &[&EncodedInstance],
) -> Result<ContextTargetBatch> {
    let all = context.iter().chain(targets);
    let (mut y, mut v, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for r in all {
        y.push(r.y);
        v.push(r.v);
        ids.push(r.id);
    }
    ContextTargetBatch::new(context.len(), targets.len(), y, v, ids)
}

/// Everything one evaluation-mode ICL pass produces.
#[derive(Clone, Debug)]
pub struct IclPass {
    pub batch: ContextTargetBatch,
    pub assembly: ContextAssembly,
    /// Log-rates of the target rows.
    pub log_rates: Vec<f64>,
    pub trace: AttentionTrace,
    pub decorated: Tensor,
    pub rows: Tensor,
}

/// Runs the ICL stack in evaluation mode on precomputed `c_cred` rows.
pub fn icl_eval(model: &Model, c_cred: &Tensor, batch: &ContextTargetBatch) -> Result<(Vec<f64>, AttentionTrace, Tensor, Tensor)> {
    let stack = model
        .icl
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no ICL layers".into()))?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &|_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = tape.constant(c_cred.clone());
    let mut f = Fwd {
        tape: &mut tape,
        params: &bound,
        training: false,
        rng: &mut rng,
    };
    let out = icl_forward(stack, &mut f, c, batch)?;
    let rows: Vec<usize> = batch.target_rows().collect();
    let tgt = f.tape.select_rows(out.rows, &rows)?;
    let z = model.decode(&mut f, tgt)?;
    let trace = out.trace(&tape);
    Ok((
        tape.value(z).data().to_vec(),
        trace,
        tape.value(out.decorated).clone(),
        tape.value(out.rows).clone(),
    ))
}

/// Evaluation-mode ICL over one target chunk with its retrieved context.
pub fn icl_chunk(
    model: &Model,
    source: &ContextSource,
    targets: &[EncodedInstance],
    target_emb: &Tensor,
    r: &RetrievalConfig,
) -> Result<IclPass> {
    let exclude: HashSet<u64> = targets.iter().map(|t| t.id).collect();
    let assembly = assemble_context(&source.index, target_emb, r.k, r.context_size, &exclude)?;
    let pos = assembly.positions();
    let ctx: Vec<&EncodedInstance> = pos.iter().map(|&p| &source.rows[p]).collect();
    let tgt: Vec<&EncodedInstance> = targets.iter().collect();
    let batch = batch_for(&ctx, &tgt)?;
    let ctx_emb = gather_rows(&source.emb, pos.iter().copied())?;
    let mut data = ctx_emb.into_data();
    data.extend_from_slice(target_emb.data());
    let c = Tensor::new(vec![batch.len(), target_emb.last_dim()], data)?;
    let (log_rates, trace, decorated, rows) = icl_eval(model, &c, &batch)?;
    Ok(IclPass {
        batch,
        assembly,
        log_rates,
        trace,
        decorated,
        rows,
    })
}

/// Chunked ICL log-rates for `targets`, context drawn from `source`.
pub fn icl_log_rates(
    model: &Model,
    source: &ContextSource,
    targets: &[EncodedInstance],
    target_emb: &Tensor,
    r: &RetrievalConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(targets.len());
    for range in chunk_ranges(targets.len(), r.chunk_size) {
        let emb = gather_rows(target_emb, range.clone())?;
        let pass = icl_chunk(model, source, &targets[range], &emb, r)?;
        out.extend(pass.log_rates);
    }
    Ok(out)
}

fn mu_from(rows: &[EncodedInstance], log_rates: &[f64]) -> Vec<f64> {
    rows.iter()
        .zip(log_rates)
        .map(|(r, &z)| predict(z, r.v).mu)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Plain,
    Icl,
}

/// Expected counts for `targets`. In ICL mode the context comes from
/// `context_rows`; target ids are always excluded from their own context.
pub fn predict_mu(
    model: &Model,
    context_rows: &[EncodedInstance],
    targets: &[EncodedInstance],
    mode: EvalMode,
    r: &RetrievalConfig,
) -> Result<Vec<f64>> {
    match mode {
        EvalMode::Plain => Ok(mu_from(targets, &model.log_rates(targets, r.embed_batch)?)),
        EvalMode::Icl => {
            let source = ContextSource::new(model, context_rows, r.embed_batch)?;
            let emb = model.embed_all(targets, r.embed_batch)?;
            Ok(mu_from(targets, &icl_log_rates(model, &source, targets, &emb, r)?))
        }
    }
}

/// Row-wise mean of several models' expected counts.
pub fn ensemble_predict(
    models: &[&Model],
    context_rows: &[EncodedInstance],
    targets: &[EncodedInstance],
    mode: EvalMode,
    r: &RetrievalConfig,
) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = models
        .iter()
        .map(|m| predict_mu(m, context_rows, targets, mode, r))
        .collect::<Result<_>>()?;
    ensemble_mean(&per)
}

/// Validation deviance (10⁻² units) in the mode matching the phase.
fn validation_loss(model: &Model, split: &TrainSplit, phase: u8, r: &RetrievalConfig, source: Option<&ContextSource>) -> Result<f64> {
    if split.val.is_empty() {
        return Ok(f64::NAN);
    }
    let mu = if phase == 1 {
        mu_from(&split.val, &model.log_rates(&split.val, r.embed_batch)?)
    } else {
        let owned;
        let src = match source {
            Some(s) => s,
            None => {
                owned = ContextSource::new(model, &split.fit, r.embed_batch)?;
                &owned
            }
        };
        let emb = model.embed_all(&split.val, r.embed_batch)?;
        mu_from(&split.val, &icl_log_rates(model, src, &split.val, &emb, r)?)
    };
    deviance_pct(&split.val, &mu)
}

fn trainable_in(phase: u8) -> impl Fn(Group) -> bool {
    let frozen = frozen_groups(phase);
    move |g| !frozen.contains(&g)
}

fn check_finite(loss: f64, phase: u8, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "phase {phase}, epoch {epoch}, batch {batch}: loss {loss}"
        )))
    }
}

/// Non-finite activations surface as degenerate softmax rows or invalid
/// deviance inputs; during training both mean the run has diverged.
fn as_divergence(e: Error, phase: u8, epoch: usize, batch: usize) -> Error {
    match e {
        Error::DegenerateRow { .. } | Error::Domain(_) => {
            Error::Divergence(format!("phase {phase}, epoch {epoch}, batch {batch}: {e}"))
        }
        e => e,
    }
}

fn check_params(model: &Model, phase: u8, epoch: usize, batch: usize) -> Result<()> {
    match model.store.ids().find(|&id| !model.store.get(id).is_finite()) {
        None => Ok(()),
        Some(id) => Err(Error::Divergence(format!(
            "phase {phase}, epoch {epoch}, batch {batch}: parameter {} is not finite",
            model.store.name(id)
        ))),
    }
}

fn plain_step(
    model: &mut Model,
    opt: &mut Optimizer,
    rows: &[&EncodedInstance],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let trainable = trainable_in(1);
    let bound = model.store.bind(&mut tape, &trainable);
    let mut f = Fwd {
        tape: &mut tape,
        params: &bound,
        training: true,
        rng,
    };
    let e = model.embed(&mut f, rows)?;
    let z = model.decode(&mut f, e.c_cred)?;
    let n = rows.len();
    let y = rows.iter().map(|r| r.y).collect();
    let v = rows.iter().map(|r| r.v).collect();
    let loss = tape.poisson_deviance(z, y, v, vec![1.0; n], n as f64)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    opt.step(&mut model.store, &bound, &grads)?;
    Ok(value)
}

/// Builds the exposure-weighted ICL loss of `targets` given `context` on the
/// tape behind `f`.
pub fn icl_loss_var(
    model: &Model,
    f: &mut Fwd,
    context: &[&EncodedInstance],
    targets: &[&EncodedInstance],
) -> Result<Var> {
    let batch = batch_for(context, targets)?;
    let rows: Vec<&EncodedInstance> = context.iter().chain(targets).copied().collect();
    let stack = model
        .icl
        .as_ref()
        .ok_or_else(|| Error::Contract("ICL phase without ICL layers".into()))?;
    let e = model.embed(f, &rows)?;
    let out = icl_forward(stack, f, e.c_cred, &batch)?;
    let tr: Vec<usize> = batch.target_rows().collect();
    let tgt = f.tape.select_rows(out.rows, &tr)?;
    let z = model.decode(f, tgt)?;
    let y = targets.iter().map(|r| r.y).collect();
    let v: Vec<f64> = targets.iter().map(|r| r.v).collect();
    f.tape.poisson_deviance(z, y, v.clone(), v, targets.len() as f64)
}

/// One optimisation step on a `[context ‖ targets]` batch. Returns the
/// exposure-weighted target loss.
pub fn icl_step(
    model: &mut Model,
    opt: &mut Optimizer,
    phase: u8,
    context: &[&EncodedInstance],
    targets: &[&EncodedInstance],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let trainable = trainable_in(phase);
    let bound = model.store.bind(&mut tape, &trainable);
    let loss = {
        let mut f = Fwd {
            tape: &mut tape,
            params: &bound,
            training: true,
            rng,
        };
        icl_loss_var(model, &mut f, context, targets)?
    };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    opt.step(&mut model.store, &bound, &grads)?;
    Ok(value)
}

struct EarlyStop {
    best: f64,
    best_epoch: usize,
    since: usize,
    patience: usize,
    snapshot: Vec<Tensor>,
}

impl EarlyStop {
    fn new(model: &Model, baseline: f64, patience: usize) -> Self {
        Self {
            best: baseline,
            best_epoch: 0,
            since: 0,
            patience,
            snapshot: model.store.snapshot(),
        }
    }

    /// Records an epoch; returns true when patience is exhausted.
    fn observe(&mut self, model: &Model, epoch: usize, val: f64) -> bool {
        if val < self.best || (self.best.is_nan() && !val.is_nan()) {
            self.best = val;
            self.best_epoch = epoch;
            self.since = 0;
            self.snapshot = model.store.snapshot();
            false
        } else {
            self.since += 1;
            self.since >= self.patience
        }
    }
}

fn finish(
    model: &mut Model,
    es: EarlyStop,
    phase: u8,
    cfg: &Config,
    epochs: Vec<EpochRecord>,
    stopped_early: bool,
    start: Instant,
) -> TrainingReport {
    model.store.restore(&es.snapshot);
    let frozen = frozen_groups(phase);
    let trainable: Vec<Group> = Group::ALL.into_iter().filter(|g| !frozen.contains(g)).collect();
    TrainingReport {
        phase,
        seed: cfg.seed,
        epochs,
        best_epoch: es.best_epoch,
        best_val: es.best,
        stopped_early,
        param_count: model.store.count(None),
        trainable_count: model.store.count(Some(&trainable)),
        hyper: cfg.phase(phase).clone(),
        frozen,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Supervised training of tokenizer, encoder, gate and decoder.
pub fn phase1_train(model: &mut Model, split: &TrainSplit, cfg: &Config) -> Result<TrainingReport> {
    let start = Instant::now();
    let pc = &cfg.phase1;
    let r = &cfg.retrieval;
    let baseline = validation_loss(model, split, 1, r, None)?;
    info!("phase 1 epoch 0: validation {baseline:.5}");
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: baseline,
    }];
    let mut es = EarlyStop::new(model, baseline, pc.patience);
    let mut opt = Optimizer::new(&model.store, pc.adamw());
    let mut stopped = false;
    for epoch in 1..=pc.max_epochs {
        let mut order: Vec<usize> = (0..split.fit.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, 1, epoch as u64, u64::MAX));
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, idx) in order.chunks(pc.batch_size).enumerate() {
            let rows: Vec<&EncodedInstance> = idx.iter().map(|&i| &split.fit[i]).collect();
            let mut rng = derive_rng(cfg.seed, 1, epoch as u64, b as u64);
            let loss = plain_step(model, &mut opt, &rows, &mut rng).map_err(|e| as_divergence(e, 1, epoch, b))?;
            check_finite(loss, 1, epoch, b)?;
            check_params(model, 1, epoch, b)?;
            sum += loss * rows.len() as f64;
            count += rows.len();
        }
        let val = validation_loss(model, split, 1, r, None).map_err(|e| as_divergence(e, 1, epoch, 0))?;
        let train = 100.0 * sum / count.max(1) as f64;
        info!("phase 1 epoch {epoch}: train {train:.5} validation {val:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train),
            val_loss: val,
        });
        if es.observe(model, epoch, val) {
            stopped = true;
            break;
        }
    }
    Ok(finish(model, es, 1, cfg, epochs, stopped, start))
}

fn icl_phase(model: &mut Model, split: &TrainSplit, cfg: &Config, phase: u8) -> Result<TrainingReport> {
    let start = Instant::now();
    let pc = cfg.phase(phase).clone();
    let r = &cfg.retrieval;
    if model.icl.is_none() {
        if phase != 2 {
            return Err(Error::Contract(format!("phase {phase} requires a phase-2 model")));
        }
        model.attach_icl(cfg.icl.clone(), cfg.seed)?;
    }
    let decoder_before = model.store.group_bytes(Group::Decoder);
    let check_freeze = |model: &Model| -> Result<()> {
        if phase == 2 && model.store.group_bytes(Group::Decoder) != decoder_before {
            return Err(Error::FreezeViolation("decoder changed during phase 2".into()));
        }
        Ok(())
    };

    let mut fit_emb = model.embed_all(&split.fit, r.embed_batch)?;
    let baseline = {
        let src = ContextSource::from_embeddings(&split.fit, fit_emb.clone())?;
        validation_loss(model, split, phase, r, Some(&src))?
    };
    info!("phase {phase} epoch 0: validation {baseline:.5}");
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: baseline,
    }];
    let mut es = EarlyStop::new(model, baseline, pc.patience);
    let mut opt = Optimizer::new(&model.store, pc.adamw());
    let mut stopped = false;
    for epoch in 1..=pc.max_epochs {
        let source = ContextSource::from_embeddings(&split.fit, fit_emb)?;
        let mut order: Vec<usize> = (0..split.fit.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, u64::from(phase), epoch as u64, u64::MAX));
        let mut chunks: Vec<&[usize]> = order.chunks(r.chunk_size).collect();
        if pc.chunks_per_epoch > 0 {
            chunks.truncate(pc.chunks_per_epoch);
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, idx) in chunks.into_iter().enumerate() {
            let targets: Vec<&EncodedInstance> = idx.iter().map(|&i| &split.fit[i]).collect();
            let exclude: HashSet<u64> = targets.iter().map(|t| t.id).collect();
            let temb = gather_rows(&source.emb, idx.iter().copied())?;
            let asm = assemble_context(&source.index, &temb, r.k, r.context_size, &exclude)?;
            let context: Vec<&EncodedInstance> =
                asm.positions().into_iter().map(|p| &split.fit[p]).collect();
            let mut rng = derive_rng(cfg.seed, u64::from(phase), epoch as u64, b as u64);
            let loss = icl_step(model, &mut opt, phase, &context, &targets, &mut rng)
                .map_err(|e| as_divergence(e, phase, epoch, b))?;
            check_finite(loss, phase, epoch, b)?;
            check_params(model, phase, epoch, b)?;
            debug!("phase {phase} epoch {epoch} chunk {b}: loss {loss:.6}");
            sum += loss * targets.len() as f64;
            count += targets.len();
        }
        check_freeze(model)?;
        fit_emb = model.embed_all(&split.fit, r.embed_batch)?;
        let val = {
            let src = ContextSource::from_embeddings(&split.fit, fit_emb.clone())?;
            validation_loss(model, split, phase, r, Some(&src)).map_err(|e| as_divergence(e, phase, epoch, 0))?
        };
        let train = 100.0 * sum / count.max(1) as f64;
        info!("phase {phase} epoch {epoch}: train {train:.5} validation {val:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train),
            val_loss: val,
        });
        if es.observe(model, epoch, val) {
            stopped = true;
            break;
        }
    }
    let report = finish(model, es, phase, cfg, epochs, stopped, start);
    check_freeze(model)?;
    Ok(report)
}

/// ICL fine-tuning with the decoder frozen. Attaches fresh ICL layers when
/// the model has none.
pub fn phase2_train(model: &mut Model, split: &TrainSplit, cfg: &Config) -> Result<TrainingReport> {
    icl_phase(model, split, cfg, 2)
}

/// Joint fine-tuning of every parameter group.
pub fn phase3_finetune(model: &mut Model, split: &TrainSplit, cfg: &Config) -> Result<TrainingReport> {
    icl_phase(model, split, cfg, 3)
}

/// In-sample and out-of-sample deviances in 10⁻² units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub in_sample: Option<f64>,
    pub out_of_sample: f64,
    pub train_mu: Option<Vec<f64>>,
    pub test_mu: Vec<f64>,
}

/// Scores one model or an ensemble on `train` (optional) and `test`.
pub fn evaluate(
    models: &[&Model],
    train: &[EncodedInstance],
    test: &[EncodedInstance],
    mode: EvalMode,
    r: &RetrievalConfig,
    with_in_sample: bool,
) -> Result<Evaluation> {
    let test_mu = ensemble_predict(models, train, test, mode, r)?;
    let train_mu = if with_in_sample {
        Some(ensemble_predict(models, train, train, mode, r)?)
    } else {
        None
    };
    Ok(Evaluation {
        mode,
        in_sample: train_mu.as_ref().map(|m| deviance_pct(train, m)).transpose()?,
        out_of_sample: deviance_pct(test, &test_mu)?,
        train_mu,
        test_mu,
    })
}
