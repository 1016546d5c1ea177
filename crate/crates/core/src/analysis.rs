//! Inspection tools: credibility checks on attention traces, PCA token
//! trajectories, nearest-neighbour stage reports and CSV export.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::RetrievalConfig;
use crate::data::{EncodedInstance, RawPolicyRecord};
use crate::error::{Error, Result};
use crate::icl::{credibility_weight, AttentionTrace, ContextTargetBatch, KappaSource};
use crate::model::Model;
use crate::numeric::{Tape, Tensor};
use crate::retrieval::chunk_ranges;
use crate::training::{icl_chunk, icl_eval, ContextSource, TrainingReport};

pub const DECOMPOSITION_TOL: f64 = 1e-9;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const WEIGHT_TOL: f64 = 1e-12;

/// Largest residual seen by each check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CredibilityReport {
    pub layers: usize,
    pub targets: usize,
    pub decomposition: f64,
    pub row_sum: f64,
    pub weights: f64,
}

fn fail(layer: usize, row: usize, check: &'static str, residual: f64) -> Error {
    Error::Verification {
        layer,
        row,
        check,
        residual,
    }
}

/// Checks every target row of every traced layer: the head output is the
/// attention-weighted sum of own and context values, the weights sum to one,
/// other targets get exactly zero, and each weight matches a softmax
/// recomputed from the recorded queries and keys.
pub fn verify_trace(trace: &AttentionTrace, batch: &ContextTargetBatch) -> Result<CredibilityReport> {
    let n = batch.len();
    let nc = batch.n_context;
    let mut rep = CredibilityReport {
        layers: trace.layers.len(),
        targets: batch.n_target,
        ..Default::default()
    };
    for (l, lt) in trace.layers.iter().enumerate() {
        let a = &lt.attention;
        let d = lt.values.last_dim();
        if a.shape() != [n, n] || lt.values.n_rows() != n {
            return Err(Error::dim("verify_trace", a.shape(), &[n, n]));
        }
        let scale = 1.0 / (d as f64).sqrt();
        for i in batch.target_rows() {
            let ai = a.row(i);
            let allowed = |j: usize| j < nc || j == i;

            let mut sum = 0.0;
            for (j, &w) in ai.iter().enumerate() {
                if allowed(j) {
                    sum += w;
                } else if w != 0.0 {
                    return Err(fail(l, i, "target-target zero", w.abs()));
                }
            }
            let r = (sum - 1.0).abs();
            rep.row_sum = rep.row_sum.max(r);
            if r > ROW_SUM_TOL {
                return Err(fail(l, i, "row sum", r));
            }

            let head = lt.head.row(i);
            for c in 0..d {
                let mut h = ai[i] * lt.values.row(i)[c];
                for j in 0..nc {
                    h += ai[j] * lt.values.row(j)[c];
                }
                let r = (h - head[c]).abs();
                rep.decomposition = rep.decomposition.max(r);
                if r > DECOMPOSITION_TOL {
                    return Err(fail(l, i, "decomposition", r));
                }
            }

            let q = lt.queries.row(i);
            let logit = |j: usize| {
                let k = lt.keys.row(j);
                q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale
            };
            let logits: Vec<(usize, f64)> = (0..n).filter(|&j| allowed(j)).map(|j| (j, logit(j))).collect();
            let max = logits.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|p| (p.1 - max).exp()).sum();
            for &(j, s) in &logits {
                let r = ((s - max).exp() / z - ai[j]).abs();
                rep.weights = rep.weights.max(r);
                if r > WEIGHT_TOL {
                    return Err(fail(l, i, "weight recomputation", r));
                }
            }
        }
    }
    Ok(rep)
}

/// Runs the ICL stack in evaluation mode on `c_cred` and verifies the trace.
pub fn verify_credibility(model: &Model, c_cred: &Tensor, batch: &ContextTargetBatch) -> Result<CredibilityReport> {
    let (_, trace, _, _) = icl_eval(model, c_cred, batch)?;
    verify_trace(&trace, batch)
}

/// Principal axes of a token set, fitted by exact covariance eigendecomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` unit-length components of dimension `d`, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn fit(data: &Tensor, k: usize) -> Result<Self> {
        if data.rank() != 2 || data.n_rows() < 2 {
            return Err(Error::Contract("PCA needs at least two rows".into()));
        }
        let (n, d) = (data.n_rows(), data.last_dim());
        if k == 0 || k > d {
            return Err(Error::Config(format!("PCA dimension {k} outside 1..={d}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let r = data.row(i);
            for a in 0..d {
                let xa = r[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += xa * (r[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &c in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, p: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, s) in self.components.iter().zip(p) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += s * ci;
            }
        }
        out
    }

    /// Largest deviation of the component Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (a, ca) in self.components.iter().enumerate() {
            for (b, cb) in self.components.iter().enumerate() {
                let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Stage labels of the PCA trajectories.
pub const PCA_STAGES: [&str; 6] = [
    "phase1-ct",
    "pre-decorated",
    "pre-final",
    "post-base",
    "post-decorated",
    "post-final",
];

/// Stage labels of the neighbour report.
pub const NEIGHBOR_STAGES: [&str; 7] = [
    "phase1-ct",
    "pre-base",
    "pre-decorated",
    "pre-final",
    "post-base",
    "post-decorated",
    "post-final",
];

/// Positions of the rows whose predicted frequency sits nearest the
/// `(k + 0.5)/count` quantiles, k = 0..count.
pub fn decile_probes(rates: &[f64], count: usize) -> Vec<usize> {
    if rates.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]).then(a.cmp(&b)));
    (0..count)
        .map(|k| {
            let q = (k as f64 + 0.5) / count as f64;
            order[((q * rates.len() as f64) as usize).min(rates.len() - 1)]
        })
        .collect()
}

/// Each row's token decorated with its own observed response.
pub fn self_decorated(model: &Model, c: &Tensor, rows: &[EncodedInstance]) -> Result<Tensor> {
    let stack = model
        .icl
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no ICL layers".into()))?;
    if c.n_rows() != rows.len() {
        return Err(Error::dim("self_decorated", c.shape(), &[rows.len()]));
    }
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &|_| false);
    let y = tape.constant(Tensor::new(vec![rows.len(), 1], rows.iter().map(|r| r.y).collect())?);
    let z = stack.decorator.response.forward(&mut tape, &bound, y)?;
    let kappa = model.kappa().unwrap_or(1.0);
    let z = tape.value(z);
    let d = c.last_dim();
    let mut out = c.data().to_vec();
    for (i, r) in rows.iter().enumerate() {
        let v = match stack.config.kappa_source {
            KappaSource::Unit => 1.0,
            KappaSource::Exposure => r.v,
        };
        let w = credibility_weight(v, kappa);
        for k in 0..d {
            out[i * d + k] += w * z.row(i)[k];
        }
    }
    Tensor::new(c.shape().to_vec(), out)
}

/// Base, self-decorated and final ICL tokens of `rows`.
#[derive(Clone, Debug)]
pub struct StageTokens {
    pub base: Tensor,
    pub decorated: Tensor,
    pub output: Tensor,
}

/// Tokens of `rows` at each stage of an ICL model. Final tokens treat the rows
/// as targets with context retrieved from `source`.
pub fn stage_tokens(model: &Model, source: &ContextSource, rows: &[EncodedInstance], r: &RetrievalConfig) -> Result<StageTokens> {
    let base = model.embed_all(rows, r.embed_batch)?;
    let decorated = self_decorated(model, &base, rows)?;
    let d = base.last_dim();
    let mut out = Vec::with_capacity(base.numel());
    for range in chunk_ranges(rows.len(), r.chunk_size) {
        let emb = Tensor::new(vec![range.len(), d], base.data()[range.start * d..range.end * d].to_vec())?;
        let pass = icl_chunk(model, source, &rows[range], &emb, r)?;
        for i in pass.batch.target_rows() {
            out.extend_from_slice(pass.rows.row(i));
        }
    }
    Ok(StageTokens {
        base,
        decorated,
        output: Tensor::new(vec![rows.len(), d], out)?,
    })
}

/// The three models whose tokens are compared.
pub struct StageModels<'a> {
    pub phase1: &'a Model,
    pub pre: &'a Model,
    pub post: &'a Model,
}

/// Tokens of `rows` for every neighbour-report stage, labelled.
pub fn all_stage_tokens(
    models: &StageModels,
    context_rows: &[EncodedInstance],
    rows: &[EncodedInstance],
    r: &RetrievalConfig,
) -> Result<Vec<(&'static str, Tensor)>> {
    let p1 = models.phase1.embed_all(rows, r.embed_batch)?;
    let pre_src = ContextSource::new(models.pre, context_rows, r.embed_batch)?;
    let pre = stage_tokens(models.pre, &pre_src, rows, r)?;
    drop(pre_src);
    let post_src = ContextSource::new(models.post, context_rows, r.embed_batch)?;
    let post = stage_tokens(models.post, &post_src, rows, r)?;
    Ok(NEIGHBOR_STAGES
        .into_iter()
        .zip([p1, pre.base, pre.decorated, pre.output, post.base, post.decorated, post.output])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub instance: u64,
    pub stage: &'static str,
    pub pcs: Vec<f64>,
}

/// Result of the trajectory analysis.
#[derive(Clone, Debug)]
pub struct Trajectories {
    pub pca: PcaModel,
    pub probe_ids: Vec<u64>,
    pub projections: Vec<Projection>,
}

/// Fits the PCA on the phase-1 test tokens and projects the decile probes at
/// each of the six stages.
pub fn pca_trajectories(
    models: &StageModels,
    context_rows: &[EncodedInstance],
    test: &[EncodedInstance],
    k: usize,
    r: &RetrievalConfig,
) -> Result<Trajectories> {
    let test_tokens = models.phase1.embed_all(test, r.embed_batch)?;
    let pca = PcaModel::fit(&test_tokens, k)?;
    let rates: Vec<f64> = models.phase1.decode_eval(&test_tokens)?.into_iter().map(f64::exp).collect();
    let probes: Vec<EncodedInstance> = decile_probes(&rates, 10).into_iter().map(|i| test[i].clone()).collect();
    let stages = all_stage_tokens(models, context_rows, &probes, r)?;
    let mut projections = Vec::new();
    for (label, tokens) in stages.iter().filter(|(l, _)| PCA_STAGES.contains(l)) {
        for (i, p) in probes.iter().enumerate() {
            projections.push(Projection {
                instance: p.id,
                stage: label,
                pcs: pca.project(tokens.row(i)),
            });
        }
    }
    Ok(Trajectories {
        pca,
        probe_ids: probes.iter().map(|p| p.id).collect(),
        projections,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborReportRow {
    pub probe: u64,
    pub stage: &'static str,
    pub rank: usize,
    pub distance: f64,
    pub neighbor: RawPolicyRecord,
}

/// One stage's probe tokens and corpus tokens.
pub struct StageSpace<'a> {
    pub label: &'static str,
    pub probes: &'a Tensor,
    pub corpus: &'a Tensor,
}

/// The `n` corpus rows nearest each probe in each stage space; ties go to
/// the lower corpus id.
pub fn neighbor_report(
    stages: &[StageSpace],
    probe_ids: &[u64],
    corpus: &[RawPolicyRecord],
    n: usize,
    metric: Metric,
) -> Result<Vec<NeighborReportRow>> {
    let mut rows = Vec::new();
    for s in stages {
        if s.corpus.n_rows() != corpus.len() || s.probes.n_rows() != probe_ids.len() {
            return Err(Error::dim("neighbor_report", s.corpus.shape(), &[corpus.len()]));
        }
        for (p, &pid) in probe_ids.iter().enumerate() {
            let q = s.probes.row(p);
            let mut dist: Vec<(f64, usize)> = (0..corpus.len())
                .map(|j| (metric.distance(q, s.corpus.row(j)), j))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(corpus[a.1].id.cmp(&corpus[b.1].id)));
            for (rank, &(distance, j)) in dist.iter().take(n).enumerate() {
                rows.push(NeighborReportRow {
                    probe: pid,
                    stage: s.label,
                    rank: rank + 1,
                    distance,
                    neighbor: corpus[j].clone(),
                });
            }
        }
    }
    Ok(rows)
}

/// Neighbour report over the seven stages for the decile probes of `test`,
/// searched within `corpus` (encoded and raw rows aligned by position).
pub fn stage_neighbors(
    models: &StageModels,
    corpus: &[EncodedInstance],
    corpus_raw: &[RawPolicyRecord],
    probes: &[EncodedInstance],
    n: usize,
    metric: Metric,
    r: &RetrievalConfig,
) -> Result<Vec<NeighborReportRow>> {
    let probe_tokens = all_stage_tokens(models, corpus, probes, r)?;
    let corpus_tokens = all_stage_tokens(models, corpus, corpus, r)?;
    let spaces: Vec<StageSpace> = probe_tokens
        .iter()
        .zip(&corpus_tokens)
        .map(|((label, p), (_, c))| StageSpace {
            label,
            probes: p,
            corpus: c,
        })
        .collect();
    let ids: Vec<u64> = probes.iter().map(|p| p.id).collect();
    neighbor_report(&spaces, &ids, corpus_raw, n, metric)
}

/// Raw records re-ordered to match `rows` by id.
pub fn align_raw(rows: &[EncodedInstance], raw: &[RawPolicyRecord]) -> Result<Vec<RawPolicyRecord>> {
    let by_id: HashMap<u64, &RawPolicyRecord> = raw.iter().map(|r| (r.id, r)).collect();
    rows.iter()
        .map(|r| {
            by_id
                .get(&r.id)
                .map(|x| (*x).clone())
                .ok_or_else(|| Error::Contract(format!("no raw record for id {}", r.id)))
        })
        .collect()
}

/// `printf("%.6g")` formatting.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    const P: i32 = 6;
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..P).contains(&exp) {
        trim(&format!("{:.*}", (P - 1 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mant), sign, exp.abs())
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// `phase,epoch,train_loss,val_loss` rows for every report.
pub fn write_metrics_csv(path: &Path, reports: &[&TrainingReport]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "phase,epoch,train_loss,val_loss")?;
    for r in reports {
        for e in &r.epochs {
            let train = e.train_loss.map(fmt_g).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.phase, e.epoch, train, fmt_g(e.val_loss))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `i,j,layer,weight` for every target row and every entry it may attend to.
pub fn write_attention_csv(path: &Path, trace: &AttentionTrace, batch: &ContextTargetBatch) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "i,j,layer,weight")?;
    for (l, lt) in trace.layers.iter().enumerate() {
        for i in batch.target_rows() {
            let row = lt.attention.row(i);
            for j in (0..batch.n_context).chain(std::iter::once(i)) {
                writeln!(w, "{i},{j},{l},{}", fmt_g(row[j]))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_projections_csv(path: &Path, projections: &[Projection]) -> Result<()> {
    let mut w = create(path)?;
    let k = projections.first().map_or(0, |p| p.pcs.len());
    let pcs: Vec<String> = (1..=k).map(|c| format!("pc{c}")).collect();
    writeln!(w, "instance,stage,{}", pcs.join(","))?;
    for p in projections {
        let v: Vec<String> = p.pcs.iter().map(|&x| fmt_g(x)).collect();
        writeln!(w, "{},{},{}", p.instance, p.stage, v.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_neighbors_csv(path: &Path, rows: &[NeighborReportRow], metric: Metric) -> Result<()> {
    let mut w = create(path)?;
    let label = match metric {
        Metric::Euclidean => "euclidean_distance",
        Metric::Cosine => "cosine_distance",
    };
    writeln!(
        w,
        "probe,stage,rank,{label},id,Exposure,Area,VehPower,VehAge,DrivAge,BonusMalus,VehBrand,VehGas,Region"
    )?;
    for r in rows {
        let n = &r.neighbor;
        writeln!(
            w,
            "{},{},{},{:.6},{},{},{},{},{},{},{},{},{},{}",
            r.probe,
            r.stage,
            r.rank,
            r.distance,
            n.id,
            fmt_g(n.exposure),
            n.area,
            n.veh_power,
            n.veh_age,
            n.driv_age,
            n.bonus_malus,
            n.veh_brand,
            n.veh_gas,
            n.region
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_g_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (25.213, "25.213"),
            (123456.7, "123457"),
            (999999.5, "1e+06"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-3.5, "-3.5"),
            (1.0 / 3.0, "0.333333"),
        ];
        for (x, s) in cases {
            assert_eq!(fmt_g(x), s, "{x}");
        }
    }

    #[test]
    fn pca_recovers_axis_and_is_full_rank_exact() {
        let mut data = Vec::new();
        for i in 0..50 {
            let t = i as f64 - 25.0;
            data.extend([3.0 * t, 0.1 * (i % 3) as f64, 1.0]);
        }
        let x = Tensor::new(vec![50, 3], data).unwrap();
        let p = PcaModel::fit(&x, 3).unwrap();
        assert!(p.orthonormality_error() < 1e-8);
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!((p.components[0][0].abs() - 1.0).abs() < 1e-9);
        assert!(p.project(&p.mean).iter().all(|v| v.abs() < 1e-12));
        let back = p.reconstruct(&p.project(x.row(7)));
        assert!(back.iter().zip(x.row(7)).all(|(a, b)| (a - b).abs() < 1e-8));
        assert!(matches!(PcaModel::fit(&x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn probes_sit_at_quantiles() {
        let rates: Vec<f64> = (0..100).rev().map(|i| i as f64).collect();
        let p = decile_probes(&rates, 10);
        let picked: Vec<f64> = p.iter().map(|&i| rates[i]).collect();
        assert_eq!(picked, vec![5.0, 15.0, 25.0, 35.0, 45.0, 55.0, 65.0, 75.0, 85.0, 95.0]);
    }
}
