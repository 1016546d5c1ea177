//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails. Criteria that need the cleaned MTPL file run only when
//! `ICLCT_MTPL_CSV` points at it (with `ICLCT_TEST_IDS` optionally naming the
//! test-id list); otherwise they are reported as blocked.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{grad_check, icl_model, project, random_batch, random_rows, random_tensor, rng, small_config};
use iclct::analysis::{
    all_stage_tokens, neighbor_report, pca_trajectories, verify_credibility, Metric, StageModels, StageSpace,
    DECOMPOSITION_TOL, NEIGHBOR_STAGES, PCA_STAGES, ROW_SUM_TOL, WEIGHT_TOL,
};
use iclct::config::Config;
use iclct::data::{
    load_csv, load_test_ids, regional_summary, segment_deviances, synth, zero_shot_split, Dataset, RegionSummary,
    SplitSpec,
};
use iclct::data::regional::{REFERENCE_REGIONS, REFERENCE_SEGMENT_DEVIANCES};
use iclct::decoder::{deviance_pct, NullModel};
use iclct::icl::{build_mask, IclConfig, Variant};
use iclct::model::{Fwd, Model};
use iclct::numeric::{Tape, Tensor};
use iclct::params::Group;
use iclct::pipeline::{run_phase, train_split, RunDir};
use iclct::retrieval::{assemble_context, EmbeddingIndex, NeighborSearch};
use iclct::training::{
    batch_for, evaluate, icl_eval, icl_loss_var, phase1_train, phase2_train, phase3_finetune, subsample, EvalMode,
    TrainSplit,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NULL_IN_SAMPLE: f64 = 25.213;
const NULL_OUT_OF_SAMPLE: f64 = 25.445;
const NULL_TOL: f64 = 0.005;
const NULL_BUDGET_S: f64 = 30.0;
const REGION_TOL: f64 = 0.001;
const REGION_BUDGET_S: f64 = 60.0;
const GRAD_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-9;
const ORTHO_TOL: f64 = 1e-8;
const DESK_BUDGET_S: f64 = 30.0 * 60.0;
const DESK_NULL_GAIN: f64 = 0.02;
const DESK_ICL_SLACK: f64 = 0.01;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

use Outcome::{Blocked, Fail, Pass};

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn mtpl() -> Option<(Vec<iclct::data::RawPolicyRecord>, Option<HashSet<u64>>)> {
    let path = std::env::var_os("ICLCT_MTPL_CSV")?;
    let records = load_csv(&path).expect("ICLCT_MTPL_CSV is readable");
    let ids = std::env::var_os("ICLCT_TEST_IDS").map(|p| load_test_ids(p).expect("ICLCT_TEST_IDS is readable"));
    Some((records, ids))
}

fn c1_null_model() -> Outcome {
    let start = Instant::now();
    let Some((records, ids)) = mtpl() else {
        return Blocked("ICLCT_MTPL_CSV not set; the cleaned MTPL file is not available".into());
    };
    let ds = Dataset::build(&records, &SplitSpec::standard(1), ids.as_ref()).unwrap();
    let null = NullModel::fit(&ds.train).unwrap();
    let ins = deviance_pct(&ds.train, &null.mu(&ds.train)).unwrap();
    let oos = deviance_pct(&ds.test, &null.mu(&ds.test)).unwrap();
    let t = start.elapsed().as_secs_f64();
    check(
        (ins - NULL_IN_SAMPLE).abs() <= NULL_TOL && (oos - NULL_OUT_OF_SAMPLE).abs() <= NULL_TOL && t < NULL_BUDGET_S,
        format!("in-sample {ins:.4}, out-of-sample {oos:.4} (10^-2), {t:.1}s"),
    )
}

fn c2_zero_shot_split() -> Outcome {
    let Some((records, _)) = mtpl() else {
        return Blocked("ICLCT_MTPL_CSV not set; the cleaned MTPL file is not available".into());
    };
    let s = zero_shot_split(&records, &SplitSpec::zero_shot(1)).unwrap();
    let (a, b) = (&s.train_summary, &s.test_summary);
    let ok = a.policies == 601_781
        && a.claims == 24_006
        && a.relabeled == 165_200
        && b.policies == 76_226
        && b.claims == 2_377
        && (b.exposure - 34_900.0).abs() <= 1.0
        && (100.0 * a.frequency - 7.42).abs() <= 0.01
        && (100.0 * b.frequency - 6.81).abs() <= 0.01;
    check(
        ok,
        format!(
            "train {} / {} claims / {} relabeled, test {} / {} claims / exposure {:.1}, frequencies {:.2}% / {:.2}%",
            a.policies,
            a.claims,
            a.relabeled,
            b.policies,
            b.claims,
            b.exposure,
            100.0 * a.frequency,
            100.0 * b.frequency
        ),
    )
}

fn c3_regional_tables() -> Outcome {
    let reference: Vec<RegionSummary> = REFERENCE_REGIONS
        .iter()
        .map(|r| RegionSummary {
            region: r.name.to_string(),
            policies: 0,
            claims: r.claims.round() as u64,
            exposure: r.exposure,
            rate: r.claims / r.exposure,
            deviance: r.deviance,
        })
        .collect();
    let derived = segment_deviances(&reference);
    let consistent = derived
        .iter()
        .zip(REFERENCE_SEGMENT_DEVIANCES)
        .all(|(d, r)| (d - r).abs() <= REGION_TOL);
    let Some((records, _)) = mtpl() else {
        return if consistent {
            Blocked(format!(
                "ICLCT_MTPL_CSV not set; per-region figures need the data. Published region table reproduces the published segment averages: {derived:.4?}"
            ))
        } else {
            Fail(format!("published region table gives segment averages {derived:.4?}"))
        };
    };
    let start = Instant::now();
    let rows = regional_summary(&records, None);
    let by: BTreeMap<&str, f64> = rows.iter().map(|r| (r.region.as_str(), r.deviance)).collect();
    let worst = REFERENCE_REGIONS
        .iter()
        .map(|r| by.get(r.name).map_or(f64::INFINITY, |d| (d - r.deviance).abs()))
        .fold(0.0, f64::max);
    let seg = segment_deviances(&rows);
    let seg_ok = seg.iter().zip(REFERENCE_SEGMENT_DEVIANCES).all(|(d, r)| (d - r).abs() <= REGION_TOL);
    let t = start.elapsed().as_secs_f64();
    check(
        worst <= REGION_TOL && seg_ok && t < REGION_BUDGET_S,
        format!("max region deviation {worst:.4}, segments {seg:.4?}, {t:.1}s"),
    )
}

fn c4_credibility_suite() -> Outcome {
    let (mut dec, mut rs, mut w) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let width = [8, 16][r.gen_range(0..2)];
        let variant = if r.gen_bool(0.5) { Variant::Nonlinear } else { Variant::Linearized };
        let layers = if variant == Variant::Linearized { 1 } else { r.gen_range(1..=2) };
        let model = icl_model(seed, width, layers, variant);
        let (nc, nt) = (r.gen_range(1..40), r.gen_range(1..10));
        let c = random_tensor(&mut r, &[nc + nt, width]);
        let batch = random_batch(&mut r, nc, nt);
        match verify_credibility(&model, &c, &batch) {
            Ok(rep) => {
                dec = dec.max(rep.decomposition);
                rs = rs.max(rep.row_sum);
                w = w.max(rep.weights);
            }
            Err(e) => return Fail(format!("seed {seed}: {e}")),
        }
    }
    check(
        dec <= DECOMPOSITION_TOL && rs <= ROW_SUM_TOL && w <= WEIGHT_TOL,
        format!("200 pairs; max residuals decomposition {dec:.1e}, row sum {rs:.1e}, weights {w:.1e}; target-target entries exactly 0"),
    )
}

fn target_log_rates(model: &Model, rows: &[iclct::data::EncodedInstance], nc: usize) -> Vec<f64> {
    let emb = model.embed_all(rows, 16).unwrap();
    let refs: Vec<_> = rows.iter().collect();
    let batch = batch_for(&refs[..nc], &refs[nc..]).unwrap();
    icl_eval(model, &emb, &batch).unwrap().0
}

fn c5_no_leakage() -> Outcome {
    for trial in 0..100u64 {
        let mut r = rng(10_000 + trial);
        let model = icl_model(trial, 8, r.gen_range(1..=2), Variant::Nonlinear);
        let (nc, nt) = (r.gen_range(1..20), r.gen_range(2..8));
        let rows = random_rows(&mut r, nc + nt, 1);
        let before = target_log_rates(&model, &rows, nc);
        let j = r.gen_range(0..nt);
        let mut changed = rows.clone();
        let t = &mut changed[nc + j];
        t.cont[r.gen_range(0..5)] += r.gen_range(0.5..3.0);
        t.cat[0] = (t.cat[0] + 1) % 7;
        t.y += 2.0;
        let after = target_log_rates(&model, &changed, nc);
        if before[j] == after[j] {
            return Fail(format!("trial {trial}: perturbation did not reach target {j}"));
        }
        for i in (0..nt).filter(|&i| i != j) {
            if before[i].to_bits() != after[i].to_bits() {
                return Fail(format!("trial {trial}: target {i} moved when target {j} changed"));
            }
        }
    }
    Pass("100 trials; every other target bit-identical".into())
}

fn c6_linearized() -> Outcome {
    let mut nonlinear_changed = 0;
    for seed in 0..50u64 {
        let mut r = rng(20_000 + seed);
        let (nc, nt) = (r.gen_range(1..20), r.gen_range(1..6));
        let c = random_tensor(&mut r, &[nc + nt, 8]);
        let batch = random_batch(&mut r, nc, nt);
        let mut bumped = batch.clone();
        for i in 0..nc {
            bumped.y[i] += r.gen_range(1.0..4.0);
        }
        let lin = icl_model(seed, 8, 1, Variant::Linearized);
        let a = icl_eval(&lin, &c, &batch).unwrap().1;
        let b = icl_eval(&lin, &c, &bumped).unwrap().1;
        if a.layers[0].attention != b.layers[0].attention {
            return Fail(format!("seed {seed}: linearized trace changed"));
        }
        let non = icl_model(seed, 8, 1, Variant::Nonlinear);
        let a = icl_eval(&non, &c, &batch).unwrap().1;
        let b = icl_eval(&non, &c, &bumped).unwrap().1;
        if a.layers[0].attention != b.layers[0].attention {
            nonlinear_changed += 1;
        }
    }
    check(
        nonlinear_changed == 50,
        format!("50 batches; linearized trace bit-identical in all, nonlinear trace changed in {nonlinear_changed}"),
    )
}

fn primitive_errors() -> Vec<(&'static str, f64)> {
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[iclct::numeric::Var], u64) -> iclct::numeric::Var>);
    let mask = build_mask(4, 8);
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![12, 8], vec![8, 8]], Box::new(|t, v, s| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, s)
        })),
        ("bmm", vec![vec![1, 12, 8], vec![1, 12, 8]], Box::new(|t, v, s| {
            let y = t.bmm(v[0], v[1], true).unwrap();
            project(t, y, s)
        })),
        ("add_row", vec![vec![12, 8], vec![8]], Box::new(|t, v, s| {
            let y = t.add_row(v[0], v[1]).unwrap();
            project(t, y, s)
        })),
        ("mul_row", vec![vec![12, 8], vec![8]], Box::new(|t, v, s| {
            let y = t.mul_row(v[0], v[1]).unwrap();
            project(t, y, s)
        })),
        ("row_scale", vec![vec![12, 8], vec![12]], Box::new(|t, v, s| {
            let y = t.row_scale(v[0], v[1]).unwrap();
            project(t, y, s)
        })),
        ("sub_mul", vec![vec![12, 8], vec![12, 8]], Box::new(|t, v, s| {
            let d = t.sub(v[0], v[1]).unwrap();
            let y = t.mul(d, v[0]).unwrap();
            project(t, y, s)
        })),
        ("scale_by", vec![vec![12, 8], vec![1]], Box::new(|t, v, s| {
            let y = t.scale_by(v[0], v[1]).unwrap();
            project(t, y, s)
        })),
        ("gelu", vec![vec![12, 8]], Box::new(|t, v, s| {
            let y = t.gelu(v[0]);
            project(t, y, s)
        })),
        ("exp", vec![vec![12, 8]], Box::new(|t, v, s| {
            let y = t.exp(v[0]);
            project(t, y, s)
        })),
        ("sigmoid", vec![vec![12]], Box::new(|t, v, s| {
            let y = t.sigmoid(v[0]);
            project(t, y, s)
        })),
        ("softplus", vec![vec![12]], Box::new(|t, v, s| {
            let y = t.softplus(v[0]);
            project(t, y, s)
        })),
        ("layer_norm", vec![vec![12, 8], vec![8], vec![8]], Box::new(|t, v, s| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, s)
        })),
        ("masked_softmax", vec![vec![1, 12, 12]], Box::new(move |t, v, s| {
            let y = t.masked_softmax(v[0], Some(&mask)).unwrap();
            project(t, y, s)
        })),
        ("gather_concat", vec![vec![12, 8], vec![2, 8]], Box::new(|t, v, s| {
            let g = t.select_rows(v[0], &[11, 0, 4, 4]).unwrap();
            let c = t.concat(&[g, v[1]]).unwrap();
            let y = t.reshape(c, vec![48]).unwrap();
            project(t, y, s)
        })),
        ("broadcast_sum", vec![vec![8]], Box::new(|t, v, s| {
            let b = t.broadcast_rows(v[0], 12).unwrap();
            let p = project(t, b, s);
            let q = t.reshape(p, vec![1]).unwrap();
            t.sum(q)
        })),
        ("dropout", vec![vec![12, 8]], Box::new(|t, v, s| {
            let mut g = rng(s ^ 77);
            let y = t.dropout(v[0], 0.1, true, &mut g).unwrap();
            project(t, y, s)
        })),
        ("credibility_weights", vec![vec![1]], Box::new(|t, v, s| {
            let k = t.softplus(v[0]);
            let y = t
                .credibility_weights(k, (0..12).map(|i| 0.1 * i as f64).collect(), (0..12).map(|i| f64::from(u8::from(i < 8))).collect())
                .unwrap();
            project(t, y, s)
        })),
        ("poisson_deviance", vec![vec![12]], Box::new(|t, v, _| {
            t.poisson_deviance(
                v[0],
                (0..12).map(|i| f64::from(i % 3)).collect(),
                (0..12).map(|i| 0.1 + 0.07 * i as f64).collect(),
                (0..12).map(|i| 0.5 + 0.1 * i as f64).collect(),
                12.0,
            )
            .unwrap()
        })),
    ];
    cases
        .iter()
        .map(|(name, shapes, f)| {
            let worst = (0..5u64)
                .map(|seed| {
                    let mut r = rng(seed);
                    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut r, s)).collect();
                    grad_check(&inputs, 1e-5, &|t, v| f(t, v, seed))
                })
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

/// Phase-2 loss of a width-8 model on 8 context and 4 target rows, checked
/// parameter by parameter against central differences.
fn end_to_end_phase2_error() -> f64 {
    let mut model = Model::new(small_config(8), [7, 3, 12, 23], 3).unwrap();
    model
        .attach_icl(
            IclConfig {
                identity_init: false,
                decorator_hidden: 4,
                ffn_mult: 2,
                ..IclConfig::default()
            },
            3,
        )
        .unwrap();
    let mut r = rng(3);
    let rows = random_rows(&mut r, 12, 1);
    let refs: Vec<_> = rows.iter().collect();
    let (ctx, tgt) = refs.split_at(8);
    let trainable = |g: Group| g != Group::Decoder;
    let loss_of = |m: &Model| -> (Tape, iclct::params::Bound, iclct::numeric::Var) {
        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape, &trainable);
        let mut g = ChaCha8Rng::seed_from_u64(99);
        let loss = {
            let mut f = Fwd {
                tape: &mut tape,
                params: &bound,
                training: true,
                rng: &mut g,
            };
            icl_loss_var(m, &mut f, ctx, tgt).unwrap()
        };
        (tape, bound, loss)
    };
    let (tape, bound, loss) = loss_of(&model);
    let grads = tape.backward(loss).unwrap();
    let (mut ad, mut fd) = (Vec::new(), Vec::new());
    let ids: Vec<_> = model.store.ids().filter(|&id| trainable(model.store.group(id))).collect();
    let h = 1e-6;
    for id in ids {
        let g = grads.get(bound.var(id)).map(<[f64]>::to_vec);
        let n = model.store.get(id).numel();
        for i in 0..n {
            ad.push(g.as_ref().map_or(0.0, |g| g[i]));
            let x0 = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = x0 + h;
            let (t, _, l) = loss_of(&model);
            let up = t.value(l).item();
            model.store.get_mut(id).data_mut()[i] = x0 - h;
            let (t, _, l) = loss_of(&model);
            let down = t.value(l).item();
            model.store.get_mut(id).data_mut()[i] = x0;
            fd.push((up - down) / (2.0 * h));
        }
    }
    common::rel_err(&ad, &fd)
}

fn c7_gradients() -> Outcome {
    let prims = primitive_errors();
    let (worst_name, worst) = prims.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let e2e = end_to_end_phase2_error();
    check(
        worst <= GRAD_TOL && e2e <= GRAD_TOL,
        format!(
            "{} primitives, worst {worst_name} {worst:.2e}; end-to-end phase-2 loss {e2e:.2e}",
            prims.len()
        ),
    )
}

fn desk_config(seed: u64) -> Config {
    let mut c = Config {
        seed,
        ..Config::default()
    };
    c.phase1.max_epochs = 4;
    c.phase1.patience = 3;
    c.phase2.max_epochs = 3;
    c.phase2.chunks_per_epoch = 4;
    c.phase3.max_epochs = 1;
    c.phase3.chunks_per_epoch = 3;
    c
}

struct SmallRun {
    ds: Dataset,
    cfg: Config,
    split: TrainSplit,
    phase1: Model,
    phase2: Model,
}

fn c8_freeze(store: &mut Option<SmallRun>) -> Outcome {
    let records = synth::generate(6000, 8);
    let ds = Dataset::build(&records, &SplitSpec::standard(8), None).unwrap();
    let mut cfg = desk_config(8);
    cfg.data.subsample = 5000;
    let split = train_split(&ds, &cfg);
    let mut model = Model::new(cfg.model.clone(), ds.vocab.cardinalities(), cfg.seed).unwrap();
    let r1 = phase1_train(&mut model, &split, &cfg).unwrap();
    let phase1 = model.clone();
    let before = model.store.group_bytes(Group::Decoder);
    let r2 = phase2_train(&mut model, &split, &cfg).unwrap();
    let unchanged = model.store.group_bytes(Group::Decoder) == before;
    let gap = (r2.initial_val() - r1.best_val).abs();
    let detail = format!(
        "{} training rows; decoder bytes {}; phase-2 epoch-0 validation {:.9} vs phase-1 {:.9} (gap {gap:e}); {} phase-2 epochs",
        split.fit.len() + split.val.len(),
        if unchanged { "unchanged" } else { "CHANGED" },
        r2.initial_val(),
        r1.best_val,
        r2.epochs.len() - 1
    );
    *store = Some(SmallRun {
        ds,
        cfg,
        split,
        phase1,
        phase2: model,
    });
    check(unchanged && gap <= IDENTITY_TOL, detail)
}

fn c9_retrieval() -> Outcome {
    for seed in 0..50u64 {
        let mut r = rng(30_000 + seed);
        let data = random_tensor(&mut r, &[1000, 16]);
        let ids: Vec<u64> = (0..1000u64).map(|i| (i * 7919) % 1000 + 1).collect();
        let index = EmbeddingIndex::build(&data, &ids).unwrap();
        let exclude: HashSet<u64> = (0..30).map(|_| ids[r.gen_range(0..1000)]).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let brute = |q: &[f64], k: usize| {
            let mut v: Vec<(u64, f64)> = (0..1000)
                .filter(|&i| !exclude.contains(&ids[i]))
                .map(|i| (ids[i], cos(q, data.row(i))))
                .collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            v.truncate(k);
            v
        };
        let targets = random_tensor(&mut r, &[10, 16]);
        let mut pool: BTreeMap<u64, f64> = BTreeMap::new();
        for t in 0..10 {
            let got = index.search(targets.row(t), 64, &exclude).unwrap();
            let want = brute(targets.row(t), 64);
            if got.iter().map(|n| n.id).ne(want.iter().map(|w| w.0)) {
                return Fail(format!("seed {seed}: knn order differs from brute force"));
            }
            for (id, s) in want {
                let e = pool.entry(id).or_insert(f64::NEG_INFINITY);
                *e = e.max(s);
            }
        }
        let mut want: Vec<(u64, f64)> = pool.into_iter().collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(300);
        let got = assemble_context(&index, &targets, 64, 300, &exclude).unwrap();
        if got.selected.iter().map(|n| n.id).ne(want.iter().map(|w| w.0)) {
            return Fail(format!("seed {seed}: assembled context differs from brute force"));
        }
    }
    let dup = Tensor::new(vec![5, 2], vec![1.0, 1.0, 2.0, 2.0, 0.5, 0.5, 3.0, 3.0, -1.0, 0.0]).unwrap();
    let index = EmbeddingIndex::build(&dup, &[40, 7, 19, 3, 1]).unwrap();
    let ties: Vec<u64> = index.search(&[1.0, 1.0], 4, &HashSet::new()).unwrap().iter().map(|n| n.id).collect();
    check(
        ties == vec![3, 7, 19, 40],
        format!("50 seeds x 1,000 vectors match brute force; duplicate ties resolved as {ties:?}"),
    )
}

fn c10_desk_scale() -> Outcome {
    let start = Instant::now();
    let records = synth::generate(60_000, 10);
    let ds = Dataset::build(&records, &SplitSpec::standard(10), None).unwrap();
    let mut cfg = Config {
        seed: 10,
        ..Config::default()
    };
    cfg.data.subsample = 50_000;
    cfg.phase1.max_epochs = 8;
    cfg.phase1.patience = 3;
    cfg.phase2.max_epochs = 1;
    cfg.phase2.chunks_per_epoch = 10;
    let train = subsample(&ds.train, cfg.data.subsample, cfg.seed);
    let split = TrainSplit::new(&train, cfg.data.validation_fraction, cfg.seed);
    let null = NullModel::fit(&split.fit).unwrap();
    let null_oos = deviance_pct(&ds.test, &null.mu(&ds.test)).unwrap();
    let mut model = Model::new(cfg.model.clone(), ds.vocab.cardinalities(), cfg.seed).unwrap();
    phase1_train(&mut model, &split, &cfg).unwrap();
    let p1 = evaluate(&[&model], &split.fit, &ds.test, EvalMode::Plain, &cfg.retrieval, false).unwrap();
    phase2_train(&mut model, &split, &cfg).unwrap();
    let icl = evaluate(&[&model], &split.fit, &ds.test, EvalMode::Icl, &cfg.retrieval, false).unwrap();
    let t = start.elapsed().as_secs_f64();
    let gain = 1.0 - p1.out_of_sample / null_oos;
    let ok = gain >= DESK_NULL_GAIN
        && icl.out_of_sample <= p1.out_of_sample * (1.0 + DESK_ICL_SLACK)
        && icl.test_mu.len() == ds.test.len()
        && t < DESK_BUDGET_S;
    check(
        ok,
        format!(
            "{} training rows (synthetic); null {null_oos:.3}, phase 1 {:.3} ({:.1}% better), ICL {:.3} over {} test rows; {t:.0}s",
            train.len(),
            p1.out_of_sample,
            100.0 * gain,
            icl.out_of_sample,
            ds.test.len()
        ),
    )
}

fn c11_pca(store: &Option<SmallRun>) -> Outcome {
    let Some(run) = store else {
        return Fail("criterion 8 did not leave trained models".into());
    };
    let mut post = run.phase2.clone();
    phase3_finetune(&mut post, &run.split, &run.cfg).unwrap();
    let models = StageModels {
        phase1: &run.phase1,
        pre: &run.phase2,
        post: &post,
    };
    let r = &run.cfg.retrieval;
    let t = pca_trajectories(&models, &run.split.fit, &run.ds.test, 2, r).unwrap();
    let ortho = t.pca.orthonormality_error();
    let full = iclct::analysis::PcaModel::fit(&run.phase1.embed_all(&run.ds.test, r.embed_batch).unwrap(), 32).unwrap();
    let monotone = full.explained_variance.windows(2).all(|w| w[0] >= w[1]);
    let stages: HashSet<&str> = t.projections.iter().map(|p| p.stage).collect();
    let finite = t.projections.iter().all(|p| p.pcs.iter().all(|x| x.is_finite()));

    let probes: Vec<_> = run.ds.test.iter().filter(|x| t.probe_ids.contains(&x.id)).cloned().collect();
    let corpus: Vec<_> = run.split.fit[..600].to_vec();
    let raw = iclct::analysis::align_raw(&corpus, &run.ds.train_raw).unwrap();
    let pt = all_stage_tokens(&models, &run.split.fit, &probes, r).unwrap();
    let ct = all_stage_tokens(&models, &run.split.fit, &corpus, r).unwrap();
    let spaces: Vec<StageSpace> = pt
        .iter()
        .zip(&ct)
        .map(|((l, p), (_, c))| StageSpace {
            label: l,
            probes: p,
            corpus: c,
        })
        .collect();
    let ids: Vec<u64> = probes.iter().map(|p| p.id).collect();
    let nb = neighbor_report(&spaces, &ids, &raw, 2, Metric::Euclidean).unwrap();
    let nb_ok = nb.len() == NEIGHBOR_STAGES.len() * probes.len() * 2
        && nb.chunks(2).all(|w| w[0].rank == 1 && w[1].rank == 2 && w[0].distance <= w[1].distance);
    check(
        ortho <= ORTHO_TOL
            && full.orthonormality_error() <= ORTHO_TOL
            && monotone
            && t.projections.len() == PCA_STAGES.len() * 10
            && stages.len() == 6
            && finite
            && nb_ok,
        format!(
            "orthonormality error {:.1e}, variances non-increasing: {monotone}, {} projections over {} stages, {} neighbour rows",
            ortho.max(full.orthonormality_error()),
            t.projections.len(),
            stages.len(),
            nb.len()
        ),
    )
}

fn c12_determinism() -> Outcome {
    let records = synth::generate(2500, 12);
    let ds = Dataset::build(&records, &SplitSpec::standard(12), None).unwrap();
    let mut cfg = desk_config(12);
    cfg.phase1.max_epochs = 2;
    cfg.phase2.max_epochs = 1;
    cfg.phase2.chunks_per_epoch = 2;
    cfg.phase3.chunks_per_epoch = 2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = RunDir::new(d.path()).unwrap();
        for phase in 1..=3 {
            run_phase(&run, &ds, &cfg, phase).unwrap();
        }
    }
    let files = ["phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "metrics.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).unwrap() != std::fs::read(dirs[1].path().join(f)).unwrap())
        .collect();
    check(
        differing.is_empty(),
        format!("two runs, seed 12: {} of {} files byte-identical", files.len() - differing.len(), files.len()),
    )
}

fn main() {
    let mut small: Option<SmallRun> = None;
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Blocked(d) => ("BLOCKED", d),
        };
        println!("criterion {n:>2} {tag:<7} {name} [{secs:.1}s]: {detail}");
    };
    run(1, "null-model reproduction", &mut c1_null_model);
    run(2, "zero-shot split counts", &mut c2_zero_shot_split);
    run(3, "regional tables", &mut c3_regional_tables);
    run(4, "credibility decomposition suite", &mut c4_credibility_suite);
    run(5, "no target leakage", &mut c5_no_leakage);
    run(6, "linearized attention ignores responses", &mut c6_linearized);
    run(7, "gradient correctness", &mut c7_gradients);
    run(8, "freeze contract and identity start", &mut || c8_freeze(&mut small));
    run(9, "retrieval oracle", &mut c9_retrieval);
    run(10, "desk-scale learning", &mut c10_desk_scale);
    run(11, "PCA instrument", &mut || c11_pca(&small));
    run(12, "determinism", &mut c12_determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
