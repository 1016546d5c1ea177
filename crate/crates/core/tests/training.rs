mod common;

use common::synthetic_dataset;
use iclct::checkpoint::ModelBundle;
use iclct::config::Config;
use iclct::model::Model;
use iclct::params::Group;
use iclct::pipeline::{run_phase, train_split, RunDir};
use iclct::training::{evaluate, phase1_train, phase2_train, EvalMode};
use iclct::Error;

fn tiny_config() -> Config {
    let mut c = Config::from_toml(
        r#"
seed = 11
[model]
width = 8
heads = 2
encoder_layers = 1
ffn_mult = 2
decoder_hidden = 8
[icl]
decorator_hidden = 4
ffn_mult = 2
[phase1]
max_epochs = 3
batch_size = 256
[phase2]
max_epochs = 2
chunks_per_epoch = 3
[phase3]
max_epochs = 1
chunks_per_epoch = 2
[retrieval]
k = 8
context_size = 60
chunk_size = 40
embed_batch = 300
"#,
    )
    .unwrap();
    c.data.validation_fraction = 0.2;
    c
}

#[test]
fn phase_two_starts_where_phase_one_ended_and_keeps_the_decoder() {
    let ds = synthetic_dataset(1500, 3);
    let cfg = tiny_config();
    let split = train_split(&ds, &cfg);
    let mut model = Model::new(cfg.model.clone(), ds.vocab.cardinalities(), cfg.seed).unwrap();
    let r1 = phase1_train(&mut model, &split, &cfg).unwrap();
    let decoder = model.store.group_bytes(Group::Decoder);
    let r2 = phase2_train(&mut model, &split, &cfg).unwrap();
    assert!((r2.initial_val() - r1.best_val).abs() <= 1e-9);
    assert_eq!(model.store.group_bytes(Group::Decoder), decoder);
    assert!(r2.best_val <= r2.initial_val());
    assert_eq!(r2.frozen, vec![Group::Decoder]);
    assert!(r2.trainable_count < r2.param_count);
}

#[test]
fn runs_are_byte_reproducible() {
    let ds = synthetic_dataset(1200, 5);
    let cfg = tiny_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = RunDir::new(d.path()).unwrap();
        for phase in 1..=3 {
            run_phase(&run, &ds, &cfg, phase).unwrap();
        }
    }
    for name in ["phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "metrics.csv", "phase3.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    let metrics = std::fs::read_to_string(dirs[0].path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,epoch,train_loss,val_loss\n1,0,,"));
}

#[test]
fn later_phase_requires_its_predecessor() {
    let ds = synthetic_dataset(600, 1);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    assert!(matches!(run_phase(&run, &ds, &tiny_config(), 2), Err(Error::Contract(_))));
}

#[test]
fn retraining_an_earlier_phase_drops_stale_later_checkpoints() {
    let ds = synthetic_dataset(800, 2);
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    run_phase(&run, &ds, &cfg, 1).unwrap();
    run_phase(&run, &ds, &cfg, 2).unwrap();
    assert_eq!(run.latest_phase(), Some(2));
    run_phase(&run, &ds, &cfg, 1).unwrap();
    assert_eq!(run.latest_phase(), Some(1));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let ds = synthetic_dataset(800, 4);
    let mut cfg = tiny_config();
    cfg.phase1.lr = 1e200;
    let split = train_split(&ds, &cfg);
    let mut model = Model::new(cfg.model.clone(), ds.vocab.cardinalities(), 1).unwrap();
    let out = phase1_train(&mut model, &split, &cfg);
    assert!(matches!(out, Err(Error::Divergence(_))), "{out:?}");
}

#[test]
fn checkpoint_reload_reproduces_predictions_and_ensembles_of_one_model_are_exact() {
    let ds = synthetic_dataset(900, 6);
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    run_phase(&run, &ds, &cfg, 1).unwrap();
    let (bundle, _) = run_phase(&run, &ds, &cfg, 2).unwrap();
    let loaded = ModelBundle::load(run.checkpoint(2)).unwrap();
    let split = train_split(&ds, &cfg);
    let r = &cfg.retrieval;
    let a = evaluate(&[&bundle.model], &split.fit, &ds.test, EvalMode::Icl, r, false).unwrap();
    let b = evaluate(&[&loaded.model], &split.fit, &ds.test, EvalMode::Icl, r, false).unwrap();
    assert_eq!(a, b);
    let e = evaluate(&[&bundle.model, &loaded.model], &split.fit, &ds.test, EvalMode::Icl, r, false).unwrap();
    assert_eq!(e.test_mu, a.test_mu);
    assert_eq!(loaded.config_hash, cfg.hash());
}

#[test]
fn in_sample_icl_never_uses_a_row_as_its_own_context() {
    let ds = synthetic_dataset(700, 8);
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    run_phase(&run, &ds, &cfg, 1).unwrap();
    let (bundle, _) = run_phase(&run, &ds, &cfg, 2).unwrap();
    let split = train_split(&ds, &cfg);
    let source = iclct::training::ContextSource::new(&bundle.model, &split.fit, 100).unwrap();
    let targets = &split.fit[..40];
    let emb = bundle.model.embed_all(targets, 100).unwrap();
    let pass = iclct::training::icl_chunk(&bundle.model, &source, targets, &emb, &cfg.retrieval).unwrap();
    let own: std::collections::HashSet<u64> = targets.iter().map(|t| t.id).collect();
    assert!(pass.assembly.selected.iter().all(|n| !own.contains(&n.id)));
    assert_eq!(pass.log_rates.len(), 40);
}
