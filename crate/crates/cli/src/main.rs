use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iclct::analysis::{
    decile_probes, fmt_g, pca_trajectories, stage_neighbors, verify_credibility, write_attention_csv,
    write_neighbors_csv, write_projections_csv, align_raw, CredibilityReport, Metric, StageModels,
};
use iclct::checkpoint::ModelBundle;
use iclct::config::Config;
use iclct::data::{
    encode, load_csv, load_test_ids, regional_summary, segment_deviances, synth, zero_shot_split, Dataset,
    EncodedInstance, RawPolicyRecord, SplitMode, SplitSpec, UNSEEN,
};
use iclct::decoder::{deviance_pct, NullModel};
use iclct::icl::ContextTargetBatch;
use iclct::model::Model;
use iclct::numeric::Tensor;
use iclct::pipeline::{describe_report, run_phase, training_rows, RunDir};
use iclct::retrieval::{chunked_inference_plan, encoder_hash, CacheRecord, NeighborCache, NeighborSearch};
use iclct::training::{evaluate, icl_chunk, subsample, ContextSource, EvalMode};
use iclct::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "iclct", version, about = "ICL Credibility Transformer for claim frequency data")]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Refuse to run unless every computation is seeded and single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Policy CSV with the MTPL columns.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// File of test-set policy ids, one per line.
    #[arg(long, global = true)]
    test_ids: Option<PathBuf>,
    /// Use a seeded synthetic portfolio of this many policies instead of --data.
    #[arg(long, global = true, value_name = "N")]
    synthetic: Option<usize>,
    /// Run directory for every output.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Seeded subsample of the training rows; 0 keeps everything.
    #[arg(long, global = true)]
    subsample: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, split and encode the data into the run directory.
    Prepare {
        #[arg(long)]
        zero_shot: bool,
    },
    /// Train one phase from the previous phase's checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        phase: u8,
    },
    /// Score a checkpoint, an ensemble or the null model.
    Evaluate {
        #[arg(long, value_enum, default_value = "plain")]
        mode: Mode,
        /// `null` for the intercept-only model.
        #[arg(long)]
        model: Option<String>,
        /// Checkpoint to score; defaults to the latest phase in --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run directories whose latest checkpoints are averaged.
        #[arg(long, num_args = 1..)]
        ensemble: Vec<PathBuf>,
        /// Skip the in-sample score.
        #[arg(long)]
        no_in_sample: bool,
    },
    /// Write expected claim counts for the policies in a CSV.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "plain")]
        mode: Mode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Plan chunked inference for the test set and cache the neighbour lists.
    Retrieve {
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        context_size: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Read-only inspection of trained models.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Region hold-out experiment.
    ZeroShot {
        #[arg(long, value_enum, default_value = "full")]
        stage: ZeroShotStage,
    },
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Check the credibility structure of the attention on random batches.
    Credibility {
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Project the decile probes at every stage onto the phase-1 principal axes.
    Pca {
        #[arg(long, default_value_t = 2)]
        components: usize,
    },
    /// Nearest training policies of the decile probes at every stage.
    Neighbors {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricArg,
        /// Training rows searched; 0 searches all.
        #[arg(long, default_value_t = 10000)]
        corpus: usize,
    },
    /// Export the attention weights of the first test chunk.
    Attention,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Plain,
    Icl,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Plain => EvalMode::Plain,
            Mode::Icl => EvalMode::Icl,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ZeroShotStage {
    SplitOnly,
    Full,
}

struct Ctx {
    cli: Cli,
    cfg: Config,
    run: RunDir,
}

impl Ctx {
    fn records(&self) -> Result<Vec<RawPolicyRecord>> {
        match (&self.cli.data, self.cli.synthetic) {
            (Some(p), _) => load_csv(p),
            (None, Some(n)) => Ok(synth::generate(n, self.cfg.seed)),
            (None, None) => Err(Error::Config("no data: pass --data <csv> or --synthetic <n>".into())),
        }
    }

    fn test_ids(&self) -> Result<Option<HashSet<u64>>> {
        self.cli.test_ids.as_ref().map(load_test_ids).transpose()
    }

    /// The cached dataset, building the standard split when none exists yet.
    fn dataset(&self) -> Result<Dataset> {
        if self.run.dataset().exists() {
            return self.run.load_dataset();
        }
        let ds = Dataset::build(&self.records()?, &SplitSpec::standard(self.cfg.seed), self.test_ids()?.as_ref())?;
        self.run.save_dataset(&ds)?;
        Ok(ds)
    }

    fn bundle(&self, path: &Option<PathBuf>) -> Result<ModelBundle> {
        match path {
            Some(p) => ModelBundle::load(p),
            None => {
                let phase = self
                    .run
                    .latest_phase()
                    .ok_or_else(|| Error::Contract(format!("no checkpoint in {}", self.run.root().display())))?;
                self.run.load_bundle(phase)
            }
        }
    }

    fn say(&self, text: &str) -> Result<()> {
        println!("{text}");
        self.run.append_report(text)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.subsample {
        cfg.data.subsample = n;
    }
    cfg.validate()?;
    if cli.deterministic {
        info!("deterministic mode: single-threaded, seed {}", cfg.seed);
    }
    let run = RunDir::new(&cli.out)?;
    let ctx = Ctx { cli, cfg, run };
    match &ctx.cli.command {
        Command::Prepare { zero_shot } => prepare(&ctx, *zero_shot),
        Command::Train { phase } => train(&ctx, *phase),
        Command::Evaluate {
            mode,
            model,
            checkpoint,
            ensemble,
            no_in_sample,
        } => evaluate_cmd(&ctx, (*mode).into(), model.as_deref(), checkpoint, ensemble, !no_in_sample),
        Command::Predict {
            input,
            output,
            mode,
            checkpoint,
        } => predict(&ctx, input, output, (*mode).into(), checkpoint),
        Command::Retrieve {
            chunk_size,
            context_size,
            k,
            checkpoint,
        } => retrieve(&ctx, *chunk_size, *context_size, *k, checkpoint),
        Command::Analyze { what } => match what {
            Analysis::Credibility { trials } => analyze_credibility(&ctx, *trials),
            Analysis::Pca { components } => analyze_pca(&ctx, *components),
            Analysis::Neighbors { n, metric, corpus } => analyze_neighbors(&ctx, *n, *metric, *corpus),
            Analysis::Attention => analyze_attention(&ctx),
        },
        Command::ZeroShot { stage } => zero_shot(&ctx, *stage),
    }
}

fn prepare(ctx: &Ctx, zero_shot: bool) -> Result<()> {
    let records = ctx.records()?;
    let spec = if zero_shot {
        SplitSpec::zero_shot(ctx.cfg.seed)
    } else {
        SplitSpec::standard(ctx.cfg.seed)
    };
    let ds = Dataset::build(&records, &spec, ctx.test_ids()?.as_ref())?;
    ctx.run.save_dataset(&ds)?;
    let tr = iclct::data::Totals::of(&ds.train_raw);
    let te = iclct::data::Totals::of(&ds.test_raw);
    ctx.say(&format!(
        "prepared {:?} split ({:?}): train {} policies / {} claims / exposure {:.1}; test {} policies / {} claims / exposure {:.1}",
        ds.mode, ds.source, tr.policies, tr.claims, tr.exposure, te.policies, te.claims, te.exposure
    ))
}

fn train(ctx: &Ctx, phase: u8) -> Result<()> {
    let ds = ctx.dataset()?;
    let (_, report) = run_phase(&ctx.run, &ds, &ctx.cfg, phase)?;
    ctx.say(&describe_report(&report))
}

fn null_scores(train: &[EncodedInstance], test: &[EncodedInstance]) -> Result<(f64, f64)> {
    let null = NullModel::fit(train)?;
    Ok((deviance_pct(train, &null.mu(train))?, deviance_pct(test, &null.mu(test))?))
}

fn evaluate_cmd(
    ctx: &Ctx,
    mode: EvalMode,
    model: Option<&str>,
    checkpoint: &Option<PathBuf>,
    ensemble: &[PathBuf],
    in_sample: bool,
) -> Result<()> {
    let ds = ctx.dataset()?;
    let train = training_rows(&ds, &ctx.cfg);
    let r = &ctx.cfg.retrieval;
    let (label, ins, oos) = if let Some(m) = model {
        if m != "null" {
            return Err(Error::Config(format!("unknown model {m:?}; only `null` is built in")));
        }
        let (a, b) = null_scores(&train, &ds.test)?;
        ("null model".to_string(), Some(a), b)
    } else {
        let bundles: Vec<ModelBundle> = if ensemble.is_empty() {
            vec![ctx.bundle(checkpoint)?]
        } else {
            ensemble
                .iter()
                .map(|d| {
                    let rd = RunDir::new(d)?;
                    let p = rd
                        .latest_phase()
                        .ok_or_else(|| Error::Contract(format!("no checkpoint in {}", d.display())))?;
                    rd.load_bundle(p)
                })
                .collect::<Result<_>>()?
        };
        let models: Vec<&Model> = bundles.iter().map(|b| &b.model).collect();
        let e = evaluate(&models, &train, &ds.test, mode, r, in_sample)?;
        let label = if bundles.len() > 1 {
            format!("ensemble of {}", bundles.len())
        } else {
            format!("phase {} checkpoint", bundles[0].phase)
        };
        (label, e.in_sample, e.out_of_sample)
    };
    let ins = ins.map_or("-".into(), |v| format!("{v:.3}"));
    ctx.say(&format!(
        "{label}, {mode:?} mode (10^-2 units)\n  in-sample     {ins}\n  out-of-sample {oos:.3}"
    ))
}

fn predict(ctx: &Ctx, input: &PathBuf, output: &Option<PathBuf>, mode: EvalMode, checkpoint: &Option<PathBuf>) -> Result<()> {
    let bundle = ctx.bundle(checkpoint)?;
    let raw = load_csv(input)?;
    let rows = encode(&raw, &bundle.vocab, &bundle.stats);
    let context = match mode {
        EvalMode::Plain => Vec::new(),
        EvalMode::Icl => training_rows(&ctx.dataset()?, &ctx.cfg),
    };
    let mu = iclct::training::predict_mu(&bundle.model, &context, &rows, mode, &ctx.cfg.retrieval)?;
    let path = output.clone().unwrap_or_else(|| ctx.run.path("predictions.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "exposure", "rate", "mu"])?;
    for (r, m) in rows.iter().zip(&mu) {
        w.write_record([r.id.to_string(), fmt_g(r.v), fmt_g(m / r.v), fmt_g(*m)])?;
    }
    w.flush()?;
    ctx.say(&format!("wrote {} predictions to {}", rows.len(), path.display()))
}

fn retrieve(ctx: &Ctx, m: Option<usize>, c: Option<usize>, k: Option<usize>, checkpoint: &Option<PathBuf>) -> Result<()> {
    let ds = ctx.dataset()?;
    let bundle = ctx.bundle(checkpoint)?;
    let r = &ctx.cfg.retrieval;
    let (m, c, k) = (m.unwrap_or(r.chunk_size), c.unwrap_or(r.context_size), k.unwrap_or(r.k));
    let train = training_rows(&ds, &ctx.cfg);
    let model = &bundle.model;
    let source = ContextSource::new(model, &train, r.embed_batch)?;
    let temb = model.embed_all(&ds.test, r.embed_batch)?;
    let ids: Vec<u64> = ds.test.iter().map(|t| t.id).collect();
    let plan = chunked_inference_plan(&source.index, &temb, &ids, m, k, c)?;
    let mut records = Vec::with_capacity(ids.len());
    for chunk in &plan {
        let exclude: HashSet<u64> = ids[chunk.targets.clone()].iter().copied().collect();
        for t in chunk.targets.clone() {
            let hits = source.index.search(temb.row(t), k, &exclude)?;
            records.push(CacheRecord {
                query_id: ids[t],
                k: k as u32,
                hits: hits.iter().map(|h| (h.id, h.sim)).collect(),
            });
        }
    }
    let cache = NeighborCache {
        encoder_hash: encoder_hash(&model.store),
        records,
    };
    let path = ctx.run.path("neighbors.cache");
    cache.save(&path)?;
    let mean_ctx = plan.iter().map(|p| p.context.selected.len()).sum::<usize>() as f64 / plan.len() as f64;
    let mean_pool = plan.iter().map(|p| p.context.pool_size).sum::<usize>() as f64 / plan.len() as f64;
    ctx.say(&format!(
        "retrieval plan: {} targets in {} chunks (m = {m}, K = {k}, c = {c}); mean pool {mean_pool:.1}, mean context {mean_ctx:.1}; cache {}",
        ids.len(),
        plan.len(),
        path.display()
    ))
}

/// A random `[context ‖ target]` batch with standard-normal embeddings.
fn random_batch(rng: &mut ChaCha8Rng, d: usize) -> Result<(Tensor, ContextTargetBatch)> {
    let nc = rng.gen_range(1..=24);
    let nt = rng.gen_range(1..=8);
    let n = nc + nt;
    let c: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| f64::from(rng.gen_range(0u8..3))).collect();
    let v = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let ids = (0..n as u64).collect();
    Ok((Tensor::new(vec![n, d], c)?, ContextTargetBatch::new(nc, nt, y, v, ids)?))
}

fn analyze_credibility(ctx: &Ctx, trials: usize) -> Result<()> {
    let seed = ctx.cfg.seed;
    let model = match ctx.run.latest_phase().filter(|&p| p >= 2) {
        Some(p) => ctx.run.load_bundle(p)?.model,
        None => {
            let cards = if ctx.run.dataset().exists() {
                ctx.run.load_dataset()?.vocab.cardinalities()
            } else {
                [7, 3, 12, 23]
            };
            let mut m = Model::new(ctx.cfg.model.clone(), cards, seed)?;
            m.attach_icl(ctx.cfg.icl.clone(), seed)?;
            m
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = CredibilityReport::default();
    for _ in 0..trials {
        let (c, batch) = random_batch(&mut rng, model.width())?;
        let rep = verify_credibility(&model, &c, &batch)?;
        worst.layers = rep.layers;
        worst.targets += rep.targets;
        worst.decomposition = worst.decomposition.max(rep.decomposition);
        worst.row_sum = worst.row_sum.max(rep.row_sum);
        worst.weights = worst.weights.max(rep.weights);
    }
    ctx.say(&format!(
        "credibility checks on {trials} batches, {} layers, {} target rows: all checks passed\n  max decomposition residual {:e}, row-sum residual {:e}, weight residual {:e}",
        worst.layers, worst.targets, worst.decomposition, worst.row_sum, worst.weights
    ))
}

fn stage_bundles(ctx: &Ctx) -> Result<[ModelBundle; 3]> {
    let load = |p| {
        if !ctx.run.checkpoint(p).exists() {
            return Err(Error::Contract(format!("stage analysis needs phase {p} checkpoint")));
        }
        ctx.run.load_bundle(p)
    };
    Ok([load(1)?, load(2)?, load(3)?])
}

fn analyze_pca(ctx: &Ctx, k: usize) -> Result<()> {
    let ds = ctx.dataset()?;
    let [p1, p2, p3] = stage_bundles(ctx)?;
    let models = StageModels {
        phase1: &p1.model,
        pre: &p2.model,
        post: &p3.model,
    };
    let train = training_rows(&ds, &ctx.cfg);
    let t = pca_trajectories(&models, &train, &ds.test, k, &ctx.cfg.retrieval)?;
    let path = ctx.run.path("pca_projections.csv");
    write_projections_csv(&path, &t.projections)?;
    let ev: Vec<String> = t.pca.explained_variance.iter().map(|&v| fmt_g(v)).collect();
    ctx.say(&format!(
        "PCA on {} phase-1 test tokens: explained variance [{}]; {} projections of {} probes written to {}",
        ds.test.len(),
        ev.join(", "),
        t.projections.len(),
        t.probe_ids.len(),
        path.display()
    ))
}

fn analyze_neighbors(ctx: &Ctx, n: usize, metric: MetricArg, corpus_size: usize) -> Result<()> {
    let ds = ctx.dataset()?;
    let [p1, p2, p3] = stage_bundles(ctx)?;
    let models = StageModels {
        phase1: &p1.model,
        pre: &p2.model,
        post: &p3.model,
    };
    let r = &ctx.cfg.retrieval;
    let corpus = subsample(&training_rows(&ds, &ctx.cfg), corpus_size, ctx.cfg.seed);
    let corpus_raw = align_raw(&corpus, &ds.train_raw)?;
    let rates: Vec<f64> = p1.model.log_rates(&ds.test, r.embed_batch)?.into_iter().map(f64::exp).collect();
    let probes: Vec<EncodedInstance> = decile_probes(&rates, 10).into_iter().map(|i| ds.test[i].clone()).collect();
    let metric = match metric {
        MetricArg::Euclidean => Metric::Euclidean,
        MetricArg::Cosine => Metric::Cosine,
    };
    let rows = stage_neighbors(&models, &corpus, &corpus_raw, &probes, n, metric, r)?;
    let path = ctx.run.path("neighbors.csv");
    write_neighbors_csv(&path, &rows, metric)?;
    ctx.say(&format!(
        "{} neighbour rows ({n} per probe and stage, {metric:?} distance, corpus {}) written to {}",
        rows.len(),
        corpus.len(),
        path.display()
    ))
}

fn analyze_attention(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let bundle = ctx.bundle(&None)?;
    if bundle.model.icl.is_none() {
        return Err(Error::Contract("attention export needs a phase-2 or phase-3 checkpoint".into()));
    }
    let r = &ctx.cfg.retrieval;
    let train = training_rows(&ds, &ctx.cfg);
    let source = ContextSource::new(&bundle.model, &train, r.embed_batch)?;
    let targets = &ds.test[..r.chunk_size.min(ds.test.len())];
    let temb = bundle.model.embed_all(targets, r.embed_batch)?;
    let pass = icl_chunk(&bundle.model, &source, targets, &temb, r)?;
    let path = ctx.run.path("attention.csv");
    write_attention_csv(&path, &pass.trace, &pass.batch)?;
    ctx.say(&format!(
        "attention of {} targets over {} context rows in {} layers written to {}",
        pass.batch.n_target,
        pass.batch.n_context,
        pass.trace.layers.len(),
        path.display()
    ))
}

fn zero_shot(ctx: &Ctx, stage: ZeroShotStage) -> Result<()> {
    let records = ctx.records()?;
    let spec = SplitSpec::zero_shot(ctx.cfg.seed);
    let split = zero_shot_split(&records, &spec)?;
    let (a, b) = (&split.train_summary, &split.test_summary);
    let mut text = String::from("zero-shot split           train        test\n");
    text += &format!("  policies          {:>12} {:>11}\n", a.policies, b.policies);
    text += &format!("  relabeled         {:>12} {:>11}\n", a.relabeled, b.relabeled);
    text += &format!("  exposure          {:>12.1} {:>11.1}\n", a.exposure, b.exposure);
    text += &format!("  claims            {:>12} {:>11}\n", a.claims, b.claims);
    text += &format!(
        "  frequency         {:>11.2}% {:>10.2}%",
        100.0 * a.frequency,
        100.0 * b.frequency
    );
    ctx.say(&text)?;

    let regions = regional_summary(&records, None);
    let mut t = String::from("region     claims    exposure    rate  deviance\n");
    for r in &regions {
        t += &format!(
            "  {:<8} {:>6} {:>11.1} {:>7.4} {:>9.3}\n",
            r.region, r.claims, r.exposure, r.rate, r.deviance
        );
    }
    let s = segment_deviances(&regions);
    t += &format!(
        "weighted deviance: whole {:.3}, test {:.3}, train unseen {:.3}, train provided {:.3}",
        s[0], s[1], s[2], s[3]
    );
    ctx.say(&t)?;
    if stage == ZeroShotStage::SplitOnly {
        return Ok(());
    }

    let run = RunDir::new(ctx.run.path("zero-shot"))?;
    let ds = Dataset::from_split(split.train, split.test, SplitMode::ZeroShot, iclct::data::SplitSource::Shipped);
    run.save_dataset(&ds)?;
    let train = training_rows(&ds, &ctx.cfg);
    let unseen_ids: HashSet<u64> = ds.train_raw.iter().filter(|r| r.region == UNSEEN).map(|r| r.id).collect();
    let in_unseen: Vec<EncodedInstance> = train.iter().filter(|r| unseen_ids.contains(&r.id)).cloned().collect();
    let r = &ctx.cfg.retrieval;

    let null = NullModel::fit(&train)?;
    let mut table = String::from("model                                   params  in-sample unseen  out-of-sample\n");
    table += &format!(
        "  null model (intercept-only)          {:>7} {:>17.3} {:>14.3}\n",
        1,
        deviance_pct(&in_unseen, &null.mu(&in_unseen))?,
        deviance_pct(&ds.test, &null.mu(&ds.test))?
    );
    let labels = [
        "base credibility transformer (phase 1)",
        "ICL transformer (phase 2)",
        "fine-tuned ICL transformer (phase 3)",
    ];
    for phase in 1..=3u8 {
        let (bundle, report) = run_phase(&run, &ds, &ctx.cfg, phase)?;
        run.append_report(&describe_report(&report))?;
        let mode = if phase == 1 { EvalMode::Plain } else { EvalMode::Icl };
        let test_mu = iclct::training::predict_mu(&bundle.model, &train, &ds.test, mode, r)?;
        let ins_mu = iclct::training::predict_mu(&bundle.model, &train, &in_unseen, mode, r)?;
        table += &format!(
            "  {:<37}{:>7} {:>17.3} {:>14.3}\n",
            labels[phase as usize - 1],
            bundle.model.store.count(None),
            deviance_pct(&in_unseen, &ins_mu)?,
            deviance_pct(&ds.test, &test_mu)?
        );
    }
    ctx.say(table.trim_end())
}
