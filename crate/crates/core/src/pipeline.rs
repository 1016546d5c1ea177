//! Run-directory layout and the phase driver shared by the command line and
//! the end-to-end tests.

use std::path::{Path, PathBuf};

use crate::analysis::write_metrics_csv;
use crate::checkpoint::ModelBundle;
use crate::config::Config;
use crate::data::{load_cache, save_cache, Dataset, EncodedInstance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{phase1_train, phase2_train, phase3_finetune, subsample, TrainSplit, TrainingReport};

/// Files kept under one `--out` directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn dataset(&self) -> PathBuf {
        self.path("dataset.bin")
    }

    pub fn checkpoint(&self, phase: u8) -> PathBuf {
        self.path(&format!("phase{phase}.ckpt"))
    }

    pub fn report(&self, phase: u8) -> PathBuf {
        self.path(&format!("phase{phase}.json"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.csv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.path("report.txt")
    }

    pub fn save_dataset(&self, ds: &Dataset) -> Result<()> {
        save_cache(ds, self.dataset())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let p = self.dataset();
        if !p.exists() {
            return Err(Error::Contract(format!(
                "{} not found; run `prepare` first",
                p.display()
            )));
        }
        load_cache(p)
    }

    /// Highest phase with a checkpoint on disk.
    pub fn latest_phase(&self) -> Option<u8> {
        (1..=3).rev().find(|&p| self.checkpoint(p).exists())
    }

    pub fn load_bundle(&self, phase: u8) -> Result<ModelBundle> {
        ModelBundle::load(self.checkpoint(phase))
    }

    pub fn load_report(&self, phase: u8) -> Result<Option<TrainingReport>> {
        let p = self.report(phase);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    /// Appends a section to the human-readable report.
    pub fn append_report(&self, text: &str) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.report_txt())?;
        writeln!(f, "{text}")?;
        Ok(())
    }

    /// Rewrites `metrics.csv` from every phase report present.
    pub fn write_metrics(&self) -> Result<()> {
        let reports: Vec<TrainingReport> = (1..=3)
            .filter_map(|p| self.load_report(p).transpose())
            .collect::<Result<_>>()?;
        write_metrics_csv(&self.metrics(), &reports.iter().collect::<Vec<_>>())
    }
}

/// Training rows after the optional seeded subsample.
pub fn training_rows(ds: &Dataset, cfg: &Config) -> Vec<EncodedInstance> {
    subsample(&ds.train, cfg.data.subsample, cfg.seed)
}

pub fn train_split(ds: &Dataset, cfg: &Config) -> TrainSplit {
    TrainSplit::new(&training_rows(ds, cfg), cfg.data.validation_fraction, cfg.seed)
}

/// Trains one phase, starting from the previous phase's checkpoint, and
/// writes the new checkpoint, its report and `metrics.csv`.
pub fn run_phase(run: &RunDir, ds: &Dataset, cfg: &Config, phase: u8) -> Result<(ModelBundle, TrainingReport)> {
    let split = train_split(ds, cfg);
    let mut model = match phase {
        1 => Model::new(cfg.model.clone(), ds.vocab.cardinalities(), cfg.seed)?,
        2 | 3 => {
            let prev = run.checkpoint(phase - 1);
            if !prev.exists() {
                return Err(Error::Contract(format!(
                    "phase {phase} needs {}; train phase {} first",
                    prev.display(),
                    phase - 1
                )));
            }
            ModelBundle::load(prev)?.model
        }
        _ => return Err(Error::Config(format!("unknown phase {phase}"))),
    };
    let report = match phase {
        1 => phase1_train(&mut model, &split, cfg)?,
        2 => phase2_train(&mut model, &split, cfg)?,
        _ => phase3_finetune(&mut model, &split, cfg)?,
    };
    let bundle = ModelBundle {
        model,
        phase,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        vocab: ds.vocab.clone(),
        stats: ds.stats.clone(),
    };
    bundle.save(run.checkpoint(phase))?;
    std::fs::write(run.report(phase), serde_json::to_string_pretty(&report)?)?;
    for later in phase + 1..=3 {
        for p in [run.checkpoint(later), run.report(later)] {
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    run.write_metrics()?;
    Ok((bundle, report))
}

/// Human summary of a training report.
pub fn describe_report(r: &TrainingReport) -> String {
    let h = &r.hyper;
    let frozen: Vec<&str> = r.frozen.iter().map(|g| g.as_str()).collect();
    let mut s = format!(
        "phase {}: seed {}, lr {}, weight decay {}, betas ({}, {}), eps {}, batch {}, max epochs {}, patience {}\n",
        r.phase, r.seed, h.lr, h.weight_decay, h.beta1, h.beta2, h.eps, h.batch_size, h.max_epochs, h.patience
    );
    s += &format!(
        "  parameters {} (trainable {}), frozen [{}]\n",
        r.param_count,
        r.trainable_count,
        frozen.join(", ")
    );
    for e in &r.epochs {
        match e.train_loss {
            Some(t) => s += &format!("  epoch {:>3}  train {:.5}  validation {:.5}\n", e.epoch, t, e.val_loss),
            None => s += &format!("  epoch {:>3}  validation {:.5}\n", e.epoch, e.val_loss),
        }
    }
    s += &format!(
        "  best epoch {} validation {:.5}{}; wall time {:.1}s",
        r.best_epoch,
        r.best_val,
        if r.stopped_early { " (early stop)" } else { "" },
        r.wall_time_s
    );
    s
}
