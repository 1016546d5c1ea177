//! Policy records, feature encoding, splits and regional statistics.

pub mod encode;
pub mod record;
pub mod regional;
pub mod split;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encode::{
    encode, encode_one, EncodedInstance, FeatureStats, VocabularyMap, CATEGORICAL, CONTINUOUS,
    N_CAT, N_CONT, N_FEATURES, UNSEEN, UNSEEN_INDEX,
};
pub use record::{load_csv, load_test_ids, read_csv, write_csv, Membership, RawPolicyRecord, Totals};
pub use regional::{regional_summary, segment_deviances, weighted_deviance, RegionSummary};
pub use split::{
    standard_split, validation_indices, zero_shot_split, SetCharacteristics, SplitMode, SplitSource,
    SplitSpec, StandardSplit, ZeroShotSplit,
};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Encoded train/test sets with the vocabulary and statistics fitted on train.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: VocabularyMap,
    pub stats: FeatureStats,
    pub train: Vec<EncodedInstance>,
    pub test: Vec<EncodedInstance>,
    pub train_raw: Vec<RawPolicyRecord>,
    pub test_raw: Vec<RawPolicyRecord>,
    pub mode: SplitMode,
    pub source: SplitSource,
}

impl Dataset {
    pub fn from_split(
        train_raw: Vec<RawPolicyRecord>,
        test_raw: Vec<RawPolicyRecord>,
        mode: SplitMode,
        source: SplitSource,
    ) -> Self {
        let vocab = VocabularyMap::build(&train_raw);
        let stats = FeatureStats::fit(&train_raw);
        Self {
            train: encode(&train_raw, &vocab, &stats),
            test: encode(&test_raw, &vocab, &stats),
            vocab,
            stats,
            train_raw,
            test_raw,
            mode,
            source,
        }
    }

    /// Splits `records` per `spec` and encodes both sides.
    pub fn build(
        records: &[RawPolicyRecord],
        spec: &SplitSpec,
        test_ids: Option<&std::collections::HashSet<u64>>,
    ) -> Result<Self> {
        match spec.mode {
            SplitMode::Standard => {
                let s = standard_split(records, test_ids, spec.seed);
                Ok(Self::from_split(s.train, s.test, SplitMode::Standard, s.source))
            }
            SplitMode::ZeroShot => {
                let s = zero_shot_split(records, spec)?;
                Ok(Self::from_split(s.train, s.test, SplitMode::ZeroShot, SplitSource::Shipped))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    vocab: VocabularyMap,
    stats: FeatureStats,
    mode: SplitMode,
    source: SplitSource,
}

fn instances_to_tensors(c: &mut Container, prefix: &str, rows: &[EncodedInstance]) {
    let n = rows.len();
    let cat = rows.iter().flat_map(|r| r.cat.map(|i| i as f64)).collect();
    let cont = rows.iter().flat_map(|r| r.cont).collect();
    c.insert(format!("{prefix}.cat"), Tensor::from_parts(vec![n, N_CAT], cat));
    c.insert(format!("{prefix}.cont"), Tensor::from_parts(vec![n, N_CONT], cont));
    c.insert(format!("{prefix}.y"), Tensor::vector(rows.iter().map(|r| r.y).collect()));
    c.insert(format!("{prefix}.v"), Tensor::vector(rows.iter().map(|r| r.v).collect()));
    c.insert(format!("{prefix}.id"), Tensor::vector(rows.iter().map(|r| r.id as f64).collect()));
}

fn tensors_to_instances(c: &Container, prefix: &str) -> Result<Vec<EncodedInstance>> {
    let cat = c.tensor(&format!("{prefix}.cat"))?;
    let cont = c.tensor(&format!("{prefix}.cont"))?;
    let y = c.tensor(&format!("{prefix}.y"))?.data();
    let v = c.tensor(&format!("{prefix}.v"))?.data();
    let id = c.tensor(&format!("{prefix}.id"))?.data();
    let n = y.len();
    if cat.n_rows() != n || cont.n_rows() != n || v.len() != n || id.len() != n {
        return Err(Error::Contract(format!("cache arrays for {prefix} disagree in length")));
    }
    Ok((0..n)
        .map(|i| EncodedInstance {
            cat: std::array::from_fn(|k| cat.row(i)[k] as usize),
            cont: std::array::from_fn(|k| cont.row(i)[k]),
            y: y[i],
            v: v[i],
            id: id[i] as u64,
        })
        .collect())
}

/// Writes the encoded sets, vocabulary and statistics in the container format.
pub fn save_cache(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new();
    let meta = CacheMeta {
        vocab: ds.vocab.clone(),
        stats: ds.stats.clone(),
        mode: ds.mode,
        source: ds.source,
    };
    c.set_meta("kind", "encoded-dataset");
    c.set_meta("dataset", serde_json::to_string(&meta)?);
    for (name, raw) in [("train_raw", &ds.train_raw), ("test_raw", &ds.test_raw)] {
        let mut buf = Vec::new();
        write_csv(&mut buf, raw)?;
        c.set_meta(name, String::from_utf8(buf).expect("csv output is UTF-8"));
    }
    instances_to_tensors(&mut c, "train", &ds.train);
    instances_to_tensors(&mut c, "test", &ds.test);
    c.save(path)
}

fn raw_from(c: &Container, key: &str) -> Result<Vec<RawPolicyRecord>> {
    match c.meta(key) {
        Some(text) if !text.is_empty() => read_csv(text.as_bytes()),
        _ => Ok(Vec::new()),
    }
}

/// Reads a cache written by [`save_cache`].
pub fn load_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let c = Container::load(path)?;
    let meta: CacheMeta = serde_json::from_str(
        c.meta("dataset")
            .ok_or_else(|| Error::Contract("cache lacks dataset metadata".into()))?,
    )?;
    Ok(Dataset {
        vocab: meta.vocab,
        stats: meta.stats,
        train: tensors_to_instances(&c, "train")?,
        test: tensors_to_instances(&c, "test")?,
        train_raw: raw_from(&c, "train_raw")?,
        test_raw: raw_from(&c, "test_raw")?,
        mode: meta.mode,
        source: meta.source,
    })
}
