use std::collections::{BTreeSet, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encode::UNSEEN;
use super::record::{Membership, RawPolicyRecord, Totals};
use crate::error::{Error, Result};

/// Published sizes of the shipped learning/test split of the cleaned dataset.
pub const STANDARD_TRAIN_POLICIES: usize = 610_206;
pub const STANDARD_TEST_POLICIES: usize = 67_801;
pub const STANDARD_TRAIN_CLAIMS: u64 = 23_738;
pub const STANDARD_TEST_CLAIMS: u64 = 2_645;

/// Lowest-exposure regions held out as the zero-shot test set.
pub const ZERO_SHOT_TEST_REGIONS: [&str; 11] = [
    "R43", "R21", "R42", "R94", "R83", "R74", "R23", "R22", "R26", "R25", "R73",
];
/// Next-smallest regions relabelled "unseen" inside the training set.
pub const ZERO_SHOT_RELABEL_REGIONS: [&str; 6] = ["R41", "R54", "R31", "R72", "R91", "R52"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Standard,
    ZeroShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub test_regions: Vec<String>,
    pub relabel_regions: Vec<String>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            mode: SplitMode::Standard,
            test_regions: Vec::new(),
            relabel_regions: Vec::new(),
            validation_fraction: 0.15,
            seed,
        }
    }

    pub fn zero_shot(seed: u64) -> Self {
        Self {
            mode: SplitMode::ZeroShot,
            test_regions: ZERO_SHOT_TEST_REGIONS.iter().map(|s| s.to_string()).collect(),
            relabel_regions: ZERO_SHOT_RELABEL_REGIONS.iter().map(|s| s.to_string()).collect(),
            validation_fraction: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let test: HashSet<&String> = self.test_regions.iter().collect();
        if let Some(r) = self.relabel_regions.iter().find(|r| test.contains(r)) {
            return Err(Error::Config(format!(
                "region {r} is both a test region and a relabelled training region"
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Where the standard split membership came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSource {
    /// Membership column or companion id list shipped with the data.
    Shipped,
    /// Seeded deterministic fallback; counts match but rows do not.
    SeededFallback,
}

#[derive(Clone, Debug)]
pub struct StandardSplit {
    pub train: Vec<RawPolicyRecord>,
    pub test: Vec<RawPolicyRecord>,
    pub source: SplitSource,
}

/// Splits by shipped membership (column or `test_ids`), falling back to a
/// seeded split of the published test size when neither is available.
pub fn standard_split(
    records: &[RawPolicyRecord],
    test_ids: Option<&HashSet<u64>>,
    seed: u64,
) -> StandardSplit {
    let tagged = !records.is_empty() && records.iter().all(|r| r.membership.is_some());
    let (train, test, source) = if let Some(ids) = test_ids {
        let (test, train): (Vec<_>, Vec<_>) =
            records.iter().cloned().partition(|r| ids.contains(&r.id));
        (train, test, SplitSource::Shipped)
    } else if tagged {
        let (test, train): (Vec<_>, Vec<_>) = records
            .iter()
            .cloned()
            .partition(|r| r.membership == Some(Membership::Test));
        (train, test, SplitSource::Shipped)
    } else {
        let total = STANDARD_TRAIN_POLICIES + STANDARD_TEST_POLICIES;
        let n_test = if records.len() == total {
            STANDARD_TEST_POLICIES
        } else {
            (records.len() as f64 * STANDARD_TEST_POLICIES as f64 / total as f64).round() as usize
        };
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test_set: HashSet<usize> = order[..n_test].iter().copied().collect();
        let mut train = Vec::with_capacity(records.len() - n_test);
        let mut test = Vec::with_capacity(n_test);
        for (i, r) in records.iter().enumerate() {
            if test_set.contains(&i) {
                test.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
        warn!("no shipped split membership found; using a seeded fallback split");
        (train, test, SplitSource::SeededFallback)
    };
    let (tr, te) = (Totals::of(&train), Totals::of(&test));
    if tr.policies != STANDARD_TRAIN_POLICIES
        || te.policies != STANDARD_TEST_POLICIES
        || tr.claims != STANDARD_TRAIN_CLAIMS
        || te.claims != STANDARD_TEST_CLAIMS
    {
        warn!(
            "standard split differs from the cleaned-data reference: train {} policies / {} claims, test {} / {}",
            tr.policies, tr.claims, te.policies, te.claims
        );
    }
    StandardSplit {
        train,
        test,
        source,
    }
}

/// Counts describing one side of a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetCharacteristics {
    pub policies: usize,
    pub relabeled: usize,
    pub exposure: f64,
    pub claims: u64,
    pub frequency: f64,
}

#[derive(Clone, Debug)]
pub struct ZeroShotSplit {
    pub train: Vec<RawPolicyRecord>,
    pub test: Vec<RawPolicyRecord>,
    /// Region labels before relabelling, aligned with `train` / `test`.
    pub train_original_regions: Vec<String>,
    pub test_original_regions: Vec<String>,
    pub train_summary: SetCharacteristics,
    pub test_summary: SetCharacteristics,
}

/// Holds out the configured regions as an all-"unseen" test set and relabels
/// a second set of regions to "unseen" inside training.
pub fn zero_shot_split(records: &[RawPolicyRecord], spec: &SplitSpec) -> Result<ZeroShotSplit> {
    spec.validate()?;
    let present: BTreeSet<&str> = records.iter().map(|r| r.region.as_str()).collect();
    for r in spec.test_regions.iter().chain(&spec.relabel_regions) {
        if !present.contains(r.as_str()) {
            return Err(Error::Config(format!("region {r} does not occur in the dataset")));
        }
    }
    let test_regions: HashSet<&str> = spec.test_regions.iter().map(String::as_str).collect();
    let relabel: HashSet<&str> = spec.relabel_regions.iter().map(String::as_str).collect();

    let mut out = ZeroShotSplit {
        train: Vec::new(),
        test: Vec::new(),
        train_original_regions: Vec::new(),
        test_original_regions: Vec::new(),
        train_summary: SetCharacteristics::default(),
        test_summary: SetCharacteristics::default(),
    };
    for r in records {
        let mut rec = r.clone();
        let original = r.region.clone();
        if test_regions.contains(r.region.as_str()) {
            rec.region = UNSEEN.to_string();
            out.test_summary.relabeled += 1;
            out.test.push(rec);
            out.test_original_regions.push(original);
        } else {
            if relabel.contains(r.region.as_str()) {
                rec.region = UNSEEN.to_string();
                out.train_summary.relabeled += 1;
            }
            out.train.push(rec);
            out.train_original_regions.push(original);
        }
    }
    for (summary, set) in [
        (&mut out.train_summary, &out.train),
        (&mut out.test_summary, &out.test),
    ] {
        let t = Totals::of(set);
        summary.policies = t.policies;
        summary.exposure = t.exposure;
        summary.claims = t.claims;
        summary.frequency = t.frequency();
    }
    Ok(out)
}

/// Uniform (unstratified) validation indices drawn once with the run seed.
pub fn validation_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let n_val = (n as f64 * fraction).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut fit = order[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}
