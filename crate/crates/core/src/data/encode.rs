use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::record::RawPolicyRecord;

pub const N_CAT: usize = 4;
pub const N_CONT: usize = 5;
/// Feature columns per instance (CLS excluded).
pub const N_FEATURES: usize = N_CAT + N_CONT;

pub const CATEGORICAL: [&str; N_CAT] = ["Area", "VehGas", "VehBrand", "Region"];
pub const CONTINUOUS: [&str; N_CONT] = ["VehPower", "VehAge", "DrivAge", "BonusMalus", "Density"];

/// Level label used for categories absent from training.
pub const UNSEEN: &str = "unseen";
/// Reserved index of [`UNSEEN`] in every categorical vocabulary.
pub const UNSEEN_INDEX: usize = 0;

fn categorical_values(r: &RawPolicyRecord) -> [&str; N_CAT] {
    [&r.area, &r.veh_gas, &r.veh_brand, &r.region]
}

/// Continuous inputs before standardization; Density enters on the log scale.
pub fn continuous_values(r: &RawPolicyRecord) -> [f64; N_CONT] {
    [
        f64::from(r.veh_power),
        f64::from(r.veh_age),
        f64::from(r.driv_age),
        f64::from(r.bonus_malus),
        r.density.ln(),
    ]
}

/// Ordered level→index maps, one per categorical feature. Index 0 is the
/// reserved "unseen" level; observed levels follow in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyMap {
    pub levels: Vec<Vec<String>>,
}

impl VocabularyMap {
    pub fn build(records: &[RawPolicyRecord]) -> Self {
        let mut sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); N_CAT];
        for r in records {
            for (set, v) in sets.iter_mut().zip(categorical_values(r)) {
                if v != UNSEEN {
                    set.insert(v);
                }
            }
        }
        Self {
            levels: sets
                .into_iter()
                .map(|s| s.into_iter().map(str::to_string).collect())
                .collect(),
        }
    }

    /// Vocabulary size of feature `f` including the unseen slot.
    pub fn cardinality(&self, f: usize) -> usize {
        self.levels[f].len() + 1
    }

    pub fn cardinalities(&self) -> [usize; N_CAT] {
        std::array::from_fn(|f| self.cardinality(f))
    }

    pub fn index(&self, f: usize, level: &str) -> usize {
        self.levels[f]
            .binary_search_by(|l| l.as_str().cmp(level))
            .map_or(UNSEEN_INDEX, |i| i + 1)
    }

    pub fn level(&self, f: usize, index: usize) -> Option<&str> {
        if index == UNSEEN_INDEX {
            Some(UNSEEN)
        } else {
            self.levels[f].get(index - 1).map(String::as_str)
        }
    }
}

/// Standardization statistics of the continuous features (training split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_CONT],
    pub sd: [f64; N_CONT],
}

impl FeatureStats {
    pub fn fit(records: &[RawPolicyRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut mean = [0.0; N_CONT];
        for r in records {
            for (m, x) in mean.iter_mut().zip(continuous_values(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; N_CONT];
        for r in records {
            for (k, x) in continuous_values(r).iter().enumerate() {
                var[k] += (x - mean[k]) * (x - mean[k]);
            }
        }
        let sd = var.map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        Self { mean, sd }
    }

    pub fn standardize(&self, raw: [f64; N_CONT]) -> [f64; N_CONT] {
        std::array::from_fn(|k| (raw[k] - self.mean[k]) / self.sd[k])
    }
}

/// Model-ready policy row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedInstance {
    pub cat: [usize; N_CAT],
    pub cont: [f64; N_CONT],
    /// Response (claim count).
    pub y: f64,
    /// Case weight (exposure).
    pub v: f64,
    pub id: u64,
}

pub fn encode_one(r: &RawPolicyRecord, vocab: &VocabularyMap, stats: &FeatureStats) -> EncodedInstance {
    let cats = categorical_values(r);
    EncodedInstance {
        cat: std::array::from_fn(|f| vocab.index(f, cats[f])),
        cont: stats.standardize(continuous_values(r)),
        y: f64::from(r.claim_nb),
        v: r.exposure,
        id: r.id,
    }
}

pub fn encode(
    records: &[RawPolicyRecord],
    vocab: &VocabularyMap,
    stats: &FeatureStats,
) -> Vec<EncodedInstance> {
    records.iter().map(|r| encode_one(r, vocab, stats)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    #[test]
    fn training_columns_are_standardized() {
        let recs = synth::generate(2_000, 3);
        let stats = FeatureStats::fit(&recs);
        let vocab = VocabularyMap::build(&recs);
        let enc = encode(&recs, &vocab, &stats);
        for k in 0..N_CONT {
            let n = enc.len() as f64;
            let mean = enc.iter().map(|e| e.cont[k]).sum::<f64>() / n;
            let sd = (enc.iter().map(|e| (e.cont[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9, "{k}: mean {mean}");
            assert!((sd - 1.0).abs() < 1e-9, "{k}: sd {sd}");
        }
    }

    #[test]
    fn absent_level_maps_to_unseen() {
        let recs = synth::generate(200, 4);
        let vocab = VocabularyMap::build(&recs);
        assert_eq!(vocab.index(3, "R99"), UNSEEN_INDEX);
        assert_eq!(vocab.index(3, UNSEEN), UNSEEN_INDEX);
        assert_eq!(vocab.level(3, UNSEEN_INDEX), Some(UNSEEN));
    }

    #[test]
    fn index_then_level_roundtrips() {
        let recs = synth::generate(500, 5);
        let vocab = VocabularyMap::build(&recs);
        for f in 0..N_CAT {
            for level in &vocab.levels[f] {
                assert_eq!(vocab.level(f, vocab.index(f, level)), Some(level.as_str()));
            }
        }
    }

    #[test]
    fn density_is_log_standardized() {
        let mut recs = synth::generate(300, 6);
        let stats = FeatureStats::fit(&recs);
        let vocab = VocabularyMap::build(&recs);
        recs[0].density = 100.0;
        let e = encode_one(&recs[0], &vocab, &stats);
        let expected = (100f64.ln() - stats.mean[4]) / stats.sd[4];
        assert!((e.cont[4] - expected).abs() < 1e-15);
    }
}
