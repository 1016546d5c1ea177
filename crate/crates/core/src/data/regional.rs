use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::record::RawPolicyRecord;
use crate::numeric::poisson_unit_deviance;

/// Which side of the zero-shot split a region falls on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segment {
    Test,
    TrainUnseen,
    TrainProvided,
}

/// Published per-region figures of the cleaned dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRegion {
    pub name: &'static str,
    pub claims: f64,
    pub exposure: f64,
    pub deviance: f64,
    pub segment: Segment,
}

const fn rr(name: &'static str, claims: f64, exposure: f64, deviance: f64, segment: Segment) -> ReferenceRegion {
    ReferenceRegion {
        name,
        claims,
        exposure,
        deviance,
        segment,
    }
}

pub const REFERENCE_REGIONS: [ReferenceRegion; 22] = [
    rr("R43", 38.0, 564.0, 0.215, Segment::Test),
    rr("R21", 77.0, 1_204.0, 0.179, Segment::Test),
    rr("R42", 92.0, 1_209.0, 0.273, Segment::Test),
    rr("R94", 132.0, 1_766.0, 0.210, Segment::Test),
    rr("R83", 141.0, 2_322.0, 0.187, Segment::Test),
    rr("R74", 197.0, 2_396.0, 0.268, Segment::Test),
    rr("R23", 220.0, 3_177.0, 0.178, Segment::Test),
    rr("R22", 314.0, 3_573.0, 0.246, Segment::Test),
    rr("R26", 345.0, 5_023.0, 0.219, Segment::Test),
    rr("R25", 452.0, 6_653.0, 0.263, Segment::Test),
    rr("R73", 369.0, 7_014.0, 0.158, Segment::Test),
    rr("R41", 468.0, 8_112.0, 0.241, Segment::TrainUnseen),
    rr("R54", 800.0, 11_163.0, 0.271, Segment::TrainUnseen),
    rr("R31", 944.0, 11_488.0, 0.227, Segment::TrainUnseen),
    rr("R72", 1_055.0, 14_316.0, 0.222, Segment::TrainUnseen),
    rr("R91", 1_007.0, 14_709.0, 0.198, Segment::TrainUnseen),
    rr("R52", 1_576.0, 21_930.0, 0.263, Segment::TrainUnseen),
    rr("R53", 1_871.0, 27_753.0, 0.282, Segment::TrainProvided),
    rr("R11", 2_591.0, 30_198.0, 0.238, Segment::TrainProvided),
    rr("R93", 2_986.0, 35_749.0, 0.240, Segment::TrainProvided),
    rr("R82", 4_233.0, 45_333.0, 0.300, Segment::TrainProvided),
    rr("R24", 6_475.0, 102_706.0, 0.266, Segment::TrainProvided),
];

/// Published exposure-weighted segment deviances: whole, test, train-unseen,
/// train-provided.
pub const REFERENCE_SEGMENT_DEVIANCES: [f64; 4] = [0.255, 0.216, 0.238, 0.267];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub policies: usize,
    pub claims: u64,
    pub exposure: f64,
    pub rate: f64,
    /// Mean per-row Poisson deviance.
    pub deviance: f64,
}

/// Per-region totals and deviance. Each region is scored against `rates`
/// when given, otherwise against its own observed mean rate.
pub fn regional_summary(
    records: &[RawPolicyRecord],
    rates: Option<&BTreeMap<String, f64>>,
) -> Vec<RegionSummary> {
    let mut groups: BTreeMap<&str, Vec<&RawPolicyRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.region.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(region, rows)| {
            let claims: u64 = rows.iter().map(|r| u64::from(r.claim_nb)).sum();
            let exposure: f64 = rows.iter().map(|r| r.exposure).sum();
            let observed = claims as f64 / exposure;
            let rate = rates.and_then(|m| m.get(region).copied()).unwrap_or(observed);
            let dev = rows
                .iter()
                .map(|r| poisson_unit_deviance(f64::from(r.claim_nb), rate * r.exposure))
                .sum::<f64>()
                / rows.len() as f64;
            RegionSummary {
                region: region.to_string(),
                policies: rows.len(),
                claims,
                exposure,
                rate: observed,
                deviance: dev,
            }
        })
        .collect()
}

/// Exposure-weighted mean deviance over the regions accepted by `keep`.
pub fn weighted_deviance(rows: &[RegionSummary], keep: impl Fn(&str) -> bool) -> f64 {
    let (num, den) = rows
        .iter()
        .filter(|r| keep(&r.region))
        .fold((0.0, 0.0), |(n, d), r| (n + r.exposure * r.deviance, d + r.exposure));
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

/// Segment of a region under the default zero-shot split, if it is listed.
pub fn reference_segment(region: &str) -> Option<Segment> {
    REFERENCE_REGIONS
        .iter()
        .find(|r| r.name == region)
        .map(|r| r.segment)
}

/// Whole / test / train-unseen / train-provided weighted deviances.
pub fn segment_deviances(rows: &[RegionSummary]) -> [f64; 4] {
    let seg = |s: Segment| move |r: &str| reference_segment(r) == Some(s);
    [
        weighted_deviance(rows, |_| true),
        weighted_deviance(rows, seg(Segment::Test)),
        weighted_deviance(rows, seg(Segment::TrainUnseen)),
        weighted_deviance(rows, seg(Segment::TrainProvided)),
    ]
}
