//! Seeded synthetic portfolio with the MTPL schema, used when the real file
//! is not available and throughout the test suites.

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::record::{Membership, RawPolicyRecord};
use super::regional::REFERENCE_REGIONS;

const AREAS: [&str; 6] = ["A", "B", "C", "D", "E", "F"];
const AREA_WEIGHTS: [f64; 6] = [0.15, 0.11, 0.28, 0.22, 0.20, 0.04];
const AREA_EFFECT: [f64; 6] = [-0.15, -0.08, 0.0, 0.05, 0.10, 0.15];
const BRANDS: [&str; 11] = ["B1", "B10", "B11", "B12", "B13", "B14", "B2", "B3", "B4", "B5", "B6"];
const BRAND_WEIGHTS: [f64; 11] = [0.24, 0.03, 0.02, 0.24, 0.02, 0.01, 0.24, 0.08, 0.04, 0.05, 0.03];
const BRAND_EFFECT: [f64; 11] = [0.0, 0.05, 0.1, -0.15, 0.05, 0.25, 0.0, 0.02, 0.0, 0.05, 0.0];

/// Draws `n` policies. Roughly one in ten rows is tagged as test membership.
pub fn generate(n: usize, seed: u64) -> Vec<RawPolicyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region_w =
        WeightedIndex::new(REFERENCE_REGIONS.iter().map(|r| r.exposure)).expect("positive weights");
    let area_w = WeightedIndex::new(AREA_WEIGHTS).expect("positive weights");
    let brand_w = WeightedIndex::new(BRAND_WEIGHTS).expect("positive weights");
    (0..n)
        .map(|i| {
            let reg = &REFERENCE_REGIONS[region_w.sample(&mut rng)];
            let area = area_w.sample(&mut rng);
            let brand = brand_w.sample(&mut rng);
            let diesel = rng.gen_bool(0.5);
            let veh_power = 4 + (rng.gen::<f64>().powi(2) * 11.0) as u32;
            let veh_age = (-(1.0 - rng.gen::<f64>()).ln() * 7.0).min(60.0) as u32;
            let driv_age = 18 + (rng.gen::<f64>().powf(1.3) * 70.0) as u32;
            let young = driv_age < 26;
            let bonus_malus = if rng.gen_bool(0.6) {
                50
            } else {
                let base = if young { 80.0 } else { 55.0 };
                (base + rng.gen::<f64>().powi(2) * 100.0).min(230.0) as u32
            };
            let log_density = 1.0 + (area as f64) * 1.4 + rng.gen::<f64>() * 2.5;
            let density = log_density.exp().round().max(1.0);
            let exposure = if rng.gen_bool(0.25) {
                1.0
            } else {
                (rng.gen::<f64>() * 0.99 + 0.01).min(1.0)
            };

            let log_rate = (reg.claims / reg.exposure).ln()
                + AREA_EFFECT[area]
                + BRAND_EFFECT[brand]
                + 0.9 * (f64::from(bonus_malus) / 50.0).ln()
                + if young { 0.5 } else { 0.0 }
                - 0.004 * (f64::from(driv_age) - 45.0).abs()
                + if diesel { 0.05 } else { -0.05 }
                - 0.01 * f64::from(veh_age.min(20))
                - 0.25;
            let mu = exposure * log_rate.exp();
            let claim_nb = Poisson::new(mu).map_or(0.0, |p| p.sample(&mut rng)) as u32;

            RawPolicyRecord {
                id: i as u64 + 1,
                claim_nb,
                exposure,
                area: AREAS[area].to_string(),
                veh_power,
                veh_age,
                driv_age,
                bonus_malus,
                veh_brand: BRANDS[brand].to_string(),
                veh_gas: if diesel { "Diesel" } else { "Regular" }.to_string(),
                density,
                region: reg.name.to_string(),
                membership: Some(if rng.gen_bool(0.1) {
                    Membership::Test
                } else {
                    Membership::Learn
                }),
            }
        })
        .collect()
}
