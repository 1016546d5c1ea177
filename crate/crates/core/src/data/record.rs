use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train/test membership carried by the cleaned dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Membership {
    Learn,
    Test,
}

/// One policy row as read from the source file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPolicyRecord {
    pub id: u64,
    pub claim_nb: u32,
    pub exposure: f64,
    pub area: String,
    pub veh_power: u32,
    pub veh_age: u32,
    pub driv_age: u32,
    pub bonus_malus: u32,
    pub veh_brand: String,
    pub veh_gas: String,
    pub density: f64,
    pub region: String,
    pub membership: Option<Membership>,
}

pub const REQUIRED_COLUMNS: [&str; 12] = [
    "IDpol",
    "ClaimNb",
    "Exposure",
    "Area",
    "VehPower",
    "VehAge",
    "DrivAge",
    "BonusMalus",
    "VehBrand",
    "VehGas",
    "Density",
    "Region",
];

/// Optional split-membership column names, checked in order.
pub const MEMBERSHIP_COLUMNS: [&str; 4] = ["LearnTest", "Set", "set", "split"];

fn strip(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '\'' || c == '"')
}

fn parse_f64(field: &str, column: &str, line: u64) -> Result<f64> {
    strip(field).parse::<f64>().map_err(|e| Error::Parse {
        line,
        message: format!("{column}: {e} ({field:?})"),
    })
}

fn parse_count(field: &str, column: &str, line: u64) -> Result<u32> {
    let v = parse_f64(field, column, line)?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Parse {
            line,
            message: format!("{column} must be a non-negative integer, got {field:?}"),
        });
    }
    Ok(v as u32)
}

fn parse_membership(field: &str, line: u64) -> Result<Membership> {
    match strip(field).to_ascii_lowercase().as_str() {
        "l" | "learn" | "train" | "training" => Ok(Membership::Learn),
        "t" | "test" => Ok(Membership::Test),
        other => Err(Error::Parse {
            line,
            message: format!("unknown split membership {other:?}"),
        }),
    }
}

impl RawPolicyRecord {
    fn validate(&self, line: u64) -> Result<()> {
        let fail = |message: String| Err(Error::Parse { line, message });
        if !(self.exposure > 0.0) || !self.exposure.is_finite() {
            return fail(format!("Exposure must be positive, got {}", self.exposure));
        }
        if self.driv_age < 18 {
            return fail(format!("DrivAge must be at least 18, got {}", self.driv_age));
        }
        if !(self.density > 0.0) || !self.density.is_finite() {
            return fail(format!("Density must be positive, got {}", self.density));
        }
        Ok(())
    }
}

/// Reads the policy CSV. Header names are case-sensitive.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<RawPolicyRecord>> {
    read_csv(File::open(path)?)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RawPolicyRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| strip(h) == name);
    let mut cols = [0usize; 12];
    for (slot, name) in cols.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = find(name).ok_or_else(|| Error::Schema(format!("missing column {name}")))?;
    }
    let membership_col = MEMBERSHIP_COLUMNS.iter().find_map(|c| find(c));

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |k: usize| -> Result<&str> {
            row.get(cols[k]).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {}", REQUIRED_COLUMNS[k]),
            })
        };
        let id_raw = parse_f64(get(0)?, "IDpol", line)?;
        if id_raw < 0.0 || id_raw.fract() != 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("IDpol must be a non-negative integer, got {id_raw}"),
            });
        }
        let rec = RawPolicyRecord {
            id: id_raw as u64,
            claim_nb: parse_count(get(1)?, "ClaimNb", line)?,
            exposure: parse_f64(get(2)?, "Exposure", line)?,
            area: strip(get(3)?).to_string(),
            veh_power: parse_count(get(4)?, "VehPower", line)?,
            veh_age: parse_count(get(5)?, "VehAge", line)?,
            driv_age: parse_count(get(6)?, "DrivAge", line)?,
            bonus_malus: parse_count(get(7)?, "BonusMalus", line)?,
            veh_brand: strip(get(8)?).to_string(),
            veh_gas: strip(get(9)?).to_string(),
            density: parse_f64(get(10)?, "Density", line)?,
            region: strip(get(11)?).to_string(),
            membership: match membership_col {
                Some(c) => Some(parse_membership(row.get(c).unwrap_or(""), line)?),
                None => None,
            },
        };
        rec.validate(line)?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records in the input schema (plus a `LearnTest` column when every
/// record carries a membership tag).
pub fn write_csv<W: std::io::Write>(writer: W, records: &[RawPolicyRecord]) -> Result<()> {
    let with_split = !records.is_empty() && records.iter().all(|r| r.membership.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    if with_split {
        header.push("LearnTest");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.to_string(),
            r.claim_nb.to_string(),
            r.exposure.to_string(),
            r.area.clone(),
            r.veh_power.to_string(),
            r.veh_age.to_string(),
            r.driv_age.to_string(),
            r.bonus_malus.to_string(),
            r.veh_brand.clone(),
            r.veh_gas.clone(),
            r.density.to_string(),
            r.region.clone(),
        ];
        if with_split {
            row.push(match r.membership {
                Some(Membership::Test) => "T".into(),
                _ => "L".into(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a companion file listing test-set policy ids, one per line.
pub fn load_test_ids(path: impl AsRef<Path>) -> Result<HashSet<u64>> {
    let mut ids = HashSet::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let t = strip(&line);
        if t.is_empty() || t.starts_with('#') || t == "IDpol" {
            continue;
        }
        let id = t.parse::<f64>().map_err(|e| Error::Parse {
            line: k as u64 + 1,
            message: e.to_string(),
        })?;
        ids.insert(id as u64);
    }
    Ok(ids)
}

/// Portfolio totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub policies: usize,
    pub exposure: f64,
    pub claims: u64,
}

impl Totals {
    pub fn of(records: &[RawPolicyRecord]) -> Self {
        records.iter().fold(Self::default(), |mut t, r| {
            t.policies += 1;
            t.exposure += r.exposure;
            t.claims += u64::from(r.claim_nb);
            t
        })
    }

    pub fn frequency(&self) -> f64 {
        if self.exposure > 0.0 {
            self.claims as f64 / self.exposure
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "IDpol,ClaimNb,Exposure,Area,VehPower,VehAge,DrivAge,BonusMalus,VehBrand,VehGas,Density,Region\n";

    #[test]
    fn header_only_is_empty() {
        assert!(read_csv(HEADER.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn parses_quoted_levels() {
        let csv = format!("{HEADER}1,1,0.1,'D',5,0,55,50,'B12',\"Regular\",1217,'R82'\n");
        let recs = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(recs[0].area, "D");
        assert_eq!(recs[0].region, "R82");
        assert_eq!(recs[0].veh_gas, "Regular");
        assert_eq!(recs[0].membership, None);
    }

    #[test]
    fn negative_claim_count_is_parse_error_with_line() {
        let csv = format!(
            "{HEADER}1,0,0.1,D,5,0,55,50,B12,Regular,1217,R82\n2,-1,0.1,D,5,0,55,50,B12,Regular,1217,R82\n"
        );
        match read_csv(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "IDpol,ClaimNb\n1,0\n";
        assert!(matches!(read_csv(csv.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn membership_column_is_recognised() {
        let csv = "IDpol,ClaimNb,Exposure,Area,VehPower,VehAge,DrivAge,BonusMalus,VehBrand,VehGas,Density,Region,LearnTest\n\
                   1,0,0.1,D,5,0,55,50,B12,Regular,1217,R82,L\n2,0,0.1,D,5,0,55,50,B12,Regular,1217,R82,T\n";
        let recs = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(recs[0].membership, Some(Membership::Learn));
        assert_eq!(recs[1].membership, Some(Membership::Test));
    }

    #[test]
    fn write_then_read_roundtrip() {
        let csv = format!("{HEADER}7,2,0.5,A,6,18,68,55,B1,Diesel,27.5,R53\n");
        let recs = read_csv(csv.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), recs);
    }
}
