use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "MALE")]
    Male,
    #[serde(rename = "FEMALE")]
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub age_years: f64,
    pub sex: Sex,
}

impl MetadataRecord {
    pub fn new(age_years: f64, sex: Sex) -> Result<Self> {
        if !(0.0..=130.0).contains(&age_years) {
            bail_input!("age {age_years} outside [0, 130]");
        }
        Ok(Self { age_years, sex })
    }
}

/// Fusion-head metadata features: age scaled by 0.01, sex as 0 (male) / 1 (female).
pub fn encode_metadata(m: &MetadataRecord) -> [f64; 2] {
    let sex = match m.sex {
        Sex::Male => 0.0,
        Sex::Female => 1.0,
    };
    [m.age_years * 0.01, sex]
}
