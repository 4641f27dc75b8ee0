//! Cache-aware roofline data stored next to a session.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeCeiling {
    pub name: String,
    pub ops_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCeiling {
    pub name: String,
    pub bytes_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineData {
    pub machine: String,
    #[serde(default)]
    pub compute_ceilings: Vec<ComputeCeiling>,
    #[serde(default)]
    pub memory_ceilings: Vec<MemoryCeiling>,
}

#[derive(Debug, Error)]
pub enum RooflineError {
    #[error("roofline file is not valid: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("ceiling '{0}' must be a finite positive rate")]
    BadRate(String),
}

/// Parses and checks a `roofline.json` document.
pub fn parse_roofline(bytes: &[u8]) -> Result<RooflineData, RooflineError> {
    let data: RooflineData = serde_json::from_slice(bytes)?;
    let ok = |v: f64| v.is_finite() && v > 0.0;
    for c in &data.compute_ceilings {
        if !ok(c.ops_per_sec) {
            return Err(RooflineError::BadRate(c.name.clone()));
        }
    }
    for m in &data.memory_ceilings {
        if !ok(m.bytes_per_sec) {
            return Err(RooflineError::BadRate(m.name.clone()));
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ceilings() {
        let r = parse_roofline(
            br#"{"machine":"box","compute_ceilings":[{"name":"FP64 FMA","ops_per_sec":1.2e11}],
                "memory_ceilings":[{"name":"L1","bytes_per_sec":9.0e11},{"name":"DRAM","bytes_per_sec":4.0e10}]}"#,
        )
        .unwrap();
        assert_eq!(r.memory_ceilings.len(), 2);
        assert_eq!(r.compute_ceilings[0].ops_per_sec, 1.2e11);
    }

    #[test]
    fn empty_ceiling_lists_are_fine() {
        let r = parse_roofline(br#"{"machine":"box"}"#).unwrap();
        assert!(r.compute_ceilings.is_empty() && r.memory_ceilings.is_empty());
    }

    #[test]
    fn rejects_nonpositive_rates() {
        assert!(parse_roofline(br#"{"machine":"m","compute_ceilings":[{"name":"x","ops_per_sec":0}]}"#).is_err());
        assert!(parse_roofline(b"[]").is_err());
    }
}
