use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source-to-target drop in mean spectral efficiency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub l_source: f64,
    pub l_target: f64,
    /// `l_source - l_target`.
    pub d_sub: f64,
    /// `d_sub / l_source`.
    pub d_div: f64,
}

pub fn domain_gap(l_source: f64, l_target: f64) -> Result<DomainGap> {
    if !(l_source > 0.0 && l_source.is_finite()) || !l_target.is_finite() {
        return Err(Error::Config(format!("source efficiency must be positive, got {l_source}")));
    }
    let d_sub = l_source - l_target;
    Ok(DomainGap {
        l_source,
        l_target,
        d_sub,
        d_div: d_sub / l_source,
    })
}
