use serde::{Deserialize, Serialize};

use crate::error::{DgrError, Result};

/// Named switch settings; `dgr` is the full model and `ga-reader` the
/// all-off baseline.
pub const PRESETS: [&str; 6] = ["dgr", "no-a", "no-c", "no-ab", "no-ac", "ga-reader"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderConfig {
    /// Number of hops after the initial read.
    pub hops: usize,
    /// Gate the query with document attention.
    pub flag_a: bool,
    /// Feed the gated query into the next query read.
    pub flag_b: bool,
    /// Start each query read from the previous final states.
    pub flag_c: bool,
    /// Append the query-evidence bit to the last document read.
    pub qe_comm: bool,
    /// Width of a bidirectional encoding (half per direction).
    pub hidden: usize,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            hops: 2,
            flag_a: true,
            flag_b: true,
            flag_c: true,
            qe_comm: false,
            hidden: 128,
        }
    }
}

impl ReaderConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (a, b, c) = match name {
            "dgr" => (true, true, true),
            "no-a" => (false, true, true),
            "no-c" => (true, true, false),
            "no-ab" => (false, false, true),
            "no-ac" => (false, true, false),
            "ga-reader" | "ga" => (false, false, false),
            _ => {
                return Err(DgrError::config(
                    "model",
                    format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")),
                ))
            }
        };
        Ok(ReaderConfig {
            flag_a: a,
            flag_b: b,
            flag_c: c,
            ..Default::default()
        })
    }

    /// Preset name matching the switch settings, if any.
    pub fn preset_name(&self) -> Option<&'static str> {
        PRESETS
            .iter()
            .copied()
            .find(|p| matches!(Self::preset(p), Ok(c) if (c.flag_a, c.flag_b, c.flag_c) == (self.flag_a, self.flag_b, self.flag_c)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 {
            return Err(DgrError::config("hops", "must be at least 1"));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(DgrError::config(
                "hidden",
                format!("{} must be a positive even number", self.hidden),
            ));
        }
        if self.flag_a && !self.flag_b {
            return Err(DgrError::config(
                "flag_a",
                "document-gated query reading requires dependent query reading (flag_b)",
            ));
        }
        Ok(())
    }
}
