//! Selected feature index sets and their small text file.
//!
//! ```text
//! format_version=1
//! count=3
//! indices=0,5,11
//! names=packet_length,ip_ds_field,ip_ttl
//! ```
//!
//! `names` is informational; readers trust `indices`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::{ATTRIBUTE_COUNT, ATTRIBUTE_NAMES};
use crate::error::{Error, Result};

pub const FEATURE_SET_VERSION: u32 = 1;

/// Non-empty, strictly ascending subset of the 39 attribute positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FeatureSet(Vec<usize>);

impl FeatureSet {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Config("feature set must not be empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ATTRIBUTE_COUNT) {
            return Err(Error::Config(format!(
                "feature index {bad} out of range 0..{ATTRIBUTE_COUNT}"
            )));
        }
        Ok(FeatureSet(indices))
    }

    pub fn all() -> Self {
        FeatureSet((0..ATTRIBUTE_COUNT).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, f: usize) -> bool {
        self.0.binary_search(&f).is_ok()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|&i| ATTRIBUTE_NAMES[i]).collect()
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        format!(
            "format_version={FEATURE_SET_VERSION}\ncount={}\nindices={}\nnames={}\n",
            self.len(),
            join(self.0.iter().map(|i| i.to_string()).collect()),
            join(self.names().into_iter().map(String::from).collect()),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut version = None;
        let mut count = None;
        let mut indices = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("feature set", format!("bad line `{line}`")))?;
            let parse_err = |e: std::num::ParseIntError| Error::format("feature set", e.to_string());
            match key.trim() {
                "format_version" => version = Some(value.trim().parse::<u32>().map_err(parse_err)?),
                "count" => count = Some(value.trim().parse::<usize>().map_err(parse_err)?),
                "indices" => {
                    indices = Some(
                        value
                            .split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| s.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(parse_err)?,
                    )
                }
                _ => {}
            }
        }
        let version = version.ok_or_else(|| Error::format("feature set", "missing format_version"))?;
        if version != FEATURE_SET_VERSION {
            return Err(Error::FormatVersion {
                what: "feature set",
                found: version,
                expected: FEATURE_SET_VERSION,
            });
        }
        let indices = indices.ok_or_else(|| Error::format("feature set", "missing indices"))?;
        if count.is_some_and(|c| c != indices.len()) {
            return Err(Error::format("feature set", "count does not match indices"));
        }
        FeatureSet::new(indices)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl TryFrom<Vec<usize>> for FeatureSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        FeatureSet::new(v)
    }
}

impl From<FeatureSet> for Vec<usize> {
    fn from(f: FeatureSet) -> Self {
        f.0
    }
}
