//! Versioned, checksummed JSON bundles of a configuration and its fits.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_json, RunConfig};
use crate::engine::{Elicit, FitRecord, RunFailure};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct Payload<'a> {
    format_version: u32,
    config: &'a RunConfig,
    records: &'a [FitRecord],
    failures: &'a [RunFailure],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedBundle {
    pub format_version: u32,
    pub config: RunConfig,
    pub records: Vec<FitRecord>,
    pub failures: Vec<RunFailure>,
    /// Hex SHA-256 of the compact JSON of all other fields, in declaration order.
    pub checksum: String,
}

fn checksum(version: u32, config: &RunConfig, records: &[FitRecord], failures: &[RunFailure]) -> Result<String> {
    let bytes = serde_json::to_vec(&Payload {
        format_version: version,
        config,
        records,
        failures,
    })
    .map_err(|e| Error::config("bundle", e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl SavedBundle {
    pub fn from_elicit(e: &Elicit) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            checksum: checksum(FORMAT_VERSION, &e.config, &e.records, &e.failures)?,
            config: e.config.clone(),
            records: e.records.clone(),
            failures: e.failures.clone(),
        })
    }

    pub fn into_elicit(self) -> Elicit {
        Elicit {
            config: self.config,
            records: self.records,
            failures: self.failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::config("bundle", e.to_string()))
    }

    /// Parses a bundle, refusing other format versions and corrupted content.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let raw: serde_json::Value = parse_json(text, origin)?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64);
        match found {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::FormatVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(Error::config("format_version", format!("{origin} has no format version"))),
        }
        let bundle: SavedBundle = parse_json(text, origin)?;
        let computed = checksum(bundle.format_version, &bundle.config, &bundle.records, &bundle.failures)?;
        if computed != bundle.checksum {
            return Err(Error::Checksum {
                stored: bundle.checksum,
                computed,
            });
        }
        Ok(bundle)
    }
}

pub fn save(elicit: &Elicit, path: &Path) -> Result<()> {
    let text = SavedBundle::from_elicit(elicit)?.to_json()?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Elicit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(SavedBundle::from_json(&text, &path.display().to_string())?.into_elicit())
}
