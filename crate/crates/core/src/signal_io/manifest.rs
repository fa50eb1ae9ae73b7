use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!(
                "unknown split {other:?} (expected train, validation or test)"
            ))),
        }
    }
}

/// One manifest row. `split` is `None` until assigned; `cue` is the
/// optional annotation column written for synthetic data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub patient_id: String,
    pub split: Option<Split>,
    pub cue: Option<String>,
}

impl ManifestEntry {
    /// Relative paths are taken relative to `base` (the manifest's folder).
    pub fn resolve(&self, base: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            base.join(&self.path)
        }
    }
}

const HEADER: [&str; 4] = ["path", "label", "patient_id", "split"];

fn split_name(s: Option<Split>) -> &'static str {
    s.map_or("", Split::as_str)
}

/// Fails on the first patient whose rows carry different split values.
fn check_leakage(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen: HashMap<&str, Option<Split>> = HashMap::new();
    for e in entries {
        match seen.get(e.patient_id.as_str()) {
            Some(&prev) if prev != e.split => {
                return Err(Error::Leakage {
                    patient_id: e.patient_id.clone(),
                    first: split_name(prev).to_string(),
                    second: split_name(e.split).to_string(),
                });
            }
            Some(_) => {}
            None => {
                seen.insert(&e.patient_id, e.split);
            }
        }
    }
    Ok(())
}

/// Parses manifest CSV text; `origin` labels error locations.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse {
        location: origin.to_string(),
        reason: e.to_string(),
    })?;
    let cols: Vec<String> = header.iter().map(|c| c.trim().to_string()).collect();
    let has_cue = cols.len() == 5 && cols[4] == "cue";
    if cols.len() < 4 || cols[..4].iter().zip(HEADER).any(|(a, b)| a != b) || (cols.len() > 4 && !has_cue) {
        return Err(Error::Parse {
            location: format!("{origin}:1"),
            reason: format!("header must be `path,label,patient_id,split[,cue]`, got {cols:?}"),
        });
    }
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let location = format!("{origin}:{line}");
        let rec = rec.map_err(|e| Error::Parse {
            location: location.clone(),
            reason: e.to_string(),
        })?;
        if rec.len() != cols.len() {
            return Err(Error::Parse {
                location,
                reason: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        let label = match rec[1].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    location,
                    reason: format!("unknown label token {other:?} (expected 0 or 1)"),
                })
            }
        };
        let split = match rec[3].trim() {
            "" => None,
            s => Some(s.parse::<Split>().map_err(|e| Error::Parse {
                location: location.clone(),
                reason: e.to_string(),
            })?),
        };
        let patient_id = rec[2].trim().to_string();
        if patient_id.is_empty() {
            return Err(Error::Parse {
                location,
                reason: "empty patient_id".into(),
            });
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(rec[0].trim()),
            label,
            patient_id,
            split,
            cue: has_cue.then(|| rec[4].trim().to_string()).filter(|c| !c.is_empty()),
        });
    }
    check_leakage(&entries)?;
    Ok(entries)
}

/// Loads a manifest, rejecting any patient that appears in two splits.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Writes the four-column manifest, plus the `cue` column when any entry
/// carries one.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    check_leakage(entries)?;
    let with_cue = entries.iter().any(|e| e.cue.is_some());
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse {
        location: path.display().to_string(),
        reason: e.to_string(),
    };
    if with_cue {
        w.write_record(HEADER.iter().chain(&["cue"])).map_err(csv_err)?;
    } else {
        w.write_record(HEADER).map_err(csv_err)?;
    }
    for e in entries {
        let label = e.label.to_string();
        let p = e.path.to_string_lossy();
        let mut row = vec![p.as_ref(), label.as_str(), e.patient_id.as_str(), split_name(e.split)];
        if with_cue {
            row.push(e.cue.as_deref().unwrap_or(""));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        location: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shuffles patients (not recordings) with a seeded generator and sends
/// the first `round(val_fraction * n_patients)` to validation, the rest to
/// train. Existing split values are overwritten.
pub fn split_by_patient(
    entries: &[ManifestEntry],
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "val_fraction {val_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut patients: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for e in entries {
        index.entry(&e.patient_id).or_insert_with(|| {
            patients.push(&e.patient_id);
            patients.len() - 1
        });
    }
    if patients.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "patient-level split needs at least 2 patients, found {}",
            patients.len()
        )));
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * patients.len() as f64).round() as usize;
    let mut assignment = vec![Split::Train; patients.len()];
    for &p in &order[..n_val] {
        assignment[p] = Split::Validation;
    }
    Ok(entries
        .iter()
        .map(|e| ManifestEntry {
            split: Some(assignment[index[e.patient_id.as_str()]]),
            ..e.clone()
        })
        .collect())
}
