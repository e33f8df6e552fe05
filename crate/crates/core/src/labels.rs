//! Utterance label tables (`labels.csv` or a corpus manifest).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Manifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    #[serde(default)]
    pub channel_id: String,
    #[serde(default)]
    pub split: String,
    #[serde(default)]
    pub gender: Option<String>,
}

/// Which label a classifier is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Speaker,
    Gender,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(Target::Speaker),
            "gender" => Ok(Target::Gender),
            _ => Err(Error::Config(format!("unknown target `{s}` (speaker|gender)"))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Speaker => "speaker",
            Target::Gender => "gender",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabelTable {
    by_utterance: BTreeMap<String, LabelRecord>,
}

impl LabelTable {
    pub fn from_records(records: impl IntoIterator<Item = LabelRecord>) -> Result<Self> {
        let mut by_utterance = BTreeMap::new();
        for r in records {
            let id = r.utterance_id.clone();
            if by_utterance.insert(id.clone(), r).is_some() {
                return Err(Error::Data(format!("duplicate utterance id {id} in labels")));
            }
        }
        Ok(LabelTable { by_utterance })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Self::from_records(m.records.iter().map(|r| LabelRecord {
            utterance_id: r.utterance_id.clone(),
            speaker_id: r.speaker_id.clone(),
            channel_id: r.channel_id.clone(),
            split: r.split.to_string(),
            gender: Some(r.gender.to_string()),
        }))
    }

    /// Reads a CSV with at least `utterance_id,speaker_id`; extra columns are ignored.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let mut records = Vec::new();
        for row in rdr.deserialize::<LabelRecord>() {
            records.push(row.map_err(|e| Error::format(path.display().to_string(), e.to_string()))?);
        }
        Self::from_records(records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.by_utterance.values() {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        crate::binio::write_file(path, &bytes)
    }

    pub fn get(&self, utterance_id: &str) -> Result<&LabelRecord> {
        self.by_utterance
            .get(utterance_id)
            .ok_or_else(|| Error::Data(format!("no label for utterance {utterance_id}")))
    }

    pub fn target(&self, utterance_id: &str, target: Target) -> Result<String> {
        let r = self.get(utterance_id)?;
        match target {
            Target::Speaker => Ok(r.speaker_id.clone()),
            Target::Gender => r
                .gender
                .clone()
                .filter(|g| !g.is_empty())
                .ok_or_else(|| Error::Data(format!("utterance {utterance_id} has no gender label"))),
        }
    }

    pub fn len(&self) -> usize {
        self.by_utterance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_utterance.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &LabelRecord> {
        self.by_utterance.values()
    }
}
