use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataman::{encode_metadata, DatasetManifest, Label, Modality, Split};
use crate::error::{bail_input, Error, Result};

/// One unimodal prediction; the on-disk row of the prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub eye_id: String,
    pub modality: Modality,
    pub split: Split,
    pub p_neg: f64,
    pub label: Label,
}

/// Everything the fusion head sees for one eye.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub eye_id: String,
    pub split: Split,
    /// P(AmyloidPET negative) per modality.
    pub p_neg: BTreeMap<Modality, f64>,
    /// Encoded (age, sex) of the eye's patient, when known.
    pub metadata: Option<[f64; 2]>,
    pub label: Label,
}

impl PredictionRecord {
    pub fn p_pos(&self, m: Modality) -> Option<f64> {
        self.p_neg.get(&m).map(|p| 1.0 - p)
    }
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(f);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Groups prediction rows by eye and attaches encoded metadata from the
/// manifest. Every eye must have a score for each of `modalities`.
pub fn assemble_records(
    rows: &[PredictionRow],
    manifest: &DatasetManifest,
    modalities: &[Modality],
) -> Result<Vec<PredictionRecord>> {
    let patient_of: BTreeMap<&str, &str> = manifest
        .records
        .iter()
        .map(|r| (r.eye_id.as_str(), r.patient_id.as_str()))
        .collect();
    let mut eyes: BTreeMap<&str, PredictionRecord> = BTreeMap::new();
    for row in rows {
        let rec = eyes.entry(row.eye_id.as_str()).or_insert_with(|| PredictionRecord {
            eye_id: row.eye_id.clone(),
            split: row.split,
            p_neg: BTreeMap::new(),
            metadata: patient_of
                .get(row.eye_id.as_str())
                .and_then(|p| manifest.metadata.get(*p))
                .map(encode_metadata),
            label: row.label,
        });
        if rec.label != row.label || rec.split != row.split {
            bail_input!("eye {} has inconsistent label or split across modalities", row.eye_id);
        }
        if rec.p_neg.insert(row.modality, row.p_neg).is_some() {
            bail_input!("eye {} has two {} predictions", row.eye_id, row.modality);
        }
    }
    for rec in eyes.values() {
        if let Some(m) = modalities.iter().find(|m| !rec.p_neg.contains_key(m)) {
            return Err(Error::Missing(format!("eye {} has no {m} prediction", rec.eye_id)));
        }
    }
    Ok(eyes.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(eye: &str, m: Modality, p: f64) -> PredictionRow {
        PredictionRow {
            eye_id: eye.into(),
            modality: m,
            split: Split::Val,
            p_neg: p,
            label: Label::Pos,
        }
    }

    #[test]
    fn round_trip_and_assembly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let mut rows: Vec<PredictionRow> = Modality::PIPELINE.iter().map(|&m| row("E1", m, 0.25)).collect();
        write_predictions(&rows, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), rows);
        let manifest = DatasetManifest::default();
        let recs = assemble_records(&rows, &manifest, &Modality::PIPELINE).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].p_pos(Modality::Faf), Some(0.75));
        rows.pop();
        rows.push(row("E2", Modality::Faf, 0.5));
        assert!(matches!(assemble_records(&rows, &manifest, &Modality::PIPELINE), Err(Error::Missing(_))));
    }
}
