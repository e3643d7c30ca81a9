use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metadata::{MetadataRecord, Sex};
use super::split::{Split, SplitAssignment};
use super::{Label, Modality, Provenance};
use crate::error::{Error, Result};

/// Family id carried by every synthetic record.
pub const SYNTHETIC_FAMILY: &str = "__synthetic__";

const MANIFEST_FILE: &str = "manifest.tsv";
const METADATA_FILE: &str = "metadata.tsv";
const SPLITS_FILE: &str = "splits.tsv";

/// One image reference. Field order is the on-disk column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub family_id: String,
    pub patient_id: String,
    pub eye_id: String,
    pub modality: Modality,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataRow {
    patient_id: String,
    age_years: f64,
    sex: Sex,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
    pub metadata: BTreeMap<String, MetadataRecord>,
    pub splits: Option<SplitAssignment>,
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().delimiter(b'\t').from_writer(f))
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').from_reader(f))
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            ..Self::default()
        }
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn write_records(records: &[ImageRecord], path: &Path) -> Result<()> {
        let mut w = tsv_writer(path)?;
        for r in records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_records(path: &Path) -> Result<Vec<ImageRecord>> {
        let mut rd = tsv_reader(path)?;
        let mut out = Vec::new();
        for (i, row) in rd.deserialize().enumerate() {
            let rec: ImageRecord = row.map_err(|e| Error::Manifest {
                line: i + 2,
                msg: e.to_string(),
            })?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Writes `manifest.tsv`, `metadata.tsv` and, when present, `splits.tsv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        Self::write_records(&self.records, &dir.join(MANIFEST_FILE))?;
        let mut w = tsv_writer(&dir.join(METADATA_FILE))?;
        for (pid, m) in &self.metadata {
            w.serialize(MetadataRow {
                patient_id: pid.clone(),
                age_years: m.age_years,
                sex: m.sex,
            })?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        if let Some(s) = &self.splits {
            s.write(&dir.join(SPLITS_FILE))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let records = Self::read_records(&dir.join(MANIFEST_FILE))?;
        let mut metadata = BTreeMap::new();
        let meta_path = dir.join(METADATA_FILE);
        if meta_path.exists() {
            let mut rd = tsv_reader(&meta_path)?;
            for (i, row) in rd.deserialize().enumerate() {
                let row: MetadataRow = row.map_err(|e| Error::Manifest {
                    line: i + 2,
                    msg: e.to_string(),
                })?;
                metadata.insert(row.patient_id, MetadataRecord::new(row.age_years, row.sex)?);
            }
        }
        let split_path = dir.join(SPLITS_FILE);
        let splits = if split_path.exists() {
            let families = SplitAssignment::read_families(&split_path)?;
            Some(SplitAssignment::from_families(&records, families))
        } else {
            None
        };
        Ok(Self {
            base_dir: dir.to_path_buf(),
            records,
            metadata,
            splits,
        })
    }

    /// Checks identity and provenance invariants; with `check_files`, also
    /// that every referenced file exists.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut eye_patient: HashMap<&str, &str> = HashMap::new();
        let mut patient_family: HashMap<&str, &str> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            let bad = |msg: String| Error::Manifest { line, msg };
            match r.provenance {
                Provenance::Synthetic => {
                    if r.family_id != SYNTHETIC_FAMILY {
                        return Err(bad(format!(
                            "synthetic record must use family `{SYNTHETIC_FAMILY}`"
                        )));
                    }
                    if !r.label.is_known() {
                        return Err(bad("synthetic record must carry a known label".into()));
                    }
                }
                Provenance::Real => {
                    if r.family_id == SYNTHETIC_FAMILY {
                        return Err(bad("real record uses the synthetic family sentinel".into()));
                    }
                    if let Some(p) = eye_patient.insert(&r.eye_id, &r.patient_id) {
                        if p != r.patient_id {
                            return Err(bad(format!("eye {} maps to two patients", r.eye_id)));
                        }
                    }
                    if let Some(f) = patient_family.insert(&r.patient_id, &r.family_id) {
                        if f != r.family_id {
                            return Err(bad(format!(
                                "patient {} maps to two families",
                                r.patient_id
                            )));
                        }
                    }
                }
            }
            if check_files && !self.resolve(r).exists() {
                return Err(bad(format!("missing file {}", self.resolve(r).display())));
            }
        }
        Ok(())
    }

    /// Classifier collections hold at most one real image per eye per modality.
    pub fn validate_classifier_collection(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.provenance == Provenance::Real && !seen.insert((&r.eye_id, r.modality)) {
                return Err(Error::Manifest {
                    line: i + 2,
                    msg: format!("duplicate {} image for eye {}", r.modality, r.eye_id),
                });
            }
        }
        Ok(())
    }

    pub fn real_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.provenance == Provenance::Real)
    }

    pub fn modalities(&self) -> BTreeSet<Modality> {
        self.records.iter().map(|r| r.modality).collect()
    }

    pub fn split_of(&self, record: &ImageRecord) -> Option<Split> {
        self.splits
            .as_ref()
            .and_then(|s| s.families.get(&record.family_id).copied())
    }

    /// Real records of `modality` in `split`.
    pub fn select(&self, modality: Modality, split: Split) -> Vec<&ImageRecord> {
        self.real_records()
            .filter(|r| r.modality == modality && self.split_of(r) == Some(split))
            .collect()
    }
}
