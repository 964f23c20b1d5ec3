//! Admissions ingestion, cohort exclusions, 30-day readmission labels, and
//! patient-level dataset splitting.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::tensor::seeded_rng;
use crate::text::Document;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdmissionType {
    Emergency,
    Urgent,
    Elective,
    Newborn,
}

impl AdmissionType {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EMERGENCY" => Some(AdmissionType::Emergency),
            "URGENT" => Some(AdmissionType::Urgent),
            "ELECTIVE" => Some(AdmissionType::Elective),
            "NEWBORN" => Some(AdmissionType::Newborn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmissionRecord {
    pub patient_id: String,
    pub admit_time: NaiveDateTime,
    pub discharge_time: NaiveDateTime,
    pub admission_type: AdmissionType,
    pub died_in_hospital: bool,
    pub note_text: String,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
        .or_else(|| {
            chrono::DateTime::parse_from_rfc3339(s)
                .ok()
                .map(|dt| dt.naive_utc())
        })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Load an admissions CSV with header
/// `patient_id,admit_time,discharge_time,admission_type,died_in_hospital,note_text`
/// and ISO-8601 timestamps. Errors carry the 1-based file line number.
pub fn load_admissions(path: &Path) -> Result<Vec<AdmissionRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;

    let headers = reader.headers().map_err(csv_err)?.clone();
    let expected = ["patient_id", "admit_time", "discharge_time", "admission_type", "died_in_hospital", "note_text"];
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {expected:?}, got {actual:?}"),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after header
        let row = row.map_err(|e| Error::Parse { line, msg: format!("malformed row: {e}") })?;
        if row.len() != expected.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", expected.len(), row.len()),
            });
        }
        let admit_time = parse_timestamp(&row[1])
            .ok_or_else(|| Error::Parse { line, msg: format!("bad admit_time {:?}", &row[1]) })?;
        let discharge_time = parse_timestamp(&row[2])
            .ok_or_else(|| Error::Parse { line, msg: format!("bad discharge_time {:?}", &row[2]) })?;
        let admission_type = AdmissionType::parse(&row[3]).ok_or_else(|| Error::Parse {
            line,
            msg: format!(
                "unknown admission_type {:?} (expected EMERGENCY|URGENT|ELECTIVE|NEWBORN)",
                &row[3]
            ),
        })?;
        let died_in_hospital = parse_bool(&row[4])
            .ok_or_else(|| Error::Parse { line, msg: format!("bad died_in_hospital {:?}", &row[4]) })?;
        if discharge_time < admit_time {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "discharge_time {} precedes admit_time {} for patient {}",
                    discharge_time, admit_time, &row[0]
                ),
            });
        }
        records.push(AdmissionRecord {
            patient_id: row[0].to_string(),
            admit_time,
            discharge_time,
            admission_type,
            died_in_hospital,
            note_text: row[5].to_string(),
        });
    }
    Ok(records)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse { line: 1, msg: format!("csv error: {e}") }
}

/// Where the readmission window is anchored on the index admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowAnchor {
    /// window runs discharge(A) -> admit(B) (default)
    Discharge,
    /// window runs admit(A) -> admit(B)
    Admit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortConfig {
    pub window_days: i64,
    pub anchor: WindowAnchor,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { window_days: 30, anchor: WindowAnchor::Discharge }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortCounts {
    pub n_patients: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_patients: usize,
    pub n_admissions_in: usize,
    pub n_excluded_death: usize,
    pub n_excluded_newborn: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Labeled documents plus per-document provenance (source admission id).
#[derive(Debug, Clone, Default)]
pub struct CohortDataset {
    pub documents: Vec<Document>,
    pub provenance: Vec<String>,
    pub counts: CohortCounts,
}

impl CohortDataset {
    pub fn from_documents(documents: Vec<Document>) -> Self {
        let provenance = documents.iter().map(|d| d.doc_id.clone()).collect();
        let counts = counts_of(&documents);
        CohortDataset { documents, provenance, counts }
    }
}

fn counts_of(docs: &[Document]) -> CohortCounts {
    let n_positive = docs.iter().filter(|d| d.label == 1).count();
    let mut patients: Vec<&str> = docs.iter().map(|d| d.patient_key()).collect();
    patients.sort_unstable();
    patients.dedup();
    CohortCounts { n_patients: patients.len(), n_positive, n_negative: docs.len() - n_positive }
}

/// Apply cohort rules and label each surviving admission.
///
/// Per admission A (dropped entirely when NEWBORN or died_in_hospital):
/// walk the patient's later admissions in time order, skipping ELECTIVE ones
/// (scheduled visits neither count as readmission nor close the search);
/// the first non-elective B yields label 1 iff its admit time falls within
/// `window_days` of the anchor on A. A later admission counts as the
/// readmission event even if the patient died during it: the exclusions drop
/// rows from the cohort, not events from the timeline.
pub fn build_cohort(
    records: &[AdmissionRecord],
    cfg: &CohortConfig,
) -> Result<(CohortDataset, CohortSummary)> {
    let mut summary = CohortSummary { n_admissions_in: records.len(), ..Default::default() };

    // Group record indices by patient, ordered by admit time.
    let mut by_patient: Vec<(String, Vec<usize>)> = Vec::new();
    {
        use std::collections::HashMap;
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            map.entry(r.patient_id.as_str()).or_default().push(i);
        }
        let mut keys: Vec<&str> = map.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let mut idxs = map.remove(k).unwrap();
            idxs.sort_by_key(|&i| (records[i].admit_time, records[i].discharge_time));
            by_patient.push((k.to_string(), idxs));
        }
    }

    let window = chrono::Duration::days(cfg.window_days);
    let mut documents = Vec::new();
    let mut provenance = Vec::new();

    for (patient, idxs) in &by_patient {
        for (ord, &i) in idxs.iter().enumerate() {
            let a = &records[i];
            if a.admission_type == AdmissionType::Newborn {
                summary.n_excluded_newborn += 1;
                continue;
            }
            if a.died_in_hospital {
                summary.n_excluded_death += 1;
                continue;
            }
            let anchor_time = match cfg.anchor {
                WindowAnchor::Discharge => a.discharge_time,
                WindowAnchor::Admit => a.admit_time,
            };
            let mut label = 0u8;
            for &j in &idxs[ord + 1..] {
                let b = &records[j];
                if b.admission_type == AdmissionType::Elective {
                    continue;
                }
                if b.admit_time - anchor_time <= window {
                    label = 1;
                }
                break;
            }
            let admission_id = format!("{patient}:{ord}");
            let doc = Document::raw(admission_id.clone(), a.note_text.clone(), label);
            documents.push(doc);
            provenance.push(admission_id);
        }
    }

    let counts = counts_of(&documents);
    summary.n_patients = counts.n_patients;
    summary.n_positive = counts.n_positive;
    summary.n_negative = counts.n_negative;
    Ok((CohortDataset { documents, provenance, counts }, summary))
}

/// Patient-level split: all of a patient's admissions land in one split.
/// Counts per split are floor(ratio * n_patients) with the remainder going
/// to the last split; deterministic in `seed`.
pub fn split_dataset(
    dataset: &CohortDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(CohortDataset, CohortDataset, CohortDataset)> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va >= 0.0 && te >= 0.0) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let mut patients: Vec<String> = dataset
        .documents
        .iter()
        .map(|d| d.patient_key().to_string())
        .collect();
    patients.sort_unstable();
    patients.dedup();
    let n_splits = 1 + usize::from(va > 0.0) + usize::from(te > 0.0);
    if patients.len() < n_splits {
        return Err(Error::contract(format!(
            "need at least {n_splits} patients to split, got {}",
            patients.len()
        )));
    }
    let mut rng = seeded_rng(seed, 0x73706c74); // "splt"
    patients.shuffle(&mut rng);

    let n = patients.len();
    let n_train = ((tr * n as f64).floor() as usize).max(1);
    let n_val = (va * n as f64).floor() as usize;
    let n_val = if va > 0.0 { n_val.max(1) } else { 0 };
    let mut assignment = std::collections::HashMap::new();
    for (i, p) in patients.iter().enumerate() {
        let split = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        assignment.insert(p.clone(), split);
    }

    let mut parts: Vec<(Vec<Document>, Vec<String>)> =
        vec![Default::default(), Default::default(), Default::default()];
    for (doc, prov) in dataset.documents.iter().zip(&dataset.provenance) {
        let split = assignment[doc.patient_key()];
        parts[split].0.push(doc.clone());
        parts[split].1.push(prov.clone());
    }
    let mut out = parts.into_iter().map(|(docs, prov)| {
        let counts = counts_of(&docs);
        CohortDataset { documents: docs, provenance: prov, counts }
    });
    Ok((out.next().unwrap(), out.next().unwrap(), out.next().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn rec(
        patient: &str,
        admit: &str,
        discharge: &str,
        ty: AdmissionType,
        died: bool,
    ) -> AdmissionRecord {
        AdmissionRecord {
            patient_id: patient.to_string(),
            admit_time: parse_timestamp(admit).unwrap(),
            discharge_time: parse_timestamp(discharge).unwrap(),
            admission_type: ty,
            died_in_hospital: died,
            note_text: format!("note for {patient}"),
        }
    }

    fn labels_of(ds: &CohortDataset) -> Vec<(String, u8)> {
        ds.documents.iter().map(|d| (d.doc_id.clone(), d.label)).collect()
    }

    #[test]
    fn day_29_is_positive_day_31_is_negative() {
        let records = vec![
            rec("p1", "2023-01-01T00:00:00", "2023-01-05T00:00:00", AdmissionType::Emergency, false),
            rec("p1", "2023-02-03T00:00:00", "2023-02-04T00:00:00", AdmissionType::Emergency, false), // +29d
            rec("p2", "2023-01-01T00:00:00", "2023-01-05T00:00:00", AdmissionType::Emergency, false),
            rec("p2", "2023-02-05T00:00:00", "2023-02-06T00:00:00", AdmissionType::Urgent, false), // +31d
        ];
        let (ds, _) = build_cohort(&records, &CohortConfig::default()).unwrap();
        let labels = labels_of(&ds);
        assert_eq!(labels[0], ("p1:0".to_string(), 1));
        assert_eq!(labels[2], ("p2:0".to_string(), 0));
    }

    #[test]
    fn exact_30_day_boundary_is_positive() {
        let records = vec![
            rec("p", "2023-01-01T00:00:00", "2023-01-05T12:00:00", AdmissionType::Urgent, false),
            rec("p", "2023-02-04T12:00:00", "2023-02-05T00:00:00", AdmissionType::Emergency, false),
        ];
        let (ds, _) = build_cohort(&records, &CohortConfig::default()).unwrap();
        assert_eq!(ds.documents[0].label, 1);
    }

    #[test]
    fn death_and_newborn_rows_dropped() {
        let records = vec![
            rec("p", "2023-01-01T00:00:00", "2023-01-02T00:00:00", AdmissionType::Emergency, true),
            rec("q", "2023-01-01T00:00:00", "2023-01-02T00:00:00", AdmissionType::Newborn, false),
            rec("r", "2023-01-01T00:00:00", "2023-01-02T00:00:00", AdmissionType::Urgent, false),
        ];
        let (ds, summary) = build_cohort(&records, &CohortConfig::default()).unwrap();
        assert_eq!(ds.documents.len(), 1);
        assert_eq!(ds.documents[0].doc_id, "r:0");
        assert_eq!(summary.n_excluded_death, 1);
        assert_eq!(summary.n_excluded_newborn, 1);
        assert!(ds.provenance.iter().all(|p| p.starts_with("r:")));
    }

    #[test]
    fn elective_next_admission_is_skipped_not_terminating() {
        // elective at +10d is skipped; emergency at +20d labels positive
        let records = vec![
            rec("p", "2023-01-01T00:00:00", "2023-01-02T00:00:00", AdmissionType::Emergency, false),
            rec("p", "2023-01-12T00:00:00", "2023-01-13T00:00:00", AdmissionType::Elective, false),
            rec("p", "2023-01-22T00:00:00", "2023-01-23T00:00:00", AdmissionType::Emergency, false),
        ];
        let (ds, _) = build_cohort(&records, &CohortConfig::default()).unwrap();
        assert_eq!(ds.documents[0].label, 1, "elective must not terminate the search");
        // the elective row itself is still a cohort member with its own label
        assert_eq!(ds.documents[1].doc_id, "p:1");
        assert_eq!(ds.documents[1].label, 1); // emergency 9 days after its discharge
    }

    #[test]
    fn elective_only_future_means_negative() {
        let records = vec![
            rec("p", "2023-01-01T00:00:00", "2023-01-02T00:00:00", AdmissionType::Emergency, false),
            rec("p", "2023-01-05T00:00:00", "2023-01-06T00:00:00", AdmissionType::Elective, false),
        ];
        let (ds, _) = build_cohort(&records, &CohortConfig::default()).unwrap();
        assert_eq!(ds.documents[0].label, 0);
    }

    #[test]
    fn idempotent_on_survivors() {
        let records = vec![
            rec("p", "2023-01-01T00:00:00", "2023-01-02T00:00:00", AdmissionType::Emergency, false),
            rec("p", "2023-01-20T00:00:00", "2023-01-21T00:00:00", AdmissionType::Urgent, false),
            rec("q", "2023-03-01T00:00:00", "2023-03-02T00:00:00", AdmissionType::Newborn, false),
            rec("r", "2023-04-01T00:00:00", "2023-04-02T00:00:00", AdmissionType::Emergency, true),
        ];
        let (first, _) = build_cohort(&records, &CohortConfig::default()).unwrap();
        // keep only survivor records and rebuild: labels must be identical
        let survivors: Vec<AdmissionRecord> = records
            .iter()
            .filter(|r| !r.died_in_hospital && r.admission_type != AdmissionType::Newborn)
            .cloned()
            .collect();
        let (second, _) = build_cohort(&survivors, &CohortConfig::default()).unwrap();
        assert_eq!(labels_of(&first), labels_of(&second));
    }

    #[test]
    fn csv_loading_parses_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adm.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "patient_id,admit_time,discharge_time,admission_type,died_in_hospital,note_text").unwrap();
        writeln!(f, "p1,2023-01-01T08:00:00,2023-01-03T10:30:00,EMERGENCY,false,chest pain and dyspnea").unwrap();
        writeln!(f, "p2,2023-02-01T00:00:00,2023-02-02T00:00:00,ELECTIVE,true,planned procedure").unwrap();
        writeln!(f, "p3,2023-03-05T12:00:00,2023-03-06T00:00:00,NEWBORN,false,newborn note").unwrap();
        drop(f);
        let records = load_admissions(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].patient_id, "p1");
        assert_eq!(records[0].admission_type, AdmissionType::Emergency);
        assert!(!records[0].died_in_hospital);
        assert_eq!(records[0].note_text, "chest pain and dyspnea");
        assert!(records[1].died_in_hospital);
        assert_eq!(records[2].admission_type, AdmissionType::Newborn);
    }

    #[test]
    fn discharge_before_admit_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adm.csv");
        std::fs::write(
            &path,
            "patient_id,admit_time,discharge_time,admission_type,died_in_hospital,note_text\n\
             p1,2023-01-05T00:00:00,2023-01-01T00:00:00,EMERGENCY,false,backwards\n",
        )
        .unwrap();
        match load_admissions(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("precedes"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_admission_type_enumerates_valid_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adm.csv");
        std::fs::write(
            &path,
            "patient_id,admit_time,discharge_time,admission_type,died_in_hospital,note_text\n\
             p1,2023-01-01T00:00:00,2023-01-02T00:00:00,WALKIN,false,note\n",
        )
        .unwrap();
        match load_admissions(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("EMERGENCY|URGENT|ELECTIVE|NEWBORN"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_patient_level_and_exact() {
        let mut docs = Vec::new();
        for p in 0..10 {
            let n_adm = if p == 3 { 3 } else { 1 };
            for a in 0..n_adm {
                docs.push(Document::raw(format!("pat{p}:{a}"), "text here", (p % 2) as u8));
            }
        }
        let ds = CohortDataset::from_documents(docs);
        let (tr, va, te) = split_dataset(&ds, (0.7, 0.1, 0.2), 0).unwrap();
        assert_eq!(tr.counts.n_patients, 7);
        assert_eq!(va.counts.n_patients, 1);
        assert_eq!(te.counts.n_patients, 2);
        // all 3 admissions of pat3 in one split
        let homes: Vec<bool> = [&tr, &va, &te]
            .iter()
            .map(|d| d.documents.iter().any(|doc| doc.patient_key() == "pat3"))
            .collect();
        assert_eq!(homes.iter().filter(|&&h| h).count(), 1);
        // disjoint and exhaustive
        let total = tr.documents.len() + va.documents.len() + te.documents.len();
        assert_eq!(total, ds.documents.len());
    }

    #[test]
    fn split_deterministic() {
        let docs: Vec<Document> =
            (0..20).map(|i| Document::raw(format!("p{i}"), "text", (i % 2) as u8)).collect();
        let ds = CohortDataset::from_documents(docs);
        let (a1, b1, c1) = split_dataset(&ds, (0.7, 0.1, 0.2), 9).unwrap();
        let (a2, b2, c2) = split_dataset(&ds, (0.7, 0.1, 0.2), 9).unwrap();
        for (x, y) in [(&a1, &a2), (&b1, &b2), (&c1, &c2)] {
            let ids1: Vec<&str> = x.documents.iter().map(|d| d.doc_id.as_str()).collect();
            let ids2: Vec<&str> = y.documents.iter().map(|d| d.doc_id.as_str()).collect();
            assert_eq!(ids1, ids2);
        }
    }

    #[test]
    fn split_rejects_too_few_patients() {
        let ds = CohortDataset::from_documents(vec![Document::raw("only", "text", 0)]);
        assert!(split_dataset(&ds, (0.7, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let docs: Vec<Document> =
            (0..5).map(|i| Document::raw(format!("p{i}"), "t", 0)).collect();
        let ds = CohortDataset::from_documents(docs);
        assert!(split_dataset(&ds, (0.6, 0.1, 0.2), 0).is_err());
    }
}
