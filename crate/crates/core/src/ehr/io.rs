//! JSON-lines cohort files.
//!
//! Line 1 is a header `{"dx_codes": [...], "tx_codes": [...]}`; every other
//! line is one patient
//! `{"id": "...", "hf_label": 0|1|null, "visits": [[{"dx": "c", "tx": ["c"]}]]}`.
//! Blank lines are ignored. Indices follow header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_patient, CodeVocab, Cohort, DxObject, Patient, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dx_codes: Vec<String>,
    tx_codes: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    id: String,
    hf_label: Option<u8>,
    visits: Vec<Vec<ObjectLine>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    dx: String,
    #[serde(default)]
    tx: Vec<String>,
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_cohort(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_cohort(reader: impl Read) -> Result<Cohort> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let (vocab, provenance) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::Parse {
                line: 1,
                message: "missing header line".into(),
            });
        };
        let line = line.map_err(|e| Error::io("<cohort>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad header: {e}"),
        })?;
        let vocab = CodeVocab::new(header.dx_codes, header.tx_codes).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        break (vocab, header.provenance);
    };

    let mut patients = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<cohort>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: PatientLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let patient = resolve_patient(raw, &vocab, line_no)?;
        validate_patient(&patient, &vocab).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        patients.push(patient);
    }
    Ok(Cohort {
        vocab,
        patients,
        provenance,
    })
}

fn resolve_patient(raw: PatientLine, vocab: &CodeVocab, line: usize) -> Result<Patient> {
    let hf_label = match raw.hf_label {
        None => None,
        Some(0) => Some(false),
        Some(1) => Some(true),
        Some(other) => {
            return Err(Error::Parse {
                line,
                message: format!("hf_label must be 0, 1 or null, got {other}"),
            })
        }
    };
    let mut visits = Vec::with_capacity(raw.visits.len());
    for objects in raw.visits {
        let mut resolved = Vec::with_capacity(objects.len());
        for obj in objects {
            let dx = vocab.dx_index(&obj.dx).ok_or_else(|| Error::UnknownCode {
                line,
                kind: "diagnosis",
                code: obj.dx.clone(),
            })?;
            let tx = obj
                .tx
                .iter()
                .map(|c| {
                    vocab.tx_index(c).ok_or_else(|| Error::UnknownCode {
                        line,
                        kind: "treatment",
                        code: c.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            resolved.push(DxObject::new(dx, tx));
        }
        visits.push(Visit::new(resolved));
    }
    Ok(Patient {
        id: raw.id,
        visits,
        hf_label,
    })
}

pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serialize_cohort(cohort, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn serialize_cohort(cohort: &Cohort, mut w: impl Write) -> Result<()> {
    cohort.validate()?;
    let vocab = &cohort.vocab;
    let header = Header {
        dx_codes: vocab.dx_codes().to_vec(),
        tx_codes: vocab.tx_codes().to_vec(),
        provenance: cohort.provenance.clone(),
    };
    let io = |e| Error::io("<cohort>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for p in &cohort.patients {
        let line = PatientLine {
            id: p.id.clone(),
            hf_label: p.hf_label.map(u8::from),
            visits: p
                .visits
                .iter()
                .map(|v| {
                    v.objects
                        .iter()
                        .map(|o| ObjectLine {
                            dx: vocab.dx_code(o.dx).to_string(),
                            tx: o.tx.iter().map(|&m| vocab.tx_code(m).to_string()).collect(),
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        r#"{"dx_codes":["fever","cough"],"tx_codes":["acetaminophen","benzonatate"]}"#;

    fn small_cohort() -> Cohort {
        let vocab = CodeVocab::synthetic(3, 2).unwrap();
        let mk = |id: &str, label, visits| Patient {
            id: id.into(),
            visits,
            hf_label: label,
        };
        Cohort {
            vocab,
            patients: vec![
                mk(
                    "a",
                    Some(true),
                    vec![Visit::new(vec![
                        DxObject::new(0, vec![1]),
                        DxObject::new(2, vec![]),
                    ])],
                ),
                mk(
                    "b",
                    Some(false),
                    vec![Visit::new(vec![DxObject::new(1, vec![0, 1])])],
                ),
                mk(
                    "c",
                    None,
                    vec![
                        Visit::new(vec![DxObject::new(2, vec![0])]),
                        Visit::new(vec![DxObject::new(0, vec![0]), DxObject::new(1, vec![0])]),
                    ],
                ),
            ],
            provenance: "unit".into(),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cohort = small_cohort();
        let mut buf = Vec::new();
        serialize_cohort(&cohort, &mut buf).unwrap();
        let back = parse_cohort(buf.as_slice()).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn unknown_code_names_code_and_line() {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            r#"{"id":"p1","hf_label":0,"visits":[[{"dx":"fever","tx":[]}]]}"#,
            r#"{"id":"p2","hf_label":1,"visits":[[{"dx":"asthma","tx":[]}]]}"#
        );
        let err = parse_cohort(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("asthma"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn empty_visits_rejected() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"id":"p1","hf_label":null,"visits":[]}"#
        );
        let err = parse_cohort(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("no visits"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{HEADER}\n{{not json\n");
        match parse_cohort(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
