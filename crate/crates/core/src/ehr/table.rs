use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    normalize_drug_name, DiagnosisEvent, EncounterRecord, LabOrderEvent, MedicationEvent,
    PatientId, Sex, DEMOGRAPHIC_COLUMNS, VITAL_COLUMNS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    Encounters,
    Medications,
    Labs,
    Diagnoses,
}

impl TableKind {
    pub const ALL: [TableKind; 4] = [
        TableKind::Encounters,
        TableKind::Medications,
        TableKind::Labs,
        TableKind::Diagnoses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TableKind::Encounters => "encounters",
            TableKind::Medications => "medications",
            TableKind::Labs => "labs",
            TableKind::Diagnoses => "diagnoses",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            TableKind::Encounters => "encounters.csv",
            TableKind::Medications => "medications.csv",
            TableKind::Labs => "labs.csv",
            TableKind::Diagnoses => "diagnoses.csv",
        }
    }

    pub fn header(self) -> Vec<&'static str> {
        match self {
            TableKind::Encounters => {
                let mut h = vec!["patient_id", "date", "systolic", "diastolic"];
                h.extend(VITAL_COLUMNS);
                h.extend(["sex", "age"]);
                h.extend(DEMOGRAPHIC_COLUMNS);
                h.extend(["diagnosis_code", "deceased"]);
                h
            }
            TableKind::Medications => vec!["patient_id", "date", "drug_name"],
            TableKind::Labs => vec!["patient_id", "date", "panel_name"],
            TableKind::Diagnoses => vec!["patient_id", "date", "code", "is_principal"],
        }
    }
}

/// A row that could not be turned into a typed event. `row` is the 1-based
/// line number in the source file (the header is line 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub row: usize,
    pub table: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable<T> {
    pub rows: Vec<T>,
    pub errors: Vec<RowError>,
}

impl<T> ParsedTable<T> {
    /// Fails with the first row error, if any.
    pub fn into_strict(self, table: &'static str) -> Result<Vec<T>> {
        match self.errors.first() {
            None => Ok(self.rows),
            Some(first) => Err(Error::MalformedRows {
                table,
                count: self.errors.len(),
                first_row: first.row,
                first_message: first.message.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableData {
    Encounters(ParsedTable<EncounterRecord>),
    Medications(ParsedTable<MedicationEvent>),
    Labs(ParsedTable<LabOrderEvent>),
    Diagnoses(ParsedTable<DiagnosisEvent>),
}

impl TableData {
    pub fn errors(&self) -> &[RowError] {
        match self {
            TableData::Encounters(t) => &t.errors,
            TableData::Medications(t) => &t.errors,
            TableData::Labs(t) => &t.errors,
            TableData::Diagnoses(t) => &t.errors,
        }
    }
}

pub fn parse_table(path: &Path, kind: TableKind) -> Result<TableData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(match kind {
        TableKind::Encounters => TableData::Encounters(read_encounters(file)?),
        TableKind::Medications => TableData::Medications(read_medications(file)?),
        TableKind::Labs => TableData::Labs(read_labs(file)?),
        TableKind::Diagnoses => TableData::Diagnoses(read_diagnoses(file)?),
    })
}

/// Header lookup plus per-row cell accessors.
struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(table: &'static str, headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let index: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for col in required {
            if !index.contains_key(*col) {
                return Err(Error::MissingColumn {
                    table,
                    column: col.to_string(),
                });
            }
        }
        Ok(Columns { index })
    }

    fn cell<'r>(&self, record: &'r csv::StringRecord, col: &str) -> Option<&'r str> {
        let i = *self.index.get(col)?;
        record.get(i).map(str::trim).filter(|s| !s.is_empty())
    }

    fn patient(&self, record: &csv::StringRecord) -> Result<PatientId, String> {
        self.cell(record, "patient_id")
            .ok_or_else(|| "missing patient_id".to_string())
            .map(|s| PatientId(s.to_string()))
    }

    fn date(&self, record: &csv::StringRecord) -> Result<NaiveDate, String> {
        let raw = self.cell(record, "date").ok_or("missing date")?;
        NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| format!("invalid date `{raw}`"))
    }

    fn number(&self, record: &csv::StringRecord, col: &str) -> Result<Option<f64>, String> {
        match self.cell(record, col) {
            None => Ok(None),
            Some(raw) => match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(format!("unparseable numeric `{raw}` in column {col}")),
            },
        }
    }

    fn flag(&self, record: &csv::StringRecord, col: &str) -> Result<Option<bool>, String> {
        match self.cell(record, col) {
            None => Ok(None),
            Some("0") => Ok(Some(false)),
            Some("1") => Ok(Some(true)),
            Some(raw) => Err(format!("invalid flag `{raw}` in column {col} (expected 0 or 1)")),
        }
    }
}

fn read_rows<R: Read, T>(
    reader: R,
    kind: TableKind,
    required: &[&str],
    mut parse: impl FnMut(&Columns, &csv::StringRecord) -> Result<T, String>,
) -> Result<(ParsedTable<T>, Columns)> {
    let table = kind.name();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = Columns::new(table, &headers, required)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1, so the i-th data record sits on line i + 2
        let line = i + 2;
        let outcome = match record {
            Ok(record) => {
                if record.len() != headers.len() {
                    Err(format!(
                        "expected {} fields, found {}",
                        headers.len(),
                        record.len()
                    ))
                } else {
                    parse(&cols, &record)
                }
            }
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(row) => rows.push(row),
            Err(message) => errors.push(RowError {
                row: line,
                table: table.to_string(),
                message,
            }),
        }
    }
    Ok((ParsedTable { rows, errors }, cols))
}

pub fn read_encounters<R: Read>(reader: R) -> Result<ParsedTable<EncounterRecord>> {
    let header = TableKind::Encounters.header();
    let (table, _) = read_rows(reader, TableKind::Encounters, &header, |cols, rec| {
        let patient = cols.patient(rec)?;
        let date = cols.date(rec)?;
        let systolic = cols.number(rec, "systolic")?;
        let diastolic = cols.number(rec, "diastolic")?;
        if systolic.is_some_and(|v| v <= 0.0) || diastolic.is_some_and(|v| v <= 0.0) {
            return Err("blood pressure readings must be positive".into());
        }
        let mut vitals = BTreeMap::new();
        for name in VITAL_COLUMNS {
            if let Some(v) = cols.number(rec, name)? {
                vitals.insert(name.to_string(), v);
            }
        }
        let sex_raw = cols.cell(rec, "sex").unwrap_or("");
        let sex = Sex::from_code(sex_raw).ok_or_else(|| format!("unknown sex code `{sex_raw}`"))?;
        let age = cols.number(rec, "age")?.ok_or("missing age")?;
        if !(0.0..=130.0).contains(&age) {
            return Err(format!("age {age} outside [0, 130]"));
        }
        let mut demographics = BTreeMap::new();
        for name in DEMOGRAPHIC_COLUMNS {
            if let Some(v) = cols.cell(rec, name) {
                demographics.insert(name.to_string(), v.to_string());
            }
        }
        Ok(EncounterRecord {
            patient,
            date,
            systolic,
            diastolic,
            vitals,
            diagnosis_code: cols.cell(rec, "diagnosis_code").map(str::to_string),
            sex,
            age,
            demographics,
            deceased: cols.flag(rec, "deceased")?.unwrap_or(false),
        })
    })?;
    Ok(table)
}

pub fn read_medications<R: Read>(reader: R) -> Result<ParsedTable<MedicationEvent>> {
    let (table, _) = read_rows(
        reader,
        TableKind::Medications,
        &TableKind::Medications.header(),
        |cols, rec| {
            let drug = cols.cell(rec, "drug_name").ok_or("missing drug_name")?;
            Ok(MedicationEvent {
                patient: cols.patient(rec)?,
                date: cols.date(rec)?,
                drug_name: normalize_drug_name(drug),
            })
        },
    )?;
    Ok(table)
}

pub fn read_labs<R: Read>(reader: R) -> Result<ParsedTable<LabOrderEvent>> {
    let (table, _) = read_rows(reader, TableKind::Labs, &TableKind::Labs.header(), |cols, rec| {
        let panel = cols.cell(rec, "panel_name").ok_or("missing panel_name")?;
        Ok(LabOrderEvent {
            patient: cols.patient(rec)?,
            date: cols.date(rec)?,
            panel_name: panel.to_string(),
        })
    })?;
    Ok(table)
}

/// Reads `diagnoses.csv`. The `is_principal` column is optional; where a
/// (patient, date) group carries no explicit principal flag, the first-listed
/// code becomes principal. Exactly one principal survives per group.
pub fn read_diagnoses<R: Read>(reader: R) -> Result<ParsedTable<DiagnosisEvent>> {
    let (table, _) = read_rows(
        reader,
        TableKind::Diagnoses,
        &["patient_id", "date", "code"],
        |cols, rec| {
            let code = cols.cell(rec, "code").ok_or("missing code")?;
            Ok((
                DiagnosisEvent {
                    patient: cols.patient(rec)?,
                    date: cols.date(rec)?,
                    code: code.to_string(),
                    is_principal: false,
                },
                cols.flag(rec, "is_principal")?,
            ))
        },
    )?;

    let mut groups: HashMap<(PatientId, NaiveDate), Vec<usize>> = HashMap::new();
    for (i, (ev, _)) in table.rows.iter().enumerate() {
        groups
            .entry((ev.patient.clone(), ev.date))
            .or_default()
            .push(i);
    }
    let mut rows: Vec<DiagnosisEvent> = table.rows.iter().map(|(e, _)| e.clone()).collect();
    for members in groups.values() {
        let principal = members
            .iter()
            .copied()
            .find(|&i| table.rows[i].1 == Some(true))
            .unwrap_or(members[0]);
        rows[principal].is_principal = true;
    }
    Ok(ParsedTable {
        rows,
        errors: table.errors,
    })
}

pub(crate) fn fmt_number(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_number).unwrap_or_default()
}

fn write_csv<W: Write>(
    writer: W,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_encounters<W: Write>(writer: W, rows: &[EncounterRecord]) -> Result<()> {
    write_csv(
        writer,
        &TableKind::Encounters.header(),
        rows.iter().map(|r| {
            let mut out = vec![
                r.patient.to_string(),
                r.date.format("%Y-%m-%d").to_string(),
                fmt_opt(r.systolic),
                fmt_opt(r.diastolic),
            ];
            out.extend(VITAL_COLUMNS.iter().map(|c| fmt_opt(r.vital(c))));
            out.push(r.sex.code().to_string());
            out.push(fmt_number(r.age));
            out.extend(
                DEMOGRAPHIC_COLUMNS
                    .iter()
                    .map(|c| r.demographics.get(*c).cloned().unwrap_or_default()),
            );
            out.push(r.diagnosis_code.clone().unwrap_or_default());
            out.push(if r.deceased { "1" } else { "0" }.to_string());
            out
        }),
    )
}

pub fn write_medications<W: Write>(writer: W, rows: &[MedicationEvent]) -> Result<()> {
    write_csv(
        writer,
        &TableKind::Medications.header(),
        rows.iter().map(|r| {
            vec![
                r.patient.to_string(),
                r.date.format("%Y-%m-%d").to_string(),
                r.drug_name.clone(),
            ]
        }),
    )
}

pub fn write_labs<W: Write>(writer: W, rows: &[LabOrderEvent]) -> Result<()> {
    write_csv(
        writer,
        &TableKind::Labs.header(),
        rows.iter().map(|r| {
            vec![
                r.patient.to_string(),
                r.date.format("%Y-%m-%d").to_string(),
                r.panel_name.clone(),
            ]
        }),
    )
}

pub fn write_diagnoses<W: Write>(writer: W, rows: &[DiagnosisEvent]) -> Result<()> {
    write_csv(
        writer,
        &TableKind::Diagnoses.header(),
        rows.iter().map(|r| {
            vec![
                r.patient.to_string(),
                r.date.format("%Y-%m-%d").to_string(),
                r.code.clone(),
                if r.is_principal { "1" } else { "0" }.to_string(),
            ]
        }),
    )
}

/// The four source tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTables {
    pub encounters: Vec<EncounterRecord>,
    pub medications: Vec<MedicationEvent>,
    pub labs: Vec<LabOrderEvent>,
    pub diagnoses: Vec<DiagnosisEvent>,
}

impl RawTables {
    /// Writes the tables under their canonical file names.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |kind: TableKind| {
            let path = dir.join(kind.file_name());
            File::create(&path)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(path, e))
        };
        write_encounters(open(TableKind::Encounters)?, &self.encounters)?;
        write_medications(open(TableKind::Medications)?, &self.medications)?;
        write_labs(open(TableKind::Labs)?, &self.labs)?;
        write_diagnoses(open(TableKind::Diagnoses)?, &self.diagnoses)?;
        Ok(())
    }

    /// Reads all four tables from `dir`, keeping the valid rows and returning
    /// every row error alongside.
    pub fn read_dir(dir: &Path) -> Result<(RawTables, Vec<RowError>)> {
        let mut tables = RawTables::default();
        let mut errors = Vec::new();
        for kind in TableKind::ALL {
            let data = parse_table(&dir.join(kind.file_name()), kind)?;
            errors.extend(data.errors().iter().cloned());
            match data {
                TableData::Encounters(t) => tables.encounters = t.rows,
                TableData::Medications(t) => tables.medications = t.rows,
                TableData::Labs(t) => tables.labs = t.rows,
                TableData::Diagnoses(t) => tables.diagnoses = t.rows,
            }
        }
        Ok((tables, errors))
    }
}

/// Machine-readable parse report: `row,table,message`.
pub fn write_row_errors<W: Write>(writer: W, errors: &[RowError]) -> Result<()> {
    write_csv(
        writer,
        &["row", "table", "message"],
        errors
            .iter()
            .map(|e| vec![e.row.to_string(), e.table.clone(), e.message.clone()]),
    )
}
