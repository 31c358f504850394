use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::NaiveDate;

use super::{BiomarkerVector, Demographics, PatientRecord, Visit};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "patient_id",
    "visit_date",
    "sysbp",
    "bmi",
    "hba1c",
    "ldl",
    "gender",
    "race",
    "income_class",
    "age",
];

fn is_null(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || ["na", "nan", "null", "none"].iter().any(|n| f.eq_ignore_ascii_case(n))
}

fn parse_value(field: &str, column: &str, line: u64) -> Result<f64> {
    if is_null(field) {
        return Ok(f64::NAN);
    }
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("column `{column}`: cannot parse `{field}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("column `{column}`: non-finite value") });
    }
    Ok(v)
}

fn parse_field<T: std::str::FromStr<Err = String>>(field: &str, line: u64) -> Result<T> {
    field.parse().map_err(|message| Error::Parse { line, message })
}

/// Parses the cohort CSV. Rows are grouped by `patient_id` in order of first
/// appearance; visits are sorted by date with ties kept in input order.
/// Null biomarker fields become NaN and are removed by [`filter_plausible`].
///
/// [`filter_plausible`]: super::filter_plausible
pub fn parse_cohort<R: Read>(input: R) -> Result<Vec<PatientRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);

    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut patients: HashMap<String, PatientRecord> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", CSV_HEADER.len(), record.len()),
            });
        }
        let patient_id = record[0].trim().to_string();
        if patient_id.is_empty() {
            return Err(Error::Parse { line, message: "empty patient_id".into() });
        }
        let date = NaiveDate::parse_from_str(record[1].trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("column `visit_date`: `{}`: {e}", &record[1]),
        })?;
        let biomarkers = BiomarkerVector {
            sysbp: parse_value(&record[2], "sysbp", line)?,
            bmi: parse_value(&record[3], "bmi", line)?,
            hba1c: parse_value(&record[4], "hba1c", line)?,
            ldl: parse_value(&record[5], "ldl", line)?,
        };
        let age: u32 = record[9].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("column `age`: cannot parse `{}` as an integer", &record[9]),
        })?;
        let demographics = Demographics {
            gender: parse_field(&record[6], line)?,
            race: parse_field(&record[7], line)?,
            income_class: parse_field(&record[8], line)?,
            age,
        };

        let visit = Visit { date, biomarkers };
        match patients.get_mut(&patient_id) {
            Some(p) => {
                if p.demographics != demographics {
                    return Err(Error::InconsistentDemographics { patient_id, line });
                }
                p.visits.push(visit);
            }
            None => {
                order.push(patient_id.clone());
                patients.insert(
                    patient_id.clone(),
                    PatientRecord { patient_id, demographics, visits: vec![visit] },
                );
            }
        }
    }

    Ok(order
        .into_iter()
        .map(|id| {
            let mut p = patients.remove(&id).expect("grouped patient");
            p.visits.sort_by_key(|v| v.date);
            p
        })
        .collect())
}

/// Writes a cohort in the ingestion schema. Values are written with Rust's
/// shortest round-trip float formatting so parsing recovers them exactly.
pub fn write_cohort<W: Write>(out: W, cohort: &[PatientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for p in cohort {
        let d = &p.demographics;
        for v in &p.visits {
            let b = v.biomarkers;
            w.write_record([
                p.patient_id.clone(),
                v.date.format("%Y-%m-%d").to_string(),
                b.sysbp.to_string(),
                b.bmi.to_string(),
                b.hba1c.to_string(),
                b.ldl.to_string(),
                d.gender.to_string(),
                d.race.to_string(),
                d.income_class.to_string(),
                d.age.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
