use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{BiomarkerVector, Demographics, Normalizer, PatientRecord, Visit};
use crate::error::{Error, Result};

/// Segment id carried by the (first) pandemic-era target visit.
pub const TARGET_SEGMENT: u8 = 1;

/// Model-ready example: normalized pre-onset visits and the normalized panel
/// at the first visit on or after the onset date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub patient_id: String,
    pub inputs: Vec<Visit>,
    pub target: BiomarkerVector,
    pub demographics: Demographics,
    /// `positions[i] == i` for each input visit.
    pub positions: Vec<usize>,
    /// Segment id per input visit; 0 for every pre-onset visit.
    pub segments: Vec<u8>,
}

impl TrainingExample {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn make_example(p: &PatientRecord, onset: NaiveDate, norm: &Normalizer) -> Result<TrainingExample> {
    let first_post = p
        .first_onset_visit(onset)
        .ok_or_else(|| Error::NoPostOnsetVisits(p.patient_id.clone()))?;
    if first_post == 0 {
        return Err(Error::NoPreOnsetVisits(p.patient_id.clone()));
    }
    let inputs = p.visits[..first_post]
        .iter()
        .map(|v| Ok(Visit { date: v.date, biomarkers: norm.normalize_vector(&v.biomarkers)? }))
        .collect::<Result<Vec<_>>>()?;
    let target = norm.normalize_vector(&p.visits[first_post].biomarkers)?;
    let k = inputs.len();
    Ok(TrainingExample {
        patient_id: p.patient_id.clone(),
        inputs,
        target,
        demographics: p.demographics,
        positions: (0..k).collect(),
        segments: vec![0; k],
    })
}
