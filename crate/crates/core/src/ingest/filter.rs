use chrono::NaiveDate;

use super::PatientRecord;

/// Drops implausible or incomplete visits, then patients that lack either a
/// pre-onset or an on/after-onset visit. Returns the kept cohort and the
/// number of removed visits plus removed patients.
pub fn filter_plausible(cohort: Vec<PatientRecord>, onset: NaiveDate) -> (Vec<PatientRecord>, usize) {
    let mut dropped = 0;
    let mut kept = Vec::with_capacity(cohort.len());
    for mut p in cohort {
        let before = p.visits.len();
        p.visits.retain(|v| v.biomarkers.is_plausible());
        dropped += before - p.visits.len();

        let has_pre = p.visits.iter().any(|v| v.date < onset);
        let has_post = p.visits.iter().any(|v| v.date >= onset);
        if has_pre && has_post {
            kept.push(p);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}
