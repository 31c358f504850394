//! Cohort ingestion: CSV parsing, plausibility filtering, normalization,
//! patient-level splitting and construction of training examples.

mod example;
mod filter;
mod parse;
mod split;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use example::{make_example, TrainingExample, TARGET_SEGMENT};
pub use filter::filter_plausible;
pub use parse::{parse_cohort, write_cohort, CSV_HEADER};
pub use split::{split_cohort, CohortSplit};

/// Default pandemic onset date.
pub fn default_onset() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date")
}

/// The four prediction targets, in fixed column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Biomarker {
    SysBp,
    Bmi,
    Hba1c,
    Ldl,
}

/// Closed/half-open plausible interval for one biomarker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlausibleRange {
    pub lo: f64,
    pub hi: f64,
    /// Whether `lo` itself is plausible. Upper bounds are always inclusive.
    pub lo_inclusive: bool,
}

impl PlausibleRange {
    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_inclusive { v >= self.lo } else { v > self.lo };
        above && v <= self.hi
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

impl Biomarker {
    pub const ALL: [Biomarker; 4] = [Biomarker::SysBp, Biomarker::Bmi, Biomarker::Hba1c, Biomarker::Ldl];

    pub fn index(self) -> usize {
        self as usize
    }

    /// CSV column name.
    pub fn column(self) -> &'static str {
        match self {
            Biomarker::SysBp => "sysbp",
            Biomarker::Bmi => "bmi",
            Biomarker::Hba1c => "hba1c",
            Biomarker::Ldl => "ldl",
        }
    }

    /// Field token used in the serialized visit sentence and token labels.
    pub fn token(self) -> &'static str {
        match self {
            Biomarker::SysBp => "sys",
            Biomarker::Bmi => "bmi",
            Biomarker::Hba1c => "hba1c",
            Biomarker::Ldl => "chol",
        }
    }

    /// Display name used in result tables.
    pub fn display(self) -> &'static str {
        match self {
            Biomarker::SysBp => "SysBp",
            Biomarker::Bmi => "BMI",
            Biomarker::Hba1c => "HbA1c",
            Biomarker::Ldl => "LDL",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Biomarker::SysBp => "mmHg",
            Biomarker::Bmi => "kg/m2",
            Biomarker::Hba1c => "%",
            Biomarker::Ldl => "mg/dL",
        }
    }

    pub fn range(self) -> PlausibleRange {
        match self {
            Biomarker::SysBp => PlausibleRange { lo: 84.0, hi: 196.0, lo_inclusive: true },
            Biomarker::Bmi => PlausibleRange { lo: 15.0, hi: 100.0, lo_inclusive: true },
            Biomarker::Hba1c => PlausibleRange { lo: 4.0, hi: 14.0, lo_inclusive: false },
            Biomarker::Ldl => PlausibleRange { lo: 20.0, hi: 370.0, lo_inclusive: false },
        }
    }
}

impl fmt::Display for Biomarker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for Biomarker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Biomarker::ALL
            .into_iter()
            .find(|b| b.column() == s || b.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown biomarker `{s}`")))
    }
}

/// One visit's biomarker panel. Missing values are carried as NaN until
/// filtering removes the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerVector {
    pub sysbp: f64,
    pub bmi: f64,
    pub hba1c: f64,
    pub ldl: f64,
}

impl BiomarkerVector {
    pub fn from_array(a: [f64; 4]) -> Self {
        BiomarkerVector { sysbp: a[0], bmi: a[1], hba1c: a[2], ldl: a[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sysbp, self.bmi, self.hba1c, self.ldl]
    }

    pub fn get(&self, b: Biomarker) -> f64 {
        self.to_array()[b.index()]
    }

    pub fn is_plausible(&self) -> bool {
        Biomarker::ALL.iter().all(|b| b.range().contains(self.get(*b)))
    }
}

macro_rules! vocabulary {
    ($name:ident, $what:literal, [$($variant:ident => $label:literal),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                let s = s.trim();
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.label().eq_ignore_ascii_case(s))
                    .ok_or_else(|| format!("unknown {} `{}`", $what, s))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

vocabulary!(Gender, "gender", [Male => "male", Female => "female"]);
vocabulary!(Race, "race", [White => "white", Black => "black", Asian => "asian", Other => "other"]);
vocabulary!(IncomeClass, "income class", [
    LowerMiddle => "lower-middle",
    Middle => "middle",
    UpperMiddle => "upper-middle",
    Upper => "upper",
]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub race: Race,
    pub income_class: IncomeClass,
    /// Carried through ingestion; not an input to the model.
    pub age: u32,
}

/// Vocabulary indices for the three categorical demographic fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DemographicIndices {
    pub gender: usize,
    pub race: usize,
    pub income: usize,
}

pub fn encode_demographics(d: &Demographics) -> DemographicIndices {
    DemographicIndices {
        gender: d.gender.index(),
        race: d.race.index(),
        income: d.income_class.index(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub date: NaiveDate,
    pub biomarkers: BiomarkerVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    /// Index of the first visit dated on or after `onset`.
    pub fn first_onset_visit(&self, onset: NaiveDate) -> Option<usize> {
        self.visits.iter().position(|v| v.date >= onset)
    }
}

/// Min-max scaling against the fixed plausible ranges, optionally in log space
/// for selected biomarkers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    pub log_transform: [bool; 4],
}

impl Normalizer {
    fn bounds(&self, b: Biomarker) -> (f64, f64) {
        let r = b.range();
        if self.log_transform[b.index()] {
            (r.lo.ln(), r.hi.ln())
        } else {
            (r.lo, r.hi)
        }
    }

    pub fn normalize(&self, value: f64, b: Biomarker) -> Result<f64> {
        let r = b.range();
        // The lower bound is accepted here even where it is exclusive for
        // filtering, so that 0.0 stays in the domain of the inverse.
        if !(value >= r.lo && value <= r.hi) {
            return Err(Error::OutOfRange { biomarker: b.column(), value });
        }
        let (lo, hi) = self.bounds(b);
        let v = if self.log_transform[b.index()] { value.ln() } else { value };
        Ok(((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    pub fn denormalize(&self, value: f64, b: Biomarker) -> Result<f64> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange { biomarker: b.column(), value });
        }
        Ok(self.to_raw(value, b))
    }

    /// Inverse map without the range check, extrapolating outside [0, 1].
    /// Used for model outputs, which are not confined to the unit interval.
    pub fn to_raw(&self, value: f64, b: Biomarker) -> f64 {
        let (lo, hi) = self.bounds(b);
        let v = lo + value * (hi - lo);
        if self.log_transform[b.index()] {
            v.exp()
        } else {
            v
        }
    }

    /// Derivative of `to_raw` at `value`; converts normalized variances to raw
    /// units (exactly for the linear map, to first order in log space).
    pub fn raw_slope(&self, value: f64, b: Biomarker) -> f64 {
        let (lo, hi) = self.bounds(b);
        if self.log_transform[b.index()] {
            self.to_raw(value, b) * (hi - lo)
        } else {
            hi - lo
        }
    }

    pub fn normalize_vector(&self, v: &BiomarkerVector) -> Result<BiomarkerVector> {
        let mut out = [0.0; 4];
        for b in Biomarker::ALL {
            out[b.index()] = self.normalize(v.get(b), b)?;
        }
        Ok(BiomarkerVector::from_array(out))
    }

    pub fn denormalize_vector(&self, v: &BiomarkerVector) -> Result<BiomarkerVector> {
        let mut out = [0.0; 4];
        for b in Biomarker::ALL {
            out[b.index()] = self.denormalize(v.get(b), b)?;
        }
        Ok(BiomarkerVector::from_array(out))
    }
}

/// Linear min-max normalization against the plausible range.
pub fn normalize(value: f64, b: Biomarker) -> Result<f64> {
    Normalizer::default().normalize(value, b)
}

pub fn denormalize(value: f64, b: Biomarker) -> Result<f64> {
    Normalizer::default().denormalize(value, b)
}
